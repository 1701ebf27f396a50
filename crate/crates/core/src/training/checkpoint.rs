//! Checkpoint files: parameters, model config, content catalog and the
//! optional optimizer/trainer state.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::embeddings::{ContentCatalog, ContentEntry};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::payload::{read_params, restore_params, write_params, PayloadReader, PayloadWriter};
use crate::numeric::AdamState;

/// Optimizer and loop state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub best_auc: f64,
    pub stale_evals: u32,
    pub adam: AdamState,
}

pub struct Checkpoint {
    pub model: Model,
    pub trainer: Option<TrainerState>,
}

pub(crate) fn write_catalog(w: &mut PayloadWriter, c: &ContentCatalog) {
    w.u64(c.num_parts as u64);
    w.u64(c.num_kinds as u64);
    w.u64(c.num_tags as u64);
    w.f64(c.popularity_max);
    w.u64(c.entries.len() as u64);
    let opt = |w: &mut PayloadWriter, v: Option<f64>| match v {
        Some(x) => {
            w.u32(1);
            w.f64(x);
        }
        None => w.u32(0),
    };
    for e in &c.entries {
        w.u32(e.kind as u32);
        w.u32(e.part as u32);
        w.u32(e.tags.len() as u32);
        for &t in &e.tags {
            w.u32(t as u32);
        }
        opt(w, e.popularity);
        opt(w, e.difficulty);
    }
}

pub(crate) fn read_catalog(r: &mut PayloadReader<'_>) -> Result<ContentCatalog> {
    let num_parts = r.u64()? as usize;
    let num_kinds = r.u64()? as usize;
    let num_tags = r.u64()? as usize;
    let popularity_max = r.f64()?;
    let n = r.u64()? as usize;
    if n == 0 {
        return Err(Error::Checkpoint("catalog without a padding row".into()));
    }
    let opt = |r: &mut PayloadReader<'_>| -> Result<Option<f64>> {
        match r.u32()? {
            0 => Ok(None),
            1 => Ok(Some(r.f64()?)),
            f => Err(Error::Checkpoint(format!("bad option flag {f}"))),
        }
    };
    let mut entries = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let kind = r.u32()? as usize;
        let part = r.u32()? as usize;
        let nt = r.u32()? as usize;
        let mut tags = Vec::with_capacity(nt.min(64));
        for _ in 0..nt {
            tags.push(r.u32()? as usize);
        }
        entries.push(ContentEntry {
            kind,
            part,
            tags,
            popularity: opt(r)?,
            difficulty: opt(r)?,
        });
    }
    Ok(ContentCatalog {
        entries,
        num_parts,
        num_kinds,
        num_tags,
        popularity_max,
    })
}

pub fn encode_checkpoint(model: &Model, trainer: Option<&TrainerState>) -> Vec<u8> {
    let mut w = PayloadWriter::new();
    write_params(&mut w, &model.store, &model.digest());
    w.str(&model.config.canonical());
    write_catalog(&mut w, &model.catalog);
    match trainer {
        None => w.u32(0),
        Some(t) => {
            w.u32(1);
            w.u64(t.step);
            w.f64(t.best_auc);
            w.u32(t.stale_evals);
            w.u64(t.adam.step);
            w.f64(t.adam.beta1);
            w.f64(t.adam.beta2);
            w.f64(t.adam.eps);
            w.u32(t.adam.first.len() as u32);
            for m in t.adam.first.iter().chain(&t.adam.second) {
                w.tensor(m);
            }
        }
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = PayloadReader::new(bytes);
    let (digest, tensors) = read_params(&mut r)?;
    let config =
        ModelConfig::from_canonical(&r.str()?).map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
    let catalog = read_catalog(&mut r)?;
    let mut model = Model::new(config, catalog, 0)?;
    if model.digest() != digest {
        return Err(Error::Checkpoint("stored digest does not match stored config".into()));
    }
    restore_params(&mut model.store, tensors)?;
    let trainer = match r.u32()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let best_auc = r.f64()?;
            let stale_evals = r.u32()?;
            let adam_step = r.u64()?;
            let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
            let n = r.u32()? as usize;
            if n != model.store.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state covers {n} parameters, model has {}",
                    model.store.len()
                )));
            }
            let mut moments = Vec::with_capacity(2 * n);
            for i in 0..2 * n {
                let t = r.tensor()?;
                let p = &model.store.params()[i % n];
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment for `{}` misshaped",
                        p.name
                    )));
                }
                moments.push(t);
            }
            let second = moments.split_off(n);
            Some(TrainerState {
                step,
                best_auc,
                stale_evals,
                adam: AdamState {
                    first: moments,
                    second,
                    step: adam_step,
                    beta1,
                    beta2,
                    eps,
                },
            })
        }
        f => return Err(Error::Checkpoint(format!("bad trainer flag {f}"))),
    };
    r.expect_end()?;
    Ok(Checkpoint { model, trainer })
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(path: &Path, model: &Model, trainer: Option<&TrainerState>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, trainer))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads and refuses a checkpoint built for a different config or data.
pub fn load_checkpoint_expecting(path: &Path, expected_digest: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let stored = ck.model.digest();
    if stored != expected_digest {
        return Err(Error::DigestMismatch {
            stored,
            expected: expected_digest.to_string(),
        });
    }
    Ok(ck)
}

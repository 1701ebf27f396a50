//! The prepared-data directory: end-to-end ingest output written as binary
//! shards plus a plain-text manifest with counts and digests.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{parse_f64, parse_kv, parse_u64, parse_usize};
use crate::embeddings::ContentCatalog;
use crate::error::{Error, Result};
use crate::ingest::{
    build_encodings, compute_content_stats, group_by_user, parse_interactions, parse_metadata, ContentStats,
    LectureMeta, QuestionMeta, RawInteraction, UserSequence,
};
use crate::numeric::payload::{PayloadReader, PayloadWriter};
use crate::training::checkpoint::{read_catalog, write_atomic, write_catalog};
use crate::training::{split_train_validation, ValidationSequence};

pub const SHARD_MAGIC: &[u8; 4] = b"KTF1";
pub const MANIFEST: &str = "manifest.txt";
const CATALOG_SHARD: &str = "catalog.bin";
const TRAIN_SHARD: &str = "train.bin";
const VALID_SHARD: &str = "valid.bin";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrepareOptions {
    pub holdout_fraction: f64,
    pub new_user_fraction: f64,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            holdout_fraction: 0.025,
            new_user_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Counts and digests describing a prepared directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub users: usize,
    pub rows: usize,
    pub questions: usize,
    pub lectures: usize,
    pub train_users: usize,
    pub train_rows: usize,
    pub valid_users: usize,
    pub valid_rows: usize,
    pub options: PrepareOptions,
    /// `(name, sha256)` of each raw input file.
    pub inputs: Vec<(String, String)>,
    /// `(file, sha256)` of each shard.
    pub shards: Vec<(String, String)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!(
            "format=KTF1\nusers={}\nrows={}\nquestions={}\nlectures={}\ntrain_users={}\ntrain_rows={}\n\
             valid_users={}\nvalid_rows={}\nholdout_fraction={}\nnew_user_fraction={}\nseed={}\n",
            self.users,
            self.rows,
            self.questions,
            self.lectures,
            self.train_users,
            self.train_rows,
            self.valid_users,
            self.valid_rows,
            self.options.holdout_fraction,
            self.options.new_user_fraction,
            self.options.seed
        );
        for (name, d) in &self.inputs {
            s.push_str(&format!("input.{name}={d}\n"));
        }
        for (name, d) in &self.shards {
            s.push_str(&format!("shard.{name}={d}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest {
            users: 0,
            rows: 0,
            questions: 0,
            lectures: 0,
            train_users: 0,
            train_rows: 0,
            valid_users: 0,
            valid_rows: 0,
            options: PrepareOptions::default(),
            inputs: Vec::new(),
            shards: Vec::new(),
        };
        let mut format = None;
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "format" => format = Some(v),
                "users" => m.users = parse_usize(&k, &v)?,
                "rows" => m.rows = parse_usize(&k, &v)?,
                "questions" => m.questions = parse_usize(&k, &v)?,
                "lectures" => m.lectures = parse_usize(&k, &v)?,
                "train_users" => m.train_users = parse_usize(&k, &v)?,
                "train_rows" => m.train_rows = parse_usize(&k, &v)?,
                "valid_users" => m.valid_users = parse_usize(&k, &v)?,
                "valid_rows" => m.valid_rows = parse_usize(&k, &v)?,
                "holdout_fraction" => m.options.holdout_fraction = parse_f64(&k, &v)?,
                "new_user_fraction" => m.options.new_user_fraction = parse_f64(&k, &v)?,
                "seed" => m.options.seed = parse_u64(&k, &v)?,
                _ => {
                    if let Some(name) = k.strip_prefix("input.") {
                        m.inputs.push((name.to_string(), v));
                    } else if let Some(name) = k.strip_prefix("shard.") {
                        m.shards.push((name.to_string(), v));
                    } else {
                        return Err(Error::Format(format!("unknown manifest key `{k}`")));
                    }
                }
            }
        }
        if format.as_deref() != Some("KTF1") {
            return Err(Error::Format("manifest is not a KTF1 manifest".into()));
        }
        Ok(m)
    }
}

/// Everything training, evaluation and simulation need.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub catalog: ContentCatalog,
    pub stats: ContentStats,
    pub train: Vec<UserSequence>,
    pub valid: Vec<ValidationSequence>,
    pub manifest: Manifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Runs ingest on the three raw CSVs and splits off the validation set.
/// Question statistics come from the training rows only.
pub fn prepare(
    train_csv: &Path,
    questions_csv: &Path,
    lectures_csv: &Path,
    opts: PrepareOptions,
) -> Result<PreparedData> {
    for p in [train_csv, questions_csv, lectures_csv] {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
    }
    let (questions, lectures) = parse_metadata(questions_csv, lectures_csv)?;
    let interactions = parse_interactions(train_csv)?;
    let mut data = prepare_parsed(&interactions, &questions, &lectures, opts)?;
    data.manifest.inputs = vec![
        ("train".into(), file_digest(train_csv)?),
        ("questions".into(), file_digest(questions_csv)?),
        ("lectures".into(), file_digest(lectures_csv)?),
    ];
    Ok(data)
}

/// The same pipeline on already parsed rows; the manifest lists no inputs.
pub fn prepare_parsed(
    interactions: &[RawInteraction],
    questions: &[QuestionMeta],
    lectures: &[LectureMeta],
    opts: PrepareOptions,
) -> Result<PreparedData> {
    let enc = build_encodings(questions, lectures);
    let users = group_by_user(interactions, &enc)?;
    let n_users = users.len();
    let (train, valid) = split_train_validation(users, opts.holdout_fraction, opts.new_user_fraction, opts.seed)?;

    let train_ids: HashSet<i64> = train.iter().flat_map(|s| s.row_id.iter().copied()).collect();
    let train_rows: Vec<_> = interactions
        .iter()
        .filter(|r| train_ids.contains(&r.row_id))
        .cloned()
        .collect();
    let stats = compute_content_stats(&train_rows);
    let catalog = ContentCatalog::build(&enc, questions, lectures, &stats)?;

    let manifest = Manifest {
        users: n_users,
        rows: interactions.len(),
        questions: questions.len(),
        lectures: lectures.len(),
        train_users: train.len(),
        train_rows: train_rows.len(),
        valid_users: valid.len(),
        valid_rows: valid.iter().map(|v| v.seq.len() - v.start).sum(),
        options: opts,
        inputs: Vec::new(),
        shards: Vec::new(),
    };
    Ok(PreparedData {
        catalog,
        stats,
        train,
        valid,
        manifest,
    })
}

fn write_sequence(w: &mut PayloadWriter, s: &UserSequence) {
    w.u64(s.user_id as u64);
    w.u64(s.len() as u64);
    for i in 0..s.len() {
        w.u64(s.row_id[i] as u64);
        w.u32(s.content[i]);
        w.u32(s.is_lecture[i] as u32);
        w.u64(s.timestamp[i] as u64);
        w.u64(s.task_container_id[i] as u64);
        w.u64(s.time_lag[i] as u64);
        w.u32(s.answered_correctly[i] as u32);
        w.u32(s.user_answer[i] as u32);
        w.u64(s.elapsed_time[i].map_or(u64::MAX, |e| e as u64));
        w.u32(s.had_explanation[i] as u32);
    }
}

fn small(v: u32, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Format(format!("{what} value {v} out of range")))
}

fn read_sequence(r: &mut PayloadReader<'_>) -> Result<UserSequence> {
    let mut s = UserSequence {
        user_id: r.u64()? as i64,
        ..Default::default()
    };
    let n = r.u64()? as usize;
    for _ in 0..n {
        s.row_id.push(r.u64()? as i64);
        s.content.push(r.u32()?);
        s.is_lecture.push(r.u32()? != 0);
        s.timestamp.push(r.u64()? as i64);
        s.task_container_id.push(r.u64()? as i64);
        s.time_lag.push(r.u64()? as i64);
        s.answered_correctly.push(small(r.u32()?, "answered_correctly")?);
        s.user_answer.push(small(r.u32()?, "user_answer")?);
        let e = r.u64()?;
        s.elapsed_time.push((e != u64::MAX).then_some(e as i64));
        s.had_explanation.push(small(r.u32()?, "had_explanation")?);
    }
    Ok(s)
}

fn shard(kind: &str) -> PayloadWriter {
    let mut w = PayloadWriter::new();
    w.bytes(SHARD_MAGIC);
    w.str(kind);
    w
}

fn open_shard<'a>(bytes: &'a [u8], kind: &str, file: &str) -> Result<PayloadReader<'a>> {
    let mut r = PayloadReader::new(bytes);
    let ok = r.take(4).map(|m| m == SHARD_MAGIC).unwrap_or(false) && r.str().map(|k| k == kind).unwrap_or(false);
    if !ok {
        return Err(Error::Format(format!("{file}: not a {kind} shard")));
    }
    Ok(r)
}

/// Writes shards and the manifest into `dir`; returns the manifest with
/// shard digests filled in.
pub fn save_prepared(dir: &Path, data: &PreparedData) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = shard("catalog");
    write_catalog(&mut w, &data.catalog);
    let raw: Vec<_> = data.stats.raw().collect();
    w.u64(raw.len() as u64);
    for (q, rows, answered, incorrect) in raw {
        w.u64(q as u64);
        w.u64(rows);
        w.u64(answered);
        w.u64(incorrect);
    }
    let catalog = w.finish();

    let mut w = shard("train");
    w.u64(data.train.len() as u64);
    for s in &data.train {
        write_sequence(&mut w, s);
    }
    let train = w.finish();

    let mut w = shard("valid");
    w.u64(data.valid.len() as u64);
    for v in &data.valid {
        w.u64(v.start as u64);
        write_sequence(&mut w, &v.seq);
    }
    let valid = w.finish();

    let mut manifest = data.manifest.clone();
    manifest.shards.clear();
    for (name, bytes) in [(CATALOG_SHARD, catalog), (TRAIN_SHARD, train), (VALID_SHARD, valid)] {
        write_atomic(&dir.join(name), &bytes)?;
        manifest.shards.push((name.to_string(), sha256_hex(&bytes)));
    }
    write_atomic(&dir.join(MANIFEST), manifest.render().as_bytes())?;
    Ok(manifest)
}

/// Reads a prepared directory, checking every shard against its digest.
pub fn load_prepared(dir: &Path) -> Result<PreparedData> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::parse(&text)?;
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let want = manifest
            .shards
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("manifest does not list {name}")))?;
        if sha256_hex(&bytes) != want.1 {
            return Err(Error::Format(format!("{name}: digest does not match the manifest")));
        }
        Ok(bytes)
    };
    let fmt = |name: &'static str| move |e: Error| Error::Format(format!("{name}: {e}"));

    let bytes = read(CATALOG_SHARD)?;
    let mut r = open_shard(&bytes, "catalog", CATALOG_SHARD)?;
    let catalog = read_catalog(&mut r).map_err(fmt(CATALOG_SHARD))?;
    let n = r.u64().map_err(fmt(CATALOG_SHARD))? as usize;
    let mut raw = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let mut next = || r.u64().map_err(fmt(CATALOG_SHARD));
        raw.push((next()? as i64, next()?, next()?, next()?));
    }
    r.expect_end().map_err(fmt(CATALOG_SHARD))?;
    let stats = ContentStats::from_raw(raw);

    let bytes = read(TRAIN_SHARD)?;
    let mut r = open_shard(&bytes, "train", TRAIN_SHARD)?;
    let n = r.u64().map_err(fmt(TRAIN_SHARD))? as usize;
    let mut train = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        train.push(read_sequence(&mut r).map_err(fmt(TRAIN_SHARD))?);
    }
    r.expect_end().map_err(fmt(TRAIN_SHARD))?;

    let bytes = read(VALID_SHARD)?;
    let mut r = open_shard(&bytes, "valid", VALID_SHARD)?;
    let n = r.u64().map_err(fmt(VALID_SHARD))? as usize;
    let mut valid = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let start = r.u64().map_err(fmt(VALID_SHARD))? as usize;
        let seq = read_sequence(&mut r).map_err(fmt(VALID_SHARD))?;
        if start > seq.len() {
            return Err(Error::Format(format!("{VALID_SHARD}: split point past the end")));
        }
        valid.push(ValidationSequence { seq, start });
    }
    r.expect_end().map_err(fmt(VALID_SHARD))?;

    Ok(PreparedData {
        catalog,
        stats,
        train,
        valid,
        manifest,
    })
}

//! Input embeddings: categorical lookups, windowed continuous embeddings,
//! the content-metadata table and the encoder/decoder input composition.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::{ContentKind, ContentStats, ContentType, EncodingMaps, LectureMeta, QuestionMeta};
use crate::numeric::kernels::{add_into, put_cols, take_cols};
use crate::numeric::ops::{
    affine_rows, affine_rows_backward, layer_norm_rows, layer_norm_rows_backward, LayerNormCache,
};
use crate::numeric::params::truncated_normal;
use crate::numeric::{Grads, ParamId, ParamStore, Tensor};
use crate::sequences::TrainingWindow;

pub const INIT_STD: f64 = 0.02;

// ---------------------------------------------------------------- lookup

/// Plain lookup table. Index 0 is padding and always yields zeros.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(name, truncated_normal(rng, &[vocab, dim], INIT_STD));
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, store: &ParamStore, idx: &[usize]) -> Result<Vec<f64>> {
        let t = store.value(self.table);
        let mut out = vec![0.0; idx.len() * self.dim];
        for (o, &i) in out.chunks_mut(self.dim).zip(idx) {
            if i >= self.vocab {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.vocab,
                });
            }
            if i != 0 {
                o.copy_from_slice(&t[i * self.dim..(i + 1) * self.dim]);
            }
        }
        Ok(out)
    }

    /// Scatter-adds `dy` rows into the table gradient.
    pub fn backward(&self, idx: &[usize], dy: &[f64], grads: &mut Grads) {
        let g = grads.get_mut(self.table);
        for (d, &i) in dy.chunks(self.dim).zip(idx) {
            if i != 0 {
                for (a, b) in g[i * self.dim..(i + 1) * self.dim].iter_mut().zip(d) {
                    *a += b;
                }
            }
        }
    }
}

// ---------------------------------------------------------------- continuous

/// Map from a non-negative feature value to a fractional table row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IndexMap {
    /// `(V-1) · ln(1 + min(x, x_max)) / ln(1 + x_max)`
    Log { x_max: f64 },
    /// `(V-1) · min(x, x_max) / x_max`
    Linear { x_max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContinuousInput {
    Pad,
    Missing,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousSpec {
    pub vocab: usize,
    /// Odd window size; the kernel half-width is `(window + 1) / 2`.
    pub window: usize,
    pub map: IndexMap,
    /// `false` selects the bucketed baseline: a single row at `round(φ(x))`.
    pub smooth: bool,
}

impl ContinuousSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!(
                "continuous vocab must be >= 2, got {}",
                self.vocab
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window size must be odd and >= 1, got {}",
                self.window
            )));
        }
        let x_max = match self.map {
            IndexMap::Log { x_max } | IndexMap::Linear { x_max } => x_max,
        };
        if !(x_max > 0.0 && x_max.is_finite()) {
            return Err(Error::Config(format!("x_max must be positive, got {x_max}")));
        }
        Ok(())
    }

    /// Fractional row `φ(x)` in `[0, V-1]`.
    pub fn position(&self, x: f64) -> f64 {
        let top = (self.vocab - 1) as f64;
        match self.map {
            IndexMap::Log { x_max } => top * (1.0 + x.min(x_max)).ln() / (1.0 + x_max).ln(),
            IndexMap::Linear { x_max } => top * x.min(x_max) / x_max,
        }
    }

    /// Normalized `(row, weight)` pairs for fractional position `c`.
    ///
    /// Triangular kernel `max(0, 1 - |c - r| / h)` over integer rows within
    /// `h` of `c`; rows beyond the table edge fold onto the edge row so the
    /// normalizer stays constant.
    pub fn kernel(&self, c: f64) -> Vec<(usize, f64)> {
        let top = self.vocab - 1;
        if !self.smooth {
            return vec![((c.round() as usize).min(top), 1.0)];
        }
        let h = self.window.div_ceil(2) as f64;
        let lo = (c - h).ceil() as i64;
        let hi = (c + h).floor() as i64;
        let mut out: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
        let mut total = 0.0;
        for r in lo..=hi {
            let k = 1.0 - (c - r as f64).abs() / h;
            if k <= 0.0 {
                continue;
            }
            total += k;
            let row = r.clamp(0, top as i64) as usize;
            match out.last_mut() {
                Some(last) if last.0 == row => last.1 += k,
                _ => out.push((row, k)),
            }
        }
        for w in &mut out {
            w.1 /= total;
        }
        out
    }
}

/// Kernel-weighted sum over consecutive rows of an embedding table, with a
/// separate learned row for missing values.
#[derive(Clone, Debug)]
pub struct ContinuousEmbedding {
    pub table: ParamId,
    pub na_row: ParamId,
    pub spec: ContinuousSpec,
    pub dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ContinuousCache {
    /// Per position: `(row, weight)` pairs; `usize::MAX` marks the N/A row.
    weights: Vec<Vec<(usize, f64)>>,
}

const NA_ROW: usize = usize::MAX;

impl ContinuousEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ContinuousSpec,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let table = store.add(
            format!("{name}.table"),
            truncated_normal(rng, &[spec.vocab, dim], INIT_STD),
        );
        let na_row = store.add(format!("{name}.na"), truncated_normal(rng, &[1, dim], INIT_STD));
        Ok(ContinuousEmbedding {
            table,
            na_row,
            spec,
            dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, xs: &[ContinuousInput]) -> Result<(Vec<f64>, ContinuousCache)> {
        let t = store.value(self.table);
        let na = store.value(self.na_row);
        let d = self.dim;
        let mut out = vec![0.0; xs.len() * d];
        let mut weights = Vec::with_capacity(xs.len());
        for (o, x) in out.chunks_mut(d).zip(xs) {
            let w = match *x {
                ContinuousInput::Pad => Vec::new(),
                ContinuousInput::Missing => {
                    o.copy_from_slice(na);
                    vec![(NA_ROW, 1.0)]
                }
                ContinuousInput::Value(v) => {
                    if v < 0.0 || v.is_nan() {
                        return Err(Error::NegativeInput(v));
                    }
                    let w = self.spec.kernel(self.spec.position(v));
                    for &(r, k) in &w {
                        for (a, b) in o.iter_mut().zip(&t[r * d..(r + 1) * d]) {
                            *a += k * b;
                        }
                    }
                    w
                }
            };
            weights.push(w);
        }
        Ok((out, ContinuousCache { weights }))
    }

    pub fn backward(&self, cache: &ContinuousCache, dy: &[f64], grads: &mut Grads) {
        let d = self.dim;
        for (g, w) in dy.chunks(d).zip(&cache.weights) {
            for &(r, k) in w {
                let dst = if r == NA_ROW {
                    &mut grads.get_mut(self.na_row)[..d]
                } else {
                    &mut grads.get_mut(self.table)[r * d..(r + 1) * d]
                };
                for (a, b) in dst.iter_mut().zip(g) {
                    *a += k * b;
                }
            }
        }
    }
}

// ---------------------------------------------------------------- content

/// Non-trainable metadata for each content index (row 0 is padding).
#[derive(Clone, Debug, PartialEq)]
pub struct ContentCatalog {
    pub entries: Vec<ContentEntry>,
    pub num_parts: usize,
    pub num_kinds: usize,
    pub num_tags: usize,
    pub popularity_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentEntry {
    pub kind: usize,
    pub part: usize,
    pub tags: Vec<usize>,
    /// Attempt count and smoothed error rate; `None` for lectures.
    pub popularity: Option<f64>,
    pub difficulty: Option<f64>,
}

impl ContentCatalog {
    pub fn build(
        enc: &EncodingMaps,
        questions: &[QuestionMeta],
        lectures: &[LectureMeta],
        stats: &ContentStats,
    ) -> Result<Self> {
        let pad = ContentEntry {
            kind: 0,
            part: 0,
            tags: Vec::new(),
            popularity: None,
            difficulty: None,
        };
        let mut entries = vec![pad; enc.num_contents() + 1];
        let mut filled = vec![false; entries.len()];
        for q in questions {
            let i = enc
                .content_index(ContentType::Question, q.question_id)
                .ok_or(Error::UnknownContent {
                    id: q.question_id,
                    kind: "question",
                })?;
            entries[i] = ContentEntry {
                kind: enc.kind.encode(Some(&ContentKind::Question)).unwrap(),
                part: enc.part.encode(Some(&q.part)).unwrap_or(enc.part.na()),
                tags: q
                    .tags
                    .iter()
                    .map(|t| enc.tag.encode(Some(t)).unwrap_or(enc.tag.na()))
                    .collect(),
                popularity: Some(stats.popularity(q.question_id) as f64),
                difficulty: Some(stats.difficulty(q.question_id)),
            };
            filled[i] = true;
        }
        for l in lectures {
            let i = enc
                .content_index(ContentType::Lecture, l.lecture_id)
                .ok_or(Error::UnknownContent {
                    id: l.lecture_id,
                    kind: "lecture",
                })?;
            entries[i] = ContentEntry {
                kind: enc.kind.encode(Some(&ContentKind::Lecture(l.type_of))).unwrap(),
                part: enc.part.encode(Some(&l.part)).unwrap_or(enc.part.na()),
                tags: vec![enc.tag.encode(Some(&l.tag)).unwrap_or(enc.tag.na())],
                popularity: None,
                difficulty: None,
            };
            filled[i] = true;
        }
        if let Some(i) = filled.iter().skip(1).position(|f| !f) {
            let key = enc.content_key(i + 1).unwrap();
            return Err(Error::UnknownContent {
                id: key.id,
                kind: "content without metadata",
            });
        }
        Ok(ContentCatalog {
            entries,
            num_parts: enc.part.vocab_size(),
            num_kinds: enc.kind.vocab_size(),
            num_tags: enc.tag.vocab_size(),
            popularity_max: (stats.max_popularity() as f64).max(1.0),
        })
    }

    pub fn num_contents(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn entry(&self, idx: usize) -> Result<&ContentEntry> {
        if idx == 0 || idx >= self.entries.len() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: self.entries.len(),
            });
        }
        Ok(&self.entries[idx])
    }
}

/// Widths of the slots concatenated into a content row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContentDims {
    pub id: usize,
    pub part: usize,
    pub kind: usize,
    pub tags: usize,
    pub popularity: usize,
    pub difficulty: usize,
}

impl ContentDims {
    pub fn total(&self) -> usize {
        self.id + self.part + self.kind + self.tags + self.popularity + self.difficulty
    }
}

impl Default for ContentDims {
    fn default() -> Self {
        ContentDims {
            id: 64,
            part: 16,
            kind: 16,
            tags: 64,
            popularity: 32,
            difficulty: 32,
        }
    }
}

/// Content embedding: concatenation of id, part, kind, mean tag,
/// popularity and difficulty embeddings, then a per-row layer norm.
#[derive(Clone, Debug)]
pub struct ContentEmbedding {
    pub id: Embedding,
    pub part: Embedding,
    pub kind: Embedding,
    pub tag: Embedding,
    pub popularity: ContinuousEmbedding,
    pub difficulty: ContinuousEmbedding,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub layer_norm: bool,
    pub dims: ContentDims,
}

#[derive(Clone, Debug)]
pub struct ContentCache {
    positions: Vec<usize>,
    ids: Vec<usize>,
    parts: Vec<usize>,
    kinds: Vec<usize>,
    tags: Vec<Vec<usize>>,
    popularity: ContinuousCache,
    difficulty: ContinuousCache,
    ln: Option<LayerNormCache>,
}

impl ContentEmbedding {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        catalog: &ContentCatalog,
        dims: ContentDims,
        window: usize,
        popularity_vocab: usize,
        difficulty_vocab: usize,
        smooth: bool,
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let id = Embedding::new(store, "content.id", catalog.num_contents() + 1, dims.id, rng);
        let part = Embedding::new(store, "content.part", catalog.num_parts, dims.part, rng);
        let kind = Embedding::new(store, "content.kind", catalog.num_kinds, dims.kind, rng);
        let tag = Embedding::new(store, "content.tag", catalog.num_tags, dims.tags, rng);
        let popularity = ContinuousEmbedding::new(
            store,
            "content.popularity",
            ContinuousSpec {
                vocab: popularity_vocab,
                window,
                map: IndexMap::Log {
                    x_max: catalog.popularity_max,
                },
                smooth,
            },
            dims.popularity,
            rng,
        )?;
        let difficulty = ContinuousEmbedding::new(
            store,
            "content.difficulty",
            ContinuousSpec {
                vocab: difficulty_vocab,
                window,
                map: IndexMap::Linear { x_max: 1.0 },
                smooth,
            },
            dims.difficulty,
            rng,
        )?;
        let ln_gain = store.add("content.ln.gain", Tensor::filled(&[dims.total()], 1.0));
        let ln_bias = store.add("content.ln.bias", Tensor::zeros(&[dims.total()]));
        Ok(ContentEmbedding {
            id,
            part,
            kind,
            tag,
            popularity,
            difficulty,
            ln_gain,
            ln_bias,
            layer_norm,
            dims,
        })
    }

    pub fn width(&self) -> usize {
        self.dims.total()
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        catalog: &ContentCatalog,
        idx: &[u32],
    ) -> Result<(Vec<f64>, ContentCache)> {
        let dc = self.width();
        let positions: Vec<usize> = (0..idx.len()).filter(|&i| idx[i] != 0).collect();
        let n = positions.len();
        let mut ids = Vec::with_capacity(n);
        let mut parts = Vec::with_capacity(n);
        let mut kinds = Vec::with_capacity(n);
        let mut tags = Vec::with_capacity(n);
        let mut pop = Vec::with_capacity(n);
        let mut diff = Vec::with_capacity(n);
        for &p in &positions {
            let c = idx[p] as usize;
            let e = catalog.entry(c)?;
            ids.push(c);
            parts.push(e.part);
            kinds.push(e.kind);
            tags.push(e.tags.clone());
            pop.push(e.popularity.map_or(ContinuousInput::Missing, ContinuousInput::Value));
            diff.push(e.difficulty.map_or(ContinuousInput::Missing, ContinuousInput::Value));
        }
        let d = &self.dims;
        let id_e = self.id.forward(store, &ids)?;
        let part_e = self.part.forward(store, &parts)?;
        let kind_e = self.kind.forward(store, &kinds)?;
        let tag_table = store.value(self.tag.table);
        let mut tag_e = vec![0.0; n * d.tags];
        for (o, ts) in tag_e.chunks_mut(d.tags.max(1)).zip(&tags) {
            if ts.is_empty() {
                continue;
            }
            let inv = 1.0 / ts.len() as f64;
            for &t in ts {
                if t >= self.tag.vocab {
                    return Err(Error::IndexOutOfRange {
                        index: t,
                        len: self.tag.vocab,
                    });
                }
                for (a, b) in o.iter_mut().zip(&tag_table[t * d.tags..(t + 1) * d.tags]) {
                    *a += inv * b;
                }
            }
        }
        let (pop_e, pop_c) = self.popularity.forward(store, &pop)?;
        let (diff_e, diff_c) = self.difficulty.forward(store, &diff)?;

        let mut raw = vec![0.0; n * dc];
        let mut off = 0;
        for (part, w) in [
            (&id_e, d.id),
            (&part_e, d.part),
            (&kind_e, d.kind),
            (&tag_e, d.tags),
            (&pop_e, d.popularity),
            (&diff_e, d.difficulty),
        ] {
            put_cols(&mut raw, n, dc, off, part);
            off += w;
        }
        let (rows, ln) = if self.layer_norm && n > 0 {
            let (y, c) = layer_norm_rows(&raw, dc, store.value(self.ln_gain), store.value(self.ln_bias));
            (y, Some(c))
        } else {
            (raw, None)
        };
        let mut out = vec![0.0; idx.len() * dc];
        for (k, &p) in positions.iter().enumerate() {
            out[p * dc..(p + 1) * dc].copy_from_slice(&rows[k * dc..(k + 1) * dc]);
        }
        Ok((
            out,
            ContentCache {
                positions,
                ids,
                parts,
                kinds,
                tags,
                popularity: pop_c,
                difficulty: diff_c,
                ln,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &ContentCache, dy: &[f64], grads: &mut Grads) {
        let dc = self.width();
        let n = cache.positions.len();
        if n == 0 {
            return;
        }
        let mut drows = vec![0.0; n * dc];
        for (k, &p) in cache.positions.iter().enumerate() {
            drows[k * dc..(k + 1) * dc].copy_from_slice(&dy[p * dc..(p + 1) * dc]);
        }
        let draw = match &cache.ln {
            Some(c) => {
                let (dg, db) = grads.pair_mut(self.ln_gain, self.ln_bias);
                layer_norm_rows_backward(c, dc, store.value(self.ln_gain), &drows, dg, db)
            }
            None => drows,
        };
        let d = &self.dims;
        let mut off = 0;
        let mut slot = |w: usize| {
            let s = take_cols(&draw, n, dc, off, w);
            off += w;
            s
        };
        let g_id = slot(d.id);
        let g_part = slot(d.part);
        let g_kind = slot(d.kind);
        let g_tag = slot(d.tags);
        let g_pop = slot(d.popularity);
        let g_diff = slot(d.difficulty);
        self.id.backward(&cache.ids, &g_id, grads);
        self.part.backward(&cache.parts, &g_part, grads);
        self.kind.backward(&cache.kinds, &g_kind, grads);
        {
            let gt = grads.get_mut(self.tag.table);
            for (g, ts) in g_tag.chunks(d.tags.max(1)).zip(&cache.tags) {
                if ts.is_empty() {
                    continue;
                }
                let inv = 1.0 / ts.len() as f64;
                for &t in ts {
                    for (a, b) in gt[t * d.tags..(t + 1) * d.tags].iter_mut().zip(g) {
                        *a += inv * b;
                    }
                }
            }
        }
        self.popularity.backward(&cache.popularity, &g_pop, grads);
        self.difficulty.backward(&cache.difficulty, &g_diff, grads);
    }
}

// ---------------------------------------------------------------- composition

/// Settings for the input layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputSpec {
    pub embed_dim: usize,
    pub d_model: usize,
    pub content: ContentDims,
    pub window: usize,
    pub smooth: bool,
    pub content_layer_norm: bool,
    pub time_lag_vocab: usize,
    pub time_lag_max_ms: f64,
    pub elapsed_vocab: usize,
    pub elapsed_max_ms: f64,
    pub popularity_vocab: usize,
    pub difficulty_vocab: usize,
}

/// Every input embedding plus the two projections to model width.
#[derive(Clone, Debug)]
pub struct InputLayer {
    pub content: ContentEmbedding,
    pub time_lag: ContinuousEmbedding,
    pub elapsed: ContinuousEmbedding,
    pub answered: Embedding,
    pub answer: Embedding,
    pub explanation: Embedding,
    pub encoder_w: ParamId,
    pub encoder_b: ParamId,
    pub decoder_w: ParamId,
    pub decoder_b: ParamId,
    pub spec: InputSpec,
}

/// Per-slot embeddings of one window, each `[L, width]`.
#[derive(Clone, Debug)]
pub struct SlotEmbeddings {
    pub content: Vec<f64>,
    pub time_lag: Vec<f64>,
    pub answered: Vec<f64>,
    pub answer: Vec<f64>,
    pub elapsed: Vec<f64>,
    pub explanation: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct InputCache {
    content: ContentCache,
    time_lag: ContinuousCache,
    elapsed: ContinuousCache,
    answered_idx: Vec<usize>,
    answer_idx: Vec<usize>,
    explanation_idx: Vec<usize>,
    encoder_concat: Vec<f64>,
    decoder_concat: Vec<f64>,
}

impl InputLayer {
    /// Vocabulary sizes of the small categorical fields (pad + values + N/A).
    pub const ANSWERED_VOCAB: usize = 4;
    pub const ANSWER_VOCAB: usize = 6;
    pub const EXPLANATION_VOCAB: usize = 4;

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        catalog: &ContentCatalog,
        spec: InputSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let e = spec.embed_dim;
        let content = ContentEmbedding::new(
            store,
            catalog,
            spec.content,
            spec.window,
            spec.popularity_vocab,
            spec.difficulty_vocab,
            spec.smooth,
            spec.content_layer_norm,
            rng,
        )?;
        let time_lag = ContinuousEmbedding::new(
            store,
            "time_lag",
            ContinuousSpec {
                vocab: spec.time_lag_vocab,
                window: spec.window,
                map: IndexMap::Log {
                    x_max: spec.time_lag_max_ms,
                },
                smooth: spec.smooth,
            },
            e,
            rng,
        )?;
        let answered = Embedding::new(store, "answered_correctly", Self::ANSWERED_VOCAB, e, rng);
        let answer = Embedding::new(store, "user_answer", Self::ANSWER_VOCAB, e, rng);
        let elapsed = ContinuousEmbedding::new(
            store,
            "elapsed_time",
            ContinuousSpec {
                vocab: spec.elapsed_vocab,
                window: spec.window,
                map: IndexMap::Log {
                    x_max: spec.elapsed_max_ms,
                },
                smooth: spec.smooth,
            },
            e,
            rng,
        )?;
        let explanation = Embedding::new(store, "had_explanation", Self::EXPLANATION_VOCAB, e, rng);
        let dc = content.width();
        let d = spec.d_model;
        let encoder_w = store.add("encoder_in.w", truncated_normal(rng, &[dc + 5 * e, d], INIT_STD));
        let encoder_b = store.add("encoder_in.b", Tensor::zeros(&[d]));
        let decoder_w = store.add("decoder_in.w", truncated_normal(rng, &[dc + e, d], INIT_STD));
        let decoder_b = store.add("decoder_in.b", Tensor::zeros(&[d]));
        Ok(InputLayer {
            content,
            time_lag,
            elapsed,
            answered,
            answer,
            explanation,
            encoder_w,
            encoder_b,
            decoder_w,
            decoder_b,
            spec,
        })
    }

    pub fn encoder_width(&self) -> usize {
        self.content.width() + 5 * self.spec.embed_dim
    }

    pub fn decoder_width(&self) -> usize {
        self.content.width() + self.spec.embed_dim
    }

    /// Embeds every slot of `w`.
    pub fn embed(
        &self,
        store: &ParamStore,
        catalog: &ContentCatalog,
        w: &TrainingWindow,
    ) -> Result<(SlotEmbeddings, InputCache)> {
        let (content, content_c) = self.content.forward(store, catalog, &w.content)?;
        let lag_in: Vec<ContinuousInput> = (0..w.len())
            .map(|i| {
                if w.pad[i] {
                    ContinuousInput::Pad
                } else {
                    ContinuousInput::Value(w.time_lag[i] as f64)
                }
            })
            .collect();
        let (time_lag, lag_c) = self.time_lag.forward(store, &lag_in)?;
        let el_in: Vec<ContinuousInput> = (0..w.len())
            .map(|i| match (w.pad[i], w.elapsed_time[i]) {
                (true, _) => ContinuousInput::Pad,
                (false, None) => ContinuousInput::Missing,
                (false, Some(v)) => ContinuousInput::Value(v as f64),
            })
            .collect();
        let (elapsed, el_c) = self.elapsed.forward(store, &el_in)?;
        let answered_idx: Vec<usize> = w.answered_correctly.iter().map(|&v| v as usize).collect();
        let answer_idx: Vec<usize> = w.user_answer.iter().map(|&v| v as usize).collect();
        let explanation_idx: Vec<usize> = w.had_explanation.iter().map(|&v| v as usize).collect();
        let slots = SlotEmbeddings {
            content,
            time_lag,
            answered: self.answered.forward(store, &answered_idx)?,
            answer: self.answer.forward(store, &answer_idx)?,
            elapsed,
            explanation: self.explanation.forward(store, &explanation_idx)?,
        };
        let cache = InputCache {
            content: content_c,
            time_lag: lag_c,
            elapsed: el_c,
            answered_idx,
            answer_idx,
            explanation_idx,
            encoder_concat: Vec::new(),
            decoder_concat: Vec::new(),
        };
        Ok((slots, cache))
    }

    fn encoder_concat(&self, s: &SlotEmbeddings, l: usize) -> Vec<f64> {
        let e = self.spec.embed_dim;
        let dc = self.content.width();
        let width = self.encoder_width();
        let mut x = vec![0.0; l * width];
        let mut off = 0;
        for (part, w) in [
            (&s.content, dc),
            (&s.time_lag, e),
            (&s.answered, e),
            (&s.answer, e),
            (&s.elapsed, e),
            (&s.explanation, e),
        ] {
            put_cols(&mut x, l, width, off, part);
            off += w;
        }
        x
    }

    fn decoder_concat(&self, s: &SlotEmbeddings, l: usize) -> Vec<f64> {
        let dc = self.content.width();
        let width = self.decoder_width();
        let mut x = vec![0.0; l * width];
        put_cols(&mut x, l, width, 0, &s.content);
        put_cols(&mut x, l, width, dc, &s.time_lag);
        x
    }

    /// `[content, time_lag, answered, answer, elapsed, explanation]` → `d_model`.
    pub fn compose_encoder_input(&self, store: &ParamStore, s: &SlotEmbeddings, l: usize) -> Vec<f64> {
        let x = self.encoder_concat(s, l);
        affine_rows(
            &x,
            l,
            store.value(self.encoder_w),
            self.encoder_width(),
            self.spec.d_model,
            store.value(self.encoder_b),
        )
    }

    /// `[content, time_lag]` → `d_model`.
    pub fn compose_decoder_input(&self, store: &ParamStore, s: &SlotEmbeddings, l: usize) -> Vec<f64> {
        let x = self.decoder_concat(s, l);
        affine_rows(
            &x,
            l,
            store.value(self.decoder_w),
            self.decoder_width(),
            self.spec.d_model,
            store.value(self.decoder_b),
        )
    }

    /// Encoder and decoder inputs for one window.
    pub fn forward(
        &self,
        store: &ParamStore,
        catalog: &ContentCatalog,
        w: &TrainingWindow,
    ) -> Result<(Vec<f64>, Vec<f64>, InputCache)> {
        let l = w.len();
        let (slots, mut cache) = self.embed(store, catalog, w)?;
        cache.encoder_concat = self.encoder_concat(&slots, l);
        cache.decoder_concat = self.decoder_concat(&slots, l);
        let enc = affine_rows(
            &cache.encoder_concat,
            l,
            store.value(self.encoder_w),
            self.encoder_width(),
            self.spec.d_model,
            store.value(self.encoder_b),
        );
        let dec = affine_rows(
            &cache.decoder_concat,
            l,
            store.value(self.decoder_w),
            self.decoder_width(),
            self.spec.d_model,
            store.value(self.decoder_b),
        );
        Ok((enc, dec, cache))
    }

    pub fn backward(&self, store: &ParamStore, cache: &InputCache, d_enc: &[f64], d_dec: &[f64], grads: &mut Grads) {
        let l = cache.answered_idx.len();
        let d = self.spec.d_model;
        let e = self.spec.embed_dim;
        let dc = self.content.width();
        let (ew, dw) = (self.encoder_width(), self.decoder_width());

        let (gw, gb) = grads.pair_mut(self.encoder_w, self.encoder_b);
        let dx_enc = affine_rows_backward(
            &cache.encoder_concat,
            l,
            store.value(self.encoder_w),
            ew,
            d,
            d_enc,
            gw,
            gb,
        );
        let (gw, gb) = grads.pair_mut(self.decoder_w, self.decoder_b);
        let dx_dec = affine_rows_backward(
            &cache.decoder_concat,
            l,
            store.value(self.decoder_w),
            dw,
            d,
            d_dec,
            gw,
            gb,
        );

        let mut d_content = take_cols(&dx_enc, l, ew, 0, dc);
        add_into(&mut d_content, &take_cols(&dx_dec, l, dw, 0, dc));
        let mut d_lag = take_cols(&dx_enc, l, ew, dc, e);
        add_into(&mut d_lag, &take_cols(&dx_dec, l, dw, dc, e));
        let d_answered = take_cols(&dx_enc, l, ew, dc + e, e);
        let d_answer = take_cols(&dx_enc, l, ew, dc + 2 * e, e);
        let d_elapsed = take_cols(&dx_enc, l, ew, dc + 3 * e, e);
        let d_expl = take_cols(&dx_enc, l, ew, dc + 4 * e, e);

        self.content.backward(store, &cache.content, &d_content, grads);
        self.time_lag.backward(&cache.time_lag, &d_lag, grads);
        self.answered.backward(&cache.answered_idx, &d_answered, grads);
        self.answer.backward(&cache.answer_idx, &d_answer, grads);
        self.elapsed.backward(&cache.elapsed, &d_elapsed, grads);
        self.explanation.backward(&cache.explanation_idx, &d_expl, grads);
    }
}

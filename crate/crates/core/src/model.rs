//! Encoder/decoder stack, output head and batch loss with gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attention::{AttentionCache, MultiheadAttention};
use crate::embeddings::{ContentCatalog, ContentDims, InputCache, InputLayer, InputSpec, INIT_STD};
use crate::error::{Error, Result};
use crate::numeric::kernels::{add_into, sigmoid};
use crate::numeric::ops::{
    affine_rows, affine_rows_backward, bce_loss, layer_norm_rows, layer_norm_rows_backward, LayerNormCache,
};
use crate::numeric::params::truncated_normal;
use crate::numeric::{Grads, ParamId, ParamStore, Tensor};
use crate::sequences::{AttentionInputs, Batch, TrainingWindow};

/// Architecture and input-feature settings. Everything here is part of the
/// checkpoint digest.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub embed_dim: usize,
    pub time_weighted: bool,
    pub continuous_embedding: bool,
    pub content_layer_norm: bool,
    pub content_dims: ContentDims,
    pub window: usize,
    pub time_lag_vocab: usize,
    pub time_lag_max_ms: f64,
    pub elapsed_vocab: usize,
    pub elapsed_max_ms: f64,
    pub popularity_vocab: usize,
    pub difficulty_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            encoder_layers: 4,
            decoder_layers: 4,
            d_ff: 2048,
            embed_dim: 128,
            time_weighted: true,
            continuous_embedding: true,
            content_layer_norm: true,
            content_dims: ContentDims::default(),
            window: 5,
            time_lag_vocab: 300,
            time_lag_max_ms: 30.0 * 86_400_000.0,
            elapsed_vocab: 300,
            elapsed_max_ms: 300_000.0,
            popularity_vocab: 100,
            difficulty_vocab: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("d_ff", self.d_ff),
            ("embed_dim", self.embed_dim),
            ("content_id_dim", self.content_dims.id),
            ("part_dim", self.content_dims.part),
            ("type_dim", self.content_dims.kind),
            ("tags_dim", self.content_dims.tags),
            ("popularity_dim", self.content_dims.popularity),
            ("difficulty_dim", self.content_dims.difficulty),
            ("time_lag_vocab", self.time_lag_vocab),
            ("elapsed_vocab", self.elapsed_vocab),
            ("popularity_vocab", self.popularity_vocab),
            ("difficulty_vocab", self.difficulty_vocab),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window_size must be odd, got {}", self.window)));
        }
        for (name, vocab) in [
            ("time_lag_vocab", self.time_lag_vocab),
            ("elapsed_vocab", self.elapsed_vocab),
            ("popularity_vocab", self.popularity_vocab),
            ("difficulty_vocab", self.difficulty_vocab),
        ] {
            if vocab < 2 {
                return Err(Error::Config(format!("{name} must be >= 2")));
            }
        }
        for (name, v) in [
            ("time_lag_max_ms", self.time_lag_max_ms),
            ("elapsed_max_ms", self.elapsed_max_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `false` for keys that do
    /// not belong to the model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::{parse_f64, parse_switch, parse_usize};
        let c = &mut self.content_dims;
        match key {
            "d_model" => self.d_model = parse_usize(key, value)?,
            "heads" => self.heads = parse_usize(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_usize(key, value)?,
            "decoder_layers" => self.decoder_layers = parse_usize(key, value)?,
            "d_ff" => self.d_ff = parse_usize(key, value)?,
            "embed_dim" => self.embed_dim = parse_usize(key, value)?,
            "time_weighted" => self.time_weighted = parse_switch(key, value)?,
            "continuous_embedding" => self.continuous_embedding = parse_switch(key, value)?,
            "content_layer_norm" => self.content_layer_norm = parse_switch(key, value)?,
            "content_id_dim" => c.id = parse_usize(key, value)?,
            "part_dim" => c.part = parse_usize(key, value)?,
            "type_dim" => c.kind = parse_usize(key, value)?,
            "tags_dim" => c.tags = parse_usize(key, value)?,
            "popularity_dim" => c.popularity = parse_usize(key, value)?,
            "difficulty_dim" => c.difficulty = parse_usize(key, value)?,
            "window_size" => self.window = parse_usize(key, value)?,
            "time_lag_vocab" => self.time_lag_vocab = parse_usize(key, value)?,
            "time_lag_max_ms" => self.time_lag_max_ms = parse_f64(key, value)?,
            "elapsed_vocab" => self.elapsed_vocab = parse_usize(key, value)?,
            "elapsed_max_ms" => self.elapsed_max_ms = parse_f64(key, value)?,
            "popularity_vocab" => self.popularity_vocab = parse_usize(key, value)?,
            "difficulty_vocab" => self.difficulty_vocab = parse_usize(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Inverse of [`ModelConfig::canonical`].
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in crate::config::parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` lines, in a fixed order.
    pub fn canonical(&self) -> String {
        let c = &self.content_dims;
        let on = |b: bool| if b { "on" } else { "off" };
        format!(
            "d_model={}\nheads={}\nencoder_layers={}\ndecoder_layers={}\nd_ff={}\nembed_dim={}\n\
             time_weighted={}\ncontinuous_embedding={}\ncontent_layer_norm={}\n\
             content_id_dim={}\npart_dim={}\ntype_dim={}\ntags_dim={}\npopularity_dim={}\ndifficulty_dim={}\n\
             window_size={}\ntime_lag_vocab={}\ntime_lag_max_ms={}\nelapsed_vocab={}\nelapsed_max_ms={}\n\
             popularity_vocab={}\ndifficulty_vocab={}\n",
            self.d_model,
            self.heads,
            self.encoder_layers,
            self.decoder_layers,
            self.d_ff,
            self.embed_dim,
            on(self.time_weighted),
            on(self.continuous_embedding),
            on(self.content_layer_norm),
            c.id,
            c.part,
            c.kind,
            c.tags,
            c.popularity,
            c.difficulty,
            self.window,
            self.time_lag_vocab,
            self.time_lag_max_ms,
            self.elapsed_vocab,
            self.elapsed_max_ms,
            self.popularity_vocab,
            self.difficulty_vocab,
        )
    }

    /// Hex sha256 over the canonical config and the data-derived table sizes.
    pub fn digest(&self, catalog: &ContentCatalog) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.update(
            format!(
                "contents={}\nparts={}\nkinds={}\ntags={}\npopularity_max={}\n",
                catalog.num_contents(),
                catalog.num_parts,
                catalog.num_kinds,
                catalog.num_tags,
                catalog.popularity_max.to_bits()
            )
            .as_bytes(),
        );
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn input_spec(&self) -> InputSpec {
        InputSpec {
            embed_dim: self.embed_dim,
            d_model: self.d_model,
            content: self.content_dims,
            window: self.window,
            smooth: self.continuous_embedding,
            content_layer_norm: self.content_layer_norm,
            time_lag_vocab: self.time_lag_vocab,
            time_lag_max_ms: self.time_lag_max_ms,
            elapsed_vocab: self.elapsed_vocab,
            elapsed_max_ms: self.elapsed_max_ms,
            popularity_vocab: self.popularity_vocab,
            difficulty_vocab: self.difficulty_vocab,
        }
    }
}

// ---------------------------------------------------------------- blocks

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gain, bias, dim }
    }

    fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        layer_norm_rows(x, self.dim, store.value(self.gain), store.value(self.bias))
    }

    fn backward(&self, store: &ParamStore, cache: &LayerNormCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let (dg, db) = grads.pair_mut(self.gain, self.bias);
        layer_norm_rows_backward(cache, self.dim, store.value(self.gain), dy, dg, db)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug)]
struct FeedForwardCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: store.add(format!("{name}.w1"), truncated_normal(rng, &[d_model, d_ff], INIT_STD)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[d_ff])),
            w2: store.add(format!("{name}.w2"), truncated_normal(rng, &[d_ff, d_model], INIT_STD)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[d_model])),
            d_model,
            d_ff,
        }
    }

    fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, FeedForwardCache) {
        let rows = x.len() / self.d_model;
        let mut hidden = affine_rows(
            x,
            rows,
            store.value(self.w1),
            self.d_model,
            self.d_ff,
            store.value(self.b1),
        );
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let y = affine_rows(
            &hidden,
            rows,
            store.value(self.w2),
            self.d_ff,
            self.d_model,
            store.value(self.b2),
        );
        (y, FeedForwardCache { x: x.to_vec(), hidden })
    }

    fn backward(&self, store: &ParamStore, cache: &FeedForwardCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let rows = dy.len() / self.d_model;
        let (gw, gb) = grads.pair_mut(self.w2, self.b2);
        let mut dh = affine_rows_backward(
            &cache.hidden,
            rows,
            store.value(self.w2),
            self.d_ff,
            self.d_model,
            dy,
            gw,
            gb,
        );
        for (g, h) in dh.iter_mut().zip(&cache.hidden) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let (gw, gb) = grads.pair_mut(self.w1, self.b1);
        affine_rows_backward(
            &cache.x,
            rows,
            store.value(self.w1),
            self.d_model,
            self.d_ff,
            &dh,
            gw,
            gb,
        )
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Post-norm encoder block: `LN(x + MHA(x))` then `LN(· + FFN(·))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiheadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    attn: AttentionCache,
    ln1: LayerNormCache,
    ffn: FeedForwardCache,
    ln2: LayerNormCache,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiheadAttention::new(
                store,
                &format!("{name}.self"),
                cfg.d_model,
                cfg.heads,
                cfg.time_weighted,
                rng,
            )?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model),
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], mask: &[bool], log_gap: &[f64]) -> (Vec<f64>, EncoderCache) {
        let (a, attn) = self.attn.forward(store, x, x, mask, log_gap);
        let (h, ln1) = self.ln1.forward(store, &add(x, &a));
        let (f, ffn) = self.ffn.forward(store, &h);
        let (y, ln2) = self.ln2.forward(store, &add(&h, &f));
        (y, EncoderCache { attn, ln1, ffn, ln2 })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        c: &EncoderCache,
        dy: &[f64],
        log_gap: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let ds = self.ln2.backward(store, &c.ln2, dy, grads);
        let mut dh = self.ffn.backward(store, &c.ffn, &ds, grads);
        add_into(&mut dh, &ds);
        let ds = self.ln1.backward(store, &c.ln1, &dh, grads);
        let (dq, dkv) = self.attn.backward(store, &c.attn, &ds, log_gap, grads);
        let mut dx = ds;
        add_into(&mut dx, &dq);
        add_into(&mut dx, &dkv);
        dx
    }
}

/// Post-norm decoder block: self attention, cross attention on the encoder
/// output, feed-forward; each followed by residual + layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiheadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiheadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    self_attn: AttentionCache,
    ln1: LayerNormCache,
    cross_attn: AttentionCache,
    ln2: LayerNormCache,
    ffn: FeedForwardCache,
    ln3: LayerNormCache,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiheadAttention::new(
                store,
                &format!("{name}.self"),
                cfg.d_model,
                cfg.heads,
                cfg.time_weighted,
                rng,
            )?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model),
            cross_attn: MultiheadAttention::new(
                store,
                &format!("{name}.cross"),
                cfg.d_model,
                cfg.heads,
                cfg.time_weighted,
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.d_model),
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        y: &[f64],
        enc: &[f64],
        att: &AttentionInputs,
    ) -> (Vec<f64>, DecoderCache) {
        let (a, self_attn) = self.self_attn.forward(store, y, y, &att.self_mask, &att.log_gap);
        let (h1, ln1) = self.ln1.forward(store, &add(y, &a));
        let (c, cross_attn) = self.cross_attn.forward(store, &h1, enc, &att.cross_mask, &att.log_gap);
        let (h2, ln2) = self.ln2.forward(store, &add(&h1, &c));
        let (f, ffn) = self.ffn.forward(store, &h2);
        let (out, ln3) = self.ln3.forward(store, &add(&h2, &f));
        (
            out,
            DecoderCache {
                self_attn,
                ln1,
                cross_attn,
                ln2,
                ffn,
                ln3,
            },
        )
    }

    /// Returns `(d y, d enc)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        c: &DecoderCache,
        dout: &[f64],
        log_gap: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let ds = self.ln3.backward(store, &c.ln3, dout, grads);
        let mut dh2 = self.ffn.backward(store, &c.ffn, &ds, grads);
        add_into(&mut dh2, &ds);
        let ds = self.ln2.backward(store, &c.ln2, &dh2, grads);
        let (dq, denc) = self.cross_attn.backward(store, &c.cross_attn, &ds, log_gap, grads);
        let mut dh1 = ds;
        add_into(&mut dh1, &dq);
        let ds = self.ln1.backward(store, &c.ln1, &dh1, grads);
        let (dq, dkv) = self.self_attn.backward(store, &c.self_attn, &ds, log_gap, grads);
        let mut dy = ds;
        add_into(&mut dy, &dq);
        add_into(&mut dy, &dkv);
        (dy, denc)
    }
}

// ---------------------------------------------------------------- model

/// Full model: parameters, layer wiring and the content catalog it was
/// built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub catalog: ContentCatalog,
    pub store: ParamStore,
    pub input: InputLayer,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Everything the backward pass needs from one window's forward pass.
pub struct WindowCache {
    input: InputCache,
    attention: AttentionInputs,
    encoder: Vec<EncoderCache>,
    decoder: Vec<DecoderCache>,
    dec_out: Vec<f64>,
}

/// Loss and gradient of one batch.
pub struct BatchGradients {
    pub loss: f64,
    pub count: usize,
    pub grads: Grads,
}

/// Windows per gradient shard. Shards are reduced in order, so results do
/// not depend on the thread count.
const SHARD_WINDOWS: usize = 8;

impl Model {
    pub fn new(config: ModelConfig, catalog: ContentCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = InputLayer::new(&mut store, &catalog, config.input_spec(), &mut rng)?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("dec.{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = store.add("head.w", truncated_normal(&mut rng, &[config.d_model, 1], INIT_STD));
        let head_b = store.add("head.b", Tensor::zeros(&[1]));
        Ok(Model {
            config,
            catalog,
            store,
            input,
            encoder,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn digest(&self) -> String {
        self.config.digest(&self.catalog)
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &MultiheadAttention> {
        self.encoder
            .iter()
            .map(|l| &l.attn)
            .chain(self.decoder.iter().flat_map(|l| [&l.self_attn, &l.cross_attn]))
    }

    /// Projects every decay exponent back onto its constraint set.
    pub fn clamp_decays(&mut self) {
        let blocks: Vec<MultiheadAttention> = self.attention_blocks().cloned().collect();
        for b in blocks {
            b.clamp_decay(&mut self.store);
        }
    }

    /// Decay parameters are frozen when time weighting is off.
    pub fn is_frozen(&self, id: ParamId) -> bool {
        !self.config.time_weighted && self.attention_blocks().any(|b| b.decay == id)
    }

    fn check_window(&self, w: &TrainingWindow) -> Result<()> {
        if w.is_empty() {
            return Err(Error::Shape("empty window".into()));
        }
        for &c in &w.content {
            if c as usize > self.catalog.num_contents() {
                return Err(Error::IndexOutOfRange {
                    index: c as usize,
                    len: self.catalog.num_contents() + 1,
                });
            }
        }
        Ok(())
    }

    /// Forward pass for one window. Returns probabilities and the cache.
    pub fn forward_window(&self, w: &TrainingWindow) -> Result<(Vec<f64>, WindowCache)> {
        self.forward_window_with(w, AttentionInputs::for_window(w))
    }

    fn forward_window_with(&self, w: &TrainingWindow, attention: AttentionInputs) -> Result<(Vec<f64>, WindowCache)> {
        self.check_window(w)?;
        let s = &self.store;
        let (mut x, mut y, input) = self.input.forward(s, &self.catalog, w)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (nx, c) = layer.forward(s, &x, &attention.self_mask, &attention.log_gap);
            x = nx;
            encoder.push(c);
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (ny, c) = layer.forward(s, &y, &x, &attention);
            y = ny;
            decoder.push(c);
        }
        let logits = affine_rows(
            &y,
            w.len(),
            s.value(self.head_w),
            self.config.d_model,
            1,
            s.value(self.head_b),
        );
        let p: Vec<f64> = logits.into_iter().map(sigmoid).collect();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                lr: 0.0,
                grad_norm: f64::NAN,
            });
        }
        Ok((
            p,
            WindowCache {
                input,
                attention,
                encoder,
                decoder,
                dec_out: y,
            },
        ))
    }

    /// Probabilities for every position of `w`.
    pub fn predict_window(&self, w: &TrainingWindow) -> Result<Vec<f64>> {
        Ok(self.forward_window(w)?.0)
    }

    /// Accumulates gradients given `d loss / d logit` per position.
    pub fn backward_window(&self, cache: &WindowCache, dlogit: &[f64], grads: &mut Grads) {
        let s = &self.store;
        let d = self.config.d_model;
        let l = dlogit.len();
        let (gw, gb) = grads.pair_mut(self.head_w, self.head_b);
        let mut dy = affine_rows_backward(&cache.dec_out, l, s.value(self.head_w), d, 1, dlogit, gw, gb);
        let gap = &cache.attention.log_gap;
        let mut denc = vec![0.0; l * d];
        for (layer, c) in self.decoder.iter().zip(&cache.decoder).rev() {
            let (ndy, de) = layer.backward(s, c, &dy, gap, grads);
            dy = ndy;
            add_into(&mut denc, &de);
        }
        let mut dx = denc;
        for (layer, c) in self.encoder.iter().zip(&cache.encoder).rev() {
            dx = layer.backward(s, c, &dx, gap, grads);
        }
        self.input.backward(s, &cache.input, &dx, &dy, grads);
        if !self.config.time_weighted {
            for b in self.attention_blocks() {
                grads.get_mut(b.decay).iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Probabilities for each window of the batch.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        batch
            .windows
            .par_iter()
            .zip(batch.attention.par_iter())
            .map(|(w, a)| Ok(self.forward_window_with(w, a.clone())?.0))
            .collect()
    }

    /// Mean masked binary cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch) -> Result<(f64, usize)> {
        let probs = self.forward(batch)?;
        let mut p_all = Vec::new();
        let mut y_all = Vec::new();
        let mut m_all = Vec::new();
        for (b, p) in probs.iter().enumerate() {
            p_all.extend_from_slice(p);
            y_all.extend_from_slice(batch.labels_of(b));
            m_all.extend_from_slice(batch.loss_mask_of(b));
        }
        let count = m_all.iter().filter(|&&m| m).count();
        Ok((bce_loss(&p_all, &y_all, &m_all)?.0, count))
    }

    /// Loss and parameter gradients of the batch mean BCE.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<BatchGradients> {
        let count: usize = (0..batch.size())
            .map(|b| batch.loss_mask_of(b).iter().filter(|&&m| m).count())
            .sum();
        let n = batch.size();
        let shards: Vec<(usize, usize)> = (0..n)
            .step_by(SHARD_WINDOWS)
            .map(|s| (s, (s + SHARD_WINDOWS).min(n)))
            .collect();
        let parts: Vec<(f64, Grads)> = shards
            .par_iter()
            .map(|&(lo, hi)| -> Result<(f64, Grads)> {
                let mut grads = self.store.grad_buffers();
                let mut loss_sum = 0.0;
                for b in lo..hi {
                    let w = &batch.windows[b];
                    let (p, cache) = self.forward_window_with(w, batch.attention[b].clone())?;
                    let mask = batch.loss_mask_of(b);
                    let y = batch.labels_of(b);
                    let k = mask.iter().filter(|&&m| m).count();
                    if k == 0 {
                        continue;
                    }
                    let (l, dp) = bce_loss(&p, y, mask)?;
                    loss_sum += l * k as f64;
                    // `bce_loss` normalizes by this window's count; rescale
                    // to the batch count and chain through the sigmoid.
                    let scale = k as f64 / count as f64;
                    let dlogit: Vec<f64> = dp.iter().zip(&p).map(|(g, p)| g * scale * p * (1.0 - p)).collect();
                    self.backward_window(&cache, &dlogit, &mut grads);
                }
                Ok((loss_sum, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let (mut loss_sum, mut grads) = iter.next().unwrap_or_else(|| (0.0, self.store.grad_buffers()));
        for (l, g) in iter {
            loss_sum += l;
            grads.add(&g);
        }
        let loss = if count == 0 { 0.0 } else { loss_sum / count as f64 };
        Ok(BatchGradients { loss, count, grads })
    }
}

//! Acceptance criteria 1 to 9. Each criterion prints one PASS/FAIL line
//! with its measured values. They run one at a time so the runtime budgets
//! are measured without interference, and the process fails if any does.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timekt::attention::{scaled_dot_attention, scaled_dot_attention_decayed, MultiheadAttention};
use timekt::embeddings::{ContinuousEmbedding, ContinuousInput, ContinuousSpec, Embedding, IndexMap};
use timekt::model::{Model, ModelConfig};
use timekt::numeric::ops::{affine_rows, affine_rows_backward, bce_loss, layer_norm_rows, layer_norm_rows_backward};
use timekt::numeric::{adam_step, lr_at_step, AdamState, LrSchedule, Param, ParamStore, Tensor};
use timekt::prepared::{prepare_parsed, PrepareOptions, PreparedData};
use timekt::sequences::{assemble_batch, build_log_time_gap, TrainingWindow};
use timekt::streaming::{make_groups, run_simulation, stream_events, StreamEvent};
use timekt::synth::{bayes_auc, generate, SynthData, SynthKind, SynthSpec};
use timekt::training::{evaluate, TrainConfig, Trainer};

fn report(n: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    println!(
        "criterion {n} [{name}]: {} ({detail}; {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn config(pairs: &[(&str, &str)]) -> ModelConfig {
    let mut c = ModelConfig::default();
    for (k, v) in pairs {
        assert!(c.set(k, v).unwrap(), "unknown key {k}");
    }
    c
}

/// Small model used by the synthetic runs.
fn tiny_config(d_model: usize, layers: usize) -> ModelConfig {
    let d = d_model.to_string();
    let ff = (2 * d_model).to_string();
    let l = layers.to_string();
    config(&[
        ("d_model", &d),
        ("heads", "4"),
        ("encoder_layers", &l),
        ("decoder_layers", &l),
        ("d_ff", &ff),
        ("embed_dim", "16"),
        ("content_id_dim", "16"),
        ("part_dim", "4"),
        ("type_dim", "4"),
        ("tags_dim", "8"),
        ("popularity_dim", "8"),
        ("difficulty_dim", "8"),
        ("time_lag_vocab", "64"),
        ("elapsed_vocab", "64"),
        ("popularity_vocab", "32"),
        ("difficulty_vocab", "32"),
    ])
}

fn train_config(batch: usize, seq_len: usize, steps: u64, warmup: u64, peak: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        seq_len,
        eval_seq_len: seq_len,
        peak_lr: peak,
        warmup_steps: warmup,
        decay_steps: steps.saturating_sub(warmup).max(1),
        max_steps: steps,
        eval_every: steps,
        patience: u32::MAX,
        clip_norm: 1.0,
        seed,
    }
}

fn synth(kind: SynthKind, users: usize, interactions: usize, seed: u64) -> SynthData {
    generate(&SynthSpec::new(kind, users, interactions, seed)).unwrap()
}

fn prepared(raw: &SynthData, holdout: f64, seed: u64) -> PreparedData {
    let opts = PrepareOptions {
        holdout_fraction: holdout,
        new_user_fraction: 0.2,
        seed,
    };
    prepare_parsed(&raw.interactions, &raw.questions, &raw.lectures, opts).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error between `analytic` and central differences of
/// `f` at every coordinate of `x`.
fn check_grad(x: &[f64], analytic: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// Fixed random projection that turns an output into a scalar.
fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    random_vec(rng, n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random unpadded window over the content indices of `catalog_size`.
fn random_window(rng: &mut ChaCha8Rng, n: usize, len: usize, contents: u32, lecture_from: u32) -> TrainingWindow {
    let mut w = TrainingWindow {
        content: Vec::new(),
        is_lecture: Vec::new(),
        timestamp: Vec::new(),
        time_lag: Vec::new(),
        answered_correctly: Vec::new(),
        user_answer: Vec::new(),
        elapsed_time: Vec::new(),
        had_explanation: Vec::new(),
        pad: Vec::new(),
    };
    let mut t = 0i64;
    for i in 0..len {
        let real = i < n;
        if real && (i == 0 || rng.random_bool(0.7)) {
            t += rng.random_range(1..5_000_000);
        }
        let content = if real { rng.random_range(1..=contents) } else { 0 };
        let lecture = content >= lecture_from;
        let lag = if i == 0 || w.timestamp[i - 1] != t {
            t - w.timestamp.last().copied().unwrap_or(t)
        } else {
            w.time_lag[i - 1]
        };
        w.content.push(content);
        w.is_lecture.push(lecture);
        w.timestamp.push(t);
        w.time_lag.push(if real { lag } else { 0 });
        w.answered_correctly.push(match (real, lecture) {
            (false, _) => 0,
            (true, true) => 3,
            _ => rng.random_range(1..=2),
        });
        w.user_answer.push(match (real, lecture) {
            (false, _) => 0,
            (true, true) => 5,
            _ => rng.random_range(1..=4),
        });
        w.elapsed_time.push(if real && rng.random_bool(0.8) {
            Some(rng.random_range(0..100_000))
        } else {
            None
        });
        w.had_explanation.push(if real { rng.random_range(1..=3) } else { 0 });
        w.pad.push(!real);
    }
    w
}

// ---------------------------------------------------------------- 1

fn criterion_1_gradient_suite() -> bool {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut primitive = 0.0f64;

    // Affine.
    let (rows, d_in, d_out) = (3, 4, 5);
    let x = random_vec(&mut rng, rows * d_in);
    let w = random_vec(&mut rng, d_in * d_out);
    let b = random_vec(&mut rng, d_out);
    let c = probe(&mut rng, rows * d_out);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; b.len()];
    let dx = affine_rows_backward(&x, rows, &w, d_in, d_out, &c, &mut dw, &mut db);
    primitive = primitive.max(check_grad(&x, &dx, 1e-6, |x| {
        dot(&affine_rows(x, rows, &w, d_in, d_out, &b), &c)
    }));
    primitive = primitive.max(check_grad(&w, &dw, 1e-6, |w| {
        dot(&affine_rows(&x, rows, w, d_in, d_out, &b), &c)
    }));
    primitive = primitive.max(check_grad(&b, &db, 1e-6, |b| {
        dot(&affine_rows(&x, rows, &w, d_in, d_out, b), &c)
    }));

    // Layer norm.
    let d = 6;
    let x = random_vec(&mut rng, 2 * d);
    let gain = random_vec(&mut rng, d);
    let bias = random_vec(&mut rng, d);
    let c = probe(&mut rng, 2 * d);
    let (_, cache) = layer_norm_rows(&x, d, &gain, &bias);
    let mut dg = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let dx = layer_norm_rows_backward(&cache, d, &gain, &c, &mut dg, &mut dbias);
    primitive = primitive.max(check_grad(&x, &dx, 1e-6, |x| {
        dot(&layer_norm_rows(x, d, &gain, &bias).0, &c)
    }));
    primitive = primitive.max(check_grad(&gain, &dg, 1e-6, |g| {
        dot(&layer_norm_rows(&x, d, g, &bias).0, &c)
    }));

    // Binary cross-entropy.
    let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
    let y: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let mask = vec![true, true, false, true, true, true];
    let (_, dp) = bce_loss(&p, &y, &mask).unwrap();
    primitive = primitive.max(check_grad(&p, &dp, 1e-7, |p| bce_loss(p, &y, &mask).unwrap().0));

    // Lookup and continuous embeddings.
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "e", 5, 3, &mut rng);
    let spec = ContinuousSpec {
        vocab: 9,
        window: 3,
        map: IndexMap::Log { x_max: 1000.0 },
        smooth: true,
    };
    let cont = ContinuousEmbedding::new(&mut store, "c", spec, 3, &mut rng).unwrap();
    let idx = [1usize, 4, 0, 4];
    let xs = [
        ContinuousInput::Value(3.0),
        ContinuousInput::Value(250.0),
        ContinuousInput::Missing,
        ContinuousInput::Pad,
    ];
    let c1 = probe(&mut rng, 12);
    let c2 = probe(&mut rng, 12);
    let mut grads = store.grad_buffers();
    emb.backward(&idx, &c1, &mut grads);
    let (_, cc) = cont.forward(&store, &xs).unwrap();
    cont.backward(&cc, &c2, &mut grads);
    for (id, f) in [
        (
            emb.table,
            Box::new(|s: &ParamStore| dot(&emb.forward(s, &idx).unwrap(), &c1)) as Box<dyn Fn(&ParamStore) -> f64>,
        ),
        (
            cont.table,
            Box::new(|s: &ParamStore| dot(&cont.forward(s, &xs).unwrap().0, &c2)),
        ),
        (
            cont.na_row,
            Box::new(|s: &ParamStore| dot(&cont.forward(s, &xs).unwrap().0, &c2)),
        ),
    ] {
        let x0 = store.value(id).to_vec();
        primitive = primitive.max(check_grad(&x0, grads.get(id), 1e-6, |v| {
            let mut s = store.clone();
            s.get_mut(id).value.data_mut().copy_from_slice(v);
            f(&s)
        }));
    }

    // Time-weighted multi-head attention, including the decay exponents.
    let mut store = ParamStore::new();
    let (l, dm) = (5, 8);
    let mha = MultiheadAttention::new(&mut store, "a", dm, 2, true, &mut rng).unwrap();
    for p in store.params_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&random_vec(&mut rng, n));
    }
    store.get_mut(mha.decay).value.data_mut().copy_from_slice(&[0.3, 0.7]);
    let ts: Vec<i64> = vec![0, 1000, 1000, 50_000, 3_000_000];
    let gap = build_log_time_gap(&ts);
    let mask: Vec<bool> = (0..l * l).map(|k| k % l <= k / l).collect();
    let xq = random_vec(&mut rng, l * dm);
    let xkv = random_vec(&mut rng, l * dm);
    let c = probe(&mut rng, l * dm);
    let (_, cache) = mha.forward(&store, &xq, &xkv, &mask, &gap);
    let mut grads = store.grad_buffers();
    let (dxq, dxkv) = mha.backward(&store, &cache, &c, &gap, &mut grads);
    let out = |s: &ParamStore, xq: &[f64], xkv: &[f64]| dot(&mha.forward(s, xq, xkv, &mask, &gap).0, &c);
    let mut attention = check_grad(&xq, &dxq, 1e-6, |v| out(&store, v, &xkv));
    attention = attention.max(check_grad(&xkv, &dxkv, 1e-6, |v| out(&store, &xq, v)));
    for id in [mha.wq, mha.wk, mha.wv, mha.wo, mha.decay] {
        let x0 = store.value(id).to_vec();
        attention = attention.max(check_grad(&x0, grads.get(id), 1e-6, |v| {
            let mut s = store.clone();
            s.get_mut(id).value.data_mut().copy_from_slice(v);
            out(&s, &xq, &xkv)
        }));
    }
    let decay_grad = grads.get(mha.decay).to_vec();

    // End to end on a tiny model.
    let raw = synth(SynthKind::Skill, 6, 12, 2);
    let data = prepared(&raw, 0.0, 0);
    let cfg = config(&[
        ("d_model", "8"),
        ("heads", "2"),
        ("encoder_layers", "1"),
        ("decoder_layers", "1"),
        ("d_ff", "12"),
        ("embed_dim", "4"),
        ("content_id_dim", "4"),
        ("part_dim", "2"),
        ("type_dim", "2"),
        ("tags_dim", "2"),
        ("popularity_dim", "2"),
        ("difficulty_dim", "2"),
        ("time_lag_vocab", "16"),
        ("elapsed_vocab", "16"),
        ("popularity_vocab", "8"),
        ("difficulty_vocab", "8"),
    ]);
    let mut model = Model::new(cfg, data.catalog.clone(), 3).unwrap();
    for block in model.attention_blocks().cloned().collect::<Vec<_>>() {
        model.store.get_mut(block.decay).value.data_mut().fill(0.4);
    }
    let windows: Vec<TrainingWindow> = data
        .train
        .iter()
        .take(3)
        .map(|s| TrainingWindow::from_range(s, 0, s.len(), 12))
        .collect();
    let batch = assemble_batch(windows).unwrap();
    let bg = model.loss_and_grads(&batch).unwrap();
    let mut end_to_end = 0.0f64;
    let mut checked = 0;
    let params: Vec<_> = (0..model.store.params().len()).collect();
    for &pi in &params {
        let id = model.store.by_name(&model.store.params()[pi].name.clone()).unwrap();
        let n = model.store.value(id).len();
        for _ in 0..2 {
            let k = rng.random_range(0..n);
            let a = bg.grads.get(id)[k];
            let h = 1e-5;
            let mut m = model.clone();
            m.store.get_mut(id).value.data_mut()[k] += h;
            let up = m.loss(&batch).unwrap().0;
            m.store.get_mut(id).value.data_mut()[k] -= 2.0 * h;
            let down = m.loss(&batch).unwrap().0;
            let num = (up - down) / (2.0 * h);
            if a.abs().max(num.abs()) > 1e-7 {
                end_to_end = end_to_end.max(rel_err(a, num));
                checked += 1;
            }
        }
    }

    let elapsed = started.elapsed();
    let pass =
        primitive < 1e-4 && attention < 1e-4 && end_to_end < 1e-3 && checked > 20 && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "primitives max rel {primitive:.2e}, attention max rel {attention:.2e} (decay grads {decay_grad:?}), \
             end-to-end max rel {end_to_end:.2e} over {checked} coordinates"
        ),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 2

fn criterion_2_no_leakage() -> bool {
    let started = Instant::now();
    let raw = synth(SynthKind::Skill, 4, 10, 3);
    let data = prepared(&raw, 0.0, 0);
    let model = Model::new(tiny_config(16, 2), data.catalog.clone(), 11).unwrap();
    let contents = data.catalog.num_contents() as u32;
    let lecture_from = (raw.questions.len() + 1) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut failures = 0;
    let mut checked = 0;
    for _ in 0..200 {
        let len = 16;
        let n = rng.random_range(2..=len);
        let windows: Vec<TrainingWindow> = (0..4)
            .map(|_| random_window(&mut rng, n, len, contents, lecture_from))
            .collect();
        let base = model.forward(&assemble_batch(windows.clone()).unwrap()).unwrap();
        let i = rng.random_range(0..n);
        let perturbed: Vec<TrainingWindow> = windows
            .iter()
            .map(|w| {
                let mut w2 = w.clone();
                let ti = w.timestamp[i];
                for j in 0..n {
                    if w.timestamp[j] > ti {
                        let lecture = rng.random_bool(0.2);
                        w2.content[j] = if lecture {
                            rng.random_range(lecture_from..=contents)
                        } else {
                            rng.random_range(1..lecture_from)
                        };
                        w2.is_lecture[j] = lecture;
                        w2.timestamp[j] += rng.random_range(0..1000);
                        w2.time_lag[j] = rng.random_range(0..10_000_000);
                        w2.elapsed_time[j] = Some(rng.random_range(0..500_000));
                        w2.had_explanation[j] = rng.random_range(1..=3);
                    }
                    if w.timestamp[j] >= ti {
                        w2.answered_correctly[j] = rng.random_range(1..=3);
                        w2.user_answer[j] = rng.random_range(1..=5);
                    }
                }
                // Keep later events strictly later.
                for j in 1..n {
                    if w.timestamp[j] > ti && w2.timestamp[j] <= ti {
                        w2.timestamp[j] = ti + 1;
                    }
                }
                w2
            })
            .collect();
        let after = model.forward(&assemble_batch(perturbed).unwrap()).unwrap();
        for (a, b) in base.iter().zip(&after) {
            checked += 1;
            if a[i].to_bits() != b[i].to_bits() {
                failures += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(300);
    report(
        2,
        "no leakage",
        pass,
        &format!("200 batches, {checked} windows, {failures} changed predictions"),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 3

fn criterion_3_ablation_equivalences() -> bool {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // (a) w = 0 decayed attention equals vanilla attention bitwise.
    let mut a_ok = true;
    for _ in 0..50 {
        let (lq, lk, dk) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..6));
        let t = |rng: &mut ChaCha8Rng, r: usize, c: usize| Tensor::from_vec(&[r, c], random_vec(rng, r * c)).unwrap();
        let q = t(&mut rng, lq, dk);
        let k = t(&mut rng, lk, dk);
        let v = t(&mut rng, lk, dk);
        let mut mask: Vec<bool> = (0..lq * lk).map(|_| rng.random_bool(0.7)).collect();
        for r in 0..lq {
            mask[r * lk] = true;
        }
        let gap = Tensor::from_vec(&[lq, lk], (0..lq * lk).map(|_| rng.random_range(0.0..20.0)).collect()).unwrap();
        let plain = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
        let decayed = scaled_dot_attention_decayed(&q, &k, &v, &gap, &mask, 0.0).unwrap();
        a_ok &= plain
            .data()
            .iter()
            .zip(decayed.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }

    // (b) W = 1 continuous embedding at integer grid points equals a lookup.
    let vocab = 17;
    let mut store = ParamStore::new();
    let lookup = Embedding::new(&mut store, "lookup", vocab, 6, &mut rng);
    let spec = ContinuousSpec {
        vocab,
        window: 1,
        map: IndexMap::Linear {
            x_max: (vocab - 1) as f64,
        },
        smooth: true,
    };
    let cont = ContinuousEmbedding::new(&mut store, "cont", spec, 6, &mut rng).unwrap();
    let table = store.value(lookup.table).to_vec();
    store.get_mut(cont.table).value.data_mut().copy_from_slice(&table);
    let idx: Vec<usize> = (1..vocab).collect();
    let xs: Vec<ContinuousInput> = idx.iter().map(|&i| ContinuousInput::Value(i as f64)).collect();
    let a = lookup.forward(&store, &idx).unwrap();
    let b = cont.forward(&store, &xs).unwrap().0;
    let b_ok = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let elapsed = started.elapsed();
    let pass = a_ok && b_ok;
    report(
        3,
        "ablation equivalences",
        pass,
        &format!("(a) w=0 vs vanilla bitwise: {a_ok}; (b) W=1 grid vs lookup bitwise: {b_ok}"),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 4

fn criterion_4_overfit_fixture() -> bool {
    let started = Instant::now();
    let raw = synth(SynthKind::Skill, 8, 64, 4);
    let data = prepared(&raw, 0.0, 0);
    let model = Model::new(tiny_config(64, 2), data.catalog.clone(), 1).unwrap();
    let cfg = train_config(8, 64, 300, 30, 3e-3, 1);
    let mut trainer = Trainer::new(model, cfg, &data.train, &data.valid).unwrap();
    trainer.run(None, |_| {}).unwrap();
    let windows: Vec<TrainingWindow> = data
        .train
        .iter()
        .map(|s| TrainingWindow::from_range(s, 0, s.len(), 64))
        .collect();
    let (loss, count) = trainer.model.loss(&assemble_batch(windows).unwrap()).unwrap();
    let elapsed = started.elapsed();
    let pass = loss < 0.05 && elapsed < Duration::from_secs(180);
    report(
        4,
        "overfit fixture",
        pass,
        &format!("training BCE {loss:.4} over {count} answers after 300 steps"),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 5

fn criterion_5_synthetic_skill() -> bool {
    let started = Instant::now();
    let raw = synth(SynthKind::Skill, 2000, 200, 5);
    let data = prepared(&raw, 0.1, 5);
    let model = Model::new(tiny_config(32, 2), data.catalog.clone(), 5).unwrap();
    let cfg = train_config(32, 64, 3000, 100, 1e-3, 5);
    let mut trainer = Trainer::new(model, cfg, &data.train, &data.valid).unwrap();
    let outcome = trainer.run(None, |_| {}).unwrap();
    let m = outcome.final_metrics.unwrap();
    let held: Vec<i64> = data
        .valid
        .iter()
        .flat_map(|v| v.seq.row_id[v.start..].to_vec())
        .collect();
    let oracle = bayes_auc(&raw, &held).unwrap();
    let elapsed = started.elapsed();
    let pass = m.auc >= 0.70 && elapsed < Duration::from_secs(1800);
    report(
        5,
        "synthetic skill",
        pass,
        &format!(
            "held-out AUC {:.4} (threshold 0.70, generator oracle {oracle:.4}), {} answers",
            m.auc, m.count
        ),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 6

fn forgetting_auc(time_weighted: bool, seed: u64) -> (f64, f64) {
    let raw = synth(SynthKind::Forgetting, 1000, 200, 100 + seed);
    let data = prepared(&raw, 0.1, seed);
    let mut cfg = tiny_config(32, 2);
    cfg.time_weighted = time_weighted;
    let model = Model::new(cfg, data.catalog.clone(), seed).unwrap();
    let mut trainer = Trainer::new(
        model,
        train_config(32, 64, 2000, 100, 1e-3, seed),
        &data.train,
        &data.valid,
    )
    .unwrap();
    let m = trainer.run(None, |_| {}).unwrap().final_metrics.unwrap();
    let held: Vec<i64> = data
        .valid
        .iter()
        .flat_map(|v| v.seq.row_id[v.start..].to_vec())
        .collect();
    (m.auc, bayes_auc(&raw, &held).unwrap())
}

fn criterion_6_directional_ablation() -> bool {
    let started = Instant::now();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3 {
        let (on, oracle) = forgetting_auc(true, seed);
        let (off, _) = forgetting_auc(false, seed);
        gaps.push(on - off);
        detail.push(format!("seed {seed}: on {on:.4} off {off:.4} oracle {oracle:.4}"));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let elapsed = started.elapsed();
    let pass = mean >= 0.005;
    report(
        6,
        "directional ablation",
        pass,
        &format!("mean AUC gain {mean:+.4} (needs +0.005); {}", detail.join("; ")),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 7

fn criterion_7_streaming_parity() -> bool {
    let started = Instant::now();
    let raw = synth(SynthKind::Skill, 300, 80, 7);
    let data = prepared(&raw, 0.2, 7);
    let model = Model::new(tiny_config(32, 2), data.catalog.clone(), 7).unwrap();
    let mut trainer = Trainer::new(model, train_config(16, 128, 150, 20, 1e-3, 7), &data.train, &data.valid).unwrap();
    trainer.run(None, |_| {}).unwrap();
    let model = trainer.model;

    let window = 512;
    let offline = evaluate(&model, &data.valid, window).unwrap();
    let (histories, events) = stream_events(&data.valid);
    let sim = run_simulation(&model, &histories, &events, 50, window).unwrap();
    let gap = (sim.metrics.auc - offline.auc).abs();

    // No-peek: answers of group g and later never move predictions of
    // groups up to g.
    let small_valid: Vec<_> = data.valid.iter().take(40).cloned().collect();
    let (hist, evs) = stream_events(&small_valid);
    let groups = make_groups(&evs, 8).unwrap();
    let base = run_simulation(&model, &hist, &evs, 8, window).unwrap().predictions;
    let group_of: HashMap<i64, usize> = groups
        .iter()
        .flat_map(|g| g.rows.iter().map(move |r| (r.row_id, g.group_id)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut violations = 0;
    for _ in 0..50 {
        let g = rng.random_range(0..groups.len());
        let perturbed: Vec<StreamEvent> = evs
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if group_of[&e.row_id] >= g && !e.is_lecture {
                    e.answered_correctly = rng.random_range(1..=2);
                    e.user_answer = rng.random_range(1..=4);
                }
                e
            })
            .collect();
        let out = run_simulation(&model, &hist, &perturbed, 8, window)
            .unwrap()
            .predictions;
        for (a, b) in base.iter().zip(&out) {
            if group_of[&a.0] <= g && a.1.to_bits() != b.1.to_bits() {
                violations += 1;
            }
        }
    }

    let elapsed = started.elapsed();
    let pass = gap <= 0.005 && violations == 0;
    report(
        7,
        "streaming parity",
        pass,
        &format!(
            "stream AUC {:.5} vs offline {:.5} (gap {gap:.2e}); {} groups at {:.0} rows/s; no-peek violations {violations} over 50 perturbations",
            sim.metrics.auc, offline.auc, sim.groups, sim.rows_per_second
        ),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 8

fn criterion_8_schedule_and_optimizer() -> bool {
    let started = Instant::now();
    let s = LrSchedule::new(2.5e-4, 4000, 30000).unwrap();
    let at_peak = lr_at_step(4000, &s);
    let exact = at_peak == 2.5e-4;
    let jump = (lr_at_step(4000, &s) - lr_at_step(3999, &s)).abs();
    let continuous = jump <= 2.5e-4 / 4000.0 + 1e-18 && (lr_at_step(4001, &s) - at_peak).abs() < 1e-12;

    // One Adam step from zero moments: m = (1-b1) g, v = (1-b2) g^2, and the
    // bias-corrected update is lr * g / (|g| + eps).
    let (lr, g, w0) = (1e-3, 0.5f64, 2.0);
    let mut p = Param::new("w", Tensor::from_vec(&[1], vec![w0]).unwrap());
    p.grad.data_mut()[0] = g;
    let mut params = vec![p];
    let mut st = AdamState::with_defaults(&params);
    adam_step(&mut params, &mut st, lr).unwrap();
    let expected = w0 - lr * g / (g.abs() + 1e-9);
    let adam_err = (params[0].value.data()[0] - expected).abs();

    let elapsed = started.elapsed();
    let pass = exact && continuous && adam_err <= 1e-12;
    report(
        8,
        "schedule and optimizer",
        pass,
        &format!("lr(4000) = {at_peak:e}, step jump at warmup {jump:.3e}, adam error {adam_err:.1e}"),
        elapsed,
    );
    pass
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) {
    let mut full = vec!["timekt"];
    full.extend_from_slice(args);
    assert_eq!(timekt::cli::main_with_args(full), 0, "timekt {args:?} failed");
}

fn train_run(dir: &std::path::Path, name: &str, seed: &str) -> Vec<u8> {
    let out = dir.join(name);
    cli(&[
        "train",
        "--data",
        dir.join("prep").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        seed,
        "--max-steps",
        "60",
        "--seq-len",
        "32",
        "--set",
        "d_model=16",
        "--set",
        "heads=2",
        "--set",
        "encoder_layers=1",
        "--set",
        "decoder_layers=1",
        "--set",
        "d_ff=32",
        "--set",
        "batch_size=8",
        "--set",
        "eval_seq_len=32",
        "--set",
        "warmup_steps=10",
        "--set",
        "eval_every=20",
    ]);
    std::fs::read(out.join(timekt::cli::METRICS_FILE)).unwrap()
}

fn criterion_9_determinism() -> bool {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    cli(&[
        "synth",
        "--kind",
        "skill",
        "--users",
        "60",
        "--interactions",
        "60",
        "--seed",
        "9",
        "--out",
        &p("raw"),
    ]);
    cli(&[
        "prepare",
        "--raw",
        &p("raw"),
        "--out",
        &p("prep"),
        "--seed",
        "9",
        "--set",
        "holdout_fraction=0.2",
    ]);
    let a = train_run(dir.path(), "a", "3");
    let b = train_run(dir.path(), "b", "3");
    let c = train_run(dir.path(), "c", "4");
    let lines = a.iter().filter(|&&ch| ch == b'\n').count();
    let elapsed = started.elapsed();
    let pass = a == b && lines >= 4 && a != c;
    report(
        9,
        "determinism",
        pass,
        &format!(
            "metrics.tsv of two seed-3 CLI runs byte-identical: {} ({} bytes, {lines} lines); seed 4 differs: {}",
            a == b,
            a.len(),
            a != c
        ),
        elapsed,
    );
    pass
}

fn main() {
    let criteria: [(u32, fn() -> bool); 9] = [
        (1, criterion_1_gradient_suite),
        (2, criterion_2_no_leakage),
        (3, criterion_3_ablation_equivalences),
        (4, criterion_4_overfit_fixture),
        (5, criterion_5_synthetic_skill),
        (6, criterion_6_directional_ablation),
        (7, criterion_7_streaming_parity),
        (8, criterion_8_schedule_and_optimizer),
        (9, criterion_9_determinism),
    ];
    // `cargo test -p timekt --test acceptance -- 5 7` runs a subset.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(true) => {}
            Ok(false) => failed.push(n),
            Err(_) => {
                println!("criterion {n}: FAIL (panicked)");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

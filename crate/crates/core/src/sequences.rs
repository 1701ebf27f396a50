//! Fixed-length windows, batches and the timestamp-derived attention inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::UserSequence;

/// Encoded `answered_correctly` values (fixed small-field layout).
pub const ANSWER_INCORRECT: u8 = 1;
pub const ANSWER_CORRECT: u8 = 2;

/// A user sequence slice cut and padded to a fixed length. Padding is
/// always a suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub content: Vec<u32>,
    pub is_lecture: Vec<bool>,
    pub timestamp: Vec<i64>,
    pub time_lag: Vec<i64>,
    pub answered_correctly: Vec<u8>,
    pub user_answer: Vec<u8>,
    pub elapsed_time: Vec<Option<i64>>,
    pub had_explanation: Vec<u8>,
    pub pad: Vec<bool>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.pad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad.iter().take_while(|p| !**p).count()
    }

    /// Events `[start, end)` of `seq` padded to `len`.
    pub fn from_range(seq: &UserSequence, start: usize, end: usize, len: usize) -> Self {
        assert!(start <= end && end <= seq.len() && end - start <= len);
        let n = end - start;
        let fill = len - n;
        let last_ts = if n > 0 { seq.timestamp[end - 1] } else { 0 };
        fn padded<T: Clone>(src: &[T], fill: usize, v: T) -> Vec<T> {
            let mut out = Vec::with_capacity(src.len() + fill);
            out.extend_from_slice(src);
            out.extend(std::iter::repeat_n(v, fill));
            out
        }
        TrainingWindow {
            content: padded(&seq.content[start..end], fill, 0),
            is_lecture: padded(&seq.is_lecture[start..end], fill, false),
            timestamp: padded(&seq.timestamp[start..end], fill, last_ts),
            time_lag: padded(&seq.time_lag[start..end], fill, 0),
            answered_correctly: padded(&seq.answered_correctly[start..end], fill, 0),
            user_answer: padded(&seq.user_answer[start..end], fill, 0),
            elapsed_time: padded(&seq.elapsed_time[start..end], fill, None),
            had_explanation: padded(&seq.had_explanation[start..end], fill, 0),
            pad: padded(&vec![false; n], fill, true),
        }
    }

    /// True where the position is a non-pad question with a known answer.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| {
                !self.pad[i]
                    && !self.is_lecture[i]
                    && matches!(self.answered_correctly[i], ANSWER_INCORRECT | ANSWER_CORRECT)
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.answered_correctly
            .iter()
            .map(|&a| if a == ANSWER_CORRECT { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Cuts `seq` into windows of length `len`. Sequences no longer than `len`
/// give one padded window; longer ones are split at a uniformly random
/// phase in `[0, len)` and chunked from there.
pub fn window_sequence<R: Rng + ?Sized>(seq: &UserSequence, len: usize, rng: &mut R) -> Vec<TrainingWindow> {
    assert!(len >= 1, "window length must be at least 1");
    if seq.len() <= len {
        return vec![TrainingWindow::from_range(seq, 0, seq.len(), len)];
    }
    let phase = rng.random_range(0..len);
    window_sequence_at_phase(seq, len, phase)
}

pub fn window_sequence_at_phase(seq: &UserSequence, len: usize, phase: usize) -> Vec<TrainingWindow> {
    chunk_bounds(seq.len(), len, phase)
        .into_iter()
        .map(|(s, e)| TrainingWindow::from_range(seq, s, e, len))
        .collect()
}

/// `[start, end)` chunk boundaries: a first chunk of `phase` events (if
/// non-empty) followed by chunks of `len`.
pub fn chunk_bounds(n: usize, len: usize, phase: usize) -> Vec<(usize, usize)> {
    if n <= len {
        return vec![(0, n)];
    }
    let mut out = Vec::new();
    let first = phase.min(n);
    if first > 0 {
        out.push((0, first));
    }
    let mut s = first;
    while s < n {
        let e = (s + len).min(n);
        out.push((s, e));
        s = e;
    }
    out
}

/// `allow[i][j]`: query `i` may attend key `j` iff both are real and
/// `t_j <= t_i`.
pub fn build_self_attention_mask(timestamps: &[i64], pad: &[bool]) -> Vec<bool> {
    build_mask(timestamps, pad, |tq, tk| tk <= tq)
}

/// Decoder query `i` may see encoder key `j` iff both are real and
/// `t_j < t_i`.
pub fn build_cross_attention_mask(timestamps: &[i64], pad: &[bool]) -> Vec<bool> {
    build_mask(timestamps, pad, |tq, tk| tk < tq)
}

fn build_mask(timestamps: &[i64], pad: &[bool], allow: impl Fn(i64, i64) -> bool) -> Vec<bool> {
    let l = timestamps.len();
    let mut m = vec![false; l * l];
    for i in 0..l {
        if pad[i] {
            continue;
        }
        for j in 0..l {
            m[i * l + j] = !pad[j] && allow(timestamps[i], timestamps[j]);
        }
    }
    m
}

/// `ln(max(t_i - t_j, 1))` with `t` in milliseconds.
pub fn build_log_time_gap(timestamps: &[i64]) -> Vec<f64> {
    let l = timestamps.len();
    let mut g = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let d = timestamps[i].saturating_sub(timestamps[j]);
            if d > 1 {
                g[i * l + j] = (d as f64).ln();
            }
        }
    }
    g
}

/// Per-window attention inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInputs {
    pub self_mask: Vec<bool>,
    pub cross_mask: Vec<bool>,
    pub log_gap: Vec<f64>,
}

impl AttentionInputs {
    pub fn for_window(w: &TrainingWindow) -> Self {
        AttentionInputs {
            self_mask: build_self_attention_mask(&w.timestamp, &w.pad),
            cross_mask: build_cross_attention_mask(&w.timestamp, &w.pad),
            log_gap: build_log_time_gap(&w.timestamp),
        }
    }
}

/// Stacked windows of equal length with masks, log gaps, loss mask and
/// labels. Per-window `[L, L]` blocks are stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub windows: Vec<TrainingWindow>,
    pub seq_len: usize,
    pub attention: Vec<AttentionInputs>,
    pub loss_mask: Vec<bool>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.windows.len()
    }

    pub fn loss_mask_of(&self, b: usize) -> &[bool] {
        &self.loss_mask[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn labels_of(&self, b: usize) -> &[f64] {
        &self.labels[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

pub fn assemble_batch(windows: Vec<TrainingWindow>) -> Result<Batch> {
    let seq_len = windows.first().map_or(0, |w| w.len());
    for (i, w) in windows.iter().enumerate() {
        let lens = [
            w.content.len(),
            w.is_lecture.len(),
            w.timestamp.len(),
            w.time_lag.len(),
            w.answered_correctly.len(),
            w.user_answer.len(),
            w.elapsed_time.len(),
            w.had_explanation.len(),
            w.pad.len(),
        ];
        if lens.iter().any(|&n| n != seq_len) {
            return Err(Error::Shape(format!(
                "window {i} has column lengths {lens:?}, batch length is {seq_len}"
            )));
        }
    }
    let attention = windows.iter().map(AttentionInputs::for_window).collect();
    let loss_mask = windows.iter().flat_map(|w| w.loss_mask()).collect();
    let labels = windows.iter().flat_map(|w| w.labels()).collect();
    Ok(Batch {
        windows,
        seq_len,
        attention,
        loss_mask,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn seq_of(ts: &[i64], lecture: &[bool]) -> UserSequence {
        let n = ts.len();
        UserSequence {
            user_id: 1,
            row_id: (0..n as i64).collect(),
            content: (1..=n as u32).collect(),
            is_lecture: lecture.to_vec(),
            timestamp: ts.to_vec(),
            task_container_id: ts.to_vec(),
            time_lag: vec![0; n],
            answered_correctly: lecture.iter().map(|&l| if l { 3 } else { ANSWER_CORRECT }).collect(),
            user_answer: vec![1; n],
            elapsed_time: vec![None; n],
            had_explanation: vec![3; n],
        }
    }

    fn seq_len(n: usize) -> UserSequence {
        let ts: Vec<i64> = (0..n as i64).collect();
        seq_of(&ts, &vec![false; n])
    }

    #[test]
    fn short_sequence_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = window_sequence(&seq_len(3), 5, &mut rng);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].pad, vec![false, false, false, true, true]);
        assert_eq!(&w[0].content[3..], &[0, 0]);
        assert_eq!(&w[0].answered_correctly[3..], &[0, 0]);
    }

    #[test]
    fn partition_arithmetic() {
        let w = window_sequence_at_phase(&seq_len(2048), 1024, 0);
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|w| w.real_len() == 1024));

        let w = window_sequence_at_phase(&seq_len(1030), 1024, 100);
        assert_eq!(w.iter().map(|w| w.real_len()).collect::<Vec<_>>(), vec![100, 930]);
        assert!(w.iter().all(|w| w.len() == 1024));
    }

    proptest! {
        #[test]
        fn windows_cover_sequence_exactly_once(n in 1usize..300, len in 1usize..64, seed in any::<u64>()) {
            let s = seq_len(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ws = window_sequence(&s, len, &mut rng);
            let mut rows = Vec::new();
            for w in &ws {
                prop_assert_eq!(w.len(), len);
                let r = w.real_len();
                prop_assert!(w.pad[r..].iter().all(|&p| p));
                rows.extend_from_slice(&w.content[..r]);
            }
            prop_assert_eq!(rows, s.content);
        }

        #[test]
        fn mask_invariants(raw in proptest::collection::vec(0i64..5, 1..24), npad in 0usize..4) {
            let mut ts = raw.clone();
            ts.sort();
            let l = ts.len() + npad;
            let mut pad = vec![false; ts.len()];
            pad.extend(vec![true; npad]);
            let last = *ts.last().unwrap();
            ts.extend(vec![last; npad]);
            let s = build_self_attention_mask(&ts, &pad);
            let c = build_cross_attention_mask(&ts, &pad);
            let g = build_log_time_gap(&ts);
            for i in 0..l {
                prop_assert_eq!(s[i * l + i], !pad[i]);
                prop_assert!(!c[i * l + i]);
                prop_assert_eq!(g[i * l + i], 0.0);
                for j in 0..l {
                    if c[i * l + j] {
                        prop_assert!(s[i * l + j] && ts[i] != ts[j]);
                    }
                    if pad[j] {
                        prop_assert!(!s[i * l + j] && !c[i * l + j]);
                    }
                    prop_assert!(g[i * l + j] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn self_mask_examples() {
        let m = build_self_attention_mask(&[10, 10, 20], &[false; 3]);
        assert_eq!(m, vec![true, true, false, true, true, false, true, true, true]);
        assert_eq!(build_self_attention_mask(&[5], &[false]), vec![true]);
        assert!(build_self_attention_mask(&[1, 2], &[true, true]).iter().all(|&b| !b));
    }

    #[test]
    fn cross_mask_examples() {
        let m = build_cross_attention_mask(&[10, 10, 20], &[false; 3]);
        assert_eq!(m, vec![false, false, false, false, false, false, true, true, false]);
        let m = build_cross_attention_mask(&[1, 2, 3], &[false; 3]);
        assert_eq!(m, vec![false, false, false, true, false, false, true, true, false]);
        assert!(build_cross_attention_mask(&[4, 4, 4], &[false; 3]).iter().all(|&b| !b));
    }

    #[test]
    fn log_gap_examples() {
        let g = build_log_time_gap(&[0, 1000]);
        assert_eq!(g[0], 0.0);
        assert!((g[2] - 6.907755278982137).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
        assert_eq!(build_log_time_gap(&[7, 8])[2], 0.0);
    }

    #[test]
    fn batch_examples() {
        let w = TrainingWindow::from_range(&seq_of(&[1, 2], &[false, true]), 0, 2, 2);
        let b = assemble_batch(vec![w.clone(), w.clone()]).unwrap();
        assert_eq!(b.loss_mask, vec![true, false, true, false]);
        assert_eq!(b.attention[0], b.attention[1]);

        let empty = TrainingWindow::from_range(&seq_of(&[], &[]), 0, 0, 2);
        let b = assemble_batch(vec![w.clone(), empty]).unwrap();
        assert_eq!(b.loss_mask_of(1), &[false, false]);

        let mut bad = w.clone();
        bad.pad.push(true);
        assert!(matches!(assemble_batch(vec![w, bad]), Err(Error::Shape(_))));
    }
}

//! Train/validation split: whole held-out users plus per-user tails.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{question_bundles, UserSequence};

/// A validation user: `seq` holds the full history, positions before
/// `start` are context only.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSequence {
    pub seq: UserSequence,
    pub start: usize,
}

/// Encoded N/A for the explanation flag (pad 0, false 1, true 2).
const EXPLANATION_NA: u8 = 3;

/// Splits users into a training set and a validation set holding about
/// `holdout_fraction` of all rows.
///
/// A seeded sample of users (about `new_user_fraction` of the validation
/// rows, at least one user) is held out entirely; the remaining budget is
/// taken from the tails of the other users in proportion to their length.
/// Tails start at a bundle boundary and every continuing user keeps at
/// least one bundle for training.
pub fn split_train_validation(
    sequences: Vec<UserSequence>,
    holdout_fraction: f64,
    new_user_fraction: f64,
    seed: u64,
) -> Result<(Vec<UserSequence>, Vec<ValidationSequence>)> {
    for (name, f) in [
        ("holdout_fraction", holdout_fraction),
        ("new_user_fraction", new_user_fraction),
    ] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("{name} must be in [0, 1), got {f}")));
        }
    }
    let total: usize = sequences.iter().map(|s| s.len()).sum();
    if holdout_fraction == 0.0 || total == 0 {
        return Ok((sequences, Vec::new()));
    }
    let budget = (holdout_fraction * total as f64).round() as usize;

    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_new = vec![false; sequences.len()];
    let new_budget = new_user_fraction * budget as f64;
    let mut new_rows = 0usize;
    if new_user_fraction > 0.0 && sequences.len() > 1 {
        for &u in &order[..order.len() - 1] {
            if new_rows > 0 && new_rows as f64 >= new_budget {
                break;
            }
            is_new[u] = true;
            new_rows += sequences[u].len();
        }
    }

    let remaining = budget.saturating_sub(new_rows);
    let cont_rows: usize = sequences
        .iter()
        .zip(&is_new)
        .filter(|(_, n)| !**n)
        .map(|(s, _)| s.len())
        .sum();
    let mut train = Vec::with_capacity(sequences.len());
    let mut valid = Vec::new();
    for (seq, new) in sequences.into_iter().zip(is_new) {
        if new {
            valid.push(ValidationSequence { seq, start: 0 });
            continue;
        }
        let want = if cont_rows == 0 {
            0
        } else {
            (remaining as f64 * seq.len() as f64 / cont_rows as f64).round() as usize
        };
        let cut = tail_cut(&seq, want);
        if cut >= seq.len() {
            train.push(seq);
            continue;
        }
        let prefix = training_prefix(&seq, cut);
        train.push(prefix);
        valid.push(ValidationSequence { seq, start: cut });
    }
    Ok((train, valid))
}

/// Index where a tail of about `want` events begins, moved back to a
/// bundle start; `seq.len()` when nothing is held out.
fn tail_cut(seq: &UserSequence, want: usize) -> usize {
    if want == 0 || seq.is_empty() {
        return seq.len();
    }
    let cut = seq.bundle_start(seq.len().saturating_sub(want));
    if cut == 0 {
        // Keep the first bundle for training.
        let first_end = (1..seq.len()).find(|&i| seq.bundle_start(i) == i).unwrap_or(seq.len());
        return first_end;
    }
    cut
}

/// `seq[..cut]` with the last question bundle's realigned features reset,
/// since they were taken from the held-out tail.
pub(crate) fn training_prefix(seq: &UserSequence, cut: usize) -> UserSequence {
    let mut prefix = seq.slice(0, cut);
    if let Some(&(s, e)) = question_bundles(&prefix).last() {
        for i in s..e {
            prefix.elapsed_time[i] = None;
            prefix.had_explanation[i] = EXPLANATION_NA;
        }
    }
    prefix
}

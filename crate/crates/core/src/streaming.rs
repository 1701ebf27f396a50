//! Grouped, answer-delayed delivery of held-out events and the per-user
//! history buffers used to predict them.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{question_bundles, UserSequence};
use crate::model::Model;
use crate::sequences::{TrainingWindow, ANSWER_CORRECT, ANSWER_INCORRECT};
use crate::training::{report, MetricsReport, ScoredPosition, ValidationSequence};

pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_GROUP_SIZE: usize = 50;

/// Encoded N/A values of the small answer-side fields.
const ANSWERED_NA: u8 = 3;
const USER_ANSWER_NA: u8 = 5;
const EXPLANATION_NA: u8 = 3;

/// One held-out row as the stream delivers it. `prior_*` describe the
/// user's previous question bundle, as in the raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamEvent {
    pub row_id: i64,
    pub user_id: i64,
    pub timestamp: i64,
    pub task_container_id: i64,
    pub content: u32,
    pub is_lecture: bool,
    pub prior_elapsed: Option<i64>,
    pub prior_explanation: u8,
    /// Withheld until the next group's reveal.
    pub answered_correctly: u8,
    pub user_answer: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reveal {
    pub user_id: i64,
    pub row_id: i64,
    pub answered_correctly: u8,
    pub user_answer: u8,
}

/// Rows delivered together (answers stripped) plus the answers of the
/// previous group.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamGroup {
    pub group_id: usize,
    pub rows: Vec<StreamEvent>,
    pub reveal: Vec<Reveal>,
}

/// Chunks time-sorted events into groups of at most `max_group_size`
/// rows. A user's rows at one timestamp are never split, and a group closes before a user would
/// contribute a second bundle, so every row sits at its user's frontier.
pub fn make_groups(events: &[StreamEvent], max_group_size: usize) -> Result<Vec<StreamGroup>> {
    if max_group_size == 0 {
        return Err(Error::Config("max_group_size must be >= 1".into()));
    }
    if events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Stream("events are not sorted by timestamp".into()));
    }
    // Units are a user's rows at one timestamp (whole bundles, since rows
    // sharing a timestamp see each other), kept in order of first appearance.
    let mut units: Vec<Vec<&StreamEvent>> = Vec::new();
    let mut open: HashMap<i64, usize> = HashMap::new();
    let mut open_ts = i64::MIN;
    for e in events {
        if e.timestamp != open_ts {
            open.clear();
            open_ts = e.timestamp;
        }
        let key = e.user_id;
        match open.get(&key) {
            Some(&u) => units[u].push(e),
            None => {
                open.insert(key, units.len());
                units.push(vec![e]);
            }
        }
    }

    let mut groups: Vec<Vec<StreamEvent>> = Vec::new();
    let mut current: Vec<StreamEvent> = Vec::new();
    let mut users: Vec<i64> = Vec::new();
    for unit in units {
        if unit.len() > max_group_size {
            return Err(Error::Stream(format!(
                "bundle of {} rows (user {}, timestamp {}) exceeds the group size {}",
                unit.len(),
                unit[0].user_id,
                unit[0].timestamp,
                max_group_size
            )));
        }
        let user = unit[0].user_id;
        if current.len() + unit.len() > max_group_size || users.contains(&user) {
            groups.push(std::mem::take(&mut current));
            users.clear();
        }
        users.push(user);
        current.extend(unit.into_iter().cloned());
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let mut out = Vec::with_capacity(groups.len());
    let mut reveal = Vec::new();
    for (gid, rows) in groups.into_iter().enumerate() {
        let next_reveal = rows
            .iter()
            .filter(|r| !r.is_lecture)
            .map(|r| Reveal {
                user_id: r.user_id,
                row_id: r.row_id,
                answered_correctly: r.answered_correctly,
                user_answer: r.user_answer,
            })
            .collect();
        let stripped = rows
            .into_iter()
            .map(|r| StreamEvent {
                answered_correctly: ANSWERED_NA,
                user_answer: if r.is_lecture { r.user_answer } else { USER_ANSWER_NA },
                ..r
            })
            .collect();
        out.push(StreamGroup {
            group_id: gid,
            rows: stripped,
            reveal: std::mem::replace(&mut reveal, next_reveal),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- buffers

#[derive(Clone, Debug, PartialEq)]
struct HistoryEvent {
    row_id: i64,
    content: u32,
    is_lecture: bool,
    timestamp: i64,
    task_container_id: i64,
    time_lag: i64,
    answered_correctly: u8,
    user_answer: u8,
    elapsed_time: Option<i64>,
    had_explanation: u8,
}

/// The latest `capacity` events of one user, oldest evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct UserHistoryBuffer {
    events: VecDeque<HistoryEvent>,
    capacity: usize,
}

impl UserHistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        UserHistoryBuffer {
            events: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// A buffer holding the tail of an encoded history.
    pub fn from_sequence(seq: &UserSequence, capacity: usize) -> Self {
        let mut b = Self::new(capacity);
        for i in seq.len().saturating_sub(capacity)..seq.len() {
            b.push(HistoryEvent {
                row_id: seq.row_id[i],
                content: seq.content[i],
                is_lecture: seq.is_lecture[i],
                timestamp: seq.timestamp[i],
                task_container_id: seq.task_container_id[i],
                time_lag: seq.time_lag[i],
                answered_correctly: seq.answered_correctly[i],
                user_answer: seq.user_answer[i],
                elapsed_time: seq.elapsed_time[i],
                had_explanation: seq.had_explanation[i],
            });
        }
        b
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.events.iter().map(|e| e.timestamp).collect()
    }

    fn push(&mut self, e: HistoryEvent) {
        if self.events.len() == self.capacity {
            self.events.pop_front();
        }
        self.events.push_back(e);
    }

    /// Appends a new row with unknown answer fields. For a question, the
    /// row's prior-question fields are written onto the most recent
    /// question bundle already in the buffer.
    fn append(&mut self, row: &StreamEvent) -> Result<()> {
        let time_lag = match self.events.back() {
            None => 0,
            Some(last) if (last.timestamp, last.task_container_id) == (row.timestamp, row.task_container_id) => {
                last.time_lag
            }
            Some(last) => row.timestamp - last.timestamp,
        };
        if time_lag < 0 {
            return Err(Error::Stream(format!(
                "row {} of user {} goes back in time by {} ms",
                row.row_id, row.user_id, -time_lag
            )));
        }
        let starts_bundle = self
            .events
            .back()
            .is_none_or(|l| (l.timestamp, l.task_container_id) != (row.timestamp, row.task_container_id));
        if !row.is_lecture && starts_bundle {
            self.fill_previous_question_bundle(row.prior_elapsed, row.prior_explanation);
        }
        self.push(HistoryEvent {
            row_id: row.row_id,
            content: row.content,
            is_lecture: row.is_lecture,
            timestamp: row.timestamp,
            task_container_id: row.task_container_id,
            time_lag,
            answered_correctly: if row.is_lecture {
                row.answered_correctly
            } else {
                ANSWERED_NA
            },
            user_answer: if row.is_lecture {
                row.user_answer
            } else {
                USER_ANSWER_NA
            },
            elapsed_time: None,
            had_explanation: EXPLANATION_NA,
        });
        Ok(())
    }

    fn fill_previous_question_bundle(&mut self, elapsed: Option<i64>, explanation: u8) {
        let Some(last_q) = self.events.iter().rposition(|e| !e.is_lecture) else {
            return;
        };
        let key = (self.events[last_q].timestamp, self.events[last_q].task_container_id);
        let skip = self.events.len() - 1 - last_q;
        for e in self.events.iter_mut().rev().skip(skip) {
            if (e.timestamp, e.task_container_id) != key {
                break;
            }
            e.elapsed_time = elapsed;
            e.had_explanation = explanation;
        }
    }

    fn reveal(&mut self, r: &Reveal) -> Result<()> {
        let e = self
            .events
            .iter_mut()
            .rev()
            .find(|e| e.row_id == r.row_id)
            .ok_or_else(|| Error::Stream(format!("reveal for unknown row {} of user {}", r.row_id, r.user_id)))?;
        if e.answered_correctly != ANSWERED_NA {
            return Err(Error::Stream(format!("row {} revealed twice", r.row_id)));
        }
        e.answered_correctly = r.answered_correctly;
        e.user_answer = r.user_answer;
        Ok(())
    }

    /// The whole buffer as one unpadded window.
    pub fn window(&self) -> TrainingWindow {
        let ev = &self.events;
        TrainingWindow {
            content: ev.iter().map(|e| e.content).collect(),
            is_lecture: ev.iter().map(|e| e.is_lecture).collect(),
            timestamp: ev.iter().map(|e| e.timestamp).collect(),
            time_lag: ev.iter().map(|e| e.time_lag).collect(),
            answered_correctly: ev.iter().map(|e| e.answered_correctly).collect(),
            user_answer: ev.iter().map(|e| e.user_answer).collect(),
            elapsed_time: ev.iter().map(|e| e.elapsed_time).collect(),
            had_explanation: ev.iter().map(|e| e.had_explanation).collect(),
            pad: vec![false; ev.len()],
        }
    }
}

/// All user buffers of a stream.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub buffers: HashMap<i64, UserHistoryBuffer>,
    pub window: usize,
}

impl StreamState {
    pub fn new(window: usize) -> Self {
        StreamState {
            buffers: HashMap::new(),
            window,
        }
    }

    /// Seeds buffers with already-known histories.
    pub fn with_histories(histories: &[UserSequence], window: usize) -> Self {
        let mut s = Self::new(window);
        for h in histories {
            s.buffers.insert(h.user_id, UserHistoryBuffer::from_sequence(h, window));
        }
        s
    }
}

/// Fills the answers of the previous group's questions.
pub fn apply_reveal(state: &mut StreamState, reveal: &[Reveal]) -> Result<()> {
    for r in reveal {
        let buf = state
            .buffers
            .get_mut(&r.user_id)
            .ok_or_else(|| Error::Stream(format!("reveal for unknown user {}", r.user_id)))?;
        buf.reveal(r)?;
    }
    Ok(())
}

/// Appends the group's rows and predicts each new question.
pub fn predict_group(state: &mut StreamState, model: &Model, group: &StreamGroup) -> Result<Vec<(i64, f64)>> {
    let mut users: Vec<i64> = Vec::new();
    let mut new_rows: HashMap<i64, Vec<i64>> = HashMap::new();
    for row in &group.rows {
        let window = state.window;
        let buf = state
            .buffers
            .entry(row.user_id)
            .or_insert_with(|| UserHistoryBuffer::new(window));
        buf.append(row)?;
        let list = new_rows.entry(row.user_id).or_insert_with(|| {
            users.push(row.user_id);
            Vec::new()
        });
        if !row.is_lecture {
            list.push(row.row_id);
        }
    }
    let per_user: Vec<Vec<(i64, f64)>> = users
        .par_iter()
        .map(|u| -> Result<Vec<(i64, f64)>> {
            let wanted = &new_rows[u];
            if wanted.is_empty() {
                return Ok(Vec::new());
            }
            let buf = &state.buffers[u];
            let p = model.predict_window(&buf.window())?;
            Ok(buf
                .events
                .iter()
                .zip(p)
                .filter(|(e, _)| wanted.contains(&e.row_id))
                .map(|(e, p)| (e.row_id, p))
                .collect())
        })
        .collect::<Result<_>>()?;
    let probs: HashMap<i64, f64> = per_user.into_iter().flatten().collect();
    Ok(group
        .rows
        .iter()
        .filter(|r| !r.is_lecture)
        .map(|r| (r.row_id, probs[&r.row_id]))
        .collect())
}

/// Held-out events of validation users in stream form, with the known
/// history of each user (the part before its scored tail).
pub fn stream_events(valid: &[ValidationSequence]) -> (Vec<UserSequence>, Vec<StreamEvent>) {
    let mut histories = Vec::new();
    let mut events = Vec::new();
    for v in valid {
        let seq = &v.seq;
        if v.start > 0 {
            histories.push(crate::training::split::training_prefix(seq, v.start));
        }
        // Prior-question fields of each row: the realigned values of the
        // question bundle before the row's own.
        let bundles = question_bundles(seq);
        let mut prior = vec![(None, EXPLANATION_NA); seq.len()];
        for w in bundles.windows(2) {
            let (prev, cur) = (w[0], w[1]);
            for p in prior.iter_mut().take(cur.1).skip(cur.0) {
                *p = (seq.elapsed_time[prev.0], seq.had_explanation[prev.0]);
            }
        }
        for i in v.start..seq.len() {
            events.push(StreamEvent {
                row_id: seq.row_id[i],
                user_id: seq.user_id,
                timestamp: seq.timestamp[i],
                task_container_id: seq.task_container_id[i],
                content: seq.content[i],
                is_lecture: seq.is_lecture[i],
                prior_elapsed: prior[i].0,
                prior_explanation: prior[i].1,
                answered_correctly: seq.answered_correctly[i],
                user_answer: seq.user_answer[i],
            });
        }
    }
    events.sort_by_key(|e| (e.timestamp, e.user_id, e.row_id));
    (histories, events)
}

#[derive(Clone, Debug)]
pub struct SimulationOutcome {
    pub predictions: Vec<(i64, f64)>,
    pub metrics: MetricsReport,
    pub groups: usize,
    pub rows: usize,
    pub rows_per_second: f64,
}

/// Replays `events` group by group and scores the predictions against
/// the withheld answers.
pub fn run_simulation(
    model: &Model,
    histories: &[UserSequence],
    events: &[StreamEvent],
    max_group_size: usize,
    window: usize,
) -> Result<SimulationOutcome> {
    let started = Instant::now();
    let groups = make_groups(events, max_group_size)?;
    let mut state = StreamState::with_histories(histories, window);
    let mut predictions = Vec::new();
    for g in &groups {
        apply_reveal(&mut state, &g.reveal)?;
        predictions.extend(predict_group(&mut state, model, g)?);
    }
    let truth: HashMap<i64, u8> = events.iter().map(|e| (e.row_id, e.answered_correctly)).collect();
    let scored: Vec<ScoredPosition> = predictions
        .iter()
        .filter_map(|&(row_id, prob)| match truth[&row_id] {
            ANSWER_CORRECT => Some(ScoredPosition {
                row_id,
                label: 1.0,
                prob,
            }),
            ANSWER_INCORRECT => Some(ScoredPosition {
                row_id,
                label: 0.0,
                prob,
            }),
            _ => None,
        })
        .collect();
    let metrics = report(&scored)?;
    let secs = started.elapsed().as_secs_f64();
    Ok(SimulationOutcome {
        predictions,
        metrics,
        groups: groups.len(),
        rows: events.len(),
        rows_per_second: events.len() as f64 / secs.max(1e-9),
    })
}

/// Writes a `row_id,answered_correctly` CSV.
pub fn write_predictions(path: &Path, predictions: &[(i64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Csv {
        file: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(["row_id", "answered_correctly"]).map_err(csv_err)?;
    for (row, p) in predictions {
        w.write_record([row.to_string(), p.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::tests::tiny_catalog;
    use crate::model::tests::{random_sequence, tiny_config};
    use crate::training::{predict_validation, split_train_validation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(row: i64, user: i64, ts: i64, container: i64) -> StreamEvent {
        StreamEvent {
            row_id: row,
            user_id: user,
            timestamp: ts,
            task_container_id: container,
            content: 1,
            is_lecture: false,
            prior_elapsed: None,
            prior_explanation: EXPLANATION_NA,
            answered_correctly: 2,
            user_answer: 1,
        }
    }

    #[test]
    fn greedy_chunking() {
        let events: Vec<_> = (0..10).map(|i| ev(i, i, i * 10, 0)).collect();
        let g = make_groups(&events, 4).unwrap();
        assert_eq!(g.iter().map(|g| g.rows.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(g[0].reveal.is_empty());
        assert_eq!(
            g[1].reveal.iter().map(|r| r.row_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!(g[0].rows.iter().all(|r| r.answered_correctly == ANSWERED_NA));
        assert!(make_groups(&[], 4).unwrap().is_empty());
    }

    #[test]
    fn bundles_are_not_split() {
        let mut events: Vec<_> = (0..3).map(|i| ev(i, i, i, 0)).collect();
        events.extend((3..6).map(|i| ev(i, 9, 5, 7)));
        let g = make_groups(&events, 4).unwrap();
        assert_eq!(g.iter().map(|g| g.rows.len()).collect::<Vec<_>>(), vec![3, 3]);
        assert!(make_groups(&events, 2).is_err());
    }

    #[test]
    fn same_user_closes_group() {
        let events = vec![ev(0, 1, 0, 0), ev(1, 2, 1, 0), ev(2, 1, 2, 1)];
        let g = make_groups(&events, 10).unwrap();
        assert_eq!(g.iter().map(|g| g.rows.len()).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = UserHistoryBuffer::new(3);
        for i in 0..5 {
            b.append(&ev(i, 1, i * 10, i)).unwrap();
        }
        assert_eq!(b.timestamps(), vec![20, 30, 40]);
        assert_eq!(b.window().time_lag, vec![10, 10, 10]);
        assert!(b.append(&ev(9, 1, 5, 9)).is_err());
    }

    #[test]
    fn reveal_rules() {
        let mut s = StreamState::new(8);
        let g = StreamGroup {
            group_id: 0,
            rows: vec![ev(1, 1, 0, 0), ev(2, 2, 0, 0), ev(3, 3, 0, 0)],
            reveal: vec![],
        };
        let m = Model::new(tiny_config(), tiny_catalog().1, 1).unwrap();
        let p = predict_group(&mut s, &m, &g).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|(_, p)| *p > 0.0 && *p < 1.0));
        apply_reveal(&mut s, &[]).unwrap();
        let r = |u, row| Reveal {
            user_id: u,
            row_id: row,
            answered_correctly: 2,
            user_answer: 1,
        };
        apply_reveal(&mut s, &[r(1, 1), r(2, 2)]).unwrap();
        assert_eq!(s.buffers[&1].window().answered_correctly, vec![2]);
        assert_eq!(s.buffers[&3].window().answered_correctly, vec![ANSWERED_NA]);
        assert!(apply_reveal(&mut s, &[r(1, 1)]).is_err());
        assert!(apply_reveal(&mut s, &[r(1, 77)]).is_err());
        assert!(apply_reveal(&mut s, &[r(5, 1)]).is_err());
    }

    #[test]
    fn lecture_only_group_is_silent() {
        let mut s = StreamState::new(8);
        let mut l = ev(1, 1, 0, 0);
        l.content = 4;
        l.is_lecture = true;
        let g = StreamGroup {
            group_id: 0,
            rows: vec![l],
            reveal: vec![],
        };
        let m = Model::new(tiny_config(), tiny_catalog().1, 1).unwrap();
        assert!(predict_group(&mut s, &m, &g).unwrap().is_empty());
    }

    fn fixture(seed: u64) -> Vec<ValidationSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<UserSequence> = (0..12)
            .map(|u| {
                let n = rng.random_range(5..40);
                let mut s = random_sequence(&mut rng, n);
                s.user_id = u;
                s.row_id.iter_mut().for_each(|r| *r += 1000 * u);
                s
            })
            .collect();
        split_train_validation(users, 0.4, 0.3, seed).unwrap().1
    }

    #[test]
    fn streaming_matches_offline() {
        let m = Model::new(tiny_config(), tiny_catalog().1, 3).unwrap();
        let valid = fixture(1);
        let offline: HashMap<i64, f64> = predict_validation(&m, &valid, 64)
            .unwrap()
            .into_iter()
            .map(|s| (s.row_id, s.prob))
            .collect();
        let (hist, events) = stream_events(&valid);
        let out = run_simulation(&m, &hist, &events, 5, 64).unwrap();
        assert_eq!(out.metrics.count, offline.len());
        for (row, p) in &out.predictions {
            if let Some(q) = offline.get(row) {
                assert!((p - q).abs() < 1e-6, "row {row}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn no_peek() {
        let m = Model::new(tiny_config(), tiny_catalog().1, 3).unwrap();
        let valid = fixture(2);
        let (hist, events) = stream_events(&valid);
        let groups = make_groups(&events, 4).unwrap();
        let base = run_simulation(&m, &hist, &events, 4, 64).unwrap().predictions;
        let g = groups.len() / 2;
        let later: Vec<i64> = groups[g..]
            .iter()
            .flat_map(|g| g.rows.iter().map(|r| r.row_id))
            .collect();
        let mut perturbed = events.clone();
        for e in &mut perturbed {
            if later.contains(&e.row_id) && !e.is_lecture {
                e.answered_correctly = if e.answered_correctly == 2 { 1 } else { 2 };
                e.user_answer = 1 + e.user_answer % 4;
            }
        }
        let out = run_simulation(&m, &hist, &perturbed, 4, 64).unwrap_or_else(|e| panic!("{e}"));
        let upto: usize = groups[..=g]
            .iter()
            .map(|g| g.rows.iter().filter(|r| !r.is_lecture).count())
            .sum();
        for (a, b) in base[..upto].iter().zip(&out.predictions[..upto]) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }

    #[test]
    fn csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub.csv");
        write_predictions(&p, &[(3, 0.25), (7, 0.5)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "row_id,answered_correctly\n3,0.25\n7,0.5\n");
    }
}

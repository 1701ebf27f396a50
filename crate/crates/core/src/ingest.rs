//! Raw CSV parsing, categorical encodings, per-question statistics, time
//! lags and per-user grouping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContentType {
    Question,
    Lecture,
}

/// One row of `train.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub row_id: i64,
    pub timestamp: i64,
    pub user_id: i64,
    pub content_id: i64,
    pub content_type: ContentType,
    pub task_container_id: i64,
    pub user_answer: Option<u8>,
    pub answered_correctly: Option<bool>,
    pub prior_question_elapsed_time: Option<i64>,
    pub prior_question_had_explanation: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionMeta {
    pub question_id: i64,
    pub bundle_id: i64,
    pub correct_answer: i64,
    pub part: i64,
    pub tags: Vec<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LectureType {
    Concept,
    SolvingQuestion,
    Intention,
    Starter,
}

impl LectureType {
    pub const ALL: [LectureType; 4] = [
        LectureType::Concept,
        LectureType::SolvingQuestion,
        LectureType::Intention,
        LectureType::Starter,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "concept" => Some(LectureType::Concept),
            "solving question" => Some(LectureType::SolvingQuestion),
            "intention" => Some(LectureType::Intention),
            "starter" => Some(LectureType::Starter),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LectureType::Concept => "concept",
            LectureType::SolvingQuestion => "solving question",
            LectureType::Intention => "intention",
            LectureType::Starter => "starter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LectureMeta {
    pub lecture_id: i64,
    pub tag: i64,
    pub part: i64,
    pub type_of: LectureType,
}

/// Content kind as seen by the type embedding: questions share one slot,
/// lectures use their `type_of`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContentKind {
    Question,
    Lecture(LectureType),
}

// ---------------------------------------------------------------- encodings

/// Dense categorical encoding: 0 is padding, real values take `1..=n` in
/// sorted order and `n + 1` is the N/A index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoricalMap<T: Ord + Clone> {
    values: Vec<T>,
}

impl<T: Ord + Clone> CategoricalMap<T> {
    pub fn new(values: impl IntoIterator<Item = T>) -> Self {
        let set: BTreeSet<T> = values.into_iter().collect();
        CategoricalMap {
            values: set.into_iter().collect(),
        }
    }

    pub const PAD: usize = 0;

    pub fn na(&self) -> usize {
        self.values.len() + 1
    }

    /// Table size including pad and N/A rows.
    pub fn vocab_size(&self) -> usize {
        self.values.len() + 2
    }

    pub fn encode(&self, v: Option<&T>) -> Option<usize> {
        match v {
            None => Some(self.na()),
            Some(v) => self.values.binary_search(v).ok().map(|i| i + 1),
        }
    }

    /// `Some(None)` is the N/A index; `None` means pad or out of range.
    pub fn decode(&self, idx: usize) -> Option<Option<&T>> {
        if idx == self.na() {
            Some(None)
        } else if idx >= 1 && idx <= self.values.len() {
            Some(Some(&self.values[idx - 1]))
        } else {
            None
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentKey {
    pub content_type: ContentType,
    pub id: i64,
}

/// All encodings derived from the metadata tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingMaps {
    /// Content keys in index order; content index `i` is `contents[i - 1]`.
    pub contents: Vec<ContentKey>,
    content_index: BTreeMap<ContentKey, usize>,
    pub answered_correctly: CategoricalMap<bool>,
    pub user_answer: CategoricalMap<u8>,
    pub had_explanation: CategoricalMap<bool>,
    pub part: CategoricalMap<i64>,
    pub tag: CategoricalMap<i64>,
    pub kind: CategoricalMap<ContentKind>,
}

impl EncodingMaps {
    pub fn from_contents(contents: Vec<ContentKey>, parts: Vec<i64>, tags: Vec<i64>) -> Self {
        let content_index = contents.iter().enumerate().map(|(i, k)| (*k, i + 1)).collect();
        let mut kinds = vec![ContentKind::Question];
        kinds.extend(LectureType::ALL.iter().map(|&t| ContentKind::Lecture(t)));
        EncodingMaps {
            contents,
            content_index,
            answered_correctly: CategoricalMap::new([false, true]),
            user_answer: CategoricalMap::new([0u8, 1, 2, 3]),
            had_explanation: CategoricalMap::new([false, true]),
            part: CategoricalMap::new(parts),
            tag: CategoricalMap::new(tags),
            kind: CategoricalMap::new(kinds),
        }
    }

    pub fn content_index(&self, content_type: ContentType, id: i64) -> Option<usize> {
        self.content_index.get(&ContentKey { content_type, id }).copied()
    }

    pub fn content_key(&self, index: usize) -> Option<ContentKey> {
        index.checked_sub(1).and_then(|i| self.contents.get(i)).copied()
    }

    pub fn num_contents(&self) -> usize {
        self.contents.len()
    }

    pub fn num_questions(&self) -> usize {
        self.contents
            .iter()
            .filter(|k| k.content_type == ContentType::Question)
            .count()
    }
}

/// Per-question attempt counts and smoothed error rates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContentStats {
    counts: BTreeMap<i64, QuestionCounts>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct QuestionCounts {
    rows: u64,
    answered: u64,
    incorrect: u64,
}

impl ContentStats {
    pub fn popularity(&self, question_id: i64) -> u64 {
        self.counts.get(&question_id).map_or(0, |c| c.rows)
    }

    /// `(incorrect + 1) / (attempts + 2)`; 0.5 for unseen questions.
    pub fn difficulty(&self, question_id: i64) -> f64 {
        let c = self.counts.get(&question_id).copied().unwrap_or_default();
        (c.incorrect as f64 + 1.0) / (c.answered as f64 + 2.0)
    }

    pub fn total_popularity(&self) -> u64 {
        self.counts.values().map(|c| c.rows).sum()
    }

    pub fn max_popularity(&self) -> u64 {
        self.counts.values().map(|c| c.rows).max().unwrap_or(0)
    }

    pub fn question_ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.counts.keys().copied()
    }

    pub(crate) fn raw(&self) -> impl Iterator<Item = (i64, u64, u64, u64)> + '_ {
        self.counts.iter().map(|(&q, c)| (q, c.rows, c.answered, c.incorrect))
    }

    pub(crate) fn from_raw(rows: impl IntoIterator<Item = (i64, u64, u64, u64)>) -> Self {
        ContentStats {
            counts: rows
                .into_iter()
                .map(|(q, rows, answered, incorrect)| {
                    (
                        q,
                        QuestionCounts {
                            rows,
                            answered,
                            incorrect,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// One student's activity history in time order, fully encoded.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct UserSequence {
    pub user_id: i64,
    pub row_id: Vec<i64>,
    pub content: Vec<u32>,
    pub is_lecture: Vec<bool>,
    pub timestamp: Vec<i64>,
    pub task_container_id: Vec<i64>,
    pub time_lag: Vec<i64>,
    pub answered_correctly: Vec<u8>,
    pub user_answer: Vec<u8>,
    /// Time spent on this question (ms); `None` is N/A.
    pub elapsed_time: Vec<Option<i64>>,
    pub had_explanation: Vec<u8>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.row_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_id.is_empty()
    }

    /// Sub-sequence `[start, end)` with all columns sliced alike.
    pub fn slice(&self, start: usize, end: usize) -> UserSequence {
        UserSequence {
            user_id: self.user_id,
            row_id: self.row_id[start..end].to_vec(),
            content: self.content[start..end].to_vec(),
            is_lecture: self.is_lecture[start..end].to_vec(),
            timestamp: self.timestamp[start..end].to_vec(),
            task_container_id: self.task_container_id[start..end].to_vec(),
            time_lag: self.time_lag[start..end].to_vec(),
            answered_correctly: self.answered_correctly[start..end].to_vec(),
            user_answer: self.user_answer[start..end].to_vec(),
            elapsed_time: self.elapsed_time[start..end].to_vec(),
            had_explanation: self.had_explanation[start..end].to_vec(),
        }
    }

    /// Start index of the bundle containing `i`.
    pub fn bundle_start(&self, i: usize) -> usize {
        let mut s = i;
        while s > 0
            && self.timestamp[s - 1] == self.timestamp[i]
            && self.task_container_id[s - 1] == self.task_container_id[i]
        {
            s -= 1;
        }
        s
    }
}

// ---------------------------------------------------------------- parsing

pub const TRAIN_COLUMNS: [&str; 10] = [
    "row_id",
    "timestamp",
    "user_id",
    "content_id",
    "content_type_id",
    "task_container_id",
    "user_answer",
    "answered_correctly",
    "prior_question_elapsed_time",
    "prior_question_had_explanation",
];
pub const QUESTION_COLUMNS: [&str; 5] = ["question_id", "bundle_id", "correct_answer", "part", "tags"];
pub const LECTURE_COLUMNS: [&str; 4] = ["lecture_id", "tag", "part", "type_of"];

struct Table {
    file: String,
    reader: csv::Reader<std::fs::File>,
    columns: Vec<usize>,
}

fn open_table(path: &Path, columns: &[&str]) -> Result<Table> {
    let file = path.display().to_string();
    let handle = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(handle);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            file: file.clone(),
            message: e.to_string(),
        })?
        .clone();
    let mut idx = Vec::with_capacity(columns.len());
    for c in columns {
        match headers.iter().position(|h| h.trim() == *c) {
            Some(i) => idx.push(i),
            None => {
                return Err(Error::MissingColumn {
                    file,
                    column: (*c).to_string(),
                })
            }
        }
    }
    Ok(Table {
        file,
        reader,
        columns: idx,
    })
}

struct Row<'a> {
    file: &'a str,
    record: &'a csv::StringRecord,
    columns: &'a [usize],
    names: &'a [&'a str],
    key: String,
}

impl Row<'_> {
    fn cell(&self, c: usize) -> &str {
        self.record.get(self.columns[c]).unwrap_or("").trim()
    }

    fn bad(&self, c: usize, message: impl fmt::Display) -> Error {
        Error::BadCell {
            file: self.file.to_string(),
            row_id: self.key.clone(),
            column: self.names[c].to_string(),
            message: message.to_string(),
        }
    }

    fn int(&self, c: usize) -> Result<i64> {
        let s = self.cell(c);
        parse_int(s).ok_or_else(|| self.bad(c, format!("cannot parse `{s}` as an integer")))
    }

    fn opt_int(&self, c: usize) -> Result<Option<i64>> {
        let s = self.cell(c);
        if is_missing(s) {
            Ok(None)
        } else {
            self.int(c).map(Some)
        }
    }

    fn opt_bool(&self, c: usize) -> Result<Option<bool>> {
        let s = self.cell(c);
        if is_missing(s) {
            return Ok(None);
        }
        match s.to_ascii_lowercase().as_str() {
            "true" | "1" => Ok(Some(true)),
            "false" | "0" => Ok(Some(false)),
            _ => Err(self.bad(c, format!("cannot parse `{s}` as a boolean"))),
        }
    }
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("nan")
}

/// Integers, also accepting float spellings with an integral value
/// (`24000.0`).
fn parse_int(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f = s.parse::<f64>().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

fn for_each_row(table: &mut Table, names: &[&str], mut f: impl FnMut(&Row<'_>) -> Result<()>) -> Result<()> {
    let mut record = csv::StringRecord::new();
    let mut line = 1usize;
    loop {
        line += 1;
        match table.reader.read_record(&mut record) {
            Ok(false) => return Ok(()),
            Ok(true) => {}
            Err(e) => {
                return Err(Error::Csv {
                    file: table.file.clone(),
                    message: e.to_string(),
                })
            }
        }
        let key = record
            .get(table.columns[0])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("line {line}"));
        let row = Row {
            file: &table.file,
            record: &record,
            columns: &table.columns,
            names,
            key,
        };
        f(&row)?;
    }
}

/// Reads `train.csv`-shaped interactions in file order.
pub fn parse_interactions(path: impl AsRef<Path>) -> Result<Vec<RawInteraction>> {
    let mut table = open_table(path.as_ref(), &TRAIN_COLUMNS)?;
    let mut out = Vec::new();
    for_each_row(&mut table, &TRAIN_COLUMNS, |row| {
        let row_id = row.int(0)?;
        let timestamp = row.int(1)?;
        if timestamp < 0 {
            return Err(row.bad(1, "timestamp must be non-negative"));
        }
        let content_type = match row.int(4)? {
            0 => ContentType::Question,
            1 => ContentType::Lecture,
            v => return Err(row.bad(4, format!("content_type_id must be 0 or 1, got {v}"))),
        };
        // -1 is the raw-data sentinel for "no answer".
        let answer = row.opt_int(6)?.filter(|&v| v != -1);
        let correct = row.opt_int(7)?.filter(|&v| v != -1);
        let (user_answer, answered_correctly) = match content_type {
            ContentType::Lecture => {
                if answer.is_some() {
                    return Err(row.bad(6, "lecture rows carry no answer"));
                }
                if correct.is_some() {
                    return Err(row.bad(7, "lecture rows carry no answer"));
                }
                (None, None)
            }
            ContentType::Question => {
                let ua = match answer {
                    None => None,
                    Some(v @ 0..=3) => Some(v as u8),
                    Some(v) => return Err(row.bad(6, format!("user_answer must be 0..3, got {v}"))),
                };
                let ac = match correct {
                    None => None,
                    Some(0) => Some(false),
                    Some(1) => Some(true),
                    Some(v) => return Err(row.bad(7, format!("answered_correctly must be 0 or 1, got {v}"))),
                };
                (ua, ac)
            }
        };
        let elapsed = row.opt_int(8)?;
        if let Some(e) = elapsed {
            if e < 0 {
                return Err(row.bad(8, "elapsed time must be non-negative"));
            }
        }
        out.push(RawInteraction {
            row_id,
            timestamp,
            user_id: row.int(2)?,
            content_id: row.int(3)?,
            content_type,
            task_container_id: row.int(5)?,
            user_answer,
            answered_correctly,
            prior_question_elapsed_time: elapsed,
            prior_question_had_explanation: row.opt_bool(9)?,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Reads `questions.csv` and `lectures.csv`.
pub fn parse_metadata(
    questions_path: impl AsRef<Path>,
    lectures_path: impl AsRef<Path>,
) -> Result<(Vec<QuestionMeta>, Vec<LectureMeta>)> {
    let mut questions = Vec::new();
    let mut seen = BTreeSet::new();
    let mut table = open_table(questions_path.as_ref(), &QUESTION_COLUMNS)?;
    for_each_row(&mut table, &QUESTION_COLUMNS, |row| {
        let question_id = row.int(0)?;
        if !seen.insert(question_id) {
            return Err(Error::DuplicateId {
                kind: "question",
                id: question_id,
            });
        }
        let tags = parse_tags(row.cell(4)).map_err(|token| Error::MalformedTag { id: question_id, token })?;
        questions.push(QuestionMeta {
            question_id,
            bundle_id: row.int(1)?,
            correct_answer: row.int(2)?,
            part: row.int(3)?,
            tags,
        });
        Ok(())
    })?;

    let mut lectures = Vec::new();
    let mut seen = BTreeSet::new();
    let mut table = open_table(lectures_path.as_ref(), &LECTURE_COLUMNS)?;
    for_each_row(&mut table, &LECTURE_COLUMNS, |row| {
        let lecture_id = row.int(0)?;
        if !seen.insert(lecture_id) {
            return Err(Error::DuplicateId {
                kind: "lecture",
                id: lecture_id,
            });
        }
        let type_of = LectureType::parse(row.cell(3))
            .ok_or_else(|| row.bad(3, format!("unknown lecture type `{}`", row.cell(3))))?;
        lectures.push(LectureMeta {
            lecture_id,
            tag: row.int(1)?,
            part: row.int(2)?,
            type_of,
        });
        Ok(())
    })?;
    Ok((questions, lectures))
}

/// Splits a space-separated tag list. Returns the offending token on error.
pub fn parse_tags(s: &str) -> std::result::Result<Vec<i64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.trim()
        .split(' ')
        .map(|t| t.parse::<i64>().map_err(|_| t.to_string()))
        .collect()
}

// ---------------------------------------------------------------- derived data

/// Questions sorted by id take indices `1..=nq`, lectures follow.
pub fn build_encodings(questions: &[QuestionMeta], lectures: &[LectureMeta]) -> EncodingMaps {
    let mut contents: Vec<ContentKey> = questions
        .iter()
        .map(|q| ContentKey {
            content_type: ContentType::Question,
            id: q.question_id,
        })
        .collect();
    contents.sort();
    let mut lecture_keys: Vec<ContentKey> = lectures
        .iter()
        .map(|l| ContentKey {
            content_type: ContentType::Lecture,
            id: l.lecture_id,
        })
        .collect();
    lecture_keys.sort();
    contents.extend(lecture_keys);
    let parts = questions
        .iter()
        .map(|q| q.part)
        .chain(lectures.iter().map(|l| l.part))
        .collect();
    let tags = questions
        .iter()
        .flat_map(|q| q.tags.iter().copied())
        .chain(lectures.iter().map(|l| l.tag))
        .collect();
    EncodingMaps::from_contents(contents, parts, tags)
}

/// Popularity and difficulty from question rows; lectures are ignored.
/// Accumulated in shards and merged, so the result does not depend on
/// how the rows are partitioned.
pub fn compute_content_stats(interactions: &[RawInteraction]) -> ContentStats {
    let counts = interactions
        .par_chunks(1 << 16)
        .map(|chunk| {
            let mut m: BTreeMap<i64, QuestionCounts> = BTreeMap::new();
            for r in chunk.iter().filter(|r| r.content_type == ContentType::Question) {
                let c = m.entry(r.content_id).or_default();
                c.rows += 1;
                if let Some(ok) = r.answered_correctly {
                    c.answered += 1;
                    if !ok {
                        c.incorrect += 1;
                    }
                }
            }
            m
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (q, c) in b {
                let e = a.entry(q).or_default();
                e.rows += c.rows;
                e.answered += c.answered;
                e.incorrect += c.incorrect;
            }
            a
        });
    ContentStats { counts }
}

/// Time since the previous bundle for each event of one user's sorted
/// `(timestamp, task_container_id)` list. A bundle is a maximal run of
/// consecutive events sharing both values.
pub fn compute_time_lags(events: &[(i64, i64)]) -> std::result::Result<Vec<i64>, (usize, i64)> {
    let mut lags = Vec::with_capacity(events.len());
    let mut prev_bundle_ts: Option<i64> = None;
    let mut current_lag = 0;
    for (i, &(ts, container)) in events.iter().enumerate() {
        let same_bundle = i > 0 && events[i - 1] == (ts, container);
        if !same_bundle {
            if i > 0 {
                prev_bundle_ts = Some(events[i - 1].0);
            }
            current_lag = match prev_bundle_ts {
                None => 0,
                Some(p) => ts - p,
            };
            if current_lag < 0 {
                return Err((i, current_lag));
            }
        }
        lags.push(current_lag);
    }
    Ok(lags)
}

/// Groups interactions into per-user sequences sorted by
/// `(timestamp, row_id)`, with lags attached and elapsed time/explanation
/// moved onto the question bundle they describe.
pub fn group_by_user(interactions: &[RawInteraction], enc: &EncodingMaps) -> Result<Vec<UserSequence>> {
    let mut by_user: BTreeMap<i64, Vec<&RawInteraction>> = BTreeMap::new();
    for r in interactions {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let users: Vec<(i64, Vec<&RawInteraction>)> = by_user.into_iter().collect();
    users
        .into_par_iter()
        .map(|(user_id, mut rows)| {
            rows.sort_by_key(|r| (r.timestamp, r.row_id));
            encode_user(user_id, &rows, enc)
        })
        .collect()
}

fn encode_user(user_id: i64, rows: &[&RawInteraction], enc: &EncodingMaps) -> Result<UserSequence> {
    let n = rows.len();
    let keys: Vec<(i64, i64)> = rows.iter().map(|r| (r.timestamp, r.task_container_id)).collect();
    let time_lag = compute_time_lags(&keys).map_err(|(index, lag)| Error::NegativeLag { user_id, index, lag })?;

    let mut seq = UserSequence {
        user_id,
        time_lag,
        ..Default::default()
    };
    for r in rows {
        let content = enc
            .content_index(r.content_type, r.content_id)
            .ok_or(Error::UnknownContent {
                id: r.content_id,
                kind: match r.content_type {
                    ContentType::Question => "question",
                    ContentType::Lecture => "lecture",
                },
            })?;
        seq.row_id.push(r.row_id);
        seq.content.push(content as u32);
        seq.is_lecture.push(r.content_type == ContentType::Lecture);
        seq.timestamp.push(r.timestamp);
        seq.task_container_id.push(r.task_container_id);
        seq.answered_correctly
            .push(enc.answered_correctly.encode(r.answered_correctly.as_ref()).unwrap() as u8);
        seq.user_answer
            .push(enc.user_answer.encode(r.user_answer.as_ref()).unwrap() as u8);
    }

    // The prior_question_* fields of a question bundle describe the previous
    // question bundle; shift them back one question bundle.
    let na_expl = enc.had_explanation.na() as u8;
    seq.elapsed_time = vec![None; n];
    seq.had_explanation = vec![na_expl; n];
    let bundles = question_bundles(&seq);
    for w in bundles.windows(2) {
        let (cur, next) = (w[0], w[1]);
        let src = rows[next.0];
        let expl = enc
            .had_explanation
            .encode(src.prior_question_had_explanation.as_ref())
            .unwrap() as u8;
        for i in cur.0..cur.1 {
            seq.elapsed_time[i] = src.prior_question_elapsed_time;
            seq.had_explanation[i] = expl;
        }
    }
    Ok(seq)
}

/// `[start, end)` ranges of question bundles in order.
pub fn question_bundles(seq: &UserSequence) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        let mut j = i + 1;
        while j < seq.len()
            && seq.timestamp[j] == seq.timestamp[i]
            && seq.task_container_id[j] == seq.task_container_id[i]
        {
            j += 1;
        }
        if !seq.is_lecture[i] {
            out.push((i, j));
        }
        i = j;
    }
    out
}

//! Synthetic interaction logs with known answer probabilities, used for
//! sanity runs where the best achievable AUC can be computed exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::{ContentType, LectureMeta, LectureType, QuestionMeta, RawInteraction};
use crate::training::auc;

/// Lecture ids start here so they never collide with question ids.
pub const LECTURE_ID_BASE: i64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// `P(correct) = sigmoid(a - d)` with `a, d ~ N(0, 1)`.
    Skill,
    /// The skill model plus a memory term that fades with the time since
    /// the user last met the question's tag.
    Forgetting,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "skill" => Ok(SynthKind::Skill),
            "forgetting" => Ok(SynthKind::Forgetting),
            _ => Err(Error::Config(format!("unknown generator `{s}` (skill, forgetting)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub users: usize,
    pub interactions: usize,
    pub questions: usize,
    pub tags: usize,
    pub lectures: usize,
    /// Share of events that are lectures.
    pub lecture_rate: f64,
    /// Memory time constant of the forgetting term, in ms.
    pub memory_ms: f64,
    /// Logit weight of the forgetting term.
    pub memory_weight: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, users: usize, interactions: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            users,
            interactions,
            questions: 200,
            tags: 10,
            lectures: 10,
            lecture_rate: 0.05,
            memory_ms: 86_400_000.0,
            memory_weight: 3.0,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub interactions: Vec<RawInteraction>,
    pub questions: Vec<QuestionMeta>,
    pub lectures: Vec<LectureMeta>,
    /// True probability of a correct answer, indexed by `row_id`; NaN for
    /// lectures.
    pub truth: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.users == 0 || spec.interactions == 0 || spec.questions == 0 || spec.tags == 0 {
        return Err(Error::Config("generator sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let questions: Vec<QuestionMeta> = (0..spec.questions as i64)
        .map(|q| {
            let tag = rng.random_range(0..spec.tags as i64);
            QuestionMeta {
                question_id: q,
                bundle_id: q,
                correct_answer: rng.random_range(0..4),
                part: tag % 7 + 1,
                tags: vec![tag],
            }
        })
        .collect();
    let difficulty: Vec<f64> = (0..spec.questions).map(|_| StandardNormal.sample(&mut rng)).collect();
    let lectures: Vec<LectureMeta> = (0..spec.lectures as i64)
        .map(|l| {
            let tag = rng.random_range(0..spec.tags as i64);
            LectureMeta {
                lecture_id: LECTURE_ID_BASE + l,
                tag,
                part: tag % 7 + 1,
                type_of: LectureType::ALL[l as usize % 4],
            }
        })
        .collect();

    let mut interactions = Vec::with_capacity(spec.users * spec.interactions);
    let mut truth = Vec::with_capacity(spec.users * spec.interactions);
    // Gaps are log-uniform between 10 seconds and 10 days.
    let (lo, hi) = (1e4f64.ln(), 8.64e8f64.ln());
    for u in 0..spec.users as i64 {
        let ability: f64 = StandardNormal.sample(&mut rng);
        let mut last_seen = vec![None::<i64>; spec.tags];
        let mut ts = rng.random_range(0..1_000_000i64);
        let mut prior: (Option<i64>, Option<bool>) = (None, None);
        let mut container = 0i64;
        let mut k = 0;
        while k < spec.interactions {
            if k > 0 {
                ts += rng.random_range(lo..hi).exp() as i64;
            }
            if spec.lectures > 0 && rng.random_bool(spec.lecture_rate) {
                let l = &lectures[rng.random_range(0..lectures.len())];
                interactions.push(RawInteraction {
                    row_id: interactions.len() as i64,
                    timestamp: ts,
                    user_id: u,
                    content_id: l.lecture_id,
                    content_type: ContentType::Lecture,
                    task_container_id: container,
                    user_answer: None,
                    answered_correctly: None,
                    prior_question_elapsed_time: None,
                    prior_question_had_explanation: None,
                });
                truth.push(f64::NAN);
                last_seen[l.tag as usize] = Some(ts);
                container += 1;
                k += 1;
                continue;
            }
            let size = if rng.random_bool(0.1) {
                rng.random_range(2..=3)
            } else {
                1
            };
            let mut exposures = Vec::new();
            for _ in 0..size.min(spec.interactions - k) {
                let q = &questions[rng.random_range(0..questions.len())];
                let tag = q.tags[0] as usize;
                let mut logit = ability - difficulty[q.question_id as usize];
                if spec.kind == SynthKind::Forgetting {
                    let memory = last_seen[tag].map_or(0.0, |t| (-((ts - t) as f64) / spec.memory_ms).exp());
                    logit += spec.memory_weight * (memory - 0.5);
                }
                let p = sigmoid(logit);
                let correct = rng.random_bool(p);
                let answer = if correct {
                    q.correct_answer
                } else {
                    (q.correct_answer + rng.random_range(1..4)) % 4
                };
                interactions.push(RawInteraction {
                    row_id: interactions.len() as i64,
                    timestamp: ts,
                    user_id: u,
                    content_id: q.question_id,
                    content_type: ContentType::Question,
                    task_container_id: container,
                    user_answer: Some(answer as u8),
                    answered_correctly: Some(correct),
                    prior_question_elapsed_time: prior.0,
                    prior_question_had_explanation: prior.1,
                });
                truth.push(p);
                exposures.push(tag);
                k += 1;
            }
            for tag in exposures {
                last_seen[tag] = Some(ts);
            }
            prior = (Some(rng.random_range(5_000..60_000)), Some(rng.random_bool(0.5)));
            container += 1;
        }
    }
    Ok(SynthData {
        interactions,
        questions,
        lectures,
        truth,
    })
}

/// AUC of the generator's own probabilities on the given question rows:
/// the best any model can do on average.
pub fn bayes_auc(data: &SynthData, row_ids: &[i64]) -> Result<f64> {
    let mut labels = Vec::with_capacity(row_ids.len());
    let mut scores = Vec::with_capacity(row_ids.len());
    for &r in row_ids {
        let it = &data.interactions[r as usize];
        if let Some(ok) = it.answered_correctly {
            labels.push(if ok { 1.0 } else { 0.0 });
            scores.push(data.truth[r as usize]);
        }
    }
    auc(&labels, &scores)
}

/// Writes `train.csv`, `questions.csv` and `lectures.csv` into `dir`.
pub fn write_csvs(data: &SynthData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    };

    let mut q = String::from("question_id,bundle_id,correct_answer,part,tags\n");
    for m in &data.questions {
        let tags: Vec<String> = m.tags.iter().map(|t| t.to_string()).collect();
        q.push_str(&format!(
            "{},{},{},{},{}\n",
            m.question_id,
            m.bundle_id,
            m.correct_answer,
            m.part,
            tags.join(" ")
        ));
    }
    write("questions.csv", q)?;

    let mut l = String::from("lecture_id,tag,part,type_of\n");
    for m in &data.lectures {
        l.push_str(&format!(
            "{},{},{},{}\n",
            m.lecture_id,
            m.tag,
            m.part,
            m.type_of.as_str()
        ));
    }
    write("lectures.csv", l)?;

    let mut t = String::from(
        "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,user_answer,\
         answered_correctly,prior_question_elapsed_time,prior_question_had_explanation\n",
    );
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &data.interactions {
        let lecture = r.content_type == ContentType::Lecture;
        t.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.row_id,
            r.timestamp,
            r.user_id,
            r.content_id,
            lecture as u8,
            r.task_container_id,
            r.user_answer.map_or(-1, |a| a as i64),
            r.answered_correctly.map_or(-1, |c| c as i64),
            opt(r.prior_question_elapsed_time.map(|e| e.to_string())),
            opt(r
                .prior_question_had_explanation
                .map(|b| if b { "True".into() } else { "False".into() })),
        ));
    }
    write("train.csv", t)
}

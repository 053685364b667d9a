use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eer::{compute_eer, EerResult};
use crate::data::{AVSample, Condition, Dataset, TrialPair};
use crate::error::{Error, Result};
use crate::model::{Modality, Model, TopologyKind};
use crate::scalar::Scalar;

pub const NORM_FLOOR: f64 = 1e-12;

/// `a·b / (max(‖a‖, 1e-12)·max(‖b‖, 1e-12))`, accumulated in `f64`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let floor = NORM_FLOOR * NORM_FLOOR;
    Ok(ab / (aa.max(floor) * bb.max(floor)).sqrt())
}

/// Which vector represents one side of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbeddingKind {
    Audio,
    Video,
    /// Concatenated branch encodings of a mid-fusion model.
    Joint,
    /// Mean of the audio and video shared-space embeddings of a multi-view model.
    Mean,
}

/// Embedding kinds read from the enrol and test sides under `condition`, or a
/// capability error naming the topology the condition needs.
pub fn condition_sides(kind: TopologyKind, condition: Condition) -> Result<(EmbeddingKind, EmbeddingKind)> {
    use EmbeddingKind::*;
    let need = |what: &str| {
        Err(Error::Capability(format!(
            "condition {condition} needs {what}; a {kind} model cannot score it"
        )))
    };
    match condition {
        Condition::AA if kind.uses(Modality::Audio) => Ok((Audio, Audio)),
        Condition::AA => need("a model with an audio encoder"),
        Condition::VV if kind.uses(Modality::Video) => Ok((Video, Video)),
        Condition::VV => need("a model with a video encoder"),
        Condition::AVAV if kind == TopologyKind::MidFusion => Ok((Joint, Joint)),
        Condition::AVAV => need("a midfusion model (or score fusion of unimodal systems)"),
        _ if kind != TopologyKind::MultiView => need("a multiview model with a shared embedding space"),
        Condition::AvX => Ok((Audio, Video)),
        Condition::AAv => Ok((Audio, Mean)),
        Condition::VAv => Ok((Video, Mean)),
    }
}

/// The vector `kind` reads from one sample.
pub fn sample_embedding<T: Scalar>(model: &Model<T>, s: &AVSample, kind: EmbeddingKind) -> Result<Vec<T>> {
    Ok(match kind {
        EmbeddingKind::Audio => model.embed(s, Modality::Audio)?.into_values(),
        EmbeddingKind::Video => model.embed(s, Modality::Video)?.into_values(),
        EmbeddingKind::Joint => model.embed_joint(s)?.into_values(),
        EmbeddingKind::Mean => {
            let a = model.embed(s, Modality::Audio)?;
            let v = model.embed(s, Modality::Video)?;
            let half = T::lit(0.5);
            a.values().iter().zip(v.values()).map(|(&x, &y)| half * (x + y)).collect()
        }
    })
}

/// Row label of a score set: a trial condition or a score-fusion recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReportCondition {
    Trial(Condition),
    Fusion,
}

impl ReportCondition {
    fn rank(self) -> u8 {
        match self {
            ReportCondition::Trial(Condition::AA) => 0,
            ReportCondition::Trial(Condition::VV) => 1,
            ReportCondition::Trial(Condition::AVAV) => 2,
            ReportCondition::Fusion => 3,
            ReportCondition::Trial(Condition::AvX) => 4,
            ReportCondition::Trial(Condition::AAv) => 5,
            ReportCondition::Trial(Condition::VAv) => 6,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ReportCondition::Trial(c) => c.tag(),
            ReportCondition::Fusion => "fusion",
        }
    }
}

impl PartialOrd for ReportCondition {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ReportCondition {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for ReportCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Scores of one system on one trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub system: String,
    pub condition: ReportCondition,
    pub trials: Vec<TrialPair>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn labels(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.target).collect()
    }

    pub fn eer(&self) -> Result<EerResult> {
        compute_eer(&self.scores, &self.labels())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Cosine-scores every trial with `model`, all under `condition`.
///
/// Embeddings are extracted once per (utterance, kind) in parallel; scores
/// come back in trial order.
pub fn score_condition<T: Scalar>(
    system: &str,
    model: &Model<T>,
    trials: &[TrialPair],
    condition: Condition,
    dataset: &Dataset,
) -> Result<ScoreSet> {
    let (enrol_kind, test_kind) = condition_sides(model.kind(), condition)?;
    let needed: BTreeSet<(u32, EmbeddingKind)> = trials
        .iter()
        .flat_map(|t| [(t.enrol_id, enrol_kind), (t.test_id, test_kind)])
        .collect();
    let needed: Vec<_> = needed.into_iter().collect();
    let vectors = needed
        .par_iter()
        .map(|&(id, kind)| sample_embedding(model, dataset.sample(id)?, kind))
        .collect::<Result<Vec<_>>>()?;
    let cache: BTreeMap<(u32, EmbeddingKind), Vec<T>> = needed.into_iter().zip(vectors).collect();
    let scores = trials
        .iter()
        .map(|t| cosine(&cache[&(t.enrol_id, enrol_kind)], &cache[&(t.test_id, test_kind)]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet {
        system: system.to_string(),
        condition: ReportCondition::Trial(condition),
        trials: trials.iter().map(|t| TrialPair { condition, ..*t }).collect(),
        scores,
    })
}

/// Scores the trials with every named model, grouping trials by their own
/// condition tag. Returns one set per (system, condition) present.
pub fn score_trials<T: Scalar>(
    models: &BTreeMap<String, Model<T>>,
    trials: &[TrialPair],
    dataset: &Dataset,
) -> Result<Vec<ScoreSet>> {
    let conditions: BTreeSet<Condition> = trials.iter().map(|t| t.condition).collect();
    let mut out = Vec::new();
    for (system, model) in models {
        for &c in &conditions {
            let subset: Vec<TrialPair> = trials.iter().filter(|t| t.condition == c).copied().collect();
            out.push(score_condition(system, model, &subset, c, dataset)?);
        }
    }
    Ok(out)
}

/// Per-trial arithmetic mean of aligned score sets.
///
/// The per-trial scores are summed in sorted order, so the result does not
/// depend on the order of `sets`.
pub fn fuse_scores(system: &str, sets: &[&ScoreSet]) -> Result<ScoreSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Protocol("fusion needs at least one score set".into()))?;
    for s in sets {
        let aligned = s.len() == first.len()
            && s.trials
                .iter()
                .zip(&first.trials)
                .all(|(a, b)| a.enrol_id == b.enrol_id && a.test_id == b.test_id && a.target == b.target);
        if !aligned || s.scores.len() != s.trials.len() {
            return Err(Error::Protocol(format!(
                "score sets {}/{} and {}/{} are not aligned on the same trials",
                first.system, first.condition, s.system, s.condition
            )));
        }
    }
    let scores = (0..first.len())
        .map(|i| {
            let mut v: Vec<f64> = sets.iter().map(|s| s.scores[i]).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(ScoreSet {
        system: system.to_string(),
        condition: ReportCondition::Fusion,
        trials: first.trials.clone(),
        scores,
    })
}

/// Formats with 9 significant digits.
pub fn format_score(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if (-5..9).contains(&magnitude) {
        let decimals = (8 - magnitude).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

/// Score file: `condition, enrol_id, test_id, label, score` per line, tab-separated.
pub fn format_score_file(set: &ScoreSet) -> String {
    let mut out = String::new();
    for (t, s) in set.trials.iter().zip(&set.scores) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            set.condition,
            t.enrol_id,
            t.test_id,
            u8::from(t.target),
            format_score(*s)
        ));
    }
    out
}

//! Max-IoU matching, label assignment (static band and dynamic threshold) and
//! fixed-size sampling of the second-stage training batch.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{encode_offsets, iou, normalize, BBox, Delta, DeltaStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("thresholds must satisfy 0 <= t_neg <= t_pos <= 1 (got t_pos={t_pos}, t_neg={t_neg})")]
    BadThresholds { t_pos: f64, t_neg: f64 },
    #[error("threshold {0} outside [0, 1]")]
    ThresholdRange(f64),
    #[error("batch_size must be >= 1 and pos_fraction in (0, 1) (got {batch_size}, {pos_fraction})")]
    BadBatch { batch_size: usize, pos_fraction: f64 },
    #[error("labels, matches and proposals differ in length ({0}, {1}, {2})")]
    LengthMismatch(usize, usize, usize),
}

/// Best ground truth for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub max_iou: f64,
    /// `None` only when the scene has no ground truths.
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => 0,
            Label::Ignored => -1,
        }
    }
}

/// Matches every proposal to its highest-IoU ground truth. Ties go to the
/// lowest ground-truth index.
pub fn match_proposals(proposals: &[BBox], gts: &[BBox]) -> Vec<MatchResult> {
    proposals
        .iter()
        .map(|p| {
            let mut best = MatchResult {
                max_iou: 0.0,
                gt_index: None,
            };
            for (j, g) in gts.iter().enumerate() {
                let v = iou(p, g);
                if best.gt_index.is_none() || v > best.max_iou {
                    best = MatchResult {
                        max_iou: v,
                        gt_index: Some(j),
                    };
                }
            }
            best
        })
        .collect()
}

fn check_unit(t: f64) -> Result<(), AssignError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(AssignError::ThresholdRange(t))
    }
}

/// Fixed two-threshold scheme: positive at or above `t_pos`, negative below
/// `t_neg`, ignored in between.
pub fn assign_static(matches: &[MatchResult], t_pos: f64, t_neg: f64) -> Result<Vec<Label>, AssignError> {
    check_unit(t_pos)?;
    check_unit(t_neg)?;
    if t_neg > t_pos {
        return Err(AssignError::BadThresholds { t_pos, t_neg });
    }
    Ok(matches
        .iter()
        .map(|m| match m.gt_index {
            None => Label::Negative,
            Some(_) if m.max_iou >= t_pos => Label::Positive,
            Some(_) if m.max_iou < t_neg => Label::Negative,
            Some(_) => Label::Ignored,
        })
        .collect())
}

/// Single-threshold scheme driven by the controller's current `T_now`. Never
/// produces [`Label::Ignored`].
pub fn assign_dynamic(matches: &[MatchResult], t_now: f64) -> Result<Vec<Label>, AssignError> {
    check_unit(t_now)?;
    Ok(matches
        .iter()
        .map(|m| match m.gt_index {
            Some(_) if m.max_iou >= t_now => Label::Positive,
            _ => Label::Negative,
        })
        .collect())
}

/// Proposals chosen for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    /// Indices into the proposal list; positives first, each group ascending.
    pub indices: Vec<usize>,
    pub labels: Vec<Label>,
    /// Normalized offset to the matched ground truth; `Some` exactly for positives.
    pub targets: Vec<Option<Delta>>,
    /// Set when the candidate pool held no positives at all.
    pub no_positives: bool,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Positive).count()
    }

    /// `(proposal index, normalized target)` for every sampled positive.
    pub fn positives(&self) -> impl Iterator<Item = (usize, Delta)> + '_ {
        self.indices
            .iter()
            .zip(&self.targets)
            .filter_map(|(i, t)| t.map(|t| (*i, t)))
    }
}

/// Sampling parameters for [`sample_batch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub pos_fraction: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 512,
            pos_fraction: 0.25,
        }
    }
}

impl BatchSpec {
    /// Maximum number of positives per batch.
    pub fn positive_quota(&self) -> usize {
        (self.batch_size as f64 * self.pos_fraction).floor() as usize
    }
}

/// Uniformly samples up to the positive quota, then fills with negatives.
/// Ignored proposals are never drawn.
pub fn sample_batch(
    labels: &[Label],
    matches: &[MatchResult],
    proposals: &[BBox],
    gts: &[BBox],
    spec: BatchSpec,
    stats: &DeltaStats,
    seed: u64,
) -> Result<SampledBatch, AssignError> {
    if spec.batch_size == 0 || !(spec.pos_fraction > 0.0 && spec.pos_fraction < 1.0) {
        return Err(AssignError::BadBatch {
            batch_size: spec.batch_size,
            pos_fraction: spec.pos_fraction,
        });
    }
    if labels.len() != matches.len() || labels.len() != proposals.len() {
        return Err(AssignError::LengthMismatch(
            labels.len(),
            matches.len(),
            proposals.len(),
        ));
    }
    let pool = |want: Label| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == want)
            .map(|(i, _)| i)
            .collect()
    };
    let pos_pool = pool(Label::Positive);
    let neg_pool = pool(Label::Negative);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |from: &[usize], n: usize| -> Vec<usize> {
        let n = n.min(from.len());
        let mut picked: Vec<usize> = index::sample(&mut rng, from.len(), n)
            .into_iter()
            .map(|k| from[k])
            .collect();
        picked.sort_unstable();
        picked
    };
    let pos = draw(&pos_pool, spec.positive_quota());
    let neg = draw(&neg_pool, spec.batch_size - pos.len());

    let mut batch = SampledBatch {
        indices: Vec::with_capacity(pos.len() + neg.len()),
        labels: Vec::with_capacity(pos.len() + neg.len()),
        targets: Vec::with_capacity(pos.len() + neg.len()),
        no_positives: pos_pool.is_empty(),
    };
    for &i in &pos {
        let g = matches[i].gt_index.expect("positive proposals always have a match");
        batch.indices.push(i);
        batch.labels.push(Label::Positive);
        batch
            .targets
            .push(Some(normalize(&encode_offsets(&proposals[i], &gts[g]), stats)));
    }
    for &i in &neg {
        batch.indices.push(i);
        batch.labels.push(Label::Negative);
        batch.targets.push(None);
    }
    Ok(batch)
}

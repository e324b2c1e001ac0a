//! Synthetic scenes, proposal generators and a toy second-stage detector.
//!
//! Open loop: proposal quality follows a scripted [`QualitySchedule`] and
//! only the controller runs. Closed loop: a [`ToyDetector`] is trained with
//! the selected [`Ablation`], and half of every iteration's proposals are
//! its own refinements, so quality also improves as the detector learns.
//!
//! The toy detector never sees pixels. Each proposal carries a simulated
//! appearance observation: its normalized offset to the matched object,
//! squashed by `tanh` (a finite receptive field) and corrupted by
//! heavy-tailed noise (most draws are tight, a few are gross outliers).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{
    assign_dynamic, assign_static, match_proposals, sample_batch, AssignError, BatchSpec, Label, MatchResult,
    SampledBatch,
};
use crate::controller::{Controller, ControllerConfig, ControllerError, UpdateOutcome};
use crate::geometry::{decode_offsets, denormalize, encode_offsets, normalize, BBox, Delta, DeltaStats};
use crate::loss::{binary_ce_logit, dsl, sigmoid, LossError, Reduction};
use crate::metrics::{coco_map_images, nms, positive_count_stats, Detection, EvalReport, ImageRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene bounds {width}x{height} cannot hold objects of size up to {max_size}")]
    BoundsTooSmall { width: f64, height: f64, max_size: f64 },
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
}

/// Seed for an independent random stream, derived from a run seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named random streams.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const PROPOSALS: u64 = 2;
    pub const REFINE_OBS: u64 = 3;
    pub const TRAIN_OBS: u64 = 4;
    pub const OBJECTNESS: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const EVAL_SCENE: u64 = 7;
    pub const EVAL_PROPOSALS: u64 = 8;
    pub const EVAL_REFINE_OBS: u64 = 9;
    pub const EVAL_OBS: u64 = 10;
    pub const EVAL_OBJECTNESS: u64 = 11;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub n_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256.0,
            height: 256.0,
            min_size: 24.0,
            max_size: 96.0,
            n_objects: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub gts: Vec<BBox>,
    pub seed: u64,
}

/// `n_objects` boxes with sides uniform in `[min_size, max_size]`, placed
/// uniformly inside the bounds.
pub fn gen_scene(seed: u64, n_objects: usize, cfg: &SceneConfig) -> Result<Scene, SimError> {
    if n_objects == 0 {
        return Err(SimError::Config("a scene needs at least one object".into()));
    }
    if !(cfg.min_size > 0.0 && cfg.max_size >= cfg.min_size) {
        return Err(SimError::Config(format!(
            "object size range [{}, {}] is empty",
            cfg.min_size, cfg.max_size
        )));
    }
    if cfg.width <= cfg.max_size || cfg.height <= cfg.max_size {
        return Err(SimError::BoundsTooSmall {
            width: cfg.width,
            height: cfg.height,
            max_size: cfg.max_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts = (0..n_objects)
        .map(|_| {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = rng.random_range(cfg.min_size..=cfg.max_size);
            let x1 = rng.random_range(0.0..cfg.width - w);
            let y1 = rng.random_range(0.0..cfg.height - h);
            BBox::new(x1, y1, x1 + w, y1 + h).expect("sizes are positive")
        })
        .collect();
    Ok(Scene {
        width: cfg.width,
        height: cfg.height,
        gts,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Jittered copies per ground truth.
    pub n_per_gt: usize,
    /// Uniformly placed boxes per scene.
    pub n_background: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            n_per_gt: 100,
            n_background: 100,
        }
    }
}

/// Jittered copies of every ground truth (center noise `q * size`, log-size
/// noise `q`) followed by uniform background boxes. Boxes are clipped to
/// the scene and dropped if nothing remains.
pub fn gen_proposals(scene: &Scene, q: f64, cfg: &ProposalConfig, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(scene.gts.len() * cfg.n_per_gt + cfg.n_background);
    for g in &scene.gts {
        for _ in 0..cfg.n_per_gt {
            let cx = g.cx() + q * g.w() * unit.sample(&mut rng);
            let cy = g.cy() + q * g.h() * unit.sample(&mut rng);
            let w = g.w() * (q * unit.sample(&mut rng)).exp();
            let h = g.h() * (q * unit.sample(&mut rng)).exp();
            if let Some(b) = BBox::from_center(cx, cy, w, h)
                .ok()
                .and_then(|b| b.clip(scene.width, scene.height))
            {
                out.push(b);
            }
        }
    }
    let max_side = scene.width.min(scene.height) * 0.5;
    for _ in 0..cfg.n_background {
        let w = rng.random_range(4.0..max_side);
        let h = rng.random_range(4.0..max_side);
        let x1 = rng.random_range(0.0..scene.width - w);
        let y1 = rng.random_range(0.0..scene.height - h);
        out.push(BBox::new(x1, y1, x1 + w, y1 + h).expect("sizes are positive"));
    }
    out
}

/// Proposal noise scale as a function of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QualitySchedule {
    Constant {
        q: f64,
    },
    /// `q0 * exp(-i / tau)`; `tau` defaults to a third of the run.
    Exponential {
        q0: f64,
        tau: Option<f64>,
    },
}

impl Default for QualitySchedule {
    fn default() -> Self {
        QualitySchedule::Exponential { q0: 0.5, tau: None }
    }
}

impl QualitySchedule {
    pub fn q(&self, iteration: usize, total: usize) -> f64 {
        match *self {
            QualitySchedule::Constant { q } => q,
            QualitySchedule::Exponential { q0, tau } => {
                let tau = tau.unwrap_or(total.max(1) as f64 / 3.0);
                q0 * (-(iteration as f64) / tau).exp()
            }
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            QualitySchedule::Constant { q } => q > 0.0 && q.is_finite(),
            QualitySchedule::Exponential { q0, tau } => {
                q0 > 0.0 && q0.is_finite() && tau.is_none_or(|t| t > 0.0 && t.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("schedule {self:?} must be positive")))
        }
    }
}

/// One logged row: controller values in use plus proposal statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub iteration: usize,
    pub t_now: f64,
    pub beta_now: f64,
    pub pos_at_50: usize,
    pub pos_at_60: usize,
    pub pos_at_70: usize,
    pub std_dx: Option<f64>,
    pub std_dw: Option<f64>,
}

pub const TREND_HEADER: &str = "iteration,t_now,beta_now,pos_at_50,pos_at_60,pos_at_70,std_dx,std_dw";

/// Rows logged at iteration 0 and at every controller update tick.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrendLog {
    pub rows: Vec<TrendRow>,
}

impl TrendLog {
    /// CSV with [`TREND_HEADER`]; absent stdevs are empty fields.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory CSV write");
        }
        let out = w.into_inner().expect("in-memory CSV flush");
        if self.rows.is_empty() {
            format!("{TREND_HEADER}\n").into_bytes()
        } else {
            out
        }
    }

    pub fn from_csv(data: &[u8]) -> Result<Self, csv::Error> {
        let rows = csv::Reader::from_reader(data)
            .deserialize()
            .collect::<Result<Vec<TrendRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn t_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_now).collect()
    }

    pub fn beta_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.beta_now).collect()
    }
}

fn trend_row(iteration: usize, t_now: f64, beta_now: f64, proposals: &[BBox], gts: &[BBox]) -> TrendRow {
    let s = positive_count_stats(proposals, gts, &[0.5, 0.6, 0.7]);
    TrendRow {
        iteration,
        t_now,
        beta_now,
        pos_at_50: s.counts[0],
        pos_at_60: s.counts[1],
        pos_at_70: s.counts[2],
        std_dx: s.std_dx,
        std_dw: s.std_dw,
    }
}

fn positive_targets(
    labels: &[Label],
    matches: &[MatchResult],
    proposals: &[BBox],
    gts: &[BBox],
    stats: &DeltaStats,
) -> Vec<Delta> {
    labels
        .iter()
        .zip(matches)
        .zip(proposals)
        .filter(|((l, _), _)| **l == Label::Positive)
        .filter_map(|((_, m), p)| m.gt_index.map(|g| normalize(&encode_offsets(p, &gts[g]), stats)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenLoopConfig {
    pub seed: u64,
    pub iterations: usize,
    pub schedule: QualitySchedule,
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
    pub controller: ControllerConfig,
    pub delta_stats: DeltaStats,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            schedule: QualitySchedule::default(),
            scene: SceneConfig::default(),
            proposals: ProposalConfig::default(),
            controller: ControllerConfig::default(),
            delta_stats: DeltaStats::default(),
        }
    }
}

/// Scripted-quality run: every iteration draws a scene and proposals at
/// `q(i)`, labels them with the live `T_now`, and feeds the matched IoUs and
/// positive regression labels to the controller.
pub fn run_open_loop(cfg: &OpenLoopConfig) -> Result<TrendLog, SimError> {
    cfg.schedule.validate()?;
    let mut ctl = Controller::new(cfg.controller)?;
    let mut log = TrendLog::default();
    for i in 0..cfg.iterations {
        let scene = gen_scene(
            derive_seed(cfg.seed, stream::SCENE, i as u64),
            cfg.scene.n_objects,
            &cfg.scene,
        )?;
        let q = cfg.schedule.q(i, cfg.iterations);
        let props = gen_proposals(
            &scene,
            q,
            &cfg.proposals,
            derive_seed(cfg.seed, stream::PROPOSALS, i as u64),
        );
        let matches = match_proposals(&props, &scene.gts);
        let (t_now, _) = ctl.current();
        let labels = assign_dynamic(&matches, t_now)?;
        let targets = positive_targets(&labels, &matches, &props, &scene.gts, &cfg.delta_stats);
        let ious: Vec<f64> = matches.iter().map(|m| m.max_iou).collect();
        ctl.record_labels(&ious, &targets);
        let outcome = ctl.maybe_update();
        if i == 0 || outcome == UpdateOutcome::Updated {
            let (t, b) = ctl.current();
            log.rows.push(trend_row(i, t, b, &props, &scene.gts));
        }
    }
    Ok(log)
}

/// Simulated appearance of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Noisy, saturating view of the normalized offset to the matched object.
    pub offset: [f64; 4],
    /// Coarse overlap cue: rises with IoU up to `overlap_knee`, flat above.
    pub overlap: f64,
}

/// How a proposal's simulated appearance relates to its true offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationModel {
    /// Observed offset saturates at `±saturation` (normalized units).
    pub saturation: f64,
    pub inlier_sigma: f64,
    /// Extra inlier noise per unit of true offset magnitude.
    pub relative_sigma: f64,
    pub outlier_prob: f64,
    pub outlier_sigma: f64,
    /// Spread of the pseudo-offset drawn for proposals touching no object.
    pub background_sigma: f64,
    pub overlap_knee: f64,
    pub overlap_sigma: f64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self {
            saturation: 0.7,
            inlier_sigma: 0.02,
            relative_sigma: 0.2,
            outlier_prob: 0.05,
            outlier_sigma: 1.0,
            background_sigma: 3.0,
            overlap_knee: 0.5,
            overlap_sigma: 0.1,
        }
    }
}

impl ObservationModel {
    /// One noisy observation per proposal, drawn in proposal order.
    pub fn observe(
        &self,
        proposals: &[BBox],
        matches: &[MatchResult],
        gts: &[BBox],
        stats: &DeltaStats,
        seed: u64,
    ) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        proposals
            .iter()
            .zip(matches)
            .map(|(p, m)| {
                let truth = match m.gt_index {
                    Some(g) if m.max_iou > 0.0 => normalize(&encode_offsets(p, &gts[g]), stats).to_array(),
                    _ => std::array::from_fn(|_| self.background_sigma * unit.sample(&mut rng)),
                };
                let offset = truth.map(|t| {
                    let sigma = if rng.random::<f64>() < self.outlier_prob {
                        self.outlier_sigma
                    } else {
                        self.inlier_sigma + self.relative_sigma * t.abs()
                    };
                    self.saturation * (t / self.saturation).tanh() + sigma * unit.sample(&mut rng)
                });
                let overlap = (m.max_iou / self.overlap_knee).min(1.0) + self.overlap_sigma * unit.sample(&mut rng);
                Observation { offset, overlap }
            })
            .collect()
    }
}

pub const CLS_FEATURES: usize = 6;
pub const REG_FEATURES: usize = 5;

fn cls_features(ob: &Observation) -> [f64; CLS_FEATURES] {
    let o = &ob.offset;
    [1.0, ob.overlap, o[0].abs(), o[1].abs(), o[2].abs(), o[3].abs()]
}

fn reg_features(ob: &Observation) -> [f64; REG_FEATURES] {
    let o = &ob.offset;
    [o[0], o[1], o[2], o[3], 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_cls: f64,
    pub lr_reg: f64,
    pub momentum: f64,
    /// Fractions of the run at which both learning rates drop by 10x.
    pub lr_steps: [f64; 2],
    pub reg_reduction: Reduction,
    pub cls_reduction: Reduction,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_cls: 0.05,
            lr_reg: 0.02,
            momentum: 0.9,
            lr_steps: [2.0 / 3.0, 8.0 / 9.0],
            reg_reduction: Reduction::Mean,
            cls_reduction: Reduction::Mean,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_factor(&self, iteration: usize, total: usize) -> f64 {
        let frac = iteration as f64 / total.max(1) as f64;
        self.lr_steps.iter().filter(|s| frac >= **s).fold(1.0, |f, _| f * 0.1)
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub cls: f64,
    pub reg: f64,
}

/// Linear objectness logit plus a linear offset regressor, both trained by
/// momentum SGD with analytic gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub cls_weights: [f64; CLS_FEATURES],
    pub reg_weights: [[f64; REG_FEATURES]; 4],
    cls_velocity: [f64; CLS_FEATURES],
    reg_velocity: [[f64; REG_FEATURES]; 4],
    pub steps: u64,
}

impl Default for ToyDetector {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyDetector {
    /// All-zero weights: every proposal scores 0.5 and is left in place.
    pub fn new() -> Self {
        Self {
            cls_weights: [0.0; CLS_FEATURES],
            reg_weights: [[0.0; REG_FEATURES]; 4],
            cls_velocity: [0.0; CLS_FEATURES],
            reg_velocity: [[0.0; REG_FEATURES]; 4],
            steps: 0,
        }
    }

    pub fn logit(&self, obs: &Observation) -> f64 {
        cls_features(obs)
            .iter()
            .zip(&self.cls_weights)
            .map(|(f, w)| f * w)
            .sum()
    }

    pub fn score(&self, obs: &Observation) -> f64 {
        sigmoid(self.logit(obs))
    }

    /// Predicted normalized offset.
    pub fn predict(&self, obs: &Observation) -> Delta {
        let f = reg_features(obs);
        Delta::from_array(self.reg_weights.map(|row| row.iter().zip(&f).map(|(w, x)| w * x).sum()))
    }

    /// Applies the predicted offset to `proposal`; the proposal itself is
    /// returned when the refined box would be degenerate.
    pub fn refine(&self, proposal: &BBox, obs: &Observation, stats: &DeltaStats, width: f64, height: f64) -> BBox {
        let max_log = (1000.0f64 / 16.0).ln();
        let mut d = denormalize(&self.predict(obs), stats);
        d.dw = d.dw.clamp(-max_log, max_log);
        d.dh = d.dh.clamp(-max_log, max_log);
        decode_offsets(proposal, &d)
            .ok()
            .and_then(|b| b.clip(width, height))
            .unwrap_or(*proposal)
    }

    pub fn is_finite(&self) -> bool {
        self.cls_weights.iter().all(|w| w.is_finite()) && self.reg_weights.iter().flatten().all(|w| w.is_finite())
    }

    /// One momentum-SGD step on a sampled batch. `obs` is indexed by proposal
    /// (as are `batch.indices`); `beta` is the SmoothL1 parameter in force.
    pub fn train_step(
        &mut self,
        batch: &SampledBatch,
        obs: &[Observation],
        beta: f64,
        opt: &OptimizerConfig,
        lr_factor: f64,
    ) -> Result<StepLoss, LossError> {
        let mut g_cls = [0.0; CLS_FEATURES];
        let mut g_reg = [[0.0; REG_FEATURES]; 4];
        let w_cls = opt.cls_reduction.weight(batch.len());
        let w_reg = opt.reg_reduction.weight(batch.num_positives());
        let mut loss = StepLoss { cls: 0.0, reg: 0.0 };
        for ((&i, label), target) in batch.indices.iter().zip(&batch.labels).zip(&batch.targets) {
            let o = &obs[i];
            let l = binary_ce_logit(self.logit(o), *label == Label::Positive);
            loss.cls += w_cls * l.value;
            for (g, f) in g_cls.iter_mut().zip(cls_features(o)) {
                *g += w_cls * l.gradient * f;
            }
            if let Some(t) = target {
                let pred = self.predict(o).to_array();
                let f = reg_features(o);
                for (k, tk) in t.to_array().into_iter().enumerate() {
                    let l = dsl(pred[k] - tk, beta)?;
                    loss.reg += w_reg * l.value;
                    for (g, x) in g_reg[k].iter_mut().zip(f) {
                        *g += w_reg * l.gradient * x;
                    }
                }
            }
        }
        let m = opt.momentum;
        for ((w, v), g) in self.cls_weights.iter_mut().zip(&mut self.cls_velocity).zip(g_cls) {
            *v = m * *v + g;
            *w -= opt.lr_cls * lr_factor * *v;
        }
        for ((row, vrow), grow) in self.reg_weights.iter_mut().zip(&mut self.reg_velocity).zip(g_reg) {
            for ((w, v), g) in row.iter_mut().zip(vrow.iter_mut()).zip(grow) {
                *v = m * *v + g;
                *w -= opt.lr_reg * lr_factor * *v;
            }
        }
        self.steps += 1;
        Ok(loss)
    }
}

/// Which dynamic components are active, one per row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "dla")]
    Dla,
    #[serde(rename = "dsl")]
    Dsl,
    #[serde(rename = "dla+dsl")]
    DlaDsl,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Dla, Ablation::Dsl, Ablation::DlaDsl];

    pub fn dynamic_labels(self) -> bool {
        matches!(self, Ablation::Dla | Ablation::DlaDsl)
    }

    pub fn dynamic_beta(self) -> bool {
        matches!(self, Ablation::Dsl | Ablation::DlaDsl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Dla => "dla",
            Ablation::Dsl => "dsl",
            Ablation::DlaDsl => "dla+dsl",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation '{s}' (expected baseline, dla, dsl or dla+dsl)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_scenes: usize,
    /// Jitter scale of the fresh evaluation proposals; `None` uses the
    /// schedule's value at the last training iteration.
    pub q: Option<f64>,
    pub nms_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            q: None,
            nms_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub iterations: usize,
    pub schedule: QualitySchedule,
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
    /// Share of each object's jittered proposals replaced by the detector's
    /// own refinement of them.
    pub refine_fraction: f64,
    /// Proposal-stage NMS threshold; `None` disables it.
    pub proposal_nms: Option<f64>,
    pub batch_size: usize,
    pub pos_fraction: f64,
    /// Static thresholds used when dynamic labels are off.
    pub t_pos: f64,
    pub t_neg: f64,
    /// SmoothL1 beta used when dynamic beta is off.
    pub fixed_beta: f64,
    pub controller: ControllerConfig,
    pub observation: ObservationModel,
    pub optimizer: OptimizerConfig,
    pub delta_stats: DeltaStats,
    pub eval: EvalConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        let batch = BatchSpec::default();
        Self {
            seed: 0,
            ablation: Ablation::DlaDsl,
            iterations: 2000,
            schedule: QualitySchedule::Exponential {
                q0: 0.5,
                tau: Some(2000.0 / 1.5),
            },
            scene: SceneConfig::default(),
            proposals: ProposalConfig::default(),
            refine_fraction: 0.5,
            proposal_nms: Some(0.85),
            batch_size: batch.batch_size,
            pos_fraction: batch.pos_fraction,
            t_pos: 0.5,
            t_neg: 0.5,
            fixed_beta: 1.0,
            controller: ControllerConfig::default(),
            observation: ObservationModel::default(),
            optimizer: OptimizerConfig::default(),
            delta_stats: DeltaStats::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ClosedLoopConfig {
    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            pos_fraction: self.pos_fraction,
        }
    }

    /// Fresh-proposal jitter used at evaluation time.
    pub fn eval_q(&self) -> f64 {
        self.eval
            .q
            .unwrap_or_else(|| self.schedule.q(self.iterations.saturating_sub(1), self.iterations))
    }

    fn validate(&self) -> Result<(), SimError> {
        self.schedule.validate()?;
        self.controller.validate()?;
        if self.iterations == 0 {
            return Err(SimError::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.refine_fraction) {
            return Err(SimError::Config("refine_fraction must lie in [0, 1]".into()));
        }
        if self.proposal_nms.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
            return Err(SimError::Config("proposal_nms must lie in (0, 1]".into()));
        }
        if !(self.fixed_beta.is_finite() && self.fixed_beta > 0.0) {
            return Err(SimError::Config("fixed_beta must be positive".into()));
        }
        let q_ok = self.eval.q.is_none_or(|q| q.is_finite() && q > 0.0);
        if !q_ok || !(self.eval.nms_threshold > 0.0 && self.eval.nms_threshold <= 1.0) {
            return Err(SimError::Config(
                "eval.q must be positive and eval.nms_threshold in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Random-stream seeds for one pass through the proposal pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PipelineSeeds {
    pub proposals: u64,
    pub refine_obs: u64,
    pub objectness: u64,
}

/// Fresh jittered proposals, a share of which are replaced by the
/// detector's refinement, filtered by proposal-stage NMS on a noisy
/// objectness score.
pub fn stage_one_proposals(
    detector: &ToyDetector,
    scene: &Scene,
    q: f64,
    cfg: &ClosedLoopConfig,
    seeds: PipelineSeeds,
) -> Vec<BBox> {
    let mut props = gen_proposals(scene, q, &cfg.proposals, seeds.proposals);
    let matches = match_proposals(&props, &scene.gts);
    let obs = cfg
        .observation
        .observe(&props, &matches, &scene.gts, &cfg.delta_stats, seeds.refine_obs);
    let every = if cfg.refine_fraction > 0.0 {
        (1.0 / cfg.refine_fraction).round().max(1.0) as usize
    } else {
        usize::MAX
    };
    let n_jitter = props.len().saturating_sub(cfg.proposals.n_background);
    for (i, p) in props.iter_mut().enumerate().take(n_jitter) {
        if i % every == 0 {
            *p = detector.refine(p, &obs[i], &cfg.delta_stats, scene.width, scene.height);
        }
    }
    let Some(thr) = cfg.proposal_nms else {
        return props;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.objectness);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let matches = match_proposals(&props, &scene.gts);
    let dets: Vec<Detection> = props
        .iter()
        .zip(&matches)
        .map(|(p, m)| Detection {
            bbox: *p,
            score: (m.max_iou + noise.sample(&mut rng)).clamp(0.0, 1.0),
        })
        .collect();
    let mut keep = nms(&dets, thr);
    keep.sort_unstable();
    keep.into_iter().map(|i| props[i]).collect()
}

/// Result of [`run_closed_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopOutcome {
    pub detector: ToyDetector,
    pub trend: TrendLog,
    pub report: EvalReport,
}

/// Trains the toy detector under the configured ablation and evaluates it on
/// held-out scenes. Deterministic in `cfg`.
pub fn run_closed_loop(cfg: &ClosedLoopConfig) -> Result<ClosedLoopOutcome, SimError> {
    cfg.validate()?;
    let mut det = ToyDetector::new();
    let mut ctl = Controller::new(cfg.controller)?;
    let use_ctl = cfg.ablation != Ablation::Baseline;
    let c = cfg.controller.update_interval;
    let mut trend = TrendLog::default();
    let seed = cfg.seed;

    for i in 0..cfg.iterations {
        let ix = i as u64;
        let scene = gen_scene(derive_seed(seed, stream::SCENE, ix), cfg.scene.n_objects, &cfg.scene)?;
        let q = cfg.schedule.q(i, cfg.iterations);
        let props = stage_one_proposals(
            &det,
            &scene,
            q,
            cfg,
            PipelineSeeds {
                proposals: derive_seed(seed, stream::PROPOSALS, ix),
                refine_obs: derive_seed(seed, stream::REFINE_OBS, ix),
                objectness: derive_seed(seed, stream::OBJECTNESS, ix),
            },
        );
        let matches = match_proposals(&props, &scene.gts);
        let (t_dyn, beta_dyn) = ctl.current();
        let t_in_use = if cfg.ablation.dynamic_labels() {
            t_dyn
        } else {
            cfg.t_pos
        };
        let beta_in_use = if cfg.ablation.dynamic_beta() {
            beta_dyn
        } else {
            cfg.fixed_beta
        };
        let labels = if cfg.ablation.dynamic_labels() {
            assign_dynamic(&matches, t_dyn)?
        } else {
            assign_static(&matches, cfg.t_pos, cfg.t_neg)?
        };
        let batch = sample_batch(
            &labels,
            &matches,
            &props,
            &scene.gts,
            cfg.batch_spec(),
            &cfg.delta_stats,
            derive_seed(seed, stream::SAMPLE, ix),
        )?;
        let obs = cfg.observation.observe(
            &props,
            &matches,
            &scene.gts,
            &cfg.delta_stats,
            derive_seed(seed, stream::TRAIN_OBS, ix),
        );
        det.train_step(
            &batch,
            &obs,
            beta_in_use,
            &cfg.optimizer,
            cfg.optimizer.lr_factor(i, cfg.iterations),
        )?;
        if !det.is_finite() {
            return Err(SimError::Diverged {
                iteration: i,
                detail: "non-finite detector weights".into(),
            });
        }

        let mut tick = (i + 1) % c == 0;
        if use_ctl {
            let ious: Vec<f64> = matches.iter().map(|m| m.max_iou).collect();
            let targets: Vec<Delta> = batch.positives().map(|(_, t)| t).collect();
            ctl.record_labels(&ious, &targets);
            tick = ctl.maybe_update() == UpdateOutcome::Updated;
        }
        if i == 0 || tick {
            let (t_dyn, beta_dyn) = ctl.current();
            let t = if cfg.ablation.dynamic_labels() { t_dyn } else { t_in_use };
            let b = if cfg.ablation.dynamic_beta() {
                beta_dyn
            } else {
                beta_in_use
            };
            trend.rows.push(trend_row(i, t, b, &props, &scene.gts));
        }
    }

    let report = evaluate(&det, cfg)?;
    Ok(ClosedLoopOutcome {
        detector: det,
        trend,
        report,
    })
}

/// Detections for one scene: refined, scored, then NMS-filtered.
pub fn detect(det: &ToyDetector, scene: &Scene, cfg: &ClosedLoopConfig, index: u64) -> Vec<Detection> {
    let seed = cfg.seed;
    let props = stage_one_proposals(
        det,
        scene,
        cfg.eval_q(),
        cfg,
        PipelineSeeds {
            proposals: derive_seed(seed, stream::EVAL_PROPOSALS, index),
            refine_obs: derive_seed(seed, stream::EVAL_REFINE_OBS, index),
            objectness: derive_seed(seed, stream::EVAL_OBJECTNESS, index),
        },
    );
    let matches = match_proposals(&props, &scene.gts);
    let obs = cfg.observation.observe(
        &props,
        &matches,
        &scene.gts,
        &cfg.delta_stats,
        derive_seed(seed, stream::EVAL_OBS, index),
    );
    let dets: Vec<Detection> = props
        .iter()
        .zip(&obs)
        .map(|(p, o)| Detection {
            bbox: det.refine(p, o, &cfg.delta_stats, scene.width, scene.height),
            score: det.score(o),
        })
        .collect();
    nms(&dets, cfg.eval.nms_threshold)
        .into_iter()
        .map(|k| dets[k])
        .collect()
}

/// COCO-style report over `cfg.eval.n_scenes` held-out scenes.
pub fn evaluate(det: &ToyDetector, cfg: &ClosedLoopConfig) -> Result<EvalReport, SimError> {
    let mut scenes = Vec::with_capacity(cfg.eval.n_scenes);
    let mut dets = Vec::with_capacity(cfg.eval.n_scenes);
    for s in 0..cfg.eval.n_scenes as u64 {
        let scene = gen_scene(
            derive_seed(cfg.seed, stream::EVAL_SCENE, s),
            cfg.scene.n_objects,
            &cfg.scene,
        )?;
        dets.push(detect(det, &scene, cfg, s));
        scenes.push(scene);
    }
    let images: Vec<ImageRecord<'_>> = scenes
        .iter()
        .zip(&dets)
        .map(|(s, d)| ImageRecord { dets: d, gts: &s.gts })
        .collect();
    Ok(coco_map_images(&images))
}

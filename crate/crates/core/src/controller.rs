//! Online controller for the IoU threshold `T_now` and SmoothL1 `beta_now`.
//!
//! Every iteration contributes one order statistic to each of two recording
//! sets: the `k_iou`-th largest matched IoU and the `k_beta`-th smallest
//! regression-label scalar. Every `update_interval` iterations the threshold
//! becomes the mean of the first set and `beta` the median of the second,
//! both clipped, and the sets are emptied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Delta;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("order statistic of an empty list")]
    Empty,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("invalid controller config: {0}")]
    Config(String),
}

/// `k`-th largest value (1-based, duplicates counted). Falls back to the
/// minimum when `k` exceeds the length.
pub fn kth_largest(values: &[f64], k: usize) -> Result<f64, ControllerError> {
    order_stat(values, k, true)
}

/// `k`-th smallest value (1-based, duplicates counted). Falls back to the
/// maximum when `k` exceeds the length.
pub fn kth_smallest(values: &[f64], k: usize) -> Result<f64, ControllerError> {
    order_stat(values, k, false)
}

fn order_stat(values: &[f64], k: usize, largest: bool) -> Result<f64, ControllerError> {
    if values.is_empty() {
        return Err(ControllerError::Empty);
    }
    if k == 0 {
        return Err(ControllerError::ZeroK);
    }
    let k = k.min(values.len());
    let mut buf = values.to_vec();
    let (_, v, _) = if largest {
        buf.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a))
    } else {
        buf.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b))
    };
    Ok(*v)
}

/// Arithmetic mean in insertion order.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Median; an even count averages the two middle elements.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// Reduction of a 4-component normalized regression label to the scalar
/// recorded for `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelReduction {
    /// Mean of the four absolute components.
    #[default]
    MeanAbs,
    /// Largest absolute component.
    MaxAbs,
    /// Every absolute component is its own scalar (four per label).
    Flattened,
}

impl LabelReduction {
    pub fn scalars<'a>(self, labels: impl IntoIterator<Item = &'a Delta>) -> Vec<f64> {
        let mut out = Vec::new();
        for d in labels {
            let a = d.to_array().map(f64::abs);
            match self {
                LabelReduction::MeanAbs => out.push(a.iter().sum::<f64>() / 4.0),
                LabelReduction::MaxAbs => out.push(a.iter().copied().fold(0.0, f64::max)),
                LabelReduction::Flattened => out.extend_from_slice(&a),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Rank of the IoU recorded per iteration (counted from the top).
    pub k_iou: usize,
    /// Rank of the label scalar recorded per iteration (counted from the bottom).
    pub k_beta: usize,
    /// Iterations between updates.
    pub update_interval: usize,
    pub t_floor: f64,
    pub beta_ceiling: f64,
    pub t_init: f64,
    pub beta_init: f64,
    pub reduction: LabelReduction,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k_iou: 75,
            k_beta: 10,
            update_interval: 100,
            t_floor: 0.4,
            beta_ceiling: 1.0,
            t_init: 0.5,
            beta_init: 1.0,
            reduction: LabelReduction::MeanAbs,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Config(m.to_string()));
        if self.k_iou == 0 || self.k_beta == 0 || self.update_interval == 0 {
            return bad("k_iou, k_beta and update_interval must all be >= 1");
        }
        if !(0.0..=1.0).contains(&self.t_floor) {
            return bad("t_floor must lie in [0, 1]");
        }
        if !(self.beta_ceiling > 0.0 && self.beta_ceiling.is_finite()) {
            return bad("beta_ceiling must be positive");
        }
        if !(0.0..=1.0).contains(&self.t_init) {
            return bad("t_init must lie in [0, 1]");
        }
        if !(self.beta_init > 0.0 && self.beta_init.is_finite()) {
            return bad("beta_init must be positive");
        }
        Ok(())
    }
}

/// What [`Controller::maybe_update`] did on this iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    /// Not an update tick.
    Idle,
    /// Tick with at least one nonempty set; values refreshed.
    Updated,
    /// Tick reached with both sets empty; values left as they were.
    EmptyTick,
}

/// JSON-serializable view of the controller for trend logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSnapshot {
    pub iteration: u64,
    pub t_now: f64,
    pub beta_now: f64,
    pub s_iou_len: usize,
    pub s_beta_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    config: ControllerConfig,
    t_now: f64,
    beta_now: f64,
    s_iou: Vec<f64>,
    s_beta: Vec<f64>,
    iteration: u64,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            t_now: config.t_init.max(config.t_floor),
            beta_now: config.beta_init.min(config.beta_ceiling),
            s_iou: Vec::with_capacity(config.update_interval),
            s_beta: Vec::with_capacity(config.update_interval),
            iteration: 0,
            config,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Live `(t_now, beta_now)`.
    pub fn current(&self) -> (f64, f64) {
        (self.t_now, self.beta_now)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn s_iou(&self) -> &[f64] {
        &self.s_iou
    }

    pub fn s_beta(&self) -> &[f64] {
        &self.s_beta
    }

    /// Records this iteration's order statistics. Empty inputs record nothing
    /// for their set.
    pub fn record(&mut self, matched_ious: &[f64], label_scalars: &[f64]) {
        if let Ok(v) = kth_largest(matched_ious, self.config.k_iou) {
            self.s_iou.push(v);
        }
        if let Ok(v) = kth_smallest(label_scalars, self.config.k_beta) {
            self.s_beta.push(v);
        }
    }

    /// [`Controller::record`] taking normalized regression labels and reducing
    /// them with the configured [`LabelReduction`].
    pub fn record_labels<'a>(&mut self, matched_ious: &[f64], labels: impl IntoIterator<Item = &'a Delta>) {
        let scalars = self.config.reduction.scalars(labels);
        self.record(matched_ious, &scalars);
    }

    /// Advances the iteration counter and, on every `update_interval`-th
    /// call, refreshes `t_now` / `beta_now` and clears both sets.
    pub fn maybe_update(&mut self) -> UpdateOutcome {
        self.iteration += 1;
        if !self.iteration.is_multiple_of(self.config.update_interval as u64) {
            return UpdateOutcome::Idle;
        }
        if self.s_iou.is_empty() && self.s_beta.is_empty() {
            return UpdateOutcome::EmptyTick;
        }
        if let Some(m) = mean(&self.s_iou) {
            self.t_now = m.max(self.config.t_floor);
        }
        if let Some(m) = median(&self.s_beta) {
            self.beta_now = m.min(self.config.beta_ceiling);
        }
        self.s_iou.clear();
        self.s_beta.clear();
        UpdateOutcome::Updated
    }

    pub fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot {
            iteration: self.iteration,
            t_now: self.t_now,
            beta_now: self.beta_now,
            s_iou_len: self.s_iou.len(),
            s_beta_len: self.s_beta.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_desc(v: &[f64]) -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    #[test]
    fn kth_examples() {
        let v = [0.3, 0.7, 0.5];
        assert_eq!(kth_largest(&v, 1).unwrap(), 0.7);
        assert_eq!(kth_largest(&v, 2).unwrap(), sorted_desc(&v)[1]);
        assert_eq!(kth_largest(&[0.3, 0.7], 3).unwrap(), 0.3);
        assert_eq!(kth_smallest(&v, 1).unwrap(), 0.3);
        assert_eq!(kth_smallest(&v, 2).unwrap(), 0.5);
        assert_eq!(kth_smallest(&[0.3], 10).unwrap(), 0.3);
        assert_eq!(kth_largest(&[], 1), Err(ControllerError::Empty));
        assert_eq!(kth_smallest(&v, 0), Err(ControllerError::ZeroK));
        assert_eq!(kth_largest(&[0.5, 0.5, 0.2], 2).unwrap(), 0.5);
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[0.2, 1.4, 0.3]), Some(0.3));
        assert!((median(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(mean(&[]), None);
        assert!((mean(&[0.4, 0.5, 0.6]).unwrap() - 0.5).abs() < 1e-15);
    }

    fn ctl(c: usize) -> Controller {
        Controller::new(ControllerConfig {
            update_interval: c,
            k_iou: 2,
            k_beta: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn record_examples() {
        let mut c = ctl(5);
        c.record(&[0.2, 0.6, 0.4], &[]);
        assert_eq!(c.s_iou(), &[0.4]);
        assert!(c.s_beta().is_empty());
        for _ in 0..3 {
            c.record(&[0.5], &[0.1]);
            c.maybe_update();
        }
        assert_eq!(c.s_iou().len(), 4);
        let mut c = ctl(10);
        for i in 0..9 {
            c.record(&[0.5, 0.6], &[0.2]);
            assert_eq!(c.maybe_update(), UpdateOutcome::Idle, "tick at {i}");
        }
        assert_eq!(c.s_iou().len(), 9);
    }

    #[test]
    fn update_examples() {
        let mut c = ctl(3);
        assert_eq!(c.current(), (0.5, 1.0));
        assert_eq!(c.current(), c.current());
        for (iou, beta) in [(0.4, 0.2), (0.5, 1.4), (0.6, 0.3)] {
            c.record(&[1.0, iou], &[beta]);
            c.maybe_update();
        }
        assert!((c.current().0 - 0.5).abs() < 1e-15);
        assert_eq!(c.current().1, 0.3);
        assert!(c.s_iou().is_empty() && c.s_beta().is_empty());

        let mut c = ctl(3);
        for (iou, beta) in [(0.30, 1.2), (0.35, 1.5), (0.40, 1.1)] {
            c.record(&[1.0, iou], &[beta]);
            c.maybe_update();
        }
        assert_eq!(c.current(), (0.4, 1.0));

        let mut c = ctl(2);
        for beta in [0.2, 0.4] {
            c.record(&[], &[beta]);
            c.maybe_update();
        }
        assert!((c.current().1 - 0.3).abs() < 1e-15);
        assert_eq!(c.current().0, 0.5);
    }

    #[test]
    fn empty_tick_keeps_values() {
        let mut c = ctl(1);
        assert_eq!(c.maybe_update(), UpdateOutcome::EmptyTick);
        assert_eq!(c.current(), (0.5, 1.0));
    }

    #[test]
    fn init_is_clipped() {
        let c = Controller::new(ControllerConfig {
            t_init: 0.1,
            beta_init: 3.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.current(), (0.4, 1.0));
    }

    #[test]
    fn bad_config_rejected() {
        for cfg in [
            ControllerConfig {
                k_iou: 0,
                ..Default::default()
            },
            ControllerConfig {
                update_interval: 0,
                ..Default::default()
            },
            ControllerConfig {
                t_floor: 1.5,
                ..Default::default()
            },
            ControllerConfig {
                beta_ceiling: 0.0,
                ..Default::default()
            },
        ] {
            assert!(Controller::new(cfg).is_err());
        }
    }

    #[test]
    fn reductions() {
        let d = [Delta::new(0.1, -0.3, 0.2, -0.2)];
        let m = LabelReduction::MeanAbs.scalars(&d);
        assert!((m[0] - 0.2).abs() < 1e-15);
        assert_eq!(LabelReduction::MaxAbs.scalars(&d), vec![0.3]);
        assert_eq!(LabelReduction::Flattened.scalars(&d), vec![0.1, 0.3, 0.2, 0.2]);
    }

    #[test]
    fn snapshot_json() {
        let mut c = ctl(100);
        c.record(&[0.9, 0.8], &[0.5]);
        c.maybe_update();
        let s = serde_json::to_value(c.snapshot()).unwrap();
        assert_eq!(s["iteration"], 1);
        assert_eq!(s["s_iou_len"], 1);
        assert_eq!(s["t_now"], 0.5);
    }
}

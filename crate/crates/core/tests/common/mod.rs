//! Reference implementations used by the integration and acceptance tests.
//! They favour the most literal formulation over speed.

#![allow(dead_code)]

use dynhead::controller::{ControllerConfig, LabelReduction, UpdateOutcome};
use dynhead::geometry::{iou, BBox, Delta};
use dynhead::metrics::{coco_thresholds, Detection};
use dynhead::Controller;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One controller iteration's input: IoUs of all proposals and the
/// normalized regression labels of the positives.
pub type Step = (Vec<f64>, Vec<Delta>);

/// `(iteration, t_now, beta_now)` after each update.
pub type Trajectory = Vec<(u64, f64, f64)>;

fn reduce(labels: &[Delta], r: LabelReduction) -> Vec<f64> {
    let mut out = Vec::new();
    for d in labels {
        let a = [d.dx.abs(), d.dy.abs(), d.dw.abs(), d.dh.abs()];
        match r {
            LabelReduction::MeanAbs => out.push((((0.0 + a[0]) + a[1]) + a[2] + a[3]) / 4.0),
            LabelReduction::MaxAbs => out.push(a[0].max(a[1]).max(a[2]).max(a[3])),
            LabelReduction::Flattened => out.extend(a),
        }
    }
    out
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s
}

/// Store-everything controller: keeps the raw per-iteration inputs, sorts
/// them in full and reads the order statistics off the sorted arrays.
pub fn controller_oracle(cfg: &ControllerConfig, stream: &[Step]) -> Trajectory {
    let mut t_now = cfg.t_init.max(cfg.t_floor);
    let mut beta_now = cfg.beta_init.min(cfg.beta_ceiling);
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut last_update = 0usize;
    let mut out = Vec::new();
    for (i, (ious, labels)) in stream.iter().enumerate() {
        history.push((ious.clone(), reduce(labels, cfg.reduction)));
        let iteration = i + 1;
        if iteration % cfg.update_interval != 0 {
            continue;
        }
        let window = &history[last_update..];
        let mut s_iou = Vec::new();
        let mut s_beta = Vec::new();
        for (ious, scalars) in window {
            if !ious.is_empty() {
                let desc: Vec<f64> = sorted(ious).into_iter().rev().collect();
                s_iou.push(desc[cfg.k_iou.min(desc.len()) - 1]);
            }
            if !scalars.is_empty() {
                let asc = sorted(scalars);
                s_beta.push(asc[cfg.k_beta.min(asc.len()) - 1]);
            }
        }
        if s_iou.is_empty() && s_beta.is_empty() {
            continue;
        }
        if !s_iou.is_empty() {
            let mut total = 0.0;
            for v in &s_iou {
                total += v;
            }
            t_now = (total / s_iou.len() as f64).max(cfg.t_floor);
        }
        if !s_beta.is_empty() {
            let s = sorted(&s_beta);
            let n = s.len();
            let med = if n % 2 == 1 {
                s[n / 2]
            } else {
                0.5 * (s[n / 2 - 1] + s[n / 2])
            };
            beta_now = med.min(cfg.beta_ceiling);
        }
        last_update = history.len();
        out.push((iteration as u64, t_now, beta_now));
    }
    out
}

pub fn controller_trajectory(cfg: &ControllerConfig, stream: &[Step]) -> Trajectory {
    let mut c = Controller::new(*cfg).unwrap();
    let mut out = Vec::new();
    for (ious, labels) in stream {
        c.record_labels(ious, labels);
        if c.maybe_update() == UpdateOutcome::Updated {
            let (t, b) = c.current();
            out.push((c.iteration(), t, b));
        }
    }
    out
}

/// Random controller config and input stream. Lists are sometimes empty or
/// shorter than `k`, and values are sometimes quantized to force duplicates.
pub fn random_controller_case(rng: &mut ChaCha8Rng, iterations: usize) -> (ControllerConfig, Vec<Step>) {
    let reduction = match rng.random_range(0..3) {
        0 => LabelReduction::MeanAbs,
        1 => LabelReduction::MaxAbs,
        _ => LabelReduction::Flattened,
    };
    let cfg = ControllerConfig {
        k_iou: rng.random_range(1..=100),
        k_beta: rng.random_range(1..=20),
        update_interval: rng.random_range(1..=120),
        t_floor: rng.random_range(0.0..0.6),
        beta_ceiling: rng.random_range(0.2..1.5),
        t_init: rng.random_range(0.0..1.0),
        beta_init: rng.random_range(0.05..2.0),
        reduction,
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let quantize = rng.random_bool(0.3);
    let q = |v: f64| if quantize { (v * 20.0).round() / 20.0 } else { v };
    let stream = (0..iterations)
        .map(|_| {
            let n_iou = if rng.random_bool(0.05) {
                0
            } else {
                rng.random_range(1..200)
            };
            let ious = (0..n_iou).map(|_| q(rng.random_range(0.0..1.0))).collect();
            let n_lab = if rng.random_bool(0.1) {
                0
            } else {
                rng.random_range(1..40)
            };
            let labels = (0..n_lab)
                .map(|_| {
                    let mut c = || q(normal.sample(rng));
                    Delta::new(c(), c(), c(), c())
                })
                .collect();
            (ious, labels)
        })
        .collect();
    (cfg, stream)
}

/// Indices by descending score, ties by ascending index, found by repeated
/// linear scans.
fn score_rank(dets: &[Detection]) -> Vec<usize> {
    let mut used = vec![false; dets.len()];
    let mut order = Vec::new();
    for _ in 0..dets.len() {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !used[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        order.push(b);
    }
    order
}

pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = score_rank(dets);
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let top = alive.remove(0);
        keep.push(top);
        alive.retain(|&j| iou(&dets[top].bbox, &dets[j].bbox) < thr);
    }
    keep
}

/// True/false positive flag per detection (in input order) from explicit
/// greedy matching of one image.
fn tp_flags(dets: &[Detection], gts: &[BBox], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in score_rank(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(&dets[i].bbox, g);
            if !taken[j] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// AP over several images: every detection is flagged by per-image greedy
/// matching, the flags are pooled and ranked, and for every recall step `j`
/// the best precision among ranks reaching at least `j` true positives is
/// summed.
pub fn ap_oracle_images(images: &[(Vec<Detection>, Vec<BBox>)], thr: f64) -> f64 {
    let n_gts: usize = images.iter().map(|i| i.1.len()).sum();
    let mut pooled: Vec<Detection> = Vec::new();
    let mut flags: Vec<bool> = Vec::new();
    for (dets, gts) in images {
        pooled.extend_from_slice(dets);
        flags.extend(tp_flags(dets, gts, thr));
    }
    if n_gts == 0 {
        return if pooled.is_empty() { 1.0 } else { 0.0 };
    }
    let mut cum_tp = Vec::new();
    let mut tp = 0usize;
    for i in score_rank(&pooled) {
        tp += flags[i] as usize;
        cum_tp.push(tp);
    }
    let mut area = 0.0;
    for step in 1..=tp {
        let mut p_best = 0.0f64;
        for (k, &c) in cum_tp.iter().enumerate() {
            if c >= step {
                p_best = p_best.max(c as f64 / (k + 1) as f64);
            }
        }
        area += p_best;
    }
    area / n_gts as f64
}

pub fn ap_oracle(dets: &[Detection], gts: &[BBox], thr: f64) -> f64 {
    ap_oracle_images(&[(dets.to_vec(), gts.to_vec())], thr)
}

/// Per-threshold AP and their mean.
pub fn coco_oracle(dets: &[Detection], gts: &[BBox]) -> (Vec<f64>, f64) {
    coco_oracle_images(&[(dets.to_vec(), gts.to_vec())])
}

pub fn coco_oracle_images(images: &[(Vec<Detection>, Vec<BBox>)]) -> (Vec<f64>, f64) {
    let aps: Vec<f64> = coco_thresholds().iter().map(|&t| ap_oracle_images(images, t)).collect();
    let mut total = 0.0;
    for a in &aps {
        total += a;
    }
    (aps, total / 10.0)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(extent * 0.02..extent * 0.3);
    let h = rng.random_range(extent * 0.02..extent * 0.3);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Small detection instance: up to five ground truths and five detections,
/// most detections placed near a ground truth, scores often tied.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<BBox>) {
    let gts: Vec<BBox> = (0..rng.random_range(0..=5)).map(|_| random_box(rng, 100.0)).collect();
    let dets = (0..rng.random_range(0..=5))
        .map(|_| {
            let bbox = if !gts.is_empty() && rng.random_bool(0.7) {
                let g = gts[rng.random_range(0..gts.len())];
                let j = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-0.15..0.15) * s;
                let (jx, jy, jw, jh) = (j(rng, g.w()), j(rng, g.h()), j(rng, g.w()), j(rng, g.h()));
                BBox::from_center(g.cx() + jx, g.cy() + jy, g.w() + jw, g.h() + jh).unwrap()
            } else {
                random_box(rng, 100.0)
            };
            let score = if rng.random_bool(0.4) {
                rng.random_range(1..=4) as f64 / 4.0
            } else {
                rng.random_range(0.0..1.0)
            };
            Detection { bbox, score }
        })
        .collect();
    (dets, gts)
}

/// Central finite difference with the step rounded to a representable span.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let (hi, lo) = (x + h, x - h);
    (f(hi) - f(lo)) / (hi - lo)
}

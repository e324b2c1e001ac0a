//! Greedy NMS and single-class COCO-style average precision.
//!
//! AP is the exact area under the precision/recall staircase after making
//! precision monotone from the right. No 101-point sampling, no area ranges,
//! no max-detection cap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::match_proposals;
use crate::geometry::{encode_offsets, iou, BBox};

/// One scored detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Ground-truth record as it appears in the JSON input files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Indices sorted by descending score; equal scores keep insertion order.
fn score_order(scores: impl ExactSizeIterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, Copy)]
pub struct ImageRecord<'a> {
    pub dets: &'a [Detection],
    pub gts: &'a [BBox],
}

/// Per-detection true/false positive flags for one image: detections are
/// visited by descending score and each takes the unmatched ground truth of
/// highest IoU, provided it reaches `iou_threshold`.
fn match_image(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in score_order(dets.iter().map(|d| d.score)) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&dets[i].bbox, g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// AP over several images at one IoU threshold.
pub fn average_precision_images(images: &[ImageRecord<'_>], iou_threshold: f64) -> f64 {
    let total_gts: usize = images.iter().map(|r| r.gts.len()).sum();
    let total_dets: usize = images.iter().map(|r| r.dets.len()).sum();
    if total_gts == 0 {
        return if total_dets == 0 { 1.0 } else { 0.0 };
    }
    // (score, is_tp) pooled in image order, then stably ranked by score
    let mut pooled: Vec<(f64, bool)> = Vec::with_capacity(total_dets);
    for r in images {
        let tp = match_image(r.dets, r.gts, iou_threshold);
        pooled.extend(r.dets.iter().zip(tp).map(|(d, t)| (d.score, t)));
    }
    let order = score_order(pooled.iter().map(|p| p.0));

    let mut precision = Vec::with_capacity(order.len());
    let mut is_tp = Vec::with_capacity(order.len());
    let mut tp_count = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if pooled[i].1 {
            tp_count += 1;
        }
        precision.push(tp_count as f64 / (rank + 1) as f64);
        is_tp.push(pooled[i].1);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let area: f64 = precision
        .iter()
        .zip(&is_tp)
        .filter(|(_, t)| **t)
        .fold(0.0, |acc, (p, _)| acc + p);
    area / total_gts as f64
}

/// AP for a single image.
pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> f64 {
    average_precision_images(&[ImageRecord { dets, gts }], iou_threshold)
}

/// The ten COCO thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// AP at each COCO threshold and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: BTreeMap<String, f64>,
    pub mean_ap: f64,
}

impl EvalReport {
    /// AP at one of the ten thresholds, e.g. `report.at(0.75)`.
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.ap.get(&threshold_key(threshold)).copied()
    }

    pub fn ap50(&self) -> f64 {
        self.ap["0.50"]
    }
    pub fn ap60(&self) -> f64 {
        self.ap["0.60"]
    }
    pub fn ap70(&self) -> f64 {
        self.ap["0.70"]
    }
    pub fn ap75(&self) -> f64 {
        self.ap["0.75"]
    }
    pub fn ap80(&self) -> f64 {
        self.ap["0.80"]
    }
    pub fn ap90(&self) -> f64 {
        self.ap["0.90"]
    }
}

pub fn coco_map_images(images: &[ImageRecord<'_>]) -> EvalReport {
    let mut ap = BTreeMap::new();
    let mut sum = 0.0;
    for t in coco_thresholds() {
        let v = average_precision_images(images, t);
        sum += v;
        ap.insert(threshold_key(t), v);
    }
    EvalReport {
        ap,
        mean_ap: sum / 10.0,
    }
}

pub fn coco_map(dets: &[Detection], gts: &[BBox]) -> EvalReport {
    coco_map_images(&[ImageRecord { dets, gts }])
}

/// Positive counts per IoU threshold and the spread of the raw `dx` / `dw`
/// offsets of the positives at the lowest threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveStats {
    pub counts: Vec<usize>,
    /// `None` when fewer than two positives exist.
    pub std_dx: Option<f64>,
    pub std_dw: Option<f64>,
}

fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn positive_count_stats(proposals: &[BBox], gts: &[BBox], thresholds: &[f64]) -> PositiveStats {
    let matches = match_proposals(proposals, gts);
    let counts = thresholds
        .iter()
        .map(|&t| {
            matches
                .iter()
                .filter(|m| m.gt_index.is_some() && m.max_iou >= t)
                .count()
        })
        .collect();
    let lowest = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut dx, mut dw) = (Vec::new(), Vec::new());
    for (p, m) in proposals.iter().zip(&matches) {
        if let Some(g) = m.gt_index.filter(|_| m.max_iou >= lowest) {
            let d = encode_offsets(p, &gts[g]);
            dx.push(d.dx);
            dw.push(d.dw);
        }
    }
    PositiveStats {
        counts,
        std_dx: sample_std(&dx),
        std_dw: sample_std(&dw),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn nms_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[det(b, 0.8), det(b, 0.9)], 0.5), vec![1]);
        let disjoint = [det(bx(0.0, 0.0, 1.0, 1.0), 0.3), det(bx(2.0, 2.0, 3.0, 3.0), 0.9)];
        assert_eq!(nms(&disjoint, 1e-9), vec![1, 0]);
        // tie on score keeps the earlier one
        assert_eq!(nms(&[det(b, 0.5), det(b, 0.5)], 0.5), vec![0]);
    }

    #[test]
    fn ap_examples() {
        let gts = [bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 35.0)];
        let perfect: Vec<_> = gts.iter().zip([0.2, 0.9]).map(|(g, s)| det(*g, s)).collect();
        for t in coco_thresholds() {
            assert_eq!(average_precision(&perfect, &gts, t), 1.0);
        }
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        assert_eq!(average_precision(&perfect, &[], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        let r = coco_map(&perfect, &gts);
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.ap.len(), 10);
    }

    #[test]
    fn ap_hand_computed() {
        // 3 gts; ranked dets: TP, FP, TP, TP  -> precisions 1, 1/2, 2/3, 3/4
        // envelope at the TPs: 1, 3/4, 3/4  -> AP = (1 + 0.75 + 0.75) / 3
        let gts = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(20.0, 0.0, 30.0, 10.0),
            bx(40.0, 0.0, 50.0, 10.0),
        ];
        let dets = [
            det(gts[0], 0.9),
            det(bx(100.0, 100.0, 110.0, 110.0), 0.8),
            det(gts[1], 0.7),
            det(gts[2], 0.6),
        ];
        let ap = average_precision(&dets, &gts, 0.5);
        assert!((ap - 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let ap = average_precision(&[det(g, 0.9), det(g, 0.8)], &[g], 0.5);
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[det(bx(50.0, 0.0, 60.0, 10.0), 0.95), det(g, 0.8)], &[g], 0.5);
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn report_json_layout() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let r = coco_map(&[det(g, 0.9)], &[g]);
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<_> = v["ap"].as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.first().unwrap(), "0.50");
        assert_eq!(keys.last().unwrap(), "0.95");
        assert_eq!(v["mean_ap"], 1.0);
        assert_eq!(r.at(0.9), Some(1.0));
    }

    #[test]
    fn positive_stats_examples() {
        let gts = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(20.0, 20.0, 30.0, 35.0),
            bx(5.0, 30.0, 9.0, 40.0),
        ];
        let s = positive_count_stats(&gts, &gts, &[0.5, 0.6, 0.7]);
        assert_eq!(s.counts, vec![3, 3, 3]);
        assert_eq!(s.std_dx, Some(0.0));
        assert_eq!(s.std_dw, Some(0.0));
        let s = positive_count_stats(&[], &gts, &[0.5, 0.6, 0.7]);
        assert_eq!(s.counts, vec![0, 0, 0]);
        assert_eq!(s.std_dx, None);
    }

    #[test]
    fn detection_json_schema() {
        let d: Vec<Detection> = serde_json::from_str(r#"[{"box":[0,0,2,2],"score":0.5}]"#).unwrap();
        assert_eq!(d[0].bbox, bx(0.0, 0.0, 2.0, 2.0));
        let g: Vec<GroundTruth> = serde_json::from_str(r#"[{"box":[1,1,3,3]}]"#).unwrap();
        assert_eq!(g[0].bbox, bx(1.0, 1.0, 3.0, 3.0));
    }
}

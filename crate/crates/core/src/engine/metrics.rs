//! NMS, greedy matching, precision/recall/F1 and all-point VOC AP.

use serde::{Deserialize, Serialize};

use super::detector::{Detector, FG_CLASS};
use super::{Dataset, TrainConfig};
use crate::diffcore::{Graph, ParamSet};
use crate::error::{Error, Result};
use crate::imaging::BBox;

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub detections: usize,
    pub ground_truth: usize,
}

/// Greedy non-maximum suppression; input order breaks score ties.
pub fn nms(mut dets: Vec<(BBox, f64)>, iou: f64) -> Vec<(BBox, f64)> {
    dets.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut kept: Vec<(BBox, f64)> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.0.iou(&d.0) <= iou) {
            kept.push(d);
        }
    }
    kept
}

fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// True-positive flags in descending score order. Each detection claims the
/// unclaimed ground-truth box of its image with the highest IoU ≥ `iou`.
pub fn match_detections(dets: &[Detection], gt: &[Vec<BBox>], iou: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked(dets)
        .into_iter()
        .map(|k| {
            let d = &dets[k];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt[d.image].iter().enumerate() {
                let v = g.iou(&d.bbox);
                if !used[d.image][j] && v >= iou && best.is_none_or(|b| v > b.1) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[d.image][j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// All-point interpolated average precision.
pub fn average_precision(dets: &[Detection], gt: &[Vec<BBox>], iou: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 || dets.is_empty() {
        return 0.0;
    }
    let tp = match_detections(dets, gt, iou);
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for k in 0..rec.len() {
        if rec[k] > last {
            ap += (rec[k] - last) * prec[k];
            last = rec[k];
        }
    }
    ap
}

pub fn score_detections(dets: &[Detection], gt: &[Vec<BBox>], score_threshold: f64) -> Metrics {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    let kept: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.score >= score_threshold)
        .collect();
    let tp = match_detections(&kept, gt, MATCH_IOU)
        .into_iter()
        .filter(|t| *t)
        .count();
    let precision = if kept.is_empty() {
        0.0
    } else {
        tp as f64 / kept.len() as f64
    };
    let recall = if n_gt == 0 {
        0.0
    } else {
        tp as f64 / n_gt as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        precision,
        recall,
        f1,
        map: average_precision(dets, gt, MATCH_IOU),
        detections: kept.len(),
        ground_truth: n_gt,
    }
}

/// Foreground probability of every proposal of every sample, after NMS.
pub fn detect(params: &ParamSet, cfg: &TrainConfig, data: &Dataset) -> Result<Vec<Detection>> {
    let det = Detector::new(cfg.feature_dim);
    let mut out = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let patches = g.constant(s.patches.clone());
        let grid = det.grid(&mut g, &b, patches)?;
        let pool = g.constant(s.pool.clone());
        let roi = g.matmul(pool, grid)?;
        let logits = det.det_logits(&mut g, &b, roi)?;
        let prob = g.softmax(logits)?;
        let p = g.value(prob);
        let scored: Vec<(BBox, f64)> = s
            .proposals
            .iter()
            .enumerate()
            .map(|(k, pr)| (pr.bbox, p.data()[k * 2 + FG_CLASS]))
            .collect();
        for (bbox, score) in nms(scored, cfg.nms_iou) {
            out.push(Detection {
                image: i,
                bbox,
                score,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(params: &ParamSet, cfg: &TrainConfig, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let dets = detect(params, cfg, data)?;
    let gt: Vec<Vec<BBox>> = data.samples.iter().map(|s| s.gt.clone()).collect();
    Ok(score_detections(&dets, &gt, cfg.score_threshold))
}

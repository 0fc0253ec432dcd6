//! Per-image caches built once before training: cell patches, proposals with
//! labels, scatter sets and anchor similarities.

use rand::seq::index::sample;

use super::detector::{patch_matrix, pool_matrix, BG_CLASS, FG_CLASS};
use super::{propose, TrainConfig};
use crate::anchors::{kmedoids, structural_similarity, StructureAnchorSet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{resize_roi, BBox, Domain, Image};
use crate::io::LabeledImage;
use crate::rng::{self, streams};
use crate::scatter::{
    distance_matrix, extract_scatter_set, scatter_distance, ScatterSet, CANONICAL,
};

#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: BBox,
    pub label: usize,
    pub points: ScatterSet,
    /// Similarity to each structure anchor; empty until attached.
    pub sim: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub patches: Tensor,
    pub gt: Vec<BBox>,
    pub gt_points: Vec<ScatterSet>,
    pub proposals: Vec<Proposal>,
    /// `[proposals, cells]` ROI pooling matrix.
    pub pool: Tensor,
}

impl Sample {
    pub fn labels(&self) -> Vec<usize> {
        self.proposals.iter().map(|p| p.label).collect()
    }

    /// Rows `rows` of the pooling matrix.
    pub fn pool_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let cells = self.pool.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * cells);
        for &r in rows {
            data.extend_from_slice(&self.pool.data()[r * cells..(r + 1) * cells]);
        }
        Tensor::matrix(rows.len(), cells, data)
    }
}

/// Every foreground proposal plus a random subset of `bg_per_fg` background
/// proposals per foreground one (at least `bg_per_fg`), in index order.
pub fn sample_rois<R: rand::Rng>(labels: &[usize], bg_per_fg: usize, rng: &mut R) -> Vec<usize> {
    let fg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == FG_CLASS)
        .collect();
    let bg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != FG_CLASS)
        .collect();
    let want = (bg_per_fg * fg.len().max(1)).min(bg.len());
    let mut rows = fg;
    rows.extend(sample(rng, bg.len(), want).into_iter().map(|k| bg[k]));
    rows.sort_unstable();
    rows
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain: Domain,
    pub samples: Vec<Sample>,
}

/// Offsets separating the proposal streams of different datasets.
pub mod stream_offsets {
    pub const SOURCE: u64 = 0;
    pub const TARGET: u64 = 1 << 24;
    pub const EVAL: u64 = 2 << 24;
}

fn roi_points(img: &Image, b: &BBox) -> Result<ScatterSet> {
    extract_scatter_set(&resize_roi(img, b, CANONICAL)?)
}

impl Dataset {
    /// Proposals for image `i` come from stream `PROPOSAL_BASE + offset + i`.
    pub fn prepare(images: &[LabeledImage], cfg: &TrainConfig, offset: u64) -> Result<Self> {
        let first = images.first().ok_or(Error::Empty("dataset"))?;
        let mut samples = Vec::with_capacity(images.len());
        for (i, it) in images.iter().enumerate() {
            let (w, h) = (it.image.width, it.image.height);
            let mut prng = rng::stream(cfg.seed, streams::PROPOSAL_BASE + offset + i as u64);
            let boxes = propose(&it.image, &cfg.proposals, &mut prng)?;
            if boxes.is_empty() {
                return Err(Error::invalid(format!(
                    "image {} produced no proposals",
                    it.id
                )));
            }
            let gt: Vec<BBox> = it
                .annotation
                .boxes
                .iter()
                .map(|b| b.clip_to(w as f64, h as f64))
                .collect();
            let proposals = boxes
                .iter()
                .map(|b| {
                    let best = gt.iter().map(|g| g.iou(b)).fold(0.0, f64::max);
                    Ok(Proposal {
                        bbox: *b,
                        label: if best >= cfg.proposals.fg_iou {
                            FG_CLASS
                        } else {
                            BG_CLASS
                        },
                        points: roi_points(&it.image, b)?,
                        sim: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let gt_points = gt
                .iter()
                .filter(|g| g.w >= 2.0 && g.h >= 2.0)
                .map(|g| roi_points(&it.image, g))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id: it.id.clone(),
                width: w,
                height: h,
                patches: patch_matrix(&it.image)?,
                pool: pool_matrix(&boxes, w, h)?,
                gt,
                gt_points,
                proposals,
            });
        }
        Ok(Self {
            domain: first.domain,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn attach_similarity(&mut self, anchors: &StructureAnchorSet, delta: f64) -> Result<()> {
        for s in &mut self.samples {
            for p in &mut s.proposals {
                let d = anchors
                    .anchors()
                    .iter()
                    .map(|a| scatter_distance(&p.points, a))
                    .collect::<Result<Vec<_>>>()?;
                p.sim = structural_similarity(&d, delta)?.sim;
            }
        }
        Ok(())
    }

    /// Ground-truth ROI ids (`<image id>:<box index>`) and scatter sets.
    pub fn gt_instances(&self) -> (Vec<String>, Vec<ScatterSet>) {
        let mut ids = Vec::new();
        let mut sets = Vec::new();
        for s in &self.samples {
            for (k, p) in s.gt_points.iter().enumerate() {
                ids.push(format!("{}:{k}", s.id));
                sets.push(p.clone());
            }
        }
        (ids, sets)
    }
}

/// Clusters a seeded subsample of the source ground-truth ROIs into `n_a` anchors.
pub fn build_anchors(source: &Dataset, cfg: &TrainConfig) -> Result<StructureAnchorSet> {
    let (ids, sets) = source.gt_instances();
    if sets.len() < cfg.n_a {
        return Err(Error::invalid(format!(
            "{} source instances cannot form {} anchors",
            sets.len(),
            cfg.n_a
        )));
    }
    let mut arng = rng::stream(cfg.seed, streams::ANCHORS);
    let mut pick: Vec<usize> = if sets.len() > cfg.anchor_pool {
        sample(&mut arng, sets.len(), cfg.anchor_pool.max(cfg.n_a)).into_vec()
    } else {
        (0..sets.len()).collect()
    };
    pick.sort_unstable();
    let ids: Vec<String> = pick.iter().map(|&i| ids[i].clone()).collect();
    let sets: Vec<ScatterSet> = pick.iter().map(|&i| sets[i].clone()).collect();
    let dist = distance_matrix(&sets)?;
    let c = kmedoids(&dist, cfg.n_a, &mut arng)?;
    Ok(StructureAnchorSet::from_clustering(&ids, &sets, &c))
}

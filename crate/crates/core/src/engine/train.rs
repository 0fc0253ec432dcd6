//! The training loop: supervised source step, adversarial feature adaptation
//! on both domains, and (late epochs only) reliable adjacency alignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{build_anchors, sample_rois, stream_offsets};
use super::detector::{cross_entropy, Detector, CLASSES, FG_CLASS};
use super::metrics::evaluate;
use super::{Dataset, Metrics, Sample, TrainConfig};
use crate::anchors::StructureAnchorSet;
use crate::diffcore::{Binding, Graph, NodeId, ParamSet, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::evidential::l_evi_graph;
use crate::io::LabeledImage;
use crate::rng::{self, streams, RngState};
use crate::rsaa::{build_adjacency, l_rsaa, secure_partition, FeatureBank, TargetInstance};
use crate::shfa::{
    ins_prefix, l_img, l_ins, shfa_step, Discriminator, DomainBatch, IMG_PREFIX, SOURCE_LABEL,
    TARGET_LABEL,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Prepared inputs of one training run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub source: Dataset,
    pub target: Dataset,
    pub eval: Option<Dataset>,
    pub anchors: StructureAnchorSet,
}

impl RunData {
    /// Caches proposals, builds anchors from the source ground truth (unless
    /// given) and attaches anchor similarities to every training proposal.
    pub fn prepare(
        cfg: &TrainConfig,
        source: &[LabeledImage],
        target: &[LabeledImage],
        eval: Option<&[LabeledImage]>,
        anchors: Option<StructureAnchorSet>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut s = Dataset::prepare(source, cfg, stream_offsets::SOURCE)?;
        let mut t = Dataset::prepare(target, cfg, stream_offsets::TARGET)?;
        let e = eval
            .map(|e| Dataset::prepare(e, cfg, stream_offsets::EVAL))
            .transpose()?;
        let anchors = match anchors {
            Some(a) => a,
            None => build_anchors(&s, cfg)?,
        };
        if anchors.n_a != cfg.n_a {
            return Err(Error::invalid(format!(
                "anchor set has {} anchors, config wants {}",
                anchors.n_a, cfg.n_a
            )));
        }
        s.attach_similarity(&anchors, cfg.delta)?;
        t.attach_similarity(&anchors, cfg.delta)?;
        Ok(Self {
            source: s,
            target: t,
            eval: e,
            anchors,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub source: String,
    pub target: String,
    pub lr: f64,
    pub l_s: f64,
    pub l_evi: f64,
    pub l_shfa: f64,
    pub l_rsaa: f64,
    pub secure_sets: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub map: Option<f64>,
    pub l_s: Option<f64>,
    pub l_evi: Option<f64>,
    pub l_shfa: Option<f64>,
    pub l_rsaa: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub rng_state: RngState,
    pub config: TrainConfig,
    pub params: ParamSet,
    pub bank: FeatureBank,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub anchors: StructureAnchorSet,
    pub iterations: Vec<IterRecord>,
    pub metrics: Vec<MetricsRow>,
    pub final_eval: Option<Metrics>,
}

/// Graph nodes of one forward pass over a sample.
pub struct Forward {
    pub grid: NodeId,
    pub roi: NodeId,
    pub logits: NodeId,
    pub evidence: NodeId,
}

pub fn forward(g: &mut Graph, b: &Binding, det: &Detector, s: &Sample) -> Result<Forward> {
    forward_pooled(g, b, det, s, s.pool.clone())
}

/// Forward pass whose ROI rows come from `pool` (`[rois, cells]`).
pub fn forward_pooled(
    g: &mut Graph,
    b: &Binding,
    det: &Detector,
    s: &Sample,
    pool: Tensor,
) -> Result<Forward> {
    let patches = g.constant(s.patches.clone());
    let grid = det.grid(g, b, patches)?;
    let pool = g.constant(pool);
    let roi = g.matmul(pool, grid)?;
    let logits = det.det_logits(g, b, roi)?;
    let evidence = det.evidence(g, b, roi)?;
    Ok(Forward {
        grid,
        roi,
        logits,
        evidence,
    })
}

/// Supervised loss terms over the labeled proposals of one source sample.
pub struct SourceLoss {
    pub total: NodeId,
    pub ce: NodeId,
    pub evi: NodeId,
    pub forward: Forward,
}

/// `rows` selects the labeled proposals.
pub fn source_loss(
    g: &mut Graph,
    b: &Binding,
    det: &Detector,
    s: &Sample,
    rows: &[usize],
    kl_weight: f64,
) -> Result<SourceLoss> {
    if rows.is_empty() {
        return Err(Error::Empty("source proposals"));
    }
    let labels: Vec<usize> = rows.iter().map(|&r| s.proposals[r].label).collect();
    let f = forward_pooled(g, b, det, s, s.pool_rows(rows)?)?;
    let ce = cross_entropy(g, f.logits, &labels)?;
    let evi = l_evi_graph(g, f.evidence, &labels, kl_weight)?;
    let total = g.add(ce, evi)?;
    Ok(SourceLoss {
        total,
        ce,
        evi,
        forward: f,
    })
}

/// `(u, p_fg)` per row of an `[n, 2]` evidence tensor.
fn uncertainty_and_fg(evidence: &Tensor) -> Vec<(f64, f64)> {
    evidence
        .data()
        .chunks(CLASSES)
        .map(|e| {
            let s: f64 = e.iter().map(|v| v + 1.0).sum();
            (CLASSES as f64 / s, (e[FG_CLASS] + 1.0) / s)
        })
        .collect()
}

/// `[rows, cols]` matrix holding `block` at row offset `at`.
fn pad_rows(block: &Tensor, rows: usize, at: usize) -> Result<Tensor> {
    let (r, c) = block.dims2().expect("pooling matrices are rank 2");
    let mut data = vec![0.0; rows * c];
    data[at * c..(at + r) * c].copy_from_slice(block.data());
    Tensor::matrix(rows, c, data)
}

/// Adaptation loss `L_IMG + L_INS` over one source and one target sample.
pub fn shfa_loss(
    g: &mut Graph,
    b: &Binding,
    det: &Detector,
    discs: &[Discriminator],
    img_disc: &Discriminator,
    src: &Sample,
    tgt: &Sample,
) -> Result<NodeId> {
    let (ns, nt) = (src.proposals.len(), tgt.proposals.len());
    let ps = g.constant(src.patches.clone());
    let pt = g.constant(tgt.patches.clone());
    let gs = det.grid(g, b, ps)?;
    let gt = det.grid(g, b, pt)?;
    let pool_s = g.constant(pad_rows(&src.pool, ns + nt, 0)?);
    let pool_t = g.constant(pad_rows(&tgt.pool, ns + nt, ns)?);
    let fs = g.matmul(pool_s, gs)?;
    let ft = g.matmul(pool_t, gt)?;
    let feats = g.add(fs, ft)?;
    let mut labels = vec![SOURCE_LABEL; ns];
    labels.extend(std::iter::repeat_n(TARGET_LABEL, nt));
    let sims = src
        .proposals
        .iter()
        .chain(&tgt.proposals)
        .map(|p| p.sim.clone())
        .collect();
    let ins = l_ins(g, b, feats, &DomainBatch { labels, sims }, discs)?;
    let img = l_img(g, b, &[(gs, SOURCE_LABEL), (gt, TARGET_LABEL)], img_disc)?;
    g.add(ins, img)
}

fn scaled(m: BTreeMap<String, Tensor>, s: f64) -> BTreeMap<String, Tensor> {
    m.into_iter().map(|(k, t)| (k, t.map(|v| v * s))).collect()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    det: Detector,
    discs: Vec<Discriminator>,
    img_disc: Discriminator,
    params: ParamSet,
    sup_opt: Sgd,
    disc_opt: Sgd,
    adv_opt: Sgd,
    rsaa_opt: Sgd,
    bank: FeatureBank,
}

impl Trainer<'_> {
    fn supervised(&mut self, s: &Sample, step: u64, lr: f64, rec: &mut IterRecord) -> Result<()> {
        let rows = match self.cfg.roi_bg_per_fg {
            Some(k) => {
                let mut rng = rng::stream(self.cfg.seed, streams::ROI_SAMPLE_BASE + step);
                sample_rois(&s.labels(), k, &mut rng)
            }
            None => (0..s.proposals.len()).collect(),
        };
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let loss = source_loss(&mut g, &b, &self.det, s, &rows, self.cfg.kl_weight)?;
        rec.l_s = finite(g.value(loss.ce).item(), "supervised loss")?;
        rec.l_evi = finite(g.value(loss.evi).item(), "evidential loss")?;
        let grads = g.backward(loss.total)?;
        let grads = b.grads(&grads, &["enc.", "det.", "evi."]);
        self.sup_opt.step(&mut self.params, &grads, lr)?;

        let feats = g.value(loss.forward.roi);
        let ev = uncertainty_and_fg(g.value(loss.forward.evidence));
        let d = self.det.feature_dim;
        for (k, p) in rows.iter().map(|&r| &s.proposals[r]).enumerate() {
            let (u, pf) = ev[k];
            self.bank.push(
                feats.data()[k * d..(k + 1) * d].to_vec(),
                p.points.clone(),
                u,
                pf,
            );
        }
        Ok(())
    }

    fn adapt(&mut self, s: &Sample, t: &Sample, lr: f64, rec: &mut IterRecord) -> Result<()> {
        let (det, discs, img) = (&self.det, &self.discs, &self.img_disc);
        let disc_prefixes: Vec<String> = discs
            .iter()
            .map(|d| format!("{}.", d.prefix))
            .chain([format!("{IMG_PREFIX}.")])
            .collect();
        let disc_prefixes: Vec<&str> = disc_prefixes.iter().map(String::as_str).collect();
        let r = shfa_step(
            &mut self.params,
            &mut self.disc_opt,
            &mut self.adv_opt,
            lr,
            self.cfg.lambda_shfa,
            &disc_prefixes,
            &["enc."],
            |g, b| shfa_loss(g, b, det, discs, img, s, t),
        )?;
        rec.l_shfa = r.loss;
        Ok(())
    }

    fn align(&mut self, t: &Sample, lr: f64, rec: &mut IterRecord) -> Result<()> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let f = forward(&mut g, &b, &self.det, t)?;
        let d = self.det.feature_dim;
        let ev = uncertainty_and_fg(g.value(f.evidence));
        let feats = g.value(f.roi).clone();
        let sets = t
            .proposals
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let inst = TargetInstance {
                    feature: &feats.data()[k * d..(k + 1) * d],
                    points: &p.points,
                    u: ev[k].0,
                    p: ev[k].1,
                };
                build_adjacency(&inst, &self.bank, self.cfg.r, self.cfg.k)
            })
            .collect::<Result<Vec<_>>>()?;
        let part = secure_partition(&sets, self.cfg.gate);
        let loss = l_rsaa(&mut g, f.roi, &sets, &part, &self.bank, self.cfg.margin)?;
        rec.l_rsaa = finite(g.value(loss).item(), "alignment loss")?;
        rec.secure_sets = part.secure.len();
        let grads = g.backward(loss)?;
        let grads = scaled(b.grads(&grads, &["enc.", "det."]), self.cfg.lambda_rsaa);
        self.rsaa_opt.step(&mut self.params, &grads, lr)
    }
}

/// Initial parameters: detector, then per-anchor and image discriminators.
pub fn init_params(cfg: &TrainConfig) -> (ParamSet, Detector, Vec<Discriminator>, Discriminator) {
    let mut rng = rng::stream(cfg.seed, streams::INIT);
    let mut params = ParamSet::new();
    let det = Detector::new(cfg.feature_dim);
    det.init(&mut params, &mut rng);
    let discs: Vec<Discriminator> = (0..cfg.n_a)
        .map(|i| Discriminator::new(ins_prefix(i)))
        .collect();
    for d in &discs {
        d.init(&mut params, cfg.feature_dim, cfg.disc_init_scale, &mut rng);
    }
    let img_disc = Discriminator::new(IMG_PREFIX);
    img_disc.init(&mut params, cfg.feature_dim, cfg.disc_init_scale, &mut rng);
    (params, det, discs, img_disc)
}

pub fn train(cfg: &TrainConfig, data: &RunData) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let (params, det, discs, img_disc) = init_params(cfg);
    let mut tr = Trainer {
        cfg,
        det,
        discs,
        img_disc,
        params,
        sup_opt: Sgd::new(cfg.momentum)?,
        disc_opt: Sgd::new(cfg.momentum)?,
        adv_opt: Sgd::new(cfg.momentum)?,
        rsaa_opt: Sgd::new(cfg.momentum)?,
        bank: FeatureBank::new(cfg.bank_capacity)?,
    };
    let mut src_rng = rng::stream(cfg.seed, streams::SHUFFLE_SOURCE);
    let mut tgt_rng = rng::stream(cfg.seed, streams::SHUFFLE_TARGET);
    let iters = cfg.iters_per_epoch.unwrap_or(data.source.len()).max(1);
    let mut src_order: Vec<usize> = (0..data.source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..data.target.len()).collect();
    let (mut src_pos, mut tgt_pos) = (src_order.len(), tgt_order.len());

    let mut iterations = Vec::with_capacity(iters * cfg.epochs);
    let mut metrics = Vec::new();
    let mut final_eval = None;
    let mut skipped = 0usize;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let first = iterations.len();
        for it in 0..iters {
            if src_pos == src_order.len() {
                src_order.shuffle(&mut src_rng);
                src_pos = 0;
            }
            if tgt_pos == tgt_order.len() {
                tgt_order.shuffle(&mut tgt_rng);
                tgt_pos = 0;
            }
            let s = &data.source.samples[src_order[src_pos]];
            let t = &data.target.samples[tgt_order[tgt_pos]];
            src_pos += 1;
            tgt_pos += 1;
            let mut rec = IterRecord {
                epoch,
                iter: it,
                source: s.id.clone(),
                target: t.id.clone(),
                lr,
                l_s: 0.0,
                l_evi: 0.0,
                l_shfa: 0.0,
                l_rsaa: 0.0,
                secure_sets: 0,
                skipped: None,
            };
            let step_index = iterations.len() as u64;
            // a non-finite later phase rolls back the earlier ones; bank entries
            // pushed by a successful supervised phase stay
            let snapshot = (
                tr.params.clone(),
                tr.sup_opt.clone(),
                tr.disc_opt.clone(),
                tr.adv_opt.clone(),
                tr.rsaa_opt.clone(),
            );
            let mut step = || -> Result<()> {
                tr.supervised(s, step_index, lr, &mut rec)?;
                if cfg.shfa_active() {
                    tr.adapt(s, t, lr, &mut rec)?;
                }
                if cfg.rsaa_active(epoch) {
                    tr.align(t, lr, &mut rec)?;
                }
                Ok(())
            };
            match step() {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    (tr.params, tr.sup_opt, tr.disc_opt, tr.adv_opt, tr.rsaa_opt) = snapshot;
                    log::warn!("epoch {epoch} iteration {it}: skipped, non-finite {what}");
                    rec.skipped = Some(what);
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
            iterations.push(rec);
        }
        let done: Vec<&IterRecord> = iterations[first..]
            .iter()
            .filter(|r| r.skipped.is_none())
            .collect();
        let col = |f: fn(&IterRecord) -> f64| mean(&done.iter().map(|r| f(r)).collect::<Vec<_>>());
        metrics.push(MetricsRow {
            epoch,
            split: "train".into(),
            precision: None,
            recall: None,
            f1: None,
            map: None,
            l_s: col(|r| r.l_s),
            l_evi: col(|r| r.l_evi),
            l_shfa: col(|r| r.l_shfa),
            l_rsaa: col(|r| r.l_rsaa),
            lr,
        });
        if let Some(eval) = &data.eval {
            let m = evaluate(&tr.params, cfg, eval)?;
            log::info!(
                "epoch {epoch}: eval P={:.3} R={:.3} F1={:.3} mAP={:.3}",
                m.precision,
                m.recall,
                m.f1,
                m.map
            );
            metrics.push(MetricsRow {
                epoch,
                split: "eval".into(),
                precision: Some(m.precision),
                recall: Some(m.recall),
                f1: Some(m.f1),
                map: Some(m.map),
                l_s: None,
                l_evi: None,
                l_shfa: None,
                l_rsaa: None,
                lr,
            });
            final_eval = Some(m);
        }
    }
    let total = iterations.len();
    if skipped * 100 > total {
        return Err(Error::Training(format!(
            "{skipped} of {total} iterations skipped"
        )));
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        rng_state: RngState::capture(cfg.seed, &src_rng),
        config: cfg.clone(),
        params: tr.params,
        bank: tr.bank,
    };
    Ok(TrainOutput {
        checkpoint,
        anchors: data.anchors.clone(),
        iterations,
        metrics,
        final_eval,
    })
}

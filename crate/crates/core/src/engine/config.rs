use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsaa::Gate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub box_size: f64,
    /// Maxima of the smoothed image used as box centers.
    pub peaks: usize,
    pub random_boxes: usize,
    pub smooth_sigma: f64,
    pub dedup_iou: f64,
    /// Proposals at or above this IoU with a ground-truth box are foreground.
    pub fg_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            box_size: 24.0,
            peaks: 20,
            random_boxes: 10,
            smooth_sigma: 3.0,
            dedup_iou: 0.9,
            fg_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    /// Epochs run at `lr` before switching to `lr_decayed`.
    pub lr_decay_after: usize,
    pub momentum: f64,
    pub lambda_shfa: f64,
    pub lambda_rsaa: f64,
    pub gate: Gate,
    /// Reliability scaling `k`.
    pub k: f64,
    pub n_a: usize,
    pub r: usize,
    pub delta: f64,
    pub margin: f64,
    pub kl_weight: f64,
    pub feature_dim: usize,
    /// Discriminator weights start uniform in `±disc_init_scale/sqrt(fan_in)`.
    pub disc_init_scale: f64,
    pub bank_capacity: usize,
    /// Source ground-truth ROIs sampled for anchor clustering.
    pub anchor_pool: usize,
    /// Skip every adaptation step (the no-adaptation baseline).
    pub source_only: bool,
    /// Iterations per epoch; defaults to the number of source images.
    pub iters_per_epoch: Option<usize>,
    /// Background proposals sampled per foreground one for the supervised
    /// losses; `None` uses every proposal.
    pub roi_bg_per_fg: Option<usize>,
    pub proposals: ProposalConfig,
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            lr: 0.002,
            lr_decayed: 0.001,
            lr_decay_after: 5,
            momentum: 0.9,
            lambda_shfa: 0.5,
            lambda_rsaa: 0.5,
            gate: Gate::Secure { lambda_se: -1.0 },
            k: 30.0,
            n_a: 5,
            r: 5,
            delta: 0.1,
            margin: 0.2,
            kl_weight: 1.0,
            feature_dim: 32,
            disc_init_scale: 8.0,
            bank_capacity: crate::rsaa::DEFAULT_CAPACITY,
            anchor_pool: 150,
            source_only: false,
            iters_per_epoch: None,
            roi_bg_per_fg: Some(3),
            proposals: ProposalConfig::default(),
            nms_iou: 0.3,
            score_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn baseline() -> Self {
        Self {
            source_only: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        let lambdas = [self.lambda_shfa, self.lambda_rsaa];
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("lambda weights must be finite"));
        }
        if let Gate::Secure { lambda_se } = self.gate {
            if lambda_se.is_nan() {
                return Err(Error::invalid("lambda_se must not be NaN"));
            }
        }
        if !(self.lr > 0.0) || !(self.lr_decayed > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.k > 0.0) {
            return Err(Error::invalid("k must be positive"));
        }
        if self.n_a == 0 || self.r == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("n_a, r and feature_dim must be positive"));
        }
        if !(self.delta >= 0.0) || self.delta > 1.0 / self.n_a as f64 {
            return Err(Error::invalid(format!(
                "delta must lie in [0, 1/n_a], got {}",
                self.delta
            )));
        }
        if !(self.disc_init_scale > 0.0) || !self.disc_init_scale.is_finite() {
            return Err(Error::invalid("disc_init_scale must be positive"));
        }
        if self.roi_bg_per_fg == Some(0) {
            return Err(Error::invalid("roi_bg_per_fg must be positive"));
        }
        if self.bank_capacity < self.r {
            return Err(Error::invalid("bank capacity must be at least r"));
        }
        if !(self.proposals.box_size >= 2.0) {
            return Err(Error::invalid("proposal box size must be at least 2"));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_after {
            self.lr_decayed
        } else {
            self.lr
        }
    }

    /// Whether the adversarial phase runs. A zero weight skips it; running it
    /// would leave every parameter unchanged anyway.
    pub fn shfa_active(&self) -> bool {
        !self.source_only && self.lambda_shfa != 0.0
    }

    /// Whether the alignment phase runs in 1-based `epoch`.
    pub fn rsaa_active(&self, epoch: usize) -> bool {
        !self.source_only && self.lambda_rsaa != 0.0 && 2 * epoch > self.epochs
    }
}

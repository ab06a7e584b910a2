//! Recurrent mixture-density network.
//!
//! A stack of LSTM layers feeds a bivariate Gaussian mixture head (plus an
//! optional Bernoulli pen output). Everything runs in `f64` on the CPU with
//! hand-written reverse-mode gradients; parameters live in one flat vector
//! described by a named manifest.

mod checkpoint;
mod lstm;
mod mdn;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    FeatureStats, ModelCheckpoint, ModelKind, NormStats, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use lstm::{Forward, LstmState, Mode, Network, StepCache};
pub use mdn::{bivariate_pdf, log_bivariate, nll_loss, output_dim, sample_gmm, transform, GmmStepParams, StepTarget};
pub use train::{
    adam_step, clip_gradients, evaluate, global_norm, make_segments, train, train_with_progress, AdamState,
    Sequence, TrainOptions, TrainReport,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub num_gaussians: usize,
    /// Probability of keeping a unit on non-recurrent connections.
    pub dropout_keep: f64,
    pub peepholes: bool,
    /// Adds a Bernoulli end-of-stroke output.
    pub pen_head: bool,
    /// Truncated BPTT segment length.
    pub seq_len: usize,
    /// Fraction of each segment shared with the next.
    pub overlap: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 5,
            layers: 2,
            hidden_dim: 400,
            num_gaussians: 20,
            dropout_keep: 0.9,
            peepholes: false,
            pen_head: false,
            seq_len: 15,
            overlap: 0.5,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn output_dim(&self) -> usize {
        output_dim(self.num_gaussians, self.pen_head)
    }

    /// Structural checks. Sizes outside the usual search ranges (see
    /// [`NetworkConfig::in_search_range`]) are allowed, e.g. for tiny test
    /// networks.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_gaussians == 0 {
            return bad("network dimensions must be non-zero");
        }
        if !(1..=3).contains(&self.layers) {
            return bad("layers must be 1, 2 or 3");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep must lie in (0, 1]");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }

    /// Whether the configuration lies in the hyperparameter ranges searched
    /// for handwriting models: 1–3 layers of 64–1024 units, 5–20 Gaussians,
    /// keep probability 0.5–0.95.
    pub fn in_search_range(&self) -> bool {
        (1..=3).contains(&self.layers)
            && (64..=1024).contains(&self.hidden_dim)
            && (5..=20).contains(&self.num_gaussians)
            && (0.5..=0.95).contains(&self.dropout_keep)
    }

    /// Named blocks of the flat parameter vector.
    pub fn manifest(&self) -> Vec<ParamBlock> {
        let h = self.hidden_dim;
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            blocks.push(ParamBlock {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim } else { h };
            push(format!("lstm{l}.w_in"), 4 * h, input);
            push(format!("lstm{l}.w_rec"), 4 * h, h);
            push(format!("lstm{l}.bias"), 4 * h, 1);
            if self.peepholes {
                push(format!("lstm{l}.peep"), 3 * h, 1);
            }
        }
        push("out.w".into(), self.output_dim(), h);
        push("out.bias".into(), self.output_dim(), 1);
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.manifest().iter().map(|b| b.rows * b.cols).sum()
    }
}

/// A row-major matrix stored inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

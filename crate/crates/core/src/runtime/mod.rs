//! Deployment path: batch-norm folding, frame-by-frame causal inference
//! that skips inactive filters, MAC accounting and static pruning.

mod macs;
mod offline;
mod prune;
mod stream;

pub use macs::{count_macs_analytic, count_macs_runtime, BlockMacReport, GatingAssumption, MacCounter, MacReport};
pub use offline::{enhance_offline, magnitude_input};
pub use prune::{static_prune, ChannelActivity, PruneOptions, PruneReport};
pub use stream::{process_frame, process_magnitudes, stream_waveform, FrameOutput, StreamRun, StreamState, Streamer};

use crate::error::{Error, Result};
use crate::gating::PoolingMode;
use crate::model::{ModelWeights, BN_EPS};
use crate::tensor::Real;

/// Eval-mode batch norm `gamma * (x - mean) * inv_std + beta`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EvalNorm<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> EvalNorm<T> {
    fn scale_shift(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self.gamma.iter().zip(&self.inv_std).map(|(&g, &s)| g * s).collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((&b, &m), &a)| b - m * a)
            .collect();
        (scale, shift)
    }
}

/// Per-block arrays used by the frame runtime.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockKernel<T> {
    pub bn1: Option<EvalNorm<T>>,
    pub ddw_weight: Vec<T>,
    pub ddw_bias: Vec<T>,
    /// Folded `bn1` shift per tap, added only for taps inside the signal.
    pub tap_shift: Option<Vec<T>>,
    pub bn2: Option<EvalNorm<T>>,
    pub pw2_weight: Vec<T>,
    pub pw2_bias: Vec<T>,
}

/// Immutable inference weights, shareable across streams.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel<T> {
    weights: ModelWeights<T>,
    pub(crate) kernels: Vec<BlockKernel<T>>,
    pooling: PoolingMode,
    folded: bool,
}

impl<T: Real> InferenceModel<T> {
    /// Wraps eval-mode weights. Running statistics must be finite with
    /// non-negative variance.
    pub fn new(weights: ModelWeights<T>) -> Result<Self> {
        weights.validate()?;
        if weights.stats.iter().any(|s| !s.bn1.is_valid() || !s.bn2.is_valid()) {
            return Err(Error::State("batch-norm running statistics are missing or invalid".into()));
        }
        let eps = T::lit(BN_EPS);
        let norm = |stats: &crate::model::RunningStats<T>, n: &crate::model::Norm<crate::tensor::Tensor<T>>| EvalNorm {
            mean: stats.mean.data().to_vec(),
            inv_std: stats.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            gamma: n.gamma.data().to_vec(),
            beta: n.beta.data().to_vec(),
        };
        let kernels = weights
            .params
            .blocks
            .iter()
            .zip(&weights.stats)
            .map(|(b, s)| BlockKernel {
                bn1: Some(norm(&s.bn1, &b.bn1)),
                ddw_weight: b.ddw.weight.data().to_vec(),
                ddw_bias: b.ddw.bias.data().to_vec(),
                tap_shift: None,
                bn2: Some(norm(&s.bn2, &b.bn2)),
                pw2_weight: b.pw2.weight.data().to_vec(),
                pw2_bias: b.pw2.bias.data().to_vec(),
            })
            .collect();
        let pooling = weights.config.streaming_pooling();
        Ok(Self {
            weights,
            kernels,
            pooling,
            folded: false,
        })
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn pooling(&self) -> PoolingMode {
        self.pooling
    }

    /// Frame-recursive pooling only.
    pub fn with_pooling(mut self, pooling: PoolingMode) -> Result<Self> {
        pooling.validate()?;
        if !matches!(pooling, PoolingMode::Iir { .. }) {
            return Err(Error::Config("frame streaming needs recursive (IIR) pooling".into()));
        }
        self.pooling = pooling;
        Ok(self)
    }

    /// Merges `bn2` into the following point-wise convolution and `bn1` into
    /// the depth-wise convolution. The `bn1` shift becomes a per-tap term so
    /// that zero padding at the sequence start stays exact.
    pub fn fold_batchnorm(mut self) -> Result<Self> {
        if self.folded {
            return Err(Error::State("batch norm is already folded".into()));
        }
        let k = self.weights.config.kernel_size;
        let c_conv = self.weights.config.c_conv;
        for kern in &mut self.kernels {
            let bn1 = kern.bn1.take().ok_or_else(|| Error::State("bn1 missing".into()))?;
            let (a1, b1) = bn1.scale_shift();
            let mut shift = vec![T::zero(); c_conv * k];
            for c in 0..c_conv {
                for j in 0..k {
                    let w = kern.ddw_weight[c * k + j];
                    shift[c * k + j] = b1[c] * w;
                    kern.ddw_weight[c * k + j] = w * a1[c];
                }
            }
            kern.tap_shift = Some(shift);

            let bn2 = kern.bn2.take().ok_or_else(|| Error::State("bn2 missing".into()))?;
            let (a2, b2) = bn2.scale_shift();
            let c_res = kern.pw2_bias.len();
            for o in 0..c_res {
                let mut bias = kern.pw2_bias[o];
                for c in 0..c_conv {
                    let w = kern.pw2_weight[o * c_conv + c];
                    bias = bias + w * b2[c];
                    kern.pw2_weight[o * c_conv + c] = w * a2[c];
                }
                kern.pw2_bias[o] = bias;
            }
        }
        self.folded = true;
        Ok(self)
    }
}

//! Conv-FSENet: point-wise front end, TCN stacks of residual depth-wise
//! separable blocks (optionally gated), and a sigmoid mask back end.

mod forward;
mod infer;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{ChannelRole, GatingWeights, PoolingMode};
use crate::tensor::{Real, Tensor};

pub use forward::{forward_on_tape, forward_train, ForwardOptions, ForwardPass, Phase};
pub use infer::{forward_infer_offline, InferOptions, InferOutput};
pub use params::{Block, Conv, Gate, Norm, Params};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub c_res: usize,
    pub c_conv: usize,
    pub c_gate: usize,
    pub kernel_size: usize,
    pub blocks_per_stack: usize,
    pub stacks: usize,
    pub freq_bins: usize,
    pub causal: bool,
    pub gating_enabled: bool,
    /// Boxcar pooling length in frames; `None` means the receptive field.
    pub pool_frames: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_res: 128,
            c_conv: 256,
            c_gate: 16,
            kernel_size: 3,
            blocks_per_stack: 3,
            stacks: 3,
            freq_bins: 257,
            causal: false,
            gating_enabled: false,
            pool_frames: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("c_res", self.c_res),
            ("c_conv", self.c_conv),
            ("c_gate", self.c_gate),
            ("kernel_size", self.kernel_size),
            ("blocks_per_stack", self.blocks_per_stack),
            ("stacks", self.stacks),
            ("freq_bins", self.freq_bins),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.blocks_per_stack > 16 {
            return Err(Error::Config("blocks_per_stack above 16 overflows dilation".into()));
        }
        if self.pool_frames == Some(0) {
            return Err(Error::Config("pool_frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Total number of blocks `I = N_s * N_b`.
    pub fn total_blocks(&self) -> usize {
        self.stacks * self.blocks_per_stack
    }

    /// Dilation of block `i`: doubles along a stack, restarting at 1.
    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.blocks_per_stack)
    }

    pub fn pool_window(&self) -> usize {
        self.pool_frames.unwrap_or_else(|| receptive_field(self))
    }

    /// Training-time pooling.
    pub fn training_pooling(&self) -> PoolingMode {
        PoolingMode::Boxcar {
            window: self.pool_window(),
        }
    }

    /// Frame-streaming pooling approximating [`Self::training_pooling`].
    pub fn streaming_pooling(&self) -> PoolingMode {
        self.training_pooling().to_iir()
    }
}

/// Frames of input that can influence one output frame:
/// `N_s * (k - 1) * (2^N_b - 1) + 1`.
pub fn receptive_field(cfg: &ModelConfig) -> usize {
    cfg.stacks * (cfg.kernel_size - 1) * ((1usize << cfg.blocks_per_stack) - 1) + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn identity(c: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[c]),
            var: Tensor::ones(&[c]),
        }
    }

    /// Exponential update from batch statistics (`var` biased, `count`
    /// elements per channel); the running variance uses the unbiased estimate.
    pub fn update(&mut self, mean: &[T], var: &[T], count: usize) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if count > 1 {
            T::lit(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b * unbias;
        }
    }

    pub fn is_valid(&self) -> bool {
        self.mean.all_finite() && self.var.data().iter().all(|v| v.is_finite() && *v >= T::zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockStats<T> {
    pub bn1: RunningStats<T>,
    pub bn2: RunningStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub params: Params<Tensor<T>>,
    pub stats: Vec<BlockStats<T>>,
    /// Per-block channel roles set by static pruning; `None` means every
    /// channel is dynamic.
    pub roles: Option<Vec<Vec<ChannelRole>>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.map(|t| t.cast()),
            stats: self
                .stats
                .iter()
                .map(|s| BlockStats {
                    bn1: RunningStats { mean: s.bn1.mean.cast(), var: s.bn1.var.cast() },
                    bn2: RunningStats { mean: s.bn2.mean.cast(), var: s.bn2.var.cast() },
                })
                .collect(),
            roles: self.roles.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.leaves().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor against the shapes implied by the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = init_weights::<T>(&self.config, 0)?;
        let mut expected = Vec::new();
        reference.params.visit(|name, t| expected.push((name, t.shape().to_vec())));
        let mut actual = Vec::new();
        self.params.visit(|name, t| actual.push((name, t.shape().to_vec())));
        if expected != actual {
            let diff = expected
                .iter()
                .zip(&actual)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} tensors vs {}", expected.len(), actual.len()));
            return Err(Error::Shape(format!("weights do not match config: {diff}")));
        }
        if self.stats.len() != self.config.total_blocks() {
            return Err(Error::Shape("running statistics per block".into()));
        }
        if let Some(roles) = &self.roles {
            if roles.len() != self.config.total_blocks() || roles.iter().any(|r| r.len() != self.config.c_res) {
                return Err(Error::Shape("channel roles per block".into()));
            }
        }
        Ok(())
    }

    /// Adds freshly initialized gating subnets to baseline weights.
    pub fn with_gating(&self, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.gating_enabled = true;
        let mut out = self.clone();
        out.config = config;
        out.roles = None;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.params.gates = (0..out.config.total_blocks())
            .map(|_| init_gate(&out.config, &mut rng))
            .collect();
        Ok(out)
    }
}

fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

fn init_conv<T: Real>(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl Rng) -> Conv<Tensor<T>> {
    Conv {
        weight: kaiming_uniform(&[out_ch, in_ch, k], in_ch * k, rng),
        bias: Tensor::zeros(&[out_ch]),
    }
}

fn init_gate<T: Real>(cfg: &ModelConfig, rng: &mut impl Rng) -> GatingWeights<T> {
    Gate {
        pw_a: init_conv(cfg.c_gate, cfg.c_res, 1, rng),
        pw_b: init_conv(cfg.c_res, cfg.c_gate, 1, rng),
    }
}

/// Deterministic initialization: Kaiming-uniform conv weights, zero biases,
/// PReLU slopes of 0.25, identity batch norm.
pub fn init_weights<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let front = init_conv(cfg.c_res, cfg.freq_bins, 1, &mut rng);
    let blocks = (0..cfg.total_blocks())
        .map(|_| Block {
            pw1: init_conv(cfg.c_conv, cfg.c_res, 1, &mut rng),
            prelu1: Tensor::full(&[cfg.c_conv], T::lit(PRELU_INIT)),
            bn1: Norm { gamma: Tensor::ones(&[cfg.c_conv]), beta: Tensor::zeros(&[cfg.c_conv]) },
            ddw: init_conv(cfg.c_conv, 1, cfg.kernel_size, &mut rng),
            prelu2: Tensor::full(&[cfg.c_conv], T::lit(PRELU_INIT)),
            bn2: Norm { gamma: Tensor::ones(&[cfg.c_conv]), beta: Tensor::zeros(&[cfg.c_conv]) },
            pw2: init_conv(cfg.c_res, cfg.c_conv, 1, &mut rng),
        })
        .collect();
    let back = init_conv(cfg.freq_bins, cfg.c_res, 1, &mut rng);
    let gates = if cfg.gating_enabled {
        (0..cfg.total_blocks()).map(|_| init_gate(cfg, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let stats = (0..cfg.total_blocks())
        .map(|_| BlockStats {
            bn1: RunningStats::identity(cfg.c_conv),
            bn2: RunningStats::identity(cfg.c_conv),
        })
        .collect();
    Ok(ModelWeights {
        config: cfg.clone(),
        params: Params { front, blocks, gates, back },
        stats,
        roles: None,
    })
}

use rand::RngCore;

use super::{ModelWeights, Params, BN_EPS};
use crate::error::{Error, Result};
use crate::gating::{self, BinarizationMode, GateMask, PoolingMode};
use crate::tensor::kernels::BatchStats;
use crate::tensor::{ConvPadding, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, surrogate/stochastic gates.
    Train,
    /// Running statistics, hard gates.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub phase: Phase,
    pub binarization: BinarizationMode,
    pub pooling: PoolingMode,
    /// Replaces the computed gates (one entry per block). Applied even when
    /// gating is disabled in the config.
    pub forced_gates: Option<&'a GateMask>,
}

impl<'a> ForwardOptions<'a> {
    pub fn train(weights_cfg: &super::ModelConfig, binarization: BinarizationMode) -> Self {
        Self {
            phase: Phase::Train,
            binarization,
            pooling: weights_cfg.training_pooling(),
            forced_gates: None,
        }
    }

    pub fn eval(weights_cfg: &super::ModelConfig) -> Self {
        Self {
            phase: Phase::Eval,
            binarization: BinarizationMode::Heaviside,
            pooling: weights_cfg.training_pooling(),
            forced_gates: None,
        }
    }
}

/// Handles produced by one forward pass over the tape.
pub struct ForwardPass<T> {
    /// `[N, F, L]` mask in (0, 1).
    pub mask: Var,
    /// Per-block `[N, C_res, L]` gates; empty without gating.
    pub gates: Vec<Var>,
    /// Per-block raw scores (absent for forced gates).
    pub scores: Vec<Var>,
    /// Batch statistics of `(bn1, bn2)` per block, training phase only.
    pub bn_batch_stats: Vec<(BatchStats<T>, BatchStats<T>)>,
}

/// Records the network on `tape`. `vars` must be the tape leaves of
/// `weights.params`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    vars: &Params<Var>,
    weights: &ModelWeights<T>,
    input: Var,
    opts: &ForwardOptions<'_>,
    rng: &mut dyn RngCore,
) -> Result<ForwardPass<T>> {
    let cfg = &weights.config;
    let (n, f, l) = tape.value(input).dims3()?;
    if f != cfg.freq_bins {
        return Err(Error::Shape(format!("input has {f} bins, model expects {}", cfg.freq_bins)));
    }
    if vars.blocks.len() != cfg.total_blocks() {
        return Err(Error::Shape("parameter handles do not match config".into()));
    }
    let gated = cfg.gating_enabled || opts.forced_gates.is_some();
    if cfg.gating_enabled && opts.forced_gates.is_none() && vars.gates.len() != cfg.total_blocks() {
        return Err(Error::Shape("gating enabled but gating weights missing".into()));
    }
    if let Some(g) = opts.forced_gates {
        if (g.batch, g.channels, g.frames, g.blocks) != (n, cfg.c_res, l, cfg.total_blocks()) {
            return Err(Error::Shape("forced gate mask shape".into()));
        }
    }
    opts.pooling.validate()?;
    let training = opts.phase == Phase::Train;
    if training && matches!(opts.pooling, PoolingMode::Iir { .. }) && cfg.gating_enabled {
        return Err(Error::Config("recursive pooling is inference-only".into()));
    }
    let padding = ConvPadding::from_causal(cfg.causal);
    let eps = T::lit(BN_EPS);

    let mut h = tape.pointwise_conv(input, vars.front.weight, vars.front.bias)?;
    h = tape.relu(h);

    let mut gates = Vec::new();
    let mut scores = Vec::new();
    let mut bn_batch_stats = Vec::new();
    for (i, bv) in vars.blocks.iter().enumerate() {
        let x = h;
        let mut r = tape.pointwise_conv(x, bv.pw1.weight, bv.pw1.bias)?;
        r = tape.prelu(r, bv.prelu1)?;
        let (r1, s1) = normalize(tape, r, &bv.bn1, &weights.stats[i].bn1, training, eps)?;
        r = tape.depthwise_conv(r1, bv.ddw.weight, bv.ddw.bias, cfg.dilation(i), padding)?;
        r = tape.prelu(r, bv.prelu2)?;
        let (r2, s2) = normalize(tape, r, &bv.bn2, &weights.stats[i].bn2, training, eps)?;
        r = tape.pointwise_conv(r2, bv.pw2.weight, bv.pw2.bias)?;
        if let (Some(a), Some(b)) = (s1, s2) {
            bn_batch_stats.push((a, b));
        }

        if gated {
            let g = match opts.forced_gates {
                Some(mask) => tape.constant(mask.block_tensor(i)),
                None => {
                    let pooled = match opts.pooling {
                        PoolingMode::Boxcar { window } => tape.moving_average(x, window)?,
                        PoolingMode::Iir { beta } => {
                            let p = gating::pool_iir_sequence(tape.value(x), beta)?;
                            tape.constant(p)
                        }
                    };
                    let s = gating::gate_scores_on_tape(tape, &vars.gates[i], pooled)?;
                    scores.push(s);
                    gating::binarize_on_tape(tape, s, opts.binarization, training, rng)?
                }
            };
            gates.push(g);
            r = tape.mul(r, g)?;
        }
        h = tape.add(x, r)?;

        let last_in_stack = (i + 1) % cfg.blocks_per_stack == 0;
        if last_in_stack && i + 1 < cfg.total_blocks() {
            h = tape.relu(h);
        }
    }

    let logits = tape.pointwise_conv(h, vars.back.weight, vars.back.bias)?;
    let mask = tape.sigmoid(logits);
    Ok(ForwardPass {
        mask,
        gates,
        scores,
        bn_batch_stats,
    })
}

#[allow(clippy::type_complexity)]
fn normalize<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    norm: &super::Norm<Var>,
    stats: &super::RunningStats<T>,
    training: bool,
    eps: T,
) -> Result<(Var, Option<BatchStats<T>>)> {
    if training {
        let (y, s) = tape.batch_norm_train(x, norm.gamma, norm.beta, eps)?;
        Ok((y, Some(s)))
    } else {
        let y = tape.batch_norm_eval(x, norm.gamma, norm.beta, stats.mean.data(), stats.var.data(), eps)?;
        Ok((y, None))
    }
}

/// One-shot forward returning the mask `[N, F, L]` and the gate tensor
/// `[N, C_res, L, I]` (absent without gating). Running statistics are not
/// updated.
pub fn forward_train<T: Real>(
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    opts: &ForwardOptions<'_>,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Option<GateMask>)> {
    let mut tape = Tape::new();
    let vars = weights.params.map(|t| tape.leaf(t.clone()));
    let x = tape.constant(input.clone());
    let pass = forward_on_tape(&mut tape, &vars, weights, x, opts, rng)?;
    let gates = if pass.gates.is_empty() {
        None
    } else {
        let blocks: Vec<&Tensor<T>> = pass.gates.iter().map(|g| tape.value(*g)).collect();
        Some(GateMask::from_blocks(&blocks)?)
    };
    Ok((tape.value(pass.mask).clone(), gates))
}

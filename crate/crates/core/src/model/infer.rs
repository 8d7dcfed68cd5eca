use super::{ModelWeights, BN_EPS};
use crate::error::{Error, Result};
use crate::gating::{self, GateMask, PoolingMode};
use crate::tensor::kernels;
use crate::tensor::{ConvPadding, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct InferOptions<'a> {
    pub pooling: PoolingMode,
    pub forced_gates: Option<&'a GateMask>,
}

#[derive(Clone, Debug)]
pub struct InferOutput<T> {
    pub mask: Tensor<T>,
    /// Hard gates actually used; `None` for an ungated model.
    pub gates: Option<GateMask>,
    /// Number of `pw2` rows evaluated per block, summed over batch and frames.
    pub pw2_rows: Vec<u64>,
}

/// Eval-mode forward that evaluates only the active rows of each block's
/// last point-wise convolution; inactive channels keep the block input.
/// Channel roles, when present, override computed gates.
pub fn forward_infer_offline<T: Real>(
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    opts: &InferOptions<'_>,
) -> Result<InferOutput<T>> {
    let cfg = &weights.config;
    let (n, f, l) = input.dims3()?;
    if f != cfg.freq_bins {
        return Err(Error::Shape(format!("input has {f} bins, model expects {}", cfg.freq_bins)));
    }
    if let Some(g) = opts.forced_gates {
        if (g.batch, g.channels, g.frames, g.blocks) != (n, cfg.c_res, l, cfg.total_blocks()) {
            return Err(Error::Shape("forced gate mask shape".into()));
        }
    }
    if cfg.gating_enabled && opts.forced_gates.is_none() && weights.params.gates.len() != cfg.total_blocks() {
        return Err(Error::Shape("gating enabled but gating weights missing".into()));
    }
    opts.pooling.validate()?;
    let gated = cfg.gating_enabled || opts.forced_gates.is_some();
    let p = &weights.params;
    let (c_res, c_conv) = (cfg.c_res, cfg.c_conv);
    let padding = ConvPadding::from_causal(cfg.causal);
    let eps = T::lit(BN_EPS);

    let mut h = kernels::pointwise_conv(input.data(), (n, f, l), p.front.weight.data(), p.front.bias.data(), c_res);
    h.iter_mut().for_each(|v| *v = v.max(T::zero()));

    let mut used = gated.then(|| GateMask::filled(n, c_res, l, cfg.total_blocks(), true));
    let mut pw2_rows = vec![0u64; cfg.total_blocks()];
    for (i, b) in p.blocks.iter().enumerate() {
        let dims = (n, c_conv, l);
        let mut r = kernels::pointwise_conv(&h, (n, c_res, l), b.pw1.weight.data(), b.pw1.bias.data(), c_conv);
        r = kernels::prelu(&r, dims, b.prelu1.data());
        r = eval_norm(&r, dims, &weights.stats[i].bn1, b.bn1.gamma.data(), b.bn1.beta.data(), eps);
        let k = cfg.kernel_size;
        let d = cfg.dilation(i);
        r = kernels::depthwise_conv(&r, dims, b.ddw.weight.data(), b.ddw.bias.data(), k, d, padding.left(k, d));
        r = kernels::prelu(&r, dims, b.prelu2.data());
        let z = eval_norm(&r, dims, &weights.stats[i].bn2, b.bn2.gamma.data(), b.bn2.beta.data(), eps);

        let block_gates: Option<Vec<bool>> = if !gated {
            None
        } else if let Some(forced) = opts.forced_gates {
            Some(forced.block_tensor::<f32>(i).data().iter().map(|&v| v >= 0.5).collect())
        } else {
            let x = Tensor::new(&[n, c_res, l], h.clone())?;
            let pooled = gating::pool(&x, opts.pooling)?;
            let s = gating::gate_scores(&p.gates[i], &pooled)?;
            let mut g = gating::binarize(s.data());
            if let Some(roles) = &weights.roles {
                for (idx, v) in g.iter_mut().enumerate() {
                    let role = roles[i][(idx / l) % c_res];
                    *v = role.resolve(|| *v);
                }
            }
            Some(g)
        };

        let w2 = b.pw2.weight.data();
        let b2 = b.pw2.bias.data();
        for ni in 0..n {
            for o in 0..c_res {
                for t in 0..l {
                    let idx = (ni * c_res + o) * l + t;
                    if let Some(g) = &block_gates {
                        if !g[idx] {
                            if let Some(u) = used.as_mut() {
                                u.set(ni, o, t, i, false);
                            }
                            continue;
                        }
                    }
                    let mut acc = b2[o];
                    for (ci, &w) in w2[o * c_conv..(o + 1) * c_conv].iter().enumerate() {
                        acc = acc + w * z[(ni * c_conv + ci) * l + t];
                    }
                    h[idx] = h[idx] + acc;
                    pw2_rows[i] += 1;
                }
            }
        }

        let last_in_stack = (i + 1) % cfg.blocks_per_stack == 0;
        if last_in_stack && i + 1 < cfg.total_blocks() {
            h.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
    }

    let logits = kernels::pointwise_conv(&h, (n, c_res, l), p.back.weight.data(), p.back.bias.data(), f);
    let mask = Tensor::new(&[n, f, l], logits.into_iter().map(kernels::sigmoid).collect())?;
    Ok(InferOutput {
        mask,
        gates: used,
        pw2_rows,
    })
}

fn eval_norm<T: Real>(
    x: &[T],
    dims: (usize, usize, usize),
    stats: &super::RunningStats<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Vec<T> {
    let inv_std: Vec<T> = stats.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    kernels::normalize(x, dims, stats.mean.data(), &inv_std, gamma, beta).0
}

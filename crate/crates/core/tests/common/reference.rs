//! Straightforward f64 re-implementation of the network, written from the
//! architecture description with plain index loops. Used as an oracle for
//! the tape forward, the offline runtime and finite differences.

use dyncp::gating::GateMask;
use dyncp::model::{ModelWeights, BN_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How block gates are produced from raw scores.
pub enum GateRule<'a> {
    /// Hard step, `H(0) = 1`.
    Hard,
    /// `H(s0) + phi(s) - phi(s0)`: equals the hard gate at `s = s0` and has
    /// derivative `phi'(s)`.
    Twin { base: &'a [Vec<f64>], phi: fn(f64) -> f64 },
    /// Relaxed Binary Concrete sample with uniforms drawn in tape order.
    Concrete { lambda: f64, rng: ChaCha8Rng },
    Forced(&'a GateMask),
}

pub struct RefOutput {
    pub mask: Vec<f64>,
    /// Per block, `[N, C_res, L]`.
    pub gates: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

struct Dims {
    n: usize,
    l: usize,
}

fn at(d: &Dims, c: usize, ni: usize, ch: usize, t: usize) -> usize {
    (ni * c + ch) * d.l + t
}

fn pointwise(d: &Dims, x: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; d.n * cout * d.l];
    for ni in 0..d.n {
        for o in 0..cout {
            for t in 0..d.l {
                let mut acc = b[o];
                for i in 0..cin {
                    acc += w[o * cin + i] * x[at(d, cin, ni, i, t)];
                }
                y[at(d, cout, ni, o, t)] = acc;
            }
        }
    }
    y
}

fn prelu(d: &Dims, x: &mut [f64], c: usize, a: &[f64]) {
    for ni in 0..d.n {
        for ch in 0..c {
            for t in 0..d.l {
                let v = &mut x[at(d, c, ni, ch, t)];
                if *v < 0.0 {
                    *v *= a[ch];
                }
            }
        }
    }
}

fn batch_norm(d: &Dims, x: &mut [f64], c: usize, gamma: &[f64], beta: &[f64], running: Option<(&[f64], &[f64])>) {
    for ch in 0..c {
        let (mean, var) = match running {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let vals: Vec<f64> = (0..d.n)
                    .flat_map(|ni| (0..d.l).map(move |t| (ni, t)))
                    .map(|(ni, t)| x[at(d, c, ni, ch, t)])
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / vals.len() as f64;
                (m, v)
            }
        };
        for ni in 0..d.n {
            for t in 0..d.l {
                let v = &mut x[at(d, c, ni, ch, t)];
                *v = gamma[ch] * (*v - mean) / (var + BN_EPS).sqrt() + beta[ch];
            }
        }
    }
}

fn dilated(d: &Dims, x: &[f64], c: usize, w: &[f64], b: &[f64], k: usize, dil: usize, causal: bool) -> Vec<f64> {
    let span = (k - 1) * dil;
    // Output frame t sees inputs t - left + j*dil.
    let left = if causal { span } else { span.div_ceil(2) } as isize;
    let mut y = vec![0.0; x.len()];
    for ni in 0..d.n {
        for ch in 0..c {
            for t in 0..d.l {
                let mut acc = b[ch];
                for j in 0..k {
                    let src = t as isize - left + (j * dil) as isize;
                    if (0..d.l as isize).contains(&src) {
                        acc += w[ch * k + j] * x[at(d, c, ni, ch, src as usize)];
                    }
                }
                y[at(d, c, ni, ch, t)] = acc;
            }
        }
    }
    y
}

fn trailing_mean(d: &Dims, x: &[f64], c: usize, window: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for ni in 0..d.n {
        for ch in 0..c {
            for t in 0..d.l {
                let lo = (t + 1).saturating_sub(window);
                let s: f64 = (lo..=t).map(|u| x[at(d, c, ni, ch, u)]).sum();
                y[at(d, c, ni, ch, t)] = s / (t + 1 - lo) as f64;
            }
        }
    }
    y
}

/// Runs the network on `input` (`[N, F, L]`). `train` selects batch
/// statistics over running statistics.
pub fn reference_forward(w: &ModelWeights<f64>, input: &[f64], n: usize, l: usize, train: bool, mut rule: GateRule<'_>) -> RefOutput {
    let cfg = &w.config;
    let d = Dims { n, l };
    let (f, cr, cc, cg, k) = (cfg.freq_bins, cfg.c_res, cfg.c_conv, cfg.c_gate, cfg.kernel_size);
    let p = &w.params;
    let mut h = pointwise(&d, input, f, p.front.weight.data(), p.front.bias.data(), cr);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut gates = Vec::new();
    let mut scores = Vec::new();
    let gated = cfg.gating_enabled || matches!(rule, GateRule::Forced(_));
    for (i, b) in p.blocks.iter().enumerate() {
        let mut r = pointwise(&d, &h, cr, b.pw1.weight.data(), b.pw1.bias.data(), cc);
        prelu(&d, &mut r, cc, b.prelu1.data());
        let run1 = (!train).then(|| (w.stats[i].bn1.mean.data(), w.stats[i].bn1.var.data()));
        batch_norm(&d, &mut r, cc, b.bn1.gamma.data(), b.bn1.beta.data(), run1);
        let dil = 1 << (i % cfg.blocks_per_stack);
        let mut r = dilated(&d, &r, cc, b.ddw.weight.data(), b.ddw.bias.data(), k, dil, cfg.causal);
        prelu(&d, &mut r, cc, b.prelu2.data());
        let run2 = (!train).then(|| (w.stats[i].bn2.mean.data(), w.stats[i].bn2.var.data()));
        batch_norm(&d, &mut r, cc, b.bn2.gamma.data(), b.bn2.beta.data(), run2);
        let mut r = pointwise(&d, &r, cc, b.pw2.weight.data(), b.pw2.bias.data(), cr);

        if gated {
            let g: Vec<f64> = if let GateRule::Forced(m) = &rule {
                (0..n * cr * l)
                    .map(|idx| {
                        let (ni, ch, t) = (idx / (cr * l), (idx / l) % cr, idx % l);
                        f64::from(u8::from(m.get(ni, ch, t, i)))
                    })
                    .collect()
            } else {
                let gw = &p.gates[i];
                let pooled = trailing_mean(&d, &h, cr, cfg.pool_window());
                let mut hid = pointwise(&d, &pooled, cr, gw.pw_a.weight.data(), gw.pw_a.bias.data(), cg);
                hid.iter_mut().for_each(|v| *v = v.max(0.0));
                let s = pointwise(&d, &hid, cg, gw.pw_b.weight.data(), gw.pw_b.bias.data(), cr);
                let hard = |v: f64| if v >= 0.0 { 1.0 } else { 0.0 };
                let g = match &mut rule {
                    GateRule::Hard => s.iter().map(|&v| hard(v)).collect(),
                    GateRule::Twin { base, phi } => s
                        .iter()
                        .zip(&base[i])
                        .map(|(&v, &v0)| hard(v0) + phi(v) - phi(v0))
                        .collect(),
                    GateRule::Concrete { lambda, rng } => s
                        .iter()
                        .map(|&v| {
                            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                            let z = ((u / (1.0 - u)).ln() + v) / *lambda;
                            1.0 / (1.0 + (-z).exp())
                        })
                        .collect(),
                    GateRule::Forced(_) => unreachable!(),
                };
                scores.push(s);
                g
            };
            r.iter_mut().zip(&g).for_each(|(v, gv)| *v *= gv);
            gates.push(g);
        }
        h.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        if (i + 1) % cfg.blocks_per_stack == 0 && i + 1 < cfg.total_blocks() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    let logits = pointwise(&d, &h, cr, p.back.weight.data(), p.back.bias.data(), f);
    RefOutput {
        mask: logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect(),
        gates,
        scores,
    }
}

/// `(1/C) sum_c (mean_{n,l,i} g - target)^2` over real-valued gates.
pub fn reference_dcp(gates: &[Vec<f64>], n: usize, c: usize, l: usize, target: f64) -> f64 {
    let mut total = 0.0;
    for ch in 0..c {
        let mut s = 0.0;
        for g in gates {
            for ni in 0..n {
                for t in 0..l {
                    s += g[(ni * c + ch) * l + t];
                }
            }
        }
        let m = s / (n * l * gates.len()) as f64;
        total += (m - target) * (m - target);
    }
    total / c as f64
}

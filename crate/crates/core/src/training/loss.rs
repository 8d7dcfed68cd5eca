//! Spectral enhancement loss and the channel-activity regularizer.

use num_complex::Complex64;

use crate::dsp::{compress_value, ComplexSpectrogram};
use crate::error::{Error, Result};
use crate::gating::GateMask;
use crate::tensor::{Real, Tape, Var};

/// `alpha * sum |S^c - Ŝ^c|^2 + (1 - alpha) * sum (|S|^c - |Ŝ|^c)^2`, where
/// `^c` compresses magnitude and keeps phase.
pub fn loss_se(clean: &ComplexSpectrogram, estimate: &ComplexSpectrogram, alpha: f64, c: f64) -> Result<f64> {
    clean.ensure_same_layout(estimate)?;
    check_loss_params(alpha, c)?;
    Ok(clean
        .data
        .iter()
        .zip(&estimate.data)
        .map(|(&s, &e)| element_loss(s, e, alpha, c))
        .sum())
}

fn check_loss_params(alpha: f64, c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} not in [0, 1]")));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Config(format!("compression {c} not in (0, 1]")));
    }
    Ok(())
}

fn element_loss(s: Complex64, e: Complex64, alpha: f64, c: f64) -> f64 {
    let (sc, ec) = (compress_value(s, c), compress_value(e, c));
    let mag = s.norm().powf(c) - e.norm().powf(c);
    alpha * (sc - ec).norm_sqr() + (1.0 - alpha) * mag * mag
}

/// Loss of the masked estimate `mask * noisy` against `clean`, with the
/// derivative of each term with respect to its mask value. All three slices
/// share one layout.
pub fn loss_se_masked<T: Real>(
    clean: &[Complex64],
    noisy: &[Complex64],
    mask: &[T],
    alpha: f64,
    c: f64,
) -> Result<(f64, Vec<f64>)> {
    if clean.len() != noisy.len() || clean.len() != mask.len() {
        return Err(Error::Shape("loss_se_masked: length mismatch".into()));
    }
    check_loss_params(alpha, c)?;
    let mut total = 0.0;
    let mut grad = vec![0.0; mask.len()];
    for (k, ((&s, &x), &m)) in clean.iter().zip(noisy).zip(mask).enumerate() {
        let m = m.as_f64();
        total += element_loss(s, x * m, alpha, c);
        let xm = x.norm();
        if xm == 0.0 {
            continue;
        }
        let m_safe = m.max(1e-12);
        let b = (m_safe * xm).powf(c);
        let a = compress_value(s, c);
        let phase = x / xm;
        let re = (a * phase.conj()).re;
        let d_b = alpha * (2.0 * b - 2.0 * re) - 2.0 * (1.0 - alpha) * (s.norm().powf(c) - b);
        let db_dm = c * b / m_safe;
        grad[k] = d_b * db_dm;
    }
    Ok((total, grad))
}

/// Records `scale * loss_se_masked(...)` on the tape as a scalar of `mask`.
pub fn loss_se_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mask: Var,
    clean: &[Complex64],
    noisy: &[Complex64],
    alpha: f64,
    c: f64,
    scale: f64,
) -> Result<Var> {
    let (value, grad) = loss_se_masked(clean, noisy, tape.value(mask).data(), alpha, c)?;
    let partial = grad.into_iter().map(|g| T::lit(g * scale)).collect();
    tape.reduce(&[mask], T::lit(value * scale), vec![partial])
}

/// Per-channel activity averaged over batch, time, and blocks.
fn channel_means(channels: usize, per_channel_sum: &[f64], count: usize) -> Vec<f64> {
    (0..channels).map(|c| per_channel_sum[c] / count as f64).collect()
}

/// `(1/C) * sum_c (mean_{n,l,i} G[n,c,l,i] - target)^2`.
pub fn loss_dcp(gates: &GateMask, target: f64) -> f64 {
    let mut sums = vec![0.0; gates.channels];
    for n in 0..gates.batch {
        for c in 0..gates.channels {
            for l in 0..gates.frames {
                for i in 0..gates.blocks {
                    if gates.get(n, c, l, i) {
                        sums[c] += 1.0;
                    }
                }
            }
        }
    }
    let count = gates.batch * gates.frames * gates.blocks;
    dcp_from_means(&channel_means(gates.channels, &sums, count), target)
}

fn dcp_from_means(means: &[f64], target: f64) -> f64 {
    means.iter().map(|m| (m - target) * (m - target)).sum::<f64>() / means.len() as f64
}

/// Tape version of [`loss_dcp`] over per-block `[N, C, L]` gate values
/// (binary, or relaxed in (0, 1)).
pub fn loss_dcp_on_tape<T: Real>(tape: &mut Tape<T>, gates: &[Var], target: f64) -> Result<Var> {
    let first = *gates.first().ok_or(Error::Empty("loss_dcp gates"))?;
    let (n, c, l) = tape.value(first).dims3()?;
    let mut sums = vec![0.0; c];
    for &g in gates {
        if tape.value(g).dims3()? != (n, c, l) {
            return Err(Error::Shape("loss_dcp: gate blocks differ in shape".into()));
        }
        let d = tape.value(g).data();
        for ni in 0..n {
            for ch in 0..c {
                sums[ch] += d[(ni * c + ch) * l..(ni * c + ch + 1) * l]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
        }
    }
    let count = n * l * gates.len();
    let means = channel_means(c, &sums, count);
    let value = dcp_from_means(&means, target);
    let partial: Vec<T> = {
        let mut p = vec![T::zero(); n * c * l];
        for ni in 0..n {
            for ch in 0..c {
                let d = T::lit(2.0 * (means[ch] - target) / (c * count) as f64);
                p[(ni * c + ch) * l..(ni * c + ch + 1) * l].fill(d);
            }
        }
        p
    };
    let partials = vec![partial; gates.len()];
    tape.reduce(gates, T::lit(value), partials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;

    fn single(z: Complex64) -> ComplexSpectrogram {
        let mut s = ComplexSpectrogram::zeros(1, StftConfig::default(), 1);
        s.data.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        s.data[0] = z;
        s
    }

    #[test]
    fn loss_se_examples() {
        let s = single(Complex64::new(1.0, 0.0));
        assert_eq!(loss_se(&s, &s, 0.3, 0.3).unwrap(), 0.0);
        let zero = single(Complex64::new(0.0, 0.0));
        assert!((loss_se(&s, &zero, 0.3, 0.3).unwrap() - 1.0).abs() < 1e-12);
        // phase-blind at alpha = 0
        let rotated = single(Complex64::new(0.0, 1.0));
        assert!(loss_se(&s, &rotated, 0.0, 0.3).unwrap().abs() < 1e-15);
        assert!(loss_se(&s, &rotated, 0.5, 0.3).unwrap() > 0.0);
    }

    #[test]
    fn loss_dcp_examples() {
        let ones = GateMask::filled(2, 4, 3, 2, true);
        assert_eq!(loss_dcp(&ones, 1.0), 0.0);
        assert!((loss_dcp(&ones, 0.25) - 0.5625).abs() < 1e-15);
        // channel means [0.25, 0.25, 0.5, 0.0]
        let mut g = GateMask::filled(1, 4, 4, 1, false);
        g.set(0, 0, 0, 0, true);
        g.set(0, 1, 2, 0, true);
        g.set(0, 2, 1, 0, true);
        g.set(0, 2, 3, 0, true);
        assert!((loss_dcp(&g, 0.25) - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let clean = [Complex64::new(0.7, -0.2), Complex64::new(0.0, 0.0), Complex64::new(-1.5, 2.0)];
        let noisy = [Complex64::new(1.1, 0.4), Complex64::new(0.3, 0.3), Complex64::new(-1.0, 3.0)];
        let mask = [0.4f64, 0.9, 0.6];
        let (_, g) = loss_se_masked(&clean, &noisy, &mask, 0.3, 0.3).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut up = mask;
            let mut dn = mask;
            up[k] += h;
            dn[k] -= h;
            let fd = (loss_se_masked(&clean, &noisy, &up, 0.3, 0.3).unwrap().0
                - loss_se_masked(&clean, &noisy, &dn, 0.3, 0.3).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }
}

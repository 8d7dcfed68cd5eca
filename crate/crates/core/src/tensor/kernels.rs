//! Slice-level forward and backward kernels on `[N, C, L]` activations.
//!
//! Every output element of the point-wise convolution accumulates
//! `bias + w[o,0]*x[0] + w[o,1]*x[1] + ...` in input-channel order. The
//! frame-by-frame runtime and the row-skipping inference path keep that
//! order so that their results stay bit-comparable with this kernel.

use super::Real;

pub fn pointwise_conv<T: Real>(
    x: &[T],
    (n, cin, l): (usize, usize, usize),
    w: &[T],
    b: &[T],
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout * l];
    for ni in 0..n {
        let xs = &x[ni * cin * l..(ni + 1) * cin * l];
        for o in 0..cout {
            let row = &mut out[(ni * cout + o) * l..(ni * cout + o + 1) * l];
            row.fill(b[o]);
            let wrow = &w[o * cin..(o + 1) * cin];
            for (i, &wi) in wrow.iter().enumerate() {
                let xr = &xs[i * l..(i + 1) * l];
                for (r, &xv) in row.iter_mut().zip(xr) {
                    *r = *r + wi * xv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn pointwise_conv_backward<T: Real>(
    x: &[T],
    (n, cin, l): (usize, usize, usize),
    w: &[T],
    cout: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * cin * l];
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for ni in 0..n {
        for o in 0..cout {
            let g = &dy[(ni * cout + o) * l..(ni * cout + o + 1) * l];
            db[o] = db[o] + g.iter().copied().sum::<T>();
            for i in 0..cin {
                let xr = &x[(ni * cin + i) * l..(ni * cin + i + 1) * l];
                let wi = w[o * cin + i];
                let dxr = &mut dx[(ni * cin + i) * l..(ni * cin + i + 1) * l];
                for (d, &gv) in dxr.iter_mut().zip(g) {
                    *d = *d + wi * gv;
                }
                dw[o * cin + i] = dw[o * cin + i] + dot(g, xr);
            }
        }
    }
    (dx, dw, db)
}

/// Dot product with eight independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ar.iter().zip(br) {
        acc = acc + x * y;
    }
    acc
}

/// Dilated depth-wise convolution with `pad_left` implicit zeros before the
/// first frame; output length equals input length.
pub fn depthwise_conv<T: Real>(
    x: &[T],
    (n, c, l): (usize, usize, usize),
    w: &[T],
    b: &[T],
    kernel: usize,
    dilation: usize,
    pad_left: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * l];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * l;
            let xr = &x[base..base + l];
            let wr = &w[ch * kernel..(ch + 1) * kernel];
            for t in 0..l {
                let mut acc = b[ch];
                for (j, &wj) in wr.iter().enumerate() {
                    let src = t as isize - pad_left as isize + (j * dilation) as isize;
                    if src >= 0 && (src as usize) < l {
                        acc = acc + wj * xr[src as usize];
                    }
                }
                out[base + t] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv_backward<T: Real>(
    x: &[T],
    (n, c, l): (usize, usize, usize),
    w: &[T],
    kernel: usize,
    dilation: usize,
    pad_left: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * c * l];
    let mut dw = vec![T::zero(); c * kernel];
    let mut db = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * l;
            for t in 0..l {
                let g = dy[base + t];
                db[ch] = db[ch] + g;
                for j in 0..kernel {
                    let src = t as isize - pad_left as isize + (j * dilation) as isize;
                    if src >= 0 && (src as usize) < l {
                        let s = base + src as usize;
                        dw[ch * kernel + j] = dw[ch * kernel + j] + g * x[s];
                        dx[s] = dx[s] + g * w[ch * kernel + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn prelu<T: Real>(x: &[T], (n, c, l): (usize, usize, usize), slope: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for ni in 0..n {
        for ch in 0..c {
            let a = slope[ch];
            for v in &mut out[(ni * c + ch) * l..(ni * c + ch + 1) * l] {
                if *v <= T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dslope)`.
pub fn prelu_backward<T: Real>(
    x: &[T],
    (n, c, l): (usize, usize, usize),
    slope: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut da = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let range = (ni * c + ch) * l..(ni * c + ch + 1) * l;
            for i in range {
                if x[i] > T::zero() {
                    dx[i] = dy[i];
                } else {
                    dx[i] = slope[ch] * dy[i];
                    da[ch] = da[ch] + dy[i] * x[i];
                }
            }
        }
    }
    (dx, da)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per-channel batch statistics over `(N, L)`.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

pub fn batch_stats<T: Real>(x: &[T], (n, c, l): (usize, usize, usize)) -> BatchStats<T> {
    let count = T::lit((n * l) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s = s + x[(ni * c + ch) * l..(ni * c + ch + 1) * l].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut sq = T::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ch) * l..(ni * c + ch + 1) * l] {
                sq = sq + (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    BatchStats { mean, var }
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel; returns `(y, xhat)`.
pub fn normalize<T: Real>(
    x: &[T],
    (n, c, l): (usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ch in 0..c {
            for i in (ni * c + ch) * l..(ni * c + ch + 1) * l {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Backward of training-mode batch normalization. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Real>(
    xhat: &[T],
    (n, c, l): (usize, usize, usize),
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::lit((n * l) as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for ni in 0..n {
            for i in (ni * c + ch) * l..(ni * c + ch + 1) * l {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * inv_std[ch] / m;
        for ni in 0..n {
            for i in (ni * c + ch) * l..(ni * c + ch + 1) * l {
                dx[i] = k * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Causal boxcar mean over the last `min(t+1, window)` frames.
pub fn moving_average<T: Real>(x: &[T], (n, c, l): (usize, usize, usize), window: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for row in 0..n * c {
        let xr = &x[row * l..(row + 1) * l];
        let or = &mut out[row * l..(row + 1) * l];
        for t in 0..l {
            let start = (t + 1).saturating_sub(window);
            let s: T = xr[start..=t].iter().copied().sum();
            or[t] = s / T::lit((t + 1 - start) as f64);
        }
    }
    out
}

pub fn moving_average_backward<T: Real>(
    (n, c, l): (usize, usize, usize),
    window: usize,
    dy: &[T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for row in 0..n * c {
        let g = &dy[row * l..(row + 1) * l];
        let d = &mut dx[row * l..(row + 1) * l];
        for t in 0..l {
            let start = (t + 1).saturating_sub(window);
            let share = g[t] / T::lit((t + 1 - start) as f64);
            for v in &mut d[start..=t] {
                *v = *v + share;
            }
        }
    }
    dx
}

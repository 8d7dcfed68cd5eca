//! Gating subnets: temporal pooling, the two-layer scoring stack, and
//! binarization with surrogate or stochastic backward rules.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Conv, Gate};
use crate::tensor::kernels::{self, sigmoid};
use crate::tensor::{Real, Tape, Tensor, Var};

pub type GatingWeights<T> = Gate<Tensor<T>>;

/// IIR coefficient with the same effective averaging length as a boxcar of
/// `window` frames.
pub fn beta_for_window(window: usize) -> f64 {
    2.0 / (window as f64 + 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolingMode {
    /// Causal moving average over `window` frames (training default).
    Boxcar { window: usize },
    /// First-order recursive average `p_t = beta*x_t + (1-beta)*p_{t-1}`.
    Iir { beta: f64 },
}

impl PoolingMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolingMode::Boxcar { window } if window == 0 => {
                Err(Error::Config("pooling window must be >= 1".into()))
            }
            PoolingMode::Iir { beta } if !(beta > 0.0 && beta <= 1.0) => {
                Err(Error::Config(format!("IIR beta {beta} not in (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// IIR approximation of this pooling mode.
    pub fn to_iir(self) -> Self {
        match self {
            PoolingMode::Boxcar { window } => PoolingMode::Iir {
                beta: beta_for_window(window),
            },
            iir => iir,
        }
    }
}

/// Causal boxcar pooling of a `[N, C, L]` tensor.
pub fn pool_moving_average<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if window == 0 {
        return Err(Error::Config("pooling window must be >= 1".into()));
    }
    let dims = x.dims3()?;
    Tensor::new(x.shape(), kernels::moving_average(x.data(), dims, window))
}

/// Recursive pooling of a whole `[N, C, L]` sequence from zero state.
pub fn pool_iir_sequence<T: Real>(x: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    let (n, c, l) = x.dims3()?;
    let mut out = x.clone();
    let mut pool = IirPool::<T>::new(n * c, beta)?;
    let mut frame = vec![T::zero(); n * c];
    for t in 0..l {
        for (row, v) in frame.iter_mut().enumerate() {
            *v = x.data()[row * l + t];
        }
        let p = pool.step(&frame);
        for (row, &v) in p.iter().enumerate() {
            out.data_mut()[row * l + t] = v;
        }
    }
    Ok(out)
}

pub fn pool<T: Real>(x: &Tensor<T>, mode: PoolingMode) -> Result<Tensor<T>> {
    match mode {
        PoolingMode::Boxcar { window } => pool_moving_average(x, window),
        PoolingMode::Iir { beta } => pool_iir_sequence(x, beta),
    }
}

/// Per-stream exponential moving average state.
#[derive(Clone, Debug)]
pub struct IirPool<T> {
    state: Vec<T>,
    beta: T,
    keep: T,
}

impl<T: Real> IirPool<T> {
    pub fn new(width: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!("IIR beta {beta} not in (0, 1]")));
        }
        Ok(Self {
            state: vec![T::zero(); width],
            beta: T::lit(beta),
            keep: T::lit(1.0 - beta),
        })
    }

    pub fn step(&mut self, x: &[T]) -> &[T] {
        for (p, &v) in self.state.iter_mut().zip(x) {
            *p = self.beta * v + self.keep * *p;
        }
        &self.state
    }

    pub fn state(&self) -> &[T] {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.fill(T::zero());
    }
}

/// Raw pruning scores: `pw_b(relu(pw_a(pooled)))`.
pub fn gate_scores<T: Real>(gw: &GatingWeights<T>, pooled: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, l) = pooled.dims3()?;
    check_gate_dims(gw, c)?;
    let hidden = gw.pw_a.weight.shape()[0];
    let h: Vec<T> = kernels::pointwise_conv(pooled.data(), (n, c, l), gw.pw_a.weight.data(), gw.pw_a.bias.data(), hidden)
        .into_iter()
        .map(|v| v.max(T::zero()))
        .collect();
    let s = kernels::pointwise_conv(&h, (n, hidden, l), gw.pw_b.weight.data(), gw.pw_b.bias.data(), c);
    Tensor::new(&[n, c, l], s)
}

fn check_gate_dims<T: Real>(gw: &GatingWeights<T>, c: usize) -> Result<()> {
    let a = gw.pw_a.weight.shape();
    let b = gw.pw_b.weight.shape();
    if a.len() != 3 || a[1] != c || b.len() != 3 || b[0] != c || b[1] != a[0] {
        return Err(Error::Shape(format!(
            "gating weights {a:?}/{b:?} do not fit {c} channels"
        )));
    }
    Ok(())
}

/// Tape version of [`gate_scores`].
pub fn gate_scores_on_tape<T: Real>(tape: &mut Tape<T>, gw: &Gate<Var>, pooled: Var) -> Result<Var> {
    let h = conv_on_tape(tape, &gw.pw_a, pooled)?;
    let h = tape.relu(h);
    conv_on_tape(tape, &gw.pw_b, h)
}

fn conv_on_tape<T: Real>(tape: &mut Tape<T>, conv: &Conv<Var>, x: Var) -> Result<Var> {
    tape.pointwise_conv(x, conv.weight, conv.bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinarizationMode {
    /// Hard step with no gradient.
    Heaviside,
    /// Hard step forward, `sigma'(s/tau)/tau` backward.
    SigmoidSurrogate { tau: f64 },
    /// Hard step forward, `1/(1+nu|s|)^2` backward.
    SuperSpike { nu: f64 },
    /// Relaxed Bernoulli sample `sigma((logit(u) + s)/lambda)` in training.
    BinaryConcrete { lambda: f64 },
}

impl Default for BinarizationMode {
    fn default() -> Self {
        BinarizationMode::SuperSpike { nu: 1.0 }
    }
}

impl BinarizationMode {
    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            BinarizationMode::Heaviside => return Ok(()),
            BinarizationMode::SigmoidSurrogate { tau } => ("tau", tau),
            BinarizationMode::SuperSpike { nu } => ("nu", nu),
            BinarizationMode::BinaryConcrete { lambda } => ("lambda", lambda),
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("binarization {name} must be > 0, got {v}")));
        }
        Ok(())
    }

    /// Surrogate derivative of the hard step at score `s`. Zero for the
    /// plain step; the Binary Concrete rule is sample-dependent and handled
    /// in [`binarize_on_tape`].
    pub fn surrogate_grad(&self, s: f64) -> f64 {
        match *self {
            BinarizationMode::Heaviside | BinarizationMode::BinaryConcrete { .. } => 0.0,
            BinarizationMode::SigmoidSurrogate { tau } => {
                let z = sigmoid(-s.abs() / tau);
                z * (1.0 - z) / tau
            }
            BinarizationMode::SuperSpike { nu } => {
                let d = 1.0 + nu * s.abs();
                1.0 / (d * d)
            }
        }
    }
}

/// Heaviside step with `H(0) = 1`.
pub fn heaviside(s: f64) -> bool {
    s >= 0.0
}

/// Hard gates for every score.
pub fn binarize<T: Real>(scores: &[T]) -> Vec<bool> {
    scores.iter().map(|s| heaviside(s.as_f64())).collect()
}

/// Relaxed Binary Concrete sample and its derivative with respect to `s`.
pub fn binary_concrete_sample(s: f64, u: f64, lambda: f64) -> (f64, f64) {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    let g = sigmoid((u.ln() - (1.0 - u).ln() + s) / lambda);
    (g, g * (1.0 - g) / lambda)
}

/// Records the gate tensor for `scores`. Training uses `mode`'s backward
/// rule; evaluation always produces hard gates.
pub fn binarize_on_tape<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    mode: BinarizationMode,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    mode.validate()?;
    let s = tape.value(scores).clone();
    let mut local = vec![T::zero(); s.len()];
    let mut value = Tensor::zeros(s.shape());
    match mode {
        BinarizationMode::BinaryConcrete { lambda } if training => {
            for ((v, d), &x) in value.data_mut().iter_mut().zip(&mut local).zip(s.data()) {
                let u: f64 = rng.gen();
                let (g, dg) = binary_concrete_sample(x.as_f64(), u, lambda);
                *v = T::lit(g);
                *d = T::lit(dg);
            }
        }
        _ => {
            for ((v, d), &x) in value.data_mut().iter_mut().zip(&mut local).zip(s.data()) {
                let x = x.as_f64();
                *v = if heaviside(x) { T::one() } else { T::zero() };
                if training {
                    *d = T::lit(mode.surrogate_grad(x));
                }
            }
        }
    }
    tape.local_grad(scores, value, local)
}

/// Deployment role of one residual channel of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelRole {
    /// Gate computed every frame.
    Dynamic,
    /// Gate fixed to 1; its score is not computed.
    AlwaysOn,
    /// Gate fixed to 0; the `pw2` row and score are dropped.
    Removed,
}

impl ChannelRole {
    /// Applies the role to a computed gate value.
    pub fn resolve(self, computed: impl FnOnce() -> bool) -> bool {
        match self {
            ChannelRole::Dynamic => computed(),
            ChannelRole::AlwaysOn => true,
            ChannelRole::Removed => false,
        }
    }
}

/// Binary gate tensor `G` laid out `[N, C_res, L, I]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateMask {
    pub batch: usize,
    pub channels: usize,
    pub frames: usize,
    pub blocks: usize,
    data: Vec<bool>,
}

impl GateMask {
    pub fn new(batch: usize, channels: usize, frames: usize, blocks: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != batch * channels * frames * blocks {
            return Err(Error::Shape(format!(
                "gate mask {batch}x{channels}x{frames}x{blocks} needs {} values, got {}",
                batch * channels * frames * blocks,
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            frames,
            blocks,
            data,
        })
    }

    pub fn filled(batch: usize, channels: usize, frames: usize, blocks: usize, value: bool) -> Self {
        Self {
            batch,
            channels,
            frames,
            blocks,
            data: vec![value; batch * channels * frames * blocks],
        }
    }

    /// Stacks per-block `[N, C, L]` gate tensors; values `>= 0.5` count as active.
    pub fn from_blocks<T: Real>(blocks: &[&Tensor<T>]) -> Result<Self> {
        let first = blocks.first().ok_or(Error::Empty("gate blocks"))?;
        let (n, c, l) = first.dims3()?;
        let i_count = blocks.len();
        let mut data = vec![false; n * c * l * i_count];
        for (i, t) in blocks.iter().enumerate() {
            if t.dims3()? != (n, c, l) {
                return Err(Error::Shape("gate blocks differ in shape".into()));
            }
            for (idx, &v) in t.data().iter().enumerate() {
                data[idx * i_count + i] = v.as_f64() >= 0.5;
            }
        }
        Self::new(n, c, l, i_count, data)
    }

    fn index(&self, n: usize, c: usize, l: usize, i: usize) -> usize {
        ((n * self.channels + c) * self.frames + l) * self.blocks + i
    }

    pub fn get(&self, n: usize, c: usize, l: usize, i: usize) -> bool {
        self.data[self.index(n, c, l, i)]
    }

    pub fn set(&mut self, n: usize, c: usize, l: usize, i: usize, v: bool) {
        let idx = self.index(n, c, l, i);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Block `i` as a `[N, C, L]` tensor of zeros and ones.
    pub fn block_tensor<T: Real>(&self, i: usize) -> Tensor<T> {
        let shape = [self.batch, self.channels, self.frames];
        Tensor::from_fn(&shape, |idx| {
            if self.data[idx * self.blocks + i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn active_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&g| g).count() as f64 / self.data.len() as f64
    }
}

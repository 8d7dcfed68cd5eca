use num_complex::Complex64;

use super::macs::{count_macs_runtime, MacCounter, MacReport};
use super::InferenceModel;
use crate::dsp::{StftConfig, StreamingIstft, StreamingStft, Waveform};
use crate::error::{Error, Result};
use crate::gating::{self, GateMask, IirPool, PoolingMode};
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor};

/// Causal history of one audio stream.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    /// Per block, `(k - 1) * d + 1` frames of depth-wise input, frame-major.
    rings: Vec<Vec<T>>,
    history: Vec<usize>,
    pools: Vec<IirPool<T>>,
    frame: usize,
    counter: MacCounter,
    c_conv: usize,
}

impl<T: Real> StreamState<T> {
    pub fn new(model: &InferenceModel<T>) -> Result<Self> {
        let cfg = &model.weights().config;
        if !cfg.causal {
            return Err(Error::Config("stream requires causal=true".into()));
        }
        let beta = match model.pooling() {
            PoolingMode::Iir { beta } => beta,
            PoolingMode::Boxcar { .. } => return Err(Error::Config("frame streaming needs IIR pooling".into())),
        };
        let history: Vec<usize> = (0..cfg.total_blocks())
            .map(|i| (cfg.kernel_size - 1) * cfg.dilation(i) + 1)
            .collect();
        Ok(Self {
            rings: history.iter().map(|h| vec![T::zero(); h * cfg.c_conv]).collect(),
            pools: (0..cfg.total_blocks())
                .map(|_| IirPool::new(cfg.c_res, beta))
                .collect::<Result<_>>()?,
            history,
            frame: 0,
            counter: MacCounter::new(cfg.total_blocks(), cfg.gating_enabled),
            c_conv: cfg.c_conv,
        })
    }

    /// Zeroes every history and counter.
    pub fn reset(&mut self) {
        self.rings.iter_mut().for_each(|r| r.fill(T::zero()));
        self.pools.iter_mut().for_each(IirPool::reset);
        self.frame = 0;
        let gated = self.counter.gated;
        self.counter = MacCounter::new(self.rings.len(), gated);
    }

    pub fn frames(&self) -> usize {
        self.frame
    }

    pub fn counter(&self) -> &MacCounter {
        &self.counter
    }

    pub fn ring_lengths(&self) -> &[usize] {
        &self.history
    }

    fn check(&self, model: &InferenceModel<T>) -> Result<()> {
        let cfg = &model.weights().config;
        if self.rings.len() != cfg.total_blocks() || self.c_conv != cfg.c_conv || self.pools[0].state().len() != cfg.c_res {
            return Err(Error::State("stream state was created for a different model".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput<T> {
    pub mask: Vec<T>,
    /// Masked input frame.
    pub enhanced: Vec<Complex64>,
    /// Per-block gate vectors; empty without gating.
    pub gates: Vec<Vec<bool>>,
    /// `pw2` rows computed per block.
    pub active_rows: Vec<u64>,
}

/// Runs one frame of magnitudes through the network. `forced[i][c]`
/// overrides the gates of block `i`.
pub fn process_magnitudes<T: Real>(
    state: &mut StreamState<T>,
    model: &InferenceModel<T>,
    mags: &[T],
    forced: Option<&[Vec<bool>]>,
) -> Result<(Vec<T>, Vec<Vec<bool>>, Vec<u64>)> {
    state.check(model)?;
    let w = model.weights();
    let cfg = &w.config;
    let p = &w.params;
    let (f, c_res, c_conv, k) = (cfg.freq_bins, cfg.c_res, cfg.c_conv, cfg.kernel_size);
    if mags.len() != f {
        return Err(Error::Shape(format!("frame has {} bins, model expects {f}", mags.len())));
    }
    if let Some(g) = forced {
        if g.len() != cfg.total_blocks() || g.iter().any(|v| v.len() != c_res) {
            return Err(Error::Shape("forced gates must be blocks x channels".into()));
        }
    }
    let gated = cfg.gating_enabled || forced.is_some();
    let t = state.frame;

    let mut h = kernels::pointwise_conv(mags, (1, f, 1), p.front.weight.data(), p.front.bias.data(), c_res);
    h.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let mut gates = Vec::new();
    let mut active_rows = Vec::with_capacity(cfg.total_blocks());
    for (i, (b, kern)) in p.blocks.iter().zip(&model.kernels).enumerate() {
        let dims = (1, c_conv, 1);
        let mut r = kernels::pointwise_conv(&h, (1, c_res, 1), b.pw1.weight.data(), b.pw1.bias.data(), c_conv);
        r = kernels::prelu(&r, dims, b.prelu1.data());
        if let Some(n) = &kern.bn1 {
            r = kernels::normalize(&r, dims, &n.mean, &n.inv_std, &n.gamma, &n.beta).0;
        }
        let d = cfg.dilation(i);
        let hist = state.history[i];
        let ring = &mut state.rings[i];
        let slot = t % hist;
        ring[slot * c_conv..(slot + 1) * c_conv].copy_from_slice(&r);
        let mut z = kern.ddw_bias.clone();
        for j in 0..k {
            let back = (k - 1 - j) * d;
            if back > t {
                continue;
            }
            let src = (t - back) % hist;
            for (c, acc) in z.iter_mut().enumerate() {
                *acc = *acc + kern.ddw_weight[c * k + j] * ring[src * c_conv + c];
                if let Some(shift) = &kern.tap_shift {
                    *acc = *acc + shift[c * k + j];
                }
            }
        }
        z = kernels::prelu(&z, dims, b.prelu2.data());
        if let Some(n) = &kern.bn2 {
            z = kernels::normalize(&z, dims, &n.mean, &n.inv_std, &n.gamma, &n.beta).0;
        }

        let pooled = state.pools[i].step(&h).to_vec();
        let g: Option<Vec<bool>> = if let Some(forced) = forced {
            Some(forced[i].clone())
        } else if gated {
            let pooled = Tensor::new(&[1, c_res, 1], pooled)?;
            let s = gating::gate_scores(&p.gates[i], &pooled)?;
            let mut g = gating::binarize(s.data());
            if let Some(roles) = &w.roles {
                for (c, v) in g.iter_mut().enumerate() {
                    *v = roles[i][c].resolve(|| *v);
                }
            }
            Some(g)
        } else {
            None
        };

        let mut rows = 0u64;
        for o in 0..c_res {
            if let Some(g) = &g {
                if !g[o] {
                    continue;
                }
            }
            let mut acc = kern.pw2_bias[o];
            for (c, &wv) in kern.pw2_weight[o * c_conv..(o + 1) * c_conv].iter().enumerate() {
                acc = acc + wv * z[c];
            }
            h[o] = h[o] + acc;
            rows += 1;
        }
        active_rows.push(rows);
        if let Some(g) = g {
            gates.push(g);
        }
        let last_in_stack = (i + 1) % cfg.blocks_per_stack == 0;
        if last_in_stack && i + 1 < cfg.total_blocks() {
            h.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
    }

    let logits = kernels::pointwise_conv(&h, (1, c_res, 1), p.back.weight.data(), p.back.bias.data(), f);
    let mask = logits.into_iter().map(kernels::sigmoid).collect();
    state.counter.add_frame(cfg, &active_rows, w.roles.as_deref());
    state.frame += 1;
    Ok((mask, gates, active_rows))
}

/// Enhances one complex STFT frame.
pub fn process_frame<T: Real>(
    state: &mut StreamState<T>,
    model: &InferenceModel<T>,
    frame: &[Complex64],
    forced: Option<&[Vec<bool>]>,
) -> Result<FrameOutput<T>> {
    let mags: Vec<T> = frame.iter().map(|z| T::lit(z.norm())).collect();
    let (mask, gates, active_rows) = process_magnitudes(state, model, &mags, forced)?;
    let enhanced = frame.iter().zip(&mask).map(|(z, m)| z * m.as_f64()).collect();
    Ok(FrameOutput {
        mask,
        enhanced,
        gates,
        active_rows,
    })
}

/// Sample-in, sample-out wrapper around analysis, the frame runtime and
/// overlap-add synthesis.
pub struct Streamer<'m, T> {
    model: &'m InferenceModel<T>,
    state: StreamState<T>,
    analysis: StreamingStft,
    synthesis: StreamingIstft,
    forced: Option<&'m GateMask>,
    masks: Vec<Vec<T>>,
    gates: Vec<Vec<Vec<bool>>>,
}

impl<'m, T: Real> Streamer<'m, T> {
    pub fn new(model: &'m InferenceModel<T>, stft: StftConfig) -> Result<Self> {
        if stft.bins() != model.weights().config.freq_bins {
            return Err(Error::Config("STFT bins do not match the model".into()));
        }
        Ok(Self {
            model,
            state: StreamState::new(model)?,
            analysis: StreamingStft::new(stft)?,
            synthesis: StreamingIstft::new(stft)?,
            forced: None,
            masks: Vec::new(),
            gates: Vec::new(),
        })
    }

    /// Uses `gates` (batch 1, one entry per frame and block) instead of the
    /// gating subnets.
    pub fn with_forced_gates(mut self, gates: &'m GateMask) -> Self {
        self.forced = Some(gates);
        self
    }

    pub fn push(&mut self, samples: &[f64]) -> Result<Vec<f64>> {
        let frames = self.analysis.push(samples);
        self.run_frames(frames)
    }

    fn run_frames(&mut self, frames: Vec<Vec<Complex64>>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for frame in frames {
            let forced = match self.forced {
                Some(g) => {
                    let t = self.state.frames();
                    if g.batch != 1 || t >= g.frames {
                        return Err(Error::Shape("forced gate mask is too short for the stream".into()));
                    }
                    Some(
                        (0..g.blocks)
                            .map(|i| (0..g.channels).map(|c| g.get(0, c, t, i)).collect())
                            .collect::<Vec<Vec<bool>>>(),
                    )
                }
                None => None,
            };
            let o = process_frame(&mut self.state, self.model, &frame, forced.as_deref())?;
            out.extend(self.synthesis.push(&o.enhanced)?);
            self.masks.push(o.mask);
            self.gates.push(o.gates);
        }
        Ok(out)
    }

    /// Flushes the stream. Returns the trailing samples and the run record.
    pub fn finish(mut self) -> Result<(Vec<f64>, StreamRun<T>)> {
        let tail = self.analysis.finish()?;
        let mut out = self.run_frames(tail)?;
        out.extend(self.synthesis.finish(self.analysis.samples_received()));
        let cfg = &self.model.weights().config;
        let frames = self.masks.len();
        let f = cfg.freq_bins;
        let mask = Tensor::from_fn(&[1, f, frames], |idx| self.masks[idx % frames][idx / frames]);
        let gates = if self.gates.first().is_some_and(|g| !g.is_empty()) {
            let blocks = cfg.total_blocks();
            let mut m = GateMask::filled(1, cfg.c_res, frames, blocks, false);
            for (t, per_block) in self.gates.iter().enumerate() {
                for (i, g) in per_block.iter().enumerate() {
                    for (c, &v) in g.iter().enumerate() {
                        m.set(0, c, t, i, v);
                    }
                }
            }
            Some(m)
        } else {
            None
        };
        let report = count_macs_runtime(cfg, self.state.counter())?;
        Ok((
            out,
            StreamRun {
                mask,
                gates,
                report,
                counter: self.state.counter().clone(),
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct StreamRun<T> {
    /// `[1, F, L]` masks in frame order.
    pub mask: Tensor<T>,
    pub gates: Option<GateMask>,
    pub report: MacReport,
    pub counter: MacCounter,
}

/// Streams a whole waveform in hop-sized chunks.
pub fn stream_waveform<T: Real>(
    model: &InferenceModel<T>,
    input: &Waveform,
    stft: StftConfig,
    forced: Option<&GateMask>,
) -> Result<(Waveform, StreamRun<T>)> {
    let mut s = Streamer::new(model, stft)?;
    if let Some(g) = forced {
        s = s.with_forced_gates(g);
    }
    let mut samples = Vec::with_capacity(input.len());
    for chunk in input.samples.chunks(stft.hop) {
        samples.extend(s.push(chunk)?);
    }
    let (tail, run) = s.finish()?;
    samples.extend(tail);
    Ok((Waveform::with_rate(samples, input.sample_rate)?, run))
}

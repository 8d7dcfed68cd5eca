//! STFT analysis/synthesis, complex masking, and spectral compression.
//!
//! Frames are centred: the signal is reflection-padded by half a window on
//! both sides, so frame `l` covers samples `[l*hop - N/2, l*hop + N/2)`.
//! Analysis and synthesis both use a periodic square-root Hann window, whose
//! squares overlap-add to a constant at 50% overlap. The streaming analyzer
//! and synthesizer reproduce the offline framing sample for sample.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        Self::with_rate(samples, SAMPLE_RATE)
    }

    pub fn with_rate(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic square-root Hann.
    SqrtHann,
    /// Periodic Hann (analysis-only tests; not COLA when squared at 50%).
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 512,
            hop: 256,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.window_length / 2
    }

    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos();
                match self.window {
                    WindowKind::SqrtHann => hann.sqrt(),
                    WindowKind::Hann => hann,
                }
            })
            .collect()
    }

    /// Rejects inconsistent sizes and windows whose squares do not
    /// overlap-add to a constant at the configured hop.
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 || self.window_length % 2 != 0 {
            return Err(Error::Config(format!(
                "window_length must be even and >= 2, got {}",
                self.window_length
            )));
        }
        if self.hop == 0 || self.hop > self.window_length {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.window_length
            )));
        }
        let spread = cola_spread(&self.window_samples(), self.hop);
        if spread > 1e-10 {
            return Err(Error::Config(format!(
                "window is not constant-overlap-add at hop {} (spread {spread:.3e})",
                self.hop
            )));
        }
        Ok(())
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

/// Max minus min of the overlapped squared window over one hop period.
pub fn cola_spread(window: &[f64], hop: usize) -> f64 {
    let n = window.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for offset in 0..hop {
        let mut s = 0.0;
        let mut idx = offset;
        while idx < n {
            s += window[idx] * window[idx];
            idx += hop;
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    hi - lo
}

/// Frame-major complex spectrogram (`data[l * bins + f]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub config: StftConfig,
    /// Length of the analysed signal, used to trim synthesis output.
    pub num_samples: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: StftConfig, num_samples: usize) -> Self {
        let bins = config.bins();
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
            config,
            num_samples,
        }
    }

    pub fn frame(&self, l: usize) -> &[Complex64] {
        &self.data[l * self.bins..(l + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, l: usize) -> &mut [Complex64] {
        &mut self.data[l * self.bins..(l + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub(crate) fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        if self.frames != other.frames || self.bins != other.bins {
            return Err(Error::Shape(format!(
                "spectrogram {}x{} vs {}x{}",
                self.frames, self.bins, other.frames, other.bins
            )));
        }
        Ok(())
    }
}

/// Forward/inverse FFT pair for one window length.
#[derive(Clone)]
struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// Index into a signal of length `len` with mirror reflection (no edge
/// repeat) for out-of-range positions.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

fn analyse_frame(
    fft: &FftPair,
    window: &[f64],
    sample: impl Fn(usize) -> f64,
    bins: usize,
    out: &mut [Complex64],
) {
    let mut buf: Vec<Complex64> = window
        .iter()
        .enumerate()
        .map(|(n, &w)| Complex64::new(sample(n) * w, 0.0))
        .collect();
    fft.forward.process(&mut buf);
    out.copy_from_slice(&buf[..bins]);
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::Empty("stft input waveform"));
    }
    let len = w.len();
    let frames = cfg.frames_for(len);
    let fft = FftPair::new(cfg.window_length);
    let window = cfg.window_samples();
    let pad = cfg.pad() as isize;
    let mut spec = ComplexSpectrogram::zeros(frames, *cfg, len);
    for l in 0..frames {
        let start = (l * cfg.hop) as isize - pad;
        let bins = spec.bins;
        analyse_frame(
            &fft,
            &window,
            |n| w.samples[reflect_index(start + n as isize, len)],
            bins,
            spec.frame_mut(l),
        );
    }
    Ok(spec)
}

fn synthesise_frame(fft: &FftPair, frame: &[Complex64], n: usize) -> Vec<f64> {
    let bins = frame.len();
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..bins].copy_from_slice(frame);
    for k in bins..n {
        full[k] = frame[n - k].conj();
    }
    fft.inverse.process(&mut full);
    let scale = 1.0 / n as f64;
    full.iter().map(|z| z.re * scale).collect()
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    s.config.validate()?;
    if s.bins != s.config.bins() || s.data.len() != s.frames * s.bins {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            s.bins,
            s.config.bins()
        )));
    }
    let n = s.config.window_length;
    let hop = s.config.hop;
    let pad = s.config.pad();
    let fft = FftPair::new(n);
    let window = s.config.window_samples();
    let total = (s.frames.saturating_sub(1)) * hop + n;
    let mut acc = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    for l in 0..s.frames {
        let chunk = synthesise_frame(&fft, s.frame(l), n);
        for i in 0..n {
            acc[l * hop + i] += chunk[i] * window[i];
            wsum[l * hop + i] += window[i] * window[i];
        }
    }
    let samples = (0..s.num_samples)
        .map(|i| {
            let p = i + pad;
            if p < total && wsum[p] > 1e-10 {
                acc[p] / wsum[p]
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples)
}

/// `S(l,f) = X(l,f) * M(l,f)` with a frame-major real mask.
pub fn apply_mask(x: &ComplexSpectrogram, mask: &[f32]) -> Result<ComplexSpectrogram> {
    if mask.len() != x.data.len() {
        return Err(Error::Shape(format!(
            "mask has {} values, spectrogram {}x{}",
            mask.len(),
            x.frames,
            x.bins
        )));
    }
    let mut out = x.clone();
    for (z, &m) in out.data.iter_mut().zip(mask) {
        *z *= m as f64;
    }
    Ok(out)
}

/// Magnitude compression `m^c * e^{j*theta}`; zero stays zero.
pub fn compress(s: &ComplexSpectrogram, c: f64) -> Result<ComplexSpectrogram> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Config(format!("compression exponent {c} not in (0, 1]")));
    }
    let mut out = s.clone();
    for z in &mut out.data {
        *z = compress_value(*z, c);
    }
    Ok(out)
}

pub fn compress_value(z: Complex64, c: f64) -> Complex64 {
    let m = z.norm();
    if m == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        z * m.powf(c - 1.0)
    }
}

/// Incremental analysis producing exactly the frames of [`stft`] on the
/// concatenation of all pushed samples.
pub struct StreamingStft {
    cfg: StftConfig,
    fft: FftPair,
    window: Vec<f64>,
    buffer: VecDeque<f64>,
    /// Absolute index of `buffer[0]`.
    base: usize,
    received: usize,
    next_frame: usize,
}

impl StreamingStft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            fft: FftPair::new(cfg.window_length),
            window: cfg.window_samples(),
            cfg,
            buffer: VecDeque::new(),
            base: 0,
            received: 0,
            next_frame: 0,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn samples_received(&self) -> usize {
        self.received
    }

    /// Feeds samples and returns every frame that is now complete.
    pub fn push(&mut self, samples: &[f64]) -> Vec<Vec<Complex64>> {
        self.buffer.extend(samples.iter().copied());
        self.received += samples.len();
        let pad = self.cfg.pad();
        let mut out = Vec::new();
        loop {
            let l = self.next_frame;
            let start = (l * self.cfg.hop) as isize - pad as isize;
            let last_needed = if start < 0 {
                // left reflection mirrors up to sample `pad`
                ((start + self.cfg.window_length as isize - 1).max(-start)) as usize
            } else {
                start as usize + self.cfg.window_length - 1
            };
            if last_needed >= self.received {
                break;
            }
            out.push(self.frame_at(start, None));
            self.next_frame += 1;
            self.trim();
        }
        out
    }

    /// Emits the trailing frames that need right-edge reflection.
    pub fn finish(&mut self) -> Result<Vec<Vec<Complex64>>> {
        if self.received == 0 {
            return Err(Error::Empty("stream ended before any sample"));
        }
        let len = self.received;
        let frames = self.cfg.frames_for(len);
        let pad = self.cfg.pad() as isize;
        let mut out = Vec::new();
        while self.next_frame < frames {
            let start = (self.next_frame * self.cfg.hop) as isize - pad;
            out.push(self.frame_at(start, Some(len)));
            self.next_frame += 1;
        }
        Ok(out)
    }

    fn frame_at(&self, start: isize, final_len: Option<usize>) -> Vec<Complex64> {
        let len = final_len.unwrap_or(self.received);
        let mut frame = vec![Complex64::new(0.0, 0.0); self.cfg.bins()];
        analyse_frame(
            &self.fft,
            &self.window,
            |n| {
                let abs = reflect_index(start + n as isize, len);
                self.buffer[abs - self.base]
            },
            self.cfg.bins(),
            &mut frame,
        );
        frame
    }

    fn trim(&mut self) {
        // Only frames past the left reflection region may drop history; keep
        // half a window before the next frame start for right reflection.
        let next_start = (self.next_frame * self.cfg.hop) as isize - self.cfg.pad() as isize;
        if next_start <= self.cfg.window_length as isize {
            return;
        }
        let keep_from = (next_start as usize).saturating_sub(self.cfg.window_length);
        while self.base < keep_from && !self.buffer.is_empty() {
            self.buffer.pop_front();
            self.base += 1;
        }
    }
}

/// Incremental overlap-add synthesis matching [`istft`].
pub struct StreamingIstft {
    cfg: StftConfig,
    fft: FftPair,
    window: Vec<f64>,
    acc: VecDeque<f64>,
    wsum: VecDeque<f64>,
    /// Padded position of `acc[0]`.
    base: usize,
    frames: usize,
    emitted: usize,
}

impl StreamingIstft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            fft: FftPair::new(cfg.window_length),
            window: cfg.window_samples(),
            cfg,
            acc: VecDeque::new(),
            wsum: VecDeque::new(),
            base: 0,
            frames: 0,
            emitted: 0,
        })
    }

    /// Adds one frame and returns the output samples that became final.
    pub fn push(&mut self, frame: &[Complex64]) -> Result<Vec<f64>> {
        if frame.len() != self.cfg.bins() {
            return Err(Error::Shape(format!(
                "frame has {} bins, expected {}",
                frame.len(),
                self.cfg.bins()
            )));
        }
        let n = self.cfg.window_length;
        let start = self.frames * self.cfg.hop;
        let end = start + n;
        while self.base + self.acc.len() < end {
            self.acc.push_back(0.0);
            self.wsum.push_back(0.0);
        }
        let chunk = synthesise_frame(&self.fft, frame, n);
        for i in 0..n {
            let p = start + i - self.base;
            self.acc[p] += chunk[i] * self.window[i];
            self.wsum[p] += self.window[i] * self.window[i];
        }
        self.frames += 1;
        let final_upto = self.frames * self.cfg.hop;
        Ok(self.drain_until(final_upto, None))
    }

    /// Flushes the remaining samples, trimming to `num_samples` in total.
    pub fn finish(&mut self, num_samples: usize) -> Vec<f64> {
        let end = self.base + self.acc.len();
        self.drain_until(end.max(num_samples + self.cfg.pad()), Some(num_samples))
    }

    fn drain_until(&mut self, padded_end: usize, limit: Option<usize>) -> Vec<f64> {
        let pad = self.cfg.pad();
        let mut out = Vec::new();
        while self.base < padded_end {
            let (a, w) = match (self.acc.pop_front(), self.wsum.pop_front()) {
                (Some(a), Some(w)) => (a, w),
                _ => (0.0, 0.0),
            };
            let p = self.base;
            self.base += 1;
            if p < pad {
                continue;
            }
            if let Some(max) = limit {
                if self.emitted >= max {
                    continue;
                }
            }
            out.push(if w > 1e-10 { a / w } else { 0.0 });
            self.emitted += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_config_has_257_bins() {
        let w = Waveform::new(vec![0.1; 4 * 16_000]).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!(s.bins, 257);
        assert_eq!(s.frames, 1 + 64_000 / 256);
    }

    #[test]
    fn zero_in_zero_out() {
        let w = Waveform::new(vec![0.0; 5000]).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert!(s.data.iter().all(|z| z.norm() == 0.0));
        let back = istft(&ComplexSpectrogram::zeros(s.frames, s.config, 5000)).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_is_rejected() {
        let w = Waveform::new(vec![]).unwrap();
        assert!(matches!(stft(&w, &StftConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn non_cola_hop_is_rejected() {
        let cfg = StftConfig {
            hop: 200,
            ..StftConfig::default()
        };
        assert!(cfg.validate().is_err());
        let hann = StftConfig {
            window: WindowKind::Hann,
            ..StftConfig::default()
        };
        assert!(hann.validate().is_err());
    }

    #[test]
    fn cola_holds_for_sqrt_hann_half_overlap() {
        let cfg = StftConfig::default();
        assert!(cola_spread(&cfg.window_samples(), cfg.hop) < 1e-10);
    }

    #[test]
    fn bin_centred_sinusoid_concentrates_energy() {
        let cfg = StftConfig::default();
        let bin = 40;
        let freq = bin as f64 / cfg.window_length as f64;
        let w = Waveform::new((0..16_000).map(|t| (2.0 * PI * freq * t as f64).sin()).collect()).unwrap();
        let s = stft(&w, &cfg).unwrap();
        for l in 5..s.frames - 5 {
            let frame = s.frame(l);
            let total: f64 = frame.iter().map(|z| z.norm_sqr()).sum();
            // a periodic sqrt-Hann spreads a bin-centred tone over the
            // centre bin and its two neighbours; count that main lobe
            let lobe: f64 = frame[bin - 1..=bin + 1].iter().map(|z| z.norm_sqr()).sum();
            assert!(lobe / total > 0.99, "frame {l}: {}", lobe / total);
            let peak = frame.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
            assert_eq!(peak, frame[bin].norm_sqr());
        }
    }

    #[test]
    fn frame_matches_direct_dft() {
        let cfg = StftConfig::default();
        let w = random_wave(3000, 3);
        let s = stft(&w, &cfg).unwrap();
        let win = cfg.window_samples();
        let l = 4;
        let start = l * cfg.hop - cfg.pad();
        for f in [0usize, 1, 17, 128, 256] {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..cfg.window_length {
                let ang = -2.0 * PI * (f * n) as f64 / cfg.window_length as f64;
                acc += Complex64::from_polar(w.samples[start + n] * win[n], ang);
            }
            assert!((acc - s.frame(l)[f]).norm() < 1e-9);
        }
    }

    #[test]
    fn round_trip_interior_error() {
        let w = random_wave(16_000, 7);
        let s = stft(&w, &StftConfig::default()).unwrap();
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), w.len());
        let err = w
            .samples
            .iter()
            .zip(&back.samples)
            .skip(512)
            .take(16_000 - 1024)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default();
        let a = random_wave(4000, 1);
        let b = random_wave(4000, 2);
        let mix = Waveform::new(
            a.samples.iter().zip(&b.samples).map(|(x, y)| 0.7 * x - 1.3 * y).collect(),
        )
        .unwrap();
        let (sa, sb, sm) = (stft(&a, &cfg).unwrap(), stft(&b, &cfg).unwrap(), stft(&mix, &cfg).unwrap());
        for i in 0..sm.data.len() {
            let expect = sa.data[i] * 0.7 - sb.data[i] * 1.3;
            assert!((expect - sm.data[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn mask_examples() {
        let cfg = StftConfig::default();
        let mut x = ComplexSpectrogram::zeros(1, cfg, 10);
        x.data[3] = Complex64::new(2.0, 2.0);
        let mut mask = vec![1.0f32; x.data.len()];
        assert_eq!(apply_mask(&x, &mask).unwrap(), x);
        mask[3] = 0.5;
        assert_eq!(apply_mask(&x, &mask).unwrap().data[3], Complex64::new(1.0, 1.0));
        let zero = apply_mask(&x, &vec![0.0; x.data.len()]).unwrap();
        assert!(zero.data.iter().all(|z| z.norm() == 0.0));
        assert!(apply_mask(&x, &mask[1..]).is_err());
    }

    #[test]
    fn compress_examples() {
        assert_eq!(compress_value(Complex64::new(4.0, 0.0), 0.5), Complex64::new(2.0, 0.0));
        let z = Complex64::from_polar(8.0, PI / 4.0);
        let c = compress_value(z, 1.0 / 3.0);
        assert!((c.norm() - 2.0).abs() < 1e-12);
        assert!((c.arg() - PI / 4.0).abs() < 1e-12);
        assert_eq!(compress_value(Complex64::new(0.0, 0.0), 0.3), Complex64::new(0.0, 0.0));
        assert_eq!(compress_value(z, 1.0), z);
        let s = ComplexSpectrogram::zeros(1, StftConfig::default(), 1);
        assert!(compress(&s, 0.0).is_err());
        assert!(compress(&s, -1.0).is_err());
    }

    #[test]
    fn streaming_analysis_matches_offline() {
        let cfg = StftConfig::default();
        for len in [100usize, 257, 511, 2000, 5000] {
            let w = random_wave(len, len as u64);
            let offline = stft(&w, &cfg).unwrap();
            let mut an = StreamingStft::new(cfg).unwrap();
            let mut frames = Vec::new();
            for chunk in w.samples.chunks(97) {
                frames.extend(an.push(chunk));
            }
            frames.extend(an.finish().unwrap());
            assert_eq!(frames.len(), offline.frames, "len {len}");
            for (l, f) in frames.iter().enumerate() {
                assert_eq!(f.as_slice(), offline.frame(l), "len {len} frame {l}");
            }
        }
    }

    #[test]
    fn streaming_synthesis_matches_offline() {
        let cfg = StftConfig::default();
        let w = random_wave(3333, 9);
        let spec = stft(&w, &cfg).unwrap();
        let offline = istft(&spec).unwrap();
        let mut syn = StreamingIstft::new(cfg).unwrap();
        let mut out = Vec::new();
        for l in 0..spec.frames {
            out.extend(syn.push(spec.frame(l)).unwrap());
        }
        out.extend(syn.finish(w.len()));
        assert_eq!(out, offline.samples);
    }
}

//! Paired clean/noisy audio and a synthetic speech-like corpus.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SNR_CHOICES_DB: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
const GAIN_RANGE_DB: f64 = 6.0;
const CLEAN_RMS: f64 = 0.05;
const PEAK_LIMIT: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioPair {
    pub name: String,
    pub clean: Waveform,
    pub noisy: Waveform,
    /// Mixing SNR when known (synthetic data).
    pub snr_db: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<AudioPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Deterministic split: the last `fraction` of pairs (at least one when
    /// the dataset has two or more) becomes the validation set.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if self.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} not in [0, 1)")));
        }
        let mut n_valid = (self.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && self.len() >= 2 {
            n_valid = n_valid.clamp(1, self.len() - 1);
        }
        let cut = self.len() - n_valid;
        Ok((
            Dataset {
                pairs: self.pairs[..cut].to_vec(),
            },
            Dataset {
                pairs: self.pairs[cut..].to_vec(),
            },
        ))
    }
}

/// Aligned crop of `samples` samples at the same offset in both signals;
/// shorter pairs are zero-padded. Returns `(clean, noisy, offset)`.
pub fn crop_pair(pair: &AudioPair, samples: usize, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let len = pair.clean.len();
    if pair.noisy.len() != len {
        return Err(Error::Dataset(format!("{}: clean and noisy lengths differ", pair.name)));
    }
    if samples == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let offset = if len > samples { rng.gen_range(0..=len - samples) } else { 0 };
    let take = |w: &Waveform| {
        let mut v: Vec<f64> = w.samples.iter().skip(offset).take(samples).copied().collect();
        v.resize(samples, 0.0);
        v
    };
    Ok((take(&pair.clean), take(&pair.noisy), offset))
}

/// Power ratio of `clean` to `noisy - clean`, in dB.
pub fn mixture_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let ps: f64 = clean.iter().map(|v| v * v).sum();
    let pn: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c) * (n - c)).sum();
    10.0 * (ps / pn).log10()
}

/// `n_pairs` mixtures of `seconds` each. Clean signals are voiced
/// harmonic syllables; noise is coloured Gaussian noise with bursts.
pub fn synth_dataset(n_pairs: usize, seed: u64, seconds: f64) -> Result<Dataset> {
    if !(seconds > 0.0) {
        return Err(Error::Config("synthetic duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * SAMPLE_RATE as f64).round() as usize;
    let pairs = (0..n_pairs)
        .map(|i| {
            let snr = *SNR_CHOICES_DB.choose(&mut rng).expect("non-empty");
            let pair = synth_pair(len, snr, &mut rng);
            pair.map(|(clean, noisy)| AudioPair {
                name: format!("synth_{i:05}"),
                clean,
                noisy,
                snr_db: Some(snr),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { pairs })
}

fn synth_pair(len: usize, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<(Waveform, Waveform)> {
    let mut clean = synth_speech(len, rng);
    let mut noise = synth_noise(len, rng);
    let pc = power(&clean);
    let pn = power(&noise);
    let noise_gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    noise.iter_mut().for_each(|v| *v *= noise_gain);

    let mut gain = 10f64.powf(rng.gen_range(-GAIN_RANGE_DB..=GAIN_RANGE_DB) / 20.0);
    let peak = clean
        .iter()
        .zip(&noise)
        .map(|(c, n)| (c + n).abs().max(c.abs()))
        .fold(0.0, f64::max);
    if peak * gain > PEAK_LIMIT {
        gain = PEAK_LIMIT / peak;
    }
    clean.iter_mut().for_each(|v| *v *= gain);
    let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + n * gain).collect();
    Ok((Waveform::new(clean)?, Waveform::new(noisy)?))
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn synth_speech(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let base_f0 = rng.gen_range(90.0..260.0);
    let mut out = vec![0.0; len];
    let mut t0 = (rng.gen_range(0.0..0.3) * fs) as usize;
    while t0 < len {
        let dur = (rng.gen_range(0.12..0.4) * fs) as usize;
        let f0 = base_f0 * rng.gen_range(0.8..1.25);
        let glide = rng.gen_range(-0.25..0.25);
        let vib_rate = rng.gen_range(3.0..6.0);
        let formants = [rng.gen_range(400.0..900.0), rng.gen_range(1100.0..2600.0)];
        let widths = [rng.gen_range(150.0..350.0), rng.gen_range(200.0..500.0)];
        let level = rng.gen_range(0.5..1.0);
        let harmonics = ((5000.0 / f0) as usize).max(1);
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let fh = h as f64 * f0;
                let env: f64 = formants
                    .iter()
                    .zip(&widths)
                    .map(|(fc, w)| (-(fh - fc) * (fh - fc) / (2.0 * w * w)).exp())
                    .sum();
                (0.15 + env) / (h as f64).sqrt()
            })
            .collect();
        let mut phase = 0.0;
        for n in 0..dur.min(len - t0) {
            let t = n as f64 / fs;
            let frac = n as f64 / dur as f64;
            let inst = f0 * (1.0 + glide * frac) * (1.0 + 0.02 * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * inst / fs;
            let window = (PI * frac).sin().powi(2);
            let v: f64 = amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum();
            out[t0 + n] += level * window * v;
        }
        t0 += dur + (rng.gen_range(0.04..0.3) * fs) as usize;
    }
    let rms = power(&out).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= CLEAN_RMS / rms);
    }
    out
}

fn synth_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let coloured = if rng.gen_bool(0.5) {
        let cutoff = rng.gen_range(300.0..4000.0);
        let a = (-2.0 * PI * cutoff / fs).exp();
        let mut y = 0.0;
        white
            .iter()
            .map(|&x| {
                y = (1.0 - a) * x + a * y;
                y
            })
            .collect()
    } else {
        bandpass(&white, rng.gen_range(200.0..5000.0), rng.gen_range(0.5..3.0))
    };
    let floor = rng.gen_range(0.1..0.5);
    let mut env = vec![floor; len];
    let bursts = rng.gen_range(1..=(len as f64 / fs * 1.5).ceil().max(1.0) as usize);
    let ramp = (0.02 * fs) as usize;
    for _ in 0..bursts {
        let dur = (rng.gen_range(0.1..0.8) * fs) as usize;
        let start = rng.gen_range(0..len);
        let amp = rng.gen_range(0.5..1.5);
        for n in 0..dur.min(len - start) {
            let edge = (n.min(dur - n) as f64 / ramp as f64).min(1.0);
            env[start + n] += amp * edge;
        }
    }
    coloured.iter().zip(&env).map(|(x, e)| x * e).collect()
}

/// Biquad band-pass with constant peak gain.
fn bandpass(x: &[f64], centre: f64, q: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * centre / SAMPLE_RATE as f64;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&xn| {
            let y = b0 * xn + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = xn;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

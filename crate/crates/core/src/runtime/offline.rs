use crate::dsp::{apply_mask, istft, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::Result;
use crate::gating::PoolingMode;
use crate::model::{forward_infer_offline, InferOptions, InferOutput, ModelWeights};
use crate::tensor::{Real, Tensor};

/// Noisy magnitudes as a `[1, F, L]` model input.
pub fn magnitude_input<T: Real>(x: &Waveform, cfg: &StftConfig) -> Result<(Tensor<T>, ComplexSpectrogram)> {
    let spec = stft(x, cfg)?;
    let (l, f) = (spec.frames, spec.bins);
    let mags = Tensor::from_fn(&[1, f, l], |i| T::lit(spec.data[(i % l) * f + i / l].norm()));
    Ok((mags, spec))
}

/// Whole-utterance enhancement with the filter-skipping offline forward.
pub fn enhance_offline<T: Real>(
    weights: &ModelWeights<T>,
    x: &Waveform,
    cfg: &StftConfig,
    pooling: PoolingMode,
) -> Result<(Waveform, InferOutput<T>)> {
    let (mags, spec) = magnitude_input::<T>(x, cfg)?;
    let out = forward_infer_offline(
        weights,
        &mags,
        &InferOptions {
            pooling,
            forced_gates: None,
        },
    )?;
    let (l, f) = (spec.frames, spec.bins);
    let mask: Vec<f32> = (0..l * f).map(|i| out.mask.data()[(i % f) * l + i / f].as_f64() as f32).collect();
    let y = istft(&apply_mask(&spec, &mask)?)?;
    Ok((y, out))
}

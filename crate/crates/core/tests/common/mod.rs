#![allow(dead_code)]

pub mod fd;
pub mod reference;

use dyncp::model::{init_weights, ModelConfig, ModelWeights};
use dyncp::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(causal: bool, gating: bool) -> ModelConfig {
    ModelConfig {
        c_res: 6,
        c_conv: 10,
        c_gate: 3,
        kernel_size: 3,
        blocks_per_stack: 3,
        stacks: 2,
        freq_bins: 9,
        causal,
        gating_enabled: gating,
        pool_frames: Some(8),
    }
}

/// Initialization plus random biases, norm parameters, slopes and running
/// statistics, so that every term of the network is exercised.
pub fn randomized<T: Real>(cfg: &ModelConfig, seed: u64) -> ModelWeights<T> {
    let mut w = init_weights::<T>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    w.params.visit_mut(|name, t| {
        if name.ends_with("bias") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-0.3..0.3)));
        } else if name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(0.5..1.5)));
        } else if name.contains("prelu") {
            t.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(0.05..0.5)));
        }
    });
    for s in &mut w.stats {
        for r in [&mut s.bn1, &mut s.bn2] {
            r.mean.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-0.5..0.5)));
            r.var.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(0.3..2.0)));
        }
    }
    w
}

pub fn random_input<T: Real>(n: usize, f: usize, l: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, f, l], |_| T::lit(rng.gen_range(0.0..2.0)))
}

pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Tiny gated model trained with a dominant ratio penalty on one fixed
/// batch of random signals. Returns the hard-gate active fraction averaged
/// over the last 20 steps.
pub fn ratio_after_penalty_training(target: f64, steps: usize, seed: u64) -> f64 {
    use dyncp::training::{Batch, Trainer};

    let mut cfg = tiny_train_config(true);
    cfg.loss.target_ratio = target;
    cfg.loss.lambda_dcp = 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signals: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
        .map(|_| {
            let clean: Vec<f64> = (0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let noisy = clean.iter().map(|c| c + rng.gen_range(-0.3..0.3)).collect();
            (clean, noisy)
        })
        .collect();
    let batch = Batch::<f32>::from_signals(&signals, &cfg.stft).unwrap();
    let weights = init_weights::<f32>(&cfg.model, seed).unwrap();
    let mut trainer = Trainer::new(weights, cfg, seed).unwrap();
    let window = 20;
    let mut tail = Vec::new();
    for step in 0..steps {
        let s = trainer.step(&batch).unwrap();
        if step + window >= steps {
            tail.push(s.realized_ratio.unwrap());
        }
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Training setup for [`tiny_config`]: a 16-sample STFT gives its 9 bins.
pub fn tiny_train_config(gating: bool) -> dyncp::training::TrainConfig {
    let mut cfg = dyncp::training::TrainConfig {
        model: tiny_config(false, gating),
        stft: dyncp::dsp::StftConfig {
            window_length: 16,
            hop: 8,
            ..Default::default()
        },
        segment_seconds: 0.25,
        ..Default::default()
    };
    cfg.optim.batch_size = 8;
    cfg
}

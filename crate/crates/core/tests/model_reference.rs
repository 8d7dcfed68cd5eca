mod common;

use common::reference::{reference_forward, GateRule};
use common::{max_abs_diff, random_input, randomized, tiny_config};
use dyncp::gating::GateMask;
use dyncp::model::{forward_infer_offline, forward_train, receptive_field, ForwardOptions, InferOptions};
use dyncp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 2;
const L: usize = 40;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn tape_forward_matches_reference_in_both_phases() {
    for causal in [false, true] {
        for gating in [false, true] {
            let cfg = tiny_config(causal, gating);
            let w = randomized::<f64>(&cfg, 3);
            let x = random_input::<f64>(N, cfg.freq_bins, L, 4);
            for train in [false, true] {
                let mut opts = ForwardOptions::eval(&cfg);
                if train {
                    opts = ForwardOptions::train(&cfg, dyncp::gating::BinarizationMode::SuperSpike { nu: 1.0 });
                }
                let (mask, gates) = forward_train(&w, &x, &opts, &mut rng()).unwrap();
                let r = reference_forward(&w, x.data(), N, L, train, GateRule::Hard);
                assert!(max_abs_diff(mask.data(), &r.mask) < 1e-12, "causal={causal} gating={gating} train={train}");
                if let Some(g) = gates {
                    for (i, rg) in r.gates.iter().enumerate() {
                        assert_eq!(g.block_tensor::<f64>(i).data(), rg.as_slice());
                    }
                }
            }
        }
    }
}

#[test]
fn offline_runtime_matches_reference() {
    for causal in [false, true] {
        let cfg = tiny_config(causal, true);
        let w = randomized::<f64>(&cfg, 5);
        let x = random_input::<f64>(N, cfg.freq_bins, L, 6);
        let out = forward_infer_offline(
            &w,
            &x,
            &InferOptions {
                pooling: cfg.training_pooling(),
                forced_gates: None,
            },
        )
        .unwrap();
        let r = reference_forward(&w, x.data(), N, L, false, GateRule::Hard);
        assert!(max_abs_diff(out.mask.data(), &r.mask) < 1e-12);
    }
}

#[test]
fn forced_gates_match_reference() {
    let cfg = tiny_config(false, false);
    let w = randomized::<f64>(&cfg, 7);
    let x = random_input::<f64>(N, cfg.freq_bins, L, 8);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let blocks = cfg.total_blocks();
    let g = GateMask::new(N, cfg.c_res, L, blocks, (0..N * cfg.c_res * L * blocks).map(|_| r.gen_bool(0.4)).collect()).unwrap();
    let opts = ForwardOptions {
        forced_gates: Some(&g),
        ..ForwardOptions::eval(&cfg)
    };
    let (mask, _) = forward_train(&w, &x, &opts, &mut rng()).unwrap();
    let reference = reference_forward(&w, x.data(), N, L, false, GateRule::Forced(&g));
    assert!(max_abs_diff(mask.data(), &reference.mask) < 1e-12);
}

fn eval_mask(w: &dyncp::model::ModelWeights<f64>, x: &Tensor<f64>) -> Vec<f64> {
    forward_train(w, x, &ForwardOptions::eval(&w.config), &mut rng()).unwrap().0.into_data()
}

fn changed_frames(a: &[f64], b: &[f64], f: usize, l: usize) -> Vec<usize> {
    (0..l)
        .filter(|&t| (0..f).any(|fi| a[fi * l + t] != b[fi * l + t]))
        .collect()
}

#[test]
fn causal_outputs_ignore_future_frames() {
    let cfg = tiny_config(true, true);
    let w = randomized::<f64>(&cfg, 11);
    let x = random_input::<f64>(1, cfg.freq_bins, L, 12);
    let base = eval_mask(&w, &x);
    let t0 = 25;
    let mut y = x.clone();
    for fi in 0..cfg.freq_bins {
        y.data_mut()[fi * L + t0] += 1.0;
    }
    let changed = changed_frames(&base, &eval_mask(&w, &y), cfg.freq_bins, L);
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&t| t >= t0), "{changed:?}");
}

#[test]
fn influence_is_limited_to_the_receptive_field() {
    let rf = receptive_field(&tiny_config(true, false));
    assert_eq!(rf, 2 * 2 * 7 + 1);
    for causal in [true, false] {
        let cfg = tiny_config(causal, false);
        let w = randomized::<f64>(&cfg, 13);
        let l = 80;
        let x = random_input::<f64>(1, cfg.freq_bins, l, 14);
        let base = eval_mask(&w, &x);
        let t0 = 40;
        let mut y = x.clone();
        for fi in 0..cfg.freq_bins {
            y.data_mut()[fi * l + t0] += 1.0;
        }
        let changed = changed_frames(&base, &eval_mask(&w, &y), cfg.freq_bins, l);
        let (lo, hi) = if causal { (t0, t0 + rf - 1) } else { (t0 - (rf - 1) / 2, t0 + (rf - 1) / 2) };
        assert!(changed.iter().all(|&t| (lo..=hi).contains(&t)), "causal={causal}: {changed:?}");
        assert!(changed.contains(&lo) && changed.contains(&hi), "causal={causal}: {changed:?}");
    }
}

//! Central finite differences against the tape's reverse sweep.

use dyncp::gating::BinarizationMode;
use dyncp::model::{forward_on_tape, ForwardOptions, ModelConfig, ModelWeights};
use dyncp::tensor::{ConvPadding, Tape, Tensor, Var};
use dyncp::training::{loss_dcp_on_tape, loss_se_masked, loss_se_on_tape};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::randomized;
use super::reference::{reference_dcp, reference_forward, GateRule};

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Gradient of `sum(R * op(inputs))` for a fixed random `R`, checked
/// coordinate by coordinate. Returns the largest relative error.
pub fn check_op(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..tape.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        tape.value(y).data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let value = tape.value(y).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
    let loss = tape.reduce(&[y], value, vec![weights.clone()]).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic.data()[idx]));
        }
    }
    worst
}

/// Random tensor with entries bounded away from zero, keeping kinks out of
/// the finite-difference stencil.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every recorded operator, with the largest relative error of each.
pub fn all_operator_errors() -> Vec<(&'static str, f64)> {
    let x = away_from_zero(&[2, 3, 7], 1);
    let x4 = away_from_zero(&[2, 4, 7], 2);
    let pos = |shape: &[usize], seed| away_from_zero(shape, seed).map(|v| v.abs() + 0.5);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    out.push((
        "pointwise_conv",
        check_op(
            &[x.clone(), away_from_zero(&[4, 3, 1], 3), away_from_zero(&[4], 4)],
            &|t, v| t.pointwise_conv(v[0], v[1], v[2]).unwrap(),
            10,
        ),
    ));
    for (name, padding) in [("depthwise_conv causal", ConvPadding::Causal), ("depthwise_conv symmetric", ConvPadding::Symmetric)] {
        out.push((
            name,
            check_op(
                &[x.clone(), away_from_zero(&[3, 1, 3], 5), away_from_zero(&[3], 6)],
                &move |t, v| t.depthwise_conv(v[0], v[1], v[2], 2, padding).unwrap(),
                11,
            ),
        ));
    }
    out.push((
        "prelu",
        check_op(&[x.clone(), pos(&[3], 7).map(|v| v - 0.3)], &|t, v| t.prelu(v[0], v[1]).unwrap(), 12),
    ));
    out.push(("relu", check_op(&[x.clone()], &|t, v| t.relu(v[0]), 13)));
    out.push(("sigmoid", check_op(&[x.clone()], &|t, v| t.sigmoid(v[0]), 14)));
    out.push((
        "batch_norm_train",
        check_op(
            &[x4.clone(), pos(&[4], 8), away_from_zero(&[4], 9)],
            &|t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
            15,
        ),
    ));
    out.push((
        "batch_norm_eval",
        check_op(
            &[x4.clone(), pos(&[4], 16), away_from_zero(&[4], 17)],
            &|t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[0.5, 1.0, 2.0, 0.7], 1e-5).unwrap(),
            18,
        ),
    ));
    let y = away_from_zero(&[2, 3, 7], 19);
    out.push(("add", check_op(&[x.clone(), y.clone()], &|t, v| t.add(v[0], v[1]).unwrap(), 20)));
    out.push(("mul", check_op(&[x.clone(), y.clone()], &|t, v| t.mul(v[0], v[1]).unwrap(), 21)));
    out.push((
        "weighted_sum",
        check_op(&[x.clone(), y.clone()], &|t, v| t.weighted_sum(&[(v[0], 0.7), (v[1], -1.3), (v[0], 0.2)]).unwrap(), 22),
    ));
    out.push(("mean", check_op(&[x.clone()], &|t, v| t.mean(v[0]), 23)));
    out.push(("moving_average", check_op(&[x.clone()], &|t, v| t.moving_average(v[0], 3).unwrap(), 24)));
    out.push((
        "local_grad",
        check_op(
            &[x.clone()],
            &|t, v| {
                let xs = t.value(v[0]).clone();
                let value = xs.map(|a| a * a * a);
                let local = xs.data().iter().map(|a| 3.0 * a * a).collect();
                t.local_grad(v[0], value, local).unwrap()
            },
            25,
        ),
    ));
    out.push((
        "reduce",
        check_op(
            &[x.clone(), y.clone()],
            &|t, v| {
                let a = t.value(v[0]).data().to_vec();
                let b = t.value(v[1]).data().to_vec();
                let value = a.iter().zip(&b).map(|(p, q)| p * p * q).sum();
                let pa = a.iter().zip(&b).map(|(p, q)| 2.0 * p * q).collect();
                let pb = a.iter().map(|p| p * p).collect();
                t.reduce(&[v[0], v[1]], value, vec![pa, pb]).unwrap()
            },
            26,
        ),
    ));
    out
}

/// Tiny gated model used for the end-to-end check.
pub fn e2e_config() -> ModelConfig {
    ModelConfig {
        c_res: 4,
        c_conv: 6,
        c_gate: 3,
        kernel_size: 3,
        blocks_per_stack: 2,
        stacks: 2,
        freq_bins: 5,
        causal: false,
        gating_enabled: true,
        pool_frames: Some(4),
    }
}

fn sigmoid_phi(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn superspike_phi(s: f64) -> f64 {
    s / (1.0 + s.abs())
}

/// Compares the tape gradient of `SE/(N F L) + lambda * DCP` with central
/// differences of an independently computed objective. For the
/// straight-through modes the differenced objective replaces each hard gate
/// by `H(s0) + phi(s) - phi(s0)`, where `phi` is the antiderivative of the
/// surrogate (unit temperature) and `s0` the scores at the expansion point;
/// it has the same value and its exact gradient is the surrogate gradient.
/// Binary Concrete is differentiable as sampled and is differenced
/// directly with the same uniforms. Returns the largest relative error.
pub fn end_to_end_error(mode: BinarizationMode, seed: u64) -> f64 {
    end_to_end_error_with(&e2e_config(), mode, seed)
}

pub fn end_to_end_error_with(cfg: &ModelConfig, mode: BinarizationMode, seed: u64) -> f64 {
    let cfg = cfg.clone();
    let mut w = randomized::<f64>(&cfg, seed);
    // With a hard gate off and a zero front activation, the pre-activation
    // of a between-stack ReLU is exactly 0, a kink that central differences
    // cannot resolve. A positive front bias keeps every such point smooth.
    w.params.front.bias.data_mut().iter_mut().for_each(|b| *b = 3.0);
    let (n, f, l) = (2, cfg.freq_bins, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut spec = || -> Vec<Complex64> { (0..n * f * l).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect() };
    let clean = spec();
    let noisy = spec();
    let input = Tensor::new(&[n, f, l], noisy.iter().map(|z| z.norm()).collect()).unwrap();
    let (alpha, c, target, lambda) = (0.3, 0.3, 0.25, 0.8);
    let scale = 1.0 / (n * f * l) as f64;
    let rng_seed = seed + 2;

    let mut tape = Tape::new();
    let vars = w.params.map(|t| tape.leaf(t.clone()));
    let x = tape.constant(input.clone());
    let opts = ForwardOptions::train(&cfg, mode);
    let pass = forward_on_tape(&mut tape, &vars, &w, x, &opts, &mut ChaCha8Rng::seed_from_u64(rng_seed)).unwrap();
    let se = loss_se_on_tape(&mut tape, pass.mask, &clean, &noisy, alpha, c, scale).unwrap();
    let dcp = loss_dcp_on_tape(&mut tape, &pass.gates, target).unwrap();
    let obj = tape.weighted_sum(&[(se, 1.0), (dcp, lambda)]).unwrap();
    let tape_value = tape.value(obj).item();
    let grads = tape.backward(obj).unwrap();

    let base = reference_forward(&w, input.data(), n, l, true, GateRule::Hard);
    let objective = |wp: &ModelWeights<f64>| -> f64 {
        let rule = match mode {
            BinarizationMode::SigmoidSurrogate { .. } => GateRule::Twin { base: &base.scores, phi: sigmoid_phi },
            BinarizationMode::SuperSpike { .. } => GateRule::Twin { base: &base.scores, phi: superspike_phi },
            BinarizationMode::BinaryConcrete { lambda } => GateRule::Concrete {
                lambda,
                rng: ChaCha8Rng::seed_from_u64(rng_seed),
            },
            BinarizationMode::Heaviside => GateRule::Twin { base: &base.scores, phi: |_| 0.0 },
        };
        let r = reference_forward(wp, input.data(), n, l, true, rule);
        let (se, _) = loss_se_masked(&clean, &noisy, &r.mask, alpha, c).unwrap();
        se * scale + lambda * reference_dcp(&r.gates, n, cfg.c_res, l, target)
    };
    assert!(
        (objective(&w) - tape_value).abs() < 1e-10 * tape_value.abs().max(1.0),
        "reference objective disagrees with the tape"
    );

    let h = 1e-6;
    let analytic: Vec<Tensor<f64>> = vars
        .leaves()
        .into_iter()
        .zip(w.params.leaves())
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    let count = analytic.len();
    let mut worst = 0.0f64;
    for k in 0..count {
        for idx in 0..analytic[k].len() {
            let shifted = |delta: f64| {
                let mut wp = w.clone();
                wp.params.leaves_mut()[k].data_mut()[idx] += delta;
                objective(&wp)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic[k].data()[idx]));
        }
    }
    worst
}

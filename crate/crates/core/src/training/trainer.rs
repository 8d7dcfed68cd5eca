//! Mini-batch training loop shared by baseline training and gated
//! fine-tuning.

use log::{debug, info};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, OptimizerConfig};
use super::data::{crop_pair, AudioPair, Dataset};
use super::loss::{loss_dcp, loss_dcp_on_tape, loss_se_masked, loss_se_on_tape};
use crate::dsp::{stft, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::gating::{BinarizationMode, GateMask};
use crate::model::{
    forward_infer_offline, forward_on_tape, init_weights, ForwardOptions, InferOptions, ModelConfig, ModelWeights,
};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub compression: f64,
    /// Target fraction of active channels.
    pub target_ratio: f64,
    pub lambda_dcp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            compression: 0.3,
            target_ratio: 0.25,
            lambda_dcp: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!("compression {} not in (0, 1]", self.compression)));
        }
        if !(0.0..=1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!("target_ratio {} not in [0, 1]", self.target_ratio)));
        }
        if !(self.lambda_dcp >= 0.0) {
            return Err(Error::Config(format!("lambda_dcp {} must be >= 0", self.lambda_dcp)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimizerConfig,
    pub stft: StftConfig,
    pub binarization: BinarizationMode,
    pub segment_seconds: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimizerConfig::default(),
            stft: StftConfig::default(),
            binarization: BinarizationMode::default(),
            segment_seconds: 4.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.stft.validate()?;
        self.binarization.validate()?;
        if self.stft.bins() != self.model.freq_bins {
            return Err(Error::Config(format!(
                "STFT yields {} bins, model expects {}",
                self.stft.bins(),
                self.model.freq_bins
            )));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's batches (absent at epoch 0).
    pub train_loss: Option<f64>,
    pub train_se: Option<f64>,
    pub train_dcp: Option<f64>,
    /// Per-bin validation enhancement loss.
    pub valid_se: Option<f64>,
    pub valid_dcp: Option<f64>,
    /// Mean fraction of active channels on validation data.
    pub realized_ratio: Option<f64>,
    pub lr: f64,
}

pub fn history_to_jsonl(records: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the best validation round.
    pub weights: ModelWeights<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Network input and loss targets for a batch, all in `[N, F, L]` order.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub clean: Vec<Complex64>,
    pub noisy: Vec<Complex64>,
}

impl<T: Real> Batch<T> {
    /// Stacks equal-length `(clean, noisy)` signals.
    pub fn from_signals(signals: &[(Vec<f64>, Vec<f64>)], cfg: &StftConfig) -> Result<Self> {
        let first = signals.first().ok_or(Error::Empty("batch"))?;
        let len = first.0.len();
        let frames = cfg.frames_for(len);
        let bins = cfg.bins();
        let n = signals.len();
        let mut clean = vec![Complex64::new(0.0, 0.0); n * bins * frames];
        let mut noisy = clean.clone();
        for (ni, (c, x)) in signals.iter().enumerate() {
            if c.len() != len || x.len() != len {
                return Err(Error::Shape("batch signals differ in length".into()));
            }
            let sc = stft(&Waveform::new(c.clone())?, cfg)?;
            let sx = stft(&Waveform::new(x.clone())?, cfg)?;
            for l in 0..frames {
                for f in 0..bins {
                    let dst = (ni * bins + f) * frames + l;
                    clean[dst] = sc.data[l * bins + f];
                    noisy[dst] = sx.data[l * bins + f];
                }
            }
        }
        let input = Tensor::new(&[n, bins, frames], noisy.iter().map(|z| T::lit(z.norm())).collect())?;
        Ok(Self { input, clean, noisy })
    }

    pub fn from_pairs(pairs: &[&AudioPair], cfg: &StftConfig) -> Result<Self> {
        let signals: Vec<_> = pairs.iter().map(|p| (p.clean.samples.clone(), p.noisy.samples.clone())).collect();
        Self::from_signals(&signals, cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    /// Per-bin enhancement loss.
    pub se: f64,
    pub dcp: Option<f64>,
    pub realized_ratio: Option<f64>,
}

/// Optimizer state bound to one set of weights.
pub struct Trainer<T> {
    pub weights: ModelWeights<T>,
    pub cfg: TrainConfig,
    pub lr: f64,
    adam: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(weights: ModelWeights<T>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if weights.config != cfg.model {
            return Err(Error::Config("weights were built for a different model config".into()));
        }
        let lr = cfg.optim.learning_rate;
        Ok(Self {
            weights,
            cfg,
            lr,
            adam: Adam::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Forward, backward, parameter update and running-statistics update.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepStats> {
        let (n, f, l) = batch.input.dims3()?;
        let gated = self.weights.config.gating_enabled;
        let loss_cfg = self.cfg.loss;
        let mut tape = Tape::new();
        let vars = self.weights.params.map(|t| tape.leaf(t.clone()));
        let x = tape.constant(batch.input.clone());
        let opts = ForwardOptions::train(&self.weights.config, self.cfg.binarization);
        let pass = forward_on_tape(&mut tape, &vars, &self.weights, x, &opts, &mut self.rng)?;

        let scale = 1.0 / (n * f * l) as f64;
        let se = loss_se_on_tape(
            &mut tape,
            pass.mask,
            &batch.clean,
            &batch.noisy,
            loss_cfg.alpha,
            loss_cfg.compression,
            scale,
        )?;
        let se_value = tape.value(se).item().as_f64();
        let (objective, dcp_value, ratio) = if gated {
            let dcp = loss_dcp_on_tape(&mut tape, &pass.gates, loss_cfg.target_ratio)?;
            let dcp_value = tape.value(dcp).item().as_f64();
            let ratio = mean_of(pass.gates.iter().map(|g| tape.value(*g)));
            let total = tape.weighted_sum(&[(se, T::one()), (dcp, T::lit(loss_cfg.lambda_dcp))])?;
            (total, Some(dcp_value), Some(ratio))
        } else {
            (se, None, None)
        };
        let total = tape.value(objective).item().as_f64();
        if !total.is_finite() {
            return Err(Error::Numerical(format!("training objective is {total}")));
        }

        let grads = tape.backward(objective)?;
        let grad_tensors: Vec<Tensor<T>> = vars
            .leaves()
            .into_iter()
            .zip(self.weights.params.leaves())
            .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
            .collect();
        let grad_refs: Vec<&Tensor<T>> = grad_tensors.iter().collect();
        self.adam.step(self.weights.params.leaves_mut(), &grad_refs, self.lr, &self.cfg.optim)?;

        let count = n * l;
        for (stats, (s1, s2)) in self.weights.stats.iter_mut().zip(&pass.bn_batch_stats) {
            stats.bn1.update(&s1.mean, &s1.var, count);
            stats.bn2.update(&s2.mean, &s2.var, count);
        }
        Ok(StepStats {
            total,
            se: se_value,
            dcp: dcp_value,
            realized_ratio: ratio,
        })
    }

    /// Eval-mode losses over whole utterances, averaged per utterance.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        evaluate(&self.weights, &self.cfg, data)
    }
}

fn mean_of<'a, T: Real + 'a>(tensors: impl Iterator<Item = &'a Tensor<T>>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for t in tensors {
        sum += t.data().iter().map(|v| v.as_f64()).sum::<f64>();
        count += t.len();
    }
    sum / count.max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub se: f64,
    pub dcp: Option<f64>,
    pub realized_ratio: Option<f64>,
}

impl Evaluation {
    /// Model-selection metric: enhancement loss, plus the weighted ratio
    /// penalty for gated models.
    pub fn metric(&self, loss: &LossConfig) -> f64 {
        self.se + self.dcp.map_or(0.0, |d| loss.lambda_dcp * d)
    }
}

pub fn evaluate<T: Real>(weights: &ModelWeights<T>, cfg: &TrainConfig, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let opts = InferOptions {
        pooling: weights.config.training_pooling(),
        forced_gates: None,
    };
    let (mut se, mut dcp, mut ratio) = (0.0, 0.0, 0.0);
    for pair in &data.pairs {
        let batch = Batch::<T>::from_pairs(&[pair], &cfg.stft)?;
        let out = forward_infer_offline(weights, &batch.input, &opts)?;
        let (value, _) = loss_se_masked(&batch.clean, &batch.noisy, out.mask.data(), cfg.loss.alpha, cfg.loss.compression)?;
        se += value / out.mask.len() as f64;
        if let Some(g) = &out.gates {
            dcp += loss_dcp(g, cfg.loss.target_ratio);
            ratio += g.active_fraction();
        }
    }
    let count = data.len() as f64;
    if !se.is_finite() {
        return Err(Error::Numerical(format!("validation loss is {se}")));
    }
    let gated = weights.config.gating_enabled;
    Ok(Evaluation {
        se: se / count,
        dcp: gated.then_some(dcp / count),
        realized_ratio: gated.then_some(ratio / count),
    })
}

/// Gates of one utterance under eval-mode inference.
pub fn utterance_gates<T: Real>(weights: &ModelWeights<T>, pair: &AudioPair, stft_cfg: &StftConfig) -> Result<Option<GateMask>> {
    let batch = Batch::<T>::from_pairs(&[pair], stft_cfg)?;
    let opts = InferOptions {
        pooling: weights.config.training_pooling(),
        forced_gates: None,
    };
    Ok(forward_infer_offline(weights, &batch.input, &opts)?.gates)
}

/// Trains a model without gating from a fresh initialization.
pub fn train_baseline(cfg: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.model.gating_enabled = false;
    let weights = init_weights::<f32>(&cfg.model, seed)?;
    fit(weights, &cfg, dataset, seed)
}

/// Adds fresh gating subnets to `baseline` and trains everything jointly
/// with the ratio penalty.
pub fn finetune_dyncp(baseline: &ModelWeights<f32>, cfg: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    let mut expected = cfg.model.clone();
    expected.gating_enabled = false;
    let mut found = baseline.config.clone();
    found.gating_enabled = false;
    if expected != found {
        return Err(Error::Config("baseline weights do not match the fine-tuning model config".into()));
    }
    let mut cfg = cfg.clone();
    cfg.model.gating_enabled = true;
    let weights = if baseline.config.gating_enabled {
        baseline.clone()
    } else {
        baseline.with_gating(seed ^ 0x9e37_79b9_7f4a_7c15)?
    };
    fit(weights, &cfg, dataset, seed)
}

fn fit(weights: ModelWeights<f32>, cfg: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let (train, valid) = dataset.split(cfg.validation_fraction)?;
    let valid = if valid.is_empty() { train.clone() } else { valid };
    let mut trainer = Trainer::new(weights, cfg.clone(), seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let opt = cfg.optim;
    let segment = cfg.segment_samples();

    let eval0 = trainer.evaluate(&valid)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        train_se: None,
        train_dcp: None,
        valid_se: Some(eval0.se),
        valid_dcp: eval0.dcp,
        realized_ratio: eval0.realized_ratio,
        lr: trainer.lr,
    }];
    let mut plateau = Plateau::new(trainer.lr, eval0.metric(&cfg.loss), &opt);
    let mut best_weights = trainer.weights.clone();
    let mut best_epoch = 0;
    info!("epoch 0: valid_se {:.5} ratio {:?}", eval0.se, eval0.realized_ratio);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opt.max_epochs {
        order.shuffle(&mut data_rng);
        let (mut sum_total, mut sum_se, mut sum_dcp, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(opt.batch_size) {
            let signals = chunk
                .iter()
                .map(|&i| crop_pair(&train.pairs[i], segment, &mut data_rng).map(|(c, x, _)| (c, x)))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_signals(&signals, &cfg.stft)?;
            let stats = trainer
                .step(&batch)
                .map_err(|e| annotate_numerical(e, epoch, batches))?;
            sum_total += stats.total;
            sum_se += stats.se;
            sum_dcp += stats.dcp.unwrap_or(0.0);
            batches += 1;
        }
        let nb = batches as f64;
        let gated = trainer.weights.config.gating_enabled;
        let mut record = EpochRecord {
            epoch,
            train_loss: Some(sum_total / nb),
            train_se: Some(sum_se / nb),
            train_dcp: gated.then_some(sum_dcp / nb),
            valid_se: None,
            valid_dcp: None,
            realized_ratio: None,
            lr: trainer.lr,
        };
        if epoch % opt.validation_every == 0 || epoch == opt.max_epochs {
            let ev = trainer.evaluate(&valid)?;
            record.valid_se = Some(ev.se);
            record.valid_dcp = ev.dcp;
            record.realized_ratio = ev.realized_ratio;
            if plateau.observe(ev.metric(&cfg.loss)) {
                best_weights = trainer.weights.clone();
                best_epoch = epoch;
            } else if plateau.lr != trainer.lr {
                debug!("epoch {epoch}: learning rate decayed to {}", plateau.lr);
            }
            trainer.lr = plateau.lr;
            info!(
                "epoch {epoch}: train {:.5} valid_se {:.5} ratio {:?}",
                sum_total / nb,
                ev.se,
                ev.realized_ratio
            );
        }
        history.push(record);
        if epoch - best_epoch >= opt.patience {
            info!("early stop at epoch {epoch}, best {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        weights: best_weights,
        history,
        best_epoch,
        best_metric: plateau.best,
    })
}

/// Best-so-far tracking with step decay of the learning rate after
/// `lr_patience` validation rounds without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    stale: usize,
    decay: f64,
    patience: usize,
}

impl Plateau {
    pub fn new(lr: f64, initial: f64, cfg: &OptimizerConfig) -> Self {
        Self {
            lr,
            best: initial,
            stale: 0,
            decay: cfg.lr_decay,
            patience: cfg.lr_patience,
        }
    }

    /// Returns `true` when `metric` is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.decay;
            self.stale = 0;
        }
        false
    }
}

fn annotate_numerical(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

//! The toy quantized CNN and its training loop.
//!
//! Architecture `toy-cnn-v1`:
//! conv(1->8, 3x3, s2, p1) -> ReLU -> conv(8->16, 3x3, s2, p1) -> ReLU ->
//! fc(256->64) -> ReLU -> fc(64->10), with a quantization site after each
//! ReLU. Weights are 8-bit shadow-quantized; activations use the
//! learnable-clip quantizer.
//!
//! Training follows the fine-tuning protocol: pre-train in float, calibrate
//! the clip parameters on one batch, then fine-tune with the quantizers
//! active and the total loss `task + lambda * regularizer`.

use crate::config::{LayerWeighting, LossMode, TrainingConfig};
use crate::data::{DataError, Dataset};
use crate::entropy::{empirical_entropy, EntropyError, Histogram};
use crate::quant::{calibrate_alpha, symbol_indices, QuantizerState, ALPHA_FLOOR};
use crate::tape::{conv_out_dim, sgd_step, Grads, Tape, VarId};
use crate::tensor::{Tensor, TensorError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const ARCH_TOY_CNN_V1: &str = "toy-cnn-v1";
pub const NUM_SITES: usize = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (NaN/Inf) during {phase} at epoch {epoch}, step {step}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
}

/// Static description of the toy architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub token: String,
    pub in_channels: usize,
    pub image_side: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub fc1_out: usize,
    pub classes: usize,
}

impl Arch {
    pub fn from_token(token: &str) -> Result<Arch, TrainError> {
        if token != ARCH_TOY_CNN_V1 {
            return Err(TrainError::UnknownArch(token.to_string()));
        }
        Ok(Arch {
            token: token.to_string(),
            in_channels: 1,
            image_side: 16,
            conv1_out: 8,
            conv2_out: 16,
            kernel: 3,
            stride: 2,
            pad: 1,
            fc1_out: 64,
            classes: 10,
        })
    }

    fn conv1_side(&self) -> usize {
        conv_out_dim(self.image_side, self.kernel, self.stride, self.pad)
    }

    fn conv2_side(&self) -> usize {
        conv_out_dim(self.conv1_side(), self.kernel, self.stride, self.pad)
    }

    pub fn flat_features(&self) -> usize {
        self.conv2_out * self.conv2_side() * self.conv2_side()
    }
}

/// Trainable tensor with its SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    velocity: Vec<f64>,
}

impl Param {
    fn new(name: &str, value: Tensor) -> Param {
        let velocity = vec![0.0; value.len()];
        Param {
            name: name.to_string(),
            value,
            velocity,
        }
    }
}

/// Which view of the network a forward pass sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Plain float network; no clipping, no rounding.
    Float,
    /// Quantized weights and activations (inference path).
    Quantized,
    /// Clip-only activations, full-precision weights: the forward the
    /// straight-through gradient is exact for. Used by gradient checks.
    Surrogate,
}

const WEIGHT_PARAMS: usize = 8;

pub struct ForwardPass {
    pub logits: VarId,
    /// Clipped (pre-round) activations at each quantization site; raw ReLU
    /// outputs in float mode.
    pub taps: Vec<VarId>,
    /// Rounded activations at each site (same as taps when not rounding).
    pub quantized: Vec<VarId>,
    /// Tape variable of every parameter, parallel to `Model::params`.
    pub param_vars: Vec<VarId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub params: Vec<Param>,
    pub bits: u8,
}

impl Model {
    /// Fresh model with seeded He-style initialization. Clip parameters
    /// start at 1.0 and are meaningless until calibration.
    pub fn new(arch: Arch, bits: u8, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let k = arch.kernel;

        let mut init = |name: &str, shape: Vec<usize>, fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let t = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
            Param::new(name, t)
        };

        params.push(init(
            "conv1.weight",
            vec![arch.conv1_out, arch.in_channels, k, k],
            arch.in_channels * k * k,
        ));
        params.push(Param::new(
            "conv1.bias",
            Tensor::zeros(vec![arch.conv1_out]),
        ));
        params.push(init(
            "conv2.weight",
            vec![arch.conv2_out, arch.conv1_out, k, k],
            arch.conv1_out * k * k,
        ));
        params.push(Param::new(
            "conv2.bias",
            Tensor::zeros(vec![arch.conv2_out]),
        ));
        params.push(init(
            "fc1.weight",
            vec![arch.flat_features(), arch.fc1_out],
            arch.flat_features(),
        ));
        params.push(Param::new("fc1.bias", Tensor::zeros(vec![arch.fc1_out])));
        params.push(init(
            "fc2.weight",
            vec![arch.fc1_out, arch.classes],
            arch.fc1_out,
        ));
        params.push(Param::new("fc2.bias", Tensor::zeros(vec![arch.classes])));
        for site in 0..NUM_SITES {
            params.push(Param::new(
                &format!("site{site}.alpha"),
                Tensor::scalar(1.0),
            ));
        }
        Model { arch, params, bits }
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn alpha(&self, site: usize) -> f64 {
        self.params[WEIGHT_PARAMS + site].value.item()
    }

    pub fn set_alpha(&mut self, site: usize, alpha: f64) {
        self.params[WEIGHT_PARAMS + site].value = Tensor::scalar(alpha);
    }

    pub fn quantizer(&self, site: usize) -> QuantizerState {
        QuantizerState::new(self.alpha(site).max(ALPHA_FLOOR), self.bits)
            .expect("bits validated at construction")
    }

    /// Record one forward pass on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        mode: QuantMode,
    ) -> Result<ForwardPass, TensorError> {
        if images.shape().len() != 4
            || images.shape()[1] != self.arch.in_channels
            || images.shape()[2] != self.arch.image_side
            || images.shape()[3] != self.arch.image_side
        {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                left: images.shape().to_vec(),
                right: vec![
                    images.shape().first().copied().unwrap_or(0),
                    self.arch.in_channels,
                    self.arch.image_side,
                    self.arch.image_side,
                ],
            });
        }
        let batch = images.shape()[0];
        let param_vars: Vec<VarId> = self
            .params
            .iter()
            .map(|p| tape.input(p.value.clone()))
            .collect();
        let weight = |i: usize| param_vars[i];

        let mut taps = Vec::new();
        let mut quantized = Vec::new();
        let mut site = 0usize;

        let mut activation = |tape: &mut Tape, x: VarId| -> Result<VarId, TensorError> {
            let a = tape.relu(x);
            let out = match mode {
                QuantMode::Float => {
                    taps.push(a);
                    quantized.push(a);
                    a
                }
                QuantMode::Quantized | QuantMode::Surrogate => {
                    let alpha_var = param_vars[WEIGHT_PARAMS + site];
                    let alpha = self.alpha(site).max(ALPHA_FLOOR);
                    taps.push(tape.clip_tap(a, alpha));
                    let round = mode == QuantMode::Quantized;
                    let q = tape.quantize_ste(a, alpha_var, self.bits, round)?;
                    quantized.push(q);
                    q
                }
            };
            site += 1;
            Ok(out)
        };

        let use_weight = |tape: &mut Tape, w: VarId| -> VarId {
            if mode == QuantMode::Quantized {
                tape.quantize_weights(w)
            } else {
                w
            }
        };

        let x = tape.input(images.clone());
        let w1 = use_weight(tape, weight(0));
        let c1 = tape.conv2d(x, w1, self.arch.stride, self.arch.pad)?;
        let c1 = tape.bias_channels(c1, weight(1))?;
        let a1 = activation(tape, c1)?;

        let w2 = use_weight(tape, weight(2));
        let c2 = tape.conv2d(a1, w2, self.arch.stride, self.arch.pad)?;
        let c2 = tape.bias_channels(c2, weight(3))?;
        let a2 = activation(tape, c2)?;

        let flat = tape.reshape(a2, vec![batch, self.arch.flat_features()])?;
        let w3 = use_weight(tape, weight(4));
        let f1 = tape.matmul(flat, w3)?;
        let f1 = tape.bias_rows(f1, weight(5))?;
        let a3 = activation(tape, f1)?;

        let w4 = use_weight(tape, weight(6));
        let logits = tape.matmul(a3, w4)?;
        let logits = tape.bias_rows(logits, weight(7))?;

        Ok(ForwardPass {
            logits,
            taps,
            quantized,
            param_vars,
        })
    }

    /// Apply one SGD step from tape gradients; clip parameters are floored
    /// afterwards so the level set never degenerates.
    fn apply_gradients(
        &mut self,
        grads: &Grads,
        param_vars: &[VarId],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for (i, param) in self.params.iter_mut().enumerate() {
            let g = grads.dense(param_vars[i], param.value.len());
            sgd_step(
                param.value.data_mut(),
                &g,
                &mut param.velocity,
                lr,
                momentum,
                weight_decay,
            );
        }
        for site in 0..NUM_SITES {
            let p = &mut self.params[WEIGHT_PARAMS + site];
            if p.value.item() < ALPHA_FLOOR {
                p.value = Tensor::scalar(ALPHA_FLOOR);
            }
        }
    }

    /// Calibrate each site's clip to the 99.9th percentile of the float
    /// activations on one batch.
    pub fn calibrate(&mut self, images: &Tensor) -> Result<(), TensorError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, QuantMode::Float)?;
        for (site, &tap) in pass.taps.iter().enumerate() {
            let alpha = calibrate_alpha(tape.value(tap).data());
            self.set_alpha(site, alpha);
        }
        Ok(())
    }
}

/// Per-site sum of the configured entropy loss over the tap activations.
///
/// Soft entropy is evaluated on a subsample of each tap drawn from `rng`;
/// the compressibility loss sees the full tap. Levels and clips are
/// constants for this loss: gradient flows into the activations only.
pub fn network_entropy_loss(
    tape: &mut Tape,
    model: &Model,
    taps: &[VarId],
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VarId, TrainError> {
    if taps.is_empty() {
        return Err(EntropyError::NoActivations.into());
    }
    let sizes: Vec<usize> = taps.iter().map(|&t| tape.value(t).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut acc: Option<VarId> = None;
    for (site, &tap) in taps.iter().enumerate() {
        let term = match cfg.loss_mode {
            LossMode::SoftEntropy => {
                let n = sizes[site];
                let take = ((cfg.subsample_fraction * n as f64).ceil() as usize).clamp(1, n);
                let selected = sample_indices(n, take, rng);
                let levels = model.quantizer(site).levels();
                tape.soft_entropy(tap, levels, cfg.temperature, selected)?
            }
            LossMode::Compressibility => tape.compressibility(tap),
        };
        let term = match cfg.layer_weighting {
            LayerWeighting::Uniform => term,
            LayerWeighting::BySize => {
                tape.scale(term, sizes[site] as f64 * taps.len() as f64 / total as f64)
            }
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one tap"))
}

/// Partial Fisher-Yates draw of `take` distinct indices from `0..n`.
fn sample_indices(n: usize, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(take <= n);
    if take == n {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// One epoch row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub phase: &'static str,
    pub epoch: usize,
    pub task_loss: f64,
    /// `lambda * L_H` as it entered the total loss (0 when lambda = 0).
    pub reg_term: f64,
    /// Per-site empirical entropy on the validation split; empty during
    /// pre-training (no calibrated quantizers yet).
    pub site_entropy: Vec<f64>,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
    pub best_val_accuracy: f64,
}

/// Full training pipeline: float pre-training, clip calibration, then
/// compression-aware fine-tuning. Deterministic given the config seed.
pub fn train(dataset: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let arch = Arch::from_token(&cfg.arch)?;
    let mut model = Model::new(arch, cfg.bits, cfg.seed);
    let (train_idx, val_idx) = dataset.split_indices(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();

    // Phase 1: float pre-training.
    for epoch in 0..cfg.pretrain_epochs {
        let task_loss = run_epoch(
            &mut model,
            dataset,
            &train_idx,
            cfg,
            QuantMode::Float,
            cfg.pretrain_lr,
            0.0,
            &mut rng,
            "pretrain",
            epoch,
        )?
        .0;
        let (accuracy, _) = validate(&model, dataset, &val_idx, cfg.batch_size, QuantMode::Float)?;
        log.push(EpochMetrics {
            phase: "pretrain",
            epoch,
            task_loss,
            reg_term: 0.0,
            site_entropy: Vec::new(),
            val_accuracy: accuracy,
        });
    }

    // Phase 2: clip calibration on one batch.
    let calib: Vec<usize> = train_idx
        .iter()
        .copied()
        .take(cfg.batch_size.max(256).min(train_idx.len()))
        .collect();
    model.calibrate(&dataset.batch(&calib))?;

    // Phase 3: compression-aware fine-tuning.
    let mut best = model.clone();
    let mut best_accuracy = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let (task_loss, reg_term) = run_epoch(
            &mut model,
            dataset,
            &train_idx,
            cfg,
            QuantMode::Quantized,
            cfg.lr,
            cfg.lambda,
            &mut rng,
            "finetune",
            epoch,
        )?;
        let (accuracy, entropies) =
            validate(&model, dataset, &val_idx, cfg.batch_size, QuantMode::Quantized)?;
        log.push(EpochMetrics {
            phase: "finetune",
            epoch,
            task_loss,
            reg_term,
            site_entropy: entropies,
            val_accuracy: accuracy,
        });
        // Later epoch wins ties: accuracy plateaus while entropy keeps
        // falling, so keep the most-compressed of the best checkpoints.
        if accuracy >= best_accuracy {
            best_accuracy = accuracy;
            best = model.clone();
        }
    }

    Ok(TrainOutcome {
        model: best,
        log,
        best_val_accuracy: best_accuracy,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    dataset: &Dataset,
    train_idx: &[usize],
    cfg: &TrainingConfig,
    mode: QuantMode,
    lr: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    phase: &'static str,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    let mut order = train_idx.to_vec();
    order.shuffle(rng);
    let mut task_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut steps = 0usize;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let images = dataset.batch(chunk);
        let labels = dataset.batch_labels(chunk);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &images, mode)?;
        let task = tape.softmax_cross_entropy(pass.logits, &labels)?;
        let total = if lambda > 0.0 {
            let reg = network_entropy_loss(&mut tape, model, &pass.taps, cfg, rng)?;
            let weighted = tape.scale(reg, lambda);
            reg_sum += tape.value(weighted).item();
            tape.add(task, weighted)?
        } else {
            task
        };
        let loss_value = tape.value(total).item();
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged { phase, epoch, step });
        }
        task_sum += tape.value(task).item();
        steps += 1;
        let grads = tape.backward(total)?;
        model.apply_gradients(&grads, &pass.param_vars, lr, cfg.momentum, cfg.weight_decay);
    }
    Ok((task_sum / steps as f64, reg_sum / steps as f64))
}

/// Accuracy and per-site empirical entropies over an index set.
fn validate(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    mode: QuantMode,
) -> Result<(f64, Vec<f64>), TrainError> {
    if indices.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut correct = 0usize;
    let mut histograms: Vec<Histogram> = (0..NUM_SITES)
        .map(|_| Histogram::new(vec![0; 1 << model.bits]))
        .collect();
    for chunk in indices.chunks(batch_size) {
        let images = dataset.batch(chunk);
        let labels = dataset.batch_labels(chunk);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &images, mode)?;
        correct += count_correct(tape.value(pass.logits), &labels);
        if mode == QuantMode::Quantized {
            for (site, &q) in pass.quantized.iter().enumerate() {
                let qs = model.quantizer(site);
                let symbols = symbol_indices(tape.value(q), &qs)
                    .expect("quantized activations sit on levels");
                histograms[site].merge(&Histogram::from_symbols(&symbols, qs.num_levels()));
            }
        }
    }
    let accuracy = correct as f64 / indices.len() as f64;
    let entropies = if mode == QuantMode::Quantized {
        histograms
            .iter()
            .map(|h| empirical_entropy(h).expect("non-empty validation histogram"))
            .collect()
    } else {
        Vec::new()
    };
    Ok((accuracy, entropies))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(row, &label)| {
            let row_logits = &logits.data()[row * classes..(row + 1) * classes];
            let mut arg = 0;
            for (j, &v) in row_logits.iter().enumerate() {
                if v > row_logits[arg] {
                    arg = j;
                }
            }
            arg == label
        })
        .count()
}

/// Per-site compression measurements from actually encoding the feature
/// maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMetrics {
    pub entropy_bits: f64,
    pub rate_bits: f64,
    pub num_values: u64,
    /// Header cost amortized per value, reported separately from the rate.
    pub header_bits_per_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub sites: Vec<SiteMetrics>,
    /// Element-count-weighted means over sites.
    pub mean_entropy: f64,
    pub mean_rate: f64,
    pub compression_ratio: f64,
    pub bits: u8,
}

/// Evaluate accuracy, entropy, and measured Huffman rate on a dataset.
///
/// Each site's symbols are pooled over the whole dataset and encoded as
/// one stream whose codebook comes from that pooled histogram, so the
/// measured rate is bounded by the reported entropy from below.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Metrics, TrainError> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    evaluate_on(model, dataset, &indices, batch_size)
}

pub fn evaluate_on(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Metrics, TrainError> {
    if indices.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut correct = 0usize;
    let mut site_symbols: Vec<Vec<u16>> = vec![Vec::new(); NUM_SITES];
    for chunk in indices.chunks(batch_size) {
        let images = dataset.batch(chunk);
        let labels = dataset.batch_labels(chunk);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &images, QuantMode::Quantized)?;
        correct += count_correct(tape.value(pass.logits), &labels);
        for (site, &q) in pass.quantized.iter().enumerate() {
            let qs = model.quantizer(site);
            let symbols = symbol_indices(tape.value(q), &qs)
                .expect("quantized activations sit on levels");
            site_symbols[site].extend_from_slice(&symbols);
        }
    }

    let mut sites = Vec::with_capacity(NUM_SITES);
    for symbols in &site_symbols {
        sites.push(site_metrics(symbols, 1 << model.bits, model.bits)?);
    }
    let total: u64 = sites.iter().map(|s| s.num_values).sum();
    let mean_entropy = sites
        .iter()
        .map(|s| s.entropy_bits * s.num_values as f64)
        .sum::<f64>()
        / total as f64;
    let mean_rate = sites
        .iter()
        .map(|s| s.rate_bits * s.num_values as f64)
        .sum::<f64>()
        / total as f64;
    Ok(Metrics {
        accuracy: correct as f64 / indices.len() as f64,
        sites,
        mean_entropy,
        mean_rate,
        compression_ratio: model.bits as f64 / mean_rate,
        bits: model.bits,
    })
}

/// Entropy and measured rate for one pooled symbol stream.
pub fn site_metrics(symbols: &[u16], num_levels: usize, bits: u8) -> Result<SiteMetrics, TrainError> {
    let hist = Histogram::from_symbols(symbols, num_levels);
    let entropy_bits = empirical_entropy(&hist)?;
    let codebook = crate::codec::HuffmanCodebook::from_histogram(&hist)
        .expect("non-empty histogram");
    let stream = crate::codec::encode(symbols, &codebook, bits)
        .expect("all symbols present in own histogram");
    let rate_bits = stream.measured_rate().expect("non-empty stream");
    Ok(SiteMetrics {
        entropy_bits,
        rate_bits,
        num_values: stream.num_values(),
        header_bits_per_value: stream.header_bytes() as f64 * 8.0 / stream.num_values() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(seed: u64) -> Model {
        Model::new(Arch::from_token(ARCH_TOY_CNN_V1).unwrap(), 4, seed)
    }

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            epochs: 1,
            pretrain_epochs: 1,
            synthetic_n: 60,
            batch_size: 16,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_weights_zero_input_give_zero_logits() {
        let mut m = toy_model(0);
        for p in &mut m.params[..WEIGHT_PARAMS] {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let images = Tensor::zeros(vec![2, 1, 16, 16]);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &images, QuantMode::Float).unwrap();
        assert!(tape.value(pass.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_cover_every_site() {
        let m = toy_model(1);
        let images = Tensor::zeros(vec![1, 1, 16, 16]);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &images, QuantMode::Quantized).unwrap();
        assert_eq!(pass.taps.len(), NUM_SITES);
        assert_eq!(pass.quantized.len(), NUM_SITES);
    }

    #[test]
    fn input_shape_checked() {
        let m = toy_model(1);
        let mut tape = Tape::new();
        let bad = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(m.forward(&mut tape, &bad, QuantMode::Float).is_err());
    }

    #[test]
    fn high_precision_quantization_preserves_predictions() {
        let mut m = toy_model(7);
        m.bits = 8;
        let data = Dataset::synthetic(64, 7);
        let batch = data.batch(&(0..64).collect::<Vec<_>>());
        m.calibrate(&batch).unwrap();

        let mut tape_f = Tape::new();
        let float = m.forward(&mut tape_f, &batch, QuantMode::Float).unwrap();
        let mut tape_q = Tape::new();
        let quant = m.forward(&mut tape_q, &batch, QuantMode::Quantized).unwrap();

        let lf = tape_f.value(float.logits);
        let lq = tape_q.value(quant.logits);
        let classes = lf.shape()[1];
        let agree = (0..64)
            .filter(|&i| {
                let arg = |t: &Tensor| {
                    let row = &t.data()[i * classes..(i + 1) * classes];
                    (0..classes).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
                };
                arg(lf) == arg(lq)
            })
            .count();
        assert!(agree >= 61, "only {agree}/64 predictions agree");
    }

    #[test]
    fn float_forward_matches_disabled_quantization() {
        // Quantized forward with b=8 differs; Float mode must be the plain
        // network regardless of the stored quantizer state.
        let mut m = toy_model(3);
        m.set_alpha(0, 0.5);
        let reference = toy_model(3);
        let data = Dataset::synthetic(4, 3);
        let batch = data.batch(&[0, 1, 2, 3]);
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = m.forward(&mut t1, &batch, QuantMode::Float).unwrap();
        let b = reference.forward(&mut t2, &batch, QuantMode::Float).unwrap();
        assert_eq!(t1.value(a.logits), t2.value(b.logits));
    }

    #[test]
    fn lr_zero_keeps_weights() {
        let data = Dataset::synthetic(60, 5);
        let mut cfg = tiny_cfg();
        cfg.lr = f64::MIN_POSITIVE; // lr must be > 0; smallest positive is a no-op
        cfg.pretrain_epochs = 0;
        cfg.lambda = 0.0;
        let out = train(&data, &cfg).unwrap();
        let fresh = Model::new(Arch::from_token(ARCH_TOY_CNN_V1).unwrap(), 4, cfg.seed);
        for (a, b) in out.model.params[..WEIGHT_PARAMS]
            .iter()
            .zip(&fresh.params[..WEIGHT_PARAMS])
        {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() < 1e-12, "{} moved", a.name);
            }
        }
        assert!(!out.log.is_empty());
    }

    #[test]
    fn lambda_zero_matches_no_regularizer_gradients() {
        let m = {
            let mut m = toy_model(11);
            let data = Dataset::synthetic(8, 11);
            m.calibrate(&data.batch(&(0..8).collect::<Vec<_>>())).unwrap();
            m
        };
        let data = Dataset::synthetic(8, 11);
        let batch = data.batch(&(0..8).collect::<Vec<_>>());
        let labels = data.batch_labels(&(0..8).collect::<Vec<_>>());

        let grads_of = |with_reg_ops: bool| {
            let mut tape = Tape::new();
            let pass = m.forward(&mut tape, &batch, QuantMode::Quantized).unwrap();
            let task = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
            let total = if with_reg_ops {
                let cfg = TrainingConfig::default();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let reg =
                    network_entropy_loss(&mut tape, &m, &pass.taps, &cfg, &mut rng).unwrap();
                let zero = tape.scale(reg, 0.0);
                tape.add(task, zero).unwrap()
            } else {
                task
            };
            let grads = tape.backward(total).unwrap();
            pass.param_vars
                .iter()
                .zip(&m.params)
                .map(|(&v, p)| grads.dense(v, p.value.len()))
                .collect::<Vec<_>>()
        };

        let with = grads_of(true);
        let without = grads_of(false);
        for (a, b) in with.iter().zip(&without) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn degenerate_constant_model_metrics() {
        // All-zero weights: every activation quantizes to level 0.
        let mut m = toy_model(0);
        for p in &mut m.params[..WEIGHT_PARAMS] {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let data = Dataset::synthetic(32, 1);
        let metrics = evaluate(&m, &data, 16).unwrap();
        for site in &metrics.sites {
            assert_eq!(site.entropy_bits, 0.0);
            assert_eq!(site.rate_bits, 1.0);
        }
        assert_eq!(metrics.compression_ratio, m.bits as f64);
    }

    #[test]
    fn rate_within_entropy_bound_per_site() {
        let data = Dataset::synthetic(120, 2);
        let mut cfg = tiny_cfg();
        cfg.seed = 2;
        let out = train(&data, &cfg).unwrap();
        let metrics = evaluate(&out.model, &data, 32).unwrap();
        for (i, site) in metrics.sites.iter().enumerate() {
            assert!(
                site.rate_bits >= site.entropy_bits - 1e-9
                    && site.rate_bits < site.entropy_bits + 1.0,
                "site {i}: H={} R={}",
                site.entropy_bits,
                site.rate_bits
            );
        }
        assert!(
            (metrics.compression_ratio - metrics.bits as f64 / metrics.mean_rate).abs() < 1e-12
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = Dataset::synthetic(80, 4);
        let cfg = tiny_cfg();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        for (pa, pb) in a.model.params.iter().zip(&b.model.params) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = Dataset::from_csv("label,p0,p1,p2,p3\n", 10).unwrap();
        let cfg = tiny_cfg();
        assert!(matches!(
            train(&data, &cfg),
            Err(TrainError::Data(DataError::Empty))
        ));
    }
}

//! From-scratch MLP classifier: five affine layers (four hidden blocks with
//! batch normalization, ReLU, and dropout, plus a softmax output layer),
//! trained with softmax cross-entropy, the Adam optimizer, and a step-decay
//! learning-rate schedule.
//!
//! Everything is generic over the float type: production paths run in f32,
//! the gradient-check tests drive the same code in f64.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointManifest};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube::HsCube;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::transforms::TransformState;

/// Float type the network computes in.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + rand::distributions::uniform::SampleUniform
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Hidden widths of the standard architecture; a halving pyramid sized for
/// 151-band input. The input and class dimensions come from the data.
pub const DEFAULT_HIDDEN: [usize; 4] = [256, 128, 64, 32];

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// Weight matrix, `out x in`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense<T> {
        // He-style scaled uniform fan-in init.
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
            T::from(rng.gen_range(-limit..limit)).unwrap()
        });
        Dense {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns (dW, db, dx).
    fn backward(&self, x: &Array2<T>, dy: &Array2<T>) -> (Array2<T>, Array1<T>, Array2<T>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.weight);
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn identity(dim: usize) -> BatchNorm<T> {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock<T> {
    pub dense: Dense<T>,
    pub bn: BatchNorm<T>,
}

/// Intermediate activations of one hidden block, kept for backprop.
struct BlockCache<T> {
    input: Array2<T>,
    x_hat: Array2<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var_unbiased: Array1<T>,
    pre_relu: Array2<T>,
    dropout_mask: Option<Array2<T>>,
}

struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    output_input: Array2<T>,
    probs: Array2<T>,
}

/// Gradients for one dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<T> {
    pub dense: DenseGrads<T>,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

/// Gradient set covering every learnable parameter of the model.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub blocks: Vec<BlockGrads<T>>,
    pub output: DenseGrads<T>,
}

impl<T: Scalar> Grads<T> {
    /// Flattened gradients in the model's canonical parameter order.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.dense.weight.iter().copied());
            out.extend(b.dense.bias.iter().copied());
            out.extend(b.gamma.iter().copied());
            out.extend(b.beta.iter().copied());
        }
        out.extend(self.output.weight.iter().copied());
        out.extend(self.output.bias.iter().copied());
        out
    }
}

/// Batch-statistics side channel of a training forward pass; applied to the
/// running statistics by the training loop after each optimizer step.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    mean: Vec<Array1<T>>,
    var_unbiased: Vec<Array1<T>>,
}

/// The classifier network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub blocks: Vec<HiddenBlock<T>>,
    pub output: Dense<T>,
    pub dropout_p: f64,
    /// Per-input-dimension standardization statistics from the training split.
    pub feat_mean: Array1<T>,
    pub feat_std: Array1<T>,
    pub mode: Mode,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with seeded He-uniform weights, identity batch norm,
    /// and identity feature statistics.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        dropout_p: f64,
        seed: u64,
    ) -> Result<Mlp<T>> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need input_dim >= 1 and num_classes >= 2, got {input_dim} and {num_classes}"
            )));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("hidden width of 0".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout p must be in [0, 1), got {dropout_p}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mlp/init"));
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut dim = input_dim;
        for &width in hidden {
            blocks.push(HiddenBlock {
                dense: Dense::init(&mut rng, dim, width),
                bn: BatchNorm::identity(width),
            });
            dim = width;
        }
        let output = Dense::init(&mut rng, dim, num_classes);
        Ok(Mlp {
            blocks,
            output,
            dropout_p,
            feat_mean: Array1::zeros(input_dim),
            feat_std: Array1::ones(input_dim),
            mode: Mode::Eval,
        })
    }

    /// Standard architecture for the given input/class dimensions.
    pub fn standard(input_dim: usize, num_classes: usize, dropout_p: f64, seed: u64) -> Result<Mlp<T>> {
        Mlp::new(input_dim, &DEFAULT_HIDDEN, num_classes, dropout_p, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.feat_mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.output.weight.dim().0
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dense.weight.dim().0).collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Sets the per-feature standardization statistics, flooring tiny
    /// standard deviations so the division stays finite.
    pub fn set_feature_stats(&mut self, mean: Array1<T>, std: Array1<T>) -> Result<()> {
        if mean.len() != self.input_dim() || std.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature stats have dims {}/{}, model expects {}",
                mean.len(),
                std.len(),
                self.input_dim()
            )));
        }
        self.feat_mean = mean;
        self.feat_std = std.mapv(|v| v.max(T::from(STD_FLOOR).unwrap()));
        Ok(())
    }

    /// Computes and installs standardization statistics from a training matrix.
    pub fn fit_feature_stats(&mut self, train: &Array2<T>) -> Result<()> {
        if train.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "training matrix has {} columns, model expects {}",
                train.ncols(),
                self.input_dim()
            )));
        }
        let n = T::from_usize(train.nrows()).unwrap();
        let mean = train.sum_axis(Axis(0)) / n;
        let mut var = Array1::<T>::zeros(train.ncols());
        for row in train.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        let std = var.mapv(|v| (v / n).sqrt());
        self.set_feature_stats(mean, std)
    }

    fn standardize(&self, batch: ArrayView2<'_, T>) -> Array2<T> {
        let mut x = batch.to_owned();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.feat_mean[j]) / self.feat_std[j];
            }
        }
        x
    }

    fn check_batch(&self, batch: &ArrayView2<'_, T>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} features, model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass honoring the model's mode. Train mode draws dropout masks
    /// from `rng`, normalizes with batch statistics, and folds those
    /// statistics into the running estimates; eval mode is deterministic and
    /// ignores `rng`.
    pub fn forward(&mut self, batch: ArrayView2<'_, T>, rng: &mut ChaCha8Rng) -> Result<Array2<T>> {
        match self.mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => {
                let cache = self.forward_train(batch, rng)?;
                let stats = BatchStats {
                    mean: cache.blocks.iter().map(|b| b.batch_mean.clone()).collect(),
                    var_unbiased: cache
                        .blocks
                        .iter()
                        .map(|b| b.batch_var_unbiased.clone())
                        .collect(),
                };
                self.update_running_stats(&stats);
                Ok(cache.probs)
            }
        }
    }

    /// Deterministic inference pass: running statistics, no dropout.
    pub fn forward_eval(&self, batch: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_batch(&batch)?;
        let mut x = self.standardize(batch);
        let eps = T::from(BN_EPS).unwrap();
        for block in &self.blocks {
            let z = block.dense.forward(&x);
            let mut y = z;
            for mut row in y.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    let inv = (block.bn.running_var[j] + eps).sqrt().recip();
                    *v = block.bn.gamma[j] * ((*v - block.bn.running_mean[j]) * inv)
                        + block.bn.beta[j];
                }
            }
            x = y.mapv(|v| v.max(T::zero()));
        }
        Ok(softmax(&self.output.forward(&x)))
    }

    /// Training-mode forward pass. Pure: running statistics are *not*
    /// touched; the caller applies the returned batch statistics explicitly.
    fn forward_train(&self, batch: ArrayView2<'_, T>, rng: &mut ChaCha8Rng) -> Result<ForwardCache<T>> {
        self.check_batch(&batch)?;
        let n = batch.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "batch normalization is undefined for a train-mode batch of size 1".into(),
            ));
        }
        let n_t = T::from_usize(n).unwrap();
        let eps = T::from(BN_EPS).unwrap();
        let keep = 1.0 - self.dropout_p;

        let mut x = self.standardize(batch);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = x;
            let z = block.dense.forward(&input);
            let mean = z.sum_axis(Axis(0)) / n_t;
            let mut var = Array1::<T>::zeros(z.ncols());
            for row in z.rows() {
                for (j, &v) in row.iter().enumerate() {
                    let d = v - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            let var_biased = var.mapv(|v| v / n_t);
            let var_unbiased = var.mapv(|v| v / T::from_usize(n - 1).unwrap());
            let inv_std = var_biased.mapv(|v| (v + eps).sqrt().recip());

            let mut x_hat = z;
            for mut row in x_hat.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
            let mut pre_relu = x_hat.clone();
            for mut row in pre_relu.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = block.bn.gamma[j] * *v + block.bn.beta[j];
                }
            }
            let mut activated = pre_relu.mapv(|v| v.max(T::zero()));

            let dropout_mask = if self.dropout_p > 0.0 {
                let scale = T::from(1.0 / keep).unwrap();
                let mask = Array2::from_shape_fn(activated.raw_dim(), |_| {
                    if rng.gen::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                });
                activated = activated * &mask;
                Some(mask)
            } else {
                None
            };

            caches.push(BlockCache {
                input,
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
                pre_relu,
                dropout_mask,
            });
            x = activated;
        }

        let probs = softmax(&self.output.forward(&x));
        Ok(ForwardCache {
            blocks: caches,
            output_input: x,
            probs,
        })
    }

    /// Mean negative log-likelihood and gradients for every learnable
    /// parameter, computed on the train-mode forward path. Pure with respect
    /// to the model; reseeding `rng` reproduces the same dropout masks.
    pub fn loss_and_grads(
        &self,
        batch: ArrayView2<'_, T>,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(T, Grads<T>, BatchStats<T>)> {
        if labels.len() != batch.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                batch.nrows()
            )));
        }
        let c = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }

        let cache = self.forward_train(batch, rng)?;
        let n = batch.nrows();
        let n_t = T::from_usize(n).unwrap();

        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let p = cache.probs[[i, y]].max(T::from(1e-300).unwrap());
            loss = loss - p.ln();
        }
        loss = loss / n_t;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }

        // Softmax cross-entropy gradient at the logits.
        let mut dz = cache.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            dz[[i, y]] = dz[[i, y]] - T::one();
        }
        dz = dz / n_t;

        let (dw_out, db_out, mut dx) = self.output.backward(&cache.output_input, &dz);

        let mut block_grads: Vec<BlockGrads<T>> = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            if let Some(mask) = &bc.dropout_mask {
                dx = dx * mask;
            }
            // ReLU
            for (v, &pre) in dx.iter_mut().zip(bc.pre_relu.iter()) {
                if pre <= T::zero() {
                    *v = T::zero();
                }
            }
            // Batch norm
            let dgamma = (&dx * &bc.x_hat).sum_axis(Axis(0));
            let dbeta = dx.sum_axis(Axis(0));
            let mut dxhat = dx;
            for mut row in dxhat.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * block.bn.gamma[j];
                }
            }
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &bc.x_hat).sum_axis(Axis(0));
            let n_batch = T::from_usize(bc.x_hat.nrows()).unwrap();
            let mut dzb = dxhat;
            for (mut row, xh_row) in dzb.rows_mut().into_iter().zip(bc.x_hat.rows()) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (n_batch * *v - sum_dxhat[j] - xh_row[j] * sum_dxhat_xhat[j])
                        * bc.inv_std[j]
                        / n_batch;
                }
            }
            let (dw, db, dx_prev) = block.dense.backward(&bc.input, &dzb);
            dx = dx_prev;
            block_grads.push(BlockGrads {
                dense: DenseGrads {
                    weight: dw,
                    bias: db,
                },
                gamma: dgamma,
                beta: dbeta,
            });
        }
        block_grads.reverse();

        let grads = Grads {
            blocks: block_grads,
            output: DenseGrads {
                weight: dw_out,
                bias: db_out,
            },
        };
        if grads.flat().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let stats = BatchStats {
            mean: cache.blocks.iter().map(|b| b.batch_mean.clone()).collect(),
            var_unbiased: cache
                .blocks
                .iter()
                .map(|b| b.batch_var_unbiased.clone())
                .collect(),
        };
        Ok((loss, grads, stats))
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::from(BN_MOMENTUM).unwrap();
        let one_m = T::one() - m;
        for (block, (mean, var)) in self
            .blocks
            .iter_mut()
            .zip(stats.mean.iter().zip(stats.var_unbiased.iter()))
        {
            for (r, &b) in block.bn.running_mean.iter_mut().zip(mean.iter()) {
                *r = one_m * *r + m * b;
            }
            for (r, &b) in block.bn.running_var.iter_mut().zip(var.iter()) {
                *r = one_m * *r + m * b;
            }
        }
    }

    /// Number of learnable parameters.
    pub fn num_learnable(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks {
            n += b.dense.weight.len() + b.dense.bias.len() + b.bn.gamma.len() + b.bn.beta.len();
        }
        n + self.output.weight.len() + self.output.bias.len()
    }

    /// Learnable parameters flattened in canonical order: per hidden block
    /// weight, bias, gamma, beta; then the output weight and bias.
    pub fn learnable_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_learnable());
        for b in &self.blocks {
            out.extend(b.dense.weight.iter().copied());
            out.extend(b.dense.bias.iter().copied());
            out.extend(b.bn.gamma.iter().copied());
            out.extend(b.bn.beta.iter().copied());
        }
        out.extend(self.output.weight.iter().copied());
        out.extend(self.output.bias.iter().copied());
        out
    }

    pub fn set_learnable_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_learnable() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} learnable parameters",
                flat.len(),
                self.num_learnable()
            )));
        }
        let mut it = flat.iter().copied();
        for b in &mut self.blocks {
            for v in b.dense.weight.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.dense.bias.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.bn.gamma.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.bn.beta.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in self.output.weight.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.output.bias.iter_mut() {
            *v = it.next().unwrap();
        }
        Ok(())
    }

    /// Non-learnable state (running statistics) in canonical order.
    pub fn running_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.bn.running_mean.iter().copied());
            out.extend(b.bn.running_var.iter().copied());
        }
        out
    }

    pub fn set_running_flat(&mut self, flat: &[T]) -> Result<()> {
        let expected: usize = self.blocks.iter().map(|b| 2 * b.bn.running_mean.len()).sum();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} running statistics",
                flat.len(),
                expected
            )));
        }
        let mut it = flat.iter().copied();
        for b in &mut self.blocks {
            for v in b.bn.running_mean.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.bn.running_var.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }
}

fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training configuration and schedule
// ---------------------------------------------------------------------------

/// Training recipe: Adam with minibatches and a step-decay schedule that
/// multiplies the learning rate by `decay_factor` after each `decay_every`
/// epochs (one tenth of the total by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            lr0: 1e-3,
            decay_factor: 0.6,
            decay_every: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout_p: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default recipe rescaled to a different epoch count, keeping the decay
    /// cadence at one tenth of the total.
    pub fn with_epochs(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            decay_every: (epochs / 10).max(1),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.lr0 > 0.0
            && self.decay_factor > 0.0
            && self.decay_every >= 1
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if !positive {
            return Err(Error::InvalidArgument(
                "train config fields must be positive (betas in (0,1), decay_every >= 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(
                "dropout p must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Learning rate at an epoch: `lr0 * decay_factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_oa: f64,
}

/// Renders the training log as CSV: epoch, lr, train_loss, val_oa.
pub fn format_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_oa\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_oa));
    }
    out
}

/// Result of a training run: the per-epoch log plus the best-validation
/// snapshot. The final model state lives in the `model` passed to [`train`].
pub struct TrainOutcome<T> {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_oa: f64,
    pub best_model: Mlp<T>,
    pub best_adam: AdamState<T>,
    pub final_adam: AdamState<T>,
}

/// Overall accuracy of eval-mode predictions on a labeled matrix.
pub fn eval_accuracy<T: Scalar>(model: &Mlp<T>, x: &Array2<T>, y: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    let chunk = 1024;
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let probs = model.forward_eval(x.slice(ndarray::s![start..end, ..]))?;
        for (i, row) in probs.rows().into_iter().enumerate() {
            if argmax(row.as_slice().unwrap()) == y[start + i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / y.len() as f64)
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains the model in place, standardizing features from the training split
/// first. Deterministic under the config seed: epoch shuffles and dropout
/// masks come from derived seeded generators. Returns the per-epoch log and
/// the best-validation snapshot alongside the final state left in `model`.
pub fn train<T: Scalar>(
    model: &mut Mlp<T>,
    train_x: &Array2<T>,
    train_y: &[usize],
    val_x: &Array2<T>,
    val_y: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_x.nrows() != train_y.len() || val_x.nrows() != val_y.len() {
        return Err(Error::DimensionMismatch(
            "feature/label row counts differ".into(),
        ));
    }
    if train_x.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 training samples".into(),
        ));
    }
    model.fit_feature_stats(train_x)?;
    model.set_mode(Mode::Train);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/dropout"));
    let adam_cfg = config.adam();
    let mut adam = AdamState::<T>::new(model.num_learnable());

    let mut log = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0usize;
    let mut best_val_oa = f64::NEG_INFINITY;
    let mut best_model = model.clone();
    let mut best_adam = adam.clone();

    let mut indices: Vec<usize> = (0..train_x.nrows()).collect();
    for epoch in 0..config.epochs {
        let lr = T::from(lr_at(epoch, config)).unwrap();
        fisher_yates(&mut indices, &mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            // A trailing singleton batch cannot be batch-normalized.
            if chunk.len() < 2 {
                continue;
            }
            let batch = gather_rows(train_x, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (loss, grads, stats) =
                model.loss_and_grads(batch.view(), &labels, &mut dropout_rng)?;
            loss_sum += loss.to_f64().unwrap() * chunk.len() as f64;
            loss_count += chunk.len();

            let mut params = model.learnable_flat();
            adam_step(&mut params, &grads.flat(), &mut adam, lr, &adam_cfg)?;
            model.set_learnable_flat(&params)?;
            model.update_running_stats(&stats);
        }

        model.set_mode(Mode::Eval);
        let val_oa = eval_accuracy(model, val_x, val_y)?;
        model.set_mode(Mode::Train);

        let record = EpochRecord {
            epoch,
            lr: lr.to_f64().unwrap(),
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_oa,
        };
        if val_oa > best_val_oa {
            best_val_oa = val_oa;
            best_epoch = epoch;
            best_model = model.clone();
            best_adam = adam.clone();
        }
        log.push(record);
    }
    model.set_mode(Mode::Eval);
    best_model.set_mode(Mode::Eval);

    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_oa,
        best_model,
        best_adam,
        final_adam: adam,
    })
}

fn fisher_yates(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

fn gather_rows<T: Scalar>(x: &Array2<T>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

// ---------------------------------------------------------------------------
// Pixel-wise prediction
// ---------------------------------------------------------------------------

/// Dense per-pixel classification of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrediction {
    /// Class index per pixel; ties resolve to the lowest index.
    pub labels: Array2<u16>,
    /// Winning softmax probability per pixel.
    pub confidence: Array2<f32>,
}

/// Classifies every pixel of a cube: spectrum -> representation transform ->
/// eval-mode forward -> argmax. Rows are processed in parallel; the result is
/// independent of the worker count.
pub fn predict_pixels<T: Scalar>(
    model: &Mlp<T>,
    cube: &HsCube,
    transform: &TransformState,
) -> Result<PixelPrediction> {
    if model.mode != Mode::Eval {
        return Err(Error::InvalidArgument(
            "predict_pixels requires the model in eval mode".into(),
        ));
    }
    let dim = transform.output_dim(cube.bands());
    if dim != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "transform produces {dim}-dim features, model expects {}",
            model.input_dim()
        )));
    }
    let (h, w) = (cube.height(), cube.width());

    use rayon::prelude::*;
    let rows: Vec<(Vec<u16>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| -> Result<(Vec<u16>, Vec<f32>)> {
            let mut batch = Array2::<T>::zeros((w, model.input_dim()));
            for x in 0..w {
                let features = transform.apply(&cube.spectrum_at(x, y))?;
                for (j, &v) in features.iter().enumerate() {
                    batch[[x, j]] = T::from(v).unwrap();
                }
            }
            let probs = model.forward_eval(batch.view())?;
            let mut labels = Vec::with_capacity(w);
            let mut confidence = Vec::with_capacity(w);
            for row in probs.rows() {
                let slice = row.as_slice().unwrap();
                let best = argmax(slice);
                labels.push(best as u16);
                confidence.push(slice[best].to_f64().unwrap() as f32);
            }
            Ok((labels, confidence))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut labels = Array2::<u16>::zeros((h, w));
    let mut confidence = Array2::<f32>::zeros((h, w));
    for (y, (lrow, crow)) in rows.into_iter().enumerate() {
        for x in 0..w {
            labels[[y, x]] = lrow[x];
            confidence[[y, x]] = crow[x];
        }
    }
    Ok(PixelPrediction { labels, confidence })
}

//! Two-stage training: a regression warm-up on the MSE objective followed by
//! joint optimization of the weighted objective, with a staged learning rate,
//! SGD with momentum and global-norm gradient clipping.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Mode, PhenoNet, PhenoNetConfig};
use crate::objectives::{loss_cls, loss_con, loss_mse, loss_total, LossTerms, LossWeights};
use crate::tensor::{Rng, Tape, Tensor};

pub const MOMENTUM: f64 = 0.9;
pub const CLIP_NORM: f64 = 5.0;

// Stream offsets separating the shuffling and dropout generators of an epoch.
const SHUFFLE_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    /// `(threshold, rate)` pairs: each rate applies from the previous
    /// threshold (or 0) up to, but excluding, its own threshold.
    pub lr_stages: Vec<(usize, f64)>,
    pub weights: LossWeights,
    pub seed: u64,
    pub use_cls: bool,
    pub use_mse: bool,
    pub use_con: bool,
    pub use_diffconv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 30,
            warmup_epochs: 10,
            lr_stages: vec![(10, 2e-2), (20, 1e-2), (25, 5e-3), (30, 1e-3)],
            weights: LossWeights::default(),
            seed: 0,
            use_cls: true,
            use_mse: true,
            use_con: true,
            use_diffconv: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: batch 300, 200 epochs, 100 warm-up epochs and the
    /// 2e-3 / 1e-3 / 5e-4 / 1e-4 staged decay.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 300,
            max_epochs: 200,
            warmup_epochs: 100,
            lr_stages: full_scale_lr_stages(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and max_epochs must be positive".into()));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs {} exceeds max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        check_stages(&self.lr_stages)?;
        if self.lr_stages.last().map(|s| s.0) != Some(self.max_epochs) {
            return Err(Error::InvalidArgument(format!(
                "final learning-rate threshold must equal max_epochs {}",
                self.max_epochs
            )));
        }
        self.weights.validate()
    }

    /// Apply the difference-convolution ablation to a model configuration.
    pub fn adjust_model(&self, model: &mut PhenoNetConfig) {
        if !self.use_diffconv {
            model.theta1 = 0.0;
            model.theta2 = 0.0;
        }
    }
}

pub fn full_scale_lr_stages() -> Vec<(usize, f64)> {
    vec![(10, 2e-3), (60, 1e-3), (120, 5e-4), (200, 1e-4)]
}

fn check_stages(stages: &[(usize, f64)]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("learning-rate table is empty".into()));
    }
    if stages.windows(2).any(|w| w[1].0 <= w[0].0) || stages[0].0 == 0 {
        return Err(Error::InvalidArgument("learning-rate thresholds must be positive and strictly increasing".into()));
    }
    if stages.iter().any(|s| !s.1.is_finite() || s.1 < 0.0) {
        return Err(Error::InvalidArgument("learning rates must be finite and >= 0".into()));
    }
    Ok(())
}

/// Piecewise-constant learning rate; a threshold epoch belongs to the next stage.
pub fn lr_schedule(epoch: usize, stages: &[(usize, f64)]) -> Result<f64> {
    check_stages(stages)?;
    stages
        .iter()
        .find(|(threshold, _)| epoch < *threshold)
        .map(|s| s.1)
        .ok_or_else(|| Error::InvalidArgument(format!("epoch {epoch} is beyond the schedule")))
}

// ── data ─────────────────────────────────────────────────────────────────

/// Images with their class labels and regression targets.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// `[N, C, S, S]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[N, D_out]`
    pub targets: Tensor<f32>,
}

impl TrainingSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, targets: Tensor<f32>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 || targets.rank() != 2 || labels.len() != n || targets.shape()[0] != n {
            return Err(Error::shape(
                "training_set",
                format!("images {:?}, {} labels, targets {:?}", images.shape(), labels.len(), targets.shape()),
            ));
        }
        Ok(Self { images, labels, targets })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather rows `idx` into a mini-batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>, Tensor<f32>)> {
        let gather = |t: &Tensor<f32>| {
            let per = t.numel() / t.shape()[0];
            let data = idx.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect();
            let mut shape = t.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, data)
        };
        Ok((gather(&self.images)?, idx.iter().map(|&i| self.labels[i]).collect(), gather(&self.targets)?))
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &PhenoNet<f32>, momentum: f64) -> Self {
        Self { momentum, velocity: net.params().iter().map(|p| vec![0.0; p.numel()]).collect() }
    }

    /// `v ← μv + g; p ← p − lr·v`
    pub fn step(&mut self, net: &mut PhenoNet<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for ((p, g), v) in net.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .zip(v.iter_mut())
                .map(|((&pv, &gv), vv)| {
                    *vv = mu * *vv + gv;
                    pv - lr * *vv
                })
                .collect();
            *p = p.with_data(data)?;
        }
        Ok(())
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> Result<f64> {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g = g.with_data(g.data().iter().map(|v| v * s).collect())?;
        }
    }
    Ok(norm)
}

// ── training loops ───────────────────────────────────────────────────────

/// Which loss terms enter the optimized total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub cls: bool,
    pub mse: bool,
    pub con: bool,
}

impl Objective {
    pub const MSE_ONLY: Objective = Objective { cls: false, mse: true, con: false };

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { cls: cfg.use_cls, mse: cfg.use_mse, con: cfg.use_con }
    }
}

/// Per-epoch training record. Loss values are means over the epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_mse: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    /// Wall-clock time; not serialized so that saved logs are reproducible.
    #[serde(skip, default)]
    pub wall_ms: u64,
}

/// Deterministic batch order of one epoch; the last partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Loss values of one mini-batch and, when `grads` is requested, the
/// parameter gradients of the weighted total.
pub struct StepResult {
    pub cls: f64,
    pub mse: f64,
    pub con: f64,
    pub total: f64,
    pub grads: Vec<Tensor<f32>>,
    pub bn_stats: Vec<crate::tensor::BatchStats>,
}

/// Forward and backward pass on one batch in training mode.
pub fn compute_step(
    net: &PhenoNet<f32>,
    batch: &(Tensor<f32>, Vec<usize>, Tensor<f32>),
    objective: Objective,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<StepResult> {
    let (images, labels, targets) = batch;
    let mut tape = Tape::new();
    let p: Bound = net.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let out = net.forward(&mut tape, x, &p, &mut Mode::Train(rng))?;
    let z = tape.constant(targets.clone());
    let cls = loss_cls(&mut tape, out.logits, labels)?;
    let mse = loss_mse(&mut tape, out.z_hat, z)?;
    let con = loss_con(&mut tape, out.z_hat, z, weights.tau, weights.normalize_embeddings)?;
    let terms = LossTerms {
        cls: objective.cls.then_some(cls),
        mse: objective.mse.then_some(mse),
        con: objective.con.then_some(con),
    };
    let total = loss_total(&mut tape, &terms, weights)?;
    tape.backward(total)?;
    let grads =
        p.0.iter()
            .map(|&v| tape.grad(v).ok_or_else(|| Error::Invariant("parameter without gradient".into())))
            .collect::<Result<Vec<_>>>()?;
    let scalar = |v| tape.value(v).data()[0] as f64;
    Ok(StepResult {
        cls: scalar(cls),
        mse: scalar(mse),
        con: scalar(con),
        total: scalar(total),
        grads,
        bn_stats: out.bn_stats,
    })
}

fn run_epochs(
    net: &mut PhenoNet<f32>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    epochs: Range<usize>,
    objective: Objective,
    stage: &str,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.targets.shape()[1] != net.config().out_dim {
        return Err(Error::shape(
            "train",
            format!("targets have {} columns, model emits {}", data.targets.shape()[1], net.config().out_dim),
        ));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= net.config().num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} exceeds the model's {} classes",
            net.config().num_classes
        )));
    }
    let mut opt = Sgd::new(net, MOMENTUM);
    let mut logs = Vec::new();
    for epoch in epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, &cfg.lr_stages)?;
        let mut dropout_rng = Rng::derived(cfg.seed, DROPOUT_STREAM + epoch as u64);
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        for idx in &batches {
            let batch = data.batch(idx)?;
            let mut step = compute_step(net, &batch, objective, &cfg.weights, &mut dropout_rng)?;
            clip_global_norm(&mut step.grads, CLIP_NORM)?;
            opt.step(net, &step.grads, lr)?;
            net.update_running_stats(&step.bn_stats)?;
            for (s, v) in sums.iter_mut().zip([step.cls, step.mse, step.con, step.total]) {
                *s += v;
            }
        }
        let k = batches.len() as f64;
        let log = EpochLog {
            epoch,
            stage: stage.to_string(),
            lr,
            loss_cls: sums[0] / k,
            loss_mse: sums[1] / k,
            loss_con: sums[2] / k,
            loss_total: sums[3] / k,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch} [{stage}] lr={lr:.1e} total={:.5} cls={:.4} mse={:.5} con={:.4}",
            log.loss_total,
            log.loss_cls,
            log.loss_mse,
            log.loss_con
        );
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Regression warm-up: epochs `[0, warmup_epochs)` optimizing `λ2·L_MSE`.
pub fn train_stage_mse(
    net: &mut PhenoNet<f32>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    run_epochs(net, data, cfg, 0..cfg.warmup_epochs, Objective::MSE_ONLY, "mse", on_epoch)
}

/// Joint optimization of the weighted objective over epochs
/// `[warmup_epochs, max_epochs)` with the terms enabled in `cfg`.
pub fn train_joint(
    net: &mut PhenoNet<f32>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let objective = Objective::from_config(cfg);
    if !(objective.cls || objective.mse || objective.con) {
        return Err(Error::NoActiveObjective);
    }
    run_epochs(net, data, cfg, cfg.warmup_epochs..cfg.max_epochs, objective, "joint", on_epoch)
}

/// Warm-up followed by joint training. Without the regression term there is
/// nothing to warm up, so joint training then covers every epoch.
pub fn fit(
    net: &mut PhenoNet<f32>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if !(cfg.use_cls || cfg.use_mse || cfg.use_con) {
        return Err(Error::NoActiveObjective);
    }
    if cfg.use_mse {
        let mut logs = train_stage_mse(net, data, cfg, on_epoch)?;
        logs.extend(train_joint(net, data, cfg, on_epoch)?);
        Ok(logs)
    } else {
        let joint = TrainConfig { warmup_epochs: 0, ..cfg.clone() };
        train_joint(net, data, &joint, on_epoch)
    }
}

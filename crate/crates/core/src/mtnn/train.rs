use ndarray::{Array1, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compute_penalties, loss_and_grads, loss_total, Grads, TaskWeights, DEFAULT_BETA_CLAMP};
use super::{Dense, Mtnn, MtnnError, Scalar, Task, TrainBatch};

/// Which classification loss the edge and call-trace heads use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-node penalty `#zeros / #ones`, recomputed on every call to `train`.
    Adaptive,
    /// Plain binary cross-entropy (all penalties 1).
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub weights: TaskWeights,
    pub loss: LossKind,
    pub beta_clamp: f64,
    pub rng_seed: u64,
    /// Update only the heads; the encoder stays as given.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            weights: TaskWeights::default(),
            loss: LossKind::Adaptive,
            beta_clamp: DEFAULT_BETA_CLAMP,
            rng_seed: 0,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Mean mini-batch loss for every epoch run.
    pub epoch_loss: Vec<f64>,
    /// Full-batch loss with the returned parameters.
    pub final_loss: f64,
    pub edge: HeadMetrics,
    pub ctx: HeadMetrics,
    pub approach_mse: f64,
}

impl TrainMetrics {
    pub fn best_loss(&self) -> f64 {
        self.epoch_loss.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Micro-averaged over every (row, node) pair. Recall and precision are 1
/// when their denominators are empty.
pub fn eval_metrics<F: Scalar>(probs: ArrayView2<'_, F>, labels: ArrayView2<'_, F>, threshold: f64) -> HeadMetrics {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    Zip::from(probs).and(labels).for_each(|&q, &p| {
        let pred = q.f64() >= threshold;
        let truth = p.f64() >= 0.5;
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    });
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    HeadMetrics {
        recall,
        precision,
        f1,
    }
}

struct Adam<F> {
    m: Vec<Dense<F>>,
    v: Vec<Dense<F>>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    fn new(model: &Mtnn<F>) -> Self {
        let zeros: Vec<Dense<F>> = model
            .encoder
            .iter()
            .chain(model.heads.iter())
            .map(|d| Dense::zeros(d.fan_in(), d.fan_out()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Mtnn<F>, grads: &Grads<F>, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let c1 = F::one() - F::of(cfg.beta1.powi(self.t));
        let c2 = F::one() - F::of(cfg.beta2.powi(self.t));
        let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
        let frozen = if cfg.freeze_encoder { model.encoder.len() } else { 0 };
        let params = model.encoder.iter_mut().chain(model.heads.iter_mut());
        let layers = params.zip(grads.layers()).zip(&mut self.m).zip(&mut self.v);
        for (((p, g), m), v) in layers.skip(frozen) {
            let upd = |p: &mut F, g: F, m: &mut F, v: &mut F| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            };
            Zip::from(&mut p.w).and(&g.w).and(&mut m.w).and(&mut v.w).for_each(|p, &g, m, v| upd(p, g, m, v));
            Zip::from(&mut p.b).and(&g.b).and(&mut m.b).and(&mut v.b).for_each(|p, &g, m, v| upd(p, g, m, v));
        }
    }
}

fn penalties<F: Scalar>(batch: &TrainBatch<F>, cfg: &TrainConfig, task: Task) -> Array1<F> {
    let labels = batch.labels(task);
    match cfg.loss {
        LossKind::Adaptive if cfg.weights.enabled(task) => compute_penalties(labels.view(), cfg.beta_clamp),
        _ => Array1::from_elem(labels.ncols(), F::one()),
    }
}

/// Mini-batch Adam on the weighted task loss. The input model is left
/// untouched; a trained copy is returned.
pub fn train<F: Scalar>(
    model: &Mtnn<F>,
    batch: &TrainBatch<F>,
    cfg: &TrainConfig,
) -> Result<(Mtnn<F>, TrainMetrics), MtnnError> {
    batch.validate(&model.spec)?;
    if cfg.batch_size == 0 {
        return Err(MtnnError::Shape("batch_size must be positive".into()));
    }
    let pe = penalties(batch, cfg, Task::Edge);
    let pc = penalties(batch, cfg, Task::Ctx);

    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..batch.rows()).collect();
    let mut metrics = TrainMetrics::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mb = batch.select(chunk);
            let (loss, grads) = loss_and_grads(&model, &mb, pe.view(), pc.view(), &cfg.weights)
                .map_err(|e| match e {
                    MtnnError::NonFinite(_) => MtnnError::Divergence {
                        epoch,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            sum += loss.total * chunk.len() as f64;
            adam.step(&mut model, &grads, cfg);
        }
        let mean = sum / batch.rows() as f64;
        if !mean.is_finite() {
            return Err(MtnnError::Divergence { epoch, loss: mean });
        }
        metrics.epoch_loss.push(mean);
    }

    let pass = model.forward_batch(batch.inputs.view()).map_err(|_| MtnnError::Divergence {
        epoch: cfg.epochs,
        loss: f64::NAN,
    })?;
    let final_loss = loss_total(&pass.outputs, batch, pe.view(), pc.view(), &cfg.weights)?;
    metrics.final_loss = final_loss.total;
    if cfg.weights.enabled(Task::Edge) {
        metrics.edge = eval_metrics(pass.outputs[0].view(), batch.edge_labels.view(), 0.5);
    }
    if cfg.weights.enabled(Task::Ctx) {
        metrics.ctx = eval_metrics(pass.outputs[1].view(), batch.ctx_labels.view(), 0.5);
    }
    metrics.approach_mse = final_loss.approach;
    Ok((model, metrics))
}

//! Task losses and their gradients.
//!
//! Classification heads use a penalized cross-entropy per output node,
//!
//! ```text
//! l(p, q) = -(beta * p * ln q + (1 - p) * ln(1 - q))
//! ```
//!
//! summed over nodes and averaged over rows, with `q` clipped to
//! `[CLIP_EPS, 1 - CLIP_EPS]`. The approach head uses mean squared error over
//! all entries. The total is `alpha_edge * L_edge + alpha_ctx * L_ctx +
//! alpha_app * L_app`; a task with weight 0 is skipped entirely and its
//! labels are never touched.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Dense, ForwardPass, Mtnn, MtnnError, Scalar, Task, TrainBatch};

pub const CLIP_EPS: f64 = 1e-7;

/// Penalty given to a column that is never 1 (the ratio is undefined).
pub const DEFAULT_BETA_CLAMP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub edge: f64,
    pub ctx: f64,
    pub approach: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            edge: 1.0,
            ctx: 1.0,
            approach: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Edge => self.edge,
            Task::Ctx => self.ctx,
            Task::Approach => self.approach,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.edge, self.ctx, self.approach]
    }

    pub fn enabled(&self, task: Task) -> bool {
        self.get(task) != 0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub edge: f64,
    pub ctx: f64,
    pub approach: f64,
    pub total: f64,
}

/// Per column `#zeros / #ones`; columns with no ones get `clamp`.
pub fn compute_penalties<F: Scalar>(labels: ArrayView2<'_, F>, clamp: f64) -> Array1<F> {
    let rows = labels.nrows();
    labels
        .axis_iter(Axis(1))
        .map(|col| {
            let ones = col.iter().filter(|&&v| v > F::of(0.5)).count();
            if ones == 0 {
                F::of(clamp)
            } else {
                F::of((rows - ones) as f64 / ones as f64)
            }
        })
        .collect()
}

fn clip<F: Scalar>(q: F) -> (F, bool) {
    let lo = F::of(CLIP_EPS);
    let hi = F::one() - lo;
    if q < lo {
        (lo, true)
    } else if q > hi {
        (hi, true)
    } else {
        (q, false)
    }
}

/// Summed-over-nodes, mean-over-rows penalized cross-entropy.
fn classification_loss<F: Scalar>(q: &Array2<F>, p: &Array2<F>, beta: ArrayView1<'_, F>) -> F {
    let mut total = F::zero();
    for (qr, pr) in q.rows().into_iter().zip(p.rows()) {
        for ((&qv, &pv), &b) in qr.iter().zip(pr.iter()).zip(beta.iter()) {
            let (qc, _) = clip(qv);
            total -= b * pv * qc.ln() + (F::one() - pv) * (F::one() - qc).ln();
        }
    }
    total / F::of(q.nrows() as f64)
}

/// d loss / d logit for the classification loss with sigmoid outputs.
fn classification_grad<F: Scalar>(q: &Array2<F>, p: &Array2<F>, beta: ArrayView1<'_, F>) -> Array2<F> {
    let scale = F::one() / F::of(q.nrows() as f64);
    let mut g = Array2::zeros(q.raw_dim());
    for ((mut gr, qr), pr) in g.rows_mut().into_iter().zip(q.rows()).zip(p.rows()) {
        for (((gv, &qv), &pv), &b) in gr.iter_mut().zip(qr.iter()).zip(pr.iter()).zip(beta.iter()) {
            let (_, clipped) = clip(qv);
            if !clipped {
                *gv = scale * ((F::one() - pv) * qv - b * pv * (F::one() - qv));
            }
        }
    }
    g
}

fn mse<F: Scalar>(y: &Array2<F>, t: &Array2<F>) -> F {
    let n = F::of(y.len() as f64);
    y.iter().zip(t.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>() / n
}

fn mse_grad<F: Scalar>(y: &Array2<F>, t: &Array2<F>) -> Array2<F> {
    let scale = F::of(2.0) / F::of(y.len() as f64);
    let mut g = y - t;
    g.zip_mut_with(y, |gv, &yv| *gv = *gv * scale * yv * (F::one() - yv));
    g
}

/// Weighted total from head outputs.
pub fn loss_total<F: Scalar>(
    outputs: &[Array2<F>; 3],
    batch: &TrainBatch<F>,
    edge_penalty: ArrayView1<'_, F>,
    ctx_penalty: ArrayView1<'_, F>,
    weights: &TaskWeights,
) -> Result<LossBreakdown, MtnnError> {
    let mut out = LossBreakdown::default();
    if weights.enabled(Task::Edge) {
        out.edge = classification_loss(&outputs[0], &batch.edge_labels, edge_penalty).f64();
    }
    if weights.enabled(Task::Ctx) {
        out.ctx = classification_loss(&outputs[1], &batch.ctx_labels, ctx_penalty).f64();
    }
    if weights.enabled(Task::Approach) {
        out.approach = mse(&outputs[2], &batch.approach_labels).f64();
    }
    out.total = weights.edge * out.edge + weights.ctx * out.ctx + weights.approach * out.approach;
    if !out.total.is_finite() {
        return Err(MtnnError::NonFinite("loss"));
    }
    Ok(out)
}

/// Gradients with the same layout as the model.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub encoder: Vec<Dense<F>>,
    pub heads: [Dense<F>; 3],
}

impl<F: Scalar> Grads<F> {
    pub fn layers(&self) -> impl Iterator<Item = &Dense<F>> {
        self.encoder.iter().chain(self.heads.iter())
    }
}

/// Forward, loss and backprop in one go.
pub fn loss_and_grads<F: Scalar>(
    model: &Mtnn<F>,
    batch: &TrainBatch<F>,
    edge_penalty: ArrayView1<'_, F>,
    ctx_penalty: ArrayView1<'_, F>,
    weights: &TaskWeights,
) -> Result<(LossBreakdown, Grads<F>), MtnnError> {
    let pass = model.forward_batch(batch.inputs.view())?;
    let loss = loss_total(&pass.outputs, batch, edge_penalty, ctx_penalty, weights)?;
    let grads = backward(model, &pass, batch, edge_penalty, ctx_penalty, weights);
    Ok((loss, grads))
}

fn backward<F: Scalar>(
    model: &Mtnn<F>,
    pass: &ForwardPass<F>,
    batch: &TrainBatch<F>,
    edge_penalty: ArrayView1<'_, F>,
    ctx_penalty: ArrayView1<'_, F>,
    weights: &TaskWeights,
) -> Grads<F> {
    let z = pass.embedding();
    let mut dz: Array2<F> = Array2::zeros(z.raw_dim());
    let heads: [Dense<F>; 3] = std::array::from_fn(|h| {
        let task = Task::ALL[h];
        let head = &model.heads[h];
        let alpha = weights.get(task);
        if alpha == 0.0 {
            return Dense::zeros(head.fan_in(), head.fan_out());
        }
        let out = &pass.outputs[h];
        let mut d_logit = match task {
            Task::Edge => classification_grad(out, &batch.edge_labels, edge_penalty),
            Task::Ctx => classification_grad(out, &batch.ctx_labels, ctx_penalty),
            Task::Approach => mse_grad(out, &batch.approach_labels),
        };
        d_logit.mapv_inplace(|v| v * F::of(alpha));
        dz += &d_logit.dot(&head.w.t());
        Dense {
            w: z.t().dot(&d_logit),
            b: d_logit.sum_axis(Axis(0)),
        }
    });

    let mut encoder = Vec::with_capacity(model.encoder.len());
    let mut d_act = dz;
    for l in (0..model.encoder.len()).rev() {
        let act = &pass.activations[l + 1];
        let prev = &pass.activations[l];
        d_act.zip_mut_with(act, |g, &a| {
            if a <= F::zero() {
                *g = F::zero();
            }
        });
        let g = Dense {
            w: prev.t().dot(&d_act),
            b: d_act.sum_axis(Axis(0)),
        };
        if l > 0 {
            d_act = d_act.dot(&model.encoder[l].w.t());
        }
        encoder.push(g);
    }
    encoder.reverse();
    Grads { encoder, heads }
}

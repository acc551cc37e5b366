//! Input saliency: `S_i = sum_j |dz_j / dx_i|` over the embedding nodes.
//!
//! The absolute value sits inside the sum, so the full Jacobian is needed;
//! one reverse pass per embedding node, or equivalently the matrix product
//! `D_L W_L^T ... D_1 W_1^T` with `D_l` the ReLU masks at `x`. The product
//! is evaluated in whichever association order is cheaper.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::{Mtnn, MtnnError, Scalar};

/// Non-negative per-byte scores, one per model input position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub scores: Vec<f64>,
}

impl SaliencyMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Saliency over all embedding nodes.
pub fn saliency<F: Scalar>(model: &Mtnn<F>, x: ArrayView1<'_, F>) -> Result<SaliencyMap, MtnnError> {
    saliency_nodes(model, x, None)
}

/// Jacobian `dz/dx` restricted to `nodes` (all nodes when `None`).
pub fn jacobian<F: Scalar>(
    model: &Mtnn<F>,
    x: ArrayView1<'_, F>,
    nodes: Option<&[usize]>,
) -> Result<Array2<F>, MtnnError> {
    if x.len() != model.n_in() {
        return Err(MtnnError::Shape(format!(
            "input has {} entries, model expects {}",
            x.len(),
            model.n_in()
        )));
    }
    // ReLU masks along the forward pass.
    let mut masks: Vec<Array1<F>> = Vec::with_capacity(model.encoder.len());
    let mut h = x.to_owned();
    for layer in &model.encoder {
        let pre = h.dot(&layer.w) + &layer.b;
        masks.push(pre.mapv(|v| if v > F::zero() { F::one() } else { F::zero() }));
        h = pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
    }
    let m = model.embedding_dim();
    let sel: Vec<usize> = match nodes {
        Some(n) => {
            if let Some(&bad) = n.iter().find(|&&j| j >= m) {
                return Err(MtnnError::Shape(format!("embedding node {bad} out of range {m}")));
            }
            n.to_vec()
        }
        None => (0..m).collect(),
    };

    let dims: Vec<usize> = std::iter::once(model.n_in())
        .chain(model.encoder.iter().map(|l| l.fan_out()))
        .collect();
    let layers = model.encoder.len();
    // Cost of seeding from the selected nodes and walking back to the input
    // versus walking forward from the input and selecting at the end.
    let reverse_cost: usize = (0..layers).rev().map(|l| sel.len() * dims[l + 1] * dims[l]).sum();
    let forward_cost: usize = (0..layers).map(|l| dims[0] * dims[l] * dims[l + 1]).sum();

    let jac = if reverse_cost <= forward_cost {
        // Rows: selected nodes; start from the last layer's masked weights.
        let last = &model.encoder[layers - 1];
        let mut r = last.w.t().select(Axis(0), &sel);
        let mask = masks[layers - 1].select(Axis(0), &sel);
        r *= &mask.insert_axis(Axis(1));
        for l in (0..layers - 1).rev() {
            r *= &masks[l].view().insert_axis(Axis(0));
            r = r.dot(&model.encoder[l].w.t());
        }
        r
    } else {
        // Columns: input positions; J_l = D_l W_l^T J_{l-1}.
        let mut j: Array2<F> = Array2::eye(dims[0]);
        for (layer, mask) in model.encoder.iter().zip(&masks) {
            j = layer.w.t().dot(&j);
            j *= &mask.view().insert_axis(Axis(1));
        }
        j.select(Axis(0), &sel)
    };
    Ok(jac)
}

/// Saliency restricted to a subset of embedding nodes.
pub fn saliency_nodes<F: Scalar>(
    model: &Mtnn<F>,
    x: ArrayView1<'_, F>,
    nodes: Option<&[usize]>,
) -> Result<SaliencyMap, MtnnError> {
    let jac = jacobian(model, x, nodes)?;
    let scores = jac
        .axis_iter(Axis(1))
        .map(|col| col.iter().map(|v| v.f64().abs()).sum())
        .collect();
    Ok(SaliencyMap { scores })
}

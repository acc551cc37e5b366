//! The multi-task network: a shared ReLU encoder and three sigmoid heads
//! (edge, call-trace, approach).
//!
//! Weights are stored input-major (`rows = fan_in`, `cols = fan_out`) so a
//! batch forward is `x.dot(&w) + b`. The network is generic over the float
//! type; production uses `f32`, the gradient checks run in `f64`.

mod io;
mod loss;
mod saliency;
mod train;

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    load_embedding, load_model, read_embedding, read_model, save_embedding, save_model,
    write_embedding, write_model, EMBEDDING_MAGIC, FORMAT_VERSION, MODEL_MAGIC,
};
pub use loss::{
    compute_penalties, loss_and_grads, loss_total, Grads, LossBreakdown, TaskWeights,
    CLIP_EPS, DEFAULT_BETA_CLAMP,
};
pub use saliency::{saliency, saliency_nodes, SaliencyMap};
pub use train::{
    eval_metrics, train, HeadMetrics, LossKind, TrainConfig, TrainMetrics,
};

#[derive(Debug, thiserror::Error)]
pub enum MtnnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input of {len} bytes does not fit n_in = {n_in}")]
    InputTooLong { len: usize, n_in: usize },
    #[error("inputs must hold at least one byte")]
    EmptyInput,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Float type the network runs in.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::FromPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const DEFAULT_ENCODER_DIMS: [usize; 3] = [2048, 1024, 512];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_in: usize,
    pub encoder_dims: Vec<usize>,
    pub n_edges: usize,
    pub n_ctx: usize,
}

impl ArchSpec {
    pub fn new(n_in: usize, n_edges: usize, n_ctx: usize) -> Self {
        ArchSpec {
            n_in,
            encoder_dims: DEFAULT_ENCODER_DIMS.to_vec(),
            n_edges,
            n_ctx,
        }
    }

    pub fn with_encoder(mut self, dims: &[usize]) -> Self {
        self.encoder_dims = dims.to_vec();
        self
    }

    pub fn n_approach(&self) -> usize {
        self.n_edges
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated")
    }

    pub fn head_widths(&self) -> [usize; 3] {
        [self.n_edges, self.n_ctx, self.n_approach()]
    }

    pub fn validate(&self) -> Result<(), MtnnError> {
        if self.n_in == 0 || self.n_edges == 0 || self.n_ctx == 0 {
            return Err(MtnnError::InvalidArch(format!(
                "n_in={}, n_edges={}, n_ctx={} must all be >= 1",
                self.n_in, self.n_edges, self.n_ctx
            )));
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return Err(MtnnError::InvalidArch(format!(
                "encoder dims {:?} must be non-empty and positive",
                self.encoder_dims
            )));
        }
        Ok(())
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| F::of(rng.gen_range(-limit..limit)));
        Dense {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn affine(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        x.dot(&self.w) + &self.b
    }

    pub fn cast<G: Scalar>(&self) -> Dense<G> {
        Dense {
            w: self.w.mapv(|v| G::of(v.f64())),
            b: self.b.mapv(|v| G::of(v.f64())),
        }
    }
}

/// Heads in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Edge,
    Ctx,
    Approach,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Edge, Task::Ctx, Task::Approach];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Network parameters. `ModelParams` is the production `f32` instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Mtnn<F> {
    pub spec: ArchSpec,
    pub encoder: Vec<Dense<F>>,
    pub heads: [Dense<F>; 3],
}

pub type ModelParams = Mtnn<f32>;

/// Everything a forward pass produced, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass<F> {
    /// Input followed by each encoder activation; the last one is `z`.
    pub activations: Vec<Array2<F>>,
    /// Sigmoid outputs per head.
    pub outputs: [Array2<F>; 3],
}

impl<F: Scalar> ForwardPass<F> {
    pub fn embedding(&self) -> &Array2<F> {
        self.activations.last().expect("at least the input")
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

impl<F: Scalar> Mtnn<F> {
    pub fn zeros(spec: ArchSpec) -> Result<Self, MtnnError> {
        spec.validate()?;
        let mut encoder = Vec::new();
        let mut fan_in = spec.n_in;
        for &d in &spec.encoder_dims {
            encoder.push(Dense::zeros(fan_in, d));
            fan_in = d;
        }
        let [e, c, a] = spec.head_widths();
        Ok(Mtnn {
            heads: [Dense::zeros(fan_in, e), Dense::zeros(fan_in, c), Dense::zeros(fan_in, a)],
            encoder,
            spec,
        })
    }

    pub fn n_in(&self) -> usize {
        self.spec.n_in
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    /// Batch forward. Rows of `x` are padded, normalized inputs.
    pub fn forward_batch(&self, x: ArrayView2<'_, F>) -> Result<ForwardPass<F>, MtnnError> {
        if x.ncols() != self.spec.n_in {
            return Err(MtnnError::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.spec.n_in
            )));
        }
        let mut activations = Vec::with_capacity(self.encoder.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.encoder {
            let h = layer.affine(activations.last().expect("non-empty").view()).mapv(relu);
            activations.push(h);
        }
        let z = activations.last().expect("non-empty").view();
        let outputs = [
            self.heads[0].affine(z).mapv(sigmoid),
            self.heads[1].affine(z).mapv(sigmoid),
            self.heads[2].affine(z).mapv(sigmoid),
        ];
        let pass = ForwardPass {
            activations,
            outputs,
        };
        if !pass.embedding().iter().all(|v| v.is_finite())
            || !pass.outputs.iter().all(|o| o.iter().all(|v| v.is_finite()))
        {
            return Err(MtnnError::NonFinite("forward pass"));
        }
        Ok(pass)
    }

    /// Single input forward: `(z, edge_probs, ctx_probs, approach_pred)`.
    #[allow(clippy::type_complexity)]
    pub fn forward(
        &self,
        x: ArrayView1<'_, F>,
    ) -> Result<(Array1<F>, Array1<F>, Array1<F>, Array1<F>), MtnnError> {
        let pass = self.forward_batch(x.insert_axis(Axis(0)))?;
        let row = |a: &Array2<F>| a.row(0).to_owned();
        Ok((
            row(pass.embedding()),
            row(&pass.outputs[0]),
            row(&pass.outputs[1]),
            row(&pass.outputs[2]),
        ))
    }

    /// Encoder only: `z` for each row.
    pub fn embed(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>, MtnnError> {
        let mut h = x.to_owned();
        for layer in &self.encoder {
            h = layer.affine(h.view()).mapv(relu);
        }
        Ok(h)
    }

    pub fn cast<G: Scalar>(&self) -> Mtnn<G> {
        Mtnn {
            spec: self.spec.clone(),
            encoder: self.encoder.iter().map(Dense::cast).collect(),
            heads: [self.heads[0].cast(), self.heads[1].cast(), self.heads[2].cast()],
        }
    }

    /// Rebuilds the heads for new output widths. Existing columns keep their
    /// weights, new columns are freshly initialized.
    pub fn resize_heads(&mut self, n_edges: usize, n_ctx: usize, rng_seed: u64) -> Result<(), MtnnError> {
        let mut spec = self.spec.clone();
        spec.n_edges = n_edges;
        spec.n_ctx = n_ctx;
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let m = self.embedding_dim();
        for (head, width) in self.heads.iter_mut().zip(spec.head_widths()) {
            let mut fresh = Dense::he_uniform(m, width, &mut rng);
            let keep = head.fan_out().min(width);
            fresh
                .w
                .slice_mut(ndarray::s![.., ..keep])
                .assign(&head.w.slice(ndarray::s![.., ..keep]));
            fresh
                .b
                .slice_mut(ndarray::s![..keep])
                .assign(&head.b.slice(ndarray::s![..keep]));
            *head = fresh;
        }
        self.spec = spec;
        Ok(())
    }

    /// Parameter count, mostly for logging.
    pub fn n_params(&self) -> usize {
        self.encoder
            .iter()
            .chain(self.heads.iter())
            .map(|d| d.w.len() + d.b.len())
            .sum()
    }
}

/// He-uniform weights and zero biases, reproducible from `rng_seed`.
pub fn build_model<F: Scalar>(spec: ArchSpec, rng_seed: u64) -> Result<Mtnn<F>, MtnnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut encoder = Vec::new();
    let mut fan_in = spec.n_in;
    for &d in &spec.encoder_dims {
        encoder.push(Dense::he_uniform(fan_in, d, &mut rng));
        fan_in = d;
    }
    let [e, c, a] = spec.head_widths();
    let heads = [
        Dense::he_uniform(fan_in, e, &mut rng),
        Dense::he_uniform(fan_in, c, &mut rng),
        Dense::he_uniform(fan_in, a, &mut rng),
    ];
    Ok(Mtnn {
        spec,
        encoder,
        heads,
    })
}

/// Right-pads with 0x00 to `n_in` and scales every byte into `[0, 1]`.
pub fn pad_input<F: Scalar>(bytes: &[u8], n_in: usize) -> Result<Array1<F>, MtnnError> {
    if bytes.is_empty() {
        return Err(MtnnError::EmptyInput);
    }
    if bytes.len() > n_in {
        return Err(MtnnError::InputTooLong {
            len: bytes.len(),
            n_in,
        });
    }
    let mut v = Array1::zeros(n_in);
    let scale = F::of(255.0);
    for (slot, &b) in v.iter_mut().zip(bytes) {
        *slot = F::of(b as f64) / scale;
    }
    Ok(v)
}

/// Stacks padded inputs into a batch matrix.
pub fn pad_batch<F: Scalar>(inputs: &[&[u8]], n_in: usize) -> Result<Array2<F>, MtnnError> {
    let mut x = Array2::zeros((inputs.len(), n_in));
    for (mut row, bytes) in x.rows_mut().into_iter().zip(inputs) {
        row.assign(&pad_input::<F>(bytes, n_in)?);
    }
    Ok(x)
}

/// Inputs and per-task labels; rows line up across all four matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<F> {
    pub inputs: Array2<F>,
    pub edge_labels: Array2<F>,
    pub ctx_labels: Array2<F>,
    pub approach_labels: Array2<F>,
}

impl<F: Scalar> TrainBatch<F> {
    pub fn rows(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn labels(&self, task: Task) -> &Array2<F> {
        match task {
            Task::Edge => &self.edge_labels,
            Task::Ctx => &self.ctx_labels,
            Task::Approach => &self.approach_labels,
        }
    }

    pub fn validate(&self, spec: &ArchSpec) -> Result<(), MtnnError> {
        let n = self.rows();
        if n == 0 {
            return Err(MtnnError::Shape("empty batch".into()));
        }
        if self.inputs.ncols() != spec.n_in {
            return Err(MtnnError::Shape(format!(
                "inputs have {} columns, spec n_in {}",
                self.inputs.ncols(),
                spec.n_in
            )));
        }
        for (task, width) in Task::ALL.into_iter().zip(spec.head_widths()) {
            let l = self.labels(task);
            if l.nrows() != n || l.ncols() != width {
                return Err(MtnnError::Shape(format!(
                    "{task:?} labels are {}x{}, expected {n}x{width}",
                    l.nrows(),
                    l.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Rows `idx` of every matrix.
    pub fn select(&self, idx: &[usize]) -> Self {
        TrainBatch {
            inputs: self.inputs.select(Axis(0), idx),
            edge_labels: self.edge_labels.select(Axis(0), idx),
            ctx_labels: self.ctx_labels.select(Axis(0), idx),
            approach_labels: self.approach_labels.select(Axis(0), idx),
        }
    }
}

/// Encoder weights plus the shape prefix needed to rebuild `input -> z`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub version: u32,
    pub n_in: usize,
    pub encoder: Vec<Dense<f32>>,
}

impl EmbeddingBundle {
    pub fn encoder_dims(&self) -> Vec<usize> {
        self.encoder.iter().map(Dense::fan_out).collect()
    }
}

pub fn export_embedding(model: &ModelParams) -> EmbeddingBundle {
    EmbeddingBundle {
        version: FORMAT_VERSION,
        n_in: model.spec.n_in,
        encoder: model.encoder.clone(),
    }
}

/// Installs a bundle's encoder under fresh heads sized for `spec`. The
/// spec's encoder dims are taken from the bundle.
pub fn import_embedding(
    bundle: &EmbeddingBundle,
    spec: &ArchSpec,
    rng_seed: u64,
) -> Result<ModelParams, MtnnError> {
    if bundle.n_in != spec.n_in {
        return Err(MtnnError::Shape(format!(
            "bundle n_in {} does not match target n_in {}",
            bundle.n_in, spec.n_in
        )));
    }
    let mut spec = spec.clone();
    spec.encoder_dims = bundle.encoder_dims();
    let mut model = build_model::<f32>(spec, rng_seed)?;
    model.encoder = bundle.encoder.clone();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_spec() -> ArchSpec {
        ArchSpec::new(4, 3, 2).with_encoder(&[5, 3])
    }

    #[test]
    fn pad_examples() {
        let v: Array1<f64> = pad_input(&[255], 4).unwrap();
        assert_eq!(v, array![1.0, 0.0, 0.0, 0.0]);
        let v: Array1<f64> = pad_input(&[0, 128], 2).unwrap();
        assert_eq!(v, array![0.0, 128.0 / 255.0]);
        assert!(matches!(pad_input::<f64>(&[], 4), Err(MtnnError::EmptyInput)));
        assert!(matches!(pad_input::<f64>(&[1, 2, 3], 2), Err(MtnnError::InputTooLong { .. })));
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let a: ModelParams = build_model(small_spec(), 7).unwrap();
        let b: ModelParams = build_model(small_spec(), 7).unwrap();
        let c: ModelParams = build_model(small_spec(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.encoder.iter().all(|l| l.b.iter().all(|&x| x == 0.0)));

        let big: ModelParams = build_model(ArchSpec::new(64, 2, 2), 1).unwrap();
        assert_eq!(big.encoder[0].w.dim(), (64, 2048));
        assert_eq!(big.embedding_dim(), 512);
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let m: Mtnn<f64> = Mtnn::zeros(small_spec()).unwrap();
        let x = array![0.3, 0.1, 0.9, 0.0];
        let (z, e, c, a) = m.forward(x.view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        for out in [e, c, a] {
            assert!(out.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn hand_computed_two_two_one_network() {
        // x = [1, 2]; h = relu(x W1 + b1); y = sigmoid(h W2 + b2)
        let spec = ArchSpec::new(2, 1, 1).with_encoder(&[2]);
        let mut m: Mtnn<f64> = Mtnn::zeros(spec).unwrap();
        m.encoder[0].w = array![[0.5, -1.0], [0.25, 0.5]];
        m.encoder[0].b = array![0.0, -0.5];
        m.heads[0].w = array![[2.0], [-3.0]];
        m.heads[0].b = array![-0.5];
        let (z, e, _, _) = m.forward(array![1.0, 2.0].view()).unwrap();
        // pre = [0.5 + 0.5, -1 + 1 - 0.5] = [1.0, -0.5] -> relu [1.0, 0.0]
        assert_eq!(z, array![1.0, 0.0]);
        // logit = 2 * 1 - 0.5 = 1.5
        let expected = 1.0 / (1.0 + (-1.5f64).exp());
        assert!((e[0] - expected).abs() < 1e-15);
        assert!((expected - 0.817_574_476_193_643_7).abs() < 1e-12);
    }

    #[test]
    fn outputs_stay_in_open_unit_interval() {
        let m: Mtnn<f64> = build_model(small_spec(), 3).unwrap();
        let x = Array2::from_shape_fn((16, 4), |(i, j)| ((i * 7 + j * 13) % 17) as f64 / 16.0);
        let pass = m.forward_batch(x.view()).unwrap();
        for o in &pass.outputs {
            assert!(o.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn resize_heads_keeps_old_columns() {
        let mut m: ModelParams = build_model(small_spec(), 3).unwrap();
        let before = m.clone();
        m.resize_heads(5, 2, 11).unwrap();
        assert_eq!(m.heads[0].w.dim(), (3, 5));
        assert_eq!(m.heads[2].w.dim(), (3, 5));
        assert_eq!(
            m.heads[0].w.slice(ndarray::s![.., ..3]),
            before.heads[0].w.view()
        );
        assert_eq!(m.heads[1], before.heads[1]);
        assert_eq!(m.encoder, before.encoder);
    }

    #[test]
    fn import_checks_n_in_and_reinitializes_heads() {
        let m: ModelParams = build_model(small_spec(), 3).unwrap();
        let bundle = export_embedding(&m);
        let same = import_embedding(&bundle, &small_spec(), 9).unwrap();
        let x = Array2::from_elem((2, 4), 0.5f32);
        assert_eq!(m.embed(x.view()).unwrap(), same.embed(x.view()).unwrap());

        let wider = ArchSpec::new(4, 9, 4).with_encoder(&[5, 3]);
        let w = import_embedding(&bundle, &wider, 9).unwrap();
        assert_eq!(w.encoder, m.encoder);
        assert_eq!(w.heads[0].fan_out(), 9);

        let bad = ArchSpec::new(5, 3, 2);
        assert!(matches!(import_embedding(&bundle, &bad, 0), Err(MtnnError::Shape(_))));
    }
}

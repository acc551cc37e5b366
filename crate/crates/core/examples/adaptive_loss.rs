//! Rare outputs and the adaptive penalty.
//!
//! One output fires on 2% of rows, another on half of them. With plain
//! cross-entropy the network learns to always predict zero for the rare
//! one; weighting false negatives by the negative/positive ratio brings its
//! recall back.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtfuzz::mtnn::{
    build_model, compute_penalties, eval_metrics, train, ArchSpec, LossKind, ModelParams, TaskWeights, TrainBatch,
    TrainConfig, DEFAULT_BETA_CLAMP,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = 1000;
    let inputs = Array2::from_shape_fn((rows, 8), |_| rng.gen_range(0.0f32..1.0));
    let mut labels = Array2::<f32>::zeros((rows, 2));
    for i in 0..rows {
        labels[[i, 0]] = (inputs[[i, 0]] > 0.98) as u8 as f32;
        labels[[i, 1]] = (inputs[[i, 1]] > 0.5) as u8 as f32;
    }
    println!("penalties {:?}", compute_penalties(labels.view(), DEFAULT_BETA_CLAMP).to_vec());

    let batch = TrainBatch {
        inputs,
        edge_labels: labels,
        ctx_labels: Array2::zeros((rows, 1)),
        approach_labels: Array2::zeros((rows, 2)),
    };
    let model: ModelParams = build_model(ArchSpec::new(8, 2, 1).with_encoder(&[32, 16]), 2)?;
    for loss in [LossKind::Default, LossKind::Adaptive] {
        let cfg = TrainConfig {
            loss,
            weights: TaskWeights { edge: 1.0, ctx: 0.0, approach: 0.0 },
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &batch, &cfg)?;
        let out = trained.forward_batch(batch.inputs.view())?;
        let probs = &out.outputs[0];
        for (j, name) in ["rare", "common"].iter().enumerate() {
            let m = eval_metrics(probs.slice(s![.., j..j + 1]), batch.edge_labels.slice(s![.., j..j + 1]), 0.5);
            println!("{loss:?} {name:<6} recall {:.2} precision {:.2}", m.recall, m.precision);
        }
    }
    Ok(())
}

//! Gradient saliency picks out the bytes a branch actually depends on.
//!
//! The edge labels here are synthetic: edge `j` fires when byte `2j` is above
//! 128. After training, the bytes with the largest input gradient should be
//! the even ones, and those are what the mutator would enumerate.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtfuzz::mtnn::{build_model, pad_input, saliency, train, ArchSpec, ModelParams, TrainBatch, TrainConfig};
use mtfuzz::mutator::top_k;

const N_IN: usize = 16;
const N_EDGES: usize = 4;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = 400;
    let raw: Vec<Vec<u8>> = (0..rows).map(|_| (0..N_IN).map(|_| rng.gen()).collect()).collect();
    let inputs = Array2::from_shape_fn((rows, N_IN), |(i, j)| raw[i][j] as f32 / 255.0);
    let edge_labels = Array2::from_shape_fn((rows, N_EDGES), |(i, j)| (raw[i][2 * j] > 128) as u8 as f32);
    let batch = TrainBatch {
        inputs,
        edge_labels,
        ctx_labels: Array2::zeros((rows, 1)),
        approach_labels: Array2::zeros((rows, N_EDGES)),
    };

    let model: ModelParams = build_model(ArchSpec::new(N_IN, N_EDGES, 1).with_encoder(&[32, 16]), 1)?;
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let (model, metrics) = train(&model, &batch, &cfg)?;
    println!("final training loss {:.4}", metrics.best_loss());

    let seed: Vec<u8> = (0..N_IN as u8).map(|b| b.wrapping_mul(37)).collect();
    let x: Array1<f32> = pad_input(&seed, N_IN)?;
    let map = saliency(&model, x.view())?;
    for (i, s) in map.scores.iter().enumerate() {
        let bar = "#".repeat((s * 20.0 / map.scores.iter().cloned().fold(0.0, f64::max)) as usize);
        println!("byte {i:>2} {s:>8.4} {bar}");
    }
    let hot = top_k(&map, seed.len(), N_EDGES);
    println!("hot bytes {:?}", hot.positions);
    Ok(())
}

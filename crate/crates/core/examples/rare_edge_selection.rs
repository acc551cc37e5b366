//! Importance-sampled seed selection on a small corpus.
//!
//! Random inputs for `chain` mostly stop at the first level, so their edges
//! are common. The few that spell a key prefix own rare edges, and those are
//! the seeds the scheduler hands to the next round.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtfuzz::mutator::random_input;
use mtfuzz::scheduler::Corpus;
use mtfuzz::targets::{builtin, execute, TargetProgram, TestInput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = builtin("chain")?;
    let mut corpus = Corpus::new(target.registry_id());
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut inputs: Vec<Vec<u8>> = (0..2000).map(|_| random_input(&mut rng, 32)).collect();
    inputs.push(b"cH4\x10\x10\x10\x10\x10\x01\x81\x01".to_vec());
    inputs.push(b"cH41n".to_vec());
    for (i, bytes) in inputs.into_iter().enumerate() {
        let input = TestInput::new(0, bytes)?;
        let snap = execute(&target, &input)?;
        corpus.ingest(&input, snap, i as u64)?;
    }
    // Nothing counts as freshly retained for the next round.
    corpus.start_round();

    println!("{} seeds, {} edges", corpus.len(), corpus.global().edge.len());
    println!("rarest edges (hits):");
    for e in corpus.rarity_rank().into_iter().take(6) {
        println!("  edge {:>3}  {}", e.0, corpus.edge_hits()[&e]);
    }
    let picked = corpus.select_training_set(6, 4);
    println!("selected for training and mutation:");
    for id in picked {
        let rec = corpus.get(id).expect("selected ids exist");
        println!("  seed {id:>3} {:?}", String::from_utf8_lossy(&rec.input.bytes));
    }
    Ok(())
}

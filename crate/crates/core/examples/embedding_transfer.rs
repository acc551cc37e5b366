//! Reusing an encoder trained on one parser for another parser of the same
//! format.
//!
//! A short campaign on `tlv_a` leaves a model behind. Its shared encoder goes
//! into an embedding bundle, and a `tlv_b` campaign starts from that bundle
//! instead of random weights. The first training after the import only fits
//! the new task heads.

use mtfuzz::mtnn::{export_embedding, load_model, save_embedding};
use mtfuzz::orchestrator::{FuzzConfig, Fuzzer};

fn small(target: &str, out: &std::path::Path) -> FuzzConfig {
    FuzzConfig {
        encoder_dims: vec![64, 32, 16],
        exec_budget: Some(60_000),
        sample_budget: Some(4),
        round_budget: 8_000,
        rounds: 1000,
        ..FuzzConfig::for_target(target, out)
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = tempfile::tempdir()?;
    let src = work.path().join("tlv_a");
    let a = Fuzzer::new(small("builtin:tlv_a", &src))?.run()?;
    println!("tlv_a: {} edges after {} execs", a.edges, a.execs);

    let bundle = work.path().join("tlv.mtfe");
    let model = load_model(&src.join("model/final.mtfz"))?;
    save_embedding(&bundle, &export_embedding(&model))?;
    println!("bundle {} bytes", std::fs::metadata(&bundle)?.len());

    let cfg = FuzzConfig {
        warm_embedding: Some(bundle),
        exec_budget: Some(20_000),
        ..small("builtin:tlv_b", &work.path().join("tlv_b"))
    };
    let b = Fuzzer::new(cfg)?.run()?;
    println!("tlv_b from the bundle: {} edges, {} bugs after {} execs", b.edges, b.bugs.len(), b.execs);
    Ok(())
}

//! A whole campaign through the library API, then the report the CLI prints.
//!
//! `cargo run --release --example campaign -- builtin:magic_maze`

use mtfuzz::orchestrator::{self, FuzzConfig, Fuzzer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = std::env::args().nth(1).unwrap_or_else(|| "builtin:magic_maze".into());
    let out = tempfile::tempdir()?;
    let cfg = FuzzConfig {
        encoder_dims: vec![64, 32, 16],
        exec_budget: Some(100_000),
        rounds: 1000,
        ..FuzzConfig::for_target(&target, out.path())
    };
    let mut fuzzer = Fuzzer::new(cfg)?;
    fuzzer.bootstrap()?;
    println!("warm-up: {} seeds from {} execs", fuzzer.corpus().len(), fuzzer.execs());
    while !fuzzer.exhausted() {
        let r = fuzzer.fuzz_round()?;
        println!(
            "round {:>2}: {:>6} execs, {:>3} edges, {} bugs, loss {:.3}",
            r.round,
            r.execs,
            r.edges,
            r.bugs,
            r.train_loss.unwrap_or(f64::NAN)
        );
    }
    fuzzer.run()?;
    print!("{}", orchestrator::report(out.path())?);
    Ok(())
}

//! Driving an external program over the pipe protocol.
//!
//! The `mtfuzz` binary carries a conforming child behind the hidden
//! `ref-child` subcommand. Build it first (`cargo build --bin mtfuzz`), or
//! pass the path of any other child as the first argument.

use std::path::PathBuf;
use std::time::Duration;

use mtfuzz::targets::{execute, SubprocessTarget, TestInput};

fn child_path() -> PathBuf {
    if let Some(p) = std::env::args().nth(1) {
        return PathBuf::from(p);
    }
    // target/<profile>/examples/subprocess_target -> target/<profile>/mtfuzz
    let exe = std::env::current_exe().expect("own path");
    let dir = exe.parent().and_then(|p| p.parent()).expect("examples dir has a parent");
    dir.join(format!("mtfuzz{}", std::env::consts::EXE_SUFFIX))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = child_path();
    if !path.exists() {
        eprintln!("{} not found; run `cargo build --bin mtfuzz` first", path.display());
        std::process::exit(2);
    }
    for mode in ["echo", "truncate", "hang"] {
        let args = vec!["ref-child".to_string(), "--mode".to_string(), mode.to_string()];
        let target = SubprocessTarget::new(&path, args, 256)?.with_timeout(Duration::from_millis(300));
        let input = TestInput::new(0, b"NO".to_vec())?;
        let snap = execute(&target, &input)?;
        println!(
            "{mode:<8} status {:?}, {} edges, {} comparisons",
            snap.exec_status,
            snap.edge.len(),
            snap.cmp_log.len()
        );
    }
    Ok(())
}

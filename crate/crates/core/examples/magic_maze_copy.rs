//! Comparison operands copied straight into the input open magic guards that
//! byte enumeration alone would need billions of tries for.
//!
//! Each pass runs the current input, turns the comparison log into
//! direct-copy variants and keeps whichever variant reports a new bug.

use mtfuzz::mutator::direct_copy;
use mtfuzz::targets::{builtin, execute, TestInput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = builtin("magic_maze")?;
    let mut current = TestInput::new(0, vec![0u8; 64])?;
    let mut found = execute(&target, &current)?.bugs.len();
    let mut execs = 1;

    loop {
        let snap = execute(&target, &current)?;
        let mut improved = false;
        for variant in direct_copy(&current, &snap.cmp_log) {
            execs += 1;
            let bugs = execute(&target, &variant)?.bugs.len();
            if bugs > found {
                println!("{:<16} -> {bugs} bugs", variant.mutation_note);
                found = bugs;
                current = variant;
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }
    println!("{found} of 8 bugs after {execs} executions");
    Ok(())
}

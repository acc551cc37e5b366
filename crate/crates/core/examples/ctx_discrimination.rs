//! Two inputs with identical edge coverage but different calling contexts.
//!
//! `[1, 0]` and `[0, 8]` visit the same branches of `foo`, just from
//! opposite call sites. Edge coverage alone would drop the second input; the
//! call-trace bitmap keeps it, and it is the one that overflows.

use mtfuzz::scheduler::Corpus;
use mtfuzz::targets::{builtin, execute, TargetProgram, TestInput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = builtin("ctx_demo")?;
    let mut corpus = Corpus::new(target.registry_id());

    for (i, bytes) in [vec![1u8, 0], vec![0, 8]].into_iter().enumerate() {
        let input = TestInput::new(i as u64, bytes)?;
        let snap = execute(&target, &input)?;
        let edges: Vec<u32> = snap.edge.iter().map(|e| e.0).collect();
        let ctx: Vec<u32> = snap.ctx.iter().map(|c| c.0).collect();
        let bugs: Vec<String> = snap.bugs.iter().map(|b| b.label.clone()).collect();
        let outcome = corpus.ingest(&input, snap, i as u64 + 1)?;
        println!("input {:?}", input.bytes);
        println!("  edges        {edges:?}");
        println!("  call traces  {ctx:?}");
        println!("  bugs         {bugs:?}");
        println!("  retained     {} (new edges {}, new call traces {})", outcome.retained, outcome.novelty.new_edges.len(), outcome.novelty.new_ctx.len());
    }
    Ok(())
}

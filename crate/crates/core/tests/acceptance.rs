//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed even
//! when it passes. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 6`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtfuzz::mtnn::{
    build_model, compute_penalties, eval_metrics, export_embedding, load_model, loss_and_grads, loss_total,
    read_model, saliency, save_embedding, save_model, train, write_model, ArchSpec, Dense, HeadMetrics,
    LossKind, ModelParams, Mtnn, TaskWeights, TrainBatch, TrainConfig, DEFAULT_BETA_CLAMP,
};
use mtfuzz::mutator::{random_flips, random_input};
use mtfuzz::orchestrator::{FuzzConfig, Fuzzer, Mode, Selection};
use mtfuzz::scheduler::Corpus;
use mtfuzz::targets::{builtin, execute, TargetProgram, TestInput, CATALOG};

struct Outcome {
    pass: bool,
    /// Tracked statistics print but never fail the run.
    gated: bool,
    detail: String,
}

impl Outcome {
    fn gate(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            gated: true,
            detail,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn layer_mut(m: &mut Mtnn<f64>, i: usize) -> &mut Dense<f64> {
    let n = m.encoder.len();
    if i < n {
        &mut m.encoder[i]
    } else {
        &mut m.heads[i - n]
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_s, mut worst_p) = (0.0f64, 0.0f64);
    let mut checked = 0usize;
    for m in 0..20u64 {
        let n_in = rng.gen_range(2..=32);
        let spec = ArchSpec::new(n_in, rng.gen_range(1..=4), rng.gen_range(1..=4)).with_encoder(&[8, 6, 4]);
        let mut model: Mtnn<f64> = build_model(spec.clone(), m).unwrap();
        // Non-zero biases so their gradients are exercised too.
        for i in 0..model.encoder.len() + 3 {
            let l = layer_mut(&mut model, i);
            l.b.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }

        // Saliency: central differences per (node, byte), then summed in |.|.
        let x = Array1::from_shape_fn(n_in, |_| rng.gen_range(0.0..1.0));
        let s = saliency(&model, x.view()).unwrap();
        let h = 1e-4;
        for i in 0..n_in {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += h;
            minus[i] -= h;
            let zp = model.embed(plus.insert_axis(Axis(0)).view()).unwrap();
            let zm = model.embed(minus.insert_axis(Axis(0)).view()).unwrap();
            let fd: f64 = (&zp - &zm).iter().map(|d| (d / (2.0 * h)).abs()).sum();
            worst_s = worst_s.max(rel_err(s.scores[i], fd));
            checked += 1;
        }

        // Parameter gradients of the total loss on a small random batch.
        let rows = 6;
        let [e, c, a] = spec.head_widths();
        let bits = |cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
        };
        let batch = TrainBatch {
            inputs: Array2::from_shape_fn((rows, n_in), |_| rng.gen_range(0.0..1.0)),
            edge_labels: bits(e, &mut rng),
            ctx_labels: bits(c, &mut rng),
            approach_labels: Array2::from_shape_fn((rows, a), |_| [0.0, 0.5, 1.0][rng.gen_range(0..3)]),
        };
        let pe = compute_penalties(batch.edge_labels.view(), DEFAULT_BETA_CLAMP);
        let pc = compute_penalties(batch.ctx_labels.view(), DEFAULT_BETA_CLAMP);
        let w = TaskWeights::default();
        let (_, grads) = loss_and_grads(&model, &batch, pe.view(), pc.view(), &w).unwrap();
        let f = |m: &Mtnn<f64>| {
            let pass = m.forward_batch(batch.inputs.view()).unwrap();
            loss_total(&pass.outputs, &batch, pe.view(), pc.view(), &w).unwrap().total
        };
        let hp = 1e-5;
        for (li, g) in grads.layers().enumerate() {
            let (r, cols) = g.w.dim();
            for idx in 0..r * cols + cols {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let an = if idx < r * cols {
                    let (i, j) = (idx / cols, idx % cols);
                    layer_mut(&mut plus, li).w[[i, j]] += hp;
                    layer_mut(&mut minus, li).w[[i, j]] -= hp;
                    g.w[[i, j]]
                } else {
                    let j = idx - r * cols;
                    layer_mut(&mut plus, li).b[j] += hp;
                    layer_mut(&mut minus, li).b[j] -= hp;
                    g.b[j]
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * hp);
                worst_p = worst_p.max(rel_err(an, fd));
                checked += 1;
            }
        }
    }
    Outcome::gate(
        worst_s < 1e-4 && worst_p < 1e-4,
        format!("20 models, {checked} derivatives; worst rel err saliency {worst_s:.2e}, params {worst_p:.2e} (< 1e-4)"),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (rows, e, c) = (40, 12, 5);
    let outputs = [
        Array2::from_shape_fn((rows, e), |_| rng.gen_range(0.001..0.999)),
        Array2::from_shape_fn((rows, c), |_| rng.gen_range(0.001..0.999)),
        Array2::from_shape_fn((rows, e), |_| rng.gen_range(0.001..0.999)),
    ];
    let bits = |cols: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((rows, cols), |_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 })
    };
    let batch = TrainBatch {
        inputs: Array2::<f64>::zeros((rows, 1)),
        edge_labels: bits(e, &mut rng),
        ctx_labels: bits(c, &mut rng),
        approach_labels: Array2::from_shape_fn((rows, e), |_| [0.0, 0.5, 1.0][rng.gen_range(0..3)]),
    };
    let ones_e = Array1::from_elem(e, 1.0);
    let ones_c = Array1::from_elem(c, 1.0);

    // Unit penalties against a direct binary cross-entropy.
    let only_edge = TaskWeights { edge: 1.0, ctx: 0.0, approach: 0.0 };
    let got = loss_total(&outputs, &batch, ones_e.view(), ones_c.view(), &only_edge).unwrap().total;
    let mut bce = 0.0;
    for (q, p) in outputs[0].iter().zip(batch.edge_labels.iter()) {
        bce -= p * q.ln() + (1.0 - p) * (1.0 - q).ln();
    }
    bce /= rows as f64;
    let bce_diff = (got - bce).abs();

    // Masking: each single-task total equals that task's term exactly.
    let pe = compute_penalties(batch.edge_labels.view(), DEFAULT_BETA_CLAMP);
    let pc = compute_penalties(batch.ctx_labels.view(), DEFAULT_BETA_CLAMP);
    let full = loss_total(&outputs, &batch, pe.view(), pc.view(), &TaskWeights::default()).unwrap();
    let single = |w: [f64; 3]| {
        let w = TaskWeights { edge: w[0], ctx: w[1], approach: w[2] };
        loss_total(&outputs, &batch, pe.view(), pc.view(), &w).unwrap().total
    };
    let masking = single([1.0, 0.0, 0.0]) == full.edge
        && single([0.0, 1.0, 0.0]) == full.ctx
        && single([0.0, 0.0, 1.0]) == full.approach;

    // Approach MSE is zero on exact labels and positive otherwise.
    let mut exact = outputs.clone();
    exact[2] = batch.approach_labels.clone();
    let app_w = TaskWeights { edge: 0.0, ctx: 0.0, approach: 1.0 };
    let zero = loss_total(&exact, &batch, pe.view(), pc.view(), &app_w).unwrap().approach;
    exact[2][[3, 4]] += 1e-3;
    let nonzero = loss_total(&exact, &batch, pe.view(), pc.view(), &app_w).unwrap().approach;

    Outcome::gate(
        bce_diff < 1e-9 && masking && zero == 0.0 && nonzero > 0.0,
        format!(
            "|unit-penalty - BCE| = {bce_diff:.1e}; masking exact: {masking}; MSE exact {zero}, perturbed {nonzero:.1e}"
        ),
    )
}

/// 50 nodes, one per input byte: node j fires when byte j is at or above a
/// cut chosen for its positive rate. The first five fire on 1 to 2% of rows.
fn imbalanced(rows: usize, rates: &[f64], rng: &mut ChaCha8Rng) -> TrainBatch<f32> {
    let n = rates.len();
    let mut inputs = Array2::<f32>::zeros((rows, n));
    let mut labels = Array2::<f32>::zeros((rows, n));
    for (j, &r) in rates.iter().enumerate() {
        let positives = ((rows as f64 * r).round() as usize).max(1);
        let cut = (256.0 * (1.0 - r)).round() as u32;
        let mut idx: Vec<usize> = (0..rows).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        for (k, &i) in idx.iter().enumerate() {
            let byte = if k < positives { rng.gen_range(cut..256) } else { rng.gen_range(0..cut) };
            inputs[[i, j]] = byte as f32 / 255.0;
            labels[[i, j]] = (k < positives) as u8 as f32;
        }
    }
    TrainBatch {
        inputs,
        edge_labels: labels.clone(),
        ctx_labels: Array2::zeros((rows, 1)),
        approach_labels: Array2::zeros((rows, n)),
    }
}

fn macro_recall(probs: &Array2<f32>, labels: &Array2<f32>) -> f64 {
    let mut sum = 0.0;
    for j in 0..labels.ncols() {
        let m: HeadMetrics = eval_metrics(probs.column(j).insert_axis(Axis(1)), labels.column(j).insert_axis(Axis(1)), 0.5);
        sum += m.recall;
    }
    sum / labels.ncols() as f64
}

fn adaptive_recall() -> Outcome {
    let mut rates = vec![0.01, 0.012, 0.014, 0.016, 0.02];
    rates.extend((0..45).map(|i| 0.05 + 0.45 * i as f64 / 44.0));
    let mut micro = [Vec::new(), Vec::new()];
    let mut macro_ = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let train_set = imbalanced(500, &rates, &mut rng);
        let test_set = imbalanced(500, &rates, &mut rng);
        let spec = ArchSpec::new(50, 50, 1).with_encoder(&[128, 64, 32]);
        let model: ModelParams = build_model(spec, seed).unwrap();
        for (slot, loss) in [LossKind::Default, LossKind::Adaptive].into_iter().enumerate() {
            let cfg = TrainConfig {
                loss,
                rng_seed: seed,
                weights: TaskWeights { edge: 1.0, ctx: 0.0, approach: 0.0 },
                ..TrainConfig::default()
            };
            let (trained, _) = train(&model, &train_set, &cfg).unwrap();
            let pass = trained.forward_batch(test_set.inputs.view()).unwrap();
            let m = eval_metrics(pass.outputs[0].view(), test_set.edge_labels.view(), 0.5);
            micro[slot].push(m.recall);
            macro_[slot].push(macro_recall(&pass.outputs[0], &test_set.edge_labels));
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let (d, a) = (mean(&micro[0]), mean(&micro[1]));
    let gap = (a - d) * 100.0;
    Outcome::gate(
        gap >= 10.0,
        format!(
            "held-out micro recall adaptive {:.1}% vs default {:.1}% (+{gap:.1} pp, need >= 10); macro {:.1}% vs {:.1}%",
            a * 100.0,
            d * 100.0,
            mean(&macro_[1]) * 100.0,
            mean(&macro_[0]) * 100.0
        ),
    )
}

fn ctx_discrimination() -> Outcome {
    let t = builtin("ctx_demo").unwrap();
    let a = TestInput::new(0, vec![1, 0]).unwrap();
    let b = TestInput::new(0, vec![0, 8]).unwrap();
    let sa = execute(&t, &a).unwrap();
    let sb = execute(&t, &b).unwrap();
    let same_edges = sa.edge == sb.edge;
    let diff_ctx = sa.ctx != sb.ctx;
    let mut corpus = Corpus::new(t.registry_id());
    corpus.ingest(&a, sa, 1).unwrap();
    let kept = corpus.ingest(&b, sb, 2).unwrap().retained;
    Outcome::gate(
        same_edges && diff_ctx && kept,
        format!("edges equal: {same_edges}; call traces differ: {diff_ctx}; [0,8] retained: {kept}"),
    )
}

/// Defaults apart from the encoder: the production 2048/1024/512 encoder is
/// out of reach for dozens of campaigns on one CPU.
fn campaign(target: &str, out: &Path, seed: u64) -> FuzzConfig {
    FuzzConfig {
        encoder_dims: vec![64, 32, 16],
        rng_seed: seed,
        rounds: 1000,
        save_models: false,
        ..FuzzConfig::for_target(target, out)
    }
}

fn direct_copy_efficacy() -> Outcome {
    let mut mt = Vec::new();
    let mut rb = Vec::new();
    for seed in 0..5 {
        for (mode, sink) in [(Mode::Mtfuzz, &mut mt), (Mode::RandomBaseline, &mut rb)] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = FuzzConfig {
                mode,
                exec_budget: Some(100_000),
                ..campaign("builtin:magic_maze", dir.path(), seed)
            };
            let r = Fuzzer::new(cfg).unwrap().run().unwrap();
            sink.push(r.bugs.len());
        }
    }
    let all8 = mt.iter().filter(|&&b| b == 8).count();
    let rb_max = rb.iter().copied().max().unwrap_or(0);
    Outcome::gate(
        all8 >= 4 && rb_max <= 2,
        format!("bugs per run within 100k execs: mtfuzz {mt:?} ({all8}/5 with all 8), random-baseline {rb:?}"),
    )
}

fn importance_sampling() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    // Budgets where random selection reaches roughly three quarters of the
    // reachable edges (calibrated on seeds outside 0..5), so neither arm is
    // capped by saturation. K = 4 keeps the selection well below corpus size.
    for (target, budget) in [("builtin:chain", 100_000), ("builtin:tlv_a", 150_000)] {
        let mut ratios = Vec::new();
        let mut pairs = Vec::new();
        for seed in 0..5 {
            let mut edges = [0usize; 2];
            for (slot, sel) in [Selection::Importance, Selection::Random].into_iter().enumerate() {
                let dir = tempfile::tempdir().unwrap();
                let cfg = FuzzConfig {
                    selection: sel,
                    sample_budget: Some(4),
                    round_budget: 8_000,
                    exec_budget: Some(budget),
                    ..campaign(target, dir.path(), seed)
                };
                edges[slot] = Fuzzer::new(cfg).unwrap().run().unwrap().edges;
            }
            ratios.push(edges[0] as f64 / edges[1] as f64);
            pairs.push(format!("{}/{}", edges[0], edges[1]));
        }
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[2];
        pass &= median > 1.0;
        lines.push(format!("{target} edges imp/rand {} median ratio {median:.3}", pairs.join(" ")));
    }
    Outcome::gate(pass, lines.join("; "))
}

fn multitask_benefit() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (target, budget) in [("builtin:tlv_a", 150_000), ("builtin:ctx_ext", 100_000)] {
        let mut wins = 0;
        let mut pairs = Vec::new();
        for seed in 0..5 {
            let mut edges = [0usize; 2];
            for (slot, mode) in [Mode::Mtfuzz, Mode::EcOnly].into_iter().enumerate() {
                let dir = tempfile::tempdir().unwrap();
                let cfg = FuzzConfig {
                    mode,
                    sample_budget: Some(4),
                    round_budget: 8_000,
                    exec_budget: Some(budget),
                    ..campaign(target, dir.path(), seed)
                };
                edges[slot] = Fuzzer::new(cfg).unwrap().run().unwrap().edges;
            }
            wins += (edges[0] >= edges[1]) as usize;
            pairs.push(format!("{}/{}", edges[0], edges[1]));
        }
        pass &= wins >= 3;
        lines.push(format!("{target} mtfuzz/ec-only {} ({wins}/5 >=)", pairs.join(" ")));
    }
    Outcome {
        pass,
        gated: false,
        detail: lines.join("; "),
    }
}

fn transfer() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let src = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig {
            exec_budget: Some(150_000),
            sample_budget: Some(4),
            round_budget: 8_000,
            save_models: true,
            ..campaign("builtin:tlv_a", src.path(), seed)
        };
        Fuzzer::new(cfg).unwrap().run().unwrap();
        let model = load_model(&src.path().join("model/final.mtfz")).unwrap();
        let bundle = src.path().join("tlv_a.mtfe");
        save_embedding(&bundle, &export_embedding(&model)).unwrap();

        let mut new_edges = [0usize; 2];
        for (slot, mode) in [Mode::Mtfuzz, Mode::RandomBaseline].into_iter().enumerate() {
            let dir = tempfile::tempdir().unwrap();
            let cfg = FuzzConfig {
                mode,
                exec_budget: Some(20_000),
                warm_embedding: (mode == Mode::Mtfuzz).then(|| bundle.clone()),
                ..campaign("builtin:tlv_b", dir.path(), 50 + seed)
            };
            let mut f = Fuzzer::new(cfg).unwrap();
            f.bootstrap().unwrap();
            let start = f.corpus().global().edge.len();
            let r = f.run().unwrap();
            new_edges[slot] = r.edges - start;
        }
        wins += (new_edges[0] >= new_edges[1]) as usize;
        pairs.push(format!("{}/{}", new_edges[0], new_edges[1]));
    }
    Outcome::gate(
        wins >= 4,
        format!("tlv_b new edges warm/random {} ({wins}/5 >=, need 4)", pairs.join(" ")),
    )
}

fn bitmap_sizing() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in CATALOG {
        let t = builtin(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut corpus = Corpus::new(t.registry_id());
        let mut contexts = BTreeSet::new();
        for i in 0..6000 {
            let ids: Vec<u64> = corpus.ids().collect();
            let input = if ids.is_empty() || i % 2 == 0 {
                TestInput::new(0, random_input(&mut rng, t.max_len())).unwrap()
            } else {
                let id = ids[rng.gen_range(0..ids.len())];
                random_flips(&corpus.get(id).unwrap().input, &mut rng, 4)
            };
            let (snap, ctx) = t.run_with_contexts(&input.bytes);
            // The bound must hold for every single execution as well.
            ok &= snap.ctx.len() <= snap.edge.len() + ctx.len();
            if corpus.ingest(&input, snap, i).unwrap().retained {
                contexts.extend(ctx);
            }
        }
        let g = corpus.global();
        let (e, c, n) = (g.edge.len(), g.ctx.len(), contexts.len());
        ok &= c <= e + n;
        parts.push(format!("{name} {c}<={e}+{n} ({:.2}x)", c as f64 / e.max(1) as f64));
    }
    Outcome::gate(ok, parts.join(", "))
}

fn masked_csv(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
        .collect()
}

fn determinism() -> Outcome {
    let mut metas = Vec::new();
    let mut csvs = Vec::new();
    let mut raw_csv_equal = true;
    let mut first_csv = None;
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig {
            exec_budget: Some(15_000),
            round_budget: 2_000,
            train_budget: 32,
            workers: 1,
            ..campaign("builtin:tlv_a", dir.path(), 3)
        };
        Fuzzer::new(cfg).unwrap().run().unwrap();
        metas.push(fs::read(dir.path().join("meta.jsonl")).unwrap());
        csvs.push(masked_csv(&dir.path().join("coverage.csv")));
        let raw = fs::read(dir.path().join("coverage.csv")).unwrap();
        match &first_csv {
            None => first_csv = Some(raw),
            Some(f) => raw_csv_equal = *f == raw,
        }
    }
    let meta_same = metas[0] == metas[1] && !metas[0].is_empty();
    let csv_same = csvs[0] == csvs[1] && csvs[0].len() > 1;

    let m: ModelParams = build_model(ArchSpec::new(64, 40, 30).with_encoder(&[64, 32, 16]), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mtfz");
    save_model(&p, &m).unwrap();
    let bytes = fs::read(&p).unwrap();
    let back = read_model(&mut bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_model(&mut again, &back).unwrap();
    let model_same = back == m && again == bytes;

    Outcome::gate(
        meta_same && csv_same && model_same,
        format!(
            "meta.jsonl identical: {meta_same}; coverage.csv identical apart from wall_ms: {csv_same} (raw bytes equal: {raw_csv_equal}); model save/load bit-exact: {model_same}"
        ),
    )
}

fn main() -> ExitCode {
    let picks: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "loss identities", loss_identities),
        (3, "adaptive-loss recall", adaptive_recall),
        (4, "context-sensitivity discrimination", ctx_discrimination),
        (5, "direct-copy efficacy", direct_copy_efficacy),
        (6, "importance sampling", importance_sampling),
        (7, "multi-task benefit", multitask_benefit),
        (8, "embedding transfer", transfer),
        (9, "bitmap sizing", bitmap_sizing),
        (10, "determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !picks.is_empty() && !picks.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        let verdict = match (o.pass, o.gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS (tracked)",
        };
        if !o.pass && o.gated {
            failed += 1;
        }
        println!("criterion {n:>2} {verdict} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

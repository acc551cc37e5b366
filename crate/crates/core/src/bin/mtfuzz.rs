use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mtfuzz::mtnn::{export_embedding, load_model, save_embedding};
use mtfuzz::orchestrator::{self, parse_alpha, FuzzConfig, Fuzzer, Mode, Selection};
use mtfuzz::targets::subprocess::{reference_child, ChildMode};

#[derive(Parser)]
#[command(name = "mtfuzz", version, about = "Greybox fuzzing guided by a multi-task neural network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run or resume a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Write the shared encoder of a model file as an embedding bundle.
    ExportEmbedding {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a campaign summary and rewrite its coverage.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Wire-protocol child used by the subprocess tests and examples.
    #[command(hide = true)]
    RefChild {
        #[arg(long, default_value = "echo")]
        mode: ChildMode,
    },
}

#[derive(Args)]
struct FuzzArgs {
    /// builtin:NAME or exec:PATH (arguments may follow the path, space separated)
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from a config.json instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue the campaign already in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    exec_budget: Option<u64>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    train_budget: Option<usize>,
    #[arg(long)]
    sample_budget: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<[f64; 3]>,
    #[arg(long)]
    beta_approach: Option<f64>,
    #[arg(long)]
    beta_clamp: Option<f64>,
    /// Encoder widths, e.g. 2048,1024,512
    #[arg(long, value_delimiter = ',')]
    encoder: Option<Vec<usize>>,
    #[arg(long)]
    saliency_nodes: Option<usize>,
    #[arg(long)]
    round_budget: Option<usize>,
    #[arg(long)]
    retrain_every: Option<usize>,
    #[arg(long)]
    warmup_execs: Option<u64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    selection: Option<Selection>,
    #[arg(long)]
    no_direct_copy: bool,
    /// Keep inputs only for new edges, not for new call-trace ids.
    #[arg(long)]
    no_ctx_retention: bool,
    #[arg(long)]
    warm_embedding: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl FuzzArgs {
    fn base(&self) -> Result<FuzzConfig> {
        if self.resume {
            let p = self.out.join("config.json");
            return FuzzConfig::load(&p).with_context(|| format!("resuming from {}", p.display()));
        }
        if let Some(p) = &self.config {
            let mut c = FuzzConfig::load(p)?;
            c.out = self.out.clone();
            if let Some(t) = &self.target {
                c.target = t.clone();
            }
            return Ok(c);
        }
        match &self.target {
            Some(t) => Ok(FuzzConfig::for_target(t, &self.out)),
            None => bail!("--target is required unless --config or --resume is given"),
        }
    }

    fn resolve(&self) -> Result<FuzzConfig> {
        let mut c = self.base()?;
        macro_rules! set {
            ($($field:ident <- $arg:expr),* $(,)?) => {
                $(if let Some(v) = $arg.clone() { c.$field = v; })*
            };
        }
        set!(
            max_len <- self.max_len,
            rounds <- self.rounds,
            mode <- self.mode,
            k <- self.k,
            train_budget <- self.train_budget,
            epochs <- self.epochs,
            lr <- self.lr,
            batch_size <- self.batch_size,
            alpha <- self.alpha,
            beta_approach <- self.beta_approach,
            beta_clamp <- self.beta_clamp,
            encoder_dims <- self.encoder,
            round_budget <- self.round_budget,
            retrain_every <- self.retrain_every,
            warmup_execs <- self.warmup_execs,
            rng_seed <- self.rng_seed,
            selection <- self.selection,
            workers <- self.workers,
        );
        if self.exec_budget.is_some() {
            c.exec_budget = self.exec_budget;
        }
        if self.time_budget.is_some() {
            c.time_budget_secs = self.time_budget;
        }
        if self.sample_budget.is_some() {
            c.sample_budget = self.sample_budget;
        }
        if self.saliency_nodes.is_some() {
            c.saliency_nodes = self.saliency_nodes;
        }
        if self.seeds.is_some() {
            c.seeds = self.seeds.clone();
        }
        if self.warm_embedding.is_some() {
            c.warm_embedding = self.warm_embedding.clone();
        }
        if self.no_direct_copy {
            c.direct_copy = false;
        }
        if self.no_ctx_retention {
            c.retain_on_ctx = false;
        }
        if c.max_len == 0 {
            bail!("--max-len is required for {}", c.target);
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Fuzz(args) => {
            let cfg = args.resolve()?;
            let mut fuzzer = if args.resume { Fuzzer::resume(cfg)? } else { Fuzzer::new(cfg)? };
            let r = fuzzer.run()?;
            println!(
                "{} rounds, {} execs ({:.0}/s), {} edges, {} call traces, {} bugs, {} seeds",
                r.rounds,
                r.execs,
                r.execs_per_sec,
                r.edges,
                r.call_traces,
                r.bugs.len(),
                r.corpus
            );
            for b in &r.bugs {
                println!("  bug {b}");
            }
        }
        Cmd::ExportEmbedding { model, out } => {
            let m = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            save_embedding(&out, &export_embedding(&m))?;
            println!("wrote {} (n_in {}, encoder {:?})", out.display(), m.n_in(), m.spec.encoder_dims);
        }
        Cmd::Report { out } => print!("{}", orchestrator::report(&out)?),
        Cmd::RefChild { mode } => reference_child(mode, &mut io::stdin().lock(), &mut io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

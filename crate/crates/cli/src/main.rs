use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use quar_core::experiments::{
    bench_passes, build_chain, density_grid, evaluate_models, gen_dataset, latent_trace, load_model, matched_baseline,
    run_experiment, save_model, ExperimentConfig, MetricsReport, RunStreams, Samples, SavedModel,
};
use quar_core::training::gradcheck::{grad_check, kink_free_batch};
use quar_core::{Error, FlowChain};

#[derive(Parser)]
#[command(name = "quar", version, about = "Quasi-autoregressive residual flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the model file and metrics.
    Train(TrainArgs),
    /// Score a saved model on its held-out split.
    Eval(EvalArgs),
    /// Draw samples from a saved model.
    Sample(SampleArgs),
    /// Log-density on a regular 2D grid.
    Grid(GridArgs),
    /// Per-step latent positions of labeled points.
    Trace(TraceArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Pass counts and timings against a matched residual-flow baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rebuild the model from this config instead of the embedded one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the Polyak-averaged parameters.
    #[arg(long)]
    polyak: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the model path with a `.metrics.json` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Write the metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    n: Option<usize>,
    /// CSV file for vector data; a directory of PGM files for images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, num_args = 4, value_names = ["X0", "X1", "Y0", "Y1"], allow_negative_numbers = true)]
    bounds: Option<Vec<f64>>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    points_per_mode: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Minimum distance of every ELU input from its kink at 0.
    #[arg(long, default_value_t = 1e-3)]
    margin: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    terms: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Gradient check over tolerance; exits like a numerical failure.
#[derive(Debug)]
struct ToleranceExceeded(String);

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ToleranceExceeded {}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn open_model(args: &ModelArgs) -> anyhow::Result<(SavedModel, FlowChain)> {
    let override_cfg = args.config.as_deref().map(|p| load_config(p, None)).transpose()?;
    let mut saved = load_model(&args.model, override_cfg.as_ref())?;
    if let Some(s) = args.seed {
        saved.config = saved.config.with_seed(s);
    }
    let chain = if args.polyak { saved.polyak.clone() } else { saved.model.clone() };
    Ok((saved, chain))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(u) = args.updates {
        cfg.train.updates = u;
    }
    let run = run_experiment(&cfg)?;
    save_model(&args.out, &cfg, &run.model, &run.polyak)?;
    let metrics_path = args.metrics.unwrap_or_else(|| args.out.with_extension("metrics.json"));
    run.metrics.write(&metrics_path)?;
    eprintln!(
        "held-out NLL {:.4} (polyak {:.4}); wrote {} and {}",
        run.metrics.heldout_nll["live"],
        run.metrics.heldout_nll["polyak"],
        args.out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (saved, _) = open_model(&args.model)?;
    let dataset = gen_dataset(&saved.config.dataset)?;
    let mut timings = BTreeMap::new();
    let (heldout_nll, bpd, pass_counts) =
        evaluate_models(&saved.config, &saved.model, &saved.polyak, &dataset, &mut timings)?;
    let report = MetricsReport {
        config: saved.config.clone(),
        seed: saved.config.seed,
        loss_history: Vec::new(),
        heldout_nll,
        bpd,
        pass_counts,
        timings_ms: timings,
        version: quar_core::experiments::metrics::METRICS_VERSION,
    };
    match &args.out {
        Some(p) => Ok(report.write(p)?),
        None => emit(None, &to_json(&report)),
    }
}

fn write_pgm(path: &Path, side: usize, levels: u32, pixels: &[f64]) -> anyhow::Result<()> {
    let mut buf = format!("P5\n{side} {side}\n{}\n", levels - 1).into_bytes();
    buf.extend(pixels.iter().map(|v| (v * f64::from(levels)).floor().clamp(0.0, f64::from(levels - 1)) as u8));
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn sample(args: SampleArgs) -> anyhow::Result<()> {
    let (saved, chain) = open_model(&args.model)?;
    let n = args.n.unwrap_or(saved.config.eval.samples);
    let mut rng = RunStreams::new(saved.config.seed).eval;
    let xs = chain.sample(&mut rng, n)?;
    match saved.config.dataset.kind {
        quar_core::experiments::DatasetKind::ToyImages { side, levels, .. } => {
            if levels > 256 {
                bail!("PGM output supports at most 256 levels");
            }
            std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            let mut index = String::from("file\n");
            for (i, x) in xs.iter().enumerate() {
                let name = format!("sample_{i:05}.pgm");
                write_pgm(&args.out.join(&name), side, levels, x)?;
                index.push_str(&name);
                index.push('\n');
            }
            emit(Some(&args.out.join("index.csv")), &index)
        }
        _ => {
            let header: Vec<String> = (0..chain.dim).map(|d| format!("x{d}")).collect();
            let mut text = header.join(",") + "\n";
            for x in &xs {
                let row: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            emit(Some(&args.out), &text)
        }
    }
}

fn grid(args: GridArgs) -> anyhow::Result<()> {
    let (saved, chain) = open_model(&args.model)?;
    let bounds = match &args.bounds {
        Some(b) => [b[0], b[1], b[2], b[3]],
        None => saved.config.eval.grid_bounds,
    };
    let res = args.res.unwrap_or(saved.config.eval.grid_resolution);
    let g = density_grid(&chain, bounds, res)?;
    g.write_csv(&args.out)?;
    eprintln!("integral {:.4}, {} flagged cells", g.integral(), g.flagged_count());
    Ok(())
}

fn trace(args: TraceArgs) -> anyhow::Result<()> {
    let (saved, chain) = open_model(&args.model)?;
    let per_mode = args.points_per_mode.unwrap_or(saved.config.eval.trace_points_per_mode);
    let mut rng = RunStreams::new(saved.config.seed).eval;
    let t = latent_trace(&chain, &saved.config.dataset.kind, per_mode, &mut rng)?;
    Ok(t.write_csv(&args.out)?)
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let mut streams = RunStreams::new(cfg.seed);
    let mut chain = build_chain(&cfg.model, &mut streams.build)?;
    let dataset = gen_dataset(&cfg.dataset)?;
    let candidates = dataset.train.as_training_set().sample_batch(&mut streams.train, 8 * args.batch)?;
    chain.init_actnorms(&candidates)?;
    let batch = kink_free_batch(&chain, &candidates, args.margin, args.batch)?;
    let report = grad_check(&chain, &batch, args.eps)?;
    emit(args.out.as_deref(), &to_json(&report))?;
    if report.max_rel_error >= args.tol {
        let msg = format!("max relative error {:e} exceeds {:e}", report.max_rel_error, args.tol);
        return Err(ToleranceExceeded(msg).into());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let mut streams = RunStreams::new(cfg.seed);
    let quar = build_chain(&cfg.model, &mut streams.build)?;
    let baseline = build_chain(&matched_baseline(&cfg.model)?, &mut streams.build)?;
    let n = args.batch.unwrap_or(cfg.eval.bench_batch);
    let dataset = gen_dataset(&cfg.dataset)?;
    let Samples::Continuous(xs) = &dataset.heldout else { bail!("bench needs vector data") };
    let batch: Vec<Vec<f64>> = xs.iter().cycle().take(n).cloned().collect();
    let report = bench_passes(
        &quar,
        &baseline,
        &batch,
        args.terms.unwrap_or(cfg.eval.bench_terms),
        args.repeats,
        &mut streams.eval,
    )?;
    emit(args.out.as_deref(), &to_json(&report))
}

fn exit_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 2,
        _ if err.is::<ToleranceExceeded>() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Grid(a) => grid(a),
        Command::Trace(a) => trace(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let _ = std::io::stderr().flush();
            ExitCode::from(exit_for(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use eps_core::data::{gen_multimodal, read_csv, scatter_svg, write_csv, MultimodalConfig};
use eps_core::encoder::EncoderParams;
use eps_core::experiment::{
    load_dataset, run_experiment, to_json, write_scatters, ExperimentConfig, Sweep, SweepParam,
};
use eps_core::trainer::{evaluate_split, EvalRecord};
use eps_core::verify::{verify_claim, Claim, VerifyParams};
use eps_core::EmbeddingSet;

mod config;

use config::{load_config, parse_set, parse_sweep_n};

#[derive(Parser)]
#[command(name = "eps", version, about = "Metric-learning experiments with easy positive sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a collapse or non-collapse result on exact expected objectives.
    Verify(VerifyArgs),
    /// Train an encoder from an experiment config.
    Train(TrainArgs),
    /// Evaluate saved encoder parameters.
    Eval(EvalArgs),
    /// Generate a synthetic multimodal dataset as CSV.
    GenData(GenDataArgs),
    /// Draw 2-D embeddings or 2-D CSV features as SVG scatter plots.
    Plot(PlotArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    claim: String,
    /// JSON file with verification parameters; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    /// `start:end[:step]` (step 4 by default) or a comma-separated list.
    #[arg(long)]
    sweep_n: Option<String>,
    /// Report path; the report is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep a parameter over comma-separated values, e.g.
    /// `--sweep positive_k 2,4,8,16`. Repeatable; sweeps form a grid.
    #[arg(long, num_args = 2, value_names = ["PARAM", "VALUES"], action = clap::ArgAction::Append)]
    sweep: Vec<String>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON synthetic dataset parameters; defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also draw the features when they are 2-D.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Experiment config; with `--params` plots the learned embedding.
    #[arg(long, conflicts_with = "csv")]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    params: Option<PathBuf>,
    /// CSV whose two feature columns are plotted directly.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for embedding plots, file for CSV plots.
    #[arg(long)]
    out: PathBuf,
}

/// Failure mapped onto the process exit status.
enum Failure {
    Tolerance,
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<eps_core::Error> for Failure {
    fn from(e: eps_core::Error) -> Self {
        Failure::Usage(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => verify(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GenData(a) => gen_data(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let claim: Claim = a.claim.parse()?;
    let mut value = match &a.config {
        Some(path) => load_config(path)?,
        None => serde_json::json!({}),
    };
    let obj = value.as_object_mut().ok_or_else(|| anyhow!("verification config must be a JSON object"))?;
    let mut put = |key: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            obj.insert(key.into(), v);
        }
    };
    put("n", a.n.map(Into::into));
    put("p", a.p.map(Into::into));
    put("alpha", a.alpha.map(Into::into));
    put("beta", a.beta.map(Into::into));
    put("dim", a.dim.map(Into::into));
    put("restarts", a.restarts.map(Into::into));
    put("seed", a.seed.map(Into::into));
    put("steps", a.steps.map(Into::into));
    put("learning_rate", a.learning_rate.map(Into::into));
    put("smoothing", a.smoothing.map(Into::into));
    put("jitter", a.jitter.map(Into::into));
    put("grid_step", a.grid_step.map(Into::into));
    put("sweep_n", a.sweep_n.as_deref().map(parse_sweep_n).transpose()?.map(Into::into));
    let params: VerifyParams = config::typed(value)?;
    let report = verify_claim(claim, &params)?;
    let json = to_json(&report);
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    for c in &report.checks {
        eprintln!("{} {}: {} (threshold {})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Tolerance)
    }
}

fn experiment_config(path: &Path, set: &[String]) -> anyhow::Result<serde_json::Value> {
    let mut value = load_config(path)?;
    for s in set {
        parse_set(&mut value, s)?;
    }
    Ok(value)
}

fn finish_config(value: serde_json::Value, path: &Path) -> anyhow::Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = config::typed(value)?;
    cfg.rebase_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut value = experiment_config(&a.config, &a.set)?;
    if let Some(seed) = a.seed {
        value["seed"] = seed.into();
    }
    let mut cfg = finish_config(value, &a.config)?;
    for pair in a.sweep.chunks(2) {
        let param = SweepParam::parse(&pair[0])?;
        cfg.sweeps.push(Sweep { param, values: pair[1].split(',').map(|v| v.trim().to_string()).collect() });
    }
    let out = a
        .out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set output_dir"))?;
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("experiment.json"), &to_json(&cfg))?;
    let runs = run_experiment(&cfg, Some(&out))?;
    for run in &runs {
        let e = run.report.final_eval();
        let label: Vec<String> = run.report.sweep.iter().map(|(p, v)| format!("{}={v}", p.name())).collect();
        let split = e.test.as_ref().unwrap_or(&e.train);
        println!(
            "{}recall_class@1={:.4} recall_mode@1={:.4} nmi_plus_mode={:.4}",
            if label.is_empty() { String::new() } else { format!("[{}] ", label.join(" ")) },
            split.recall_class.first().copied().unwrap_or(f64::NAN),
            split.recall_mode.first().copied().unwrap_or(f64::NAN),
            split.nmi_plus_mode
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = finish_config(experiment_config(&a.config, &a.set)?, &a.config)?.resolved();
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let params = EncoderParams::load(&a.params)?;
    let train = evaluate_split(&params, &ds, &ds.train, &cfg.train)?;
    let test = if ds.test != ds.train { Some(evaluate_split(&params, &ds, &ds.test, &cfg.train)?) } else { None };
    let json = to_json(&EvalRecord { epoch: cfg.train.epochs, step: 0, train, test });
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let mut value = match &a.config {
        Some(path) => load_config(path)?,
        None => serde_json::json!({}),
    };
    for s in &a.set {
        parse_set(&mut value, s)?;
    }
    if let Some(seed) = a.seed {
        value["seed"] = seed.into();
    }
    let cfg: MultimodalConfig = config::typed(value)?;
    let ds = gen_multimodal(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_csv(&ds, &a.out)?;
    if let Some(svg) = &a.svg {
        let emb = EmbeddingSet::new(ds.features.clone())?;
        write_file(svg, &scatter_svg(&emb, &ds.class_labels, ds.modes())?)?;
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<(), Failure> {
    match (&a.config, &a.params, &a.csv) {
        (Some(config), Some(params), None) => {
            let cfg = finish_config(experiment_config(config, &[])?, config)?;
            let ds = load_dataset(&cfg.dataset)?;
            let params = EncoderParams::load(params)?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            write_scatters(&params, &ds, &a.out)?;
        }
        (None, None, Some(csv)) => {
            let ds = read_csv(csv)?;
            let emb = EmbeddingSet::new(ds.features.clone())?;
            write_file(&a.out, &scatter_svg(&emb, &ds.class_labels, ds.modes())?)?;
        }
        _ => return Err(anyhow!("plot needs either --config with --params, or --csv").into()),
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lavit::complexity::{audit, flops_report, published_size};
use lavit::gradcheck::{run_check, OP_TOLERANCE, SUITE};
use lavit::train::{probe_batch, Collect, SyntheticDataset, TrainConfig, Trainer};
use lavit::{checkpoint, losses, LaViTModel, ModelConfig};

/// Less-attention vision transformer at desk scale.
///
/// Exit codes: 0 success, 1 invalid input (flags, configs, files), 2 runtime
/// failure (divergence, failed checks, I/O while running). LAVIT_THREADS caps
/// worker threads (default 1).
#[derive(Parser)]
#[command(name = "lavit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on seeded synthetic data, writing metrics.jsonl (and checkpoints, saturation CSVs) to --out.
    Train(TrainArgs),
    /// Run the central-difference gradient checks; exit 0 iff every error is below 1e-5.
    Gradcheck(GradcheckArgs),
    /// Static FLOPs and parameter report.
    Flops(FlopsArgs),
    /// Per-layer similarity, symmetry and DP loss of a checkpoint on a held-out probe batch.
    Saturate(SaturateArgs),
    /// Echo a config with its parameter count and per-stage geometry.
    Inspect(InspectArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Model config JSON.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in preset: toy, toy-deep, toy-deep-va, lavit-t, lavit-s, lavit-b.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

impl ModelSource {
    fn load(&self) -> Result<ModelConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => Ok(ModelConfig::load(path)?),
            (_, Some(name)) => preset(name),
            _ => unreachable!("clap requires one source"),
        }
    }

    fn preset_name(&self) -> Option<&str> {
        self.preset.as_deref()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CollectArg {
    None,
    Saturation,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Training hyperparameters JSON; flags below override its fields.
    #[arg(long, value_name = "PATH")]
    train_config: Option<PathBuf>,
    /// Seed for initialization, data and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimizer steps. Without --warmup-steps, a warmup that no longer fits becomes steps/20.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the diagonality-preserving loss (0 disables it).
    #[arg(long)]
    dp_weight: Option<f64>,
    /// Stop once evaluated train accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    /// Steps between evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Steps between checkpoints (0 disables them).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write saturation_step{N}.csv at every evaluation.
    #[arg(long, value_enum, default_value = "none")]
    collect: CollectArg,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run a single check instead of the whole suite.
    #[arg(long, value_name = "NAME")]
    module: Option<String>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Square input side; defaults to the config's image size.
    #[arg(long, value_name = "N")]
    image_size: Option<usize>,
    /// Also write the rows as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SaturateArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Seed of the synthetic data the probe batch is drawn from.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe batch size.
    #[arg(long, default_value_t = 16)]
    probe_size: usize,
    /// Output CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

/// Bad input from the command line rather than a library failure.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name)
        .ok_or_else(|| input_error(format!("unknown preset {name:?}; expected one of {}", ModelConfig::PRESETS.join(", "))))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InputError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<lavit::Error>() {
        Some(lavit::Error::Diverged { .. } | lavit::Error::Io(_)) => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let model_cfg = args.model.load()?;
    let mut cfg = match &args.train_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
            TrainConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = args.steps {
        cfg.steps = s;
        if args.warmup_steps.is_none() && cfg.warmup_steps >= s {
            cfg.warmup_steps = s / 20;
        }
    }
    if let Some(w) = args.warmup_steps {
        cfg.warmup_steps = w;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(w) = args.dp_weight {
        cfg.dp_weight = w;
    }
    if let Some(t) = args.target_accuracy {
        cfg.target_accuracy = Some(t);
    }
    if let Some(e) = args.eval_every {
        cfg.eval_every = e;
    }
    if let Some(c) = args.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.collect = match args.collect {
        CollectArg::None => Collect::None,
        CollectArg::Saturation => Collect::Saturation,
    };
    cfg.validate()?;
    let (h, w) = model_cfg.image_size.hw();
    let data = SyntheticDataset::new(
        model_cfg.in_channels,
        h,
        w,
        model_cfg.num_classes,
        cfg.train_size + cfg.probe_size,
        args.seed,
    )?;
    let mut model = LaViTModel::build(&model_cfg, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    fs::write(args.out.join("config.json"), model_cfg.to_json())?;
    let summary = Trainer::new(cfg, &data, args.seed).with_output(&args.out).run(&mut model)?;
    for (step, acc) in &summary.evaluations {
        println!("step {step}: train accuracy {acc:.4}");
    }
    if let Some(last) = summary.metrics.last() {
        println!(
            "finished after {} steps: ce {:.6} dp {:.6} total {:.6}{}",
            last.step + 1,
            last.ce,
            last.dp,
            last.total,
            if summary.stopped_early { " (target accuracy reached)" } else { "" }
        );
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let names: Vec<&str> = match &args.module {
        Some(m) if SUITE.contains(&m.as_str()) => vec![m.as_str()],
        Some(m) => return Err(input_error(format!("unknown check {m:?}; expected one of {}", SUITE.join(", ")))),
        None => SUITE.to_vec(),
    };
    let mut all = true;
    println!("{:<20} {:>12}  result", "check", "max_rel_err");
    for name in names {
        let r = run_check(name, args.seed)?;
        let ok = r.max_rel_err < OP_TOLERANCE;
        all &= ok;
        println!("{:<20} {:>12.3e}  {}", r.name, r.max_rel_err, if ok { "ok" } else { "FAIL" });
    }
    println!("threshold {OP_TOLERANCE:e}: {}", if all { "all passed" } else { "FAILED" });
    Ok(all)
}

fn flops(args: FlopsArgs) -> Result<()> {
    let cfg = args.model.load()?;
    let report = flops_report(&cfg, args.image_size)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(published) = args.model.preset_name().and_then(published_size) {
        if report.image_size == (224, 224) {
            print!("{}", audit(&cfg, &report, published).to_text());
        }
    }
    Ok(())
}

fn saturate(args: SaturateArgs) -> Result<()> {
    if args.probe_size == 0 {
        return Err(input_error("--probe-size must be positive"));
    }
    let model = checkpoint::load(&args.checkpoint)?;
    let cfg = &model.config;
    let (h, w) = cfg.image_size.hw();
    let train = TrainConfig { probe_size: args.probe_size, ..TrainConfig::default() };
    let data = SyntheticDataset::new(cfg.in_channels, h, w, cfg.num_classes, train.train_size + train.probe_size, args.seed)?;
    let rows = model.metric_rows(&probe_batch(&data, &train)?)?;
    let mut out = Vec::new();
    losses::write_metric_csv(&rows, &mut out)?;
    fs::write(&args.out, out).with_context(|| format!("cannot write {}", args.out.display()))?;
    println!("wrote {} layers to {}", rows.len(), args.out.display());
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let (cfg, tensors) = match (&args.checkpoint, &args.config, &args.preset) {
        (Some(path), _, _) => {
            let m = checkpoint::load(path)?;
            let n = m.params.len();
            (m.config, Some(n))
        }
        (_, Some(path), _) => (ModelConfig::load(path)?, None),
        (_, _, Some(name)) => (preset(name)?, None),
        _ => unreachable!("clap requires one source"),
    };
    println!("{}", cfg.to_json());
    let params = lavit::model::param_count(&cfg);
    println!("params: {params} ({:.3} M)", params as f64 / 1e6);
    if let Some(n) = tensors {
        println!("tensors: {n}");
    }
    for (m, s) in cfg.stages.iter().enumerate() {
        let (rows, cols) = cfg.grid(m);
        let kinds: Vec<&str> = (0..s.blocks).map(|l| if s.kind(l) == lavit::config::LayerKind::La { "LA" } else { "VA" }).collect();
        println!(
            "stage {m}: {} tokens ({rows}x{cols}), D={}, H={}, layers [{}]",
            cfg.tokens(m),
            s.channels,
            s.heads,
            kinds.join(" ")
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Flops(a) => flops(a).map(|_| true),
        Command::Saturate(a) => saturate(a).map(|_| true),
        Command::Inspect(a) => inspect(a).map(|_| true),
    }
}

fn check_output_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => bail!(InputError(format!("directory {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let precheck = match &cli.command {
        Command::Flops(FlopsArgs { csv: Some(p), .. }) => check_output_parent(p),
        Command::Saturate(a) => check_output_parent(&a.out),
        _ => Ok(()),
    };
    match precheck.and_then(|_| run(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_input_from_runtime_failures() {
        assert_eq!(exit_code(&input_error("bad flag")), 1);
        assert_eq!(exit_code(&lavit::Error::Config("x".into()).into()), 1);
        assert_eq!(exit_code(&lavit::Error::Checkpoint("bad magic".into()).into()), 1);
        assert_eq!(exit_code(&lavit::Error::Diverged { step: 3, loss: f64::NAN }.into()), 2);
        assert_eq!(exit_code(&lavit::Error::Io(std::io::Error::other("disk full")).into()), 2);
        let wrapped = anyhow::Error::from(lavit::Error::Diverged { step: 0, loss: f64::INFINITY }).context("training");
        assert_eq!(exit_code(&wrapped), 2);
    }
}

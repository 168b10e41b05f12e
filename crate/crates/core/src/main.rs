use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use devscaffold::analysis;
use devscaffold::dataset;
use devscaffold::harness::{self, ExperimentSpec, Logger, MetricsRecord, Protocol, Scale};
use devscaffold::training::{self, Checkpoint, ModelKind, System, Trainer};
use devscaffold::{Error, Result};

/// Pre-patterned neural cellular automata: training, evaluation and the
/// experiment protocols.
#[derive(Parser)]
#[command(name = "devscaffold", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the configured targets and save its checkpoint.
    Train(TrainArgs),
    /// Roll out a checkpoint and report per-target MSE.
    Evaluate(EvaluateArgs),
    /// Score a directory of patterns against a directory of targets.
    Analyze(AnalyzeArgs),
    /// Run a full experiment protocol.
    Experiment(ExperimentArgs),
    /// Write the built-in target suite as PNGs.
    RenderTargets(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Infotrade,
    Robustness,
    Capacity,
    Growth,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Infotrade => Protocol::Infotrade,
            ProtocolArg::Robustness => Protocol::Robustness,
            ProtocolArg::Capacity => Protocol::Capacity,
            ProtocolArg::Growth => Protocol::Growth,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Prepattern,
    Goalnca,
    Direct,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Prepattern => ModelKind::Prepattern,
            ModelArg::Goalnca => ModelKind::GoalNca,
            ModelArg::Direct => ModelKind::Direct,
        }
    }
}

/// Settings shared by every verb that builds an experiment spec.
#[derive(Args)]
struct SpecArgs {
    /// TOML experiment config; CLI flags override it.
    #[arg(long, env = "DEVSCAFFOLD_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "DEVSCAFFOLD_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, env = "DEVSCAFFOLD_SEEDS", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, env = "DEVSCAFFOLD_GRID_SIZE")]
    grid_size: Option<usize>,
    #[arg(long, env = "DEVSCAFFOLD_STEPS")]
    steps: Option<usize>,
    /// Training fire rate where the protocol does not sweep it.
    #[arg(long, env = "DEVSCAFFOLD_FIRE_RATE")]
    fire_rate: Option<f64>,
    /// 64x64 grids, 100000 steps, the full target suite and the plain optimizer.
    #[arg(long, env = "DEVSCAFFOLD_PAPER_SCALE")]
    paper_scale: bool,
    #[arg(long, env = "DEVSCAFFOLD_WORKERS")]
    workers: Option<usize>,
}

impl SpecArgs {
    fn spec(&self, protocol: Protocol) -> Result<ExperimentSpec> {
        let scale = self.paper_scale.then_some(Scale::Paper);
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_file(path, Some(protocol), scale)?,
            None => ExperimentSpec::defaults(protocol, scale.unwrap_or(Scale::Desk)),
        };
        if let Some(v) = &self.out {
            spec.out = v.clone();
        }
        if let Some(v) = &self.seeds {
            spec.seeds = v.clone();
        }
        if let Some(v) = self.grid_size {
            spec.grid_size = v;
        }
        if let Some(v) = self.steps {
            spec.train.steps = Some(v);
        }
        if let Some(v) = self.fire_rate {
            spec.train.fire_rate = Some(v);
        }
        if let Some(v) = self.workers {
            spec.workers = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "prepattern")]
    model: ModelArg,
    /// Protocol whose architecture and targets to use.
    #[arg(long, value_enum, default_value = "robustness")]
    protocol: ProtocolArg,
    #[arg(long)]
    siren_layers: Option<usize>,
    /// Where to write the checkpoint; an existing one is resumed.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Protocol whose targets the checkpoint was trained on.
    #[arg(long, value_enum, default_value = "robustness")]
    protocol: ProtocolArg,
    /// Rollout steps; defaults to the model's evaluation horizon.
    #[arg(long)]
    rollout_steps: Option<usize>,
    /// Optional CSV of the results.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Directory of pattern PNGs.
    patterns: PathBuf,
    /// Directory of target PNGs with matching file names.
    targets: PathBuf,
    #[arg(long, default_value = "analysis.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    bins: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    protocol: ProtocolArg,
    /// Fail instead of training when a checkpoint is missing.
    #[arg(long, env = "DEVSCAFFOLD_REQUIRE_CHECKPOINTS")]
    require_checkpoints: bool,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, env = "DEVSCAFFOLD_OUT", default_value = "targets")]
    out: PathBuf,
    #[arg(long, env = "DEVSCAFFOLD_GRID_SIZE", default_value_t = 64)]
    grid_size: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => {
            let rows = analysis::analyze_directories(&a.patterns, &a.targets, a.bins)?;
            analysis::write_analysis_csv(&rows, &a.out)?;
            for r in &rows {
                println!(
                    "{}\tr2={:.4}\tnmi={:.4}\tssim={:.4}",
                    r.name, r.measures.r2, r.measures.nmi, r.measures.ssim
                );
            }
            Ok(())
        }
        Command::Experiment(a) => {
            let mut spec = a.spec.spec(a.protocol.into())?;
            spec.require_checkpoints = a.require_checkpoints;
            let records = harness::run_protocol(&spec)?;
            println!(
                "{} records written to {}",
                records.len(),
                spec.out.join(format!("{}.csv", spec.protocol.as_str())).display()
            );
            Ok(())
        }
        Command::RenderTargets(a) => {
            let targets = dataset::render_suite(&dataset::default_suite(a.grid_size)?)?;
            for (name, t) in &targets {
                harness::export_png(t, &a.out.join(format!("{name}.png")))?;
            }
            println!("{} targets written to {}", targets.len(), a.out.display());
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let spec = a.spec.spec(a.protocol.into())?;
    let kind: ModelKind = a.model.into();
    let mut system = spec.system_config(kind)?;
    if let Some(l) = a.siren_layers {
        system.siren.layers = l;
        system.validate()?;
    }
    let seed = spec.seeds[0];
    let train = spec.train_config(&system, seed, None);
    let targets: Vec<_> = spec.load_targets()?.into_iter().map(|(_, t)| t).collect();
    let log = Logger::stderr();
    let mut trainer = if a.checkpoint.exists() {
        let ck = Checkpoint::load(&a.checkpoint)?;
        if ck.system.config != system || ck.train != train {
            return Err(Error::Config(format!(
                "{} holds a run with different settings",
                a.checkpoint.display()
            )));
        }
        Trainer::resume(ck, &targets)?
    } else {
        Trainer::new(System::init(system, seed)?, train, &targets)?
    };
    let every = spec.checkpoint_every.max(1);
    while trainer.step_count() < trainer.train.steps {
        let loss = trainer.step()?;
        let s = trainer.step_count();
        if s % every == 0 {
            trainer.checkpoint().save(&a.checkpoint)?;
            log.info("training_progress", json!({ "step": s, "loss": loss }));
        }
    }
    let ck = trainer.checkpoint();
    ck.save(&a.checkpoint)?;
    harness::export_loss_curve(&ck.losses, &a.checkpoint.with_extension("loss.csv"))?;
    println!(
        "{} trained for {} steps, final loss {:.6}; checkpoint {}",
        kind.as_str(),
        ck.step,
        ck.losses.last().copied().unwrap_or(f64::NAN),
        a.checkpoint.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut spec = a.spec.spec(a.protocol.into())?;
    spec.grid_size = ck.system.config.grid_size;
    let named = spec.load_targets()?;
    let targets: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
    let fire_rate = a.spec.fire_rate.unwrap_or(1.0);
    let steps = a.rollout_steps.unwrap_or_else(|| ck.system.eval_steps());
    let stats = training::evaluate(&ck, &targets, steps, fire_rate, &spec.seeds)?;
    let mut records = Vec::new();
    for ((name, _), st) in named.iter().zip(&stats) {
        println!("{name}\tmse={:.6}\tstd={:.6}", st.mean, st.std);
        for (metric, value) in [("mse_mean", st.mean), ("mse_std", st.std)] {
            records.push(MetricsRecord {
                protocol: "evaluate".into(),
                model: ck.system.config.kind.as_str().into(),
                seed: ck.train.seed,
                condition: format!("p_eval={};steps={steps}", harness::fmt_value(fire_rate)),
                target: name.clone(),
                metric: metric.into(),
                value,
            });
        }
    }
    if let Some(path) = a.csv.as_deref() {
        harness::export_csv(&records, path)?;
    }
    Ok(())
}

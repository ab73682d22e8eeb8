use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use milab::pipeline::{ExperimentConfig, Pipeline, Stage, Variant};
use milab::Error;

#[derive(Parser)]
#[command(name = "milab", version, about = "Model-inversion attack lab")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run every stage on one thread (the only mode at present, so results
    /// are always bitwise reproducible).
    #[arg(long, global = true)]
    single_worker: bool,
    /// Restrict attack stages to one identity-loss variant.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Override a config field by dotted path, e.g. `attack.gmi.iterations=300`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Lom,
    Ma,
    Lomma,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Lom => Variant::Lom,
            VariantArg::Ma => Variant::Ma,
            VariantArg::Lomma => Variant::Lomma,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the target classifier on the private split.
    TrainTarget,
    /// Train the evaluation classifier on the private split.
    TrainEval,
    /// Distil the augmented models from the target on public data.
    Distill,
    /// Train the public GANs needed by the configured attack modes.
    TrainGan,
    /// Run latent inversion for each mode and variant.
    Invert,
    /// Score reconstructions with the evaluation model.
    Evaluate,
    /// Compare identity losses under the target and evaluation models.
    AnalyzeOverfit,
    /// All stages, then the comparison table.
    FullExperiment,
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Check that every output file is recorded in the manifest.
    VerifyManifest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={}", toml_string(&o.to_string_lossy())));
    }
    match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::from_toml_str("", &overrides),
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let stage = match cli.command {
        Command::TrainTarget => Stage::TrainTarget,
        Command::TrainEval => Stage::TrainEval,
        Command::Distill => Stage::Distill,
        Command::TrainGan => Stage::TrainGan,
        Command::Invert => Stage::Invert,
        Command::Evaluate => Stage::Evaluate,
        Command::AnalyzeOverfit => Stage::AnalyzeOverfit,
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::VerifyManifest => {
            let p = Pipeline::new(cfg)?;
            p.manifest().verify_complete(p.out_dir())?;
            println!("manifest ok: {} entries", p.manifest().stages.len());
            return Ok(());
        }
        Command::FullExperiment => {
            let mut p = pipeline(cfg)?;
            let table = p.full_experiment()?;
            print!("{}", table.to_markdown());
            return Ok(());
        }
    };
    let mut p = pipeline(cfg)?;
    p.run_stage(stage, cli.variant.map(Variant::from))
}

fn pipeline(cfg: ExperimentConfig) -> Result<Pipeline, Error> {
    let mut p = Pipeline::new(cfg)?;
    p.on_progress(|o| {
        if o.cached {
            eprintln!("cached  {}", o.unit);
        } else {
            eprintln!("done    {} ({:.1}s)", o.unit, o.seconds);
        }
    });
    Ok(p)
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { field, .. } => v["field"] = field.clone().into(),
        Error::MissingArtifact { stage, path } => {
            v["stage"] = stage.clone().into();
            v["path"] = path.to_string_lossy().into_owned().into();
        }
        Error::Diverged { iteration, .. } => v["iteration"] = (*iteration).into(),
        _ => {}
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

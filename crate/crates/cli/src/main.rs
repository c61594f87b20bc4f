use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serpent_cli::commands::{self, RUN_CONFIG};
use serpent_cli::config::{parse_pairs, SEED_ENV};
use serpent_cli::{CliError, RunConfig};
use serpent_core::suite::Scope;
use serpent_data::{Difficulty, Split};

#[derive(Parser)]
#[command(name = "serpent", version, about = "Thin tubular structure segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate {
        #[arg(long, default_value_t = 160)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// easy|hard
        #[arg(long, default_value = "easy")]
        difficulty: String,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train and write checkpoints, the epoch log and the effective config.
    Train(RunArgs),
    /// Compute metrics for one split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Omit to evaluate the seeded initial parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// test|train
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the run's out_dir.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Segment one PGM image into a binary PGM mask.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// primitive|dsconv|attention|block|model
        scope: String,
        /// Flip the sign of every backward pass; the check must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// tiny|desk
    #[arg(long)]
    preset: Option<String>,
    /// vanilla|dsconv|enhanced
    #[arg(long)]
    conv: Option<String>,
    /// none|cam|wcam
    #[arg(long)]
    channel_attention: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
}

impl RunArgs {
    /// Defaults, then the config file, then the seed variable, then flags.
    /// `fallback` is read when no `--config` is given and it exists.
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        let file = self.config.as_deref().or(fallback.filter(|p| p.is_file()));
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_pairs(&parse_pairs(&text)?)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", &seed)?;
        }
        let mut flags = Vec::new();
        let pairs = [
            ("preset", &self.preset),
            ("conv", &self.conv),
            ("channel_attention", &self.channel_attention),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("seed", &self.seed),
            ("manifest", &self.manifest),
            ("out_dir", &self.out_dir),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                flags.push((k.to_string(), v.clone()));
            }
        }
        if self.augment {
            flags.push(("augment".into(), "true".into()));
        }
        cfg.apply_pairs(&flags)?;
        cfg.validate()?;
        for line in cfg.to_text().lines() {
            log::info!("config {line}");
        }
        Ok(cfg)
    }
}

fn parse_arg<T: std::str::FromStr>(what: &str, s: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}` (expected train|test)"))),
    }
}

fn sibling_config(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { train, test, seed, size, difficulty, out } => {
            let difficulty: Difficulty = parse_arg("--difficulty", &difficulty)?;
            commands::generate(train, test, seed, size, difficulty, &out)?;
        }
        Command::Train(args) => {
            commands::train_run(&args.resolve(None)?)?;
        }
        Command::Eval { run, checkpoint, split, report_dir } => {
            let fallback = checkpoint.as_deref().map(sibling_config);
            let cfg = run.resolve(fallback.as_deref())?;
            let split = parse_split(&split)?;
            let report_dir = report_dir.unwrap_or_else(|| cfg.out_dir.clone());
            commands::eval(&cfg, checkpoint.as_deref(), split, &report_dir)?;
        }
        Command::Predict { run, checkpoint, image, out } => {
            let cfg = run.resolve(Some(&sibling_config(&checkpoint)))?;
            commands::predict(&cfg, &checkpoint, &image, &out)?;
        }
        Command::Gradcheck { scope, inject_fault } => {
            let scope: Scope = parse_arg("scope", &scope)?;
            commands::gradcheck(scope, inject_fault)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

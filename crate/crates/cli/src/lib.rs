//! Command-line experiment runner: training, reconstruction, evaluation
//! and certificate estimation over a shared output directory.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod pipeline;
pub mod results;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{merge, parse_pairs, preset, ExperimentConfig, Pairs};
use error::{CliError, Result};
use pipeline::Run;

#[derive(Parser, Debug)]
#[command(name = "gpcs", version, about = "Compressed sensing with generative priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a GAN or conditional GAN (model.kind = gan | cgan).
    TrainGan(Common),
    /// Train a conditional BEGAN (model.kind = began-c).
    TrainBegan(Common),
    /// Fit a pseudo-inverse network to a trained generator.
    TrainPinv(Common),
    /// Run PGD / NPGD on the test batch, then evaluate.
    Reconstruct(Common),
    /// Recompute metrics from saved reconstructions into results.csv.
    Evaluate(Common),
    /// Estimate REC, S-REC and projector slack for a trained generator.
    Certify(Common),
    /// End-to-end run on a synthetic linear manifold.
    Smoke(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Named preset applied before everything else.
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for reconstruction.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Common {
    /// Effective configuration: preset, file, `--set`, then flags.
    ///
    /// Without `--preset` or `--config`, a `config.txt` left in the output
    /// directory by an earlier stage is used as the file layer.
    pub fn resolve(&self, default_preset: Option<&str>) -> Result<ExperimentConfig> {
        let mut pairs = Pairs::new();
        let file = match (&self.config, &self.preset) {
            (Some(p), _) => Some(p.clone()),
            (None, None) => {
                let set_out = self.set.iter().find_map(|s| s.strip_prefix("output.dir=").map(PathBuf::from));
                let out = match self.out.clone().or(set_out) {
                    Some(o) => o,
                    None => ExperimentConfig::from_pairs(&Pairs::new())?.out,
                };
                Some(out.join("config.txt")).filter(|p| p.is_file())
            }
            (None, Some(_)) => None,
        };
        if let Some(name) = self.preset.as_deref().or(default_preset.filter(|_| file.is_none())) {
            merge(&mut pairs, preset(name)?)?;
        }
        if let Some(path) = &file {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            merge(&mut pairs, parse_pairs(&text)?)?;
        }
        let mut sets = Pairs::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            sets.insert(k.trim().to_string(), v.trim().to_string());
        }
        merge(&mut pairs, sets)?;
        let mut flags = Pairs::new();
        if let Some(s) = self.seed {
            flags.insert("seed".into(), s.to_string());
        }
        if let Some(o) = &self.out {
            flags.insert("output.dir".into(), o.display().to_string());
        }
        if let Some(j) = self.jobs {
            flags.insert("jobs".into(), j.to_string());
        }
        merge(&mut pairs, flags)?;
        ExperimentConfig::from_pairs(&pairs)
    }
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainGan(c) => Run::new(c.resolve(None)?)?.train_gan(),
        Command::TrainBegan(c) => Run::new(c.resolve(None)?)?.train_began(),
        Command::TrainPinv(c) => Run::new(c.resolve(None)?)?.train_pinv(),
        Command::Reconstruct(c) => Run::new(c.resolve(None)?)?.reconstruct(),
        Command::Evaluate(c) => {
            let rows = Run::new(c.resolve(None)?)?.evaluate()?;
            print!("{}", String::from_utf8_lossy(&results::results_csv(&rows)?));
            Ok(())
        }
        Command::Certify(c) => {
            let report = Run::new(c.resolve(None)?)?.certify()?;
            println!("{report:#}");
            Ok(())
        }
        Command::Smoke(c) => {
            let rows = Run::new(c.resolve(Some("smoke"))?)?.smoke()?;
            print!("{}", String::from_utf8_lossy(&results::results_csv(&rows)?));
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

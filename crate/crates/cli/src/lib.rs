pub mod commands;
pub mod config;
pub mod montage;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use swinsyn::volume::{load_volume, Modality};
use swinsyn::ErrorKind;

use commands::{ModelSource, MANIFEST_FILE};
use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "swinsyn",
    version,
    about = "Missing-modality brain MRI synthesis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed override (dropout seed, or training seed for `train`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel subjects for synthesis and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one network per requested missing modality.
    Train {
        #[command(flatten)]
        common: Common,
        /// Modality to synthesize (t1, t2, flair, t1ce) or `all`.
        #[arg(long, default_value = "all")]
        target: String,
    },
    /// Write a manifest assigning one withheld modality to each subject.
    Dropout {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize each subject's withheld modality.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Dropout manifest (default: `<output_dir>/dropout_manifest.tsv`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// A single checkpoint used for every subject.
        #[arg(long, conflicts_with = "models")]
        checkpoint: Option<PathBuf>,
        /// Training output root with one subdirectory per target.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score synthesized volumes (and optional masks) against the originals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory of `synthesize`.
        #[arg(long)]
        synth: PathBuf,
        /// Segmentations of the synthesized cases, `<subject>/<subject>_seg.nii.gz`.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Also write real/synthesized mid-slice montages.
        #[arg(long)]
        montage: bool,
    },
    /// Render mid axial slices of volumes side by side into a PNG.
    Montage {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Dropout { common }
            | Command::Synthesize { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Montage { common, .. } => common,
        }
    }
}

fn parse_targets(raw: &str) -> Result<Vec<Modality>> {
    if raw.eq_ignore_ascii_case("all") {
        return Ok(Modality::IMAGING.to_vec());
    }
    let m: Modality = raw.parse()?;
    Modality::inputs_for(m)?;
    Ok(vec![m])
}

fn resolve(common: &Common, train_seed: bool) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(seed) = common.seed {
        if train_seed {
            cfg.train.seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

pub fn execute(cli: Cli) -> Result<()> {
    let is_train = matches!(cli.command, Command::Train { .. });
    let (cfg, out) = resolve(cli.command.common(), is_train)?;
    let default_manifest = || cfg.output_dir.join(MANIFEST_FILE);
    match &cli.command {
        Command::Train { target, .. } => {
            let targets = parse_targets(target)?;
            for dir in commands::train(&cfg, &targets, &out)? {
                println!("{}", dir.display());
            }
        }
        Command::Dropout { .. } => {
            println!("{}", commands::dropout(&cfg, &out)?.display());
        }
        Command::Synthesize {
            manifest,
            checkpoint,
            models,
            ..
        } => {
            let source = match (checkpoint, models) {
                (Some(c), _) => ModelSource::Checkpoint(c.clone()),
                (None, Some(m)) => ModelSource::Directory(m.clone()),
                (None, None) => bail!(swinsyn::Error::Config(
                    "synthesize needs --checkpoint or --models".into()
                )),
            };
            let entries =
                commands::read_manifest(&manifest.clone().unwrap_or_else(default_manifest))?;
            for path in commands::synthesize(&cfg, &source, &entries, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate {
            manifest,
            synth,
            masks,
            montage,
            ..
        } => {
            let entries =
                commands::read_manifest(&manifest.clone().unwrap_or_else(default_manifest))?;
            let inputs = commands::EvaluateInputs {
                manifest: &entries,
                synth_dir: synth,
                mask_dir: masks.as_deref(),
                montage: *montage,
            };
            let report = commands::evaluate(&cfg, &inputs, &out)?;
            print!("{}", report.summary_tsv());
        }
        Command::Montage { volumes, .. } => {
            let loaded = volumes
                .iter()
                .map(|p| load_volume(p))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<_> = loaded.iter().collect();
            let path = if out
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            {
                out.clone()
            } else {
                out.join("montage.png")
            };
            montage::write_montage(&refs, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<swinsyn::Error>() {
            return match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anchorlab::commands::{self, AnalyzeArgs, Outcome, ProtoMode, ProtogenArgs, SynthArgs, TrainArgs, VerifyArgs};
use anchorlab::config::{AnalysisToggles, BlobRecipe, NoiseRecipe, SynthRecipe};
use anchorlab::error::{CliError, Result, EXIT_USAGE};
use anchorlab::{formats, parallel};
use anchorlab_core::datasets::{ImbalanceKind, ImbalanceSpec, NoiseKind, NoiseSampling};
use anchorlab_core::theory::VerifyConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Anchored prototype learning at desk scale.
#[derive(Debug, Parser)]
#[command(name = "anchorlab", version)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the report as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate, verify and write a prototype set.
    Protogen(ProtogenCli),
    /// Build train/eval dataset bundles from a recipe.
    Synth(SynthCli),
    /// Train from a run config.
    Train,
    /// Margin, calibration, norm and angle reports for a checkpoint.
    Analyze(AnalyzeCli),
    /// Run the numerical verification suite.
    Verify(VerifyCli),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "closed_form", alias = "closed-form")]
    ClosedForm,
    Optimized,
}

#[derive(Debug, Args)]
struct ProtogenCli {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, value_enum, default_value = "closed_form")]
    mode: ModeArg,
    /// File stem for `<stem>.proto.json` and `<stem>.proto.bin`.
    #[arg(long, default_value = "prototypes")]
    stem: String,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ImbalanceArg {
    Longtail,
    Step,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseArg {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplingArg {
    #[value(name = "per_class_exact", alias = "per-class-exact")]
    PerClassExact,
    Independent,
}

/// Flags are ignored when `--config` supplies a recipe.
#[derive(Debug, Args)]
struct SynthCli {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum)]
    imbalance: Option<ImbalanceArg>,
    #[arg(long, default_value_t = 100.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.5)]
    minority_fraction: f64,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Asymmetric flips as `src:dst` pairs, e.g. `7:1,2:7`.
    #[arg(long, value_delimiter = ',')]
    class_map: Vec<String>,
    #[arg(long, value_enum, default_value = "per_class_exact")]
    sampling: SamplingArg,
}

#[derive(Debug, Args)]
struct AnalyzeCli {
    /// Directory holding `checkpoint.json` and `checkpoint.bin`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = anchorlab_core::analysis::DEFAULT_ECE_BINS)]
    ece_bins: usize,
    #[arg(long, default_value_t = 20)]
    norm_bins: usize,
    #[arg(long, default_value_t = 100)]
    many_min: usize,
    #[arg(long, default_value_t = 20)]
    few_max: usize,
}

#[derive(Debug, Args)]
struct VerifyCli {
    /// Extra prototype files to check against their recorded tolerance.
    #[arg(long)]
    prototypes: Vec<PathBuf>,
    /// Samples per empirical Lipschitz estimate.
    #[arg(long)]
    samples: Option<usize>,
}

fn parse_class_map(items: &[String]) -> Result<Option<Vec<(usize, usize)>>> {
    if items.is_empty() {
        return Ok(None);
    }
    items
        .iter()
        .map(|s| {
            let (a, b) = s
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("class map entry `{s}` is not `src:dst`")))?;
            let p = |v: &str| v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad class `{v}`")));
            Ok((p(a)?, p(b)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn synth_recipe(a: &SynthCli) -> Result<SynthRecipe> {
    Ok(SynthRecipe {
        blobs: BlobRecipe {
            k: a.k,
            m: a.m,
            per_class: a.per_class,
            center_scale: a.center_scale,
            noise_sigma: a.sigma,
            seed: None,
        },
        holdout_per_class: a.holdout,
        imbalance: a.imbalance.map(|kind| ImbalanceSpec {
            kind: match kind {
                ImbalanceArg::Longtail => ImbalanceKind::LongTailed,
                ImbalanceArg::Step => ImbalanceKind::Step,
            },
            rho: a.rho,
            minority_fraction: a.minority_fraction,
        }),
        imbalance_seed: None,
        noise: match a.noise {
            None => None,
            Some(kind) => Some(NoiseRecipe {
                kind: match kind {
                    NoiseArg::Symmetric => NoiseKind::Symmetric,
                    NoiseArg::Asymmetric => NoiseKind::Asymmetric,
                },
                eta: a.eta,
                class_map: parse_class_map(&a.class_map)?,
                seed: None,
                sampling: match a.sampling {
                    SamplingArg::PerClassExact => NoiseSampling::PerClassExact,
                    SamplingArg::Independent => NoiseSampling::Independent,
                },
            }),
        },
    })
}

fn run(cli: Cli) -> Result<Outcome> {
    let seed = cli.seed;
    let out = cli.out.clone();
    match &cli.command {
        Command::Protogen(a) => commands::cmd_protogen(&ProtogenArgs {
            k: a.k,
            d: a.d,
            mode: match a.mode {
                ModeArg::ClosedForm => ProtoMode::ClosedForm,
                ModeArg::Optimized => ProtoMode::Optimized,
            },
            seed: seed.unwrap_or(0),
            out,
            stem: a.stem.clone(),
            epochs: a.epochs,
            tolerance: a.tolerance,
        }),
        Command::Synth(a) => {
            let recipe = match &cli.config {
                Some(path) => formats::read_json(path)?,
                None => synth_recipe(a)?,
            };
            commands::cmd_synth(&SynthArgs {
                recipe,
                seed: seed.unwrap_or(0),
                out,
            })
        }
        Command::Train => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| CliError::Usage("train needs --config <run.json>".into()))?;
            let (mut config, base) = commands::load_run_config(path)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            commands::cmd_train(&TrainArgs {
                config,
                base: Some(base),
                out,
            })
        }
        Command::Analyze(a) => {
            let mut toggles = match &cli.config {
                Some(path) => formats::read_json(path)?,
                None => AnalysisToggles::default(),
            };
            toggles.ece_bins = a.ece_bins;
            toggles.norm_bins = a.norm_bins;
            toggles.thresholds.many_min = a.many_min;
            toggles.thresholds.few_max = a.few_max;
            commands::cmd_analyze(&AnalyzeArgs {
                checkpoint: a.checkpoint.clone(),
                data: a.data.clone(),
                toggles,
                out,
            })
        }
        Command::Verify(a) => {
            let mut config: VerifyConfig = match &cli.config {
                Some(path) => formats::read_json(path)?,
                None => VerifyConfig::default(),
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(n) = a.samples {
                config.empirical_samples = n;
            }
            commands::cmd_verify(&VerifyArgs {
                config,
                prototypes: a.prototypes.clone(),
                threads: parallel::threads_from_env()?,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = serde_json::json!({
                "error": "UsageError",
                "message": e.to_string().trim_end(),
                "exit_code": EXIT_USAGE,
            });
            eprintln!("{err}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            // a closed pipe on stdout is not an error of the command
            let _ = if json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&outcome.report).expect("reports serialize"))
            } else {
                write!(stdout, "{}", outcome.text)
            };
            ExitCode::from(outcome.exit as u8)
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

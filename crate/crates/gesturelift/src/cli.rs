//! Command-line interface. All subcommands are thin wrappers over library
//! calls; every random decision derives from the `--seed` value handed to
//! the subcommand (or the experiment config's master seed).
//!
//! Exit codes: 0 success, 1 usage error (help printed to stderr),
//! 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diffusion::{self, GeneratorConfig};
use crate::harness::{self, ExperimentConfig};
use crate::lifter::{train_lifter, LifterConfig, TrainedLifter};
use crate::metrics::{train_encoder_with, EncoderConfig, FgdVariant};
use crate::skeleton::SkeletonTopology;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "gesturelift",
    about = "Compare native-3D co-speech gesture generation against 2D generation lifted to 3D",
    version
)]
struct Cli {
    /// Print the default experiment config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic gesture+speech dataset.
    GenData(GenDataArgs),
    /// Train a diffusion gesture generator on a dataset.
    TrainGenerator(TrainGeneratorArgs),
    /// Train the 2D-to-3D lifting network on a 3D dataset.
    TrainLifter(TrainLifterArgs),
    /// Train a pose feature encoder for FGD/diversity.
    TrainEncoder(TrainEncoderArgs),
    /// Lift a 2D dataset to 3D with a trained lifter.
    Lift(LiftArgs),
    /// Run the comparative evaluation end to end and write reports.
    Evaluate(EvaluateArgs),
    /// Re-render the Markdown report from a metrics CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Synth config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for dataset.gdb and its JSON sidecar.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainGeneratorArgs {
    /// Generator config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (.gdb).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint pair.
    #[arg(long)]
    out: PathBuf,
    /// Gesture space to train in; 3D datasets are projected for dims=2.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=3))]
    dims: Option<u32>,
    /// Train the unconditional ablation (p_uncond = 1).
    #[arg(long)]
    uncond: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainLifterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// 3D dataset file (.gdb).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainEncoderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gesture space to encode; 3D datasets are projected for dims=2.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=3))]
    dims: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct LiftArgs {
    /// Lifter checkpoint base path (without extension).
    #[arg(long)]
    ckpt: PathBuf,
    /// 2D dataset file (.gdb).
    #[arg(long)]
    data: PathBuf,
    /// Output dataset file (.gdb).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Experiment config JSON (required).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// FGD formula variant.
    #[arg(long, value_parser = ["standard", "paper-literal"])]
    fgd_variant: Option<String>,
    /// Evaluate independent settings on worker threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics CSV produced by `evaluate`.
    #[arg(long)]
    csv: PathBuf,
    /// Output Markdown path.
    #[arg(long)]
    out: PathBuf,
    /// Experiment config JSON for the report header; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T, String> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn run_command(command: Command) -> Result<(), String> {
    match command {
        Command::GenData(args) => {
            let config: SynthConfig = load_json_config(args.config.as_deref())?;
            let topo = SkeletonTopology::default_upper_body();
            let dataset =
                synth::generate(&config, &topo, args.seed).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
            let path = args.out.join("dataset.gdb");
            synth::save_dataset(&dataset, &path).map_err(|e| e.to_string())?;
            println!(
                "wrote {} sequences ({} frames x {} bones, dims={}) to {}",
                dataset.len(),
                dataset.seq_len,
                dataset.bone_count,
                dataset.dims,
                path.display()
            );
            Ok(())
        }
        Command::TrainGenerator(args) => {
            let mut config: GeneratorConfig = load_json_config(args.config.as_deref())?;
            if let Some(dims) = args.dims {
                config.dims = dims as usize;
            }
            if args.uncond {
                config.p_uncond = 1.0;
            }
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let dataset = synth::load_dataset(&args.data).map_err(|e| e.to_string())?;
            let dataset = match (dataset.dims, config.dims) {
                (3, 2) => dataset.project_2d().map_err(|e| e.to_string())?,
                (2, 3) => return Err("cannot train a 3D generator on a 2D dataset".into()),
                _ => dataset,
            };
            let generator = diffusion::train(&dataset, &config).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
            let name = match (config.dims, args.uncond) {
                (2, false) => "generator_2d",
                (3, false) => "generator_3d",
                (2, true) => "uncond_generator_2d",
                _ => "uncond_generator_3d",
            };
            let base = args.out.join(name);
            generator.save(&base).map_err(|e| e.to_string())?;
            println!(
                "trained {name}: held-out denoising loss {:.5} -> {:.5}; saved to {}",
                generator.training_log.heldout_initial,
                generator.training_log.heldout_final,
                base.display()
            );
            Ok(())
        }
        Command::TrainLifter(args) => {
            let mut config: LifterConfig = load_json_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let dataset = synth::load_dataset(&args.data).map_err(|e| e.to_string())?;
            let lifter = train_lifter(&dataset, &config).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
            let base = args.out.join("lifter");
            lifter.save(&base).map_err(|e| e.to_string())?;
            println!(
                "trained lifter: held-out MPJPE {:.5}; saved to {}",
                lifter.validation_mpjpe,
                base.display()
            );
            Ok(())
        }
        Command::TrainEncoder(args) => {
            let config: EncoderConfig = load_json_config(args.config.as_deref())?;
            let dataset = synth::load_dataset(&args.data).map_err(|e| e.to_string())?;
            let dims = args.dims.map(|d| d as usize).unwrap_or(dataset.dims);
            let dataset = match (dataset.dims, dims) {
                (3, 2) => dataset.project_2d().map_err(|e| e.to_string())?,
                (2, 3) => return Err("cannot train a 3D encoder on a 2D dataset".into()),
                _ => dataset,
            };
            let encoder =
                train_encoder_with(&dataset, &config, args.seed).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
            let base = args.out.join(format!("encoder_{dims}d"));
            encoder.save(&base).map_err(|e| e.to_string())?;
            println!(
                "trained encoder_{dims}d: reconstruction MSE {:.6}, checksum {}; saved to {}",
                encoder.final_reconstruction_error,
                encoder.checksum().map_err(|e| e.to_string())?,
                base.display()
            );
            Ok(())
        }
        Command::Lift(args) => {
            let lifter = TrainedLifter::load(&args.ckpt).map_err(|e| e.to_string())?;
            let dataset = synth::load_dataset(&args.data).map_err(|e| e.to_string())?;
            let lifted = lifter.lift_dataset(&dataset).map_err(|e| e.to_string())?;
            if let Some(parent) = args.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
            }
            synth::save_dataset(&lifted, &args.out).map_err(|e| e.to_string())?;
            println!("lifted {} sequences to {}", lifted.len(), args.out.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let text = std::fs::read_to_string(&args.config)
                .map_err(|e| format!("cannot read config {}: {e}", args.config.display()))?;
            let mut config: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| format!("invalid config {}: {e}", args.config.display()))?;
            if let Some(out) = args.out {
                config.out_dir = Some(out);
            }
            if let Some(seed) = args.seed {
                config.master_seed = seed;
            }
            if let Some(variant) = args.fgd_variant.as_deref() {
                config.fgd_variant = FgdVariant::parse(variant)
                    .ok_or_else(|| format!("unknown fgd variant `{variant}`"))?;
            }
            if args.parallel {
                config.parallel = true;
            }
            if config.out_dir.is_none() {
                return Err("no output directory: pass --out or set out_dir in the config".into());
            }
            let report = harness::run_experiment(&config).map_err(|e| e.to_string())?;
            let dir = config.out_dir.as_ref().expect("out_dir set above");
            for row in &report.rows {
                println!(
                    "{:<22} space={} fgd={:.4} bc={} diversity={:.4}",
                    row.setting.name(),
                    row.space.name(),
                    row.fgd,
                    row.bc.map_or("-".into(), |v| format!("{v:.4}")),
                    row.diversity
                );
            }
            println!("report written to {}", dir.display());
            Ok(())
        }
        Command::Report(args) => {
            let text = std::fs::read_to_string(&args.csv)
                .map_err(|e| format!("cannot read CSV {}: {e}", args.csv.display()))?;
            let rows = harness::parse_csv(&text).map_err(|e| e.to_string())?;
            let config: ExperimentConfig = load_json_config(args.config.as_deref())?;
            let report = harness::MetricReport {
                rows,
                metadata: harness::RunMetadata {
                    config_hash: config.config_hash(),
                    ..Default::default()
                },
            };
            let md = harness::render_markdown(&report, &config);
            if let Some(parent) = args.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
            }
            std::fs::write(&args.out, md).map_err(|e| e.to_string())?;
            println!("report written to {}", args.out.display());
            Ok(())
        }
    }
}

/// Parses and runs the CLI, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap formats both usage errors and --help/--version output;
            // only genuine errors exit nonzero.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    if cli.print_config {
        let config = ExperimentConfig::default();
        println!(
            "{}",
            serde_json::to_string_pretty(&config).expect("default config serializes")
        );
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return 1;
    };
    match run_command(command) {
        Ok(()) => 0,
        Err(message) => {
            eprintln!("error: {message}");
            2
        }
    }
}

//! `pswa` command-line driver.
//!
//! Exit codes: 0 success, 1 tolerance or assertion failure, 2 usage,
//! configuration or I/O error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pswa::checks::{gradient_suite, CaseResult};
use pswa::diagnostics::{flops_report, radial_spectrum, radial_spectrum_batch, SpectrumProfile};
use pswa::diffusion::{ddpm_sample, load_checkpoint};
use pswa::experiment::{distance_stats, mixer_spectrum, train_run, RunConfig};
use pswa::model::SwinDiT;
use pswa::numerics::io::{self, DType};
use pswa::numerics::GradcheckOptions;
use pswa::{Error, Result};

const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser)]
#[command(name = "pswa", version, about = "Pseudo shifted window attention toolkit")]
struct Cli {
    /// Run configuration (TOML); every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the parameter storage precision.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        /// Restrict to one module: numerics, attention, pswa, model or diffusion.
        #[arg(long)]
        module: Option<String>,
        /// Scales analytic gradients by 1 + FACTOR to exercise the failure path.
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_fault: f64,
    },
    /// Trains the toy model; writes metrics.csv and checkpoints.
    Train,
    /// Draws images by ancestral sampling; writes samples.pswt.
    Sample {
        /// Checkpoint directory; the initial model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of images.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Attention-distance survey; writes distance_histogram.csv.
    DiagDistance {
        /// Checkpoint directory; the initial model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Radial feature spectrum; writes spectrum.csv.
    DiagSpectrum {
        /// Checkpoint directory; the initial model when omitted.
        #[arg(long, conflicts_with = "input")]
        checkpoint: Option<PathBuf>,
        /// PSWT tensor `[H×W]`, `[C×H×W]` or `[B×C×H×W]` to analyse directly.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Per-sample FLOPs and parameters by component; writes flops.csv.
    Flops,
}

enum Outcome {
    Done,
    Failed,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
}

/// The model to diagnose: a trained checkpoint, whose architecture replaces
/// the configured one, or the configured model at initialisation.
fn model_for(cfg: &mut RunConfig, checkpoint: Option<&Path>) -> Result<SwinDiT> {
    let Some(dir) = checkpoint else {
        return cfg.init_model();
    };
    let (manifest, model) = load_checkpoint(dir)?;
    if manifest.diffusion_steps != cfg.schedule.steps {
        return Err(Error::Config(format!(
            "checkpoint was trained with {} diffusion steps, config has {}",
            manifest.diffusion_steps, cfg.schedule.steps
        )));
    }
    cfg.model = manifest.model;
    cfg.validate()?;
    Ok(model)
}

fn write_spectrum(out: &Path, profile: &SpectrumProfile) -> Result<()> {
    profile.write_csv(create(&out.join("spectrum.csv"))?)?;
    println!(
        "high-frequency fraction {:.6} over {} radial bins",
        profile.high_frequency_fraction(),
        profile.bins()
    );
    Ok(())
}

fn print_cases(cases: &[CaseResult]) -> Outcome {
    for c in cases {
        println!(
            "{} {}/{}: max rel error {:.3e} (tolerance {:.0e})",
            if c.passed() { "ok  " } else { "FAIL" },
            c.module,
            c.name,
            c.report.max_rel_error,
            c.tolerance
        );
    }
    let Some(worst) = cases
        .iter()
        .max_by(|a, b| (a.report.max_rel_error / a.tolerance).total_cmp(&(b.report.max_rel_error / b.tolerance)))
    else {
        return Outcome::Done;
    };
    let entry = worst
        .report
        .worst
        .as_ref()
        .map(|w| {
            format!(
                " at input {} entry {} (analytic {:e}, numeric {:e})",
                w.input, w.index, w.analytic, w.numeric
            )
        })
        .unwrap_or_default();
    println!(
        "worst offender: {}/{} rel error {:.3e}{entry}",
        worst.module, worst.name, worst.report.max_rel_error
    );
    let failed = cases.iter().filter(|c| !c.passed()).count();
    if failed == 0 {
        println!("{} cases passed", cases.len());
        Outcome::Done
    } else {
        println!("{failed} of {} cases over tolerance", cases.len());
        Outcome::Failed
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    let mut cfg = resolve(cli)?;
    if matches!(cli.command, Command::Gradcheck { .. }) && cfg.precision != DType::F64 {
        return Err(Error::Usage("gradient checks run in f64 only".into()));
    }
    let out = cli.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::Usage(format!("cannot create {}: {e}", out.display())))?;
    let outcome = match &cli.command {
        Command::Gradcheck { module, inject_fault } => {
            let opts = GradcheckOptions {
                corrupt_analytic: *inject_fault,
                ..Default::default()
            };
            let cases = gradient_suite(module.as_deref(), &cfg.model, &cfg.pcca, &opts, cfg.seed)?;
            let mut csv = create(&out.join("gradcheck.csv"))?;
            writeln!(csv, "module,case,max_rel_error,tolerance,passed")?;
            for c in &cases {
                writeln!(
                    csv,
                    "{},{},{:e},{:e},{}",
                    c.module,
                    c.name,
                    c.report.max_rel_error,
                    c.tolerance,
                    c.passed()
                )?;
            }
            print_cases(&cases)
        }
        Command::Train => {
            let (_, report) = train_run(&cfg, Some(out))?;
            let n = report.losses.len();
            let window = 50.min(n);
            println!(
                "trained {n} steps: mean loss {:.6} over the first {window}, {:.6} over the last {window}",
                report.mean_loss(0..window),
                report.mean_loss(n - window..n)
            );
            Outcome::Done
        }
        Command::Sample { checkpoint, count } => {
            if *count == 0 {
                return Err(Error::Usage("--count must be >= 1".into()));
            }
            let model = model_for(&mut cfg, checkpoint.as_deref())?;
            let (h, w) = cfg.model.image_size;
            let labels: Option<Vec<usize>> =
                (cfg.model.num_classes > 0).then(|| (0..*count).map(|i| i % cfg.model.num_classes).collect());
            let images = ddpm_sample(
                &model,
                &cfg.noise_schedule()?,
                &[*count, cfg.model.in_channels, h, w],
                labels.as_deref(),
                &mut cfg.sample_rng(),
            )?;
            io::write_tensor(create(&out.join("samples.pswt"))?, &images, cfg.precision)?;
            println!("wrote {count} samples of {}x{h}x{w}", cfg.model.in_channels);
            Outcome::Done
        }
        Command::DiagDistance { checkpoint } => {
            let model = model_for(&mut cfg, checkpoint.as_deref())?;
            let stats = distance_stats(&cfg, &model)?;
            stats.write_csv(create(&out.join("distance_histogram.csv"))?)?;
            let (mean, max) = (stats.mean(), stats.max());
            println!(
                "{} maps: mean distance ({:.4}, {:.4}), max ({:.4}, {:.4})",
                stats.samples(),
                mean.0,
                mean.1,
                max.0,
                max.1
            );
            Outcome::Done
        }
        Command::DiagSpectrum { checkpoint, input } => {
            let profile = match input {
                Some(path) => {
                    let t = io::load(path)?;
                    match t.rank() {
                        2 => radial_spectrum(&t)?,
                        3 => radial_spectrum_batch(&t.reshape(&[&[1], t.shape()].concat())?)?,
                        4 => radial_spectrum_batch(&t)?,
                        r => {
                            return Err(Error::Usage(format!(
                                "spectrum input must have rank 2, 3 or 4, got rank {r}"
                            )))
                        }
                    }
                }
                None => {
                    let model = model_for(&mut cfg, checkpoint.as_deref())?;
                    mixer_spectrum(&cfg, &model)?
                }
            };
            write_spectrum(out, &profile)?;
            Outcome::Done
        }
        Command::Flops => {
            let report = flops_report(&cfg.model, &cfg.plan()?)?;
            report.write_csv(create(&out.join("flops.csv"))?)?;
            println!(
                "{} FLOPs per sample ({} in attention pairs), {} parameters",
                report.total_flops,
                report.pair_term(),
                report.total_params
            );
            Outcome::Done
        }
    };
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e @ Error::NonFinite(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

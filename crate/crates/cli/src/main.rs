use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dakit::error::Error;
use dakit::eval::export_features;
use dakit::gradcam::grad_cam;
use dakit::harness::{cmd_report, cmd_run, cmd_sweep, load_run, SweepPlan};
use dakit::numerics::Domain;
use dakit::train::ExperimentConfig;

/// Unsupervised domain adaptation experiments from declarative configs.
#[derive(Parser, Debug)]
#[command(name = "dakit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Root under which the run directory is created.
        #[arg(long, env = "DAKIT_OUT", default_value = "runs")]
        out: PathBuf,
        /// Replace an existing run directory for the same config and seed.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run every cell of the `[sweep]` grid and tabulate best accuracies.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "DAKIT_OUT", default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
        /// Maximum number of cells trained at once.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Accuracy curves and a best-accuracy table over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Write bottleneck features of both domains for external embedding tools.
    ExportFeatures {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the last checkpoint instead of the best one.
        #[arg(long)]
        final_checkpoint: bool,
    },
    /// Heat map of one sample from a convolutional run.
    GradCam {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
        /// Class whose score is explained; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value = "conv2")]
        layer: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        final_checkpoint: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for invalid configuration, 3 for a refused rerun, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::RunCollision(_)) => 3,
        _ => 1,
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            overwrite,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let s = cmd_run(&cfg, Some(&config), &out, overwrite)?;
            println!(
                "{} on {}: best target accuracy {:.4} at epoch {} (fingerprint {})",
                s.algorithm, s.scenario, s.best_accuracy, s.best_epoch, s.fingerprint
            );
        }
        Command::Sweep {
            config,
            out,
            overwrite,
            parallel,
        } => {
            if parallel == Some(0) {
                bail!(Error::Config {
                    field: "--parallel".into(),
                    message: "must be >= 1".into()
                });
            }
            let plan = SweepPlan::load(&config)?;
            let outcome = cmd_sweep(&plan, &out, overwrite, parallel)?;
            println!(
                "{} cells, {} failed; tables in {}",
                outcome.rows.len(),
                outcome.failures.len(),
                out.display()
            );
        }
        Command::Report { runs, out } => {
            let r = cmd_report(&runs, &out)?;
            for (dir, why) in &r.skipped {
                eprintln!("skipped {}: {why}", dir.display());
            }
            for f in &r.figures {
                println!("wrote {}", f.display());
            }
            println!("wrote {}", r.table.display());
        }
        Command::ExportFeatures {
            run,
            out,
            final_checkpoint,
        } => {
            let mut loaded = load_run(&run, final_checkpoint)?;
            let path = out.unwrap_or_else(|| run.join("features.txt"));
            let sets = [(Domain::Source, &loaded.data.source), (Domain::Target, &loaded.data.target)];
            let dump = export_features(&mut loaded.model, &sets, &path)?;
            println!("wrote {} feature rows to {}", dump.labels.len(), path.display());
        }
        Command::GradCam {
            run,
            sample,
            domain,
            class,
            layer,
            out,
            final_checkpoint,
        } => {
            let mut loaded = load_run(&run, final_checkpoint)?;
            let Some([_, h, w]) = loaded.data.image_shape else {
                bail!("heat maps need image-shaped samples");
            };
            let set = match domain {
                DomainArg::Source => &loaded.data.source,
                DomainArg::Target => &loaded.data.target,
            };
            if sample >= set.len() {
                bail!("sample {sample} out of range for {} samples", set.len());
            }
            let x = set.inputs.batch(&[sample], dakit::nn::Mode::Eval, 0)?;
            let class = match class {
                Some(c) => c,
                None => {
                    let (_, probs) = loaded.model.predict(&x)?;
                    argmax(probs.row(0).iter().copied())
                }
            };
            let map = grad_cam(&mut loaded.model, &x, class, &layer)?;
            let path = out.unwrap_or_else(|| run.join(format!("gradcam-{sample}-{layer}.png")));
            map.upsample(h, w).save_png(&path).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} (class {class})", path.display());
        }
    }
    Ok(())
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

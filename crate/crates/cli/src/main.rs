use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use forcecast_core::eval::Axis;
use forcecast_core::nn::Variant;
use forcecast_core::pipeline::{self, RunConfig};
use forcecast_core::synth::{benchmark_plan, SuiteOptions, SuitePlan};
use forcecast_core::{Error, ErrorCategory, Result};

#[derive(Parser, Debug)]
#[command(name = "forcecast", version, about = "Vision-state force estimation toolkit")]
struct Cli {
    /// Worker threads for preprocessing and augmentation.
    #[arg(long, global = true, env = "FORCECAST_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic palpation datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Both benchmark datasets instead of only the first one.
        #[arg(long)]
        suite: bool,
        /// Seconds per clip.
        #[arg(long, default_value_t = 20.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        presses: usize,
        #[arg(long)]
        overwrite: bool,
    },
    /// Generalize states and calibrate forces of one or more datasets.
    Harmonize {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model and write its checkpoint plus loss curve.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint on its held-out clips.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Force axis whose extrema define the peaks.
        #[arg(long, value_enum, default_value_t = AxisArg::X)]
        axis: AxisArg,
        /// Inference passes for the latency field; 0 skips it.
        #[arg(long, default_value_t = 100)]
        latency_passes: usize,
        #[arg(long)]
        overwrite: bool,
    },
    /// Measure batch-1 inference latency.
    Bench {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Dump one sample window for debugging.
    Inspect {
        #[arg(long)]
        window: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Defaults to `window_<K>` in the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Fc,
    Cnn,
    Vit,
    Rcnn,
    Rvit,
}

impl From<ModelArg> for Variant {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Fc => Variant::Fc,
            ModelArg::Cnn => Variant::Cnn,
            ModelArg::Vit => Variant::Vit,
            ModelArg::Rcnn => Variant::Rcnn,
            ModelArg::Rvit => Variant::Rvit,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

fn synth(out: PathBuf, seed: u64, suite: bool, duration: f64, presses: usize, overwrite: bool) -> Result<()> {
    let opts = SuiteOptions {
        duration,
        presses,
        ..Default::default()
    };
    let mut plan = benchmark_plan(seed, &opts)?;
    if !suite {
        plan = SuitePlan {
            datasets: plan.datasets.into_iter().take(1).collect(),
        };
    }
    for (m, _) in &plan.datasets {
        pipeline::guard_output(&out.join(&m.name).join("manifest.json"), overwrite)?;
    }
    for path in plan.write(&out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("workers", e.to_string()))?;
    }
    match cli.command {
        Command::Synth {
            out,
            seed,
            suite,
            duration,
            presses,
            overwrite,
        } => synth(out, seed, suite, duration, presses, overwrite),
        Command::Harmonize {
            manifests,
            out,
            overwrite,
        } => {
            let index = pipeline::harmonize(&manifests, &out, overwrite)?;
            println!("harmonized {} clips into {}", index.clips.len(), out.display());
            Ok(())
        }
        Command::Train {
            model,
            config,
            data,
            out,
            overwrite,
        } => {
            let cfg = RunConfig::load(&config)?;
            let run = pipeline::train_run(&data, model.into(), &cfg, &out, overwrite, &mut |r| {
                eprintln!(
                    "epoch {:>4}  steps {:>6}  loss {:.5}  train_rmse {:.4}  test_rmse {:.4}",
                    r.epoch, r.steps, r.mean_loss, r.train_rmse, r.test_rmse
                )
            })?;
            if run.flagged > 0 {
                eprintln!("{} augmented windows fell back to their originals", run.flagged);
            }
            println!("{}  sha256 {}", out.display(), run.checkpoint.digest()?);
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            report,
            axis,
            latency_passes,
            overwrite,
        } => {
            let summary = pipeline::eval_run(&ckpt, &data, &report, axis.into(), latency_passes, overwrite)?;
            for c in &summary.clips {
                let peak = c.report.peak_rmse.map_or("-".to_string(), |p| format!("{p:.4}"));
                println!("{:<24} rmse {:.4}  peak_rmse {}", c.clip, c.report.rmse, peak);
            }
            Ok(())
        }
        Command::Bench { ckpt, n } => {
            println!("{:<32} {:>8} {:>12} {:>10}", "checkpoint", "passes", "mean_ms", "hz");
            for path in &ckpt {
                let l = pipeline::bench_checkpoint(path, Some(n))?;
                println!(
                    "{:<32} {:>8} {:>12.3} {:>10.2}",
                    path.display(),
                    l.passes,
                    l.mean_seconds * 1e3,
                    l.hz
                );
            }
            Ok(())
        }
        Command::Inspect {
            window,
            data,
            image_size,
            out,
            overwrite,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from(format!("window_{window}")));
            let dump = pipeline::inspect_window(&data, window, image_size, &out, overwrite)?;
            let text = serde_json::to_string_pretty(&dump).map_err(Error::from)?;
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            Ok(())
        }
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Divergence => 3,
    }
}

fn main() -> ExitCode {
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
            ExitCode::from(exit_code(e.category()))
        }
    }
}

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use compnet::autodiff::GradCheckOptions;
use compnet::data::{synth_multi, synth_single, write_dataset, DatasetInfo, Digits, Split, SynthConfig};
use compnet::experiment::{evaluate_run, train_run, ExperimentConfig};
use compnet::metrics::{guided_backprop, write_heatmap_png, EvalOptions, MetricKind};
use compnet::nn::{Checkpoint, Head, NetworkSpec};
use compnet::objective::{gradcheck_params, gradient_check_variant, two_object_scene, Variant};
use compnet::{Error, Tensor};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "compnet", version, about = "Compositional CNN training on masked digit scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradNet {
    Toy,
    Mnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Topk,
    Ap,
}

#[derive(Subcommand)]
enum Command {
    /// Generate `train/` and `test/` scene datasets from MNIST digits.
    Synth {
        #[arg(long, value_enum)]
        variant: SceneKind,
        /// Training scenes.
        #[arg(long)]
        n: usize,
        /// Test scenes (default: n / 5).
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Directory with the MNIST IDX files.
        #[arg(long, default_value = "data/mnist")]
        mnist: PathBuf,
        /// Generator settings as TOML (frame, scale range, clutter, k range, ...).
        #[arg(long)]
        synth_config: Option<PathBuf>,
    },
    /// Train as described by a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory and print the report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "topk")]
        metrics: Metric,
        /// Stratify by object area (thirds of the observed areas).
        #[arg(long)]
        stratify: bool,
        /// Compare in-context and out-of-context sets per class.
        #[arg(long)]
        context: bool,
        /// Guided-backprop localization accuracy.
        #[arg(long)]
        localization: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Guided-backprop heatmap of one class for one image.
    Backtrace {
        #[arg(long)]
        ckpt: PathBuf,
        /// Grayscale PNG matching the network input size.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every objective variant's gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value = "toy")]
        net: GradNet,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Coordinates checked per parameter tensor (default 200 for toy,
        /// 3 for mnist).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Raised when a check runs to completion but fails numerically.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<CheckFailed>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Numerical(_)));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            variant,
            n,
            n_test,
            seed,
            out,
            mnist,
            synth_config,
        } => {
            let cfg: SynthConfig = match synth_config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            let n_test = n_test.unwrap_or((n / 5).max(1));
            for (split, count) in [(Split::Train, n), (Split::Test, n_test)] {
                let digits = Digits::load_dir(&mnist, split)?;
                let samples = match variant {
                    SceneKind::Single => synth_single(&digits, count, seed, split, &cfg)?,
                    SceneKind::Multi => synth_multi(&digits, count, seed, split, &cfg)?,
                };
                let name = match variant {
                    SceneKind::Single => "mnist-single",
                    SceneKind::Multi => "mnist-multi",
                };
                let info = DatasetInfo {
                    name: name.into(),
                    variant: name.trim_start_matches("mnist-").into(),
                    split,
                    seed,
                    synth: Some(cfg.clone()),
                };
                let dir = out.join(split.name());
                write_dataset(&dir, &info, &samples)?;
                println!("wrote {count} {} scenes to {}", split.name(), dir.display());
            }
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let record = train_run(&cfg)?;
            match &record.best {
                Some(b) => println!(
                    "finished {} steps; best epoch {} with {:.4}; run record in {}",
                    record.steps,
                    b.epoch,
                    b.value,
                    cfg.out_dir.join("run.json").display()
                ),
                None => println!("finished {} steps", record.steps),
            }
        }
        Command::Eval {
            ckpt,
            data,
            metrics,
            stratify,
            context,
            localization,
            out,
        } => {
            let opts = EvalOptions {
                metric: match metrics {
                    Metric::Topk => MetricKind::Topk,
                    Metric::Ap => MetricKind::Ap,
                },
                stratify: stratify.then_some(None),
                context,
                context_seed: 0,
                localization,
                localization_limit: None,
            };
            let report = evaluate_run(&ckpt, &data, &opts)?;
            let json = report.to_json()?;
            if let Some(p) = out {
                std::fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{json}");
        }
        Command::Backtrace { ckpt, image, class, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let (w, h, px) = compnet::io::read_png_gray(&image)?;
            let [nh, nw, _] = ckpt.network.input_shape;
            if (h, w) != (nh, nw) {
                bail!(Error::InvalidArgument(format!("image is {w}x{h}, network expects {nw}x{nh}")));
            }
            let x = Tensor::new([h, w, 1], px.iter().map(|&b| b as f64 / 255.0).collect())?;
            let heat = guided_backprop(&ckpt.network, &ckpt.params, &x, class)?;
            write_heatmap_png(&out, &heat)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck {
            net,
            tol,
            eps,
            samples,
            seed,
        } => {
            let (base, default_samples) = match net {
                GradNet::Toy => (NetworkSpec::toy(Head::JointSoftmax), 200),
                GradNet::Mnist => (NetworkSpec::mnist(Head::JointSoftmax), 3),
            };
            let opts = GradCheckOptions {
                eps,
                tol,
                samples_per_param: samples.unwrap_or(default_samples),
                seed,
            };
            let scene = two_object_scene(&base, seed)?;
            let mut failed = Vec::new();
            for variant in Variant::ALL {
                let net = if variant.regularizes() {
                    base.clone().with_dropout_before_fc(0.5)?
                } else {
                    base.clone()
                };
                let params = gradcheck_params(&net, seed)?;
                let report = gradient_check_variant(&net, &params, &scene, variant, 0, &opts)?;
                println!(
                    "{:<18} max error {:.3e}  {}",
                    variant.name(),
                    report.max_error,
                    if report.passed { "ok" } else { "FAILED" }
                );
                if !report.passed {
                    println!("{report}");
                    failed.push(variant.name());
                }
            }
            if !failed.is_empty() {
                bail!(CheckFailed(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

//! Command-line front end: dataset synthesis, training, evaluation, loss and
//! gradient diagnostics, generation and SVG rendering.
//!
//! Every command accepts `--seed` and `--out`. Exit status is 0 on success,
//! 2 on usage errors and 1 on runtime errors; errors are also reported on
//! stderr as one JSON object. `IUCL_THREADS` caps the worker threads.

mod svg;

pub use svg::{category_color, render_svg};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use iucl_core::constraints::{
    sample_noise, sample_random_mask, AttributeConstraint, NoiseSpec, PartialLayout, RandomMask,
};
use iucl_core::diagnostics::gradcheck_losses;
use iucl_core::genmodel::{
    evaluate, forward, load_checkpoint, save_checkpoint, train, ModelConfig, PartialKind,
    Protocol, TrainConfig, DECODE_MIN_AREA,
};
use iucl_core::layout::{Layout, PredictionBatch, NUM_CATEGORIES};
use iucl_core::losses::{evaluate_losses, LossWeights};
use iucl_core::synthdata::{generate, load_grid, read_dataset, write_dataset, DatasetSpec};
use iucl_core::Error;

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status of a runtime failure.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status of a malformed command line.
pub const EXIT_USAGE: i32 = 2;

pub const THREADS_ENV: &str = "IUCL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "iucl", version, about = "Constraint-conditioned layout generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator; writes model.ckpt and history.json under --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, value_enum, default_value_t = Ablation::None)]
        ablate: Ablation,
        /// Train without the random mask on partial layouts.
        #[arg(long)]
        no_mask: bool,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under an attribute or a partial-layout protocol.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_attr, conflicts_with = "partial", required_unless_present = "partial")]
        attr: Option<AttributeConstraint>,
        /// Partial protocol; `random` (default) or `coords`.
        #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "random")]
        partial: Option<PartialArg>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the loss report of one prediction against a ground truth.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pl: Option<PathBuf>,
        /// Attribute for the attribute losses; defaults to the label of the ground truth.
        #[arg(long, value_parser = parse_attr)]
        attr: Option<AttributeConstraint>,
        /// Keep every constrained slot instead of sampling the random mask.
        #[arg(long)]
        no_mask: bool,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the max relative gradcheck error of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print empirical per-channel means of attribute noise.
    SampleNoise {
        #[arg(long, value_parser = parse_attr)]
        attr: AttributeConstraint,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a layout for a saliency map.
    Gen {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        saliency: PathBuf,
        #[arg(long, value_parser = parse_attr)]
        attr: AttributeConstraint,
        #[arg(long)]
        pl: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a layout as SVG.
    Render {
        #[arg(long)]
        layout: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Full objective.
    None,
    /// Drop the partial-layout loss (eta = 0).
    Lp,
    /// Drop both attribute losses (beta = gamma = 0).
    Attr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartialArg {
    Random,
    Coords,
}

fn parse_attr(s: &str) -> Result<AttributeConstraint, String> {
    AttributeConstraint::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = AttributeConstraint::ALL.iter().map(|a| a.name()).collect();
        format!("unknown attribute {s:?}; expected one of {}", names.join(", "))
    })
}

/// Prediction file: boxes plus either logits or probabilities per query.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFile {
    logits: Option<Vec<[f64; NUM_CATEGORIES]>>,
    probs: Option<Vec<[f64; NUM_CATEGORIES]>>,
    boxes: Vec<[f64; 4]>,
}

impl PredictionFile {
    fn into_batch(self) -> iucl_core::Result<PredictionBatch> {
        match (self.logits, self.probs) {
            (Some(l), None) => PredictionBatch::from_logits(l, self.boxes),
            (None, Some(p)) => PredictionBatch::new(p, self.boxes, None),
            _ => Err(Error::Parse("prediction needs exactly one of \"logits\" and \"probs\"".into())),
        }
    }
}

#[derive(Debug, Serialize)]
struct NoiseReport {
    attr: &'static str,
    n: usize,
    means: [f64; 4],
    target: [f64; 4],
}

#[derive(Debug, Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn report_error(kind: &str, message: String) {
    let json = serde_json::to_string(&ErrorReport { error: kind, message })
        .unwrap_or_else(|_| "{\"error\":\"Unknown\"}".into());
    eprintln!("{json}");
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            report_error("UsageError", e.render().to_string().trim().to_string());
            return EXIT_USAGE;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(msg) => {
            report_error("UsageError", msg);
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(e.kind(), e.to_string());
            EXIT_RUNTIME
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| e.to_string())
}

fn read_text(path: &Path) -> iucl_core::Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Prints `text` and, when requested, also writes it to `out`.
fn emit(text: &str, out: Option<&Path>) -> iucl_core::Result<()> {
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    Ok(())
}

fn execute(command: Command) -> iucl_core::Result<()> {
    match command {
        Command::Synth { n, common, out } => {
            let samples = generate(&DatasetSpec::new(n, common.seed))?;
            write_dataset(&samples, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train {
            data,
            epochs,
            ablate,
            no_mask,
            lr,
            batch_size,
            common,
            out,
        } => {
            let samples = read_dataset(&data)?;
            let mut weights = LossWeights::default();
            match ablate {
                Ablation::None => {}
                Ablation::Lp => weights.eta = 0.0,
                Ablation::Attr => {
                    weights.beta = 0.0;
                    weights.gamma = 0.0;
                }
            }
            let config = TrainConfig {
                epochs,
                batch_size,
                lr,
                weights,
                random_mask: !no_mask,
                seed: common.seed,
                ..TrainConfig::default()
            };
            let (params, history) = train(ModelConfig::default(), &samples, &config)?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&params, out.join("model.ckpt"))?;
            fs::write(out.join("history.json"), history.to_json())?;
            if let Some(last) = history.epochs.last() {
                println!("{}", last.to_json());
            }
        }
        Command::Eval {
            ckpt,
            data,
            attr,
            partial,
            common,
            out,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let samples = read_dataset(&data)?;
            let protocol = match (attr, partial) {
                (Some(a), _) => Protocol::Attribute(a),
                (None, Some(PartialArg::Coords)) => Protocol::Partial(PartialKind::CoordinatesOnly),
                (None, _) => Protocol::Partial(PartialKind::Random),
            };
            let report = evaluate(&params, &samples, protocol, common.seed)?;
            if let Some(path) = &out {
                fs::write(path, format!("{}\n", report.to_json()))?;
            }
            for (name, value) in report.table() {
                println!("{name:<6} {value}");
            }
        }
        Command::Loss {
            pred,
            gt,
            pl,
            attr,
            no_mask,
            common,
            out,
        } => {
            let pred_file: PredictionFile =
                serde_json::from_str(&read_text(&pred)?).map_err(|e| Error::Parse(e.to_string()))?;
            let pred = pred_file.into_batch()?;
            let gt = Layout::from_json(&read_text(&gt)?)?;
            let attr = attr.unwrap_or_else(|| AttributeConstraint::label_for(&gt));
            let partial = match pl {
                Some(path) => {
                    let pl = PartialLayout::from_json(&read_text(&path)?)?;
                    let mask = if no_mask || pl.constrained_slots() == 0 {
                        RandomMask::all_ones(pl.q_total())
                    } else {
                        sample_random_mask(&pl, common.seed)?
                    };
                    Some((pl, mask))
                }
                None => None,
            };
            let report = evaluate_losses(
                &pred,
                &gt,
                attr,
                partial.as_ref().map(|(p, m)| (p, m)),
                &LossWeights::default(),
            )?;
            emit(&report.to_json(), out.as_deref())?;
        }
        Command::Gradcheck { points, common, out } => {
            let results = gradcheck_losses(points, common.seed)?;
            let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Format(e.to_string()))?;
            emit(&json, out.as_deref())?;
            if let Some(bad) = results.iter().find(|r| r.max_rel_error >= 1e-4) {
                return Err(Error::Validation(format!(
                    "gradcheck of {} failed: max relative error {:e}",
                    bad.loss, bad.max_rel_error
                )));
            }
        }
        Command::SampleNoise { attr, n, common, out } => {
            if n == 0 {
                return Err(Error::Validation("--n must be positive".into()));
            }
            let field = sample_noise(&NoiseSpec::new(attr, 1, n), common.seed);
            let means = [0, 1, 2, 3].map(|c| field.channel(c).iter().sum::<f64>() / n as f64);
            let report = NoiseReport {
                attr: attr.name(),
                n,
                means,
                target: attr.mean(),
            };
            let json = serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?;
            emit(&json, out.as_deref())?;
        }
        Command::Gen {
            ckpt,
            saliency,
            attr,
            pl,
            common,
            out,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let saliency = load_grid(&saliency)?;
            let partial = match pl {
                Some(path) => Some(PartialLayout::from_json(&read_text(&path)?)?),
                None => None,
            };
            let g = params.config.grid;
            let noise = sample_noise(&NoiseSpec::new(attr, g, g), common.seed);
            let pred = forward(&params, &saliency, &noise, partial.as_ref())?;
            emit(&pred.decode(DECODE_MIN_AREA).to_json(), out.as_deref())?;
        }
        Command::Render { layout, common: _, out } => {
            let layout = Layout::from_json(&read_text(&layout)?)?;
            let doc = render_svg(&layout);
            match out {
                Some(path) => fs::write(path, doc)?,
                None => print!("{doc}"),
            }
        }
    }
    Ok(())
}

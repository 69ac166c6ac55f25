use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mttoken::checkpoint::Checkpoint;
use mttoken::config::TrainConfig;
use mttoken::data::{generate_synthetic, save_image, Dataset, ImageSource, SyntheticSpec};
use mttoken::gradcheck::{run_suite, suite_config};
use mttoken::metrics::{evaluate, EvalOptions, F1Average};
use mttoken::predlog::{self, PredictionRow};
use mttoken::smoothing::{smooth_stream, Align, FrameRecord};
use mttoken::train::{load_samples, train_loop};

const SEED_VAR: &str = "MTTOKEN_SEED";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mttoken", version, about = "Multi-task token transformer for facial affect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset manifest from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write PNG files into this directory and reference them instead of seeds.
        #[arg(long)]
        materialize: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint.
    Train {
        /// `key = value` config file; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config override, e.g. `--set train.steps=200`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Write the per-step loss trace here as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a checkpoint over a manifest and write a prediction log.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporally smooth a prediction log.
    Smooth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        window: usize,
        #[arg(long, value_enum, default_value_t = AlignArg::Centered)]
        align: AlignArg,
        #[arg(long, default_value_t = 1.0)]
        t_au: f64,
        #[arg(long, default_value_t = 5.0)]
        t_expr: f64,
    },
    /// Score a prediction log against a manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report destination; the text report always goes to stdout.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = AverageArg::Macro)]
        average: AverageArg,
        /// Temperatures for logs without probability columns.
        #[arg(long, default_value_t = 1.0)]
        t_au: f64,
        #[arg(long, default_value_t = 5.0)]
        t_expr: f64,
    },
    /// Compare backward against finite differences for every parameter.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Centered,
    Trailing,
}

#[derive(Clone, Copy, ValueEnum)]
enum AverageArg {
    Macro,
    Micro,
    Weighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { spec, out, materialize } => gen_data(&spec, &out, materialize.as_deref())?,
        Command::Train {
            config,
            data,
            out,
            overrides,
            trace,
        } => train(config.as_deref(), &data, &out, &overrides, trace.as_deref())?,
        Command::Predict { ckpt, data, out } => predict(&ckpt, &data, &out)?,
        Command::Smooth {
            input,
            out,
            window,
            align,
            t_au,
            t_expr,
        } => {
            let align = match align {
                AlignArg::Centered => Align::Centered,
                AlignArg::Trailing => Align::Trailing,
            };
            let rows = predlog::read(&input)?;
            let frames: Vec<FrameRecord> = rows.iter().map(FrameRecord::from).collect();
            let smoothed = smooth_stream(&frames, window, align, t_au, t_expr)?;
            let rows: Vec<PredictionRow> = smoothed.iter().map(PredictionRow::from).collect();
            predlog::write(&out, &rows)?;
            info!("smoothed {} frames with a {align} window of {window}", rows.len());
        }
        Command::Eval {
            pred,
            truth,
            report,
            threshold,
            average,
            t_au,
            t_expr,
        } => {
            let opts = EvalOptions {
                threshold,
                average: match average {
                    AverageArg::Macro => F1Average::Macro,
                    AverageArg::Micro => F1Average::Micro,
                    AverageArg::Weighted => F1Average::Weighted,
                },
                t_au,
                t_expr,
            };
            let rows = predlog::read(&pred)?;
            let truth = Dataset::read_manifest(&truth)?;
            let r = evaluate(&rows, &truth, &opts)?;
            print!("{}", r.to_text());
            fs::write(&report, r.to_json()?).with_context(|| format!("writing {}", report.display()))?;
        }
        Command::Gradcheck { scale: Scale::Desk, seed } => return gradcheck(seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(spec_path: &Path, out: &Path, materialize: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = SyntheticSpec::from_text(&text, &spec_path.display().to_string())?;
    let mut ds = generate_synthetic(&spec)?;
    if let Some(dir) = materialize {
        if !matches!(spec.image.2, 1 | 3) {
            bail!("only 1- or 3-channel images can be written as PNG");
        }
        fs::create_dir_all(dir)?;
        let manifest_dir = out.parent().unwrap_or(Path::new(""));
        for i in 0..ds.examples.len() {
            let img = ds.image(&ds.examples[i], spec.image)?;
            let ex = &mut ds.examples[i];
            let path = dir.join(format!("{}_{:06}.png", ex.video_id, ex.frame_index));
            save_image(&path, &img)?;
            let rel = path.strip_prefix(manifest_dir).map(Path::to_path_buf).unwrap_or(path);
            ex.image = ImageSource::File(rel);
        }
    }
    ds.write_manifest(out)?;
    info!("wrote {} examples to {}", ds.len(), out.display());
    Ok(())
}

/// Config file, then the seed environment variable, then `--set` flags.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text, &p.display().to_string())?
        }
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_VAR) {
        config.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_VAR} must be an unsigned integer, got {seed:?}"))?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        config.set(k.trim(), v.trim()).with_context(|| format!("override {o:?}"))?;
    }
    config.validate()?;
    Ok(config)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, overrides: &[String], trace: Option<&Path>) -> Result<()> {
    let config = load_config(config, overrides)?;
    let ds = Dataset::read_manifest(data)?;
    info!(
        "training on {} examples for {} steps (seed {})",
        ds.len(),
        config.steps,
        config.seed
    );
    let start = Instant::now();
    let outcome = train_loop(&config, &ds)?;
    info!("finished in {:.1}s", start.elapsed().as_secs_f64());
    if let Some(path) = trace {
        let mut s = String::from("step,loss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, predlog::format_float(*l)));
        }
        fs::write(path, s)?;
    }
    Checkpoint::new(config, outcome.model).save(out)?;
    Ok(())
}

fn predict(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = Dataset::read_manifest(data)?;
    let samples = load_samples(&ds, ck.model.config.encoder.input)?;
    let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
    let raw = ck.model.predict_many(&images)?;
    let rows: Vec<PredictionRow> = ds
        .examples
        .iter()
        .zip(raw)
        .map(|(ex, raw)| PredictionRow {
            video_id: ex.video_id.clone(),
            frame_index: ex.frame_index,
            raw,
            probs: None,
        })
        .collect();
    predlog::write(out, &rows)?;
    info!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(())
}

fn gradcheck(seed: u64) -> Result<ExitCode> {
    let config = suite_config();
    let start = Instant::now();
    let report = run_suite(&config, &TrainConfig::default().loss(), seed)?;
    for g in &report.groups {
        println!("{:<40} {:>6} {:.3e}", g.name, g.numel, g.max_relative_error);
    }
    println!(
        "max relative error {:.3e} over {} tensors in {:.2}s",
        report.worst(),
        report.groups.len(),
        start.elapsed().as_secs_f64()
    );
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check exceeded {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::FAILURE)
    }
}

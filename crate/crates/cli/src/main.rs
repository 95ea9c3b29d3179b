//! `adapart`: data generation, training, evaluation, gradient checks,
//! prediction and the comparison suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single line `error[<kind>]: <message>` on stderr.

mod annotate;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapart::experiment::{run_experiment, ExperimentReport, SuiteConfig};
use adapart::gradsuite;
use adapart::metrics::{evaluate, MetricsReport, PDJ_THRESHOLDS};
use adapart::model::{ModelState, Variant};
use adapart::plot::{line_chart, Series};
use adapart::synth::{generate, load_png, Dataset, DatasetMode, SynthConfig};
use adapart::train::train;
use adapart::{Error, Tensor};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{ConfigFile, Overrides, RunConfig, EFFECTIVE_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "adapart", version, about = "Adaptive part localization for attribute recognition")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mpii")]
        mode: DatasetMode,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train one model; flags override the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training set directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluated after training when given.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also moves the decay point to the midpoint unless the file sets it.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
    },
    /// Finite-difference gradient checks in 64-bit.
    GradCheck {
        /// Run a single check.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Predict keypoints, part boxes and attributes for one PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON array of normalized [x, y] pairs; required by the oracle variant.
        #[arg(long)]
        keypoints: Option<PathBuf>,
    },
    /// Train and compare every variant and ablation over several seeds.
    Experiment {
        /// TOML suite description; the built-in desk suite when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} gradient checks failed")]
    GradCheck { failed: usize, total: usize },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::GradCheck { .. } => "grad_check",
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(io_err(path))?;
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    let groups: Vec<String> = m.groups.iter().map(|g| format!("{} {:.4}", g.name, g.accuracy)).collect();
    println!("accuracy {:.4} ({})", m.mean_accuracy, groups.join(", "));
    if let Some(ap) = m.mean_ap {
        println!("mean AP {ap:.4}");
    }
    if let Some(p) = &m.pdj {
        println!("PDJ@0.2 {:.4}", p.at(0.2).unwrap_or(f64::NAN));
    }
    if let Some(e) = &m.elongation {
        println!("box elongation p95 {:.3}", e.p95);
    }
}

fn write_eval_outputs(dir: &Path, m: &MetricsReport) -> CliResult<()> {
    write_json(&dir.join("metrics.json"), m)?;
    if let Some(p) = &m.pdj {
        let mut series = vec![Series { label: "mean".into(), points: PDJ_THRESHOLDS.iter().copied().zip(p.mean.iter().copied()).collect() }];
        series.extend(p.per_keypoint.iter().enumerate().map(|(k, c)| Series {
            label: format!("kp{k}"),
            points: PDJ_THRESHOLDS.iter().copied().zip(c.iter().copied()).collect(),
        }));
        line_chart(&dir.join("pdj.svg"), "PDJ", "threshold (fraction of torso)", "detected", &series, Some((0.0, 1.0)))?;
    }
    Ok(())
}

fn gen_data(seed: u64, count: usize, out: &Path, mode: DatasetMode, image_size: usize) -> CliResult<()> {
    let config = SynthConfig { image_size, ..SynthConfig::new(mode) };
    let manifest = generate(seed, count, &config, out)?;
    let hist: Vec<String> = manifest.group_names.iter().zip(&manifest.class_histogram).map(|(g, h)| format!("{g} {h:?}")).collect();
    println!("wrote {} samples to {} ({})", manifest.count, out.display(), hist.join(", "));
    Ok(())
}

fn train_cmd(file: Option<&Path>, flags: Overrides) -> CliResult<()> {
    let file = file.map(ConfigFile::load).transpose()?.unwrap_or_default();
    let mut loaded = None;
    let config = RunConfig::resolve(&file, &flags, |data| {
        let d = Dataset::load(data)?;
        let mode = d.mode();
        loaded = Some(d);
        Ok(mode)
    })?;
    let data = loaded.expect("dataset loaded while resolving");
    create_dir(&config.out)?;
    let effective = config.out.join(EFFECTIVE_CONFIG);
    fs::write(&effective, config.to_toml()?).map_err(io_err(&effective))?;
    let outcome = train::<f32>(&config.train_config(), &data, Some(&config.out))?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} for {} iterations; final loss {last:.5}; model {}",
        config.model.variant.name(),
        outcome.log.len(),
        outcome.checkpoint.as_deref().unwrap_or(Path::new("-")).display()
    );
    if let Some(test) = &config.test_data {
        let test = Dataset::load(test)?;
        let m = evaluate(&outcome.model, &test, 100)?;
        write_eval_outputs(&config.out, &m)?;
        print_metrics(&m);
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path, out: &Path, batch_size: usize) -> CliResult<()> {
    let model = ModelState::<f32>::load(checkpoint)?;
    let data = Dataset::load(data)?;
    adapart::train::check_compatible(&model.config, &data)?;
    let m = evaluate(&model, &data, batch_size.max(1))?;
    create_dir(out)?;
    write_eval_outputs(out, &m)?;
    print_metrics(&m);
    Ok(())
}

fn grad_check(op: Option<&str>, seeds: usize) -> CliResult<()> {
    let summaries = match op {
        Some(name) => vec![gradsuite::run_check(&gradsuite::find(name)?, seeds)?],
        None => gradsuite::run_all(seeds)?,
    };
    print!("{}", gradsuite::format_table(&summaries));
    let failed = summaries.iter().filter(|s| !s.passed).count();
    if failed > 0 {
        return Err(CliError::GradCheck { failed, total: summaries.len() });
    }
    Ok(())
}

fn predict_cmd(checkpoint: &Path, image: &Path, out: &Path, keypoints: Option<&Path>) -> CliResult<()> {
    let model = ModelState::<f32>::load(checkpoint)?;
    let cfg = &model.config;
    let img = load_png(image)?;
    let (h, w) = (img.dim(1), img.dim(2));
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Input(format!("{} is {w}x{h}; the model expects {s}x{s}", image.display(), s = cfg.image_size)).into());
    }
    let kp = match keypoints {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let pts: Vec<[f64; 2]> = serde_json::from_str(&text).map_err(Error::from)?;
            if pts.len() != cfg.num_keypoints {
                return Err(Error::Input(format!("{} has {} keypoints, expected {}", path.display(), pts.len(), cfg.num_keypoints)).into());
            }
            Some(Tensor::<f32>::from_f64(&[1, 2 * pts.len()], &pts.concat())?)
        }
        None => None,
    };
    let batch = img.clone().reshape(&[1, 3, h, w])?;
    let pred = model.predict(&batch, kp.as_ref())?;
    let names: Vec<String> = cfg.parts.iter().map(|p| p.name.clone()).collect();
    let sample = pred.sample(0, cfg.variant, &names);
    create_dir(out)?;
    write_json(&out.join("prediction.json"), &sample)?;
    let mut canvas = annotate::upscale(img.data(), h, w, 4);
    for (t, part) in sample.parts.iter().enumerate() {
        if let Some(b) = &part.bbox {
            annotate::draw_box(&mut canvas, b, annotate::PART_COLORS[t % annotate::PART_COLORS.len()], 2);
        }
    }
    for p in sample.keypoints.iter().flatten() {
        annotate::draw_keypoint(&mut canvas, *p);
    }
    let png = out.join("annotated.png");
    canvas.save(&png).map_err(Error::from)?;
    for p in &sample.parts {
        println!("{}: class {} (p={:.3})", p.part, p.label, p.probabilities[p.label]);
    }
    Ok(())
}

fn experiment_cmd(suite: Option<&Path>, out: &Path, jobs: usize) -> CliResult<()> {
    let suite: SuiteConfig = match suite {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?
        }
        None => SuiteConfig::default(),
    };
    suite.validate()?;
    create_dir(out)?;
    let effective = out.join("suite.toml");
    let text = toml::to_string(&suite).map_err(|e| Error::config(e.to_string()))?;
    fs::write(&effective, text).map_err(io_err(&effective))?;
    let report = run_experiment(&suite, out, jobs)?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    println!("{:<18} {:>17} {:>17} {:>11}", "label", "accuracy", "PDJ@0.2", "elong p95");
    let cell = |s: Option<adapart::experiment::Stat>| s.map_or("-".to_string(), |s| format!("{:.4}±{:.4}", s.mean, s.std));
    for r in &report.summary {
        println!(
            "{:<18} {:>17} {:>17} {:>11}",
            r.label,
            cell(Some(r.mean_accuracy)),
            cell(r.pdj_at_0_2),
            r.elongation_p95.map_or("-".to_string(), |s| format!("{:.3}", s.mean))
        );
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { seed, count, out, mode, image_size } => gen_data(seed, count, &out, mode, image_size),
        Command::Train { config, variant, seed, data, test_data, out, iterations, lr, batch_size, checkpoint_every } => train_cmd(
            config.as_deref(),
            Overrides { variant, seed, data, test_data, out, iterations, base_lr: lr, batch_size, checkpoint_every },
        ),
        Command::Eval { checkpoint, data, out, batch_size } => eval_cmd(&checkpoint, &data, &out, batch_size),
        Command::GradCheck { op, seeds } => grad_check(op.as_deref(), seeds),
        Command::Predict { checkpoint, image, out, keypoints } => predict_cmd(&checkpoint, &image, &out, keypoints.as_deref()),
        Command::Experiment { suite, out, jobs } => experiment_cmd(suite.as_deref(), &out, jobs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}

//! Multi-seed comparison of all variants plus the part-box ablations.
//!
//! Output layout under the chosen directory:
//!
//! ```text
//! data/train/            generated training set (reused when it matches)
//! data/test/             generated test set
//! runs/<label>_seed<k>/  model, loss log and metrics of one run
//! report.json            every run plus mean/std summaries
//! summary.csv            one row per label
//! pdj.svg, loss.svg      seed-averaged curves
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, LossPoint, MetricsReport, PDJ_THRESHOLDS};
use crate::model::{ModelConfig, Variant};
use crate::plot::{line_chart, Series};
use crate::synth::{generate, manifest_path, Dataset, DatasetMode, SynthConfig};
use crate::train::{train, LogRow, OptimizerConfig, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PDJ_PLOT: &str = "pdj.svg";
pub const LOSS_PLOT: &str = "loss.svg";
/// Loss traces keep every `LOSS_TRACE_STRIDE`-th iteration plus the last.
pub const LOSS_TRACE_STRIDE: usize = 20;

pub const ABLATION_NONE: &str = "ablation_none";
pub const ABLATION_ADAPTIVE: &str = "ablation_adaptive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub mode: DatasetMode,
    pub train_count: usize,
    pub test_count: usize,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
    /// One run per seed for every label.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Adds the adaptive-off and ratio-off runs of the full pipeline.
    pub ablations: bool,
    pub optimizer: OptimizerConfig,
    pub extractor_channels: Vec<usize>,
    pub dropout: f64,
    pub eval_batch: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Mpii,
            train_count: 2000,
            test_count: 500,
            train_data_seed: 1,
            test_data_seed: 2,
            seeds: (0..5).collect(),
            variants: Variant::ALL.to_vec(),
            ablations: true,
            optimizer: OptimizerConfig {
                base_lr: 0.01,
                iterations: 2000,
                decay_iteration: 1000,
                ..OptimizerConfig::default()
            },
            extractor_channels: vec![8, 16, 32],
            dropout: 0.0,
            eval_batch: 100,
        }
    }
}

/// One training run of a suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct RunSpec {
    pub label: String,
    pub variant: Variant,
    pub adaptive_enabled: bool,
    pub ratio_loss_enabled: bool,
    pub seed: u64,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("{}_seed{}", self.label, self.seed)
    }
}

impl SuiteConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.optimizer.violations();
        if self.train_count == 0 || self.test_count == 0 {
            v.push("train_count and test_count must be positive".into());
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        if self.variants.is_empty() && !self.ablations {
            v.push("the suite has no runs".into());
        }
        if self.eval_batch == 0 {
            v.push("eval_batch must be positive".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            v.push("seeds must be distinct".into());
        }
        v.extend(self.model_config(Variant::Ours, true, true).violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn model_config(&self, variant: Variant, adaptive: bool, ratio: bool) -> ModelConfig {
        let mut m = match self.mode {
            DatasetMode::Mpii => ModelConfig::human(variant),
            DatasetMode::Garment => ModelConfig::garment(variant),
        };
        m.extractor_channels = self.extractor_channels.clone();
        m.dropout = self.dropout;
        m.adaptive_enabled = adaptive;
        m.ratio_loss_enabled = ratio;
        m
    }

    /// Labels in report order with their (variant, adaptive, ratio) settings.
    pub fn labels(&self) -> Vec<(String, Variant, bool, bool)> {
        let mut out: Vec<_> = self.variants.iter().map(|&v| (v.name().to_string(), v, true, true)).collect();
        if self.ablations {
            out.push((ABLATION_NONE.into(), Variant::Ours, false, false));
            out.push((ABLATION_ADAPTIVE.into(), Variant::Ours, true, false));
        }
        out
    }

    pub fn runs(&self) -> Vec<RunSpec> {
        self.labels()
            .into_iter()
            .flat_map(|(label, variant, adaptive, ratio)| {
                self.seeds.iter().map(move |&seed| RunSpec {
                    label: label.clone(),
                    variant,
                    adaptive_enabled: adaptive,
                    ratio_loss_enabled: ratio,
                    seed,
                })
            })
            .collect()
    }

    pub fn train_config(&self, run: &RunSpec) -> TrainConfig {
        TrainConfig {
            model: self.model_config(run.variant, run.adaptive_enabled, run.ratio_loss_enabled),
            optimizer: self.optimizer.clone(),
            seed: run.seed,
            checkpoint_every: 0,
        }
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig::new(self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunResult {
    pub spec: RunSpec,
    pub metrics: MetricsReport,
    pub train_seconds: f64,
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct NamedStat {
    pub name: String,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SummaryRow {
    pub label: String,
    pub variant: Variant,
    pub adaptive_enabled: bool,
    pub ratio_loss_enabled: bool,
    pub runs: usize,
    pub mean_accuracy: Stat,
    pub group_accuracy: Vec<NamedStat>,
    pub mean_ap: Option<Stat>,
    /// Mean PDJ over keypoints at torso fraction 0.2.
    pub pdj_at_0_2: Option<Stat>,
    /// Seed-averaged mean PDJ curve over `PDJ_THRESHOLDS`.
    pub pdj_curve: Option<Vec<f64>>,
    pub elongation_p95: Option<Stat>,
    pub train_seconds: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub suite: SuiteConfig,
    pub notes: Vec<String>,
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.label == label)
    }

    pub fn runs_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.spec.label == label)
    }

    /// Ablation rows as (adaptive, ratio, label), in increasing capability.
    pub fn ablation_table(&self) -> Vec<(bool, bool, &SummaryRow)> {
        [ABLATION_NONE, ABLATION_ADAPTIVE, Variant::Ours.name()]
            .iter()
            .filter_map(|l| self.row(l))
            .map(|r| (r.adaptive_enabled, r.ratio_loss_enabled, r))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let report: Self = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "{} has schema version {}, expected {REPORT_SCHEMA_VERSION}",
                path.display(),
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(Error::io(path))
    }
}

/// Keeps every `stride`-th entry plus the final one.
pub fn loss_trace(log: &[LogRow], stride: usize) -> Vec<LossPoint> {
    let stride = stride.max(1);
    let last = log.len().saturating_sub(1);
    log.iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == last)
        .map(|(_, r)| LossPoint { iteration: r.iteration, total: r.total })
        .collect()
}

/// Loads the dataset at `dir` when it was generated with exactly these
/// settings, otherwise (re)generates it.
pub fn prepare_dataset(dir: &Path, seed: u64, count: usize, config: &SynthConfig) -> Result<Dataset> {
    if manifest_path(dir).exists() {
        let data = Dataset::load(dir)?;
        let m = &data.manifest;
        if m.generator_seed == seed && m.count == count && &m.config == config {
            return Ok(data);
        }
        log::info!("{} was generated with other settings; regenerating", dir.display());
        fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    generate(seed, count, config, dir)?;
    Dataset::load(dir)
}

pub fn summarize(suite: &SuiteConfig, runs: &[RunResult]) -> Vec<SummaryRow> {
    suite
        .labels()
        .into_iter()
        .filter_map(|(label, variant, adaptive, ratio)| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.spec.label == label).collect();
            let first = rs.first()?;
            let collect = |f: &dyn Fn(&RunResult) -> Option<f64>| -> Option<Stat> {
                let v: Option<Vec<f64>> = rs.iter().map(|r| f(r)).collect();
                v.and_then(|v| Stat::of(&v))
            };
            let group_accuracy = first
                .metrics
                .groups
                .iter()
                .enumerate()
                .map(|(g, group)| NamedStat {
                    name: group.name.clone(),
                    stat: collect(&|r| r.metrics.groups.get(g).map(|x| x.accuracy)).expect("runs share groups"),
                })
                .collect();
            let pdj_curve = rs
                .iter()
                .map(|r| r.metrics.pdj.as_ref().map(|p| p.mean.clone()))
                .collect::<Option<Vec<_>>>()
                .map(|curves| {
                    (0..PDJ_THRESHOLDS.len())
                        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
                        .collect()
                });
            Some(SummaryRow {
                label,
                variant,
                adaptive_enabled: adaptive,
                ratio_loss_enabled: ratio,
                runs: rs.len(),
                mean_accuracy: collect(&|r| Some(r.metrics.mean_accuracy))?,
                group_accuracy,
                mean_ap: collect(&|r| r.metrics.mean_ap),
                pdj_at_0_2: collect(&|r| r.metrics.pdj.as_ref().and_then(|p| p.at(0.2))),
                pdj_curve,
                elongation_p95: collect(&|r| r.metrics.elongation.as_ref().map(|e| e.p95)),
                train_seconds: collect(&|r| Some(r.train_seconds))?,
            })
        })
        .collect()
}

fn stat_cells(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [format!("{:.6}", s.mean), format!("{:.6}", s.std)],
        None => [String::new(), String::new()],
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let groups: Vec<String> = rows.first().map(|r| r.group_accuracy.iter().map(|g| g.name.clone()).collect()).unwrap_or_default();
    let mut header: Vec<String> = ["label", "variant", "adaptive", "ratio_loss", "runs", "accuracy_mean", "accuracy_std"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for g in &groups {
        header.push(format!("acc_{g}_mean"));
        header.push(format!("acc_{g}_std"));
    }
    for m in ["ap", "pdj_0.2", "elongation_p95", "train_seconds"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.label.clone(),
            r.variant.name().to_string(),
            r.adaptive_enabled.to_string(),
            r.ratio_loss_enabled.to_string(),
            r.runs.to_string(),
        ];
        rec.extend(stat_cells(Some(r.mean_accuracy)));
        for g in &r.group_accuracy {
            rec.extend(stat_cells(Some(g.stat)));
        }
        for s in [r.mean_ap, r.pdj_at_0_2, r.elongation_p95, Some(r.train_seconds)] {
            rec.extend(stat_cells(s));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Seed-averaged mean PDJ curves and loss traces.
pub fn write_plots(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let pdj: Vec<Series> = report
        .summary
        .iter()
        .filter_map(|r| {
            let c = r.pdj_curve.as_ref()?;
            Some(Series { label: r.label.clone(), points: PDJ_THRESHOLDS.iter().copied().zip(c.iter().copied()).collect() })
        })
        .collect();
    line_chart(&dir.join(PDJ_PLOT), "Mean PDJ", "threshold (fraction of torso)", "detected", &pdj, Some((0.0, 1.0)))?;

    let loss: Vec<Series> = report
        .summary
        .iter()
        .filter_map(|row| {
            let traces: Vec<&Vec<LossPoint>> = report.runs_for(&row.label).map(|r| &r.metrics.loss_trace).collect();
            let len = traces.iter().map(|t| t.len()).min()?;
            let points = (0..len)
                .map(|i| {
                    let mean = traces.iter().map(|t| t[i].total).sum::<f64>() / traces.len() as f64;
                    (traces[0][i].iteration as f64, mean)
                })
                .collect();
            Some(Series { label: row.label.clone(), points })
        })
        .collect();
    let top = loss.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    line_chart(&dir.join(LOSS_PLOT), "Training loss", "iteration", "total loss", &loss, Some((0.0, top.max(1e-6))))
}

fn run_one(suite: &SuiteConfig, spec: &RunSpec, train_data: &Dataset, test: &Dataset, dir: &Path) -> Result<RunResult> {
    let config = suite.train_config(spec);
    let start = Instant::now();
    let outcome = train::<f32>(&config, train_data, Some(dir))?;
    let train_seconds = start.elapsed().as_secs_f64();
    let mut metrics = evaluate(&outcome.model, test, suite.eval_batch)?;
    metrics.loss_trace = loss_trace(&outcome.log, LOSS_TRACE_STRIDE);
    let path = dir.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&metrics)?).map_err(Error::io(&path))?;
    log::info!("{}: accuracy {:.4} ({:.0}s)", spec.dir_name(), metrics.mean_accuracy, train_seconds);
    Ok(RunResult { spec: spec.clone(), metrics, train_seconds })
}

/// Trains and evaluates every run of `suite` with at most `jobs` runs at a
/// time. Results are ordered as [`SuiteConfig::runs`] regardless of `jobs`.
pub fn run_experiment(suite: &SuiteConfig, out: &Path, jobs: usize) -> Result<ExperimentReport> {
    suite.validate()?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let data_dir = out.join("data");
    let train_data = prepare_dataset(&data_dir.join("train"), suite.train_data_seed, suite.train_count, &suite.synth_config())?;
    let test = prepare_dataset(&data_dir.join("test"), suite.test_data_seed, suite.test_count, &suite.synth_config())?;
    let specs = suite.runs();
    let run_dirs: Vec<PathBuf> = specs.iter().map(|s| out.join("runs").join(s.dir_name())).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))?;
    let runs: Vec<RunResult> = pool.install(|| {
        specs.par_iter().zip(&run_dirs).map(|(s, d)| run_one(suite, s, &train_data, &test, d)).collect::<Result<_>>()
    })?;
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        suite: suite.clone(),
        notes: vec!["all variants share one optimizer schedule; no per-variant tuning".into()],
        summary: summarize(suite, &runs),
        runs,
    };
    report.save(&out.join(REPORT_FILE))?;
    write_summary_csv(&out.join(SUMMARY_FILE), &report.summary)?;
    write_plots(out, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        // sum of squared deviations 5, over n-1 = 3
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn run_matrix_covers_variants_and_ablations() {
        let suite = SuiteConfig { seeds: vec![0, 1, 2], ..SuiteConfig::default() };
        let runs = suite.runs();
        assert_eq!(runs.len(), 7 * 3);
        let flags: Vec<(bool, bool)> = suite
            .labels()
            .iter()
            .filter(|l| l.1 == Variant::Ours)
            .map(|l| (l.2, l.3))
            .collect();
        assert!(flags.contains(&(false, false)));
        assert!(flags.contains(&(true, false)));
        assert!(flags.contains(&(true, true)));
        let five = SuiteConfig { seeds: vec![0, 1, 2], ablations: false, ..SuiteConfig::default() };
        assert_eq!(five.runs().len(), 15);
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let suite = SuiteConfig { seeds: vec![1, 1], ..SuiteConfig::default() };
        assert!(suite.violations().iter().any(|v| v.contains("distinct")));
    }

    #[test]
    fn trace_keeps_last_row() {
        let row = |i| LogRow {
            iteration: i,
            phase: crate::model::Phase::Joint,
            total: i as f64,
            keypoint: None,
            classification: vec![],
            ratio: vec![],
            lr: 0.1,
        };
        let log: Vec<LogRow> = (0..45).map(row).collect();
        let t: Vec<usize> = loss_trace(&log, 20).iter().map(|p| p.iteration).collect();
        assert_eq!(t, vec![0, 20, 40, 44]);
    }
}

//! Config-driven experiments with deterministic summaries.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayesopt::{run_bo, Benchmark, BenchmarkKind, BoConfig, Rotation};
use crate::data::{load_csv, make_splits, synth_generate, time_cutoff_split, Dataset, SplitSpec, SynthKind};
use crate::error::{invalid, NknError, Result};
use crate::gp::{GpModel, Posterior, DEFAULT_NOISE_VARIANCE};
use crate::nkn::{NetworkSpec, ParameterStore, Preset};
use crate::points::Points;
use crate::primitives::softplus_inv;
use crate::structured::{
    center_hole, read_pgm, synthetic_texture, texture_extrapolate, write_pgm, AxisKernel, GrayImage, TextureConfig,
};
use crate::train::{fit, TrainConfig};

pub const EXPERIMENT_SCHEMA: &str = "nkn-exp/1";
pub const SUMMARY_SCHEMA: &str = "nkn-summary/1";

fn exp_schema() -> String {
    EXPERIMENT_SCHEMA.to_string()
}

fn default_models() -> Vec<ModelChoice> {
    vec![ModelChoice::Preset("default6".into())]
}

/// A preset name (`"default6"`, `"rbf"`, `"sm4"`, `"oracle"`, or an axis
/// kernel for texture tasks) or an explicit network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Spec { name: String, spec: NetworkSpec },
}

impl ModelChoice {
    pub fn name(&self) -> &str {
        match self {
            Self::Preset(p) => p,
            Self::Spec { name, .. } => name,
        }
    }

    /// GP on raw data with a fresh preset initialization or the spec's init values.
    pub fn build(&self, x: &Points, y: &[f64], seed: u64, shared_lengthscale: bool) -> Result<GpModel> {
        match self {
            Self::Preset(p) => GpModel::from_preset(&p.parse::<Preset>()?, x, y, seed, shared_lengthscale),
            Self::Spec { spec, .. } => {
                let store = ParameterStore::from_spec(spec, softplus_inv(DEFAULT_NOISE_VARIANCE))?;
                GpModel::new(spec.clone(), store, x, y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Path { path: PathBuf },
    Synthetic { synthetic: SynthKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub rows: usize,
    pub cols: usize,
    pub noise: f64,
    /// Side lengths of the centered held-out rectangle.
    pub hole: (usize, usize),
}

fn two_thirds() -> f64 {
    2.0 / 3.0
}

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Train/test splits of a tabular dataset.
    Regression {
        dataset: DataSource,
        #[serde(default)]
        split: SplitSpec,
    },
    /// Train on the leading `train_frac` of an ordered series (or on a
    /// synthetic sample) and predict the rest.
    Extrapolation {
        dataset: DataSource,
        #[serde(default = "two_thirds")]
        train_frac: f64,
        #[serde(default = "one")]
        repeats: usize,
    },
    Bo {
        benchmark: BenchmarkKind,
        #[serde(default = "ten")]
        d: usize,
        #[serde(default = "five")]
        repeats: usize,
        #[serde(default)]
        bo: BoConfig,
    },
    /// Model names are axis kernels (`per`, `rbf`, `nkn`).
    Texture {
        #[serde(default)]
        image: Option<PathBuf>,
        /// PGM whose nonzero pixels are held out.
        #[serde(default)]
        mask: Option<PathBuf>,
        #[serde(default)]
        synthetic: Option<SyntheticImage>,
        #[serde(default)]
        texture: TextureConfig,
    },
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Regression { .. } => "regression",
            Self::Extrapolation { .. } => "extrapolation",
            Self::Bo { .. } => "bo",
            Self::Texture { .. } => "texture",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "exp_schema")]
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelChoice>,
    #[serde(default)]
    pub shared_lengthscale: bool,
    #[serde(default)]
    pub train: TrainConfig,
    pub task: Task,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(invalid(format!("config schema {:?}, expected {EXPERIMENT_SCHEMA:?}", self.schema)));
        }
        if self.models.is_empty() {
            return Err(invalid("config lists no models"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("experiment name must be non-empty and contain no path separators"));
        }
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> Stat {
    let n = v.len() as f64;
    if v.is_empty() {
        return Stat { mean: f64::NAN, std: f64::NAN };
    }
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Stat { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub repeats: Vec<RepeatSummary>,
    /// Mean and standard deviation of each metric over successful repeats.
    pub metrics: BTreeMap<String, Stat>,
    pub failed: usize,
}

impl ModelSummary {
    fn from_repeats(model: String, repeats: Vec<RepeatSummary>) -> Self {
        let mut keys: Vec<&String> = repeats.iter().flat_map(|r| r.metrics.keys()).collect();
        keys.sort();
        keys.dedup();
        let metrics = keys
            .into_iter()
            .map(|k| {
                let vals: Vec<f64> =
                    repeats.iter().filter(|r| r.error.is_none()).filter_map(|r| r.metrics.get(k).copied()).collect();
                (k.clone(), mean_std(&vals))
            })
            .collect();
        let failed = repeats.iter().filter(|r| r.error.is_some()).count();
        Self { model, repeats, metrics, failed }
    }

    pub fn metric(&self, key: &str) -> Option<&Stat> {
        self.metrics.get(key)
    }
}

/// Machine-readable result of an experiment. Contains no timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub git_describe: String,
    pub config_hash: String,
    pub models: Vec<ModelSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl Summary {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == name)
    }
}

/// `git describe --always --dirty`, or `"unknown"` outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// `root/<name>/<UTC timestamp>`.
pub fn results_dir(root: &Path, name: &str) -> PathBuf {
    let ts = humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string().replace(':', "");
    root.join(name).join(ts)
}

fn load(src: &DataSource) -> Result<(Dataset, Option<Dataset>)> {
    match src {
        DataSource::Path { path } => Ok((load_csv(path)?, None)),
        DataSource::Synthetic { synthetic } => {
            let s = synth_generate(*synthetic, 0)?;
            Ok((s.train, Some(s.truth)))
        }
    }
}

/// Runs `cfg`, writing `config.json`, `summary.json`, `timing.json` and CSVs into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut timing: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut extra = None;
    let models = match &cfg.task {
        Task::Regression { dataset, split } => regression(cfg, dataset, split, dir, &mut timing)?,
        Task::Extrapolation { dataset, train_frac, repeats } => {
            extrapolation(cfg, dataset, *train_frac, *repeats, dir, &mut timing)?
        }
        Task::Bo { benchmark, d, repeats, bo } => {
            let bench = Benchmark::new(*benchmark, *d, cfg.seed)?;
            if let Some(r) = &bench.rotation {
                extra = Some(serde_json::json!({ "rotation": r }));
            }
            bayesopt(cfg, &bench, *repeats, bo, dir, &mut timing)?
        }
        Task::Texture { image, mask, synthetic, texture } => {
            texture_task(cfg, image.as_deref(), mask.as_deref(), synthetic.as_ref(), texture, dir, &mut timing)?
        }
    };
    if models.iter().all(|m| m.failed == m.repeats.len()) {
        let first = models
            .iter()
            .flat_map(|m| m.repeats.iter())
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(NknError::Numeric(format!("every repeat failed; first error: {first}")));
    }
    let summary = Summary {
        schema: SUMMARY_SCHEMA.into(),
        name: cfg.name.clone(),
        kind: cfg.task.kind().into(),
        seed: cfg.seed,
        git_describe: git_describe(),
        config_hash: cfg.hash()?,
        models,
        extra,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    Ok(summary)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?)))
}

fn csv_err(e: csv::Error) -> NknError {
    NknError::Parse(e.to_string())
}

fn regression(
    cfg: &ExperimentConfig,
    src: &DataSource,
    split: &SplitSpec,
    dir: &Path,
    timing: &mut BTreeMap<String, Vec<f64>>,
) -> Result<Vec<ModelSummary>> {
    let (ds, _) = load(src)?;
    let splits = make_splits(&ds, split, cfg.seed)?;
    let mut rows = csv_writer(&dir.join("splits.csv"))?;
    rows.write_record(["model", "repeat", "rmse", "mll", "final_lml"]).map_err(csv_err)?;
    let mut out = Vec::new();
    for choice in &cfg.models {
        let mut reps = Vec::new();
        for (r, sp) in splits.iter().enumerate() {
            let seed = cfg.seed + r as u64;
            let (tr, te) = (ds.subset(&sp.train), ds.subset(&sp.test));
            let start = Instant::now();
            let res = (|| -> Result<BTreeMap<String, f64>> {
                let mut m = choice.build(&tr.x, &tr.y, seed, cfg.shared_lengthscale)?;
                let report = fit(&mut m, &TrainConfig { seed, ..cfg.train.clone() })?;
                report.write_trace_csv(fs::File::create(dir.join(format!("trace_{}_r{r}.csv", choice.name())))?)?;
                let post = m.predict(&te.x)?;
                Ok(BTreeMap::from([
                    ("rmse".into(), post.rmse(&te.y)),
                    ("mll".into(), post.mean_log_likelihood(&te.y)),
                    ("final_lml".into(), report.final_lml),
                ]))
            })();
            timing.entry(choice.name().into()).or_default().push(start.elapsed().as_secs_f64());
            let rep = repeat_summary(r, seed, res);
            let g = |k: &str| rep.metrics.get(k).map(|v| format!("{v:?}")).unwrap_or_default();
            rows.write_record([choice.name().to_string(), r.to_string(), g("rmse"), g("mll"), g("final_lml")])
                .map_err(csv_err)?;
            reps.push(rep);
        }
        out.push(ModelSummary::from_repeats(choice.name().into(), reps));
    }
    rows.flush()?;
    Ok(out)
}

fn repeat_summary(repeat: usize, seed: u64, res: Result<BTreeMap<String, f64>>) -> RepeatSummary {
    match res {
        Ok(metrics) => RepeatSummary { repeat, seed, metrics, error: None },
        Err(e) => RepeatSummary { repeat, seed, metrics: BTreeMap::new(), error: Some(e.to_string()) },
    }
}

fn extrapolation(
    cfg: &ExperimentConfig,
    src: &DataSource,
    train_frac: f64,
    repeats: usize,
    dir: &Path,
    timing: &mut BTreeMap<String, Vec<f64>>,
) -> Result<Vec<ModelSummary>> {
    let (ds, truth) = load(src)?;
    // Rows of the curve: training points flagged 1, evaluation points flagged 0.
    let (train, test) = match truth {
        Some(t) => (ds, t),
        None => {
            let sp = time_cutoff_split(ds.len(), train_frac)?;
            (ds.subset(&sp.train), ds.subset(&sp.test))
        }
    };
    let mut out = Vec::new();
    for choice in &cfg.models {
        let mut reps = Vec::new();
        for r in 0..repeats.max(1) {
            let seed = cfg.seed + r as u64;
            let start = Instant::now();
            let res = (|| -> Result<BTreeMap<String, f64>> {
                let mut m = choice.build(&train.x, &train.y, seed, cfg.shared_lengthscale)?;
                let report = fit(&mut m, &TrainConfig { seed, ..cfg.train.clone() })?;
                report.write_trace_csv(fs::File::create(dir.join(format!("trace_{}_s{seed}.csv", choice.name())))?)?;
                let fp = m.fit_posterior()?;
                let post_tr = m.predict_with(&fp, &train.x)?;
                let post_te = m.predict_with(&fp, &test.x)?;
                write_curve(&dir.join(format!("curve_{}_s{seed}.csv", choice.name())), &train, &post_tr, &test, &post_te)?;
                Ok(BTreeMap::from([
                    ("test_rmse".into(), post_te.rmse(&test.y)),
                    ("test_mll".into(), post_te.mean_log_likelihood(&test.y)),
                    ("final_lml".into(), report.final_lml),
                ]))
            })();
            timing.entry(choice.name().into()).or_default().push(start.elapsed().as_secs_f64());
            reps.push(repeat_summary(r, seed, res));
        }
        out.push(ModelSummary::from_repeats(choice.name().into(), reps));
    }
    Ok(out)
}

/// Columns `x` (or `x0..x{d-1}`), `mean, std, truth, flag`.
pub fn write_curve(path: &Path, train: &Dataset, post_tr: &Posterior, test: &Dataset, post_te: &Posterior) -> Result<()> {
    let mut w = csv_writer(path)?;
    let d = train.dim();
    let mut header: Vec<String> = if d == 1 { vec!["x".into()] } else { (0..d).map(|j| format!("x{j}")).collect() };
    header.extend(["mean", "std", "truth", "flag"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (ds, post, flag) in [(train, post_tr, "1"), (test, post_te, "0")] {
        let sd = post.std();
        for i in 0..ds.len() {
            let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", post.mean[i]));
            rec.push(format!("{:?}", sd[i]));
            rec.push(format!("{:?}", ds.y[i]));
            rec.push(flag.into());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bayesopt(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    repeats: usize,
    bo: &BoConfig,
    dir: &Path,
    timing: &mut BTreeMap<String, Vec<f64>>,
) -> Result<Vec<ModelSummary>> {
    fs::write(dir.join("benchmark.json"), serde_json::to_string_pretty(bench)?)?;
    let mut out = Vec::new();
    for choice in &cfg.models {
        let preset = match choice {
            ModelChoice::Preset(p) if p == "oracle" => Preset::Oracle(bench.groups()),
            ModelChoice::Preset(p) => p.parse::<Preset>()?,
            ModelChoice::Spec { .. } => return Err(invalid("BO surrogates must be presets")),
        };
        let bo = BoConfig { shared_lengthscale: cfg.shared_lengthscale || bo.shared_lengthscale, ..bo.clone() };
        let file = fs::File::create(dir.join(format!("bo_{}.csv", choice.name())))?;
        let mut file = BufWriter::new(file);
        let mut reps = Vec::new();
        for r in 0..repeats.max(1) {
            let seed = cfg.seed + r as u64;
            let res = run_bo(bench, &preset, &bo, seed);
            let res = res.and_then(|t| {
                t.write_csv(&mut file, r == 0)?;
                timing.entry(choice.name().into()).or_default().push(*t.wallclock.last().expect("trace"));
                let mut m = BTreeMap::from([("final_best".into(), t.final_best())]);
                m.insert("failures".into(), t.failures.len() as f64);
                Ok(m)
            });
            reps.push(repeat_summary(r, seed, res));
        }
        out.push(ModelSummary::from_repeats(choice.name().into(), reps));
    }
    Ok(out)
}

fn texture_task(
    cfg: &ExperimentConfig,
    image: Option<&Path>,
    mask: Option<&Path>,
    synthetic: Option<&SyntheticImage>,
    tcfg: &TextureConfig,
    dir: &Path,
    timing: &mut BTreeMap<String, Vec<f64>>,
) -> Result<Vec<ModelSummary>> {
    let (img, clean, held): (GrayImage, Option<GrayImage>, Vec<bool>) = match (image, synthetic) {
        (Some(p), _) => {
            let img = read_pgm(p)?;
            let held = match mask {
                Some(m) => {
                    let mk = read_pgm(m)?;
                    if (mk.rows, mk.cols) != (img.rows, img.cols) {
                        return Err(invalid("mask and image sizes differ"));
                    }
                    mk.pixels.iter().map(|v| *v > 0.0).collect()
                }
                None => center_hole(img.rows, img.cols, img.rows / 4, img.cols / 4),
            };
            (img, None, held)
        }
        (None, Some(s)) => {
            let syn = synthetic_texture(s.rows, s.cols, s.noise, cfg.seed)?;
            let held = center_hole(s.rows, s.cols, s.hole.0, s.hole.1);
            (syn.image, Some(syn.clean), held)
        }
        (None, None) => return Err(invalid("texture task needs an image path or a synthetic image")),
    };
    let mut out = Vec::new();
    for choice in &cfg.models {
        let kernel: AxisKernel = choice.name().parse()?;
        let start = Instant::now();
        let res = (|| -> Result<BTreeMap<String, f64>> {
            let r = texture_extrapolate(&img, &held, &TextureConfig { axis_kernel: kernel, ..tcfg.clone() })?;
            r.write_csv(fs::File::create(dir.join(format!("texture_{kernel}.csv")))?, &img)?;
            write_pgm(BufWriter::new(fs::File::create(dir.join(format!("texture_{kernel}.pgm")))?), &r.mean_image())?;
            let mut m = BTreeMap::from([
                ("heldout_rmse".into(), r.heldout_rmse),
                ("heldout_std".into(), r.heldout_std),
                ("final_objective".into(), r.final_objective),
            ]);
            if let Some(c) = &clean {
                let idx: Vec<usize> = (0..held.len()).filter(|&i| held[i]).collect();
                let e = idx.iter().map(|&i| (r.mean[i] - c.pixels[i]).powi(2)).sum::<f64>() / idx.len().max(1) as f64;
                m.insert("heldout_rmse_clean".into(), e.sqrt());
            }
            Ok(m)
        })();
        timing.entry(choice.name().into()).or_default().push(start.elapsed().as_secs_f64());
        out.push(ModelSummary::from_repeats(choice.name().into(), vec![repeat_summary(0, cfg.seed, res)]));
    }
    Ok(out)
}

/// The rotation persisted by a transformed-benchmark run.
pub fn summary_rotation(s: &Summary) -> Option<Rotation> {
    s.extra.as_ref().and_then(|e| serde_json::from_value(e.get("rotation")?.clone()).ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_hash() {
        let c = ExperimentConfig::from_json(
            r#"{"name": "b", "task": {"kind": "regression", "dataset": {"path": "x.csv"}}}"#,
        )
        .unwrap();
        assert_eq!(c.schema, EXPERIMENT_SCHEMA);
        assert_eq!(c.models, default_models());
        assert_eq!(c.task, Task::Regression { dataset: DataSource::Path { path: "x.csv".into() }, split: SplitSpec::default() });
        assert_eq!(c.hash().unwrap(), c.clone().hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let r = ExperimentConfig::from_json(
            r#"{"schema": "x/2", "name": "b", "task": {"kind": "bo", "benchmark": "stybtang"}}"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn sample_std() {
        let s = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]).std, 0.0);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nkn_core::bayesopt::{BenchmarkKind, BoConfig};
use nkn_core::data::{load_csv, synth_generate, SynthKind};
use nkn_core::experiment::{
    results_dir, run_experiment, DataSource, ExperimentConfig, ModelChoice, Summary, SyntheticImage, Task,
    EXPERIMENT_SCHEMA,
};
use nkn_core::gp::gradcheck;
use nkn_core::structured::TextureConfig;
use nkn_core::{compile_pwp, fit, GpModel, Hyper, NetworkSpec, Points, Preset, PrimitiveKind, PrimitiveSlot};
use nkn_core::{PrimitiveTag, PwpExpr, TrainConfig};

#[derive(Parser)]
#[command(name = "nkn", version, about = "Neural kernel network Gaussian processes")]
struct Cli {
    /// Experiment config (schema nkn-exp/1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (experiments add <name>/<timestamp> below it).
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Worker threads. Computation is serial, so values above 1 have no effect.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a GP (or run any experiment config).
    Fit(FitArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Train on the start of a series and extrapolate the rest.
    Extrapolate(ExtrapolateArgs),
    /// Bayesian optimization on a benchmark function.
    Bo(BoArgs),
    /// Fill a held-out region of a grayscale texture.
    Texture(TextureArgs),
    /// Compare the analytic likelihood gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Compile a positive-weighted polynomial of primitives into a network.
    CompilePwp(CompilePwpArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Preset name(s): heuristic, default6, timeseries8, smQ, bo_additive, rbf, 2rbf.
    #[arg(long = "preset", value_delimiter = ',')]
    presets: Vec<String>,
    /// Explicit network spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// One lengthscale per primitive instead of one per dimension.
    #[arg(long)]
    shared_lengthscale: bool,
}

impl ModelArgs {
    fn models(&self, default: &str) -> Result<Vec<ModelChoice>> {
        let mut m: Vec<ModelChoice> = self.presets.iter().map(|p| ModelChoice::Preset(p.clone())).collect();
        if let Some(path) = &self.spec {
            let spec = NetworkSpec::from_json(&read(path)?)?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "spec".into());
            m.push(ModelChoice::Spec { name, spec });
        }
        if m.is_empty() {
            m.push(ModelChoice::Preset(default.into()));
        }
        Ok(m)
    }

    fn train(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig { iters: self.iters.unwrap_or(d.iters), lr: self.lr.unwrap_or(d.lr), ..d }
    }
}

#[derive(Args)]
struct FitArgs {
    /// CSV with a header row; the last column is the target.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// CSV of inputs, optionally followed by a target column.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ExtrapolateArgs {
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// fig1_2d, gp_sample_1d or neuron_toy.
    #[arg(long)]
    synthetic: Option<String>,
    /// Leading fraction of rows used for training.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    train_frac: f64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct BoArgs {
    /// stybtang, michalewicz or stybtang_transform.
    #[arg(long, default_value = "stybtang")]
    benchmark: String,
    #[arg(long, visible_alias = "dims", default_value_t = 10)]
    d: usize,
    /// Surrogate preset(s), including `oracle`.
    #[arg(long = "surrogate", value_delimiter = ',', default_value = "bo_additive")]
    surrogates: Vec<String>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, visible_alias = "seeds", default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    refit_steps: Option<usize>,
    #[arg(long)]
    pool: Option<usize>,
}

#[derive(Args)]
struct TextureArgs {
    /// PGM image (P2 or P5).
    #[arg(long, conflicts_with = "synthetic")]
    image: Option<PathBuf>,
    /// PGM whose nonzero pixels are held out (default: centered quarter-size hole).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Side of a synthetic periodic texture instead of an image.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Axis kernel(s): per, rbf, nkn.
    #[arg(long = "kernel", value_delimiter = ',', default_value = "per")]
    kernels: Vec<String>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "default6")]
    preset: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Fail when the worst relative error exceeds this.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct CompilePwpArgs {
    /// Polynomial such as `0.3*k0*k1^2 + k2`.
    #[arg(long, conflicts_with = "pwp")]
    expr: Option<String>,
    /// JSON polynomial `{"terms": [{"weight": .., "exponents": [..]}]}`.
    #[arg(long)]
    pwp: Option<PathBuf>,
    /// Primitive families for k0, k1, ... (default: all rbf).
    #[arg(long, value_delimiter = ',')]
    primitives: Vec<String>,
    #[arg(long, default_value_t = 1)]
    d: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// fig1_2d, gp_sample_1d or neuron_toy.
    #[arg(long)]
    kind: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    if let Some(path) = &cli.config {
        let mut cfg = ExperimentConfig::from_json(&read(path)?).with_context(|| format!("config {}", path.display()))?;
        let expected = match &cli.cmd {
            Cmd::Fit(_) => None,
            Cmd::Extrapolate(_) => Some("extrapolation"),
            Cmd::Bo(_) => Some("bo"),
            Cmd::Texture(_) => Some("texture"),
            _ => bail!("--config applies to fit, extrapolate, bo and texture"),
        };
        if let Some(k) = expected {
            if cfg.task.kind() != k {
                bail!("config describes a {} task, not {k}", cfg.task.kind());
            }
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        return experiment(&cfg, &cli.out);
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Cmd::Fit(a) => fit_cmd(a, seed, &cli.out),
        Cmd::Predict(a) => predict_cmd(a, &cli.out),
        Cmd::Extrapolate(a) => {
            let dataset = match (&a.data, &a.synthetic) {
                (Some(p), _) => DataSource::Path { path: p.clone() },
                (None, Some(s)) => DataSource::Synthetic { synthetic: s.parse::<SynthKind>()? },
                (None, None) => bail!("extrapolate needs --data or --synthetic"),
            };
            let cfg = config(
                "extrapolate",
                seed,
                a.model.models("default6")?,
                a.model.shared_lengthscale,
                a.model.train(),
                Task::Extrapolation { dataset, train_frac: a.train_frac, repeats: a.repeats },
            );
            experiment(&cfg, &cli.out)
        }
        Cmd::Bo(a) => {
            let benchmark: BenchmarkKind = a.benchmark.parse()?;
            let d = BoConfig::default();
            let bo = BoConfig {
                iters: a.iters,
                refit_steps: a.refit_steps.unwrap_or(d.refit_steps),
                pool_size: a.pool.unwrap_or(d.pool_size),
                ..d
            };
            let models = a.surrogates.iter().map(|s| ModelChoice::Preset(s.clone())).collect();
            let task = Task::Bo { benchmark, d: a.d, repeats: a.repeats, bo };
            experiment(&config(&format!("bo_{benchmark}"), seed, models, true, TrainConfig::default(), task), &cli.out)
        }
        Cmd::Texture(a) => {
            let synthetic = a.synthetic.map(|s| SyntheticImage { rows: s, cols: s, noise: 0.01, hole: (s / 4, s / 4) });
            if a.image.is_none() && synthetic.is_none() {
                bail!("texture needs --image or --synthetic");
            }
            let d = TextureConfig::default();
            let texture = TextureConfig { iters: a.iters.unwrap_or(d.iters), ..d };
            let models = a.kernels.iter().map(|k| ModelChoice::Preset(k.clone())).collect();
            let task = Task::Texture { image: a.image, mask: a.mask, synthetic, texture };
            experiment(&config("texture", seed, models, false, TrainConfig::default(), task), &cli.out)
        }
        Cmd::Gradcheck(a) => gradcheck_cmd(a, seed),
        Cmd::CompilePwp(a) => compile_cmd(a),
        Cmd::Synth(a) => synth_cmd(a, seed, &cli.out),
    }
}

fn config(
    name: &str,
    seed: u64,
    models: Vec<ModelChoice>,
    shared_lengthscale: bool,
    train: TrainConfig,
    task: Task,
) -> ExperimentConfig {
    ExperimentConfig { schema: EXPERIMENT_SCHEMA.into(), name: name.into(), seed, models, shared_lengthscale, train, task }
}

fn experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExitCode> {
    let dir = results_dir(out, &cfg.name);
    let summary = run_experiment(cfg, &dir)?;
    print_summary(&summary);
    println!("results: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn print_summary(s: &Summary) {
    for m in &s.models {
        let stats: Vec<String> =
            m.metrics.iter().map(|(k, v)| format!("{k} {:.4} ± {:.4}", v.mean, v.std)).collect();
        println!("{:<14} {}{}", m.model, stats.join(", "), if m.failed > 0 { format!(" ({} failed)", m.failed) } else { String::new() });
        for r in m.repeats.iter().filter_map(|r| r.error.as_ref().map(|e| (r.repeat, e))) {
            println!("  repeat {}: {}", r.0, r.1);
        }
    }
}

fn fit_cmd(a: FitArgs, seed: u64, out: &Path) -> Result<ExitCode> {
    let Some(data) = a.data else { bail!("fit needs --data or --config") };
    let ds = load_csv(&data)?;
    if ds.dropped > 0 {
        eprintln!("dropped {} rows with missing values", ds.dropped);
    }
    let models = a.model.models("default6")?;
    if models.len() != 1 {
        bail!("fit without --config trains exactly one model");
    }
    let mut m = models[0].build(&ds.x, &ds.y, seed, a.model.shared_lengthscale)?;
    let report = fit(&mut m, &TrainConfig { seed, ..a.model.train() })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("model.json"), m.to_checkpoint()?)?;
    report.write_trace_csv(fs::File::create(out.join("trace.csv"))?)?;
    println!(
        "{}",
        serde_json::json!({
            "model": models[0].name(),
            "n": ds.len(),
            "initial_lml": report.initial_lml,
            "final_lml": report.final_lml,
            "noise_variance": m.noise_variance(),
            "seconds": report.seconds,
            "checkpoint": out.join("model.json"),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn predict_cmd(a: PredictArgs, out: &Path) -> Result<ExitCode> {
    let m = GpModel::from_checkpoint(&read(&a.model)?)?;
    let ds = load_csv(&a.data)?;
    let d = m.spec.input_dim;
    let (x, truth) = if ds.dim() == d {
        (ds.x.clone(), Some(ds.y.clone()))
    } else if ds.dim() + 1 == d {
        let rows: Vec<Vec<f64>> = ds.x.rows().zip(&ds.y).map(|(r, y)| r.iter().chain([y]).copied().collect()).collect();
        (Points::from_rows(&rows)?, None)
    } else {
        bail!("data has {} columns; the model expects {d} inputs (plus an optional target)", ds.dim() + 1);
    };
    let post = m.predict(&x)?;
    fs::create_dir_all(out)?;
    let path = out.join("predictions.csv");
    let mut text = String::from("mean,std\n");
    for (mu, s) in post.mean.iter().zip(post.std()) {
        text.push_str(&format!("{mu:?},{s:?}\n"));
    }
    fs::write(&path, text)?;
    match truth {
        Some(t) => println!(
            "{}",
            serde_json::json!({ "n": t.len(), "rmse": post.rmse(&t), "mll": post.mean_log_likelihood(&t), "predictions": path })
        ),
        None => println!("{}", serde_json::json!({ "n": x.len(), "predictions": path })),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs, seed: u64) -> Result<ExitCode> {
    if a.n == 0 || a.d == 0 {
        bail!("--n and --d must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..a.n).map(|_| (0..a.d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>().sin() + 0.1 * rng.random_range(-1.0..1.0)).collect();
    let x = Points::from_rows(&rows)?;
    let m = GpModel::from_preset(&a.preset.parse::<Preset>()?, &x, &y, seed, false)?;
    let c = gradcheck(&m, a.h, 1e-6)?;
    println!(
        "{}",
        serde_json::json!({
            "preset": a.preset,
            "params": c.analytic.len(),
            "max_rel_err": c.max_rel_err,
            "worst_param": c.worst,
            "analytic": c.analytic[c.worst],
            "numeric": c.numeric[c.worst],
        })
    );
    Ok(if c.max_rel_err <= a.tol { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn primitive(name: &str, d: usize, i: usize) -> Result<PrimitiveSlot> {
    let tag = match name.trim().to_ascii_lowercase().as_str() {
        "rbf" => PrimitiveTag::Rbf,
        "rq" => PrimitiveTag::Rq,
        "per" => PrimitiveTag::Per,
        "lin" => PrimitiveTag::Lin,
        "const" => PrimitiveTag::Const,
        "wn" => PrimitiveTag::Wn,
        other => bail!("unsupported primitive {other:?} for compile-pwp"),
    };
    let l = 1.0 + i as f64 * 0.5;
    let h = match tag {
        PrimitiveTag::Rbf | PrimitiveTag::Rq => Hyper::rbf(1.0, l),
        PrimitiveTag::Per => Hyper::per(1.0, 1.0, l),
        _ => Hyper::variance(1.0),
    };
    let kind = PrimitiveKind::new(tag);
    let init = kind.encode(&h, d)?;
    Ok(PrimitiveSlot { kind, init })
}

fn compile_cmd(a: CompilePwpArgs) -> Result<ExitCode> {
    let b = (!a.primitives.is_empty()).then_some(a.primitives.len());
    let pwp = match (&a.expr, &a.pwp) {
        (Some(e), _) => PwpExpr::parse(e, b)?,
        (None, Some(p)) => serde_json::from_str(&read(p)?)?,
        (None, None) => bail!("compile-pwp needs --expr or --pwp"),
    };
    let nb = pwp.terms.first().map(|t| t.exponents.len()).unwrap_or(0);
    let names: Vec<String> = if a.primitives.is_empty() { vec!["rbf".into(); nb] } else { a.primitives.clone() };
    if names.len() != nb {
        bail!("polynomial has {nb} primitives but {} were named", names.len());
    }
    let prims = names.iter().enumerate().map(|(i, n)| primitive(n, a.d, i)).collect::<Result<Vec<_>>>()?;
    let spec = compile_pwp(&pwp, &prims, a.d)?;
    eprintln!("primitives {nb}, max width {}, bound {}", spec.max_width()?, 2 * nb + 6);
    println!("{}", spec.to_json()?);
    Ok(ExitCode::SUCCESS)
}

fn synth_cmd(a: SynthArgs, seed: u64, out: &Path) -> Result<ExitCode> {
    let kind: SynthKind = a.kind.parse()?;
    let s = synth_generate(kind, seed)?;
    fs::create_dir_all(out)?;
    let (tr, tt) = (out.join(format!("{kind}_train.csv")), out.join(format!("{kind}_truth.csv")));
    s.train.write_csv(&tr)?;
    s.truth.write_csv(&tt)?;
    println!("{}", serde_json::json!({ "train": tr, "n_train": s.train.len(), "truth": tt, "n_truth": s.truth.len() }));
    Ok(ExitCode::SUCCESS)
}

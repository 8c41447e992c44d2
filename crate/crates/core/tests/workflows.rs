use nkn_core::bayesopt::{run_bo, Benchmark, BenchmarkKind, BoConfig};
use nkn_core::structured::{center_hole, synthetic_texture, texture_extrapolate, AxisKernel, TextureConfig};
use nkn_core::Preset;

fn texture_rmse_on_clean(kernel: AxisKernel) -> (f64, f64) {
    let tex = synthetic_texture(64, 64, 0.02, 7).unwrap();
    let held = center_hole(64, 64, 16, 16);
    let cfg = TextureConfig { axis_kernel: kernel, ..TextureConfig::default() };
    let res = texture_extrapolate(&tex.image, &held, &cfg).unwrap();
    let truth: Vec<f64> = held.iter().zip(&tex.clean.pixels).filter(|(h, _)| **h).map(|(_, v)| *v).collect();
    let pred: Vec<f64> = held.iter().zip(&res.mean).filter(|(h, _)| **h).map(|(_, v)| *v).collect();
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let std = (truth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmse = (truth.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    (rmse, std)
}

#[test]
fn periodic_texture_fills_the_hole() {
    let (per, std) = texture_rmse_on_clean(AxisKernel::Per);
    let (rbf, _) = texture_rmse_on_clean(AxisKernel::Rbf);
    assert!(per < 0.1 * std, "per rmse {per} vs signal std {std}");
    assert!(per < rbf, "per {per} rbf {rbf}");
}

#[test]
fn bo_best_trace_is_monotone_and_improves() {
    let bench = Benchmark::new(BenchmarkKind::Stybtang, 3, 0).unwrap();
    let cfg = BoConfig { iters: 6, refit_steps: 20, pool_size: 200, ..BoConfig::default() };
    let trace = run_bo(&bench, &Preset::Rbf, &cfg, 3).unwrap();
    assert_eq!(trace.best.len(), cfg.iters + 1);
    assert!(trace.best.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(trace.final_best(), trace.y.iter().copied().fold(f64::INFINITY, f64::min));
    assert!(trace.failures.is_empty());
}

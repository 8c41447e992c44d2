mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use nkn_core::bayesopt::expected_improvement;
use nkn_core::nkn::kernel_gram;
use nkn_core::primitives::{eval_primitive, softplus_inv};
use nkn_core::structured::{kron_dense, kron_matvec, pcg_solve, CgConfig};
use nkn_core::train::clip_global_norm;
use nkn_core::{
    compile_pwp, kernel_matrix, GpModel, ParameterStore, Posterior, PrimitiveKind, PrimitiveTag, PwpExpr,
    PwpTerm,
};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> ProptestConfig {
    ProptestConfig { cases: 32, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(small_config())]

    #[test]
    fn network_gram_is_psd(seed in any::<u64>(), d in 1usize..4) {
        let mut r = rng(seed);
        let spec = random_network(&mut r, d, 3);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = random_points(&mut r, 25, d, 2.0);
        let k = kernel_gram(&spec, &store, &x).unwrap().to_dmatrix();
        let tr = k.trace();
        prop_assert!(min_eigenvalue(&k) >= -1e-8 * tr.abs().max(1e-300) / 25.0);
    }

    #[test]
    fn cross_matrix_is_transpose_symmetric(seed in any::<u64>(), d in 1usize..4) {
        let mut r = rng(seed);
        let spec = random_network(&mut r, d, 2);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = random_points(&mut r, 7, d, 2.0);
        let y = random_points(&mut r, 5, d, 2.0);
        let kxy = kernel_matrix(&spec, &store, &x, &y).unwrap().to_dmatrix();
        let kyx = kernel_matrix(&spec, &store, &y, &x).unwrap().to_dmatrix();
        prop_assert!((kxy - kyx.transpose()).abs().max() <= 1e-12);
    }

    #[test]
    fn stationary_primitives_are_shift_invariant(seed in any::<u64>(), d in 1usize..4) {
        let mut r = rng(seed);
        for tag in REAL_TAGS.into_iter().filter(|t| t.is_stationary()) {
            let slot = random_slot(&mut r, tag, d);
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let s: Vec<f64> = (0..d).map(|_| r.random_range(-5.0..5.0)).collect();
            let xs: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
            let ys: Vec<f64> = y.iter().zip(&s).map(|(a, b)| a + b).collect();
            let k0 = eval_primitive(&slot.kind, &slot.init, &x, &y).unwrap();
            let k1 = eval_primitive(&slot.kind, &slot.init, &xs, &ys).unwrap();
            prop_assert!((k0 - k1).norm() <= 1e-9 * k0.norm().max(1.0), "{tag:?}");
        }
    }

    #[test]
    fn complex_exponential_is_conjugate_symmetric(mu in prop::collection::vec(-3.0f64..3.0, 1..4), seed in any::<u64>()) {
        let d = mu.len();
        let mut r = rng(seed);
        let kind = PrimitiveKind::new(PrimitiveTag::Cexp);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let kxy = eval_primitive(&kind, &mu, &x, &y).unwrap();
        let kyx = eval_primitive(&kind, &mu, &y, &x).unwrap();
        prop_assert!((kxy - kyx.conj()).norm() <= 1e-12);
        prop_assert!((kxy.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn compiled_pwp_width_is_bounded(
        terms in prop::collection::vec((0.01f64..5.0, prop::collection::vec(0u32..5, 3)), 1..6),
    ) {
        let pwp = PwpExpr { terms: terms.into_iter().map(|(weight, exponents)| PwpTerm { weight, exponents }).collect() };
        let mut r = rng(0);
        let prims: Vec<_> = [PrimitiveTag::Rbf, PrimitiveTag::Per, PrimitiveTag::Lin]
            .into_iter()
            .map(|t| random_slot(&mut r, t, 1))
            .collect();
        let spec = compile_pwp(&pwp, &prims, 1).unwrap();
        prop_assert!(spec.max_width().unwrap() <= 2 * 3 + 6);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = random_points(&mut r, 4, 1, 2.0);
        let k = kernel_gram(&spec, &store, &x).unwrap().to_dmatrix();
        for i in 0..4 {
            for j in 0..4 {
                let direct = pwp.evaluate_at(&prims, x.row(i), x.row(j)).unwrap().re;
                prop_assert!((k[(i, j)] - direct).abs() <= 1e-10 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn random_network_gradient_matches_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_network(&mut r, 2, 2);
        let store = ParameterStore::from_spec(&spec, softplus_inv(0.1)).unwrap();
        let x = random_points(&mut r, 10, 2, 1.5);
        let y: Vec<f64> = x.rows().map(|p| p[0].sin() + 0.5 * p[1]).collect();
        let mut m = GpModel::new(spec, store, &x, &y).unwrap();
        let g = m.grad_log_marginal().unwrap();
        let p0 = m.params().to_vec();
        for k in 0..p0.len() {
            let h = 1e-5 * p0[k].abs().max(1.0);
            let mut p = p0.clone();
            p[k] = p0[k] + h;
            m.set_params(&p).unwrap();
            let f1 = m.log_marginal_likelihood().unwrap();
            p[k] = p0[k] - h;
            m.set_params(&p).unwrap();
            let f0 = m.log_marginal_likelihood().unwrap();
            let fd = (f1 - f0) / (2.0 * h);
            prop_assert!((g[k] - fd).abs() <= 1e-4 * g[k].abs().max(fd.abs()).max(1e-3), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn expected_improvement_is_nonnegative_and_grows_with_spread(
        mu in -5.0f64..5.0, best in -5.0f64..5.0, s in 0.01f64..3.0, ds in 0.0f64..3.0,
    ) {
        let post = Posterior { mean: vec![mu, mu], variance: vec![s * s, (s + ds) * (s + ds)] };
        let ei = expected_improvement(&post, best);
        prop_assert!(ei[0] >= 0.0);
        prop_assert!(ei[1] >= ei[0] - 1e-12);
        prop_assert!(ei[0] >= (best - mu).max(0.0) - 1e-12);
    }

    #[test]
    fn kron_matvec_matches_dense(seed in any::<u64>(), sizes in prop::collection::vec(1usize..6, 1..4)) {
        let mut r = rng(seed);
        let grams: Vec<DMatrix<f64>> =
            sizes.iter().map(|&n| DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0))).collect();
        let n: usize = sizes.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let fast = kron_matvec(&grams, &v).unwrap();
        let dense = kron_dense(&grams) * DVector::from_column_slice(&v);
        for i in 0..n {
            prop_assert!((fast[i] - dense[i]).abs() <= 1e-12 * n as f64);
        }
    }

    #[test]
    fn pcg_matches_dense_solve(seed in any::<u64>(), a in 2usize..6, b in 2usize..6) {
        let mut r = rng(seed);
        let spd = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
            let g = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
            &g * g.transpose() + DMatrix::identity(n, n) * 0.1
        };
        let grams = vec![spd(&mut r, a), spd(&mut r, b)];
        let noise: Vec<f64> = (0..a * b).map(|_| r.random_range(0.05..2.0)).collect();
        let rhs: Vec<f64> = (0..a * b).map(|_| r.random_range(-1.0..1.0)).collect();
        let cfg = CgConfig { tol: 1e-12, ..CgConfig::default() };
        let sol = pcg_solve(&grams, &noise, &rhs, None, &cfg).unwrap();
        let dense = kron_dense(&grams) + DMatrix::from_diagonal(&DVector::from_column_slice(&noise));
        let exact = dense.lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        let scale = exact.amax().max(1.0);
        for i in 0..a * b {
            prop_assert!((sol.x[i] - exact[i]).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn clipping_never_exceeds_ceiling(g in prop::collection::vec(-1e4f64..1e4, 1..20), c in 0.1f64..1e3) {
        let mut v = g.clone();
        clip_global_norm(&mut v, c);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= c * (1.0 + 1e-12));
        let n0 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n0 <= c {
            prop_assert_eq!(v, g);
        }
    }
}

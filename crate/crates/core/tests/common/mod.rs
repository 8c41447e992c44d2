#![allow(dead_code)]

use nkn_core::{LayerSpec, LinearSpec, NetworkSpec, Points, PrimitiveKind, PrimitiveSlot, PrimitiveTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REAL_TAGS: [PrimitiveTag; 7] = [
    PrimitiveTag::Rbf,
    PrimitiveTag::Rq,
    PrimitiveTag::Per,
    PrimitiveTag::Lin,
    PrimitiveTag::Wn,
    PrimitiveTag::Const,
    PrimitiveTag::Cos,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_slot(rng: &mut ChaCha8Rng, tag: PrimitiveTag, d: usize) -> PrimitiveSlot {
    let kind = PrimitiveKind::new(tag);
    let init = (0..kind.param_count(d)).map(|_| rng.random_range(-1.5..1.5)).collect();
    PrimitiveSlot { kind, init }
}

pub fn random_linear(rng: &mut ChaCha8Rng, in_width: usize, out: usize) -> LayerSpec {
    let bias = rng.random_bool(0.5);
    let init = (0..out * (in_width + usize::from(bias))).map(|_| rng.random_range(-3.0..1.0)).collect();
    LayerSpec::Linear(LinearSpec { out, bias, edges: None, init })
}

/// Random real network: up to `max_modules` Linear-Product modules and a final Linear1.
pub fn random_network(rng: &mut ChaCha8Rng, d: usize, max_modules: usize) -> NetworkSpec {
    let b = rng.random_range(1..=6);
    let prims = (0..b)
        .map(|_| {
            let tag = REAL_TAGS[rng.random_range(0..REAL_TAGS.len())];
            random_slot(rng, tag, d)
        })
        .collect();
    let mut layers = Vec::new();
    let mut width = b;
    for _ in 0..rng.random_range(0..=max_modules) {
        let out = 2 * rng.random_range(1..=4);
        layers.push(random_linear(rng, width, out));
        layers.push(LayerSpec::Product { arity: 2 });
        width = out / 2;
    }
    layers.push(random_linear(rng, width, 1));
    NetworkSpec::new(d, prims, layers)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, half: f64) -> Points {
    let data = (0..n * d).map(|_| rng.random_range(-half..half)).collect();
    Points::new(n, d, data).unwrap()
}

/// Symmetric eigenvalues via nalgebra.
pub fn min_eigenvalue(a: &nalgebra::DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

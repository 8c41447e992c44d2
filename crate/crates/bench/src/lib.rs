use nkn_core::Points;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform points in `[-2, 2]^d` with a smooth target.
pub fn synthetic(n: usize, d: usize, seed: u64) -> (Points, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Points::new(n, d, data).expect("valid shape");
    let y = x.rows().map(|p| p.iter().map(|v| v.sin()).sum::<f64>() + 0.1 * rng.random::<f64>()).collect();
    (x, y)
}

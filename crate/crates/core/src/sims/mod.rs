//! Data generators: the SIR simulator, analytic test functions and bundled data.

pub mod data;
pub mod sir;
pub mod testfns;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator for replicate `stream` under a base `seed`.
///
/// ChaCha streams are independent for a fixed key, so replicate draws do not
/// depend on how work is split across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Latin hypercube sample of `n` points in `[0, 1]^d`.
pub fn lhs(n: usize, d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..d {
        perm.shuffle(rng);
        for i in 0..n {
            x[(i, k)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    x
}

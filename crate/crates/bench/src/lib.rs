//! Inputs shared by the criterion benchmarks.

use hetgp::experiments::woodbury_data;
use hetgp::{find_reps, KernelFamily, KernelSpec, ReplicatedDesign};

/// The same replicated data as a design on unique sites and as one with every
/// raw row treated as its own site.
pub fn paired_designs(
    n: usize,
    max_reps: usize,
    seed: u64,
) -> (ReplicatedDesign, ReplicatedDesign) {
    let (x, y) = woodbury_data(n, max_reps, seed).expect("benchmark data");
    let unique = find_reps(&x, &y, 0.0).expect("unique design");
    let full = ReplicatedDesign::unreplicated(x, y).expect("full design");
    (unique, full)
}

pub fn kernel() -> KernelSpec {
    KernelSpec::new(KernelFamily::SquaredExponential, vec![1.0, 1.5]).expect("kernel")
}

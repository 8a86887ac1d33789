//! Gaussian process regression for replicated stochastic simulation output.
//!
//! Observations at repeated inputs are collapsed to per-site means and
//! variances ([`ReplicatedDesign`]), and all likelihood and prediction
//! algebra runs on the `n` unique sites instead of the `N` raw rows.
//! Three models are provided:
//!
//! - [`HomModel`]: constant nugget, fit by [`hom_fit`];
//! - [`HetModel`]: input-dependent nuggets whose log-values are smoothed by a
//!   latent GP, fit by [`het_fit`] with an automatic homoskedastic fallback;
//! - [`SkModel`]: the stochastic kriging baseline with empirical variances.
//!
//! ```
//! use hetgp::{find_reps, hom_fit, HomFitOptions};
//! use nalgebra::{DMatrix, DVector};
//!
//! let x = DMatrix::from_column_slice(6, 1, &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
//! let y = DVector::from_vec(vec![0.1, -0.1, 1.0, 1.2, 0.0, 0.2]);
//! let design = find_reps(&x, &y, 0.0).unwrap();
//! let model = hom_fit(&design, &HomFitOptions::default()).unwrap();
//! let pred = model.predict(&DMatrix::from_element(1, 1, 0.25)).unwrap();
//! assert!(pred.sd2[0] >= 0.0);
//! ```

/// Version of this library.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod design;
pub mod error;
pub mod experiments;
pub mod het;
pub mod hom;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod sims;
pub mod sk;

pub use design::{find_reps, ReplicatedDesign};
pub use error::{Error, Result};
pub use het::{
    het_fit, het_init, het_njll, het_njll_grad, smooth_latents, HetModel, HetSettings, PhiMode,
};
pub use hom::{hom_fit, hom_nll, hom_nll_grad, HomFitOptions, HomModel, Prediction};
pub use kernel::{KernelFamily, KernelSpec};
pub use metrics::{nlpd, nmse, score, EvalSet};
pub use optim::{minimize, OptProblem, OptResult, OptStatus};
pub use sk::{sk_fit, SkFitOptions, SkModel};

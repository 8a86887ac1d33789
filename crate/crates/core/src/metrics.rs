//! Scoring rules for held-out predictions.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::hom::Prediction;

/// Held-out responses with predictive means and total variances.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    y: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl EvalSet {
    pub fn new(y: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyInput);
        }
        for len in [mean.len(), var.len()] {
            if len != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: y.len(),
                    found: len,
                });
            }
        }
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(
                "predictive variances must be positive".into(),
            ));
        }
        Ok(Self { y, mean, var })
    }

    /// Uses `sd2 + nugs` as the predictive variance.
    pub fn from_prediction(y: Vec<f64>, pred: &Prediction) -> Result<Self> {
        Self::new(y, pred.mean.clone(), pred.total_var())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn terms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.y
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((y, m), v)| ((y - m) * (y - m), *v))
    }
}

/// Mean of `-(y - mean)^2 / var - log var`; higher is better.
pub fn score(e: &EvalSet) -> f64 {
    e.terms().map(|(r2, v)| -r2 / v - v.ln()).sum::<f64>() / e.len() as f64
}

/// Mean squared error over the population variance of `y`.
pub fn nmse(e: &EvalSet) -> Result<f64> {
    let m = e.len() as f64;
    let ybar = e.y.iter().sum::<f64>() / m;
    let var_y = e.y.iter().map(|y| (y - ybar) * (y - ybar)).sum::<f64>() / m;
    if var_y <= 0.0 {
        return Err(Error::InvalidParameter(
            "held-out responses are constant".into(),
        ));
    }
    let mse = e.terms().map(|(r2, _)| r2).sum::<f64>() / m;
    Ok(mse / var_y)
}

/// Mean negative log predictive density; lower is better.
pub fn nlpd(e: &EvalSet) -> f64 {
    e.terms()
        .map(|(r2, v)| 0.5 * (2.0 * PI * v).ln() + r2 / (2.0 * v))
        .sum::<f64>()
        / e.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn set(y: &[f64], m: &[f64], v: &[f64]) -> EvalSet {
        EvalSet::new(y.to_vec(), m.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn score_values() {
        assert_eq!(score(&set(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0])), 0.0);
        let e = std::f64::consts::E;
        assert_relative_eq!(score(&set(&[1.0, 2.0], &[1.0, 2.0], &[e, e])), -1.0);
        // (-(1)/2 - ln 2 + -(4)/0.5 - ln 0.5) / 2
        let s = score(&set(&[1.0, 0.0], &[0.0, 2.0], &[2.0, 0.5]));
        assert_relative_eq!(
            s,
            (-0.5 - 2f64.ln() - 8.0 - 0.5f64.ln()) / 2.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn nmse_values() {
        assert_eq!(
            nmse(&set(&[1.0, 3.0], &[1.0, 3.0], &[1.0, 1.0])).unwrap(),
            0.0
        );
        assert_relative_eq!(
            nmse(&set(&[1.0, 3.0, 8.0], &[4.0; 3], &[1.0; 3])).unwrap(),
            1.0
        );
        // mse (1 + 4)/2 = 2.5, var 1
        assert_relative_eq!(
            nmse(&set(&[0.0, 2.0], &[1.0, 0.0], &[1.0, 1.0])).unwrap(),
            2.5
        );
        assert!(nmse(&set(&[2.0, 2.0], &[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn nlpd_values() {
        let v = 1.0 / (2.0 * PI);
        assert_relative_eq!(nlpd(&set(&[1.0], &[1.0], &[v])), 0.0, epsilon = 1e-15);
        assert_relative_eq!(nlpd(&set(&[1.0], &[1.0], &[1.0])), 0.918_938_533_204_672_7);
    }

    #[test]
    fn invalid_sets() {
        assert!(EvalSet::new(vec![], vec![], vec![]).is_err());
        assert!(EvalSet::new(vec![1.0], vec![1.0], vec![0.0]).is_err());
        assert!(EvalSet::new(vec![1.0], vec![1.0, 2.0], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn nlpd_is_affine_in_score(
            rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.01f64..10.0), 1..20)
        ) {
            let y = rows.iter().map(|r| r.0).collect();
            let m = rows.iter().map(|r| r.1).collect();
            let v = rows.iter().map(|r| r.2).collect();
            let e = EvalSet::new(y, m, v).unwrap();
            let lhs = nlpd(&e);
            let rhs = -score(&e) / 2.0 + 0.5 * (2.0 * PI).ln();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn nmse_shift_invariant(
            rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..20),
            c in -100.0f64..100.0,
        ) {
            let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let v = vec![1.0; y.len()];
            let Ok(a) = nmse(&EvalSet::new(y.clone(), m.clone(), v.clone()).unwrap()) else {
                return Ok(());
            };
            let ys = y.iter().map(|x| x + c).collect();
            let ms = m.iter().map(|x| x + c).collect();
            let b = nmse(&EvalSet::new(ys, ms, v).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
        }
    }
}

//! Analytic test responses used in the benchmarks.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    /// `x1 exp(-x1^2 - x2^2)` on `[-2, 4]^2`, observed with noise sd 0.01.
    Gramacy2d,
    /// Branin rescaled to `[0, 1]^2` with input-dependent noise.
    BraninNoisy,
    /// Sine wave with a jump at 0.5 on `[0, 1]`, unit noise.
    ///
    /// This is a stand-in for a demo function that has no published formula.
    Jump1d,
}

impl std::str::FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gramacy2d" => Ok(Self::Gramacy2d),
            "branin_noisy" => Ok(Self::BraninNoisy),
            "jump1d" => Ok(Self::Jump1d),
            other => Err(Error::UnknownFunction(other.to_string())),
        }
    }
}

impl TestFunction {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gramacy2d => "gramacy2d",
            Self::BraninNoisy => "branin_noisy",
            Self::Jump1d => "jump1d",
        }
    }

    /// Per-coordinate input box.
    pub fn domain(self) -> Vec<(f64, f64)> {
        match self {
            Self::Gramacy2d => vec![(-2.0, 4.0); 2],
            Self::BraninNoisy => vec![(0.0, 1.0); 2],
            Self::Jump1d => vec![(0.0, 1.0)],
        }
    }

    fn check(self, x: &[f64]) -> Result<()> {
        let dom = self.domain();
        if x.len() != dom.len() {
            return Err(Error::DimensionMismatch {
                expected: dom.len(),
                found: x.len(),
            });
        }
        if x.iter()
            .zip(&dom)
            .any(|(v, (lo, hi))| !(v >= lo && v <= hi))
        {
            return Err(Error::OutOfDomain { name: self.name() });
        }
        Ok(())
    }

    /// Noise-free response.
    pub fn eval(self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(match self {
            Self::Gramacy2d => x[0] * (-x[0] * x[0] - x[1] * x[1]).exp(),
            Self::BraninNoisy => {
                let (x1, x2) = (15.0 * x[0] - 5.0, 15.0 * x[1]);
                let b = 5.1 / (4.0 * PI * PI);
                let c = 5.0 / PI;
                let t = 1.0 / (8.0 * PI);
                (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
            }
            Self::Jump1d => {
                let s = (8.0 * PI * x[0]).sin();
                if x[0] <= 0.5 {
                    s
                } else {
                    s + 2.0
                }
            }
        })
    }

    /// Standard deviation of the additive Gaussian noise.
    pub fn noise_sd(self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(match self {
            Self::Gramacy2d => 0.01,
            Self::BraninNoisy => {
                let v = 2.0
                    + 2.0 * (PI * x[0]).sin() * (3.0 * PI * x[1]).cos()
                    + 5.0 * (x[0] * x[0] + x[1] * x[1]);
                v.sqrt()
            }
            Self::Jump1d => 1.0,
        })
    }
}

/// Evaluates the named test function at `x`.
pub fn test_fn(name: &str, x: &[f64]) -> Result<f64> {
    name.parse::<TestFunction>()?.eval(x)
}

/// Noise standard deviation of the named test function at `x`.
pub fn noise_sd(name: &str, x: &[f64]) -> Result<f64> {
    name.parse::<TestFunction>()?.noise_sd(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gramacy_values() {
        assert_eq!(test_fn("gramacy2d", &[0.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(
            test_fn("gramacy2d", &[1.0, 0.0]).unwrap(),
            0.367_879_441_171_442_3,
            max_relative = 1e-12
        );
        assert_eq!(noise_sd("gramacy2d", &[0.5, 0.5]).unwrap(), 0.01);
    }

    #[test]
    fn branin_noise_and_minimum() {
        assert_relative_eq!(noise_sd("branin_noisy", &[0.0, 0.0]).unwrap().powi(2), 2.0);
        // (pi, 2.275) in the original coordinates is a global minimiser
        let u = [(PI + 5.0) / 15.0, 2.275 / 15.0];
        assert_relative_eq!(
            test_fn("branin_noisy", &u).unwrap(),
            0.397_887,
            epsilon = 1e-5
        );
    }

    #[test]
    fn jump_and_errors() {
        assert!(test_fn("jump1d", &[0.75]).unwrap() > 1.0);
        assert!(matches!(
            test_fn("nope", &[0.0]),
            Err(Error::UnknownFunction(_))
        ));
        assert!(matches!(
            test_fn("branin_noisy", &[1.5, 0.0]),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(test_fn("jump1d", &[0.1, 0.2]).is_err());
    }
}

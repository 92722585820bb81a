use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::DenseMatrix;
use crate::scalar::Scalar;

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Ones,
    Gaussian { mean: f64, std: f64 },
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`, fan_in = cols, fan_out = rows.
    GlorotUniform,
}

impl Init {
    pub const EMBEDDING: Init = Init::Gaussian { mean: 0.0, std: 0.01 };
    /// Market vectors scale item vectors element-wise, so they start near one:
    /// a fresh market-aware model behaves like its market-unaware counterpart.
    pub const MARKET: Init = Init::Gaussian { mean: 1.0, std: 0.01 };

    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> DenseMatrix<S> {
        match *self {
            Init::Zeros => DenseMatrix::zeros(rows, cols),
            Init::Ones => DenseMatrix::filled(rows, cols, S::one()),
            Init::Gaussian { mean, std } => {
                let dist = Normal::new(mean, std).expect("finite gaussian parameters");
                let values = (0..rows * cols).map(|_| S::of(dist.sample(rng))).collect();
                DenseMatrix::from_vec(rows, cols, values).expect("sized by construction")
            }
            Init::GlorotUniform => {
                let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let values = (0..rows * cols).map(|_| S::of(dist.sample(rng))).collect();
                DenseMatrix::from_vec(rows, cols, values).expect("sized by construction")
            }
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    /// Accepts `zeros`, `ones`, `glorot_uniform`, `gaussian` (0, 0.01) or `gaussian:<mean>:<std>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["zeros"] => Ok(Init::Zeros),
            ["ones"] => Ok(Init::Ones),
            ["glorot_uniform"] | ["glorot"] => Ok(Init::GlorotUniform),
            ["gaussian"] => Ok(Init::EMBEDDING),
            ["gaussian", mean, std] => {
                let mean: f64 = mean.parse().map_err(|_| Error::UnknownScheme(s.to_string()))?;
                let std: f64 = std.parse().map_err(|_| Error::UnknownScheme(s.to_string()))?;
                if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(Error::UnknownScheme(s.to_string()));
                }
                Ok(Init::Gaussian { mean, std })
            }
            _ => Err(Error::UnknownScheme(s.to_string())),
        }
    }
}

/// Deterministic tensor for a given (shape, scheme, seed).
pub fn init_params<S: Scalar>(rows: usize, cols: usize, scheme: &str, seed: u64) -> Result<DenseMatrix<S>> {
    let init: Init = scheme.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init.sample(rows, cols, &mut rng))
}

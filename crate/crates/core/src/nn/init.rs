use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Scalar;

/// Weight initializer for one matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    Xavier,
    Normal(f64),
}

impl Init {
    pub fn values<T: Scalar, R: Rng + ?Sized>(self, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<T> {
        let n = fan_in * fan_out;
        match self {
            Init::Zero => vec![T::zero(); n],
            Init::Xavier => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("finite bound");
                (0..n).map(|_| T::from_f64_lossy(u.sample(rng))).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("std > 0");
                (0..n).map(|_| T::from_f64_lossy(d.sample(rng))).collect()
            }
        }
    }
}

/// `Zero` reproduces the adaLN-Zero initialization (modulation and output
/// head start at zero). `Dense` fills those with small random values so
/// every parameter receives gradient from the first step; used by tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Zero,
    Dense,
}

impl Scheme {
    pub fn zero_or_dense(self) -> Init {
        match self {
            Scheme::Zero => Init::Zero,
            Scheme::Dense => Init::Normal(0.05),
        }
    }
}

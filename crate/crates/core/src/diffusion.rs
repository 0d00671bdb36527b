//! EDM-parameterized diffusion process.
//!
//! Forward noising is `x = x0 + sigma * eps`; the denoiser is wrapped with the
//! sigma-dependent skip/scale preconditioning, and scores are recovered as
//! `(D(x, sigma) - x) / sigma^2`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::tensor::Scalar;

/// A strictly positive, finite noise level (equal to time `t` under EDM).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(Error::InvalidSigma(sigma))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmConstants {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmConstants {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl EdmConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config(format!("sigma_data must be > 0, got {}", self.sigma_data)));
        }
        if !(self.p_std > 0.0 && self.p_std.is_finite()) {
            return Err(Error::Config(format!("p_std must be > 0, got {}", self.p_std)));
        }
        if !self.p_mean.is_finite() {
            return Err(Error::Config("p_mean must be finite".into()));
        }
        Ok(())
    }

    pub fn scalings(&self, sigma: NoiseLevel) -> Scalings {
        let s = sigma.get();
        let sd = self.sigma_data;
        let denom = s * s + sd * sd;
        Scalings {
            c_skip: sd * sd / denom,
            c_out: s * sd / denom.sqrt(),
            c_in: 1.0 / denom.sqrt(),
            c_noise: s.ln() / 4.0,
        }
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalings {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn add_noise<T: Scalar>(x0: &ImageBatch<T>, sigma: NoiseLevel, eps: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    let s = T::from_f64_lossy(sigma.get());
    x0.zip_with(eps, |a, e| a + s * e)
}

/// `D(x, sigma) = c_skip * x + c_out * F(c_in * x, c_noise)`.
///
/// `raw_output_fn` receives the scaled input and `c_noise` and must return a
/// batch shaped like its input.
pub fn precondition<T, F>(
    mut raw_output_fn: F,
    x: &ImageBatch<T>,
    sigma: NoiseLevel,
    consts: &EdmConstants,
) -> Result<ImageBatch<T>>
where
    T: Scalar,
    F: FnMut(&ImageBatch<T>, f64) -> Result<ImageBatch<T>>,
{
    let sc = consts.scalings(sigma);
    let c_in = T::from_f64_lossy(sc.c_in);
    let scaled = x.map(|v| v * c_in);
    let raw = raw_output_fn(&scaled, sc.c_noise)?;
    combine_skip(x, &raw, sc)
}

/// `c_skip * x + c_out * raw`, elementwise.
pub fn combine_skip<T: Scalar>(x: &ImageBatch<T>, raw: &ImageBatch<T>, sc: Scalings) -> Result<ImageBatch<T>> {
    let c_skip = T::from_f64_lossy(sc.c_skip);
    let c_out = T::from_f64_lossy(sc.c_out);
    x.zip_with(raw, |xv, fv| c_skip * xv + c_out * fv)
}

pub fn score_from_denoiser<T: Scalar>(
    denoised: &ImageBatch<T>,
    x: &ImageBatch<T>,
    sigma: NoiseLevel,
) -> Result<ImageBatch<T>> {
    let inv = T::from_f64_lossy(1.0 / (sigma.get() * sigma.get()));
    denoised.zip_with(x, |d, xv| (d - xv) * inv)
}

/// Draws a training noise level with `ln(sigma) ~ N(p_mean, p_std^2)`.
pub fn sample_training_sigma<R: Rng + ?Sized>(rng: &mut R, consts: &EdmConstants) -> NoiseLevel {
    let normal = Normal::new(consts.p_mean, consts.p_std).expect("p_std > 0");
    let ln_sigma: f64 = normal.sample(rng);
    // exp of a finite normal draw is positive; underflow would need |z| > 600 std.
    NoiseLevel(ln_sigma.exp().max(f64::MIN_POSITIVE))
}

/// EDM loss weighting `(sigma^2 + sigma_d^2) / (sigma * sigma_d)^2`.
pub fn loss_weight(sigma: NoiseLevel, consts: &EdmConstants) -> f64 {
    let s = sigma.get();
    let sd = consts.sigma_data;
    (s * s + sd * sd) / (s * sd).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn batch(vals: Vec<f64>) -> ImageBatch<f64> {
        let n = vals.len();
        ImageBatch::new(vals, 1, 1, 1, n).unwrap()
    }

    #[test]
    fn noise_level_rejects_non_positive() {
        assert!(NoiseLevel::new(0.0).is_err());
        assert!(NoiseLevel::new(-1.0).is_err());
        assert!(NoiseLevel::new(f64::NAN).is_err());
        assert!(NoiseLevel::new(f64::INFINITY).is_err());
        assert!(NoiseLevel::new(1e-300).is_ok());
    }

    #[test]
    fn add_noise_identities() {
        let x0 = batch(vec![1.0, -2.0, 3.5]);
        let zero = x0.zeros_like();
        let s = NoiseLevel::new(2.5).unwrap();
        assert_eq!(add_noise(&x0, s, &zero).unwrap(), x0);

        let e = batch(vec![0.3, -0.1, 2.0]);
        let out = add_noise(&zero, NoiseLevel::new(1.0).unwrap(), &e).unwrap();
        assert_eq!(out, e);

        let wrong = ImageBatch::<f64>::zeros(1, 1, 1, 2);
        assert!(matches!(add_noise(&x0, s, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn add_noise_is_affine_in_eps() {
        let x0 = batch(vec![0.5, 1.5, -0.25, 4.0]);
        let e1 = batch(vec![0.1, -0.7, 1.3, 0.0]);
        let e2 = batch(vec![-1.0, 0.2, 0.4, 2.2]);
        let s = NoiseLevel::new(0.7).unwrap();
        let sum = e1.zip_with(&e2, |a, b| a + b).unwrap();
        let lhs = add_noise(&x0, s, &sum).unwrap();
        let rhs = add_noise(&x0, s, &e1).unwrap();
        for i in 0..4 {
            assert!((lhs.data[i] - (rhs.data[i] + 0.7 * e2.data[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn add_noise_monte_carlo_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.8;
        let dim = 10;
        let draws = 100_000;
        let x0 = batch(vec![0.3; dim]);
        let mut acc = 0.0;
        for _ in 0..draws {
            let e = batch((0..dim).map(|_| rng.sample(StandardNormal)).collect());
            let x = add_noise(&x0, NoiseLevel::new(sigma).unwrap(), &e).unwrap();
            acc += x.data.iter().zip(&x0.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / dim as f64;
        }
        let mean = acc / draws as f64;
        assert!((mean / (sigma * sigma) - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn scalings_at_sigma_data() {
        let c = EdmConstants::default();
        let sc = c.scalings(NoiseLevel::new(0.5).unwrap());
        assert!((sc.c_skip - 0.5).abs() < 1e-15);
        assert!((sc.c_in - 1.0 / 0.5f64.sqrt()).abs() < 1e-12);
        assert!((sc.c_in - 1.414214).abs() < 1e-6);
    }

    #[test]
    fn scalings_small_sigma_limit() {
        let c = EdmConstants::default();
        let sc = c.scalings(NoiseLevel::new(1e-9).unwrap());
        assert!((sc.c_skip - 1.0).abs() < 1e-15);
        assert!(sc.c_out < 1e-8);
        let x = batch(vec![1.0, -3.0]);
        let d = precondition(|s, _| Ok(s.map(|v| v * 7.0)), &x, NoiseLevel::new(1e-9).unwrap(), &c).unwrap();
        for (a, b) in d.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn precondition_zero_network_is_skip() {
        let c = EdmConstants::default();
        let x = batch(vec![1.0, -2.0, 0.5]);
        for s in [0.01, 0.5, 3.0, 80.0] {
            let sigma = NoiseLevel::new(s).unwrap();
            let mut seen_noise = 0.0;
            let d = precondition(
                |inp, c_noise| {
                    seen_noise = c_noise;
                    Ok(inp.zeros_like())
                },
                &x,
                sigma,
                &c,
            )
            .unwrap();
            let sc = c.scalings(sigma);
            assert!((seen_noise - s.ln() / 4.0).abs() < 1e-15);
            for (dv, xv) in d.data.iter().zip(&x.data) {
                assert_eq!(*dv, sc.c_skip * xv);
            }
        }
    }

    #[test]
    fn c_skip_strictly_decreasing() {
        let c = EdmConstants::default();
        let sigmas: Vec<f64> = (0..200).map(|i| 0.001 * 1.07f64.powi(i)).collect();
        for w in sigmas.windows(2) {
            let a = c.scalings(NoiseLevel::new(w[0]).unwrap());
            let b = c.scalings(NoiseLevel::new(w[1]).unwrap());
            assert!(a.c_skip > b.c_skip);
            assert!(a.c_skip > 0.0 && a.c_skip <= 1.0);
            assert!(b.c_out > a.c_out);
            assert!(b.c_out < c.sigma_data);
        }
    }

    #[test]
    fn score_identities() {
        let x = batch(vec![1.0, 2.0, -1.0]);
        let s = NoiseLevel::new(0.3).unwrap();
        let zero = score_from_denoiser(&x, &x, s).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));

        let x0 = batch(vec![0.5, -0.5, 2.0]);
        let n = batch(vec![0.1, 0.2, -0.3]);
        let xn = x0.zip_with(&n, |a, b| a + b).unwrap();
        let score = score_from_denoiser(&x0, &xn, s).unwrap();
        for (sc, nv) in score.data.iter().zip(&n.data) {
            assert!((sc + nv / 0.09).abs() < 1e-12);
        }
    }

    #[test]
    fn dirac_denoiser_gives_gaussian_score() {
        // Data concentrated at x*: p_sigma = N(x*, sigma^2 I), so the score is
        // (x* - x) / sigma^2, computed here from the log-density by hand.
        let x_star = batch(vec![0.25, -1.0, 3.0, 0.0]);
        let x = batch(vec![1.0, 1.0, -2.0, 0.5]);
        for s in [0.002, 0.1, 1.0, 80.0] {
            let sigma = NoiseLevel::new(s).unwrap();
            let score = score_from_denoiser(&x_star, &x, sigma).unwrap();
            for i in 0..4 {
                // d/dx [-(x - mu)^2 / (2 s^2)] = -(x - mu) / s^2
                let analytic = -(x.data[i] - x_star.data[i]) / (s * s);
                let rel = (score.data[i] - analytic).abs() / analytic.abs().max(1e-300);
                assert!(rel < 1e-15, "sigma {s}: {} vs {analytic}", score.data[i]);
            }
        }
    }

    #[test]
    fn training_sigma_distribution() {
        let c = EdmConstants::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_training_sigma(&mut rng, &c).get()).collect();
        assert!(draws.iter().all(|&s| s > 0.0));
        let mean_ln = draws.iter().map(|s| s.ln()).sum::<f64>() / draws.len() as f64;
        assert!((mean_ln + 1.2).abs() < 0.02, "{mean_ln}");
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[draws.len() / 2];
        assert!((median / (-1.2f64).exp() - 1.0).abs() < 0.02, "{median}");
    }

    #[test]
    fn loss_weight_identities() {
        let c = EdmConstants::default();
        let w = loss_weight(NoiseLevel::new(0.5).unwrap(), &c);
        assert!((w - 8.0).abs() < 1e-12);
        let far = loss_weight(NoiseLevel::new(1e6).unwrap(), &c);
        assert!((far - 4.0).abs() < 1e-9);
        for s in [1e-3, 0.1, 0.5, 2.0, 80.0] {
            let sigma = NoiseLevel::new(s).unwrap();
            let c_out = c.scalings(sigma).c_out;
            assert!((loss_weight(sigma, &c) * c_out * c_out - 1.0).abs() < 1e-12);
        }
    }
}

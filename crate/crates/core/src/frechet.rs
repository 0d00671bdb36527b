//! Fréchet distance between Gaussian fits of two image sets in pixel space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::tensor::Scalar;

fn moments<T: Scalar>(set: &ImageBatch<T>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.batch;
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let d = set.image_len();
    let x = DMatrix::from_fn(n, d, |i, j| set.image(i)[j].as_f64());
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn clamped_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    e.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    e
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of `(S1 S2)^(1/2)` is taken as the trace of the square root of
/// the symmetric matrix `S1^(1/2) S2 S1^(1/2)`, which has the same spectrum;
/// negative eigenvalues from round-off are clamped to zero.
pub fn pixel_frechet<T: Scalar>(real: &ImageBatch<T>, generated: &ImageBatch<T>) -> Result<f64> {
    if real.image_len() != generated.image_len() {
        return Err(Error::Shape(format!(
            "image sizes differ: {} vs {}",
            real.image_len(),
            generated.image_len()
        )));
    }
    let (mu1, s1) = moments(real)?;
    let (mu2, s2) = moments(generated)?;
    let e1 = clamped_eigen(s1.clone());
    let root1 = &e1.eigenvectors * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt)) * e1.eigenvectors.transpose();
    let inner = clamped_eigen(&root1 * &s2 * &root1);
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let dist = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_set(n: usize, mean: &[f64], std: &[f64], rng: &mut ChaCha8Rng) -> ImageBatch<f64> {
        let d = mean.len();
        let z = Normal::new(0.0, 1.0).unwrap();
        let data = (0..n * d).map(|k| mean[k % d] + std[k % d] * z.sample(rng)).collect();
        ImageBatch::new(data, n, 1, 1, d).unwrap()
    }

    #[test]
    fn identical_sets_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian_set(50, &[0.0; 6], &[1.0; 6], &mut rng);
        assert!(pixel_frechet(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn mean_shift_gives_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian_set(40, &[0.0; 5], &[0.7; 5], &mut rng);
        let v = [0.5, -1.0, 0.0, 2.0, 0.25];
        let mut b = a.clone();
        for i in 0..b.batch {
            b.image_mut(i).iter_mut().zip(&v).for_each(|(x, dv)| *x += dv);
        }
        let want: f64 = v.iter().map(|x| x * x).sum();
        assert!((pixel_frechet(&a, &b).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn seeded_gaussians_match_analytic_distance() {
        // diagonal covariances: d = |mu1-mu2|^2 + sum (s1 - s2)^2
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let (m1, s1) = (vec![0.0; d], vec![1.0; d]);
        let (m2, s2) = (vec![1.0; d], vec![2.0; d]);
        let a = gaussian_set(40_000, &m1, &s1, &mut rng);
        let b = gaussian_set(40_000, &m2, &s2, &mut rng);
        let want = d as f64 * (1.0 + 1.0);
        let got = pixel_frechet(&a, &b).unwrap();
        assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    }

    #[test]
    fn single_sample_is_rejected() {
        let a = ImageBatch::<f64>::zeros(1, 1, 2, 2);
        assert!(matches!(pixel_frechet(&a, &a), Err(Error::TooFewSamples { .. })));
    }
}

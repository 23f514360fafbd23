use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const DEFAULT_PROJECTIONS: usize = 128;
pub const UNIFORMITY_BINS: usize = 10;
const MAX_FRECHET_DIMS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: &'static str,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub projections: Option<usize>,
    pub seed: Option<u64>,
}

fn moments<E: Element>(x: &Tensor<E>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.row_len());
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for (k, v) in x.row(i).iter().enumerate() {
            mu[k] += v.as_f64();
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let mut c = DVector::zeros(d);
    for i in 0..n {
        for (k, v) in x.row(i).iter().enumerate() {
            c[k] = v.as_f64() - mu[k];
        }
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn check_pair<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.dims().len() != 2 || b.dims().len() != 2 || a.row_len() != b.row_len() {
        return Err(Error::shape(format!(
            "sample dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_gaussian_distance<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<MetricReport> {
    check_pair(a, b)?;
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::arg(
            "Fréchet distance needs at least 2 samples per set",
        ));
    }
    if a.row_len() > MAX_FRECHET_DIMS {
        return Err(Error::arg(format!(
            "Fréchet distance supports at most {MAX_FRECHET_DIMS} dims, got {}",
            a.row_len()
        )));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let sa = psd_sqrt(cov_a.clone());
    let mut inner = &sa * &cov_b * &sa;
    // symmetrize away rounding before the eigensolver
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(MetricReport {
        name: "frechet",
        value: value.max(0.0),
        n_a: a.rows(),
        n_b: b.rows(),
        projections: None,
        seed: None,
    })
}

/// Value of the empirical quantile function at level `u ∈ (0, 1)`, with
/// linear interpolation between order statistics.
fn quantile(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    let pos = (u * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq: f64 = if a.len() == b.len() {
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
    } else {
        let n = a.len().max(b.len());
        (0..n)
            .map(|k| {
                let u = (k as f64 + 0.5) / n as f64;
                (quantile(&a, u) - quantile(&b, u)).powi(2)
            })
            .sum::<f64>()
            / n as f64
    };
    sq.sqrt()
}

/// Mean 1D 2-Wasserstein distance over `n_projections` random unit
/// directions drawn from the stream keyed by `seed`.
pub fn sliced_wasserstein<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    n_projections: usize,
    seed: u64,
) -> Result<MetricReport> {
    check_pair(a, b)?;
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::arg("sliced Wasserstein needs non-empty sample sets"));
    }
    if n_projections == 0 {
        return Err(Error::arg("need at least one projection"));
    }
    let d = a.row_len();
    let mut rng = SeedStream::derive(seed, "projections");
    let project = |x: &Tensor<E>, u: &[f64]| -> Vec<f64> {
        (0..x.rows())
            .map(|i| x.row(i).iter().zip(u).map(|(v, w)| v.as_f64() * w).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        total += wasserstein_1d(project(a, &u), project(b, &u));
    }
    Ok(MetricReport {
        name: "sliced_wasserstein",
        value: total / n_projections as f64,
        n_a: a.rows(),
        n_b: b.rows(),
        projections: Some(n_projections),
        seed: Some(seed),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniformityReport {
    pub counts: Vec<usize>,
    pub expected: Vec<f64>,
    pub max_abs_dev: f64,
    /// Largest per-bin |z| under the multinomial null.
    pub max_abs_z: f64,
}

/// Histogram of `t ∈ [1, T]` over ten equal-width bins against the uniform
/// distribution.
pub fn t_uniformity_stat(ts: &[usize], horizon: usize) -> Result<UniformityReport> {
    if ts.is_empty() {
        return Err(Error::arg("no step values"));
    }
    if let Some(t) = ts.iter().find(|&&t| t < 1 || t > horizon) {
        return Err(Error::arg(format!("step {t} outside [1, {horizon}]")));
    }
    let bin = |t: usize| (t - 1) * UNIFORMITY_BINS / horizon;
    let mut width = [0usize; UNIFORMITY_BINS];
    (1..=horizon).for_each(|t| width[bin(t)] += 1);
    let mut counts = vec![0usize; UNIFORMITY_BINS];
    ts.iter().for_each(|&t| counts[bin(t)] += 1);
    let n = ts.len() as f64;
    let mut expected = Vec::with_capacity(UNIFORMITY_BINS);
    let (mut max_dev, mut max_z) = (0.0f64, 0.0f64);
    for k in 0..UNIFORMITY_BINS {
        let p = width[k] as f64 / horizon as f64;
        let e = n * p;
        expected.push(e);
        if width[k] == 0 {
            continue;
        }
        let dev = counts[k] as f64 - e;
        max_dev = max_dev.max(dev.abs());
        let sd = (n * p * (1.0 - p)).sqrt();
        let z = if sd > 0.0 { dev / sd } else { 0.0 };
        max_z = max_z.max(z.abs());
    }
    Ok(UniformityReport {
        counts,
        expected,
        max_abs_dev: max_dev,
        max_abs_z: max_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len(), 1], v).unwrap()
    }

    fn gaussian(n: usize, d: usize, shift: f64, scale: f64, seed: u64) -> Tensor<f64> {
        let mut t: Tensor<f64> = SeedStream::from_seed(seed).normal_tensor(&[n, d]);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = shift + scale * *v);
        t
    }

    #[test]
    fn frechet_identity() {
        let a = gaussian(500, 5, 0.0, 1.0, 1);
        assert!(frechet_gaussian_distance(&a, &a).unwrap().value < 1e-8);
    }

    #[test]
    fn frechet_one_dimensional_cases() {
        // equal spread, means 0 and 1
        let base: Vec<f64> = (0..1000).map(|i| (i as f64 / 999.0) - 0.5).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 1.0).collect();
        let r = frechet_gaussian_distance(&col(&base), &col(&shifted)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9);
        // equal means, σ = 1 vs σ = 2: rescale a unit-variance set
        let a = gaussian(1000, 1, 0.0, 1.0, 2).to_f64_vec();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt();
        let unit: Vec<f64> = a.iter().map(|v| (v - mean) / sd).collect();
        let double: Vec<f64> = unit.iter().map(|v| 2.0 * v).collect();
        let r = frechet_gaussian_distance(&col(&unit), &col(&double)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn frechet_needs_two_samples() {
        assert!(frechet_gaussian_distance(&col(&[1.0]), &col(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn frechet_shrinks_with_sample_size() {
        let mean_over = |n: usize| {
            (0..5)
                .map(|s| {
                    let a = gaussian(n, 2, 0.0, 1.0, 100 + s);
                    let b = gaussian(n, 2, 0.0, 1.0, 200 + s);
                    frechet_gaussian_distance(&a, &b).unwrap().value
                })
                .sum::<f64>()
        };
        let (a, b, c) = (mean_over(100), mean_over(1000), mean_over(10_000));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn sliced_identity_and_point_masses() {
        let a = gaussian(300, 3, 0.0, 1.0, 3);
        assert_eq!(sliced_wasserstein(&a, &a, 16, 0).unwrap().value, 0.0);
        let r = sliced_wasserstein(&col(&[0.0; 5]), &col(&[1.0; 3]), 4, 0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert_eq!(r.projections, Some(4));
        assert!(sliced_wasserstein(&col(&[]), &col(&[1.0]), 4, 0).is_err());
    }

    #[test]
    fn sliced_translation_bound() {
        let a = gaussian(400, 2, 0.0, 1.0, 4);
        let v = [0.6, -0.8];
        let mut b = a.clone();
        for i in 0..b.rows() {
            for (x, s) in b.row_mut(i).iter_mut().zip(v) {
                *x += s;
            }
        }
        let r = sliced_wasserstein(&a, &b, 512, 9).unwrap().value;
        // every projected sample moves by ⟨u, v⟩, so the distance is E|⟨u, v⟩|
        // = 2‖v‖/π in two dimensions
        assert!(r <= 1.0 + 1e-9);
        assert!((r - 2.0 / std::f64::consts::PI).abs() < 0.05, "{r}");
    }

    #[test]
    fn uniformity_cases() {
        let all: Vec<usize> = (1..=100).collect();
        let r = t_uniformity_stat(&all, 100).unwrap();
        assert_eq!(r.max_abs_z, 0.0);
        let top = vec![100; 1000];
        assert!(t_uniformity_stat(&top, 100).unwrap().max_abs_z > 3.0);
        assert!(t_uniformity_stat(&[], 100).is_err());
        assert!(t_uniformity_stat(&[0], 100).is_err());
    }

    proptest! {
        #[test]
        fn distances_symmetric(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let a = gaussian(60, 3, 0.0, 1.0, seed);
            let b = gaussian(45, 3, shift, 1.5, seed + 1);
            let f = |x: &Tensor<f64>, y: &Tensor<f64>| frechet_gaussian_distance(x, y).unwrap().value;
            prop_assert!((f(&a, &b) - f(&b, &a)).abs() < 1e-8);
            let s = |x: &Tensor<f64>, y: &Tensor<f64>| sliced_wasserstein(x, y, 8, 1).unwrap().value;
            prop_assert!((s(&a, &b) - s(&b, &a)).abs() < 1e-8);
            prop_assert!(f(&a, &b) >= 0.0 && s(&a, &b) >= 0.0);
        }
    }
}

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, standard_normals};

use super::functions::{BenchmarkFunction, DOMAIN};

/// `n` equally spaced inputs `10·i/n`, `i = 1..=n`, with `f(x) + noise_sd·ε`.
pub fn make_dataset(id: BenchmarkFunction, n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("a benchmark dataset needs at least two points"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid("noise SD must be non-negative"));
    }
    let x: Vec<f64> = (1..=n).map(|i| DOMAIN.1 * i as f64 / n as f64).collect();
    let eps = standard_normals(&mut rng_from_seed(seed), n);
    let y = x.iter().zip(&eps).map(|(&x, e)| id.value(x) + noise_sd * e).collect();
    Ok(Dataset::new(x, y)?.with_meta(DatasetMeta {
        function: id.name().to_string(),
        noise_sd,
        seed,
        n,
    }))
}

/// Noiseless function values at a dataset's inputs.
pub fn truth(id: BenchmarkFunction, data: &Dataset) -> Vec<f64> {
    data.x.iter().map(|&x| id.value(x)).collect()
}

/// `sin(πx)/(πx)` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    let a = std::f64::consts::PI * x;
    if a == 0.0 {
        1.0
    } else {
        a.sin() / a
    }
}

/// Non-monotone sinc data: `n` linearly spaced inputs on `[-1, 1]` with Gaussian noise of
/// the given variance.
pub fn sinc_dataset(n: usize, noise_variance: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("a sinc dataset needs at least two points"));
    }
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(Error::invalid("noise variance must be non-negative"));
    }
    let sd = noise_variance.sqrt();
    let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let eps = standard_normals(&mut rng_from_seed(seed), n);
    let y = x.iter().zip(&eps).map(|(&x, e)| sinc(x) + sd * e).collect();
    Ok(Dataset::new(x, y)?.with_meta(DatasetMeta {
        function: "sinc".into(),
        noise_sd: sd,
        seed,
        n,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_sd;

    #[test]
    fn noiseless_equals_function() {
        for f in BenchmarkFunction::ALL {
            let d = make_dataset(f, 100, 0.0, 3).unwrap();
            assert_eq!(d.y, truth(f, &d));
            assert_eq!(d.x[0], 0.1);
            assert_eq!(*d.x.last().unwrap(), 10.0);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = make_dataset(BenchmarkFunction::Step, 100, 1.0, 9).unwrap();
        let b = make_dataset(BenchmarkFunction::Step, 100, 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_dataset(BenchmarkFunction::Step, 100, 1.0, 10).unwrap());
    }

    #[test]
    fn residual_sd_matches_noise() {
        let d = make_dataset(BenchmarkFunction::Linear, 100_000, 0.7, 1).unwrap();
        let r: Vec<f64> = d.y.iter().zip(truth(BenchmarkFunction::Linear, &d)).map(|(y, f)| y - f).collect();
        let sd = sample_sd(&r);
        assert!((sd / 0.7 - 1.0).abs() < 0.01, "{sd}");
    }

    #[test]
    fn sinc_layout() {
        let d = sinc_dataset(50, 0.0, 0).unwrap();
        assert_eq!(d.x[0], -1.0);
        assert_eq!(d.x[49], 1.0);
        assert!((sinc(0.5) - 2.0 / std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(sinc(0.0), 1.0);
        assert!(d.y.iter().zip(&d.x).all(|(y, x)| *y == sinc(*x)));
    }
}

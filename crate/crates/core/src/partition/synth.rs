use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{FedError, Result};
use crate::nn::Task;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gaussian class blobs. Each class owns `modes` unit-variance clusters
/// whose centers sit at distance `separation` from the origin in random
/// directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub n: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub modes: usize,
    pub seed: u64,
}

impl BlobParams {
    pub fn generate(&self) -> Result<Dataset> {
        let BlobParams {
            n,
            classes,
            dims,
            separation,
            modes,
            seed,
        } = *self;
        if classes < 2
            || dims == 0
            || modes == 0
            || n < classes * 10
            || !separation.is_finite()
            || separation < 0.0
        {
            return Err(FedError::Config(format!(
                "degenerate blob parameters: n={n}, classes={classes}, dims={dims}, modes={modes}, separation={separation} (need n >= 10 * classes)"
            )));
        }
        let mut rng = Rng::seed_from_u64(seed);
        let mut centers = Vec::with_capacity(classes * modes);
        for _ in 0..classes * modes {
            let dir: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            centers.push(
                dir.into_iter()
                    .map(|v| separation * v / norm)
                    .collect::<Vec<_>>(),
            );
        }
        let mut features = Vec::with_capacity(n * dims);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let mode = rng.random_range(0..modes);
            let c = &centers[class * modes + mode];
            for &mu in c {
                let z: f64 = rng.sample(StandardNormal);
                features.push(mu + z);
            }
            labels.push(class as f64);
        }
        Dataset::new(
            Tensor::new(vec![n, dims], features)?,
            Tensor::new(vec![n, 1], labels)?,
            Task::Classification { classes },
        )
    }
}

pub fn synth_classification(
    n: usize,
    classes: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobParams {
        n,
        classes,
        dims,
        separation,
        modes: 1,
        seed,
    }
    .generate()
}

/// Linear-plus-sine regression target with Gaussian label noise.
pub fn synth_regression(n: usize, dims: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 || dims == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(FedError::Config(format!(
            "degenerate regression parameters: n={n}, dims={dims}, noise={noise}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let scale = 1.0 / (dims as f64).sqrt();
    let w: Vec<f64> = (0..dims)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let lin: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let eps: f64 = rng.sample(StandardNormal);
        labels.push(2.0 * lin + (2.0 * x[0]).sin() + noise * eps);
        features.extend(x);
    }
    Dataset::new(
        Tensor::new(vec![n, dims], features)?,
        Tensor::new(vec![n, 1], labels)?,
        Task::Regression,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = synth_classification(100, 2, 4, 3.0, 7).unwrap();
        let b = synth_classification(100, 2, 4, 3.0, 7).unwrap();
        assert!(a.features().bitwise_eq(b.features()));
        assert_eq!(a.labels(), b.labels());
        let c = synth_classification(100, 2, 4, 3.0, 8).unwrap();
        assert!(!a.features().bitwise_eq(c.features()));
        let r1 = synth_regression(50, 3, 0.1, 1).unwrap();
        let r2 = synth_regression(50, 3, 0.1, 1).unwrap();
        assert!(r1.labels().bitwise_eq(r2.labels()));
    }

    #[test]
    fn degenerate_parameters_rejected() {
        assert!(synth_classification(15, 2, 4, 3.0, 0).is_err());
        assert!(synth_classification(100, 1, 4, 3.0, 0).is_err());
        assert!(synth_classification(100, 2, 0, 3.0, 0).is_err());
        assert!(synth_regression(100, 2, -1.0, 0).is_err());
    }

    #[test]
    fn balanced_labels() {
        let d = synth_classification(300, 3, 2, 1.0, 0).unwrap();
        for c in 0..3 {
            let count = d.label_values().iter().filter(|&&y| y == c as f64).count();
            assert_eq!(count, 100);
        }
    }
}

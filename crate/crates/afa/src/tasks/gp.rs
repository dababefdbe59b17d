//! Gaussian-process task prior.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::tasks::dataset::{Dataset, Labels, TaskKind, TaskMeta};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    /// Matern with smoothness 5/2.
    Matern,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpPriorConfig {
    pub d: usize,
    pub kernel: KernelKind,
    pub lengthscale_range: (f64, f64),
    pub outputscale_range: (f64, f64),
    pub noise_std: f64,
    /// Number of informative features drawn uniformly from this range;
    /// the rest get lengthscale 1e6, effectively removing them.
    pub informative_range: (usize, usize),
}

impl Default for GpPriorConfig {
    fn default() -> Self {
        Self {
            d: 10,
            kernel: KernelKind::Rbf,
            lengthscale_range: (0.1, 5.0),
            outputscale_range: (0.5, 2.0),
            noise_std: 2e-2,
            informative_range: (1, 10),
        }
    }
}

impl GpPriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lengthscale_range.0 > 0.0
            && self.lengthscale_range.0 <= self.lengthscale_range.1
            && self.outputscale_range.0 > 0.0
            && self.outputscale_range.0 <= self.outputscale_range.1
            && self.noise_std > 0.0
            && self.informative_range.0 <= self.informative_range.1
            && self.informative_range.1 <= self.d
            && self.informative_range.0 >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid GP prior configuration".into()))
        }
    }
}

/// A sampled task's kernel, shared with the GP oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpKernel {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub outputscale: f64,
    pub noise_std: f64,
}

pub const UNINFORMATIVE_LENGTHSCALE: f64 = 1e6;

impl GpKernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Rbf => {
                let mut s = 0.0;
                for ((&x, &y), &l) in a.iter().zip(b).zip(&self.lengthscales) {
                    let d = (x - y) / l;
                    s += d * d;
                }
                self.outputscale * (-0.5 * s).exp()
            }
            KernelKind::Matern => {
                let mut s = 0.0;
                for ((&x, &y), &l) in a.iter().zip(b).zip(&self.lengthscales) {
                    let d = (x - y) / l;
                    s += d * d;
                }
                let r = s.sqrt();
                let sq5 = 5.0_f64.sqrt();
                self.outputscale * (1.0 + sq5 * r + 5.0 * r * r / 3.0) * (-sq5 * r).exp()
            }
        }
    }

    /// Dense kernel matrix over rows of `x`.
    pub fn matrix(&self, x: &Tensor) -> Tensor {
        let (n, _) = x.dims2().expect("rank-2 inputs");
        let mut k = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(x.row(i), x.row(j));
                k.set2(i, j, v);
                k.set2(j, i, v);
            }
        }
        k
    }
}

/// In-place lower Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` if a non-positive pivot is hit.
pub fn cholesky(a: &Tensor) -> Option<Tensor> {
    let n = a.shape()[0];
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get2(i, j);
            for k in 0..j {
                s -= l.get2(i, k) * l.get2(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l.set2(i, j, s.sqrt());
            } else {
                l.set2(i, j, s / l.get2(j, j));
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` then `L^T x = y` for a lower-triangular `L`.
pub fn cholesky_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.shape()[0];
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l.get2(i, k) * y[k];
        }
        y[i] = s / l.get2(i, i);
    }
    let mut x = y;
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l.get2(k, i) * x[k];
        }
        x[i] = s / l.get2(i, i);
    }
    x
}

/// Cholesky with escalating jitter: the noise term usually suffices, but a
/// degenerate draw gets diagonal jitter 1e-10, escalating tenfold up to 1e-4.
pub fn cholesky_with_jitter(k: &Tensor) -> Result<Tensor> {
    if let Some(l) = cholesky(k) {
        return Ok(l);
    }
    let n = k.shape()[0];
    let mut jitter = 1e-10;
    while jitter <= 1e-4 {
        let mut kj = k.clone();
        for i in 0..n {
            let v = kj.get2(i, i) + jitter;
            kj.set2(i, i, v);
        }
        if let Some(l) = cholesky(&kj) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(Error::Cholesky { jittered: true })
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

/// Samples one regression task: i.i.d. standard-normal inputs, a random
/// ARD kernel with a uniformly chosen informative subset, and noisy function
/// values drawn through the Cholesky factor of `K + noise^2 I`.
pub fn sample_gp_task(cfg: &GpPriorConfig, n: usize, rng: &mut impl Rng) -> Result<(Dataset, GpKernel)> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::Config("GP task needs at least 2 samples".into()));
    }
    let d = cfg.d;
    let mut xdata = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        xdata.push(StandardNormal.sample(rng));
    }
    let x = Tensor::matrix(n, d, xdata)?;

    let n_inf = rng.random_range(cfg.informative_range.0..=cfg.informative_range.1);
    let mut idx: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let mut informative = vec![false; d];
    for &j in idx.iter().take(n_inf) {
        informative[j] = true;
    }
    let lengthscales: Vec<f64> = informative
        .iter()
        .map(|&inf| if inf { uniform(rng, cfg.lengthscale_range) } else { UNINFORMATIVE_LENGTHSCALE })
        .collect();
    let kernel = GpKernel {
        kind: cfg.kernel,
        lengthscales,
        outputscale: uniform(rng, cfg.outputscale_range),
        noise_std: cfg.noise_std,
    };

    let mut k = kernel.matrix(&x);
    for i in 0..n {
        let v = k.get2(i, i) + cfg.noise_std * cfg.noise_std;
        k.set2(i, i, v);
    }
    let l = cholesky_with_jitter(&k)?;
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..=i {
            s += l.get2(i, j) * z[j];
        }
        y[i] = s;
    }

    let r = Tensor::full(&[n, d], 1.0);
    let mut ds = Dataset::new(x, r, Labels::Regression(y), vec![false; d], TaskKind::Regression)?;
    ds.meta = TaskMeta::Gp {
        lengthscales: kernel.lengthscales.clone(),
        outputscale: kernel.outputscale,
        noise_std: kernel.noise_std,
        informative: informative.clone(),
    };
    Ok((ds, kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    #[test]
    fn kernel_at_zero_distance_equals_outputscale() {
        for kind in [KernelKind::Rbf, KernelKind::Matern] {
            let k = GpKernel { kind, lengthscales: vec![0.5, 2.0], outputscale: 1.7, noise_std: 0.02 };
            let x = [0.3, -1.2];
            assert_eq!(k.eval(&x, &x), 1.7);
        }
    }

    #[test]
    fn default_prior_has_ten_features() {
        let cfg = GpPriorConfig::default();
        assert_eq!(cfg.d, 10);
        assert_eq!(cfg.lengthscale_range, (0.1, 5.0));
        assert_eq!(cfg.outputscale_range, (0.5, 2.0));
        assert_eq!(cfg.noise_std, 2e-2);
        let mut rng = rng_from(5, &[]);
        let (ds, _) = sample_gp_task(&cfg, 16, &mut rng).unwrap();
        assert_eq!(ds.d(), 10);
        assert_eq!(ds.kind, TaskKind::Regression);
    }

    #[test]
    fn noisy_kernel_matrix_min_eigenvalue_is_at_least_noise_variance() {
        let cfg = GpPriorConfig { d: 4, informative_range: (1, 4), ..GpPriorConfig::default() };
        let mut rng = rng_from(17, &[]);
        let (ds, kernel) = sample_gp_task(&cfg, 50, &mut rng).unwrap();
        let mut k = kernel.matrix(&ds.x);
        let n = 50;
        let s2 = cfg.noise_std * cfg.noise_std;
        for i in 0..n {
            let v = k.get2(i, i) + s2;
            k.set2(i, i, v);
        }
        let m = nalgebra::DMatrix::from_row_slice(n, n, k.data());
        let eig = m.symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= s2 * 0.99, "min eigenvalue {min} below {s2}");
    }

    #[test]
    fn raw_kernel_matrices_are_psd() {
        let cfg = GpPriorConfig { d: 3, informative_range: (1, 3), ..GpPriorConfig::default() };
        for seed in 0..10 {
            let mut rng = rng_from(seed, &[9]);
            let (ds, kernel) = sample_gp_task(&cfg, 24, &mut rng).unwrap();
            let k = kernel.matrix(&ds.x);
            let m = nalgebra::DMatrix::from_row_slice(24, 24, k.data());
            let min = m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-10, "seed {seed}: min eigenvalue {min}");
        }
    }

    #[test]
    fn sampling_is_reproducible_from_seed() {
        let cfg = GpPriorConfig::default();
        let (a, _) = sample_gp_task(&cfg, 8, &mut rng_from(99, &[])).unwrap();
        let (b, _) = sample_gp_task(&cfg, 8, &mut rng_from(99, &[])).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn cholesky_solve_inverts_spd_system() {
        let k = Tensor::matrix(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let l = cholesky(&k).unwrap();
        let x = cholesky_solve(&l, &[1.0, 2.0]);
        // K x should be [1, 2]
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
    }
}

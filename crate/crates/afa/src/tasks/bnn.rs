//! Bayesian-neural-network task prior for classification.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::tasks::dataset::{Dataset, Labels, TaskKind, TaskMeta};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BnnPriorConfig {
    pub hidden_dim: usize,
    pub cluster_count_range: (usize, usize),
    pub feature_subset_range: (usize, usize),
    pub prevalence_range: (f64, f64),
    /// Importance weights and layer scale factors are drawn from this range.
    pub weight_scale_range: (f64, f64),
    pub temperature_range: (f64, f64),
    /// Leading columns treated as always-observed baseline features.
    pub baseline_count: usize,
}

impl Default for BnnPriorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 8,
            cluster_count_range: (1, 3),
            feature_subset_range: (1, 4),
            prevalence_range: (0.05, 0.95),
            weight_scale_range: (0.5, 2.0),
            temperature_range: (0.5, 2.0),
            baseline_count: 1,
        }
    }
}

impl BnnPriorConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.prevalence_range;
        let ok = p.0 > 0.0
            && p.1 < 1.0
            && p.0 <= p.1
            && self.hidden_dim >= 1
            && self.cluster_count_range.0 >= 1
            && self.cluster_count_range.0 <= self.cluster_count_range.1
            && self.feature_subset_range.0 <= self.feature_subset_range.1
            && self.weight_scale_range.0 > 0.0
            && self.temperature_range.0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid BNN prior configuration".into()))
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

/// Two-layer tanh network with per-feature importance weights.
struct RandomNet {
    w1: Vec<f64>, // d x h
    b1: Vec<f64>,
    w2: Vec<f64>, // h
    b2: f64,
    d: usize,
    h: usize,
}

impl RandomNet {
    fn sample(d: usize, h: usize, importance: &[f64], scale_range: (f64, f64), rng: &mut impl Rng) -> Self {
        let s1 = uniform(rng, scale_range);
        let s2 = uniform(rng, scale_range);
        let mut gauss = |scale: f64| -> f64 {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        };
        let mut w1 = Vec::with_capacity(d * h);
        for j in 0..d {
            for _ in 0..h {
                w1.push(gauss(importance[j] * s1));
            }
        }
        let b1 = (0..h).map(|_| gauss(s1)).collect();
        let w2 = (0..h).map(|_| gauss(s2)).collect();
        let b2 = gauss(s2);
        Self { w1, b1, w2, b2, d, h }
    }

    fn logit(&self, x_masked: &[f64]) -> f64 {
        let mut out = self.b2;
        for k in 0..self.h {
            let mut z = self.b1[k];
            for j in 0..self.d {
                z += self.w1[j * self.h + k] * x_masked[j];
            }
            out += self.w2[k] * z.tanh();
        }
        out
    }
}

/// Bisects the bias shift so that the mean positive probability matches the
/// target prevalence within `tol`. The mean of `sigmoid(z + b)` over fixed
/// logits is strictly increasing in `b`, so bisection always converges when
/// the target is interior.
pub fn bisect_bias(logits: &[f64], target: f64, tol: f64) -> Result<f64> {
    let rate = |b: f64| logits.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) > target || rate(hi) < target {
        return Err(Error::BisectionFailed { target });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = rate(mid);
        if (r - target).abs() <= tol {
            return Ok(mid);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::BisectionFailed { target })
}

/// Samples a binary classification task over `n` rows drawn from the pool:
/// rows are clustered around random centers, each cluster masks its own
/// informative feature subset, a random two-layer tanh network produces
/// logits, temperature rescaling and a bisected bias shift set the target
/// prevalence, and labels are sampled Bernoulli. Generative probabilities
/// are stored for KL evaluation.
pub fn sample_bnn_task(
    cfg: &BnnPriorConfig,
    x_pool: &Tensor,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    cfg.validate()?;
    let (pool_n, d) = x_pool.dims2()?;
    if pool_n < n {
        return Err(Error::Config(format!("pool has {pool_n} rows, task needs {n}")));
    }
    if cfg.feature_subset_range.1 > d {
        return Err(Error::Config("feature subset range exceeds feature count".into()));
    }

    // draw n distinct pool rows
    let mut idx: Vec<usize> = (0..pool_n).collect();
    for i in (1..pool_n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx.truncate(n);
    let mut xdata = Vec::with_capacity(n * d);
    for &i in &idx {
        xdata.extend_from_slice(x_pool.row(i));
    }
    let x = Tensor::matrix(n, d, xdata)?;

    // clusters by nearest center
    let n_clusters = rng.random_range(cfg.cluster_count_range.0..=cfg.cluster_count_range.1);
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let cluster_of: Vec<usize> = (0..n)
        .map(|i| {
            let row = x.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist: f64 = row.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        })
        .collect();

    // per-cluster informative feature masks
    let masks: Vec<Vec<bool>> = (0..n_clusters)
        .map(|_| {
            let size = rng.random_range(cfg.feature_subset_range.0..=cfg.feature_subset_range.1);
            let mut cols: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                cols.swap(i, rng.random_range(0..=i));
            }
            let mut m = vec![false; d];
            for &j in cols.iter().take(size) {
                m[j] = true;
            }
            m
        })
        .collect();

    let importance: Vec<f64> = (0..d).map(|_| uniform(rng, cfg.weight_scale_range)).collect();
    let net = RandomNet::sample(d, cfg.hidden_dim, &importance, cfg.weight_scale_range, rng);
    let temperature = uniform(rng, cfg.temperature_range);

    let mut logits = Vec::with_capacity(n);
    let mut masked = vec![0.0; d];
    for i in 0..n {
        let m = &masks[cluster_of[i]];
        for j in 0..d {
            masked[j] = if m[j] { x.get2(i, j) } else { 0.0 };
        }
        logits.push(net.logit(&masked) / temperature);
    }

    let target = uniform(rng, cfg.prevalence_range);
    let bias = bisect_bias(&logits, target, 1e-4)?;

    let mut labels = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for &z in &logits {
        let p = sigmoid(z + bias);
        labels.push(if rng.random::<f64>() < p { 1 } else { 0 });
        probs.push(vec![1.0 - p, p]);
    }

    let mut baseline = vec![false; d];
    for flag in baseline.iter_mut().take(cfg.baseline_count) {
        *flag = true;
    }
    let r = Tensor::full(&[n, d], 1.0);
    let mut ds = Dataset::new(x, r, Labels::Classification(labels), baseline, TaskKind::Classification(2))?;
    ds.true_probs = Some(probs);
    ds.meta = TaskMeta::Bnn { prevalence: target };
    Ok(ds)
}

/// Standard-normal feature pool for fully synthetic BNN tasks.
pub fn gaussian_pool(rows: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, d, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    #[test]
    fn default_hidden_dim_is_eight() {
        assert_eq!(BnnPriorConfig::default().hidden_dim, 8);
        assert_eq!(BnnPriorConfig::default().prevalence_range, (0.05, 0.95));
    }

    #[test]
    fn constant_logits_prevalence_equals_sigmoid_bias() {
        // all-zero importance-equivalent: constant logits
        let logits = vec![0.0; 1000];
        let b = bisect_bias(&logits, 0.3, 1e-10).unwrap();
        assert!((sigmoid(b) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn empirical_positive_rate_tracks_prevalence_target() {
        let mut rng = rng_from(21, &[]);
        let pool = gaussian_pool(2500, 6, &mut rng);
        let cfg = BnnPriorConfig {
            prevalence_range: (0.3, 0.3),
            feature_subset_range: (1, 4),
            ..BnnPriorConfig::default()
        };
        let ds = sample_bnn_task(&cfg, &pool, 2000, &mut rng).unwrap();
        let pos: f64 = match &ds.y {
            Labels::Classification(v) => v.iter().map(|&c| c as f64).sum::<f64>() / v.len() as f64,
            _ => unreachable!(),
        };
        assert!((0.28..=0.32).contains(&pos), "positive rate {pos}");
    }

    #[test]
    fn true_probs_are_stored_and_valid() {
        let mut rng = rng_from(22, &[]);
        let pool = gaussian_pool(300, 5, &mut rng);
        let cfg = BnnPriorConfig { feature_subset_range: (1, 3), ..BnnPriorConfig::default() };
        let ds = sample_bnn_task(&cfg, &pool, 100, &mut rng).unwrap();
        let probs = ds.true_probs.as_ref().unwrap();
        assert_eq!(probs.len(), 100);
        for p in probs {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(p[1] > 0.0 && p[1] < 1.0);
        }
    }
}

//! Retrospective missingness mechanisms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tasks::dataset::Dataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Mcar,
    Mar,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MissingnessConfig {
    pub mechanism: Mechanism,
    /// Pointwise cap on p(R_j = 0 | X0); must be <= 0.5.
    pub max_missing_prob: f64,
    /// MCAR only: one fixed rate for every feature instead of per-feature
    /// uniform draws from [0, max_missing_prob].
    #[serde(default)]
    pub fixed_rate: Option<f64>,
    /// MCAR only: explicit per-feature rates (overrides both modes above).
    #[serde(default)]
    pub per_feature_rates: Option<Vec<f64>>,
}

impl Default for MissingnessConfig {
    fn default() -> Self {
        Self { mechanism: Mechanism::Mcar, max_missing_prob: 0.5, fixed_rate: None, per_feature_rates: None }
    }
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.max_missing_prob) {
            return Err(Error::Config("max_missing_prob must lie in [0, 0.5]".into()));
        }
        if let Some(r) = self.fixed_rate {
            if !(0.0..=0.5).contains(&r) {
                return Err(Error::Config("fixed_rate must lie in [0, 0.5]".into()));
            }
        }
        if let Some(rates) = &self.per_feature_rates {
            if rates.iter().any(|r| !(0.0..=0.5).contains(r)) {
                return Err(Error::Config("per-feature rates must lie in [0, 0.5]".into()));
            }
        }
        Ok(())
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

/// Feature-specific missingness propensities: a random one-hidden-layer tanh
/// network on the baseline covariates, squashed so that
/// p(R_j = 0 | X0) = cap * sigmoid(net_j(x0)) <= cap <= 0.5 pointwise.
#[derive(Clone, Debug)]
pub struct MarModel {
    cap: f64,
    baseline_cols: Vec<usize>,
    // per feature: (w1 [b x h], b1 [h], w2 [h], b2)
    nets: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)>,
    hidden: usize,
}

impl MarModel {
    pub fn sample(d: usize, baseline_cols: Vec<usize>, cap: f64, rng: &mut impl Rng) -> Result<Self> {
        if baseline_cols.is_empty() {
            return Err(Error::Config("MAR missingness requires baseline columns".into()));
        }
        let hidden = 8;
        let b = baseline_cols.len();
        let nets = (0..d)
            .map(|_| {
                let w1: Vec<f64> = (0..b * hidden).map(|_| StandardNormal.sample(rng)).collect();
                let b1: Vec<f64> = (0..hidden).map(|_| StandardNormal.sample(rng)).collect();
                let w2: Vec<f64> = (0..hidden).map(|_| StandardNormal.sample(rng)).collect();
                let b2: f64 = StandardNormal.sample(rng);
                (w1, b1, w2, b2)
            })
            .collect();
        Ok(Self { cap, baseline_cols, nets, hidden })
    }

    /// p(R_j = 0 | X0 = x0) for the given full feature row.
    pub fn missing_prob(&self, j: usize, row: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = &self.nets[j];
        let b = self.baseline_cols.len();
        let mut out = *b2;
        for k in 0..self.hidden {
            let mut z = b1[k];
            for (bi, &col) in self.baseline_cols.iter().enumerate() {
                z += w1[bi * self.hidden + k] * row[col];
                debug_assert!(bi < b);
            }
            out += w2[k] * z.tanh();
        }
        self.cap * sigmoid(out)
    }
}

/// Applies the configured mechanism, returning a dataset with an updated
/// mask. Baseline columns, feature values and labels are never touched.
pub fn apply_missingness(ds: &Dataset, cfg: &MissingnessConfig, rng: &mut impl Rng) -> Result<Dataset> {
    cfg.validate()?;
    let (n, d) = (ds.n(), ds.d());
    let mut out = ds.clone();
    match cfg.mechanism {
        Mechanism::Mcar => {
            let rates: Vec<f64> = if let Some(rates) = &cfg.per_feature_rates {
                if rates.len() != d {
                    return Err(Error::Config(format!("{} rates for {} features", rates.len(), d)));
                }
                rates.clone()
            } else if let Some(r) = cfg.fixed_rate {
                vec![r; d]
            } else {
                (0..d).map(|_| rng.random::<f64>() * cfg.max_missing_prob).collect()
            };
            for j in 0..d {
                if ds.baseline[j] {
                    continue;
                }
                for i in 0..n {
                    if rng.random::<f64>() < rates[j] {
                        out.r.set2(i, j, 0.0);
                    }
                }
            }
        }
        Mechanism::Mar => {
            let model = MarModel::sample(d, ds.baseline_indices(), cfg.max_missing_prob, rng)?;
            for i in 0..n {
                let row: Vec<f64> = (0..d).map(|j| ds.x.get2(i, j)).collect();
                for j in 0..d {
                    if ds.baseline[j] {
                        continue;
                    }
                    if rng.random::<f64>() < model.missing_prob(j, &row) {
                        out.r.set2(i, j, 0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::tasks::dataset::{Labels, TaskKind};
    use crate::util::rng_from;

    fn full_dataset(n: usize, d: usize, baseline: Vec<bool>) -> Dataset {
        let mut rng = rng_from(7, &[1]);
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Dataset::new(
            Tensor::matrix(n, d, data).unwrap(),
            Tensor::full(&[n, d], 1.0),
            Labels::Regression(vec![0.0; n]),
            baseline,
            TaskKind::Regression,
        )
        .unwrap()
    }

    #[test]
    fn zero_rate_keeps_mask_all_ones() {
        let ds = full_dataset(20, 3, vec![false; 3]);
        let cfg = MissingnessConfig { fixed_rate: Some(0.0), ..MissingnessConfig::default() };
        let out = apply_missingness(&ds, &cfg, &mut rng_from(1, &[])).unwrap();
        assert!(out.r.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_rate_drops_about_half() {
        let ds = full_dataset(10_000, 2, vec![false; 2]);
        let cfg = MissingnessConfig { fixed_rate: Some(0.5), ..MissingnessConfig::default() };
        let out = apply_missingness(&ds, &cfg, &mut rng_from(2, &[])).unwrap();
        for j in 0..2 {
            let missing: f64 =
                (0..10_000).map(|i| if out.observed(i, j) { 0.0 } else { 1.0 }).sum::<f64>() / 10_000.0;
            assert!((0.48..=0.52).contains(&missing), "feature {j}: missing fraction {missing}");
        }
    }

    #[test]
    fn never_alters_values_labels_or_baseline_columns() {
        let ds = full_dataset(200, 4, vec![true, false, false, false]);
        let cfg = MissingnessConfig { mechanism: Mechanism::Mar, ..MissingnessConfig::default() };
        let out = apply_missingness(&ds, &cfg, &mut rng_from(3, &[])).unwrap();
        assert_eq!(ds.x, out.x);
        assert_eq!(ds.y, out.y);
        for i in 0..200 {
            assert!(out.observed(i, 0));
        }
    }

    #[test]
    fn mar_propensities_respect_pointwise_cap() {
        let mut rng = rng_from(4, &[]);
        let model = MarModel::sample(5, vec![0], 0.5, &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..10_000 {
            let x0 = -5.0 + 10.0 * (i as f64 / 9_999.0);
            let row = [x0, 0.0, 0.0, 0.0, 0.0];
            for j in 1..5 {
                worst = worst.max(model.missing_prob(j, &row));
            }
        }
        assert!(worst <= 0.5, "max propensity {worst}");
    }

    #[test]
    fn mar_requires_baseline_columns() {
        let ds = full_dataset(10, 2, vec![false, false]);
        let cfg = MissingnessConfig { mechanism: Mechanism::Mar, ..MissingnessConfig::default() };
        assert!(apply_missingness(&ds, &cfg, &mut rng_from(5, &[])).is_err());
    }
}

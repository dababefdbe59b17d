//! Small discrete worlds with explicit joint probability tables.
//!
//! A world holds the joint pmf over (X0, X1..Xd, Y) plus per-feature
//! observation propensities whose parent set is either the baseline X0 alone
//! or X0 together with the feature itself (used to construct counterexamples
//! where missingness depends on the missing value).

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::tasks::dataset::{Dataset, Labels, TaskKind, TaskMeta};
use crate::{Error, Result};

pub const MAX_TABLE_CELLS: usize = 1_000_000;
pub const PMF_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propensity {
    /// p(R_j = 1 | X0), indexed by x0.
    OnBaseline(Vec<f64>),
    /// p(R_j = 1 | X0, X_j), indexed by x0 * card_j + x_j.
    OnSelf(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMechanism {
    Mar,
    Mnar,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSpec {
    pub x0_card: usize,
    pub feature_cards: Vec<usize>,
    pub y_card: usize,
    pub mechanism: WorldMechanism,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteWorld {
    pub x0_card: usize,
    pub feature_cards: Vec<usize>,
    pub y_card: usize,
    pmf: Vec<f64>,
    pub propensities: Vec<Propensity>,
}

/// One joint assignment.
#[derive(Clone, Debug, Default)]
pub struct Cell {
    pub x0: usize,
    pub features: Vec<usize>,
    pub y: usize,
}

impl DiscreteWorld {
    pub fn from_pmf(
        x0_card: usize,
        feature_cards: Vec<usize>,
        y_card: usize,
        pmf: Vec<f64>,
        propensities: Vec<Propensity>,
    ) -> Result<Self> {
        let w = Self { x0_card, feature_cards, y_card, pmf, propensities };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.table_size();
        if cells > MAX_TABLE_CELLS {
            return Err(Error::TableTooLarge { cells, limit: MAX_TABLE_CELLS });
        }
        if self.pmf.len() != cells {
            return Err(Error::Config(format!("pmf has {} cells, expected {cells}", self.pmf.len())));
        }
        if self.propensities.len() != self.feature_cards.len() {
            return Err(Error::Config("one propensity table per feature required".into()));
        }
        if self.pmf.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("pmf entries must lie in [0, 1]".into()));
        }
        let sum: f64 = self.pmf.iter().sum();
        if (sum - 1.0).abs() > PMF_SUM_TOL {
            return Err(Error::Config(format!("pmf sums to {sum}")));
        }
        for (j, prop) in self.propensities.iter().enumerate() {
            let expect = match prop {
                Propensity::OnBaseline(t) => (t.len() == self.x0_card, t),
                Propensity::OnSelf(t) => (t.len() == self.x0_card * self.feature_cards[j], t),
            };
            if !expect.0 {
                return Err(Error::Config(format!("propensity table {j} has wrong size")));
            }
            if expect.1.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Config(format!("propensity table {j} out of [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.feature_cards.len()
    }

    pub fn table_size(&self) -> usize {
        self.x0_card * self.feature_cards.iter().product::<usize>() * self.y_card
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn flat_index(&self, cell: &Cell) -> usize {
        let mut idx = cell.x0;
        for (j, &card) in self.feature_cards.iter().enumerate() {
            idx = idx * card + cell.features[j];
        }
        idx * self.y_card + cell.y
    }

    pub fn decode_into(&self, mut flat: usize, cell: &mut Cell) {
        cell.features.resize(self.n_features(), 0);
        cell.y = flat % self.y_card;
        flat /= self.y_card;
        for j in (0..self.n_features()).rev() {
            let card = self.feature_cards[j];
            cell.features[j] = flat % card;
            flat /= card;
        }
        cell.x0 = flat;
    }

    /// Visits every cell with positive or zero mass, in flat order.
    pub fn for_each_cell(&self, mut f: impl FnMut(&Cell, f64)) {
        let mut cell = Cell { x0: 0, features: vec![0; self.n_features()], y: 0 };
        for (flat, &p) in self.pmf.iter().enumerate() {
            self.decode_into(flat, &mut cell);
            f(&cell, p);
        }
    }

    /// p(R_j = 1 | parents) for the cell's values.
    pub fn prob_observed(&self, j: usize, cell: &Cell) -> f64 {
        match &self.propensities[j] {
            Propensity::OnBaseline(t) => t[cell.x0],
            Propensity::OnSelf(t) => t[cell.x0 * self.feature_cards[j] + cell.features[j]],
        }
    }

    /// p(y | x0, full feature assignment); None when the condition has zero
    /// probability.
    pub fn label_posterior_full(&self, x0: usize, features: &[usize]) -> Option<Vec<f64>> {
        let mut cell = Cell { x0, features: features.to_vec(), y: 0 };
        let mut probs = vec![0.0; self.y_card];
        let mut total = 0.0;
        for y in 0..self.y_card {
            cell.y = y;
            let p = self.pmf[self.flat_index(&cell)];
            probs[y] = p;
            total += p;
        }
        if total <= 0.0 {
            return None;
        }
        for p in &mut probs {
            *p /= total;
        }
        Some(probs)
    }

    /// Draws i.i.d. rows. The baseline variable becomes a leading feature
    /// column (always observed) when it has more than one support value.
    pub fn sample_dataset(&self, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
        let with_x0 = self.x0_card > 1;
        let d_cols = self.n_features() + usize::from(with_x0);
        let mut cum = Vec::with_capacity(self.pmf.len());
        let mut acc = 0.0;
        for &p in &self.pmf {
            acc += p;
            cum.push(acc);
        }
        let mut xs = Vec::with_capacity(n);
        let mut rmask = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut cell = Cell::default();
        for _ in 0..n {
            let u = rng.random::<f64>() * acc;
            let flat = cum.partition_point(|&c| c < u).min(self.pmf.len() - 1);
            self.decode_into(flat, &mut cell);
            let mut xrow = Vec::with_capacity(d_cols);
            let mut rrow = Vec::with_capacity(d_cols);
            if with_x0 {
                xrow.push(cell.x0 as f64);
                rrow.push(1.0);
            }
            for (j, &v) in cell.features.iter().enumerate() {
                xrow.push(v as f64);
                let p_obs = self.prob_observed(j, &cell);
                rrow.push(if rng.random::<f64>() < p_obs { 1.0 } else { 0.0 });
            }
            labels.push(cell.y);
            probs.push(self.label_posterior_full(cell.x0, &cell.features).expect("sampled cell"));
            xs.push(xrow);
            rs_push(&mut rmask, rrow);
        }
        let mut baseline = vec![false; d_cols];
        if with_x0 {
            baseline[0] = true;
        }
        let mut ds = Dataset::new(
            Tensor::from_rows(&xs)?,
            Tensor::from_rows(&rmask)?,
            Labels::Classification(labels),
            baseline,
            TaskKind::Classification(self.y_card),
        )?;
        ds.true_probs = Some(probs);
        ds.meta = TaskMeta::Discrete { world: String::new() };
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }
}

fn rs_push(rows: &mut Vec<Vec<f64>>, row: Vec<f64>) {
    rows.push(row);
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Samples a world with a Dirichlet(1) joint table and random propensities:
/// MAR wires each feature's observation probability to X0 only (drawn from
/// [0.5, 0.95], so positivity holds), MNAR wires it to the feature's own
/// value as well.
pub fn sample_discrete_world(spec: &WorldSpec, rng: &mut impl Rng) -> Result<DiscreteWorld> {
    let cells = spec.x0_card * spec.feature_cards.iter().product::<usize>() * spec.y_card;
    if cells > MAX_TABLE_CELLS {
        return Err(Error::TableTooLarge { cells, limit: MAX_TABLE_CELLS });
    }
    let mut pmf: Vec<f64> = (0..cells).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= sum;
    }
    let propensities = spec
        .feature_cards
        .iter()
        .map(|&card| match spec.mechanism {
            WorldMechanism::Mar => {
                Propensity::OnBaseline((0..spec.x0_card).map(|_| uniform(rng, 0.5, 0.95)).collect())
            }
            WorldMechanism::Mnar => {
                Propensity::OnSelf((0..spec.x0_card * card).map(|_| uniform(rng, 0.1, 0.9)).collect())
            }
        })
        .collect();
    DiscreteWorld::from_pmf(spec.x0_card, spec.feature_cards.clone(), spec.y_card, pmf, propensities)
}

/// Uniform independent (X1, Y) over 2x2: the candidate feature carries no
/// information about the label.
pub fn independent_uniform_world() -> DiscreteWorld {
    DiscreteWorld::from_pmf(1, vec![2], 2, vec![0.25; 4], vec![Propensity::OnBaseline(vec![1.0])])
        .expect("static world")
}

/// Y uniform binary; X1 = Y flipped with probability `flip`; remaining
/// features independent uniform noise. Fully observed.
pub fn copy_channel_world(flip: f64, extra_noise_features: usize) -> DiscreteWorld {
    let d = 1 + extra_noise_features;
    let feature_cards = vec![2; d];
    let y_card = 2;
    let cells = 2usize.pow(d as u32) * 2;
    let mut pmf = vec![0.0; cells];
    let world = DiscreteWorld {
        x0_card: 1,
        feature_cards: feature_cards.clone(),
        y_card,
        pmf: vec![0.0; cells],
        propensities: vec![Propensity::OnBaseline(vec![1.0]); d],
    };
    let mut cell = Cell::default();
    for flat in 0..cells {
        world.decode_into(flat, &mut cell);
        let p_y = 0.5;
        let p_x1 = if cell.features[0] == cell.y { 1.0 - flip } else { flip };
        let p_noise = 0.5_f64.powi(extra_noise_features as i32);
        pmf[flat] = p_y * p_x1 * p_noise;
    }
    DiscreteWorld::from_pmf(1, feature_cards, y_card, pmf, vec![Propensity::OnBaseline(vec![1.0]); d])
        .expect("static world")
}

/// World where two identical copies of the label are present (used to check
/// deterministic tie-breaking).
pub fn twin_copy_world() -> DiscreteWorld {
    let feature_cards = vec![2, 2];
    let cells = 8;
    let world = DiscreteWorld {
        x0_card: 1,
        feature_cards: feature_cards.clone(),
        y_card: 2,
        pmf: vec![0.0; cells],
        propensities: vec![Propensity::OnBaseline(vec![1.0]); 2],
    };
    let mut pmf = vec![0.0; cells];
    let mut cell = Cell::default();
    for (flat, p) in pmf.iter_mut().enumerate() {
        world.decode_into(flat, &mut cell);
        if cell.features[0] == cell.y && cell.features[1] == cell.y {
            *p = 0.5;
        }
    }
    DiscreteWorld::from_pmf(1, feature_cards, 2, pmf, vec![Propensity::OnBaseline(vec![1.0]); 2])
        .expect("static world")
}

/// Strongly MNAR world: X1 is a noisy copy of Y and R1 depends on the value
/// of X1 itself, so complete-case conditioning is biased.
pub fn mnar_counterexample() -> DiscreteWorld {
    let base = copy_channel_world(0.1, 0);
    DiscreteWorld::from_pmf(
        1,
        base.feature_cards.clone(),
        2,
        base.pmf.clone(),
        vec![Propensity::OnSelf(vec![0.95, 0.05])],
    )
    .expect("static world")
}

/// Task prior for the dominant-feature experiment: feature `dominant` is an
/// exact copy of the binary label, the other features agree with the label
/// with a per-task probability drawn from `noise_agreement_range`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CopyWorldPrior {
    pub d: usize,
    pub dominant: usize,
    pub noise_agreement_range: (f64, f64),
    /// Missing-rate range for non-dominant features in training tasks.
    pub missing_rate_range: (f64, f64),
}

impl Default for CopyWorldPrior {
    fn default() -> Self {
        Self { d: 4, dominant: 0, noise_agreement_range: (0.5, 0.75), missing_rate_range: (0.0, 0.3) }
    }
}

impl CopyWorldPrior {
    pub fn sample_world(&self, rng: &mut impl Rng) -> DiscreteWorld {
        let feature_cards = vec![2; self.d];
        let cells = 2usize.pow(self.d as u32) * 2;
        let agree: Vec<f64> = (0..self.d)
            .map(|j| {
                if j == self.dominant {
                    1.0
                } else {
                    uniform(rng, self.noise_agreement_range.0, self.noise_agreement_range.1)
                }
            })
            .collect();
        let scratch = DiscreteWorld {
            x0_card: 1,
            feature_cards: feature_cards.clone(),
            y_card: 2,
            pmf: vec![0.0; cells],
            propensities: vec![Propensity::OnBaseline(vec![1.0]); self.d],
        };
        let mut pmf = vec![0.0; cells];
        let mut cell = Cell::default();
        for (flat, p) in pmf.iter_mut().enumerate() {
            scratch.decode_into(flat, &mut cell);
            let mut prob = 0.5;
            for (j, &v) in cell.features.iter().enumerate() {
                prob *= if v == cell.y { agree[j] } else { 1.0 - agree[j] };
            }
            *p = prob;
        }
        let propensities = (0..self.d)
            .map(|j| {
                let rate = if j == self.dominant {
                    0.0
                } else {
                    uniform(rng, self.missing_rate_range.0, self.missing_rate_range.1)
                };
                Propensity::OnBaseline(vec![1.0 - rate])
            })
            .collect();
        DiscreteWorld::from_pmf(1, feature_cards, 2, pmf, propensities).expect("valid copy world")
    }

    /// Same world distribution with every feature fully observed, for
    /// evaluation pools where the random baseline should see all d
    /// candidates.
    pub fn sample_world_fully_observed(&self, rng: &mut impl Rng) -> DiscreteWorld {
        let mut w = self.sample_world(rng);
        for p in &mut w.propensities {
            *p = Propensity::OnBaseline(vec![1.0]);
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    #[test]
    fn pmf_sums_to_one_by_construction() {
        let spec = WorldSpec {
            x0_card: 2,
            feature_cards: vec![3, 2],
            y_card: 3,
            mechanism: WorldMechanism::Mar,
        };
        let w = sample_discrete_world(&spec, &mut rng_from(1, &[])).unwrap();
        let sum: f64 = w.pmf().iter().sum();
        assert!((sum - 1.0).abs() <= PMF_SUM_TOL);
    }

    #[test]
    fn table_size_guard() {
        let spec = WorldSpec {
            x0_card: 101,
            feature_cards: vec![101, 101],
            y_card: 101,
            mechanism: WorldMechanism::Mar,
        };
        assert!(matches!(
            sample_discrete_world(&spec, &mut rng_from(1, &[])),
            Err(Error::TableTooLarge { .. })
        ));
    }

    #[test]
    fn flat_index_round_trips() {
        let spec = WorldSpec {
            x0_card: 3,
            feature_cards: vec![2, 4, 3],
            y_card: 2,
            mechanism: WorldMechanism::Mnar,
        };
        let w = sample_discrete_world(&spec, &mut rng_from(2, &[])).unwrap();
        let mut cell = Cell::default();
        for flat in 0..w.table_size() {
            w.decode_into(flat, &mut cell);
            assert_eq!(w.flat_index(&cell), flat);
        }
    }

    #[test]
    fn sampled_dataset_matches_pmf_in_l_infinity() {
        let spec = WorldSpec {
            x0_card: 2,
            feature_cards: vec![2, 2],
            y_card: 2,
            mechanism: WorldMechanism::Mar,
        };
        let w = sample_discrete_world(&spec, &mut rng_from(3, &[])).unwrap();
        let n = 50_000;
        let ds = w.sample_dataset(n, &mut rng_from(4, &[])).unwrap();
        let mut counts = vec![0.0; w.table_size()];
        let mut cell = Cell { x0: 0, features: vec![0; 2], y: 0 };
        for i in 0..n {
            cell.x0 = ds.x.get2(i, 0) as usize;
            cell.features[0] = ds.x.get2(i, 1) as usize;
            cell.features[1] = ds.x.get2(i, 2) as usize;
            cell.y = ds.y.class(i);
            counts[w.flat_index(&cell)] += 1.0 / n as f64;
        }
        let linf = counts
            .iter()
            .zip(w.pmf())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf < 0.01, "L-infinity distance {linf}");
    }

    #[test]
    fn json_round_trip() {
        let w = mnar_counterexample();
        let s = w.to_json().unwrap();
        let back = DiscreteWorld::from_json(&s).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn copy_world_prior_has_deterministic_dominant_feature() {
        let prior = CopyWorldPrior::default();
        let w = prior.sample_world(&mut rng_from(5, &[]));
        // cells where the dominant feature disagrees with y have zero mass
        let mut cell = Cell::default();
        for flat in 0..w.table_size() {
            w.decode_into(flat, &mut cell);
            if cell.features[prior.dominant] != cell.y {
                assert_eq!(w.pmf()[flat], 0.0);
            }
        }
    }
}

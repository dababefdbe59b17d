//! Task datasets: ground-truth features, retrospective masks, labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Task kind; classification carries the class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "classes")]
pub enum TaskKind {
    Regression,
    Classification(usize),
}

impl TaskKind {
    /// Label width in token encodings: 1 for regression, one-hot width for
    /// classification.
    pub fn label_width(&self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification(c) => *c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Regression(Vec<f64>),
    Classification(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Regression(v) => v.len(),
            Labels::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, i: usize) -> usize {
        match self {
            Labels::Classification(v) => v[i],
            Labels::Regression(_) => panic!("regression labels have no class index"),
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        match self {
            Labels::Regression(v) => v[i],
            Labels::Classification(v) => v[i] as f64,
        }
    }
}

/// Per-task generative metadata, carried for oracle evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMeta {
    #[default]
    None,
    Gp {
        lengthscales: Vec<f64>,
        outputscale: f64,
        noise_std: f64,
        informative: Vec<bool>,
    },
    Bnn {
        prevalence: f64,
    },
    Discrete {
        world: String,
    },
}

/// One task's samples. `x` always stores the ground-truth feature values
/// (the potential outcomes); entries with `r = 0` exist for evaluation only
/// and must never reach a policy or predictor input, which is enforced by
/// the token encoding ops.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub r: Tensor,
    pub y: Labels,
    pub baseline: Vec<bool>,
    pub kind: TaskKind,
    pub true_probs: Option<Vec<Vec<f64>>>,
    pub meta: TaskMeta,
}

impl Dataset {
    pub fn new(x: Tensor, r: Tensor, y: Labels, baseline: Vec<bool>, kind: TaskKind) -> Result<Self> {
        let ds = Self { x, r, y, baseline, kind, true_probs: None, meta: TaskMeta::None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.x.dims2()?;
        if self.r.shape() != [n, d] {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("x {:?} vs r {:?}", self.x.shape(), self.r.shape()),
            });
        }
        if self.y.len() != n || self.baseline.len() != d || n < 2 {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("n={n}, labels={}, baseline={}", self.y.len(), self.baseline.len()),
            });
        }
        for i in 0..n {
            for (j, &is_baseline) in self.baseline.iter().enumerate() {
                if is_baseline && self.r.get2(i, j) == 0.0 {
                    return Err(Error::Config(format!("baseline column {j} unobserved at row {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.r.get2(i, j) != 0.0
    }

    /// Indices of always-observed (baseline) columns.
    pub fn baseline_indices(&self) -> Vec<usize> {
        self.baseline.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    /// Features of row `i` available for acquisition (observed, not baseline).
    pub fn acquirable(&self, i: usize) -> Vec<usize> {
        (0..self.d()).filter(|&j| self.observed(i, j) && !self.baseline[j]).collect()
    }
}

/// Per-feature statistics used to undo per-sequence normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const VAR_FLOOR: f64 = 1e-8;

/// Standardizes each feature to zero mean and unit variance computed over
/// its observed entries only (population variance, floored at 1e-8).
/// Ground-truth values behind `r = 0` are transformed with the same stats
/// so all consumers see consistent units. Labels are left untouched.
pub fn normalize_per_sequence(ds: &Dataset) -> (Dataset, NormStats) {
    let (n, d) = (ds.n(), ds.d());
    let mut mean = vec![0.0; d];
    let mut std = vec![1.0; d];
    let mut out = ds.clone();
    for j in 0..d {
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            if ds.observed(i, j) {
                sum += ds.x.get2(i, j);
                count += 1.0;
            }
        }
        if count == 0.0 {
            continue;
        }
        let mu = sum / count;
        let mut var = 0.0;
        for i in 0..n {
            if ds.observed(i, j) {
                let dv = ds.x.get2(i, j) - mu;
                var += dv * dv;
            }
        }
        var /= count;
        let sd = var.max(VAR_FLOOR).sqrt();
        mean[j] = mu;
        std[j] = sd;
        for i in 0..n {
            let v = (ds.x.get2(i, j) - mu) / sd;
            out.x.set2(i, j, v);
        }
    }
    (out, NormStats { mean, std })
}

// ---- CSV form ----

/// Writes the dataset as CSV: observed values `x1..xd` (empty when masked),
/// mask `r1..rd`, label `y`, ground truth `x1_true..xd_true`, and, when
/// generative probabilities are known, `ptrue0..ptrue{c-1}`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let d = ds.d();
        let mut header = Vec::new();
        for j in 1..=d {
            header.push(format!("x{j}"));
        }
        for j in 1..=d {
            header.push(format!("r{j}"));
        }
        header.push("y".to_string());
        for j in 1..=d {
            header.push(format!("x{j}_true"));
        }
        let c = ds.true_probs.as_ref().map_or(0, |p| p.first().map_or(0, Vec::len));
        for k in 0..c {
            header.push(format!("ptrue{k}"));
        }
        w.write_record(&header)?;
        for i in 0..ds.n() {
            let mut rec = Vec::new();
            for j in 0..d {
                rec.push(if ds.observed(i, j) { format!("{}", ds.x.get2(i, j)) } else { String::new() });
            }
            for j in 0..d {
                rec.push(format!("{}", ds.r.get2(i, j) as i64));
            }
            rec.push(match &ds.y {
                Labels::Regression(v) => format!("{}", v[i]),
                Labels::Classification(v) => format!("{}", v[i]),
            });
            for j in 0..d {
                rec.push(format!("{}", ds.x.get2(i, j)));
            }
            if let Some(p) = &ds.true_probs {
                for v in &p[i] {
                    rec.push(format!("{v}"));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    crate::util::write_atomic(path, &buf)
}

/// Reads a dataset written by [`write_csv`]. When the ground-truth block is
/// absent, masked entries are stored as 0 and remain unavailable.
pub fn read_csv(path: &Path, kind: TaskKind, baseline: Vec<bool>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with('x') && !h.ends_with("_true")).count();
    let has_true = header.iter().any(|h| h.ends_with("_true"));
    let prob_cols = header.iter().filter(|h| h.starts_with("ptrue")).count();
    let mut xs = Vec::new();
    let mut rs = Vec::new();
    let mut ys_reg = Vec::new();
    let mut ys_cls = Vec::new();
    let mut probs = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let mut rrow = vec![0.0; d];
        for j in 0..d {
            rrow[j] = get(d + j).parse::<f64>().map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut xrow = vec![0.0; d];
        for j in 0..d {
            let src = if has_true { get(2 * d + 1 + j) } else { get(j) };
            xrow[j] = if src.is_empty() { 0.0 } else { src.parse().map_err(|e: std::num::ParseFloatError| Error::Format(e.to_string()))? };
        }
        let yv = get(2 * d);
        match kind {
            TaskKind::Regression => ys_reg.push(yv.parse().map_err(|e: std::num::ParseFloatError| Error::Format(e.to_string()))?),
            TaskKind::Classification(_) => ys_cls.push(yv.parse().map_err(|e: std::num::ParseIntError| Error::Format(e.to_string()))?),
        }
        if prob_cols > 0 {
            let base = 2 * d + 1 + if has_true { d } else { 0 };
            let mut p = Vec::with_capacity(prob_cols);
            for k in 0..prob_cols {
                p.push(get(base + k).parse::<f64>().map_err(|e| Error::Format(e.to_string()))?);
            }
            probs.push(p);
        }
        xs.push(xrow);
        rs.push(rrow);
    }
    let y = match kind {
        TaskKind::Regression => Labels::Regression(ys_reg),
        TaskKind::Classification(_) => Labels::Classification(ys_cls),
    };
    let mut ds = Dataset::new(Tensor::from_rows(&xs)?, Tensor::from_rows(&rs)?, y, baseline, kind)?;
    if prob_cols > 0 {
        ds.true_probs = Some(probs);
    }
    Ok(ds)
}

// ---- binary (named-tensor container) form ----

pub fn write_container(ds: &Dataset, path: &Path) -> Result<()> {
    use crate::autodiff::TensorContainer;
    let mut c = TensorContainer::new();
    c.insert("x", ds.x.clone());
    c.insert("r", ds.r.clone());
    let yv: Vec<f64> = (0..ds.n()).map(|i| ds.y.value(i)).collect();
    c.insert("y", Tensor::vector(&yv));
    let b: Vec<f64> = ds.baseline.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    c.insert("baseline", Tensor::vector(&b));
    if let Some(p) = &ds.true_probs {
        c.insert("true_probs", Tensor::from_rows(p)?);
    }
    c.save(path)
}

pub fn read_container(path: &Path, kind: TaskKind) -> Result<Dataset> {
    use crate::autodiff::TensorContainer;
    let c = TensorContainer::load(path)?;
    let x = c.get("x").ok_or_else(|| Error::Format("missing x".into()))?.clone();
    let r = c.get("r").ok_or_else(|| Error::Format("missing r".into()))?.clone();
    let yv = c.get("y").ok_or_else(|| Error::Format("missing y".into()))?;
    let y = match kind {
        TaskKind::Regression => Labels::Regression(yv.data().to_vec()),
        TaskKind::Classification(_) => Labels::Classification(yv.data().iter().map(|&v| v as usize).collect()),
    };
    let baseline = c
        .get("baseline")
        .ok_or_else(|| Error::Format("missing baseline".into()))?
        .data()
        .iter()
        .map(|&v| v != 0.0)
        .collect();
    let mut ds = Dataset::new(x, r, y, baseline, kind)?;
    if let Some(p) = c.get("true_probs") {
        let (n, cw) = p.dims2()?;
        ds.true_probs = Some((0..n).map(|i| p.data()[i * cw..(i + 1) * cw].to_vec()).collect());
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let r = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        Dataset::new(x, r, Labels::Regression(vec![0.5, -0.5, 0.25]), vec![true, false], TaskKind::Regression)
            .unwrap()
    }

    #[test]
    fn baseline_columns_must_be_observed() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let r = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let err = Dataset::new(x, r, Labels::Regression(vec![0.0, 1.0]), vec![true], TaskKind::Regression);
        assert!(err.is_err());
    }

    #[test]
    fn normalize_constant_column_floors_to_zero() {
        let x = Tensor::from_rows(&[vec![3.0], vec![3.0], vec![3.0]]).unwrap();
        let r = Tensor::full(&[3, 1], 1.0);
        let ds = Dataset::new(x, r, Labels::Regression(vec![0.0; 3]), vec![false], TaskKind::Regression)
            .unwrap();
        let (out, stats) = normalize_per_sequence(&ds);
        assert!(out.x.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean[0], 3.0);
    }

    #[test]
    fn normalize_two_point_column_is_symmetric() {
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let r = Tensor::full(&[2, 1], 1.0);
        let ds =
            Dataset::new(x, r, Labels::Regression(vec![0.0; 2]), vec![false], TaskKind::Regression).unwrap();
        let (out, _) = normalize_per_sequence(&ds);
        // population variance convention: (1,3) -> (-1, 1)
        assert!((out.x.get2(0, 0) + 1.0).abs() < 1e-12);
        assert!((out.x.get2(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_uses_observed_entries_only() {
        let mut rng = crate::util::rng_from(3, &[]);
        use rand::Rng;
        let n = 64;
        let mut xs = Vec::new();
        let mut rs = Vec::new();
        for _ in 0..n {
            xs.push(vec![rng.random::<f64>() * 4.0 - 1.0]);
            rs.push(vec![if rng.random::<f64>() < 0.3 { 0.0 } else { 1.0 }]);
        }
        rs[0][0] = 1.0;
        rs[1][0] = 1.0;
        let ds = Dataset::new(
            Tensor::from_rows(&xs).unwrap(),
            Tensor::from_rows(&rs).unwrap(),
            Labels::Regression(vec![0.0; n]),
            vec![false],
            TaskKind::Regression,
        )
        .unwrap();
        let (out, _) = normalize_per_sequence(&ds);
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            if out.observed(i, 0) {
                sum += out.x.get2(i, 0);
                count += 1.0;
            }
        }
        let mean = sum / count;
        let mut var = 0.0;
        for i in 0..n {
            if out.observed(i, 0) {
                var += (out.x.get2(i, 0) - mean) * (out.x.get2(i, 0) - mean);
            }
        }
        var /= count;
        assert!(mean.abs() < 1e-10, "observed mean {mean}");
        assert!((var - 1.0).abs() < 1e-8, "observed variance {var}");
    }

    #[test]
    fn csv_round_trip_preserves_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("task.csv");
        let mut ds = toy();
        ds.true_probs = None;
        write_csv(&ds, &p).unwrap();
        let back = read_csv(&p, TaskKind::Regression, vec![true, false]).unwrap();
        assert_eq!(ds.x, back.x);
        assert_eq!(ds.r, back.r);
        assert_eq!(ds.y, back.y);
    }

    #[test]
    fn container_round_trip_preserves_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("task.bin");
        let ds = toy();
        write_container(&ds, &p).unwrap();
        let back = read_container(&p, TaskKind::Regression).unwrap();
        assert_eq!(ds.x, back.x);
        assert_eq!(ds.r, back.r);
        assert_eq!(ds.y, back.y);
        assert_eq!(ds.baseline, back.baseline);
    }
}

//! Synthetic regression targets, datasets, EGOP oracles and CSV ingestion.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{derive_seed, ShiftRng};

/// Default Monte-Carlo sample count for [`egop_oracle`].
pub const DEFAULT_EGOP_SAMPLES: usize = 1_000_000;

/// Independent seeded streams used by the Monte-Carlo EGOP; reduced in order.
const EGOP_SHARDS: usize = 16;

/// Gradient rows per accumulated block inside a shard.
const EGOP_BLOCK: usize = 2048;

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A user-supplied target. Without a gradient it can label data but has no
/// EGOP oracle.
#[derive(Clone)]
pub struct CustomTarget {
    pub name: String,
    pub min_dim: usize,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradFn>>,
}

impl CustomTarget {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            min_dim: 1,
            value: Arc::new(value),
            gradient: None,
        }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_min_dim(mut self, d: usize) -> Self {
        self.min_dim = d;
        self
    }
}

/// Regression targets on `ℝ^d`:
///
/// * `Rank2`: `x₁x₂`
/// * `Rank3`: `x₁x₂·(x₁ + … + x₁₀)`, needs `d ≥ 10`
/// * `Rank4`: `x₁ + x₁x₂ + x₁x₂x₃ + x₁x₂x₃x₄`, needs `d ≥ 4`
/// * `FullRank`: `‖x‖/√d`
#[derive(Clone)]
pub enum TargetFunction {
    Rank2,
    Rank3,
    Rank4,
    FullRank,
    Custom(CustomTarget),
}

impl TargetFunction {
    pub fn name(&self) -> &str {
        match self {
            TargetFunction::Rank2 => "rank2",
            TargetFunction::Rank3 => "rank3",
            TargetFunction::Rank4 => "rank4",
            TargetFunction::FullRank => "full_rank",
            TargetFunction::Custom(c) => &c.name,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rank2" => Ok(TargetFunction::Rank2),
            "rank3" => Ok(TargetFunction::Rank3),
            "rank4" => Ok(TargetFunction::Rank4),
            "full_rank" => Ok(TargetFunction::FullRank),
            other => Err(Error::Unsupported(format!(
                "unknown target '{other}' (expected rank2, rank3, rank4 or full_rank)"
            ))),
        }
    }

    pub fn min_dim(&self) -> usize {
        match self {
            TargetFunction::Rank2 => 2,
            TargetFunction::Rank3 => 10,
            TargetFunction::Rank4 => 4,
            TargetFunction::FullRank => 1,
            TargetFunction::Custom(c) => c.min_dim,
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if d < self.min_dim() {
            return Err(Error::contract(format!(
                "target {} needs d >= {}, got {d}",
                self.name(),
                self.min_dim()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TargetFunction::Rank2 => x[0] * x[1],
            TargetFunction::Rank3 => x[0] * x[1] * x[..10].iter().sum::<f64>(),
            TargetFunction::Rank4 => {
                let mut prod = 1.0;
                let mut total = 0.0;
                for &xi in &x[..4] {
                    prod *= xi;
                    total += prod;
                }
                total
            }
            TargetFunction::FullRank => norm(x) / (x.len() as f64).sqrt(),
            TargetFunction::Custom(c) => (c.value)(x),
        }
    }

    pub fn has_gradient(&self) -> bool {
        !matches!(self, TargetFunction::Custom(CustomTarget { gradient: None, .. }))
    }

    /// `∇f*(x)`, or an unsupported error for a custom target without one.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        match self {
            TargetFunction::Rank2 => {
                g[0] = x[1];
                g[1] = x[0];
            }
            TargetFunction::Rank3 => {
                let s: f64 = x[..10].iter().sum();
                let p = x[0] * x[1];
                g[..10].fill(p);
                g[0] += x[1] * s;
                g[1] += x[0] * s;
            }
            TargetFunction::Rank4 => {
                let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
                g[0] = 1.0 + x2 + x2 * x3 + x2 * x3 * x4;
                g[1] = x1 + x1 * x3 + x1 * x3 * x4;
                g[2] = x1 * x2 + x1 * x2 * x4;
                g[3] = x1 * x2 * x3;
            }
            TargetFunction::FullRank => {
                let r = norm(x);
                if r > 0.0 {
                    let c = 1.0 / ((x.len() as f64).sqrt() * r);
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi = c * xi;
                    }
                }
            }
            TargetFunction::Custom(c) => match &c.gradient {
                Some(grad) => g = grad(x),
                None => {
                    return Err(Error::Unsupported(format!("custom target '{}' has no gradient", c.name)));
                }
            },
        }
        Ok(g)
    }

    /// Closed-form EGOP under `N(0, I_d)` where one is known.
    pub fn exact_egop(&self, d: usize) -> Option<DenseMatrix> {
        match self {
            TargetFunction::Rank2 => {
                let mut diag = vec![0.0; d];
                diag[0] = 1.0;
                diag[1] = 1.0;
                Some(DenseMatrix::from_diag(&diag))
            }
            TargetFunction::FullRank => {
                let dd = (d * d) as f64;
                Some(DenseMatrix::from_diag(&vec![1.0 / dd; d]))
            }
            _ => None,
        }
    }
}

impl fmt::Debug for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetFunction::Custom(c) => write!(f, "Custom({:?})", c.name),
            other => f.write_str(other.name()),
        }
    }
}

impl PartialEq for TargetFunction {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name() && matches!(self, TargetFunction::Custom(_)) == matches!(other, TargetFunction::Custom(_))
    }
}

impl Serialize for TargetFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetFunction::Custom(c) => s.serialize_str(&format!("custom:{}", c.name)),
            other => s.serialize_str(other.name()),
        }
    }
}

impl<'de> Deserialize<'de> for TargetFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        TargetFunction::from_name(&name).map_err(serde::de::Error::custom)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Disjoint row-index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn all_train(n: usize) -> Self {
        Self {
            train: (0..n).collect(),
            validation: Vec::new(),
            test: Vec::new(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n {
                return Err(Error::contract(format!("split index {i} out of range for n = {n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("split index {i} appears twice")));
            }
        }
        Ok(())
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        target: TargetFunction,
        n: usize,
        d: usize,
        noise_sigma: f64,
        seed: u64,
    },
    ScaledSphere {
        n: usize,
        d: usize,
        scale: f64,
        target_index: usize,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
    InMemory {
        label: String,
    },
}

/// Rows of one split, materialized.
#[derive(Debug, Clone)]
pub struct Part {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    /// Noise-free targets when the generator knows them.
    pub clean_y: Option<Vec<f64>>,
}

impl Part {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    x: DenseMatrix,
    y: Vec<f64>,
    clean_y: Option<Vec<f64>>,
    split: Split,
    provenance: Provenance,
}

impl Dataset {
    /// Wraps `(X, y)` with every row in the training split.
    pub fn new(x: DenseMatrix, y: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::contract(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) || !x.is_finite() {
            return Err(Error::contract("dataset values must be finite"));
        }
        let split = Split::all_train(y.len());
        Ok(Self {
            x,
            y,
            clean_y: None,
            split,
            provenance,
        })
    }

    fn with_clean_labels(mut self, clean: Vec<f64>) -> Self {
        self.clean_y = Some(clean);
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn clean_labels(&self) -> Option<&[f64]> {
        self.clean_y.as_deref()
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_split(mut self, split: Split) -> Result<Self> {
        split.validate(self.n())?;
        self.split = split;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Part {
        Part {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            clean_y: self.clean_y.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn train(&self) -> Part {
        self.subset(&self.split.train)
    }

    pub fn validation(&self) -> Part {
        self.subset(&self.split.validation)
    }

    pub fn test(&self) -> Part {
        self.subset(&self.split.test)
    }

    /// Maps a two-valued label column to `{−1, +1}` (smaller value → −1).
    pub fn binarize_labels(mut self) -> Result<Self> {
        let mut values: Vec<f64> = self.y.clone();
        values.sort_by(f64::total_cmp);
        values.dedup();
        if values.len() != 2 {
            return Err(Error::contract(format!(
                "binarizing needs exactly 2 distinct labels, found {}",
                values.len()
            )));
        }
        let low = values[0];
        for v in &mut self.y {
            *v = if *v == low { -1.0 } else { 1.0 };
        }
        self.clean_y = None;
        Ok(self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (1..=self.d()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.y[i]));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a CSV whose header names the feature columns followed by one label
/// column. Every cell must parse to a finite double.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let width = reader.headers().map_err(|e| csv_io(path, e))?.len();
    if width < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "header needs at least one feature column and a label column".into(),
        });
    }
    let d = width - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != width {
            return Err(parse_err(format!("expected {width} fields, found {}", record.len())));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("column {}: '{cell}' is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("column {}: non-finite value '{cell}'", j + 1)));
            }
            if j < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = ys.len();
    let x = DenseMatrix::from_vec(n, d, xs)?;
    Dataset::new(
        x,
        ys,
        Provenance::Csv {
            path: path.to_path_buf(),
        },
    )
}

fn gaussian_rows(rng: &mut ShiftRng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.gaussian()).collect()
}

/// `n` i.i.d. `N(0, I_d)` inputs labelled `f*(x) + ε`, `ε ~ N(0, σ²)`.
///
/// Inputs and noise use separate derived streams, so changing `σ` leaves `X`
/// unchanged.
pub fn generate_synthetic(target: TargetFunction, n: usize, d: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    target.check_dim(d)?;
    if n == 0 {
        return Err(Error::contract("n must be >= 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::contract("noise_sigma must be finite and >= 0"));
    }
    let mut x_rng = ShiftRng::new(derive_seed(seed, "data.inputs"));
    let mut noise_rng = ShiftRng::new(derive_seed(seed, "data.noise"));
    let x = DenseMatrix::from_vec(n, d, gaussian_rows(&mut x_rng, n, d))?;
    let clean: Vec<f64> = (0..n).map(|i| target.eval(x.row(i))).collect();
    let y: Vec<f64> = clean.iter().map(|c| c + noise_sigma * noise_rng.gaussian()).collect();
    let provenance = Provenance::Synthetic {
        target,
        n,
        d,
        noise_sigma,
        seed,
    };
    Ok(Dataset::new(x, y, provenance)?.with_clean_labels(clean))
}

/// Points uniform on the unit sphere with label 1, except that both
/// `x_{target_index}` and its label are multiplied by `scale`.
pub fn generate_scaled_point_sphere(n: usize, d: usize, scale: f64, target_index: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::contract("n and d must be >= 1"));
    }
    if target_index >= n {
        return Err(Error::contract(format!("target_index {target_index} out of range for n = {n}")));
    }
    let mut rng = ShiftRng::new(derive_seed(seed, "data.sphere"));
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut g = gaussian_rows(&mut rng, 1, d);
        let r = norm(&g);
        for v in &mut g {
            *v /= r;
        }
        data.extend(g);
    }
    let mut x = DenseMatrix::from_vec(n, d, data)?;
    for v in x.row_mut(target_index) {
        *v *= scale;
    }
    let mut y = vec![1.0; n];
    y[target_index] = scale;
    let provenance = Provenance::ScaledSphere {
        n,
        d,
        scale,
        target_index,
        seed,
    };
    let clean = y.clone();
    Ok(Dataset::new(x, y, provenance)?.with_clean_labels(clean))
}

/// `egop_oracle` output: the Monte-Carlo estimate and, when known, the exact form.
#[derive(Debug, Clone)]
pub struct EgopOracle {
    pub monte_carlo: DenseMatrix,
    pub exact: Option<DenseMatrix>,
}

impl EgopOracle {
    /// The exact matrix when available, otherwise the estimate.
    pub fn best(&self) -> &DenseMatrix {
        self.exact.as_ref().unwrap_or(&self.monte_carlo)
    }
}

/// `E_x[∇f*(x)∇f*(x)ᵀ]` for `x ~ N(0, I_d)`.
///
/// The estimate is split across fixed seeded shards that are summed in shard
/// order. Within a block only columns where some gradient is nonzero enter the
/// product, which keeps the low-rank targets cheap at large `d`.
pub fn egop_oracle(target: &TargetFunction, d: usize, mc_samples: usize, seed: u64) -> Result<EgopOracle> {
    target.check_dim(d)?;
    if !target.has_gradient() {
        return Err(Error::Unsupported(format!("target '{}' has no gradient", target.name())));
    }
    if mc_samples == 0 {
        return Err(Error::contract("mc_samples must be >= 1"));
    }
    let mut total = Array2::<f64>::zeros((d, d));
    let per_shard = mc_samples.div_ceil(EGOP_SHARDS);
    let mut remaining = mc_samples;
    for shard in 0..EGOP_SHARDS {
        let count = per_shard.min(remaining);
        if count == 0 {
            break;
        }
        remaining -= count;
        let mut rng = ShiftRng::new(derive_seed(seed, &format!("egop.shard.{shard}")));
        total += &shard_sum(target, d, count, &mut rng)?;
    }
    total /= mc_samples as f64;
    let mut mc = DenseMatrix::from_array(total);
    mc.mirror_upper();
    Ok(EgopOracle {
        monte_carlo: mc,
        exact: target.exact_egop(d),
    })
}

fn shard_sum(target: &TargetFunction, d: usize, count: usize, rng: &mut ShiftRng) -> Result<Array2<f64>> {
    let mut acc = Array2::<f64>::zeros((d, d));
    let mut done = 0;
    let mut x = vec![0.0; d];
    while done < count {
        let b = EGOP_BLOCK.min(count - done);
        let mut grads = Array2::<f64>::zeros((b, d));
        for mut row in grads.rows_mut() {
            for v in x.iter_mut() {
                *v = rng.gaussian();
            }
            let g = target.gradient(&x)?;
            row.assign(&ndarray::ArrayView1::from(&g));
        }
        let support: Vec<usize> = (0..d).filter(|&j| grads.column(j).iter().any(|&v| v != 0.0)).collect();
        let sub = grads.select(ndarray::Axis(1), &support);
        let gram = sub.t().dot(&sub);
        for (a, &ja) in support.iter().enumerate() {
            for (b, &jb) in support.iter().enumerate() {
                acc[[ja, jb]] += gram[[a, b]];
            }
        }
        done += b;
    }
    Ok(acc)
}

/// Seeded partition into train/validation/test of the requested sizes. Each
/// index set is returned in ascending order.
pub fn split(ds: Dataset, train: usize, val: usize, test: usize, seed: u64) -> Result<Dataset> {
    let n = ds.n();
    if train + val + test > n {
        return Err(Error::contract(format!(
            "split sizes {train}+{val}+{test} exceed n = {n}"
        )));
    }
    let mut rng = ShiftRng::new(derive_seed(seed, "data.split"));
    let perm = rng.permutation(n);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let split = Split {
        train: sorted(&perm[..train]),
        validation: sorted(&perm[train..train + val]),
        test: sorted(&perm[train + val..train + val + test]),
    };
    ds.with_split(split)
}

/// Fraction of positions where `sign(pred)` differs from `sign(label)`, with
/// zero counted as positive.
pub fn sign_error_rate(pred: &[f64], labels: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = pred.iter().zip(labels).filter(|(p, y)| (**p >= 0.0) != (**y >= 0.0)).count();
    wrong as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;

    fn e(d: usize, values: &[(usize, f64)]) -> Vec<f64> {
        let mut x = vec![0.0; d];
        for &(i, v) in values {
            x[i] = v;
        }
        x
    }

    #[test]
    fn closed_form_targets() {
        assert_eq!(TargetFunction::Rank2.eval(&e(5, &[(0, 2.0), (1, 3.0)])), 6.0);
        assert_eq!(TargetFunction::Rank4.eval(&[1.0; 6]), 4.0);
        assert_eq!(TargetFunction::Rank3.eval(&[1.0; 12]), 10.0);
        let x = [3.0, 4.0, 0.0, 0.0];
        assert!((TargetFunction::FullRank.eval(&x) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_contracts() {
        assert!(generate_synthetic(TargetFunction::Rank3, 4, 9, 0.0, 0).is_err());
        assert!(generate_synthetic(TargetFunction::Rank4, 4, 3, 0.0, 0).is_err());
        assert!(generate_synthetic(TargetFunction::Rank2, 0, 3, 0.0, 0).is_err());
        assert!(generate_synthetic(TargetFunction::Rank3, 4, 10, 0.0, 0).is_ok());
    }

    #[test]
    fn target_gradients_match_finite_differences() {
        let mut rng = ShiftRng::new(5);
        let h = 1e-6;
        for t in [TargetFunction::Rank2, TargetFunction::Rank3, TargetFunction::Rank4, TargetFunction::FullRank] {
            let x: Vec<f64> = (0..12).map(|_| rng.gaussian()).collect();
            let g = t.gradient(&x).unwrap();
            for k in 0..12 {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (t.eval(&xp) - t.eval(&xm)) / (2.0 * h);
                assert!((g[k] - fd).abs() < 1e-7 * fd.abs().max(1.0), "{t:?} coord {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn noise_statistics() {
        let ds = generate_synthetic(TargetFunction::Rank2, 100_000, 2, 0.1, 7).unwrap();
        let clean = ds.clean_labels().unwrap();
        let r: Vec<f64> = ds.y().iter().zip(clean).map(|(y, c)| y - c).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        assert!((0.097..=0.103).contains(&std), "std {std}");
    }

    #[test]
    fn noise_does_not_move_inputs() {
        let a = generate_synthetic(TargetFunction::Rank2, 20, 4, 0.0, 3).unwrap();
        let b = generate_synthetic(TargetFunction::Rank2, 20, 4, 0.5, 3).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), a.clean_labels().unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(TargetFunction::Rank4, 30, 6, 0.1, 11).unwrap();
        let b = generate_synthetic(TargetFunction::Rank4, 30, 6, 0.1, 11).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
    }

    #[test]
    fn sphere_dataset() {
        let ds = generate_scaled_point_sphere(100, 100, 1.0, 0, 1).unwrap();
        for i in 0..100 {
            assert!((crate::linalg::norm2(ds.x().row(i)) - 1.0).abs() <= 1e-12);
            assert_eq!(ds.y()[i], 1.0);
        }
        let ds = generate_scaled_point_sphere(100, 100, 2.0, 7, 1).unwrap();
        for i in 0..100 {
            let want = if i == 7 { 2.0 } else { 1.0 };
            assert!((crate::linalg::norm2(ds.x().row(i)) - want).abs() <= 1e-12);
            assert_eq!(ds.y()[i], want);
        }
        match ds.provenance() {
            Provenance::ScaledSphere { target_index, .. } => assert_eq!(*target_index, 7),
            other => panic!("unexpected provenance {other:?}"),
        }
        assert!(generate_scaled_point_sphere(10, 3, 2.0, 10, 0).is_err());
    }

    #[test]
    fn rank2_egop_close_to_exact() {
        let oracle = egop_oracle(&TargetFunction::Rank2, 100, DEFAULT_EGOP_SAMPLES, 1).unwrap();
        let exact = oracle.exact.as_ref().unwrap();
        let diff = oracle.monte_carlo.sub(exact).unwrap();
        assert!(diff.frobenius_norm() <= 0.02, "{}", diff.frobenius_norm());
        let mc = &oracle.monte_carlo;
        let mut tail = 0.0;
        for i in 2..100 {
            for j in 2..100 {
                tail += mc.get(i, j).powi(2);
            }
        }
        assert!(tail.sqrt() <= 1e-2);
        assert!(mc.is_symmetric(1e-14));
    }

    #[test]
    fn full_rank_egop_close_to_isotropic() {
        let oracle = egop_oracle(&TargetFunction::FullRank, 100, DEFAULT_EGOP_SAMPLES, 2).unwrap();
        let exact = oracle.exact.as_ref().unwrap();
        let rel = oracle.monte_carlo.sub(exact).unwrap().frobenius_norm() / exact.frobenius_norm();
        assert!(rel <= 0.05, "relative error {rel}");
        let eig = sym_eigen(&oracle.monte_carlo).unwrap();
        assert!(eig.values.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn rank3_egop_has_rank_three() {
        let oracle = egop_oracle(&TargetFunction::Rank3, 100, DEFAULT_EGOP_SAMPLES, 3).unwrap();
        assert!(oracle.exact.is_none());
        let eig = sym_eigen(&oracle.monte_carlo).unwrap();
        assert!(eig.values[3] / eig.values[0] <= 1e-3);
        assert!(eig.values[2] / eig.values[0] > 1e-2);
        assert!(eig.values.iter().all(|&l| l >= -1e-10 * eig.values[0]));
    }

    #[test]
    fn custom_target_without_gradient_is_unsupported() {
        let t = TargetFunction::Custom(CustomTarget::new("sum", |x: &[f64]| x.iter().sum()));
        assert!(matches!(egop_oracle(&t, 3, 10, 0), Err(Error::Unsupported(_))));
        let ds = generate_synthetic(t, 5, 3, 0.0, 0).unwrap();
        assert_eq!(ds.n(), 5);
        let t = TargetFunction::Custom(
            CustomTarget::new("first", |x: &[f64]| x[0]).with_gradient(|x: &[f64]| {
                let mut g = vec![0.0; x.len()];
                g[0] = 1.0;
                g
            }),
        );
        let o = egop_oracle(&t, 3, 100, 0).unwrap();
        assert!((o.monte_carlo.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(o.monte_carlo.get(1, 1), 0.0);
    }

    #[test]
    fn egop_is_deterministic() {
        let a = egop_oracle(&TargetFunction::Rank4, 6, 5000, 9).unwrap();
        let b = egop_oracle(&TargetFunction::Rank4, 6, 5000, 9).unwrap();
        assert_eq!(a.monte_carlo, b.monte_carlo);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.csv");
        std::fs::write(&ok, "a,b,c,label\n1,2,3,4\n5,6,7,8\n").unwrap();
        let ds = load_csv(&ok).unwrap();
        assert_eq!((ds.n(), ds.d()), (2, 3));
        assert_eq!(ds.y(), &[4.0, 8.0]);

        let bad = dir.path().join("nan.csv");
        std::fs::write(&bad, "a,b,label\n1,2,3\n4,NaN,6\n").unwrap();
        match load_csv(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "a,b,label\n1,2,3\n4,5\n").unwrap();
        assert!(matches!(load_csv(&ragged), Err(Error::Parse { line: 3, .. })));
        let text = dir.path().join("text.csv");
        std::fs::write(&text, "a,label\nx,1\n").unwrap();
        assert!(matches!(load_csv(&text), Err(Error::Parse { line: 2, .. })));

        let gen = generate_synthetic(TargetFunction::Rank2, 25, 4, 0.1, 2).unwrap();
        let path = dir.path().join("gen.csv");
        gen.write_csv(&path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.x(), gen.x());
        assert_eq!(back.y(), gen.y());
    }

    #[test]
    fn split_examples() {
        let ds = generate_synthetic(TargetFunction::Rank2, 12_000, 2, 0.0, 1).unwrap();
        let ds = split(ds, 2000, 5000, 5000, 4).unwrap();
        let s = ds.split();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (2000, 5000, 5000));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12_000).collect::<Vec<_>>());

        let small = generate_synthetic(TargetFunction::Rank2, 10, 2, 0.0, 1).unwrap();
        let a = split(small.clone(), 10, 0, 0, 3).unwrap();
        assert_eq!(a.split().train, (0..10).collect::<Vec<_>>());
        let b1 = split(small.clone(), 4, 3, 2, 8).unwrap();
        let b2 = split(small.clone(), 4, 3, 2, 8).unwrap();
        assert_eq!(b1.split(), b2.split());
        assert!(split(small, 5, 5, 1, 0).is_err());
    }

    #[test]
    fn binarize_and_sign_error() {
        let x = DenseMatrix::zeros(4, 1);
        let ds = Dataset::new(x, vec![3.0, 7.0, 3.0, 7.0], Provenance::InMemory { label: "t".into() })
            .unwrap()
            .binarize_labels()
            .unwrap();
        assert_eq!(ds.y(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(sign_error_rate(&[-0.5, 0.2, 0.1, -2.0], ds.y()), 0.5);
        let three = Dataset::new(DenseMatrix::zeros(3, 1), vec![0.0, 1.0, 2.0], Provenance::InMemory { label: "t".into() });
        assert!(three.unwrap().binarize_labels().is_err());
    }

    #[test]
    fn target_serde_names() {
        let s = serde_json::to_string(&TargetFunction::FullRank).unwrap();
        assert_eq!(s, "\"full_rank\"");
        let t: TargetFunction = serde_json::from_str("\"rank3\"").unwrap();
        assert_eq!(t, TargetFunction::Rank3);
        assert!(serde_json::from_str::<TargetFunction>("\"rank9\"").is_err());
    }
}

//! Empirical NTK, loss decomposition and critical learning rates.
//!
//! The NTK is assembled per parameter block without forming the Jacobian.
//! For hidden layer `l` with backprop signals `Δ` and incoming activations `H`
//! the weight block contributes `α²(ΔΔᵀ)∘(HHᵀ)`, the bias block `ΔΔᵀ`, and the
//! output weights `α²HHᵀ`. Only the upper triangle of row blocks is computed;
//! the lower triangle is a mirror, so `K` is exactly symmetric.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, project_split, spectral_norm, sym_eigen, DenseMatrix, EigenBasis, POWER_MAX_ITERS, POWER_REL_TOL};
use crate::network::{mean_squared_residual, Mlp, Trace};
use crate::rng::{derive_seed, fnv1a, ShiftRng};

/// Rows per Gram block. At 512 rows and width 4096 a block pair needs about
/// 50 MB of scratch.
pub const DEFAULT_BLOCK_ROWS: usize = 512;

/// Step for finite-difference Hessian-vector products along unit directions.
pub const HVP_STEP: f64 = 1e-4;

const HESSIAN_MAX_ITERS: usize = 1000;
const HESSIAN_RESIDUAL_TOL: f64 = 1e-4;
const HESSIAN_STALL_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct NtkMatrix {
    k: DenseMatrix,
    model_fingerprint: u64,
    data_fingerprint: u64,
}

impl NtkMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.k
    }

    pub fn n(&self) -> usize {
        self.k.rows()
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    pub fn data_fingerprint(&self) -> u64 {
        self.data_fingerprint
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(&self.k)
    }

    pub fn eigen(&self) -> Result<EigenBasis> {
        sym_eigen(&self.k)
    }

    /// Errors unless this matrix was computed from exactly `model` and `x`.
    pub fn check_fresh(&self, model: &Mlp, x: &DenseMatrix) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() || self.data_fingerprint != data_fingerprint(x) {
            return Err(Error::contract("NTK matrix is stale for this model or data"));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.k.write_csv(path)
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.k
    }
}

/// FNV-1a over the shape and bits of a data matrix.
pub fn data_fingerprint(x: &DenseMatrix) -> u64 {
    let mut bytes = Vec::with_capacity(16 + 8 * x.as_slice().len());
    bytes.extend((x.rows() as u64).to_le_bytes());
    bytes.extend((x.cols() as u64).to_le_bytes());
    for v in x.as_slice() {
        bytes.extend(v.to_bits().to_le_bytes());
    }
    fnv1a(&bytes)
}

/// `K_ij = ⟨∂f(xᵢ)/∂w, ∂f(xⱼ)/∂w⟩` over the trainable parameters.
pub fn ntk_matrix(model: &Mlp, x: &DenseMatrix) -> Result<NtkMatrix> {
    ntk_matrix_blocked(model, x, DEFAULT_BLOCK_ROWS)
}

/// [`ntk_matrix`] with an explicit row-block size.
pub fn ntk_matrix_blocked(model: &Mlp, x: &DenseMatrix, block_rows: usize) -> Result<NtkMatrix> {
    if x.rows() == 0 {
        return Err(Error::contract("NTK needs at least one row"));
    }
    model.check_dim(x.cols())?;
    let trace = model.trace(x.view());
    Ok(NtkMatrix {
        k: gram_from_trace(model, &trace, block_rows.max(1)),
        model_fingerprint: model.fingerprint(),
        data_fingerprint: data_fingerprint(x),
    })
}

/// NTK of a mini-batch; identical to [`ntk_matrix`] on the batch rows.
pub fn ntk_batch(model: &Mlp, x_batch: &DenseMatrix) -> Result<NtkMatrix> {
    ntk_matrix(model, x_batch)
}

/// Per-layer factors `(α², Δ, H, bias)` for the weight blocks.
struct Factor<'t> {
    alpha_sq: f64,
    delta: ArrayView2<'t, f64>,
    act: ArrayView2<'t, f64>,
    bias: bool,
}

/// Weight-block factors of every hidden layer and `α²` of the output block.
fn factors<'t>(model: &Mlp, trace: &'t Trace<'_>, deltas: &'t [Array2<f64>]) -> (Vec<Factor<'t>>, f64) {
    let cfg = model.config();
    let param = cfg.parameterization;
    let mut factors: Vec<Factor<'_>> = Vec::with_capacity(deltas.len());
    let mut fan_in = cfg.input_dim;
    for (l, delta) in deltas.iter().enumerate() {
        let a = param.forward_scale(fan_in);
        factors.push(Factor {
            alpha_sq: a * a,
            delta: delta.view(),
            act: trace.activation(l),
            bias: cfg.bias,
        });
        fan_in = cfg.hidden_widths[l];
    }
    let a = param.forward_scale(fan_in);
    (factors, a * a)
}

pub(crate) fn gram_from_trace(model: &Mlp, trace: &Trace<'_>, block_rows: usize) -> DenseMatrix {
    let n = trace.input.nrows();
    let cfg = model.config();
    let deltas = model.signals(trace, None);
    let (factors, out_alpha_sq) = factors(model, trace, &deltas);
    let last = trace.last();

    let mut k = Array2::<f64>::zeros((n, n));
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + block_rows).min(n);
        let mut j0 = i0;
        while j0 < n {
            let j1 = (j0 + block_rows).min(n);
            let mut blk = Array2::<f64>::zeros((i1 - i0, j1 - j0));
            for f in &factors {
                let dd = gram_block(f.delta, i0..i1, j0..j1);
                let hh = gram_block(f.act, i0..i1, j0..j1);
                let bias = f.bias;
                let a2 = f.alpha_sq;
                Zip::from(&mut blk).and(&dd).and(&hh).for_each(|b, &d, &h| {
                    *b += a2 * d * h;
                    if bias {
                        *b += d;
                    }
                });
            }
            if !cfg.freeze_output {
                let hh = gram_block(last, i0..i1, j0..j1);
                Zip::from(&mut blk).and(&hh).for_each(|b, &h| *b += out_alpha_sq * h);
            }
            k.slice_mut(s![i0..i1, j0..j1]).assign(&blk);
            j0 = j1;
        }
        i0 = i1;
    }
    let mut k = DenseMatrix::from_array(k);
    k.mirror_upper();
    k
}

/// Batches at least this large get `λ_max(K)` by matrix-free power iteration
/// instead of an explicit Gram matrix.
pub(crate) const MATRIX_FREE_MIN_ROWS: usize = 1024;

/// `λ_max(K)` and its unit eigenvector for the traced rows, using only
/// products `Kv`. Each weight block applies `(ΔΔᵀ∘HHᵀ)v` row-wise as
/// `Δᵢᵀ(Δᵀdiag(v)H)Hᵢ`, which costs `O(n·fan_in·fan_out)` instead of `O(n²·width)`.
///
/// `start` seeds the iteration when it has the right length, which makes
/// repeated calls on slowly moving weights cheap. The stopping rule is the one
/// of [`spectral_norm`].
pub(crate) fn ntk_top_eigenpair(model: &Mlp, trace: &Trace<'_>, start: Option<&[f64]>) -> (f64, Vec<f64>) {
    let n = trace.input.nrows();
    let cfg = model.config();
    let deltas = model.signals(trace, None);
    let (factors, out_alpha_sq) = factors(model, trace, &deltas);
    let last = trace.last();
    let matvec = |v: &[f64]| -> Vec<f64> {
        let vv = ndarray::ArrayView1::from(v);
        let mut out = ndarray::Array1::<f64>::zeros(n);
        for f in &factors {
            let mut dv = f.delta.to_owned();
            Zip::from(dv.rows_mut()).and(&vv).for_each(|mut row, &c| row *= c);
            let m = dv.t().dot(&f.act);
            let hm = f.act.dot(&m.t());
            Zip::from(&mut out)
                .and(f.delta.rows())
                .and(hm.rows())
                .for_each(|o, d, h| *o += f.alpha_sq * d.dot(&h));
            if f.bias {
                out += &f.delta.dot(&f.delta.t().dot(&vv));
            }
        }
        if !cfg.freeze_output {
            out += &(last.dot(&last.t().dot(&vv)) * out_alpha_sq);
        }
        out.to_vec()
    };
    let mut v = match start {
        Some(s) if s.len() == n => s.to_vec(),
        _ => vec![1.0; n],
    };
    if !normalize(&mut v) {
        v = vec![1.0 / (n as f64).sqrt(); n];
    }
    let mut previous = f64::NAN;
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = matvec(&v);
        lambda = dot(&v, &w);
        let residual = w.iter().zip(&v).map(|(wi, vi)| (wi - lambda * vi).powi(2)).sum::<f64>().sqrt();
        if !normalize(&mut w) {
            return (0.0, v);
        }
        v = w;
        if residual <= POWER_REL_TOL * lambda.abs() || (lambda - previous).abs() <= 1e-15 * lambda.abs() {
            break;
        }
        previous = lambda;
    }
    (lambda.max(0.0), v)
}

/// `λ_max(K)` on `x` without forming `K`.
pub fn ntk_lambda_max(model: &Mlp, x: &DenseMatrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::contract("NTK needs at least one row"));
    }
    model.check_dim(x.cols())?;
    Ok(ntk_top_eigenpair(model, &model.trace(x.view()), None).0)
}

fn gram_block(a: ArrayView2<'_, f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Array2<f64> {
    let left = a.slice(s![rows, ..]);
    let right = a.slice(s![cols, ..]);
    left.dot(&right.t())
}

/// `L = L_≤s + L_>s`: the residual's mass in the top-`s` eigenspace and the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossDecomposition {
    pub s: usize,
    pub loss_total: f64,
    pub loss_top: f64,
    pub loss_rest: f64,
}

/// Splits the MSE of `model` on `(x, y)` along `basis`.
pub fn decompose_loss(model: &Mlp, x: &DenseMatrix, y: &[f64], basis: &EigenBasis, s: usize) -> Result<LossDecomposition> {
    if y.len() != basis.len() || x.rows() != y.len() {
        return Err(Error::contract(format!(
            "basis has dimension {}, data has {} rows and {} labels",
            basis.len(),
            x.rows(),
            y.len()
        )));
    }
    let f = model.predict(x)?;
    let r: Vec<f64> = f.iter().zip(y).map(|(f, y)| f - y).collect();
    decompose_residual(&r, basis, s)
}

/// [`decompose_loss`] for an already computed residual `f − y`.
pub fn decompose_residual(r: &[f64], basis: &EigenBasis, s: usize) -> Result<LossDecomposition> {
    let (top, rest) = project_split(r, basis, s)?;
    let n = r.len() as f64;
    Ok(LossDecomposition {
        s,
        loss_total: dot(r, r) / n,
        loss_top: dot(&top, &top) / n,
        loss_rest: dot(&rest, &rest) / n,
    })
}

/// `η̃_crit = n/λ_max(K)`; `+∞` when `K = 0`.
pub fn critical_lr_ntk(k: &NtkMatrix, sample_count: usize) -> Result<f64> {
    if sample_count != k.n() {
        return Err(Error::contract(format!(
            "sample_count {sample_count} differs from NTK dimension {}",
            k.n()
        )));
    }
    Ok(critical_lr_from_norm(sample_count, k.spectral_norm()))
}

pub fn critical_lr_from_norm(sample_count: usize, lambda_max: f64) -> f64 {
    if lambda_max > 0.0 {
        sample_count as f64 / lambda_max
    } else {
        f64::INFINITY
    }
}

/// `η_crit = 2/λ_max(H)` for the MSE loss on `(x, y)`.
///
/// `λ_max` comes from power iteration with finite-difference Hessian-vector
/// products. The start vector is a Gaussian seeded from the model fingerprint,
/// restricted to trainable coordinates.
pub fn critical_lr_hessian(model: &Mlp, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
    let lambda = hessian_top_eigenvalue(model, x, y)?;
    Ok(if lambda > 0.0 { 2.0 / lambda } else { f64::INFINITY })
}

/// Largest-magnitude eigenvalue of the loss Hessian.
pub fn hessian_top_eigenvalue(model: &Mlp, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
    let mask = model.trainable_mask();
    let mut rng = ShiftRng::new(derive_seed(model.fingerprint(), "kernel.hessian"));
    let mut v: Vec<f64> = mask.iter().map(|&m| if m { rng.gaussian() } else { 0.0 }).collect();
    normalize(&mut v);
    let mut probe = model.clone();
    let base = model.params().to_vec();
    model.loss_and_gradient(x, y)?;
    // Both shifted gradients keep the ReLU pattern of the base point. A shift
    // that carries a preactivation across zero would otherwise add a gradient
    // jump divided by the step, which dominates the power iteration.
    let gates = model.gates(&model.trace(x.view()));
    let mut hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let shifted = |sign: f64| base.iter().zip(v).map(|(w, d)| w + sign * HVP_STEP * d).collect::<Vec<_>>();
        probe.set_params(&shifted(1.0))?;
        let (_, gp) = probe.loss_and_gradient_gated(x, y, &gates);
        probe.set_params(&shifted(-1.0))?;
        let (_, gm) = probe.loss_and_gradient_gated(x, y, &gates);
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * HVP_STEP)).collect())
    };
    let mut lambda = 0.0;
    let mut previous = f64::NAN;
    let mut residual = f64::INFINITY;
    for _ in 0..HESSIAN_MAX_ITERS {
        let mut w = hvp(&v)?;
        lambda = dot(&v, &w);
        residual = w.iter().zip(&v).map(|(wi, vi)| (wi - lambda * vi).powi(2)).sum::<f64>().sqrt();
        if !lambda.is_finite() {
            break;
        }
        if !normalize(&mut w) {
            return Ok(0.0);
        }
        v = w;
        let scale = lambda.abs();
        if residual <= HESSIAN_RESIDUAL_TOL * scale || (lambda - previous).abs() <= HESSIAN_STALL_TOL * scale {
            return Ok(lambda);
        }
        previous = lambda;
    }
    Err(Error::Numerical {
        message: format!("Hessian power iteration did not converge (last Rayleigh quotient {lambda})"),
        residual,
    })
}

fn normalize(v: &mut [f64]) -> bool {
    let n = norm2(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Relative size of the nonlinear remainder in one full-batch GD step:
/// `‖(f⁺ − y) − (I − 2ηK/n)(f − y)‖ / ‖f − y‖`.
pub fn residual_update_check(
    model_before: &Mlp,
    model_after: &Mlp,
    x: &DenseMatrix,
    y: &[f64],
    k_before: &NtkMatrix,
    eta: f64,
) -> Result<f64> {
    k_before.check_fresh(model_before, x)?;
    let n = y.len() as f64;
    let r0: Vec<f64> = model_before.predict(x)?.iter().zip(y).map(|(f, y)| f - y).collect();
    let r1: Vec<f64> = model_after.predict(x)?.iter().zip(y).map(|(f, y)| f - y).collect();
    let kr = k_before.matrix().matvec(&r0);
    let remainder: Vec<f64> = (0..r0.len()).map(|i| r1[i] - (r0[i] - 2.0 * eta / n * kr[i])).collect();
    let base = norm2(&r0);
    Ok(if base == 0.0 { 0.0 } else { norm2(&remainder) / base })
}

/// Training MSE, exposed for callers that only hold a model and data.
pub fn mse(model: &Mlp, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
    Ok(mean_squared_residual(&model.predict(x)?, y))
}

/// Writes `index,eigenvalue` rows.
pub fn write_eigenvalues_csv(values: &[f64], path: &Path) -> Result<()> {
    let mut text = String::from("index,eigenvalue\n");
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("{},{v:?}\n", i + 1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

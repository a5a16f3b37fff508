//! Fully-connected scalar-output ReLU networks with hand-written backprop.
//!
//! A network of depth `L` maps `x ∈ ℝ^d` through `L − 1` hidden ReLU layers
//!
//! ```text
//! h⁰ = x,   hˡ = ReLU(α_{l−1} Wˡ hˡ⁻¹ + bˡ),   f = α_{L−1} vᵀ h^{L−1}
//! ```
//!
//! where `α_l` is the forward scale for fan-in `m_l` (`m_0 = d`). Depth 1 is the
//! linear model `f = α_0 vᵀx`.
//!
//! All parameters live in one flat vector laid out layer by layer: `Wˡ` in
//! row-major order, then `bˡ` (when biases are enabled), and finally `v`. This
//! is also the order in which initial weights are drawn.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{fnv1a, ShiftRng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Rows evaluated at once by [`Mlp::predict`], bounding activation memory.
const PREDICT_BLOCK_ROWS: usize = 512;

/// How forward scales and initial weight deviations depend on fan-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameterization {
    /// Forward scale `1/√fan_in`, weights `N(0, 1)`.
    Ntk,
    /// Forward scale 1, weights `N(0, 1/fan_in)` (LeCun init).
    Standard,
    /// NTK forward scaling with weights `N(0, σ²)`, σ small (0.1 in practice).
    NearZero { sigma: f64 },
}

impl Parameterization {
    pub fn forward_scale(&self, fan_in: usize) -> f64 {
        match self {
            Parameterization::Ntk | Parameterization::NearZero { .. } => 1.0 / (fan_in as f64).sqrt(),
            Parameterization::Standard => 1.0,
        }
    }

    pub fn init_std(&self, fan_in: usize) -> f64 {
        match self {
            Parameterization::Ntk => 1.0,
            Parameterization::Standard => 1.0 / (fan_in as f64).sqrt(),
            Parameterization::NearZero { sigma } => *sigma,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// `m_1 … m_{L−1}`; empty for the linear model.
    pub hidden_widths: Vec<usize>,
    pub parameterization: Parameterization,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Keep the output weights `v` fixed at their initial values.
    #[serde(default)]
    pub freeze_output: bool,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, parameterization: Parameterization, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths,
            parameterization,
            bias: true,
            freeze_output: false,
            seed,
        }
    }

    /// Two-layer (one hidden layer) NTK-parameterized network.
    pub fn two_layer(input_dim: usize, width: usize, seed: u64) -> Self {
        Self::new(input_dim, vec![width], Parameterization::Ntk, seed)
    }

    /// The depth-1 model `f = vᵀx/√d` (NTK scaling, no biases).
    pub fn linear(input_dim: usize, seed: u64) -> Self {
        Self {
            bias: false,
            ..Self::new(input_dim, Vec::new(), Parameterization::Ntk, seed)
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_frozen_output(mut self, frozen: bool) -> Self {
        self.freeze_output = frozen;
        self
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::config("model.hidden_widths", "all widths must be >= 1"));
        }
        if let Parameterization::NearZero { sigma } = self.parameterization {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::config("model.parameterization.sigma", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    weight: Range<usize>,
    bias: Option<Range<usize>>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<LayerSpan>,
    output: Range<usize>,
    params: Vec<f64>,
}

/// Activations of a batch: `hidden[l]` is `h^{l+1}` for every row.
pub(crate) struct Trace<'a> {
    pub input: ArrayView2<'a, f64>,
    pub hidden: Vec<Array2<f64>>,
    pub out: Array1<f64>,
}

impl<'a> Trace<'a> {
    /// `h^{L−1}` (the input itself for the linear model).
    pub fn last(&self) -> ArrayView2<'_, f64> {
        self.hidden.last().map_or(self.input.view(), |h| h.view())
    }

    /// `h^l` for `l = 0 … L−1`.
    pub fn activation(&self, l: usize) -> ArrayView2<'_, f64> {
        if l == 0 {
            self.input.view()
        } else {
            self.hidden[l - 1].view()
        }
    }
}

impl Mlp {
    /// Draws all weights i.i.d. `N(0, κ_l²)` from the config seed, layer by
    /// layer in flattening order. Biases start at zero.
    pub fn init(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut mlp = Self::zeros(config);
        let mut rng = ShiftRng::new(mlp.config.seed);
        let param = mlp.config.parameterization;
        for layer in &mlp.layers {
            let std = param.init_std(layer.fan_in);
            for w in &mut mlp.params[layer.weight.clone()] {
                *w = std * rng.gaussian();
            }
        }
        let std = param.init_std(mlp.last_width());
        for w in &mut mlp.params[mlp.output.clone()] {
            *w = std * rng.gaussian();
        }
        Ok(mlp)
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(config: MlpConfig) -> Self {
        let mut layers = Vec::with_capacity(config.hidden_widths.len());
        let mut offset = 0;
        let mut fan_in = config.input_dim;
        for &fan_out in &config.hidden_widths {
            let weight = offset..offset + fan_in * fan_out;
            offset = weight.end;
            let bias = config.bias.then(|| {
                let r = offset..offset + fan_out;
                offset = r.end;
                r
            });
            layers.push(LayerSpan {
                fan_in,
                fan_out,
                weight,
                bias,
            });
            fan_in = fan_out;
        }
        let output = offset..offset + fan_in;
        let params = vec![0.0; output.end];
        Self {
            config,
            layers,
            output,
            params,
        }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                flat.len()
            )));
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    /// Index range of the output weights `v` in the flat vector.
    pub fn output_range(&self) -> Range<usize> {
        self.output.clone()
    }

    /// `true` for every trainable coordinate of the flat vector.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        if self.config.freeze_output {
            mask[self.output.clone()].fill(false);
        }
        mask
    }

    /// Weight matrix `Wˡ` of hidden layer `l` (0-based), shape fan_out × fan_in.
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let s = &self.layers[l];
        ArrayView2::from_shape((s.fan_out, s.fan_in), &self.params[s.weight.clone()]).expect("layer shape")
    }

    pub fn weight_mut(&mut self, l: usize) -> ndarray::ArrayViewMut2<'_, f64> {
        let s = &self.layers[l];
        ndarray::ArrayViewMut2::from_shape((s.fan_out, s.fan_in), &mut self.params[s.weight.clone()])
            .expect("layer shape")
    }

    pub fn bias_mut(&mut self, l: usize) -> Option<&mut [f64]> {
        let r = self.layers[l].bias.clone()?;
        Some(&mut self.params[r])
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.params[self.output.clone()]
    }

    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let r = self.output.clone();
        &mut self.params[r]
    }

    fn bias(&self, l: usize) -> Option<ArrayView1<'_, f64>> {
        self.layers[l].bias.as_ref().map(|r| ArrayView1::from(&self.params[r.clone()]))
    }

    fn last_width(&self) -> usize {
        self.layers.last().map_or(self.config.input_dim, |l| l.fan_out)
    }

    fn scale(&self, fan_in: usize) -> f64 {
        self.config.parameterization.forward_scale(fan_in)
    }

    /// FNV-1a of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_bits().to_le_bytes()).collect();
        fnv1a(&bytes)
    }

    pub(crate) fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::contract(format!(
                "input has dimension {cols}, model expects {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn trace<'a>(&self, x: ArrayView2<'a, f64>) -> Trace<'a> {
        self.trace_with(x, None)
    }

    /// Forward pass whose ReLU on/off pattern is taken from `gates` rather than
    /// from the sign of each preactivation. An "on" unit passes its
    /// preactivation through unchanged even when it is negative.
    pub(crate) fn trace_gated<'a>(&self, x: ArrayView2<'a, f64>, gates: &[Array2<bool>]) -> Trace<'a> {
        self.trace_with(x, Some(gates))
    }

    /// Activation pattern (`z > 0`) of every hidden layer.
    pub(crate) fn gates(&self, trace: &Trace<'_>) -> Vec<Array2<bool>> {
        trace.hidden.iter().map(|h| h.mapv(|v| v > 0.0)).collect()
    }

    fn trace_with<'a>(&self, x: ArrayView2<'a, f64>, gates: Option<&[Array2<bool>]>) -> Trace<'a> {
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, span) in self.layers.iter().enumerate() {
            let prev = if l == 0 { x.view() } else { hidden[l - 1].view() };
            let mut z = prev.dot(&self.weight(l).t());
            let alpha = self.scale(span.fan_in);
            match self.bias(l) {
                Some(b) => Zip::from(z.rows_mut()).for_each(|mut row| {
                    Zip::from(&mut row).and(&b).for_each(|zij, &bj| *zij = alpha * *zij + bj);
                }),
                None => z.mapv_inplace(|v| alpha * v),
            }
            match gates {
                // max(0.0) maps -0.0 to 0.0, so h != 0 recovers the strict z > 0 mask.
                None => z.mapv_inplace(|v| v.max(0.0)),
                Some(g) => Zip::from(&mut z).and(&g[l]).for_each(|v, &on| {
                    if !on {
                        *v = 0.0;
                    }
                }),
            }
            hidden.push(z);
        }
        let last = hidden.last().map_or(x.view(), |h| h.view());
        let v = ArrayView1::from(&self.params[self.output.clone()]);
        let out = last.dot(&v) * self.scale(self.last_width());
        Trace {
            input: x,
            hidden,
            out,
        }
    }

    /// Per-row backprop signals `δˡ = ∂f/∂zˡ`, each row multiplied by
    /// `coeffs[i]` when given. Entry `l` belongs to hidden layer `l + 1`.
    pub(crate) fn signals(&self, trace: &Trace<'_>, coeffs: Option<&[f64]>) -> Vec<Array2<f64>> {
        let depth = self.layers.len();
        if depth == 0 {
            return Vec::new();
        }
        let mut deltas: Vec<Array2<f64>> = Vec::with_capacity(depth);
        let v = ArrayView1::from(&self.params[self.output.clone()]);
        let alpha_out = self.scale(self.last_width());
        let mut top = trace.hidden[depth - 1].clone();
        Zip::from(top.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(&v).for_each(|h, &vj| {
                *h = if *h != 0.0 { alpha_out * vj } else { 0.0 };
            });
        });
        scale_rows(&mut top, coeffs);
        deltas.push(top);
        for l in (1..depth).rev() {
            let upper = deltas.last().expect("nonempty");
            let mut d = upper.dot(&self.weight(l));
            let alpha = self.scale(self.layers[l].fan_in);
            Zip::from(&mut d).and(&trace.hidden[l - 1]).for_each(|di, &h| {
                *di = if h != 0.0 { alpha * *di } else { 0.0 };
            });
            deltas.push(d);
        }
        deltas.reverse();
        deltas
    }

    /// `Σᵢ cᵢ ∂f(xᵢ)/∂w` over trainable parameters (frozen entries are zero).
    pub(crate) fn weighted_param_gradient(&self, trace: &Trace<'_>, coeffs: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let deltas = self.signals(trace, Some(coeffs));
        for (l, span) in self.layers.iter().enumerate() {
            let alpha = self.scale(span.fan_in);
            let gw = deltas[l].t().dot(&trace.activation(l)) * alpha;
            for (g, w) in grad[span.weight.clone()].iter_mut().zip(gw.iter()) {
                *g = *w;
            }
            if let Some(r) = &span.bias {
                let gb = deltas[l].sum_axis(Axis(0));
                grad[r.clone()].copy_from_slice(gb.as_slice().expect("contiguous"));
            }
        }
        if !self.config.freeze_output {
            let alpha = self.scale(self.last_width());
            let c = ArrayView1::from(coeffs);
            let gv = trace.last().t().dot(&c) * alpha;
            grad[self.output.clone()].copy_from_slice(gv.as_slice().expect("contiguous"));
        }
        grad
    }

    /// `∇ₓ f` for every row of the batch.
    pub(crate) fn input_gradients(&self, trace: &Trace<'_>) -> Array2<f64> {
        let n = trace.input.nrows();
        let alpha0 = self.scale(self.config.input_dim);
        if self.layers.is_empty() {
            let v = ArrayView1::from(&self.params[self.output.clone()]);
            let row = v.mapv(|vj| alpha0 * vj);
            return row.broadcast((n, self.config.input_dim)).expect("broadcast").to_owned();
        }
        let deltas = self.signals(trace, None);
        deltas[0].dot(&self.weight(0)) * alpha0
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.trace(view).out[0])
    }

    /// Outputs for every row of `x`.
    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        self.check_dim(x.cols())?;
        let mut out = Vec::with_capacity(x.rows());
        let view = x.view();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + PREDICT_BLOCK_ROWS).min(x.rows());
            let t = self.trace(view.slice(ndarray::s![start..end, ..]));
            out.extend(t.out.iter().copied());
            start = end;
        }
        Ok(out)
    }

    /// Mean squared error `(1/n)Σ(f(xᵢ) − yᵢ)²`.
    pub fn mse(&self, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
        check_labels(x, y)?;
        let f = self.predict(x)?;
        Ok(mean_squared_residual(&f, y))
    }

    /// Gradient of `f(x)` with respect to the trainable parameters.
    pub fn param_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let trace = self.trace(view);
        Ok(self.weighted_param_gradient(&trace, &[1.0]))
    }

    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let trace = self.trace(view);
        Ok(self.input_gradients(&trace).row(0).to_vec())
    }

    /// MSE over `(x, y)` and its gradient `(2/n)Σ(fᵢ − yᵢ)∂fᵢ/∂w`.
    pub fn loss_and_gradient(&self, x: &DenseMatrix, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_labels(x, y)?;
        self.check_dim(x.cols())?;
        Ok(self.loss_and_gradient_of(self.trace(x.view()), y))
    }

    /// Same as [`Mlp::loss_and_gradient`] with the activation pattern held at
    /// `gates`. Inputs are assumed already validated.
    pub(crate) fn loss_and_gradient_gated(&self, x: &DenseMatrix, y: &[f64], gates: &[Array2<bool>]) -> (f64, Vec<f64>) {
        self.loss_and_gradient_of(self.trace_gated(x.view(), gates), y)
    }

    fn loss_and_gradient_of(&self, trace: Trace<'_>, y: &[f64]) -> (f64, Vec<f64>) {
        let n = y.len() as f64;
        let residual: Vec<f64> = trace.out.iter().zip(y).map(|(f, y)| f - y).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;
        let coeffs: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
        (loss, self.weighted_param_gradient(&trace, &coeffs))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            flat_parameters: self.params.clone(),
            experiment: None,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        let mut mlp = Self::zeros(ck.config);
        mlp.set_params(&ck.flat_parameters)?;
        Ok(mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_annotated(path, None)
    }

    /// [`Mlp::save`] with the producing run's configuration embedded.
    pub fn save_annotated(&self, path: &Path, experiment: Option<serde_json::Value>) -> Result<()> {
        let ck = Checkpoint {
            experiment,
            ..self.to_checkpoint()
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// Versioned on-disk model. Floats are written in shortest round-trip form,
/// so loading restores every parameter bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: MlpConfig,
    pub seed: u64,
    pub flat_parameters: Vec<f64>,
    /// Configuration of the run that produced the weights, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

fn scale_rows(m: &mut Array2<f64>, coeffs: Option<&[f64]>) {
    if let Some(c) = coeffs {
        for (mut row, &ci) in m.rows_mut().into_iter().zip(c) {
            row.mapv_inplace(|x| x * ci);
        }
    }
}

fn check_labels(x: &DenseMatrix, y: &[f64]) -> Result<()> {
    if y.is_empty() || x.rows() == 0 {
        return Err(Error::contract("empty dataset"));
    }
    if x.rows() != y.len() {
        return Err(Error::contract(format!("{} inputs but {} labels", x.rows(), y.len())));
    }
    Ok(())
}

pub(crate) fn mean_squared_residual(f: &[f64], y: &[f64]) -> f64 {
    f.iter().zip(y).map(|(f, y)| (f - y) * (f - y)).sum::<f64>() / y.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_net() -> Mlp {
        let cfg = MlpConfig::new(2, vec![2], Parameterization::Ntk, 0).with_bias(false);
        let mut m = Mlp::zeros(cfg);
        m.weight_mut(0).assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        m.output_weights_mut().copy_from_slice(&[1.0, 1.0]);
        m
    }

    fn tiny(seed: u64, bias: bool) -> Mlp {
        Mlp::init(MlpConfig::new(3, vec![4], Parameterization::Ntk, seed).with_bias(bias)).unwrap()
    }

    fn random_input(rng: &mut ShiftRng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gaussian()).collect()
    }

    /// Smallest |pre-activation| over all hidden units, to stay off ReLU kinks.
    fn kink_distance(m: &Mlp, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let mut min: f64 = f64::INFINITY;
        for (l, span) in m.layers.iter().enumerate() {
            let w = m.weight(l);
            let alpha = m.scale(span.fan_in);
            let mut next = vec![0.0; span.fan_out];
            for j in 0..span.fan_out {
                let mut z = alpha * (0..span.fan_in).map(|k| w[[j, k]] * h[k]).sum::<f64>();
                if let Some(b) = m.bias(l) {
                    z += b[j];
                }
                min = min.min(z.abs());
                next[j] = z.max(0.0);
            }
            h = next;
        }
        min
    }

    fn assert_close_rel(a: f64, b: f64, tol: f64) {
        let scale = a.abs().max(b.abs()).max(1e-3);
        assert!((a - b).abs() <= tol * scale, "{a} vs {b}");
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MlpConfig::new(5, vec![7, 3], Parameterization::Ntk, 9);
        let a = Mlp::init(cfg.clone()).unwrap();
        let b = Mlp::init(cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn near_zero_weight_std() {
        let cfg = MlpConfig::new(100, vec![1024], Parameterization::NearZero { sigma: 0.1 }, 3);
        let m = Mlp::init(cfg).unwrap();
        let w = m.weight(0);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.095..=0.105).contains(&std), "std {std}");
    }

    #[test]
    fn ntk_scales_and_unit_variance() {
        let cfg = MlpConfig::two_layer(100, 1024, 4);
        let m = Mlp::init(cfg).unwrap();
        let w = m.weight(0);
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        let p = Parameterization::Ntk;
        assert_eq!(p.forward_scale(100), 0.1);
        assert_eq!(p.forward_scale(1024), 1.0 / 32.0);
        assert_eq!(p.init_std(1024), 1.0);
        assert_eq!(Parameterization::Standard.init_std(100), 0.1);
        assert_eq!(Parameterization::Standard.forward_scale(100), 1.0);
    }

    #[test]
    fn biases_start_at_zero() {
        let m = Mlp::init(MlpConfig::new(3, vec![4, 5], Parameterization::Ntk, 1)).unwrap();
        for span in &m.layers {
            let r = span.bias.clone().unwrap();
            assert!(m.params()[r].iter().all(|&b| b == 0.0));
        }
        assert_eq!(m.param_count(), 3 * 4 + 4 + 4 * 5 + 5 + 5);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = Mlp::zeros(MlpConfig::new(3, vec![4, 4], Parameterization::Ntk, 0));
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_forward_and_input_gradient() {
        let m = hand_net();
        let f = m.forward(&[1.0, -1.0]).unwrap();
        assert!((f - 0.5).abs() < 1e-15);
        let g = m.input_gradient(&[1.0, -1.0]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && g[1] == 0.0);
        // Only parameters feeding the active unit (unit 0) get gradient.
        let pg = m.param_gradient(&[1.0, -1.0]).unwrap();
        // Layout: W (2x2 row-major), v (2).
        assert!(pg[0] != 0.0 && pg[1] != 0.0);
        assert_eq!(pg[2], 0.0);
        assert_eq!(pg[3], 0.0);
        assert!(pg[4] != 0.0);
        assert_eq!(pg[5], 0.0);
    }

    #[test]
    fn linear_model_closed_forms() {
        let mut m = Mlp::zeros(MlpConfig::linear(4, 0));
        m.output_weights_mut().fill(1.0);
        assert!((m.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);

        let m = Mlp::init(MlpConfig::linear(4, 17)).unwrap();
        let x = [0.3, -1.2, 2.0, 0.5];
        let g = m.param_gradient(&x).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - xi / 2.0).abs() < 1e-15);
        }
        let gx = m.input_gradient(&x).unwrap();
        for (gi, vi) in gx.iter().zip(m.output_weights()) {
            assert!((gi - vi / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_loss_gradient_matches_least_squares() {
        let d = 5;
        let n = 7;
        let m = Mlp::init(MlpConfig::linear(d, 2)).unwrap();
        let mut rng = ShiftRng::new(8);
        let x = DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.gaussian()).collect()).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let (loss, grad) = m.loss_and_gradient(&x, &y).unwrap();
        // (2/(n d)) Xᵀ(Xv − √d y)
        let v = m.output_weights();
        let sd = (d as f64).sqrt();
        let resid: Vec<f64> = (0..n)
            .map(|i| x.row(i).iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / sd - y[i])
            .collect();
        let expected_loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        assert!((loss - expected_loss).abs() < 1e-12);
        for (k, &gk) in grad.iter().enumerate().take(d) {
            let g: f64 = (0..n).map(|i| x.get(i, k) * resid[i]).sum::<f64>() * 2.0 / (n as f64 * sd);
            assert!((gk - g).abs() < 1e-12, "{k}: {gk} vs {g}");
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let m = tiny(3, true);
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, -0.5, 0.2]]).unwrap();
        let y = m.predict(&x).unwrap();
        let (loss, grad) = m.loss_and_gradient(&x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_sample_loss_arithmetic() {
        let m = Mlp::zeros(MlpConfig::two_layer(2, 3, 0));
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (loss, _) = m.loss_and_gradient(&x, &[2.0]).unwrap();
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        let m = tiny(0, true);
        let empty = DenseMatrix::zeros(0, 3);
        assert!(m.loss_and_gradient(&empty, &[]).is_err());
        assert!(m.forward(&[1.0]).is_err());
        let x = DenseMatrix::zeros(2, 3);
        assert!(m.loss_and_gradient(&x, &[1.0]).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ShiftRng::new(77);
        let h = 1e-5;
        for seed in 0..10 {
            let m = tiny(seed, true);
            let x = random_input(&mut rng, 3);
            if kink_distance(&m, &x) < 1e-4 {
                continue;
            }
            let g = m.param_gradient(&x).unwrap();
            for (k, &gk) in g.iter().enumerate() {
                let mut plus = m.clone();
                plus.params_mut()[k] += h;
                let mut minus = m.clone();
                minus.params_mut()[k] -= h;
                let fd = (plus.forward(&x).unwrap() - minus.forward(&x).unwrap()) / (2.0 * h);
                assert_close_rel(gk, fd, 1e-6);
            }
            let gx = m.input_gradient(&x).unwrap();
            for k in 0..3 {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (m.forward(&xp).unwrap() - m.forward(&xm).unwrap()) / (2.0 * h);
                assert_close_rel(gx[k], fd, 1e-6);
            }
        }
    }

    #[test]
    fn frozen_output_has_zero_gradient() {
        let cfg = MlpConfig::two_layer(3, 4, 1).with_frozen_output(true);
        let m = Mlp::init(cfg).unwrap();
        let g = m.param_gradient(&[1.0, 2.0, 3.0]).unwrap();
        assert!(g[m.output_range()].iter().all(|&x| x == 0.0));
        assert!(g[..m.output_range().start].iter().any(|&x| x != 0.0));
        let mask = m.trainable_mask();
        assert!(!mask[m.output_range().start]);
    }

    #[test]
    fn positive_homogeneity_without_bias() {
        let m = Mlp::init(MlpConfig::new(4, vec![6], Parameterization::Ntk, 5).with_bias(false)).unwrap();
        let x = [0.4, -1.0, 2.2, 0.1];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let f = m.forward(&x).unwrap();
        assert!((m.forward(&x2).unwrap() - 2.0 * f).abs() <= 1e-14 * f.abs().max(1.0));
    }

    #[test]
    fn batch_predict_matches_single_forward() {
        let m = Mlp::init(MlpConfig::new(3, vec![5, 4], Parameterization::Standard, 2)).unwrap();
        let mut rng = ShiftRng::new(1);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| random_input(&mut rng, 3)).collect();
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let batch = m.predict(&x).unwrap();
        for (i, r) in rows.iter().enumerate() {
            assert!((batch[i] - m.forward(r).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let m = Mlp::init(MlpConfig::new(3, vec![5, 4], Parameterization::Ntk, 12)).unwrap();
        m.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let a: Vec<u64> = m.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn flatten_unflatten_is_identity(seed in any::<u64>(), w1 in 1usize..6, w2 in 1usize..6) {
            let m = Mlp::init(MlpConfig::new(3, vec![w1, w2], Parameterization::Ntk, seed)).unwrap();
            let mut other = Mlp::zeros(m.config().clone());
            other.set_params(m.params()).unwrap();
            prop_assert_eq!(other.params(), m.params());
            let x = [0.1, 0.2, -0.3];
            prop_assert_eq!(other.forward(&x).unwrap().to_bits(), m.forward(&x).unwrap().to_bits());
        }

        #[test]
        fn homogeneity_depth_two(seed in any::<u64>(), c in 0.1f64..10.0) {
            let m = Mlp::init(MlpConfig::new(3, vec![8], Parameterization::Ntk, seed).with_bias(false)).unwrap();
            let x = [0.7, -0.2, 1.3];
            let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
            let f = m.forward(&x).unwrap();
            prop_assert!((m.forward(&cx).unwrap() - c * f).abs() <= 1e-12 * (c * f).abs().max(1.0));
        }
    }
}

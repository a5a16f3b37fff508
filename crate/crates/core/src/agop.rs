//! Average gradient outer product `G = (1/n) Σ ∇ₓf(xᵢ) ∇ₓf(xᵢ)ᵀ` and its
//! cosine alignment with a reference matrix.

use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, sym_eigen, DenseMatrix};
use crate::network::Mlp;

/// Rows of input gradients materialized at once.
const AGOP_BLOCK_ROWS: usize = 1024;

#[derive(Debug, Clone)]
pub struct AgopMatrix {
    g: DenseMatrix,
    sample_count: usize,
    model_fingerprint: u64,
}

impl AgopMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.g
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    pub fn trace(&self) -> f64 {
        self.g.trace()
    }

    /// Eigenvalues above `rel_tol · λ₁`.
    pub fn numerical_rank(&self, rel_tol: f64) -> Result<usize> {
        numerical_rank(&self.g, rel_tol)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.g.write_csv(path)
    }

    /// Leading `k × k` block rescaled to `[0, 1]` for heat maps.
    pub fn write_crop_csv(&self, path: &Path, k: usize) -> Result<()> {
        crop_normalized(&self.g, k).write_csv(path)
    }
}

/// AGOP of `model` over the rows of `x`.
pub fn agop(model: &Mlp, x: &DenseMatrix) -> Result<AgopMatrix> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::contract("AGOP needs at least one sample"));
    }
    model.check_dim(x.cols())?;
    let d = x.cols();
    let view = x.view();
    let mut acc = Array2::<f64>::zeros((d, d));
    let mut start = 0;
    while start < n {
        let end = (start + AGOP_BLOCK_ROWS).min(n);
        let trace = model.trace(view.slice(s![start..end, ..]));
        let grads = model.input_gradients(&trace);
        acc += &grads.t().dot(&grads);
        start = end;
    }
    acc /= n as f64;
    let mut g = DenseMatrix::from_array(acc);
    g.mirror_upper();
    Ok(AgopMatrix {
        g,
        sample_count: n,
        model_fingerprint: model.fingerprint(),
    })
}

/// `cos(G, G*) = ⟨G, G*⟩_F / (‖G‖_F ‖G*‖_F)`.
pub fn alignment(g: &AgopMatrix, g_star: &DenseMatrix) -> Result<f64> {
    cosine(&g.g, g_star)
}

/// Frobenius cosine of two matrices of equal shape.
pub fn cosine(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "alignment needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedAlignment("one of the matrices is zero".into()));
    }
    Ok(frobenius_inner(a, b)? / (na * nb))
}

pub fn numerical_rank(m: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    let values = sym_eigen(m)?.values;
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(0);
    }
    Ok(values.iter().filter(|&&v| v > rel_tol * top).count())
}

/// Leading `k × k` block mapped affinely onto `[0, 1]`; a constant block maps to 0.
pub fn crop_normalized(m: &DenseMatrix, k: usize) -> DenseMatrix {
    let k = k.min(m.rows()).min(m.cols());
    let mut out = DenseMatrix::zeros(k, k);
    let values: Vec<f64> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| m.get(i, j)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for i in 0..k {
        for j in 0..k {
            let v = if span > 0.0 { (m.get(i, j) - lo) / span } else { 0.0 };
            out.set(i, j, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{egop_oracle, TargetFunction, DEFAULT_EGOP_SAMPLES};
    use crate::network::{MlpConfig, Parameterization};
    use crate::rng::ShiftRng;
    use proptest::prelude::*;

    fn gaussian(n: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut rng = ShiftRng::new(seed);
        DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.gaussian()).collect()).unwrap()
    }

    fn random_psd(d: usize, rank: usize, seed: u64) -> DenseMatrix {
        let a = gaussian(rank, d, seed);
        a.transpose().matmul(&a).unwrap()
    }

    fn random_orthogonal(d: usize, seed: u64) -> DenseMatrix {
        let a = gaussian(d, d, seed);
        let sym = a.add(&a.transpose()).unwrap();
        let basis = sym_eigen(&sym).unwrap();
        let mut q = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let u = basis.eigenvector(j);
            for (i, &ui) in u.iter().enumerate() {
                q.set(i, j, ui);
            }
        }
        q
    }

    fn conj(q: &DenseMatrix, m: &DenseMatrix) -> DenseMatrix {
        q.matmul(m).unwrap().matmul(&q.transpose()).unwrap()
    }

    #[test]
    fn linear_model_agop_is_vvt_over_d() {
        let d = 6;
        let model = Mlp::init(MlpConfig::linear(d, 4)).unwrap();
        let g = agop(&model, &gaussian(13, d, 1)).unwrap();
        let expected = DenseMatrix::outer(model.output_weights()).scale(1.0 / d as f64);
        assert!(g.matrix().sub(&expected).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn hand_net_agop() {
        let cfg = MlpConfig::new(2, vec![2], Parameterization::Ntk, 0).with_bias(false);
        let mut m = Mlp::zeros(cfg);
        m.weight_mut(0).assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        m.output_weights_mut().copy_from_slice(&[1.0, 1.0]);
        let x = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let g = agop(&m, &x).unwrap();
        let want = DenseMatrix::from_rows(&[vec![0.25, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(g.matrix().sub(&want).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn agop_is_sample_weighted_average() {
        let model = Mlp::init(MlpConfig::new(4, vec![16, 8], Parameterization::Ntk, 2)).unwrap();
        let x1 = gaussian(7, 4, 3);
        let x2 = gaussian(12, 4, 4);
        let mut rows: Vec<Vec<f64>> = (0..7).map(|i| x1.row(i).to_vec()).collect();
        rows.extend((0..12).map(|i| x2.row(i).to_vec()));
        let all = agop(&model, &DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        let a = agop(&model, &x1).unwrap();
        let b = agop(&model, &x2).unwrap();
        let mix = a.matrix().scale(7.0 / 19.0).add(&b.matrix().scale(12.0 / 19.0)).unwrap();
        assert!(all.matrix().sub(&mix).unwrap().max_abs() <= 1e-12 * all.matrix().max_abs());
    }

    #[test]
    fn agop_matches_per_sample_gradients() {
        let model = Mlp::init(MlpConfig::new(3, vec![10], Parameterization::Standard, 5)).unwrap();
        let x = gaussian(9, 3, 6);
        let g = agop(&model, &x).unwrap();
        let mut want = DenseMatrix::zeros(3, 3);
        for i in 0..9 {
            let gi = model.input_gradient(x.row(i)).unwrap();
            want = want.add(&DenseMatrix::outer(&gi)).unwrap();
        }
        let want = want.scale(1.0 / 9.0);
        assert!(g.matrix().sub(&want).unwrap().max_abs() <= 1e-13);
        assert!(g.matrix().is_symmetric(1e-12));
        assert!(g.trace() >= 0.0);
        let values = sym_eigen(g.matrix()).unwrap().values;
        assert!(values.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn alignment_examples() {
        let a = DenseMatrix::from_diag(&[1.0, 0.0]);
        let b = DenseMatrix::from_diag(&[0.0, 1.0]);
        let c = DenseMatrix::from_diag(&[1.0, 1.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert!((cosine(&c, &a).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine(&a, &DenseMatrix::zeros(2, 2)), Err(Error::UndefinedAlignment(_))));
        assert!(cosine(&a, &DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn linear_model_on_first_axis_aligns_with_rank_one_oracle() {
        let d = 5;
        let mut m = Mlp::zeros(MlpConfig::linear(d, 0));
        m.output_weights_mut()[0] = 1.0;
        let g = agop(&m, &gaussian(4, d, 1)).unwrap();
        let mut diag = vec![0.0; d];
        diag[0] = 1.0;
        assert!((alignment(&g, &DenseMatrix::from_diag(&diag)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(g.numerical_rank(1e-6).unwrap(), 1);
    }

    #[test]
    fn oracle_fixpoint() {
        for t in [TargetFunction::Rank2, TargetFunction::FullRank] {
            let o = egop_oracle(&t, 100, DEFAULT_EGOP_SAMPLES, 4).unwrap();
            let a = cosine(&o.monte_carlo, o.exact.as_ref().unwrap()).unwrap();
            assert!(a >= 0.999, "{t:?}: {a}");
        }
    }

    #[test]
    fn crop_is_normalized() {
        let m = random_psd(20, 20, 3);
        let c = crop_normalized(&m, 10);
        assert_eq!(c.shape(), (10, 10));
        let lo = c.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(crop_normalized(&DenseMatrix::identity(3), 10).shape() == (3, 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scale_invariance(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let g = random_psd(6, 3, seed);
            let h = random_psd(6, 4, seed ^ 1);
            let a = cosine(&g, &h).unwrap();
            let b = cosine(&g.scale(c), &h).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn psd_cosine_bounds_and_symmetry(seed in any::<u64>(), r1 in 1usize..6, r2 in 1usize..6) {
            let g = random_psd(6, r1, seed);
            let h = random_psd(6, r2, seed.wrapping_add(7));
            let a = cosine(&g, &h).unwrap();
            prop_assert!((-1e-15..=1.0 + 1e-15).contains(&a));
            prop_assert!((a - cosine(&h, &g).unwrap()).abs() <= 1e-15);
        }

        #[test]
        fn orthogonal_conjugation_covariance(seed in any::<u64>()) {
            let g = random_psd(7, 3, seed);
            let h = random_psd(7, 5, seed ^ 0xabc);
            let q = random_orthogonal(7, seed ^ 0x55);
            let a = cosine(&g, &h).unwrap();
            let b = cosine(&conj(&q, &g), &conj(&q, &h)).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}

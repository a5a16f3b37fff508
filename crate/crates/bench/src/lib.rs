//! Shared fixtures for the criterion benchmarks in `benches/`.

use catapult_core::data::generate_synthetic;
use catapult_core::linalg::DenseMatrix;
use catapult_core::{Dataset, Mlp, MlpConfig, ShiftRng, TargetFunction};

/// A Rank-2 regression problem and a freshly initialized two-layer network.
pub fn two_layer_fixture(n: usize, d: usize, width: usize, seed: u64) -> (Mlp, Dataset) {
    let ds = generate_synthetic(TargetFunction::Rank2, n, d, 0.1, seed).expect("valid synthetic sizes");
    let model = Mlp::init(MlpConfig::two_layer(d, width, seed)).expect("valid network config");
    (model, ds)
}

/// A random symmetric positive semi-definite `n × n` matrix `AAᵀ/n`.
pub fn random_psd(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = ShiftRng::new(seed);
    let a = DenseMatrix::from_vec(n, n, (0..n * n).map(|_| rng.gaussian()).collect()).expect("square");
    let mut m = a.matmul(&a.transpose()).expect("square").scale(1.0 / n as f64);
    m.mirror_upper();
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let (model, ds) = two_layer_fixture(8, 5, 16, 1);
        assert_eq!((ds.n(), ds.d()), (8, 5));
        assert_eq!(model.input_dim(), 5);
        let m = random_psd(6, 2);
        assert!(m.is_symmetric(0.0));
        assert!(catapult_core::linalg::sym_eigen(&m).unwrap().values.iter().all(|&v| v > -1e-12));
    }
}

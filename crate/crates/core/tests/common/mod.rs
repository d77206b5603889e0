//! Independent reference computations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osse_lab::letkf::{self, Ensemble, LetkfConfig};
use osse_lab::osse::{ObservationBatch, ObservationOperator};
use osse_lab::reservoir::{readout_transform, ReservoirNet, ReservoirState};
use osse_lab::{Execution, Series};

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Textbook Kalman update with `P = X X^T / (N - 1)` and `R = e^2 I`.
pub fn kalman_update(
    ens: &Ensemble,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    error_std: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let x = ens.deviations();
    let n = ens.size() as f64;
    let pf = &x * x.transpose() / (n - 1.0);
    let r = DMatrix::identity(h.nrows(), h.nrows()) * error_std * error_std;
    let s = h * &pf * h.transpose() + r;
    let k = &pf * h.transpose() * s.try_inverse().expect("innovation covariance is invertible");
    let mean = ens.mean();
    let xa = &mean + &k * (y - h * &mean);
    let pa = (DMatrix::identity(pf.nrows(), pf.nrows()) - &k * h) * &pf;
    (xa, pa)
}

pub struct KfCase {
    pub ensemble: Ensemble,
    pub batch: ObservationBatch,
}

/// Random ensemble around a random state and a random observation subset.
pub fn kf_case(seed: u64, h: usize) -> KfCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 8;
    let n = 20;
    let center: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..10.0)).collect();
    let spread = rng.random_range(0.2..2.0);
    let members = DMatrix::from_fn(m, n, |i, _| center[i] + spread * rng.random_range(-1.0..1.0));
    let ensemble = Ensemble::from_matrix(members, 0).unwrap();
    let nodes = rand::seq::index::sample(&mut rng, m, h).into_vec();
    let op = Arc::new(ObservationOperator::new(nodes, m).unwrap());
    let error_std = rng.random_range(0.05..2.0);
    let values = op.nodes().iter().map(|&i| center[i] + rng.random_range(-2.0..2.0)).collect();
    KfCase {
        ensemble,
        batch: ObservationBatch {
            step: 0,
            values,
            operator: op,
            error_std,
        },
    }
}

/// Worst relative error of LETKF vs Kalman mean and covariance over 50
/// random cases with `h` cycling through 1..=8.
pub fn kf_oracle_worst(exec: Execution) -> (f64, f64) {
    let cfg = LetkfConfig {
        inflation: 1.0,
        localization_scale: f64::INFINITY,
        ..Default::default()
    };
    let (mut worst_mean, mut worst_cov) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let h = 1 + (case as usize % 8);
        let c = kf_case(1000 + case, h);
        let hm = c.batch.operator.matrix();
        let y = DVector::from_vec(c.batch.values.clone());
        let (xa, pa) = kalman_update(&c.ensemble, &hm, &y, c.batch.error_std);
        let a = letkf::analysis_step(&c.ensemble, &c.batch, &cfg, exec).unwrap();
        let mean = a.mean();
        worst_mean = worst_mean.max((&mean - &xa).norm() / xa.norm());
        worst_cov = worst_cov.max(rel_err(&a.covariance(), &pa));
    }
    (worst_mean, worst_cov)
}

/// Teacher-forced feature columns `f(r_k)` and targets `u_k`, `k > washout`,
/// built with `advance` only.
pub fn teacher_forced(net: &ReservoirNet, series: &Series, washout: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = net.params().size;
    let mut r = ReservoirState::zeros(n);
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (k, u) in series.rows().enumerate() {
        if k > washout {
            feats.push(readout_transform(r.as_slice()));
            targets.push(u.to_vec());
        }
        r = net.advance(&r, u).unwrap();
    }
    let cols = feats.len();
    let f = DMatrix::from_fn(n, cols, |i, j| feats[j][i]);
    let u = DMatrix::from_fn(series.dim(), cols, |i, j| targets[j][i]);
    (f, u)
}

/// `U F^T (F F^T + beta I)^{-1}` with the explicit state matrix.
pub fn batch_ridge(f: &DMatrix<f64>, u: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let n = f.nrows();
    let a = f * f.transpose() + DMatrix::identity(n, n) * beta;
    let chol = a.cholesky().expect("regularized normal matrix is SPD");
    // W A = U F^T  <=>  A W^T = F U^T
    chol.solve(&(f * u.transpose())).transpose()
}

pub fn readout_matrix(net: &ReservoirNet) -> DMatrix<f64> {
    let p = net.params();
    DMatrix::from_row_slice(p.input_dim, p.size, net.readout().expect("trained"))
}

pub fn random_series(seed: u64, dim: usize, len: usize) -> Series {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Series::from_flat(dim, (0..dim * len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

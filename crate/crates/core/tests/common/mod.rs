#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsmfg_core::{DMatrix, DVector, LqgProblem};

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Random instance with constant coefficients satisfying the standing assumptions.
pub fn random_problem(seed: u64, n: usize, m: usize, r: usize, risk: f64) -> LqgProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LqgProblem::zeros(n, m, r, 1.0);
    p.drift = random_matrix(&mut rng, n, n, 1.0).into();
    p.input = random_matrix(&mut rng, n, m, 1.0);
    p.offset = random_matrix(&mut rng, n, 1, 0.3).into();
    p.diffusion = random_matrix(&mut rng, n, r, 0.5).into();
    let l = random_matrix(&mut rng, m, m, 0.5);
    p.control_cost = &l * l.transpose() + DMatrix::identity(m, m);
    p.cross_cost = random_matrix(&mut rng, n, m, 0.3);
    let c = random_matrix(&mut rng, n, n, 0.7);
    let r_inv = p.control_cost.clone().try_inverse().unwrap();
    let q = &c * c.transpose() + &p.cross_cost * r_inv * p.cross_cost.transpose();
    p.state_cost = (&q + q.transpose()) * 0.5;
    let d = random_matrix(&mut rng, n, n, 0.5);
    p.terminal_cost = &d * d.transpose();
    p.state_linear = DVector::from_fn(n, |_, _| 0.5 * rng.random_range(-1.0..1.0));
    p.control_linear = DVector::from_fn(m, |_, _| 0.5 * rng.random_range(-1.0..1.0));
    p.x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    p.risk = risk;
    p
}

/// `Π(t) = Y X⁻¹` with `[X; Y](t) = exp(H(t−T))[I; Q̂]` for constant coefficients.
pub fn hamiltonian_pi(p: &LqgProblem, t: f64) -> DMatrix<f64> {
    let n = p.state_dim();
    let a = p.drift.at(0.0);
    let sigma = p.diffusion.at(0.0);
    let r_inv = p.control_cost.clone().try_inverse().unwrap();
    let a_t = &a - &p.input * &r_inv * p.cross_cost.transpose();
    let q_t = &p.state_cost - &p.cross_cost * &r_inv * p.cross_cost.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a_t);
    h.view_mut((0, n), (n, n))
        .copy_from(&(-(&p.input * &r_inv * p.input.transpose()) + &sigma * sigma.transpose() * p.risk));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q_t));
    h.view_mut((n, n), (n, n)).copy_from(&(-a_t.transpose()));
    let flow = (h * (t - p.horizon)).exp();
    let mut boundary = DMatrix::zeros(2 * n, n);
    boundary.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    boundary.view_mut((n, 0), (n, n)).copy_from(&p.terminal_cost);
    let xy = flow * boundary;
    let x = xy.rows(0, n).into_owned();
    let y = xy.rows(n, n).into_owned();
    y * x.try_inverse().unwrap()
}

//! Risk-sensitive Riccati and offset equations, the optimal affine feedback law
//! and the optimal log-cost constant.

use alloc::{vec, vec::Vec};
use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::model::LqgProblem;
use crate::numerics::{integrate_ode, integrate_ode_projected, Direction, MatrixTrajectory, TimeGrid};
use crate::{Error, Result};

/// Affine law `u = K(t)x + k(t)` sampled on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    /// `K(t)`, m×n.
    pub gain: MatrixTrajectory,
    /// `k(t)`, m×1.
    pub offset: MatrixTrajectory,
}

impl FeedbackLaw {
    pub fn grid(&self) -> &TimeGrid {
        self.gain.grid()
    }

    /// Control at node `i` for state `x`.
    pub fn control(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let k = self.offset.at_node(i);
        self.gain.at_node(i) * x + DVector::from_column_slice(k.as_slice())
    }

    /// Law with the gain multiplied by `factor`.
    pub fn scale_gain(&self, factor: f64) -> Self {
        Self {
            gain: self.gain.map(|_, k| k * factor).expect("finite scaling"),
            offset: self.offset.clone(),
        }
    }

    /// Law with `shift` added to every offset entry.
    pub fn shift_offset(&self, shift: f64) -> Self {
        Self {
            gain: self.gain.clone(),
            offset: self.offset.map(|_, k| k.add_scalar(shift)).expect("finite shift"),
        }
    }

    /// Law whose gain at time `t` is the original gain at `min(t + lag, T)`.
    pub fn time_shift_gain(&self, lag: f64) -> Self {
        let grid = *self.grid();
        let gain = MatrixTrajectory::from_fn(grid, |t| {
            self.gain
                .interpolate((t + lag).clamp(0.0, grid.t_end()))
                .expect("clamped time")
        })
        .expect("interpolated gain is finite");
        Self { gain, offset: self.offset.clone() }
    }
}

/// Solution of the optimality system for one [`LqgProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `Π(t)`, symmetric n×n.
    pub pi: MatrixTrajectory,
    /// `s(t)`, n×1.
    pub s: MatrixTrajectory,
    pub law: FeedbackLaw,
    /// `C*_T`, the optimal value of `log E exp(δΛ_T)`.
    pub c_star: f64,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.pi.grid()
    }
}

/// Solves the Riccati and offset equations and assembles the law and `C*_T`.
pub fn solve(p: &LqgProblem, grid: &TimeGrid) -> Result<RiccatiSolution> {
    p.validate()?;
    let pi = solve_riccati(p, grid)?;
    let s = solve_offset(p, &pi, grid)?;
    let law = feedback_law(p, &pi, &s);
    let c_star = c_star(p, &pi, &s, grid);
    Ok(RiccatiSolution { pi, s, law, c_star })
}

struct RiccatiTerms {
    r_inv: DMatrix<f64>,
    b: DMatrix<f64>,
    s: DMatrix<f64>,
    q: DMatrix<f64>,
    risk: f64,
}

impl RiccatiTerms {
    fn new(p: &LqgProblem) -> Self {
        Self {
            r_inv: p.control_cost_inverse(),
            b: p.input.clone(),
            s: p.cross_cost.clone(),
            q: p.state_cost.clone(),
            risk: p.risk,
        }
    }

    /// `dΠ/dt = −(ΠA + AᵀΠ − (ΠB+S)R⁻¹(BᵀΠ+Sᵀ) + Q + δΠσσᵀΠ)`.
    fn rhs(&self, a: &DMatrix<f64>, sigma: &DMatrix<f64>, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let pb_s = pi * &self.b + &self.s;
        let ps = pi * sigma;
        let mut out = pi * a + a.transpose() * pi - &pb_s * &self.r_inv * pb_s.transpose() + &self.q;
        out += &ps * ps.transpose() * self.risk;
        -out
    }
}

/// Backward RK4 solution of the risk-sensitive Riccati equation with `Π(T) = Q̂`,
/// symmetrized after each step.
pub fn solve_riccati(p: &LqgProblem, grid: &TimeGrid) -> Result<MatrixTrajectory> {
    let terms = RiccatiTerms::new(p);
    integrate_ode_projected(
        |t, pi| terms.rhs(&p.drift.at(t), &p.diffusion.at(t), pi),
        &p.terminal_cost,
        grid,
        Direction::Backward,
        |pi| *pi = linalg::sym_part(pi),
    )
    .map_err(escape)
}

fn escape(e: Error) -> Error {
    match e {
        Error::NonFiniteState { t } => Error::FiniteEscape { t },
        other => other,
    }
}

/// Cubic Hermite reconstruction of `Π` between nodes from node values and
/// Riccati derivatives.
struct HermitePi<'a> {
    pi: &'a MatrixTrajectory,
    slopes: Vec<DMatrix<f64>>,
}

impl<'a> HermitePi<'a> {
    fn new(p: &LqgProblem, pi: &'a MatrixTrajectory) -> Self {
        let terms = RiccatiTerms::new(p);
        let grid = pi.grid();
        let slopes = (0..grid.len())
            .map(|i| {
                let t = grid.node(i);
                terms.rhs(&p.drift.at(t), &p.diffusion.at(t), pi.at_node(i))
            })
            .collect();
        Self { pi, slopes }
    }

    fn at(&self, t: f64) -> DMatrix<f64> {
        let grid = self.pi.grid();
        let t = t.clamp(0.0, grid.t_end());
        let (i, w) = grid.locate(t).expect("clamped time");
        if w == 0.0 {
            return self.pi.at_node(i).clone();
        }
        if w == 1.0 {
            return self.pi.at_node(i + 1).clone();
        }
        let h = grid.node(i + 1) - grid.node(i);
        let (w2, w3) = (w * w, w * w * w);
        let h00 = 2.0 * w3 - 3.0 * w2 + 1.0;
        let h10 = w3 - 2.0 * w2 + w;
        let h01 = -2.0 * w3 + 3.0 * w2;
        let h11 = w3 - w2;
        self.pi.at_node(i) * h00
            + &self.slopes[i] * (h10 * h)
            + self.pi.at_node(i + 1) * h01
            + &self.slopes[i + 1] * (h11 * h)
    }
}

/// Backward RK4 solution of the offset equation with `s(T) = 0`.
pub fn solve_offset(p: &LqgProblem, pi: &MatrixTrajectory, grid: &TimeGrid) -> Result<MatrixTrajectory> {
    if pi.grid() != grid {
        return Err(Error::InvalidArgument("Riccati solution sampled on a different grid".into()));
    }
    let n = p.state_dim();
    let r_inv = p.control_cost_inverse();
    let b = &p.input;
    let br_inv = b * &r_inv;
    let br_bt = &br_inv * b.transpose();
    let sr_bt = &p.cross_cost * &r_inv * b.transpose();
    let zeta = DMatrix::from_column_slice(p.control_dim(), 1, p.control_linear.as_slice());
    let eta = DMatrix::from_column_slice(n, 1, p.state_linear.as_slice());
    let br_zeta = &br_inv * &zeta;
    let const_forcing = &p.cross_cost * &r_inv * &zeta - &eta;
    let hermite = HermitePi::new(p, pi);
    integrate_ode(
        |t, s| {
            let pi_t = hermite.at(t);
            let sigma = p.diffusion.at(t);
            let a = p.drift.at(t);
            let coupling = a.transpose() - &pi_t * &br_bt - &sr_bt + &pi_t * &sigma * sigma.transpose() * p.risk;
            -(coupling * s + &pi_t * (p.offset.at(t) + &br_zeta) + &const_forcing)
        },
        &DMatrix::zeros(n, 1),
        grid,
        Direction::Backward,
    )
    .map_err(escape)
}

/// `K(t) = −R⁻¹(Sᵀ + BᵀΠ(t))`, `k(t) = −R⁻¹(Bᵀs(t) − ζ)`.
pub fn feedback_law(p: &LqgProblem, pi: &MatrixTrajectory, s: &MatrixTrajectory) -> FeedbackLaw {
    let r_inv = p.control_cost_inverse();
    let zeta = DMatrix::from_column_slice(p.control_dim(), 1, p.control_linear.as_slice());
    let st = p.cross_cost.transpose();
    let bt = p.input.transpose();
    let gain = pi
        .map(|_, pi_t| -(&r_inv * (&st + &bt * pi_t)))
        .expect("finite gain");
    let offset = s
        .map(|_, s_t| -(&r_inv * (&bt * s_t - &zeta)))
        .expect("finite offset");
    FeedbackLaw { gain, offset }
}

/// `C*_T = ∫(δ/2)[2⟨s,b⟩ − ⟨R⁻¹(Bᵀs−ζ),Bᵀs−ζ⟩ + tr(Πσσᵀ)] + (δ²/2)|σᵀs|² dt
///        + (δ/2)⟨Π(0)x₀,x₀⟩ + δ⟨s(0),x₀⟩`, trapezoidal in time.
pub fn c_star(p: &LqgProblem, pi: &MatrixTrajectory, s: &MatrixTrajectory, grid: &TimeGrid) -> f64 {
    let r_inv = p.control_cost_inverse();
    let zeta = DVector::from_column_slice(p.control_linear.as_slice());
    let bt = p.input.transpose();
    let d = p.risk;
    let integrand: Vec<f64> = (0..grid.len())
        .map(|i| {
            let t = grid.node(i);
            let s_t = DVector::from_column_slice(s.at_node(i).as_slice());
            let b_t = DVector::from_column_slice(p.offset.at(t).as_slice());
            let sigma = p.diffusion.at(t);
            let v = &bt * &s_t - &zeta;
            let quad = (&r_inv * &v).dot(&v);
            let trace = (pi.at_node(i) * &sigma * sigma.transpose()).trace();
            let noise = (sigma.transpose() * &s_t).norm_squared();
            0.5 * d * (2.0 * s_t.dot(&b_t) - quad + trace) + 0.5 * d * d * noise
        })
        .collect();
    let h = grid.step();
    let mut weights = vec![h; grid.len()];
    weights[0] = 0.5 * h;
    weights[grid.steps()] = 0.5 * h;
    let integral = linalg::compensated_sum(integrand.iter().zip(&weights).map(|(f, w)| f * w));
    let s0 = DVector::from_column_slice(s.first().as_slice());
    integral + 0.5 * d * (pi.first() * &p.x0).dot(&p.x0) + d * s0.dot(&p.x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn tanh_problem(risk: f64) -> LqgProblem {
        let mut p = LqgProblem::zeros(1, 1, 1, 1.0);
        p.input = sc(1.0);
        p.state_cost = sc(1.0);
        p.diffusion = sc(1.0).into();
        p.risk = risk;
        p.x0 = DVector::from_element(1, 1.0);
        p
    }

    fn closed_form(risk: f64) -> f64 {
        let k = (1.0 - risk).sqrt();
        k.tanh() / k
    }

    #[test]
    fn zero_costs_give_zero_solution() {
        let mut p = tanh_problem(0.5);
        p.state_cost = sc(0.0);
        let g = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve(&p, &g).unwrap();
        assert!(sol.pi.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert!(sol.s.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert!(sol.law.gain.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert_eq!(sol.c_star, 0.0);
    }

    #[test]
    fn scalar_family_matches_closed_form() {
        let g = TimeGrid::new(1.0, 2000).unwrap();
        for risk in [1e-12, 0.25, 0.5, 0.75] {
            let pi = solve_riccati(&tanh_problem(risk), &g).unwrap();
            assert!((pi.first()[(0, 0)] - closed_form(risk)).abs() < 1e-9, "risk {risk}");
        }
    }

    #[test]
    fn gain_at_zero_is_minus_pi() {
        let g = TimeGrid::new(1.0, 2000).unwrap();
        let sol = solve(&tanh_problem(1e-12), &g).unwrap();
        assert!((sol.law.gain.first()[(0, 0)] + 1.0f64.tanh()).abs() < 1e-8);
    }

    #[test]
    fn large_risk_escapes() {
        // π̇ = (1−δ)π² − 1 with δ = 3, Q̂ = 1: blows up before t = 0 on T = 2
        let mut p = tanh_problem(3.0);
        p.terminal_cost = sc(1.0);
        p.horizon = 2.0;
        let g = TimeGrid::new(2.0, 2000).unwrap();
        assert!(matches!(solve_riccati(&p, &g), Err(Error::FiniteEscape { .. })));
    }

    #[test]
    fn deterministic_c_star_reduces_to_quadratic_term() {
        let mut p = tanh_problem(0.5);
        p.diffusion = sc(0.0).into();
        p.x0 = DVector::from_element(1, 2.0);
        let g = TimeGrid::new(1.0, 500).unwrap();
        let sol = solve(&p, &g).unwrap();
        let expected = 0.5 * 0.5 * sol.pi.first()[(0, 0)] * 4.0;
        assert!((sol.c_star - expected).abs() < 1e-14);
    }

    #[test]
    fn offset_vanishes_without_forcing() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let sol = solve(&tanh_problem(0.5), &g).unwrap();
        assert!(sol.s.values().iter().all(|v| v[(0, 0)] == 0.0));
    }

    #[test]
    fn feedback_law_formula() {
        let mut p = tanh_problem(0.5);
        p.cross_cost = sc(0.3);
        p.control_cost = sc(2.0);
        p.control_linear = DVector::from_element(1, 0.4);
        p.state_linear = DVector::from_element(1, -0.7);
        let g = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve(&p, &g).unwrap();
        for i in [0, 37, 100] {
            let pi = sol.pi.at_node(i)[(0, 0)];
            let s = sol.s.at_node(i)[(0, 0)];
            assert!((sol.law.gain.at_node(i)[(0, 0)] + (0.3 + pi) / 2.0).abs() < 1e-15);
            assert!((sol.law.offset.at_node(i)[(0, 0)] + (s - 0.4) / 2.0).abs() < 1e-15);
        }
    }
}

//! Parameter containers for the single-agent problem and the major-minor game.

use alloc::{format, string::String, vec::Vec};
use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::numerics::Coefficient;
use crate::{Error, Result};

/// Tolerance on the smallest symmetric-part eigenvalue in semidefiniteness checks.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Risk parameter used by [`risk_neutral_counterpart`].
pub const DEFAULT_RISK_NEUTRAL_EPS: f64 = 1e-8;

/// Single-agent problem
/// `dx = (A(t)x + Bu + b(t))dt + σ(t)dw`, cost `E exp(δΛ_T)` with
/// `Λ_T = ½∫(xᵀQx + 2xᵀSu + uᵀRu − 2ηᵀx − 2ζᵀu)dt + ½x_TᵀQ̂x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgProblem {
    /// `A(t)`, n×n.
    pub drift: Coefficient,
    /// `B`, n×m.
    pub input: DMatrix<f64>,
    /// `b(t)`, n×1.
    pub offset: Coefficient,
    /// `σ(t)`, n×r.
    pub diffusion: Coefficient,
    /// `Q`, n×n.
    pub state_cost: DMatrix<f64>,
    /// `S`, n×m.
    pub cross_cost: DMatrix<f64>,
    /// `R`, m×m.
    pub control_cost: DMatrix<f64>,
    /// `η`, n.
    pub state_linear: DVector<f64>,
    /// `ζ`, m.
    pub control_linear: DVector<f64>,
    /// `Q̂`, n×n.
    pub terminal_cost: DMatrix<f64>,
    /// `δ`.
    pub risk: f64,
    pub x0: DVector<f64>,
    pub horizon: f64,
}

impl LqgProblem {
    /// All-zero problem with `R = I` and `δ = 1`.
    pub fn zeros(n: usize, m: usize, r: usize, horizon: f64) -> Self {
        Self {
            drift: Coefficient::zeros(n, n),
            input: DMatrix::zeros(n, m),
            offset: Coefficient::zeros(n, 1),
            diffusion: Coefficient::zeros(n, r),
            state_cost: DMatrix::zeros(n, n),
            cross_cost: DMatrix::zeros(n, m),
            control_cost: DMatrix::identity(m, m),
            state_linear: DVector::zeros(n),
            control_linear: DVector::zeros(m),
            terminal_cost: DMatrix::zeros(n, n),
            risk: 1.0,
            x0: DVector::zeros(n),
            horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.input.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.input.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.diffusion.shape().1
    }

    /// Checks dimensions, finiteness and the standing cost assumptions.
    pub fn validate(&self) -> Result<()> {
        let (n, m, r) = (self.state_dim(), self.control_dim(), self.noise_dim());
        let dims: [ShapeCheck<'_>; 9] = [
            ("drift", self.drift.shape(), (n, n)),
            ("offset", self.offset.shape(), (n, 1)),
            ("diffusion", self.diffusion.shape(), (n, r)),
            ("state cost", self.state_cost.shape(), (n, n)),
            ("cross cost", self.cross_cost.shape(), (n, m)),
            ("control cost", self.control_cost.shape(), (m, m)),
            ("state linear term", (self.state_linear.len(), 1), (n, 1)),
            ("control linear term", (self.control_linear.len(), 1), (m, 1)),
            ("terminal cost", self.terminal_cost.shape(), (n, n)),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if self.x0.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "initial state has length {}, expected {n}",
                self.x0.len()
            )));
        }
        let subject = || String::from("problem");
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(violation("horizon positive", subject()));
        }
        let finite = self.drift.is_finite()
            && self.offset.is_finite()
            && self.diffusion.is_finite()
            && [
                &self.input,
                &self.state_cost,
                &self.cross_cost,
                &self.control_cost,
                &self.terminal_cost,
            ]
            .iter()
            .all(|m| linalg::is_finite(m))
            && self.state_linear.iter().all(|v| v.is_finite())
            && self.control_linear.iter().all(|v| v.is_finite())
            && self.x0.iter().all(|v| v.is_finite());
        if !finite {
            return Err(violation("coefficients finite", subject()));
        }
        check_costs(
            &self.state_cost,
            &self.cross_cost,
            &self.control_cost,
            &self.terminal_cost,
            self.risk,
            subject,
        )
    }

    /// `R⁻¹`; panics if `R` is not positive definite, so call after validation.
    pub fn control_cost_inverse(&self) -> DMatrix<f64> {
        linalg::spd_inverse(&self.control_cost).expect("validated R is positive definite")
    }

    /// Applies `(δ,Q,S,R,η,ζ,Q̂) → (cδ,Q/c,S/c,R/c,η/c,ζ/c,Q̂/c)`, which leaves
    /// the optimal law unchanged.
    pub fn rescale_cost(&self, c: f64) -> Self {
        let mut p = self.clone();
        p.risk *= c;
        p.state_cost /= c;
        p.cross_cost /= c;
        p.control_cost /= c;
        p.state_linear /= c;
        p.control_linear /= c;
        p.terminal_cost /= c;
        p
    }
}

fn violation(condition: &'static str, subject: String) -> Error {
    Error::AssumptionViolated { condition, subject }
}

fn symmetric(m: &DMatrix<f64>) -> bool {
    let scale = linalg::max_abs(m).max(1.0);
    linalg::max_abs_diff(m, &m.transpose()) <= 1e-12 * scale
}

fn check_costs(
    q: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_hat: &DMatrix<f64>,
    risk: f64,
    subject: impl Fn() -> String,
) -> Result<()> {
    if !symmetric(r) {
        return Err(violation("R symmetric", subject()));
    }
    let Some(r_inv) = linalg::spd_inverse(r) else {
        return Err(violation("R positive definite", subject()));
    };
    if linalg::min_sym_eigenvalue(r) <= 0.0 {
        return Err(violation("R positive definite", subject()));
    }
    if !symmetric(q_hat) {
        return Err(violation("Q_hat symmetric", subject()));
    }
    if linalg::min_sym_eigenvalue(q_hat) < PSD_TOLERANCE {
        return Err(violation("Q_hat positive semidefinite", subject()));
    }
    if !symmetric(q) {
        return Err(violation("Q symmetric", subject()));
    }
    let schur = q - s * r_inv * s.transpose();
    if linalg::min_sym_eigenvalue(&schur) < PSD_TOLERANCE {
        return Err(violation("Q - S R^-1 S^T positive semidefinite", subject()));
    }
    if !(risk.is_finite() && risk > 0.0) {
        return Err(violation("delta in (0,∞)", subject()));
    }
    Ok(())
}

/// Returns the problem if it satisfies all standing assumptions.
pub fn validate_single(p: LqgProblem) -> Result<LqgProblem> {
    p.validate()?;
    Ok(p)
}

/// Same problem with `δ` replaced by `eps`.
pub fn risk_neutral_counterpart(p: &LqgProblem, eps: f64) -> LqgProblem {
    let mut out = p.clone();
    out.risk = eps;
    out
}

/// Major agent:
/// `dx⁰ = (A₀x⁰ + F₀x⁽ᴺ⁾ + B₀u⁰ + b₀)dt + σ₀dw⁰`, tracking `H₀x⁽ᴺ⁾ + η₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorParams {
    /// `A₀`, n×n.
    pub drift: DMatrix<f64>,
    /// `F₀`, n×n, multiplies the population average.
    pub population_coupling: DMatrix<f64>,
    /// `B₀`, n×m.
    pub input: DMatrix<f64>,
    /// `b₀(t)`, n×1.
    pub offset: Coefficient,
    /// `σ₀(t)`, n×r.
    pub diffusion: Coefficient,
    pub state_cost: DMatrix<f64>,
    pub cross_cost: DMatrix<f64>,
    pub control_cost: DMatrix<f64>,
    pub terminal_cost: DMatrix<f64>,
    /// `H₀`, n×n, weight of the population average in the tracking target.
    pub population_tracking: DMatrix<f64>,
    /// `η₀`, n.
    pub target: DVector<f64>,
    pub risk: f64,
    pub x0: DVector<f64>,
}

/// One minor-agent type:
/// `dxⁱ = (Aₖxⁱ + Fₖx⁽ᴺ⁾ + Gₖx⁰ + Bₖuⁱ + bₖ)dt + σₖdwⁱ`, tracking
/// `Hₖx⁰ + Ĥₖx⁽ᴺ⁾ + ηₖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinorTypeParams {
    pub drift: DMatrix<f64>,
    /// `Fₖ`, multiplies the population average.
    pub population_coupling: DMatrix<f64>,
    /// `Gₖ`, multiplies the major state.
    pub major_coupling: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub offset: Coefficient,
    pub diffusion: Coefficient,
    pub state_cost: DMatrix<f64>,
    pub cross_cost: DMatrix<f64>,
    pub control_cost: DMatrix<f64>,
    pub terminal_cost: DMatrix<f64>,
    /// `Hₖ`, weight of the major state in the tracking target.
    pub major_tracking: DMatrix<f64>,
    /// `Ĥₖ`, weight of the population average in the tracking target.
    pub population_tracking: DMatrix<f64>,
    pub target: DVector<f64>,
    pub risk: f64,
    /// Initial state of every agent of this type.
    pub x0: DVector<f64>,
}

/// Sign used for the population-tracking block of the minor linear cost term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrackingSign {
    /// `[I, −Hₖ, −Ĥₖ^π]ᵀQₖηₖ`, consistent with the quadratic transform.
    #[default]
    Minus,
    /// `[I, −Hₖ, +Ĥₖ^π]ᵀQₖηₖ`.
    Plus,
}

/// Major agent, `K` minor types and their limiting population weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorMinorSpec {
    pub major: MajorParams,
    pub minors: Vec<MinorTypeParams>,
    pub weights: Vec<f64>,
    pub horizon: f64,
    pub tracking_sign: TrackingSign,
}

impl MajorMinorSpec {
    pub fn state_dim(&self) -> usize {
        self.major.drift.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.major.input.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.major.diffusion.shape().1
    }

    pub fn types(&self) -> usize {
        self.minors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, r) = (self.state_dim(), self.control_dim(), self.noise_dim());
        let k = self.minors.len();
        if k == 0 {
            return Err(Error::InvalidArgument("at least one minor type required".into()));
        }
        if self.weights.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {k} minor types",
                self.weights.len()
            )));
        }
        let mj = &self.major;
        let dims: Vec<ShapeCheck<'_>> = alloc::vec![
            ("major drift", mj.drift.shape(), (n, n)),
            ("major population coupling", mj.population_coupling.shape(), (n, n)),
            ("major input", mj.input.shape(), (n, m)),
            ("major offset", mj.offset.shape(), (n, 1)),
            ("major diffusion", mj.diffusion.shape(), (n, r)),
            ("major state cost", mj.state_cost.shape(), (n, n)),
            ("major cross cost", mj.cross_cost.shape(), (n, m)),
            ("major control cost", mj.control_cost.shape(), (m, m)),
            ("major terminal cost", mj.terminal_cost.shape(), (n, n)),
            ("major population tracking", mj.population_tracking.shape(), (n, n)),
            ("major target", (mj.target.len(), 1), (n, 1)),
            ("major initial state", (mj.x0.len(), 1), (n, 1)),
        ];
        check_dims(&dims)?;
        for (idx, mn) in self.minors.iter().enumerate() {
            let dims: Vec<ShapeCheck<'_>> = alloc::vec![
                ("minor drift", mn.drift.shape(), (n, n)),
                ("minor population coupling", mn.population_coupling.shape(), (n, n)),
                ("minor major coupling", mn.major_coupling.shape(), (n, n)),
                ("minor input", mn.input.shape(), (n, m)),
                ("minor offset", mn.offset.shape(), (n, 1)),
                ("minor diffusion", mn.diffusion.shape(), (n, r)),
                ("minor state cost", mn.state_cost.shape(), (n, n)),
                ("minor cross cost", mn.cross_cost.shape(), (n, m)),
                ("minor control cost", mn.control_cost.shape(), (m, m)),
                ("minor terminal cost", mn.terminal_cost.shape(), (n, n)),
                ("minor major tracking", mn.major_tracking.shape(), (n, n)),
                ("minor population tracking", mn.population_tracking.shape(), (n, n)),
                ("minor target", (mn.target.len(), 1), (n, 1)),
                ("minor initial state", (mn.x0.len(), 1), (n, 1)),
            ];
            check_dims(&dims).map_err(|e| match e {
                Error::DimensionMismatch(msg) => {
                    Error::DimensionMismatch(format!("type {}: {msg}", idx + 1))
                }
                other => other,
            })?;
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(violation("horizon positive", "game".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(violation("pi nonnegative", "game".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(violation("pi sums to 1", "game".into()));
        }
        let finite_major = mj.offset.is_finite()
            && mj.diffusion.is_finite()
            && [&mj.drift, &mj.population_coupling, &mj.input, &mj.population_tracking]
                .iter()
                .all(|m| linalg::is_finite(m))
            && mj.target.iter().chain(mj.x0.iter()).all(|v| v.is_finite());
        if !finite_major {
            return Err(violation("coefficients finite", "major".into()));
        }
        check_costs(
            &mj.state_cost,
            &mj.cross_cost,
            &mj.control_cost,
            &mj.terminal_cost,
            mj.risk,
            || "major".into(),
        )?;
        for (idx, mn) in self.minors.iter().enumerate() {
            let subject = || format!("minor type {}", idx + 1);
            let finite = mn.offset.is_finite()
                && mn.diffusion.is_finite()
                && [
                    &mn.drift,
                    &mn.population_coupling,
                    &mn.major_coupling,
                    &mn.input,
                    &mn.major_tracking,
                    &mn.population_tracking,
                ]
                .iter()
                .all(|m| linalg::is_finite(m))
                && mn.target.iter().chain(mn.x0.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(violation("coefficients finite", subject()));
            }
            check_costs(
                &mn.state_cost,
                &mn.cross_cost,
                &mn.control_cost,
                &mn.terminal_cost,
                mn.risk,
                subject,
            )?;
        }
        Ok(())
    }
}

type ShapeCheck<'a> = (&'a str, (usize, usize), (usize, usize));

fn check_dims(dims: &[ShapeCheck<'_>]) -> Result<()> {
    for (name, got, want) in dims {
        if got != want {
            return Err(Error::DimensionMismatch(format!(
                "{name} has shape {got:?}, expected {want:?}"
            )));
        }
    }
    Ok(())
}

/// Returns the game if the major agent and every minor type satisfy the
/// standing assumptions and the weights form a probability vector.
pub fn validate_game(g: MajorMinorSpec) -> Result<MajorMinorSpec> {
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn unit_problem() -> LqgProblem {
        let mut p = LqgProblem::zeros(1, 1, 1, 1.0);
        p.input = s(1.0);
        p.state_cost = s(1.0);
        p
    }

    #[test]
    fn identity_costs_are_valid() {
        assert!(validate_single(unit_problem()).is_ok());
    }

    #[test]
    fn singular_control_cost_is_rejected() {
        let mut p = unit_problem();
        p.control_cost = s(0.0);
        let err = validate_single(p).unwrap_err();
        assert_eq!(err.violated_condition(), Some("R positive definite"));
    }

    #[test]
    fn schur_complement_must_be_psd() {
        let mut p = unit_problem();
        p.cross_cost = s(1.0);
        p.control_cost = s(0.5);
        let err = validate_single(p).unwrap_err();
        assert_eq!(
            err.violated_condition(),
            Some("Q - S R^-1 S^T positive semidefinite")
        );
    }

    #[test]
    fn risk_must_be_positive_and_finite() {
        for bad in [0.0, -1.0, f64::INFINITY, f64::NAN] {
            let mut p = unit_problem();
            p.risk = bad;
            assert_eq!(
                validate_single(p).unwrap_err().violated_condition(),
                Some("delta in (0,∞)")
            );
        }
    }

    #[test]
    fn dimension_errors_are_named() {
        let mut p = unit_problem();
        p.state_cost = DMatrix::zeros(2, 2);
        assert!(matches!(validate_single(p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn risk_neutral_counterpart_only_changes_risk() {
        let p = unit_problem();
        let q = risk_neutral_counterpart(&p, DEFAULT_RISK_NEUTRAL_EPS);
        assert_eq!(q.risk, 1e-8);
        let mut back = q.clone();
        back.risk = p.risk;
        assert_eq!(back, p);
        assert_eq!(risk_neutral_counterpart(&q, DEFAULT_RISK_NEUTRAL_EPS), q);
    }
}

//! Ready-made problem instances.

use alloc::vec;
use nalgebra::{DMatrix, DVector};

use crate::model::{LqgProblem, MajorMinorSpec, MajorParams, MinorTypeParams, TrackingSign};
use crate::numerics::Coefficient;

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// `dx = u dt + dw`, cost `½∫(x² + u²)dt`, horizon 1; `Π(0) = tanh(√(1−δ))/√(1−δ)`.
pub fn scalar_tracking(risk: f64) -> LqgProblem {
    let mut p = LqgProblem::zeros(1, 1, 1, 1.0);
    p.input = scalar(1.0);
    p.diffusion = scalar(1.0).into();
    p.state_cost = scalar(1.0);
    p.risk = risk;
    p.x0 = DVector::from_element(1, 1.0);
    p
}

/// Closed form `Π(0)` of [`scalar_tracking`] with horizon `t_end`.
pub fn scalar_tracking_pi0(risk: f64, t_end: f64) -> f64 {
    let c = crate::math::sqrt(1.0 - risk);
    if c == 0.0 {
        t_end
    } else {
        libm::tanh(c * t_end) / c
    }
}

#[allow(clippy::too_many_arguments)]
fn scalar_minor(a: f64, f: f64, g: f64, b: f64, sigma: f64, q: f64, r: f64, h: f64, h_hat: f64, risk: f64, x0: f64) -> MinorTypeParams {
    MinorTypeParams {
        drift: scalar(a),
        population_coupling: scalar(f),
        major_coupling: scalar(g),
        input: scalar(b),
        offset: Coefficient::zeros(1, 1),
        diffusion: scalar(sigma).into(),
        state_cost: scalar(q),
        cross_cost: scalar(0.0),
        control_cost: scalar(r),
        terminal_cost: scalar(0.0),
        major_tracking: scalar(h),
        population_tracking: scalar(h_hat),
        target: DVector::zeros(1),
        risk,
        x0: DVector::from_element(1, x0),
    }
}

#[allow(clippy::too_many_arguments)]
fn scalar_major(a: f64, f: f64, b: f64, sigma: f64, q: f64, r: f64, h: f64, risk: f64, x0: f64) -> MajorParams {
    MajorParams {
        drift: scalar(a),
        population_coupling: scalar(f),
        input: scalar(b),
        offset: Coefficient::zeros(1, 1),
        diffusion: scalar(sigma).into(),
        state_cost: scalar(q),
        cross_cost: scalar(0.0),
        control_cost: scalar(r),
        terminal_cost: scalar(0.0),
        population_tracking: scalar(h),
        target: DVector::zeros(1),
        risk,
        x0: DVector::from_element(1, x0),
    }
}

/// Scalar game with one minor type: major drift `−2.5x⁰ + 2.5x⁽ᴺ⁾`, minor
/// drift `−5xⁱ + 2.5x⁽ᴺ⁾ + 2.5x⁰`, noise 0.5, risk 2, major weight 10 on
/// `(x⁰ − x⁽ᴺ⁾)²`, minor weight 7 on `(xⁱ − ½x⁽ᴺ⁾ − ½x⁰)²`, horizon 1.
pub fn coupled_scalar_game() -> MajorMinorSpec {
    MajorMinorSpec {
        major: scalar_major(-2.5, 2.5, 1.0, 0.5, 10.0, 1.0, 1.0, 2.0, 1.0),
        minors: vec![scalar_minor(-5.0, 2.5, 2.5, 1.0, 0.5, 7.0, 1.0, 0.5, 0.5, 2.0, 0.5)],
        weights: vec![1.0],
        horizon: 1.0,
        tracking_sign: TrackingSign::Minus,
    }
}

/// Scalar game with every coefficient, weight and risk parameter equal to one,
/// noise intensity 0.5 and horizon 1.
pub fn unit_game() -> MajorMinorSpec {
    MajorMinorSpec {
        major: scalar_major(1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0),
        minors: vec![scalar_minor(1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)],
        weights: vec![1.0],
        horizon: 1.0,
        tracking_sign: TrackingSign::Minus,
    }
}

//! Infinite-population major-minor game: extended systems, the consistency
//! fixed point for the mean-field coefficients and the equilibrium laws.
//!
//! Partitions follow the extended states `X⁰ = [x⁰; x̄]` (dimension `n(1+K)`)
//! and `Xⁱ = [xⁱ; x⁰; x̄]` (dimension `n(2+K)`), with `x̄ = [x̄¹; …; x̄ᴷ]`.

use alloc::{format, vec::Vec};
use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, block, block_diag, hstack, set_block, vstack};
use crate::model::{LqgProblem, MajorMinorSpec, TrackingSign};
use crate::numerics::{integrate_ode, Coefficient, Direction, MatrixTrajectory, TimeGrid};
use crate::riccati::{self, FeedbackLaw, RiccatiSolution};
use crate::{Error, Result};

/// Mean-field equation data `dx̄ = (Ăx̄ + Ğx⁰ + B̆ū + m̆)dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldMatrices {
    /// `Ă`, nK×nK, row block k = `Aₖ𝐞ₖ + Fₖ^π`.
    pub drift: DMatrix<f64>,
    /// `Ğ`, nK×n, stacked `Gₖ`.
    pub major_coupling: DMatrix<f64>,
    /// `B̆`, nK×mK, block-diagonal `Bₖ`.
    pub input: DMatrix<f64>,
    /// `m̆(t)`, stacked `bₖ(t)`.
    pub offset: Coefficient,
}

/// `[π₁M, …, π_K M]`.
fn weighted_row(weights: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    let parts: Vec<DMatrix<f64>> = weights.iter().map(|w| m * *w).collect();
    hstack(&parts.iter().collect::<Vec<_>>())
}

/// `𝐞ₖ`: n×nK with the identity in block `k`.
fn selector(n: usize, types: usize, k: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n * types);
    set_block(&mut e, 0, n * k, &DMatrix::identity(n, n));
    e
}

/// Stacks coefficients vertically; time-dependent parts are sampled on their
/// own grid (all sampled parts must share it).
fn stack_coefficients(parts: &[&Coefficient]) -> Result<Coefficient> {
    let grid = parts.iter().find_map(|c| match c {
        Coefficient::Nodes(tr) => Some(*tr.grid()),
        Coefficient::Constant(_) => None,
    });
    match grid {
        None => {
            let mats: Vec<DMatrix<f64>> = parts.iter().map(|c| c.at(0.0)).collect();
            Ok(Coefficient::Constant(vstack(&mats.iter().collect::<Vec<_>>())))
        }
        Some(grid) => {
            for c in parts {
                if let Coefficient::Nodes(tr) = c {
                    if tr.grid() != &grid {
                        return Err(Error::InvalidArgument(
                            "time-dependent coefficients must share one grid".into(),
                        ));
                    }
                }
            }
            let sampled: Vec<Vec<DMatrix<f64>>> = parts.iter().map(|c| c.sample(&grid)).collect();
            let values = (0..grid.len())
                .map(|i| vstack(&sampled.iter().map(|s| &s[i]).collect::<Vec<_>>()))
                .collect();
            Ok(Coefficient::Nodes(MatrixTrajectory::new(grid, values)?))
        }
    }
}

/// Block-diagonal combination of coefficients.
fn block_diag_coefficients(parts: &[&Coefficient]) -> Result<Coefficient> {
    let grid = parts.iter().find_map(|c| match c {
        Coefficient::Nodes(tr) => Some(*tr.grid()),
        Coefficient::Constant(_) => None,
    });
    match grid {
        None => {
            let mats: Vec<DMatrix<f64>> = parts.iter().map(|c| c.at(0.0)).collect();
            Ok(Coefficient::Constant(block_diag(&mats.iter().collect::<Vec<_>>())))
        }
        Some(grid) => {
            let sampled: Vec<Vec<DMatrix<f64>>> = parts.iter().map(|c| c.sample(&grid)).collect();
            let values = (0..grid.len())
                .map(|i| block_diag(&sampled.iter().map(|s| &s[i]).collect::<Vec<_>>()))
                .collect();
            Ok(Coefficient::Nodes(MatrixTrajectory::new(grid, values)?))
        }
    }
}

/// Builds `Ă, Ğ, B̆, m̆` from the minor types and weights.
pub fn assemble_mean_field(spec: &MajorMinorSpec) -> Result<MeanFieldMatrices> {
    spec.validate()?;
    let (n, k) = (spec.state_dim(), spec.types());
    let rows: Vec<DMatrix<f64>> = spec
        .minors
        .iter()
        .enumerate()
        .map(|(j, mn)| &mn.drift * selector(n, k, j) + weighted_row(&spec.weights, &mn.population_coupling))
        .collect();
    let inputs: Vec<&DMatrix<f64>> = spec.minors.iter().map(|mn| &mn.input).collect();
    Ok(MeanFieldMatrices {
        drift: vstack(&rows.iter().collect::<Vec<_>>()),
        major_coupling: vstack(&spec.minors.iter().map(|mn| &mn.major_coupling).collect::<Vec<_>>()),
        input: block_diag(&inputs),
        offset: stack_coefficients(&spec.minors.iter().map(|mn| &mn.offset).collect::<Vec<_>>())?,
    })
}

/// Extended linear system and quadratic cost of one agent in the limiting game.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem {
    /// `Ã`.
    pub drift: DMatrix<f64>,
    /// Own control input (`𝔹₀` or `𝔹ₖ`).
    pub input: DMatrix<f64>,
    /// Control-mean-field input (`B̃₀` or `B̃`).
    pub mean_field_input: DMatrix<f64>,
    /// Major control input seen by a minor agent (`𝔹̃₀`); `None` for the major agent.
    pub major_input: Option<DMatrix<f64>>,
    /// `M̃(t)`.
    pub offset: Coefficient,
    /// `Σ(t)`.
    pub diffusion: Coefficient,
    /// `ℚ`.
    pub state_cost: DMatrix<f64>,
    /// `𝕊`.
    pub cross_cost: DMatrix<f64>,
    pub control_cost: DMatrix<f64>,
    /// `𝔾`.
    pub terminal_cost: DMatrix<f64>,
    /// `η̄`.
    pub state_linear: DVector<f64>,
    /// `n̄`.
    pub control_linear: DVector<f64>,
    pub risk: f64,
    /// Extended initial state.
    pub x0: DVector<f64>,
}

impl ExtendedSystem {
    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }
}

/// `Tᵀ M T`.
fn congruence(t: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::sym_part(&(t.transpose() * m * t))
}

fn mean_initial_state(spec: &MajorMinorSpec) -> DVector<f64> {
    let parts: Vec<DMatrix<f64>> = spec.minors.iter().map(|mn| linalg::column(mn.x0.as_slice())).collect();
    DVector::from_column_slice(vstack(&parts.iter().collect::<Vec<_>>()).as_slice())
}

/// Major extended system on `X⁰ = [x⁰; x̄]`.
pub fn assemble_major(spec: &MajorMinorSpec) -> Result<ExtendedSystem> {
    let mf = assemble_mean_field(spec)?;
    let (n, m, k) = (spec.state_dim(), spec.control_dim(), spec.types());
    let mj = &spec.major;
    let dim = n * (1 + k);
    let drift = vstack(&[
        &hstack(&[&mj.drift, &weighted_row(&spec.weights, &mj.population_coupling)]),
        &hstack(&[&mf.major_coupling, &mf.drift]),
    ]);
    let input = vstack(&[&mj.input, &DMatrix::zeros(n * k, m)]);
    let mean_field_input = vstack(&[&DMatrix::zeros(n, m * k), &mf.input]);
    let offset = stack_coefficients(&[&mj.offset, &mf.offset])?;
    let zero_noise = Coefficient::zeros(n * k, mj.diffusion.shape().1);
    let diffusion = stack_coefficients(&[&mj.diffusion, &zero_noise])?;
    let transform = hstack(&[&DMatrix::identity(n, n), &(-weighted_row(&spec.weights, &mj.population_tracking))]);
    let target = linalg::column(mj.target.as_slice());
    let x0 = vstack(&[&linalg::column(mj.x0.as_slice()), &linalg::column(mean_initial_state(spec).as_slice())]);
    debug_assert_eq!(drift.shape(), (dim, dim));
    Ok(ExtendedSystem {
        drift,
        input,
        mean_field_input,
        major_input: None,
        offset,
        diffusion,
        state_cost: congruence(&transform, &mj.state_cost),
        cross_cost: transform.transpose() * &mj.cross_cost,
        control_cost: mj.control_cost.clone(),
        terminal_cost: congruence(&transform, &mj.terminal_cost),
        state_linear: DVector::from_column_slice((transform.transpose() * &mj.state_cost * &target).as_slice()),
        control_linear: DVector::from_column_slice((mj.cross_cost.transpose() * &target).as_slice()),
        risk: mj.risk,
        x0: DVector::from_column_slice(x0.as_slice()),
    })
}

/// Minor extended system of type `k` (zero-based) on `Xⁱ = [xⁱ; x⁰; x̄]`.
pub fn assemble_minor(spec: &MajorMinorSpec, k: usize) -> Result<ExtendedSystem> {
    let major = assemble_major(spec)?;
    let Some(mn) = spec.minors.get(k) else {
        return Err(Error::InvalidArgument(format!("no minor type {k}")));
    };
    let (n, m, types) = (spec.state_dim(), spec.control_dim(), spec.types());
    let d0 = major.dim();
    let dim = n * (2 + types);
    let top = hstack(&[&mn.drift, &mn.major_coupling, &weighted_row(&spec.weights, &mn.population_coupling)]);
    let bottom = hstack(&[&DMatrix::zeros(d0, n), &major.drift]);
    let drift = vstack(&[&top, &bottom]);
    let input = vstack(&[&mn.input, &DMatrix::zeros(d0, m)]);
    let major_input = vstack(&[&DMatrix::zeros(n, m), &major.input]);
    let mean_field_input = vstack(&[&DMatrix::zeros(n, m * types), &major.mean_field_input]);
    let offset = stack_coefficients(&[&mn.offset, &major.offset])?;
    let diffusion = block_diag_coefficients(&[&mn.diffusion, &major.diffusion])?;
    let pop = weighted_row(&spec.weights, &mn.population_tracking);
    let transform = hstack(&[&DMatrix::identity(n, n), &(-&mn.major_tracking), &(-&pop)]);
    let linear_transform = match spec.tracking_sign {
        TrackingSign::Minus => transform.clone(),
        TrackingSign::Plus => hstack(&[&DMatrix::identity(n, n), &(-&mn.major_tracking), &pop]),
    };
    let target = linalg::column(mn.target.as_slice());
    let x0 = vstack(&[&linalg::column(mn.x0.as_slice()), &linalg::column(major.x0.as_slice())]);
    debug_assert_eq!(drift.shape(), (dim, dim));
    Ok(ExtendedSystem {
        drift,
        input,
        mean_field_input,
        major_input: Some(major_input),
        offset,
        diffusion,
        state_cost: congruence(&transform, &mn.state_cost),
        cross_cost: transform.transpose() * &mn.cross_cost,
        control_cost: mn.control_cost.clone(),
        terminal_cost: congruence(&transform, &mn.terminal_cost),
        state_linear: DVector::from_column_slice((linear_transform.transpose() * &mn.state_cost * &target).as_slice()),
        control_linear: DVector::from_column_slice((mn.cross_cost.transpose() * &target).as_slice()),
        risk: mn.risk,
        x0: DVector::from_column_slice(x0.as_slice()),
    })
}

/// Settings of the consistency iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// `ρ` in `new = (1−ρ)·candidate + ρ·previous`.
    pub relaxation: f64,
    /// Keep the mean-field coefficients of every iterate.
    pub record_history: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50, relaxation: 0.0, record_history: false }
    }
}

/// Per-iteration errors of the consistency iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    /// `sup_t |Ā⁽ʲ⁾−Ā⁽ʲ⁻¹⁾| + sup_t |Ḡ⁽ʲ⁾−Ḡ⁽ʲ⁻¹⁾|` (max-abs entries) for `j = 1, 2, …`.
    pub errors: Vec<f64>,
    /// `sup_t |m̄⁽ʲ⁾−m̄⁽ʲ⁻¹⁾|`.
    pub offset_errors: Vec<f64>,
    pub tolerance: f64,
    pub converged: bool,
    /// Iterates `j = 0, 1, …` when recorded.
    pub history: Vec<MeanFieldIterate>,
}

impl IterationLog {
    pub fn iterations(&self) -> usize {
        self.errors.len()
    }

    pub fn last_error(&self) -> f64 {
        self.errors.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Mean-field coefficients `Ā(t), Ḡ(t), m̄(t)` of one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldIterate {
    pub drift: MatrixTrajectory,
    pub major_coupling: MatrixTrajectory,
    pub offset: MatrixTrajectory,
}

impl MeanFieldIterate {
    fn distance(&self, other: &Self) -> (f64, f64) {
        (
            self.drift.sup_diff(&other.drift) + self.major_coupling.sup_diff(&other.major_coupling),
            self.offset.sup_diff(&other.offset),
        )
    }

    fn blend(&self, previous: &Self, rho: f64) -> Result<Self> {
        let mix = |a: &MatrixTrajectory, b: &MatrixTrajectory| a.map(|i, v| v * (1.0 - rho) + b.at_node(i) * rho);
        Ok(Self {
            drift: mix(&self.drift, &previous.drift)?,
            major_coupling: mix(&self.major_coupling, &previous.major_coupling)?,
            offset: mix(&self.offset, &previous.offset)?,
        })
    }
}

/// Converged major-minor equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct MfgEquilibrium {
    pub grid: TimeGrid,
    pub major_system: ExtendedSystem,
    pub minor_systems: Vec<ExtendedSystem>,
    /// Major problem on `X⁰` with the converged time-varying drift `𝔸₀(t)`.
    pub major_problem: LqgProblem,
    /// Minor problems on `Xⁱ` with drift `𝔸ₖ(t)`.
    pub minor_problems: Vec<LqgProblem>,
    /// `Π₀, s₀`, the major law and its `C*_T`.
    pub major: RiccatiSolution,
    /// `Πₖ, sₖ`, minor laws and `C*_T` per type.
    pub minors: Vec<RiccatiSolution>,
    pub mean_field: MeanFieldIterate,
    pub log: IterationLog,
}

impl MfgEquilibrium {
    pub fn state_dim(&self) -> usize {
        self.major_system.input.nrows() / (1 + self.minors.len())
    }

    pub fn types(&self) -> usize {
        self.minors.len()
    }
}

fn lqg_from_system(sys: &ExtendedSystem, drift: Coefficient, offset: Coefficient, horizon: f64) -> LqgProblem {
    LqgProblem {
        drift,
        input: sys.input.clone(),
        offset,
        diffusion: sys.diffusion.clone(),
        state_cost: sys.state_cost.clone(),
        cross_cost: sys.cross_cost.clone(),
        control_cost: sys.control_cost.clone(),
        state_linear: sys.state_linear.clone(),
        control_linear: sys.control_linear.clone(),
        terminal_cost: sys.terminal_cost.clone(),
        risk: sys.risk,
        x0: sys.x0.clone(),
        horizon,
    }
}

struct Sweep {
    major_problem: LqgProblem,
    minor_problems: Vec<LqgProblem>,
    major: RiccatiSolution,
    minors: Vec<RiccatiSolution>,
    candidate: MeanFieldIterate,
}

/// Initial iterate: `Ā = 0`, `Ḡ = 0`, `m̄ₖ = bₖ + BₖRₖ⁻¹n̄ₖ`.
fn initial_iterate(spec: &MajorMinorSpec, minors: &[ExtendedSystem], grid: &TimeGrid) -> Result<MeanFieldIterate> {
    let (n, k) = (spec.state_dim(), spec.types());
    let offset = MatrixTrajectory::from_fn(*grid, |t| {
        let parts: Vec<DMatrix<f64>> = spec
            .minors
            .iter()
            .zip(minors)
            .map(|(mn, sys)| {
                let r_inv = linalg::spd_inverse(&mn.control_cost).expect("validated R");
                mn.offset.at(t) + &mn.input * r_inv * linalg::column(sys.control_linear.as_slice())
            })
            .collect();
        vstack(&parts.iter().collect::<Vec<_>>())
    })?;
    Ok(MeanFieldIterate {
        drift: MatrixTrajectory::constant(*grid, DMatrix::zeros(n * k, n * k)),
        major_coupling: MatrixTrajectory::constant(*grid, DMatrix::zeros(n * k, n)),
        offset,
    })
}

/// One sweep: major solve given the current mean field, then each minor solve
/// against the major closed loop, then the mean-field update.
fn sweep(
    spec: &MajorMinorSpec,
    major_sys: &ExtendedSystem,
    minor_sys: &[ExtendedSystem],
    current: &MeanFieldIterate,
    grid: &TimeGrid,
) -> Result<Sweep> {
    let (n, k) = (spec.state_dim(), spec.types());
    let mj = &spec.major;
    let pop_row = weighted_row(&spec.weights, &mj.population_coupling);
    let major_top = hstack(&[&mj.drift, &pop_row]);
    let major_drift = MatrixTrajectory::from_fn(*grid, |_| DMatrix::zeros(0, 0))?;
    let major_drift = major_drift.map(|i, _| vstack(&[&major_top, &hstack(&[current.major_coupling.at_node(i), current.drift.at_node(i)])]))?;
    let b0 = mj.offset.sample(grid);
    let major_offset = current.offset.map(|i, mbar| vstack(&[&b0[i], mbar]))?;
    let major_problem = lqg_from_system(
        major_sys,
        Coefficient::Nodes(major_drift.clone()),
        Coefficient::Nodes(major_offset.clone()),
        spec.horizon,
    );
    let major = riccati::solve(&major_problem, grid)?;
    // Closed loop of (x⁰, x̄) under the major law.
    let input0 = &major_sys.input;
    let closed_drift = major_drift.map(|i, a| a + input0 * major.law.gain.at_node(i))?;
    let closed_offset = major_offset.map(|i, m| m + input0 * major.law.offset.at_node(i))?;

    let mut minor_problems = Vec::with_capacity(k);
    let mut minors = Vec::with_capacity(k);
    let mut drift_rows = Vec::with_capacity(k);
    let mut coupling_rows = Vec::with_capacity(k);
    let mut offset_rows = Vec::with_capacity(k);
    for (idx, (mn, sys)) in spec.minors.iter().zip(minor_sys).enumerate() {
        let top = hstack(&[&mn.drift, &mn.major_coupling, &weighted_row(&spec.weights, &mn.population_coupling)]);
        let drift = closed_drift.map(|_, a0| vstack(&[&top, &hstack(&[&DMatrix::zeros(a0.nrows(), n), a0])]))?;
        let bk = mn.offset.sample(grid);
        let offset = closed_offset.map(|i, m0| vstack(&[&bk[i], m0]))?;
        let problem = lqg_from_system(sys, Coefficient::Nodes(drift), Coefficient::Nodes(offset), spec.horizon);
        let sol = riccati::solve(&problem, grid)?;
        // With u = K Xⁱ + k and K = [K₁ K₂ K₃] over (xⁱ, x⁰, x̄):
        // Āₖ = (Aₖ + BₖK₁)𝐞ₖ + Fₖ^π + BₖK₃, Ḡₖ = Gₖ + BₖK₂, m̄ₖ = bₖ + Bₖk.
        let e_k = selector(n, k, idx);
        let f_pi = weighted_row(&spec.weights, &mn.population_coupling);
        drift_rows.push(sol.law.gain.map(|_, g| {
            let k1 = block(g, 0, 0, g.nrows(), n);
            let k3 = block(g, 0, 2 * n, g.nrows(), n * k);
            (&mn.drift + &mn.input * k1) * &e_k + &f_pi + &mn.input * k3
        })?);
        coupling_rows.push(sol.law.gain.map(|_, g| &mn.major_coupling + &mn.input * block(g, 0, n, g.nrows(), n))?);
        offset_rows.push(sol.law.offset.map(|i, kk| &bk[i] + &mn.input * kk)?);
        minor_problems.push(problem);
        minors.push(sol);
    }
    let stack_rows = |rows: &[MatrixTrajectory]| {
        MatrixTrajectory::new(
            *grid,
            (0..grid.len())
                .map(|i| vstack(&rows.iter().map(|r| r.at_node(i)).collect::<Vec<_>>()))
                .collect(),
        )
    };
    let candidate = MeanFieldIterate {
        drift: stack_rows(&drift_rows)?,
        major_coupling: stack_rows(&coupling_rows)?,
        offset: stack_rows(&offset_rows)?,
    };
    Ok(Sweep { major_problem, minor_problems, major, minors, candidate })
}

/// Solves the consistency equations by fixed-point iteration on `Ā, Ḡ, m̄`.
///
/// Stops once both the `Ā, Ḡ` error and the `m̄` change fall below `tol`.
pub fn solve_consistency(spec: &MajorMinorSpec, grid: &TimeGrid, options: &FixedPointOptions) -> Result<MfgEquilibrium> {
    solve_consistency_logged(spec, grid, options).and_then(|(eq, log)| {
        eq.ok_or(Error::NotConverged { iterations: log.iterations(), last_error: log.last_error() })
    })
}

/// As [`solve_consistency`] but also returns the log (and history) when the
/// iteration does not converge.
pub fn solve_consistency_logged(
    spec: &MajorMinorSpec,
    grid: &TimeGrid,
    options: &FixedPointOptions,
) -> Result<(Option<MfgEquilibrium>, IterationLog)> {
    spec.validate()?;
    if options.tol.is_nan() || options.tol <= 0.0 || !(0.0..1.0).contains(&options.relaxation) {
        return Err(Error::InvalidArgument("tolerance must be positive and relaxation in [0, 1)".into()));
    }
    if (grid.t_end() - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::InvalidArgument("grid horizon differs from the game horizon".into()));
    }
    let major_sys = assemble_major(spec)?;
    let minor_sys: Vec<ExtendedSystem> = (0..spec.types()).map(|k| assemble_minor(spec, k)).collect::<Result<_>>()?;
    let mut current = initial_iterate(spec, &minor_sys, grid)?;
    let mut log = IterationLog {
        errors: Vec::new(),
        offset_errors: Vec::new(),
        tolerance: options.tol,
        converged: false,
        history: Vec::new(),
    };
    if options.record_history {
        log.history.push(current.clone());
    }
    for _ in 0..options.max_iter {
        let sw = sweep(spec, &major_sys, &minor_sys, &current, grid)?;
        let next = if options.relaxation > 0.0 {
            sw.candidate.blend(&current, options.relaxation)?
        } else {
            sw.candidate
        };
        let (err, offset_err) = next.distance(&current);
        log.errors.push(err);
        log.offset_errors.push(offset_err);
        if options.record_history {
            log.history.push(next.clone());
        }
        if !err.is_finite() {
            break;
        }
        if err < options.tol && offset_err < options.tol {
            log.converged = true;
            let eq = MfgEquilibrium {
                grid: *grid,
                major_system: major_sys,
                minor_systems: minor_sys,
                major_problem: sw.major_problem,
                minor_problems: sw.minor_problems,
                major: sw.major,
                minors: sw.minors,
                mean_field: next,
                log: log.clone(),
            };
            return Ok((Some(eq), log));
        }
        current = next;
    }
    Ok((None, log))
}

/// Runs one more sweep from the equilibrium's mean field and returns the
/// `(Ā,Ḡ)` and `m̄` changes.
pub fn fixed_point_residual(spec: &MajorMinorSpec, eq: &MfgEquilibrium) -> Result<(f64, f64)> {
    let sw = sweep(spec, &eq.major_system, &eq.minor_systems, &eq.mean_field, &eq.grid)?;
    Ok(sw.candidate.distance(&eq.mean_field))
}

/// Equilibrium feedback laws on the extended states.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumLaws {
    /// `u⁰ = K₀(t)X⁰ + k₀(t)`.
    pub major: FeedbackLaw,
    /// `uⁱ = Kₖ(t)Xⁱ + kₖ(t)` per type.
    pub minors: Vec<FeedbackLaw>,
}

pub fn equilibrium_laws(eq: &MfgEquilibrium) -> Result<EquilibriumLaws> {
    if !eq.log.converged {
        return Err(Error::NotConverged { iterations: eq.log.iterations(), last_error: eq.log.last_error() });
    }
    Ok(EquilibriumLaws {
        major: eq.major.law.clone(),
        minors: eq.minors.iter().map(|s| s.law.clone()).collect(),
    })
}

/// Affine form `ū = Ξ(t)X⁰ + ς(t)` of the control mean field: row block `k`
/// is `[Kₖ,₂, Kₖ,₁𝐞ₖ + Kₖ,₃]` and `kₖ`.
pub fn control_mean_field(eq: &MfgEquilibrium) -> Result<(MatrixTrajectory, MatrixTrajectory)> {
    let (n, k) = (eq.state_dim(), eq.types());
    let gains = eq
        .major
        .pi
        .map(|i, _| {
            let rows: Vec<DMatrix<f64>> = eq
                .minors
                .iter()
                .enumerate()
                .map(|(idx, sol)| {
                    let g = sol.law.gain.at_node(i);
                    let m = g.nrows();
                    let k1 = block(g, 0, 0, m, n);
                    let k2 = block(g, 0, n, m, n);
                    let k3 = block(g, 0, 2 * n, m, n * k);
                    hstack(&[&k2, &(k1 * selector(n, k, idx) + k3)])
                })
                .collect();
            vstack(&rows.iter().collect::<Vec<_>>())
        })?;
    let offsets = eq.major.s.map(|i, _| {
        let rows: Vec<&DMatrix<f64>> = eq.minors.iter().map(|sol| sol.law.offset.at_node(i)).collect();
        vstack(&rows)
    })?;
    Ok((gains, offsets))
}

/// Forward solution of `dx̄ = (Āx̄ + Ḡx⁰ + m̄)dt` from the mean initial minor
/// state, for a given major-state trajectory on the equilibrium grid.
pub fn mean_field_trajectory(eq: &MfgEquilibrium, major_path: &MatrixTrajectory) -> Result<MatrixTrajectory> {
    let n = eq.state_dim();
    if major_path.shape() != (n, 1) {
        return Err(Error::DimensionMismatch(format!(
            "major path has shape {:?}, expected ({n}, 1)",
            major_path.shape()
        )));
    }
    let start = block(&linalg::column(eq.major_system.x0.as_slice()), n, 0, n * eq.types(), 1);
    let mf = &eq.mean_field;
    let scale = major_path.grid().t_end() / eq.grid.t_end();
    integrate_ode(
        |t, xbar| {
            let x0 = major_path.interpolate((t * scale).min(major_path.grid().t_end())).expect("in range");
            mf.drift.interpolate(t).expect("in range") * xbar
                + mf.major_coupling.interpolate(t).expect("in range") * x0
                + mf.offset.interpolate(t).expect("in range")
        },
        &start,
        &eq.grid,
        Direction::Forward,
    )
}

/// Mean of the major extended state `E[X⁰(t)] = [E x⁰; x̄]` under the
/// equilibrium, from `dE X⁰ = ((𝔸₀ + 𝔹₀K₀)E X⁰ + 𝕄₀ + 𝔹₀k₀)dt`.
pub fn major_mean_trajectory(eq: &MfgEquilibrium) -> Result<MatrixTrajectory> {
    let p = &eq.major_problem;
    let law = &eq.major.law;
    let closed = |t: f64| -> (DMatrix<f64>, DMatrix<f64>) {
        let a = p.drift.at(t) + &p.input * law.gain.interpolate(t).expect("in range");
        let m = p.offset.at(t) + &p.input * law.offset.interpolate(t).expect("in range");
        (a, m)
    };
    integrate_ode(
        |t, x| {
            let (a, m) = closed(t);
            a * x + m
        },
        &linalg::column(p.x0.as_slice()),
        &eq.grid,
        Direction::Forward,
    )
}

/// Major law written on `(x⁰, x̄)` only: convenience accessor returning the
/// gain blocks `(K₀ on x⁰, K₀ on x̄)` at node `i`.
pub fn major_gain_blocks(eq: &MfgEquilibrium, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = eq.state_dim();
    let g = eq.major.law.gain.at_node(i);
    (block(g, 0, 0, g.nrows(), n), block(g, 0, n, g.nrows(), g.ncols() - n))
}

//! Euler–Maruyama path simulation, log-domain cost estimation and Monte Carlo
//! checks of the optimality identities of the single-agent problem.
//!
//! Every path draws from its own ChaCha8 stream keyed by `(seed, path index)`
//! and per-path results are reduced sequentially in index order, so estimates
//! do not depend on the number of threads.

use alloc::{format, vec, vec::Vec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, CompensatedSum};
use crate::math;
use crate::model::LqgProblem;
use crate::numerics::{state_transition, MatrixTrajectory, TimeGrid};
use crate::parallel::map_indexed;
use crate::riccati::{FeedbackLaw, RiccatiSolution};
use crate::{Error, Result};

/// Deterministic random stream for one `(seed, replicate, stream)` triple.
pub fn path_rng(seed: u64, replicate: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Control applied along simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlLaw {
    /// `u = K(t)x + k(t)` on the simulated state.
    Feedback(FeedbackLaw),
    /// Deterministic `u = v(t)` (m×1 per node).
    OpenLoop(MatrixTrajectory),
    /// `u = Σⱼ wⱼ uʲ + v(t)`, where `uʲ` is the control process generated by
    /// feedback law `j` on its own state driven by the same noise.
    Combination {
        components: Vec<(f64, FeedbackLaw)>,
        open_loop: Option<MatrixTrajectory>,
    },
}

impl ControlLaw {
    /// The control process of `base` shifted by `eps·direction`.
    pub fn perturbed(base: &FeedbackLaw, direction: &MatrixTrajectory, eps: f64) -> Self {
        ControlLaw::Combination {
            components: vec![(1.0, base.clone())],
            open_loop: Some(direction.map(|_, w| w * eps).expect("finite perturbation")),
        }
    }

    /// `λ·u¹ + (1−λ)·u²` as control processes.
    pub fn mixture(lambda: f64, first: &FeedbackLaw, second: &FeedbackLaw) -> Self {
        ControlLaw::Combination {
            components: vec![(lambda, first.clone()), (1.0 - lambda, second.clone())],
            open_loop: None,
        }
    }
}

/// Receives the state and control at every node of one path.
pub trait PathObserver {
    type Output: Send;
    fn visit(&mut self, node: usize, x: &[f64], u: &[f64]);
    fn finish(self) -> Self::Output;
}

/// Observer that records nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl PathObserver for NoObserver {
    type Output = ();
    fn visit(&mut self, _: usize, _: &[f64], _: &[f64]) {}
    fn finish(self) {}
}

/// Records the terminal state.
#[derive(Debug, Default, Clone)]
pub struct TerminalState(Vec<f64>);

impl PathObserver for TerminalState {
    type Output = Vec<f64>;
    fn visit(&mut self, _: usize, x: &[f64], _: &[f64]) {
        self.0.clear();
        self.0.extend_from_slice(x);
    }
    fn finish(self) -> Vec<f64> {
        self.0
    }
}

/// Records the whole state and control path.
#[derive(Debug, Default, Clone)]
pub struct FullPath {
    states: Vec<f64>,
    controls: Vec<f64>,
}

impl PathObserver for FullPath {
    type Output = (Vec<f64>, Vec<f64>);
    fn visit(&mut self, _: usize, x: &[f64], u: &[f64]) {
        self.states.extend_from_slice(x);
        self.controls.extend_from_slice(u);
    }
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        (self.states, self.controls)
    }
}

/// Node-sampled model data in flat column-major buffers.
struct Kernel {
    n: usize,
    m: usize,
    r: usize,
    grid: TimeGrid,
    h: f64,
    sqrt_h: f64,
    drift: Vec<f64>,
    input: Vec<f64>,
    offset: Vec<f64>,
    diffusion: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    rc: Vec<f64>,
    eta: Vec<f64>,
    zeta: Vec<f64>,
    q_hat: Vec<f64>,
    risk: f64,
    x0: Vec<f64>,
}

struct CompiledLaw {
    components: Vec<(f64, Vec<f64>, Vec<f64>)>,
    open_loop: Option<Vec<f64>>,
    /// Single unit-weight feedback component evaluated on the simulated state.
    direct: bool,
}

/// State, control and noise dimensions, known at compile time for common
/// small shapes so that the inner loops unroll.
pub(crate) trait Dims: Copy {
    fn n(self) -> usize;
    fn m(self) -> usize;
    fn r(self) -> usize;
}

#[derive(Clone, Copy)]
pub(crate) struct Fixed<const N: usize, const M: usize, const R: usize>;

impl<const N: usize, const M: usize, const R: usize> Dims for Fixed<N, M, R> {
    #[inline(always)]
    fn n(self) -> usize {
        N
    }
    #[inline(always)]
    fn m(self) -> usize {
        M
    }
    #[inline(always)]
    fn r(self) -> usize {
        R
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Dynamic {
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) r: usize,
}

impl Dims for Dynamic {
    #[inline(always)]
    fn n(self) -> usize {
        self.n
    }
    #[inline(always)]
    fn m(self) -> usize {
        self.m
    }
    #[inline(always)]
    fn r(self) -> usize {
        self.r
    }
}

/// `out += scale · M v` with `M` stored column-major as `rows × cols`.
#[inline(always)]
fn mat_vec_acc(out: &mut [f64], mat: &[f64], v: &[f64], rows: usize, cols: usize, scale: f64) {
    let mat = &mat[..rows * cols];
    let out = &mut out[..rows];
    let v = &v[..cols];
    for j in 0..cols {
        let c = scale * v[j];
        for k in 0..rows {
            out[k] += mat[j * rows + k] * c;
        }
    }
}

/// `vᵀ M w` with `M` stored column-major as `rows × cols`.
#[inline(always)]
fn bilinear(v: &[f64], mat: &[f64], w: &[f64], rows: usize, cols: usize) -> f64 {
    let mat = &mat[..rows * cols];
    let v = &v[..rows];
    let w = &w[..cols];
    let mut acc = 0.0;
    for j in 0..cols {
        let mut inner = 0.0;
        for k in 0..rows {
            inner += mat[j * rows + k] * v[k];
        }
        acc += w[j] * inner;
    }
    acc
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64], len: usize) -> f64 {
    let (a, b) = (&a[..len], &b[..len]);
    let mut acc = 0.0;
    for k in 0..len {
        acc += a[k] * b[k];
    }
    acc
}

impl Kernel {
    fn new(p: &LqgProblem, grid: &TimeGrid) -> Result<Self> {
        p.validate()?;
        if (grid.t_end() - p.horizon).abs() > 1e-12 * p.horizon {
            return Err(Error::InvalidArgument(format!(
                "grid horizon {} differs from problem horizon {}",
                grid.t_end(),
                p.horizon
            )));
        }
        Ok(Self {
            n: p.state_dim(),
            m: p.control_dim(),
            r: p.noise_dim(),
            grid: *grid,
            h: grid.step(),
            sqrt_h: math::sqrt(grid.step()),
            drift: linalg::flatten(&p.drift.sample(grid)),
            input: p.input.as_slice().to_vec(),
            offset: linalg::flatten(&p.offset.sample(grid)),
            diffusion: linalg::flatten(&p.diffusion.sample(grid)),
            q: p.state_cost.as_slice().to_vec(),
            s: p.cross_cost.as_slice().to_vec(),
            rc: p.control_cost.as_slice().to_vec(),
            eta: p.state_linear.as_slice().to_vec(),
            zeta: p.control_linear.as_slice().to_vec(),
            q_hat: p.terminal_cost.as_slice().to_vec(),
            risk: p.risk,
            x0: p.x0.as_slice().to_vec(),
        })
    }

    fn compile(&self, law: &ControlLaw) -> Result<CompiledLaw> {
        let check = |tr: &MatrixTrajectory, shape: (usize, usize), what: &str| -> Result<Vec<f64>> {
            if tr.grid() != &self.grid {
                return Err(Error::InvalidArgument(format!("{what} sampled on a different grid")));
            }
            if tr.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    tr.shape()
                )));
            }
            Ok(linalg::flatten(tr.values()))
        };
        let feedback = |w: f64, f: &FeedbackLaw| -> Result<(f64, Vec<f64>, Vec<f64>)> {
            Ok((
                w,
                check(&f.gain, (self.m, self.n), "feedback gain")?,
                check(&f.offset, (self.m, 1), "feedback offset")?,
            ))
        };
        Ok(match law {
            ControlLaw::Feedback(f) => CompiledLaw {
                components: vec![feedback(1.0, f)?],
                open_loop: None,
                direct: true,
            },
            ControlLaw::OpenLoop(v) => CompiledLaw {
                components: Vec::new(),
                open_loop: Some(check(v, (self.m, 1), "open-loop control")?),
                direct: false,
            },
            ControlLaw::Combination { components, open_loop } => CompiledLaw {
                components: components
                    .iter()
                    .map(|(w, f)| feedback(*w, f))
                    .collect::<Result<_>>()?,
                open_loop: open_loop
                    .as_ref()
                    .map(|v| check(v, (self.m, 1), "open-loop control"))
                    .transpose()?,
                direct: false,
            },
        })
    }

    /// `ℓ(x,u) = ½(xᵀQx + 2xᵀSu + uᵀRu − 2ηᵀx − 2ζᵀu)`.
    #[inline(always)]
    fn running_cost<D: Dims>(&self, d: D, x: &[f64], u: &[f64]) -> f64 {
        let (n, m) = (d.n(), d.m());
        0.5 * (bilinear(x, &self.q, x, n, n) + 2.0 * bilinear(x, &self.s, u, n, m)
            + bilinear(u, &self.rc, u, m, m)
            - 2.0 * dot(&self.eta, x, n)
            - 2.0 * dot(&self.zeta, u, m))
    }

    /// One Euler–Maruyama step `x += (A x + B u + b)h + σ√h ξ`.
    #[inline(always)]
    fn step<D: Dims>(&self, d: D, i: usize, x: &mut [f64], u: &[f64], xi: &[f64], drift: &mut [f64]) {
        let (n, m, r) = (d.n(), d.m(), d.r());
        let offset = &self.offset[i * n..(i + 1) * n];
        drift[..n].copy_from_slice(offset);
        mat_vec_acc(drift, &self.drift[i * n * n..], x, n, n, 1.0);
        mat_vec_acc(drift, &self.input, u, n, m, 1.0);
        for k in 0..n {
            x[k] += self.h * drift[k];
        }
        mat_vec_acc(x, &self.diffusion[i * n * r..], xi, n, r, self.sqrt_h);
    }

    /// Simulates one path and returns `δΛ_T`.
    fn run_path<O: PathObserver>(&self, law: &CompiledLaw, rng: &mut ChaCha8Rng, obs: &mut O) -> Result<f64> {
        macro_rules! dispatch {
            ($(($n:literal, $m:literal, $r:literal)),*) => {
                match (self.n, self.m, self.r) {
                    $(($n, $m, $r) => self.run_path_dims(Fixed::<$n, $m, $r>, law, rng, obs),)*
                    (n, m, r) => self.run_path_dims(Dynamic { n, m, r }, law, rng, obs),
                }
            };
        }
        dispatch!((1, 1, 1), (2, 1, 1), (2, 1, 2), (2, 2, 1), (2, 2, 2), (3, 1, 1), (3, 3, 3))
    }

    #[inline(always)]
    fn run_path_dims<D: Dims, O: PathObserver>(
        &self,
        d: D,
        law: &CompiledLaw,
        rng: &mut ChaCha8Rng,
        obs: &mut O,
    ) -> Result<f64> {
        let (n, m, r) = (d.n(), d.m(), d.r());
        let steps = self.grid.steps();
        let h = self.h;
        let mut x = self.x0.clone();
        let mut refs: Vec<Vec<f64>> = if law.direct {
            Vec::new()
        } else {
            law.components.iter().map(|_| self.x0.clone()).collect()
        };
        let mut comp_u = vec![vec![0.0; m]; refs.len()];
        let mut u = vec![0.0; m];
        let mut xi = vec![0.0; r];
        let mut drift = vec![0.0; n];
        let mut running = 0.0;
        for i in 0..=steps {
            if law.direct {
                let (_, gain, offset) = &law.components[0];
                let offset = &offset[i * m..(i + 1) * m];
                u[..m].copy_from_slice(offset);
                mat_vec_acc(&mut u, &gain[i * m * n..], &x, m, n, 1.0);
            } else {
                u[..m].fill(0.0);
                for ((w, gain, offset), (cu, xr)) in law.components.iter().zip(comp_u.iter_mut().zip(&refs)) {
                    let offset = &offset[i * m..(i + 1) * m];
                    cu[..m].copy_from_slice(offset);
                    mat_vec_acc(cu, &gain[i * m * n..], xr, m, n, 1.0);
                    for k in 0..m {
                        u[k] += w * cu[k];
                    }
                }
            }
            if let Some(v) = &law.open_loop {
                let v = &v[i * m..(i + 1) * m];
                for k in 0..m {
                    u[k] += v[k];
                }
            }
            obs.visit(i, &x, &u);
            let weight = if i == 0 || i == steps { 0.5 * h } else { h };
            running += weight * self.running_cost(d, &x, &u);
            if i == steps {
                break;
            }
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            self.step(d, i, &mut x, &u, &xi, &mut drift);
            for (xr, cu) in refs.iter_mut().zip(&comp_u) {
                self.step(d, i, xr, cu, &xi, &mut drift);
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { t: self.grid.node(i + 1) });
            }
        }
        let terminal = 0.5 * bilinear(&x, &self.q_hat, &x, n, n);
        let log_weight = self.risk * (running + terminal);
        if !log_weight.is_finite() {
            return Err(Error::NonFiniteState { t: self.grid.t_end() });
        }
        Ok(log_weight)
    }
}

/// Simulates `n_paths` paths and returns, in path order, each path's `δΛ_T`
/// with the output of a fresh observer from `observer`.
pub fn simulate_observed<O, F>(
    p: &LqgProblem,
    grid: &TimeGrid,
    law: &ControlLaw,
    n_paths: usize,
    seed: u64,
    observer: F,
) -> Result<Vec<(f64, O::Output)>>
where
    O: PathObserver,
    F: Fn() -> O + Sync + Send,
{
    if n_paths == 0 {
        return Err(Error::InvalidArgument("at least one path required".into()));
    }
    let kernel = Kernel::new(p, grid)?;
    let compiled = kernel.compile(law)?;
    map_indexed(n_paths, |i| {
        let mut rng = path_rng(seed, 0, i as u64);
        let mut obs = observer();
        let lw = kernel.run_path(&compiled, &mut rng, &mut obs)?;
        Ok((lw, obs.finish()))
    })
    .into_iter()
    .collect()
}

/// Seeded collection of simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub seed: u64,
    /// `δΛ_T` for every path.
    pub log_weights: Vec<f64>,
    /// Terminal state of every path.
    pub terminal_states: Vec<DVector<f64>>,
    /// Per path, node-major states (`(M+1)·n` values) when recorded.
    pub states: Option<Vec<Vec<f64>>>,
    /// Per path, node-major controls (`(M+1)·m` values) when recorded.
    pub controls: Option<Vec<Vec<f64>>>,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.log_weights.len()
    }

    /// State of `path` at `node`, if paths were recorded.
    pub fn state(&self, path: usize, node: usize) -> Option<DVector<f64>> {
        let n = self.terminal_states.first()?.len();
        let s = self.states.as_ref()?.get(path)?;
        Some(DVector::from_column_slice(&s[node * n..(node + 1) * n]))
    }

    /// Control of `path` at `node`, if paths were recorded.
    pub fn control(&self, path: usize, node: usize) -> Option<DVector<f64>> {
        let c = self.controls.as_ref()?.get(path)?;
        let m = c.len() / self.grid.len();
        Some(DVector::from_column_slice(&c[node * m..(node + 1) * m]))
    }
}

/// Simulates paths keeping log-weights and terminal states.
pub fn simulate(p: &LqgProblem, grid: &TimeGrid, law: &ControlLaw, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    let out = simulate_observed(p, grid, law, n_paths, seed, TerminalState::default)?;
    let (log_weights, terminal_states) = out
        .into_iter()
        .map(|(lw, x)| (lw, DVector::from_vec(x)))
        .unzip();
    Ok(PathEnsemble { grid: *grid, seed, log_weights, terminal_states, states: None, controls: None })
}

/// Simulates paths recording full state and control trajectories.
pub fn simulate_recorded(
    p: &LqgProblem,
    grid: &TimeGrid,
    law: &ControlLaw,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let n = p.state_dim();
    let out = simulate_observed(p, grid, law, n_paths, seed, FullPath::default)?;
    let mut log_weights = Vec::with_capacity(n_paths);
    let mut terminal_states = Vec::with_capacity(n_paths);
    let mut states = Vec::with_capacity(n_paths);
    let mut controls = Vec::with_capacity(n_paths);
    for (lw, (xs, us)) in out {
        log_weights.push(lw);
        terminal_states.push(DVector::from_column_slice(&xs[xs.len() - n..]));
        states.push(xs);
        controls.push(us);
    }
    Ok(PathEnsemble {
        grid: *grid,
        seed,
        log_weights,
        terminal_states,
        states: Some(states),
        controls: Some(controls),
    })
}

/// `log mean exp` of a sample with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMeanExpEstimate {
    pub log_value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl LogMeanExpEstimate {
    /// Max-shifted estimate; panics on an empty sample.
    pub fn from_log_values(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "log-mean-exp of an empty sample");
        let n = values.len();
        let shift = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = values.iter().map(|v| math::exp(v - shift)).collect();
        let mean = linalg::compensated_sum(weights.iter().copied()) / n as f64;
        let std_error = if n > 1 {
            let var = linalg::compensated_sum(weights.iter().map(|w| (w - mean) * (w - mean))) / (n - 1) as f64;
            math::sqrt(var / n as f64) / mean
        } else {
            0.0
        };
        Self { log_value: shift + math::ln(mean), std_error, n }
    }
}

/// Estimate of `log E[exp(δΛ_T)]` from an ensemble.
pub fn estimate_cost(ens: &PathEnsemble) -> LogMeanExpEstimate {
    LogMeanExpEstimate::from_log_values(&ens.log_weights)
}

/// Self-normalized estimate `Σ wᵢvᵢ / Σ wᵢ` with `wᵢ = exp(lᵢ)` and its
/// delta-method standard error.
pub fn weighted_mean(log_weights: &[f64], values: &[f64]) -> (f64, f64) {
    let shift = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| math::exp(l - shift)).collect();
    let total = linalg::compensated_sum(w.iter().copied());
    let ratio = linalg::compensated_sum(w.iter().zip(values).map(|(w, v)| w * v)) / total;
    let spread = linalg::compensated_sum(w.iter().zip(values).map(|(w, v)| {
        let d = w * (v - ratio);
        d * d
    }));
    (ratio, math::sqrt(spread) / total)
}

/// Monte Carlo estimate compared with its theoretical value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub estimate: f64,
    pub std_error: f64,
    pub reference: f64,
    /// `(estimate − reference)/std_error`; zero for an exact match with zero error.
    pub z: f64,
}

impl IdentityCheck {
    pub fn new(estimate: f64, std_error: f64, reference: f64) -> Self {
        let diff = estimate - reference;
        let z = if std_error > 0.0 {
            diff / std_error
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        Self { estimate, std_error, reference, z }
    }

    pub fn abs_error(&self) -> f64 {
        math::abs(self.estimate - self.reference)
    }
}

/// `E[exp(δΛ_T(u*) − C*_T)] = 1`.
pub fn check_normalization(p: &LqgProblem, sol: &RiccatiSolution, n_paths: usize, seed: u64) -> Result<IdentityCheck> {
    let ens = simulate(p, sol.grid(), &ControlLaw::Feedback(sol.law.clone()), n_paths, seed)?;
    let est = estimate_cost(&ens);
    let value = math::exp(est.log_value - sol.c_star);
    Ok(IdentityCheck::new(value, value * est.std_error, 1.0))
}

/// `log J(u*) = C*_T`.
pub fn check_optimal_cost(p: &LqgProblem, sol: &RiccatiSolution, n_paths: usize, seed: u64) -> Result<IdentityCheck> {
    let ens = simulate(p, sol.grid(), &ControlLaw::Feedback(sol.law.clone()), n_paths, seed)?;
    let est = estimate_cost(&ens);
    Ok(IdentityCheck::new(est.log_value, est.std_error, sol.c_star))
}

/// Directional derivative of the cost at a control process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateauxEstimate {
    /// `log J(u)` from the same paths.
    pub log_cost: LogMeanExpEstimate,
    /// `⟨DJ(u), ω⟩ / J(u)`, the derivative of `log J` along `ω`.
    pub derivative: f64,
    pub std_error: f64,
}

/// Trapezoidal weights on the grid.
fn trapezoid_weights(grid: &TimeGrid) -> Vec<f64> {
    let h = grid.step();
    let mut w = vec![h; grid.len()];
    w[0] = 0.5 * h;
    w[grid.steps()] = 0.5 * h;
    w
}

struct GateauxObserver<'a> {
    q: &'a DMatrix<f64>,
    s: &'a DMatrix<f64>,
    rc: &'a DMatrix<f64>,
    eta: &'a [f64],
    zeta: &'a [f64],
    q_hat: &'a DMatrix<f64>,
    sensitivity: &'a [f64],
    direction: &'a [f64],
    weights: &'a [f64],
    steps: usize,
    acc: f64,
    scratch_n: Vec<f64>,
    scratch_m: Vec<f64>,
}

impl PathObserver for GateauxObserver<'_> {
    type Output = f64;
    fn visit(&mut self, i: usize, x: &[f64], u: &[f64]) {
        let (n, m) = (x.len(), u.len());
        let y = &self.sensitivity[i * n..(i + 1) * n];
        let w = &self.direction[i * m..(i + 1) * m];
        // Qx + Su − η
        self.scratch_n.iter_mut().zip(self.eta).for_each(|(a, e)| *a = -e);
        mat_vec_acc(&mut self.scratch_n, self.q.as_slice(), x, n, n, 1.0);
        mat_vec_acc(&mut self.scratch_n, self.s.as_slice(), u, n, m, 1.0);
        // Ru + Sᵀx − ζ
        self.scratch_m.iter_mut().zip(self.zeta).for_each(|(a, z)| *a = -z);
        mat_vec_acc(&mut self.scratch_m, self.rc.as_slice(), u, m, m, 1.0);
        for (k, out) in self.scratch_m.iter_mut().enumerate() {
            *out += dot(&self.s.as_slice()[k * n..(k + 1) * n], x, n);
        }
        self.acc += self.weights[i] * (dot(y, &self.scratch_n, n) + dot(w, &self.scratch_m, m));
        if i == self.steps {
            self.acc += bilinear(y, self.q_hat.as_slice(), x, n, n);
        }
    }
    fn finish(self) -> f64 {
        self.acc
    }
}

/// Estimates `⟨DJ(u), ω⟩/J(u)` for the control process generated by `law`,
/// using the state sensitivity `y(t) = Υ(t)∫₀ᵗΥ⁻¹(τ)Bω(τ)dτ`.
pub fn estimate_gateaux(
    p: &LqgProblem,
    grid: &TimeGrid,
    law: &ControlLaw,
    omega: &MatrixTrajectory,
    n_paths: usize,
    seed: u64,
) -> Result<GateauxEstimate> {
    p.validate()?;
    let (n, m) = (p.state_dim(), p.control_dim());
    if omega.shape() != (m, 1) || omega.grid() != grid {
        return Err(Error::DimensionMismatch("perturbation must be m×1 on the simulation grid".into()));
    }
    let (flow, inverse) = state_transition(|t| p.drift.at(t), grid)?;
    let weights = trapezoid_weights(grid);
    let mut sensitivity = Vec::with_capacity(grid.len() * n);
    let mut integral = DMatrix::<f64>::zeros(n, 1);
    let mut prev = DMatrix::<f64>::zeros(n, 1);
    for i in 0..grid.len() {
        let g = inverse.at_node(i) * &p.input * omega.at_node(i);
        if i > 0 {
            integral += (&prev + &g) * (0.5 * (grid.node(i) - grid.node(i - 1)));
        }
        sensitivity.extend_from_slice((flow.at_node(i) * &integral).as_slice());
        prev = g;
    }
    let direction = linalg::flatten(omega.values());
    let out = simulate_observed(p, grid, law, n_paths, seed, || GateauxObserver {
        q: &p.state_cost,
        s: &p.cross_cost,
        rc: &p.control_cost,
        eta: p.state_linear.as_slice(),
        zeta: p.control_linear.as_slice(),
        q_hat: &p.terminal_cost,
        sensitivity: &sensitivity,
        direction: &direction,
        weights: &weights,
        steps: grid.steps(),
        acc: 0.0,
        scratch_n: vec![0.0; n],
        scratch_m: vec![0.0; m],
    })?;
    let (log_weights, iota): (Vec<f64>, Vec<f64>) = out.into_iter().unzip();
    let (ratio, se) = weighted_mean(&log_weights, &iota);
    Ok(GateauxEstimate {
        log_cost: LogMeanExpEstimate::from_log_values(&log_weights),
        derivative: p.risk * ratio,
        std_error: p.risk * se,
    })
}

struct QuotientObserver<'a> {
    q: &'a DMatrix<f64>,
    s: &'a DMatrix<f64>,
    eta: &'a [f64],
    q_hat: &'a DMatrix<f64>,
    flow_t: &'a [f64],
    weights: &'a [f64],
    steps: usize,
    acc: Vec<f64>,
    scratch: Vec<f64>,
}

impl PathObserver for QuotientObserver<'_> {
    type Output = Vec<f64>;
    fn visit(&mut self, i: usize, x: &[f64], u: &[f64]) {
        let n = x.len();
        let ut = &self.flow_t[i * n * n..(i + 1) * n * n];
        self.scratch.iter_mut().zip(self.eta).for_each(|(a, e)| *a = -e);
        mat_vec_acc(&mut self.scratch, self.q.as_slice(), x, n, n, 1.0);
        mat_vec_acc(&mut self.scratch, self.s.as_slice(), u, n, u.len(), 1.0);
        mat_vec_acc(&mut self.acc, ut, &self.scratch, n, n, self.weights[i]);
        if i == self.steps {
            self.scratch.iter_mut().for_each(|a| *a = 0.0);
            mat_vec_acc(&mut self.scratch, self.q_hat.as_slice(), x, n, n, 1.0);
            mat_vec_acc(&mut self.acc, ut, &self.scratch, n, n, 1.0);
        }
    }
    fn finish(self) -> Vec<f64> {
        self.acc
    }
}

/// Compares `Π(0)x₀ + s(0)` with the self-normalized estimate of
/// `E[e^{δΛ_T}(Υ(T)ᵀQ̂x_T + ∫₀ᵀΥ(t)ᵀ(Qx_t + Su*_t − η)dt)] / E[e^{δΛ_T}]`
/// under the optimal law, componentwise.
pub fn check_martingale_quotient(
    p: &LqgProblem,
    sol: &RiccatiSolution,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<IdentityCheck>> {
    quotient_paths(p, sol, n_paths, seed).map(|(_, checks)| checks)
}

fn quotient_paths(
    p: &LqgProblem,
    sol: &RiccatiSolution,
    n_paths: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<IdentityCheck>)> {
    p.validate()?;
    let grid = *sol.grid();
    let n = p.state_dim();
    let (flow, _) = state_transition(|t| p.drift.at(t), &grid)?;
    let flow_t = linalg::flatten(&flow.values().iter().map(|u| u.transpose()).collect::<Vec<_>>());
    let weights = trapezoid_weights(&grid);
    let out = simulate_observed(p, &grid, &ControlLaw::Feedback(sol.law.clone()), n_paths, seed, || {
        QuotientObserver {
            q: &p.state_cost,
            s: &p.cross_cost,
            eta: p.state_linear.as_slice(),
            q_hat: &p.terminal_cost,
            flow_t: &flow_t,
            weights: &weights,
            steps: grid.steps(),
            acc: vec![0.0; n],
            scratch: vec![0.0; n],
        }
    })?;
    let log_weights: Vec<f64> = out.iter().map(|(l, _)| *l).collect();
    let reference = sol.pi.first() * &p.x0 + DVector::from_column_slice(sol.s.first().as_slice());
    let checks = (0..n)
        .map(|k| {
            let values: Vec<f64> = out.iter().map(|(_, y)| y[k]).collect();
            let (ratio, se) = weighted_mean(&log_weights, &values);
            IdentityCheck::new(ratio, se, reference[k])
        })
        .collect();
    Ok((log_weights, checks))
}

/// The three optimality identities evaluated on one shared ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    /// `E[exp(δΛ_T(u*) − C*_T)]` against 1.
    pub normalization: IdentityCheck,
    /// `log J(u*)` against `C*_T`.
    pub optimal_cost: IdentityCheck,
    /// `M₂/M₁` at `t = 0` against `Π(0)x₀ + s(0)`, per component.
    pub quotient: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn max_abs_z(&self) -> f64 {
        self.quotient
            .iter()
            .chain([&self.normalization, &self.optimal_cost])
            .map(|c| math::abs(c.z))
            .fold(0.0, f64::max)
    }
}

/// Runs [`check_normalization`], [`check_optimal_cost`] and
/// [`check_martingale_quotient`] on a single set of paths.
pub fn check_identities(p: &LqgProblem, sol: &RiccatiSolution, n_paths: usize, seed: u64) -> Result<IdentityReport> {
    let (log_weights, quotient) = quotient_paths(p, sol, n_paths, seed)?;
    let est = LogMeanExpEstimate::from_log_values(&log_weights);
    let value = math::exp(est.log_value - sol.c_star);
    Ok(IdentityReport {
        normalization: IdentityCheck::new(value, value * est.std_error, 1.0),
        optimal_cost: IdentityCheck::new(est.log_value, est.std_error, sol.c_star),
        quotient,
    })
}

/// Sample mean and standard error of each state component at the final node.
pub fn terminal_moments(ens: &PathEnsemble) -> (DVector<f64>, DVector<f64>) {
    let n = ens.terminal_states[0].len();
    let count = ens.n_paths() as f64;
    let mut mean = DVector::zeros(n);
    let mut se = DVector::zeros(n);
    for k in 0..n {
        let mut acc = CompensatedSum::new();
        ens.terminal_states.iter().for_each(|x| acc.add(x[k]));
        let mu = acc.value() / count;
        let var = linalg::compensated_sum(ens.terminal_states.iter().map(|x| (x[k] - mu) * (x[k] - mu)))
            / (count - 1.0).max(1.0);
        mean[k] = mu;
        se[k] = math::sqrt(var / count);
    }
    (mean, se)
}

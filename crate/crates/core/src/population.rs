//! Finite-population major-minor game under equilibrium and deviating laws:
//! Monte Carlo costs, ε-Nash gaps and mean-field fluctuation statistics.
//!
//! Finite agents apply the limiting equilibrium laws with the per-type empirical
//! averages substituted for the mean-field coordinates. The limiting mean field
//! `x̄` is co-simulated along each replication (driven by the simulated major
//! state) and stands in for the average of a type with no agents.

use alloc::{format, string::String, vec, vec::Vec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, block, CompensatedSum};
use crate::math;
use crate::mfg::MfgEquilibrium;
use crate::model::MajorMinorSpec;
use crate::montecarlo::{path_rng, Dims, Dynamic, Fixed, LogMeanExpEstimate};
use crate::numerics::{MatrixTrajectory, TimeGrid};
use crate::parallel::map_indexed;
use crate::riccati::FeedbackLaw;
use crate::{Error, Result};

/// Default number of Euler–Maruyama steps of the population grid.
pub const DEFAULT_POPULATION_STEPS: usize = 100;

/// Largest-remainder apportionment of `n` agents to the weights.
///
/// Ties in the remainders go to the lower type index.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Type of every agent for the given counts: agents of type 0 first, then type 1, …
pub fn assignment(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(k, c)| core::iter::repeat_n(k, *c)).collect()
}

/// Participant of the finite game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agent {
    Major,
    /// Minor agent by index `0..N`.
    Minor(usize),
}

/// Role whose Nash gap is assessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentRole {
    Major,
    /// Representative agent of minor type `k` (zero-based).
    MinorType(usize),
}

impl core::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AgentRole::Major => write!(f, "major"),
            AgentRole::MinorType(k) => write!(f, "minor type {}", k + 1),
        }
    }
}

/// One agent applying a law other than its equilibrium law. The law acts on
/// the agent's extended state (`[x⁰; x̄]` for the major agent,
/// `[xⁱ; x⁰; x̄]` for a minor agent) with empirical averages substituted.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub agent: Agent,
    pub law: FeedbackLaw,
}

/// Settings of a finite-population simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationOptions {
    /// Number of minor agents `N`.
    pub agents: usize,
    pub steps: usize,
    pub replications: usize,
    pub seed: u64,
    /// Keep full trajectories of every replication.
    pub record_paths: bool,
    /// Random stream of each minor agent (default `i + 1`; the major agent uses 0).
    pub streams: Option<Vec<u64>>,
}

impl PopulationOptions {
    pub fn new(agents: usize, replications: usize, seed: u64) -> Self {
        Self {
            agents,
            steps: DEFAULT_POPULATION_STEPS,
            replications,
            seed,
            record_paths: false,
            streams: None,
        }
    }
}

/// Trajectories of one replication, node-major with `n` entries per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPaths {
    pub major: Vec<f64>,
    /// `x⁽ᴺ⁾`.
    pub average: Vec<f64>,
    /// Co-simulated `Σₖ πₖ x̄ᵏ`.
    pub mean_field: Vec<f64>,
    /// Minor agent `i` occupies `minors[i]`.
    pub minors: Vec<Vec<f64>>,
}

/// Per-replication statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    /// `δΛ_T` of the major agent followed by every minor agent in index order.
    pub log_costs: Vec<f64>,
    /// Euclidean norm of `x⁽ᴺ⁾_T − x̄_T`.
    pub terminal_gap: f64,
    /// `max_t |x⁽ᴺ⁾_t − x̄_t|`.
    pub max_gap: f64,
    pub paths: Option<PopulationPaths>,
}

/// Ensemble of finite-population replications.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulationRun {
    pub agents: usize,
    /// `Nₖ` per type.
    pub counts: Vec<usize>,
    /// Type of every minor agent.
    pub assignment: Vec<usize>,
    pub grid: TimeGrid,
    pub seed: u64,
    pub replications: Vec<ReplicationSummary>,
}

impl FinitePopulationRun {
    fn cost_index(&self, agent: Agent) -> Result<usize> {
        match agent {
            Agent::Major => Ok(0),
            Agent::Minor(i) if i < self.agents => Ok(i + 1),
            Agent::Minor(i) => Err(Error::InvalidArgument(format!("no minor agent {i}"))),
        }
    }

    /// `δΛ_T` of `agent` across replications.
    pub fn log_costs(&self, agent: Agent) -> Result<Vec<f64>> {
        let idx = self.cost_index(agent)?;
        Ok(self.replications.iter().map(|r| r.log_costs[idx]).collect())
    }

    /// `max_k |Nₖ/N − πₖ|`.
    pub fn apportionment_error(&self, weights: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(weights)
            .map(|(c, w)| math::abs(*c as f64 / self.agents as f64 - w))
            .fold(0.0, f64::max)
    }
}

/// `log E exp(δΛ_T)` of one agent over the replications of a run.
pub fn finite_cost(run: &FinitePopulationRun, agent: Agent) -> Result<LogMeanExpEstimate> {
    Ok(LogMeanExpEstimate::from_log_values(&run.log_costs(agent)?))
}

/// Node-sampled law of one agent split into blocks acting on own state,
/// major state (minor agents only) and the stacked type averages.
#[derive(Clone)]
struct CompiledLaw {
    own: Vec<f64>,
    major: Vec<f64>,
    averages: Vec<f64>,
    offset: Vec<f64>,
}

struct TypeData {
    drift: Vec<f64>,
    population: Vec<f64>,
    major: Vec<f64>,
    input: Vec<f64>,
    offset: Vec<f64>,
    diffusion: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    rc: Vec<f64>,
    q_hat: Vec<f64>,
    major_tracking: Vec<f64>,
    population_tracking: Vec<f64>,
    target: Vec<f64>,
    risk: f64,
    x0: Vec<f64>,
    law: CompiledLaw,
}

struct Setup {
    n: usize,
    m: usize,
    r: usize,
    types: usize,
    grid: TimeGrid,
    h: f64,
    sqrt_h: f64,
    major: TypeData,
    minors: Vec<TypeData>,
    weights: Vec<f64>,
    mf_drift: Vec<f64>,
    mf_coupling: Vec<f64>,
    mf_offset: Vec<f64>,
}

fn resample(tr: &MatrixTrajectory, grid: &TimeGrid) -> Result<MatrixTrajectory> {
    if tr.grid() == grid {
        Ok(tr.clone())
    } else {
        tr.resample(*grid)
    }
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Splits law columns into `[own | major | averages]` with widths `(n, nm, nK)`.
fn compile_law(law: &FeedbackLaw, grid: &TimeGrid, n: usize, major_width: usize, avg_width: usize) -> Result<CompiledLaw> {
    let gain = resample(&law.gain, grid)?;
    let offset = resample(&law.offset, grid)?;
    let m = gain.shape().0;
    if gain.shape().1 != n + major_width + avg_width || offset.shape() != (m, 1) {
        return Err(Error::DimensionMismatch(format!(
            "law has gain shape {:?}, expected {} columns",
            gain.shape(),
            n + major_width + avg_width
        )));
    }
    let mut out = CompiledLaw { own: Vec::new(), major: Vec::new(), averages: Vec::new(), offset: Vec::new() };
    for (g, k) in gain.values().iter().zip(offset.values()) {
        out.own.extend_from_slice(block(g, 0, 0, m, n).as_slice());
        out.major.extend_from_slice(block(g, 0, n, m, major_width).as_slice());
        out.averages.extend_from_slice(block(g, 0, n + major_width, m, avg_width).as_slice());
        out.offset.extend_from_slice(k.as_slice());
    }
    Ok(out)
}

impl Setup {
    fn new(spec: &MajorMinorSpec, eq: &MfgEquilibrium, steps: usize) -> Result<Self> {
        spec.validate()?;
        if !eq.log.converged {
            return Err(Error::NotConverged { iterations: eq.log.iterations(), last_error: eq.log.last_error() });
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("population grid needs at least one step".into()));
        }
        let (n, m, r, types) = (spec.state_dim(), spec.control_dim(), spec.noise_dim(), spec.types());
        if eq.types() != types || eq.state_dim() != n {
            return Err(Error::DimensionMismatch("equilibrium does not match the game".into()));
        }
        let grid = TimeGrid::new(spec.horizon, steps)?;
        let sample = |c: &crate::Coefficient| linalg::flatten(&c.sample(&grid));
        let mj = &spec.major;
        let major = TypeData {
            drift: flat(&mj.drift),
            population: flat(&mj.population_coupling),
            major: Vec::new(),
            input: flat(&mj.input),
            offset: sample(&mj.offset),
            diffusion: sample(&mj.diffusion),
            q: flat(&mj.state_cost),
            s: flat(&mj.cross_cost),
            rc: flat(&mj.control_cost),
            q_hat: flat(&mj.terminal_cost),
            major_tracking: Vec::new(),
            population_tracking: flat(&mj.population_tracking),
            target: mj.target.as_slice().to_vec(),
            risk: mj.risk,
            x0: mj.x0.as_slice().to_vec(),
            law: compile_law(&eq.major.law, &grid, n, 0, n * types)?,
        };
        let minors = spec
            .minors
            .iter()
            .zip(&eq.minors)
            .map(|(mn, sol)| {
                Ok(TypeData {
                    drift: flat(&mn.drift),
                    population: flat(&mn.population_coupling),
                    major: flat(&mn.major_coupling),
                    input: flat(&mn.input),
                    offset: sample(&mn.offset),
                    diffusion: sample(&mn.diffusion),
                    q: flat(&mn.state_cost),
                    s: flat(&mn.cross_cost),
                    rc: flat(&mn.control_cost),
                    q_hat: flat(&mn.terminal_cost),
                    major_tracking: flat(&mn.major_tracking),
                    population_tracking: flat(&mn.population_tracking),
                    target: mn.target.as_slice().to_vec(),
                    risk: mn.risk,
                    x0: mn.x0.as_slice().to_vec(),
                    law: compile_law(&sol.law, &grid, n, n, n * types)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mf = &eq.mean_field;
        Ok(Self {
            n,
            m,
            r,
            types,
            grid,
            h: grid.step(),
            sqrt_h: math::sqrt(grid.step()),
            major,
            minors,
            weights: spec.weights.clone(),
            mf_drift: linalg::flatten(resample(&mf.drift, &grid)?.values()),
            mf_coupling: linalg::flatten(resample(&mf.major_coupling, &grid)?.values()),
            mf_offset: linalg::flatten(resample(&mf.offset, &grid)?.values()),
        })
    }
}

/// `out += M v` with `M` column-major `rows × cols`.
#[inline(always)]
fn mat_vec_acc(out: &mut [f64], mat: &[f64], v: &[f64], rows: usize, cols: usize) {
    let (out, mat, v) = (&mut out[..rows], &mat[..rows * cols], &v[..cols]);
    for j in 0..cols {
        let c = v[j];
        for k in 0..rows {
            out[k] += mat[j * rows + k] * c;
        }
    }
}

#[inline(always)]
fn bilinear(v: &[f64], mat: &[f64], w: &[f64], rows: usize, cols: usize) -> f64 {
    let (v, mat, w) = (&v[..rows], &mat[..rows * cols], &w[..cols]);
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

/// `½(eᵀQe + 2eᵀSu + uᵀRu)`.
#[inline(always)]
fn running_cost(t: &TypeData, e: &[f64], u: &[f64], n: usize, m: usize) -> f64 {
    0.5 * (bilinear(e, &t.q, e, n, n) + 2.0 * bilinear(e, &t.s, u, n, m) + bilinear(u, &t.rc, u, m, m))
}

/// Minor agents grouped by type in ascending stream order.
struct Layout {
    /// Canonical position → agent index.
    order: Vec<usize>,
    /// Canonical range of each type.
    ranges: Vec<(usize, usize)>,
    streams: Vec<u64>,
}

fn layout(assign: &[usize], types: usize, streams: Option<&[u64]>) -> Result<Layout> {
    let streams: Vec<u64> = match streams {
        Some(s) if s.len() == assign.len() => s.to_vec(),
        Some(s) => {
            return Err(Error::DimensionMismatch(format!("{} streams for {} agents", s.len(), assign.len())));
        }
        None => (1..=assign.len() as u64).collect(),
    };
    let mut sorted = streams.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.first() == Some(&0) {
        return Err(Error::InvalidArgument("agent streams must be distinct and nonzero".into()));
    }
    let mut order = Vec::with_capacity(assign.len());
    let mut ranges = Vec::with_capacity(types);
    for k in 0..types {
        let start = order.len();
        let mut members: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == k).collect();
        members.sort_by_key(|&i| streams[i]);
        order.extend(members);
        ranges.push((start, order.len()));
    }
    Ok(Layout { order, ranges, streams })
}

/// Simulates `replications` independent copies of the finite game with `N`
/// minor agents apportioned to the type weights.
pub fn simulate_population(
    spec: &MajorMinorSpec,
    eq: &MfgEquilibrium,
    options: &PopulationOptions,
    deviation: Option<&Override>,
) -> Result<FinitePopulationRun> {
    if options.agents == 0 || options.replications == 0 {
        return Err(Error::InvalidArgument("at least one agent and one replication required".into()));
    }
    let setup = Setup::new(spec, eq, options.steps)?;
    let counts = apportion(options.agents, &spec.weights);
    let assign = assignment(&counts);
    let lay = layout(&assign, setup.types, options.streams.as_deref())?;
    let (n, nk) = (setup.n, setup.n * setup.types);
    // Canonical position of every agent, and the per-position law.
    let mut position = vec![0; options.agents];
    for (pos, &i) in lay.order.iter().enumerate() {
        position[i] = pos;
    }
    let (major_law, minor_override) = match deviation {
        None => (setup.major.law.clone(), None),
        Some(Override { agent: Agent::Major, law }) => (compile_law(law, &setup.grid, n, 0, nk)?, None),
        Some(Override { agent: Agent::Minor(i), law }) => {
            if *i >= options.agents {
                return Err(Error::InvalidArgument(format!("no minor agent {i}")));
            }
            (setup.major.law.clone(), Some((position[*i], compile_law(law, &setup.grid, n, n, nk)?)))
        }
    };
    let ctx = Context {
        setup: &setup,
        lay: &lay,
        assign: &assign,
        major_law: &major_law,
        minor_override: minor_override.as_ref(),
        record: options.record_paths,
    };
    let replications = map_indexed(options.replications, |rep| ctx.run(options.seed, rep as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(FinitePopulationRun {
        agents: options.agents,
        counts,
        assignment: assign,
        grid: setup.grid,
        seed: options.seed,
        replications,
    })
}

struct Context<'a> {
    setup: &'a Setup,
    lay: &'a Layout,
    assign: &'a [usize],
    major_law: &'a CompiledLaw,
    minor_override: Option<&'a (usize, CompiledLaw)>,
    record: bool,
}

impl Context<'_> {
    fn run(&self, seed: u64, rep: u64) -> Result<ReplicationSummary> {
        let su = self.setup;
        match (su.n, su.m, su.r) {
            (1, 1, 1) => self.run_dims(Fixed::<1, 1, 1>, seed, rep),
            (2, 1, 1) => self.run_dims(Fixed::<2, 1, 1>, seed, rep),
            (2, 2, 2) => self.run_dims(Fixed::<2, 2, 2>, seed, rep),
            (n, m, r) => self.run_dims(Dynamic { n, m, r }, seed, rep),
        }
    }

    #[inline(always)]
    fn run_dims<D: Dims>(&self, d: D, seed: u64, rep: u64) -> Result<ReplicationSummary> {
        let su = self.setup;
        let (n, m, r, types) = (d.n(), d.m(), d.r(), su.types);
        let nk = n * types;
        let agents = self.lay.order.len();
        let steps = su.grid.steps();
        let (h, sqrt_h) = (su.h, su.sqrt_h);

        let mut major_rng = path_rng(seed, rep, 0);
        let mut rngs: Vec<ChaCha8Rng> = self.lay.order.iter().map(|&i| path_rng(seed, rep, self.lay.streams[i])).collect();
        let mut x0 = su.major.x0.clone();
        let mut xs = vec![0.0; agents * n];
        for (pos, &i) in self.lay.order.iter().enumerate() {
            xs[pos * n..(pos + 1) * n].copy_from_slice(&su.minors[self.assign[i]].x0);
        }
        let mut xbar: Vec<f64> = su.minors.iter().flat_map(|t| t.x0.iter().copied()).collect();
        let mut averages = vec![0.0; nk];
        let mut overall = vec![0.0; n];
        let mut running = vec![0.0; agents + 1];
        let mut u0 = vec![0.0; m];
        let mut u = vec![0.0; m];
        let mut shared = vec![0.0; m * types];
        let mut e = vec![0.0; n];
        let mut target = vec![0.0; n * types];
        let mut drift = vec![0.0; n];
        let mut xi = vec![0.0; r];
        let mut new_xs = vec![0.0; agents * n];
        let mut mf_overall = vec![0.0; n];
        let mut mf_drift = vec![0.0; nk];
        let mut max_gap: f64 = 0.0;
        let mut paths = self.record.then(|| PopulationPaths {
            major: Vec::with_capacity((steps + 1) * n),
            average: Vec::with_capacity((steps + 1) * n),
            mean_field: Vec::with_capacity((steps + 1) * n),
            minors: vec![Vec::with_capacity((steps + 1) * n); agents],
        });
        let mut terminal_gap = 0.0;

        for i in 0..=steps {
            // Empirical averages per type; empty types fall back to x̄ᵏ.
            for v in overall.iter_mut() {
                *v = 0.0;
            }
            for (k, &(start, end)) in self.lay.ranges.iter().enumerate() {
                let avg = &mut averages[k * n..(k + 1) * n];
                if start == end {
                    avg.copy_from_slice(&xbar[k * n..(k + 1) * n]);
                    continue;
                }
                for c in 0..n {
                    let mut sum = CompensatedSum::default();
                    for pos in start..end {
                        sum.add(xs[pos * n + c]);
                    }
                    let total = sum.value();
                    overall[c] += total;
                    avg[c] = total / (end - start) as f64;
                }
            }
            for v in overall.iter_mut() {
                *v /= agents as f64;
            }
            let mut gap = 0.0;
            for v in mf_overall.iter_mut() {
                *v = 0.0;
            }
            for k in 0..types {
                for c in 0..n {
                    mf_overall[c] += su.weights[k] * xbar[k * n + c];
                }
            }
            for c in 0..n {
                gap += (overall[c] - mf_overall[c]) * (overall[c] - mf_overall[c]);
            }
            let gap = math::sqrt(gap);
            max_gap = max_gap.max(gap);
            if i == steps {
                terminal_gap = gap;
            }
            if let Some(p) = paths.as_mut() {
                p.major.extend_from_slice(&x0);
                p.average.extend_from_slice(&overall);
                p.mean_field.extend_from_slice(&mf_overall);
                for (pos, &idx) in self.lay.order.iter().enumerate() {
                    p.minors[idx].extend_from_slice(&xs[pos * n..(pos + 1) * n]);
                }
            }

            // Major control and cost.
            let law = self.major_law;
            u0.copy_from_slice(&law.offset[i * m..(i + 1) * m]);
            mat_vec_acc(&mut u0, &law.own[i * m * n..], &x0, m, n);
            mat_vec_acc(&mut u0, &law.averages[i * m * nk..], &averages, m, nk);
            let weight = if i == 0 || i == steps { 0.5 * h } else { h };
            let mj = &su.major;
            e[..n].copy_from_slice(&mj.target[..n]);
            mat_vec_acc(&mut e, &mj.population_tracking, &overall, n, n);
            for c in 0..n {
                e[c] = x0[c] - e[c];
            }
            running[0] += weight * running_cost(mj, &e, &u0, n, m);
            if i == steps {
                running[0] += 0.5 * bilinear(&e, &mj.q_hat, &e, n, n);
            }

            // Shared parts of minor controls and tracking targets.
            for (k, t) in su.minors.iter().enumerate() {
                let sh = &mut shared[k * m..(k + 1) * m];
                sh.copy_from_slice(&t.law.offset[i * m..(i + 1) * m]);
                mat_vec_acc(sh, &t.law.major[i * m * n..], &x0, m, n);
                mat_vec_acc(sh, &t.law.averages[i * m * nk..], &averages, m, nk);
                let tg = &mut target[k * n..(k + 1) * n];
                tg.copy_from_slice(&t.target);
                mat_vec_acc(tg, &t.major_tracking, &x0, n, n);
                mat_vec_acc(tg, &t.population_tracking, &overall, n, n);
            }

            for (k, &(start, end)) in self.lay.ranges.iter().enumerate() {
                let t = &su.minors[k];
                for pos in start..end {
                    let x = &xs[pos * n..(pos + 1) * n];
                    match self.minor_override {
                        Some((p, law)) if *p == pos => {
                            u.copy_from_slice(&law.offset[i * m..(i + 1) * m]);
                            mat_vec_acc(&mut u, &law.major[i * m * n..], &x0, m, n);
                            mat_vec_acc(&mut u, &law.averages[i * m * nk..], &averages, m, nk);
                            mat_vec_acc(&mut u, &law.own[i * m * n..], x, m, n);
                        }
                        _ => {
                            u.copy_from_slice(&shared[k * m..(k + 1) * m]);
                            mat_vec_acc(&mut u, &t.law.own[i * m * n..], x, m, n);
                        }
                    }
                    for c in 0..n {
                        e[c] = x[c] - target[k * n + c];
                    }
                    let idx = self.lay.order[pos] + 1;
                    running[idx] += weight * running_cost(t, &e, &u, n, m);
                    if i == steps {
                        running[idx] += 0.5 * bilinear(&e, &t.q_hat, &e, n, n);
                        continue;
                    }
                    drift[..n].copy_from_slice(&t.offset[i * n..(i + 1) * n]);
                    mat_vec_acc(&mut drift, &t.drift, x, n, n);
                    mat_vec_acc(&mut drift, &t.population, &overall, n, n);
                    mat_vec_acc(&mut drift, &t.major, &x0, n, n);
                    mat_vec_acc(&mut drift, &t.input, &u, n, m);
                    let next = &mut new_xs[pos * n..(pos + 1) * n];
                    for c in 0..n {
                        next[c] = x[c] + h * drift[c];
                    }
                    for v in xi.iter_mut() {
                        *v = rngs[pos].sample(StandardNormal);
                    }
                    for v in xi.iter_mut() {
                        *v *= sqrt_h;
                    }
                    mat_vec_acc(next, &t.diffusion[i * n * r..], &xi, n, r);
                }
            }
            if i == steps {
                break;
            }

            // Limiting mean field driven by the current major state.
            mf_drift.copy_from_slice(&su.mf_offset[i * nk..(i + 1) * nk]);
            mat_vec_acc(&mut mf_drift, &su.mf_drift[i * nk * nk..], &xbar, nk, nk);
            mat_vec_acc(&mut mf_drift, &su.mf_coupling[i * nk * n..], &x0, nk, n);
            for c in 0..nk {
                xbar[c] += h * mf_drift[c];
            }

            drift[..n].copy_from_slice(&mj.offset[i * n..(i + 1) * n]);
            mat_vec_acc(&mut drift, &mj.drift, &x0, n, n);
            mat_vec_acc(&mut drift, &mj.population, &overall, n, n);
            mat_vec_acc(&mut drift, &mj.input, &u0, n, m);
            for c in 0..n {
                x0[c] += h * drift[c];
            }
            for v in xi.iter_mut() {
                *v = major_rng.sample(StandardNormal);
            }
            for v in xi.iter_mut() {
                *v *= sqrt_h;
            }
            mat_vec_acc(&mut x0, &mj.diffusion[i * n * r..], &xi, n, r);
            core::mem::swap(&mut xs, &mut new_xs);
            if !x0.iter().chain(xs.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { t: su.grid.node(i + 1) });
            }
        }
        let mut log_costs = vec![0.0; agents + 1];
        log_costs[0] = su.major.risk * running[0];
        for (idx, &k) in self.assign.iter().enumerate() {
            log_costs[idx + 1] = su.minors[k].risk * running[idx + 1];
        }
        if !log_costs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t: su.grid.t_end() });
        }
        Ok(ReplicationSummary { log_costs, terminal_gap, max_gap, paths })
    }
}

/// Named alternative law of the deviating agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub label: String,
    pub law: FeedbackLaw,
}

/// Gain scalings, offset shifts and a time-shifted gain of an equilibrium law.
pub fn deviation_family(base: &FeedbackLaw, gain_factors: &[f64], offset_shifts: &[f64], lags: &[f64]) -> Vec<Deviation> {
    let mut out = Vec::new();
    for g in gain_factors {
        out.push(Deviation { label: format!("gain x{g}"), law: base.scale_gain(*g) });
    }
    for s in offset_shifts {
        out.push(Deviation { label: format!("offset {s:+}"), law: base.shift_offset(*s) });
    }
    for l in lags {
        out.push(Deviation { label: format!("gain lag {l}"), law: base.time_shift_gain(*l) });
    }
    out
}

/// Gains {0.8, 0.9, 1.1, 1.2}, offsets ±0.1 and a gain lagged by a tenth of the horizon.
pub fn default_deviation_family(base: &FeedbackLaw) -> Vec<Deviation> {
    let lag = 0.1 * base.grid().t_end();
    deviation_family(base, &[0.8, 0.9, 1.1, 1.2], &[-0.1, 0.1], &[lag])
}

/// `log Ĵ_a − log Ĵ_b` from paired samples with its delta-method standard error.
pub fn paired_log_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let ea = LogMeanExpEstimate::from_log_values(a);
    let eb = LogMeanExpEstimate::from_log_values(b);
    let n = a.len();
    if n < 2 {
        return (ea.log_value - eb.log_value, 0.0);
    }
    let infl: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| math::exp(x - ea.log_value) - math::exp(y - eb.log_value))
        .collect();
    let mean = linalg::compensated_sum(infl.iter().copied()) / n as f64;
    let var = linalg::compensated_sum(infl.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
    (ea.log_value - eb.log_value, math::sqrt(var / n as f64))
}

/// Cost of one deviation relative to the equilibrium law.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationOutcome {
    pub label: String,
    pub cost: LogMeanExpEstimate,
    /// `log J_eq − log J_dev`.
    pub improvement: f64,
    pub improvement_std_error: f64,
}

/// Empirical ε-Nash gap of one role at one population size.
#[derive(Debug, Clone, PartialEq)]
pub struct NashGapReport {
    pub role: AgentRole,
    pub agents: usize,
    pub equilibrium: LogMeanExpEstimate,
    pub best_deviation: LogMeanExpEstimate,
    pub best_label: String,
    /// `max(0, log J_eq − min log J_dev)`.
    pub gap: f64,
    /// Paired standard error of the best deviation's improvement.
    pub gap_std_error: f64,
    pub deviations: Vec<DeviationOutcome>,
}

/// Estimates the gain available to `role` from the deviation family, with every
/// law evaluated on the same random numbers.
pub fn nash_gap(
    spec: &MajorMinorSpec,
    eq: &MfgEquilibrium,
    role: AgentRole,
    deviations: &[Deviation],
    options: &PopulationOptions,
) -> Result<NashGapReport> {
    if deviations.is_empty() {
        return Err(Error::InvalidArgument("empty deviation family".into()));
    }
    let agent = match role {
        AgentRole::Major => Agent::Major,
        AgentRole::MinorType(k) => {
            let counts = apportion(options.agents, &spec.weights);
            if k >= counts.len() || counts[k] == 0 {
                return Err(Error::InvalidArgument(format!("no agent of {role} among {} agents", options.agents)));
            }
            Agent::Minor(counts[..k].iter().sum())
        }
    };
    let opts = PopulationOptions { record_paths: false, ..options.clone() };
    let base = simulate_population(spec, eq, &opts, None)?.log_costs(agent)?;
    let equilibrium = LogMeanExpEstimate::from_log_values(&base);
    let mut outcomes = Vec::with_capacity(deviations.len());
    for dev in deviations {
        let ov = Override { agent, law: dev.law.clone() };
        let costs = simulate_population(spec, eq, &opts, Some(&ov))?.log_costs(agent)?;
        let (improvement, se) = paired_log_difference(&base, &costs);
        outcomes.push(DeviationOutcome {
            label: dev.label.clone(),
            cost: LogMeanExpEstimate::from_log_values(&costs),
            improvement,
            improvement_std_error: se,
        });
    }
    let best = outcomes
        .iter()
        .min_by(|a, b| a.cost.log_value.partial_cmp(&b.cost.log_value).unwrap_or(core::cmp::Ordering::Equal))
        .expect("nonempty family");
    Ok(NashGapReport {
        role,
        agents: options.agents,
        equilibrium,
        best_deviation: best.cost,
        best_label: best.label.clone(),
        gap: best.improvement.max(0.0),
        gap_std_error: best.improvement_std_error,
        deviations: outcomes.clone(),
    })
}

/// Whether gaps ordered by increasing `N` never rise by more than three pooled
/// standard errors between consecutive sizes.
pub fn gap_trend_nonincreasing(reports: &[NashGapReport]) -> bool {
    reports.windows(2).all(|w| {
        let pooled = math::sqrt(w[0].gap_std_error * w[0].gap_std_error + w[1].gap_std_error * w[1].gap_std_error);
        w[1].gap <= w[0].gap + 3.0 * pooled
    })
}

/// Mean distance between the empirical average and the limiting mean field.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationReport {
    pub agents: Vec<usize>,
    /// `E|x⁽ᴺ⁾_T − x̄_T|` per `N`.
    pub terminal_mean: Vec<f64>,
    pub terminal_std_error: Vec<f64>,
    /// `E max_t |x⁽ᴺ⁾_t − x̄_t|` per `N`.
    pub max_mean: Vec<f64>,
    /// Least-squares slope of `log E|x⁽ᴺ⁾_T − x̄_T|` against `log N`.
    pub slope: f64,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = linalg::compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = linalg::compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, math::sqrt(var / n))
}

/// Least-squares slope of `y` on `x`.
pub fn fitted_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Fluctuation statistics of `x⁽ᴺ⁾` around the co-simulated mean field over a schedule of `N`.
pub fn fluctuation_scaling(
    spec: &MajorMinorSpec,
    eq: &MfgEquilibrium,
    schedule: &[usize],
    options: &PopulationOptions,
) -> Result<FluctuationReport> {
    if schedule.len() < 2 {
        return Err(Error::InvalidArgument("need at least two population sizes".into()));
    }
    let mut report = FluctuationReport {
        agents: schedule.to_vec(),
        terminal_mean: Vec::new(),
        terminal_std_error: Vec::new(),
        max_mean: Vec::new(),
        slope: 0.0,
    };
    for &n in schedule {
        let opts = PopulationOptions { agents: n, record_paths: false, ..options.clone() };
        let run = simulate_population(spec, eq, &opts, None)?;
        let terminal: Vec<f64> = run.replications.iter().map(|r| r.terminal_gap).collect();
        let maxima: Vec<f64> = run.replications.iter().map(|r| r.max_gap).collect();
        let (mean, se) = mean_and_se(&terminal);
        report.terminal_mean.push(mean);
        report.terminal_std_error.push(se);
        report.max_mean.push(mean_and_se(&maxima).0);
    }
    let lx: Vec<f64> = schedule.iter().map(|n| math::ln(*n as f64)).collect();
    let ly: Vec<f64> = report.terminal_mean.iter().map(|v| math::ln(*v)).collect();
    report.slope = fitted_slope(&lx, &ly);
    Ok(report)
}

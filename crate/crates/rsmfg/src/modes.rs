use rsmfg_core::mfg::{
    fixed_point_residual, major_mean_trajectory, solve_consistency_logged, FixedPointOptions, IterationLog,
    MfgEquilibrium,
};
use rsmfg_core::montecarlo::check_identities;
use rsmfg_core::population::{
    apportion, default_deviation_family, finite_cost, fitted_slope, gap_trend_nonincreasing, nash_gap, simulate_population,
    Agent, AgentRole, NashGapReport, PopulationOptions,
};
use rsmfg_core::riccati::{self, RiccatiSolution};
use rsmfg_core::{presets, DMatrix, Error as CoreError, LqgProblem, MajorMinorSpec, TimeGrid};

use crate::config::{ExperimentConfig, Mode, Model};
use crate::error::CliError;
use crate::output::{num, Bundle, Table};

/// A failed run, with whatever output was produced before the failure.
#[derive(Debug)]
pub struct Failure {
    pub error: CliError,
    pub partial: Option<Bundle>,
}

impl From<CliError> for Failure {
    fn from(error: CliError) -> Self {
        Failure { error, partial: None }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        CliError::from(e).into()
    }
}

pub type RunResult = Result<Bundle, Failure>;

pub fn run(mode: Mode, cfg: &ExperimentConfig) -> RunResult {
    cfg.check_mode(mode)?;
    match mode {
        Mode::SolveSingle => solve_single(cfg),
        Mode::VerifySingle => verify_single(cfg),
        Mode::SolveMfg => solve_mfg(cfg),
        Mode::SimulatePopulation => simulate(cfg),
        Mode::NashGap => gaps(cfg),
        Mode::ReproducePaper => reproduce(cfg),
    }
}

fn single(cfg: &ExperimentConfig) -> &LqgProblem {
    match &cfg.model {
        Some(Model::Single(p)) => p,
        _ => unreachable!("checked by check_mode"),
    }
}

fn game(cfg: &ExperimentConfig) -> MajorMinorSpec {
    match &cfg.model {
        Some(Model::Game(g)) => g.clone(),
        _ => presets::coupled_scalar_game(),
    }
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    cfg.montecarlo.seed.expect("checked by check_mode")
}

fn push_solution(tables: &mut [Table; 4], entity: &str, sol: &RiccatiSolution) {
    tables[0].push_trajectory(entity, "", &sol.pi);
    tables[1].push_trajectory(entity, "", &sol.s);
    tables[2].push_trajectory(entity, "", &sol.law.gain);
    tables[3].push_trajectory(entity, "", &sol.law.offset);
}

fn solution_tables() -> [Table; 4] {
    ["riccati.csv", "offset.csv", "gain.csv", "feedforward.csv"].map(Table::trajectories)
}

fn solve_single(cfg: &ExperimentConfig) -> RunResult {
    let p = single(cfg);
    let grid = TimeGrid::new(p.horizon, cfg.steps)?;
    let sol = riccati::solve(p, &grid)?;
    let mut tables = solution_tables();
    push_solution(&mut tables, "agent", &sol);
    let mut b = Bundle { tables: tables.into(), ..Default::default() };
    b.note("optimal_log_cost", sol.c_star);
    b.note("steps", cfg.steps);
    Ok(b)
}

fn verify_single(cfg: &ExperimentConfig) -> RunResult {
    let p = single(cfg);
    let grid = TimeGrid::new(p.horizon, cfg.steps)?;
    let sol = riccati::solve(p, &grid)?;
    let report = check_identities(p, &sol, cfg.montecarlo.n_paths, seed(cfg))?;
    let mut t = Table::new("identities.csv", &["identity", "estimate", "std_error", "reference", "z"]);
    let mut checks = vec![("normalization".to_string(), &report.normalization), ("optimal_cost".to_string(), &report.optimal_cost)];
    checks.extend(report.quotient.iter().enumerate().map(|(i, c)| (format!("quotient_{}", i + 1), c)));
    for (name, c) in checks {
        t.push(vec![name, num(c.estimate), num(c.std_error), num(c.reference), num(c.z)]);
    }
    let mut b = Bundle { tables: vec![t], ..Default::default() };
    b.note("max_abs_z", report.max_abs_z());
    b.note("within_three_std_errors", report.max_abs_z() <= 3.0);
    b.note("n_paths", cfg.montecarlo.n_paths);
    b.note("optimal_log_cost", sol.c_star);
    Ok(b)
}

fn convergence_table(log: &IterationLog) -> Table {
    let mut t = Table::new("convergence.csv", &["iteration", "drift_error", "offset_error"]);
    for (j, (e, o)) in log.errors.iter().zip(&log.offset_errors).enumerate() {
        t.push(vec![(j + 1).to_string(), num(*e), num(*o)]);
    }
    t
}

fn not_converged(log: &IterationLog, partial: Bundle) -> Failure {
    Failure {
        error: CoreError::NotConverged { iterations: log.iterations(), last_error: log.last_error() }.into(),
        partial: Some(partial),
    }
}

/// Solves the consistency equations; on failure the partial bundle holds the log.
fn equilibrium(spec: &MajorMinorSpec, cfg: &ExperimentConfig) -> Result<(MfgEquilibrium, Table), Failure> {
    let grid = TimeGrid::new(spec.horizon, cfg.steps)?;
    let (eq, log) = solve_consistency_logged(spec, &grid, &cfg.fixedpoint)?;
    let table = convergence_table(&log);
    match eq {
        Some(eq) => Ok((eq, table)),
        None => Err(not_converged(&log, Bundle { tables: vec![table], ..Default::default() })),
    }
}

fn solve_mfg(cfg: &ExperimentConfig) -> RunResult {
    let spec = game(cfg);
    let (eq, convergence) = equilibrium(&spec, cfg)?;
    let mut mf = Table::trajectories("mean_field.csv");
    mf.push_trajectory("drift", "", &eq.mean_field.drift);
    mf.push_trajectory("major_coupling", "", &eq.mean_field.major_coupling);
    mf.push_trajectory("offset", "", &eq.mean_field.offset);
    let mut tables = solution_tables();
    push_solution(&mut tables, "major", &eq.major);
    for (k, sol) in eq.minors.iter().enumerate() {
        push_solution(&mut tables, &format!("minor_type_{}", k + 1), sol);
    }
    let n = spec.state_dim();
    let mean = major_mean_trajectory(&eq)?;
    let mut states = Table::trajectories("mean_state.csv");
    for (i, x) in mean.values().iter().enumerate() {
        let t = eq.grid.node(i);
        states.push_matrix(t, "major", "", &x.rows(0, n).into_owned());
        for k in 0..spec.types() {
            states.push_matrix(t, &format!("mean_field_type_{}", k + 1), "", &x.rows(n * (k + 1), n).into_owned());
        }
    }
    let (drift_res, offset_res) = fixed_point_residual(&spec, &eq)?;
    let mut b = Bundle { tables: vec![convergence, mf], ..Default::default() };
    b.tables.extend(tables);
    b.tables.push(states);
    b.note("iterations", eq.log.iterations());
    b.note("final_error", eq.log.last_error());
    b.note("fixed_point_residual", drift_res.max(offset_res));
    b.note("major_optimal_log_cost", eq.major.c_star);
    b.note("minor_optimal_log_costs", eq.minors.iter().map(|s| s.c_star).collect::<Vec<_>>());
    Ok(b)
}

fn population_options(cfg: &ExperimentConfig, agents: usize) -> PopulationOptions {
    let mut o = PopulationOptions::new(agents, cfg.montecarlo.replications, seed(cfg));
    o.steps = cfg.montecarlo.steps;
    o
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fluctuation_header() -> Table {
    Table::new("fluctuation.csv", &["agents", "terminal_mean", "terminal_std_error", "max_mean"])
}

fn simulate(cfg: &ExperimentConfig) -> RunResult {
    let spec = game(cfg);
    let (eq, convergence) = equilibrium(&spec, cfg)?;
    let n = spec.state_dim();
    let mut costs = Table::new("costs.csv", &["agents", "entity", "log_cost", "std_error"]);
    let mut fluct = fluctuation_header();
    let mut paths = Table::trajectories("paths.csv");
    let mut terminal_means = Vec::new();
    for &agents in &cfg.montecarlo.agents {
        let opts = population_options(cfg, agents);
        let run = simulate_population(&spec, &eq, &opts, None)?;
        let major = finite_cost(&run, Agent::Major)?;
        costs.push(vec![agents.to_string(), "major".into(), num(major.log_value), num(major.std_error)]);
        let mut first = 0;
        for (k, &count) in run.counts.iter().enumerate() {
            if count > 0 {
                let c = finite_cost(&run, Agent::Minor(first))?;
                costs.push(vec![agents.to_string(), format!("minor_type_{}", k + 1), num(c.log_value), num(c.std_error)]);
            }
            first += count;
        }
        let terminal: Vec<f64> = run.replications.iter().map(|r| r.terminal_gap).collect();
        let maxima: Vec<f64> = run.replications.iter().map(|r| r.max_gap).collect();
        let (tm, tse) = mean_and_se(&terminal);
        terminal_means.push(tm);
        fluct.push(vec![agents.to_string(), num(tm), num(tse), num(mean_and_se(&maxima).0)]);

        let sample = simulate_population(&spec, &eq, &PopulationOptions { replications: 1, record_paths: true, ..opts }, None)?;
        let p = sample.replications[0].paths.as_ref().expect("recorded");
        for i in 0..sample.grid.len() {
            let t = sample.grid.node(i);
            let at = |v: &[f64]| DMatrix::from_column_slice(n, 1, &v[i * n..(i + 1) * n]);
            paths.push_matrix(t, &format!("n{agents}_major"), "", &at(&p.major));
            paths.push_matrix(t, &format!("n{agents}_average"), "", &at(&p.average));
            paths.push_matrix(t, &format!("n{agents}_mean_field"), "", &at(&p.mean_field));
        }
    }
    let mut b = Bundle { tables: vec![convergence, costs, fluct, paths], ..Default::default() };
    if terminal_means.len() >= 2 {
        let lx: Vec<f64> = cfg.montecarlo.agents.iter().map(|n| (*n as f64).ln()).collect();
        let ly: Vec<f64> = terminal_means.iter().map(|v| v.ln()).collect();
        b.note("fluctuation_slope", fitted_slope(&lx, &ly));
    }
    b.note("replications", cfg.montecarlo.replications);
    b.note(
        "counts",
        cfg.montecarlo.agents.iter().map(|&a| apportion(a, &spec.weights)).collect::<Vec<_>>(),
    );
    Ok(b)
}

fn gaps(cfg: &ExperimentConfig) -> RunResult {
    let spec = game(cfg);
    let (eq, convergence) = equilibrium(&spec, cfg)?;
    let mut gap_table = Table::new(
        "gaps.csv",
        &[
            "role",
            "agents",
            "equilibrium_log_cost",
            "equilibrium_std_error",
            "best_deviation",
            "best_log_cost",
            "gap",
            "gap_std_error",
        ],
    );
    let mut dev_table = Table::new(
        "deviations.csv",
        &["role", "agents", "deviation", "log_cost", "std_error", "improvement", "improvement_std_error"],
    );
    let mut roles = vec![(AgentRole::Major, &eq.major.law)];
    roles.extend(eq.minors.iter().enumerate().map(|(k, s)| (AgentRole::MinorType(k), &s.law)));
    let mut b = Bundle::default();
    let mut trends = serde_json::Map::new();
    for (role, law) in roles {
        let family = default_deviation_family(law);
        let mut reports: Vec<NashGapReport> = Vec::new();
        for &agents in &cfg.montecarlo.agents {
            if let AgentRole::MinorType(k) = role {
                if apportion(agents, &spec.weights)[k] == 0 {
                    continue;
                }
            }
            let r = nash_gap(&spec, &eq, role, &family, &population_options(cfg, agents))?;
            let name = role.to_string().replace(' ', "_");
            gap_table.push(vec![
                name.clone(),
                agents.to_string(),
                num(r.equilibrium.log_value),
                num(r.equilibrium.std_error),
                r.best_label.clone(),
                num(r.best_deviation.log_value),
                num(r.gap),
                num(r.gap_std_error),
            ]);
            for d in &r.deviations {
                dev_table.push(vec![
                    name.clone(),
                    agents.to_string(),
                    d.label.clone(),
                    num(d.cost.log_value),
                    num(d.cost.std_error),
                    num(d.improvement),
                    num(d.improvement_std_error),
                ]);
            }
            reports.push(r);
        }
        trends.insert(role.to_string().replace(' ', "_"), gap_trend_nonincreasing(&reports).into());
    }
    let mut fluct = fluctuation_header();
    if cfg.montecarlo.agents.len() >= 2 {
        let report = rsmfg_core::population::fluctuation_scaling(
            &spec,
            &eq,
            &cfg.montecarlo.agents,
            &population_options(cfg, 0),
        )?;
        for (i, a) in report.agents.iter().enumerate() {
            fluct.push(vec![
                a.to_string(),
                num(report.terminal_mean[i]),
                num(report.terminal_std_error[i]),
                num(report.max_mean[i]),
            ]);
        }
        b.note("fluctuation_slope", report.slope);
    }
    b.tables = vec![convergence, gap_table, dev_table, fluct];
    b.note("gap_trend_nonincreasing", serde_json::Value::Object(trends));
    b.note("replications", cfg.montecarlo.replications);
    Ok(b)
}

/// Runs the consistency iteration for a fixed number of sweeps (default 10)
/// and records every iterate.
fn reproduce(cfg: &ExperimentConfig) -> RunResult {
    let spec = game(cfg);
    let grid = TimeGrid::new(spec.horizon, cfg.steps)?;
    let sweeps = if cfg.max_iter_set { cfg.fixedpoint.max_iter } else { 10 };
    let opts = FixedPointOptions { tol: f64::MIN_POSITIVE, max_iter: sweeps, record_history: true, ..cfg.fixedpoint };
    let (_, log) = solve_consistency_logged(&spec, &grid, &opts)?;
    let mut iterates = Table::trajectories("iterates.csv");
    for (j, it) in log.history.iter().enumerate() {
        let entity = format!("iteration_{j}");
        iterates.push_trajectory(&entity, "drift_", &it.drift);
        iterates.push_trajectory(&entity, "major_coupling_", &it.major_coupling);
        iterates.push_trajectory(&entity, "offset_", &it.offset);
    }
    let mut b = Bundle { tables: vec![convergence_table(&log), iterates], ..Default::default() };
    let decreasing = log.errors.get(1..).is_some_and(|e| e.windows(2).all(|w| w[1] < w[0]));
    let tol = cfg.fixedpoint.tol;
    b.note("iterations", log.iterations());
    b.note("final_error", log.last_error());
    b.note("tolerance", tol);
    b.note("decreasing_after_iteration_2", decreasing);
    if log.last_error() < tol {
        Ok(b)
    } else {
        Err(not_converged(&log, b))
    }
}

use rsmfg_core::linalg::max_abs_diff;
use rsmfg_core::mfg::{
    major_mean_trajectory, mean_field_trajectory, solve_consistency, solve_consistency_logged, FixedPointOptions,
    MfgEquilibrium,
};
use rsmfg_core::montecarlo::{simulate, ControlLaw, LogMeanExpEstimate};
use rsmfg_core::numerics::{integrate_ode, Direction};
use rsmfg_core::population::{
    default_deviation_family, finite_cost, fluctuation_scaling, paired_log_difference, simulate_population, Agent,
    PopulationOptions,
};
use rsmfg_core::presets::coupled_scalar_game;
use rsmfg_core::{DMatrix, MajorMinorSpec, MatrixTrajectory, TimeGrid};

fn noiseless(mut spec: MajorMinorSpec) -> MajorMinorSpec {
    spec.major.diffusion = DMatrix::zeros(1, 1).into();
    spec.minors[0].diffusion = DMatrix::zeros(1, 1).into();
    spec
}

fn solve_on(spec: &MajorMinorSpec, steps: usize) -> MfgEquilibrium {
    let grid = TimeGrid::new(spec.horizon, steps).unwrap();
    solve_consistency(spec, &grid, &FixedPointOptions::default()).unwrap()
}

#[test]
fn coupled_game_error_decays_monotonically() {
    let spec = coupled_scalar_game();
    let grid = TimeGrid::new(1.0, 2000).unwrap();
    let opts = FixedPointOptions { tol: 1e-300, max_iter: 10, record_history: true, ..Default::default() };
    let (eq, log) = solve_consistency_logged(&spec, &grid, &opts).unwrap();
    assert!(eq.is_none());
    assert_eq!(log.errors.len(), 10);
    assert!(log.errors[1..].windows(2).all(|w| w[1] < w[0]), "{:?}", log.errors);
    assert!(log.errors[9] < 1e-10);
}

#[test]
fn risk_neutral_limit_matches_noiseless_game() {
    let mut spec = coupled_scalar_game();
    spec.major.risk = 1e-8;
    spec.minors[0].risk = 1e-8;
    spec.minors[0].target = rsmfg_core::DVector::from_element(1, 0.3);
    let nearly_neutral = solve_on(&spec, 1000);
    // Without noise the risk terms drop out of every Riccati equation.
    let neutral = solve_on(&noiseless(spec), 1000);
    for (a, b) in [(&nearly_neutral.major, &neutral.major), (&nearly_neutral.minors[0], &neutral.minors[0])] {
        assert!(a.pi.sup_diff(&b.pi) < 1e-6);
        assert!(a.s.sup_diff(&b.s) < 1e-6);
    }
    assert!(nearly_neutral.mean_field.drift.sup_diff(&neutral.mean_field.drift) < 1e-6);
}

fn noiseless_average(spec: &MajorMinorSpec, eq: &MfgEquilibrium, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let mut opts = PopulationOptions::new(3, 1, 0);
    opts.steps = steps;
    opts.record_paths = true;
    let run = simulate_population(spec, eq, &opts, None).unwrap();
    let paths = run.replications[0].paths.clone().unwrap();
    (paths.average, paths.major)
}

#[test]
fn noiseless_population_tracks_the_mean_field() {
    let spec = noiseless(coupled_scalar_game());
    let eq = solve_on(&spec, 2000);
    let (coarse, _) = noiseless_average(&spec, &eq, 2000);
    let (fine, _) = noiseless_average(&spec, &eq, 4000);
    let major = major_mean_trajectory(&eq).unwrap();
    let major_state = major.map(|_, x| x.rows(0, 1).into_owned()).unwrap();
    let xbar = mean_field_trajectory(&eq, &major_state).unwrap();
    for i in (0..=2000).step_by(100) {
        let extrapolated = 2.0 * fine[2 * i] - coarse[i];
        assert!((extrapolated - xbar.at_node(i)[(0, 0)]).abs() < 1e-4, "node {i}");
        let d = (major.at_node(i)[(1, 0)] - xbar.at_node(i)[(0, 0)]).abs();
        assert!(d < 1e-6, "{d}");
    }
}

#[test]
fn noiseless_finite_cost_matches_quadrature() {
    let spec = noiseless(coupled_scalar_game());
    let eq = solve_on(&spec, 2000);
    let cost = |steps: usize| {
        let mut opts = PopulationOptions::new(1, 1, 0);
        opts.steps = steps;
        let run = simulate_population(&spec, &eq, &opts, None).unwrap();
        (finite_cost(&run, Agent::Major).unwrap().log_value, finite_cost(&run, Agent::Minor(0)).unwrap().log_value)
    };
    let (c1, c2) = (cost(8000), cost(16000));
    let extrapolated = (2.0 * c2.0 - c1.0, 2.0 * c2.1 - c1.1);

    // One minor agent: the average is its state. State [x⁰, x¹, Λ⁰, Λ¹].
    let (mj, mn) = (&spec.major, &spec.minors[0]);
    let (k0, k1) = (&eq.major.law, &eq.minors[0].law);
    let s = |m: &DMatrix<f64>| m[(0, 0)];
    let start = DMatrix::from_column_slice(4, 1, &[mj.x0[0], mn.x0[0], 0.0, 0.0]);
    let path = integrate_ode(
        |t, y| {
            let (x0, x1) = (y[(0, 0)], y[(1, 0)]);
            let g0 = k0.gain.interpolate(t).unwrap();
            let u0 = g0[(0, 0)] * x0 + g0[(0, 1)] * x1 + s(&k0.offset.interpolate(t).unwrap());
            let g1 = k1.gain.interpolate(t).unwrap();
            let u1 = g1[(0, 0)] * x1 + g1[(0, 1)] * x0 + g1[(0, 2)] * x1 + s(&k1.offset.interpolate(t).unwrap());
            let e0 = x0 - s(&mj.population_tracking) * x1;
            let e1 = x1 - s(&mn.major_tracking) * x0 - s(&mn.population_tracking) * x1;
            DMatrix::from_column_slice(
                4,
                1,
                &[
                    s(&mj.drift) * x0 + s(&mj.population_coupling) * x1 + s(&mj.input) * u0,
                    s(&mn.drift) * x1 + s(&mn.population_coupling) * x1 + s(&mn.major_coupling) * x0 + s(&mn.input) * u1,
                    0.5 * (s(&mj.state_cost) * e0 * e0 + s(&mj.control_cost) * u0 * u0),
                    0.5 * (s(&mn.state_cost) * e1 * e1 + s(&mn.control_cost) * u1 * u1),
                ],
            )
        },
        &start,
        &TimeGrid::new(1.0, 16000).unwrap(),
        Direction::Forward,
    )
    .unwrap();
    let end = path.last();
    assert!((extrapolated.0 - mj.risk * end[(2, 0)]).abs() < 1e-6, "{} vs {}", extrapolated.0, mj.risk * end[(2, 0)]);
    assert!((extrapolated.1 - mn.risk * end[(3, 0)]).abs() < 1e-6, "{} vs {}", extrapolated.1, mn.risk * end[(3, 0)]);
}

#[test]
fn mean_field_with_constant_coefficients_matches_closed_form() {
    let mut spec = coupled_scalar_game();
    spec.minors[0].state_cost.fill(0.0);
    let eq = solve_on(&spec, 2000);
    let (a, g) = (-2.5, 2.5);
    assert!(eq.mean_field.drift.values().iter().all(|m| m[(0, 0)] == a));
    let major = MatrixTrajectory::from_fn(eq.grid, |t| DMatrix::from_element(1, 1, 1.0 + 0.5 * t)).unwrap();
    let xbar = mean_field_trajectory(&eq, &major).unwrap();
    // ẏ = a y + g(1 + t/2): particular solution α + βt.
    let beta = -0.5 * g / a;
    let alpha = (beta - g) / a;
    let y0 = spec.minors[0].x0[0];
    for i in 0..eq.grid.len() {
        let t = eq.grid.node(i);
        let exact = (y0 - alpha) * (a * t).exp() + alpha + beta * t;
        assert!((xbar.at_node(i)[(0, 0)] - exact).abs() < 1e-8);
    }
}

#[test]
fn fixed_point_sweep_is_stationary_at_the_equilibrium() {
    let spec = coupled_scalar_game();
    let eq = solve_on(&spec, 1000);
    let (drift, offset) = rsmfg_core::mfg::fixed_point_residual(&spec, &eq).unwrap();
    assert!(drift < 10.0 * 1e-10 && offset < 10.0 * 1e-10);
    for p in eq.major.pi.values().iter().chain(eq.minors[0].pi.values()) {
        assert!(max_abs_diff(p, &p.transpose()) < 1e-10);
    }
}

#[test]
fn large_population_major_cost_approaches_the_limit() {
    let spec = coupled_scalar_game();
    let eq = solve_on(&spec, 2000);
    let opts = PopulationOptions::new(80, 20_000, 21);
    let finite = finite_cost(&simulate_population(&spec, &eq, &opts, None).unwrap(), Agent::Major).unwrap();
    // Limiting major problem simulated on the same coarse grid.
    let grid = TimeGrid::new(1.0, opts.steps).unwrap();
    let law = eq.major.law.clone();
    let coarse = rsmfg_core::FeedbackLaw { gain: law.gain.resample(grid).unwrap(), offset: law.offset.resample(grid).unwrap() };
    let ens = simulate(&eq.major_problem, &grid, &ControlLaw::Feedback(coarse), 20_000, 22).unwrap();
    let limit: LogMeanExpEstimate = rsmfg_core::montecarlo::estimate_cost(&ens);
    let pooled = (finite.std_error.powi(2) + limit.std_error.powi(2)).sqrt();
    assert!((finite.log_value - limit.log_value).abs() < 3.0 * pooled, "{finite:?} vs {limit:?}");
}

#[test]
fn average_fluctuations_shrink_like_inverse_square_root() {
    let spec = coupled_scalar_game();
    let eq = solve_on(&spec, 1000);
    let report = fluctuation_scaling(&spec, &eq, &[5, 20, 80], &PopulationOptions::new(0, 4000, 12)).unwrap();
    assert!((-0.65..=-0.35).contains(&report.slope), "{report:?}");
    assert!(report.terminal_mean.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn deviations_never_beat_the_limiting_major_law() {
    let spec = coupled_scalar_game();
    let eq = solve_on(&spec, 400);
    let grid = eq.grid;
    let base = simulate(&eq.major_problem, &grid, &ControlLaw::Feedback(eq.major.law.clone()), 20_000, 5).unwrap();
    for dev in default_deviation_family(&eq.major.law) {
        let alt = simulate(&eq.major_problem, &grid, &ControlLaw::Feedback(dev.law), 20_000, 5).unwrap();
        let (diff, se) = paired_log_difference(&base.log_weights, &alt.log_weights);
        assert!(diff <= 3.0 * se, "{}: {diff} ± {se}", dev.label);
    }
}

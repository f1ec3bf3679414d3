//! JSON experiment configuration.
//!
//! Matrices are row lists (`[[1, 0], [0, 1]]`). A bare number is `c·I` for
//! square entries and a filled vector for vector entries. Drift, offset and
//! diffusion may vary in time as `{"nodes": [...]}`, equally spaced on
//! `[0, horizon]`.

use std::fs;
use std::path::{Path, PathBuf};

use rsmfg_core::mfg::FixedPointOptions;
use rsmfg_core::model::TrackingSign;
use rsmfg_core::{Coefficient, DMatrix, DVector, LqgProblem, MajorMinorSpec, MajorParams, MatrixTrajectory, MinorTypeParams, TimeGrid};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    SolveSingle,
    VerifySingle,
    SolveMfg,
    SimulatePopulation,
    NashGap,
    ReproducePaper,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::SolveSingle,
        Mode::VerifySingle,
        Mode::SolveMfg,
        Mode::SimulatePopulation,
        Mode::NashGap,
        Mode::ReproducePaper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SolveSingle => "solve-single",
            Mode::VerifySingle => "verify-single",
            Mode::SolveMfg => "solve-mfg",
            Mode::SimulatePopulation => "simulate-population",
            Mode::NashGap => "nash-gap",
            Mode::ReproducePaper => "reproduce-paper",
        }
    }

    pub fn from_name(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Mode::VerifySingle | Mode::SimulatePopulation | Mode::NashGap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Single(LqgProblem),
    Game(MajorMinorSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSettings {
    pub n_paths: usize,
    pub seed: Option<u64>,
    /// Population sizes for the finite-population modes.
    pub agents: Vec<usize>,
    pub replications: usize,
    /// Euler steps of the population simulation.
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub model: Option<Model>,
    pub steps: usize,
    pub montecarlo: MonteCarloSettings,
    pub fixedpoint: FixedPointOptions,
    /// Whether `fixedpoint.max_iter` was given explicitly.
    pub max_iter_set: bool,
    pub output_dir: Option<PathBuf>,
    /// Canonical JSON of the document (sorted keys).
    pub echo: serde_json::Value,
    /// `sha256("blob <len>\0" + canonical JSON)`.
    pub hash: String,
    source: String,
}

impl ExperimentConfig {
    fn error(&self, field: &str, message: impl Into<String>) -> CliError {
        parse_error(&self.source, field, message)
    }

    /// Checks the mode-specific requirements.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(self.error("mode", format!("config is for `{}`, not `{}`", m.name(), mode.name())));
            }
        }
        match (mode, &self.model) {
            (Mode::SolveSingle | Mode::VerifySingle, Some(Model::Single(_))) => {}
            (Mode::SolveSingle | Mode::VerifySingle, _) => {
                return Err(self.error("model.single", "single-agent model required"))
            }
            (Mode::ReproducePaper, None) | (_, Some(Model::Game(_))) => {}
            _ => return Err(self.error("model.major", "major-minor model required")),
        }
        if mode.is_stochastic() && self.montecarlo.seed.is_none() {
            return Err(self.error("montecarlo.seed", "seed required"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let message = strip_position(&inner.to_string());
        CliError::Parse { line: inner.line(), field, message }
    })?;
    let echo: serde_json::Value = serde_json::from_str(text).expect("already parsed");
    let canonical = serde_json::to_string(&echo).expect("serializable");
    let hash = content_hash(canonical.as_bytes());
    let cx = Cx { text };

    let mode = match &raw.mode {
        None => None,
        Some(s) => Some(Mode::from_name(s).ok_or_else(|| cx.error("mode", format!("unknown mode `{s}`")))?),
    };
    let model = raw.model.as_ref().map(|m| cx.model(m)).transpose()?;
    let defaults = FixedPointOptions::default();
    let fp = &raw.fixedpoint;
    let fixedpoint = FixedPointOptions {
        tol: fp.tol.unwrap_or(defaults.tol),
        max_iter: fp.max_iter.unwrap_or(defaults.max_iter),
        relaxation: fp.relaxation.unwrap_or(defaults.relaxation),
        record_history: false,
    };
    if fixedpoint.tol.is_nan() || fixedpoint.tol <= 0.0 {
        return Err(cx.error("fixedpoint.tol", "must be positive"));
    }
    if !(0.0..1.0).contains(&fixedpoint.relaxation) {
        return Err(cx.error("fixedpoint.relaxation", "must lie in [0, 1)"));
    }
    let mc = &raw.montecarlo;
    let montecarlo = MonteCarloSettings {
        n_paths: mc.n_paths.unwrap_or(100_000),
        seed: mc.seed,
        agents: mc.agents.clone().unwrap_or_else(|| vec![5, 20, 80]),
        replications: mc.replications.unwrap_or(20_000),
        steps: mc.steps.unwrap_or(rsmfg_core::population::DEFAULT_POPULATION_STEPS),
    };
    if montecarlo.n_paths == 0 {
        return Err(cx.error("montecarlo.n_paths", "must be positive"));
    }
    if montecarlo.replications == 0 {
        return Err(cx.error("montecarlo.replications", "must be positive"));
    }
    if montecarlo.agents.is_empty() || montecarlo.agents.contains(&0) {
        return Err(cx.error("montecarlo.agents", "population sizes must be positive"));
    }
    if montecarlo.steps == 0 {
        return Err(cx.error("montecarlo.steps", "must be positive"));
    }
    let steps = raw.grid.steps.unwrap_or(rsmfg_core::numerics::DEFAULT_STEPS);
    if steps == 0 {
        return Err(cx.error("grid.steps", "must be positive"));
    }
    if let Some(f) = &raw.output.format {
        if f != "csv" {
            return Err(cx.error("output.format", format!("unsupported format `{f}`")));
        }
    }
    Ok(ExperimentConfig {
        mode,
        model,
        steps,
        montecarlo,
        fixedpoint,
        max_iter_set: fp.max_iter.is_some(),
        output_dir: raw.output.directory.as_ref().map(PathBuf::from),
        echo,
        hash,
        source: text.to_string(),
    })
}

/// Git-style content hash with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

fn parse_error(text: &str, field: &str, message: impl Into<String>) -> CliError {
    CliError::Parse { line: locate(text, field), field: field.to_string(), message: message.into() }
}

/// Line of the last key of a dotted path, found by scanning for each key in turn.
fn locate(text: &str, field: &str) -> usize {
    let mut pos = 0;
    for key in field.split('.') {
        let key = key.split('[').next().unwrap_or(key);
        if key.is_empty() {
            continue;
        }
        match text[pos..].find(&format!("\"{key}\"")) {
            Some(i) => pos += i,
            None => break,
        }
    }
    text[..pos].matches('\n').count() + 1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<String>,
    model: Option<RawModel>,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    montecarlo: RawMonteCarlo,
    #[serde(default)]
    fixedpoint: RawFixedPoint,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    steps: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMonteCarlo {
    n_paths: Option<usize>,
    seed: Option<u64>,
    agents: Option<Vec<usize>>,
    replications: Option<usize>,
    steps: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFixedPoint {
    tol: Option<f64>,
    max_iter: Option<usize>,
    relaxation: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    format: Option<String>,
}

#[derive(Deserialize, Default, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum CostForm {
    #[default]
    Risk,
    /// `exp(∫ quadratic forms)`: risk is fixed to 2 and cost entries are read as-is.
    RawExponent,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawSign {
    Minus,
    Plus,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    horizon: f64,
    #[serde(default)]
    cost_form: CostForm,
    single: Option<RawAgent>,
    major: Option<RawAgent>,
    minors: Option<Vec<RawAgent>>,
    weights: Option<Vec<f64>>,
    tracking_sign: Option<RawSign>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    drift: Option<RawValue>,
    input: Option<RawValue>,
    offset: Option<RawValue>,
    diffusion: Option<RawValue>,
    state_cost: Option<RawValue>,
    cross_cost: Option<RawValue>,
    control_cost: Option<RawValue>,
    terminal_cost: Option<RawValue>,
    state_linear: Option<RawValue>,
    control_linear: Option<RawValue>,
    population_coupling: Option<RawValue>,
    major_coupling: Option<RawValue>,
    population_tracking: Option<RawValue>,
    major_tracking: Option<RawValue>,
    target: Option<RawValue>,
    risk: Option<f64>,
    x0: Option<RawValue>,
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum RawValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Rows(Vec<Vec<f64>>),
    Nodes { nodes: Vec<RawValue> },
}

struct Dims {
    n: usize,
    m: usize,
    r: usize,
}

struct Cx<'a> {
    text: &'a str,
}

impl Cx<'_> {
    fn error(&self, field: &str, message: impl Into<String>) -> CliError {
        parse_error(self.text, field, message)
    }

    fn model(&self, m: &RawModel) -> Result<Model> {
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(self.error("model.horizon", "must be positive and finite"));
        }
        match (&m.single, &m.major) {
            (Some(_), Some(_)) => Err(self.error("model.single", "give either `single` or `major`, not both")),
            (None, None) => Err(self.error("model", "missing `single` or `major`")),
            (Some(a), None) => {
                for (present, name) in [
                    (m.minors.is_some(), "minors"),
                    (m.weights.is_some(), "weights"),
                    (m.tracking_sign.is_some(), "tracking_sign"),
                ] {
                    if present {
                        return Err(self.error(&format!("model.{name}"), "not used by a single-agent model"));
                    }
                }
                self.single(a, m).map(Model::Single)
            }
            (None, Some(major)) => self.game(major, m).map(Model::Game),
        }
    }

    fn risk(&self, a: &RawAgent, form: CostForm, path: &str) -> Result<f64> {
        match (form, a.risk) {
            (CostForm::RawExponent, Some(_)) => {
                Err(self.error(&format!("{path}.risk"), "risk is fixed to 2 in the raw exponent form"))
            }
            (CostForm::RawExponent, None) => Ok(2.0),
            (CostForm::Risk, Some(d)) => Ok(d),
            (CostForm::Risk, None) => Err(self.error(&format!("{path}.risk"), "risk required")),
        }
    }

    fn reject(&self, a: &RawAgent, path: &str, names: &[&str]) -> Result<()> {
        for name in names {
            let present = match *name {
                "state_linear" => a.state_linear.is_some(),
                "control_linear" => a.control_linear.is_some(),
                "population_coupling" => a.population_coupling.is_some(),
                "major_coupling" => a.major_coupling.is_some(),
                "population_tracking" => a.population_tracking.is_some(),
                "major_tracking" => a.major_tracking.is_some(),
                "target" => a.target.is_some(),
                _ => false,
            };
            if present {
                return Err(self.error(&format!("{path}.{name}"), "not used by this agent"));
            }
        }
        Ok(())
    }

    fn dims(&self, a: &RawAgent) -> Dims {
        let n = match (&a.x0, &a.drift) {
            (Some(RawValue::Vector(v)), _) => v.len(),
            (_, Some(RawValue::Rows(rows))) => rows.len(),
            _ => 1,
        };
        let m = match (&a.control_cost, &a.input) {
            (Some(RawValue::Rows(rows)), _) => rows.len(),
            (_, Some(RawValue::Rows(rows))) => rows.first().map_or(1, Vec::len),
            _ => 1,
        };
        let r = match &a.diffusion {
            Some(RawValue::Rows(rows)) => rows.first().map_or(n, Vec::len),
            Some(RawValue::Nodes { nodes }) => match nodes.first() {
                Some(RawValue::Rows(rows)) => rows.first().map_or(n, Vec::len),
                _ => n,
            },
            _ => n,
        };
        Dims { n, m, r }
    }

    fn single(&self, a: &RawAgent, m: &RawModel) -> Result<LqgProblem> {
        let path = "model.single";
        self.reject(a, path, &["population_coupling", "major_coupling", "population_tracking", "major_tracking", "target"])?;
        let d = self.dims(a);
        let h = m.horizon;
        let f = |name: &str| format!("{path}.{name}");
        let control_cost = a.control_cost.as_ref().ok_or_else(|| self.error(&f("control_cost"), "control_cost required"))?;
        let p = LqgProblem {
            drift: self.coefficient(a.drift.as_ref(), &f("drift"), d.n, d.n, h)?,
            input: self.matrix(a.input.as_ref(), &f("input"), d.n, d.m)?,
            offset: self.coefficient(a.offset.as_ref(), &f("offset"), d.n, 1, h)?,
            diffusion: self.coefficient(a.diffusion.as_ref(), &f("diffusion"), d.n, d.r, h)?,
            state_cost: self.matrix(a.state_cost.as_ref(), &f("state_cost"), d.n, d.n)?,
            cross_cost: self.matrix(a.cross_cost.as_ref(), &f("cross_cost"), d.n, d.m)?,
            control_cost: self.matrix(Some(control_cost), &f("control_cost"), d.m, d.m)?,
            state_linear: self.vector(a.state_linear.as_ref(), &f("state_linear"), d.n)?,
            control_linear: self.vector(a.control_linear.as_ref(), &f("control_linear"), d.m)?,
            terminal_cost: self.matrix(a.terminal_cost.as_ref(), &f("terminal_cost"), d.n, d.n)?,
            risk: self.risk(a, m.cost_form, path)?,
            x0: self.vector(a.x0.as_ref(), &f("x0"), d.n)?,
            horizon: h,
        };
        p.validate()?;
        Ok(p)
    }

    fn game(&self, major: &RawAgent, m: &RawModel) -> Result<MajorMinorSpec> {
        let d = self.dims(major);
        let h = m.horizon;
        let path = "model.major";
        self.reject(major, path, &["state_linear", "control_linear", "major_coupling", "major_tracking"])?;
        let f = |name: &str| format!("{path}.{name}");
        let required = |a: &RawAgent, path: &str| {
            a.control_cost.clone().ok_or_else(|| self.error(&format!("{path}.control_cost"), "control_cost required"))
        };
        let major_params = MajorParams {
            drift: self.matrix(major.drift.as_ref(), &f("drift"), d.n, d.n)?,
            population_coupling: self.matrix(major.population_coupling.as_ref(), &f("population_coupling"), d.n, d.n)?,
            input: self.matrix(major.input.as_ref(), &f("input"), d.n, d.m)?,
            offset: self.coefficient(major.offset.as_ref(), &f("offset"), d.n, 1, h)?,
            diffusion: self.coefficient(major.diffusion.as_ref(), &f("diffusion"), d.n, d.r, h)?,
            state_cost: self.matrix(major.state_cost.as_ref(), &f("state_cost"), d.n, d.n)?,
            cross_cost: self.matrix(major.cross_cost.as_ref(), &f("cross_cost"), d.n, d.m)?,
            control_cost: self.matrix(Some(&required(major, path)?), &f("control_cost"), d.m, d.m)?,
            terminal_cost: self.matrix(major.terminal_cost.as_ref(), &f("terminal_cost"), d.n, d.n)?,
            population_tracking: self.matrix(major.population_tracking.as_ref(), &f("population_tracking"), d.n, d.n)?,
            target: self.vector(major.target.as_ref(), &f("target"), d.n)?,
            risk: self.risk(major, m.cost_form, path)?,
            x0: self.vector(major.x0.as_ref(), &f("x0"), d.n)?,
        };
        let raw_minors = m.minors.as_deref().unwrap_or_default();
        if raw_minors.is_empty() {
            return Err(self.error("model.minors", "at least one minor type required"));
        }
        let mut minors = Vec::with_capacity(raw_minors.len());
        for (k, a) in raw_minors.iter().enumerate() {
            let path = format!("model.minors[{k}]");
            self.reject(a, &path, &["state_linear", "control_linear"])?;
            let f = |name: &str| format!("{path}.{name}");
            minors.push(MinorTypeParams {
                drift: self.matrix(a.drift.as_ref(), &f("drift"), d.n, d.n)?,
                population_coupling: self.matrix(a.population_coupling.as_ref(), &f("population_coupling"), d.n, d.n)?,
                major_coupling: self.matrix(a.major_coupling.as_ref(), &f("major_coupling"), d.n, d.n)?,
                input: self.matrix(a.input.as_ref(), &f("input"), d.n, d.m)?,
                offset: self.coefficient(a.offset.as_ref(), &f("offset"), d.n, 1, h)?,
                diffusion: self.coefficient(a.diffusion.as_ref(), &f("diffusion"), d.n, d.r, h)?,
                state_cost: self.matrix(a.state_cost.as_ref(), &f("state_cost"), d.n, d.n)?,
                cross_cost: self.matrix(a.cross_cost.as_ref(), &f("cross_cost"), d.n, d.m)?,
                control_cost: self.matrix(Some(&required(a, &path)?), &f("control_cost"), d.m, d.m)?,
                terminal_cost: self.matrix(a.terminal_cost.as_ref(), &f("terminal_cost"), d.n, d.n)?,
                major_tracking: self.matrix(a.major_tracking.as_ref(), &f("major_tracking"), d.n, d.n)?,
                population_tracking: self.matrix(a.population_tracking.as_ref(), &f("population_tracking"), d.n, d.n)?,
                target: self.vector(a.target.as_ref(), &f("target"), d.n)?,
                risk: self.risk(a, m.cost_form, &path)?,
                x0: self.vector(a.x0.as_ref(), &f("x0"), d.n)?,
            });
        }
        let k = minors.len();
        let weights = m.weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        if weights.len() != k {
            return Err(self.error("model.weights", format!("expected {k} weights, got {}", weights.len())));
        }
        let spec = MajorMinorSpec {
            major: major_params,
            minors,
            weights,
            horizon: h,
            tracking_sign: match m.tracking_sign {
                Some(RawSign::Plus) => TrackingSign::Plus,
                _ => TrackingSign::Minus,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    fn matrix(&self, v: Option<&RawValue>, path: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let shape_error = |got: (usize, usize)| {
            self.error(path, format!("expected a {rows}×{cols} matrix, got {}×{}", got.0, got.1))
        };
        match v {
            None => Ok(DMatrix::zeros(rows, cols)),
            Some(RawValue::Scalar(c)) => {
                if rows == cols {
                    Ok(DMatrix::identity(rows, cols) * *c)
                } else if *c == 0.0 {
                    Ok(DMatrix::zeros(rows, cols))
                } else {
                    Err(self.error(path, format!("a number stands for c·I, but the entry is {rows}×{cols}")))
                }
            }
            Some(RawValue::Vector(v)) if cols == 1 && v.len() == rows => Ok(DMatrix::from_column_slice(rows, 1, v)),
            Some(RawValue::Vector(v)) if rows == 1 && v.len() == cols => Ok(DMatrix::from_row_slice(1, cols, v)),
            Some(RawValue::Vector(v)) => Err(shape_error((1, v.len()))),
            Some(RawValue::Rows(r)) => {
                if r.is_empty() || r.iter().any(|row| row.len() != r[0].len()) {
                    return Err(self.error(path, "rows must be nonempty and of equal length"));
                }
                if (r.len(), r[0].len()) != (rows, cols) {
                    return Err(shape_error((r.len(), r[0].len())));
                }
                Ok(DMatrix::from_fn(rows, cols, |i, j| r[i][j]))
            }
            Some(RawValue::Nodes { .. }) => Err(self.error(path, "time-dependent values are not allowed here")),
        }
    }

    fn vector(&self, v: Option<&RawValue>, path: &str, len: usize) -> Result<DVector<f64>> {
        match v {
            Some(RawValue::Scalar(c)) => Ok(DVector::from_element(len, *c)),
            Some(RawValue::Vector(v)) if v.len() != len => {
                Err(self.error(path, format!("expected {len} entries, got {}", v.len())))
            }
            Some(RawValue::Vector(v)) => Ok(DVector::from_column_slice(v)),
            other => Ok(self.matrix(other, path, len, 1)?.column(0).into_owned()),
        }
    }

    fn coefficient(&self, v: Option<&RawValue>, path: &str, rows: usize, cols: usize, horizon: f64) -> Result<Coefficient> {
        match v {
            Some(RawValue::Nodes { nodes }) => {
                if nodes.len() < 2 {
                    return Err(self.error(path, "need at least two nodes"));
                }
                let values = nodes
                    .iter()
                    .map(|n| match n {
                        RawValue::Scalar(c) if rows != cols => Ok(DMatrix::from_element(rows, cols, *c)),
                        other => self.matrix(Some(other), path, rows, cols),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let grid = TimeGrid::new(horizon, nodes.len() - 1)?;
                Ok(Coefficient::Nodes(MatrixTrajectory::new(grid, values)?))
            }
            Some(RawValue::Scalar(c)) if rows != cols => Ok(DMatrix::from_element(rows, cols, *c).into()),
            other => Ok(self.matrix(other, path, rows, cols)?.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"{
  "model": {
    "horizon": 1.0,
    "single": {
      "drift": 0, "input": 1, "diffusion": 1,
      "state_cost": 1, "control_cost": 1,
      "risk": 0.5, "x0": [1.0]
    }
  },
  "montecarlo": {"n_paths": 1000, "seed": 3}
}"#;

    #[test]
    fn loads_scalar_shorthand() {
        let cfg = parse_config(SINGLE).unwrap();
        let Some(Model::Single(p)) = cfg.model else { panic!() };
        assert_eq!(p.input, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(p.risk, 0.5);
        assert_eq!(cfg.montecarlo.seed, Some(3));
        assert_eq!(cfg.steps, 2000);
    }

    #[test]
    fn row_lists_and_nodes() {
        let text = r#"{"model": {"horizon": 2.0, "single": {
            "drift": {"nodes": [[[0, 1], [0, 0]], [[0, 2], [0, 0]], [[0, 3], [0, 0]]]},
            "input": [[0], [1]], "diffusion": [[0.5], [0.0]], "offset": [0.1, 0.0],
            "state_cost": [[1, 0], [0, 1]], "control_cost": [[2]], "risk": 0.2, "x0": [1, -1]}}}"#;
        let Some(Model::Single(p)) = parse_config(text).unwrap().model else { panic!() };
        assert_eq!(p.state_dim(), 2);
        assert_eq!(p.noise_dim(), 1);
        assert!(!p.drift.is_constant());
        assert!((p.drift.at(1.5)[(0, 1)] - 2.5).abs() < 1e-12);
        assert_eq!(p.offset.at(0.0).as_slice(), &[0.1, 0.0]);
    }

    #[test]
    fn raw_exponent_fixes_risk() {
        let text = SINGLE.replace("\"risk\": 0.5, ", "").replace("\"horizon\": 1.0,", "\"horizon\": 1.0, \"cost_form\": \"raw_exponent\",");
        let Some(Model::Single(p)) = parse_config(&text).unwrap().model else { panic!() };
        assert_eq!(p.risk, 2.0);
        assert_eq!(p.state_cost[(0, 0)], 1.0);
        let both = SINGLE.replace("\"horizon\": 1.0,", "\"horizon\": 1.0, \"cost_form\": \"raw_exponent\",");
        assert!(parse_config(&both).is_err());
    }

    #[test]
    fn errors_carry_line_and_field() {
        let bad = SINGLE.replace("\"control_cost\": 1", "\"control_cost\": \"one\"");
        let CliError::Parse { line, field, .. } = parse_config(&bad).unwrap_err() else { panic!() };
        assert_eq!(field, "model.single.control_cost");
        assert_eq!(line, 6);
        let shape = SINGLE.replace("\"drift\": 0", "\"drift\": [[0, 0], [0, 0]]");
        let CliError::Parse { line, field, message } = parse_config(&shape).unwrap_err() else { panic!() };
        assert_eq!(field, "model.single.drift");
        assert_eq!(line, 5);
        assert!(message.contains("expected a 1×1 matrix"), "{message}");
        let unknown = SINGLE.replace("\"risk\"", "\"rsk\"");
        assert!(matches!(parse_config(&unknown), Err(CliError::Parse { .. })));
    }

    #[test]
    fn seed_required_in_stochastic_modes() {
        let cfg = parse_config(&SINGLE.replace(", \"seed\": 3", "")).unwrap();
        assert!(cfg.check_mode(Mode::SolveSingle).is_ok());
        let err = cfg.check_mode(Mode::VerifySingle).unwrap_err();
        assert_eq!(err.message(), Some("seed required"));
        assert_eq!(err.exit_code(), 2);
        assert!(cfg.check_mode(Mode::SolveMfg).is_err());
    }

    #[test]
    fn hash_tracks_numeric_content() {
        let a = parse_config(SINGLE).unwrap().hash;
        let spaced = parse_config(&SINGLE.replace("\n", "\n  ")).unwrap().hash;
        let changed = parse_config(&SINGLE.replace("0.5", "0.50001")).unwrap().hash;
        assert_eq!(a, spaced);
        assert_ne!(a, changed);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn assumption_violations_pass_through() {
        let bad = SINGLE.replace("\"control_cost\": 1", "\"control_cost\": -1");
        assert!(matches!(parse_config(&bad), Err(CliError::Core(rsmfg_core::Error::AssumptionViolated { .. }))));
    }
}

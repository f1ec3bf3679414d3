//! Time grids, matrix-valued trajectories and fixed-step RK4 integration.

use alloc::{format, vec::Vec};
use nalgebra::DMatrix;

use crate::linalg;
use crate::math;
use crate::{Error, Result};

/// Entries larger than this in magnitude are treated as a blow-up.
pub const BLOW_UP_BOUND: f64 = 1e8;

/// Default number of steps on the master grid.
pub const DEFAULT_STEPS: usize = 2000;

/// Uniform grid on `[0, T]` with `steps + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
        }
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("grid needs at least 2 steps, got {steps}")));
        }
        Ok(Self { t_end, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Time at node `i`; the last node is exactly `T`.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.t_end
        } else {
            self.t_end * i as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }

    /// Grid with the same horizon and `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            t_end: self.t_end,
            steps: self.steps * factor.max(1),
        }
    }

    /// Index `i` of the interval `[node(i), node(i+1)]` containing `t`, with the
    /// normalized position inside it. Node hits return weight exactly zero.
    pub(crate) fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=self.t_end).contains(&t) {
            return Err(Error::OutOfRange { t, t_end: self.t_end });
        }
        let scaled = t / self.t_end * self.steps as f64;
        let guess = (scaled as usize).min(self.steps);
        for i in [guess.saturating_sub(1), guess, (guess + 1).min(self.steps)] {
            if self.node(i) == t {
                return Ok((i.min(self.steps - 1), if i == self.steps { 1.0 } else { 0.0 }));
            }
        }
        let i = guess.min(self.steps - 1);
        let w = (t - self.node(i)) / (self.node(i + 1) - self.node(i));
        Ok((i, w.clamp(0.0, 1.0)))
    }
}

/// One dense matrix per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTrajectory {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    values: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let (rows, cols) = values[0].shape();
        for (i, v) in values.iter().enumerate() {
            if v.shape() != (rows, cols) {
                return Err(Error::DimensionMismatch(format!(
                    "node {i} has shape {:?}, expected {:?}",
                    v.shape(),
                    (rows, cols)
                )));
            }
            if !linalg::is_finite(v) {
                return Err(Error::NonFiniteState { t: grid.node(i) });
            }
        }
        Ok(Self { grid, rows, cols, values })
    }

    pub fn constant(grid: TimeGrid, value: DMatrix<f64>) -> Self {
        let (rows, cols) = value.shape();
        Self {
            grid,
            rows,
            cols,
            values: alloc::vec![value; grid.len()],
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn<F: FnMut(f64) -> DMatrix<f64>>(grid: TimeGrid, mut f: F) -> Result<Self> {
        Self::new(grid, grid.nodes().into_iter().map(&mut f).collect())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<DMatrix<f64>> {
        self.values
    }

    pub fn at_node(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn first(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        &self.values[self.values.len() - 1]
    }

    /// Piecewise-linear interpolation; exact at nodes.
    pub fn interpolate(&self, t: f64) -> Result<DMatrix<f64>> {
        let (i, w) = self.grid.locate(t)?;
        Ok(if w == 0.0 {
            self.values[i].clone()
        } else if w == 1.0 {
            self.values[i + 1].clone()
        } else {
            &self.values[i] * (1.0 - w) + &self.values[i + 1] * w
        })
    }

    /// Applies `f` nodewise.
    pub fn map<F: FnMut(usize, &DMatrix<f64>) -> DMatrix<f64>>(&self, mut f: F) -> Result<Self> {
        Self::new(
            self.grid,
            self.values.iter().enumerate().map(|(i, v)| f(i, v)).collect(),
        )
    }

    /// Largest entrywise difference over all nodes.
    pub fn sup_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }

    /// Sup over nodes of the ∞-norm (max absolute row sum) of the difference.
    pub fn sup_inf_norm_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| linalg::inf_norm(&(a - b)))
            .fold(0.0, f64::max)
    }

    /// Resamples onto another grid by linear interpolation.
    pub fn resample(&self, grid: TimeGrid) -> Result<Self> {
        let scale = self.grid.t_end / grid.t_end;
        Self::from_fn(grid, |t| {
            self.interpolate((t * scale).min(self.grid.t_end))
                .expect("resample stays inside the grid")
        })
    }
}

/// A model coefficient that is either constant or sampled on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Constant(DMatrix<f64>),
    Nodes(MatrixTrajectory),
}

impl Coefficient {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Coefficient::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Coefficient::Constant(m) => m.shape(),
            Coefficient::Nodes(tr) => tr.shape(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }

    /// Value at time `t`, clamped to the sampled horizon.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            Coefficient::Constant(m) => m.clone(),
            Coefficient::Nodes(tr) => {
                let t = t.clamp(0.0, tr.grid().t_end());
                tr.interpolate(t).expect("clamped time is in range")
            }
        }
    }

    /// Samples onto `grid`, reusing node values when the grids coincide.
    pub fn sample(&self, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
        match self {
            Coefficient::Nodes(tr) if tr.grid() == grid => tr.values().to_vec(),
            _ => grid.nodes().into_iter().map(|t| self.at(t)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Coefficient::Constant(m) => linalg::is_finite(m),
            Coefficient::Nodes(tr) => tr.values().iter().all(linalg::is_finite),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coefficient::Constant(m) => m.iter().all(|v| *v == 0.0),
            Coefficient::Nodes(tr) => tr.values().iter().all(|m| m.iter().all(|v| *v == 0.0)),
        }
    }

    /// Applies `f` to the constant or to every node.
    pub fn map<F: FnMut(&DMatrix<f64>) -> DMatrix<f64>>(&self, mut f: F) -> Self {
        match self {
            Coefficient::Constant(m) => Coefficient::Constant(f(m)),
            Coefficient::Nodes(tr) => Coefficient::Nodes(
                tr.map(|_, v| f(v)).expect("mapped coefficient keeps its grid"),
            ),
        }
    }
}

impl From<DMatrix<f64>> for Coefficient {
    fn from(m: DMatrix<f64>) -> Self {
        Coefficient::Constant(m)
    }
}

impl From<MatrixTrajectory> for Coefficient {
    fn from(tr: MatrixTrajectory) -> Self {
        Coefficient::Nodes(tr)
    }
}

/// Which end of the grid carries the boundary value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Initial value at `t = 0`.
    Forward,
    /// Terminal value at `t = T`.
    Backward,
}

/// Classical RK4 on `grid`; backward problems are solved by time reversal.
pub fn integrate_ode<F>(
    field: F,
    boundary: &DMatrix<f64>,
    grid: &TimeGrid,
    direction: Direction,
) -> Result<MatrixTrajectory>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    integrate_ode_projected(field, boundary, grid, direction, |_| {})
}

/// As [`integrate_ode`], applying `project` to the state after every step.
pub fn integrate_ode_projected<F, P>(
    mut field: F,
    boundary: &DMatrix<f64>,
    grid: &TimeGrid,
    direction: Direction,
    mut project: P,
) -> Result<MatrixTrajectory>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
    P: FnMut(&mut DMatrix<f64>),
{
    let m = grid.steps();
    let mut values: Vec<DMatrix<f64>> = Vec::with_capacity(m + 1);
    values.push(boundary.clone());
    let check = |y: &DMatrix<f64>, t: f64| -> Result<()> {
        if y.iter().all(|v| v.is_finite() && math::abs(*v) <= BLOW_UP_BOUND) {
            Ok(())
        } else {
            Err(Error::NonFiniteState { t })
        }
    };
    let start = match direction {
        Direction::Forward => 0,
        Direction::Backward => m,
    };
    check(boundary, grid.node(start))?;
    let mut y = boundary.clone();
    for step in 0..m {
        let (t0, t1) = match direction {
            Direction::Forward => (grid.node(step), grid.node(step + 1)),
            Direction::Backward => (grid.node(m - step), grid.node(m - step - 1)),
        };
        let h = t1 - t0;
        let tm = t0 + 0.5 * h;
        let k1 = field(t0, &y);
        check(&k1, t0)?;
        let k2 = field(tm, &(&y + &k1 * (0.5 * h)));
        check(&k2, tm)?;
        let k3 = field(tm, &(&y + &k2 * (0.5 * h)));
        check(&k3, tm)?;
        let k4 = field(t1, &(&y + &k3 * h));
        check(&k4, t1)?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        project(&mut y);
        check(&y, t1)?;
        values.push(y.clone());
    }
    if direction == Direction::Backward {
        values.reverse();
    }
    MatrixTrajectory::new(*grid, values)
}

/// Fundamental matrix Υ of `ẋ = A(t)x` and its inverse, integrated independently.
pub fn state_transition<F>(a: F, grid: &TimeGrid) -> Result<(MatrixTrajectory, MatrixTrajectory)>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let n = a(0.0).nrows();
    let eye = DMatrix::identity(n, n);
    let flow = integrate_ode(|t, y| a(t) * y, &eye, grid, Direction::Forward)?;
    let inverse = integrate_ode(|t, y| -(y * a(t)), &eye, grid, Direction::Forward)?;
    Ok((flow, inverse))
}

//! Deterministic integration backbone: classical fixed-step RK4 on the
//! shared grid. Coefficients are treated as constant on each grid cell
//! (the model validates that schedule breakpoints lie on grid points), so
//! every RK4 stage within a cell sees the same coefficient values and the
//! scheme keeps its full order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Default magnitude beyond which a solve is declared blown up.
pub const BLOWUP_BOUND: f64 = 1e12;

/// One matrix per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(values.len(), grid.points(), "one value per grid point");
        MatrixTrajectory { grid, values }
    }

    #[inline]
    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn initial(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.values.last().expect("non-empty trajectory")
    }

    /// Linear interpolation in time (used only for off-grid queries).
    pub fn interpolate(&self, t: f64) -> DMatrix<f64> {
        let dt = self.grid.dt();
        let s = (t / dt).clamp(0.0, self.grid.steps as f64);
        let k = (s.floor() as usize).min(self.grid.steps - 1);
        let w = s - k as f64;
        self.values[k].clone() * (1.0 - w) + &self.values[k + 1] * w
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|m| m.amax()).fold(0.0, f64::max)
    }
}

/// Stacked ODE state: a list of matrices integrated together so that
/// coupled stages (e.g. the leader's alpha system, which needs P at RK4
/// stage values) stay stage-consistent.
#[derive(Clone, Debug)]
pub struct Stacked(pub Vec<DMatrix<f64>>);

impl Stacked {
    fn axpy(&mut self, a: f64, other: &Stacked) {
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += o * a;
        }
    }

    fn is_bounded(&self, bound: f64) -> bool {
        self.0.iter().all(|m| m.iter().all(|x| x.is_finite() && x.abs() <= bound))
    }
}

/// Direction of integration over the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// RK4 over the grid with per-cell-constant coefficients. `rhs(cell, y)`
/// evaluates dy/dt using cell `cell`'s coefficients. Returns the state at
/// every grid point (index 0 = t_0 regardless of direction). Errors with
/// the blow-up time if any entry leaves [-bound, bound].
pub fn rk4(
    grid: &TimeGrid,
    direction: Direction,
    boundary: Stacked,
    bound: f64,
    what: &'static str,
    mut rhs: impl FnMut(usize, &Stacked) -> Stacked,
) -> Result<Vec<Stacked>> {
    let n = grid.steps;
    let dt = grid.dt();
    let h = match direction {
        Direction::Forward => dt,
        Direction::Backward => -dt,
    };
    let mut out: Vec<Option<Stacked>> = vec![None; n + 1];
    let cells: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let start = match direction {
        Direction::Forward => 0,
        Direction::Backward => n,
    };
    out[start] = Some(boundary);
    for cell in cells {
        let (from, to) = match direction {
            Direction::Forward => (cell, cell + 1),
            Direction::Backward => (cell + 1, cell),
        };
        let y = out[from].clone().expect("previous point computed");
        let k1 = rhs(cell, &y);
        let mut y2 = y.clone();
        y2.axpy(h / 2.0, &k1);
        let k2 = rhs(cell, &y2);
        let mut y3 = y.clone();
        y3.axpy(h / 2.0, &k2);
        let k3 = rhs(cell, &y3);
        let mut y4 = y.clone();
        y4.axpy(h, &k3);
        let k4 = rhs(cell, &y4);
        let mut next = y;
        next.axpy(h / 6.0, &k1);
        next.axpy(h / 3.0, &k2);
        next.axpy(h / 3.0, &k3);
        next.axpy(h / 6.0, &k4);
        if !next.is_bounded(bound) {
            return Err(Error::Singularity { what, time: grid.t(to), bound });
        }
        out[to] = Some(next);
    }
    Ok(out.into_iter().map(|o| o.expect("all points computed")).collect())
}

/// Solve dx/dt = M(t) x + b(t) by RK4; `boundary` is x(0) for forward and
/// x(T) for backward integration. `m_of_cell`/`b_of_cell` give the
/// cell-constant coefficients.
pub fn integrate_linear_ode(
    direction: Direction,
    m_of_cell: impl Fn(usize) -> DMatrix<f64>,
    b_of_cell: impl Fn(usize) -> DVector<f64>,
    boundary: DVector<f64>,
    grid: &TimeGrid,
) -> Result<MatrixTrajectory> {
    let dim = boundary.len();
    let states = rk4(
        grid,
        direction,
        Stacked(vec![DMatrix::from_column_slice(dim, 1, boundary.as_slice())]),
        BLOWUP_BOUND,
        "linear ODE",
        |cell, y| {
            let x = &y.0[0];
            let mut d = m_of_cell(cell) * x;
            let b = b_of_cell(cell);
            for i in 0..dim {
                d[(i, 0)] += b[i];
            }
            Stacked(vec![d])
        },
    )?;
    Ok(MatrixTrajectory::new(*grid, states.into_iter().map(|s| s.0.into_iter().next().unwrap()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n)
    }

    #[test]
    fn constant_when_rhs_vanishes() {
        let g = grid(16);
        let x0 = DVector::from_vec(vec![3.0, -1.0]);
        let traj = integrate_linear_ode(
            Direction::Forward,
            |_| DMatrix::zeros(2, 2),
            |_| DVector::zeros(2),
            x0.clone(),
            &g,
        )
        .unwrap();
        for v in &traj.values {
            assert_eq!(v.column(0), x0.column(0));
        }
    }

    #[test]
    fn scalar_exponential_oracle() {
        // dx/dt = a x, x(0) = 1 => x(1) = e^a, RK4 at dt = 1e-3 within 1e-8
        let a = 0.7;
        let g = grid(1000);
        let traj = integrate_linear_ode(
            Direction::Forward,
            |_| DMatrix::from_element(1, 1, a),
            |_| DVector::zeros(1),
            DVector::from_element(1, 1.0),
            &g,
        )
        .unwrap();
        let exact = a.exp();
        assert!((traj.terminal()[(0, 0)] - exact).abs() < 1e-8);
    }

    #[test]
    fn backward_matches_time_reversed_forward() {
        // dx/dt = m x + b backward from x(T) equals forward solve of the
        // reversed system y(s) = x(T - s).
        let m = 0.5;
        let b = 0.2;
        let g = grid(64);
        let xt = DVector::from_element(1, 2.0);
        let back = integrate_linear_ode(
            Direction::Backward,
            |_| DMatrix::from_element(1, 1, m),
            |_| DVector::from_element(1, b),
            xt.clone(),
            &g,
        )
        .unwrap();
        let fwd = integrate_linear_ode(
            Direction::Forward,
            |_| DMatrix::from_element(1, 1, -m),
            |_| DVector::from_element(1, -b),
            xt,
            &g,
        )
        .unwrap();
        let n = g.steps;
        for k in 0..=n {
            let diff = (back.at(k)[(0, 0)] - fwd.at(n - k)[(0, 0)]).abs();
            assert!(diff < 1e-12, "k={k} diff={diff}");
        }
    }

    #[test]
    fn blow_up_reports_time() {
        // dx/dt = x^2-ish via huge linear growth exceeds the bound quickly
        let g = TimeGrid::new(1.0, 100);
        let res = integrate_linear_ode(
            Direction::Forward,
            |_| DMatrix::from_element(1, 1, 4000.0),
            |_| DVector::zeros(1),
            DVector::from_element(1, 1.0),
            &g,
        );
        match res {
            Err(Error::Singularity { time, .. }) => assert!(time > 0.0 && time <= 1.0),
            other => panic!("expected singularity, got {other:?}"),
        }
    }
}

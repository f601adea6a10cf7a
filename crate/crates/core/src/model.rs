//! Problem instance: state/observation/cost data and its validation.
//!
//! A [`ProblemSpec`] holds everything that defines one game: the linear
//! state dynamics driven by two Brownian channels and two marked Poisson
//! channels, the two scalar observation processes, and the mean-variance
//! cost data for both players. Coefficients are piecewise-constant
//! schedules with breakpoints on the shared time grid; mark spaces are
//! finite with constant jump amplitudes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared uniform time grid on [0, T] with N steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        TimeGrid { horizon, steps }
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Number of grid points (steps + 1).
    #[inline]
    pub fn points(&self) -> usize {
        self.steps + 1
    }

    /// Grid with the step count scaled by `factor` (same horizon).
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { horizon: self.horizon, steps: self.steps * factor }
    }
}

/// Deterministic matrix-valued coefficient on [0, T]: either constant or
/// piecewise constant, right-continuous at breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(DMatrix<f64>),
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
}

impl Schedule {
    pub fn constant(value: DMatrix<f64>) -> Self {
        Schedule::Constant(value)
    }

    /// 1x1 constant.
    pub fn scalar(x: f64) -> Self {
        Schedule::Constant(DMatrix::from_element(1, 1, x))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Schedule::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Schedule::Constant(m) => (m.nrows(), m.ncols()),
            Schedule::Piecewise { values, .. } => {
                values.first().map_or((0, 0), |m| (m.nrows(), m.ncols()))
            }
        }
    }

    /// Value at time t >= 0, right-continuous at breakpoints. Total on
    /// [0, inf): beyond the last breakpoint the last segment value holds.
    pub fn value_at(&self, t: f64) -> &DMatrix<f64> {
        match self {
            Schedule::Constant(m) => m,
            Schedule::Piecewise { breakpoints, values } => {
                // last i with breakpoints[i] <= t (right-continuity)
                let mut idx = 0;
                for (i, &bp) in breakpoints.iter().enumerate() {
                    if bp <= t {
                        idx = i;
                    } else {
                        break;
                    }
                }
                &values[idx]
            }
        }
    }

    /// One value per grid cell, taken at the cell's left endpoint. With
    /// breakpoints on grid points this represents the schedule exactly.
    pub fn bake_cells(&self, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
        (0..grid.steps).map(|k| self.value_at(grid.t(k)).clone()).collect()
    }

    pub fn is_zero(&self) -> bool {
        let all0 = |m: &DMatrix<f64>| m.iter().all(|&x| x == 0.0);
        match self {
            Schedule::Constant(m) => all0(m),
            Schedule::Piecewise { values, .. } => values.iter().all(|m| all0(m)),
        }
    }

    fn all_finite(&self) -> bool {
        let fin = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
        match self {
            Schedule::Constant(m) => fin(m),
            Schedule::Piecewise { values, .. } => values.iter().all(fin),
        }
    }
}

/// Evaluate a schedule at a time in [0, T]; errors outside the horizon.
pub fn eval_schedule<'a>(s: &'a Schedule, t: f64, grid: &TimeGrid) -> Result<&'a DMatrix<f64>> {
    if !(0.0..=grid.horizon).contains(&t) {
        return Err(Error::DomainError { what: "eval_schedule", t, horizon: grid.horizon });
    }
    Ok(s.value_at(t))
}

/// One jump type: Poisson intensity, additive state jump D(e) and the
/// observation jump size f(e) that identifies the mark.
#[derive(Clone, Debug, PartialEq)]
pub struct Mark {
    pub label: String,
    pub intensity: f64,
    pub state_jump: DVector<f64>,
    pub obs_jump: f64,
}

/// Finite mark space E_i with its intensity measure nu_i.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarkSpace {
    pub marks: Vec<Mark>,
}

/// Tolerance for matching an observed jump size against the f-table.
pub const MARK_MATCH_TOL: f64 = 1e-9;

impl MarkSpace {
    pub fn empty() -> Self {
        MarkSpace { marks: Vec::new() }
    }

    pub fn total_intensity(&self) -> f64 {
        self.marks.iter().map(|m| m.intensity).sum()
    }

    /// Integral D(e) nu(de): state-jump compensator per unit time.
    pub fn state_compensator(&self, n: usize) -> DVector<f64> {
        let mut c = DVector::zeros(n);
        for m in &self.marks {
            c.axpy(m.intensity, &m.state_jump, 1.0);
        }
        c
    }

    /// Integral f(e) nu(de): observation-jump compensator per unit time.
    pub fn obs_compensator(&self) -> f64 {
        self.marks.iter().map(|m| m.intensity * m.obs_jump).sum()
    }

    /// Integral D(e) D(e)^T nu(de).
    pub fn dd_t(&self, n: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(n, n);
        for m in &self.marks {
            s.ger(m.intensity, &m.state_jump, &m.state_jump, 1.0);
        }
        s
    }

    /// Identify the mark whose observation jump matches the observed size.
    pub fn recover(&self, observed: f64, space: usize) -> Result<usize> {
        self.marks
            .iter()
            .position(|m| (m.obs_jump - observed).abs() <= MARK_MATCH_TOL)
            .ok_or(Error::UnidentifiableJump { observed, space })
    }
}

/// Mean-variance cost data for both players.
#[derive(Clone, Debug)]
pub struct CostSpec {
    pub r1: Schedule,
    pub r2: Schedule,
    pub theta1: f64,
    pub theta2: f64,
    pub g1: DVector<f64>,
    pub g2: DVector<f64>,
}

/// Full game instance.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    pub x0: DVector<f64>,
    pub grid: TimeGrid,
    // state equation
    pub a: Schedule,
    pub b1: Schedule,
    pub b2: Schedule,
    pub c1: Schedule,
    pub c2: Schedule,
    // follower observation
    pub h1: Schedule,
    pub h11: Schedule,
    pub h12: Schedule,
    pub k1: Schedule,
    // leader observation
    pub h2: Schedule,
    pub h2u: Schedule,
    pub k2: Schedule,
    // jumps
    pub marks1: MarkSpace,
    pub marks2: MarkSpace,
    pub cost: CostSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { location: location.into(), message: message.into() });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "{}: {}", v.location, v.message)?;
        }
        Ok(())
    }
}

impl ProblemSpec {
    /// Check every invariant; an empty report means the spec is usable by
    /// all downstream solvers. Violations are data, not errors.
    pub fn validate(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let (n, m) = (self.n, self.m);

        if self.grid.steps < 2 {
            rep.push("grid.steps", format!("need at least 2 steps, got {}", self.grid.steps));
        }
        if !(self.grid.horizon > 0.0) || !self.grid.horizon.is_finite() {
            rep.push("grid.T", format!("horizon must be a positive real, got {}", self.grid.horizon));
        }
        if n == 0 || m == 0 {
            rep.push("dims", format!("n and m must be positive, got n={n}, m={m}"));
        }
        if self.x0.len() != n {
            rep.push("x0", format!("length {} != n={}", self.x0.len(), n));
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            rep.push("x0", "non-finite entry".to_string());
        }

        let shapes: [(&str, &Schedule, usize, usize); 12] = [
            ("A", &self.a, n, n),
            ("B1", &self.b1, n, m),
            ("B2", &self.b2, n, m),
            ("C1", &self.c1, n, 1),
            ("C2", &self.c2, n, 1),
            ("H1", &self.h1, 1, n),
            ("h11", &self.h11, 1, m),
            ("h12", &self.h12, 1, m),
            ("K1", &self.k1, 1, 1),
            ("H2", &self.h2, 1, n),
            ("h2", &self.h2u, 1, m),
            ("K2", &self.k2, 1, 1),
        ];
        for (name, s, r, c) in shapes {
            self.check_schedule(&mut rep, name, s, r, c);
        }
        self.check_schedule(&mut rep, "R1", &self.cost.r1, m, m);
        self.check_schedule(&mut rep, "R2", &self.cost.r2, m, m);

        // Assumption: R_i symmetric positive definite, theta_i > 0.
        for (name, s) in [("R1", &self.cost.r1), ("R2", &self.cost.r2)] {
            if s.shape() != (m, m) {
                continue;
            }
            for k in 0..self.grid.steps.max(1) {
                let v = s.value_at(self.grid.t(k));
                if (v - v.transpose()).amax() > 1e-12 {
                    rep.push(name, format!("not symmetric at t={}", self.grid.t(k)));
                    break;
                }
                if v.clone().cholesky().is_none() {
                    rep.push(name, format!("not positive definite at t={}", self.grid.t(k)));
                    break;
                }
            }
        }
        for (name, th) in [("theta1", self.cost.theta1), ("theta2", self.cost.theta2)] {
            if !(th > 0.0) || !th.is_finite() {
                rep.push(name, format!("must be > 0, got {th}"));
            }
        }
        for (name, g) in [("g1", &self.cost.g1), ("g2", &self.cost.g2)] {
            if g.len() != n {
                rep.push(name, format!("length {} != n={}", g.len(), n));
            }
        }

        // Assumption: K_i invertible with bounded reciprocal on the grid.
        for (name, s) in [("K1", &self.k1), ("K2", &self.k2)] {
            if s.shape() != (1, 1) {
                continue;
            }
            for k in 0..self.grid.steps.max(1) {
                let t = self.grid.t(k);
                if s.value_at(t)[(0, 0)].abs() < 1e-12 {
                    rep.push(name, format!("{name} not invertible at t={t}"));
                    break;
                }
            }
        }

        self.check_marks(&mut rep, "E1", &self.marks1);
        self.check_marks(&mut rep, "E2", &self.marks2);

        rep
    }

    fn check_schedule(&self, rep: &mut ValidationReport, name: &str, s: &Schedule, rows: usize, cols: usize) {
        if s.shape() != (rows, cols) {
            rep.push(
                name,
                format!("shape {:?} inconsistent with (n, m): expected {:?}", s.shape(), (rows, cols)),
            );
        }
        if !s.all_finite() {
            rep.push(name, "non-finite entry".to_string());
        }
        if let Schedule::Piecewise { breakpoints, values } = s {
            if breakpoints.len() != values.len() {
                rep.push(name, format!("{} breakpoints vs {} values", breakpoints.len(), values.len()));
            }
            if breakpoints.first() != Some(&0.0) {
                rep.push(name, "first breakpoint must be 0".to_string());
            }
            if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                rep.push(name, "breakpoints must be strictly ascending".to_string());
            }
            let dt = self.grid.dt();
            for &bp in breakpoints {
                if bp >= self.grid.horizon {
                    rep.push(name, format!("breakpoint {bp} beyond horizon"));
                } else if (bp / dt - (bp / dt).round()).abs() > 1e-9 {
                    // Grid-aligned breakpoints keep the fixed-step integrator exact.
                    rep.push(name, format!("breakpoint {bp} not on the time grid"));
                }
            }
            if values.iter().any(|v| v.shape() != (rows, cols)) {
                rep.push(name, "segment value shape mismatch".to_string());
            }
        }
    }

    fn check_marks(&self, rep: &mut ValidationReport, name: &str, ms: &MarkSpace) {
        for (i, mk) in ms.marks.iter().enumerate() {
            if !(mk.intensity >= 0.0) || !mk.intensity.is_finite() {
                rep.push(
                    format!("{name}.{}", mk.label),
                    format!("intensity must be finite and >= 0, got {}", mk.intensity),
                );
            }
            if mk.state_jump.len() != self.n || mk.state_jump.iter().any(|x| !x.is_finite()) {
                rep.push(format!("{name}.{}", mk.label), "state jump must be a finite n-vector".to_string());
            }
            if !mk.obs_jump.is_finite() || mk.obs_jump.abs() <= MARK_MATCH_TOL {
                rep.push(
                    format!("{name}.{}", mk.label),
                    format!("obsJump must be nonzero, got {}", mk.obs_jump),
                );
            }
            for other in &ms.marks[..i] {
                if (other.obs_jump - mk.obs_jump).abs() <= MARK_MATCH_TOL {
                    rep.push(name, format!("obsJump values not distinct in {name}"));
                }
                if other.label == mk.label {
                    rep.push(name, format!("duplicate mark label {}", mk.label));
                }
            }
        }
    }

    /// Leader synthesis requires an uninformative follower observation
    /// drift (H1 identically zero).
    pub fn h1_is_zero(&self) -> bool {
        self.h1.is_zero()
    }

    pub fn validated(self) -> Result<ProblemSpec> {
        let rep = self.validate();
        if rep.is_valid() {
            Ok(self)
        } else {
            Err(Error::InvalidSpec(rep))
        }
    }

    /// Stable digest of the instance for reproducibility metadata.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let file = SpecFile::from_spec(self);
        let json = serde_json::to_string(&file).expect("spec serializes");
        let hash = Sha256::digest(json.as_bytes());
        let mut s = String::with_capacity(16);
        for b in &hash[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// JSON problem file
// ---------------------------------------------------------------------------

/// Schedule in the problem file: scalar, matrix (row-major nested arrays),
/// or piecewise-constant segments.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleFile {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
    Piecewise { breakpoints: Vec<f64>, values: Vec<Vec<Vec<f64>>> },
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nr, nc, |i, j| rows[i].get(j).copied().unwrap_or(f64::NAN))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl ScheduleFile {
    fn to_schedule(&self, rows: usize, cols: usize) -> Schedule {
        match self {
            ScheduleFile::Scalar(x) => {
                if rows == 1 && cols == 1 {
                    Schedule::scalar(*x)
                } else {
                    // scalar shorthand broadcasts onto the diagonal
                    Schedule::Constant(DMatrix::from_fn(rows, cols, |i, j| if i == j { *x } else { 0.0 }))
                }
            }
            ScheduleFile::Matrix(m) => Schedule::Constant(matrix_from_rows(m)),
            ScheduleFile::Piecewise { breakpoints, values } => Schedule::Piecewise {
                breakpoints: breakpoints.clone(),
                values: values.iter().map(|v| matrix_from_rows(v)).collect(),
            },
        }
    }

    fn from_schedule(s: &Schedule) -> ScheduleFile {
        match s {
            Schedule::Constant(m) => ScheduleFile::Matrix(rows_from_matrix(m)),
            Schedule::Piecewise { breakpoints, values } => ScheduleFile::Piecewise {
                breakpoints: breakpoints.clone(),
                values: values.iter().map(rows_from_matrix).collect(),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkFile {
    pub label: String,
    pub intensity: f64,
    pub state_jump: Vec<f64>,
    pub obs_jump: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpecFile {
    pub dims: DimsFile,
    pub x0: Vec<f64>,
    pub grid: TimeGrid,
    pub state: StateFile,
    pub observations: ObsFile,
    pub marks: MarksFile,
    pub cost: CostFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DimsFile {
    pub n: usize,
    pub m: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateFile {
    #[serde(rename = "A")]
    pub a: ScheduleFile,
    #[serde(rename = "B1")]
    pub b1: ScheduleFile,
    #[serde(rename = "B2")]
    pub b2: ScheduleFile,
    #[serde(rename = "C1")]
    pub c1: ScheduleFile,
    #[serde(rename = "C2")]
    pub c2: ScheduleFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObsFile {
    #[serde(rename = "H1")]
    pub h1: ScheduleFile,
    pub h11: ScheduleFile,
    pub h12: ScheduleFile,
    #[serde(rename = "K1")]
    pub k1: ScheduleFile,
    #[serde(rename = "H2")]
    pub h2x: ScheduleFile,
    #[serde(rename = "h2")]
    pub h2u: ScheduleFile,
    #[serde(rename = "K2")]
    pub k2: ScheduleFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarksFile {
    #[serde(rename = "E1")]
    pub e1: Vec<MarkFile>,
    #[serde(rename = "E2")]
    pub e2: Vec<MarkFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostFile {
    #[serde(rename = "R1")]
    pub r1: ScheduleFile,
    #[serde(rename = "R2")]
    pub r2: ScheduleFile,
    pub theta1: f64,
    pub theta2: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

fn marks_from_file(ms: &[MarkFile]) -> MarkSpace {
    MarkSpace {
        marks: ms
            .iter()
            .map(|m| Mark {
                label: m.label.clone(),
                intensity: m.intensity,
                state_jump: DVector::from_vec(m.state_jump.clone()),
                obs_jump: m.obs_jump,
            })
            .collect(),
    }
}

impl SpecFile {
    pub fn to_spec(&self) -> ProblemSpec {
        let (n, m) = (self.dims.n, self.dims.m);
        ProblemSpec {
            n,
            m,
            x0: DVector::from_vec(self.x0.clone()),
            grid: self.grid,
            a: self.state.a.to_schedule(n, n),
            b1: self.state.b1.to_schedule(n, m),
            b2: self.state.b2.to_schedule(n, m),
            c1: self.state.c1.to_schedule(n, 1),
            c2: self.state.c2.to_schedule(n, 1),
            h1: self.observations.h1.to_schedule(1, n),
            h11: self.observations.h11.to_schedule(1, m),
            h12: self.observations.h12.to_schedule(1, m),
            k1: self.observations.k1.to_schedule(1, 1),
            h2: self.observations.h2x.to_schedule(1, n),
            h2u: self.observations.h2u.to_schedule(1, m),
            k2: self.observations.k2.to_schedule(1, 1),
            marks1: marks_from_file(&self.marks.e1),
            marks2: marks_from_file(&self.marks.e2),
            cost: CostSpec {
                r1: self.cost.r1.to_schedule(m, m),
                r2: self.cost.r2.to_schedule(m, m),
                theta1: self.cost.theta1,
                theta2: self.cost.theta2,
                g1: DVector::from_vec(self.cost.g1.clone()),
                g2: DVector::from_vec(self.cost.g2.clone()),
            },
        }
    }

    pub fn from_spec(spec: &ProblemSpec) -> SpecFile {
        SpecFile {
            dims: DimsFile { n: spec.n, m: spec.m },
            x0: spec.x0.iter().copied().collect(),
            grid: spec.grid,
            state: StateFile {
                a: ScheduleFile::from_schedule(&spec.a),
                b1: ScheduleFile::from_schedule(&spec.b1),
                b2: ScheduleFile::from_schedule(&spec.b2),
                c1: ScheduleFile::from_schedule(&spec.c1),
                c2: ScheduleFile::from_schedule(&spec.c2),
            },
            observations: ObsFile {
                h1: ScheduleFile::from_schedule(&spec.h1),
                h11: ScheduleFile::from_schedule(&spec.h11),
                h12: ScheduleFile::from_schedule(&spec.h12),
                k1: ScheduleFile::from_schedule(&spec.k1),
                h2x: ScheduleFile::from_schedule(&spec.h2),
                h2u: ScheduleFile::from_schedule(&spec.h2u),
                k2: ScheduleFile::from_schedule(&spec.k2),
            },
            marks: MarksFile {
                e1: marks_to_file(&spec.marks1),
                e2: marks_to_file(&spec.marks2),
            },
            cost: CostFile {
                r1: ScheduleFile::from_schedule(&spec.cost.r1),
                r2: ScheduleFile::from_schedule(&spec.cost.r2),
                theta1: spec.cost.theta1,
                theta2: spec.cost.theta2,
                g1: spec.cost.g1.iter().copied().collect(),
                g2: spec.cost.g2.iter().copied().collect(),
            },
        }
    }
}

fn marks_to_file(ms: &MarkSpace) -> Vec<MarkFile> {
    ms.marks
        .iter()
        .map(|m| MarkFile {
            label: m.label.clone(),
            intensity: m.intensity,
            state_jump: m.state_jump.iter().copied().collect(),
            obs_jump: m.obs_jump,
        })
        .collect()
}

/// Parse a problem file (JSON).
pub fn parse_problem(json: &str) -> Result<ProblemSpec> {
    let file: SpecFile = serde_json::from_str(json)?;
    Ok(file.to_spec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::scalar_spec;
    use proptest::prelude::*;

    #[test]
    fn valid_scalar_spec_passes() {
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 100);
        spec.marks1.marks.push(Mark {
            label: "a".into(),
            intensity: 1.0,
            state_jump: DVector::from_element(1, 0.1),
            obs_jump: 0.5,
        });
        spec.marks2.marks.push(Mark {
            label: "b".into(),
            intensity: 1.0,
            state_jump: DVector::from_element(1, 0.1),
            obs_jump: 0.4,
        });
        assert!(spec.validate().is_valid());
    }

    #[test]
    fn zero_k2_is_reported_with_location() {
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 100);
        spec.k2 = Schedule::scalar(0.0);
        let rep = spec.validate();
        assert!(!rep.is_valid());
        assert!(rep.violations.iter().any(|v| v.location == "K2" && v.message.contains("invertible")));
    }

    #[test]
    fn duplicate_obs_jumps_are_reported() {
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 100);
        for label in ["a", "b"] {
            spec.marks2.marks.push(Mark {
                label: label.into(),
                intensity: 1.0,
                state_jump: DVector::from_element(1, 0.1),
                obs_jump: 1.0,
            });
        }
        let rep = spec.validate();
        assert!(rep.violations.iter().any(|v| v.message.contains("not distinct in E2")));
    }

    #[test]
    fn validation_is_pure() {
        let mut spec = scalar_spec(0.3, 1.0, 0.5, 1.0, 2.0, 64);
        spec.k1 = Schedule::scalar(0.0);
        let a = format!("{}", spec.validate());
        let b = format!("{}", spec.validate());
        assert_eq!(a, b);
    }

    #[test]
    fn eval_schedule_examples() {
        let grid = TimeGrid::new(1.0, 10);
        let constant = Schedule::scalar(2.0);
        assert_eq!(eval_schedule(&constant, 0.5, &grid).unwrap()[(0, 0)], 2.0);
        let pw = Schedule::Piecewise {
            breakpoints: vec![0.0, 0.5],
            values: vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 3.0)],
        };
        // right-continuous at the breakpoint
        assert_eq!(eval_schedule(&pw, 0.5, &grid).unwrap()[(0, 0)], 3.0);
        assert_eq!(eval_schedule(&pw, 0.499, &grid).unwrap()[(0, 0)], 1.0);
        assert!(matches!(
            eval_schedule(&pw, 1.5, &grid),
            Err(crate::error::Error::DomainError { .. })
        ));
    }

    #[test]
    fn problem_file_round_trip() {
        let text = include_str!("../../../problems/default.json");
        let spec = parse_problem(text).unwrap();
        assert!(spec.validate().is_valid());
        let file = SpecFile::from_spec(&spec);
        let spec2 = file.to_spec();
        assert_eq!(spec.digest(), spec2.digest());
        assert!(spec.h1_is_zero());
    }

    #[test]
    fn breakpoints_off_grid_are_reported() {
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 100);
        spec.a = Schedule::Piecewise {
            breakpoints: vec![0.0, 0.0123],
            values: vec![DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0)],
        };
        let rep = spec.validate();
        assert!(rep.violations.iter().any(|v| v.message.contains("not on the time grid")));
    }

    proptest! {
        #[test]
        fn constant_schedule_agrees_everywhere(x in -10.0f64..10.0, t in 0.0f64..1.0) {
            let grid = TimeGrid::new(1.0, 16);
            let s = Schedule::scalar(x);
            prop_assert_eq!(eval_schedule(&s, t, &grid).unwrap()[(0, 0)], x);
        }

        #[test]
        fn piecewise_eval_is_total_and_right_continuous(
            seg in proptest::collection::vec(-5.0f64..5.0, 1..6),
            t in 0.0f64..1.0,
        ) {
            let k = seg.len();
            let breakpoints: Vec<f64> = (0..k).map(|i| i as f64 / k as f64).collect();
            let values: Vec<DMatrix<f64>> = seg.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
            let s = Schedule::Piecewise { breakpoints: breakpoints.clone(), values };
            let got = s.value_at(t)[(0, 0)];
            // reference: last segment whose breakpoint <= t
            let mut expect = seg[0];
            for (bp, v) in breakpoints.iter().zip(&seg) {
                if *bp <= t {
                    expect = *v;
                }
            }
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn mark_recovery_round_trips(sizes in proptest::collection::vec(0.1f64..5.0, 1..5)) {
            // pairwise-distinct sizes by construction
            let mut ms = MarkSpace::empty();
            let mut acc = 0.0;
            for (i, s) in sizes.iter().enumerate() {
                acc += s;
                ms.marks.push(Mark {
                    label: format!("m{i}"),
                    intensity: 1.0,
                    state_jump: DVector::from_element(1, 0.1),
                    obs_jump: acc,
                });
            }
            for (i, m) in ms.marks.iter().enumerate() {
                prop_assert_eq!(ms.recover(m.obs_jump, 1).unwrap(), i);
            }
        }
    }
}

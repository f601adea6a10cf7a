//! Jump-diffusion simulation of the closed loop on the shared grid.
//!
//! Every process simulated here (truth, follower filter, leader filter /
//! adjoint pair, forward-integrated decoupling reconstruction) is affine in
//! the joint state given the per-cell gains, so a path step is one dense
//! affine update plus jump effects. [`build_loop`] assembles the per-cell
//! operators once; [`ClosedLoop::replay`] then replays any number of noise
//! realizations against them. Jump effects are applied at the end of the
//! enclosing grid cell and compensators are integrated exactly per cell,
//! which is what keeps the compensated channels martingales in discrete
//! time.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MarkSpace, ProblemSpec, TimeGrid};
use crate::ode::MatrixTrajectory;
use crate::riccati::{leader_gain, BakedCoeffs};
use crate::rng::{channel, CounterRng};

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    /// Cell whose end absorbs the jump effect.
    pub step: usize,
    /// Mark space: 0 = E1, 1 = E2.
    pub space: usize,
    pub mark: usize,
    pub time: f64,
}

/// One path's driving noise: Brownian increments per cell and the jump
/// events of both mark spaces, sorted by cell.
#[derive(Clone, Debug)]
pub struct PathNoise {
    pub dw1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub events: Vec<JumpEvent>,
    pub grid: TimeGrid,
}

impl PathNoise {
    /// Aggregate to a grid coarser by `factor` (same horizon). Brownian
    /// increments sum; jump events re-snap to the coarse cells by their
    /// exact times.
    pub fn coarsen(&self, factor: usize) -> PathNoise {
        assert_eq!(self.grid.steps % factor, 0);
        let coarse = TimeGrid::new(self.grid.horizon, self.grid.steps / factor);
        let agg = |xs: &[f64]| -> Vec<f64> {
            xs.chunks(factor).map(|c| c.iter().sum()).collect()
        };
        let events = self
            .events
            .iter()
            .map(|e| JumpEvent { step: cell_of(e.time, &coarse), ..*e })
            .collect();
        PathNoise { dw1: agg(&self.dw1), dw2: agg(&self.dw2), events, grid: coarse }
    }
}

/// Cell (t_k, t_{k+1}] that absorbs an event at `time`.
fn cell_of(time: f64, grid: &TimeGrid) -> usize {
    let k = (time / grid.dt()).ceil() as usize;
    k.saturating_sub(1).min(grid.steps - 1)
}

/// Handle for a family of reproducible noise paths: path `i`'s streams are
/// keyed by `(seed, i, channel)` and are generated on demand.
#[derive(Clone, Debug)]
pub struct NoiseRealization {
    pub seed: u64,
    pub n_paths: usize,
    pub grid: TimeGrid,
    intensities: [Vec<f64>; 2],
}

impl NoiseRealization {
    pub fn path(&self, idx: usize) -> PathNoise {
        let n = self.grid.steps;
        let sdt = self.grid.dt().sqrt();
        let normals = |chan: u64| -> Vec<f64> {
            let mut rng = CounterRng::new(self.seed, idx as u64, chan);
            (0..n).map(|_| rng.normal() * sdt).collect()
        };
        let dw1 = normals(channel::W1);
        let dw2 = normals(channel::W2);
        let mut events = Vec::new();
        for (space, base) in [(0usize, channel::JUMPS_E1), (1, channel::JUMPS_E2)] {
            for (mark, &nu) in self.intensities[space].iter().enumerate() {
                if nu <= 0.0 {
                    continue;
                }
                let mut rng = CounterRng::new(self.seed, idx as u64, base + mark as u64);
                let mut t = 0.0;
                loop {
                    t += rng.exponential(nu);
                    if t > self.grid.horizon {
                        break;
                    }
                    events.push(JumpEvent { step: cell_of(t, &self.grid), space, mark, time: t });
                }
            }
        }
        events.sort_by(|a, b| {
            (a.step, a.space, a.mark, a.time)
                .partial_cmp(&(b.step, b.space, b.mark, b.time))
                .unwrap()
        });
        PathNoise { dw1, dw2, events, grid: self.grid }
    }

    /// Digest of the generating data; equal digests guarantee identical
    /// noise (the common-random-number pairing check).
    pub fn digest(&self) -> u64 {
        let mut h = CounterRng::new(self.seed, self.n_paths as u64, 0xD16E57);
        let mut acc = h.next_u64() ^ self.grid.steps as u64 ^ self.grid.horizon.to_bits();
        for side in &self.intensities {
            for nu in side {
                acc = acc.rotate_left(7) ^ nu.to_bits();
            }
        }
        acc
    }
}

/// Sample the driving noise for `n_paths` paths of `spec` under `seed`.
pub fn sample_noise(spec: &ProblemSpec, seed: u64, n_paths: usize) -> NoiseRealization {
    let nus = |ms: &MarkSpace| ms.marks.iter().map(|m| m.intensity).collect::<Vec<_>>();
    NoiseRealization {
        seed,
        n_paths,
        grid: spec.grid,
        intensities: [nus(&spec.marks1), nus(&spec.marks2)],
    }
}

/// Identify the mark of an observed jump size in mark space 1 or 2.
pub fn recover_marks(spec: &ProblemSpec, observed: f64, space: usize) -> Result<usize> {
    match space {
        1 => spec.marks1.recover(observed, 1),
        2 => spec.marks2.recover(observed, 2),
        _ => Err(Error::Config(format!("mark space id must be 1 or 2, got {space}"))),
    }
}

// ---------------------------------------------------------------------------
// Closed-loop engine
// ---------------------------------------------------------------------------

/// State layout of the joint affine loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopMode {
    /// Z = (X, Xhat): truth plus follower filter, controls given per cell.
    OpenLoop,
    /// Z = (X, Xhat, Xcheck): adds the plain leader filter (open-loop form).
    OpenLoopWithLeader,
    /// Z = (X, Xhat, Xstar): follower filter plus the leader's stacked
    /// equilibrium state (Xcheck, h).
    Equilibrium,
    /// Equilibrium plus the forward-integrated adjoint reconstruction Y.
    EquilibriumWithY,
}

/// Deterministic control schedules, one vector per cell.
pub type ControlCells = Vec<DVector<f64>>;

pub struct FollowerGains<'a> {
    pub p: &'a MatrixTrajectory,
    pub phibar: &'a MatrixTrajectory,
    /// Closure error covariance driving the filter gain (unused when H1 = 0).
    pub sigma: Option<&'a MatrixTrajectory>,
    pub u2_cells: &'a ControlCells,
}

pub struct LeaderGains<'a> {
    pub p: &'a MatrixTrajectory,
    pub alpha1: &'a MatrixTrajectory,
    pub alpha2: &'a MatrixTrajectory,
    pub sigma: Option<&'a MatrixTrajectory>,
    /// Closure Xi_1 for the leader filter gain (unused when H2 = 0).
    pub xi1: Option<&'a MatrixTrajectory>,
}

pub struct OpenLoopGains<'a> {
    pub u1_cells: &'a ControlCells,
    pub u2_cells: &'a ControlCells,
    pub sigma: Option<&'a MatrixTrajectory>,
    pub xi1: Option<&'a MatrixTrajectory>,
    /// Also simulate the leader filter Xcheck.
    pub with_leader_filter: bool,
}

pub enum Policy<'a> {
    Leader(LeaderGains<'a>),
    Follower(FollowerGains<'a>),
    Open(OpenLoopGains<'a>),
}

/// Additive deterministic perturbation of one player's control.
pub struct Perturbation<'a> {
    /// 1 = follower, 2 = leader.
    pub player: u8,
    pub v_cells: &'a ControlCells,
    pub eps: f64,
    /// Follower reaction correction for leader perturbations: the
    /// deterministic shift of phi solving its backward equation with the
    /// perturbation source and zero terminal value.
    pub w: Option<&'a MatrixTrajectory>,
}

pub struct LoopConfig<'a> {
    pub policy: Policy<'a>,
    pub pert: Option<Perturbation<'a>>,
    pub with_yfwd: bool,
    pub record_series: bool,
    /// Track the max abs stationarity residuals R1 u1 + B1'(P xhat + phi)
    /// and R2 u2 + B2'(m + P h) along the path.
    pub record_smp: bool,
}

/// Per-cell affine operators (row-major flat matrices over the loop state).
struct CellOp {
    t: Vec<f64>,       // D x D
    c: Vec<f64>,       // D
    l1: Vec<f64>,      // D
    l2: Vec<f64>,      // D
    u1m: Vec<f64>,     // m x D
    u1c: Vec<f64>,     // m
    u2m: Vec<f64>,
    u2c: Vec<f64>,
    r1: Vec<f64>,      // m x m
    r2: Vec<f64>,
    in1: Vec<f64>,     // D row: dVc = dt * in1 . Z + dW1
    in2: Vec<f64>,
    smp1m: Vec<f64>,   // m x D (empty unless record_smp)
    smp1c: Vec<f64>,
    smp2m: Vec<f64>,
    smp2c: Vec<f64>,
    jumps: [Vec<Vec<f64>>; 2], // per space, per mark: D vector
    /// dt-scaled control input maps (D x m) for per-path control offsets.
    bu1: Vec<f64>,
    bu2: Vec<f64>,
}

pub struct ClosedLoop {
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    pub grid: TimeGrid,
    pub mode: LoopMode,
    cells: Vec<CellOp>,
    z0: Vec<f64>,
    record_series: bool,
    record_smp: bool,
    /// Observation drift/jump data for reconstructing raw dY series.
    obs: ObsCells,
}

/// Per-cell observation coefficients for reconstructing dY1c / dY2c.
struct ObsCells {
    h1: Vec<Vec<f64>>,  // 1 x n rows
    h11: Vec<Vec<f64>>, // 1 x m
    h12: Vec<Vec<f64>>,
    k1: Vec<f64>,
    h2: Vec<Vec<f64>>,
    h2u: Vec<Vec<f64>>,
    k2: Vec<f64>,
    /// observation jump sizes per mark and their compensators per unit time
    f1: Vec<f64>,
    f2: Vec<f64>,
    fcomp1: f64,
    fcomp2: f64,
}

/// Everything recorded about one replayed path.
pub struct PathTrace {
    pub z_terminal: Vec<f64>,
    pub running1: f64,
    pub running2: f64,
    /// Cumulative innovation and its quadratic variation plus higher
    /// pooled moments of the increments, follower then leader channel.
    pub vcheck: InnovationTrace,
    pub ucheck: InnovationTrace,
    pub smp1_max: f64,
    pub smp2_max: f64,
    pub series: Option<SeriesTrace>,
}

#[derive(Clone, Copy, Default)]
pub struct InnovationTrace {
    pub sum: f64,
    pub qv: f64,
    pub sum3: f64,
    pub sum4: f64,
}

/// Full per-step records (only for paths replayed with `record_series`).
pub struct SeriesTrace {
    /// State at every grid point, length N+1, each of the loop dimension.
    pub z: Vec<Vec<f64>>,
    pub u1: Vec<DVector<f64>>,
    pub u2: Vec<DVector<f64>>,
    pub dy1c: Vec<f64>,
    pub dy2c: Vec<f64>,
    pub dvc: Vec<f64>,
    pub duc: Vec<f64>,
    /// Cumulative observation processes (with jumps and compensators).
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

/// Per-path additive control inputs (one value per cell), applied on top
/// of the policy's affine maps. Only open-loop-dimension modes support
/// them (the equilibrium modes fold controls into the representation).
pub struct ControlOffsets<'a> {
    pub u1: &'a [DVector<f64>],
    pub u2: &'a [DVector<f64>],
}

impl ClosedLoop {
    #[inline]
    pub fn idx_x(&self) -> usize {
        0
    }
    #[inline]
    pub fn idx_xhat(&self) -> usize {
        self.n
    }
    /// Offset of Xcheck (leader filter / first block of Xstar).
    #[inline]
    pub fn idx_xcheck(&self) -> usize {
        2 * self.n
    }
    /// Offset of h (second block of Xstar) in equilibrium modes.
    #[inline]
    pub fn idx_h(&self) -> usize {
        3 * self.n
    }
    #[inline]
    pub fn idx_yfwd(&self) -> usize {
        4 * self.n
    }

    pub fn replay(&self, noise: &PathNoise, path_idx: usize) -> Result<PathTrace> {
        self.replay_with_offsets(noise, path_idx, None)
    }

    pub fn replay_with_offsets(
        &self,
        noise: &PathNoise,
        path_idx: usize,
        offsets: Option<&ControlOffsets<'_>>,
    ) -> Result<PathTrace> {
        if offsets.is_some() && self.dim != 2 * self.n {
            return Err(Error::Config(
                "control offsets are only supported by the open-loop state layout".into(),
            ));
        }
        let d = self.dim;
        let nsteps = self.grid.steps;
        assert_eq!(noise.grid.steps, nsteps, "noise grid must match loop grid");
        let dt = self.grid.dt();
        let m = self.m;
        let mut z = self.z0.clone();
        let mut znext = vec![0.0; d];
        let mut u1 = vec![0.0; m];
        let mut u2 = vec![0.0; m];
        let mut running1 = 0.0;
        let mut running2 = 0.0;
        let mut vtr = InnovationTrace::default();
        let mut utr = InnovationTrace::default();
        let mut smp1_max = 0.0f64;
        let mut smp2_max = 0.0f64;
        let mut series = self.record_series.then(|| SeriesTrace {
            z: Vec::with_capacity(nsteps + 1),
            u1: Vec::with_capacity(nsteps),
            u2: Vec::with_capacity(nsteps),
            dy1c: Vec::with_capacity(nsteps),
            dy2c: Vec::with_capacity(nsteps),
            dvc: Vec::with_capacity(nsteps),
            duc: Vec::with_capacity(nsteps),
            y1: vec![0.0],
            y2: vec![0.0],
        });
        let mut ev_ptr = 0usize;
        let (mut y1_acc, mut y2_acc) = (0.0f64, 0.0f64);

        for k in 0..nsteps {
            let op = &self.cells[k];
            // controls
            matvec(&op.u1m, &z, &mut u1);
            for (ui, ci) in u1.iter_mut().zip(&op.u1c) {
                *ui += ci;
            }
            matvec(&op.u2m, &z, &mut u2);
            for (ui, ci) in u2.iter_mut().zip(&op.u2c) {
                *ui += ci;
            }
            if let Some(off) = offsets {
                for (ui, oi) in u1.iter_mut().zip(off.u1[k].iter()) {
                    *ui += oi;
                }
                for (ui, oi) in u2.iter_mut().zip(off.u2[k].iter()) {
                    *ui += oi;
                }
            }
            running1 += 0.5 * dt * quad_form(&op.r1, &u1);
            running2 += 0.5 * dt * quad_form(&op.r2, &u2);

            let dw1 = noise.dw1[k];
            let dw2 = noise.dw2[k];
            let dvc = dt * dot(&op.in1, &z) + dw1;
            let duc = dt * dot(&op.in2, &z) + dw2;
            accumulate(&mut vtr, dvc);
            accumulate(&mut utr, duc);

            if self.record_smp {
                smp1_max = smp1_max.max(affine_max_abs(&op.smp1m, &op.smp1c, &z));
                smp2_max = smp2_max.max(affine_max_abs(&op.smp2m, &op.smp2c, &z));
            }

            if let Some(s) = series.as_mut() {
                s.z.push(z.clone());
                s.u1.push(DVector::from_column_slice(&u1));
                s.u2.push(DVector::from_column_slice(&u2));
                let x = &z[..self.n];
                let dy1c = dt * (dot(&self.obs.h1[k], x) + dot(&self.obs.h11[k], &u1) + dot(&self.obs.h12[k], &u2))
                    + self.obs.k1[k] * dw1;
                let dy2c =
                    dt * (dot(&self.obs.h2[k], x) + dot(&self.obs.h2u[k], &u2)) + self.obs.k2[k] * dw2;
                s.dy1c.push(dy1c);
                s.dy2c.push(dy2c);
                s.dvc.push(dvc);
                s.duc.push(duc);
            }

            // affine step
            matvec(&op.t, &z, &mut znext);
            for i in 0..d {
                znext[i] += op.c[i] + op.l1[i] * dw1 + op.l2[i] * dw2;
            }
            if let Some(off) = offsets {
                // dynamics response to the offset controls
                let o1 = &off.u1[k];
                let o2 = &off.u2[k];
                for i in 0..d {
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += op.bu1[i * m + l] * o1[l] + op.bu2[i * m + l] * o2[l];
                    }
                    znext[i] += acc;
                }
            }
            // jump effects at cell end
            while ev_ptr < noise.events.len() && noise.events[ev_ptr].step == k {
                let ev = &noise.events[ev_ptr];
                let jv = &op.jumps[ev.space][ev.mark];
                for i in 0..d {
                    znext[i] += jv[i];
                }
                if self.record_series {
                    match ev.space {
                        0 => y1_acc += self.obs.f1[ev.mark],
                        _ => y2_acc += self.obs.f2[ev.mark],
                    }
                }
                ev_ptr += 1;
            }
            if let Some(s) = series.as_mut() {
                y1_acc += s.dy1c[k] - self.obs.fcomp1 * dt;
                y2_acc += s.dy2c[k] - self.obs.fcomp2 * dt;
                s.y1.push(y1_acc);
                s.y2.push(y2_acc);
            }
            std::mem::swap(&mut z, &mut znext);
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::SimulationDiverged { path: path_idx, step: k });
            }
        }
        if let Some(s) = series.as_mut() {
            s.z.push(z.clone());
        }
        Ok(PathTrace {
            z_terminal: z,
            running1,
            running2,
            vcheck: vtr,
            ucheck: utr,
            smp1_max,
            smp2_max,
            series,
        })
    }
}

#[inline]
fn accumulate(tr: &mut InnovationTrace, d: f64) {
    tr.sum += d;
    let d2 = d * d;
    tr.qv += d2;
    tr.sum3 += d2 * d;
    tr.sum4 += d2 * d2;
}

#[inline]
fn matvec(m: &[f64], z: &[f64], out: &mut [f64]) {
    let d = z.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(z) {
            acc += a * b;
        }
        *o = acc;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn quad_form(r: &[f64], u: &[f64]) -> f64 {
    let m = u.len();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += u[i] * r[i * m + j] * u[j];
        }
    }
    acc
}

#[inline]
fn affine_max_abs(m: &[f64], c: &[f64], z: &[f64]) -> f64 {
    let d = z.len();
    let mut worst = 0.0f64;
    for (i, ci) in c.iter().enumerate() {
        let mut acc = *ci;
        for (a, b) in m[i * d..(i + 1) * d].iter().zip(z) {
            acc += a * b;
        }
        worst = worst.max(acc.abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

struct RowBuf {
    d: usize,
    data: Vec<f64>,
}

impl RowBuf {
    fn new(rows: usize, d: usize) -> Self {
        RowBuf { d, data: vec![0.0; rows * d] }
    }

    /// Add `scale * block` into rows [r0, r0+block.nrows) at columns
    /// [c0, c0+block.ncols).
    fn add_block(&mut self, r0: usize, c0: usize, block: &DMatrix<f64>, scale: f64) {
        for i in 0..block.nrows() {
            for j in 0..block.ncols() {
                self.data[(r0 + i) * self.d + c0 + j] += scale * block[(i, j)];
            }
        }
    }

    fn add_col_times_row(&mut self, r0: usize, col: &DVector<f64>, c0: usize, row: &DMatrix<f64>, scale: f64) {
        for i in 0..col.len() {
            for j in 0..row.ncols() {
                self.data[(r0 + i) * self.d + c0 + j] += scale * col[i] * row[(0, j)];
            }
        }
    }

    fn add_identity(&mut self, r0: usize, c0: usize, n: usize, scale: f64) {
        for i in 0..n {
            self.data[(r0 + i) * self.d + c0 + i] += scale;
        }
    }
}

/// Assemble the per-cell affine operators for the configured loop.
pub fn build_loop(spec: &ProblemSpec, cfg: &LoopConfig<'_>) -> Result<ClosedLoop> {
    let baked = BakedCoeffs::bake(spec);
    build_loop_baked(spec, &baked, cfg)
}

pub fn build_loop_baked(spec: &ProblemSpec, baked: &BakedCoeffs, cfg: &LoopConfig<'_>) -> Result<ClosedLoop> {
    let n = spec.n;
    let m = spec.m;
    let nsteps = spec.grid.steps;
    let dt = spec.grid.dt();

    let mode = match &cfg.policy {
        Policy::Leader(_) => {
            if cfg.with_yfwd {
                LoopMode::EquilibriumWithY
            } else {
                LoopMode::Equilibrium
            }
        }
        Policy::Open(o) if o.with_leader_filter => LoopMode::OpenLoopWithLeader,
        Policy::Open(_) => LoopMode::OpenLoop,
        Policy::Follower(_) => LoopMode::OpenLoop,
    };
    if cfg.with_yfwd && !matches!(mode, LoopMode::EquilibriumWithY) {
        return Err(Error::Config("forward adjoint reconstruction requires the equilibrium policy".into()));
    }
    let dim = match mode {
        LoopMode::OpenLoop => 2 * n,
        LoopMode::OpenLoopWithLeader => 3 * n,
        LoopMode::Equilibrium => 4 * n,
        LoopMode::EquilibriumWithY => 6 * n,
    };
    let (ix, ixh, ixc, ih, iy) = (0usize, n, 2 * n, 3 * n, 4 * n);

    if let Some(p) = &cfg.pert {
        if p.v_cells.len() != nsteps {
            return Err(Error::Config("perturbation schedule must have one value per cell".into()));
        }
    }

    // compensators per unit time
    let comp1 = spec.marks1.state_compensator(n);
    let comp2 = spec.marks2.state_compensator(n);

    let mut cells = Vec::with_capacity(nsteps);
    for k in 0..nsteps {
        let a = &baked.a[k];
        let b1 = &baked.b1[k];
        let b2 = &baked.b2[k];
        let c1 = &baked.c1[k];
        let c2 = &baked.c2[k];
        let h1 = &baked.h1[k];
        let h2 = &baked.h2[k];
        let k1 = baked.k1[k];
        let k2 = baked.k2[k];

        // follower gain: Sigma H1' K1^{-T} + C1
        let sigma_opt = match &cfg.policy {
            Policy::Leader(g) => g.sigma,
            Policy::Follower(g) => g.sigma,
            Policy::Open(g) => g.sigma,
        };
        let gain1: DVector<f64> = {
            let mut g = c1.clone();
            if let Some(sig) = sigma_opt {
                g += sig.at(k) * h1.transpose() / k1;
            }
            g
        };

        // u1 = U1 z + u1c, u2 = U2 z + u2c
        let mut u1m = RowBuf::new(m, dim);
        let mut u1c = DVector::zeros(m);
        let mut u2m = RowBuf::new(m, dim);
        let mut u2c = DVector::zeros(m);
        // phi representation rows (for the follower control and SMP check):
        // phi = Phi_m z + phi_c
        let mut phim = RowBuf::new(n, dim);
        let mut phic = DVector::zeros(n);

        match &cfg.policy {
            Policy::Leader(g) => {
                let p = g.p.at(k);
                let al1 = g.alpha1.at(k);
                let al2 = g.alpha2.at(k);
                let a11 = al1.view((0, 0), (n, n));
                let a12 = al1.view((0, n), (n, n));
                let a13 = al1.view((n, 0), (n, n));
                let a14 = al1.view((n, n), (n, n));
                let a21 = al2.view((0, 0), (n, 1));
                let a22 = al2.view((n, 0), (n, 1));
                // phi = a13 xcheck + a14 h + a22 (+ eps w for leader pert)
                phim.add_block(0, ixc, &a13.into_owned(), 1.0);
                phim.add_block(0, ih, &a14.into_owned(), 1.0);
                phic += DVector::from_column_slice(a22.into_owned().as_slice());
                if let Some(p) = &cfg.pert {
                    if p.player == 2 {
                        let w = p.w.ok_or_else(|| {
                            Error::Config("leader perturbation needs the follower reaction correction w".into())
                        })?;
                        phic += DVector::from_column_slice(w.at(k).as_slice()) * p.eps;
                    }
                }
                // u1 = -R1^{-1} B1' (P xhat + phi)
                let f1 = -(&baked.r1_inv[k] * b1.transpose()); // m x n
                let f1p = &f1 * p;
                u1m.add_block(0, ixh, &f1p, 1.0);
                for i in 0..m {
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += f1[(i, l)] * phim.data[l * dim + j];
                        }
                        u1m.data[i * dim + j] += acc;
                    }
                }
                u1c += &f1 * &phic;
                // u2 = -R2^{-1} B2' (a11 xcheck + (a12 + P) h + a21)
                let f2 = -(&baked.r2_inv[k] * b2.transpose());
                u2m.add_block(0, ixc, &(&f2 * a11.into_owned()), 1.0);
                u2m.add_block(0, ih, &(&f2 * (a12.into_owned() + p)), 1.0);
                u2c += &f2 * DVector::from_column_slice(a21.into_owned().as_slice());
            }
            Policy::Follower(g) => {
                let p = g.p.at(k);
                let f1 = -(&baked.r1_inv[k] * b1.transpose());
                u1m.add_block(0, ixh, &(&f1 * p), 1.0);
                let phibar = DVector::from_column_slice(g.phibar.at(k).as_slice());
                u1c += &f1 * &phibar;
                phic += phibar;
                u2c += &g.u2_cells[k];
            }
            Policy::Open(g) => {
                u1c += &g.u1_cells[k];
                u2c += &g.u2_cells[k];
            }
        }
        if let Some(p) = &cfg.pert {
            let v = &p.v_cells[k];
            match p.player {
                1 => u1c += v * p.eps,
                2 => u2c += v * p.eps,
                other => return Err(Error::Config(format!("perturbation player must be 1 or 2, got {other}"))),
            }
        }

        // innovation rows
        let mut in1 = vec![0.0; dim];
        let mut in2 = vec![0.0; dim];
        for j in 0..n {
            in1[ix + j] += h1[(0, j)] / k1;
            in1[ixh + j] -= h1[(0, j)] / k1;
        }
        let has_leader_state = dim > 2 * n;
        if has_leader_state {
            for j in 0..n {
                in2[ix + j] += h2[(0, j)] / k2;
                in2[ixc + j] -= h2[(0, j)] / k2;
            }
        }

        // dynamics rows
        let mut t = RowBuf::new(dim, dim);
        let mut cvec = DVector::zeros(dim);
        let mut l1 = vec![0.0; dim];
        let mut l2 = vec![0.0; dim];

        // truth: x' = x + dt (A x + B1 u1 + B2 u2) + C1 dW1 + C2 dW2 + jumps
        t.add_identity(ix, ix, n, 1.0);
        t.add_block(ix, ix, a, dt);
        add_control(&mut t, &mut cvec, ix, b1, &u1m, &u1c, dt, dim);
        add_control(&mut t, &mut cvec, ix, b2, &u2m, &u2c, dt, dim);
        for i in 0..n {
            l1[ix + i] += c1[i];
            l2[ix + i] += c2[i];
            cvec[ix + i] -= dt * (comp1[i] + comp2[i]);
        }

        // follower filter: xhat' = xhat + dt (A xhat + B1 u1 + B2 u2)
        //   + gain1 (dW1 + dt K1^{-1} H1 (x - xhat)) + E1 jumps
        t.add_identity(ixh, ixh, n, 1.0);
        t.add_block(ixh, ixh, a, dt);
        add_control(&mut t, &mut cvec, ixh, b1, &u1m, &u1c, dt, dim);
        add_control(&mut t, &mut cvec, ixh, b2, &u2m, &u2c, dt, dim);
        t.add_col_times_row(ixh, &gain1, ix, h1, dt / k1);
        t.add_col_times_row(ixh, &gain1, ixh, h1, -dt / k1);
        for i in 0..n {
            l1[ixh + i] += gain1[i];
            cvec[ixh + i] -= dt * comp1[i];
        }

        match &cfg.policy {
            Policy::Open(g) if g.with_leader_filter => {
                // plain leader filter: xc' = xc + dt (A xc + B1 u1 + B2 u2)
                //   + gain2 (dW2 + dt K2^{-1} H2 (x - xc)) + E2 jumps
                let gain2: DVector<f64> = {
                    let mut gg = c2.clone();
                    if let Some(xi) = g.xi1 {
                        gg = leader_gain(xi.at(k), h2, k2, c2);
                    }
                    gg
                };
                t.add_identity(ixc, ixc, n, 1.0);
                t.add_block(ixc, ixc, a, dt);
                add_control(&mut t, &mut cvec, ixc, b1, &u1m, &u1c, dt, dim);
                add_control(&mut t, &mut cvec, ixc, b2, &u2m, &u2c, dt, dim);
                t.add_col_times_row(ixc, &gain2, ix, h2, dt / k2);
                t.add_col_times_row(ixc, &gain2, ixc, h2, -dt / k2);
                for i in 0..n {
                    l2[ixc + i] += gain2[i];
                    cvec[ixc + i] -= dt * comp2[i];
                }
            }
            Policy::Leader(g) => {
                let p = g.p.at(k);
                let al1 = g.alpha1.at(k);
                let al2 = g.alpha2.at(k);
                // stacked blocks
                let f = a - &baked.s1[k] * p;
                let gmat = -(&baked.s2[k] * p);
                let mut a1 = DMatrix::zeros(2 * n, 2 * n);
                a1.view_mut((0, 0), (n, n)).copy_from(&f);
                a1.view_mut((0, n), (n, n)).copy_from(&gmat);
                a1.view_mut((n, n), (n, n)).copy_from(&f);
                let mut a2m = DMatrix::zeros(2 * n, 2 * n);
                a2m.view_mut((0, 0), (n, n)).copy_from(&(-&baked.s2[k]));
                a2m.view_mut((0, n), (n, n)).copy_from(&(-&baked.s1[k]));
                a2m.view_mut((n, 0), (n, n)).copy_from(&(-&baked.s1[k]));
                let drift = &a1 + &a2m * al1;
                // xstar' = xstar + dt (drift xstar + A2 alpha2)
                //   + A4 (dW2 + dt K2^{-1} H2 (x - xcheck)) + (D2;0) jumps
                t.add_identity(ixc, ixc, 2 * n, 1.0);
                t.add_block(ixc, ixc, &drift, dt);
                let a2a2 = &a2m * al2;
                for i in 0..2 * n {
                    cvec[ixc + i] += dt * a2a2[(i, 0)];
                }
                let gain2 = match g.xi1 {
                    Some(xi) => leader_gain(xi.at(k), h2, k2, c2),
                    None => c2.clone(),
                };
                let mut a4 = DVector::zeros(2 * n);
                a4.rows_mut(0, n).copy_from(&gain2);
                t.add_col_times_row(ixc, &a4, ix, h2, dt / k2);
                for i in 0..n {
                    // subtract gain2 K2^{-1} H2 xcheck (first block only)
                    for j in 0..n {
                        t.data[(ixc + i) * dim + ixc + j] -= dt * gain2[i] * h2[(0, j)] / k2;
                    }
                    l2[ixc + i] += gain2[i];
                    cvec[ixc + i] -= dt * comp2[i];
                }
                // perturbation sources on xstar
                if let Some(pert) = &cfg.pert {
                    if pert.player == 2 {
                        let bv = b2 * &pert.v_cells[k] * pert.eps;
                        for i in 0..n {
                            cvec[ixc + i] += dt * bv[i];
                        }
                        if let Some(w) = pert.w {
                            // A2 (0; eps w): first block -S1 eps w
                            let sw = &baked.s1[k] * DVector::from_column_slice(w.at(k).as_slice()) * pert.eps;
                            for i in 0..n {
                                cvec[ixc + i] -= dt * sw[i];
                            }
                        }
                    }
                }

                if matches!(mode, LoopMode::EquilibriumWithY) {
                    // yfwd' = yfwd - dt (A6 xstar + A1' yfwd)
                    //   + (alpha1 A4)(dW2 + dt K2^{-1} H2 (x - xcheck))
                    //   + alpha1 (D2;0) jumps - dt alpha1 (comp2;0)
                    let mut a6 = DMatrix::zeros(2 * n, 2 * n);
                    a6.view_mut((n, n), (n, n)).copy_from(&(-(p * &baked.s2[k] * p)));
                    t.add_identity(iy, iy, 2 * n, 1.0);
                    t.add_block(iy, ixc, &a6, -dt);
                    t.add_block(iy, iy, &a1.transpose(), -dt);
                    let z_load = al1 * &a4; // 2n vector
                    t.add_col_times_row(iy, &z_load, ix, h2, dt / k2);
                    for i in 0..2 * n {
                        for j in 0..n {
                            t.data[(iy + i) * dim + ixc + j] -= dt * z_load[i] * h2[(0, j)] / k2;
                        }
                        l2[iy + i] += z_load[i];
                    }
                    let mut comp2_stacked = DVector::zeros(2 * n);
                    comp2_stacked.rows_mut(0, n).copy_from(&comp2);
                    let ycomp = al1 * comp2_stacked;
                    for i in 0..2 * n {
                        cvec[iy + i] -= dt * ycomp[i];
                    }
                }
            }
            _ => {}
        }

        // stationarity residual rows
        let (mut smp1m, mut smp1c, mut smp2m, mut smp2c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        if cfg.record_smp {
            // resid1 = R1 u1 + B1'(P xhat + phi)
            let mut r1m = RowBuf::new(m, dim);
            let mut r1c = DVector::zeros(m);
            for i in 0..m {
                for j in 0..dim {
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += baked.r1[k][(i, l)] * u1m.data[l * dim + j];
                    }
                    r1m.data[i * dim + j] += acc;
                }
                r1c[i] += (0..m).map(|l| baked.r1[k][(i, l)] * u1c[l]).sum::<f64>();
            }
            let p_used: Option<&DMatrix<f64>> = match &cfg.policy {
                Policy::Leader(g) => Some(g.p.at(k)),
                Policy::Follower(g) => Some(g.p.at(k)),
                Policy::Open(_) => None,
            };
            if let Some(p) = p_used {
                let b1tp = b1.transpose() * p;
                r1m.add_block(0, ixh, &b1tp, 1.0);
                let b1t = b1.transpose();
                for i in 0..m {
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += b1t[(i, l)] * phim.data[l * dim + j];
                        }
                        r1m.data[i * dim + j] += acc;
                    }
                }
                r1c += &b1t * &phic;
            }
            smp1m = r1m.data;
            smp1c = r1c.as_slice().to_vec();
            // resid2 = R2 u2 + B2'(m + P h), m = a11 xcheck + a12 h + a21
            let mut r2m = RowBuf::new(m, dim);
            let mut r2c = DVector::zeros(m);
            for i in 0..m {
                for j in 0..dim {
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += baked.r2[k][(i, l)] * u2m.data[l * dim + j];
                    }
                    r2m.data[i * dim + j] += acc;
                }
                r2c[i] += (0..m).map(|l| baked.r2[k][(i, l)] * u2c[l]).sum::<f64>();
            }
            if let Policy::Leader(g) = &cfg.policy {
                let p = g.p.at(k);
                let al1 = g.alpha1.at(k);
                let al2 = g.alpha2.at(k);
                let b2t = b2.transpose();
                r2m.add_block(0, ixc, &(&b2t * al1.view((0, 0), (n, n)).into_owned()), 1.0);
                r2m.add_block(0, ih, &(&b2t * (al1.view((0, n), (n, n)).into_owned() + p)), 1.0);
                r2c += &b2t * DVector::from_column_slice(al2.view((0, 0), (n, 1)).into_owned().as_slice());
            }
            smp2m = r2m.data;
            smp2c = r2c.as_slice().to_vec();
        }

        // jump vectors
        let mut jumps: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for mk in &spec.marks1.marks {
            let mut v = vec![0.0; dim];
            for i in 0..n {
                v[ix + i] += mk.state_jump[i];
                v[ixh + i] += mk.state_jump[i];
            }
            jumps[0].push(v);
        }
        for mk in &spec.marks2.marks {
            let mut v = vec![0.0; dim];
            for i in 0..n {
                v[ix + i] += mk.state_jump[i];
            }
            match mode {
                LoopMode::OpenLoopWithLeader => {
                    for i in 0..n {
                        v[ixc + i] += mk.state_jump[i];
                    }
                }
                LoopMode::Equilibrium | LoopMode::EquilibriumWithY => {
                    for i in 0..n {
                        v[ixc + i] += mk.state_jump[i];
                    }
                    if matches!(mode, LoopMode::EquilibriumWithY) {
                        if let Policy::Leader(g) = &cfg.policy {
                            let al1 = g.alpha1.at(k);
                            let mut stacked = DVector::zeros(2 * n);
                            stacked.rows_mut(0, n).copy_from(&mk.state_jump);
                            let yj = al1 * stacked;
                            for i in 0..2 * n {
                                v[iy + i] += yj[i];
                            }
                        }
                    }
                }
                LoopMode::OpenLoop => {}
            }
            jumps[1].push(v);
        }

        let mut bu1 = vec![0.0; dim * m];
        let mut bu2 = vec![0.0; dim * m];
        for i in 0..n {
            for l in 0..m {
                bu1[(ix + i) * m + l] = dt * b1[(i, l)];
                bu1[(ixh + i) * m + l] = dt * b1[(i, l)];
                bu2[(ix + i) * m + l] = dt * b2[(i, l)];
                bu2[(ixh + i) * m + l] = dt * b2[(i, l)];
            }
        }
        cells.push(CellOp {
            t: t.data,
            c: cvec.as_slice().to_vec(),
            l1,
            l2,
            u1m: u1m.data,
            u1c: u1c.as_slice().to_vec(),
            u2m: u2m.data,
            u2c: u2c.as_slice().to_vec(),
            r1: baked.r1[k].as_slice().to_vec(),
            r2: baked.r2[k].as_slice().to_vec(),
            in1,
            in2,
            smp1m,
            smp1c,
            smp2m,
            smp2c,
            jumps,
            bu1,
            bu2,
        });
    }

    // initial state
    let mut z0 = vec![0.0; dim];
    for i in 0..n {
        z0[i] = spec.x0[i];
        z0[n + i] = spec.x0[i];
    }
    match mode {
        LoopMode::OpenLoopWithLeader => {
            for i in 0..n {
                z0[2 * n + i] = spec.x0[i];
            }
        }
        LoopMode::Equilibrium | LoopMode::EquilibriumWithY => {
            for i in 0..n {
                z0[2 * n + i] = spec.x0[i]; // xcheck(0) = x0, h(0) = 0
            }
            if matches!(mode, LoopMode::EquilibriumWithY) {
                if let Policy::Leader(g) = &cfg.policy {
                    // y(0) = alpha1(0) xstar(0) + alpha2(0)
                    let al1 = g.alpha1.at(0);
                    let al2 = g.alpha2.at(0);
                    let mut xs0 = DVector::zeros(2 * n);
                    xs0.rows_mut(0, n).copy_from(&spec.x0);
                    let y0 = al1 * xs0 + DVector::from_column_slice(al2.as_slice());
                    for i in 0..2 * n {
                        z0[4 * n + i] = y0[i];
                    }
                }
            }
        }
        LoopMode::OpenLoop => {}
    }

    let obs = ObsCells {
        h1: baked.h1.iter().map(|x| x.row(0).iter().copied().collect()).collect(),
        h11: baked.h11.iter().map(|x| x.row(0).iter().copied().collect()).collect(),
        h12: baked.h12.iter().map(|x| x.row(0).iter().copied().collect()).collect(),
        k1: baked.k1.clone(),
        h2: baked.h2.iter().map(|x| x.row(0).iter().copied().collect()).collect(),
        h2u: baked.h2u.iter().map(|x| x.row(0).iter().copied().collect()).collect(),
        k2: baked.k2.clone(),
        f1: spec.marks1.marks.iter().map(|m| m.obs_jump).collect(),
        f2: spec.marks2.marks.iter().map(|m| m.obs_jump).collect(),
        fcomp1: spec.marks1.obs_compensator(),
        fcomp2: spec.marks2.obs_compensator(),
    };

    Ok(ClosedLoop {
        n,
        m,
        dim,
        grid: spec.grid,
        mode,
        cells,
        z0,
        record_series: cfg.record_series,
        record_smp: cfg.record_smp,
        obs,
    })
}

fn add_control(
    t: &mut RowBuf,
    c: &mut DVector<f64>,
    row0: usize,
    b: &DMatrix<f64>,
    um: &RowBuf,
    uc: &DVector<f64>,
    dt: f64,
    dim: usize,
) {
    let n = b.nrows();
    let m = b.ncols();
    for i in 0..n {
        for j in 0..dim {
            let mut acc = 0.0;
            for l in 0..m {
                acc += b[(i, l)] * um.data[l * dim + j];
            }
            t.data[(row0 + i) * dim + j] += dt * acc;
        }
        let mut acc = 0.0;
        for l in 0..m {
            acc += b[(i, l)] * uc[l];
        }
        c[row0 + i] += dt * acc;
    }
}

// ---------------------------------------------------------------------------
// Exact moment recursion
// ---------------------------------------------------------------------------

/// Exact mean and covariance of the loop state at every grid point,
/// propagated through the same affine operators the simulator replays.
/// Besides serving the embedding fixed points, this is the deterministic
/// oracle the Monte Carlo moments are checked against.
pub fn exact_moments(lp: &ClosedLoop, spec: &ProblemSpec) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let d = lp.dim;
    let dt = lp.grid.dt();
    let mut mu = DVector::from_column_slice(&lp.z0);
    let mut cov = DMatrix::zeros(d, d);
    let mut mus = Vec::with_capacity(lp.grid.points());
    let mut covs = Vec::with_capacity(lp.grid.points());
    mus.push(mu.clone());
    covs.push(cov.clone());
    let intens: [Vec<f64>; 2] = [
        spec.marks1.marks.iter().map(|mk| mk.intensity).collect(),
        spec.marks2.marks.iter().map(|mk| mk.intensity).collect(),
    ];
    for k in 0..lp.grid.steps {
        let op = &lp.cells[k];
        let t = DMatrix::from_row_slice(d, d, &op.t);
        let c = DVector::from_column_slice(&op.c);
        let l1 = DVector::from_column_slice(&op.l1);
        let l2 = DVector::from_column_slice(&op.l2);
        let mut mu_next = &t * &mu + &c;
        let mut cov_next = &t * &cov * t.transpose();
        cov_next.ger(dt, &l1, &l1, 1.0);
        cov_next.ger(dt, &l2, &l2, 1.0);
        for space in 0..2 {
            for (mk, &nu) in intens[space].iter().enumerate() {
                if nu <= 0.0 {
                    continue;
                }
                let jv = DVector::from_column_slice(&op.jumps[space][mk]);
                let lam = nu * dt;
                mu_next.axpy(lam, &jv, 1.0);
                // Poisson count kappa: Var[kappa] = lam
                cov_next.ger(lam, &jv, &jv, 1.0);
            }
        }
        mu = mu_next;
        cov = cov_next;
        mus.push(mu.clone());
        covs.push(cov.clone());
    }
    (mus, covs)
}

/// Mean-only variant of [`exact_moments`] (the second element is empty);
/// used by the embedding fixed points, where only first moments matter.
pub fn exact_moments_mean_only(lp: &ClosedLoop, spec: &ProblemSpec) -> (Vec<DVector<f64>>, ()) {
    let d = lp.dim;
    let dt = lp.grid.dt();
    let mut mu = DVector::from_column_slice(&lp.z0);
    let mut mus = Vec::with_capacity(lp.grid.points());
    mus.push(mu.clone());
    let intens: [Vec<f64>; 2] = [
        spec.marks1.marks.iter().map(|mk| mk.intensity).collect(),
        spec.marks2.marks.iter().map(|mk| mk.intensity).collect(),
    ];
    for k in 0..lp.grid.steps {
        let op = &lp.cells[k];
        let t = DMatrix::from_row_slice(d, d, &op.t);
        let c = DVector::from_column_slice(&op.c);
        let mut mu_next = &t * &mu + &c;
        for space in 0..2 {
            for (mk, &nu) in intens[space].iter().enumerate() {
                if nu <= 0.0 {
                    continue;
                }
                let jv = DVector::from_column_slice(&op.jumps[space][mk]);
                mu_next.axpy(nu * dt, &jv, 1.0);
            }
        }
        mu = mu_next;
        mus.push(mu.clone());
    }
    (mus, ())
}

// ---------------------------------------------------------------------------
// Path bundles
// ---------------------------------------------------------------------------

/// A set of fully recorded simulated paths.
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n: usize,
    pub seed: u64,
    pub mode: LoopMode,
    pub paths: Vec<PathTrace>,
}

/// Simulate the paths of `noise` under the given policy, recording full
/// series. Intended for moderate path counts (export, diagnostics); the
/// verification suite streams summaries instead.
pub fn simulate_truth(spec: &ProblemSpec, cfg: &LoopConfig<'_>, noise: &NoiseRealization) -> Result<PathBundle> {
    let lp = build_loop(spec, cfg)?;
    let mut paths = Vec::with_capacity(noise.n_paths);
    for i in 0..noise.n_paths {
        paths.push(lp.replay(&noise.path(i), i)?);
    }
    Ok(PathBundle { grid: spec.grid, n: spec.n, seed: noise.seed, mode: lp.mode, paths })
}

/// Map every path of `noise` through `f` and collect the results, in
/// path order. Parallel when the `parallel` feature is on.
pub fn map_paths<T: Send>(
    lp: &ClosedLoop,
    noise: &NoiseRealization,
    f: impl Fn(usize, PathTrace) -> T + Sync,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..noise.n_paths)
            .into_par_iter()
            .map(|i| lp.replay(&noise.path(i), i).map(|tr| f(i, tr)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..noise.n_paths).map(|i| lp.replay(&noise.path(i), i).map(|tr| f(i, tr))).collect()
    }
}

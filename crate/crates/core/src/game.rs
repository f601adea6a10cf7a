//! Equilibrium synthesis: the follower's Riccati feedback, the leader's
//! decoupled feedback, and the embedding fixed points for the terminal
//! multipliers.
//!
//! The mean-variance terminal multipliers are found exactly: the mean
//! dynamics are affine in (lambda1, lambda2), so probing with basis
//! terminals and solving one small linear system enforces
//! lambda_i = g_i - theta_i E[state(T)] to solver precision. Mean
//! propagation reuses the same per-cell affine operators the simulator
//! replays, so the fixed point is consistent with the discrete loop the
//! verification suite samples.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filtering::{sigma_closure_ode, xi_closure_equilibrium, SigmaClosure, XiClosure};
use crate::model::{ProblemSpec, TimeGrid};
use crate::ode::{rk4, Direction, MatrixTrajectory, Stacked, BLOWUP_BOUND};
use crate::riccati::{build_stacked_system, solve_alpha, solve_riccati_p, BakedCoeffs};
use crate::sde::{build_loop_baked, ControlCells, LeaderGains, LoopConfig, Policy};

/// Affine feedback maps at every grid point, plus the decoupling blocks
/// they are assembled from.
pub struct FeedbackLaw {
    pub grid: TimeGrid,
    /// -R1^{-1} B1' P
    pub follower_gain: Vec<DMatrix<f64>>,
    /// -R1^{-1} B1' (the map applied to the costate's affine part)
    pub follower_affine: Vec<DMatrix<f64>>,
    /// -R2^{-1} B2' alpha_{1,1}
    pub leader_gain_x: Vec<DMatrix<f64>>,
    /// -R2^{-1} B2' (alpha_{1,2} + P)
    pub leader_gain_h: Vec<DMatrix<f64>>,
    /// -R2^{-1} B2' alpha_{2,1}
    pub leader_offset: Vec<DVector<f64>>,
}

/// Synthesized equilibrium: gain trajectories, multipliers and metadata.
pub struct EquilibriumSolution {
    pub spec_digest: String,
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub p: MatrixTrajectory,
    pub alpha1: MatrixTrajectory,
    pub alpha2: MatrixTrajectory,
    pub lambda1: DVector<f64>,
    pub lambda2: DVector<f64>,
    /// Fixed-point residuals |lambda_i - (g_i - theta_i E[state(T)])|.
    pub residuals: (f64, f64),
    /// E[Xstar] at every grid point (2n).
    pub mean_xstar: Vec<DVector<f64>>,
    pub sigma: SigmaClosure,
    pub xi: XiClosure,
    pub feedback: FeedbackLaw,
    pub meta: SolverMeta,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SolverMeta {
    pub version: String,
    pub dt: f64,
    pub steps: usize,
    pub offgrid_interpolation: String,
    pub sigma_approximate: bool,
    pub xi_approximate: bool,
}

impl EquilibriumSolution {
    pub fn alpha1_block(&self, k: usize, bi: usize, bj: usize) -> DMatrix<f64> {
        let n = self.n;
        self.alpha1.at(k).view((bi * n, bj * n), (n, n)).into_owned()
    }

    pub fn alpha2_block(&self, k: usize, bi: usize) -> DVector<f64> {
        let n = self.n;
        DVector::from_column_slice(self.alpha2.at(k).view((bi * n, 0), (n, 1)).into_owned().as_slice())
    }

    /// View used by the simulation engine.
    pub fn loop_gains(&self) -> LeaderGains<'_> {
        LeaderGains {
            p: &self.p,
            alpha1: &self.alpha1,
            alpha2: &self.alpha2,
            sigma: Some(&self.sigma.traj),
            xi1: Some(&self.xi.xi1),
        }
    }

    /// Loop configuration for the plain equilibrium simulation.
    pub fn loop_config(&self, with_yfwd: bool, record_series: bool, record_smp: bool) -> LoopConfig<'_> {
        LoopConfig {
            policy: Policy::Leader(self.loop_gains()),
            pert: None,
            with_yfwd,
            record_series,
            record_smp,
        }
    }

    /// Deterministic mean-control schedules of the equilibrium (one value
    /// per cell): the feedback maps evaluated along the mean state.
    pub fn mean_control_schedules(&self, spec: &ProblemSpec) -> (ControlCells, ControlCells) {
        let n = self.n;
        let mut u1 = Vec::with_capacity(self.grid.steps);
        let mut u2 = Vec::with_capacity(self.grid.steps);
        for k in 0..self.grid.steps {
            let mean = &self.mean_xstar[k];
            let xc = mean.rows(0, n).into_owned();
            let h = mean.rows(n, n).into_owned();
            // E[Xhat] = E[Xcheck] in the loop
            let (c1, c2) = self.controls_at(spec, k, &xc, &h, &xc);
            u1.push(c1);
            u2.push(c2);
        }
        (u1, u2)
    }

    /// Feedback maps evaluated at grid index k.
    pub fn controls_at(
        &self,
        _spec: &ProblemSpec,
        k: usize,
        xcheck: &DVector<f64>,
        h: &DVector<f64>,
        xhat: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let p = self.p.at(k);
        let a13 = self.alpha1_block(k, 1, 0);
        let a14 = self.alpha1_block(k, 1, 1);
        let a22 = self.alpha2_block(k, 1);
        let phi = &a13 * xcheck + &a14 * h + a22;
        let u2 = &self.feedback.leader_gain_x[k] * xcheck
            + &self.feedback.leader_gain_h[k] * h
            + &self.feedback.leader_offset[k];
        let _ = p;
        let u1 = &self.feedback.follower_gain[k] * xhat + &self.feedback.follower_affine[k] * phi;
        (u1, u2)
    }
}

/// Standalone follower solution for a deterministic leader schedule.
pub struct FollowerSolution {
    pub p: MatrixTrajectory,
    /// Deterministic costate phi-bar at grid points (n x 1).
    pub phibar: MatrixTrajectory,
    pub lambda1: DVector<f64>,
}

/// Solve P and the deterministic costate for the given terminal
/// multiplier and deterministic leader schedule:
/// -phi' = (A' - P S1) phi + P B2 u2, phi(T) = lambda1.
pub fn solve_follower(spec: &ProblemSpec, u2_cells: &ControlCells, lambda1: &DVector<f64>) -> Result<FollowerSolution> {
    let baked = BakedCoeffs::bake(spec);
    solve_follower_baked(spec, &baked, u2_cells, lambda1)
}

fn solve_follower_baked(
    spec: &ProblemSpec,
    baked: &BakedCoeffs,
    u2_cells: &ControlCells,
    lambda1: &DVector<f64>,
) -> Result<FollowerSolution> {
    let n = spec.n;
    if u2_cells.len() != spec.grid.steps {
        return Err(Error::Config("u2 schedule must have one value per cell".into()));
    }
    let p_t = DMatrix::identity(n, n) * spec.cost.theta1;
    let phi_t = DMatrix::from_column_slice(n, 1, lambda1.as_slice());
    let states = rk4(
        &spec.grid,
        Direction::Backward,
        Stacked(vec![p_t, phi_t]),
        BLOWUP_BOUND,
        "follower costate",
        |cell, y| {
            let p = &y.0[0];
            let phi = &y.0[1];
            let a = &baked.a[cell];
            let s1 = &baked.s1[cell];
            let pa = p * a;
            let dp = -(&pa + pa.transpose() - p * s1 * p);
            let src = p * &baked.b2[cell] * &u2_cells[cell];
            let mut dphi = -((a.transpose() - p * s1) * phi);
            for i in 0..dphi.nrows() {
                dphi[(i, 0)] -= src[i];
            }
            Stacked(vec![dp, dphi])
        },
    )?;
    let mut pv = Vec::with_capacity(states.len());
    let mut phiv = Vec::with_capacity(states.len());
    for s in states {
        let mut it = s.0.into_iter();
        let mut p = it.next().unwrap();
        let t = p.transpose();
        p += t;
        p *= 0.5;
        pv.push(p);
        phiv.push(it.next().unwrap());
    }
    Ok(FollowerSolution {
        p: MatrixTrajectory::new(spec.grid, pv),
        phibar: MatrixTrajectory::new(spec.grid, phiv),
        lambda1: lambda1.clone(),
    })
}

/// Mean of the follower-standalone loop at T via the discrete recursion
/// the simulator replays (expectation of the affine update).
fn follower_mean_terminal(
    spec: &ProblemSpec,
    baked: &BakedCoeffs,
    sol: &FollowerSolution,
    sigma: &SigmaClosure,
    u2_cells: &ControlCells,
) -> Result<DVector<f64>> {
    let cfg = LoopConfig {
        policy: Policy::Follower(crate::sde::FollowerGains {
            p: &sol.p,
            phibar: &sol.phibar,
            sigma: Some(&sigma.traj),
            u2_cells,
        }),
        pert: None,
        with_yfwd: false,
        record_series: false,
        record_smp: false,
    };
    let lp = build_loop_baked(spec, baked, &cfg)?;
    let mu = exact_mean(&lp, spec);
    Ok(mu.rows(0, spec.n).into_owned())
}

/// Mean of the loop state at T (the jump compensators cancel in
/// expectation, so only the affine part and the mean jump effects act).
fn exact_mean(lp: &crate::sde::ClosedLoop, spec: &ProblemSpec) -> DVector<f64> {
    let (mus, _) = crate::sde::exact_moments_mean_only(lp, spec);
    mus.last().unwrap().clone()
}

/// Embedding fixed point of the follower for a deterministic leader
/// schedule: lambda1 = g1 - theta1 E[Xhat(T)], solved exactly by probing
/// the affine map lambda -> E[Xhat(T)].
pub struct Lambda1Solution {
    pub lambda1: DVector<f64>,
    pub follower: FollowerSolution,
    pub residual: f64,
}

pub fn fixed_point_lambda1(spec: &ProblemSpec, u2_cells: &ControlCells) -> Result<Lambda1Solution> {
    let baked = BakedCoeffs::bake(spec);
    let sigma = sigma_closure_ode(spec)?;
    let n = spec.n;
    let theta1 = spec.cost.theta1;
    let mean_for = |lam: &DVector<f64>| -> Result<DVector<f64>> {
        let sol = solve_follower_baked(spec, &baked, u2_cells, lam)?;
        follower_mean_terminal(spec, &baked, &sol, &sigma, u2_cells)
    };
    let m0 = mean_for(&DVector::zeros(n))?;
    let mut mmat = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let mj = mean_for(&e)?;
        mmat.set_column(j, &(&mj - &m0));
    }
    // (I + theta1 M) lambda = g1 - theta1 m0
    let lhs = DMatrix::identity(n, n) + &mmat * theta1;
    let rhs = &spec.cost.g1 - &m0 * theta1;
    let lambda1 = lhs.clone().lu().solve(&rhs).ok_or_else(|| Error::FixedPointSingular {
        details: format!(
            "I + theta1 M singular; eigenvalues {:?}",
            lhs.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect::<Vec<_>>()
        ),
    })?;
    let follower = solve_follower_baked(spec, &baked, u2_cells, &lambda1)?;
    let mean_t = follower_mean_terminal(spec, &baked, &follower, &sigma, u2_cells)?;
    let residual = (&lambda1 - (&spec.cost.g1 - &mean_t * theta1)).amax();
    Ok(Lambda1Solution { lambda1, follower, residual })
}

/// Full leader synthesis: P, the decoupling pair, the joint embedding
/// fixed point for (lambda1, lambda2), and the assembled feedback law.
pub fn solve_leader(spec: &ProblemSpec) -> Result<EquilibriumSolution> {
    let rep = spec.validate();
    if !rep.is_valid() {
        return Err(Error::InvalidSpec(rep));
    }
    if !spec.h1_is_zero() {
        return Err(Error::UnsupportedMode(
            "leader synthesis requires H1 = 0 (follower observation drift uninformative)".into(),
        ));
    }
    let baked = BakedCoeffs::bake(spec);
    let n = spec.n;
    let p = solve_riccati_p(spec)?;
    let sys = build_stacked_system(spec, p.clone())?;
    let sigma = sigma_closure_ode(spec)?;
    let xi = xi_closure_equilibrium(spec, &p)?;

    // probe the affine map (lambda1, lambda2) -> E[X(T)]
    let mean_for = |lam1: &DVector<f64>, lam2: &DVector<f64>| -> Result<DVector<f64>> {
        let alphas = solve_alpha(spec, &sys, lam1, lam2)?;
        let gains = LeaderGains {
            p: &p,
            alpha1: &alphas.alpha1,
            alpha2: &alphas.alpha2,
            sigma: Some(&sigma.traj),
            xi1: Some(&xi.xi1),
        };
        let cfg = LoopConfig {
            policy: Policy::Leader(gains),
            pert: None,
            with_yfwd: false,
            record_series: false,
            record_smp: false,
        };
        let lp = build_loop_baked(spec, &baked, &cfg)?;
        Ok(exact_mean(&lp, spec).rows(0, n).into_owned())
    };
    let zero = DVector::zeros(n);
    let m0 = mean_for(&zero, &zero)?;
    let mut mmat = DMatrix::zeros(n, 2 * n);
    for j in 0..2 * n {
        let mut lam1 = DVector::zeros(n);
        let mut lam2 = DVector::zeros(n);
        if j < n {
            lam1[j] = 1.0;
        } else {
            lam2[j - n] = 1.0;
        }
        let mj = mean_for(&lam1, &lam2)?;
        mmat.set_column(j, &(&mj - &m0));
    }
    // p = (lambda1; lambda2): (I + [theta1 M; theta2 M]) p = (g1 - theta1 m0; g2 - theta2 m0)
    let (th1, th2) = (spec.cost.theta1, spec.cost.theta2);
    let mut lhs = DMatrix::identity(2 * n, 2 * n);
    for j in 0..2 * n {
        for i in 0..n {
            lhs[(i, j)] += th1 * mmat[(i, j)];
            lhs[(n + i, j)] += th2 * mmat[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(2 * n);
    for i in 0..n {
        rhs[i] = spec.cost.g1[i] - th1 * m0[i];
        rhs[n + i] = spec.cost.g2[i] - th2 * m0[i];
    }
    let sol = lhs.clone().lu().solve(&rhs).ok_or_else(|| Error::FixedPointSingular {
        details: format!(
            "embedding system singular; eigenvalues {:?}",
            lhs.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect::<Vec<_>>()
        ),
    })?;
    let lambda1 = sol.rows(0, n).into_owned();
    let lambda2 = sol.rows(n, n).into_owned();

    let alphas = solve_alpha(spec, &sys, &lambda1, &lambda2)?;
    // final mean run for residuals and the stored mean trajectory
    let gains = LeaderGains {
        p: &p,
        alpha1: &alphas.alpha1,
        alpha2: &alphas.alpha2,
        sigma: Some(&sigma.traj),
        xi1: Some(&xi.xi1),
    };
    let cfg = LoopConfig {
        policy: Policy::Leader(gains),
        pert: None,
        with_yfwd: false,
        record_series: false,
        record_smp: false,
    };
    let lp = build_loop_baked(spec, &baked, &cfg)?;
    let (mus, _) = crate::sde::exact_moments_mean_only(&lp, spec);
    let mean_xt = mus.last().unwrap().rows(0, n).into_owned();
    let r1 = (&lambda1 - (&spec.cost.g1 - &mean_xt * th1)).amax();
    let r2 = (&lambda2 - (&spec.cost.g2 - &mean_xt * th2)).amax();
    let mean_xstar: Vec<DVector<f64>> = mus.iter().map(|mu| mu.rows(2 * n, 2 * n).into_owned()).collect();

    let feedback = assemble_feedback(spec, &p, &alphas.alpha1, &alphas.alpha2);
    let meta = SolverMeta {
        version: env!("CARGO_PKG_VERSION").to_string(),
        dt: spec.grid.dt(),
        steps: spec.grid.steps,
        offgrid_interpolation: "linear".to_string(),
        sigma_approximate: sigma.approximate,
        xi_approximate: xi.approximate,
    };
    Ok(EquilibriumSolution {
        spec_digest: spec.digest(),
        grid: spec.grid,
        n,
        m: spec.m,
        p,
        alpha1: alphas.alpha1,
        alpha2: alphas.alpha2,
        lambda1,
        lambda2,
        residuals: (r1, r2),
        mean_xstar,
        sigma,
        xi,
        feedback,
        meta,
    })
}

fn assemble_feedback(
    spec: &ProblemSpec,
    p: &MatrixTrajectory,
    alpha1: &MatrixTrajectory,
    alpha2: &MatrixTrajectory,
) -> FeedbackLaw {
    let n = spec.n;
    let points = spec.grid.points();
    let mut follower_gain = Vec::with_capacity(points);
    let mut follower_affine = Vec::with_capacity(points);
    let mut leader_gain_x = Vec::with_capacity(points);
    let mut leader_gain_h = Vec::with_capacity(points);
    let mut leader_offset = Vec::with_capacity(points);
    for k in 0..points {
        let t = spec.grid.t(k).min(spec.grid.horizon);
        let b1 = spec.b1.value_at(t);
        let b2 = spec.b2.value_at(t);
        let r1 = spec.cost.r1.value_at(t).clone().cholesky().expect("R1 > 0").inverse();
        let r2 = spec.cost.r2.value_at(t).clone().cholesky().expect("R2 > 0").inverse();
        let f1 = -(&r1 * b1.transpose());
        let f2 = -(&r2 * b2.transpose());
        follower_gain.push(&f1 * p.at(k));
        follower_affine.push(f1.clone());
        let a11 = alpha1.at(k).view((0, 0), (n, n)).into_owned();
        let a12 = alpha1.at(k).view((0, n), (n, n)).into_owned();
        let a21 = DVector::from_column_slice(alpha2.at(k).view((0, 0), (n, 1)).into_owned().as_slice());
        leader_gain_x.push(&f2 * a11);
        leader_gain_h.push(&f2 * (a12 + p.at(k)));
        leader_offset.push(&f2 * a21);
    }
    FeedbackLaw { grid: spec.grid, follower_gain, follower_affine, leader_gain_x, leader_gain_h, leader_offset }
}

/// Equilibrium feedback controls at an arbitrary time; off-grid times use
/// linear interpolation of the gain trajectories (flagged in metadata).
pub fn feedback_controls(
    eq: &EquilibriumSolution,
    spec: &ProblemSpec,
    t: f64,
    xcheck: &DVector<f64>,
    h: &DVector<f64>,
    xhat: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = eq.n;
    let dt = eq.grid.dt();
    let s = t / dt;
    let on_grid = (s - s.round()).abs() < 1e-9;
    if on_grid {
        let k = (s.round() as usize).min(eq.grid.steps);
        return controls_from_values(spec, t, eq.p.at(k), eq.alpha1.at(k), eq.alpha2.at(k), xcheck, h, xhat, n);
    }
    let p = eq.p.interpolate(t);
    let a1 = eq.alpha1.interpolate(t);
    let a2 = eq.alpha2.interpolate(t);
    controls_from_values(spec, t, &p, &a1, &a2, xcheck, h, xhat, n)
}

#[allow(clippy::too_many_arguments)]
fn controls_from_values(
    spec: &ProblemSpec,
    t: f64,
    p: &DMatrix<f64>,
    alpha1: &DMatrix<f64>,
    alpha2: &DMatrix<f64>,
    xcheck: &DVector<f64>,
    h: &DVector<f64>,
    xhat: &DVector<f64>,
    n: usize,
) -> (DVector<f64>, DVector<f64>) {
    let b1 = spec.b1.value_at(t);
    let b2 = spec.b2.value_at(t);
    let r1 = spec.cost.r1.value_at(t).clone().cholesky().expect("R1 > 0").inverse();
    let r2 = spec.cost.r2.value_at(t).clone().cholesky().expect("R2 > 0").inverse();
    let f1 = -(&r1 * b1.transpose());
    let f2 = -(&r2 * b2.transpose());
    let a11 = alpha1.view((0, 0), (n, n));
    let a12 = alpha1.view((0, n), (n, n));
    let a13 = alpha1.view((n, 0), (n, n));
    let a14 = alpha1.view((n, n), (n, n));
    let a21 = alpha2.view((0, 0), (n, 1));
    let a22 = alpha2.view((n, 0), (n, 1));
    let phi = a13 * xcheck + a14 * h + DVector::from_column_slice(a22.into_owned().as_slice());
    let u1 = &f1 * (p * xhat + phi);
    let u2 = &f2
        * (a11 * xcheck
            + (a12.into_owned() + p) * h
            + DVector::from_column_slice(a21.into_owned().as_slice()));
    (u1, u2)
}

/// Deterministic shift of the follower's costate response to an additive
/// leader perturbation direction v. The perturbed costate
/// phi' = phi_repr + eps w satisfies the backward costate equation with
/// driver P B2 (u2_fb + eps v) precisely when
/// -w' = (A' - P S1 - alpha_{1,3} S1) w + (P + alpha_{1,3}) B2 v,
/// w(T) = 0; the alpha_{1,3} terms account for the representation's own
/// response to the shifted state flow.
pub fn follower_reaction_correction(
    spec: &ProblemSpec,
    eq: &EquilibriumSolution,
    v_cells: &ControlCells,
) -> Result<MatrixTrajectory> {
    let baked = BakedCoeffs::bake(spec);
    let n = spec.n;
    let states = rk4(
        &spec.grid,
        Direction::Backward,
        Stacked(vec![DMatrix::zeros(n, 1)]),
        BLOWUP_BOUND,
        "reaction correction",
        |cell, y| {
            let w = &y.0[0];
            let a = &baked.a[cell];
            let s1 = &baked.s1[cell];
            let p = eq.p.at(cell);
            let a13 = eq.alpha1.at(cell).view((n, 0), (n, n)).into_owned();
            let src = (p + &a13) * &baked.b2[cell] * &v_cells[cell];
            let mut d = -((a.transpose() - p * s1 - a13 * s1) * w);
            for i in 0..n {
                d[(i, 0)] -= src[i];
            }
            Stacked(vec![d])
        },
    )?;
    Ok(MatrixTrajectory::new(
        spec.grid,
        states.into_iter().map(|s| s.0.into_iter().next().unwrap()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::scalar_spec;

    fn zero_u2(spec: &ProblemSpec) -> ControlCells {
        vec![DVector::zeros(spec.m); spec.grid.steps]
    }

    #[test]
    fn follower_no_channel_zero_feedback() {
        let spec = scalar_spec(0.3, 0.0, 0.0, 1.0, 1.0, 200);
        let u2 = zero_u2(&spec);
        let sol = solve_follower(&spec, &u2, &DVector::from_element(1, 0.7)).unwrap();
        // B1 = 0: P follows the linear equation but the gain -R1^{-1}B1'P = 0
        let gain = -(spec.b1.value_at(0.0).transpose() * sol.p.at(0));
        assert_eq!(gain[(0, 0)], 0.0);
    }

    #[test]
    fn follower_zero_terminal_and_source() {
        let spec = scalar_spec(0.2, 1.0, 1.0, 1.0, 1.0, 200);
        let u2 = zero_u2(&spec);
        let sol = solve_follower(&spec, &u2, &DVector::zeros(1)).unwrap();
        assert!(sol.phibar.max_abs() < 1e-14);
    }

    #[test]
    fn follower_costate_integrating_factor_oracle() {
        // A=0, B1=R1=theta1=1, u2=0, lambda1=1:
        // p(t) = 1/(1+(T-t)), phi(t) = lambda1/(1+(T-t)).
        let spec = scalar_spec(0.0, 1.0, 0.0, 1.0, 1.0, 1000);
        let u2 = zero_u2(&spec);
        let sol = solve_follower(&spec, &u2, &DVector::from_element(1, 1.0)).unwrap();
        let mut max_err: f64 = 0.0;
        for (k, v) in sol.phibar.values.iter().enumerate() {
            let t = spec.grid.t(k);
            let exact = 1.0 / (1.0 + (1.0 - t));
            max_err = max_err.max((v[(0, 0)] - exact).abs());
        }
        assert!(max_err < 1e-8, "max err {max_err:.3e}");
        assert!((sol.phibar.initial()[(0, 0)] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn lambda1_no_dynamics() {
        // B1 = B2 = 0, A = 0: Xhat(T) = x0 regardless, so
        // lambda1 = g1 - theta1 x0 = 1 - theta1.
        let theta1 = 1.7;
        let spec = scalar_spec(0.0, 0.0, 0.0, theta1, 1.0, 100);
        let sol = fixed_point_lambda1(&spec, &zero_u2(&spec)).unwrap();
        assert!((sol.lambda1[0] - (1.0 - theta1)).abs() < 1e-12);
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn lambda1_exponential_mean_oracle() {
        // B1 = 0, A = a, u2 = 0: E[Xhat(T)] = e^{aT} x0 (Euler product in
        // the discrete loop), lambda1 = 1 - theta1 e^{aT} x0.
        let a = 0.5;
        let spec = scalar_spec(a, 0.0, 0.0, 1.0, 1.0, 1000);
        let sol = fixed_point_lambda1(&spec, &zero_u2(&spec)).unwrap();
        let exact = 1.0 - (a * 1.0f64).exp();
        // Euler mean bias is O(dt)
        assert!((sol.lambda1[0] - exact).abs() < 1e-3, "{} vs {exact}", sol.lambda1[0]);
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn lambda1_self_consistency_general() {
        let mut spec = scalar_spec(0.4, 1.0, 0.6, 1.3, 1.0, 500);
        spec.c1 = crate::model::Schedule::scalar(0.2);
        let u2: ControlCells = (0..spec.grid.steps)
            .map(|k| DVector::from_element(1, 0.3 * (spec.grid.t(k) - 0.5)))
            .collect();
        let sol = fixed_point_lambda1(&spec, &u2).unwrap();
        assert!(sol.residual < 1e-8, "residual {}", sol.residual);
    }

    #[test]
    fn leader_requires_h1_zero() {
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 100);
        spec.h1 = crate::model::Schedule::scalar(1.0);
        assert!(matches!(solve_leader(&spec), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn leader_no_channel_reduces_to_follower_loop() {
        // B2 = 0: the leader cannot act; u2 = 0 and lambda2 = g2 - theta2 E[X(T)].
        let spec = scalar_spec(0.0, 1.0, 0.0, 1.0, 1.0, 400);
        let eq = solve_leader(&spec).unwrap();
        for k in 0..eq.grid.points() {
            assert_eq!(eq.feedback.leader_gain_x[k][(0, 0)], 0.0);
            assert_eq!(eq.feedback.leader_offset[k][0], 0.0);
        }
        assert!(eq.residuals.0 < 1e-10);
        assert!(eq.residuals.1 < 1e-10);
    }

    #[test]
    fn leader_fixed_point_residuals_toy_instance() {
        // the desk-scale instance: residuals at solver precision
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 1000);
        spec.c1 = crate::model::Schedule::scalar(0.2);
        spec.c2 = crate::model::Schedule::scalar(0.2);
        spec.marks1.marks.push(crate::model::Mark {
            label: "e1".into(),
            intensity: 1.0,
            state_jump: DVector::from_element(1, 0.1),
            obs_jump: 0.5,
        });
        spec.marks2.marks.push(crate::model::Mark {
            label: "e2".into(),
            intensity: 1.0,
            state_jump: DVector::from_element(1, 0.1),
            obs_jump: 0.4,
        });
        let eq = solve_leader(&spec).unwrap();
        assert!(eq.residuals.0 < 1e-6, "lambda1 residual {}", eq.residuals.0);
        assert!(eq.residuals.1 < 1e-6, "lambda2 residual {}", eq.residuals.1);
        // terminal structure of the decoupling pair
        let a1t = eq.alpha1.terminal();
        assert_eq!(a1t[(0, 0)], 1.0);
        assert_eq!(a1t[(1, 1)], 0.0);
        let a2t = eq.alpha2.terminal();
        assert_eq!(a2t[(0, 0)], eq.lambda2[0]);
        assert_eq!(a2t[(1, 0)], eq.lambda1[0]);
    }

    #[test]
    fn feedback_controls_linear_and_terminal() {
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 200);
        spec.c2 = crate::model::Schedule::scalar(0.3);
        let eq = solve_leader(&spec).unwrap();
        let t = 1.0;
        let xc = DVector::from_element(1, 0.8);
        let h = DVector::from_element(1, -0.3);
        let xh = DVector::from_element(1, 0.5);
        let (u1, u2) = feedback_controls(&eq, &spec, t, &xc, &h, &xh);
        // at T: alpha1(T) = [[theta2,0],[0,0]], alpha2(T) = (lambda2; lambda1)
        let expect_u2 = -(1.0 * xc[0] + eq.p.terminal()[(0, 0)] * h[0] + eq.lambda2[0]);
        assert!((u2[0] - expect_u2).abs() < 1e-12);
        let expect_u1 = -(eq.p.terminal()[(0, 0)] * xh[0] + eq.lambda1[0]);
        assert!((u1[0] - expect_u1).abs() < 1e-12);
        // linearity: doubling the states with zero offsets doubles controls
        let (u1a, u2a) = feedback_controls(&eq, &spec, 0.5, &xc, &h, &xh);
        let (u1b, u2b) = feedback_controls(&eq, &spec, 0.5, &(2.0 * &xc), &(2.0 * &h), &(2.0 * &xh));
        let off1 = {
            let (z1, _) = feedback_controls(&eq, &spec, 0.5, &DVector::zeros(1), &DVector::zeros(1), &DVector::zeros(1));
            z1
        };
        let off2 = {
            let (_, z2) = feedback_controls(&eq, &spec, 0.5, &DVector::zeros(1), &DVector::zeros(1), &DVector::zeros(1));
            z2
        };
        assert!(((u1b[0] - off1[0]) - 2.0 * (u1a[0] - off1[0])).abs() < 1e-12);
        assert!(((u2b[0] - off2[0]) - 2.0 * (u2a[0] - off2[0])).abs() < 1e-12);
    }

    #[test]
    fn zero_channels_zero_controls() {
        let spec = scalar_spec(0.3, 0.0, 0.0, 1.0, 1.0, 100);
        let eq = solve_leader(&spec).unwrap();
        let (u1, u2) = feedback_controls(
            &eq,
            &spec,
            0.37,
            &DVector::from_element(1, 5.0),
            &DVector::from_element(1, -2.0),
            &DVector::from_element(1, 3.0),
        );
        assert_eq!(u1[0], 0.0);
        assert_eq!(u2[0], 0.0);
    }
}

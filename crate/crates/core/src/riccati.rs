//! The follower's Riccati equation and the leader's stacked decoupling
//! system (alpha_1, alpha_2).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::ode::{rk4, Direction, MatrixTrajectory, Stacked, BLOWUP_BOUND};

/// Per-cell coefficient tables shared by the Riccati solves and the
/// simulation engine.
pub struct BakedCoeffs {
    pub a: Vec<DMatrix<f64>>,
    pub b1: Vec<DMatrix<f64>>,
    pub b2: Vec<DMatrix<f64>>,
    pub c1: Vec<DVector<f64>>,
    pub c2: Vec<DVector<f64>>,
    pub h1: Vec<DMatrix<f64>>,
    pub h11: Vec<DMatrix<f64>>,
    pub h12: Vec<DMatrix<f64>>,
    pub k1: Vec<f64>,
    pub h2: Vec<DMatrix<f64>>,
    pub h2u: Vec<DMatrix<f64>>,
    pub k2: Vec<f64>,
    pub r1: Vec<DMatrix<f64>>,
    pub r2: Vec<DMatrix<f64>>,
    pub r1_inv: Vec<DMatrix<f64>>,
    pub r2_inv: Vec<DMatrix<f64>>,
    /// S_i = B_i R_i^{-1} B_i^T
    pub s1: Vec<DMatrix<f64>>,
    pub s2: Vec<DMatrix<f64>>,
}

impl BakedCoeffs {
    pub fn bake(spec: &ProblemSpec) -> Self {
        let g = &spec.grid;
        let col = |s: &crate::model::Schedule| -> Vec<DVector<f64>> {
            s.bake_cells(g).into_iter().map(|m| m.column(0).into_owned()).collect()
        };
        let sc = |s: &crate::model::Schedule| -> Vec<f64> {
            s.bake_cells(g).into_iter().map(|m| m[(0, 0)]).collect()
        };
        let r1 = spec.cost.r1.bake_cells(g);
        let r2 = spec.cost.r2.bake_cells(g);
        let inv = |rs: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
            rs.iter()
                .map(|r| r.clone().cholesky().expect("validated R > 0").inverse())
                .collect()
        };
        let r1_inv = inv(&r1);
        let r2_inv = inv(&r2);
        let b1 = spec.b1.bake_cells(g);
        let b2 = spec.b2.bake_cells(g);
        let s_of = |b: &[DMatrix<f64>], rinv: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
            b.iter().zip(rinv).map(|(bi, ri)| bi * ri * bi.transpose()).collect()
        };
        let s1 = s_of(&b1, &r1_inv);
        let s2 = s_of(&b2, &r2_inv);
        BakedCoeffs {
            a: spec.a.bake_cells(g),
            b1,
            b2,
            c1: col(&spec.c1),
            c2: col(&spec.c2),
            h1: spec.h1.bake_cells(g),
            h11: spec.h11.bake_cells(g),
            h12: spec.h12.bake_cells(g),
            k1: sc(&spec.k1),
            h2: spec.h2.bake_cells(g),
            h2u: spec.h2u.bake_cells(g),
            k2: sc(&spec.k2),
            r1,
            r2,
            r1_inv,
            r2_inv,
            s1,
            s2,
        }
    }
}

fn riccati_rhs(a: &DMatrix<f64>, s1: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    // dP/dt = -(P A + A^T P - P S1 P)
    let pa = p * a;
    -(&pa + pa.transpose() - p * s1 * p)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Backward RK4 solve of the follower Riccati equation
/// P' + P A + A^T P - P S1 P = 0, P(T) = theta_1 I. The result is
/// symmetrized at every grid point.
pub fn solve_riccati_p(spec: &ProblemSpec) -> Result<MatrixTrajectory> {
    let baked = BakedCoeffs::bake(spec);
    solve_riccati_p_baked(spec, &baked)
}

pub fn solve_riccati_p_baked(spec: &ProblemSpec, baked: &BakedCoeffs) -> Result<MatrixTrajectory> {
    let n = spec.n;
    let terminal = DMatrix::identity(n, n) * spec.cost.theta1;
    let states = rk4(
        &spec.grid,
        Direction::Backward,
        Stacked(vec![terminal]),
        BLOWUP_BOUND,
        "Riccati P",
        |cell, y| Stacked(vec![riccati_rhs(&baked.a[cell], &baked.s1[cell], &y.0[0])]),
    )?;
    let mut values: Vec<DMatrix<f64>> = states.into_iter().map(|s| s.0.into_iter().next().unwrap()).collect();
    for v in &mut values {
        symmetrize(v);
    }
    Ok(MatrixTrajectory::new(spec.grid, values))
}

/// Minimum eigenvalue over the trajectory (PSD check support).
pub fn min_eigenvalue(traj: &MatrixTrajectory) -> f64 {
    traj.values
        .iter()
        .flat_map(|m| m.clone().symmetric_eigenvalues().iter().copied().collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

/// The leader's stacked 2n-dimensional system blocks. Built from the
/// problem coefficients and the solved P; the innovation gain block A4
/// additionally needs Xi_1 supplied by the caller.
pub struct StackedSystem {
    pub n: usize,
    pub baked: BakedCoeffs,
    pub p: MatrixTrajectory,
    /// F = A - S1 P per cell.
    pub f: Vec<DMatrix<f64>>,
    /// G = -S2 P per cell.
    pub g: Vec<DMatrix<f64>>,
}

impl StackedSystem {
    /// A1 = [[A - S1 P, -S2 P], [0, A - S1 P]].
    pub fn a1(&self, cell: usize) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.f[cell]);
        m.view_mut((0, n), (n, n)).copy_from(&self.g[cell]);
        m.view_mut((n, n), (n, n)).copy_from(&self.f[cell]);
        m
    }

    /// A2 = [[-S2, -S1], [-S1, 0]].
    pub fn a2(&self, cell: usize) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&(-&self.baked.s2[cell]));
        m.view_mut((0, n), (n, n)).copy_from(&(-&self.baked.s1[cell]));
        m.view_mut((n, 0), (n, n)).copy_from(&(-&self.baked.s1[cell]));
        m
    }

    /// A6 = [[0, 0], [0, -P S2 P]].
    pub fn a6(&self, cell: usize) -> DMatrix<f64> {
        let n = self.n;
        let p = self.p.at(cell);
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((n, n), (n, n)).copy_from(&(-(p * &self.baked.s2[cell] * p)));
        m
    }

    /// A4 = (Xi1 H2^T K2^{-T} + C2; 0); the upper block is the leader
    /// filter's innovation gain.
    pub fn a4(&self, cell: usize, xi1: &DMatrix<f64>) -> DVector<f64> {
        let n = self.n;
        let gain = leader_gain(xi1, &self.baked.h2[cell], self.baked.k2[cell], &self.baked.c2[cell]);
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).copy_from(&gain);
        v
    }

    /// A5(e) = (D2(e); 0); the lower block is zero.
    pub fn a5(&self, state_jump: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).copy_from(state_jump);
        v
    }
}

/// Innovation gain Xi1 H2^T K2^{-T} + C2 of the leader filter.
pub fn leader_gain(xi1: &DMatrix<f64>, h2: &DMatrix<f64>, k2: f64, c2: &DVector<f64>) -> DVector<f64> {
    let mut g = xi1 * h2.transpose() / k2;
    g += c2;
    g.column(0).into_owned()
}

/// Build the stacked system; requires leader mode (H1 identically zero).
pub fn build_stacked_system(spec: &ProblemSpec, p: MatrixTrajectory) -> Result<StackedSystem> {
    if !spec.h1_is_zero() {
        return Err(Error::UnsupportedMode(
            "leader synthesis requires H1 = 0 (follower observation drift uninformative)".into(),
        ));
    }
    let baked = BakedCoeffs::bake(spec);
    let n = spec.n;
    let mut f = Vec::with_capacity(spec.grid.steps);
    let mut g = Vec::with_capacity(spec.grid.steps);
    for cell in 0..spec.grid.steps {
        let pk = p.at(cell);
        f.push(&baked.a[cell] - &baked.s1[cell] * pk);
        g.push(-(&baked.s2[cell] * pk));
    }
    Ok(StackedSystem { n, baked, p, f, g })
}

/// Solution of the decoupling pair: alpha_1 (2n x 2n) and alpha_2 (2n).
pub struct AlphaSolution {
    pub alpha1: MatrixTrajectory,
    pub alpha2: MatrixTrajectory,
}

/// Backward RK4 solve of
///   -alpha_1' = A1^T alpha_1 + alpha_1 A1 + alpha_1 A2 alpha_1 + A6,
///   -alpha_2' = (alpha_1 A2 + A1^T) alpha_2,
/// with alpha_1(T) = [[theta_2 I, 0], [0, 0]], alpha_2(T) = (lambda2; lambda1).
///
/// P is re-integrated jointly so the quadratic blocks stay stage-consistent;
/// alpha_1 is deliberately not symmetrized (no symmetry claim holds for it).
pub fn solve_alpha(
    spec: &ProblemSpec,
    sys: &StackedSystem,
    lambda1: &DVector<f64>,
    lambda2: &DVector<f64>,
) -> Result<AlphaSolution> {
    let n = spec.n;
    let mut a1_t = DMatrix::zeros(2 * n, 2 * n);
    a1_t.view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * spec.cost.theta2));
    let mut a2_t = DMatrix::zeros(2 * n, 1);
    a2_t.view_mut((0, 0), (n, 1)).copy_from(&DMatrix::from_column_slice(n, 1, lambda2.as_slice()));
    a2_t.view_mut((n, 0), (n, 1)).copy_from(&DMatrix::from_column_slice(n, 1, lambda1.as_slice()));
    let p_t = DMatrix::identity(n, n) * spec.cost.theta1;

    let baked = &sys.baked;
    let states = rk4(
        &spec.grid,
        Direction::Backward,
        Stacked(vec![p_t, a1_t, a2_t]),
        BLOWUP_BOUND,
        "alpha decoupling system",
        |cell, y| {
            let p = &y.0[0];
            let al1 = &y.0[1];
            let al2 = &y.0[2];
            let dp = riccati_rhs(&baked.a[cell], &baked.s1[cell], p);
            // stage-consistent blocks from the stage value of P
            let f = &baked.a[cell] - &baked.s1[cell] * p;
            let g = -(&baked.s2[cell] * p);
            let mut a1 = DMatrix::zeros(2 * n, 2 * n);
            a1.view_mut((0, 0), (n, n)).copy_from(&f);
            a1.view_mut((0, n), (n, n)).copy_from(&g);
            a1.view_mut((n, n), (n, n)).copy_from(&f);
            let mut a2m = DMatrix::zeros(2 * n, 2 * n);
            a2m.view_mut((0, 0), (n, n)).copy_from(&(-&baked.s2[cell]));
            a2m.view_mut((0, n), (n, n)).copy_from(&(-&baked.s1[cell]));
            a2m.view_mut((n, 0), (n, n)).copy_from(&(-&baked.s1[cell]));
            let mut a6 = DMatrix::zeros(2 * n, 2 * n);
            a6.view_mut((n, n), (n, n)).copy_from(&(-(p * &baked.s2[cell] * p)));
            let da1 = -(a1.transpose() * al1 + al1 * &a1 + al1 * &a2m * al1 + a6);
            let da2 = -((al1 * &a2m + a1.transpose()) * al2);
            Stacked(vec![dp, da1, da2])
        },
    )?;
    let mut alpha1 = Vec::with_capacity(states.len());
    let mut alpha2 = Vec::with_capacity(states.len());
    for s in states {
        let mut it = s.0.into_iter();
        let _p = it.next();
        alpha1.push(it.next().unwrap());
        alpha2.push(it.next().unwrap());
    }
    Ok(AlphaSolution {
        alpha1: MatrixTrajectory::new(spec.grid, alpha1),
        alpha2: MatrixTrajectory::new(spec.grid, alpha2),
    })
}

//! Statistical checks of the filtering claims: innovation processes are
//! standard Brownian motions under the observation filtration, the drift
//! residual of the filter is a martingale, and regression recovers its
//! representation gains.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::riccati::BakedCoeffs;
use crate::sde::{InnovationTrace, PathTrace};
use crate::stats;

/// Moments of an innovation process across paths.
#[derive(Clone, Debug, Serialize)]
pub struct InnovationStats {
    pub n_paths: usize,
    pub horizon: f64,
    /// Mean and SE of the terminal innovation value (should be 0).
    pub mean_terminal: f64,
    pub se_terminal: f64,
    /// Mean and SE of the per-path quadratic variation (should be T).
    pub mean_qv: f64,
    pub se_qv: f64,
    /// Pooled increment shape statistics (standard normal: 0 and 0).
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Diagnostics from per-path innovation traces accumulated by the engine.
pub fn innovation_diagnostics(traces: &[InnovationTrace], steps: usize, horizon: f64) -> InnovationStats {
    let terminals: Vec<f64> = traces.iter().map(|t| t.sum).collect();
    let qvs: Vec<f64> = traces.iter().map(|t| t.qv).collect();
    let (mean_terminal, se_terminal) = stats::mean_se(&terminals);
    let (mean_qv, se_qv) = stats::mean_se(&qvs);
    // pooled central moments of the increments
    let count = (traces.len() * steps) as f64;
    let m1 = traces.iter().map(|t| t.sum).sum::<f64>() / count;
    let m2 = traces.iter().map(|t| t.qv).sum::<f64>() / count;
    let m3 = traces.iter().map(|t| t.sum3).sum::<f64>() / count;
    let m4 = traces.iter().map(|t| t.sum4).sum::<f64>() / count;
    let var = m2 - m1 * m1;
    let c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
    let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
    InnovationStats {
        n_paths: traces.len(),
        horizon,
        mean_terminal,
        se_terminal,
        mean_qv,
        se_qv,
        skewness: if var > 0.0 { c3 / var.powf(1.5) } else { 0.0 },
        excess_kurtosis: if var > 0.0 { c4 / (var * var) - 3.0 } else { 0.0 },
    }
}

/// Diagnostics from raw per-path increment series (e.g. raw W1 paths).
pub fn innovation_diagnostics_from_increments(paths: &[Vec<f64>], horizon: f64) -> InnovationStats {
    let traces: Vec<InnovationTrace> = paths
        .iter()
        .map(|incs| {
            let mut t = InnovationTrace::default();
            for &d in incs {
                t.sum += d;
                t.qv += d * d;
                t.sum3 += d * d * d;
                t.sum4 += d * d * d * d;
            }
            t
        })
        .collect();
    let steps = paths.first().map_or(0, |p| p.len());
    innovation_diagnostics(&traces, steps, horizon)
}

/// Recompute the follower innovation increments of a recorded path from
/// the raw observation increments (jumps re-identified from their sizes
/// and stripped, compensator restored). Exercises the identification
/// pipeline end to end; the engine's internal increments must agree.
pub fn follower_innovation_from_series(
    spec: &ProblemSpec,
    baked: &BakedCoeffs,
    trace: &PathTrace,
    noise: &crate::sde::PathNoise,
) -> Result<Vec<f64>> {
    let series = trace.series.as_ref().ok_or(Error::MissingSeries("series"))?;
    let n = spec.n;
    let dt = spec.grid.dt();
    let fcomp = spec.marks1.obs_compensator();
    let mut sizes = vec![Vec::new(); spec.grid.steps];
    for ev in &noise.events {
        if ev.space == 0 {
            sizes[ev.step].push(spec.marks1.marks[ev.mark].obs_jump);
        }
    }
    let mut out = Vec::with_capacity(spec.grid.steps);
    for k in 0..spec.grid.steps {
        // raw total increment: continuous part + jumps - compensator
        let raw = series.dy1c[k] + sizes[k].iter().sum::<f64>() - fcomp * dt;
        let obs = crate::filtering::ObsIncrement { total: raw, jump_sizes: sizes[k].clone() };
        let (dy_c, _) = obs.continuous_part(&spec.marks1, 1, dt)?;
        let xhat = &series.z[k][n..2 * n];
        let h1 = &baked.h1[k];
        let mut pred = (&baked.h11[k] * &series.u1[k])[(0, 0)] + (&baked.h12[k] * &series.u2[k])[(0, 0)];
        for i in 0..n {
            pred += h1[(0, i)] * xhat[i];
        }
        out.push((dy_c - pred * dt) / baked.k1[k]);
    }
    Ok(out)
}

/// Martingale check of Lambda(t) = xhat(t) - xhat(0) - int a-hat ds.
#[derive(Clone, Debug, Serialize)]
pub struct LambdaStats {
    pub n_paths: usize,
    /// Largest |mean| / SE of Lambda(t) - Lambda(s) over checkpoint pairs.
    pub max_abs_z: f64,
    /// Terminal variance (trace) and its SE.
    pub var_terminal: f64,
    pub se_var_terminal: f64,
    /// Ito-isometry prediction of the terminal variance when H1 = 0.
    pub var_expected: Option<f64>,
}

/// Lambda values at the checkpoints `fracs * N` for one recorded path.
pub fn lambda_checkpoints(
    spec: &ProblemSpec,
    baked: &BakedCoeffs,
    trace: &PathTrace,
    fracs: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let series = trace.series.as_ref().ok_or(Error::MissingSeries("series"))?;
    let n = spec.n;
    let dt = spec.grid.dt();
    let marks: Vec<usize> = fracs.iter().map(|f| ((f * spec.grid.steps as f64).round() as usize).min(spec.grid.steps)).collect();
    let mut out = Vec::with_capacity(marks.len());
    let mut acc = DVector::zeros(n);
    let x0 = DVector::from_column_slice(&series.z[0][n..2 * n]);
    let mut next = 0usize;
    for k in 0..=spec.grid.steps {
        while next < marks.len() && marks[next] == k {
            let xh = DVector::from_column_slice(&series.z[k][n..2 * n]);
            out.push(&xh - &x0 - &acc);
            next += 1;
        }
        if k == spec.grid.steps {
            break;
        }
        let xh = DVector::from_column_slice(&series.z[k][n..2 * n]);
        let drift =
            &baked.a[k] * &xh + &baked.b1[k] * &series.u1[k] + &baked.b2[k] * &series.u2[k];
        acc.axpy(dt, &drift, 1.0);
    }
    Ok(out)
}

/// Cross-path martingale test of Lambda at the given checkpoint fractions.
pub fn martingale_check_lambda(
    spec: &ProblemSpec,
    baked: &BakedCoeffs,
    traces: &[PathTrace],
    fracs: &[f64],
) -> Result<LambdaStats> {
    let per_path: Vec<Vec<DVector<f64>>> = traces
        .iter()
        .map(|t| lambda_checkpoints(spec, baked, t, fracs))
        .collect::<Result<_>>()?;
    let n = spec.n;
    let mut max_abs_z = 0.0f64;
    for a in 0..fracs.len() {
        for b in (a + 1)..fracs.len() {
            for i in 0..n {
                let diffs: Vec<f64> = per_path.iter().map(|cps| cps[b][i] - cps[a][i]).collect();
                let (m, se) = stats::mean_se(&diffs);
                if se > 0.0 {
                    max_abs_z = max_abs_z.max((m / se).abs());
                }
            }
        }
    }
    // terminal variance as the trace of the covariance
    let last = fracs.len() - 1;
    let mut var_terminal = 0.0;
    let mut se_sq = 0.0;
    for i in 0..n {
        let vals: Vec<f64> = per_path.iter().map(|cps| cps[last][i]).collect();
        var_terminal += stats::sample_var(&vals);
        se_sq += stats::se_var(&vals).powi(2);
    }
    let var_expected = spec.h1_is_zero().then(|| {
        let dt = spec.grid.dt();
        let mut acc = 0.0;
        for k in 0..spec.grid.steps {
            let c1 = &baked.c1[k];
            acc += c1.dot(c1) * dt;
        }
        acc + spec.marks1.dd_t(n).trace() * spec.grid.horizon
    });
    Ok(LambdaStats {
        n_paths: traces.len(),
        max_abs_z,
        var_terminal,
        se_var_terminal: se_sq.sqrt(),
        var_expected,
    })
}

/// Regression recovery of the martingale representation gains: pooled
/// over steps and paths, each component of dLambda is regressed on the
/// innovation increment and the compensated jump counters of the observed
/// mark space. `k1_formula` is the ensemble-averaged formula value
/// Sigma_cloud H1' K1^{-1} + C1 supplied by the caller.
#[derive(Clone, Debug, Serialize)]
pub struct GainRegression {
    /// Per state component: recovered loading on the innovation and SE.
    pub k1_hat: Vec<f64>,
    pub k1_se: Vec<f64>,
    pub k1_formula: Vec<f64>,
    /// Per mark, per state component: recovered jump loading and SE.
    pub k2_hat: Vec<Vec<f64>>,
    pub k2_se: Vec<Vec<f64>>,
    pub k2_formula: Vec<Vec<f64>>,
}

pub struct GainRegressionInput<'a> {
    /// Per path: dLambda increments per step (n-vectors).
    pub dlambda: &'a [Vec<DVector<f64>>],
    /// Per path: innovation increments per step.
    pub dvc: &'a [Vec<f64>],
    /// Per path: per step, per mark count of observed jumps.
    pub jump_counts: &'a [Vec<Vec<u32>>],
    /// Time-averaged formula value of k1 per state component.
    pub k1_formula: Vec<f64>,
}

pub fn regress_martingale_gains(spec: &ProblemSpec, input: &GainRegressionInput<'_>) -> Result<GainRegression> {
    let n = spec.n;
    let n_marks = spec.marks1.marks.len();
    let dt = spec.grid.dt();
    let rows: usize = input.dvc.iter().map(|v| v.len()).sum();
    if rows == 0 {
        return Err(Error::Config("gain regression needs at least one increment".into()));
    }
    let mut x = DMatrix::zeros(rows, 1 + n_marks);
    let mut r = 0usize;
    for (pi, dvc) in input.dvc.iter().enumerate() {
        for (k, &d) in dvc.iter().enumerate() {
            x[(r, 0)] = d;
            for mk in 0..n_marks {
                let nu = spec.marks1.marks[mk].intensity;
                x[(r, 1 + mk)] = input.jump_counts[pi][k][mk] as f64 - nu * dt;
            }
            r += 1;
        }
    }
    let mut k1_hat = Vec::with_capacity(n);
    let mut k1_se = Vec::with_capacity(n);
    let mut k2_hat = vec![Vec::with_capacity(n); n_marks];
    let mut k2_se = vec![Vec::with_capacity(n); n_marks];
    for i in 0..n {
        let mut y = DVector::zeros(rows);
        let mut r = 0usize;
        for dl in input.dlambda {
            for step in dl {
                y[r] = step[i];
                r += 1;
            }
        }
        let reg = stats::ols_robust(&x, &y);
        k1_hat.push(reg.coef[0]);
        k1_se.push(reg.se[0]);
        for mk in 0..n_marks {
            k2_hat[mk].push(reg.coef[1 + mk]);
            k2_se[mk].push(reg.se[1 + mk]);
        }
    }
    let k2_formula = spec
        .marks1
        .marks
        .iter()
        .map(|m| m.state_jump.iter().copied().collect())
        .collect();
    Ok(GainRegression {
        k1_hat,
        k1_se,
        k1_formula: input.k1_formula.clone(),
        k2_hat,
        k2_se,
        k2_formula,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn raw_brownian_paths_have_unit_qv() {
        let n_paths = 2000;
        let steps = 500;
        let dt = 1.0 / steps as f64;
        let paths: Vec<Vec<f64>> = (0..n_paths)
            .map(|p| {
                let mut rng = CounterRng::new(7, p as u64, 0);
                (0..steps).map(|_| rng.normal() * dt.sqrt()).collect()
            })
            .collect();
        let st = innovation_diagnostics_from_increments(&paths, 1.0);
        assert!(st.mean_terminal.abs() < 3.0 * st.se_terminal);
        assert!((st.mean_qv - 1.0).abs() < 3.0 * st.se_qv, "qv {}", st.mean_qv);
        assert!(st.skewness.abs() < 0.05);
        assert!(st.excess_kurtosis.abs() < 0.1);
    }

    #[test]
    fn constant_paths_have_zero_qv() {
        let paths = vec![vec![0.0; 100]; 10];
        let st = innovation_diagnostics_from_increments(&paths, 1.0);
        assert_eq!(st.mean_qv, 0.0);
        assert_eq!(st.mean_terminal, 0.0);
    }
}

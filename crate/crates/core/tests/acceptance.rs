//! Acceptance suite: every release-gating property at its stated
//! tolerance, one test (and one harness pass/fail line) per criterion.
//!
//! Tolerances are pinned here: deterministic identities use absolute
//! bounds, Monte Carlo statements use 3 standard errors of the tested
//! statistic, and convergence-rate windows are closed intervals. The
//! heavyweight simulations are shared across criteria through `OnceLock`.

use std::sync::OnceLock;

use nalgebra::DVector;
use stackmv::evaluate::{
    estimate_cost, perturbation_optimality_test, run_verification_suite, standard_directions, variance_split,
    CostKind, SuiteSettings,
};
use stackmv::filtering::{obs_jump_sizes, particle_filter, xi_closure_open, PfConfig, PfMode, PfObservations};
use stackmv::game::{solve_leader, EquilibriumSolution};
use stackmv::model::{parse_problem, ProblemSpec};
use stackmv::riccati::{solve_riccati_p, BakedCoeffs};
use stackmv::sde::{
    build_loop, exact_moments_mean_only, map_paths, sample_noise, LoopConfig, OpenLoopGains, PathBundle,
    PathTrace, Policy,
};
use stackmv::stats;

const SEED: u64 = 42;
const PATHS_MEAN: usize = 100_000;
const PATHS_MC: usize = 20_000;
const PATHS_SMALL: usize = 1_000;
const PATHS_INNOVATION: usize = 10_000;

fn default_spec() -> &'static ProblemSpec {
    static SPEC: OnceLock<ProblemSpec> = OnceLock::new();
    SPEC.get_or_init(|| {
        let text = include_str!("../../../problems/default.json");
        let spec = parse_problem(text).expect("default problem parses");
        assert!(spec.validate().is_valid());
        spec
    })
}

fn follower_h1_spec() -> &'static ProblemSpec {
    static SPEC: OnceLock<ProblemSpec> = OnceLock::new();
    SPEC.get_or_init(|| {
        let text = include_str!("../../../problems/follower_h1.json");
        parse_problem(text).expect("follower problem parses")
    })
}

fn equilibrium() -> &'static EquilibriumSolution {
    static EQ: OnceLock<EquilibriumSolution> = OnceLock::new();
    EQ.get_or_init(|| solve_leader(default_spec()).expect("equilibrium solves"))
}

/// Closed-loop run shared by criteria 2 and 5: terminal states, max
/// stationarity residuals, innovation traces.
struct ClosedLoopStats {
    x_t: Vec<DVector<f64>>,
    exact_mean_x: DVector<f64>,
    smp1_max: f64,
    smp2_max: f64,
}

fn closed_loop_stats() -> &'static ClosedLoopStats {
    static STATS: OnceLock<ClosedLoopStats> = OnceLock::new();
    STATS.get_or_init(|| {
        let spec = default_spec();
        let eq = equilibrium();
        let n = spec.n;
        let cfg = eq.loop_config(false, false, true);
        let lp = build_loop(spec, &cfg).expect("loop builds");
        let noise = sample_noise(spec, SEED, PATHS_MEAN);
        let rows = map_paths(&lp, &noise, |_, tr: PathTrace| {
            (
                DVector::from_column_slice(&tr.z_terminal[0..n]),
                tr.smp1_max,
                tr.smp2_max,
            )
        })
        .expect("simulation");
        let (mus, _) = exact_moments_mean_only(&lp, spec);
        ClosedLoopStats {
            exact_mean_x: mus.last().unwrap().rows(0, n).into_owned(),
            smp1_max: rows.iter().map(|r| r.1).fold(0.0, f64::max),
            smp2_max: rows.iter().map(|r| r.2).fold(0.0, f64::max),
            x_t: rows.into_iter().map(|r| r.0).collect(),
        }
    })
}

/// Open-loop bundle under the equilibrium mean-control schedules, shared
/// by criteria 3 and 4. Under deterministic admissible controls the
/// filters are exact conditional means, which is the hypothesis of the
/// orthogonal-decomposition claims.
fn mean_control_bundle() -> &'static PathBundle {
    static BUNDLE: OnceLock<PathBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| {
        let spec = default_spec();
        let eq = equilibrium();
        let (u1, u2) = eq.mean_control_schedules(spec);
        let xi_open = xi_closure_open(spec).expect("xi closure");
        let cfg = LoopConfig {
            policy: Policy::Open(OpenLoopGains {
                u1_cells: &u1,
                u2_cells: &u2,
                sigma: Some(&eq.sigma.traj),
                xi1: Some(&xi_open.xi1),
                with_leader_filter: true,
            }),
            pert: None,
            with_yfwd: false,
            record_series: false,
            record_smp: false,
        };
        let lp = build_loop(spec, &cfg).expect("loop builds");
        let noise = sample_noise(spec, SEED ^ 0x3, PATHS_MEAN);
        let paths = map_paths(&lp, &noise, |_, tr| tr).expect("simulation");
        PathBundle { grid: spec.grid, n: spec.n, seed: noise.seed, mode: lp.mode, paths }
    })
}

fn terminals(bundle: &PathBundle, offset: usize) -> Vec<DVector<f64>> {
    let n = bundle.n;
    bundle
        .paths
        .iter()
        .map(|tr| DVector::from_column_slice(&tr.z_terminal[offset..offset + n]))
        .collect()
}

#[test]
fn criterion_01_riccati_oracle_and_convergence() {
    // closed form p(t) = 1/(1 + (T - t)) at dt = 1e-3
    let spec = stackmv::testspec::scalar_riccati_oracle(1000);
    let p = solve_riccati_p(&spec).expect("riccati");
    let mut max_err: f64 = 0.0;
    for (k, v) in p.values.iter().enumerate() {
        let t = spec.grid.t(k);
        max_err = max_err.max((v[(0, 0)] - 1.0 / (2.0 - t)).abs());
    }
    println!("criterion 1: riccati max err {max_err:.3e} (tol 1e-8)");
    assert!(max_err <= 1e-8);
    let err = |steps: usize| {
        let spec = stackmv::testspec::scalar_riccati_oracle(steps);
        (solve_riccati_p(&spec).unwrap().initial()[(0, 0)] - 0.5f64).abs()
    };
    let ratio = err(20) / err(40);
    println!("criterion 1: rk4 halving ratio {ratio:.2} (window [8, 32])");
    assert!((8.0..=32.0).contains(&ratio));
}

#[test]
fn criterion_02_embedding_fixed_points() {
    let eq = equilibrium();
    println!(
        "criterion 2: fixed-point residuals ({:.3e}, {:.3e}) (tol 1e-6)",
        eq.residuals.0, eq.residuals.1
    );
    assert!(eq.residuals.0 <= 1e-6);
    assert!(eq.residuals.1 <= 1e-6);
    // sample means over 1e5 paths agree with the deterministic mean
    let st = closed_loop_stats();
    let n = default_spec().n;
    let mut worst_z = 0.0f64;
    for i in 0..n {
        let vals: Vec<f64> = st.x_t.iter().map(|x| x[i]).collect();
        let (m, se) = stats::mean_se(&vals);
        worst_z = worst_z.max(((m - st.exact_mean_x[i]) / se).abs());
    }
    println!("criterion 2: sample-mean z {worst_z:.2} over {PATHS_MEAN} paths (tol 3)");
    assert!(worst_z <= 3.0);
}

#[test]
fn criterion_03_orthogonal_decomposition() {
    let bundle = mean_control_bundle();
    let n = bundle.n;
    let xs = terminals(bundle, 0);
    let xhats = terminals(bundle, n);
    let xchecks = terminals(bundle, 2 * n);
    let sf = variance_split(&xs, &xhats);
    let zf = sf.residual / sf.se;
    println!(
        "criterion 3: follower split Var[X]={:.4} = {:.4} + {:.4}, z {:.2} (tol 3)",
        sf.var_total, sf.var_proj, sf.var_resid, zf
    );
    assert!(zf.abs() <= 3.0);
    let sl = variance_split(&xs, &xchecks);
    let zl = sl.residual / sl.se;
    println!(
        "criterion 3: leader split Var[X]={:.4} = {:.4} + {:.4}, z {:.2} (tol 3)",
        sl.var_total, sl.var_proj, sl.var_resid, zl
    );
    assert!(zl.abs() <= 3.0);
}

#[test]
fn criterion_04_cost_decomposition() {
    let spec = default_spec();
    let bundle = mean_control_bundle();
    let j1 = estimate_cost(bundle, spec, &CostKind::J1).unwrap();
    let j1h = estimate_cost(bundle, spec, &CostKind::J1Hat).unwrap();
    let j1t = estimate_cost(bundle, spec, &CostKind::J1Tilde).unwrap();
    let n = bundle.n;
    let xs = terminals(bundle, 0);
    let xhats = terminals(bundle, n);
    let xchecks = terminals(bundle, 2 * n);
    let sf = variance_split(&xs, &xhats);
    let resid1 = j1h.value + j1t.value - j1.value;
    let se1 = spec.cost.theta1 / 2.0 * sf.se;
    println!("criterion 4: follower cost split residual {resid1:.3e}, z {:.2} (tol 3)", resid1 / se1);
    assert!((resid1 / se1).abs() <= 3.0);
    let j2 = estimate_cost(bundle, spec, &CostKind::J2).unwrap();
    let j2c = estimate_cost(bundle, spec, &CostKind::J2Check).unwrap();
    let j2t = estimate_cost(bundle, spec, &CostKind::J2Tilde).unwrap();
    let sl = variance_split(&xs, &xchecks);
    let resid2 = j2c.value + j2t.value - j2.value;
    let se2 = spec.cost.theta2 / 2.0 * sl.se;
    println!("criterion 4: leader cost split residual {resid2:.3e}, z {:.2} (tol 3)", resid2 / se2);
    assert!((resid2 / se2).abs() <= 3.0);
}

#[test]
fn criterion_05_smp_stationarity() {
    let st = closed_loop_stats();
    println!(
        "criterion 5: stationarity residuals follower {:.3e}, leader {:.3e} over {PATHS_MEAN} paths x all grid points (tol 1e-10)",
        st.smp1_max, st.smp2_max
    );
    assert!(st.smp1_max <= 1e-10);
    assert!(st.smp2_max <= 1e-10);
}

#[test]
fn criterion_06_perturbation_optimality() {
    let spec = default_spec();
    let eq = equilibrium();
    let dirs = standard_directions(spec, 3);
    let eps = [-0.1, -0.05, 0.05, 0.1];
    for player in [1u8, 2u8] {
        let outcomes =
            perturbation_optimality_test(spec, eq, player, &dirs, &eps, SEED ^ 0xC0FFEE, PATHS_MC).unwrap();
        for oc in &outcomes {
            println!(
                "criterion 6: player {} dir {:5} a={:+.3e} (3se {:.3e}) b={:+.3e}",
                player,
                oc.direction,
                oc.a,
                3.0 * oc.se_a,
                oc.b
            );
            assert!(oc.a.abs() <= 3.0 * oc.se_a, "slope not within 3 SE of zero");
            assert!(oc.b > 0.0, "no positive curvature");
        }
    }
}

#[test]
fn criterion_07_decoupling_residual_rate() {
    let spec = default_spec();
    let n = spec.n;
    let mut spec_fine = spec.clone();
    spec_fine.grid = spec.grid.refined(2);
    let eq_c = equilibrium();
    let eq_f = solve_leader(&spec_fine).unwrap();
    let lp_c = build_loop(spec, &eq_c.loop_config(true, false, false)).unwrap();
    let lp_f = build_loop(&spec_fine, &eq_f.loop_config(true, false, false)).unwrap();
    let noise = sample_noise(&spec_fine, SEED ^ 0xDEC0, PATHS_SMALL);
    let resid = |tr: &PathTrace, eq: &EquilibriumSolution| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let target1 = spec.cost.theta2 * tr.z_terminal[2 * n + i] + eq.lambda2[i];
            let d1 = tr.z_terminal[4 * n + i] - target1;
            let d2 = tr.z_terminal[5 * n + i] - eq.lambda1[i];
            acc += d1 * d1 + d2 * d2;
        }
        acc
    };
    let mut sq_c = 0.0;
    let mut sq_f = 0.0;
    for i in 0..PATHS_SMALL {
        let fine = noise.path(i);
        let coarse = fine.coarsen(2);
        sq_c += resid(&lp_c.replay(&coarse, i).unwrap(), eq_c);
        sq_f += resid(&lp_f.replay(&fine, i).unwrap(), &eq_f);
    }
    let ratio = (sq_c / PATHS_SMALL as f64).sqrt() / (sq_f / PATHS_SMALL as f64).sqrt();
    println!("criterion 7: decoupling residual halving ratio {ratio:.2} (window [1.5, 3])");
    assert!((1.5..=3.0).contains(&ratio));
}

#[test]
fn criterion_08_filter_equivalence() {
    let spec = default_spec();
    let eq = equilibrium();
    let n = spec.n;
    let lp = build_loop(spec, &eq.loop_config(false, true, false)).unwrap();
    let pf_paths = 24;
    let noise = sample_noise(spec, SEED ^ 0xF17E, pf_paths);
    let levels = [1_000usize, 4_000];
    let mut sum_sq = [0.0f64; 2];
    let mut sum_se_sq = 0.0f64;
    let mut count = 0usize;
    for i in 0..pf_paths {
        let pn = noise.path(i);
        let tr = lp.replay(&pn, i).unwrap();
        let series = tr.series.as_ref().unwrap();
        let jump_sizes = obs_jump_sizes(&pn, spec, 1);
        let obs = PfObservations {
            dy_c: &series.dy1c,
            jump_sizes,
            u1: Some(&series.u1),
            u2: &series.u2,
            phi: None,
            p: None,
        };
        for (li, np) in levels.iter().enumerate() {
            let cfg = PfConfig::new(*np, SEED ^ 0xF17E, i as u64);
            let out = particle_filter(spec, PfMode::FollowerObs, &obs, &cfg).unwrap();
            for (k, s) in out.summaries.iter().enumerate() {
                let mut d = 0.0;
                for c in 0..n {
                    let diff = s.mean_x[c] - series.z[k][n + c];
                    d += diff * diff;
                }
                sum_sq[li] += d;
                if li == 1 {
                    sum_se_sq += s.cov_xx.trace() / s.ess;
                    count += 1;
                }
            }
        }
    }
    let rms_hi = (sum_sq[1] / count as f64).sqrt();
    let se_hi = (sum_se_sq / count as f64).sqrt();
    let ratio = (sum_sq[0] / sum_sq[1]).sqrt();
    println!("criterion 8: pf-vs-filter rms {rms_hi:.3e} vs 3 x particle-se {:.3e}", 3.0 * se_hi);
    assert!(rms_hi <= 3.0 * se_hi);
    println!("criterion 8: quadrupling particles shrinks rms by {ratio:.2} (window [1.6, 2.5])");
    assert!((1.6..=2.5).contains(&ratio));
}

#[test]
fn criterion_09_innovation_diagnostics() {
    // both the equilibrium instance and the informative-H1 follower
    // instance: mean innovation ~ 0, quadratic variation ~ T
    for (name, spec, run_leader) in
        [("equilibrium", default_spec(), true), ("follower H1", follower_h1_spec(), false)]
    {
        let traces = if run_leader {
            let eq = equilibrium();
            let lp = build_loop(spec, &eq.loop_config(false, false, false)).unwrap();
            let noise = sample_noise(spec, SEED ^ 0x1880, PATHS_INNOVATION);
            map_paths(&lp, &noise, |_, tr| tr.vcheck).unwrap()
        } else {
            let u2 = vec![DVector::zeros(spec.m); spec.grid.steps];
            let sol = stackmv::game::fixed_point_lambda1(spec, &u2).unwrap();
            let sigma = stackmv::filtering::sigma_closure_ode(spec).unwrap();
            let cfg = LoopConfig {
                policy: Policy::Follower(stackmv::sde::FollowerGains {
                    p: &sol.follower.p,
                    phibar: &sol.follower.phibar,
                    sigma: Some(&sigma.traj),
                    u2_cells: &u2,
                }),
                pert: None,
                with_yfwd: false,
                record_series: false,
                record_smp: false,
            };
            let lp = build_loop(spec, &cfg).unwrap();
            let noise = sample_noise(spec, SEED ^ 0x1880, PATHS_INNOVATION);
            map_paths(&lp, &noise, |_, tr| tr.vcheck).unwrap()
        };
        let st = stackmv::filtering::diagnostics::innovation_diagnostics(
            &traces,
            spec.grid.steps,
            spec.grid.horizon,
        );
        let z_mean = st.mean_terminal / st.se_terminal;
        let z_qv = (st.mean_qv - spec.grid.horizon) / st.se_qv;
        println!(
            "criterion 9 ({name}): innovation mean z {z_mean:.2}, qv z {z_qv:.2} over {PATHS_INNOVATION} paths (tol 3)"
        );
        assert!(z_mean.abs() <= 3.0);
        assert!(z_qv.abs() <= 3.0);
    }
}

#[test]
fn criterion_10_martingale_gains() {
    // jumpy 1-d instance with informative H1: ensemble regression of the
    // filter's martingale part against the representation formulas
    let spec = follower_h1_spec();
    let u2 = vec![DVector::zeros(spec.m); spec.grid.steps];
    let sol = stackmv::game::fixed_point_lambda1(spec, &u2).unwrap();
    let sigma = stackmv::filtering::sigma_closure_ode(spec).unwrap();
    let baked = BakedCoeffs::bake(spec);
    let cfg = LoopConfig {
        policy: Policy::Follower(stackmv::sde::FollowerGains {
            p: &sol.follower.p,
            phibar: &sol.follower.phibar,
            sigma: Some(&sigma.traj),
            u2_cells: &u2,
        }),
        pert: None,
        with_yfwd: false,
        record_series: true,
        record_smp: false,
    };
    let lp = build_loop(spec, &cfg).unwrap();
    let n = spec.n;
    let dt = spec.grid.dt();
    let gain_paths = 64;
    let particles = 1_000;
    let noise = sample_noise(spec, SEED ^ 0x6A1B, gain_paths);
    let mut dlambda = Vec::new();
    let mut dvc = Vec::new();
    let mut counts = Vec::new();
    let mut k1_formula = DVector::zeros(n);
    for i in 0..gain_paths {
        let pn = noise.path(i);
        let tr = lp.replay(&pn, i).unwrap();
        let series = tr.series.as_ref().unwrap();
        let jump_sizes = obs_jump_sizes(&pn, spec, 1);
        let obs = PfObservations {
            dy_c: &series.dy1c,
            jump_sizes,
            u1: Some(&series.u1),
            u2: &series.u2,
            phi: None,
            p: None,
        };
        let out =
            particle_filter(spec, PfMode::FollowerObs, &obs, &PfConfig::new(particles, SEED ^ 0x6A1B, i as u64))
                .unwrap();
        let mut dl = Vec::with_capacity(spec.grid.steps);
        let mut dv = Vec::with_capacity(spec.grid.steps);
        for k in 0..spec.grid.steps {
            let m_now = &out.summaries[k].mean_x;
            let m_next = &out.summaries[k + 1].mean_x;
            let drift = &baked.a[k] * m_now + &baked.b1[k] * &series.u1[k] + &baked.b2[k] * &series.u2[k];
            dl.push(m_next - m_now - drift * dt);
            let pred = (&baked.h1[k] * m_now)[(0, 0)]
                + (&baked.h11[k] * &series.u1[k])[(0, 0)]
                + (&baked.h12[k] * &series.u2[k])[(0, 0)];
            dv.push((series.dy1c[k] - pred * dt) / baked.k1[k]);
            let gain = out.summaries[k].cov_xx.clone() * baked.h1[k].transpose() / baked.k1[k]
                + &baked.c1[k];
            k1_formula += gain.column(0);
        }
        dlambda.push(dl);
        dvc.push(dv);
        let mut cnt = vec![vec![0u32; spec.marks1.marks.len()]; spec.grid.steps];
        for ev in &pn.events {
            if ev.space == 0 {
                cnt[ev.step][ev.mark] += 1;
            }
        }
        counts.push(cnt);
    }
    k1_formula /= (gain_paths * spec.grid.steps) as f64;
    let reg = stackmv::filtering::diagnostics::regress_martingale_gains(
        spec,
        &stackmv::filtering::diagnostics::GainRegressionInput {
            dlambda: &dlambda,
            dvc: &dvc,
            jump_counts: &counts,
            k1_formula: k1_formula.iter().copied().collect(),
        },
    )
    .unwrap();
    for c in 0..n {
        let z = (reg.k1_hat[c] - reg.k1_formula[c]) / reg.k1_se[c];
        println!(
            "criterion 10: k1[{c}] regression {:.4} vs formula {:.4}, z {z:.2} (tol 3)",
            reg.k1_hat[c], reg.k1_formula[c]
        );
        assert!(z.abs() <= 3.0);
    }
    for mk in 0..spec.marks1.marks.len() {
        for c in 0..n {
            let z = (reg.k2_hat[mk][c] - reg.k2_formula[mk][c]) / reg.k2_se[mk][c];
            println!(
                "criterion 10: k2[mark {mk}][{c}] regression {:.4} vs D1 {:.4}, z {z:.2} (tol 3)",
                reg.k2_hat[mk][c], reg.k2_formula[mk][c]
            );
            assert!(z.abs() <= 3.0);
        }
    }
}

#[test]
fn criterion_11_determinism() {
    // bit-identical synthesize artifacts
    let spec = default_spec();
    let eq1 = solve_leader(spec).unwrap();
    let eq2 = solve_leader(spec).unwrap();
    let meta = stackmv::export::Meta { spec, seed: SEED };
    let g1 = stackmv::export::gains_csv(&eq1, &meta);
    let g2 = stackmv::export::gains_csv(&eq2, &meta);
    assert_eq!(g1, g2);
    assert_eq!(stackmv::export::lambda_json(&eq1), stackmv::export::lambda_json(&eq2));
    // bit-identical verification reports (reduced scale; determinism does
    // not depend on the sample size)
    let settings = SuiteSettings {
        seed: SEED,
        paths_mean: 2_000,
        paths_mc: 2_000,
        paths_small: 200,
        pf_paths: 4,
        pf_particles: 500,
        gain_paths: 8,
        gain_particles: 200,
        lambda_paths: 500,
        ..SuiteSettings::default()
    };
    let r1 = run_verification_suite(spec, &settings).unwrap().to_json();
    let r2 = run_verification_suite(spec, &settings).unwrap().to_json();
    println!("criterion 11: synthesize and verify outputs are bit-identical across reruns");
    assert_eq!(r1, r2);
}

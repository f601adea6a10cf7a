//! Bootstrap particle filter with conditioned propagation.
//!
//! The observation shares its Brownian channel and jump channel with the
//! signal, so propagation is conditioned on the observation increment:
//! each particle's increment along the observed Brownian channel is the
//! one implied by the observation given that particle's state, the
//! observed jumps are applied through their identified marks, and only
//! the genuinely unobserved channels are sampled. Weights carry the
//! Gaussian likelihood of the continuous observation increment, which is
//! exactly the importance weight of this proposal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::ode::MatrixTrajectory;
use crate::riccati::BakedCoeffs;
use crate::rng::{channel, CounterRng};
use crate::sde::PathNoise;

/// Which observation process conditions the cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfMode {
    /// Condition on Y1; signal is X.
    FollowerObs,
    /// Condition on Y2; signal is the pair (X, Xhat) and the follower's
    /// control is evaluated per particle from its Xhat.
    LeaderObs,
}

#[derive(Clone, Debug)]
pub struct PfConfig {
    pub n_particles: usize,
    /// Resample when ESS < fraction * n_particles.
    pub resample_fraction: f64,
    pub seed: u64,
    /// Path index keying the particle streams.
    pub path: u64,
    /// Keep full clouds (memory-heavy); summaries are always produced.
    pub keep_clouds: bool,
}

impl PfConfig {
    pub fn new(n_particles: usize, seed: u64, path: u64) -> Self {
        PfConfig { n_particles, resample_fraction: 0.5, seed, path, keep_clouds: false }
    }
}

/// Weighted ensemble at one grid point.
#[derive(Clone, Debug)]
pub struct ParticleCloud {
    pub x: Vec<DVector<f64>>,
    pub xhat: Vec<DVector<f64>>,
    pub phi: Vec<DVector<f64>>,
    pub w: Vec<f64>,
}

impl ParticleCloud {
    pub fn ess(&self) -> f64 {
        1.0 / self.w.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean_x(&self) -> DVector<f64> {
        crate::stats::weighted_mean(&self.x, &self.w)
    }
}

/// Moments of the cloud per grid point.
#[derive(Clone, Debug)]
pub struct CloudSummary {
    pub mean_x: DVector<f64>,
    pub cov_xx: DMatrix<f64>,
    pub mean_xhat: Option<DVector<f64>>,
    /// Cov(Xhat - mean, X - mean).
    pub cov_hx: Option<DMatrix<f64>>,
    pub cov_hh: Option<DMatrix<f64>>,
    pub ess: f64,
}

/// Ensemble estimates of the leader-side conditional moments.
pub struct XiEstimates {
    pub xi1: Vec<DMatrix<f64>>,
    pub xi2: Vec<DMatrix<f64>>,
    pub xi3: Vec<DMatrix<f64>>,
    pub xi4: Vec<DMatrix<f64>>,
    pub xi5: Vec<DMatrix<f64>>,
    pub xi6: Vec<DMatrix<f64>>,
}

/// Observation sequence driving one particle filter run.
pub struct PfObservations<'a> {
    /// Continuous part of the observation increment per cell.
    pub dy_c: &'a [f64],
    /// Observed jump sizes per cell (identified against the f-table).
    pub jump_sizes: Vec<Vec<f64>>,
    /// Recorded controls per cell. Follower mode replays both; leader mode
    /// replays u2 and the leader-measurable costate, and computes u1 per
    /// particle.
    pub u1: Option<&'a [DVector<f64>]>,
    pub u2: &'a [DVector<f64>],
    pub phi: Option<&'a [DVector<f64>]>,
    /// Follower Riccati P at grid points (leader mode only; feeds the
    /// per-particle follower control).
    pub p: Option<&'a MatrixTrajectory>,
}

/// Observed jump sizes per cell for one mark space of a noise path.
pub fn obs_jump_sizes(noise: &PathNoise, spec: &ProblemSpec, space: usize) -> Vec<Vec<f64>> {
    let marks = if space == 1 { &spec.marks1 } else { &spec.marks2 };
    let mut sizes = vec![Vec::new(); noise.grid.steps];
    for ev in &noise.events {
        if ev.space + 1 == space {
            sizes[ev.step].push(marks.marks[ev.mark].obs_jump);
        }
    }
    sizes
}

pub struct PfOutput {
    pub summaries: Vec<CloudSummary>,
    pub clouds: Option<Vec<ParticleCloud>>,
}

struct Flat {
    n: usize,
    np: usize,
    data: Vec<f64>,
}

impl Flat {
    fn new(np: usize, n: usize, init: &DVector<f64>) -> Self {
        let mut data = vec![0.0; np * n];
        for p in 0..np {
            for i in 0..n {
                data[p * n + i] = init[i];
            }
        }
        Flat { n, np, data }
    }

    #[inline]
    fn get(&self, p: usize) -> &[f64] {
        &self.data[p * self.n..(p + 1) * self.n]
    }

    #[inline]
    fn get_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.n..(p + 1) * self.n]
    }
}

/// Run the particle filter along one recorded observation path.
pub fn particle_filter(
    spec: &ProblemSpec,
    mode: PfMode,
    obs: &PfObservations<'_>,
    cfg: &PfConfig,
) -> Result<PfOutput> {
    let baked = BakedCoeffs::bake(spec);
    let n = spec.n;
    let np = cfg.n_particles;
    if np < 2 {
        return Err(Error::Config("particle filter needs at least 2 particles".into()));
    }
    let nsteps = spec.grid.steps;
    let dt = spec.grid.dt();
    let sdt = dt.sqrt();

    let (obs_marks, hidden_marks, obs_space) = match mode {
        PfMode::FollowerObs => (&spec.marks1, &spec.marks2, 1usize),
        PfMode::LeaderObs => (&spec.marks2, &spec.marks1, 2usize),
    };
    let comp1 = spec.marks1.state_compensator(n);
    let comp2 = spec.marks2.state_compensator(n);

    let mut xs = Flat::new(np, n, &spec.x0);
    let mut xhs = match mode {
        PfMode::LeaderObs => Some(Flat::new(np, n, &spec.x0)),
        PfMode::FollowerObs => None,
    };
    let mut logw = vec![0.0f64; np];
    let mut w = vec![1.0 / np as f64; np];
    let mut preds = vec![0.0f64; np];
    let mut scratch = vec![0.0f64; np * n];
    let mut scratch_h = vec![0.0f64; np * n];
    let mut perm = vec![0usize; np];

    // per-particle unobserved-noise streams
    let (w_chan, jump_chan) = match mode {
        PfMode::FollowerObs => (channel::PF_W2, channel::PF_JUMPS_E2),
        PfMode::LeaderObs => (channel::PF_W1, channel::PF_JUMPS_E1),
    };
    let mut noise_rngs: Vec<CounterRng> =
        (0..np).map(|p| CounterRng::for_particle(cfg.seed, cfg.path, w_chan, p as u64)).collect();
    let mut jump_rngs: Vec<CounterRng> =
        (0..np).map(|p| CounterRng::for_particle(cfg.seed, cfg.path, jump_chan, p as u64)).collect();
    let mut resample_rng = CounterRng::new(cfg.seed, cfg.path, channel::PF_RESAMPLE);

    let mut summaries = Vec::with_capacity(nsteps + 1);
    let mut clouds = cfg.keep_clouds.then(Vec::new);
    let push_state = |summaries: &mut Vec<CloudSummary>,
                      clouds: &mut Option<Vec<ParticleCloud>>,
                      xs: &Flat,
                      xhs: &Option<Flat>,
                      w: &[f64],
                      phi_k: Option<&DVector<f64>>| {
        summaries.push(summarize(xs, xhs.as_ref(), w));
        if let Some(cl) = clouds.as_mut() {
            cl.push(make_cloud(xs, xhs.as_ref(), w, phi_k));
        }
    };
    let phi_at = |k: usize| obs.phi.map(|ph| &ph[k.min(nsteps - 1)]);
    push_state(&mut summaries, &mut clouds, &xs, &xhs, &w, phi_at(0));

    for k in 0..nsteps {
        let a = &baked.a[k];
        let b1 = &baked.b1[k];
        let b2 = &baked.b2[k];
        let c1 = &baked.c1[k];
        let c2 = &baked.c2[k];
        let dyc = obs.dy_c[k];
        let u2 = &obs.u2[k];

        // observation drift prediction per particle
        match mode {
            PfMode::FollowerObs => {
                let u1 = &obs.u1.ok_or(Error::MissingSeries("u1"))?[k];
                let hu = (&baked.h11[k] * u1)[(0, 0)] + (&baked.h12[k] * u2)[(0, 0)];
                let h = &baked.h1[k];
                for p in 0..np {
                    let xp = xs.get(p);
                    let mut acc = hu;
                    for i in 0..n {
                        acc += h[(0, i)] * xp[i];
                    }
                    preds[p] = acc;
                }
            }
            PfMode::LeaderObs => {
                let hu = (&baked.h2u[k] * u2)[(0, 0)];
                let h = &baked.h2[k];
                for p in 0..np {
                    let xp = xs.get(p);
                    let mut acc = hu;
                    for i in 0..n {
                        acc += h[(0, i)] * xp[i];
                    }
                    preds[p] = acc;
                }
            }
        }
        let k_obs = match mode {
            PfMode::FollowerObs => baked.k1[k],
            PfMode::LeaderObs => baked.k2[k],
        };

        // weight update by the Gaussian likelihood of dy_c
        let inv_var = 1.0 / (2.0 * k_obs * k_obs * dt);
        for p in 0..np {
            let r = dyc - preds[p] * dt;
            logw[p] -= r * r * inv_var;
        }
        let max_lw = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max_lw.is_finite() {
            return Err(Error::DegenerateFilter { step: k });
        }
        let mut sum = 0.0;
        for p in 0..np {
            w[p] = (logw[p] - max_lw).exp();
            sum += w[p];
        }
        if !(sum > 0.0) {
            return Err(Error::DegenerateFilter { step: k });
        }
        for wp in w.iter_mut() {
            *wp /= sum;
        }
        let ess = 1.0 / w.iter().map(|w| w * w).sum::<f64>();
        if ess < cfg.resample_fraction * np as f64 {
            systematic_resample(&w, &mut perm, &mut resample_rng);
            apply_perm(&mut xs, &perm, &mut scratch);
            if let Some(xh) = xhs.as_mut() {
                apply_perm(xh, &perm, &mut scratch_h);
            }
            for p in 0..np {
                logw[p] = 0.0;
                w[p] = 1.0 / np as f64;
            }
            // predictions refer to the resampled states
            match mode {
                PfMode::FollowerObs => {
                    let u1 = &obs.u1.unwrap()[k];
                    let hu = (&baked.h11[k] * u1)[(0, 0)] + (&baked.h12[k] * u2)[(0, 0)];
                    let h = &baked.h1[k];
                    for p in 0..np {
                        let xp = xs.get(p);
                        let mut acc = hu;
                        for i in 0..n {
                            acc += h[(0, i)] * xp[i];
                        }
                        preds[p] = acc;
                    }
                }
                PfMode::LeaderObs => {
                    let hu = (&baked.h2u[k] * u2)[(0, 0)];
                    let h = &baked.h2[k];
                    for p in 0..np {
                        let xp = xs.get(p);
                        let mut acc = hu;
                        for i in 0..n {
                            acc += h[(0, i)] * xp[i];
                        }
                        preds[p] = acc;
                    }
                }
            }
        }

        // identified marks of the observed jumps in this cell
        let mut obs_jump_effect = DVector::zeros(n);
        for &size in &obs.jump_sizes[k] {
            let idx = obs_marks.recover(size, obs_space)?;
            obs_jump_effect += &obs_marks.marks[idx].state_jump;
        }

        // propagate
        match mode {
            PfMode::FollowerObs => {
                let u1 = &obs.u1.unwrap()[k];
                let bu = b1 * u1 + b2 * u2;
                for p in 0..np {
                    let implied_dw = (dyc - preds[p] * dt) / k_obs;
                    let dw_hidden = noise_rngs[p].normal() * sdt;
                    let xp = xs.get_mut(p);
                    let mut xn = vec![0.0; n];
                    for i in 0..n {
                        let mut drift = bu[i];
                        for j in 0..n {
                            drift += a[(i, j)] * xp[j];
                        }
                        xn[i] = xp[i]
                            + drift * dt
                            + c1[i] * implied_dw
                            + c2[i] * dw_hidden
                            + obs_jump_effect[i]
                            - (comp1[i] + comp2[i]) * dt;
                    }
                    for (mk_idx, mk) in hidden_marks.marks.iter().enumerate() {
                        let _ = mk_idx;
                        let cnt = jump_rngs[p].poisson(mk.intensity * dt);
                        if cnt > 0 {
                            for i in 0..n {
                                xn[i] += cnt as f64 * mk.state_jump[i];
                            }
                        }
                    }
                    xp.copy_from_slice(&xn);
                }
            }
            PfMode::LeaderObs => {
                let phi_k = obs.phi.ok_or(Error::MissingSeries("phi"))?;
                let ptraj = obs.p.ok_or(Error::MissingSeries("P"))?;
                let pk = ptraj.at(k);
                let f1 = -(&baked.r1_inv[k] * b1.transpose()); // m x n
                let f1p = &f1 * pk; // m x n
                let f1_phi = &f1 * &phi_k[k];
                let xh = xhs.as_mut().expect("leader mode carries xhat");
                for p in 0..np {
                    let implied_dw = (dyc - preds[p] * dt) / k_obs;
                    let dw_hidden = noise_rngs[p].normal() * sdt;
                    // u1 from this particle's follower filter state
                    let xhp: Vec<f64> = xh.get(p).to_vec();
                    let mut u1p = f1_phi.clone();
                    for r in 0..u1p.len() {
                        for j in 0..n {
                            u1p[r] += f1p[(r, j)] * xhp[j];
                        }
                    }
                    let bu = b1 * &u1p + b2 * u2;
                    // hidden E1 jumps shared by X and Xhat
                    let mut hidden_jump = vec![0.0; n];
                    for mk in &hidden_marks.marks {
                        let cnt = jump_rngs[p].poisson(mk.intensity * dt);
                        if cnt > 0 {
                            for i in 0..n {
                                hidden_jump[i] += cnt as f64 * mk.state_jump[i];
                            }
                        }
                    }
                    {
                        let xp = xs.get_mut(p);
                        let mut xn = vec![0.0; n];
                        for i in 0..n {
                            let mut drift = bu[i];
                            for j in 0..n {
                                drift += a[(i, j)] * xp[j];
                            }
                            xn[i] = xp[i]
                                + drift * dt
                                + c1[i] * dw_hidden
                                + c2[i] * implied_dw
                                + hidden_jump[i]
                                + obs_jump_effect[i]
                                - (comp1[i] + comp2[i]) * dt;
                        }
                        xp.copy_from_slice(&xn);
                    }
                    {
                        let xhp_mut = xh.get_mut(p);
                        let mut xn = vec![0.0; n];
                        for i in 0..n {
                            let mut drift = bu[i];
                            for j in 0..n {
                                drift += a[(i, j)] * xhp_mut[j];
                            }
                            xn[i] = xhp_mut[i] + drift * dt + c1[i] * dw_hidden + hidden_jump[i]
                                - comp1[i] * dt;
                        }
                        xhp_mut.copy_from_slice(&xn);
                    }
                }
            }
        }
        push_state(&mut summaries, &mut clouds, &xs, &xhs, &w, phi_at(k + 1));
    }

    Ok(PfOutput { summaries, clouds })
}

fn summarize(xs: &Flat, xhs: Option<&Flat>, w: &[f64]) -> CloudSummary {
    let n = xs.n;
    let np = xs.np;
    let mut mean = DVector::zeros(n);
    for p in 0..np {
        let xp = xs.get(p);
        for i in 0..n {
            mean[i] += w[p] * xp[i];
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for p in 0..np {
        let xp = xs.get(p);
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] += w[p] * (xp[i] - mean[i]) * (xp[j] - mean[j]);
            }
        }
    }
    let ess = 1.0 / w.iter().map(|w| w * w).sum::<f64>();
    match xhs {
        None => CloudSummary { mean_x: mean, cov_xx: cov, mean_xhat: None, cov_hx: None, cov_hh: None, ess },
        Some(xh) => {
            let mut mean_h = DVector::zeros(n);
            for p in 0..np {
                let hp = xh.get(p);
                for i in 0..n {
                    mean_h[i] += w[p] * hp[i];
                }
            }
            let mut cov_hx = DMatrix::zeros(n, n);
            let mut cov_hh = DMatrix::zeros(n, n);
            for p in 0..np {
                let xp = xs.get(p);
                let hp = xh.get(p);
                for i in 0..n {
                    for j in 0..n {
                        cov_hx[(i, j)] += w[p] * (hp[i] - mean_h[i]) * (xp[j] - mean[j]);
                        cov_hh[(i, j)] += w[p] * (hp[i] - mean_h[i]) * (hp[j] - mean_h[j]);
                    }
                }
            }
            CloudSummary {
                mean_x: mean,
                cov_xx: cov,
                mean_xhat: Some(mean_h),
                cov_hx: Some(cov_hx),
                cov_hh: Some(cov_hh),
                ess,
            }
        }
    }
}

fn make_cloud(xs: &Flat, xhs: Option<&Flat>, w: &[f64], phi_k: Option<&DVector<f64>>) -> ParticleCloud {
    let np = xs.np;
    let x = (0..np).map(|p| DVector::from_column_slice(xs.get(p))).collect();
    let xhat = match xhs {
        Some(xh) => (0..np).map(|p| DVector::from_column_slice(xh.get(p))).collect(),
        None => Vec::new(),
    };
    let phi = match phi_k {
        Some(ph) => vec![ph.clone(); np],
        None => Vec::new(),
    };
    ParticleCloud { x, xhat, phi, w: w.to_vec() }
}

fn systematic_resample(w: &[f64], perm: &mut [usize], rng: &mut CounterRng) {
    let np = w.len();
    let u0 = rng.uniform() / np as f64;
    let mut cum = w[0];
    let mut j = 0usize;
    for (i, slot) in perm.iter_mut().enumerate() {
        let u = u0 + i as f64 / np as f64;
        while u > cum && j + 1 < np {
            j += 1;
            cum += w[j];
        }
        *slot = j;
    }
}

fn apply_perm(xs: &mut Flat, perm: &[usize], scratch: &mut Vec<f64>) {
    let n = xs.n;
    scratch.clear();
    scratch.extend_from_slice(&xs.data);
    for (p, &src) in perm.iter().enumerate() {
        let (dst_start, src_start) = (p * n, src * n);
        xs.data[dst_start..dst_start + n].copy_from_slice(&scratch[src_start..src_start + n]);
    }
}

/// Ensemble centered moments per time from leader-mode summaries; the
/// costate is leader-measurable in the simulated loop so the phi-blocks
/// vanish identically.
pub fn estimate_xi(summaries: &[CloudSummary]) -> Result<XiEstimates> {
    let Some(first) = summaries.first() else {
        return Err(Error::Config("estimate_xi needs at least one cloud".into()));
    };
    let n = first.mean_x.len();
    let zeros = DMatrix::zeros(n, n);
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let mut xi = XiEstimates {
        xi1: Vec::with_capacity(summaries.len()),
        xi2: Vec::with_capacity(summaries.len()),
        xi3: Vec::with_capacity(summaries.len()),
        xi4: Vec::with_capacity(summaries.len()),
        xi5: Vec::with_capacity(summaries.len()),
        xi6: Vec::with_capacity(summaries.len()),
    };
    for s in summaries {
        xi.xi1.push(sym(&s.cov_xx));
        xi.xi2.push(zeros.clone());
        xi.xi3.push(zeros.clone());
        xi.xi4.push(s.cov_hx.clone().unwrap_or_else(|| zeros.clone()));
        xi.xi5.push(zeros.clone());
        xi.xi6.push(s.cov_hh.clone().map(|m| sym(&m)).unwrap_or_else(|| zeros.clone()));
    }
    Ok(xi)
}

/// Deterministic proxy for the leader filter gain series built from the
/// per-path ensemble: the xi1 series of each summary.
pub fn xi1_series(summaries: &[CloudSummary], grid: crate::model::TimeGrid) -> MatrixTrajectory {
    MatrixTrajectory::new(grid, summaries.iter().map(|s| s.cov_xx.clone()).collect())
}

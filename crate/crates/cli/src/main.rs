//! Batch front door: parse problem files, run synthesis / simulation /
//! verification, emit CSV / JSON / SVG artifacts.
//!
//! Exit codes: 0 ok, 1 usage or parse error, 2 validation failure,
//! 3 numerical failure, 4 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use stackmv::error::Error;
use stackmv::evaluate::{estimate_cost, run_verification_suite, CostKind, SuiteSettings};
use stackmv::export::{costs_csv, filter_csv, gains_csv, lambda_json, paths_csv, Meta};
use stackmv::filtering::{
    obs_jump_sizes, particle_filter, sigma_closure_ode, xi_closure_open, PfConfig, PfMode, PfObservations,
};
use stackmv::game::{fixed_point_lambda1, solve_leader};
use stackmv::model::{parse_problem, ProblemSpec};
use stackmv::plot::{render_svg, Series};
use stackmv::sde::{
    build_loop, map_paths, sample_noise, FollowerGains, LoopConfig, PathBundle, Policy,
};

#[derive(Parser)]
#[command(name = "stackmv", version, about = "Partially observed mean-variance Stackelberg game toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Problem file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for all noise streams.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of Monte Carlo paths.
    #[arg(long, default_value_t = 20_000)]
    paths: usize,
    /// Number of particles for ensemble filters.
    #[arg(long, default_value_t = 4_000)]
    particles: usize,
    /// Override the grid step (steps = round(T / dt)).
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check every model invariant; print violations one per line.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthesize the equilibrium gains and multipliers.
    Synthesize(Common),
    /// Simulate the closed loop and export recorded paths.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// How many paths to record in full (the rest contribute to the
        /// summary statistics in the header).
        #[arg(long, default_value_t = 10)]
        save: usize,
    },
    /// Run the filters along simulated paths; export the filter series and
    /// innovation diagnostics.
    Filter(Common),
    /// Estimate the cost functionals of both players.
    Evaluate(Common),
    /// Run the verification suite and write report.json.
    Verify(Common),
    /// Render selected CSV columns against t as an SVG line chart.
    Plot {
        /// Input CSV (as produced by the other subcommands).
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated column names to plot.
        #[arg(long)]
        cols: String,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidSpec(_) => 2,
        Error::Singularity { .. }
        | Error::FixedPointSingular { .. }
        | Error::SimulationDiverged { .. }
        | Error::DegenerateFilter { .. }
        | Error::UnidentifiableJump { .. } => 3,
        _ => 1,
    }
}

fn load_spec(path: &Path, dt: Option<f64>) -> Result<ProblemSpec, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut spec = parse_problem(&text)?;
    if let Some(dt) = dt {
        if !(dt > 0.0) || dt > spec.grid.horizon {
            return Err(Error::Config(format!("dt override {dt} outside (0, T]")));
        }
        spec.grid.steps = (spec.grid.horizon / dt).round().max(2.0) as usize;
    }
    let report = spec.validate();
    if !report.is_valid() {
        return Err(Error::InvalidSpec(report));
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Validate { config } => {
            let text = std::fs::read_to_string(&config)?;
            let spec = parse_problem(&text)?;
            let report = spec.validate();
            if report.is_valid() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                print!("{report}");
                Ok(ExitCode::from(2))
            }
        }
        Command::Synthesize(c) => {
            let spec = load_spec(&c.config, c.dt)?;
            let eq = solve_leader(&spec)?;
            std::fs::create_dir_all(&c.out)?;
            let meta = Meta { spec: &spec, seed: c.seed };
            std::fs::write(c.out.join("gains.csv"), gains_csv(&eq, &meta))?;
            std::fs::write(c.out.join("lambda.json"), lambda_json(&eq))?;
            println!(
                "lambda1 = {:?}, lambda2 = {:?}, residuals = ({:.3e}, {:.3e})",
                eq.lambda1.as_slice(),
                eq.lambda2.as_slice(),
                eq.residuals.0,
                eq.residuals.1
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { common: c, save } => {
            if c.paths == 0 {
                return Err(Error::Config("--paths must be positive".into()));
            }
            let spec = load_spec(&c.config, c.dt)?;
            std::fs::create_dir_all(&c.out)?;
            let bundle = simulate_bundle(&spec, c.seed, save.min(c.paths))?;
            let meta = Meta { spec: &spec, seed: c.seed };
            std::fs::write(c.out.join("paths.csv"), paths_csv(&bundle, &meta)?)?;
            println!("recorded {} of {} paths", bundle.paths.len(), c.paths);
            Ok(ExitCode::SUCCESS)
        }
        Command::Filter(c) => {
            if c.paths == 0 {
                return Err(Error::Config("--paths must be positive".into()));
            }
            let spec = load_spec(&c.config, c.dt)?;
            std::fs::create_dir_all(&c.out)?;
            run_filter(&spec, &c)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate(c) => {
            if c.paths == 0 {
                return Err(Error::Config("--paths must be positive".into()));
            }
            let spec = load_spec(&c.config, c.dt)?;
            std::fs::create_dir_all(&c.out)?;
            run_evaluate(&spec, &c)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(c) => {
            let spec = load_spec(&c.config, c.dt)?;
            std::fs::create_dir_all(&c.out)?;
            let settings = SuiteSettings {
                seed: c.seed,
                paths_mean: c.paths,
                paths_mc: c.paths.min(20_000),
                pf_particles: c.particles,
                ..SuiteSettings::default()
            };
            let report = run_verification_suite(&spec, &settings)?;
            std::fs::write(c.out.join("report.json"), report.to_json())?;
            for check in &report.checks {
                println!("{:5} {}", check.status, check.name);
            }
            if report.passed() {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verification failed");
                Ok(ExitCode::from(4))
            }
        }
        Command::Plot { csv, cols, out } => {
            let text = std::fs::read_to_string(&csv)?;
            let svg = plot_csv(&text, &cols)?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(&out, svg)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Simulate the instance under its synthesized strategy: the leader
/// equilibrium when H1 = 0, the standalone follower loop otherwise.
fn simulate_bundle(spec: &ProblemSpec, seed: u64, n_record: usize) -> Result<PathBundle, Error> {
    let noise = sample_noise(spec, seed, n_record);
    if spec.h1_is_zero() {
        let eq = solve_leader(spec)?;
        let cfg = eq.loop_config(false, true, false);
        let lp = build_loop(spec, &cfg)?;
        let mut paths = Vec::with_capacity(n_record);
        for i in 0..n_record {
            paths.push(lp.replay(&noise.path(i), i)?);
        }
        Ok(PathBundle { grid: spec.grid, n: spec.n, seed, mode: lp.mode, paths })
    } else {
        let u2 = vec![DVector::zeros(spec.m); spec.grid.steps];
        let sol = fixed_point_lambda1(spec, &u2)?;
        let sigma = sigma_closure_ode(spec)?;
        let cfg = LoopConfig {
            policy: Policy::Follower(FollowerGains {
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
        let lp = build_loop(spec, &cfg)?;
        let mut paths = Vec::with_capacity(n_record);
        for i in 0..n_record {
            paths.push(lp.replay(&noise.path(i), i)?);
        }
        Ok(PathBundle { grid: spec.grid, n: spec.n, seed, mode: lp.mode, paths })
    }
}

fn run_filter(spec: &ProblemSpec, c: &Common) -> Result<(), Error> {
    let sigma = sigma_closure_ode(spec)?;
    let xi = xi_closure_open(spec)?;
    let bundle = simulate_bundle(spec, c.seed, 1)?;
    let series = bundle.paths[0].series.as_ref().expect("recorded");
    let meta = Meta { spec, seed: c.seed };
    std::fs::write(c.out.join("filter.csv"), filter_csv(spec, series, &sigma.traj, &xi.xi1, &meta))?;

    // innovation diagnostics across paths
    let diag = {
        let noise = sample_noise(spec, c.seed, c.paths);
        let lp = if spec.h1_is_zero() {
            let eq = solve_leader(spec)?;
            build_loop(spec, &eq.loop_config(false, false, false))?
        } else {
            let u2 = vec![DVector::zeros(spec.m); spec.grid.steps];
            let sol = fixed_point_lambda1(spec, &u2)?;
            build_loop(
                spec,
                &LoopConfig {
                    policy: Policy::Follower(FollowerGains {
                        p: &sol.follower.p,
                        phibar: &sol.follower.phibar,
                        sigma: Some(&sigma.traj),
                        u2_cells: &u2,
                    }),
                    pert: None,
                    with_yfwd: false,
                    record_series: false,
                    record_smp: false,
                },
            )?
        };
        let traces = map_paths(&lp, &noise, |_, tr| tr.vcheck)?;
        stackmv::filtering::diagnostics::innovation_diagnostics(&traces, spec.grid.steps, spec.grid.horizon)
    };

    // particle filter against the closed-form filter on the recorded path
    let pf_rms = {
        let noise = sample_noise(spec, c.seed, 1);
        let pn = noise.path(0);
        let jump_sizes = obs_jump_sizes(&pn, spec, 1);
        let obs = PfObservations {
            dy_c: &series.dy1c,
            jump_sizes,
            u1: Some(&series.u1),
            u2: &series.u2,
            phi: None,
            p: None,
        };
        let out = particle_filter(spec, PfMode::FollowerObs, &obs, &PfConfig::new(c.particles, c.seed, 0))?;
        let n = spec.n;
        let mut acc = 0.0;
        for (k, s) in out.summaries.iter().enumerate() {
            let mut d = 0.0;
            for i in 0..n {
                let diff = s.mean_x[i] - series.z[k][n + i];
                d += diff * diff;
            }
            acc += d;
        }
        (acc / out.summaries.len() as f64).sqrt()
    };

    #[derive(serde::Serialize)]
    struct FilterDiagnostics {
        innovation: stackmv::filtering::diagnostics::InnovationStats,
        pf_vs_filter_rms: f64,
        sigma_approximate: bool,
        n_particles: usize,
    }
    let d = FilterDiagnostics {
        innovation: diag,
        pf_vs_filter_rms: pf_rms,
        sigma_approximate: sigma.approximate,
        n_particles: c.particles,
    };
    std::fs::write(c.out.join("diagnostics.json"), serde_json::to_string_pretty(&d)?)?;
    println!("filter series and diagnostics written");
    Ok(())
}

fn run_evaluate(spec: &ProblemSpec, c: &Common) -> Result<(), Error> {
    if !spec.h1_is_zero() {
        return Err(Error::UnsupportedMode(
            "cost evaluation runs the leader equilibrium; it requires H1 = 0".into(),
        ));
    }
    let eq = solve_leader(spec)?;
    let noise = sample_noise(spec, c.seed, c.paths);
    let lp = build_loop(spec, &eq.loop_config(false, false, false))?;
    let paths = map_paths(&lp, &noise, |_, tr| tr)?;
    let bundle = PathBundle { grid: spec.grid, n: spec.n, seed: c.seed, mode: lp.mode, paths };
    let kinds = [
        CostKind::J1,
        CostKind::J2,
        CostKind::J1Hat,
        CostKind::J1Tilde,
        CostKind::J2Check,
        CostKind::J2Tilde,
        CostKind::Aux1(eq.lambda1.clone()),
        CostKind::Aux2(eq.lambda2.clone()),
    ];
    let mut rows = Vec::new();
    for kind in kinds {
        let est = estimate_cost(&bundle, spec, &kind)?;
        rows.push((kind.name().to_string(), est));
    }
    let meta = Meta { spec, seed: c.seed };
    std::fs::write(c.out.join("costs.csv"), costs_csv(&rows, &meta))?;
    println!("costs.csv written ({} paths)", c.paths);
    Ok(())
}

fn plot_csv(text: &str, cols: &str) -> Result<String, Error> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Config("empty CSV".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    let want: Vec<&str> = cols.split(',').map(str::trim).collect();
    let t_idx = names
        .iter()
        .position(|&n| n == "t")
        .ok_or_else(|| Error::Config("CSV has no t column".into()))?;
    let mut idx = Vec::new();
    for w in &want {
        let i = names
            .iter()
            .position(|n| n == w)
            .ok_or_else(|| Error::Config(format!("column {w} not in CSV header")))?;
        idx.push(i);
    }
    let mut series: Vec<Series> =
        want.iter().map(|w| Series { name: w.to_string(), points: Vec::new() }).collect();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let t: f64 = fields
            .get(t_idx)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Config("bad t value".into()))?;
        for (si, &ci) in idx.iter().enumerate() {
            if let Some(v) = fields.get(ci).and_then(|f| f.parse::<f64>().ok()) {
                if v.is_finite() {
                    series[si].points.push((t, v));
                }
            }
        }
    }
    Ok(render_svg(&series, "t", ""))
}

//! CSV and JSON artifact writers. Every file begins with a metadata block
//! (comment lines for CSV, a `meta` field for JSON): tool version, spec
//! digest, seed, and grid, so any output can be reproduced from its header.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::evaluate::CostEstimate;
use crate::game::EquilibriumSolution;
use crate::model::ProblemSpec;
use crate::sde::PathBundle;

pub struct Meta<'a> {
    pub spec: &'a ProblemSpec,
    pub seed: u64,
}

impl Meta<'_> {
    fn header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# tool_version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "# spec_digest={}", self.spec.digest());
        let _ = writeln!(s, "# seed={}", self.seed);
        let _ = writeln!(
            s,
            "# grid_T={} grid_steps={} dt={}",
            self.spec.grid.horizon,
            self.spec.grid.steps,
            self.spec.grid.dt()
        );
        s
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.12e}")
}

/// gains.csv: t, P (row-major), alpha1 (row-major), alpha2.
pub fn gains_csv(eq: &EquilibriumSolution, meta: &Meta<'_>) -> String {
    let n = eq.n;
    let mut s = meta.header();
    let mut cols = vec!["t".to_string()];
    for i in 0..n {
        for j in 0..n {
            cols.push(format!("P_{i}{j}"));
        }
    }
    for i in 0..2 * n {
        for j in 0..2 * n {
            cols.push(format!("a1_{i}{j}"));
        }
    }
    for i in 0..2 * n {
        cols.push(format!("a2_{i}"));
    }
    let _ = writeln!(s, "{}", cols.join(","));
    for k in 0..eq.grid.points() {
        let mut row = vec![fmt(eq.grid.t(k))];
        let p = eq.p.at(k);
        for i in 0..n {
            for j in 0..n {
                row.push(fmt(p[(i, j)]));
            }
        }
        let a1 = eq.alpha1.at(k);
        for i in 0..2 * n {
            for j in 0..2 * n {
                row.push(fmt(a1[(i, j)]));
            }
        }
        let a2 = eq.alpha2.at(k);
        for i in 0..2 * n {
            row.push(fmt(a2[(i, 0)]));
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

#[derive(Serialize)]
struct LambdaFile {
    meta: LambdaMeta,
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
    residuals: Vec<f64>,
}

#[derive(Serialize)]
struct LambdaMeta {
    tool_version: String,
    spec_digest: String,
    grid_steps: usize,
    dt: f64,
    sigma_approximate: bool,
    xi_approximate: bool,
    offgrid_interpolation: String,
}

/// lambda.json with the embedding multipliers and fixed-point residuals.
pub fn lambda_json(eq: &EquilibriumSolution) -> String {
    let file = LambdaFile {
        meta: LambdaMeta {
            tool_version: eq.meta.version.clone(),
            spec_digest: eq.spec_digest.clone(),
            grid_steps: eq.meta.steps,
            dt: eq.meta.dt,
            sigma_approximate: eq.meta.sigma_approximate,
            xi_approximate: eq.meta.xi_approximate,
            offgrid_interpolation: eq.meta.offgrid_interpolation.clone(),
        },
        lambda1: eq.lambda1.iter().copied().collect(),
        lambda2: eq.lambda2.iter().copied().collect(),
        residuals: vec![eq.residuals.0, eq.residuals.1],
    };
    serde_json::to_string_pretty(&file).expect("lambda serializes")
}

/// paths.csv: path, t, X, Y1, Y2, Xhat, Xcheck, h, u1, u2.
pub fn paths_csv(bundle: &PathBundle, meta: &Meta<'_>) -> Result<String> {
    let n = bundle.n;
    let mut s = meta.header();
    let has_leader = !matches!(bundle.mode, crate::sde::LoopMode::OpenLoop);
    let mut cols = vec!["path".to_string(), "t".to_string()];
    for i in 0..n {
        cols.push(format!("X_{i}"));
    }
    cols.push("Y1".into());
    cols.push("Y2".into());
    for i in 0..n {
        cols.push(format!("Xhat_{i}"));
    }
    for i in 0..n {
        cols.push(format!("Xcheck_{i}"));
    }
    for i in 0..n {
        cols.push(format!("h_{i}"));
    }
    let m = bundle
        .paths
        .first()
        .and_then(|p| p.series.as_ref())
        .map(|se| se.u1.first().map_or(0, |u| u.len()))
        .unwrap_or(0);
    for i in 0..m {
        cols.push(format!("u1_{i}"));
    }
    for i in 0..m {
        cols.push(format!("u2_{i}"));
    }
    let _ = writeln!(s, "{}", cols.join(","));
    let equilibrium = matches!(
        bundle.mode,
        crate::sde::LoopMode::Equilibrium | crate::sde::LoopMode::EquilibriumWithY
    );
    for (pi, tr) in bundle.paths.iter().enumerate() {
        let series = tr.series.as_ref().ok_or(crate::error::Error::MissingSeries("series"))?;
        for k in 0..series.z.len() {
            let z = &series.z[k];
            let mut row = vec![pi.to_string(), fmt(bundle.grid.t(k))];
            for i in 0..n {
                row.push(fmt(z[i]));
            }
            row.push(fmt(series.y1[k]));
            row.push(fmt(series.y2[k]));
            for i in 0..n {
                row.push(fmt(z[n + i]));
            }
            for i in 0..n {
                row.push(fmt(if has_leader { z[2 * n + i] } else { f64::NAN }));
            }
            for i in 0..n {
                row.push(fmt(if equilibrium { z[3 * n + i] } else { f64::NAN }));
            }
            let last = k == series.z.len() - 1;
            let uk = if last { series.u1.len() - 1 } else { k };
            for i in 0..m {
                row.push(fmt(series.u1[uk][i]));
            }
            for i in 0..m {
                row.push(fmt(series.u2[uk][i]));
            }
            let _ = writeln!(s, "{}", row.join(","));
        }
    }
    Ok(s)
}

/// costs.csv: which, value, stderr, running, mean, variance, n_paths, seed.
pub fn costs_csv(rows: &[(String, CostEstimate)], meta: &Meta<'_>) -> String {
    let mut s = meta.header();
    let _ = writeln!(s, "which,value,stderr,running,mean,variance,n_paths,seed");
    for (which, c) in rows {
        let _ = writeln!(
            s,
            "{which},{},{},{},{},{},{},{}",
            fmt(c.value),
            fmt(c.stderr),
            fmt(c.running),
            fmt(c.mean_term),
            fmt(c.variance_term),
            c.n_paths,
            meta.seed
        );
    }
    s
}

/// filter.csv: t, xhat, closure Sigma, closure Xi1 along one path.
pub fn filter_csv(
    spec: &ProblemSpec,
    series: &crate::sde::SeriesTrace,
    sigma: &crate::ode::MatrixTrajectory,
    xi1: &crate::ode::MatrixTrajectory,
    meta: &Meta<'_>,
) -> String {
    let n = spec.n;
    let mut s = meta.header();
    let mut cols = vec!["t".to_string()];
    for i in 0..n {
        cols.push(format!("xhat_{i}"));
    }
    for i in 0..n {
        for j in 0..n {
            cols.push(format!("Sigma_{i}{j}"));
        }
    }
    for i in 0..n {
        for j in 0..n {
            cols.push(format!("Xi1_{i}{j}"));
        }
    }
    let _ = writeln!(s, "{}", cols.join(","));
    for k in 0..series.z.len() {
        let mut row = vec![fmt(spec.grid.t(k))];
        for i in 0..n {
            row.push(fmt(series.z[k][n + i]));
        }
        let sg = sigma.at(k);
        for i in 0..n {
            for j in 0..n {
                row.push(fmt(sg[(i, j)]));
            }
        }
        let xi = xi1.at(k);
        for i in 0..n {
            for j in 0..n {
                row.push(fmt(xi[(i, j)]));
            }
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::scalar_spec;

    #[test]
    fn gains_csv_schema_and_determinism() {
        let spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 50);
        let eq = crate::game::solve_leader(&spec).unwrap();
        let meta = Meta { spec: &spec, seed: 42 };
        let a = gains_csv(&eq, &meta);
        let b = gains_csv(&eq, &meta);
        assert_eq!(a, b);
        let header = a.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(header, "t,P_00,a1_00,a1_01,a1_10,a1_11,a2_0,a2_1");
        assert_eq!(a.lines().filter(|l| !l.starts_with('#')).count(), 52);
    }

    #[test]
    fn lambda_json_round_trips() {
        let spec = scalar_spec(0.0, 1.0, 0.5, 1.0, 1.0, 50);
        let eq = crate::game::solve_leader(&spec).unwrap();
        let json = lambda_json(&eq);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["lambda1"].as_array().unwrap().len() == 1);
        assert!(v["residuals"][0].as_f64().unwrap() < 1e-8);
    }
}

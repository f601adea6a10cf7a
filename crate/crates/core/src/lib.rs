//! Stackelberg mean-variance game toolkit: synthesis of equilibrium
//! feedback for a partially observed linear-quadratic leader-follower game
//! driven by Brownian motions and marked Poisson jumps, simulation of the
//! filtered closed loop, and a Monte Carlo verification suite.

pub mod error;
pub mod filtering;
pub mod evaluate;
pub mod export;
pub mod game;
pub mod model;
pub mod ode;
pub mod plot;
pub mod riccati;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};

/// Canonical desk-scale instances used by the verification suite and the
/// acceptance tests.
pub mod testspec {
    use nalgebra::DVector;

    use crate::model::{CostSpec, MarkSpace, ProblemSpec, Schedule, TimeGrid};

    /// Scalar instance whose Riccati solution is p(t) = 1/(1 + (T - t)):
    /// A = 0, B1 = R1 = theta1 = 1, T = 1.
    pub fn scalar_riccati_oracle(steps: usize) -> ProblemSpec {
        ProblemSpec {
            n: 1,
            m: 1,
            x0: DVector::from_element(1, 1.0),
            grid: TimeGrid::new(1.0, steps),
            a: Schedule::zeros(1, 1),
            b1: Schedule::scalar(1.0),
            b2: Schedule::zeros(1, 1),
            c1: Schedule::zeros(1, 1),
            c2: Schedule::zeros(1, 1),
            h1: Schedule::zeros(1, 1),
            h11: Schedule::zeros(1, 1),
            h12: Schedule::zeros(1, 1),
            k1: Schedule::scalar(1.0),
            h2: Schedule::zeros(1, 1),
            h2u: Schedule::zeros(1, 1),
            k2: Schedule::scalar(1.0),
            marks1: MarkSpace::empty(),
            marks2: MarkSpace::empty(),
            cost: CostSpec {
                r1: Schedule::scalar(1.0),
                r2: Schedule::scalar(1.0),
                theta1: 1.0,
                theta2: 1.0,
                g1: DVector::from_element(1, 1.0),
                g2: DVector::from_element(1, 1.0),
            },
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use nalgebra::DVector;

    use crate::model::{CostSpec, MarkSpace, ProblemSpec, Schedule, TimeGrid};

    /// Scalar instance with all-zero observation drifts and no jumps.
    pub fn scalar_spec(a: f64, b1: f64, b2: f64, theta1: f64, theta2: f64, steps: usize) -> ProblemSpec {
        ProblemSpec {
            n: 1,
            m: 1,
            x0: DVector::from_element(1, 1.0),
            grid: TimeGrid::new(1.0, steps),
            a: Schedule::scalar(a),
            b1: Schedule::scalar(b1),
            b2: Schedule::scalar(b2),
            c1: Schedule::zeros(1, 1),
            c2: Schedule::zeros(1, 1),
            h1: Schedule::zeros(1, 1),
            h11: Schedule::zeros(1, 1),
            h12: Schedule::zeros(1, 1),
            k1: Schedule::scalar(1.0),
            h2: Schedule::zeros(1, 1),
            h2u: Schedule::zeros(1, 1),
            k2: Schedule::scalar(1.0),
            marks1: MarkSpace::empty(),
            marks2: MarkSpace::empty(),
            cost: CostSpec {
                r1: Schedule::scalar(1.0),
                r2: Schedule::scalar(1.0),
                theta1,
                theta2,
                g1: DVector::from_element(1, 1.0),
                g2: DVector::from_element(1, 1.0),
            },
        }
    }
}

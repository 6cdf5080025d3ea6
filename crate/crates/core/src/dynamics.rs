//! Ackermann kinematics: the Euler-discretized step, its exact Jacobian
//! linearization, and nonlinear rollouts used as simulation ground truth.

use crate::geometry::{normalize_angle, PlanarState};
use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("linearization is singular at steering angle {steer} (|steer| must be < pi/2)")]
    SingularLinearization { steer: f64 },
}

/// Actuation command: longitudinal speed and front-wheel steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub speed: f64,
    pub steer: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput {
        speed: 0.0,
        steer: 0.0,
    };

    pub fn new(speed: f64, steer: f64) -> Self {
        Self { speed, steer }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.speed, self.steer)
    }
}

/// Control limits: absolute bounds on the command and per-step bounds on the
/// change between consecutive commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub u_min: ControlInput,
    pub u_max: ControlInput,
    pub a_min: ControlInput,
    pub a_max: ControlInput,
}

impl ControlBounds {
    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            speed: u.speed.clamp(self.u_min.speed, self.u_max.speed),
            steer: u.steer.clamp(self.u_min.steer, self.u_max.steer),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.u_min.speed <= self.u_max.speed
            && self.u_min.steer <= self.u_max.steer
            && self.a_min.speed <= self.a_max.speed
            && self.a_min.steer <= self.a_max.steer
    }

    /// True iff `u` is inside the absolute bounds within `tol`.
    pub fn contains(&self, u: &ControlInput, tol: f64) -> bool {
        u.speed >= self.u_min.speed - tol
            && u.speed <= self.u_max.speed + tol
            && u.steer >= self.u_min.steer - tol
            && u.steer <= self.u_max.steer + tol
    }

    /// True iff the step `to - from` is inside the rate bounds within `tol`.
    pub fn rate_ok(&self, from: &ControlInput, to: &ControlInput, tol: f64) -> bool {
        let ds = to.speed - from.speed;
        let dd = to.steer - from.steer;
        ds >= self.a_min.speed - tol
            && ds <= self.a_max.speed + tol
            && dd >= self.a_min.steer - tol
            && dd <= self.a_max.steer + tol
    }
}

/// First-order model `s' = A s + B u + c` about a reference point, together
/// with the discretization step and wheelbase it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedDynamics {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: Vector3<f64>,
    pub dt: f64,
    pub wheelbase: f64,
}

impl LinearizedDynamics {
    pub fn predict(&self, s: &Vector3<f64>, u: &Vector2<f64>) -> Vector3<f64> {
        self.a * s + self.b * u + self.c
    }
}

/// One Euler step of the Ackermann model:
/// `x' = x + v cos(theta) dt`, `y' = y + v sin(theta) dt`,
/// `theta' = theta + (v / L) tan(steer) dt`, with the heading renormalized.
pub fn step_nonlinear(s: &PlanarState, u: &ControlInput, dt: f64, wheelbase: f64) -> PlanarState {
    let next = step_raw(&Vector3::new(s.x, s.y, s.theta), u, dt, wheelbase);
    PlanarState::new(next.x, next.y, next.z)
}

/// Euler step on raw state vectors without heading normalization. The
/// planners work on this continuous branch so that trajectories crossing
/// +-pi stay smooth.
pub fn step_raw(s: &Vector3<f64>, u: &ControlInput, dt: f64, wheelbase: f64) -> Vector3<f64> {
    Vector3::new(
        s.x + u.speed * s.z.cos() * dt,
        s.y + u.speed * s.z.sin() * dt,
        s.z + u.speed / wheelbase * u.steer.tan() * dt,
    )
}

/// Exact Jacobians of `step_nonlinear` about `(s_ref, u_ref)`, with the
/// constant chosen so the model reproduces the nonlinear step at the
/// reference: `A s_ref + B u_ref + c = step_nonlinear(s_ref, u_ref)`.
pub fn linearize(
    s_ref: &PlanarState,
    u_ref: &ControlInput,
    dt: f64,
    wheelbase: f64,
) -> Result<LinearizedDynamics, DynamicsError> {
    linearize_about(
        &Vector3::new(s_ref.x, s_ref.y, s_ref.theta),
        u_ref,
        dt,
        wheelbase,
    )
}

/// Same as [`linearize`] but on a raw (possibly unwrapped) state vector.
pub fn linearize_about(
    s_ref: &Vector3<f64>,
    u_ref: &ControlInput,
    dt: f64,
    wheelbase: f64,
) -> Result<LinearizedDynamics, DynamicsError> {
    let cos_d = u_ref.steer.cos();
    if cos_d.abs() < 1e-9 || u_ref.steer.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(DynamicsError::SingularLinearization {
            steer: u_ref.steer,
        });
    }
    let (sin_t, cos_t) = s_ref.z.sin_cos();
    let v = u_ref.speed;
    let tan_d = u_ref.steer.tan();

    let a = Matrix3::new(
        1.0,
        0.0,
        -v * sin_t * dt,
        0.0,
        1.0,
        v * cos_t * dt,
        0.0,
        0.0,
        1.0,
    );
    let b = Matrix3x2::new(
        cos_t * dt,
        0.0,
        sin_t * dt,
        0.0,
        tan_d * dt / wheelbase,
        v * dt / (wheelbase * cos_d * cos_d),
    );
    let next = step_raw(s_ref, u_ref, dt, wheelbase);
    let c = next - a * s_ref - b * u_ref.as_vector();
    Ok(LinearizedDynamics {
        a,
        b,
        c,
        dt,
        wheelbase,
    })
}

/// Repeated nonlinear steps. Output length is `controls.len() + 1` and the
/// first element is `s0`.
pub fn rollout(
    s0: &PlanarState,
    controls: &[ControlInput],
    dt: f64,
    wheelbase: f64,
) -> Vec<PlanarState> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    let mut s = *s0;
    for u in controls {
        s = step_nonlinear(&s, u, dt, wheelbase);
        states.push(s);
    }
    states
}

/// Rollout on the continuous heading branch (no wrapping).
pub fn rollout_raw(
    s0: &Vector3<f64>,
    controls: &[ControlInput],
    dt: f64,
    wheelbase: f64,
) -> Vec<Vector3<f64>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    let mut s = *s0;
    for u in controls {
        s = step_raw(&s, u, dt, wheelbase);
        states.push(s);
    }
    states
}

/// Residual of a state against a linearized prediction, with the heading
/// component compared modulo 2 pi.
pub fn wrapped_residual(predicted: &Vector3<f64>, actual: &Vector3<f64>) -> f64 {
    let dx = (predicted.x - actual.x).abs();
    let dy = (predicted.y - actual.y).abs();
    let dt = normalize_angle(predicted.z - actual.z).abs();
    dx.max(dy).max(dt)
}

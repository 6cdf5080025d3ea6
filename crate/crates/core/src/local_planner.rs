//! The conservative onboard planner: waypoint tracking MPC without collision
//! constraints, plus the braking rule and blocking detection that gate it.

use crate::convex::{solve_qp_warm, ConvexError, QpWarmStart, QuadraticProgram, SolveStatus};
use crate::dynamics::{
    linearize_about, rollout_raw, ControlBounds, ControlInput, LinearizedDynamics,
};
use crate::geometry::{dist_c, normalize_angle, ObstacleState, PlanarState};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("planning problem infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

/// Global path: ordered waypoints plus the half-width of the corridor around
/// the waypoint polyline that counts as "on the path".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PathData", into = "PathData")]
pub struct Path {
    waypoints: Vec<PlanarState>,
    corridor_halfwidth: f64,
    cumulative: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathData {
    waypoints: Vec<PlanarState>,
    corridor_halfwidth: f64,
}

impl TryFrom<PathData> for Path {
    type Error = PlannerError;
    fn try_from(d: PathData) -> Result<Self, Self::Error> {
        Path::new(d.waypoints, d.corridor_halfwidth)
    }
}

impl From<Path> for PathData {
    fn from(p: Path) -> Self {
        PathData {
            waypoints: p.waypoints,
            corridor_halfwidth: p.corridor_halfwidth,
        }
    }
}

impl Path {
    pub fn new(waypoints: Vec<PlanarState>, corridor_halfwidth: f64) -> Result<Self, PlannerError> {
        if waypoints.len() < 2 {
            return Err(PlannerError::InvalidPath(format!(
                "need at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if !(corridor_halfwidth > 0.0) {
            return Err(PlannerError::InvalidPath(
                "corridor_halfwidth must be positive".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(waypoints.len());
        cumulative.push(0.0);
        for w in waypoints.windows(2) {
            let seg = (w[1].position() - w[0].position()).norm();
            if seg < 1e-9 {
                return Err(PlannerError::InvalidPath(
                    "consecutive waypoints must be distinct".into(),
                ));
            }
            cumulative.push(cumulative.last().unwrap() + seg);
        }
        Ok(Self {
            waypoints,
            corridor_halfwidth,
            cumulative,
        })
    }

    pub fn waypoints(&self) -> &[PlanarState] {
        &self.waypoints
    }

    pub fn corridor_halfwidth(&self) -> f64 {
        self.corridor_halfwidth
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length of the closest polyline point to `p`.
    pub fn project_arc_length(&self, p: &Vector2<f64>) -> f64 {
        let mut best = f64::INFINITY;
        let mut best_arc = 0.0;
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let a = w[0].position();
            let b = w[1].position();
            let ab = b - a;
            let len = ab.norm();
            let t = ((p - a).dot(&ab) / (len * len)).clamp(0.0, 1.0);
            let d = (p - (a + ab * t)).norm();
            if d < best {
                best = d;
                best_arc = self.cumulative[i] + t * len;
            }
        }
        best_arc
    }

    /// Position and segment heading at the given arc length (clamped to the
    /// path ends).
    pub fn point_at_arc(&self, arc: f64) -> (Vector2<f64>, f64) {
        let arc = arc.clamp(0.0, self.total_length());
        for (i, w) in self.waypoints.windows(2).enumerate() {
            if arc <= self.cumulative[i + 1] || i + 2 == self.waypoints.len() {
                let a = w[0].position();
                let b = w[1].position();
                let seg_len = self.cumulative[i + 1] - self.cumulative[i];
                let t = ((arc - self.cumulative[i]) / seg_len).clamp(0.0, 1.0);
                let dir = (b - a) / seg_len;
                return (a + (b - a) * t, dir.y.atan2(dir.x));
            }
        }
        unreachable!("arc length clamped into path range")
    }

    /// Minimum distance from `p` to the sub-polyline between the two arc
    /// lengths.
    pub fn distance_within(&self, p: &Vector2<f64>, from_arc: f64, to_arc: f64) -> f64 {
        let from_arc = from_arc.clamp(0.0, self.total_length());
        let to_arc = to_arc.clamp(0.0, self.total_length());
        if to_arc <= from_arc {
            let (pt, _) = self.point_at_arc(from_arc);
            return (p - pt).norm();
        }
        let mut best = f64::INFINITY;
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let seg_start = self.cumulative[i];
            let seg_end = self.cumulative[i + 1];
            if seg_end < from_arc || seg_start > to_arc {
                continue;
            }
            let a = w[0].position();
            let b = w[1].position();
            let seg_len = seg_end - seg_start;
            let t_lo = ((from_arc - seg_start) / seg_len).clamp(0.0, 1.0);
            let t_hi = ((to_arc - seg_start) / seg_len).clamp(0.0, 1.0);
            let ca = a + (b - a) * t_lo;
            let cb = a + (b - a) * t_hi;
            let ab = cb - ca;
            let len2 = ab.norm_squared();
            let t = if len2 < 1e-18 {
                0.0
            } else {
                ((p - ca).dot(&ab) / len2).clamp(0.0, 1.0)
            };
            best = best.min((p - (ca + ab * t)).norm());
        }
        best
    }
}

/// Output of one planning call: `h` controls, the `h + 1` predicted states of
/// the solve, and whether the braking rule fired.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalPlan {
    pub controls: Vec<ControlInput>,
    pub states: Vec<PlanarState>,
    pub braked: bool,
}

impl LocalPlan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal_state(&self) -> &PlanarState {
        self.states.last().expect("plan has at least one state")
    }
}

/// Lookahead cap for the blocking test, as a multiple of the braking
/// distance.
const BLOCKING_LOOKAHEAD_FACTOR: f64 = 3.0;

/// True iff some obstacle is both within center distance `d_b` of the robot
/// and within the path corridor on the forward stretch of the polyline
/// (ahead of the robot's projection, capped at `3 d_b` of arc length).
pub fn detect_blocking(
    s: &PlanarState,
    obstacles: &[ObstacleState],
    path: &Path,
    d_b: f64,
) -> bool {
    let robot_arc = path.project_arc_length(&s.position());
    let lookahead_end = robot_arc + BLOCKING_LOOKAHEAD_FACTOR * d_b;
    obstacles.iter().any(|o| {
        if dist_c(s, &o.pose()) > d_b {
            return false;
        }
        let lateral = path.distance_within(&o.center(), robot_arc, lookahead_end);
        lateral <= path.corridor_halfwidth()
    })
}

/// Tracking references along the path: the robot's arc-length projection
/// advanced by `t * v_nominal * dt` per step, with headings unwrapped so the
/// sequence stays on the continuous branch nearest the robot's heading.
pub fn reference_states(
    path: &Path,
    s: &PlanarState,
    h: usize,
    v_nominal: f64,
    dt: f64,
) -> Vec<Vector3<f64>> {
    let start_arc = path.project_arc_length(&s.position());
    let mut prev_theta = s.theta;
    (0..=h)
        .map(|t| {
            let (pos, heading) = path.point_at_arc(start_arc + t as f64 * v_nominal * dt);
            let unwrapped = prev_theta + normalize_angle(heading - prev_theta);
            prev_theta = unwrapped;
            Vector3::new(pos.x, pos.y, unwrapped)
        })
        .collect()
}

/// Variable layout of the trajectory QP:
/// states `s_0..s_H` (3 each), controls `u_0..u_{H-1}` (2 each), and control
/// steps `d_t = u_t - u_{t-1}` (2 each, with `d_0 = u_0 - u_prev`).
pub(crate) struct TrajectoryLayout {
    pub h: usize,
}

impl TrajectoryLayout {
    pub fn state(&self, t: usize) -> usize {
        3 * t
    }
    pub fn control(&self, t: usize) -> usize {
        3 * (self.h + 1) + 2 * t
    }
    pub fn delta(&self, t: usize) -> usize {
        3 * (self.h + 1) + 2 * self.h + 2 * t
    }
    pub fn num_vars(&self) -> usize {
        3 * (self.h + 1) + 4 * self.h
    }
}

/// Tiny control regularization to break ties in directions the tracking
/// objective leaves free (steering at zero reference speed).
const CONTROL_REG: f64 = 1e-8;

/// Base tracking QP shared by the local planner and the edge planner's state
/// subproblem: tracking objective, linearized dynamics equalities, control
/// and rate boxes, and an optional trust region around the linearization
/// reference.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_trajectory_qp(
    layout: &TrajectoryLayout,
    s_init: &Vector3<f64>,
    u_prev: &ControlInput,
    refs: &[Vector3<f64>],
    lins: &[LinearizedDynamics],
    lin_ref_states: &[Vector3<f64>],
    bounds: &ControlBounds,
    trust_region: Option<Vector3<f64>>,
) -> QuadraticProgram {
    let h = layout.h;
    let n = layout.num_vars();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut q = DVector::<f64>::zeros(n);

    for t in 0..=h {
        let base = layout.state(t);
        for k in 0..3 {
            p[(base + k, base + k)] += 2.0;
            q[base + k] += -2.0 * refs[t][k];
        }
    }
    for t in 0..h {
        let base = layout.control(t);
        p[(base, base)] += CONTROL_REG;
        p[(base + 1, base + 1)] += CONTROL_REG;
    }

    let m = 3 + 3 * h + 2 * h;
    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut b = DVector::<f64>::zeros(m);
    // s_0 = s_init
    for k in 0..3 {
        a[(k, layout.state(0) + k)] = 1.0;
        b[k] = s_init[k];
    }
    // s_{t+1} - A_t s_t - B_t u_t = c_t
    for t in 0..h {
        let row = 3 + 3 * t;
        for k in 0..3 {
            a[(row + k, layout.state(t + 1) + k)] = 1.0;
            for j in 0..3 {
                a[(row + k, layout.state(t) + j)] = -lins[t].a[(k, j)];
            }
            for j in 0..2 {
                a[(row + k, layout.control(t) + j)] = -lins[t].b[(k, j)];
            }
            b[row + k] = lins[t].c[k];
        }
    }
    // d_0 = u_0 - u_prev; d_t = u_t - u_{t-1}
    for t in 0..h {
        let row = 3 + 3 * h + 2 * t;
        for j in 0..2 {
            a[(row + j, layout.delta(t) + j)] = 1.0;
            a[(row + j, layout.control(t) + j)] = -1.0;
            if t == 0 {
                b[row + j] = -u_prev.as_vector()[j];
            } else {
                a[(row + j, layout.control(t - 1) + j)] = 1.0;
            }
        }
    }

    let mut qp = QuadraticProgram::new(p, q, a, b);
    for t in 0..h {
        let cu = layout.control(t);
        qp.lower[cu] = bounds.u_min.speed;
        qp.upper[cu] = bounds.u_max.speed;
        qp.lower[cu + 1] = bounds.u_min.steer;
        qp.upper[cu + 1] = bounds.u_max.steer;
        let cd = layout.delta(t);
        qp.lower[cd] = bounds.a_min.speed;
        qp.upper[cd] = bounds.a_max.speed;
        qp.lower[cd + 1] = bounds.a_min.steer;
        qp.upper[cd + 1] = bounds.a_max.steer;
    }
    if let Some(halfwidth) = trust_region {
        for t in 1..=h {
            let base = layout.state(t);
            for k in 0..3 {
                qp.lower[base + k] = lin_ref_states[t][k] - halfwidth[k];
                qp.upper[base + k] = lin_ref_states[t][k] + halfwidth[k];
            }
        }
    }
    qp
}

pub(crate) fn unpack_solution(
    layout: &TrajectoryLayout,
    x: &DVector<f64>,
) -> (Vec<Vector3<f64>>, Vec<ControlInput>) {
    let states = (0..=layout.h)
        .map(|t| {
            let b = layout.state(t);
            Vector3::new(x[b], x[b + 1], x[b + 2])
        })
        .collect();
    let controls = (0..layout.h)
        .map(|t| {
            let b = layout.control(t);
            ControlInput::new(x[b], x[b + 1])
        })
        .collect();
    (states, controls)
}

pub(crate) fn tracking_cost(states: &[Vector3<f64>], refs: &[Vector3<f64>]) -> f64 {
    states
        .iter()
        .zip(refs)
        .map(|(s, r)| (s - r).norm_squared())
        .sum()
}

#[derive(Debug, Clone)]
pub struct TrackingOptions {
    pub max_passes: usize,
    pub pass_tol: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Reference advance speed; defaults to the speed upper bound.
    pub v_nominal: Option<f64>,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        Self {
            max_passes: 5,
            pass_tol: 1e-4,
            // Tight enough that rate-bound residuals of the splitting solver
            // stay below the 1e-7 feasibility contract on returned controls.
            qp_tol: 1e-8,
            qp_max_iter: 8000,
            v_nominal: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrackingDiagnostics {
    /// Tracking objective of each accepted convexification pass.
    pub pass_objectives: Vec<f64>,
}

/// Solves the tracking problem (no collision constraints) by sequential
/// convexification: linearize the dynamics about the previous iterate's
/// rollout, solve the QP, repeat up to `max_passes` times or until the
/// trajectory stops changing. A pass that would increase the objective is
/// discarded.
pub fn plan_tracking(
    s: &PlanarState,
    u_prev: &ControlInput,
    path: &Path,
    h: usize,
    bounds: &ControlBounds,
    dt: f64,
    wheelbase: f64,
) -> Result<LocalPlan, PlannerError> {
    plan_tracking_with(s, u_prev, path, h, bounds, dt, wheelbase, &TrackingOptions::default())
        .map(|(plan, _)| plan)
}

#[allow(clippy::too_many_arguments)]
pub fn plan_tracking_with(
    s: &PlanarState,
    u_prev: &ControlInput,
    path: &Path,
    h: usize,
    bounds: &ControlBounds,
    dt: f64,
    wheelbase: f64,
    opts: &TrackingOptions,
) -> Result<(LocalPlan, TrackingDiagnostics), PlannerError> {
    assert!(h >= 1, "horizon must be at least 1");
    if !bounds.is_valid() {
        return Err(PlannerError::Infeasible("contradictory control bounds".into()));
    }
    let layout = TrajectoryLayout { h };
    let v_nominal = opts.v_nominal.unwrap_or(bounds.u_max.speed);
    let refs = reference_states(path, s, h, v_nominal, dt);
    let s_init = Vector3::new(s.x, s.y, s.theta);

    let mut ref_controls = vec![bounds.clamp(*u_prev); h];
    let mut ref_states = rollout_raw(&s_init, &ref_controls, dt, wheelbase);

    let mut best: Option<(f64, Vec<Vector3<f64>>, Vec<ControlInput>)> = None;
    let mut diagnostics = TrackingDiagnostics::default();
    let mut warm = QpWarmStart::default();

    for _pass in 0..opts.max_passes {
        let lins: Vec<LinearizedDynamics> = ref_states[..h]
            .iter()
            .zip(&ref_controls)
            .map(|(sr, ur)| linearize_about(sr, ur, dt, wheelbase))
            .collect::<Result<_, _>>()
            .map_err(|e| PlannerError::Infeasible(e.to_string()))?;
        let qp = build_trajectory_qp(
            &layout, &s_init, u_prev, &refs, &lins, &ref_states, bounds, None,
        );
        let report = solve_qp_warm(&qp, opts.qp_tol, opts.qp_max_iter, &warm)?;
        if report.status == SolveStatus::Infeasible {
            return Err(PlannerError::Infeasible(
                "tracking QP has no feasible point".into(),
            ));
        }
        warm.z = Some(report.solution.clone());
        let (states, controls) = unpack_solution(&layout, &report.solution);
        let objective = tracking_cost(&states, &refs);

        if let Some((best_obj, best_states, _)) = &best {
            if objective > best_obj + 1e-12 {
                break;
            }
            let change = states
                .iter()
                .zip(best_states)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max);
            diagnostics.pass_objectives.push(objective);
            let converged = change <= opts.pass_tol;
            ref_states = rollout_raw(&s_init, &controls, dt, wheelbase);
            ref_controls = controls.clone();
            best = Some((objective, states, controls));
            if converged {
                break;
            }
        } else {
            diagnostics.pass_objectives.push(objective);
            ref_states = rollout_raw(&s_init, &controls, dt, wheelbase);
            ref_controls = controls.clone();
            best = Some((objective, states, controls));
        }
    }

    let (_, states, controls) = best.expect("at least one pass runs");
    let plan = LocalPlan {
        controls,
        states: states
            .iter()
            .map(|v| PlanarState::new(v.x, v.y, v.z))
            .collect(),
        braked: false,
    };
    Ok((plan, diagnostics))
}

/// Braking plan: maximal per-step deceleration with steering frozen at the
/// previous command, floored at standstill.
pub fn braking_plan(
    s: &PlanarState,
    u_prev: &ControlInput,
    h: usize,
    bounds: &ControlBounds,
    dt: f64,
    wheelbase: f64,
) -> LocalPlan {
    let floor = bounds.u_min.speed.max(0.0);
    let steer = u_prev.steer.clamp(bounds.u_min.steer, bounds.u_max.steer);
    let mut speed = u_prev.speed;
    let controls: Vec<ControlInput> = (0..h)
        .map(|_| {
            speed = (speed + bounds.a_min.speed).max(floor);
            ControlInput::new(speed, steer)
        })
        .collect();
    let states = crate::dynamics::rollout(s, &controls, dt, wheelbase);
    LocalPlan {
        controls,
        states,
        braked: true,
    }
}

/// The onboard planner: brake when blocked, track otherwise.
#[allow(clippy::too_many_arguments)]
pub fn act_local(
    s: &PlanarState,
    u_prev: &ControlInput,
    obstacles: &[ObstacleState],
    path: &Path,
    h: usize,
    bounds: &ControlBounds,
    dt: f64,
    wheelbase: f64,
    d_b: f64,
) -> Result<LocalPlan, PlannerError> {
    if detect_blocking(s, obstacles, path, d_b) {
        Ok(braking_plan(s, u_prev, h, bounds, dt, wheelbase))
    } else {
        plan_tracking(s, u_prev, path, h, bounds, dt, wheelbase)
    }
}

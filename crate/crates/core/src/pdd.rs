//! The edge trajectory planner: a penalty-dual method for tracking under
//! polytope clearance constraints.
//!
//! Clearance `dist(robot(s_t), obstacle_m) >= d` is enforced through its dual
//! certificate `(lam, mu, z)`: the planner introduces the coupling residuals
//!
//! `U = mu^T G + lam^T H R(s)`  and  `V = lam^T H p(s) - lam^T h - mu^T g - z - d`
//!
//! and minimizes the augmented objective
//! `sum ||s_t - ref_t||^2 + (rho/2) sum ||U + zeta||^2 + (rho/2) sum (V + xi)^2`
//! by alternating a QP in the trajectory variables with small projected
//! solves in the certificate variables, then either stepping the slacks
//! (`zeta += U`, `xi += V`) when the residual `Phi = max(||U||_inf, |V|)` has
//! dropped below the running tolerance, or growing `rho` otherwise.

use crate::convex::{solve_qp_warm, QpWarmStart, SolveStatus};
use crate::dynamics::{linearize_about, rollout_raw, ControlBounds, ControlInput};
use crate::geometry::{polytope_distance, transform, ConvexPolytope, ObstacleState, PlanarState};
use crate::local_planner::{
    build_trajectory_qp, plan_tracking_with, reference_states, tracking_cost, unpack_solution,
    LocalPlan, Path, PlannerError, TrackingOptions, TrajectoryLayout,
};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Certificate variables and augmented-Lagrangian slacks for one
/// (obstacle, time-step) pair, plus the clearance distance the pair is
/// currently certifying.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    /// Obstacle-face attentions, one per obstacle face.
    pub lam: DVector<f64>,
    /// Robot-face attentions, one per robot face.
    pub mu: DVector<f64>,
    /// Slack of the dual value inequality.
    pub z: f64,
    /// Running slack estimate for the two components of `U`.
    pub zeta: Vector2<f64>,
    /// Running slack estimate for `V`.
    pub xi: f64,
    /// Clearance distance: fixed to the configured safety distance, or a
    /// per-block variable when variable safety is enabled.
    pub d: f64,
    /// `U` at the last residual evaluation.
    pub last_u: Vector2<f64>,
    /// `V` at the last residual evaluation.
    pub last_v: f64,
}

impl AttentionBlock {
    pub fn zeros(obstacle_faces: usize, robot_faces: usize, d: f64) -> Self {
        Self {
            lam: DVector::zeros(obstacle_faces),
            mu: DVector::zeros(robot_faces),
            z: 0.0,
            zeta: Vector2::zeros(),
            xi: 0.0,
            d,
            last_u: Vector2::zeros(),
            last_v: 0.0,
        }
    }
}

/// Variable safety distance: the clearance becomes a per-block variable in
/// `[d_min, d_max]`, pushed toward larger values by a linear reward with
/// weight `eta_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSafety {
    pub d_min: f64,
    pub d_max: f64,
    pub eta_reg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PddConfig {
    /// Initial penalty weight.
    pub rho0: f64,
    /// Penalty growth factor (>= 1).
    pub beta: f64,
    /// Initial residual tolerance of the dual-update branch.
    pub eta0: f64,
    /// Geometric decay of the residual tolerance per dual update.
    pub eta_decay: f64,
    pub max_outer: usize,
    /// Final residual tolerance for convergence.
    pub eps_con: f64,
    /// Objective-change tolerance for convergence.
    pub eps_obj: f64,
    pub d_safe: f64,
    #[serde(default)]
    pub variable_safety: Option<VariableSafety>,
    /// Trust-region half-widths (x, y, theta) around the linearization
    /// reference in the trajectory subproblem.
    #[serde(default = "default_trust_xy")]
    pub trust_xy: f64,
    #[serde(default = "default_trust_theta")]
    pub trust_theta: f64,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_qp_max_iter")]
    pub qp_max_iter: usize,
    #[serde(default = "default_attention_tol")]
    pub attention_tol: f64,
    #[serde(default = "default_attention_max_iter")]
    pub attention_max_iter: usize,
}

fn default_trust_xy() -> f64 {
    0.5
}
fn default_trust_theta() -> f64 {
    0.3
}
fn default_qp_tol() -> f64 {
    1e-8
}
fn default_qp_max_iter() -> usize {
    8000
}
fn default_attention_tol() -> f64 {
    1e-8
}
fn default_attention_max_iter() -> usize {
    5000
}

impl Default for PddConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            beta: 2.0,
            eta0: 0.5,
            eta_decay: 0.8,
            max_outer: 300,
            eps_con: 1e-3,
            eps_obj: 1e-4,
            d_safe: 0.3,
            variable_safety: None,
            trust_xy: default_trust_xy(),
            trust_theta: default_trust_theta(),
            qp_tol: default_qp_tol(),
            qp_max_iter: default_qp_max_iter(),
            attention_tol: default_attention_tol(),
            attention_max_iter: default_attention_max_iter(),
        }
    }
}

impl PddConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if !(self.rho0 > 0.0) {
            errs.push("rho0 must be positive".to_string());
        }
        if self.beta < 1.0 {
            errs.push("beta must be >= 1".to_string());
        }
        if !(self.eta_decay > 0.0 && self.eta_decay < 1.0) {
            errs.push("eta_decay must lie in (0, 1)".to_string());
        }
        if let Some(vs) = &self.variable_safety {
            if !(vs.d_min <= self.d_safe && self.d_safe <= vs.d_max) {
                errs.push("variable_safety requires d_min <= d_safe <= d_max".to_string());
            }
            if vs.d_min < 0.0 {
                errs.push("variable_safety d_min must be nonnegative".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }

    fn initial_d(&self) -> f64 {
        match &self.variable_safety {
            Some(vs) => self.d_safe.clamp(vs.d_min, vs.d_max),
            None => self.d_safe,
        }
    }
}

/// One outer-iteration record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PddIteration {
    pub outer: usize,
    pub objective: f64,
    pub phi: f64,
    pub rho: f64,
}

/// All iterate state of one planner invocation.
#[derive(Debug, Clone)]
pub struct PddWorkspace {
    /// Trajectory states on the continuous heading branch, length `h + 1`.
    pub states: Vec<Vector3<f64>>,
    pub controls: Vec<ControlInput>,
    /// Attention blocks indexed `[obstacle][time]`.
    pub blocks: Vec<Vec<AttentionBlock>>,
    pub rho: f64,
    pub eta: f64,
    pub dual_updates: usize,
    pub outer_iter: usize,
    pub history: Vec<PddIteration>,
    pub last_phi: f64,
}

/// Immutable problem data of one planner invocation.
pub struct PddProblem<'a> {
    pub s0: Vector3<f64>,
    pub u_prev: ControlInput,
    pub h: usize,
    pub bounds: &'a ControlBounds,
    pub dt: f64,
    pub wheelbase: f64,
    pub robot_shape: &'a ConvexPolytope,
    /// World-frame obstacle polytopes, indexed `[obstacle][time]` with time
    /// running `0..=h`.
    pub obstacles: Vec<Vec<ConvexPolytope>>,
    /// Tracking references, length `h + 1`.
    pub refs: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PddStatus {
    /// Residual and objective converged and the returned trajectory passed
    /// the independent clearance check.
    Success,
    /// Outer iteration limit hit with the residual above tolerance.
    MaxOuter,
    /// Penalty overflow guard fired.
    MaxPenalty,
    /// Converged, but the independent clearance check rejected the plan.
    UnsafePlan,
}

#[derive(Debug, Clone)]
pub struct PddPlan {
    pub plan: LocalPlan,
    pub status: PddStatus,
    pub final_phi: f64,
    pub workspace: PddWorkspace,
}

impl PddPlan {
    pub fn is_success(&self) -> bool {
        self.status == PddStatus::Success
    }
}

/// `U(s, mu, lam) = mu^T G + lam^T H R(s)` as a column 2-vector.
pub fn eval_u(
    s: &Vector3<f64>,
    mu: &DVector<f64>,
    lam: &DVector<f64>,
    robot_shape: &ConvexPolytope,
    obstacle: &ConvexPolytope,
) -> Vector2<f64> {
    debug_assert_eq!(mu.len(), robot_shape.num_faces());
    debug_assert_eq!(lam.len(), obstacle.num_faces());
    let mut u = Vector2::zeros();
    for (n, m) in robot_shape.normals().iter().zip(mu.iter()) {
        u += n * *m;
    }
    let (sin_t, cos_t) = s.z.sin_cos();
    let rot_t = Matrix2::new(cos_t, sin_t, -sin_t, cos_t); // R(theta)^T
    let mut r = Vector2::zeros();
    for (n, l) in obstacle.normals().iter().zip(lam.iter()) {
        r += n * *l;
    }
    u + rot_t * r
}

/// `V(s, mu, lam, z) = lam^T H p(s) - lam^T h - mu^T g - z - d`.
pub fn eval_v(
    s: &Vector3<f64>,
    mu: &DVector<f64>,
    lam: &DVector<f64>,
    z: f64,
    robot_shape: &ConvexPolytope,
    obstacle: &ConvexPolytope,
    d: f64,
) -> f64 {
    debug_assert_eq!(mu.len(), robot_shape.num_faces());
    debug_assert_eq!(lam.len(), obstacle.num_faces());
    let p = Vector2::new(s.x, s.y);
    let mut r = Vector2::zeros();
    let mut lam_h = 0.0;
    for ((n, h), l) in obstacle
        .normals()
        .iter()
        .zip(obstacle.offsets())
        .zip(lam.iter())
    {
        r += n * *l;
        lam_h += h * l;
    }
    let mu_g: f64 = robot_shape
        .offsets()
        .iter()
        .zip(mu.iter())
        .map(|(g, m)| g * m)
        .sum();
    r.dot(&p) - lam_h - mu_g - z - d
}

/// Value of the augmented objective at the workspace iterate.
pub fn eval_lagrangian(ws: &PddWorkspace, problem: &PddProblem) -> f64 {
    let mut value = tracking_cost(&ws.states, &problem.refs);
    for (m, track) in problem.obstacles.iter().enumerate() {
        for (t, obstacle) in track.iter().enumerate() {
            let block = &ws.blocks[m][t];
            let u = eval_u(
                &ws.states[t],
                &block.mu,
                &block.lam,
                problem.robot_shape,
                obstacle,
            );
            let v = eval_v(
                &ws.states[t],
                &block.mu,
                &block.lam,
                block.z,
                problem.robot_shape,
                obstacle,
                block.d,
            );
            value += 0.5 * ws.rho * (u + block.zeta).norm_squared();
            value += 0.5 * ws.rho * (v + block.xi).powi(2);
        }
    }
    value
}

/// `Phi`: the largest coupling violation over all blocks, refreshing each
/// block's cached `U` and `V` at the current states.
pub fn residual_phi(ws: &mut PddWorkspace, problem: &PddProblem) -> f64 {
    let mut phi: f64 = 0.0;
    for (m, track) in problem.obstacles.iter().enumerate() {
        for (t, obstacle) in track.iter().enumerate() {
            let block = &mut ws.blocks[m][t];
            let u = eval_u(
                &ws.states[t],
                &block.mu,
                &block.lam,
                problem.robot_shape,
                obstacle,
            );
            let v = eval_v(
                &ws.states[t],
                &block.mu,
                &block.lam,
                block.z,
                problem.robot_shape,
                obstacle,
                block.d,
            );
            block.last_u = u;
            block.last_v = v;
            phi = phi.max(u.amax()).max(v.abs());
        }
    }
    ws.last_phi = phi;
    phi
}

/// Penalty overflow guard.
const RHO_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterStep {
    DualUpdate,
    PenaltyUpdate,
    PenaltyOverflow,
}

/// One outer step of the double loop: slack (dual) update when the cached
/// residual is within the running tolerance, penalty growth otherwise.
/// `residual_phi` must have been evaluated for the current iterate.
///
/// The slacks are the scaled multipliers `zeta = multiplier / rho`, so the
/// penalty branch divides them by `beta` to keep the multiplier estimate
/// fixed while `rho` grows. Growing `rho` with the slacks held fixed would
/// scale the multipliers by `beta` instead, which overshoots the coupling
/// constraints and diverges once the multipliers are near their target.
pub fn outer_update(ws: &mut PddWorkspace, config: &PddConfig) -> OuterStep {
    if ws.last_phi <= ws.eta {
        for track in ws.blocks.iter_mut() {
            for block in track.iter_mut() {
                block.zeta += block.last_u;
                block.xi += block.last_v;
            }
        }
        ws.dual_updates += 1;
        ws.eta = config.eta0 * config.eta_decay.powi(ws.dual_updates as i32);
        OuterStep::DualUpdate
    } else {
        ws.rho *= config.beta;
        for track in ws.blocks.iter_mut() {
            for block in track.iter_mut() {
                block.zeta /= config.beta;
                block.xi /= config.beta;
            }
        }
        if ws.rho > RHO_CAP {
            OuterStep::PenaltyOverflow
        } else {
            OuterStep::PenaltyUpdate
        }
    }
}

/// Report of one trajectory-subproblem solve: the QP objective at the
/// (packed) input iterate and at the output, for monotonicity checks.
#[derive(Debug, Clone)]
pub struct StateSolveReport {
    pub states: Vec<Vector3<f64>>,
    pub controls: Vec<ControlInput>,
    pub objective_at_input: f64,
    pub objective_at_output: f64,
}

/// Minimizes the augmented objective over the trajectory variables with the
/// attention blocks fixed, the rotation terms expanded to first order about
/// the linearization reference, and a trust region box around it.
///
/// The linearization reference must be dynamics-consistent (states equal to
/// the rollout of the controls), which makes it a feasible point of the QP
/// and guarantees the objective does not increase.
pub fn solve_state_subproblem(
    ws: &PddWorkspace,
    problem: &PddProblem,
    lin_states: &[Vector3<f64>],
    lin_controls: &[ControlInput],
    config: &PddConfig,
    warm: &mut QpWarmStart,
) -> Result<StateSolveReport, PlannerError> {
    let h = problem.h;
    let layout = TrajectoryLayout { h };
    let lins = lin_states[..h]
        .iter()
        .zip(lin_controls)
        .map(|(sr, ur)| linearize_about(sr, ur, problem.dt, problem.wheelbase))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PlannerError::Infeasible(e.to_string()))?;
    let mut qp = build_trajectory_qp(
        &layout,
        &problem.s0,
        &problem.u_prev,
        &problem.refs,
        &lins,
        lin_states,
        problem.bounds,
        Some(Vector3::new(config.trust_xy, config.trust_xy, config.trust_theta)),
    );

    // Penalty terms. V is linear in (x, y) as is; U depends on theta only
    // and is expanded to first order about the reference heading.
    for (m, track) in problem.obstacles.iter().enumerate() {
        for (t, obstacle) in track.iter().enumerate() {
            let block = &ws.blocks[m][t];
            let sx = layout.state(t);
            let theta_ref = lin_states[t].z;

            let mut r = Vector2::zeros();
            let mut lam_h = 0.0;
            for ((n, hh), l) in obstacle
                .normals()
                .iter()
                .zip(obstacle.offsets())
                .zip(block.lam.iter())
            {
                r += n * *l;
                lam_h += hh * l;
            }
            let mu_g: f64 = problem
                .robot_shape
                .offsets()
                .iter()
                .zip(block.mu.iter())
                .map(|(g, mm)| g * mm)
                .sum();
            let mut g_mu = Vector2::zeros();
            for (n, mm) in problem.robot_shape.normals().iter().zip(block.mu.iter()) {
                g_mu += n * *mm;
            }

            // U(theta) ~ u_const + u_theta * theta.
            let (sin_t, cos_t) = theta_ref.sin_cos();
            let rot_t = Matrix2::new(cos_t, sin_t, -sin_t, cos_t);
            let drot_t = Matrix2::new(-sin_t, cos_t, -cos_t, -sin_t);
            let u_theta = drot_t * r;
            let u_const = g_mu + rot_t * r - u_theta * theta_ref;

            let rho = ws.rho;
            // (rho/2) || u_const + u_theta theta + zeta ||^2
            qp.p[(sx + 2, sx + 2)] += rho * u_theta.norm_squared();
            qp.q[sx + 2] += rho * u_theta.dot(&(u_const + block.zeta));

            // (rho/2) ( r . (x, y) + k_v + xi )^2
            let k_v = -lam_h - mu_g - block.z - block.d;
            qp.p[(sx, sx)] += rho * r.x * r.x;
            qp.p[(sx + 1, sx + 1)] += rho * r.y * r.y;
            qp.p[(sx, sx + 1)] += rho * r.x * r.y;
            qp.p[(sx + 1, sx)] += rho * r.x * r.y;
            qp.q[sx] += rho * (k_v + block.xi) * r.x;
            qp.q[sx + 1] += rho * (k_v + block.xi) * r.y;
        }
    }

    // Objective at the packed input iterate (for the non-increase check).
    let pack = |states: &[Vector3<f64>], controls: &[ControlInput]| -> DVector<f64> {
        let mut x = DVector::zeros(layout.num_vars());
        for (t, s) in states.iter().enumerate() {
            for k in 0..3 {
                x[layout.state(t) + k] = s[k];
            }
        }
        let mut prev = problem.u_prev;
        for (t, u) in controls.iter().enumerate() {
            x[layout.control(t)] = u.speed;
            x[layout.control(t) + 1] = u.steer;
            x[layout.delta(t)] = u.speed - prev.speed;
            x[layout.delta(t) + 1] = u.steer - prev.steer;
            prev = *u;
        }
        x
    };
    let objective_at_input = qp.objective(&pack(lin_states, lin_controls));

    let report = solve_qp_warm(&qp, config.qp_tol, config.qp_max_iter, warm)?;
    if report.status == SolveStatus::Infeasible {
        return Err(PlannerError::Infeasible(
            "trajectory subproblem has no feasible point".into(),
        ));
    }
    warm.z = Some(report.solution.clone());
    let objective_at_output = qp.objective(&report.solution);
    let (states, controls) = unpack_solution(&layout, &report.solution);
    Ok(StateSolveReport {
        states,
        controls,
        objective_at_input,
        objective_at_output,
    })
}

#[derive(Debug, Clone)]
pub struct AttentionOutcome {
    pub block: AttentionBlock,
    /// Set when the inner solver hit its iteration cap before reaching the
    /// requested stationarity.
    pub degraded: bool,
    /// Final value of `0.5 ||U + zeta||^2 + 0.5 (V + xi)^2` (penalty weight
    /// excluded; the argmin does not depend on it).
    pub objective: f64,
}

/// Minimizes the block's two penalty terms over the certificate set
/// `{lam >= 0, mu >= 0, z >= 0, ||H^T lam|| <= 1}` by accelerated projected
/// descent with a monotone safeguard. With variable safety enabled, the
/// clearance `d` is optimized jointly through its 1-D closed form.
pub fn solve_attention_subproblem(
    block: &AttentionBlock,
    s_t: &Vector3<f64>,
    robot_shape: &ConvexPolytope,
    obstacle: &ConvexPolytope,
    rho: f64,
    config: &PddConfig,
) -> AttentionOutcome {
    debug_assert!(rho > 0.0);
    let l_obs = obstacle.num_faces();
    let l_rob = robot_shape.num_faces();
    let n = l_obs + l_rob + 1;

    // Stack y = [lam, mu, z]; U + zeta = m_u y + zeta, V + xi = m_v.y + c_v.
    let (sin_t, cos_t) = s_t.z.sin_cos();
    let rot_t = Matrix2::new(cos_t, sin_t, -sin_t, cos_t);
    let p = Vector2::new(s_t.x, s_t.y);
    let mut m_u = DMatrix::<f64>::zeros(2, n);
    let mut m_v = DVector::<f64>::zeros(n);
    for (i, (nrm, off)) in obstacle
        .normals()
        .iter()
        .zip(obstacle.offsets())
        .enumerate()
    {
        let col = rot_t * nrm;
        m_u[(0, i)] = col.x;
        m_u[(1, i)] = col.y;
        m_v[i] = nrm.dot(&p) - off;
    }
    for (j, (nrm, off)) in robot_shape
        .normals()
        .iter()
        .zip(robot_shape.offsets())
        .enumerate()
    {
        m_u[(0, l_obs + j)] = nrm.x;
        m_u[(1, l_obs + j)] = nrm.y;
        m_v[l_obs + j] = -off;
    }
    m_v[n - 1] = -1.0;

    let ht = DMatrix::from_fn(2, l_obs, |r, c| obstacle.normals()[c][r]);

    let mut d = block.d;
    let vs = config.variable_safety;

    let objective = |y: &DVector<f64>, d: f64| -> f64 {
        let u = &m_u * y + block.zeta;
        let v = m_v.dot(y) + (block.xi - d);
        0.5 * u.norm_squared() + 0.5 * v * v
    };
    let gradient = |y: &DVector<f64>, d: f64| -> DVector<f64> {
        let u = &m_u * y + block.zeta;
        let v = m_v.dot(y) + (block.xi - d);
        m_u.transpose() * u + &m_v * v
    };

    // Exact Lipschitz constant: largest eigenvalue of W W^T with
    // W = [m_u; m_v^T] (3 x n), so a 3x3 symmetric eigenproblem.
    let mut w = DMatrix::<f64>::zeros(3, n);
    w.view_mut((0, 0), (2, n)).copy_from(&m_u);
    w.view_mut((2, 0), (1, n)).copy_from(&m_v.transpose());
    let gram = &w * w.transpose();
    let lip = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-12);
    let step = 1.0 / lip;

    let project = |y: &DVector<f64>| -> DVector<f64> {
        let mut out = y.clone();
        // mu, z: clamp. lam: Dykstra alternation between the orthant and the
        // image-norm ball.
        for i in l_obs..n {
            out[i] = out[i].max(0.0);
        }
        let mut x = out.rows(0, l_obs).into_owned();
        let mut p_corr = DVector::<f64>::zeros(l_obs);
        let mut q_corr = DVector::<f64>::zeros(l_obs);
        for _ in 0..60 {
            let y1 = crate::convex::project_nonneg(&(&x + &p_corr));
            p_corr = &x + &p_corr - &y1;
            let x_new = crate::convex::project_ball_image(&(&y1 + &q_corr), &ht)
                .unwrap_or_else(|_| y1.clone());
            q_corr = &y1 + &q_corr - &x_new;
            let gap = (&x_new - &y1).amax();
            x = x_new;
            if gap < 1e-13 {
                break;
            }
        }
        out.rows_mut(0, l_obs).copy_from(&x);
        out
    };

    let mut y = DVector::<f64>::zeros(n);
    y.rows_mut(0, l_obs).copy_from(&block.lam);
    y.rows_mut(l_obs, l_rob).copy_from(&block.mu);
    y[n - 1] = block.z;
    let mut x = project(&y);
    let mut f_x = objective(&x, d);
    let mut momentum = x.clone();
    let mut t_k = 1.0f64;
    let mut degraded = true;

    let update_d = |y: &DVector<f64>, d_old: f64, rho: f64| -> f64 {
        match vs {
            None => d_old,
            Some(vs) => {
                // min (rho/2)(a - d)^2 - eta_reg d over [d_min, d_max]
                // with a = lam^T H p - lam^T h - mu^T g - z + xi.
                let a = m_v.dot(y) + block.xi;
                (a + vs.eta_reg / rho).clamp(vs.d_min, vs.d_max)
            }
        }
    };

    for iter in 0..config.attention_max_iter {
        let grad_m = gradient(&momentum, d);
        let mut cand = project(&(&momentum - &grad_m * step));
        let mut f_cand = objective(&cand, d);
        if f_cand > f_x {
            // Monotone safeguard: plain descent step from the best iterate.
            let grad_x = gradient(&x, d);
            cand = project(&(&x - &grad_x * step));
            f_cand = objective(&cand, d);
            t_k = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        momentum = &cand + (&cand - &x) * ((t_k - 1.0) / t_next);
        let moved = (&cand - &x).amax();
        x = cand;
        f_x = f_cand;
        t_k = t_next;
        d = update_d(&x, d, rho);

        if iter % 10 == 9 || moved < config.attention_tol {
            let grad_x = gradient(&x, d);
            let station = (&x - project(&(&x - &grad_x * step))).amax() / step;
            if station <= config.attention_tol {
                degraded = false;
                break;
            }
        }
    }

    let mut out = block.clone();
    out.lam = x.rows(0, l_obs).into_owned();
    out.mu = x.rows(l_obs, l_rob).into_owned();
    out.z = x[n - 1];
    out.d = d;
    AttentionOutcome {
        objective: objective(&x, d),
        block: out,
        degraded,
    }
}

/// Constant-velocity extrapolation of each obstacle over the horizon:
/// returns `[obstacle][time]` states with time running `0..=h`.
pub fn predict_obstacles(obstacles: &[ObstacleState], h: usize, dt: f64) -> Vec<Vec<ObstacleState>> {
    obstacles
        .iter()
        .map(|o| {
            (0..=h)
                .map(|t| {
                    let shift = o.velocity() * (t as f64 * dt);
                    ObstacleState::new(
                        o.a + shift.x,
                        o.b + shift.y,
                        o.phi,
                        o.velocity(),
                        o.shape.clone(),
                    )
                })
                .collect()
        })
        .collect()
}

/// Post-hoc clearance verification with the exact geometric oracle: every
/// (obstacle, step) pair must clear its block's distance within `slack`.
fn verify_clearance(
    states: &[Vector3<f64>],
    blocks: &[Vec<AttentionBlock>],
    problem: &PddProblem,
    slack: f64,
) -> bool {
    for (m, track) in problem.obstacles.iter().enumerate() {
        for (t, obstacle) in track.iter().enumerate() {
            let pose = PlanarState::new(states[t].x, states[t].y, states[t].z);
            let robot_world = transform(problem.robot_shape, &pose);
            if polytope_distance(&robot_world, obstacle) < blocks[m][t].d - slack {
                return false;
            }
        }
    }
    true
}

/// Clearance slack allowed between the converged residual and the exact
/// geometric check.
pub const CLEARANCE_SLACK: f64 = 1e-2;

/// Full planner: builds the problem from predicted obstacle states, runs the
/// double loop, and verifies the returned trajectory against the geometric
/// distance oracle before reporting success.
#[allow(clippy::too_many_arguments)]
pub fn plan_pdd(
    s: &PlanarState,
    u_prev: &ControlInput,
    robot_shape: &ConvexPolytope,
    predicted_obstacles: &[Vec<ObstacleState>],
    path: &Path,
    h: usize,
    bounds: &ControlBounds,
    dt: f64,
    wheelbase: f64,
    config: &PddConfig,
) -> Result<PddPlan, PlannerError> {
    plan_pdd_warm(
        s,
        u_prev,
        robot_shape,
        predicted_obstacles,
        path,
        h,
        bounds,
        dt,
        wheelbase,
        config,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn plan_pdd_warm(
    s: &PlanarState,
    u_prev: &ControlInput,
    robot_shape: &ConvexPolytope,
    predicted_obstacles: &[Vec<ObstacleState>],
    path: &Path,
    h: usize,
    bounds: &ControlBounds,
    dt: f64,
    wheelbase: f64,
    config: &PddConfig,
    warm_ws: Option<&PddWorkspace>,
) -> Result<PddPlan, PlannerError> {
    assert!(h >= 1, "horizon must be at least 1");
    config
        .validate()
        .map_err(PlannerError::Infeasible)?;
    for track in predicted_obstacles {
        assert_eq!(
            track.len(),
            h + 1,
            "each obstacle needs predicted states for t = 0..=h"
        );
    }

    // With no obstacles in range the collision terms vanish and the problem
    // is exactly the tracking problem.
    if predicted_obstacles.is_empty() {
        let (plan, _) = plan_tracking_with(
            s,
            u_prev,
            path,
            h,
            bounds,
            dt,
            wheelbase,
            &TrackingOptions {
                qp_tol: config.qp_tol,
                qp_max_iter: config.qp_max_iter,
                ..TrackingOptions::default()
            },
        )?;
        let states = plan
            .states
            .iter()
            .map(|p| Vector3::new(p.x, p.y, p.theta))
            .collect();
        let workspace = PddWorkspace {
            states,
            controls: plan.controls.clone(),
            blocks: Vec::new(),
            rho: config.rho0,
            eta: config.eta0,
            dual_updates: 0,
            outer_iter: 0,
            history: Vec::new(),
            last_phi: 0.0,
        };
        return Ok(PddPlan {
            plan,
            status: PddStatus::Success,
            final_phi: 0.0,
            workspace,
        });
    }

    let s0 = Vector3::new(s.x, s.y, s.theta);
    let v_nominal = bounds.u_max.speed;
    let problem = PddProblem {
        s0,
        u_prev: *u_prev,
        h,
        bounds,
        dt,
        wheelbase,
        robot_shape,
        obstacles: predicted_obstacles
            .iter()
            .map(|track| track.iter().map(|o| o.world_polytope()).collect())
            .collect(),
        refs: reference_states(path, s, h, v_nominal, dt),
    };

    // Warm start from a previous solve when the block structure matches:
    // controls shifted one step (receding horizon), duals reused.
    let init_d = config.initial_d();
    let matches_structure = |ws: &PddWorkspace| -> bool {
        ws.blocks.len() == problem.obstacles.len()
            && ws.controls.len() == h
            && ws
                .blocks
                .iter()
                .zip(&problem.obstacles)
                .all(|(track, obs)| {
                    track.len() == h + 1
                        && track
                            .iter()
                            .all(|b| b.lam.len() == obs[0].num_faces() && b.mu.len() == robot_shape.num_faces())
                })
    };
    let mut ws = match warm_ws.filter(|w| matches_structure(w)) {
        Some(prev) => {
            let mut controls: Vec<ControlInput> = prev.controls[1..].to_vec();
            controls.push(*prev.controls.last().unwrap());
            let controls: Vec<ControlInput> = controls.iter().map(|u| bounds.clamp(*u)).collect();
            PddWorkspace {
                states: rollout_raw(&s0, &controls, dt, wheelbase),
                controls,
                blocks: prev.blocks.clone(),
                rho: prev.rho.clamp(config.rho0, 1e6),
                eta: config.eta0,
                dual_updates: 0,
                outer_iter: 0,
                history: Vec::new(),
                last_phi: f64::INFINITY,
            }
        }
        None => {
            let controls = vec![bounds.clamp(*u_prev); h];
            PddWorkspace {
                states: rollout_raw(&s0, &controls, dt, wheelbase),
                controls,
                blocks: problem
                    .obstacles
                    .iter()
                    .map(|track| {
                        track
                            .iter()
                            .map(|o| {
                                AttentionBlock::zeros(o.num_faces(), robot_shape.num_faces(), init_d)
                            })
                            .collect()
                    })
                    .collect(),
                rho: config.rho0,
                eta: config.eta0,
                dual_updates: 0,
                outer_iter: 0,
                history: Vec::new(),
                last_phi: f64::INFINITY,
            }
        }
    };

    let mut qp_warm = QpWarmStart::default();
    let mut lin_states = ws.states.clone();
    let mut lin_controls = ws.controls.clone();
    let mut prev_objective = f64::INFINITY;
    let mut best: Option<(f64, f64, Vec<Vector3<f64>>, Vec<ControlInput>)> = None;
    let mut status = PddStatus::MaxOuter;

    for outer in 1..=config.max_outer {
        ws.outer_iter = outer;
        let solve = solve_state_subproblem(&ws, &problem, &lin_states, &lin_controls, config, &mut qp_warm)?;
        ws.states = solve.states;
        ws.controls = solve.controls;

        for m in 0..problem.obstacles.len() {
            for t in 0..=h {
                let outcome = solve_attention_subproblem(
                    &ws.blocks[m][t],
                    &ws.states[t],
                    robot_shape,
                    &problem.obstacles[m][t],
                    ws.rho,
                    config,
                );
                ws.blocks[m][t] = outcome.block;
            }
        }

        let phi = residual_phi(&mut ws, &problem);
        let objective = tracking_cost(&ws.states, &problem.refs);
        ws.history.push(PddIteration {
            outer,
            objective,
            phi,
            rho: ws.rho,
        });

        let improved = match &best {
            None => true,
            Some((best_phi, best_obj, _, _)) => {
                phi < best_phi - 1e-12 || (phi <= best_phi + 1e-12 && objective < *best_obj)
            }
        };
        if improved {
            best = Some((phi, objective, ws.states.clone(), ws.controls.clone()));
        }

        if phi <= config.eps_con && (objective - prev_objective).abs() <= config.eps_obj {
            status = if verify_clearance(&ws.states, &ws.blocks, &problem, CLEARANCE_SLACK) {
                PddStatus::Success
            } else {
                PddStatus::UnsafePlan
            };
            break;
        }
        prev_objective = objective;

        if outer_update(&mut ws, config) == OuterStep::PenaltyOverflow {
            status = PddStatus::MaxPenalty;
            break;
        }

        // Dynamics-consistent linearization reference for the next pass.
        lin_controls = ws.controls.clone();
        lin_states = rollout_raw(&s0, &lin_controls, dt, wheelbase);
    }

    if status != PddStatus::Success {
        if let Some((phi, _, states, controls)) = &best {
            ws.last_phi = *phi;
            ws.states = states.clone();
            ws.controls = controls.clone();
        }
    }
    let plan = LocalPlan {
        controls: ws.controls.clone(),
        states: ws
            .states
            .iter()
            .map(|v| PlanarState::new(v.x, v.y, v.z))
            .collect(),
        braked: false,
    };
    let final_phi = ws.last_phi;
    Ok(PddPlan {
        plan,
        status,
        final_phi,
        workspace: ws,
    })
}

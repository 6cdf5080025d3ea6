//! Deterministic discrete-time world: planner outputs are applied through
//! sampled communication delays and a serial edge-compute queue, scripted
//! obstacles and the server move on piecewise-constant-velocity segments,
//! and every tick is appended to a trace stream.
//!
//! Reproducibility contract: identical (scenario, seed) produce identical
//! traces, regardless of the worker count used for planning. All randomness
//! flows through one seeded generator touched only on the serial tick path,
//! and parallel planning results are committed in robot-index order.

use crate::decision::{
    comp_latency, decide, comm_latency, DecisionContext, DecisionOutcome, PruneReason, RadioMap,
    RobotView,
};
use crate::dynamics::{step_nonlinear, ControlBounds, ControlInput};
use crate::geometry::{dist_c, polytope_distance, transform, ObstacleState, PlanarState};
use crate::local_planner::{act_local, LocalPlan};
use crate::pdd::{plan_pdd_warm, predict_obstacles, PddPlan, PddWorkspace};
use crate::scenario::{script_velocity, ModePolicy, Scenario};
use crate::trace::{
    DecisionRecord, EdgeJobRecord, Mode, PddSolveRecord, TickRecord, TraceRecord,
};
use nalgebra::Vector2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One uniform round-trip latency draw from the zone matched at `s`.
pub fn sample_latency(
    map: &RadioMap,
    s: &PlanarState,
    server_xy: &Vector2<f64>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let window = map.zone_at(s, server_xy);
    window.sample(rng.random::<f64>())
}

/// Serial non-preemptive FIFO: the job starts when the server frees up and
/// occupies it for `c_k_ms`.
pub fn serve_edge_job(server: &mut ServerRuntime, c_k_ms: f64, submit_s: f64) -> f64 {
    let start = submit_s.max(server.busy_until_s);
    let completion = start + c_k_ms / 1000.0;
    server.busy_until_s = completion;
    completion
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Terminal {
    Goal { t: f64 },
    Collided { t: f64 },
}

#[derive(Debug, Clone)]
struct ActivePlan {
    /// Time of the state snapshot the plan was computed from.
    base_t: f64,
    controls: Vec<ControlInput>,
    success: bool,
    phi: Option<f64>,
    compute_ms: f64,
    comm_ms: f64,
}

#[derive(Debug, Clone)]
struct EdgeJob {
    submit_s: f64,
    arrival_s: f64,
    compute_ms: f64,
    comm_ms: f64,
    plan: PddPlan,
}

#[derive(Debug, Clone)]
struct LocalJob {
    base_t: f64,
    ready_s: f64,
    plan: LocalPlan,
}

#[derive(Debug)]
pub struct RobotRuntime {
    pub state: PlanarState,
    pub control: ControlInput,
    pub mode: Mode,
    pub terminal: Option<Terminal>,
    pub collisions: usize,
    pub switches: usize,
    speed_sum: f64,
    speed_max: f64,
    speed_samples: usize,
    inflight: Option<EdgeJob>,
    plan: Option<ActivePlan>,
    local_job: Option<LocalJob>,
    warm: Option<PddWorkspace>,
}

impl RobotRuntime {
    fn active(&self) -> bool {
        self.terminal.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ServerRuntime {
    pub state: PlanarState,
    pub busy_until_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotMetrics {
    /// Seconds to the goal; `None` on timeout or collision.
    pub navigation_time_s: Option<f64>,
    pub success: bool,
    pub collisions: usize,
    pub planner_switches: usize,
    pub mean_speed: f64,
    pub max_speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub per_robot: Vec<RobotMetrics>,
    /// Sum of navigation times, counting timeouts at the timeout value.
    pub total_navigation_time_s: f64,
    pub all_success: bool,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub workers: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

pub struct Simulation<'a> {
    scenario: &'a Scenario,
    options: SimOptions,
    rng: ChaCha8Rng,
    time: f64,
    tick_index: u64,
    decision_ticks: u64,
    pub robots: Vec<RobotRuntime>,
    pub obstacles: Vec<PlanarState>,
    pub server: ServerRuntime,
    trace: Vec<TraceRecord>,
}

impl<'a> Simulation<'a> {
    pub fn new(scenario: &'a Scenario, seed: u64, options: SimOptions) -> Self {
        let robots = scenario
            .robots
            .iter()
            .map(|r| RobotRuntime {
                state: r.start,
                control: ControlInput::ZERO,
                mode: Mode::Local,
                terminal: None,
                collisions: 0,
                switches: 0,
                speed_sum: 0.0,
                speed_max: 0.0,
                speed_samples: 0,
                inflight: None,
                plan: None,
                local_job: None,
                warm: None,
            })
            .collect();
        let decision_ticks =
            ((scenario.server.decision_period_s / scenario.dt).round() as u64).max(1);
        Self {
            scenario,
            options,
            rng: ChaCha8Rng::seed_from_u64(seed),
            time: 0.0,
            tick_index: 0,
            decision_ticks,
            robots,
            obstacles: scenario.obstacles.iter().map(|o| o.start).collect(),
            server: ServerRuntime {
                state: scenario.server.start,
                busy_until_s: 0.0,
            },
            trace: Vec::new(),
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn all_terminal(&self) -> bool {
        self.robots.iter().all(|r| !r.active())
    }

    fn obstacle_state(&self, idx: usize) -> ObstacleState {
        let spec = &self.scenario.obstacles[idx];
        let pose = self.obstacles[idx];
        ObstacleState::new(
            pose.x,
            pose.y,
            pose.theta,
            script_velocity(&spec.script, self.time),
            spec.shape.clone(),
        )
    }

    /// Obstacles within robot `k`'s sensing radius, including other robots
    /// that have not reached their goal.
    fn local_map(&self, k: usize) -> Vec<ObstacleState> {
        let spec = &self.scenario.robots[k];
        let robot = &self.robots[k];
        let mut map = Vec::new();
        for idx in 0..self.obstacles.len() {
            let o = self.obstacle_state(idx);
            if dist_c(&robot.state, &o.pose()) <= spec.local_map_radius_m {
                map.push(o);
            }
        }
        for (j, other) in self.robots.iter().enumerate() {
            if j == k || matches!(other.terminal, Some(Terminal::Goal { .. })) {
                continue;
            }
            if dist_c(&robot.state, &other.state) <= spec.local_map_radius_m {
                let (sin_t, cos_t) = other.state.theta.sin_cos();
                let vel = Vector2::new(other.control.speed * cos_t, other.control.speed * sin_t);
                map.push(ObstacleState::new(
                    other.state.x,
                    other.state.y,
                    other.state.theta,
                    vel,
                    self.scenario.robots[j].shape.clone(),
                ));
            }
        }
        map
    }

    /// Runs the decision engine for the current instant without advancing
    /// the world.
    pub fn decision_preview(&mut self) -> DecisionOutcome {
        self.run_policy_decision().0
    }

    fn run_policy_decision(&mut self) -> (DecisionOutcome, Vec<(usize, PddSolveRecord)>) {
        let active: Vec<usize> = (0..self.robots.len())
            .filter(|&i| self.robots[i].active())
            .collect();
        let maps: Vec<Vec<ObstacleState>> = active.iter().map(|&i| self.local_map(i)).collect();
        let server = &self.scenario.server;

        let views: Vec<RobotView> = active
            .iter()
            .zip(&maps)
            .map(|(&i, map)| RobotView {
                state: self.robots[i].state,
                u_prev: self.robots[i].control,
                shape: &self.scenario.robots[i].shape,
                path: &self.scenario.robots[i].path,
                bounds: &self.scenario.robots[i].bounds,
                wheelbase: self.scenario.robots[i].wheelbase,
                d_b: self.scenario.robots[i].d_b_m,
                obstacles: map.clone(),
                warm: self.robots[i].warm.as_ref(),
            })
            .collect();
        let ctx = DecisionContext {
            server_xy: self.server.state.position(),
            radio_map: &server.radio_map,
            compute_model: &server.compute_model,
            d_th_ms: server.d_th_ms,
            c_th_ms: server.c_th_ms,
            comm_quantile: server.comm_quantile,
            h: self.scenario.horizon,
            dt: self.scenario.dt,
            pdd: &self.scenario.planner,
            workers: self.options.workers,
        };

        let mut outcome = match self.scenario.mode_policy {
            ModePolicy::Earn | ModePolicy::LocalOnly => decide_or_empty(
                self.scenario.mode_policy,
                &views,
                &ctx,
            ),
            ModePolicy::EdgeOnly => {
                let mut alpha = vec![true; views.len()];
                let plans = plan_all(&views, &ctx);
                for (i, plan) in plans.iter().enumerate() {
                    if plan.is_none() {
                        alpha[i] = true; // edge-only keeps trying regardless
                    }
                }
                let comp_ms: Vec<f64> = views
                    .iter()
                    .map(|v| comp_latency(ctx.h, v.obstacles.len(), ctx.compute_model))
                    .collect();
                let comm_ms: Vec<f64> = views
                    .iter()
                    .map(|v| comm_latency(&v.state, &ctx.server_xy, ctx.radio_map, ctx.comm_quantile))
                    .collect();
                let gains = plans
                    .iter()
                    .zip(&views)
                    .map(|(p, v)| match p {
                        Some(p) if p.is_success() => dist_c(p.plan.terminal_state(), &v.state),
                        _ => 0.0,
                    })
                    .collect();
                DecisionOutcome {
                    alpha,
                    gains,
                    pruned: vec![PruneReason::Kept; views.len()],
                    comp_ms,
                    comm_ms,
                    plans,
                }
            }
            ModePolicy::Edf => {
                // Earliest-deadline-first: order by estimated remaining task
                // time, select greedily under the budgets, plan the selected.
                let comp_ms: Vec<f64> = views
                    .iter()
                    .map(|v| comp_latency(ctx.h, v.obstacles.len(), ctx.compute_model))
                    .collect();
                let comm_ms: Vec<f64> = views
                    .iter()
                    .map(|v| comm_latency(&v.state, &ctx.server_xy, ctx.radio_map, ctx.comm_quantile))
                    .collect();
                let mut order: Vec<usize> = (0..views.len()).collect();
                let deadline = |slot: usize| -> f64 {
                    let v = &views[slot];
                    let remaining = v.path.total_length()
                        - v.path.project_arc_length(&v.state.position());
                    remaining / v.bounds.u_max.speed.max(1e-9)
                };
                order.sort_by(|&a, &b| {
                    deadline(a).partial_cmp(&deadline(b)).unwrap().then(a.cmp(&b))
                });
                let mut alpha = vec![false; views.len()];
                let mut spent = 0.0;
                for slot in order {
                    if comm_ms[slot] <= ctx.d_th_ms && spent + comp_ms[slot] <= ctx.c_th_ms {
                        alpha[slot] = true;
                        spent += comp_ms[slot];
                    }
                }
                let selected_views: Vec<&RobotView> = alpha
                    .iter()
                    .zip(&views)
                    .filter_map(|(a, v)| a.then_some(v))
                    .collect();
                let mut plans: Vec<Option<PddPlan>> = vec![None; views.len()];
                let selected_plans = plan_selected(&selected_views, &ctx);
                let mut it = selected_plans.into_iter();
                for (slot, a) in alpha.iter().enumerate() {
                    if *a {
                        plans[slot] = it.next().unwrap();
                    }
                }
                let gains = plans
                    .iter()
                    .zip(&views)
                    .map(|(p, v)| match p {
                        Some(p) if p.is_success() => dist_c(p.plan.terminal_state(), &v.state),
                        _ => 0.0,
                    })
                    .collect();
                let pruned = alpha
                    .iter()
                    .map(|a| if *a { PruneReason::Kept } else { PruneReason::ZeroGain })
                    .collect();
                DecisionOutcome {
                    alpha,
                    gains,
                    pruned,
                    comp_ms,
                    comm_ms,
                    plans,
                }
            }
        };

        // Expand the active-robot outcome to full robot indexing.
        let k = self.robots.len();
        let mut full = DecisionOutcome {
            alpha: vec![false; k],
            gains: vec![0.0; k],
            pruned: vec![PruneReason::ZeroGain; k],
            comp_ms: vec![0.0; k],
            comm_ms: vec![0.0; k],
            plans: (0..k).map(|_| None).collect(),
        };
        let mut solve_records = Vec::new();
        for (slot, &i) in active.iter().enumerate() {
            full.alpha[i] = outcome.alpha[slot];
            full.gains[i] = outcome.gains[slot];
            full.pruned[i] = outcome.pruned[slot];
            full.comp_ms[i] = outcome.comp_ms[slot];
            full.comm_ms[i] = outcome.comm_ms[slot];
            if let Some(plan) = outcome.plans[slot].take() {
                solve_records.push((
                    i,
                    PddSolveRecord {
                        t: self.time,
                        robot: i,
                        status: format!("{:?}", plan.status),
                        iterations: plan.workspace.history.clone(),
                    },
                ));
                full.plans[i] = Some(plan);
            }
        }
        (full, solve_records)
    }

    fn brake_step(control: ControlInput, bounds: &ControlBounds) -> ControlInput {
        ControlInput::new(
            (control.speed + bounds.a_min.speed).max(bounds.u_min.speed.max(0.0)),
            control.steer,
        )
    }

    /// Advances the world by one step `dt`.
    pub fn tick(&mut self) {
        let dt = self.scenario.dt;
        let now = self.time;
        let mut events: Vec<String> = vec![String::new(); self.robots.len()];

        // (1) Decision cadence.
        if self.tick_index % self.decision_ticks == 0
            && self.scenario.mode_policy != ModePolicy::LocalOnly
            && self.robots.iter().any(|r| r.active())
        {
            let (outcome, solve_records) = self.run_policy_decision();
            debug_assert!(
                self.scenario.mode_policy != ModePolicy::Earn
                    || budget_safe(&outcome, self.scenario.server.c_th_ms, self.scenario.server.d_th_ms),
                "decision outcome violates budgets"
            );
            let plan_phase_ms = outcome
                .comp_ms
                .iter()
                .zip(&outcome.pruned)
                .filter(|(_, p)| **p == PruneReason::Kept)
                .map(|(c, _)| *c)
                .fold(0.0, f64::max);
            self.trace.push(TraceRecord::Decision(DecisionRecord {
                t: now,
                alpha: outcome.alpha.clone(),
                gains: outcome.gains.clone(),
                pruned: outcome.pruned.clone(),
                comp_ms: outcome.comp_ms.clone(),
                comm_ms: outcome.comm_ms.clone(),
                prune_phase_ms: 0.0,
                plan_phase_ms,
                select_phase_ms: 0.0,
            }));
            for (_, rec) in &solve_records {
                self.trace.push(TraceRecord::PddSolve(rec.clone()));
            }

            let mut plans = outcome.plans;
            for i in 0..self.robots.len() {
                if !self.robots[i].active() {
                    continue;
                }
                let selected = outcome.alpha[i];
                let was_edge = self.robots[i].mode == Mode::Edge;
                if selected && !was_edge {
                    self.robots[i].mode = Mode::Edge;
                    self.robots[i].switches += 1;
                    events[i] = "switch_to_edge".into();
                } else if !selected && was_edge {
                    self.robots[i].mode = Mode::Local;
                    self.robots[i].switches += 1;
                    self.robots[i].inflight = None;
                    self.robots[i].plan = None;
                    events[i] = "switch_to_local".into();
                }
                // Newly selected robots enqueue the decision plan as their
                // first edge job.
                if selected && !was_edge {
                    if let Some(plan) = plans[i].take() {
                        self.submit_edge_job(i, plan, outcome.comp_ms[i]);
                    }
                }
            }
        }

        // (2) Controls. Edge pipeline first: arrivals, then refills, in
        // robot-index order so the server queue and the RNG stream are
        // reproducible.
        for i in 0..self.robots.len() {
            if !self.robots[i].active() {
                continue;
            }
            match self.robots[i].mode {
                Mode::Edge => {
                    if let Some(job) = self.robots[i].inflight.clone() {
                        if job.arrival_s <= now {
                            self.trace.push(TraceRecord::EdgeJob(EdgeJobRecord {
                                t: now,
                                robot: i,
                                submit_s: job.submit_s,
                                compute_ms: job.compute_ms,
                                comm_ms: job.comm_ms,
                                arrival_s: job.arrival_s,
                                success: job.plan.is_success(),
                            }));
                            self.robots[i].warm = Some(job.plan.workspace.clone());
                            self.robots[i].plan = Some(ActivePlan {
                                base_t: job.submit_s,
                                controls: job.plan.plan.controls.clone(),
                                success: job.plan.is_success(),
                                phi: Some(job.plan.final_phi),
                                compute_ms: job.compute_ms,
                                comm_ms: job.comm_ms,
                            });
                            self.robots[i].inflight = None;
                        }
                    }
                    if self.robots[i].inflight.is_none() {
                        let map = self.local_map(i);
                        let spec = &self.scenario.robots[i];
                        let tracks = predict_obstacles(&map, self.scenario.horizon, dt);
                        let plan = plan_pdd_warm(
                            &self.robots[i].state,
                            &self.robots[i].control,
                            &spec.shape,
                            &tracks,
                            &spec.path,
                            self.scenario.horizon,
                            &spec.bounds,
                            dt,
                            spec.wheelbase,
                            &self.scenario.planner,
                            self.robots[i].warm.as_ref(),
                        );
                        if let Ok(plan) = plan {
                            let c_ms = comp_latency(
                                self.scenario.horizon,
                                map.len(),
                                &self.scenario.server.compute_model,
                            );
                            self.submit_edge_job(i, plan, c_ms);
                        }
                    }
                    // Apply: indexed control of the active plan, braking
                    // when it is stale, failed, or exhausted.
                    let stale_after = self.scenario.stale_after_frames * dt;
                    let bounds = self.scenario.robots[i].bounds;
                    let (control, event) = match &self.robots[i].plan {
                        Some(plan) => {
                            let age = now - plan.base_t;
                            let index = (age / dt).round() as usize;
                            if !plan.success {
                                (Self::brake_step(self.robots[i].control, &bounds), "plan_failed")
                            } else if age > stale_after + 1e-9 {
                                (Self::brake_step(self.robots[i].control, &bounds), "brake_stale")
                            } else if index < plan.controls.len() {
                                (plan.controls[index], "")
                            } else {
                                (Self::brake_step(self.robots[i].control, &bounds), "brake_stale")
                            }
                        }
                        // No plan has arrived yet: hold the previous control.
                        None => (self.robots[i].control, ""),
                    };
                    if events[i].is_empty() && !event.is_empty() {
                        events[i] = event.into();
                    }
                    self.robots[i].control = control;
                }
                Mode::Local => {
                    let spec = &self.scenario.robots[i];
                    if spec.local_compute_ms <= 0.0 {
                        let map = self.local_map(i);
                        let plan = act_local(
                            &self.robots[i].state,
                            &self.robots[i].control,
                            &map,
                            &spec.path,
                            self.scenario.horizon,
                            &spec.bounds,
                            dt,
                            spec.wheelbase,
                            spec.d_b_m,
                        );
                        match plan {
                            Ok(plan) => {
                                self.robots[i].control = plan.controls[0];
                            }
                            Err(_) => {
                                let bounds = spec.bounds;
                                self.robots[i].control =
                                    Self::brake_step(self.robots[i].control, &bounds);
                            }
                        }
                    } else {
                        // Delayed local planning: one job in flight, results
                        // applied by age once ready.
                        if let Some(job) = &self.robots[i].local_job {
                            if job.ready_s <= now {
                                let age = now - job.base_t;
                                let index = (age / dt).round() as usize;
                                if index < job.plan.controls.len() {
                                    self.robots[i].control = job.plan.controls[index];
                                } else {
                                    let bounds = spec.bounds;
                                    self.robots[i].control =
                                        Self::brake_step(self.robots[i].control, &bounds);
                                }
                            }
                        }
                        let need_new = match &self.robots[i].local_job {
                            None => true,
                            Some(job) => job.ready_s <= now,
                        };
                        if need_new {
                            let map = self.local_map(i);
                            if let Ok(plan) = act_local(
                                &self.robots[i].state,
                                &self.robots[i].control,
                                &map,
                                &spec.path,
                                self.scenario.horizon,
                                &spec.bounds,
                                dt,
                                spec.wheelbase,
                                spec.d_b_m,
                            ) {
                                self.robots[i].local_job = Some(LocalJob {
                                    base_t: now,
                                    ready_s: now + spec.local_compute_ms / 1000.0,
                                    plan,
                                });
                            }
                        }
                    }
                }
            }
        }

        // (3) Integrate all active robots.
        for (i, robot) in self.robots.iter_mut().enumerate() {
            if !robot.active() {
                continue;
            }
            let spec = &self.scenario.robots[i];
            robot.state = step_nonlinear(&robot.state, &robot.control, dt, spec.wheelbase);
            robot.speed_sum += robot.control.speed.abs();
            robot.speed_max = robot.speed_max.max(robot.control.speed.abs());
            robot.speed_samples += 1;
        }

        // (4) Advance scripted obstacles and the server.
        for (idx, pose) in self.obstacles.iter_mut().enumerate() {
            let v = script_velocity(&self.scenario.obstacles[idx].script, now);
            *pose = PlanarState::new(pose.x + v.x * dt, pose.y + v.y * dt, pose.theta);
        }
        let vs = script_velocity(&self.scenario.server.script, now);
        self.server.state = PlanarState::new(
            self.server.state.x + vs.x * dt,
            self.server.state.y + vs.y * dt,
            self.server.state.theta,
        );

        let new_time = now + dt;

        // (5) Collision and goal detection on the new configuration.
        let mut collided: Vec<usize> = Vec::new();
        for i in 0..self.robots.len() {
            if !self.robots[i].active() {
                continue;
            }
            let world_i = transform(&self.scenario.robots[i].shape, &self.robots[i].state);
            let mut hit = false;
            for idx in 0..self.obstacles.len() {
                let obs = transform(&self.scenario.obstacles[idx].shape, &self.obstacles[idx]);
                if polytope_distance(&world_i, &obs) <= 0.0 {
                    hit = true;
                }
            }
            for j in 0..self.robots.len() {
                if j == i || matches!(self.robots[j].terminal, Some(Terminal::Goal { .. })) {
                    continue;
                }
                let world_j = transform(&self.scenario.robots[j].shape, &self.robots[j].state);
                if polytope_distance(&world_i, &world_j) <= 0.0 {
                    hit = true;
                }
            }
            if hit {
                collided.push(i);
            } else if dist_c(&self.robots[i].state, &self.scenario.robots[i].goal)
                <= self.scenario.goal_tolerance_m
            {
                self.robots[i].terminal = Some(Terminal::Goal { t: new_time });
                events[i] = "goal".into();
            }
        }
        for &i in &collided {
            self.robots[i].terminal = Some(Terminal::Collided { t: new_time });
            self.robots[i].collisions += 1;
            self.robots[i].control = ControlInput::ZERO;
            events[i] = "collision".into();
        }

        // (6) Trace records for every robot that was active this tick.
        for (i, robot) in self.robots.iter().enumerate() {
            let was_active_this_tick =
                robot.active() || matches!(robot.terminal, Some(Terminal::Goal { t } | Terminal::Collided { t }) if t == new_time);
            if !was_active_this_tick {
                continue;
            }
            let (latency_ms, compute_ms, phi) = match (&robot.mode, &robot.plan) {
                (Mode::Edge, Some(plan)) => (plan.comm_ms, plan.compute_ms, plan.phi),
                (Mode::Local, _) => (0.0, self.scenario.robots[i].local_compute_ms, None),
                _ => (0.0, 0.0, None),
            };
            self.trace.push(TraceRecord::Tick(TickRecord {
                t: new_time,
                robot: i,
                x: robot.state.x,
                y: robot.state.y,
                theta: robot.state.theta,
                speed: robot.control.speed,
                steer: robot.control.steer,
                mode: robot.mode,
                latency_ms,
                compute_ms,
                phi_residual: phi,
                event: if events[i].is_empty() {
                    "none".into()
                } else {
                    events[i].clone()
                },
            }));
        }

        self.time = new_time;
        self.tick_index += 1;
    }

    fn submit_edge_job(&mut self, robot: usize, plan: PddPlan, c_ms: f64) {
        let now = self.time;
        let completion = serve_edge_job(&mut self.server, c_ms, now);
        let comm_ms = sample_latency(
            &self.scenario.server.radio_map,
            &self.robots[robot].state,
            &self.server.state.position(),
            &mut self.rng,
        );
        self.robots[robot].inflight = Some(EdgeJob {
            submit_s: now,
            arrival_s: completion + comm_ms / 1000.0,
            compute_ms: c_ms,
            comm_ms,
            plan,
        });
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        let timeout = self.scenario.timeout_s;
        let per_robot: Vec<RobotMetrics> = self
            .robots
            .iter()
            .map(|r| {
                let navigation_time_s = match r.terminal {
                    Some(Terminal::Goal { t }) => Some(t),
                    _ => None,
                };
                RobotMetrics {
                    navigation_time_s,
                    success: navigation_time_s.is_some() && r.collisions == 0,
                    collisions: r.collisions,
                    planner_switches: r.switches,
                    mean_speed: if r.speed_samples > 0 {
                        r.speed_sum / r.speed_samples as f64
                    } else {
                        0.0
                    },
                    max_speed: r.speed_max,
                }
            })
            .collect();
        EpisodeMetrics {
            total_navigation_time_s: per_robot
                .iter()
                .map(|m| m.navigation_time_s.unwrap_or(timeout))
                .sum(),
            all_success: per_robot.iter().all(|m| m.success),
            per_robot,
            timeout_s: timeout,
        }
    }
}

fn budget_safe(outcome: &DecisionOutcome, c_th: f64, d_th: f64) -> bool {
    let spent: f64 = outcome
        .alpha
        .iter()
        .zip(&outcome.comp_ms)
        .filter(|(a, _)| **a)
        .map(|(_, c)| *c)
        .sum();
    let comm_ok = outcome
        .alpha
        .iter()
        .zip(&outcome.comm_ms)
        .all(|(a, d)| !*a || *d <= d_th + 1e-9);
    spent <= c_th + 1e-9 && comm_ok
}

fn decide_or_empty(
    policy: ModePolicy,
    views: &[RobotView],
    ctx: &DecisionContext,
) -> DecisionOutcome {
    match policy {
        ModePolicy::LocalOnly => DecisionOutcome {
            alpha: vec![false; views.len()],
            gains: vec![0.0; views.len()],
            pruned: vec![PruneReason::ZeroGain; views.len()],
            comp_ms: vec![0.0; views.len()],
            comm_ms: vec![0.0; views.len()],
            plans: (0..views.len()).map(|_| None).collect(),
        },
        _ => decide(views, ctx),
    }
}

fn plan_all(views: &[RobotView], ctx: &DecisionContext) -> Vec<Option<PddPlan>> {
    let refs: Vec<&RobotView> = views.iter().collect();
    plan_selected(&refs, ctx)
}

fn plan_selected(views: &[&RobotView], ctx: &DecisionContext) -> Vec<Option<PddPlan>> {
    views
        .iter()
        .map(|v| {
            let tracks = predict_obstacles(&v.obstacles, ctx.h, ctx.dt);
            plan_pdd_warm(
                &v.state,
                &v.u_prev,
                v.shape,
                &tracks,
                v.path,
                ctx.h,
                v.bounds,
                ctx.dt,
                v.wheelbase,
                ctx.pdd,
                v.warm,
            )
            .ok()
        })
        .collect()
}

/// Runs a full episode: ticks until every robot is terminal or the timeout
/// elapses, then reports metrics and the trace.
pub fn run_episode(
    scenario: &Scenario,
    seed: u64,
    options: &SimOptions,
) -> (EpisodeMetrics, Vec<TraceRecord>) {
    let mut sim = Simulation::new(scenario, seed, *options);
    // An episode that starts at the goal terminates on the zeroth tick.
    for (i, robot) in sim.robots.iter_mut().enumerate() {
        if dist_c(&robot.state, &scenario.robots[i].goal) <= scenario.goal_tolerance_m {
            robot.terminal = Some(Terminal::Goal { t: 0.0 });
        }
    }
    while !sim.all_terminal() && sim.time() < scenario.timeout_s {
        sim.tick();
    }
    let metrics = sim.metrics();
    (metrics, sim.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;
    use crate::trace::to_jsonl;

    fn minimal_scenario(policy: &str) -> Scenario {
        let mut v = crate::scenario::fixtures::minimal_scenario_json();
        v["mode_policy"] = serde_json::json!(policy);
        load_scenario(&serde_json::to_vec(&v).unwrap()).unwrap()
    }

    #[test]
    fn server_queue_is_fifo() {
        let mut server = ServerRuntime {
            state: PlanarState::new(0.0, 0.0, 0.0),
            busy_until_s: 0.0,
        };
        assert!((serve_edge_job(&mut server, 80.0, 1.0) - 1.08).abs() < 1e-12);
        assert!((serve_edge_job(&mut server, 80.0, 1.0) - 1.16).abs() < 1e-12);
        // Idle gap: next job starts at its own submission time.
        assert!((serve_edge_job(&mut server, 20.0, 5.0) - 5.02).abs() < 1e-12);
    }

    #[test]
    fn server_queue_matches_reference_simulation() {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut server = ServerRuntime {
            state: PlanarState::new(0.0, 0.0, 0.0),
            busy_until_s: 0.0,
        };
        let mut reference_busy: f64 = 0.0;
        let mut t = 0.0;
        for _ in 0..200 {
            t += rng.random_range(0.0..0.1);
            let c = rng.random_range(1.0..120.0);
            let got = serve_edge_job(&mut server, c, t);
            // Independent single-server FIFO queue recurrence.
            let start = reference_busy.max(t);
            let expect = start + c / 1000.0;
            reference_busy = expect;
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn latency_sampling_statistics() {
        use crate::decision::{LatencyWindow, RadioZone, ZoneRegion};
        let map = RadioMap {
            zones: vec![RadioZone {
                region: ZoneRegion::Band { r_lo: 0.0, r_hi: 30.0 },
                latency_ms: LatencyWindow { lo_ms: 10.0, hi_ms: 50.0 },
            }],
            default_zone: LatencyWindow { lo_ms: 30.0, hi_ms: 30.0 },
        };
        let server = Vector2::zeros();

        // Degenerate default: constant draws.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let far = PlanarState::new(100.0, 0.0, 0.0);
        for _ in 0..10 {
            assert_eq!(sample_latency(&map, &far, &server, &mut rng), 30.0);
        }

        // Mean of U(10, 50) over 1e5 draws is 30 +- 0.5.
        let near = PlanarState::new(5.0, 0.0, 0.0);
        let mut sum = 0.0;
        for _ in 0..100_000 {
            sum += sample_latency(&map, &near, &server, &mut rng);
        }
        let mean = sum / 100_000.0;
        assert!((mean - 30.0).abs() < 0.5, "mean {mean}");

        // Draw distribution jumps when the robot crosses the band edge.
        let outside = PlanarState::new(31.0, 0.0, 0.0);
        for _ in 0..100 {
            let v = sample_latency(&map, &outside, &server, &mut rng);
            assert_eq!(v, 30.0);
        }
    }

    #[test]
    fn empty_world_only_advances_time() {
        let mut scenario = minimal_scenario("local_only");
        scenario.obstacles.clear();
        let mut sim = Simulation::new(&scenario, 1, SimOptions::default());
        // Mark the robot terminal so nothing moves.
        sim.robots[0].terminal = Some(Terminal::Goal { t: 0.0 });
        let t0 = sim.time();
        sim.tick();
        assert_eq!(sim.time(), t0 + scenario.dt);
        assert!(sim.trace().iter().all(|r| !matches!(r, TraceRecord::Tick(_))));
    }

    #[test]
    fn robot_at_goal_scores_zero_time() {
        let mut scenario = minimal_scenario("local_only");
        scenario.robots[0].start = scenario.robots[0].goal;
        let (metrics, _) = run_episode(&scenario, 1, &SimOptions::default());
        assert_eq!(metrics.per_robot[0].navigation_time_s, Some(0.0));
        assert!(metrics.per_robot[0].success);
    }

    #[test]
    fn straight_run_matches_kinematic_time() {
        let mut scenario = minimal_scenario("local_only");
        scenario.obstacles.clear();
        let (metrics, _) = run_episode(&scenario, 1, &SimOptions::default());
        let m = &metrics.per_robot[0];
        assert!(m.success, "robot should reach the goal");
        // 10 m to the goal minus 0.5 m tolerance at 1 m/s top speed, plus
        // the ramp-up from rest at 0.3 per step: roughly 10.5 s; allow the
        // tracking planner some slack.
        let t = m.navigation_time_s.unwrap();
        let lower = (10.0 - scenario.goal_tolerance_m) / 1.0;
        assert!(t >= lower - 1.0 && t <= lower + 4.0, "time {t}");
    }

    #[test]
    fn wall_blocked_local_only_times_out() {
        let mut scenario = minimal_scenario("local_only");
        scenario.timeout_s = 20.0;
        // Wall square sitting on the path ahead.
        scenario.obstacles[0].start = PlanarState::new(3.0, 0.0, 0.0);
        let (metrics, _) = run_episode(&scenario, 1, &SimOptions::default());
        assert!(!metrics.per_robot[0].success);
        assert_eq!(metrics.per_robot[0].navigation_time_s, None);
        assert_eq!(metrics.per_robot[0].collisions, 0, "braking must prevent impact");
    }

    #[test]
    fn traces_are_deterministic_across_runs_and_workers() {
        let mut scenario = minimal_scenario("earn");
        scenario.timeout_s = 12.0;
        scenario.obstacles[0].start = PlanarState::new(3.0, 0.55, 0.0);
        let (_, t1) = run_episode(&scenario, 7, &SimOptions { workers: 1 });
        let (_, t2) = run_episode(&scenario, 7, &SimOptions { workers: 1 });
        let (_, t4) = run_episode(&scenario, 7, &SimOptions { workers: 4 });
        let (a, b, c) = (to_jsonl(&t1), to_jsonl(&t2), to_jsonl(&t4));
        assert_eq!(a, b, "same seed must reproduce the trace");
        assert_eq!(a, c, "worker count must not affect the trace");
        // And a different seed samples different latencies.
        let (_, t5) = run_episode(&scenario, 8, &SimOptions { workers: 1 });
        assert_ne!(a, to_jsonl(&t5));
    }

    #[test]
    fn timestamps_nondecreasing_and_modes_match_decisions() {
        let mut scenario = minimal_scenario("earn");
        scenario.timeout_s = 15.0;
        scenario.obstacles[0].start = PlanarState::new(3.0, 0.55, 0.0);
        let (_, trace) = run_episode(&scenario, 3, &SimOptions::default());
        let mut last = f64::NEG_INFINITY;
        for rec in &trace {
            assert!(rec.timestamp() >= last - 1e-12);
            last = rec.timestamp();
        }
        // Mode conservation: a robot reports edge mode iff the latest
        // decision selected it.
        let mut latest_alpha: Vec<bool> = vec![false; scenario.robots.len()];
        for rec in &trace {
            match rec {
                TraceRecord::Decision(d) => latest_alpha.clone_from(&d.alpha),
                TraceRecord::Tick(t) => {
                    let expect = if latest_alpha[t.robot] { Mode::Edge } else { Mode::Local };
                    assert_eq!(t.mode, expect, "t={} robot={}", t.t, t.robot);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn causality_of_edge_jobs() {
        let mut scenario = minimal_scenario("earn");
        scenario.timeout_s = 15.0;
        scenario.obstacles[0].start = PlanarState::new(3.0, 0.55, 0.0);
        let (_, trace) = run_episode(&scenario, 11, &SimOptions::default());
        let mut saw_edge_job = false;
        for rec in &trace {
            if let TraceRecord::EdgeJob(job) = rec {
                saw_edge_job = true;
                assert!(
                    job.arrival_s + 1e-12
                        >= job.submit_s + (job.compute_ms + job.comm_ms) / 1000.0,
                    "job arrived before compute plus communication elapsed"
                );
                // Installed (hence applied) no earlier than its arrival.
                assert!(job.t >= job.arrival_s - 1e-12);
            }
        }
        assert!(saw_edge_job, "scenario should exercise the edge pipeline");
    }

    #[test]
    fn collision_flags_match_offline_oracle() {
        let mut scenario = minimal_scenario("local_only");
        scenario.timeout_s = 16.0;
        // A wall ahead stops the robot, then advances onto it.
        scenario.obstacles[0].start = PlanarState::new(3.0, 0.0, 0.0);
        scenario.obstacles[0].script = vec![
            crate::scenario::ScriptSegment {
                until_s: 6.0,
                velocity: [0.0, 0.0],
            },
            crate::scenario::ScriptSegment {
                until_s: 100.0,
                velocity: [-0.5, 0.0],
            },
        ];
        let (metrics, trace) = run_episode(&scenario, 5, &SimOptions::default());

        // Offline oracle: recompute obstacle poses from the scenario script
        // and check the recorded robot poses against them.
        let mut flagged = Vec::new();
        let mut oracle = Vec::new();
        for rec in &trace {
            if let TraceRecord::Tick(t) = rec {
                if t.event == "collision" {
                    flagged.push((t.robot, t.t));
                }
                // Replay the obstacle position at time t.
                let spec = &scenario.obstacles[0];
                let mut pose = spec.start;
                let mut clock: f64 = 0.0;
                while clock + 1e-9 < t.t {
                    let v = script_velocity(&spec.script, clock);
                    pose = PlanarState::new(
                        pose.x + v.x * scenario.dt,
                        pose.y + v.y * scenario.dt,
                        pose.theta,
                    );
                    clock += scenario.dt;
                }
                let robot_world = transform(
                    &scenario.robots[t.robot].shape,
                    &PlanarState::new(t.x, t.y, t.theta),
                );
                let obs_world = transform(&spec.shape, &pose);
                if polytope_distance(&robot_world, &obs_world) <= 0.0 {
                    oracle.push((t.robot, t.t));
                }
            }
        }
        assert_eq!(flagged, oracle);
        assert_eq!(metrics.per_robot[0].collisions, 1);
    }
}

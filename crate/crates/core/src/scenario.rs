//! Scenario configuration: JSON schema, strict parsing, and validation that
//! reports every violation rather than the first one.
//!
//! Units: meters, seconds, and radians throughout; latency fields carry an
//! explicit `_ms` suffix.

use crate::decision::{ComputeModel, LatencyWindow, RadioMap, RadioZone, ZoneRegion};
use crate::dynamics::ControlBounds;
use crate::geometry::{polytope_distance, ConvexPolytope, PlanarState, PolytopeData};
use crate::local_planner::Path;
use crate::pdd::PddConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario is invalid:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// How robots obtain plans during simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModePolicy {
    /// Decision engine selects robots for edge planning each decision tick.
    Earn,
    /// Robots never offload; braking is the only obstacle response.
    LocalOnly,
    /// Every active robot is served by the edge planner, budgets ignored.
    EdgeOnly,
    /// Robots are selected by earliest estimated completion (remaining path
    /// length over top speed) until the compute budget is filled.
    Edf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSegment {
    /// The segment applies while `t < until_s`.
    pub until_s: f64,
    pub velocity: [f64; 2],
}

/// Piecewise-constant-velocity motion script. After the last segment the
/// subject holds position.
pub fn script_velocity(script: &[ScriptSegment], t: f64) -> nalgebra::Vector2<f64> {
    for seg in script {
        if t < seg.until_s {
            return nalgebra::Vector2::new(seg.velocity[0], seg.velocity[1]);
        }
    }
    nalgebra::Vector2::zeros()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPath {
    waypoints: Vec<PlanarState>,
    corridor_halfwidth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRobot {
    shape: PolytopeData,
    wheelbase: f64,
    bounds: ControlBounds,
    start: PlanarState,
    goal: PlanarState,
    path: RawPath,
    d_b_m: f64,
    local_map_radius_m: f64,
    #[serde(default)]
    local_compute_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObstacle {
    shape: PolytopeData,
    a: f64,
    b: f64,
    phi: f64,
    #[serde(default)]
    script: Vec<ScriptSegment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum RawZoneRegion {
    Polygon(PolytopeData),
    Band { r_lo: f64, r_hi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRadioZone {
    region: RawZoneRegion,
    latency_ms: LatencyWindow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRadioMap {
    zones: Vec<RawRadioZone>,
    default_zone: LatencyWindow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawServer {
    start: PlanarState,
    #[serde(default)]
    script: Vec<ScriptSegment>,
    radio_map: RawRadioMap,
    compute_model: ComputeModel,
    d_th_ms: f64,
    c_th_ms: f64,
    decision_period_s: f64,
    #[serde(default = "default_quantile")]
    comm_quantile: f64,
}

fn default_quantile() -> f64 {
    0.95
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    dt: f64,
    horizon: usize,
    seed: u64,
    timeout_s: f64,
    goal_tolerance_m: f64,
    mode_policy: ModePolicy,
    #[serde(default = "default_stale_frames")]
    stale_after_frames: f64,
    world_bounds: WorldBounds,
    robots: Vec<RawRobot>,
    #[serde(default)]
    obstacles: Vec<RawObstacle>,
    server: RawServer,
    planner: PddConfig,
}

fn default_stale_frames() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldBounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct RobotSpec {
    pub shape: ConvexPolytope,
    pub wheelbase: f64,
    pub bounds: ControlBounds,
    pub start: PlanarState,
    pub goal: PlanarState,
    pub path: Path,
    pub d_b_m: f64,
    pub local_map_radius_m: f64,
    pub local_compute_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ObstacleSpec {
    pub shape: ConvexPolytope,
    pub start: PlanarState,
    pub script: Vec<ScriptSegment>,
}

#[derive(Debug, Clone)]
pub struct ServerSpec {
    pub start: PlanarState,
    pub script: Vec<ScriptSegment>,
    pub radio_map: RadioMap,
    pub compute_model: ComputeModel,
    pub d_th_ms: f64,
    pub c_th_ms: f64,
    pub decision_period_s: f64,
    pub comm_quantile: f64,
}

/// A fully validated world definition.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub dt: f64,
    pub horizon: usize,
    pub seed: u64,
    pub timeout_s: f64,
    pub goal_tolerance_m: f64,
    pub mode_policy: ModePolicy,
    pub stale_after_frames: f64,
    pub world_bounds: WorldBounds,
    pub robots: Vec<RobotSpec>,
    pub obstacles: Vec<ObstacleSpec>,
    pub server: ServerSpec,
    pub planner: PddConfig,
}

fn build_polytope(data: &PolytopeData, field: &str, errs: &mut Vec<String>) -> Option<ConvexPolytope> {
    match ConvexPolytope::try_from(data.clone()) {
        Ok(p) => Some(p),
        Err(e) => {
            errs.push(format!("{field}: {e}"));
            None
        }
    }
}

fn check_script(script: &[ScriptSegment], field: &str, errs: &mut Vec<String>) {
    let mut prev = f64::NEG_INFINITY;
    for (i, seg) in script.iter().enumerate() {
        if !(seg.until_s > prev) {
            errs.push(format!(
                "{field}.script[{i}].until_s: must be strictly increasing"
            ));
        }
        prev = seg.until_s;
        if !seg.velocity.iter().all(|v| v.is_finite()) {
            errs.push(format!("{field}.script[{i}].velocity: must be finite"));
        }
    }
}

/// Parses and validates a scenario, reporting every validation error found.
pub fn load_scenario(bytes: &[u8]) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = serde_json::from_slice(bytes)?;
    let mut errs: Vec<String> = Vec::new();

    if !(raw.dt > 0.0) {
        errs.push("dt: must be positive".into());
    }
    if raw.horizon < 1 {
        errs.push("horizon: must be at least 1".into());
    }
    if !(raw.timeout_s > 0.0) {
        errs.push("timeout_s: must be positive".into());
    }
    if !(raw.goal_tolerance_m > 0.0) {
        errs.push("goal_tolerance_m: must be positive".into());
    }
    if !(raw.stale_after_frames > 0.0) {
        errs.push("stale_after_frames: must be positive".into());
    }
    if raw.robots.is_empty() {
        errs.push("robots: at least one robot required".into());
    }
    if raw.world_bounds.min[0] >= raw.world_bounds.max[0]
        || raw.world_bounds.min[1] >= raw.world_bounds.max[1]
    {
        errs.push("world_bounds: min must be strictly below max".into());
    }

    let mut robots = Vec::new();
    for (i, r) in raw.robots.iter().enumerate() {
        let shape = build_polytope(&r.shape, &format!("robots[{i}].shape"), &mut errs);
        if !(r.wheelbase > 0.0) {
            errs.push(format!("robots[{i}].wheelbase: must be positive"));
        }
        if !r.bounds.is_valid() {
            errs.push(format!(
                "robots[{i}].bounds: componentwise min must not exceed max"
            ));
        }
        if !(r.d_b_m > 0.0) {
            errs.push(format!("robots[{i}].d_b_m: must be positive"));
        }
        if !(r.local_map_radius_m > 0.0) {
            errs.push(format!("robots[{i}].local_map_radius_m: must be positive"));
        }
        if r.local_compute_ms < 0.0 {
            errs.push(format!("robots[{i}].local_compute_ms: must be nonnegative"));
        }
        let path = match Path::new(r.path.waypoints.clone(), r.path.corridor_halfwidth) {
            Ok(p) => Some(p),
            Err(e) => {
                errs.push(format!("robots[{i}].path: {e}"));
                None
            }
        };
        if let (Some(shape), Some(path)) = (shape, path) {
            robots.push(RobotSpec {
                shape,
                wheelbase: r.wheelbase,
                bounds: r.bounds,
                start: r.start,
                goal: r.goal,
                path,
                d_b_m: r.d_b_m,
                local_map_radius_m: r.local_map_radius_m,
                local_compute_ms: r.local_compute_ms,
            });
        }
    }

    let mut obstacles = Vec::new();
    for (i, o) in raw.obstacles.iter().enumerate() {
        check_script(&o.script, &format!("obstacles[{i}]"), &mut errs);
        if let Some(shape) = build_polytope(&o.shape, &format!("obstacles[{i}].shape"), &mut errs) {
            obstacles.push(ObstacleSpec {
                shape,
                start: PlanarState::new(o.a, o.b, o.phi),
                script: o.script.clone(),
            });
        }
    }

    if !(raw.server.d_th_ms > 0.0) {
        errs.push("server.d_th_ms: must be positive".into());
    }
    if !(raw.server.c_th_ms > 0.0) {
        errs.push("server.c_th_ms: must be positive".into());
    }
    if !(raw.server.decision_period_s > 0.0) {
        errs.push("server.decision_period_s: must be positive".into());
    }
    if !(raw.server.comm_quantile > 0.0 && raw.server.comm_quantile <= 1.0) {
        errs.push("server.comm_quantile: must lie in (0, 1]".into());
    }
    if !raw.server.compute_model.is_valid() {
        errs.push(
            "server.compute_model: gamma and tau_ms must be nonnegative, p in [1, 3.5]".into(),
        );
    }
    check_script(&raw.server.script, "server", &mut errs);

    let mut zones = Vec::new();
    for (i, z) in raw.server.radio_map.zones.iter().enumerate() {
        if !z.latency_ms.is_valid() {
            errs.push(format!(
                "server.radio_map.zones[{i}].latency_ms: lo_ms must not exceed hi_ms"
            ));
        }
        let region = match &z.region {
            RawZoneRegion::Polygon(data) => build_polytope(
                data,
                &format!("server.radio_map.zones[{i}].region"),
                &mut errs,
            )
            .map(ZoneRegion::Polygon),
            RawZoneRegion::Band { r_lo, r_hi } => {
                if !(r_lo >= &0.0 && r_hi > r_lo) {
                    errs.push(format!(
                        "server.radio_map.zones[{i}].region: band requires 0 <= r_lo < r_hi"
                    ));
                    None
                } else {
                    Some(ZoneRegion::Band {
                        r_lo: *r_lo,
                        r_hi: *r_hi,
                    })
                }
            }
        };
        if let Some(region) = region {
            zones.push(RadioZone {
                region,
                latency_ms: z.latency_ms,
            });
        }
    }
    if !raw.server.radio_map.default_zone.is_valid() {
        errs.push("server.radio_map.default_zone: lo_ms must not exceed hi_ms".into());
    }

    if let Err(e) = raw.planner.validate() {
        errs.push(format!("planner: {e}"));
    }

    // Starting configuration must be collision free.
    if robots.len() == raw.robots.len() && obstacles.len() == raw.obstacles.len() {
        for (i, r) in robots.iter().enumerate() {
            let world = crate::geometry::transform(&r.shape, &r.start);
            for (j, o) in obstacles.iter().enumerate() {
                let obs_world = crate::geometry::transform(&o.shape, &o.start);
                if polytope_distance(&world, &obs_world) <= 0.0 {
                    errs.push(format!(
                        "robots[{i}].start: collides with obstacles[{j}] at t = 0"
                    ));
                }
            }
            for (j, other) in robots.iter().enumerate().skip(i + 1) {
                let other_world = crate::geometry::transform(&other.shape, &other.start);
                if polytope_distance(&world, &other_world) <= 0.0 {
                    errs.push(format!(
                        "robots[{i}].start: collides with robots[{j}] at t = 0"
                    ));
                }
            }
        }
    }

    if !errs.is_empty() {
        return Err(ScenarioError::Invalid(errs));
    }

    Ok(Scenario {
        name: raw.name,
        dt: raw.dt,
        horizon: raw.horizon,
        seed: raw.seed,
        timeout_s: raw.timeout_s,
        goal_tolerance_m: raw.goal_tolerance_m,
        mode_policy: raw.mode_policy,
        stale_after_frames: raw.stale_after_frames,
        world_bounds: raw.world_bounds,
        robots,
        obstacles,
        server: ServerSpec {
            start: raw.server.start,
            script: raw.server.script,
            radio_map: RadioMap {
                zones,
                default_zone: raw.server.radio_map.default_zone,
            },
            compute_model: raw.server.compute_model,
            d_th_ms: raw.server.d_th_ms,
            c_th_ms: raw.server.c_th_ms,
            decision_period_s: raw.server.decision_period_s,
            comm_quantile: raw.server.comm_quantile,
        },
        planner: raw.planner,
    })
}

/// Serializes a scenario back into its file form.
pub fn save_scenario(s: &Scenario) -> serde_json::Value {
    let raw = RawScenario {
        name: s.name.clone(),
        dt: s.dt,
        horizon: s.horizon,
        seed: s.seed,
        timeout_s: s.timeout_s,
        goal_tolerance_m: s.goal_tolerance_m,
        mode_policy: s.mode_policy,
        stale_after_frames: s.stale_after_frames,
        world_bounds: s.world_bounds,
        robots: s
            .robots
            .iter()
            .map(|r| RawRobot {
                shape: r.shape.clone().into(),
                wheelbase: r.wheelbase,
                bounds: r.bounds,
                start: r.start,
                goal: r.goal,
                path: RawPath {
                    waypoints: r.path.waypoints().to_vec(),
                    corridor_halfwidth: r.path.corridor_halfwidth(),
                },
                d_b_m: r.d_b_m,
                local_map_radius_m: r.local_map_radius_m,
                local_compute_ms: r.local_compute_ms,
            })
            .collect(),
        obstacles: s
            .obstacles
            .iter()
            .map(|o| RawObstacle {
                shape: o.shape.clone().into(),
                a: o.start.x,
                b: o.start.y,
                phi: o.start.theta,
                script: o.script.clone(),
            })
            .collect(),
        server: RawServer {
            start: s.server.start,
            script: s.server.script.clone(),
            radio_map: RawRadioMap {
                zones: s
                    .server
                    .radio_map
                    .zones
                    .iter()
                    .map(|z| RawRadioZone {
                        region: match &z.region {
                            ZoneRegion::Polygon(p) => RawZoneRegion::Polygon(p.clone().into()),
                            ZoneRegion::Band { r_lo, r_hi } => RawZoneRegion::Band {
                                r_lo: *r_lo,
                                r_hi: *r_hi,
                            },
                        },
                        latency_ms: z.latency_ms,
                    })
                    .collect(),
                default_zone: s.server.radio_map.default_zone,
            },
            compute_model: s.server.compute_model,
            d_th_ms: s.server.d_th_ms,
            c_th_ms: s.server.c_th_ms,
            decision_period_s: s.server.decision_period_s,
            comm_quantile: s.server.comm_quantile,
        },
        planner: s.planner.clone(),
    };
    serde_json::to_value(raw).expect("scenario serializes")
}

/// Shared test fixture: the smallest complete scenario document.
#[cfg(test)]
pub(crate) mod fixtures {
    pub(crate) fn minimal_scenario_json() -> serde_json::Value {
        serde_json::json!({
            "name": "minimal",
            "dt": 0.25,
            "horizon": 5,
            "seed": 1,
            "timeout_s": 30.0,
            "goal_tolerance_m": 0.5,
            "mode_policy": "earn",
            "world_bounds": {"min": [-5.0, -5.0], "max": [20.0, 5.0]},
            "robots": [{
                "shape": {"normals": [[1.0,0.0],[-1.0,0.0],[0.0,1.0],[0.0,-1.0]],
                           "offsets": [0.2, 0.2, 0.15, 0.15]},
                "wheelbase": 0.3,
                "bounds": {
                    "u_min": {"speed": 0.0, "steer": -0.6},
                    "u_max": {"speed": 1.0, "steer": 0.6},
                    "a_min": {"speed": -0.3, "steer": -0.3},
                    "a_max": {"speed": 0.3, "steer": 0.3}
                },
                "start": {"x": 0.0, "y": 0.0, "theta": 0.0},
                "goal": {"x": 10.0, "y": 0.0, "theta": 0.0},
                "path": {"waypoints": [{"x":0.0,"y":0.0,"theta":0.0},
                                        {"x":10.0,"y":0.0,"theta":0.0}],
                          "corridor_halfwidth": 1.0},
                "d_b_m": 2.0,
                "local_map_radius_m": 5.0
            }],
            "obstacles": [{
                "shape": {"normals": [[1.0,0.0],[-1.0,0.0],[0.0,1.0],[0.0,-1.0]],
                           "offsets": [0.3, 0.3, 0.3, 0.3]},
                "a": 5.0, "b": 2.0, "phi": 0.0,
                "script": [{"until_s": 10.0, "velocity": [0.0, 0.0]}]
            }],
            "server": {
                "start": {"x": 2.0, "y": 2.0, "theta": 0.0},
                "radio_map": {
                    "zones": [{"region": {"band": {"r_lo": 0.0, "r_hi": 30.0}},
                               "latency_ms": {"lo_ms": 10.0, "hi_ms": 50.0}}],
                    "default_zone": {"lo_ms": 80.0, "hi_ms": 200.0}
                },
                "compute_model": {"gamma": 0.6, "tau_ms": 12.0, "p": 1.0},
                "d_th_ms": 50.0,
                "c_th_ms": 100.0,
                "decision_period_s": 1.0
            },
            "planner": {
                "rho0": 1.0, "beta": 2.0, "eta0": 0.5, "eta_decay": 0.8,
                "max_outer": 300, "eps_con": 1e-3, "eps_obj": 1e-4,
                "d_safe": 0.2
            }
        })
    }

}

#[cfg(test)]
mod tests {
    use super::fixtures::minimal_scenario_json;
    use super::*;

    #[test]
    fn minimal_scenario_loads() {
        let text = serde_json::to_vec(&minimal_scenario_json()).unwrap();
        let s = load_scenario(&text).unwrap();
        assert_eq!(s.name, "minimal");
        assert_eq!(s.robots.len(), 1);
        assert_eq!(s.obstacles.len(), 1);
        assert_eq!(s.server.comm_quantile, 0.95);
    }

    #[test]
    fn negative_budget_error_names_the_field() {
        let mut v = minimal_scenario_json();
        v["server"]["c_th_ms"] = serde_json::json!(-5.0);
        let err = load_scenario(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("c_th_ms"), "message: {text}");
    }

    #[test]
    fn all_validation_errors_are_collected() {
        let mut v = minimal_scenario_json();
        v["dt"] = serde_json::json!(-1.0);
        v["server"]["c_th_ms"] = serde_json::json!(-5.0);
        v["robots"][0]["d_b_m"] = serde_json::json!(0.0);
        let err = load_scenario(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        match err {
            ScenarioError::Invalid(errs) => {
                assert!(errs.len() >= 3, "expected all errors, got {errs:?}");
            }
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = minimal_scenario_json();
        v["mystery_knob"] = serde_json::json!(42);
        assert!(load_scenario(&serde_json::to_vec(&v).unwrap()).is_err());
    }

    #[test]
    fn colliding_start_is_rejected() {
        let mut v = minimal_scenario_json();
        v["obstacles"][0]["a"] = serde_json::json!(0.1);
        v["obstacles"][0]["b"] = serde_json::json!(0.0);
        let err = load_scenario(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(err.to_string().contains("collides"));
    }

    #[test]
    fn round_trip_reparses_equal() {
        let text = serde_json::to_vec(&minimal_scenario_json()).unwrap();
        let s = load_scenario(&text).unwrap();
        let saved = save_scenario(&s);
        let reparsed = load_scenario(&serde_json::to_vec(&saved).unwrap()).unwrap();
        let saved_again = save_scenario(&reparsed);
        assert_eq!(saved, saved_again);
    }
}

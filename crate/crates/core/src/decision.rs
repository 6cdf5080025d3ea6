//! The switching decision engine: latency models for communication and
//! edge compute, the blocking indicator and switching gain, pruning, and the
//! exact budgeted selection of robots for edge planning.

use crate::dynamics::{ControlBounds, ControlInput};
use crate::geometry::{dist_c, ConvexPolytope, ObstacleState, PlanarState};
use crate::local_planner::{detect_blocking, Path};
use crate::pdd::{plan_pdd_warm, predict_obstacles, PddConfig, PddPlan, PddWorkspace};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("need at least 2 samples with distinct h * n^p to fit, got {0}")]
    DegenerateFit(String),
}

/// Uniform latency window in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyWindow {
    pub lo_ms: f64,
    pub hi_ms: f64,
}

impl LatencyWindow {
    pub fn quantile(&self, q: f64) -> f64 {
        self.lo_ms + q * (self.hi_ms - self.lo_ms)
    }

    pub fn sample(&self, unit: f64) -> f64 {
        self.lo_ms + unit * (self.hi_ms - self.lo_ms)
    }

    pub fn is_valid(&self) -> bool {
        self.lo_ms.is_finite() && self.hi_ms.is_finite() && self.lo_ms <= self.hi_ms
    }
}

/// Spatial matching rule of one radio-map zone: a fixed world-frame region,
/// or a distance band measured from the server's current position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ZoneRegion {
    Polygon(ConvexPolytope),
    Band { r_lo: f64, r_hi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioZone {
    pub region: ZoneRegion,
    pub latency_ms: LatencyWindow,
}

/// Zone-based communication latency model. Zones are evaluated in order and
/// the first match wins; positions matching no zone fall into
/// `default_zone`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioMap {
    pub zones: Vec<RadioZone>,
    pub default_zone: LatencyWindow,
}

impl RadioMap {
    pub fn zone_at(&self, s: &PlanarState, server_xy: &Vector2<f64>) -> &LatencyWindow {
        let p = s.position();
        for zone in &self.zones {
            let hit = match &zone.region {
                ZoneRegion::Polygon(poly) => poly.contains(&p),
                ZoneRegion::Band { r_lo, r_hi } => {
                    let r = (p - server_xy).norm();
                    r >= *r_lo && r < *r_hi
                }
            };
            if hit {
                return &zone.latency_ms;
            }
        }
        &self.default_zone
    }

    pub fn is_valid(&self) -> bool {
        self.default_zone.is_valid() && self.zones.iter().all(|z| z.latency_ms.is_valid())
    }
}

/// The given quantile of the communication latency at the robot's position.
pub fn comm_latency(
    s: &PlanarState,
    server_xy: &Vector2<f64>,
    map: &RadioMap,
    quantile: f64,
) -> f64 {
    map.zone_at(s, server_xy).quantile(quantile)
}

/// Edge-compute latency model `C = gamma * H * n^p + tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    /// Milliseconds per horizon-step-and-obstacle unit.
    pub gamma: f64,
    /// Fixed per-invocation offset, milliseconds.
    pub tau_ms: f64,
    /// Complexity exponent on the obstacle count, in `[1, 3.5]`.
    pub p: f64,
}

impl ComputeModel {
    pub fn is_valid(&self) -> bool {
        self.gamma >= 0.0 && self.tau_ms >= 0.0 && (1.0..=3.5).contains(&self.p)
    }
}

pub fn comp_latency(h: usize, n_obstacles: usize, model: &ComputeModel) -> f64 {
    let n = n_obstacles as f64;
    let np = if model.p == 1.0 { n } else { n.powf(model.p) };
    model.gamma * h as f64 * np + model.tau_ms
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSample {
    pub h: usize,
    pub n_obstacles: usize,
    pub measured_ms: f64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Weighted least-squares fit of `(gamma, tau)` for a fixed exponent `p`:
/// the closed-form two-parameter linear regression on `x = h * n^p`.
pub fn fit_compute_model(samples: &[FitSample], p: f64) -> Result<ComputeModel, DecisionError> {
    if samples.len() < 2 {
        return Err(DecisionError::DegenerateFit(format!(
            "{} samples",
            samples.len()
        )));
    }
    let (mut sw, mut swx, mut swxx, mut swy, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let x = s.h as f64 * (s.n_obstacles as f64).powf(p);
        let w = s.weight;
        sw += w;
        swx += w * x;
        swxx += w * x * x;
        swy += w * s.measured_ms;
        swxy += w * x * s.measured_ms;
    }
    let det = swxx * sw - swx * swx;
    if det.abs() <= 1e-9 * (1.0 + swxx * sw) {
        return Err(DecisionError::DegenerateFit(
            "all samples share the same h * n^p".into(),
        ));
    }
    let gamma = (swxy * sw - swx * swy) / det;
    let tau = (swxx * swy - swx * swxy) / det;
    Ok(ComputeModel { gamma, tau_ms: tau, p })
}

/// The switching indicator: true iff the local planner would brake, i.e.
/// the same predicate as blocking detection.
pub fn switching_indicator(
    s: &PlanarState,
    obstacles: &[ObstacleState],
    path: &Path,
    d_b: f64,
) -> bool {
    detect_blocking(s, obstacles, path, d_b)
}

/// Predicted displacement of the edge plan: center distance from the start
/// state to the plan's terminal state. The caller gates this with the
/// switching indicator.
pub fn switching_gain(terminal: &PlanarState, s0: &PlanarState) -> f64 {
    dist_c(terminal, s0)
}

/// Tie order among equal-value selections: fewest items first, then the
/// lexicographically smallest sorted index sequence. Minimality first keeps
/// zero-value items out of optimal selections.
fn tie_less(a: &[bool], b: &[bool]) -> bool {
    let ca = a.iter().filter(|&&x| x).count();
    let cb = b.iter().filter(|&&x| x).count();
    if ca != cb {
        return ca < cb;
    }
    for i in 0..a.len() {
        if a[i] != b[i] {
            // Equal cardinality: the set containing the first differing
            // index is the lexicographically smaller index sequence.
            return a[i];
        }
    }
    false
}

/// Exact 0/1 knapsack: maximize the selected value subject to the weight
/// budget, by depth-first branch-and-bound with a fractional upper bound.
/// Exact value ties resolve to the smallest selection (cardinality, then
/// lexicographic index order).
pub fn solve_selection(values: &[f64], weights: &[f64], capacity: f64) -> Vec<bool> {
    assert_eq!(values.len(), weights.len());
    assert!(weights.iter().all(|w| *w >= 0.0), "weights must be nonnegative");
    let n = values.len();

    // Density order for the fractional bound.
    let mut density_order: Vec<usize> = (0..n).filter(|&i| values[i] > 0.0).collect();
    density_order.sort_by(|&a, &b| {
        let da = if weights[a] > 0.0 { values[a] / weights[a] } else { f64::INFINITY };
        let db = if weights[b] > 0.0 { values[b] / weights[b] } else { f64::INFINITY };
        db.partial_cmp(&da).unwrap().then(a.cmp(&b))
    });

    struct Search<'a> {
        values: &'a [f64],
        weights: &'a [f64],
        density_order: &'a [usize],
        best_value: f64,
        best_set: Vec<bool>,
        current: Vec<bool>,
    }

    impl Search<'_> {
        fn bound(&self, next: usize, cap: f64, value: f64) -> f64 {
            let mut b = value;
            let mut cap = cap;
            for &i in self.density_order {
                if i < next {
                    continue;
                }
                if self.weights[i] <= cap {
                    b += self.values[i];
                    cap -= self.weights[i];
                } else if self.weights[i] > 0.0 {
                    b += self.values[i] * cap / self.weights[i];
                    break;
                }
            }
            b
        }

        fn dfs(&mut self, idx: usize, cap: f64, value: f64) {
            if idx == self.values.len() {
                if value > self.best_value
                    || (value == self.best_value && tie_less(&self.current, &self.best_set))
                {
                    self.best_value = value;
                    self.best_set = self.current.clone();
                }
                return;
            }
            // Strict pruning keeps exact ties alive for the lex rule.
            if self.bound(idx, cap, value) < self.best_value {
                return;
            }
            if self.values[idx] > 0.0 && self.weights[idx] <= cap {
                self.current[idx] = true;
                self.dfs(idx + 1, cap - self.weights[idx], value + self.values[idx]);
                self.current[idx] = false;
            }
            self.dfs(idx + 1, cap, value);
        }
    }

    let mut search = Search {
        values,
        weights,
        density_order: &density_order,
        best_value: 0.0,
        best_set: vec![false; n],
        current: vec![false; n],
    };
    search.dfs(0, capacity, 0.0);
    search.best_set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    InfeasibleComm,
    InfeasibleComp,
    ZeroGain,
    Kept,
}

#[derive(Debug, Clone)]
pub struct DecisionOutcome {
    /// Edge-planning selection per robot.
    pub alpha: Vec<bool>,
    /// Gated switching gains (zero unless kept and planned successfully).
    pub gains: Vec<f64>,
    pub pruned: Vec<PruneReason>,
    /// Modeled compute cost per robot, ms.
    pub comp_ms: Vec<f64>,
    /// Communication latency quantile per robot, ms.
    pub comm_ms: Vec<f64>,
    /// Edge plans of the selected robots.
    pub plans: Vec<Option<PddPlan>>,
}

/// Everything one robot contributes to a decision tick.
pub struct RobotView<'a> {
    pub state: PlanarState,
    pub u_prev: ControlInput,
    pub shape: &'a ConvexPolytope,
    pub path: &'a Path,
    pub bounds: &'a ControlBounds,
    pub wheelbase: f64,
    pub d_b: f64,
    /// Obstacles inside this robot's local map.
    pub obstacles: Vec<ObstacleState>,
    /// Previous edge workspace for warm starting, if any.
    pub warm: Option<&'a PddWorkspace>,
}

pub struct DecisionContext<'a> {
    pub server_xy: Vector2<f64>,
    pub radio_map: &'a RadioMap,
    pub compute_model: &'a ComputeModel,
    pub d_th_ms: f64,
    pub c_th_ms: f64,
    pub comm_quantile: f64,
    pub h: usize,
    pub dt: f64,
    pub pdd: &'a PddConfig,
    pub workers: usize,
}

/// One decision tick, in three phases: (i) prune robots whose communication
/// quantile or standalone compute cost break the budgets or whose indicator
/// is off; (ii) compute edge plans for the kept robots (in parallel when
/// `workers > 1`, committed in robot order); (iii) select the plan set that
/// maximizes total switching gain within the compute budget.
pub fn decide(robots: &[RobotView], ctx: &DecisionContext) -> DecisionOutcome {
    let k = robots.len();
    let mut pruned = vec![PruneReason::Kept; k];
    let mut comp_ms = vec![0.0; k];
    let mut comm_ms = vec![0.0; k];

    for (i, robot) in robots.iter().enumerate() {
        comm_ms[i] = comm_latency(&robot.state, &ctx.server_xy, ctx.radio_map, ctx.comm_quantile);
        comp_ms[i] = comp_latency(ctx.h, robot.obstacles.len(), ctx.compute_model);
        pruned[i] = if comm_ms[i] > ctx.d_th_ms {
            PruneReason::InfeasibleComm
        } else if comp_ms[i] > ctx.c_th_ms {
            PruneReason::InfeasibleComp
        } else if !switching_indicator(&robot.state, &robot.obstacles, robot.path, robot.d_b) {
            PruneReason::ZeroGain
        } else {
            PruneReason::Kept
        };
    }

    let kept: Vec<usize> = (0..k)
        .filter(|&i| pruned[i] == PruneReason::Kept)
        .collect();

    // Phase (ii): independent edge plans for the kept robots.
    let mut plans: Vec<Option<PddPlan>> = (0..k).map(|_| None).collect();
    let plan_one = |i: usize| -> Option<PddPlan> {
        let robot = &robots[i];
        let tracks = predict_obstacles(&robot.obstacles, ctx.h, ctx.dt);
        plan_pdd_warm(
            &robot.state,
            &robot.u_prev,
            robot.shape,
            &tracks,
            robot.path,
            ctx.h,
            robot.bounds,
            ctx.dt,
            robot.wheelbase,
            ctx.pdd,
            robot.warm,
        )
        .ok()
    };
    if ctx.workers <= 1 || kept.len() <= 1 {
        for &i in &kept {
            plans[i] = plan_one(i);
        }
    } else {
        let chunk = kept.len().div_ceil(ctx.workers);
        let mut results: Vec<(usize, Option<PddPlan>)> = Vec::with_capacity(kept.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = kept
                .chunks(chunk)
                .map(|ids| {
                    scope.spawn(move || {
                        ids.iter()
                            .map(|&i| (i, plan_one(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                results.extend(h.join().expect("planner worker panicked"));
            }
        });
        // Commit in robot order regardless of worker scheduling.
        results.sort_by_key(|(i, _)| *i);
        for (i, plan) in results {
            plans[i] = plan;
        }
    }

    // Plan failures demote the robot: no gain, not selectable.
    let mut gains = vec![0.0; k];
    for &i in &kept {
        match &plans[i] {
            Some(plan) if plan.is_success() => {
                gains[i] = switching_gain(plan.plan.terminal_state(), &robots[i].state);
            }
            _ => {
                pruned[i] = PruneReason::ZeroGain;
                plans[i] = None;
            }
        }
    }

    // Phase (iii): exact selection under the compute budget, over the kept
    // robots only.
    let candidates: Vec<usize> = (0..k)
        .filter(|&i| pruned[i] == PruneReason::Kept)
        .collect();
    let values: Vec<f64> = candidates.iter().map(|&i| gains[i]).collect();
    let weights: Vec<f64> = candidates.iter().map(|&i| comp_ms[i]).collect();
    let picked = solve_selection(&values, &weights, ctx.c_th_ms);

    let mut alpha = vec![false; k];
    for (slot, &i) in candidates.iter().enumerate() {
        alpha[i] = picked[slot];
    }
    for i in 0..k {
        if !alpha[i] {
            plans[i] = None;
        }
    }

    DecisionOutcome {
        alpha,
        gains,
        pruned,
        comp_ms,
        comm_ms,
        plans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn latency_window_quantiles() {
        let w = LatencyWindow { lo_ms: 10.0, hi_ms: 50.0 };
        assert_relative_eq!(w.quantile(1.0), 50.0);
        assert_relative_eq!(w.quantile(0.95), 48.0);
    }

    fn outdoor_band_map() -> RadioMap {
        RadioMap {
            zones: vec![RadioZone {
                region: ZoneRegion::Band { r_lo: 0.0, r_hi: 30.0 },
                latency_ms: LatencyWindow { lo_ms: 10.0, hi_ms: 50.0 },
            }],
            default_zone: LatencyWindow { lo_ms: 80.0, hi_ms: 200.0 },
        }
    }

    #[test]
    fn comm_latency_outdoor_band_model() {
        let map = outdoor_band_map();
        let server = Vector2::new(0.0, 0.0);
        let near = PlanarState::new(10.0, 0.0, 0.0);
        assert_relative_eq!(comm_latency(&near, &server, &map, 0.95), 48.0);
        let far = PlanarState::new(40.0, 0.0, 0.0);
        assert_relative_eq!(comm_latency(&far, &server, &map, 0.95), 194.0);
    }

    #[test]
    fn comm_latency_polygon_zone_first_match_wins() {
        let map = RadioMap {
            zones: vec![
                RadioZone {
                    region: ZoneRegion::Polygon(
                        ConvexPolytope::rectangle(10.0, 10.0).unwrap(),
                    ),
                    latency_ms: LatencyWindow { lo_ms: 5.0, hi_ms: 5.0 },
                },
                RadioZone {
                    region: ZoneRegion::Band { r_lo: 0.0, r_hi: 100.0 },
                    latency_ms: LatencyWindow { lo_ms: 20.0, hi_ms: 20.0 },
                },
            ],
            default_zone: LatencyWindow { lo_ms: 99.0, hi_ms: 99.0 },
        };
        let server = Vector2::zeros();
        assert_eq!(comm_latency(&PlanarState::new(1.0, 1.0, 0.0), &server, &map, 0.5), 5.0);
        assert_eq!(comm_latency(&PlanarState::new(20.0, 0.0, 0.0), &server, &map, 0.5), 20.0);
        assert_eq!(comm_latency(&PlanarState::new(200.0, 0.0, 0.0), &server, &map, 0.5), 99.0);
    }

    #[test]
    fn comp_latency_reference_values() {
        let outdoor = ComputeModel { gamma: 0.6, tau_ms: 12.0, p: 1.0 };
        assert_eq!(comp_latency(5, 5, &outdoor), 27.0);

        let indoor = ComputeModel { gamma: 1.0, tau_ms: 20.0, p: 1.0 };
        let cs: Vec<f64> = [3usize, 6, 3, 0]
            .iter()
            .map(|&n| comp_latency(20, n, &indoor))
            .collect();
        assert_eq!(cs, vec![80.0, 140.0, 80.0, 20.0]);

        assert_eq!(comp_latency(7, 0, &outdoor), 12.0);
    }

    #[test]
    fn fit_recovers_noise_free_parameters() {
        for (gamma, tau) in [(1.0, 20.0), (0.6, 12.0)] {
            let truth = ComputeModel { gamma, tau_ms: tau, p: 1.0 };
            let samples: Vec<FitSample> = (1..8)
                .flat_map(|h| {
                    (0..5).map(move |n| FitSample {
                        h: h * 3,
                        n_obstacles: n,
                        measured_ms: comp_latency(h * 3, n, &truth),
                        weight: 1.0 + n as f64,
                    })
                })
                .collect();
            let fit = fit_compute_model(&samples, 1.0).unwrap();
            assert_relative_eq!(fit.gamma, gamma, epsilon = 1e-9);
            assert_relative_eq!(fit.tau_ms, tau, epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_matches_normal_equations_oracle_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let samples: Vec<FitSample> = (0..40)
            .map(|i| FitSample {
                h: 5 + i % 7,
                n_obstacles: i % 5,
                measured_ms: 0.8 * ((5 + i % 7) * (i % 5)) as f64
                    + 15.0
                    + rng.random_range(-2.0..2.0),
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        let fit = fit_compute_model(&samples, 1.0).unwrap();

        // Oracle: dense weighted normal equations via nalgebra.
        let mut ata = nalgebra::Matrix2::<f64>::zeros();
        let mut atb = Vector2::zeros();
        for s in &samples {
            let x = s.h as f64 * s.n_obstacles as f64;
            let row = Vector2::new(x, 1.0);
            ata += row * row.transpose() * s.weight;
            atb += row * s.measured_ms * s.weight;
        }
        let sol = ata.try_inverse().unwrap() * atb;
        assert_relative_eq!(fit.gamma, sol.x, epsilon = 1e-9);
        assert_relative_eq!(fit.tau_ms, sol.y, epsilon = 1e-9);
    }

    #[test]
    fn fit_rejects_degenerate_design() {
        let samples = vec![
            FitSample { h: 4, n_obstacles: 3, measured_ms: 30.0, weight: 1.0 },
            FitSample { h: 4, n_obstacles: 3, measured_ms: 31.0, weight: 1.0 },
            FitSample { h: 2, n_obstacles: 6, measured_ms: 29.0, weight: 1.0 },
        ];
        // h * n is 12 for every sample.
        assert!(fit_compute_model(&samples, 1.0).is_err());
    }

    #[test]
    fn selection_takes_everything_that_fits() {
        let picked = solve_selection(&[1.0, 2.0, 0.0], &[5.0, 5.0, 5.0], 100.0);
        assert_eq!(picked, vec![true, true, false]);
    }

    #[test]
    fn selection_prefers_two_mid_gains_over_budget_hog() {
        // Two gains of 1.2 at 80 ms each beat any set containing the 0.67
        // gain at 140 ms under a 240 ms budget.
        let picked = solve_selection(&[1.2, 1.2, 0.67], &[80.0, 80.0, 140.0], 240.0);
        assert_eq!(picked, vec![true, true, false]);
    }

    fn brute_force_selection(values: &[f64], weights: &[f64], capacity: f64) -> Vec<bool> {
        let n = values.len();
        let mut best_value = 0.0;
        let mut best: Vec<bool> = vec![false; n];
        for mask in 0u32..(1 << n) {
            let set: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let w: f64 = (0..n).filter(|&i| set[i]).map(|i| weights[i]).sum();
            if w > capacity {
                continue;
            }
            let v: f64 = (0..n).filter(|&i| set[i]).map(|i| values[i]).sum();
            if v > best_value || (v == best_value && tie_less(&set, &best)) {
                best_value = v;
                best = set;
            }
        }
        best
    }

    #[test]
    fn selection_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        for trial in 0..60 {
            let n = rng.random_range(1..=12usize);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.2 {
                        0.0
                    } else {
                        // Quantized values make exact ties common.
                        (rng.random_range(0.0..4.0f64) * 2.0).round() / 2.0
                    }
                })
                .collect();
            let weights: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0.0..100.0f64)).round())
                .collect();
            let capacity = rng.random_range(50.0..250.0);
            let fast = solve_selection(&values, &weights, capacity);
            let slow = brute_force_selection(&values, &weights, capacity);
            assert_eq!(fast, slow, "trial {trial}: values {values:?} weights {weights:?} cap {capacity}");
        }
    }

    #[test]
    fn selection_objective_monotone_in_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let values: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..3.0)).collect();
        let weights: Vec<f64> = (0..10).map(|_| rng.random_range(1.0..50.0)).collect();
        let mut prev = 0.0;
        for step in 0..20 {
            let cap = 10.0 * step as f64;
            let picked = solve_selection(&values, &weights, cap);
            let total: f64 = (0..10).filter(|&i| picked[i]).map(|i| values[i]).sum();
            assert!(total >= prev - 1e-12);
            prev = total;
        }
    }

    #[test]
    fn selection_never_takes_zero_value_items() {
        let picked = solve_selection(&[0.0, 0.0, 1.0], &[0.0, 10.0, 10.0], 10.0);
        assert_eq!(picked, vec![false, false, true]);
    }

    use crate::local_planner::Path;
    use crate::pdd::PddConfig;

    struct Fixture {
        shape: ConvexPolytope,
        path_blocked: Path,
        bounds: ControlBounds,
        map: RadioMap,
        model: ComputeModel,
        pdd: PddConfig,
    }

    fn fixture() -> Fixture {
        Fixture {
            shape: ConvexPolytope::rectangle(0.4, 0.3).unwrap(),
            path_blocked: Path::new(
                vec![PlanarState::new(0.0, 0.0, 0.0), PlanarState::new(12.0, 0.0, 0.0)],
                1.0,
            )
            .unwrap(),
            bounds: ControlBounds {
                u_min: ControlInput::new(0.0, -0.6),
                u_max: ControlInput::new(1.0, 0.6),
                a_min: ControlInput::new(-0.3, -0.3),
                a_max: ControlInput::new(0.3, 0.3),
            },
            map: RadioMap {
                zones: vec![],
                default_zone: LatencyWindow { lo_ms: 10.0, hi_ms: 40.0 },
            },
            model: ComputeModel { gamma: 1.0, tau_ms: 10.0, p: 1.0 },
            pdd: PddConfig { d_safe: 0.2, ..PddConfig::default() },
        }
    }

    fn blocking_obstacle(x: f64, y: f64) -> ObstacleState {
        ObstacleState::new(
            x,
            y,
            0.0,
            Vector2::zeros(),
            ConvexPolytope::rectangle(0.6, 0.6).unwrap(),
        )
    }

    fn ctx<'a>(f: &'a Fixture, d_th: f64, c_th: f64, h: usize) -> DecisionContext<'a> {
        DecisionContext {
            server_xy: Vector2::zeros(),
            radio_map: &f.map,
            compute_model: &f.model,
            d_th_ms: d_th,
            c_th_ms: c_th,
            comm_quantile: 0.95,
            h,
            dt: 0.25,
            pdd: &f.pdd,
            workers: 1,
        }
    }

    fn robot_view<'a>(f: &'a Fixture, y: f64, obstacles: Vec<ObstacleState>) -> RobotView<'a> {
        RobotView {
            state: PlanarState::new(0.0, y, 0.0),
            u_prev: ControlInput::ZERO,
            shape: &f.shape,
            path: &f.path_blocked,
            bounds: &f.bounds,
            wheelbase: 0.3,
            d_b: 2.0,
            obstacles,
            warm: None,
        }
    }

    #[test]
    fn decide_prunes_everything_when_no_robot_is_blocked() {
        let f = fixture();
        let robots = vec![robot_view(&f, 0.0, vec![]), robot_view(&f, 0.3, vec![])];
        let outcome = decide(&robots, &ctx(&f, 100.0, 1000.0, 5));
        assert!(outcome.alpha.iter().all(|a| !a));
        assert!(outcome.plans.iter().all(|p| p.is_none()));
        assert!(outcome
            .pruned
            .iter()
            .all(|r| *r == PruneReason::ZeroGain));
    }

    #[test]
    fn decide_selects_the_single_feasible_blocked_robot() {
        let f = fixture();
        let blocked = robot_view(&f, 0.0, vec![blocking_obstacle(1.5, 0.55)]);
        let free = robot_view(&f, 0.0, vec![]);
        let robots = vec![free, blocked];
        let outcome = decide(&robots, &ctx(&f, 100.0, 1000.0, 8));
        assert_eq!(outcome.alpha, vec![false, true]);
        assert_eq!(outcome.pruned[0], PruneReason::ZeroGain);
        assert_eq!(outcome.pruned[1], PruneReason::Kept);
        assert!(outcome.plans[1].is_some());
        assert!(outcome.gains[1] > 0.0);
    }

    #[test]
    fn decide_respects_comm_and_comp_pruning() {
        let f = fixture();
        // Quantile latency is 10 + 0.95 * 30 = 38.5 ms > 30 ms threshold.
        let blocked = robot_view(&f, 0.0, vec![blocking_obstacle(1.5, 0.55)]);
        let outcome = decide(&[blocked], &ctx(&f, 30.0, 1000.0, 8));
        assert_eq!(outcome.pruned[0], PruneReason::InfeasibleComm);
        assert!(!outcome.alpha[0]);

        // Compute cost is 1 * 8 * 1 + 10 = 18 ms > 15 ms budget.
        let blocked = robot_view(&f, 0.0, vec![blocking_obstacle(1.5, 0.55)]);
        let outcome = decide(&[blocked], &ctx(&f, 100.0, 15.0, 8));
        assert_eq!(outcome.pruned[0], PruneReason::InfeasibleComp);
        assert!(!outcome.alpha[0]);
    }

    #[test]
    fn decide_matches_exhaustive_alpha_search() {
        // Small multi-robot instances: the selected set must equal an
        // exhaustive search over all alpha vectors using the same cached
        // plans and the same constraint checks.
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        for _ in 0..6 {
            let k = rng.random_range(2..=5usize);
            let robots: Vec<RobotView> = (0..k)
                .map(|_| {
                    let blocked = rng.random_range(0.0..1.0) < 0.7;
                    let obstacles = if blocked {
                        vec![blocking_obstacle(
                            rng.random_range(1.0..2.5),
                            rng.random_range(-0.6..0.6),
                        )]
                    } else {
                        vec![]
                    };
                    robot_view(&f, rng.random_range(-0.2..0.2), obstacles)
                })
                .collect();
            let c_th = rng.random_range(20.0..60.0);
            let context = ctx(&f, 100.0, c_th, 6);
            let outcome = decide(&robots, &context);

            // Oracle: enumerate alpha vectors; a vector is feasible if every
            // selected robot passed phase-one checks and produced a plan
            // (gain > 0 equivalence holds because gains are cached).
            let mut best_value = 0.0;
            let mut best: Vec<bool> = vec![false; k];
            for mask in 0u32..(1 << k) {
                let set: Vec<bool> = (0..k).map(|i| mask >> i & 1 == 1).collect();
                let mut value = 0.0;
                let mut weight = 0.0;
                let mut feasible = true;
                for i in 0..k {
                    if set[i] {
                        if outcome.pruned[i] != PruneReason::Kept {
                            feasible = false;
                            break;
                        }
                        if outcome.comm_ms[i] > context.d_th_ms {
                            feasible = false;
                            break;
                        }
                        value += outcome.gains[i];
                        weight += outcome.comp_ms[i];
                    }
                }
                if !feasible || weight > c_th {
                    continue;
                }
                if value > best_value || (value == best_value && tie_less(&set, &best)) {
                    best_value = value;
                    best = set;
                }
            }
            assert_eq!(outcome.alpha, best, "cached gains {:?}", outcome.gains);

            // Budget safety invariant.
            let spent: f64 = (0..k)
                .filter(|&i| outcome.alpha[i])
                .map(|i| outcome.comp_ms[i])
                .sum();
            assert!(spent <= c_th + 1e-9);
        }
    }

    #[test]
    fn decide_gain_gating_zero_indicator_never_selected() {
        let f = fixture();
        // A robot with obstacles far from its corridor: indicator off.
        let lateral = robot_view(&f, 0.0, vec![blocking_obstacle(1.5, 5.0)]);
        let outcome = decide(&[lateral], &ctx(&f, 100.0, 1000.0, 6));
        assert_eq!(outcome.pruned[0], PruneReason::ZeroGain);
        assert!(!outcome.alpha[0]);
    }
}

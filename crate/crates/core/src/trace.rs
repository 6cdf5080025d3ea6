//! Line-delimited trace records emitted by the simulator, one JSON object
//! per line, tagged by `kind`.

use crate::decision::PruneReason;
use crate::pdd::PddIteration;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Local,
    Edge,
}

/// Per-robot record appended every simulation tick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub robot: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub speed: f64,
    pub steer: f64,
    pub mode: Mode,
    /// Communication round trip of the plan currently applied (edge mode).
    pub latency_ms: f64,
    /// Modeled compute time of the plan currently applied.
    pub compute_ms: f64,
    /// Final coupling residual of the applied edge plan, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_residual: Option<f64>,
    pub event: String,
}

/// Outcome of one decision tick. Timings are modeled quantities (latency
/// model values), never wall clock, so traces stay bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t: f64,
    pub alpha: Vec<bool>,
    pub gains: Vec<f64>,
    pub pruned: Vec<PruneReason>,
    pub comp_ms: Vec<f64>,
    pub comm_ms: Vec<f64>,
    /// Modeled duration of the pruning phase.
    pub prune_phase_ms: f64,
    /// Modeled duration of the parallel planning phase (largest kept
    /// compute cost).
    pub plan_phase_ms: f64,
    /// Modeled duration of the selection phase.
    pub select_phase_ms: f64,
}

/// Convergence history of one edge-planner invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PddSolveRecord {
    pub t: f64,
    pub robot: usize,
    pub status: String,
    pub iterations: Vec<PddIteration>,
}

/// One edge job delivered through the server queue and the radio link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeJobRecord {
    pub t: f64,
    pub robot: usize,
    pub submit_s: f64,
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub arrival_s: f64,
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Tick(TickRecord),
    Decision(DecisionRecord),
    PddSolve(PddSolveRecord),
    EdgeJob(EdgeJobRecord),
}

impl TraceRecord {
    pub fn timestamp(&self) -> f64 {
        match self {
            TraceRecord::Tick(r) => r.t,
            TraceRecord::Decision(r) => r.t,
            TraceRecord::PddSolve(r) => r.t,
            TraceRecord::EdgeJob(r) => r.t,
        }
    }
}

/// Serializes records as line-delimited JSON.
pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a line-delimited trace.
pub fn from_jsonl(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_tags_records() {
        let records = vec![
            TraceRecord::Tick(TickRecord {
                t: 0.25,
                robot: 0,
                x: 1.0,
                y: 2.0,
                theta: 0.1,
                speed: 0.5,
                steer: 0.0,
                mode: Mode::Local,
                latency_ms: 0.0,
                compute_ms: 0.0,
                phi_residual: None,
                event: "none".into(),
            }),
            TraceRecord::EdgeJob(EdgeJobRecord {
                t: 0.5,
                robot: 1,
                submit_s: 0.25,
                compute_ms: 27.0,
                comm_ms: 33.0,
                arrival_s: 0.31,
                success: true,
            }),
        ];
        let text = to_jsonl(&records);
        assert!(text.lines().next().unwrap().contains("\"kind\":\"tick\""));
        let parsed = from_jsonl(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].timestamp(), 0.5);
    }
}

use edgenav_core::scenario::load_scenario;
use edgenav_core::sim::{run_episode, SimOptions};
use edgenav_core::trace::TraceRecord;
use std::time::Instant;

fn main() {
    let bytes = std::fs::read("scenarios/blocked_corridor.json").unwrap();
    let scenario = load_scenario(&bytes).unwrap();
    let t0 = Instant::now();
    let (m, trace) = run_episode(&scenario, 7, &SimOptions { workers: 1 });
    println!(
        "episode: {:.2?} wall  success {}  nav {:?}s  ticks {}",
        t0.elapsed(),
        m.per_robot[0].success,
        m.per_robot[0].navigation_time_s,
        trace.iter().filter(|r| matches!(r, TraceRecord::Tick(_))).count()
    );
    let mut solves = 0usize;
    let mut iters = 0usize;
    for r in &trace {
        if let TraceRecord::PddSolve(s) = r {
            solves += 1;
            iters += s.iterations.len();
        }
    }
    let jobs = trace.iter().filter(|r| matches!(r, TraceRecord::EdgeJob(_))).count();
    println!("decision pdd solves {solves} (outer iters {iters}), edge jobs {jobs}");
}

//! Run a whole plan in one process on a simulated clock and print the
//! scenario report. The single-node and split plans give the same functional
//! results; only the latency figures differ.
//!
//! cargo run --example boiler_scenario -- [ticks]

use plantbus::harness::{run_scenario_with, ScenarioOptions};
use plantbus::rtdb::PlantStore;
use plantbus::topology::parse_plan;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ticks = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(120);
    let plans = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/plans");
    let mut functional = Vec::new();
    for file in ["boiler.json", "boiler_split.json"] {
        let plan = parse_plan(&std::fs::read_to_string(format!("{plans}/{file}"))?)?;
        let dir = tempfile::tempdir()?;
        let opts = ScenarioOptions {
            trend_dir: dir.path().into(),
            ..Default::default()
        };
        let run = run_scenario_with(&plan, ticks, &opts)?;
        let r = &run.result;
        println!(
            "{file}: emitted {} stored {} evicted {} computed {} trend points {}",
            r.emitted, r.stored, r.evicted, r.computed_evaluations, r.trend_points_persisted
        );
        for l in &r.latency {
            println!("  {:<8} p50 {:>8.1} us  p99 {:>8.1} us", l.operation, l.quantiles_us.p50, l.quantiles_us.p99);
        }
        let duty = run.historians["hist"].latest("heat.duty")?.unwrap();
        println!("  heat.duty at end: {:.4}", duty.value);
        functional.push(serde_json::to_string(&r.functional())?);
    }
    println!("functional results identical: {}", functional[0] == functional[1]);
    Ok(())
}

//! Load a deployment plan, report rule violations, and show how each logical
//! channel binds for the given node assignment and for a single-node
//! collapse of the same plan.
//!
//! cargo run --example deployment_plan -- crates/core/examples/plans/boiler_split.json

use plantbus::topology::{derive_bindings, parse_plan, validate_plan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/plans/boiler_split.json").into());
    let plan = parse_plan(&std::fs::read_to_string(&path)?)?;

    for c in &plan.components {
        println!("{:<6} {:?} on node {}", c.name, c.level, c.node);
    }
    let violations = validate_plan(&plan);
    if !violations.is_empty() {
        for v in &violations {
            println!("violation: {v}");
        }
        return Ok(());
    }

    println!("bindings as planned:");
    for (id, b) in derive_bindings(&plan)? {
        println!("  channel {id}: {b:?}");
    }
    println!("bindings with everything on one node:");
    for (id, b) in derive_bindings(&plan.collapsed())? {
        println!("  channel {id}: {b:?}");
    }

    // A data-stream component talking straight to an application is refused
    // unless the plan opts in.
    let mut skip = plan.clone();
    skip.channels[1].from = "dcs".into();
    skip.channels[1].to = "calc".into();
    for v in validate_plan(&skip) {
        println!("after rewiring: {v}");
    }
    Ok(())
}

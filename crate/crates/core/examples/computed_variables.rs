//! Application modules on top of the historian: a computed variable defined
//! by an arithmetic expression, a status snapshot and a period usage report.

use plantbus::appmods::{define_computed, eval_computed, period_report, status_snapshot, ComputedVariableDef, Expr};
use plantbus::rtdb::{Historian, PlantStore, Quality, RealTimeDb, RetentionPolicy, Sample, VariableKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let expr = Expr::parse("steam.flow * (feed.temp - 100) / 1000")?;
    println!("parsed: {expr}");

    let dir = tempfile::tempdir()?;
    let db = RealTimeDb::new(RetentionPolicy::new(600_000, 100_000)?).with_trend_interval(10_000)?;
    let h = Historian::create(db, dir.path().join("plant.trends"))?;
    h.register("steam.flow", VariableKind::Raw)?;
    h.register("feed.temp", VariableKind::Raw)?;
    let duty = define_computed(
        &ComputedVariableDef {
            output: "heat.duty".into(),
            inputs: vec!["steam.flow".into(), "feed.temp".into()],
            expr: expr.to_string(),
        },
        &h,
    )?;

    for k in 0..60u64 {
        let t = k * 1000;
        h.insert(Sample::new("steam.flow", t, 118.0 + (k % 5) as f64))?;
        let temp = Sample::new("feed.temp", t, 205.0 + (k as f64 / 10.0).sin() * 4.0);
        // A transmitter fault for a few seconds.
        let temp = if (40..43).contains(&k) { temp.with_quality(Quality::Bad) } else { temp };
        h.insert(temp)?;
        if let Some(s) = eval_computed(&duty, &h, t)? {
            if k % 10 == 0 || s.quality != Quality::Good {
                println!("t={:>5} heat.duty={:.3} {:?}", t, s.value, s.quality);
            }
        }
        h.persist_closed(t)?;
    }

    let status = status_snapshot(&["steam.flow", "feed.temp", "heat.duty"], &h, 61_500)?;
    println!("{}", serde_json::to_string_pretty(&status)?);
    let usage = period_report("heat.duty", 0, 50_000, &h)?;
    println!("{}", serde_json::to_string(&usage)?);
    Ok(())
}

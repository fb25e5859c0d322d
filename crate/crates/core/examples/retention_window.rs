//! The in-memory store keeps a sliding window per variable. Feed 15 minutes
//! of 1 Hz samples into the default 10-minute window and see what is left.

use plantbus::rtdb::{Millis, RealTimeDb, RetentionPolicy, Sample, VariableKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let db = RealTimeDb::new(RetentionPolicy::default());
    db.register("boiler.temp", VariableKind::Raw)?;

    for s in 0..=900u64 {
        db.insert(Sample::new("boiler.temp", s * 1000, 180.0 + (s as f64 / 60.0).sin()))?;
    }
    let evicted = db.enforce_retention(900_000);
    let kept = db.range("boiler.temp", 0, Millis::MAX)?;
    println!("evicted {evicted}, kept {}", kept.len());
    println!("oldest {} ms, newest {} ms", kept[0].timestamp, kept[kept.len() - 1].timestamp);

    // Samples behind the eviction horizon are refused, not resurrected.
    let late = db.insert(Sample::new("boiler.temp", 10_000, 0.0))?;
    println!("late sample accepted: {late}");

    // A tighter policy caps the count as well.
    let small = RealTimeDb::new(RetentionPolicy::new(60_000, 10)?);
    small.register("x", VariableKind::Raw)?;
    for t in 0..30 {
        small.insert(Sample::new("x", t * 1000, t as f64))?;
    }
    small.enforce_retention(30_000);
    println!("capped store keeps {} samples", small.len_of("x")?);
    Ok(())
}

//! Fixed-interval aggregates: roll up recent samples on the fly, persist the
//! closed intervals to a text file, and read them back after the raw samples
//! have aged out.

use plantbus::rtdb::{read_trends, Historian, PlantStore, RealTimeDb, RetentionPolicy, Sample, VariableKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("plant.trends");
    let db = RealTimeDb::new(RetentionPolicy::new(30_000, 10_000)?).with_trend_interval(10_000)?;
    let h = Historian::create(db, &path)?;
    h.register("drum.level", VariableKind::Raw)?;

    for t in (0..120_000u64).step_by(500) {
        let v = 50.0 + ((t / 500) % 7) as f64 * 0.1;
        h.insert(Sample::new("drum.level", t, v))?;
        if t % 5_000 == 0 {
            h.persist_closed(t)?;
            h.db().enforce_retention(t);
        }
    }

    println!("on-the-fly rollup of the last 30 s:");
    for p in h.rollup("drum.level", 90_000, 120_000, 10_000)? {
        println!("  {} n={} min={} max={} mean={:.3}", p.interval_start_ms, p.count, p.min, p.max, p.mean);
    }

    let old = h.range("drum.level", 0, 30_000)?;
    println!("raw samples left in [0, 30 s): {}", old.len());
    println!("persisted trend for the same span:");
    for p in h.trend("drum.level", 0, 30_000)? {
        println!("  {} n={} mean={:.3}", p.interval_start_ms, p.count, p.mean);
    }

    let text = std::fs::read_to_string(&path)?;
    println!("first record: {}", text.lines().next().unwrap_or(""));
    println!("records on disk: {}", read_trends(std::io::BufReader::new(std::fs::File::open(&path)?))?.len());
    Ok(())
}


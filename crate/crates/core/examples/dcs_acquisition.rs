//! A simulated DCS gateway: deterministic signal generators sampled on a
//! fixed period and streamed into a historian over a session channel. Time
//! is simulated and starts at 0.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use plantbus::gateway::{decode_sample, run_acquisition, sample_signal, AcquisitionConfig, Generator, SignalSpec};
use plantbus::rtdb::{Millis, RealTimeDb, RetentionPolicy, VariableKind};
use plantbus::session::{Connection, StreamSender};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let specs = vec![
        SignalSpec::new("fw.pump.speed", Generator::Constant { c: 1480.0 }),
        SignalSpec::new("furnace.o2", Generator::Ramp { offset: 3.2, slope: -0.01 }),
        SignalSpec::new(
            "drum.pressure",
            Generator::Sine {
                amplitude: 0.4,
                period_s: 60.0,
                phase_rad: 0.0,
                offset: 42.0,
            },
        ),
        SignalSpec::new(
            "steam.flow",
            Generator::RandomWalk {
                start: 120.0,
                step_sd: 1.5,
                seed: 42,
                step_ms: 1000,
            },
        ),
    ];

    // Signals are pure functions of time; the walk replays from its seed.
    let walk = &specs[3];
    println!("steam.flow at 30 s: {:.4} (and again: {:.4})", sample_signal(walk, 30_000)?, sample_signal(walk, 30_000)?);

    let cfg = AcquisitionConfig::new(specs, 1000, 60)?;
    let (gw, hist) = Connection::pair();
    let db = std::sync::Arc::new(RealTimeDb::new(RetentionPolicy::default()));
    let mut sinks: HashMap<String, StreamSender> = HashMap::new();
    let mut readers = Vec::new();
    for (i, spec) in cfg.specs().iter().enumerate() {
        db.register(&spec.variable, VariableKind::Raw)?;
        let id = i as u32 + 1;
        sinks.insert(spec.variable.clone(), gw.open_channel(id)?.open_stream()?);
        let rx = hist.open_channel(id)?;
        let db = db.clone();
        readers.push(thread::spawn(move || -> Result<(), String> {
            let mut stream = rx.accept_stream(Some(Duration::from_secs(5))).map_err(|e| e.to_string())?;
            while let Some(item) = stream.next_item().map_err(|e| e.to_string())? {
                db.insert(decode_sample(&item)?).map_err(|e| e.to_string())?;
            }
            Ok(())
        }));
    }

    let emitted = run_acquisition(&cfg, 0, &mut sinks)?;
    for s in sinks.values_mut() {
        s.close()?;
    }
    for r in readers {
        r.join().unwrap()?;
    }
    println!("emitted {emitted} samples");
    for spec in cfg.specs() {
        let latest = db.latest(&spec.variable)?.unwrap();
        let n = db.range(&spec.variable, 0, Millis::MAX)?.len();
        println!("{:<14} {n} samples, latest {:.3} at {}", spec.variable, latest.value, latest.timestamp);
    }
    Ok(())
}

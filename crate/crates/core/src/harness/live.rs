//! Wall-clock operation of a single node, as started by `plantbus run-node`.
//!
//! Gateways stamp samples with wall time and evaluate their signals at the
//! time elapsed since the node started. Historian housekeeping runs on data
//! time (the newest stored timestamp), so nodes in different processes need
//! no clock agreement for retention or trend persistence.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::node::{NodeOptions, NodeRuntime};
use super::scenario::DEFAULT_PERIOD_MS;
use super::HarnessError;
use crate::appmods::eval_computed;
use crate::rtdb::{Historian, Millis, PlantStore};
use crate::topology::{derive_bindings, DeploymentPlan};

pub fn wall_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

/// A running node. Dropping it stops the loops and closes connections.
pub struct LiveNode {
    runtime: NodeRuntime,
    stop: Arc<AtomicBool>,
    loops: Vec<JoinHandle<()>>,
}

impl LiveNode {
    pub fn runtime(&self) -> &NodeRuntime {
        &self.runtime
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Release);
        for h in self.loops.drain(..) {
            let _ = h.join();
        }
        self.runtime.shutdown();
    }
}

impl Drop for LiveNode {
    fn drop(&mut self) {
        self.halt();
    }
}

fn every(period: Duration, stop: Arc<AtomicBool>, mut body: impl FnMut(u64) -> bool + Send + 'static) -> JoinHandle<()> {
    thread::spawn(move || {
        let origin = Instant::now();
        let mut k = 0u64;
        while !stop.load(Ordering::Acquire) {
            if !body(k) {
                return;
            }
            k += 1;
            let due = origin + period.saturating_mul(u32::try_from(k).unwrap_or(u32::MAX));
            while let Some(left) = due.checked_duration_since(Instant::now()) {
                if stop.load(Ordering::Acquire) {
                    return;
                }
                thread::sleep(left.min(Duration::from_millis(50)));
            }
        }
    })
}

fn data_time(h: &Historian) -> Option<Millis> {
    h.db()
        .variables()
        .iter()
        .filter_map(|v| h.latest(v.name()).ok().flatten())
        .map(|s| s.timestamp)
        .max()
}

/// Boots `node` and starts its acquisition, evaluation and housekeeping
/// loops. Connections to peer nodes are retried for
/// `opts.connect_patience`.
pub fn run_node(plan: &DeploymentPlan, node: &str, opts: &NodeOptions) -> Result<LiveNode, HarnessError> {
    let bindings = derive_bindings(plan).map_err(|e| super::node::boot_err(&e.0[0].element.clone(), e))?;
    let period = Duration::from_millis(plan.period_ms.unwrap_or(DEFAULT_PERIOD_MS).max(1));
    let plan = Arc::new(plan.clone());
    let runtime = NodeRuntime::boot(plan.clone(), node, opts)?;
    let gateways = runtime.boot_gateways(&bindings, opts)?;
    let app = runtime.boot_app(&bindings, opts)?;
    let stop = Arc::new(AtomicBool::new(false));
    let mut loops = Vec::new();

    let period_ms = period.as_millis() as Millis;
    for mut g in gateways {
        let origin = wall_ms();
        loops.push(every(period, stop.clone(), move |k| {
            let elapsed = k * period_ms;
            match g.emit_tick(origin + elapsed, elapsed, |_, _, _| {}) {
                Ok(_) => true,
                Err(e) => {
                    eprintln!("gateway {}: {e}", g.component);
                    false
                }
            }
        }));
    }
    if let Some(app) = app {
        loops.push(every(period, stop.clone(), move |_| {
            let now = wall_ms();
            for h in &app.handles {
                if let Err(e) = eval_computed(h, &app.store, now) {
                    eprintln!("{}: {e}", app.component);
                }
            }
            true
        }));
    }
    for (name, h) in runtime.historians().clone() {
        loops.push(every(period, stop.clone(), move |_| {
            if let Some(now) = data_time(&h) {
                h.db().enforce_retention(now);
                if let Err(e) = h.persist_closed(now) {
                    eprintln!("historian {name}: {e}");
                }
            }
            true
        }));
    }
    Ok(LiveNode {
        runtime,
        stop,
        loops,
    })
}

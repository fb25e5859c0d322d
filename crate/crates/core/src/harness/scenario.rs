use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::latency::{Collector, LatencyReport};
use super::node::{boot_err, AppRuntime, GatewayRuntime, NodeOptions, NodeRuntime};
use super::HarnessError;
use crate::appmods::{eval_computed, period_report, status_snapshot, StatusReport, UsageReport};
use crate::rtdb::{Historian, Millis, PlantStore};
use crate::topology::{derive_bindings, DeploymentPlan};

pub const DEFAULT_PERIOD_MS: Millis = 1000;

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub trend_dir: PathBuf,
    /// XORed into every random walk seed.
    pub seed: u64,
    /// Simulated time of tick 0.
    pub clock_start_ms: Millis,
    /// Give up if an emitted sample is not visible after this long.
    pub visibility_timeout: Duration,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            trend_dir: super::trend_dir_from_env(),
            seed: 0,
            clock_start_ms: 0,
            visibility_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub status: StatusReport,
    /// One per variable over the whole run.
    pub usage: Vec<UsageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub ticks: u64,
    pub period_ms: Millis,
    pub start_ms: Millis,
    /// Exclusive end of the simulated span.
    pub end_ms: Millis,
    /// Raw deliveries to historians plus computed samples produced.
    pub emitted: u64,
    /// Samples accepted by all historians.
    pub stored: u64,
    pub evicted: u64,
    pub trend_points_persisted: u64,
    pub computed_evaluations: u64,
    pub reports: Vec<ComponentReport>,
    /// Wall-clock measurements; they differ between runs.
    pub latency: Vec<LatencyReport>,
}

impl ScenarioResult {
    /// Everything but the latency reports.
    pub fn functional(&self) -> ScenarioResult {
        ScenarioResult {
            latency: Vec::new(),
            ..self.clone()
        }
    }
}

/// A finished scenario with its historians still inspectable.
pub struct ScenarioRun {
    pub result: ScenarioResult,
    pub historians: BTreeMap<String, Arc<Historian>>,
}

impl std::fmt::Debug for ScenarioRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScenarioRun")
            .field("result", &self.result)
            .field("historians", &self.historians.keys().collect::<Vec<_>>())
            .finish()
    }
}

pub fn run_scenario(plan: &DeploymentPlan, ticks: u64) -> Result<ScenarioResult, HarnessError> {
    run_scenario_with(plan, ticks, &ScenarioOptions::default()).map(|r| r.result)
}

/// Boots every node of `plan` in this process and runs `ticks` ticks of
/// simulated time. Each tick: acquire, evaluate computed variables, enforce
/// retention, persist closed trend intervals. Trend files start empty.
pub fn run_scenario_with(
    plan: &DeploymentPlan,
    ticks: u64,
    opts: &ScenarioOptions,
) -> Result<ScenarioRun, HarnessError> {
    if ticks == 0 {
        return Err(HarnessError::InvalidArgument("ticks must be positive".into()));
    }
    let bindings = derive_bindings(plan).map_err(|e| {
        let v = &e.0[0];
        boot_err(&v.element, format!("plan does not validate: {e}"))
    })?;
    let period = plan.period_ms.unwrap_or(DEFAULT_PERIOD_MS);
    if period == 0 {
        return Err(HarnessError::InvalidArgument("period_ms must be positive".into()));
    }
    let plan = Arc::new(plan.clone());
    let node_opts = NodeOptions {
        trend_dir: opts.trend_dir.clone(),
        truncate_trends: true,
        always_listen: false,
        seed: opts.seed,
        connect_patience: Duration::ZERO,
        attach_existing: false,
    };

    // All listeners first, then the outbound side.
    let mut nodes = Vec::new();
    for n in &plan.nodes {
        nodes.push(NodeRuntime::boot(plan.clone(), &n.name, &node_opts)?);
    }
    let mut gateways: Vec<GatewayRuntime> = Vec::new();
    let mut app: Option<AppRuntime> = None;
    for n in &nodes {
        gateways.extend(n.boot_gateways(&bindings, &node_opts)?);
        if let Some(a) = n.boot_app(&bindings, &node_opts)? {
            app = Some(a);
        }
    }
    let historians: BTreeMap<String, Arc<Historian>> = nodes
        .iter()
        .flat_map(|n| n.historians().iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect();
    let host: BTreeMap<&str, &NodeRuntime> = nodes
        .iter()
        .flat_map(|n| n.historians().keys().map(move |k| (k.as_str(), n)))
        .collect();

    let ingest = Collector::new();
    let tick_time = Collector::new();
    let (mut emitted, mut evicted, mut persisted, mut evaluations) = (0u64, 0u64, 0u64, 0u64);
    let start = opts.clock_start_ms;
    for k in 0..ticks {
        let tick_started = Instant::now();
        let t = start + k * period;

        let mut pending = Vec::new();
        for g in &mut gateways {
            emitted += g.emit_tick(t, t, |target, s, at| {
                pending.push((target.to_owned(), s.variable.clone(), at))
            })?;
        }
        for (target, variable, at) in pending {
            wait_visible(host[target.as_str()], &historians[&target], &variable, t, opts.visibility_timeout)?;
            ingest.record(at.elapsed());
        }

        if let Some(app) = &app {
            for h in &app.handles {
                let at = Instant::now();
                if eval_computed(h, &app.store, t)?.is_some() {
                    ingest.record(at.elapsed());
                    evaluations += 1;
                    emitted += 1;
                }
            }
        }

        for h in historians.values() {
            evicted += h.db().enforce_retention(t) as u64;
        }
        for h in historians.values() {
            persisted += h.persist_closed(t)? as u64;
        }
        tick_time.record(tick_started.elapsed());
    }
    for g in &mut gateways {
        g.close();
    }

    let end = start + ticks * period;
    let last = end - period;
    let mut reports = Vec::new();
    for (name, h) in &historians {
        let ids = h.db().variables();
        let vars: Vec<&str> = ids.iter().map(|v| v.name()).collect();
        let status = status_snapshot(&vars, h.as_ref(), last)?;
        let usage = vars
            .iter()
            .map(|v| period_report(v, start, end, h.as_ref()))
            .collect::<Result<_, _>>()?;
        reports.push(ComponentReport {
            component: name.clone(),
            status,
            usage,
        });
    }
    let mut latency = Vec::new();
    if !ingest.is_empty() {
        latency.push(ingest.report("ingest")?);
    }
    latency.push(tick_time.report("tick")?);

    let stored = historians.values().map(|h| h.db().accepted_total()).sum();
    drop(gateways);
    drop(app);
    drop(nodes);
    Ok(ScenarioRun {
        result: ScenarioResult {
            ticks,
            period_ms: period,
            start_ms: start,
            end_ms: end,
            emitted,
            stored,
            evicted,
            trend_points_persisted: persisted,
            computed_evaluations: evaluations,
            reports,
            latency,
        },
        historians,
    })
}

fn wait_visible(
    node: &NodeRuntime,
    h: &Historian,
    variable: &str,
    t: Millis,
    timeout: Duration,
) -> Result<(), HarnessError> {
    let deadline = Instant::now() + timeout;
    let mut seen = node.ingest_generation();
    loop {
        if h.latest(variable)?.is_some_and(|s| s.timestamp >= t) {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(HarnessError::NotVisible {
                variable: variable.to_owned(),
                timestamp: t,
            });
        }
        seen = node.wait_ingest(seen, deadline);
    }
}

/// Emission-to-visibility latency of every sample of a scenario run,
/// computed samples included.
pub fn measure_ingest_latency(
    plan: &DeploymentPlan,
    ticks: u64,
    opts: &ScenarioOptions,
) -> Result<LatencyReport, HarnessError> {
    let run = run_scenario_with(plan, ticks, opts)?;
    run.result
        .latency
        .into_iter()
        .find(|r| r.operation == "ingest")
        .ok_or_else(|| HarnessError::EmptyReport("ingest".into()))
}

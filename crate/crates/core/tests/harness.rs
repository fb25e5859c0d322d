mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::boiler_plan;
use plantbus::harness::{
    measure_ingest_latency, measure_rpc, run_node, run_scenario, run_scenario_with, HarnessError, LatencyReport,
    NodeOptions, NodeRuntime, RemoteStore, ScenarioOptions, ScenarioRun, QUERY_CHANNEL,
};
use plantbus::rtdb::{Millis, PlantStore, Quality, Sample, StoreError};
use plantbus::session::{Connection, SessionError};
use plantbus::topology::DeploymentPlan;

fn scenario(plan: &DeploymentPlan, ticks: u64, dir: &std::path::Path) -> ScenarioRun {
    let opts = ScenarioOptions {
        trend_dir: dir.into(),
        ..Default::default()
    };
    run_scenario_with(plan, ticks, &opts).unwrap()
}

/// Every stored sample and trend file of a run, keyed by historian.
fn contents(run: &ScenarioRun) -> BTreeMap<String, (Vec<Sample>, Vec<u8>)> {
    run.historians
        .iter()
        .map(|(name, h)| {
            let mut samples = Vec::new();
            for v in h.db().variables() {
                samples.extend(h.range(v.name(), 0, Millis::MAX).unwrap());
            }
            (name.clone(), (samples, std::fs::read(h.trend_path()).unwrap()))
        })
        .collect()
}

#[test]
fn single_node_tallies() {
    let dir = tempfile::tempdir().unwrap();
    let run = scenario(&boiler_plan(false), 100, dir.path());
    let r = &run.result;
    assert_eq!((r.emitted, r.stored, r.computed_evaluations), (300, 300, 100));
    assert!(r.stored <= r.emitted);
    // 100 s of data, 60 s window, 10 s trends.
    assert_eq!(r.evicted, 3 * 39);
    assert_eq!(r.trend_points_persisted, 3 * 9);
    assert_eq!((r.start_ms, r.end_ms), (0, 100_000));
    let ingest = r.latency.iter().find(|l| l.operation == "ingest").unwrap();
    assert_eq!(ingest.sample_count, r.emitted);
    assert!(r.latency.iter().all(LatencyReport::is_monotone));
    for usage in &r.reports[0].usage {
        assert_eq!(usage.total_count, 100, "{usage:?}");
    }
    let duty = run.historians["hist"].latest("heat.duty").unwrap().unwrap();
    let flow = run.historians["hist"].latest("steam.flow").unwrap().unwrap();
    let temp = run.historians["hist"].latest("feed.temp").unwrap().unwrap();
    assert_eq!(duty.value, flow.value * (temp.value - 100.0) / 1000.0);
    assert_eq!(duty.timestamp, 99_000);
}

#[test]
fn split_nodes_match_single_node() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let single = scenario(&boiler_plan(false), 100, d1.path());
    let split = scenario(&boiler_plan(true), 100, d2.path());
    assert_eq!(
        serde_json::to_string(&single.result.functional()).unwrap(),
        serde_json::to_string(&split.result.functional()).unwrap()
    );
    assert_eq!(contents(&single), contents(&split));
}

#[test]
fn reruns_are_identical_and_seed_matters() {
    let plan = boiler_plan(false);
    let (d1, d2, d3) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = scenario(&plan, 30, d1.path());
    let b = scenario(&plan, 30, d2.path());
    assert_eq!(a.result.functional(), b.result.functional());
    assert_eq!(contents(&a), contents(&b));

    let opts = ScenarioOptions {
        trend_dir: d3.path().into(),
        seed: 99,
        ..Default::default()
    };
    let c = run_scenario_with(&plan, 30, &opts).unwrap();
    assert_eq!(c.result.stored, a.result.stored);
    let flow = |r: &ScenarioRun| r.historians["hist"].range("steam.flow", 0, Millis::MAX).unwrap();
    let temp = |r: &ScenarioRun| r.historians["hist"].range("feed.temp", 0, Millis::MAX).unwrap();
    assert_ne!(flow(&a), flow(&c));
    assert_eq!(temp(&a), temp(&c));
}

#[test]
fn invalid_plans_fail_to_boot() {
    let mut plan = boiler_plan(false);
    plan.channels[1].from = "dcs".into();
    plan.channels[1].to = "calc".into();
    plan.channels[1].id = 2;
    match run_scenario(&plan, 10) {
        Err(HarnessError::BootFailure { component, .. }) => assert_eq!(component, "channel 2"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(run_scenario(&boiler_plan(false), 0), Err(HarnessError::InvalidArgument(_))));
}

fn echo_pair() -> (plantbus::session::Channel, Connection, Connection, plantbus::session::Registration) {
    let (a, b) = Connection::pair();
    let client = a.open_channel(1).unwrap();
    let server = b.open_channel(1).unwrap();
    let reg = server.serve("echo", |args| Ok(args.to_vec())).unwrap();
    (client, a, b, reg)
}

#[test]
fn rpc_report_contracts() {
    let (ch, _a, _b, _reg) = echo_pair();
    let (one, d) = measure_rpc(&ch, 1, 16, Duration::from_secs(5)).unwrap();
    assert_eq!(one.sample_count, 1);
    assert_eq!(d.len(), 1);
    assert_eq!((one.min_us, one.max_us), (one.mean_us, one.mean_us));

    let started = Instant::now();
    let (r, d) = measure_rpc(&ch, 1000, 256, Duration::from_secs(5)).unwrap();
    let wall = started.elapsed();
    assert_eq!(r.sample_count, 1000);
    assert!(r.is_monotone());
    assert!(r.min_us > 0.0 && r.min_us <= r.quantiles_us.p50 && r.quantiles_us.p99 <= r.max_us);
    let total: Duration = d.iter().sum();
    assert!(total.as_secs_f64() <= wall.as_secs_f64() * 1.05, "{total:?} vs {wall:?}");
}

#[test]
fn rpc_failure_reports_progress() {
    let (a, b) = Connection::pair();
    let ch = a.open_channel(1).unwrap();
    let _peer = b.open_channel(1).unwrap();
    match measure_rpc(&ch, 5, 8, Duration::from_millis(50)) {
        Err(HarnessError::Measurement { completed: 0, source }) => assert!(matches!(source, SessionError::Timeout { .. })),
        other => panic!("{other:?}"),
    }
}

fn median_p50(plan: &DeploymentPlan) -> f64 {
    let mut p: Vec<f64> = (0..3)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let opts = ScenarioOptions {
                trend_dir: dir.path().into(),
                ..Default::default()
            };
            let r = measure_ingest_latency(plan, 50, &opts).unwrap();
            assert_eq!(r.sample_count, 150);
            r.quantiles_us.p50
        })
        .collect();
    p.sort_by(f64::total_cmp);
    p[1]
}

#[test]
fn in_process_ingest_is_not_slower_than_loopback() {
    let local = median_p50(&boiler_plan(false));
    let remote = median_p50(&boiler_plan(true));
    assert!(local <= remote, "in-process p50 {local} us > loopback p50 {remote} us");
}

#[test]
fn query_channel_serves_store_and_echo() {
    let plan = Arc::new(boiler_plan(false));
    let dir = tempfile::tempdir().unwrap();
    let opts = NodeOptions {
        trend_dir: dir.path().into(),
        always_listen: true,
        ..Default::default()
    };
    let node = NodeRuntime::boot(plan, "a", &opts).unwrap();
    let local = node.historians()["hist"].clone();
    for t in 0..50u64 {
        local.insert(Sample::new("steam.flow", t * 1000, t as f64 * 0.5)).unwrap();
    }
    local.insert(Sample::new("feed.temp", 3000, 1.0).with_quality(Quality::Bad)).unwrap();
    local.persist_closed(45_000).unwrap();

    let conn = Connection::connect_tcp(&node.listen_addr().unwrap().to_string()).unwrap();
    let ch = conn.open_channel(QUERY_CHANNEL).unwrap();
    assert_eq!(ch.call("echo", b"ping", Duration::from_secs(5)).unwrap(), b"ping");
    let remote = RemoteStore::new(ch);
    for v in ["steam.flow", "feed.temp"] {
        assert_eq!(remote.latest(v), local.latest(v));
        assert_eq!(remote.range(v, 5_000, 20_000), local.range(v, 5_000, 20_000));
        assert_eq!(remote.rollup(v, 0, 60_000, 7_000), local.rollup(v, 0, 60_000, 7_000));
        assert_eq!(remote.trend(v, 0, 60_000), local.trend(v, 0, 60_000));
    }
    assert_eq!(remote.latest("nope"), Err(StoreError::UnknownVariable("nope".into())));
    assert_eq!(remote.range("steam.flow", 9, 1), Err(StoreError::InvalidRange { t0: 9, t1: 1 }));
    conn.close();
}

#[test]
fn live_node_acquires_on_wall_clock() {
    let mut plan = boiler_plan(false);
    plan.period_ms = Some(20);
    let dir = tempfile::tempdir().unwrap();
    let opts = NodeOptions {
        trend_dir: dir.path().into(),
        ..Default::default()
    };
    let before = plantbus::harness::wall_ms();
    let live = run_node(&plan, "a", &opts).unwrap();
    let hist = live.runtime().historians()["hist"].clone();
    let deadline = Instant::now() + Duration::from_secs(10);
    while hist.range("heat.duty", 0, Millis::MAX).unwrap().len() < 5 {
        assert!(Instant::now() < deadline, "no computed samples");
        std::thread::sleep(Duration::from_millis(20));
    }
    live.stop();
    let flow = hist.range("steam.flow", 0, Millis::MAX).unwrap();
    assert!(flow.len() >= 5);
    assert!(flow[0].timestamp >= before);
    assert!(flow.windows(2).all(|w| w[1].timestamp - w[0].timestamp == 20));
}

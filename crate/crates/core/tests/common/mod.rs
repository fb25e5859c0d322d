#![allow(dead_code)]

use std::net::TcpListener;

use plantbus::topology::{parse_plan, DeploymentPlan};

/// A port nothing listens on right now.
pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

/// Gateway, historian and calculator; two raw signals and one computed
/// variable. `split` puts the historian on a second node.
pub fn boiler_plan(split: bool) -> DeploymentPlan {
    let (pa, pb) = (free_port(), free_port());
    let hist_node = if split { "b" } else { "a" };
    let text = format!(
        r#"{{
        "nodes": [{{"name": "a", "address": "127.0.0.1:{pa}"}},
                  {{"name": "b", "address": "127.0.0.1:{pb}"}}],
        "components": [
            {{"name": "dcs", "level": "data_stream", "node": "a"}},
            {{"name": "hist", "level": "data_organization", "node": "{hist_node}"}},
            {{"name": "calc", "level": "application_processing", "node": "a"}}
        ],
        "channels": [
            {{"id": 1, "from": "dcs", "to": "hist", "pattern": "stream"}},
            {{"id": 2, "from": "calc", "to": "hist", "pattern": "rpc"}}
        ],
        "period_ms": 1000,
        "retention_window_ms": 60000,
        "trend_interval_ms": 10000,
        "signals": [
            {{"variable": "steam.flow", "generator": "random_walk", "start": 120.0, "step_sd": 1.5, "seed": 42}},
            {{"variable": "feed.temp", "generator": "sine", "amplitude": 5.0, "period_s": 30.0, "offset": 210.0}}
        ],
        "computed": [
            {{"output": "heat.duty", "inputs": ["steam.flow", "feed.temp"], "expr": "steam.flow * (feed.temp - 100) / 1000"}}
        ]
    }}"#
    );
    parse_plan(&text).unwrap()
}

/// Correctly rounded sum (Shewchuk's exact partials).
pub fn fsum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials.iter().rev().fold(0.0, |acc, p| acc + p)
}

/// Brute force: bucket every sample by `t - t % len`, keep the buckets that
/// overlap `[t0, t1)`, aggregate each one.
pub fn rollup_oracle(
    variable: &str,
    samples: &[(u64, f64)],
    t0: u64,
    t1: u64,
    len: u64,
) -> Vec<plantbus::rtdb::TrendPoint> {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(t, v) in samples {
        buckets.entry(t - t % len).or_default().push(v);
    }
    buckets
        .into_iter()
        .filter(|(s, _)| t0 < t1 && *s < t1 && s + len > t0)
        .map(|(s, vs)| plantbus::rtdb::TrendPoint {
            variable: variable.to_owned(),
            interval_start_ms: s,
            interval_len_ms: len,
            min: vs.iter().copied().fold(f64::INFINITY, f64::min),
            max: vs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: fsum(vs.iter().copied()) / vs.len() as f64,
            count: vs.len() as u64,
        })
        .collect()
}

/// Exact on everything but the mean, which may differ by `rel` relative to
/// the oracle's mean.
pub fn trend_points_match(
    got: &[plantbus::rtdb::TrendPoint],
    want: &[plantbus::rtdb::TrendPoint],
    rel: f64,
) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} points, oracle has {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(want) {
        let same_key = g.variable == w.variable
            && g.interval_start_ms == w.interval_start_ms
            && g.interval_len_ms == w.interval_len_ms;
        if !same_key || g.min != w.min || g.max != w.max || g.count != w.count {
            return Err(format!("{g:?} != {w:?}"));
        }
        if (g.mean - w.mean).abs() > rel * w.mean.abs() {
            return Err(format!("mean {} vs oracle {}", g.mean, w.mean));
        }
    }
    Ok(())
}

pub const LEVELS: [&str; 3] = ["data_stream", "data_organization", "application_processing"];
pub const PATTERNS: [&str; 4] = ["rpc", "event", "stream", "file"];

/// Level order: adjacent levels may talk, the middle one also to itself,
/// the outer two to each other only when skipping is allowed.
pub fn legal_pair(from: usize, to: usize, allow_skip: bool) -> bool {
    let gap = from.abs_diff(to);
    gap == 1 || (from == 1 && to == 1) || (gap == 2 && allow_skip)
}

/// A random plan that satisfies every structural rule, as JSON.
pub fn arb_plan_json() -> impl proptest::strategy::Strategy<Value = serde_json::Value> {
    use proptest::prelude::*;
    (
        1usize..=4,
        any::<bool>(),
        prop::collection::vec((0usize..3, 0usize..4), 2..=10),
        prop::collection::vec((0usize..10, 0usize..10, 0usize..4), 0..=16),
        1000u16..60000,
    )
        .prop_map(|(n_nodes, allow_skip, comps, links, port_base)| {
            let nodes: Vec<_> = (0..n_nodes)
                .map(|i| serde_json::json!({"name": format!("n{i}"), "address": format!("127.0.0.1:{}", port_base + i as u16)}))
                .collect();
            let components: Vec<_> = comps
                .iter()
                .enumerate()
                .map(|(i, &(level, node))| {
                    serde_json::json!({"name": format!("c{i}"), "level": LEVELS[level], "node": format!("n{}", node % n_nodes)})
                })
                .collect();
            let mut channels = Vec::new();
            for (k, &(a, b, pattern)) in links.iter().enumerate() {
                let (a, b) = (a % comps.len(), b % comps.len());
                if a != b && legal_pair(comps[a].0, comps[b].0, allow_skip) {
                    channels.push(serde_json::json!({
                        "id": 10 + k as u32, "from": format!("c{a}"), "to": format!("c{b}"), "pattern": PATTERNS[pattern]
                    }));
                }
            }
            serde_json::json!({
                "nodes": nodes, "components": components, "channels": channels, "allow_level_skip": allow_skip
            })
        })
}

pub fn arb_plan() -> impl proptest::strategy::Strategy<Value = DeploymentPlan> {
    use proptest::strategy::Strategy;
    arb_plan_json().prop_map(|v| parse_plan(&v.to_string()).expect("generated plan parses"))
}

/// Inserts `values` into `src` and `twin.raw` at the same times and lets
/// the computed `twin.calc = src` copy them, one evaluation per sample,
/// with retention and trend persistence after each step.
pub fn feed_twins(h: &plantbus::rtdb::Historian, values: &[(u64, f64, plantbus::rtdb::Quality)]) {
    use plantbus::appmods::{define_computed, eval_computed, ComputedVariableDef};
    use plantbus::rtdb::{PlantStore, Sample, VariableKind};
    h.register("src", VariableKind::Raw).unwrap();
    h.register("twin.raw", VariableKind::Raw).unwrap();
    let def = ComputedVariableDef {
        output: "twin.calc".into(),
        inputs: vec!["src".into()],
        expr: "src".into(),
    };
    let calc = define_computed(&def, h).unwrap();
    for &(t, v, q) in values {
        let a = h.insert(Sample::new("src", t, v).with_quality(q)).unwrap();
        let b = h.insert(Sample::new("twin.raw", t, v).with_quality(q)).unwrap();
        assert_eq!(a, b);
        let c = eval_computed(&calc, h, t).unwrap();
        assert_eq!(c.is_some(), b);
        h.db().enforce_retention(t);
        h.persist_closed(t).unwrap();
    }
}

/// Runs every query against both twins and compares after renaming.
pub fn twins_agree(h: &plantbus::rtdb::Historian, t_end: u64) -> Result<(), String> {
    use plantbus::appmods::{period_report, status_snapshot};
    use plantbus::rtdb::{PlantStore, Sample};
    fn same<T: PartialEq + std::fmt::Debug>(what: &str, a: T, b: T) -> Result<(), String> {
        if a == b {
            Ok(())
        } else {
            Err(format!("{what}: {a:?} != {b:?}"))
        }
    }
    let err = |e: plantbus::rtdb::StoreError| e.to_string();
    let anon = |mut v: Vec<Sample>| {
        v.iter_mut().for_each(|s| s.variable.clear());
        v
    };
    same(
        "range",
        anon(h.range("twin.raw", 0, u64::MAX).map_err(err)?),
        anon(h.range("twin.calc", 0, u64::MAX).map_err(err)?),
    )?;
    let key = |s: Option<Sample>| s.map(|s| (s.timestamp, s.value.to_bits(), s.quality));
    same(
        "latest",
        key(h.latest("twin.raw").map_err(err)?),
        key(h.latest("twin.calc").map_err(err)?),
    )?;
    for len in [1_000, 7_000, 60_000] {
        let mut a = h.rollup("twin.raw", 0, t_end, len).map_err(err)?;
        let b = h.rollup("twin.calc", 0, t_end, len).map_err(err)?;
        a.iter_mut().for_each(|p| p.variable = "twin.calc".into());
        same("rollup", a, b)?;
    }
    let s = status_snapshot(&["twin.raw", "twin.calc"], h, t_end).map_err(err)?;
    same("status", &s.rows[0].data, &s.rows[1].data)?;
    let mut ua = period_report("twin.raw", 0, t_end, h).map_err(err)?;
    let ub = period_report("twin.calc", 0, t_end, h).map_err(err)?;
    ua.variable = ub.variable.clone();
    same("period report", &ua, &ub)?;
    let keys = |v: serde_json::Value| v.as_object().map(|o| o.keys().cloned().collect::<Vec<_>>());
    same(
        "report schema",
        keys(serde_json::to_value(&ua).unwrap()),
        keys(serde_json::to_value(&ub).unwrap()),
    )
}

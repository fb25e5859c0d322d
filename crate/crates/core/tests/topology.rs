mod common;

use std::collections::HashSet;

use common::{arb_plan, legal_pair};
use plantbus::session::{parse_host_port, Binding};
use plantbus::topology::{derive_bindings, parse_plan, validate_plan, DeploymentPlan, Level, PlanError, Rule};
use proptest::prelude::*;

fn level_index(l: Level) -> usize {
    match l {
        Level::DataStream => 0,
        Level::DataOrganization => 1,
        Level::ApplicationProcessing => 2,
    }
}

/// Structural validity restated from scratch (plans here carry no signals
/// or computed variables).
fn oracle_valid(p: &DeploymentPlan) -> bool {
    let node_names: Vec<&str> = p.nodes.iter().map(|n| n.name.as_str()).collect();
    let unique_nodes = node_names.iter().collect::<HashSet<_>>().len() == node_names.len();
    let nodes_ok = unique_nodes
        && p.nodes.iter().all(|n| {
            !n.name.is_empty()
                && n.address.rsplit_once(':').is_some_and(|(h, port)| {
                    !h.is_empty()
                        && !h.contains(char::is_whitespace)
                        && !port.is_empty()
                        && port.bytes().all(|b| b.is_ascii_digit())
                        && port.parse::<u16>().is_ok_and(|x| x > 0)
                })
        });
    let comp_names: Vec<&str> = p.components.iter().map(|c| c.name.as_str()).collect();
    let comps_ok = comp_names.iter().collect::<HashSet<_>>().len() == comp_names.len()
        && p
            .components
            .iter()
            .all(|c| !c.name.is_empty() && node_names.contains(&c.node.as_str()));
    let ids: HashSet<u32> = p.channels.iter().map(|c| c.id).collect();
    let chans_ok = ids.len() == p.channels.len()
        && p.channels.iter().all(|ch| {
            let level = |name: &str| p.components.iter().find(|c| c.name == name).map(|c| level_index(c.level));
            match (level(&ch.from), level(&ch.to)) {
                (Some(a), Some(b)) => ch.from != ch.to && legal_pair(a, b, p.allow_level_skip),
                _ => false,
            }
        });
    nodes_ok && comps_ok && chans_ok
}

fn mutate(p: &mut DeploymentPlan, op: usize, pick: usize) {
    let nc = p.components.len();
    let names: Vec<String> = p.components.iter().map(|c| c.name.clone()).collect();
    match op {
        0 if !p.channels.is_empty() => {
            let k = pick % p.channels.len();
            let target = if pick.is_multiple_of(5) { "ghost".to_owned() } else { names[pick % nc].clone() };
            if pick.is_multiple_of(2) {
                p.channels[k].from = target;
            } else {
                p.channels[k].to = target;
            }
        }
        1 if p.channels.len() > 1 => {
            let id = p.channels[0].id;
            let k = 1 + pick % (p.channels.len() - 1);
            p.channels[k].id = id;
        }
        2 => {
            let node = if pick.is_multiple_of(3) {
                "ghost".to_owned()
            } else {
                p.nodes[pick % p.nodes.len()].name.clone()
            };
            p.components[pick % nc].node = node;
        }
        3 => {
            p.components[pick % nc].level = [Level::DataStream, Level::DataOrganization, Level::ApplicationProcessing][pick % 3];
        }
        4 => p.allow_level_skip = !p.allow_level_skip,
        5 => {
            let addrs = ["127.0.0.1:7001", "plant-gw:1", "[::1]:65535", "host", ":80", "h:0", "h:65536", "h:x", "a b:1"];
            let k = pick % p.nodes.len();
            p.nodes[k].address = addrs[pick % addrs.len()].to_owned();
        }
        6 => {
            let dup = p.nodes[pick % p.nodes.len()].clone();
            p.nodes.push(dup);
        }
        7 => {
            let dup = p.components[pick % nc].clone();
            p.components.push(dup);
        }
        8 => {
            if pick.is_multiple_of(2) {
                let k = pick % p.nodes.len();
                p.nodes[k].name.clear();
            } else {
                p.components[pick % nc].name.clear();
            }
        }
        9 if !p.channels.is_empty() => {
            let k = pick % p.channels.len();
            p.channels[k].to = p.channels[k].from.clone();
        }
        _ => {}
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_plans_validate_and_bind(plan in arb_plan()) {
        prop_assert!(oracle_valid(&plan));
        prop_assert_eq!(validate_plan(&plan), vec![]);
        let bindings = derive_bindings(&plan).unwrap();
        prop_assert_eq!(bindings.len(), plan.channels.len());
        for ch in &plan.channels {
            let from = plan.node_of(&ch.from).unwrap();
            let to = plan.node_of(&ch.to).unwrap();
            let want = if from.name == to.name {
                Binding::InProcess
            } else {
                Binding::Network { address: to.address.clone() }
            };
            prop_assert_eq!(&bindings[&ch.id], &want);
        }

        let single = plan.collapsed();
        prop_assert_eq!(&single.channels, &plan.channels);
        prop_assert_eq!(single.components.len(), plan.components.len());
        for (a, b) in single.components.iter().zip(&plan.components) {
            prop_assert_eq!((&a.name, a.level), (&b.name, b.level));
        }
        prop_assert!(derive_bindings(&single).unwrap().values().all(Binding::is_in_process));
    }

    #[test]
    fn validation_is_sound_under_mutation(
        plan in arb_plan(),
        ops in prop::collection::vec((0usize..10, any::<usize>()), 1..=3),
    ) {
        let mut p = plan;
        for (op, pick) in ops {
            mutate(&mut p, op, pick);
        }
        let violations = validate_plan(&p);
        prop_assert_eq!(violations.is_empty(), oracle_valid(&p), "{:?}", violations);
        prop_assert_eq!(derive_bindings(&p).is_ok(), violations.is_empty());
    }

    #[test]
    fn plan_json_round_trips(plan in arb_plan()) {
        let text = serde_json::to_string(&plan).unwrap();
        prop_assert_eq!(parse_plan(&text).unwrap(), plan);
    }
}

fn two_node_plan(level_skip: bool) -> DeploymentPlan {
    parse_plan(&format!(
        r#"{{"nodes": [{{"name": "A", "address": "127.0.0.1:7000"}}, {{"name": "B", "address": "127.0.0.1:7001"}}],
            "components": [{{"name": "gw", "level": "data_stream", "node": "A"}},
                           {{"name": "db", "level": "data_organization", "node": "B"}},
                           {{"name": "app", "level": "application_processing", "node": "A"}}],
            "channels": [{{"id": 1, "from": "gw", "to": "db"}},
                         {{"id": 3, "from": "{}", "to": "app", "pattern": "event"}}]}}"#,
        if level_skip { "gw" } else { "db" }
    ))
    .unwrap()
}

#[test]
fn cross_node_binding_uses_receiver_address() {
    let b = derive_bindings(&two_node_plan(false)).unwrap();
    assert_eq!(b[&1], Binding::Network { address: "127.0.0.1:7001".into() });
    assert_eq!(b[&3], Binding::Network { address: "127.0.0.1:7000".into() });
}

#[test]
fn level_skip_is_reported_and_blocks_binding() {
    let mut plan = two_node_plan(true);
    let err = derive_bindings(&plan).unwrap_err();
    assert_eq!(err.0.len(), 1);
    assert_eq!(err.0[0].to_string(), "channel 3: level-skip");
    plan.allow_level_skip = true;
    assert!(derive_bindings(&plan).is_ok());
}

#[test]
fn each_rule_names_its_element() {
    let mut plan = two_node_plan(false);
    plan.nodes[1].address = "nowhere".into();
    plan.components[2].node = "C".into();
    plan.channels.push(plantbus::topology::ChannelDecl {
        id: 1,
        from: "app".into(),
        to: "app".into(),
        pattern: Default::default(),
    });
    let got: Vec<String> = validate_plan(&plan).iter().map(|v| v.to_string()).collect();
    assert_eq!(
        got,
        ["node B: invalid-address", "component app: unknown-node", "channel 1: duplicate-channel-id", "channel 1: self-loop"]
    );
}

#[test]
fn parse_errors_carry_position() {
    match parse_plan("{\n  \"nodes\": [,]\n}") {
        Err(PlanError::Parse { line, column, .. }) => assert_eq!((line, column), (2, 13)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_plan(r#"{"nodes": 3}"#), Err(PlanError::Schema(_))));
    let dup = r#"{"nodes": [{"name": "A", "address": "h:1"}],
        "components": [{"name": "x", "level": "data_stream", "node": "A"},
                       {"name": "x", "level": "data_stream", "node": "A"}],
        "channels": []}"#;
    assert!(matches!(parse_plan(dup), Err(PlanError::Schema(_))));
    assert!(parse_host_port("h:1").is_ok());
}

#[test]
fn signal_and_computed_checks() {
    let mut plan = two_node_plan(false);
    let extra: DeploymentPlan = parse_plan(
        r#"{"nodes": [], "components": [], "channels": [],
            "signals": [{"variable": "t", "generator": "sine", "amplitude": 1, "period_s": 0, "component": "gw"},
                        {"variable": "u", "generator": "constant", "c": 1, "component": "db"}],
            "computed": [{"output": "v", "inputs": ["t"], "expr": "t +"}]}"#,
    )
    .unwrap();
    plan.signals = extra.signals;
    plan.computed = extra.computed;
    let rules: Vec<Rule> = validate_plan(&plan).iter().map(|v| v.rule).collect();
    assert_eq!(rules, [Rule::InvalidSignal, Rule::UnknownComponent, Rule::InvalidComputed]);
}

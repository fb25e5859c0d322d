//! Logical component graph and its mapping onto physical nodes.
//!
//! Components and channels are declared without reference to hardware;
//! a [`DeploymentPlan`] then places each component on exactly one node and
//! [`derive_bindings`] picks a transport per channel: in-process when both
//! ends share a node, TCP to the receiving node otherwise.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appmods::{compile, ComputedVariableDef};
use crate::gateway::SignalSpec;
use crate::rtdb::Millis;
use crate::session::{parse_host_port, Binding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    DataStream,
    DataOrganization,
    ApplicationProcessing,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Rpc,
    Event,
    #[default]
    Stream,
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDecl {
    pub name: String,
    /// `host:port` this node listens on.
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentDecl {
    pub name: String,
    pub level: Level,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDecl {
    pub id: u32,
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub nodes: Vec<NodeDecl>,
    pub components: Vec<ComponentDecl>,
    pub channels: Vec<ChannelDecl>,
    /// Permits direct data_stream <-> application_processing channels.
    #[serde(default)]
    pub allow_level_skip: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_window_ms: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend_interval_ms: Option<Millis>,
    /// Acquisition period of the gateways.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ms: Option<Millis>,
    #[serde(default)]
    pub signals: Vec<SignalSpec>,
    #[serde(default)]
    pub computed: Vec<ComputedVariableDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("plan parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("plan schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    EmptyName,
    DuplicateNode,
    InvalidAddress,
    DuplicateComponent,
    UnknownNode,
    DuplicateChannelId,
    UnknownEndpoint,
    SelfLoop,
    /// data_stream and application_processing talking directly.
    LevelSkip,
    /// Two components of the same outer level connected to each other.
    LevelViolation,
    InvalidSignal,
    UnknownComponent,
    InvalidComputed,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    /// `node <name>`, `component <name>`, `channel <id>`, `signal <var>` or
    /// `computed <output>`.
    pub element: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("plan has {} violation(s), first: {}", .0.len(), .0[0])]
pub struct UnvalidatedPlan(pub Vec<Violation>);

/// Parses a plan document and applies defaults.
pub fn parse_plan(text: &str) -> Result<DeploymentPlan, PlanError> {
    let plan: DeploymentPlan = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => PlanError::Schema(e.to_string()),
            _ => PlanError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        }
    })?;
    let mut seen = HashSet::new();
    if let Some(dup) = plan.components.iter().find(|c| !seen.insert(&c.name)) {
        return Err(PlanError::Schema(format!("duplicate component name {:?}", dup.name)));
    }
    Ok(plan)
}

pub fn validate_plan(plan: &DeploymentPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |element: String, rule| out.push(Violation { element, rule });

    let mut nodes = HashSet::new();
    for n in &plan.nodes {
        let el = format!("node {}", n.name);
        if n.name.is_empty() {
            push(el.clone(), Rule::EmptyName);
        }
        if !nodes.insert(n.name.as_str()) {
            push(el.clone(), Rule::DuplicateNode);
        }
        if parse_host_port(&n.address).is_err() {
            push(el, Rule::InvalidAddress);
        }
    }

    let mut levels: HashMap<&str, Level> = HashMap::new();
    for c in &plan.components {
        let el = format!("component {}", c.name);
        if c.name.is_empty() {
            push(el.clone(), Rule::EmptyName);
        }
        if levels.insert(&c.name, c.level).is_some() {
            push(el.clone(), Rule::DuplicateComponent);
        }
        if !nodes.contains(c.node.as_str()) {
            push(el, Rule::UnknownNode);
        }
    }

    let mut ids = HashSet::new();
    for ch in &plan.channels {
        let el = format!("channel {}", ch.id);
        if !ids.insert(ch.id) {
            push(el.clone(), Rule::DuplicateChannelId);
        }
        let (Some(&from), Some(&to)) = (levels.get(ch.from.as_str()), levels.get(ch.to.as_str())) else {
            push(el, Rule::UnknownEndpoint);
            continue;
        };
        if ch.from == ch.to {
            push(el, Rule::SelfLoop);
            continue;
        }
        use Level::*;
        match (from, to) {
            (DataStream, ApplicationProcessing) | (ApplicationProcessing, DataStream) => {
                if !plan.allow_level_skip {
                    push(el, Rule::LevelSkip);
                }
            }
            (DataStream, DataStream) | (ApplicationProcessing, ApplicationProcessing) => {
                push(el, Rule::LevelViolation)
            }
            _ => {}
        }
    }

    for s in &plan.signals {
        let el = format!("signal {}", s.variable);
        if s.validate().is_err() {
            push(el.clone(), Rule::InvalidSignal);
        }
        if let Some(c) = &s.component {
            if levels.get(c.as_str()) != Some(&Level::DataStream) {
                push(el, Rule::UnknownComponent);
            }
        }
    }
    for c in &plan.computed {
        if compile(c).is_err() {
            push(format!("computed {}", c.output), Rule::InvalidComputed);
        }
    }
    out
}

/// One binding per channel; the network address is that of the node
/// hosting the `to` component.
pub fn derive_bindings(plan: &DeploymentPlan) -> Result<BTreeMap<u32, Binding>, UnvalidatedPlan> {
    let violations = validate_plan(plan);
    if !violations.is_empty() {
        return Err(UnvalidatedPlan(violations));
    }
    Ok(plan
        .channels
        .iter()
        .map(|ch| {
            let from = plan.node_of(&ch.from).expect("validated");
            let to = plan.node_of(&ch.to).expect("validated");
            let binding = if from.name == to.name {
                Binding::InProcess
            } else {
                Binding::Network {
                    address: to.address.clone(),
                }
            };
            (ch.id, binding)
        })
        .collect())
}

impl DeploymentPlan {
    pub fn node(&self, name: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn component(&self, name: &str) -> Option<&ComponentDecl> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn node_of(&self, component: &str) -> Option<&NodeDecl> {
        self.component(component).and_then(|c| self.node(&c.node))
    }

    pub fn components_on<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a ComponentDecl> + 'a {
        self.components.iter().filter(move |c| c.node == node)
    }

    pub fn components_at(&self, level: Level) -> impl Iterator<Item = &ComponentDecl> + '_ {
        self.components.iter().filter(move |c| c.level == level)
    }

    /// The same logical plan with every component placed on `node`.
    pub fn reassigned_to(&self, node: &str) -> DeploymentPlan {
        let mut plan = self.clone();
        for c in &mut plan.components {
            c.node = node.to_owned();
        }
        plan
    }

    /// Everything on the first declared node.
    pub fn collapsed(&self) -> DeploymentPlan {
        match self.nodes.first() {
            Some(n) => self.reassigned_to(&n.name.clone()),
            None => self.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = r#"{
        "nodes": [{"name": "a", "address": "127.0.0.1:7000"},
                  {"name": "b", "address": "127.0.0.1:7001"}],
        "components": [
            {"name": "gw", "level": "data_stream", "node": "a"},
            {"name": "hist", "level": "data_organization", "node": "b"},
            {"name": "calc", "level": "application_processing", "node": "b"}
        ],
        "channels": [
            {"id": 1, "from": "gw", "to": "hist"},
            {"id": 2, "from": "calc", "to": "hist", "pattern": "rpc"}
        ]
    }"#;

    #[test]
    fn parse_applies_defaults() {
        let p = parse_plan(PLAN).unwrap();
        assert_eq!(p.channels[0].pattern, Pattern::Stream);
        assert_eq!(p.channels[1].pattern, Pattern::Rpc);
        assert!(!p.allow_level_skip);
        assert!(p.signals.is_empty() && p.computed.is_empty());
        assert_eq!(p.retention_window_ms, None);
        assert!(validate_plan(&p).is_empty());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_plan(r#"{"components": [], "channels": []}"#),
            Err(PlanError::Schema(m)) if m.contains("nodes")
        ));
        assert!(matches!(
            parse_plan("{\n  \"nodes\": [,]\n}"),
            Err(PlanError::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_plan("{"), Err(PlanError::Parse { .. })));
        let dup = PLAN.replace("\"calc\"", "\"gw\"");
        assert!(matches!(parse_plan(&dup), Err(PlanError::Schema(m)) if m.contains("\"gw\"")));
    }

    #[test]
    fn bindings_follow_placement() {
        let p = parse_plan(PLAN).unwrap();
        let b = derive_bindings(&p).unwrap();
        assert_eq!(b[&1], Binding::network("127.0.0.1:7001").unwrap());
        assert_eq!(b[&2], Binding::InProcess);
        let one = p.collapsed();
        assert!(derive_bindings(&one).unwrap().values().all(Binding::is_in_process));
        assert_eq!(one.channels, p.channels);
    }

    #[test]
    fn level_rules() {
        let mut p = parse_plan(PLAN).unwrap();
        p.channels.push(ChannelDecl {
            id: 3,
            from: "calc".into(),
            to: "gw".into(),
            pattern: Pattern::Event,
        });
        let v = validate_plan(&p);
        assert_eq!(
            v,
            vec![Violation {
                element: "channel 3".into(),
                rule: Rule::LevelSkip
            }]
        );
        assert_eq!(v[0].to_string(), "channel 3: level-skip");
        assert!(matches!(derive_bindings(&p), Err(UnvalidatedPlan(_))));
        p.allow_level_skip = true;
        assert!(validate_plan(&p).is_empty());
    }
}

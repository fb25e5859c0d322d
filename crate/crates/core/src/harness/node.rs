//! Boots the components a plan places on one node.
//!
//! Inbound side: every accepted connection gets the node's reserved query
//! channel plus each plan channel whose `to` component lives here; channels
//! into a historian ingest samples (stream or event pattern) or serve the
//! store (rpc pattern). Outbound side: gateways open one data stream per
//! variable on each channel into a historian, and the application component
//! that owns the computed variables talks to its historian over rpc.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::remote::{serve_store, RemoteStore, StoreRouter};
use super::HarnessError;
use crate::appmods::{attach_computed, define_computed, AppError, ComputedHandle};
use crate::gateway::{decode_sample, encode_sample, Generator, SignalCursor, SignalSpec};
use crate::rtdb::{
    Historian, PlantStore, RealTimeDb, RetentionPolicy, Sample, VariableKind, DEFAULT_MAX_SAMPLES,
    DEFAULT_TREND_INTERVAL_MS, DEFAULT_WINDOW_MS,
};
use crate::session::{
    Acceptor, Binding, Channel, Connection, Connector, LocalListener, SessionError, SessionListener,
    StreamSender,
};
use crate::topology::{DeploymentPlan, Level, Pattern};

/// Channel id opened on every accepted connection: `echo` plus the store
/// methods over all historians of the node.
pub const QUERY_CHANNEL: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct NodeOptions {
    pub trend_dir: PathBuf,
    /// Start each trend file empty instead of appending.
    pub truncate_trends: bool,
    /// Listen on the node address even if no plan channel needs it.
    pub always_listen: bool,
    /// XORed into every random walk seed.
    pub seed: u64,
    /// How long to keep retrying connections to peer nodes.
    pub connect_patience: Duration,
    /// Reuse computed outputs the historian already has registered.
    pub attach_existing: bool,
}

impl Default for NodeOptions {
    fn default() -> Self {
        Self {
            trend_dir: super::trend_dir_from_env(),
            truncate_trends: false,
            always_listen: false,
            seed: 0,
            connect_patience: Duration::ZERO,
            attach_existing: false,
        }
    }
}

/// The signals a gateway component produces: those naming it, plus the
/// unassigned ones if it is the first gateway of the plan.
pub fn signals_of(plan: &DeploymentPlan, gateway: &str, seed: u64) -> Vec<SignalSpec> {
    let first = plan.components_at(Level::DataStream).next().map(|c| c.name.as_str());
    plan.signals
        .iter()
        .filter(|s| match &s.component {
            Some(c) => c == gateway,
            None => first == Some(gateway),
        })
        .cloned()
        .map(|mut s| {
            if let Generator::RandomWalk { seed: ref mut sd, .. } = s.generator {
                *sd ^= seed;
            }
            s
        })
        .collect()
}

/// The application component that evaluates the plan's computed
/// variables, and the rpc channel it reaches its historian through.
pub fn computed_owner(plan: &DeploymentPlan) -> Option<(&str, u32)> {
    plan.components_at(Level::ApplicationProcessing).find_map(|c| {
        plan.channels
            .iter()
            .find(|ch| {
                ch.from == c.name
                    && ch.pattern == Pattern::Rpc
                    && plan.component(&ch.to).map(|t| t.level) == Some(Level::DataOrganization)
            })
            .map(|ch| (c.name.as_str(), ch.id))
    })
}

fn ingest_channel(plan: &DeploymentPlan, ch: &crate::topology::ChannelDecl) -> bool {
    matches!(ch.pattern, Pattern::Stream | Pattern::Event)
        && plan.component(&ch.from).map(|c| c.level) == Some(Level::DataStream)
        && plan.component(&ch.to).map(|c| c.level) == Some(Level::DataOrganization)
}

/// Counts ingest attempts so waiters can block until the next one.
#[derive(Default)]
struct IngestLog {
    errors: AtomicU64,
    generation: Mutex<u64>,
    cv: Condvar,
}

impl IngestLog {
    fn bump(&self) {
        *self.generation.lock() += 1;
        self.cv.notify_all();
    }
}

struct Inbound {
    plan: Arc<DeploymentPlan>,
    node: String,
    historians: BTreeMap<String, Arc<Historian>>,
    router: Arc<StoreRouter>,
    accepted: Mutex<Vec<Connection>>,
    ingest: Arc<IngestLog>,
}

impl Inbound {
    fn accept(&self, conn: Connection) {
        self.accepted.lock().push(conn.clone());
        if let Ok(q) = conn.open_channel(QUERY_CHANNEL) {
            let _ = q.serve("echo", |p| Ok(p.to_vec()));
            let _ = serve_store(&q, self.router.clone());
        }
        for ch in &self.plan.channels {
            let here = self
                .plan
                .component(&ch.to)
                .is_some_and(|c| c.node == self.node);
            if !here {
                continue;
            }
            let Ok(channel) = conn.open_channel(ch.id) else {
                continue;
            };
            let Some(h) = self.historians.get(&ch.to) else {
                continue;
            };
            match ch.pattern {
                Pattern::Stream => spawn_stream_ingest(channel, h.clone(), self.ingest.clone()),
                Pattern::Event => {
                    let (h, log) = (h.clone(), self.ingest.clone());
                    let _ = channel.subscribe(move |p| ingest(&h, p, &log));
                }
                Pattern::Rpc => {
                    let _ = serve_store(&channel, h.clone());
                }
                Pattern::File => {}
            }
        }
    }
}

fn ingest(h: &Historian, payload: &[u8], log: &IngestLog) {
    let ok = decode_sample(payload)
        .ok()
        .is_some_and(|s| h.insert(s).is_ok());
    if !ok {
        log.errors.fetch_add(1, Ordering::Relaxed);
    }
    log.bump();
}

fn spawn_stream_ingest(channel: Channel, h: Arc<Historian>, log: Arc<IngestLog>) {
    thread::spawn(move || {
        while let Ok(rx) = channel.accept_stream(None) {
            let (h, log) = (h.clone(), log.clone());
            thread::spawn(move || {
                for item in rx {
                    match item {
                        Ok(p) => ingest(&h, &p, &log),
                        Err(_) => break,
                    }
                }
            });
        }
    });
}

enum Sink {
    Stream(StreamSender),
    Event(Channel),
}

impl Sink {
    fn emit(&mut self, s: &Sample) -> Result<(), SessionError> {
        match self {
            Sink::Stream(tx) => tx.send(&encode_sample(s)),
            Sink::Event(ch) => ch.publish(&encode_sample(s)),
        }
    }
}

struct Delivery {
    /// Historian component receiving the samples.
    target: String,
    sink: Sink,
}

/// A booted gateway: one cursor per signal and its deliveries.
pub struct GatewayRuntime {
    pub component: String,
    cursors: Vec<SignalCursor>,
    // Parallel to `cursors`.
    deliveries: Vec<Vec<Delivery>>,
}

impl GatewayRuntime {
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.cursors.iter().map(|c| c.spec().variable.as_str())
    }

    /// Emits the samples stamped `timestamp`, with signal values taken at
    /// `signal_time`. Calls `on_emit` after each delivery with the target
    /// historian and the sample.
    pub fn emit_tick(
        &mut self,
        timestamp: crate::rtdb::Millis,
        signal_time: crate::rtdb::Millis,
        mut on_emit: impl FnMut(&str, &Sample, Instant),
    ) -> Result<u64, HarnessError> {
        let mut n = 0;
        for (cursor, deliveries) in self.cursors.iter_mut().zip(&mut self.deliveries) {
            let sample = Sample::new(cursor.spec().variable.clone(), timestamp, cursor.value_at(signal_time)?);
            for d in deliveries.iter_mut() {
                let at = Instant::now();
                d.sink.emit(&sample)?;
                on_emit(&d.target, &sample, at);
                n += 1;
            }
        }
        Ok(n)
    }

    /// Closes every stream; pending samples are still delivered.
    pub fn close(&mut self) {
        for d in self.deliveries.iter_mut().flatten() {
            if let Sink::Stream(tx) = &mut d.sink {
                let _ = tx.close();
            }
        }
    }
}

/// The application component evaluating computed variables.
pub struct AppRuntime {
    pub component: String,
    pub target: String,
    pub store: RemoteStore,
    pub handles: Vec<ComputedHandle>,
}

pub struct NodeRuntime {
    name: String,
    plan: Arc<DeploymentPlan>,
    inbound: Arc<Inbound>,
    local: LocalListener,
    connector: Connector,
    listen_addr: Option<SocketAddr>,
    acceptors: Vec<Acceptor>,
}

impl NodeRuntime {
    /// Creates this node's historians and starts accepting connections.
    pub fn boot(plan: Arc<DeploymentPlan>, node: &str, opts: &NodeOptions) -> Result<Self, HarnessError> {
        let decl = plan
            .node(node)
            .ok_or_else(|| HarnessError::BootFailure {
                component: node.to_owned(),
                reason: "no such node in the plan".into(),
            })?
            .clone();
        let policy = RetentionPolicy::new(
            plan.retention_window_ms.unwrap_or(DEFAULT_WINDOW_MS),
            DEFAULT_MAX_SAMPLES,
        )
        .map_err(|e| boot_err(node, e))?;
        let interval = plan.trend_interval_ms.unwrap_or(DEFAULT_TREND_INTERVAL_MS);

        let mut historians = BTreeMap::new();
        for c in plan.components_on(node).filter(|c| c.level == Level::DataOrganization) {
            let fail = |e: String| boot_err(&c.name, e);
            std::fs::create_dir_all(&opts.trend_dir).map_err(|e| fail(e.to_string()))?;
            let db = RealTimeDb::new(policy)
                .with_trend_interval(interval)
                .map_err(|e| fail(e.to_string()))?;
            let path = opts.trend_dir.join(format!("{}.trends", c.name));
            let h = if opts.truncate_trends {
                Historian::create(db, path)
            } else {
                Historian::open(db, path)
            }
            .map_err(|e| fail(e.to_string()))?;
            for ch in plan.channels.iter().filter(|ch| ch.to == c.name && ingest_channel(&plan, ch)) {
                for s in signals_of(&plan, &ch.from, opts.seed) {
                    match h.register(&s.variable, VariableKind::Raw) {
                        Ok(_) | Err(crate::rtdb::StoreError::DuplicateName(_)) => {}
                        Err(e) => return Err(fail(e.to_string())),
                    }
                }
            }
            historians.insert(c.name.clone(), Arc::new(h));
        }

        let inbound = Arc::new(Inbound {
            plan: plan.clone(),
            node: node.to_owned(),
            router: Arc::new(StoreRouter::new(historians.values().cloned().collect())),
            historians,
            accepted: Mutex::new(Vec::new()),
            ingest: Arc::default(),
        });

        let local = LocalListener::new();
        let mut acceptors = Vec::new();
        let on_local = inbound.clone();
        acceptors.push(local.spawn_acceptor(move |c| on_local.accept(c)));

        let remote_peers = plan.channels.iter().any(|ch| {
            let to = plan.component(&ch.to).map(|c| c.node.as_str());
            let from = plan.component(&ch.from).map(|c| c.node.as_str());
            to == Some(node) && from != Some(node)
        });
        let mut listen_addr = None;
        if opts.always_listen || remote_peers {
            let listener = SessionListener::bind(&decl.address).map_err(|e| {
                let who = plan
                    .components_on(node)
                    .next()
                    .map(|c| c.name.clone())
                    .unwrap_or_else(|| node.to_owned());
                boot_err(&who, e)
            })?;
            listen_addr = Some(listener.local_addr());
            let on_tcp = inbound.clone();
            acceptors.push(listener.spawn_acceptor(move |c| on_tcp.accept(c)));
        }

        Ok(Self {
            name: node.to_owned(),
            plan,
            connector: Connector::new(local.clone()),
            inbound,
            local,
            listen_addr,
            acceptors,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn listen_addr(&self) -> Option<SocketAddr> {
        self.listen_addr
    }

    pub fn historians(&self) -> &BTreeMap<String, Arc<Historian>> {
        &self.inbound.historians
    }

    pub fn local_listener(&self) -> &LocalListener {
        &self.local
    }

    /// Samples that arrived but could not be decoded or stored.
    pub fn ingest_errors(&self) -> u64 {
        self.inbound.ingest.errors.load(Ordering::Relaxed)
    }

    /// Number of samples this node has tried to ingest so far.
    pub fn ingest_generation(&self) -> u64 {
        *self.inbound.ingest.generation.lock()
    }

    /// Blocks until the ingest generation moves past `seen` or `deadline`
    /// passes; returns the generation observed last.
    pub fn wait_ingest(&self, seen: u64, deadline: Instant) -> u64 {
        let log = &self.inbound.ingest;
        let mut g = log.generation.lock();
        while *g == seen {
            if log.cv.wait_until(&mut g, deadline).timed_out() {
                break;
            }
        }
        *g
    }

    fn open(&self, bindings: &BTreeMap<u32, Binding>, id: u32, patience: Duration) -> Result<Channel, SessionError> {
        let binding = &bindings[&id];
        let deadline = Instant::now() + patience;
        loop {
            match self.connector.open_channel(binding, id) {
                Err(SessionError::ConnectFailure { .. }) if Instant::now() < deadline => {
                    thread::sleep(Duration::from_millis(200));
                }
                other => return other,
            }
        }
    }

    /// Opens the outbound side of this node's gateways.
    pub fn boot_gateways(
        &self,
        bindings: &BTreeMap<u32, Binding>,
        opts: &NodeOptions,
    ) -> Result<Vec<GatewayRuntime>, HarnessError> {
        let plan = &self.plan;
        let mut out = Vec::new();
        for g in plan.components_on(&self.name).filter(|c| c.level == Level::DataStream) {
            let specs = signals_of(plan, &g.name, opts.seed);
            let fail = |e: String| boot_err(&g.name, e);
            let channels: Vec<_> = plan
                .channels
                .iter()
                .filter(|ch| ch.from == g.name && ingest_channel(plan, ch))
                .collect();
            if !specs.is_empty() && channels.is_empty() {
                return Err(fail("has signals but no stream or event channel into a historian".into()));
            }
            let mut deliveries: Vec<Vec<Delivery>> = specs.iter().map(|_| Vec::new()).collect();
            for ch in channels {
                let channel = self
                    .open(bindings, ch.id, opts.connect_patience)
                    .map_err(|e| fail(e.to_string()))?;
                for d in deliveries.iter_mut() {
                    let sink = match ch.pattern {
                        Pattern::Stream => Sink::Stream(channel.open_stream().map_err(|e| fail(e.to_string()))?),
                        _ => Sink::Event(channel.clone()),
                    };
                    d.push(Delivery {
                        target: ch.to.clone(),
                        sink,
                    });
                }
            }
            let cursors = specs
                .into_iter()
                .map(SignalCursor::new)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(e.to_string()))?;
            out.push(GatewayRuntime {
                component: g.name.clone(),
                cursors,
                deliveries,
            });
        }
        Ok(out)
    }

    /// Connects the computed-variable owner, if it lives here, and defines
    /// the plan's computed variables through it.
    pub fn boot_app(
        &self,
        bindings: &BTreeMap<u32, Binding>,
        opts: &NodeOptions,
    ) -> Result<Option<AppRuntime>, HarnessError> {
        let plan = &self.plan;
        if plan.computed.is_empty() {
            return Ok(None);
        }
        let Some((owner, channel_id)) = computed_owner(plan) else {
            let who = plan
                .components_at(Level::ApplicationProcessing)
                .next()
                .map(|c| c.name.clone())
                .unwrap_or_else(|| "computed".into());
            return Err(boot_err(
                &who,
                "computed variables need an application component with an rpc channel into a historian",
            ));
        };
        if plan.component(owner).map(|c| c.node.as_str()) != Some(self.name.as_str()) {
            return Ok(None);
        }
        let fail = |e: String| boot_err(owner, e);
        let channel = self
            .open(bindings, channel_id, opts.connect_patience)
            .map_err(|e| fail(e.to_string()))?;
        let store = RemoteStore::new(channel);
        let target = plan
            .channels
            .iter()
            .find(|c| c.id == channel_id)
            .map(|c| c.to.clone())
            .unwrap_or_default();
        let mut seen = HashSet::new();
        let mut handles = Vec::new();
        for def in &plan.computed {
            if !seen.insert(def.output.as_str()) {
                return Err(fail(format!("computed output {:?} defined twice", def.output)));
            }
            let handle = match define_computed(def, &store) {
                Err(AppError::DuplicateName(_)) if opts.attach_existing => attach_computed(def, &store),
                other => other,
            }
            .map_err(|e| fail(e.to_string()))?;
            handles.push(handle);
        }
        Ok(Some(AppRuntime {
            component: owner.to_owned(),
            target,
            store,
            handles,
        }))
    }

    pub fn shutdown(&mut self) {
        self.connector.close_all();
        for c in self.inbound.accepted.lock().drain(..) {
            c.close();
        }
        for a in self.acceptors.drain(..) {
            a.stop();
        }
    }
}

impl Drop for NodeRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub(crate) fn boot_err(component: &str, reason: impl ToString) -> HarnessError {
    HarnessError::BootFailure {
        component: component.to_owned(),
        reason: reason.to_string(),
    }
}

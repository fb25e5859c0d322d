//! [`PlantStore`] over an RPC channel.
//!
//! Arguments and results travel as JSON; a result is the serialized
//! `Result<T, StoreError>`, so store errors arrive unchanged on the caller
//! side and only transport failures become [`StoreError::Transport`].

use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::rtdb::{Historian, Millis, PlantStore, Sample, StoreError, TrendPoint, VariableId, VariableKind};
use crate::session::{Channel, Registration, SessionError};

#[derive(Serialize, Deserialize)]
struct RegisterArgs {
    name: String,
    kind: VariableKind,
}

#[derive(Serialize, Deserialize)]
struct NameArgs {
    name: String,
}

#[derive(Serialize, Deserialize)]
struct RangeArgs {
    name: String,
    t0: Millis,
    t1: Millis,
}

#[derive(Serialize, Deserialize)]
struct RollupArgs {
    name: String,
    t0: Millis,
    t1: Millis,
    interval_len_ms: Millis,
}

#[derive(Debug, Clone)]
pub struct RemoteStore {
    channel: Channel,
    timeout: Duration,
}

impl RemoteStore {
    pub fn new(channel: Channel) -> Self {
        Self {
            channel,
            timeout: Duration::from_secs(10),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    fn call<A: Serialize, T: DeserializeOwned>(&self, method: &str, args: &A) -> Result<T, StoreError> {
        let body = serde_json::to_vec(args).map_err(|e| StoreError::Transport(e.to_string()))?;
        let reply = self
            .channel
            .call(method, &body, self.timeout)
            .map_err(|e| StoreError::Transport(e.to_string()))?;
        serde_json::from_slice::<Result<T, StoreError>>(&reply)
            .map_err(|e| StoreError::Transport(format!("bad reply to {method}: {e}")))?
    }
}

impl PlantStore for RemoteStore {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        self.call(
            "register",
            &RegisterArgs {
                name: name.into(),
                kind,
            },
        )
    }

    fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        self.call("insert", &sample)
    }

    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        self.call("latest", &NameArgs { name: name.into() })
    }

    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        self.call(
            "range",
            &RangeArgs {
                name: name.into(),
                t0,
                t1,
            },
        )
    }

    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        self.call(
            "rollup",
            &RollupArgs {
                name: name.into(),
                t0,
                t1,
                interval_len_ms,
            },
        )
    }

    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        self.call(
            "trend",
            &RangeArgs {
                name: name.into(),
                t0,
                t1,
            },
        )
    }
}

fn handler<S, A, T, F>(store: Arc<S>, f: F) -> impl FnMut(&[u8]) -> Result<Vec<u8>, String> + Send + 'static
where
    S: Send + Sync + 'static,
    A: DeserializeOwned,
    T: Serialize,
    F: Fn(&S, A) -> Result<T, StoreError> + Send + 'static,
{
    move |payload| {
        let args: A = serde_json::from_slice(payload).map_err(|e| format!("bad arguments: {e}"))?;
        serde_json::to_vec(&f(&store, args)).map_err(|e| e.to_string())
    }
}

/// Serves every [`PlantStore`] method of `store` on `channel`.
pub fn serve_store<S>(channel: &Channel, store: Arc<S>) -> Result<Vec<Registration>, SessionError>
where
    S: PlantStore + Send + Sync + 'static,
{
    Ok(vec![
        channel.serve(
            "register",
            handler(store.clone(), |s: &S, a: RegisterArgs| s.register(&a.name, a.kind)),
        )?,
        channel.serve("insert", handler(store.clone(), |s: &S, a: Sample| s.insert(a)))?,
        channel.serve(
            "latest",
            handler(store.clone(), |s: &S, a: NameArgs| s.latest(&a.name)),
        )?,
        channel.serve(
            "range",
            handler(store.clone(), |s: &S, a: RangeArgs| s.range(&a.name, a.t0, a.t1)),
        )?,
        channel.serve(
            "rollup",
            handler(store.clone(), |s: &S, a: RollupArgs| {
                s.rollup(&a.name, a.t0, a.t1, a.interval_len_ms)
            }),
        )?,
        channel.serve(
            "trend",
            handler(store, |s: &S, a: RangeArgs| s.trend(&a.name, a.t0, a.t1)),
        )?,
    ])
}

/// The historians of one node seen as a single store: each call goes to
/// the first historian that knows the variable; registrations go to the
/// first historian.
#[derive(Debug, Clone, Default)]
pub struct StoreRouter {
    historians: Vec<Arc<Historian>>,
}

impl StoreRouter {
    pub fn new(historians: Vec<Arc<Historian>>) -> Self {
        Self { historians }
    }

    fn owner(&self, name: &str) -> Result<&Historian, StoreError> {
        self.historians
            .iter()
            .find(|h| h.db().variable(name).is_ok())
            .map(|h| h.as_ref())
            .ok_or_else(|| StoreError::UnknownVariable(name.to_owned()))
    }
}

impl PlantStore for StoreRouter {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        match self.historians.first() {
            Some(h) => h.register(name, kind),
            None => Err(StoreError::Transport("no historian on this node".into())),
        }
    }
    fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        self.owner(&sample.variable)?.insert(sample)
    }
    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        self.owner(name)?.latest(name)
    }
    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        self.owner(name)?.range(name, t0, t1)
    }
    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        self.owner(name)?.rollup(name, t0, t1, interval_len_ms)
    }
    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        self.owner(name)?.trend(name, t0, t1)
    }
}

//! Data organization level: the real-time historian.
//!
//! Recent samples live in memory for a bounded retention window
//! ([`RealTimeDb`]); older history survives only as fixed-interval trend
//! aggregates appended to a text file ([`trend`]). A [`Historian`] bundles
//! both behind the [`PlantStore`] trait, which is also what remote clients
//! and the application modules program against.

mod historian;
mod store;
pub mod trend;

pub use historian::Historian;
pub use store::RealTimeDb;
pub use trend::{read_trends, TrendWriter};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch.
pub type Millis = u64;

pub const DEFAULT_WINDOW_MS: Millis = 600_000;
pub const DEFAULT_MAX_SAMPLES: usize = 1_000_000;
pub const DEFAULT_TREND_INTERVAL_MS: Millis = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Raw,
    Computed,
}

/// A registered variable. Queries only ever look at the name; the kind is
/// bookkeeping for operators and never changes query results.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariableId {
    name: String,
    kind: VariableKind,
}

impl VariableId {
    pub fn new(name: impl Into<String>, kind: VariableKind) -> Result<Self, StoreError> {
        let name = name.into();
        validate_name(&name)?;
        Ok(Self { name, kind })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> VariableKind {
        self.kind
    }
}

/// Names end up in CSV records and on command lines.
pub fn validate_name(name: &str) -> Result<(), StoreError> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(StoreError::InvalidName(name.to_owned()));
    }
    Ok(())
}

/// Sample quality, ordered from best to worst.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    #[default]
    Good,
    Uncertain,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub variable: String,
    pub timestamp: Millis,
    pub value: f64,
    pub quality: Quality,
}

impl Sample {
    pub fn new(variable: impl Into<String>, timestamp: Millis, value: f64) -> Self {
        Self {
            variable: variable.into(),
            timestamp,
            value,
            quality: Quality::Good,
        }
    }

    pub fn with_quality(mut self, quality: Quality) -> Self {
        self.quality = quality;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    window_ms: Millis,
    max_samples_per_variable: usize,
}

impl RetentionPolicy {
    pub fn new(window_ms: Millis, max_samples_per_variable: usize) -> Result<Self, StoreError> {
        if window_ms == 0 || max_samples_per_variable == 0 {
            return Err(StoreError::InvalidPolicy);
        }
        Ok(Self {
            window_ms,
            max_samples_per_variable,
        })
    }

    pub fn window_ms(&self) -> Millis {
        self.window_ms
    }

    pub fn max_samples_per_variable(&self) -> usize {
        self.max_samples_per_variable
    }
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            window_ms: DEFAULT_WINDOW_MS,
            max_samples_per_variable: DEFAULT_MAX_SAMPLES,
        }
    }
}

/// Min/max/mean/count of one variable over one epoch-aligned interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub variable: String,
    pub interval_start_ms: Millis,
    pub interval_len_ms: Millis,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum StoreError {
    #[error("variable {0:?} is already registered")]
    DuplicateName(String),
    #[error("invalid variable name {0:?}: must be nonempty, without whitespace or commas")]
    InvalidName(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("non-finite value for variable {0:?}")]
    NonFiniteValue(String),
    #[error("invalid range: t0={t0} > t1={t1}")]
    InvalidRange { t0: Millis, t1: Millis },
    #[error("interval length must be positive")]
    InvalidInterval,
    #[error("retention window and sample cap must be positive")]
    InvalidPolicy,
    #[error("trend point ({variable}, {interval_start_ms}) already persisted")]
    DuplicateTrendKey {
        variable: String,
        interval_start_ms: Millis,
    },
    #[error("trend sink write failed: {0}")]
    SinkWriteFailure(String),
    #[error("malformed trend record at line {line}: {reason}")]
    MalformedTrendRecord { line: usize, reason: String },
    #[error("remote store unavailable: {0}")]
    Transport(String),
}

/// The query and insert surface of a historian, local or remote.
pub trait PlantStore {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError>;
    fn insert(&self, sample: Sample) -> Result<bool, StoreError>;
    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError>;
    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError>;
    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError>;
    /// Persisted trends merged with the in-memory rollup, in-memory winning.
    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError>;
}

impl<S: PlantStore + ?Sized> PlantStore for &S {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        (**self).register(name, kind)
    }
    fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        (**self).insert(sample)
    }
    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        (**self).latest(name)
    }
    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        (**self).range(name, t0, t1)
    }
    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        (**self).rollup(name, t0, t1, interval_len_ms)
    }
    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        (**self).trend(name, t0, t1)
    }
}

impl<S: PlantStore + ?Sized> PlantStore for std::sync::Arc<S> {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        (**self).register(name, kind)
    }
    fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        (**self).insert(sample)
    }
    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        (**self).latest(name)
    }
    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        (**self).range(name, t0, t1)
    }
    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        (**self).rollup(name, t0, t1, interval_len_ms)
    }
    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        (**self).trend(name, t0, t1)
    }
}

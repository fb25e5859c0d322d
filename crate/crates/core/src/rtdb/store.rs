use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufRead;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::trend::read_trends;
use super::{
    validate_name, Millis, PlantStore, Quality, RetentionPolicy, Sample, StoreError, TrendPoint,
    VariableId, VariableKind, DEFAULT_TREND_INTERVAL_MS,
};

#[derive(Debug, Clone, Copy)]
struct Entry {
    timestamp: Millis,
    value: f64,
    quality: Quality,
}

#[derive(Debug)]
struct Series {
    id: VariableId,
    // Sorted by timestamp, arrival order among equal timestamps.
    entries: VecDeque<Entry>,
    // Newest timestamp ever dropped by retention.
    evicted_through: Option<Millis>,
}

impl Series {
    fn sample(&self, e: &Entry) -> Sample {
        Sample {
            variable: self.id.name().to_owned(),
            timestamp: e.timestamp,
            value: e.value,
            quality: e.quality,
        }
    }

    fn window(&self, from: Millis, to_exclusive: Option<Millis>) -> std::ops::Range<usize> {
        let lo = self.entries.partition_point(|e| e.timestamp < from);
        let hi = match to_exclusive {
            Some(to) => self.entries.partition_point(|e| e.timestamp < to),
            None => self.entries.len(),
        };
        lo..hi.max(lo)
    }
}

/// In-memory real-time store with one timestamp-ordered buffer per variable.
///
/// All time comes from the caller; the store never reads a clock.
#[derive(Debug)]
pub struct RealTimeDb {
    policy: RetentionPolicy,
    trend_interval_ms: Millis,
    series: RwLock<HashMap<String, Arc<Mutex<Series>>>>,
    accepted: AtomicU64,
}

impl Default for RealTimeDb {
    fn default() -> Self {
        Self::new(RetentionPolicy::default())
    }
}

impl RealTimeDb {
    pub fn new(policy: RetentionPolicy) -> Self {
        Self {
            policy,
            trend_interval_ms: DEFAULT_TREND_INTERVAL_MS,
            series: RwLock::new(HashMap::new()),
            accepted: AtomicU64::new(0),
        }
    }

    /// Sets the interval length used by [`RealTimeDb::query_trend`].
    pub fn with_trend_interval(mut self, interval_len_ms: Millis) -> Result<Self, StoreError> {
        if interval_len_ms == 0 {
            return Err(StoreError::InvalidInterval);
        }
        self.trend_interval_ms = interval_len_ms;
        Ok(self)
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn trend_interval_ms(&self) -> Millis {
        self.trend_interval_ms
    }

    /// Total number of samples accepted by [`RealTimeDb::insert`] so far.
    pub fn accepted_total(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    pub fn variable_count(&self) -> usize {
        self.series.read().len()
    }

    /// Registered variables sorted by name.
    pub fn variables(&self) -> Vec<VariableId> {
        let mut ids: Vec<_> = self
            .series
            .read()
            .values()
            .map(|s| s.lock().id.clone())
            .collect();
        ids.sort_by(|a, b| a.name().cmp(b.name()));
        ids
    }

    pub fn variable(&self, name: &str) -> Result<VariableId, StoreError> {
        Ok(self.get(name)?.lock().id.clone())
    }

    /// Number of samples currently retained for `name`.
    pub fn len_of(&self, name: &str) -> Result<usize, StoreError> {
        Ok(self.get(name)?.lock().entries.len())
    }

    fn get(&self, name: &str) -> Result<Arc<Mutex<Series>>, StoreError> {
        self.series
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| StoreError::UnknownVariable(name.to_owned()))
    }

    pub fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        validate_name(name)?;
        let mut map = self.series.write();
        if map.contains_key(name) {
            return Err(StoreError::DuplicateName(name.to_owned()));
        }
        let id = VariableId::new(name, kind)?;
        map.insert(
            name.to_owned(),
            Arc::new(Mutex::new(Series {
                id: id.clone(),
                entries: VecDeque::new(),
                evicted_through: None,
            })),
        );
        Ok(id)
    }

    /// Stores `sample` in timestamp order. Returns `false` (and stores
    /// nothing) when the sample is older than the retention horizon measured
    /// from the newest sample of that variable.
    pub fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        let series = self.get(&sample.variable)?;
        if !sample.value.is_finite() {
            return Err(StoreError::NonFiniteValue(sample.variable));
        }
        let mut series = series.lock();
        if let Some(newest) = series.entries.back() {
            if sample.timestamp < newest.timestamp.saturating_sub(self.policy.window_ms()) {
                return Ok(false);
            }
        }
        let entry = Entry {
            timestamp: sample.timestamp,
            value: sample.value,
            quality: sample.quality,
        };
        let at = series
            .entries
            .partition_point(|e| e.timestamp <= entry.timestamp);
        series.entries.insert(at, entry);
        self.accepted.fetch_add(1, Ordering::Relaxed);
        Ok(true)
    }

    pub fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        let series = self.get(name)?;
        let series = series.lock();
        // With ties the last arrival wins.
        Ok(series.entries.back().map(|e| series.sample(e)))
    }

    /// Samples with `t0 <= timestamp <= t1`, ascending.
    pub fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        let series = self.get(name)?;
        if t0 > t1 {
            return Err(StoreError::InvalidRange { t0, t1 });
        }
        let series = series.lock();
        let span = series.window(t0, t1.checked_add(1));
        Ok(series.entries.range(span).map(|e| series.sample(e)).collect())
    }

    /// Drops samples older than `now - window` and trims each buffer to the
    /// sample cap, oldest first. Returns the number of samples removed.
    pub fn enforce_retention(&self, now: Millis) -> usize {
        let horizon = now.saturating_sub(self.policy.window_ms());
        let cap = self.policy.max_samples_per_variable();
        let all: Vec<_> = self.series.read().values().cloned().collect();
        let mut evicted = 0;
        for series in all {
            let mut series = series.lock();
            let stale = series.entries.partition_point(|e| e.timestamp < horizon);
            let over = series.entries.len().saturating_sub(stale).saturating_sub(cap);
            let n = stale + over;
            if n > 0 {
                series.evicted_through = Some(series.entries[n - 1].timestamp);
            }
            series.entries.drain(..n);
            evicted += n;
        }
        evicted
    }

    /// One [`TrendPoint`] per epoch-aligned interval overlapping `[t0, t1)`
    /// that holds at least one sample. Each point aggregates its whole
    /// interval, not just the part inside `[t0, t1)`.
    pub fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        let series = self.get(name)?;
        if t0 > t1 {
            return Err(StoreError::InvalidRange { t0, t1 });
        }
        if interval_len_ms == 0 {
            return Err(StoreError::InvalidInterval);
        }
        if t0 == t1 {
            return Ok(Vec::new());
        }
        let len = interval_len_ms;
        let first = t0 - t0 % len;
        let last = (t1 - 1) - (t1 - 1) % len;
        let end = last.checked_add(len);

        let series = series.lock();
        let span = series.window(first, end);
        let mut out: Vec<TrendPoint> = Vec::new();
        let mut acc: Option<(Millis, Aggregate)> = None;
        for e in series.entries.range(span) {
            let start = e.timestamp - e.timestamp % len;
            match &mut acc {
                Some((s, agg)) if *s == start => agg.push(e.value),
                _ => {
                    if let Some((s, agg)) = acc.take() {
                        out.push(agg.finish(series.id.name(), s, len));
                    }
                    let mut agg = Aggregate::default();
                    agg.push(e.value);
                    acc = Some((start, agg));
                }
            }
        }
        if let Some((s, agg)) = acc {
            out.push(agg.finish(series.id.name(), s, len));
        }
        Ok(out)
    }

    /// Persisted trend records from `source` merged with the in-memory
    /// rollup over `[t0, t1)`. On a shared interval the in-memory point wins
    /// unless retention already dropped some of that interval's samples.
    pub fn query_trend<R: BufRead>(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        source: R,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        let live = self.rollup(name, t0, t1, self.trend_interval_ms)?;
        let mut merged: BTreeMap<Millis, TrendPoint> = BTreeMap::new();
        for p in read_trends(source)? {
            let overlaps = p.interval_start_ms < t1
                && p.interval_start_ms.saturating_add(p.interval_len_ms) > t0;
            if p.variable == name && overlaps {
                merged.insert(p.interval_start_ms, p);
            }
        }
        let evicted_through = self.get(name)?.lock().evicted_through;
        for p in live {
            let partial = evicted_through.is_some_and(|e| e >= p.interval_start_ms);
            if !(partial && merged.contains_key(&p.interval_start_ms)) {
                merged.insert(p.interval_start_ms, p);
            }
        }
        Ok(merged.into_values().collect())
    }
}

impl PlantStore for RealTimeDb {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        RealTimeDb::register(self, name, kind)
    }
    fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        RealTimeDb::insert(self, sample)
    }
    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        RealTimeDb::latest(self, name)
    }
    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        RealTimeDb::range(self, name, t0, t1)
    }
    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        RealTimeDb::rollup(self, name, t0, t1, interval_len_ms)
    }
    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        self.query_trend(name, t0, t1, std::io::empty())
    }
}

/// Running min/max and a Neumaier-compensated sum.
#[derive(Debug, Default)]
struct Aggregate {
    count: u64,
    min: f64,
    max: f64,
    sum: f64,
    compensation: f64,
}

impl Aggregate {
    fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += 1;
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn finish(self, variable: &str, start: Millis, len: Millis) -> TrendPoint {
        let mean = ((self.sum + self.compensation) / self.count as f64).clamp(self.min, self.max);
        TrendPoint {
            variable: variable.to_owned(),
            interval_start_ms: start,
            interval_len_ms: len,
            min: self.min,
            max: self.max,
            mean,
            count: self.count,
        }
    }
}

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;

use super::trend::TrendWriter;
use super::{Millis, PlantStore, RealTimeDb, Sample, StoreError, TrendPoint, VariableId, VariableKind};

/// A [`RealTimeDb`] paired with its trend file on disk.
#[derive(Debug)]
pub struct Historian {
    db: RealTimeDb,
    trend_path: PathBuf,
    writer: Mutex<Persistence>,
}

#[derive(Debug)]
struct Persistence {
    writer: TrendWriter<File>,
    // Interval-aligned boundary below which a variable's trends are on disk.
    persisted_until: HashMap<String, Millis>,
}

impl Historian {
    /// Opens (or creates) the trend file at `trend_path` for appending.
    pub fn open(db: RealTimeDb, trend_path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let trend_path = trend_path.into();
        let writer = TrendWriter::open(&trend_path)?;
        Ok(Self {
            db,
            trend_path,
            writer: Mutex::new(Persistence {
                writer,
                persisted_until: HashMap::new(),
            }),
        })
    }

    /// Like [`Historian::open`] but truncates any existing trend file.
    pub fn create(db: RealTimeDb, trend_path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let trend_path = trend_path.into();
        File::create(&trend_path).map_err(|e| StoreError::SinkWriteFailure(e.to_string()))?;
        Self::open(db, trend_path)
    }

    pub fn db(&self) -> &RealTimeDb {
        &self.db
    }

    pub fn trend_path(&self) -> &Path {
        &self.trend_path
    }

    pub fn persist(&self, points: &[TrendPoint]) -> Result<usize, StoreError> {
        self.writer.lock().writer.persist(points)
    }

    /// Persists every interval that ended at or before `now` and has not
    /// been written yet. Records go out sorted by (variable, interval start).
    pub fn persist_closed(&self, now: Millis) -> Result<usize, StoreError> {
        let len = self.db.trend_interval_ms();
        let boundary = now - now % len;
        let mut state = self.writer.lock();
        let mut batch = Vec::new();
        for id in self.db.variables() {
            let from = state.persisted_until.get(id.name()).copied().unwrap_or(0);
            if from >= boundary {
                continue;
            }
            for p in self.db.rollup(id.name(), from, boundary, len)? {
                if !state.writer.contains(&p.variable, p.interval_start_ms) {
                    batch.push(p);
                }
            }
            state.persisted_until.insert(id.name().to_owned(), boundary);
        }
        state.writer.persist(&batch)
    }

    pub fn query_trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        match File::open(&self.trend_path) {
            Ok(f) => self.db.query_trend(name, t0, t1, BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.db.query_trend(name, t0, t1, std::io::empty())
            }
            Err(e) => Err(StoreError::SinkWriteFailure(e.to_string())),
        }
    }
}

impl PlantStore for Historian {
    fn register(&self, name: &str, kind: VariableKind) -> Result<VariableId, StoreError> {
        self.db.register(name, kind)
    }
    fn insert(&self, sample: Sample) -> Result<bool, StoreError> {
        self.db.insert(sample)
    }
    fn latest(&self, name: &str) -> Result<Option<Sample>, StoreError> {
        self.db.latest(name)
    }
    fn range(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<Sample>, StoreError> {
        self.db.range(name, t0, t1)
    }
    fn rollup(
        &self,
        name: &str,
        t0: Millis,
        t1: Millis,
        interval_len_ms: Millis,
    ) -> Result<Vec<TrendPoint>, StoreError> {
        self.db.rollup(name, t0, t1, interval_len_ms)
    }
    fn trend(&self, name: &str, t0: Millis, t1: Millis) -> Result<Vec<TrendPoint>, StoreError> {
        self.query_trend(name, t0, t1)
    }
}

//! Append-only trend file.
//!
//! One record per line, LF terminated:
//!
//! ```text
//! variable,interval_start_ms,interval_len_ms,min,max,mean,count
//! ```
//!
//! Reals are written in scientific notation with 17 significant digits,
//! which round-trips every finite `f64` exactly. Lines starting with `#`
//! are comments.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{validate_name, Millis, StoreError, TrendPoint};

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn format_record(p: &TrendPoint) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        p.variable,
        p.interval_start_ms,
        p.interval_len_ms,
        format_real(p.min),
        format_real(p.max),
        format_real(p.mean),
        p.count
    )
}

pub fn parse_record(line: &str) -> Result<TrendPoint, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    validate_name(fields[0]).map_err(|e| e.to_string())?;
    let int = |i: usize, what: &str| -> Result<u64, String> {
        let s = fields[i];
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("{what}: not an unsigned integer: {s:?}"));
        }
        s.parse().map_err(|e| format!("{what}: {e}"))
    };
    let real = |i: usize, what: &str| -> Result<f64, String> {
        let v: f64 = fields[i].parse().map_err(|e| format!("{what}: {e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{what}: not finite"))
        }
    };
    let p = TrendPoint {
        variable: fields[0].to_owned(),
        interval_start_ms: int(1, "interval_start_ms")?,
        interval_len_ms: int(2, "interval_len_ms")?,
        min: real(3, "min")?,
        max: real(4, "max")?,
        mean: real(5, "mean")?,
        count: int(6, "count")?,
    };
    if p.interval_len_ms == 0 || !p.interval_start_ms.is_multiple_of(p.interval_len_ms) {
        return Err("interval start not aligned to a positive length".into());
    }
    if p.count == 0 {
        return Err("count must be at least 1".into());
    }
    if !(p.min <= p.mean && p.mean <= p.max) {
        return Err("expected min <= mean <= max".into());
    }
    Ok(p)
}

/// Reads every record from `source`. Any malformed line fails the whole
/// read with its 1-based line number.
pub fn read_trends<R: BufRead>(source: R) -> Result<Vec<TrendPoint>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| StoreError::MalformedTrendRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let p = parse_record(&line).map_err(|reason| StoreError::MalformedTrendRecord {
            line: lineno,
            reason,
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn read_trend_file(path: &Path) -> Result<Vec<TrendPoint>, StoreError> {
    match File::open(path) {
        Ok(f) => read_trends(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(StoreError::SinkWriteFailure(e.to_string())),
    }
}

/// Appends trend records and refuses to write a `(variable, interval_start)`
/// key twice.
#[derive(Debug)]
pub struct TrendWriter<W: Write> {
    sink: W,
    keys: HashSet<(String, Millis)>,
}

impl<W: Write> TrendWriter<W> {
    pub fn new(sink: W) -> Self {
        Self {
            sink,
            keys: HashSet::new(),
        }
    }

    /// A writer that already knows the keys in `existing`.
    pub fn with_existing(sink: W, existing: &[TrendPoint]) -> Self {
        let mut w = Self::new(sink);
        w.keys.extend(
            existing
                .iter()
                .map(|p| (p.variable.clone(), p.interval_start_ms)),
        );
        w
    }

    pub fn contains(&self, variable: &str, interval_start_ms: Millis) -> bool {
        self.keys.contains(&(variable.to_owned(), interval_start_ms))
    }

    /// Appends `points`, one record each. Nothing is written if any key is
    /// already present (in the file or twice within `points`) or if a point
    /// would not read back.
    pub fn persist(&mut self, points: &[TrendPoint]) -> Result<usize, StoreError> {
        let mut fresh = HashSet::with_capacity(points.len());
        let mut buf = String::new();
        for p in points {
            let record = format_record(p);
            if let Err(reason) = parse_record(record.trim_end()) {
                return Err(StoreError::SinkWriteFailure(format!("unreadable record for {}: {reason}", p.variable)));
            }
            buf.push_str(&record);
            let key = (p.variable.clone(), p.interval_start_ms);
            if self.keys.contains(&key) || !fresh.insert(key) {
                return Err(StoreError::DuplicateTrendKey {
                    variable: p.variable.clone(),
                    interval_start_ms: p.interval_start_ms,
                });
            }
        }
        if points.is_empty() {
            return Ok(0);
        }
        self.sink
            .write_all(buf.as_bytes())
            .and_then(|_| self.sink.flush())
            .map_err(|e| StoreError::SinkWriteFailure(e.to_string()))?;
        self.keys.extend(fresh);
        Ok(points.len())
    }

    pub fn get_ref(&self) -> &W {
        &self.sink
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

impl TrendWriter<File> {
    /// Opens `path` for appending, loading the keys already on disk.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let existing = read_trend_file(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StoreError::SinkWriteFailure(e.to_string()))?;
        Ok(Self::with_existing(file, &existing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(var: &str, start: Millis) -> TrendPoint {
        TrendPoint {
            variable: var.into(),
            interval_start_ms: start,
            interval_len_ms: 60_000,
            min: 0.1,
            max: 2.5,
            mean: 1.0 / 3.0,
            count: 4,
        }
    }

    #[test]
    fn record_layout() {
        let line = format_record(&point("boiler.temp", 120_000));
        assert_eq!(
            line,
            "boiler.temp,120000,60000,1.0000000000000001e-1,2.5000000000000000e0,3.3333333333333331e-1,4\n"
        );
        assert_eq!(parse_record(line.trim_end()).unwrap(), point("boiler.temp", 120_000));
    }

    #[test]
    fn persist_appends_and_detects_duplicates() {
        let mut w = TrendWriter::new(Vec::new());
        let pts = [point("a", 0), point("a", 60_000), point("b", 0)];
        assert_eq!(w.persist(&pts).unwrap(), 3);
        assert_eq!(String::from_utf8_lossy(w.get_ref()).lines().count(), 3);
        assert_eq!(w.persist(&[]).unwrap(), 0);
        assert_eq!(String::from_utf8_lossy(w.get_ref()).lines().count(), 3);
        let err = w.persist(&[point("c", 0), point("a", 0)]).unwrap_err();
        assert_eq!(
            err,
            StoreError::DuplicateTrendKey {
                variable: "a".into(),
                interval_start_ms: 0
            }
        );
        // Rejected batch leaves the sink untouched.
        assert_eq!(String::from_utf8_lossy(w.get_ref()).lines().count(), 3);
        assert!(w.persist(&[point("d", 0), point("d", 0)]).is_err());
    }

    #[test]
    fn sink_failure_is_reported() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("disk full"))
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let mut w = TrendWriter::new(Broken);
        assert!(matches!(
            w.persist(&[point("a", 0)]),
            Err(StoreError::SinkWriteFailure(_))
        ));
    }

    #[test]
    fn malformed_lines() {
        for bad in [
            "a,0,60000,1,1,1",
            "a,1,60000,1,1,1,1",
            "a,0,60000,1,1,1,0",
            "a,0,60000,2,1,1,1",
            "a,-0,60000,1,1,1,1",
            "a,0,60000,NaN,1,1,1",
            "a b,0,60000,1,1,1,1",
            ",0,60000,1,1,1,1",
        ] {
            assert!(parse_record(bad).is_err(), "{bad}");
        }
        let err = read_trends("# c\na,0,60000,1,1,1,1\n\na,0,60000,1,1,x,1\n".as_bytes());
        assert!(matches!(err, Err(StoreError::MalformedTrendRecord { line: 4, .. })));
    }

    #[test]
    fn file_writer_reloads_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trends");
        let mut w = TrendWriter::open(&path).unwrap();
        w.persist(&[point("a", 0)]).unwrap();
        drop(w);
        let mut w = TrendWriter::open(&path).unwrap();
        assert!(w.contains("a", 0));
        assert!(w.persist(&[point("a", 0)]).is_err());
        w.persist(&[point("a", 60_000)]).unwrap();
        assert_eq!(read_trend_file(&path).unwrap().len(), 2);
    }
}

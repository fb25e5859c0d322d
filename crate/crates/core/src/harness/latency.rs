use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::session::Channel;

/// Nearest-rank quantiles in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    #[serde(rename = "0.50")]
    pub p50: f64,
    #[serde(rename = "0.90")]
    pub p90: f64,
    #[serde(rename = "0.95")]
    pub p95: f64,
    #[serde(rename = "0.99")]
    pub p99: f64,
}

impl Quantiles {
    pub fn as_array(&self) -> [f64; 4] {
        [self.p50, self.p90, self.p95, self.p99]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub operation: String,
    pub sample_count: u64,
    pub quantiles_us: Quantiles,
    pub min_us: f64,
    pub max_us: f64,
    pub mean_us: f64,
}

fn micros(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1000.0
}

/// Element of rank `ceil(permille * n / 1000)` in the sorted sample.
pub fn nearest_rank(sorted: &[Duration], permille: u64) -> Duration {
    let n = sorted.len() as u64;
    let rank = (permille * n).div_ceil(1000).max(1);
    sorted[(rank - 1) as usize]
}

impl LatencyReport {
    pub fn from_durations(operation: &str, durations: &[Duration]) -> Result<Self, HarnessError> {
        if durations.is_empty() {
            return Err(HarnessError::EmptyReport(operation.to_owned()));
        }
        let mut sorted = durations.to_vec();
        sorted.sort_unstable();
        let total: u128 = sorted.iter().map(Duration::as_nanos).sum();
        let n = sorted.len();
        let q = |p| micros(nearest_rank(&sorted, p));
        Ok(Self {
            operation: operation.to_owned(),
            sample_count: n as u64,
            quantiles_us: Quantiles {
                p50: q(500),
                p90: q(900),
                p95: q(950),
                p99: q(990),
            },
            min_us: micros(sorted[0]),
            max_us: micros(sorted[n - 1]),
            // Clamped: nanosecond rounding must not push it past the extremes.
            mean_us: (total as f64 / n as f64 / 1000.0).clamp(micros(sorted[0]), micros(sorted[n - 1])),
        })
    }

    /// Quantiles non-decreasing and inside `[min, max]`.
    pub fn is_monotone(&self) -> bool {
        let q = self.quantiles_us.as_array();
        self.sample_count >= 1
            && self.min_us <= q[0]
            && q.windows(2).all(|w| w[0] <= w[1])
            && q[3] <= self.max_us
            && self.min_us <= self.mean_us
            && self.mean_us <= self.max_us
    }
}

/// Thread-safe sink for duration measurements.
#[derive(Debug, Default)]
pub struct Collector {
    samples: Mutex<Vec<Duration>>,
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, d: Duration) {
        self.samples.lock().push(d);
    }

    pub fn len(&self) -> usize {
        self.samples.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn durations(&self) -> Vec<Duration> {
        self.samples.lock().clone()
    }

    pub fn report(&self, operation: &str) -> Result<LatencyReport, HarnessError> {
        LatencyReport::from_durations(operation, &self.samples.lock())
    }
}

/// Per-call round trips of `n` sequential `echo` calls with random
/// payloads of `payload_size` bytes.
pub fn measure_rpc(
    channel: &Channel,
    n: u64,
    payload_size: usize,
    timeout: Duration,
) -> Result<(LatencyReport, Vec<Duration>), HarnessError> {
    let mut rng = rand::rng();
    let mut payload = vec![0u8; payload_size];
    let mut durations = Vec::with_capacity(n as usize);
    for completed in 0..n {
        rng.fill_bytes(&mut payload);
        let start = Instant::now();
        let reply = channel
            .call("echo", &payload, timeout)
            .map_err(|source| HarnessError::Measurement { completed, source })?;
        durations.push(start.elapsed());
        if reply != payload {
            return Err(HarnessError::EchoMismatch { call: completed });
        }
    }
    Ok((LatencyReport::from_durations("rpc.echo", &durations)?, durations))
}

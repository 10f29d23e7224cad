use std::fs;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// How the peak-memory figure was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMethod {
    /// High-water mark reset before the job.
    HighWaterMarkReset,
    /// Process-lifetime high-water mark; may include earlier work.
    HighWaterMarkLifetime,
    Unsupported,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metering {
    /// Wall-clock duration.
    pub cpu_minutes: f64,
    pub peak_memory_mb: Option<f64>,
    pub memory_method: MemoryMethod,
}

fn status_kb(field: &str) -> Option<f64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(field))?;
    line[field.len()..].trim().trim_end_matches("kB").trim().parse().ok()
}

fn reset_high_water_mark() -> bool {
    fs::write("/proc/self/clear_refs", "5").is_ok()
}

/// Runs `job` and reports its wall-clock time and peak resident memory.
pub fn meter<T>(job: impl FnOnce() -> T) -> (T, Metering) {
    let reset = reset_high_water_mark();
    let start = Instant::now();
    let out = job();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let (peak, method) = match status_kb("VmHWM:") {
        Some(kb) if reset => (Some(kb / 1024.0), MemoryMethod::HighWaterMarkReset),
        Some(kb) => (Some(kb / 1024.0), MemoryMethod::HighWaterMarkLifetime),
        None => (None, MemoryMethod::Unsupported),
    };
    (out, Metering { cpu_minutes: minutes, peak_memory_mb: peak, memory_method: method })
}

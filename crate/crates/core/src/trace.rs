//! Bandwidth traces: parsing, trace-to-client binding and transfer-time
//! integration over a zero-order-hold throughput series.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ClientId;

/// Default zero-bandwidth plateau after which a transfer is abandoned.
pub const DEFAULT_STALL_TIMEOUT_S: f64 = 3600.0;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("malformed trace line {0}")]
    MalformedLine(usize),
    #[error("trace contains no samples")]
    EmptyTrace,
    #[error("timestamp does not increase at line {0}")]
    NonMonotonicTime(usize),
    #[error("negative bandwidth at sample {0}")]
    NegativeBandwidth(usize),
    #[error("empty client or trace set")]
    EmptyInput,
    #[error("unknown trace `{0}`")]
    UnknownTrace(String),
    #[error("client {0} has no trace binding")]
    Unbound(ClientId),
    #[error("transfer stalled on a zero-bandwidth plateau of {plateau_s:.1} s")]
    StalledTransfer { plateau_s: f64 },
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
}

/// On-disk trace layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    /// `t_seconds,bytes_per_second` per line.
    #[default]
    Canonical,
    /// Whitespace columns; column 1 is a millisecond timestamp and column 5
    /// the bytes received during the interval ending at that timestamp.
    HsdpaStyle,
}

/// A client's throughput series, looped modulo its duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthTrace {
    id: String,
    times: Vec<f64>,
    bandwidth: Vec<f64>,
    interval: f64,
}

impl BandwidthTrace {
    /// Builds a trace from `(t, bytes/s)` samples. Timestamps are re-based so
    /// the first sample sits at zero.
    pub fn new(id: impl Into<String>, samples: &[(f64, f64)]) -> Result<Self, TraceError> {
        if samples.is_empty() {
            return Err(TraceError::EmptyTrace);
        }
        let origin = samples[0].0;
        let mut times = Vec::with_capacity(samples.len());
        let mut bandwidth = Vec::with_capacity(samples.len());
        for (i, &(t, bw)) in samples.iter().enumerate() {
            if !t.is_finite() || !bw.is_finite() {
                return Err(TraceError::MalformedLine(i + 1));
            }
            if bw < 0.0 {
                return Err(TraceError::NegativeBandwidth(i + 1));
            }
            let t = t - origin;
            if let Some(&prev) = times.last() {
                if t <= prev {
                    return Err(TraceError::NonMonotonicTime(i + 1));
                }
            }
            times.push(t);
            bandwidth.push(bw);
        }
        let interval = median_gap(&times).unwrap_or(1.0);
        Ok(Self {
            id: id.into(),
            times,
            bandwidth,
            interval,
        })
    }

    /// Constant-bandwidth trace with a single one-second sample.
    pub fn constant(id: impl Into<String>, bytes_per_s: f64) -> Result<Self, TraceError> {
        Self::new(id, &[(0.0, bytes_per_s)])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.bandwidth.iter().copied())
    }

    pub fn values(&self) -> &[f64] {
        &self.bandwidth
    }

    /// Sampling interval (median gap between samples; 1 s for a single sample).
    pub fn interval(&self) -> f64 {
        self.interval
    }

    /// Length of one loop of the trace.
    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] + self.interval
    }

    /// Time-weighted mean throughput over one loop.
    pub fn mean_bandwidth(&self) -> f64 {
        let total: f64 = (0..self.len())
            .map(|i| self.bandwidth[i] * (self.segment_end(i) - self.times[i]))
            .sum();
        total / self.duration()
    }

    fn is_constant(&self) -> bool {
        self.bandwidth.iter().all(|&b| b == self.bandwidth[0])
    }

    fn segment_end(&self, i: usize) -> f64 {
        if i + 1 < self.times.len() {
            self.times[i + 1]
        } else {
            self.duration()
        }
    }

    /// Index of the sample in force at in-loop offset `phase`.
    fn segment_at(&self, phase: f64) -> usize {
        self.times.partition_point(|&t| t <= phase).saturating_sub(1)
    }

    fn phase(&self, t: f64) -> f64 {
        let p = t.rem_euclid(self.duration());
        // rem_euclid can round up to the modulus itself
        if p >= self.duration() {
            0.0
        } else {
            p
        }
    }

    /// Step-interpolated throughput at simulated time `t` (bytes/s).
    pub fn bandwidth_at(&self, t: f64) -> f64 {
        self.bandwidth[self.segment_at(self.phase(t))]
    }

    /// Seconds needed to move `bytes` starting at `start`, integrating the
    /// step function exactly. Fails if a zero-bandwidth plateau at least
    /// `stall_timeout` long is hit before completion.
    pub fn transfer_time(
        &self,
        start: f64,
        bytes: f64,
        stall_timeout: f64,
    ) -> Result<f64, TraceError> {
        if bytes <= 0.0 {
            return Ok(0.0);
        }
        if self.is_constant() {
            let bw = self.bandwidth[0];
            if bw == 0.0 {
                return Err(TraceError::StalledTransfer {
                    plateau_s: stall_timeout,
                });
            }
            return Ok(bytes / bw);
        }

        let duration = self.duration();
        let phase = self.phase(start);
        let mut cycle_start = start - phase;
        let mut idx = self.segment_at(phase);
        let mut cursor = start;
        let mut remaining = bytes;
        let mut plateau = 0.0;
        loop {
            let seg_end = cycle_start + self.segment_end(idx);
            let span = (seg_end - cursor).max(0.0);
            let bw = self.bandwidth[idx];
            if bw == 0.0 {
                plateau += span;
                if plateau >= stall_timeout {
                    return Err(TraceError::StalledTransfer { plateau_s: plateau });
                }
            } else {
                plateau = 0.0;
                let capacity = bw * span;
                if capacity >= remaining {
                    return Ok(cursor + remaining / bw - start);
                }
                remaining -= capacity;
            }
            cursor = seg_end;
            idx += 1;
            if idx == self.len() {
                idx = 0;
                cycle_start += duration;
                cursor = cycle_start;
            }
        }
    }

    /// Parses a trace in the given layout.
    pub fn parse<R: BufRead>(
        id: impl Into<String>,
        reader: R,
        format: TraceFormat,
    ) -> Result<Self, TraceError> {
        let mut samples = Vec::new();
        let mut line_nos = Vec::new();
        let mut byte_counts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|_| TraceError::MalformedLine(line_no))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match format {
                TraceFormat::Canonical => {
                    let mut parts = line.split(',');
                    let (Some(t), Some(bw), None) = (parts.next(), parts.next(), parts.next())
                    else {
                        return Err(TraceError::MalformedLine(line_no));
                    };
                    let t: f64 = t.trim().parse().map_err(|_| TraceError::MalformedLine(line_no))?;
                    let bw: f64 =
                        bw.trim().parse().map_err(|_| TraceError::MalformedLine(line_no))?;
                    if !t.is_finite() || !bw.is_finite() || bw < 0.0 {
                        return Err(TraceError::MalformedLine(line_no));
                    }
                    samples.push((t, bw));
                }
                TraceFormat::HsdpaStyle => {
                    let cols: Vec<&str> = line.split_whitespace().collect();
                    if cols.len() < 5 {
                        return Err(TraceError::MalformedLine(line_no));
                    }
                    let ms: f64 = cols[0].parse().map_err(|_| TraceError::MalformedLine(line_no))?;
                    let b: f64 = cols[4].parse().map_err(|_| TraceError::MalformedLine(line_no))?;
                    if !ms.is_finite() || !b.is_finite() || b < 0.0 {
                        return Err(TraceError::MalformedLine(line_no));
                    }
                    samples.push((ms / 1000.0, 0.0));
                    byte_counts.push(b);
                }
            }
            line_nos.push(line_no);
        }
        if samples.is_empty() {
            return Err(TraceError::EmptyTrace);
        }
        for w in 1..samples.len() {
            if samples[w].0 <= samples[w - 1].0 {
                return Err(TraceError::NonMonotonicTime(line_nos[w]));
            }
        }
        if format == TraceFormat::HsdpaStyle {
            let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let fallback = median_gap(&times).unwrap_or(1.0);
            for i in 0..samples.len() {
                let gap = if i > 0 {
                    times[i] - times[i - 1]
                } else {
                    fallback
                };
                samples[i].1 = byte_counts[i] / gap;
            }
        }
        Self::new(id, &samples)
    }

    /// Serializes in the canonical CSV layout.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for (t, bw) in self.samples() {
            out.push_str(&format!("{t},{bw}\n"));
        }
        out
    }
}

fn median_gap(times: &[f64]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    Some(if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    })
}

/// Binds clients to traces: the k-th client (sorted) gets trace `k mod n`
/// (sorted by id).
pub fn assign_traces(
    clients: &[ClientId],
    trace_ids: &[String],
) -> Result<BTreeMap<ClientId, String>, TraceError> {
    if clients.is_empty() || trace_ids.is_empty() {
        return Err(TraceError::EmptyInput);
    }
    let mut clients = clients.to_vec();
    clients.sort_unstable();
    clients.dedup();
    let mut traces = trace_ids.to_vec();
    traces.sort();
    traces.dedup();
    Ok(clients
        .into_iter()
        .enumerate()
        .map(|(k, c)| (c, traces[k % traces.len()].clone()))
        .collect())
}

/// Immutable set of traces plus the client binding.
#[derive(Debug, Clone)]
pub struct TraceStore {
    traces: BTreeMap<String, BandwidthTrace>,
    assignment: BTreeMap<ClientId, String>,
}

impl TraceStore {
    pub fn new(traces: Vec<BandwidthTrace>, clients: &[ClientId]) -> Result<Self, TraceError> {
        let traces: BTreeMap<String, BandwidthTrace> =
            traces.into_iter().map(|t| (t.id.clone(), t)).collect();
        let ids: Vec<String> = traces.keys().cloned().collect();
        let assignment = assign_traces(clients, &ids)?;
        Ok(Self { traces, assignment })
    }

    /// Loads every regular file in `dir` (sorted by name) as a trace whose id
    /// is the file stem.
    pub fn load_dir(
        dir: &Path,
        format: TraceFormat,
        clients: &[ClientId],
    ) -> Result<Self, TraceError> {
        let io_err = |e: std::io::Error| TraceError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut traces = Vec::with_capacity(paths.len());
        for path in paths {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let file = std::fs::File::open(&path).map_err(|e| TraceError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            traces.push(BandwidthTrace::parse(id, std::io::BufReader::new(file), format)?);
        }
        Self::new(traces, clients)
    }

    /// Replaces every trace by a constant trace at its time-mean bandwidth.
    pub fn flattened(&self) -> Self {
        let traces = self
            .traces
            .iter()
            .map(|(id, t)| {
                let flat = BandwidthTrace::constant(id.clone(), t.mean_bandwidth())
                    .expect("mean of a valid trace is a valid constant trace");
                (id.clone(), flat)
            })
            .collect();
        Self {
            traces,
            assignment: self.assignment.clone(),
        }
    }

    pub fn trace(&self, id: &str) -> Option<&BandwidthTrace> {
        self.traces.get(id)
    }

    pub fn trace_for(&self, client: ClientId) -> Result<&BandwidthTrace, TraceError> {
        let id = self
            .assignment
            .get(&client)
            .ok_or(TraceError::Unbound(client))?;
        self.traces
            .get(id)
            .ok_or_else(|| TraceError::UnknownTrace(id.clone()))
    }

    pub fn assignment(&self) -> &BTreeMap<ClientId, String> {
        &self.assignment
    }

    pub fn traces(&self) -> impl Iterator<Item = &BandwidthTrace> {
        self.traces.values()
    }
}

impl fmt::Display for BandwidthTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} samples, {:.0} s)",
            self.id,
            self.len(),
            self.duration()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> BandwidthTrace {
        BandwidthTrace::new("t", &[(0.0, 1e6), (5.0, 3e6)]).unwrap()
    }

    #[test]
    fn parses_canonical() {
        let t = BandwidthTrace::parse("a", "0,1000000\n1,2000000\n".as_bytes(), TraceFormat::Canonical)
            .unwrap();
        assert_eq!(t.samples().collect::<Vec<_>>(), vec![(0.0, 1e6), (1.0, 2e6)]);
    }

    #[test]
    fn rebases_first_timestamp() {
        let t = BandwidthTrace::parse("a", "5,100\n".as_bytes(), TraceFormat::Canonical).unwrap();
        assert_eq!(t.samples().collect::<Vec<_>>(), vec![(0.0, 100.0)]);
    }

    #[test]
    fn rejects_regressing_time() {
        let err = BandwidthTrace::parse("a", "0,100\n0,200\n".as_bytes(), TraceFormat::Canonical)
            .unwrap_err();
        assert_eq!(err, TraceError::NonMonotonicTime(2));
    }

    #[test]
    fn rejects_garbage_and_empty() {
        let err =
            BandwidthTrace::parse("a", "0,1\nx,2\n".as_bytes(), TraceFormat::Canonical).unwrap_err();
        assert_eq!(err, TraceError::MalformedLine(2));
        let err = BandwidthTrace::parse("a", "0,1,2\n".as_bytes(), TraceFormat::Canonical).unwrap_err();
        assert_eq!(err, TraceError::MalformedLine(1));
        let err = BandwidthTrace::parse("a", "\n# nothing\n".as_bytes(), TraceFormat::Canonical)
            .unwrap_err();
        assert_eq!(err, TraceError::EmptyTrace);
    }

    #[test]
    fn parses_hsdpa_columns() {
        let raw = "1000 0 59.8 10.7 500000 1000\n2000 0 59.8 10.7 250000 1000\n4000 0 59.8 10.7 1000000 2000\n";
        let t = BandwidthTrace::parse("h", raw.as_bytes(), TraceFormat::HsdpaStyle).unwrap();
        let s: Vec<_> = t.samples().collect();
        // first row borrows the median gap (1.5 s)
        assert_eq!(s[0], (0.0, 500000.0 / 1.5));
        assert_eq!(s[1], (1.0, 250000.0));
        assert_eq!(s[2], (3.0, 500000.0));
    }

    #[test]
    fn step_lookup() {
        let t = two_step();
        assert_eq!(t.bandwidth_at(2.0), 1e6);
        assert_eq!(t.bandwidth_at(5.0), 3e6);
        // interval 5 s, duration 10 s
        assert_eq!(t.bandwidth_at(10.0), 1e6);
        let single = BandwidthTrace::constant("c", 1e6).unwrap();
        assert_eq!(single.bandwidth_at(1.5), 1e6);
    }

    #[test]
    fn transfer_over_two_steps() {
        let t = two_step();
        let dt = t.transfer_time(0.0, 8e6, DEFAULT_STALL_TIMEOUT_S).unwrap();
        assert!((dt - 6.0).abs() < 1e-12, "{dt}");
        assert_eq!(t.transfer_time(3.0, 0.0, DEFAULT_STALL_TIMEOUT_S).unwrap(), 0.0);
    }

    #[test]
    fn transfer_wraps_the_loop() {
        let t = two_step();
        // from t=8: 2 s at 3 MB/s, then 5 s at 1 MB/s, then 1 s at 3 MB/s
        let dt = t.transfer_time(8.0, 6e6 + 5e6 + 3e6, DEFAULT_STALL_TIMEOUT_S).unwrap();
        assert!((dt - 8.0).abs() < 1e-12, "{dt}");
    }

    #[test]
    fn zero_bandwidth_stalls() {
        let t = BandwidthTrace::constant("z", 0.0).unwrap();
        assert!(matches!(
            t.transfer_time(0.0, 1.0, DEFAULT_STALL_TIMEOUT_S),
            Err(TraceError::StalledTransfer { .. })
        ));
        let gap = BandwidthTrace::new("g", &[(0.0, 1.0), (1.0, 0.0), (100.0, 1.0)]).unwrap();
        assert!(matches!(
            gap.transfer_time(0.0, 5.0, 50.0),
            Err(TraceError::StalledTransfer { .. })
        ));
        // a plateau shorter than the timeout is waited out
        let dt = gap.transfer_time(0.0, 2.0, 200.0).unwrap();
        assert!((dt - 101.0).abs() < 1e-12, "{dt}");
    }

    #[test]
    fn modular_assignment() {
        let clients: Vec<ClientId> = (0..5).map(ClientId).collect();
        let traces = vec!["t1".to_string(), "t0".to_string()];
        let a = assign_traces(&clients, &traces).unwrap();
        let got: Vec<&str> = a.values().map(String::as_str).collect();
        assert_eq!(got, vec!["t0", "t1", "t0", "t1", "t0"]);
        let one = assign_traces(&[ClientId(0)], &["t0".to_string()]).unwrap();
        assert_eq!(one[&ClientId(0)], "t0");
        assert_eq!(assign_traces(&clients, &[]), Err(TraceError::EmptyInput));
        assert_eq!(assign_traces(&[], &traces), Err(TraceError::EmptyInput));
    }

    #[test]
    fn flattening_preserves_mean() {
        let store = TraceStore::new(vec![two_step()], &[ClientId(0)]).unwrap();
        let flat = store.flattened();
        let t = flat.trace_for(ClientId(0)).unwrap();
        assert_eq!(t.bandwidth_at(0.0), 2e6);
        assert_eq!(t.bandwidth_at(7.3), 2e6);
    }
}

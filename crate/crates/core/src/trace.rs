//! Per-step scenario records, the event log, and their CSV serialization.
//!
//! Column layout is fixed by the model dimensions and documented in
//! `docs/trace-schema.md`. Floats are written in scientific notation with
//! nine fractional digits so a parse round-trip recovers values to better
//! than 1e-9 relative.

use std::io::Write;
use std::path::Path;

use crate::detector::ControlMode;
use crate::{Error, Result};

/// Dimensions a trace is laid out for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceDims {
    pub n: usize,
    pub m_u: usize,
    pub m_g: usize,
    pub m_i: usize,
    pub m_s: usize,
    pub n_a: usize,
}

/// Escape-solver diagnostics carried on emergency-mode rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverRecord {
    pub iterations: usize,
    pub grad_norm: f64,
    pub constraint_violation: f64,
}

/// Attacker-tracker snapshot carried once the tracker is initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerRecord {
    pub position: Vec<f64>,
    pub power: f64,
    /// Covariance diagonal, position components then power.
    pub cov_diag: Vec<f64>,
}

/// One simulated step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub mode: ControlMode,
    pub in_range: bool,
    pub x_true: Vec<f64>,
    pub est1: Vec<f64>,
    pub est2: Vec<f64>,
    pub y_gps: Vec<f64>,
    pub y_imu: Vec<f64>,
    pub y_rssi: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub cusum: f64,
    pub cusum_threshold: f64,
    /// Input applied at this step (drives the transition to step k+1).
    pub u: Vec<f64>,
    pub p1_trace: f64,
    pub p2_trace: f64,
    pub tracker: Option<TrackerRecord>,
    pub solver: Option<SolverRecord>,
}

/// Scenario event log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Full scenario trace.
#[derive(Debug, Clone)]
pub struct ScenarioTrace {
    pub dims: TraceDims,
    pub records: Vec<TraceRecord>,
    pub events: Vec<Event>,
}

fn fmt_float(v: f64) -> String {
    format!("{v:.9e}")
}

fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        out.push(',');
        out.push_str(&fmt_float(*v));
    }
}

fn push_empty(out: &mut String, count: usize) {
    for _ in 0..count {
        out.push(',');
    }
}

impl ScenarioTrace {
    pub fn new(dims: TraceDims) -> Self {
        ScenarioTrace { dims, records: Vec::new(), events: Vec::new() }
    }

    pub fn push_event(&mut self, step: usize, name: &str, value: f64) {
        self.events.push(Event { step, name: name.to_string(), value });
    }

    /// Header row for these dimensions.
    pub fn header(dims: &TraceDims) -> String {
        let mut cols: Vec<String> = vec!["k".into(), "mode".into(), "in_range".into()];
        let vec_cols = |prefix: &str, count: usize, cols: &mut Vec<String>| {
            for i in 0..count {
                cols.push(format!("{prefix}_{i}"));
            }
        };
        vec_cols("x", dims.n, &mut cols);
        vec_cols("est1", dims.n, &mut cols);
        vec_cols("est2", dims.n, &mut cols);
        vec_cols("y_gps", dims.m_g, &mut cols);
        vec_cols("y_imu", dims.m_i, &mut cols);
        vec_cols("y_rssi", dims.m_s, &mut cols);
        vec_cols("d_hat", dims.m_g, &mut cols);
        cols.push("cusum".into());
        cols.push("cusum_threshold".into());
        vec_cols("u", dims.m_u, &mut cols);
        cols.push("p1_trace".into());
        cols.push("p2_trace".into());
        vec_cols("alt_pos", dims.n_a, &mut cols);
        cols.push("alt_power".into());
        vec_cols("alt_var", dims.n_a + 1, &mut cols);
        cols.push("solver_iterations".into());
        cols.push("solver_grad_norm".into());
        cols.push("solver_violation".into());
        cols.join(",")
    }

    fn record_line(&self, r: &TraceRecord) -> String {
        let mut line = String::with_capacity(512);
        line.push_str(&r.k.to_string());
        line.push(',');
        line.push_str(&r.mode.to_string());
        line.push(',');
        line.push_str(if r.in_range { "1" } else { "0" });
        push_floats(&mut line, &r.x_true);
        push_floats(&mut line, &r.est1);
        push_floats(&mut line, &r.est2);
        push_floats(&mut line, &r.y_gps);
        push_floats(&mut line, &r.y_imu);
        push_floats(&mut line, &r.y_rssi);
        push_floats(&mut line, &r.d_hat);
        push_floats(&mut line, &[r.cusum, r.cusum_threshold]);
        push_floats(&mut line, &r.u);
        push_floats(&mut line, &[r.p1_trace, r.p2_trace]);
        match &r.tracker {
            Some(t) => {
                push_floats(&mut line, &t.position);
                push_floats(&mut line, &[t.power]);
                push_floats(&mut line, &t.cov_diag);
            }
            None => push_empty(&mut line, 2 * (self.dims.n_a + 1)),
        }
        match &r.solver {
            Some(s) => {
                line.push(',');
                line.push_str(&s.iterations.to_string());
                push_floats(&mut line, &[s.grad_norm, s.constraint_violation]);
            }
            None => push_empty(&mut line, 3),
        }
        line
    }

    /// Render the whole trace as CSV text.
    pub fn to_csv(&self) -> String {
        let mut out = Self::header(&self.dims);
        out.push('\n');
        for r in &self.records {
            out.push_str(&self.record_line(r));
            out.push('\n');
        }
        out
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from("step,event,value\n");
        for e in &self.events {
            out.push_str(&format!("{},{},{}\n", e.step, e.name, fmt_float(e.value)));
        }
        out
    }

    /// Write `trace.csv` and `events.csv` into a directory.
    pub fn export(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let trace_path = dir.join("trace.csv");
        let events_path = dir.join("events.csv");
        write_file(&trace_path, &self.to_csv())?;
        write_file(&events_path, &self.events_csv())?;
        Ok((trace_path, events_path))
    }

    /// Parse a trace CSV produced by [`ScenarioTrace::to_csv`].
    pub fn parse_csv(text: &str, dims: TraceDims) -> Result<ScenarioTrace> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty trace file".into()))?;
        if header != Self::header(&dims) {
            return Err(Error::Config("trace header does not match expected schema".into()));
        }
        let mut trace = ScenarioTrace::new(dims);
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            trace.records.push(parse_record(&fields, &trace.dims).map_err(|e| {
                Error::Config(format!("trace line {}: {e}", lineno + 2))
            })?);
        }
        Ok(trace)
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(content.as_bytes()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

struct FieldCursor<'a> {
    fields: &'a [&'a str],
    at: usize,
}

impl<'a> FieldCursor<'a> {
    fn next(&mut self) -> std::result::Result<&'a str, String> {
        let f = self.fields.get(self.at).ok_or("missing field")?;
        self.at += 1;
        Ok(f)
    }
    fn float(&mut self) -> std::result::Result<f64, String> {
        let f = self.next()?;
        f.parse::<f64>().map_err(|e| format!("bad float '{f}': {e}"))
    }
    fn floats(&mut self, count: usize) -> std::result::Result<Vec<f64>, String> {
        (0..count).map(|_| self.float()).collect()
    }
    fn optional_floats(&mut self, count: usize) -> std::result::Result<Option<Vec<f64>>, String> {
        if self.fields.get(self.at).is_some_and(|f| f.is_empty()) {
            self.at += count;
            return Ok(None);
        }
        self.floats(count).map(Some)
    }
}

fn parse_record(fields: &[&str], dims: &TraceDims) -> std::result::Result<TraceRecord, String> {
    let mut cur = FieldCursor { fields, at: 0 };
    let k = cur.next()?.parse::<usize>().map_err(|e| e.to_string())?;
    let mode = match cur.next()? {
        "ROBUST" => ControlMode::Robust,
        "EMERGENCY" => ControlMode::Emergency,
        other => return Err(format!("bad mode '{other}'")),
    };
    let in_range = cur.next()? == "1";
    let x_true = cur.floats(dims.n)?;
    let est1 = cur.floats(dims.n)?;
    let est2 = cur.floats(dims.n)?;
    let y_gps = cur.floats(dims.m_g)?;
    let y_imu = cur.floats(dims.m_i)?;
    let y_rssi = cur.floats(dims.m_s)?;
    let d_hat = cur.floats(dims.m_g)?;
    let cusum = cur.float()?;
    let cusum_threshold = cur.float()?;
    let u = cur.floats(dims.m_u)?;
    let p1_trace = cur.float()?;
    let p2_trace = cur.float()?;
    let tracker = match cur.optional_floats(dims.n_a)? {
        Some(position) => {
            let power = cur.float()?;
            let cov_diag = cur.floats(dims.n_a + 1)?;
            Some(TrackerRecord { position, power, cov_diag })
        }
        None => {
            // skip power and covariance diagonal slots
            cur.at += 1 + dims.n_a + 1;
            None
        }
    };
    let solver = {
        let first = cur.next()?;
        if first.is_empty() {
            None
        } else {
            let iterations = first.parse::<usize>().map_err(|e| e.to_string())?;
            let grad_norm = cur.float()?;
            let constraint_violation = cur.float()?;
            Some(SolverRecord { iterations, grad_norm, constraint_violation })
        }
    };
    Ok(TraceRecord {
        k,
        mode,
        in_range,
        x_true,
        est1,
        est2,
        y_gps,
        y_imu,
        y_rssi,
        d_hat,
        cusum,
        cusum_threshold,
        u,
        p1_trace,
        p2_trace,
        tracker,
        solver,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> TraceDims {
        TraceDims { n: 4, m_u: 2, m_g: 2, m_i: 2, m_s: 1, n_a: 2 }
    }

    fn sample_record(k: usize, with_tracker: bool) -> TraceRecord {
        TraceRecord {
            k,
            mode: if with_tracker { ControlMode::Emergency } else { ControlMode::Robust },
            in_range: with_tracker,
            x_true: vec![1.123456789123, -2.0, 0.5, 0.25],
            est1: vec![1.0, -2.0, 0.5, 0.25],
            est2: vec![1.1, -2.1, 0.4, 0.2],
            y_gps: vec![11.0, 12.0],
            y_imu: vec![0.01, -0.02],
            y_rssi: vec![0.2222],
            d_hat: vec![10.0, 10.0],
            cusum: 3.14159,
            cusum_threshold: 10.836,
            u: vec![1.0, -1.0],
            p1_trace: 1.24,
            p2_trace: 8.0,
            tracker: with_tracker.then(|| TrackerRecord {
                position: vec![99.0, 101.0],
                power: 197.5,
                cov_diag: vec![4.0, 4.5, 81.0],
            }),
            solver: with_tracker.then(|| SolverRecord {
                iterations: 120,
                grad_norm: 5.5e-5,
                constraint_violation: 0.0,
            }),
        }
    }

    #[test]
    fn header_matches_schema_doc() {
        let doc = include_str!("../docs/trace-schema.md");
        let expected = ScenarioTrace::header(&dims());
        let documented = doc
            .lines()
            .find(|l| l.starts_with("k,mode,in_range"))
            .expect("schema doc must contain the default header line");
        assert_eq!(documented, expected);
    }

    #[test]
    fn roundtrip_preserves_values() {
        let mut trace = ScenarioTrace::new(dims());
        trace.records.push(sample_record(1, false));
        trace.records.push(sample_record(2, true));
        let text = trace.to_csv();
        let back = ScenarioTrace::parse_csv(&text, dims()).unwrap();
        assert_eq!(back.records.len(), 2);
        for (a, b) in trace.records.iter().zip(&back.records) {
            assert_eq!(a.k, b.k);
            assert_eq!(a.mode, b.mode);
            for (x, y) in a.x_true.iter().zip(&b.x_true) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
            assert_eq!(a.tracker.is_some(), b.tracker.is_some());
            assert_eq!(a.solver.is_some(), b.solver.is_some());
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let trace = ScenarioTrace::new(dims());
        let text = trace.to_csv();
        assert_eq!(text.lines().count(), 1);
        let back = ScenarioTrace::parse_csv(&text, dims()).unwrap();
        assert!(back.records.is_empty());
    }

    #[test]
    fn header_mismatch_rejected() {
        let text = "k,mode\n";
        assert!(ScenarioTrace::parse_csv(text, dims()).is_err());
    }

    #[test]
    fn export_writes_both_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut trace = ScenarioTrace::new(dims());
        trace.records.push(sample_record(1, true));
        trace.push_event(5, "detection", 1.0);
        let (tp, ep) = trace.export(tmp.path()).unwrap();
        assert!(tp.exists());
        let events = std::fs::read_to_string(ep).unwrap();
        assert!(events.contains("detection"));
    }
}

//! CSV artifacts: events, ground truth, run logs and tuning tables.
//!
//! Comma separated, `.` decimal point, time in days, header row always
//! present. Floats use the shortest representation that parses back to the
//! same value, so files are bit-stable.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::ekf::{RunLog, UpdateKind};
use crate::events::{MeasurementEvent, SignalSet};
use crate::model::Normalization;
use crate::ode::InputSchedule;
use crate::scenario::Truth;
use crate::tuning::{Criterion, RunStatus, TuningResult, TuningSample};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Schema(String),
}

fn schema(msg: impl Into<String>) -> IoError {
    IoError::Schema(msg.into())
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn parse(field: &str, col: &str, line: u64) -> Result<f64, IoError> {
    field.trim().parse::<f64>().map_err(|_| schema(format!("line {line}: column {col}: {field:?} is not a number")))
}

fn headers(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

pub fn write_events<W: Write>(w: W, events: &[MeasurementEvent], n_outputs: usize) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let mut head: Vec<String> = ["t_days", "kind", "id", "signal_mask"].iter().map(|s| s.to_string()).collect();
    head.extend(headers("v", n_outputs));
    out.write_record(&head)?;
    for ev in events {
        let mut vals = vec![String::new(); n_outputs];
        let (kind, id, mask) = match ev {
            MeasurementEvent::Online { values, .. } => {
                let mut present = Vec::new();
                for (i, v) in values.iter().enumerate() {
                    if let Some(v) = v {
                        vals[i] = num(*v);
                        present.push(i);
                    }
                }
                ("online", String::new(), SignalSet::from_indices(&present))
            }
            MeasurementEvent::SampleDrawn { id, signals, .. } => ("sample", id.to_string(), *signals),
            MeasurementEvent::OfflineReturn { id, values, .. } => {
                let idx: Vec<usize> = values.iter().map(|v| v.0).collect();
                for &(i, v) in values {
                    vals[i] = num(v);
                }
                ("return", id.to_string(), SignalSet::from_indices(&idx))
            }
        };
        let mut rec = vec![num(ev.time()), kind.to_string(), id, mask.to_mask(n_outputs)];
        rec.extend(vals);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Events and the number of value columns.
pub fn read_events<R: Read>(r: R) -> Result<(Vec<MeasurementEvent>, usize), IoError> {
    let mut rd = csv::Reader::from_reader(r);
    let head = rd.headers()?.clone();
    let fixed = ["t_days", "kind", "id", "signal_mask"];
    if head.len() < fixed.len() + 1 || head.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(schema("event file header must start with t_days,kind,id,signal_mask followed by v1..vN"));
    }
    let n = head.len() - fixed.len();
    for (i, h) in head.iter().skip(fixed.len()).enumerate() {
        if h != format!("v{}", i + 1) {
            return Err(schema(format!("event file column {h:?} should be v{}", i + 1)));
        }
    }
    let mut events = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let t = parse(&rec[0], "t_days", line)?;
        if t < last {
            return Err(schema(format!("line {line}: events must be sorted by t_days")));
        }
        last = t;
        let mask = SignalSet::parse_mask(&rec[3]).map_err(|e| schema(format!("line {line}: {e}")))?;
        if mask.indices().iter().any(|&i| i >= n) {
            return Err(schema(format!("line {line}: signal_mask names a signal beyond v{n}")));
        }
        let id = || rec[2].trim().parse::<u64>().map_err(|_| schema(format!("line {line}: id {:?} is not an integer", &rec[2])));
        let value = |i: usize| -> Result<f64, IoError> {
            let f = &rec[4 + i];
            if f.trim().is_empty() {
                return Err(schema(format!("line {line}: v{} is empty but set in signal_mask", i + 1)));
            }
            parse(f, &format!("v{}", i + 1), line)
        };
        let ev = match &rec[1] {
            "online" => {
                let mut values = vec![None; n];
                for i in mask.indices() {
                    values[i] = Some(value(i)?);
                }
                MeasurementEvent::Online { t, values }
            }
            "sample" => MeasurementEvent::SampleDrawn { t, id: id()?, signals: mask },
            "return" => {
                let mut values = Vec::new();
                for i in mask.indices() {
                    values.push((i, value(i)?));
                }
                MeasurementEvent::OfflineReturn { t, id: id()?, values }
            }
            other => return Err(schema(format!("line {line}: unknown kind {other:?} (online, sample, return)"))),
        };
        events.push(ev);
    }
    Ok((events, n))
}

pub fn write_truth<W: Write>(w: W, truth: &Truth) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let n = truth.states.first().map_or(0, |s| s.len());
    let m = truth.outputs.first().map_or(0, |s| s.len());
    let mut head = vec!["t_days".to_string()];
    head.extend(headers("x", n));
    head.extend(headers("y", m));
    out.write_record(&head)?;
    for k in 0..truth.t.len() {
        let mut rec = vec![num(truth.t[k])];
        rec.extend(truth.states[k].iter().map(|v| num(*v)));
        rec.extend(truth.outputs[k].iter().map(|v| num(*v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns of a numeric CSV: the header and one vector per row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Columns `prefix1..prefixN` in order.
    pub fn block(&self, prefix: &str) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(i) = self.column(&format!("{prefix}{}", out.len() + 1)) {
            out.push(i);
        }
        out
    }
}

pub fn read_numeric<R: Read>(r: R) -> Result<Table, IoError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec.iter().zip(&header).map(|(f, h)| parse(f, h, line)).collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub fn read_truth<R: Read>(r: R) -> Result<Truth, IoError> {
    let tab = read_numeric(r)?;
    let (xs, ys) = (tab.block("x"), tab.block("y"));
    if tab.column("t_days") != Some(0) || xs.len() != crate::adm1::N_STATES || ys.len() != crate::adm1::N_OUTPUTS {
        return Err(schema("truth file needs columns t_days, x1..x14, y1..y6"));
    }
    let mut truth = Truth { t: Vec::new(), states: Vec::new(), outputs: Vec::new() };
    for row in &tab.rows {
        truth.t.push(row[0]);
        let mut x = [0.0; crate::adm1::N_STATES];
        for (j, &c) in xs.iter().enumerate() {
            x[j] = row[c];
        }
        let mut y = [0.0; crate::adm1::N_OUTPUTS];
        for (j, &c) in ys.iter().enumerate() {
            y[j] = row[c];
        }
        truth.states.push(x);
        truth.outputs.push(y);
    }
    Ok(truth)
}

pub fn write_feed<W: Write>(w: W, schedule: &InputSchedule) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["start_days", "end_days", "feed_rate"])?;
    for s in &schedule.segments {
        out.write_record([num(s.start), num(s.end), num(s.feed_rate)])?;
    }
    out.flush()?;
    Ok(())
}

/// Per-step estimates in plant units: mean, covariance diagonal, predicted
/// output and the number of pending samples.
pub fn write_run_log<W: Write>(w: W, log: &RunLog, scale: &Normalization) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let n = scale.state.len();
    let m = scale.output.len();
    let mut head = vec!["t_days".to_string()];
    head.extend(headers("x", n));
    head.extend(headers("p", n));
    head.extend(headers("y", m));
    head.push("augmentation".into());
    out.write_record(&head)?;
    for s in &log.steps {
        let x = scale.denormalize_state(&s.mean.rows(0, n).into_owned());
        let y = scale.denormalize_output(&DVector::from_column_slice(&s.output.as_slice()[..m]));
        let mut rec = vec![num(s.t)];
        rec.extend(x.iter().map(|v| num(*v)));
        rec.extend((0..n).map(|i| num(s.cov[(i, i)] * scale.state[i] * scale.state[i])));
        rec.extend(y.iter().map(|v| num(*v)));
        rec.push(s.augmentation.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn kind_str(k: UpdateKind) -> &'static str {
    match k {
        UpdateKind::Minor => "minor",
        UpdateKind::Major => "major",
        UpdateKind::Full => "full",
    }
}

pub fn write_updates<W: Write>(w: W, log: &RunLog) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_days", "kind", "q", "nis", "q_online", "nis_online"])?;
    for u in &log.updates {
        out.write_record([num(u.t), kind_str(u.kind).into(), u.q.to_string(), num(u.nis), u.q_online.to_string(), num(u.nis_online)])?;
    }
    out.flush()?;
    Ok(())
}

fn sample_fields(s: &TuningSample) -> Vec<String> {
    s.to_vec().into_iter().map(num).collect()
}

fn tuning_header(first: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    h.extend(headers("q", crate::adm1::N_STATES));
    h.push("k_r".into());
    h
}

/// Ranked successful tunings for one criterion.
pub fn write_ranking<W: Write>(w: W, ranked: &[&TuningResult]) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = tuning_header(&["rank", "tuning_id"]);
    head.extend(["nrmse_x_l1", "nrmse_y_l1", "boulkroune", "status", "wall_time"].map(String::from));
    out.write_record(&head)?;
    for (i, r) in ranked.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string(), r.id.to_string()];
        rec.extend(sample_fields(&r.sample));
        let m = &r.metrics;
        rec.extend([num(m.nrmse_x_l1), num(m.nrmse_y_l1), num(m.boulkroune), m.status.as_str().into(), num(m.wall_time)]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Every tuning in id order with its status and the weighted cost summands.
pub fn write_summands<W: Write>(w: W, results: &[TuningResult]) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = tuning_header(&["tuning_id", "status"]);
    head.extend(headers("j", 5));
    head.extend(["boulkroune", "nrmse_x_l1", "nrmse_y_l1", "wall_time"].map(String::from));
    out.write_record(&head)?;
    for r in results {
        let mut rec = vec![r.id.to_string(), r.metrics.status.as_str().into()];
        rec.extend(sample_fields(&r.sample));
        rec.extend(r.metrics.boulkroune_summands.iter().map(|v| num(*v)));
        let m = &r.metrics;
        rec.extend([num(m.boulkroune), num(m.nrmse_x_l1), num(m.nrmse_y_l1), num(m.wall_time)]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn ranking_file_name(c: Criterion) -> String {
    format!("ranking_{}.csv", c.as_str())
}

pub fn status_from_str(s: &str) -> Option<RunStatus> {
    match s {
        "ok" => Some(RunStatus::Ok),
        "timeout" => Some(RunStatus::Timeout),
        "diverged" => Some(RunStatus::Diverged),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_round_trip() {
        let events = vec![
            MeasurementEvent::Online { t: 0.0, values: vec![Some(1.5), None, Some(1e-7)] },
            MeasurementEvent::SampleDrawn { t: 0.0, id: 3, signals: SignalSet::from_indices(&[1, 2]) },
            MeasurementEvent::OfflineReturn { t: 0.5, id: 3, values: vec![(1, 0.1), (2, -2.0)] },
        ];
        let mut buf = Vec::new();
        write_events(&mut buf, &events, 3).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_days,kind,id,signal_mask,v1,v2,v3\n0,online,,101,1.5,,0.0000001\n"), "{text}");
        let (back, n) = read_events(&buf[..]).unwrap();
        assert_eq!(n, 3);
        assert_eq!(back, events);
    }

    #[test]
    fn event_schema_errors() {
        let bad_kind = "t_days,kind,id,signal_mask,v1\n0,lab,,1,2\n";
        assert!(read_events(bad_kind.as_bytes()).unwrap_err().to_string().contains("unknown kind"));
        let missing = "t_days,kind,id,signal_mask,v1\n0,online,,1,\n";
        assert!(read_events(missing.as_bytes()).unwrap_err().to_string().contains("v1 is empty"));
        let unsorted = "t_days,kind,id,signal_mask,v1\n1,online,,1,2\n0,online,,1,2\n";
        assert!(read_events(unsorted.as_bytes()).unwrap_err().to_string().contains("sorted"));
        assert!(read_events("t,kind\n".as_bytes()).is_err());
    }

    #[test]
    fn truth_round_trip() {
        let truth = Truth { t: vec![0.0, 1.0 / 24.0], states: vec![[0.5; 14], [1.0 / 3.0; 14]], outputs: vec![[2.0; 6], [7.1; 6]] };
        let mut buf = Vec::new();
        write_truth(&mut buf, &truth).unwrap();
        assert_eq!(read_truth(&buf[..]).unwrap(), truth);
    }
}

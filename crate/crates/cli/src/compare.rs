//! Side-by-side comparison of estimation runs.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use mrekf::adm1::{N_OUTPUTS, N_STATES, OUTPUT_NAMES, STATE_NAMES};
use mrekf::io::{read_numeric, read_truth, Table};
use mrekf::scenario::Truth;

use crate::manifest::{now_unix, sha256_hex, RunManifest};
use crate::{CliError, CompareArgs};

struct Run {
    name: String,
    t: Vec<f64>,
    x: Vec<[f64; N_STATES]>,
    y: Vec<[f64; N_OUTPUTS]>,
    truth: Truth,
}

fn load_run(dir: &Path, truth_path: Option<&Path>) -> Result<Run, CliError> {
    let log_path = dir.join("run_log.csv");
    let tab: Table = read_numeric(File::open(&log_path).map_err(|e| CliError::io(&log_path, e))?)?;
    let (xs, ys) = (tab.block("x"), tab.block("y"));
    if tab.column("t_days") != Some(0) || xs.len() != N_STATES || ys.len() != N_OUTPUTS {
        return Err(CliError::Validation(format!("{}: not a digester run log", log_path.display())));
    }
    let truth_path = truth_path.map_or_else(|| dir.join("truth.csv"), Path::to_path_buf);
    let truth = read_truth(File::open(&truth_path).map_err(|e| CliError::io(&truth_path, e))?)?;
    let mut run = Run {
        name: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        t: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        truth,
    };
    for row in &tab.rows {
        run.t.push(row[0]);
        run.x.push(std::array::from_fn(|i| row[xs[i]]));
        run.y.push(std::array::from_fn(|i| row[ys[i]]));
    }
    if run.t.len() != run.truth.t.len() || run.t.iter().zip(&run.truth.t).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(CliError::Validation(format!("{}: run grid does not match its truth grid", dir.display())));
    }
    Ok(run)
}

/// Per-state errors `|x_hat - x| / mean|x|` at every step.
fn normalized_errors(run: &Run) -> Vec<[f64; N_STATES]> {
    let n = run.truth.states.len() as f64;
    let mean: [f64; N_STATES] = std::array::from_fn(|i| run.truth.states.iter().map(|s| s[i].abs()).sum::<f64>() / n);
    run.x
        .iter()
        .zip(&run.truth.states)
        .map(|(x, z)| std::array::from_fn(|i| if mean[i] > 0.0 { (x[i] - z[i]).abs() / mean[i] } else { 0.0 }))
        .collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

pub fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let started = now_unix();
    let runs = a.runs.iter().map(|d| load_run(d, a.truth.as_deref())).collect::<Result<Vec<_>, _>>()?;
    let first = &runs[0];
    for r in &runs[1..] {
        if r.t.len() != first.t.len() || r.t.iter().zip(&first.t).any(|(u, v)| (u - v).abs() > 1e-9) {
            return Err(CliError::Validation(format!("runs {} and {} use different time grids", first.name, r.name)));
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;

    let path = a.out.join("trajectories.csv");
    let mut w = writer(&path)?;
    w.write_record(["run", "t_days", "signal", "estimate", "truth", "diff_to_first"]).map_err(csv_err(&path))?;
    for r in &runs {
        for k in 0..r.t.len() {
            for j in 0..N_OUTPUTS {
                let rec = [r.name.clone(), num(r.t[k]), OUTPUT_NAMES[j].into(), num(r.y[k][j]), num(r.truth.outputs[k][j]), num(r.y[k][j] - first.y[k][j])];
                w.write_record(&rec).map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let errors: Vec<Vec<[f64; N_STATES]>> = runs.iter().map(normalized_errors).collect();
    let l1: Vec<Vec<f64>> = errors.iter().map(|e| e.iter().map(|s| s.iter().sum()).collect()).collect();
    let path = a.out.join("l1_error.csv");
    let mut w = writer(&path)?;
    w.write_record(["run", "t_days", "l1", "diff_to_first"]).map_err(csv_err(&path))?;
    for (r, l) in runs.iter().zip(&l1) {
        for k in 0..r.t.len() {
            w.write_record([r.name.clone(), num(r.t[k]), num(l[k]), num(l[k] - l1[0][k])]).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = a.out.join("shares.csv");
    let mut w = writer(&path)?;
    w.write_record(["run", "state_1", "share_1", "state_2", "share_2", "state_3", "share_3", "share_rest"]).map_err(csv_err(&path))?;
    for (r, e) in runs.iter().zip(&errors) {
        let totals: [f64; N_STATES] = std::array::from_fn(|i| e.iter().map(|s| s[i]).sum());
        let sum: f64 = totals.iter().sum();
        let shares: Vec<f64> = totals.iter().map(|v| if sum > 0.0 { v / sum } else { 0.0 }).collect();
        let mut order: Vec<usize> = (0..N_STATES).collect();
        order.sort_by(|&i, &j| shares[j].total_cmp(&shares[i]).then(i.cmp(&j)));
        let top = &order[..3];
        let rest = if sum > 0.0 { 1.0 - top.iter().map(|&i| shares[i]).sum::<f64>() } else { 0.0 };
        let mut rec = vec![r.name.clone()];
        for &i in top {
            rec.push(STATE_NAMES[i].into());
            rec.push(num(shares[i]));
        }
        rec.push(num(rest));
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let names: Vec<String> = a.runs.iter().map(|d| d.display().to_string()).collect();
    RunManifest::new("compare", sha256_hex(names.join("\n").as_bytes()), None, started).finish(&a.out)?;
    println!("compared {} runs -> {}", runs.len(), a.out.display());
    Ok(())
}

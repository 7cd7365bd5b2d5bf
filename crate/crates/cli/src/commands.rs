use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use mrekf::adm1::{N_OUTPUTS, OUT_AC};
use mrekf::baselines::{run_alexander, run_larsen, run_recalculation};
use mrekf::config::RunConfig;
use mrekf::ekf::{run_ekf, FilterSettings, GaussianBelief, RunLog};
use mrekf::estimate::{adm1_scaling, Method, Tuning};
use mrekf::io;
use mrekf::model::{LinearSystemFile, Normalization};
use mrekf::multirate::run_multirate;
use mrekf::scenario::{Measurements, Scenario, ScenarioConfig, ScenarioError};
use mrekf::tuning::{
    evaluate, failure_fraction, lhs_sample, nis_series, nis_stats, rank, zoh_comparison, Criterion, NisRows, RunMetrics,
    RunStatus, TuningResult,
};

use crate::manifest::{now_unix, sha256_hex, RunManifest};
use crate::{CliError, EstimateArgs, MethodArg, ScenarioOverrides, SimulateArgs, TuneArgs};

/// Tuning used by `estimate` when neither the flag nor the config gives one.
pub const DEFAULT_TUNING: (f64, f64) = (0.1, 1.0);

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::from_json(&read_text(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
    }
}

fn apply_overrides(cfg: &mut ScenarioConfig, o: &ScenarioOverrides) -> Result<(), CliError> {
    if let Some(row) = o.scenario_row {
        let t = ScenarioConfig::table_row(row).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.delay_ac_hours = t.delay_ac_hours;
        cfg.delay_in_hours = t.delay_in_hours;
        cfg.k_theta = t.k_theta;
        cfg.k_x = t.k_x;
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.days, o.days);
    set(&mut cfg.delay_ac_hours, o.delay_ac);
    set(&mut cfg.delay_in_hours, o.delay_in);
    set(&mut cfg.k_sigma, o.k_sigma);
    set(&mut cfg.k_theta, o.pmm);
    set(&mut cfg.k_x, o.init_error);
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))
}

fn scenario_error(e: ScenarioError) -> CliError {
    match e {
        ScenarioError::Invalid(m) => CliError::Validation(m),
        ScenarioError::Ode(e) => CliError::Divergence(format!("truth simulation: {e}")),
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let started = now_unix();
    let mut cfg = load_config(a.config.as_deref())?;
    apply_overrides(&mut cfg.scenario, &a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.scenario.seed = seed;
    }
    let scn = Scenario::generate(&cfg.scenario).map_err(scenario_error)?;
    make_dir(&a.out)?;
    let config_json = cfg.to_json();
    write_string(&a.out.join("config.json"), &(config_json.clone() + "\n"))?;
    io::write_truth(create(&a.out.join("truth.csv"))?, &scn.truth)?;
    io::write_events(create(&a.out.join("events.csv"))?, &scn.measurements.events, N_OUTPUTS)?;
    io::write_feed(create(&a.out.join("feed.csv"))?, &scn.schedule)?;
    RunManifest::new("simulate", sha256_hex(config_json.as_bytes()), Some(cfg.scenario.seed), started).finish(&a.out)?;
    println!(
        "simulated {} days, {} events, {} laboratory values -> {}",
        cfg.scenario.days,
        scn.measurements.events.len(),
        scn.measurements.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_tuning(arg: &str) -> Result<Tuning, CliError> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { read_text(Path::new(arg))? };
    let t: Tuning = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("tuning: {e}")))?;
    t.validate().map_err(|e| CliError::Validation(format!("tuning: {e}")))?;
    Ok(t)
}

fn metrics_json(m: &RunMetrics) -> Value {
    let mut v = serde_json::to_value(m).expect("metrics serialize");
    // Wall time goes to the manifest so that metrics files are reproducible.
    v.as_object_mut().expect("metrics object").remove("wall_time");
    v
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    write_string(path, &(serde_json::to_string_pretty(v).expect("json") + "\n"))
}

pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let started = now_unix();
    let (events, n_out) = io::read_events(open(&a.events)?)?;
    let events_hash = sha256_hex(&fs::read(&a.events).map_err(|e| CliError::io(&a.events, e))?);
    make_dir(&a.out)?;
    if let Some(sys_path) = &a.linear_system {
        return estimate_linear(a, sys_path, events, n_out, &events_hash, started);
    }
    let method = match a.method {
        MethodArg::Mrekf => Method::Mrekf,
        MethodArg::Recalc => Method::Recalc,
        MethodArg::Ekf => Method::Ekf,
        MethodArg::Alexander | MethodArg::Larsen => {
            return Err(CliError::Validation(format!(
                "method {:?} is only defined for linear systems (pass --linear-system); \
                 its delayed correction relies on a constant transition matrix",
                a.method
            )
            .to_lowercase()))
        }
    };
    if n_out != N_OUTPUTS {
        return Err(CliError::Validation(format!("the digester has {N_OUTPUTS} outputs, the event file has {n_out}")));
    }
    let config_path: PathBuf = match &a.config {
        Some(p) => p.clone(),
        None => a.events.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let cfg = load_config(Some(&config_path))?;
    let tuning = match (&a.tuning, &cfg.tuning) {
        (Some(arg), _) => parse_tuning(arg)?,
        (None, Some(t)) => t.clone(),
        (None, None) => Tuning::uniform(DEFAULT_TUNING.0, DEFAULT_TUNING.1),
    };
    let mut scn = Scenario::generate(&cfg.scenario).map_err(scenario_error)?;
    scn.measurements = Measurements::from_events(events, cfg.scenario.dt()).map_err(scenario_error)?;
    let cutoff = a.cutoff_secs.map(Duration::from_secs_f64);
    let (metrics, est) = evaluate(&scn, &tuning, method, cutoff);

    let mut out = metrics_json(&metrics);
    let obj = out.as_object_mut().expect("metrics object");
    obj.insert("method".into(), json!(format!("{:?}", a.method).to_lowercase()));
    obj.insert("tuning".into(), serde_json::to_value(&tuning).expect("tuning"));
    if let Some(est) = &est {
        io::write_run_log(create(&a.out.join("run_log.csv"))?, &est.log, &adm1_scaling())?;
        io::write_updates(create(&a.out.join("updates.csv"))?, &est.log)?;
        io::write_truth(create(&a.out.join("truth.csv"))?, &scn.truth)?;
        obj.insert("max_augmentation".into(), json!(est.log.max_augmentation));
        if let Ok((e, z)) = zoh_comparison(&scn, est, OUT_AC) {
            obj.insert("ac_nrmse_estimate".into(), json!(e));
            obj.insert("ac_nrmse_zoh".into(), json!(z));
        }
    }
    write_json(&a.out.join("metrics.json"), &out)?;
    let digest = sha256_hex(format!("{}|{}|{:?}|{}", cfg.to_json(), serde_json::to_string(&tuning).unwrap(), a.method, events_hash).as_bytes());
    RunManifest::new("estimate", digest, Some(cfg.scenario.seed), started).finish(&a.out)?;
    match metrics.status {
        RunStatus::Ok => {
            println!("{:?}: nrmse_x_l1 {:.4}, nrmse_y_l1 {:.4}, boulkroune {:.4}", a.method, metrics.nrmse_x_l1, metrics.nrmse_y_l1, metrics.boulkroune);
            Ok(())
        }
        s => Err(CliError::Divergence(format!("{}: {}", s.as_str(), metrics.message.unwrap_or_default()))),
    }
}

fn estimate_linear(
    a: &EstimateArgs,
    sys_path: &Path,
    events: Vec<mrekf::events::MeasurementEvent>,
    n_out: usize,
    events_hash: &str,
    started: f64,
) -> Result<(), CliError> {
    let text = read_text(sys_path)?;
    let file: LinearSystemFile = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", sys_path.display())))?;
    let (sys, x0, p0) = file.into_parts().map_err(|e| CliError::Validation(format!("{}: {e}", sys_path.display())))?;
    if sys.c.nrows() != n_out {
        return Err(CliError::Validation(format!("the linear system has {} outputs, the event file has {n_out}", sys.c.nrows())));
    }
    let last = events.last().map_or(0.0, |e| e.time());
    let n_steps = (last / sys.dt).round() as usize;
    let mut settings = FilterSettings::new(0.0, sys.dt, n_steps, sys.q.clone(), sys.r.clone());
    settings.deadline = a.cutoff_secs.map(|s| std::time::Instant::now() + Duration::from_secs_f64(s));
    let initial = GaussianBelief::new(x0, p0);
    let result: Result<RunLog, _> = match a.method {
        MethodArg::Mrekf => run_multirate(&sys, &initial, &events, &settings),
        MethodArg::Recalc => run_recalculation(&sys, &initial, &events, &settings),
        MethodArg::Ekf => run_ekf(&sys, &initial, &events, &settings),
        MethodArg::Alexander => run_alexander(&sys, &initial, &events, &settings),
        MethodArg::Larsen => run_larsen(&sys, &initial, &events, &settings),
    };
    let method = format!("{:?}", a.method).to_lowercase();
    let digest = sha256_hex(format!("{}|{method}|{events_hash}", sha256_hex(text.as_bytes())).as_bytes());
    let outcome = match result {
        Ok(log) => {
            let scale = Normalization::identity(sys.n_states(), n_out);
            io::write_run_log(create(&a.out.join("run_log.csv"))?, &log, &scale)?;
            io::write_updates(create(&a.out.join("updates.csv"))?, &log)?;
            let nis = nis_stats(&nis_series(&log, 0.0, NisRows::All), 0.05).ok();
            write_json(
                &a.out.join("metrics.json"),
                &json!({"method": method, "status": "ok", "max_augmentation": log.max_augmentation, "nis": nis}),
            )?;
            Ok(())
        }
        Err(e) => {
            let status = if matches!(e, mrekf::ekf::FilterError::Timeout { .. }) { "timeout" } else { "diverged" };
            write_json(&a.out.join("metrics.json"), &json!({"method": method, "status": status, "message": e.to_string()}))?;
            Err(match e {
                mrekf::ekf::FilterError::Invalid(m) => CliError::Validation(m),
                other => CliError::Divergence(other.to_string()),
            })
        }
    };
    RunManifest::new("estimate", digest, None, started).finish(&a.out)?;
    if outcome.is_ok() {
        println!("{method} on linear system: ok");
    }
    outcome
}

const COMPLETED: &str = "completed.jsonl";
const SWEEP: &str = "sweep.json";

fn read_completed(path: &Path) -> Result<Vec<TuningResult>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // A run killed mid-write leaves a truncated last line; it is simply redone.
        match serde_json::from_str::<TuningResult>(&line) {
            Ok(r) => out.push(r),
            Err(e) => eprintln!("{}: skipping line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

pub fn tune(a: &TuneArgs) -> Result<(), CliError> {
    let started = now_unix();
    if a.n == 0 {
        return Err(CliError::Validation("--n must be at least 1".into()));
    }
    if !(a.cutoff_secs > 0.0) {
        return Err(CliError::Validation("--cutoff-secs must be positive".into()));
    }
    let mut cfg = load_config(a.scenario.as_deref())?;
    apply_overrides(&mut cfg.scenario, &a.overrides)?;
    let seed = a.seed.unwrap_or(cfg.scenario.seed);
    make_dir(&a.out)?;
    let config_json = cfg.to_json();
    let sweep = json!({"n": a.n, "seed": seed, "cutoff_secs": a.cutoff_secs, "config_sha256": sha256_hex(config_json.as_bytes())});
    let sweep_path = a.out.join(SWEEP);
    if sweep_path.exists() {
        let old: Value = serde_json::from_str(&read_text(&sweep_path)?).map_err(|e| CliError::Validation(format!("{}: {e}", sweep_path.display())))?;
        if old != sweep {
            return Err(CliError::Validation(format!(
                "{} holds a different sweep ({old}); use a fresh --out directory",
                a.out.display()
            )));
        }
    }
    write_json(&sweep_path, &sweep)?;
    write_string(&a.out.join("config.json"), &(config_json.clone() + "\n"))?;

    let samples = lhs_sample(a.n, 1e-2, 1e2, seed);
    let completed_path = a.out.join(COMPLETED);
    let mut previous = read_completed(&completed_path)?;
    previous.retain(|r| r.id < a.n && r.sample == samples[r.id]);
    previous.sort_by_key(|r| r.id);
    previous.dedup_by_key(|r| r.id);
    let skip: HashSet<usize> = previous.iter().map(|r| r.id).collect();
    if !skip.is_empty() {
        eprintln!("resuming: {} of {} tunings already done", skip.len(), a.n);
    }
    // Rewrite so the file holds exactly the valid results before appending.
    {
        let mut w = create(&completed_path)?;
        for r in &previous {
            writeln!(w, "{}", serde_json::to_string(r).expect("result")).map_err(|e| CliError::io(&completed_path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&completed_path, e))?;
    }

    let scn = Scenario::generate(&cfg.scenario).map_err(scenario_error)?;
    let file = OpenOptions::new().append(true).open(&completed_path).map_err(|e| CliError::io(&completed_path, e))?;
    let sink = Mutex::new((file, skip.len(), None::<String>));
    let total = a.n;
    let on_done = |r: &TuningResult| {
        let mut g = sink.lock().expect("progress sink");
        g.1 += 1;
        let line = serde_json::to_string(r).expect("result");
        if let Err(e) = writeln!(g.0, "{line}").and_then(|_| g.0.flush()) {
            g.2.get_or_insert(e.to_string());
        }
        eprintln!(
            "[{}/{total}] tuning {} {} nrmse_x {:.3} boulkroune {:.3} ({:.2} s)",
            g.1,
            r.id,
            r.metrics.status.as_str(),
            r.metrics.nrmse_x_l1,
            r.metrics.boulkroune,
            r.metrics.wall_time
        );
    };
    let jobs = a.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let fresh = mrekf::tuning::grid_search(&scn, &samples, Duration::from_secs_f64(a.cutoff_secs), jobs, &skip, &on_done);
    if let Some(e) = sink.into_inner().expect("progress sink").2 {
        return Err(CliError::Io(format!("{}: {e}", completed_path.display())));
    }
    let mut results = previous;
    results.extend(fresh);
    results.sort_by_key(|r| r.id);

    io::write_summands(create(&a.out.join("summands.csv"))?, &results)?;
    for c in Criterion::ALL {
        io::write_ranking(create(&a.out.join(io::ranking_file_name(c)))?, &rank(&results, c))?;
    }
    RunManifest::new("tune", sha256_hex(sweep.to_string().as_bytes()), Some(seed), started).finish(&a.out)?;
    println!("{} tunings, failure fraction {:.3}", results.len(), failure_fraction(&results));
    for c in Criterion::ALL {
        if let Some(best) = rank(&results, c).first() {
            println!("best {}: tuning {} ({:.4})", c.as_str(), best.id, c.value(&best.metrics));
        }
    }
    Ok(())
}

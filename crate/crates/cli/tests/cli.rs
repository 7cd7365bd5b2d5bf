use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrekf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrekf")).args(args).env_remove("MRKF_SEED").output().expect("binary runs")
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_key_names_key_and_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"version": 1, "scenario": {"delay_ac_hours": 24, "delay_in_hours": 12, "k_sigma": 1, "k_theta": 0.2}}"#).unwrap();
    let o = mrekf(&["simulate", "--config", &p(&cfg), "--out", &p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("scenario.k_x") && err.contains("0, 0.5, 1, 2"), "{err}");
}

#[test]
fn bad_flag_value_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mrekf(&["simulate", "--days", "1", "--init-error=-1", "--out", &p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("k_x"));
}

#[test]
fn simulate_estimate_compare_round() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let o = mrekf(&["simulate", "--days", "2", "--scenario-row", "3", "--seed", "5", "--out", &p(&sim)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = fs::read_to_string(sim.join("config.json")).unwrap();
    assert!(config.contains("\"delay_ac_hours\": 24.0") && config.contains("\"seed\": 5"));
    let events = p(&sim.join("events.csv"));

    let refused = mrekf(&["estimate", "--events", &events, "--method", "alexander", "--out", &p(&tmp.path().join("x"))]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(stderr(&refused).contains("linear"));

    let a = tmp.path().join("a");
    let o = mrekf(&["estimate", "--events", &events, "--tuning", r#"{"q": [0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1], "k_r": 1}"#, "--out", &p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "ok");
    assert!(m.get("wall_time").is_none());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["metrics.json", "run_log.csv", "truth.csv", "updates.csv"]);

    let b = tmp.path().join("b");
    let o = mrekf(&["estimate", "--events", &events, "--method", "recalc", "--out", &p(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mr: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("metrics.json")).unwrap()).unwrap();
    let (x, y) = (m["nrmse_x_l1"].as_f64().unwrap(), mr["nrmse_x_l1"].as_f64().unwrap());
    assert!((x - y).abs() < 0.5 * x.max(y), "mrekf {x} vs recalc {y}");

    let cmp = tmp.path().join("cmp");
    let o = mrekf(&["compare", "--runs", &p(&a), &p(&a), &p(&b), "--out", &p(&cmp)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let l1 = fs::read_to_string(cmp.join("l1_error.csv")).unwrap();
    let rows: Vec<&str> = l1.lines().skip(1).collect();
    let per_run = rows.len() / 3;
    assert!(rows[per_run..2 * per_run].iter().all(|r| r.ends_with(",0")), "identical runs must not differ");
    let shares = fs::read_to_string(cmp.join("shares.csv")).unwrap();
    for line in shares.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let total: f64 = [2, 4, 6, 7].iter().map(|&i| f[i].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{line}");
    }
}

#[test]
fn compare_rejects_mismatched_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for days in ["1", "2"] {
        let sim = tmp.path().join(format!("sim{days}"));
        assert!(mrekf(&["simulate", "--days", days, "--out", &p(&sim)]).status.success());
        let est = tmp.path().join(format!("est{days}"));
        assert!(mrekf(&["estimate", "--events", &p(&sim.join("events.csv")), "--out", &p(&est)]).status.success());
        runs.push(p(&est));
    }
    let o = mrekf(&["compare", "--runs", &runs[0], &runs[1], "--out", &p(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grid"));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_mrekf"))
            .args(["simulate", "--days", "1", "--out", &p(&tmp.path().join(dir))])
            .env("MRKF_SEED", seed)
            .output()
            .unwrap()
    };
    assert!(run("a", "17").status.success());
    assert!(mrekf(&["simulate", "--days", "1", "--seed", "17", "--out", &p(&tmp.path().join("b"))]).status.success());
    assert!(run("c", "18").status.success());
    let ev = |d: &str| fs::read(tmp.path().join(d).join("events.csv")).unwrap();
    assert_eq!(ev("a"), ev("b"));
    assert_ne!(ev("a"), ev("c"));
}

#[test]
fn tune_single_row_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(&tmp.path().join("t"));
    let args = ["tune", "--days", "1", "--n", "1", "--seed", "4", "--jobs", "1", "--out", &out];
    let o = mrekf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["ranking_nrmse_x.csv", "ranking_nrmse_y.csv", "ranking_boulkroune.csv"] {
        let text = fs::read_to_string(tmp.path().join("t").join(name)).unwrap();
        assert_eq!(text.lines().count(), 2, "{name}");
        assert!(text.starts_with("rank,tuning_id,q1,"));
    }
    let again = mrekf(&args);
    assert!(again.status.success());
    assert!(stderr(&again).contains("1 of 1 tunings already done"));
    let clash = mrekf(&["tune", "--days", "1", "--n", "2", "--seed", "4", "--out", &out]);
    assert_eq!(clash.status.code(), Some(2));
}

#[test]
fn linear_system_methods_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let sys = tmp.path().join("sys.json");
    fs::write(
        &sys,
        r#"{"a": [[0.95, 0.1], [-0.05, 0.9]], "c": [[1, 0], [0.3, 1]], "q": [[0.02, 0], [0, 0.05]],
            "r": [[0.1, 0], [0, 0.2]], "x0": [0.5, -0.2], "p0": [[1, 0], [0, 1]]}"#,
    )
    .unwrap();
    let events = tmp.path().join("events.csv");
    let mut text = String::from("t_days,kind,id,signal_mask,v1,v2\n");
    for k in 1..=20 {
        text.push_str(&format!("{k},online,,10,{},\n", (k as f64 * 0.3).sin()));
        if k == 4 {
            text.push_str("4,sample,1,01,,\n");
        }
        if k == 7 {
            text.push_str("7,return,1,01,,0.25\n");
        }
    }
    fs::write(&events, text).unwrap();
    let mut logs = Vec::new();
    for method in ["mrekf", "recalc", "alexander", "larsen"] {
        let out = tmp.path().join(method);
        let o = mrekf(&["estimate", "--events", &p(&events), "--linear-system", &p(&sys), "--method", method, "--out", &p(&out)]);
        assert!(o.status.success(), "{method}: {}", stderr(&o));
        logs.push(fs::read_to_string(out.join("run_log.csv")).unwrap());
    }
    let last = |s: &str| s.lines().last().unwrap().split(',').take(3).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
    let reference = last(&logs[1]);
    for log in &logs {
        let v = last(log);
        assert!(v.iter().zip(&reference).all(|(a, b)| (a - b).abs() < 1e-10), "{v:?} vs {reference:?}");
    }
}

#[test]
fn malformed_events_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let events = tmp.path().join("e.csv");
    fs::write(&events, "t_days,kind,id,signal_mask,v1\n0,bogus,,1,1\n").unwrap();
    let o = mrekf(&["estimate", "--events", &p(&events), "--out", &p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let missing = mrekf(&["estimate", "--events", &p(&tmp.path().join("nope.csv")), "--out", &p(&tmp.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(4));
}

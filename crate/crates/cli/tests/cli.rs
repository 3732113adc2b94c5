use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn parkdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parkdyn"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = parkdyn(args);
    assert!(
        out.status.success(),
        "parkdyn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scenario(dir: &Path) -> String {
    let p = dir.join("scenario.json");
    fs::write(&p, r#"{"parkers": 400, "passers": 600, "captive_spots": 150}"#).unwrap();
    p.display().to_string()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn micro_run_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "micro",
            "run",
            "--config",
            &cfg,
            "--seeds",
            "3,5",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for seed in ["seed_3", "seed_5"] {
        for f in ["events.csv", "nfd.csv", "metrics.json"] {
            assert_eq!(
                read(a.join(seed).join(f)),
                read(b.join(seed).join(f)),
                "{seed}/{f} differs"
            );
        }
    }
    assert_ne!(read(a.join("seed_3/events.csv")), read(a.join("seed_5/events.csv")));
    assert_eq!(fs::read_dir(&a).unwrap().count(), 2);
}

#[test]
fn calibrate_then_macro_run_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    ok(&["micro", "run", "--config", &cfg, "--seeds", "0..4", "--out", out_s]);
    ok(&["calibrate", "--runs", out_s, "--out", out_s]);
    let report: serde_json::Value = serde_json::from_slice(&read(out.join("calibration.json"))).unwrap();
    for key in ["nfd", "moving_distances", "distance_to_park"] {
        assert!(report.get(key).is_some(), "calibration lacks {key}");
    }
    let cal = out.join("calibration.json");
    let cal = cal.to_str().unwrap();
    ok(&["macro", "run", "--config", &cfg, "--calibration", cal, "--out", out_s]);
    let csv = String::from_utf8(read(out.join("macro_run.csv"))).unwrap();
    assert!(csv.starts_with("t,n_m_on,"));
    assert_eq!(csv.lines().count(), 1 + 1 + 360);
    ok(&[
        "validate",
        "--config",
        &cfg,
        "--calibration",
        cal,
        "--seeds",
        "0..2",
        "--out",
        out_s,
    ]);
    assert!(out.join("validation.json").exists());
}

#[test]
fn calibrate_rejects_empty_event_logs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("seed_0");
    fs::create_dir_all(&run).unwrap();
    fs::write(
        run.join("events.csv"),
        "vehicle_id,t_s,from_family,to_family,link_id,dist_km,occ_on,occ_off\n",
    )
    .unwrap();
    let mut nfd = String::from("t_s,K,Q,V,n\n");
    for i in 0..100 {
        let n = i as f64;
        nfd.push_str(&format!(
            "{},{},{},{},{}\n",
            60 * (i + 1),
            n / 10.0,
            0.0,
            40.0 - 0.1 * n,
            n
        ));
    }
    fs::write(run.join("nfd.csv"), nfd).unwrap();
    let out = parkdyn(&[
        "calibrate",
        "--runs",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn compare_needs_a_calibration_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = parkdyn(&["compare", "--seeds", "0", "--out", d]);
    assert!(!out.status.success());
    let missing = dir.path().join("nope.json");
    let out = parkdyn(&[
        "compare",
        "--calibration",
        missing.to_str().unwrap(),
        "--seeds",
        "0",
        "--out",
        d,
    ]);
    assert!(!out.status.success());
}

#[test]
fn compare_uses_the_same_seeds_for_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    ok(&["calibrate", "--config", &cfg, "--seeds", "0..4", "--out", out_s]);
    let cal = out.join("calibration.json");
    ok(&[
        "compare",
        "--config",
        &cfg,
        "--calibration",
        cal.to_str().unwrap(),
        "--modes",
        "no-price,mpc",
        "--seeds",
        "7,8",
        "--out",
        out_s,
    ]);
    let mut r = csv::Reader::from_path(out.join("compare.csv")).unwrap();
    let rows: Vec<(String, u64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].parse().unwrap())
        })
        .collect();
    let seeds = |mode: &str| rows.iter().filter(|r| r.0 == mode).map(|r| r.1).collect::<Vec<_>>();
    assert_eq!(seeds("no_price"), vec![7, 8]);
    assert_eq!(seeds("mpc"), vec![7, 8]);
}

#[test]
fn theory_sweep_reports_all_checks_passing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let stdout = ok(&["theory", "sweep", "--cruise-speeds", "10,40", "--step", "1", "--out", d]);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 4);
    let checks: serde_json::Value = serde_json::from_slice(&read(dir.path().join("theory_check.json"))).unwrap();
    assert!(checks.as_array().unwrap().iter().all(|c| c["pass"] == true));
    let rows = String::from_utf8(read(dir.path().join("envelopes.csv")))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 2 * 2 * 101);
}

#[test]
fn net_build_round_trips_through_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["net", "build", "--out", d]);
    let net = dir.path().join("network.json");
    let stdout = ok(&["net", "check", "--network", net.to_str().unwrap(), "--out", d]);
    assert!(stdout.contains("\"on_street_spots\":300"));
}

#[test]
fn estimator_fit_from_observations() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.csv");
    let mut text = String::from("occupancy,value\n");
    for i in 0..10 {
        let o = 0.5 + 0.05 * i as f64;
        text.push_str(&format!("{o},{}\n", 0.02 * (4.0 * o).exp()));
    }
    fs::write(&obs, text).unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "estimators",
        "fit",
        "--observations",
        obs.to_str().unwrap(),
        "--model",
        "exp-distance",
        "--out",
        d,
    ]);
    let fit: serde_json::Value = serde_json::from_slice(&read(dir.path().join("fit.json"))).unwrap();
    let m = &fit[0]["report"]["model"];
    assert!((m["b"].as_f64().unwrap() - 4.0).abs() < 1e-9);
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(!parkdyn(&["micro", "run", "--seeds", "", "--out", d]).status.success());
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"parkers": "many"}"#).unwrap();
    assert!(
        !parkdyn(&["micro", "run", "--config", bad.to_str().unwrap(), "--out", d])
            .status
            .success()
    );
}

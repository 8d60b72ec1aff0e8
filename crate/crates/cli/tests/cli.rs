// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use power_attest::protocol::transcript::read_transcript;
use power_attest::synth::{default_profiles, profiles_to_json, render_all, TriggerConfig};
use power_attest::trace::{encode_capture, load_trace, Trace};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_power-attest"));
    c.env_remove("POWER_ATTEST_CONFIG");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

/// The two shortest bundled programs.
fn small_profiles(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let profiles: Vec<_> = default_profiles().into_iter().take(2).collect();
    fs::write(&path, profiles_to_json(&profiles).unwrap()).unwrap();
    path
}

#[test]
fn secparam_table_and_levels() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["secparam", "--table", "--json"], dir.path());
    assert_eq!(code(&out), 0);
    let rows = json(&out);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[0]["n"].as_u64() < w[1]["n"].as_u64());
        assert!(w[0]["x_th"].as_u64() < w[1]["x_th"].as_u64());
    }
    let x: Vec<u64> = rows.iter().map(|r| r["x_th"].as_u64().unwrap()).collect();
    assert_eq!(x, [21, 45, 94, 191]);

    let out = run(&["secparam", "--p-alpha", "0.082", "--p-beta", "0.69", "--level", "32"], dir.path());
    let p = json(&out);
    assert_eq!((p["n"].as_u64(), p["x_th"].as_u64()), (Some(52), Some(21)));

    let out = run(&["secparam", "--n", "243"], dir.path());
    let p = json(&out);
    assert_eq!(p["x_th"].as_u64(), Some(94));
    assert!((p["p_cheat"].as_f64().unwrap() / 3.72e-39 - 1.0).abs() < 1e-2);

    let out = run(&["secparam", "--p-alpha", "0.7", "--p-beta", "0.6", "--level", "32"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn config_validation_and_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"percentile": 200}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["--config", bad.to_str().unwrap(), "pipeline", "--out", out_dir.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
    assert_eq!(err["exit_code"], 2);
    let written: Value = serde_json::from_slice(&fs::read(out_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(written["stage"], "config");
    // Nothing but the error report.
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 1);

    // The environment variable and the working-directory file are both
    // consulted.
    let out = bin().args(["secparam", "--table"]).env("POWER_ATTEST_CONFIG", &bad).output().unwrap();
    assert_eq!(code(&out), 2);
    fs::write(dir.path().join("power-attest.json"), r#"{"unknown_key": 1}"#).unwrap();
    let out = run(&["secparam", "--table"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
    fs::write(dir.path().join("power-attest.json"), r#"{"security_level": 64}"#).unwrap();
    let out = run(&["secparam"], dir.path());
    assert_eq!(json(&out)["n"].as_u64(), Some(114));
}

#[test]
fn decode_recovers_samples_and_triggers() {
    let dir = tempfile::tempdir().unwrap();
    let trigger = TriggerConfig::default();
    let rendered = render_all(&default_profiles()[..1], &trigger).unwrap();
    // Captures hold ADC codes.
    let t = rendered[0].trace(9);
    let codes = t.samples().iter().map(|v| v.round().clamp(0.0, 4095.0)).collect();
    let expected = Trace::new(codes).unwrap().with_triggers(t.triggers().unwrap().start, t.triggers().unwrap().end).unwrap();
    let triggers = expected.triggers().unwrap();
    let raw = dir.path().join("cap.xadc");
    fs::write(&raw, encode_capture(&expected).unwrap()).unwrap();
    let trc = dir.path().join("cap.trc");
    let out = run(&["decode", raw.to_str().unwrap(), trc.to_str().unwrap(), "--detect-triggers"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let got = load_trace(&trc).unwrap();
    assert_eq!(got.samples(), expected.samples());
    let found = got.triggers().unwrap();
    assert!(found.start.abs_diff(triggers.start) <= trigger.tolerance_samples);
    assert!(found.end.abs_diff(triggers.end) <= trigger.tolerance_samples);

    fs::write(&raw, [0u8; 7]).unwrap();
    let out = run(&["decode", raw.to_str().unwrap(), trc.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn corpus_to_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    let profiles = small_profiles(dir.path());
    let profiles = profiles.to_str().unwrap();

    let out = run(&["synth", "--profiles", profiles, "--count", "3", "--seed", "1", "--out-dir", &d("build")], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("build/crc-lite/00002.trc").exists());
    let out = run(&["synth", "--profiles", profiles, "--count", "8", "--seed", "2", "--out-dir", &d("cal"), "--lazy"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(!dir.path().join("cal/crc-lite").exists());
    let out = run(&["synth", "--profiles", profiles, "--count", "6", "--seed", "3", "--out-dir", &d("test"), "--lazy"], dir.path());
    assert_eq!(code(&out), 0);

    for id in ["crc-lite", "fir-filter"] {
        let tpl = d(&format!("tpl/{id}.tpl"));
        let out = run(&["template", "--manifest", &d("build/manifest.jsonl"), "--program", id, "--bucket", "17", "--out", &tpl], dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json(&out)["trace_count"], 3);
        let out = run(&["calibrate", "--template", &tpl, "--manifest", &d("cal/manifest.jsonl")], dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json(&out)["calibration_traces"], 8);
    }

    // Single traces: the exit status follows the decision.
    let crc = d("tpl/crc-lite.tpl");
    for (trace, own) in [("build/crc-lite/00000.trc", true), ("build/fir-filter/00000.trc", false)] {
        let out = run(&["attest", "--template", &crc, "--trace", &d(trace)], dir.path());
        let report = json(&out);
        let passed = report["passed"].as_bool().unwrap();
        assert_eq!(code(&out), if passed { 0 } else { 1 });
        if !own {
            assert!(!passed, "{report}");
        }
    }

    let out = run(&["attest-multi", "--template", &crc, "--manifest", &d("test/manifest.jsonl"), "--x-th", "0"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["trace_count"], 12);
    let out = run(&["attest-multi", "--template", &crc, "--manifest", &d("test/manifest.jsonl"), "--x-th", "13"], dir.path());
    assert_eq!(code(&out), 2);

    let out = run(
        &["eval", "--templates", &d("tpl"), "--manifest", &d("test/manifest.jsonl"), "--out", &d("report.json"), "--csv", &d("report.csv")],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    for t in report["templates"].as_array().unwrap() {
        let s = &t["stats"];
        assert_eq!(s["fp"].as_u64().unwrap() + s["tn"].as_u64().unwrap(), 6);
        assert_eq!(s["tp"].as_u64().unwrap() + s["fn"].as_u64().unwrap(), 6);
    }
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("program,corr_thres,max_fp_program,max_fp_count,precision,recall,f1"));

    // Plot data.
    let rows = |path: &str| -> BTreeMap<String, Vec<usize>> {
        let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for l in fs::read_to_string(dir.path().join(path)).unwrap().lines().skip(1) {
            let f: Vec<&str> = l.split(',').collect();
            m.entry(f[0].to_owned()).or_default().push(f[1].parse().unwrap());
        }
        m
    };
    let trc = d("build/crc-lite/00001.trc");
    let trace = load_trace(&trc).unwrap();
    let tr = trace.triggers().unwrap();
    assert_eq!(code(&run(&["plot", "--trace", &trc, "--out", &d("plot/trace.csv"), "--stride", "64"], dir.path())), 0);
    assert_eq!(rows("plot/trace.csv")["trigger"], vec![tr.start, tr.end]);
    for (trc, name) in [(trc.as_str(), "own"), (d("build/fir-filter/00001.trc").as_str(), "foreign")] {
        let path = format!("plot/{name}.csv");
        assert_eq!(code(&run(&["plot", "--trace", trc, "--template", &crc, "--out", &d(&path)], dir.path())), 0);
        let m = rows(&path);
        assert_eq!(m["trace"].len(), 1 << 17);
        assert_eq!(m["trace"], m["template"]);
    }
}

#[test]
fn protocol_sim_runs_each_attack() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = small_profiles(dir.path());
    let base = |extra: &[&str]| {
        let mut a = vec!["protocol-sim", "--profiles", profiles.to_str().unwrap(), "--app", "crc-lite", "--build-traces", "60"];
        a.extend_from_slice(extra);
        a.into_iter().map(str::to_owned).collect::<Vec<_>>()
    };
    let go = |extra: &[&str]| {
        let args = base(extra);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&args, dir.path())
    };

    let t1 = dir.path().join("t1.jsonl");
    let t2 = dir.path().join("t2.jsonl");
    let out = go(&["--n", "4", "--x-th", "1", "--sessions", "3", "--seed", "5", "--transcript", t1.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!((r["accepted"].as_u64(), r["n"].as_u64()), (Some(3), Some(4)));
    let out = go(&["--n", "4", "--x-th", "1", "--sessions", "3", "--seed", "5", "--threaded", "--transcript", t2.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
    let (_, entries) = read_transcript(fs::read(&t1).unwrap().as_slice()).unwrap();
    assert!(entries.iter().all(|e| e.accepted));
    assert_eq!(entries.iter().filter(|e| e.message_tag == "M7").count(), 3);

    let out = go(&["--attack", "subst-meas", "--n", "2", "--sessions", "6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let branches = json(&out)["branches"].as_array().unwrap().clone();
    assert_eq!(branches.len(), 3);
    for b in &branches {
        assert_eq!(b["aborted"], b["sessions"]);
        assert_eq!(b["reasons"][b["expected"].as_str().unwrap()], b["sessions"]);
    }

    let out = go(&["--attack", "false-result", "--n", "1", "--x-th", "0", "--sessions", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = go(&["--attack", "subst-app", "--n", "1", "--x-th", "0", "--sessions", "5"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["accepted"], 5);
    let out = go(&["--attack", "subst-app", "--n", "8", "--x-th", "6", "--sessions", "5", "--impostor", "fir-filter=1"]);
    assert_eq!(json(&out)["accepted"], 0);

    let out = go(&["--app", "nope", "--sessions", "1"]);
    assert_eq!(code(&out), 2);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = small_profiles(dir.path());
    let config = dir.path().join("config.json");
    let cfg = serde_json::json!({
        "seed": 77,
        "pipeline": {
            "profiles": profiles,
            "build_traces": 24,
            "calibration_traces": 24,
            "eval_traces": 12,
            "sessions": 3,
            "threads": 3
        }
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["--config", config.to_str().unwrap(), "pipeline", "--out", out_dir.to_str().unwrap()], dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let summary = json(&out);
        assert_eq!(summary["protocol"]["accepted"], 3);
        assert_eq!(summary["secparam"]["n"], 52);
        trees.push(tree(&out_dir));
    }
    assert_eq!(trees[0], trees[1]);
    for f in ["profiles.json", "templates/crc-lite.tpl", "eval/report.json", "eval/report.csv", "plots/fir-filter.csv", "secparam.json", "table.txt", "protocol/transcript.jsonl", "summary.json"] {
        assert!(trees[0].contains_key(Path::new(f)), "{f}");
    }
    assert!(!trees[0].contains_key(Path::new("error.json")));
}

#[test]
fn trace_without_triggers_is_located_for_attest() {
    let dir = tempfile::tempdir().unwrap();
    let rendered = render_all(&default_profiles()[..1], &TriggerConfig::default()).unwrap();
    let bare: Trace = rendered[0].trace(3).without_triggers();
    let path = dir.path().join("bare.trc");
    power_attest::trace::save_trace(&path, &bare).unwrap();
    let out = run(&["plot", "--trace", path.to_str().unwrap(), "--out", dir.path().join("p.csv").to_str().unwrap(), "--stride", "4096"], dir.path());
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert!(!csv.contains("trigger,"));
}

//! Golden invocations of the `plbilevel` binary: exit codes, written files
//! and printed summaries.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn plbilevel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plbilevel"))
        .args(args)
        .current_dir(dir)
        .env_remove("PLBILEVEL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

const QUAD_RUN: &str = r#"{"seed": 7,
    "problem": {"generate": {"family": "quad", "d": 10, "p": 10}},
    "solver": {"name": "mgbio", "horizon": 300}}"#;

#[test]
fn gen_quad_reports_spectrum_in_window() {
    let dir = tempfile::tempdir().unwrap();
    let o = plbilevel(dir.path(), &["gen", "quad", "--d", "10", "--p", "10", "--mu", "1", "--lg", "4", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("Q:")).expect("Q summary");
    let inner = &line[line.find('[').unwrap() + 1..line.find(']').unwrap()];
    let bounds: Vec<f64> = inner.split(", ").map(|v| v.parse().unwrap()).collect();
    assert!(bounds[0] >= 1.0 && bounds[1] <= 4.0, "{line}");
    assert!(dir.path().join("out/quad-seed7.json").is_file());
    assert!(dir.path().join("out/quad-seed7.bin").is_file());
}

#[test]
fn gen_plgame_experiment_regime_has_rank_l() {
    let dir = tempfile::tempdir().unwrap();
    let o = plbilevel(
        dir.path(),
        &["gen", "plgame", "--d", "50", "--l", "48", "--n", "2500", "--seed", "7", "--out", "pl.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("P: 50x50, rank 48"), "{text}");
    assert!(text.contains("Q: 50x50, rank 48"), "{text}");
    assert!(dir.path().join("pl.json").is_file());
}

#[test]
fn gen_sensing_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = plbilevel(dir.path(), &["gen", "sensing", "--d", "50", "--r", "3", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("n = 1000 (train 400, validation 600)"), "{}", stdout(&o));
}

#[test]
fn gen_rejects_foreign_and_invalid_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = plbilevel(dir.path(), &["gen", "sensing", "--l", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--l"), "{}", stderr(&o));
    let o = plbilevel(dir.path(), &["gen", "plgame", "--d", "5", "--l", "5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = plbilevel(dir.path(), &["gen", "cubic"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn generated_instance_loads_into_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = plbilevel(dir.path(), &["gen", "quad", "--d", "4", "--p", "3", "--seed", "2", "--out", "inst/q.json"]);
    assert_eq!(code(&o), 0);
    write(
        dir.path(),
        "load.json",
        r#"{"problem": {"load": "inst/q.json"}, "solver": {"name": "mgbio", "horizon": 20}}"#,
    );
    let o = plbilevel(dir.path(), &["run", "--config", "load.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    write(
        dir.path(),
        "missing.json",
        r#"{"problem": {"load": "inst/none.json"}, "solver": {"name": "mgbio"}}"#,
    );
    let o = plbilevel(dir.path(), &["run", "--config", "missing.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("problem.load"), "{}", stderr(&o));
}

#[test]
fn run_is_byte_identical_per_seed_and_header_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "q.json", QUAD_RUN);
    for out in ["a", "b"] {
        let o = plbilevel(dir.path(), &["run", "--config", "q.json", "--seed", "7", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("final grad_map_norm"), "{}", stdout(&o));
    }
    let a = fs::read(dir.path().join("a/mgbio-seed7.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/mgbio-seed7.csv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a/mgbio-seed7.header.json")).unwrap(),
        fs::read(dir.path().join("b/mgbio-seed7.header.json")).unwrap()
    );
    let o = plbilevel(dir.path(), &["run", "--config", "a/mgbio-seed7.header.json", "--out", "c"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(a, fs::read(dir.path().join("c/mgbio-seed7.csv")).unwrap());
}

#[test]
fn run_overrides_are_recorded_in_the_header() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "q.json", QUAD_RUN);
    let o = plbilevel(
        dir.path(),
        &[
            "run", "--config", "q.json", "--seed", "3", "--horizon", "12", "--gamma", "0.02", "--lambda", "0.03",
            "--batch", "4", "--name", "tuned", "--gnuplot",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/tuned.header.json")).unwrap()).unwrap();
    assert_eq!(header["seed"], 3);
    assert_eq!(header["rows"], 12);
    assert_eq!(header["config"]["solver"]["gamma"], 0.02);
    assert_eq!(header["config"]["solver"]["lambda"], 0.03);
    assert_eq!(header["config"]["solver"]["batch"], 4);
    // The config fixes the problem seed at 7 only implicitly, so the override
    // reseeds the instance too.
    assert_eq!(header["config"]["problem"]["generate"]["seed"], 3);
    let script = fs::read_to_string(dir.path().join("out/tuned.gp")).unwrap();
    assert!(script.contains("\"tuned.csv\" using 1:3"), "{script}");
}

#[test]
fn run_json_format() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "q.json",
        r#"{"problem": {"generate": {"family": "quad", "d": 3, "p": 2}},
            "solver": {"name": "mgbio", "horizon": 5},
            "output": {"formats": ["json"], "name": "one"}}"#,
    );
    let o = plbilevel(dir.path(), &["run", "--config", "q.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/one.json")).unwrap()).unwrap();
    assert_eq!(trace["rows"].as_array().unwrap().len(), 5);
    assert!(!dir.path().join("out/one.csv").exists());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "typo.json",
        r#"{"problem": {"generate": {"family": "quad", "d": 3, "p": 3}}, "solver": {"name": "mgbio", "gama": 1}}"#,
    );
    let o = plbilevel(dir.path(), &["run", "--config", "typo.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("solver.gama"), "{}", stderr(&o));
    write(dir.path(), "broken.json", "{");
    assert_eq!(code(&plbilevel(dir.path(), &["run", "--config", "broken.json"])), 2);
    write(
        dir.path(),
        "neg.json",
        r#"{"problem": {"generate": {"family": "quad", "d": 3, "p": 3}}, "solver": {"name": "mgbio", "gamma": -1}}"#,
    );
    assert_eq!(code(&plbilevel(dir.path(), &["run", "--config", "neg.json"])), 2);
    assert_eq!(code(&plbilevel(dir.path(), &["run"])), 2);
    assert_eq!(code(&plbilevel(dir.path(), &["run", "--config", "absent.json"])), 1);
}

#[test]
fn non_finite_run_exits_3_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "boom.json",
        r#"{"seed": 1, "problem": {"generate": {"family": "sensing", "d": 10}},
            "solver": {"name": "mgbio", "horizon": 2000, "gamma": 5, "lambda": 5}}"#,
    );
    let o = plbilevel(dir.path(), &["run", "--config", "boom.json"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let header: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/mgbio-seed1.header.json")).unwrap()).unwrap();
    assert_eq!(header["status"], "non-finite");
    let failed = header["failed_at"].as_u64().unwrap();
    assert_eq!(header["rows"].as_u64().unwrap(), failed - 1);
    let csv = fs::read_to_string(dir.path().join("out/mgbio-seed1.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, failed);
}

#[test]
fn vr_on_sensing_charges_four_batches_per_step() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "vr.json",
        r#"{"seed": 2, "problem": {"generate": {"family": "sensing", "d": 50}},
            "solver": {"name": "vr-msgbio", "horizon": 30, "gamma": 0.008, "lambda": 0.008, "batch": 10}}"#,
    );
    let o = plbilevel(dir.path(), &["run", "--config", "vr.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/vr-msgbio-seed2.csv")).unwrap();
    let samples: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(8).unwrap().parse().unwrap())
        .collect();
    assert_eq!(samples.len(), 30);
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(*s, 4 * 10 * i as u64);
    }
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "q.json", QUAD_RUN.replace("300", "3").as_str());
    let run = |envdir: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_plbilevel"));
        cmd.current_dir(dir.path()).env_remove("PLBILEVEL_OUT_DIR");
        if let Some(e) = envdir {
            cmd.env("PLBILEVEL_OUT_DIR", e);
        }
        assert!(cmd.args(args).status().unwrap().success());
    };
    run(Some("from-env"), &["run", "--config", "q.json"]);
    assert!(dir.path().join("from-env/mgbio-seed7.csv").is_file());
    run(Some("from-env"), &["run", "--config", "q.json", "--out", "from-flag"]);
    assert!(dir.path().join("from-flag/mgbio-seed7.csv").is_file());
    write(
        dir.path(),
        "q2.json",
        &QUAD_RUN.replace("300}", "3}, \"output\": {\"directory\": \"from-config\"}"),
    );
    run(Some("from-env"), &["run", "--config", "q2.json"]);
    assert!(dir.path().join("from-config/mgbio-seed7.csv").is_file());
    run(None, &["run", "--config", "q.json"]);
    assert!(dir.path().join("out/mgbio-seed7.csv").is_file());
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = plbilevel(dir.path(), &["verify", "spectral"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count() >= 5);
    let o = plbilevel(dir.path(), &["verify", "lemma3", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("1000/1000 pairs"), "{}", stdout(&o));
    let o = plbilevel(dir.path(), &["verify", "everything"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_identical_solvers_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "cmp.json",
        r#"{"problem": {"generate": {"family": "plgame", "d": 10, "l": 8, "n": 200}},
            "solvers": [{"name": "mgbio", "horizon": 150}, {"name": "mgbio", "horizon": 150}],
            "seeds": [3], "threshold": 0.5}"#,
    );
    let o = plbilevel(dir.path(), &["compare", "--config", "cmp.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let body = |name: &str| {
        let text = fs::read_to_string(dir.path().join("out").join(name)).unwrap();
        text.lines().skip(1).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(body("0-mgbio-seed3.csv"), body("1-mgbio-seed3.csv"));
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        assert!(line.ends_with(','), "sd column should be empty: {line}");
    }
    let verdict: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["verdict"]["second_wins"], 0);
    assert_eq!(verdict["config"]["seeds"][0], 3);
    assert_eq!(verdict["report"]["threshold_window"], 100);
}

#[test]
fn compare_needs_two_solvers() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "one.json",
        r#"{"problem": {"generate": {"family": "quad", "d": 3, "p": 3}}, "solvers": [{"name": "mgbio"}], "seeds": [1]}"#,
    );
    assert_eq!(code(&plbilevel(dir.path(), &["compare", "--config", "one.json"])), 2);
}

fn power_law_trace(dir: &Path, name: &str, rows: usize) {
    let mut text = String::from("t,eta,grad_map_norm,true_grad_norm,hyper_err,f_val,g_gap,lyapunov,samples_used,wall_nanos\n");
    for t in 1..=rows {
        let v = 3.0 * (t as f64).powf(-0.5);
        text.push_str(&format!("{t},1e0,{v:.16e},,,0e0,,,0,\n"));
    }
    write(dir, name, &text);
}

#[test]
fn rates_recover_exact_power_law() {
    let dir = tempfile::tempdir().unwrap();
    power_law_trace(dir.path(), "p.csv", 2000);
    let o = plbilevel(
        dir.path(),
        &["rates", "p.csv", "--window", "10", "2000", "--mode", "raw", "--theory", "-0.5"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("slope -0.5000"), "{text}");
    assert!(text.contains("PASS against theory -0.5"), "{text}");
    let o = plbilevel(
        dir.path(),
        &["rates", "p.csv", "--window", "10", "2000", "--mode", "raw", "--theory", "-1"],
    );
    assert!(stdout(&o).contains("FLAG"), "{}", stdout(&o));
}

#[test]
fn rates_window_outside_trace_names_range() {
    let dir = tempfile::tempdir().unwrap();
    power_law_trace(dir.path(), "p.csv", 50);
    let o = plbilevel(dir.path(), &["rates", "p.csv", "--window", "100", "200"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("t = 1..=50"), "{}", stderr(&o));
    let o = plbilevel(dir.path(), &["rates", "p.csv", "--metric", "speed"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn mgbio_quad_trace_rate_passes_theory() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "q.json", &QUAD_RUN.replace("300", "10000"));
    assert_eq!(code(&plbilevel(dir.path(), &["run", "--config", "q.json"])), 0);
    let o = plbilevel(
        dir.path(),
        &["rates", "out/mgbio-seed7.csv", "--window", "100", "10000", "--theory", "-0.5"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS against theory -0.5"), "{}", stdout(&o));
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 5] = [
        ("gen", &["--d", "--l", "--n", "--r", "--p", "--mu", "--lg", "--range-compatible", "--seed", "--out"]),
        ("run", &["--config", "--seed", "--horizon", "--gamma", "--lambda", "--batch", "--out", "--name", "--gnuplot"]),
        ("verify", &["--seed"]),
        ("compare", &["--config", "--out", "--threshold", "--threshold-window"]),
        ("rates", &["--metric", "--window", "--theory", "--mode"]),
    ];
    for (sub, flags) in cases {
        let o = plbilevel(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
    let top = stdout(&plbilevel(dir.path(), &["--help"]));
    assert!(top.contains("PLBILEVEL_OUT_DIR") && top.contains("Exit codes"), "{top}");
}

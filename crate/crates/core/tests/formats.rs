//! Golden files for the three on-disk formats: run configs, traces (CSV plus
//! JSON header) and instance manifests with their binary payloads.

use std::fs;
use std::path::{Path, PathBuf};

use pl_bilevel::experiment::execute;
use pl_bilevel::problems::{generate_quad_oracle, AnyInstance, QuadParams};
use pl_bilevel::trace_io::trace::{parse_trace_csv, trace_csv};
use pl_bilevel::trace_io::{load_config, load_instance, read_trace, save_instance, write_trace};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn run_config_reproduces_golden_trace() {
    let cfg = load_config(&golden("run.json")).unwrap();
    let trace = execute(&cfg, &golden(""), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trace.csv");
    write_trace(&csv, &trace).unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap(), fs::read_to_string(golden("trace.csv")).unwrap());
    assert_eq!(
        fs::read_to_string(dir.path().join("trace.header.json")).unwrap(),
        fs::read_to_string(golden("trace.header.json")).unwrap()
    );
}

#[test]
fn golden_header_is_a_config() {
    let cfg = load_config(&golden("trace.header.json")).unwrap();
    let trace = execute(&cfg, &golden(""), None).unwrap();
    assert_eq!(trace_csv(&trace.rows), fs::read_to_string(golden("trace.csv")).unwrap());
}

#[test]
fn golden_trace_parses() {
    let text = fs::read_to_string(golden("trace.csv")).unwrap();
    let rows = parse_trace_csv(&text).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().map(|r| r.samples_used).collect::<Vec<_>>(), [0, 2, 4, 6, 8, 10]);
    assert!(rows.iter().all(|r| r.wall_nanos.is_none() && r.true_grad_norm.is_some()));
    assert_eq!(trace_csv(&rows), text);

    let file = read_trace(&golden("trace.csv")).unwrap();
    assert_eq!(file.rows, rows);
    assert_eq!(file.header.rows, 6);
    assert_eq!(file.header.seed, 4);
    assert_eq!(file.header.init_samples, 2);
}

#[test]
fn golden_instance_round_trips() {
    let loaded = load_instance(&golden("quad.json")).unwrap();
    let AnyInstance::Quad(q) = &loaded else {
        panic!("expected a quadratic instance");
    };
    let regenerated = generate_quad_oracle::<f64>(&QuadParams::new(2, 2, (1.0, 4.0), 9)).unwrap();
    assert_eq!(q, &regenerated);

    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("quad.json");
    save_instance(&manifest, &loaded).unwrap();
    assert_eq!(fs::read_to_string(&manifest).unwrap(), fs::read_to_string(golden("quad.json")).unwrap());
    assert_eq!(fs::read(dir.path().join("quad.bin")).unwrap(), fs::read(golden("quad.bin")).unwrap());
}

#[test]
fn tampered_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(golden("quad.json"), dir.path().join("quad.json")).unwrap();
    let mut payload = fs::read(golden("quad.bin")).unwrap();
    payload[0] ^= 1;
    fs::write(dir.path().join("quad.bin"), payload).unwrap();
    assert!(load_instance(&dir.path().join("quad.json")).is_err());
}

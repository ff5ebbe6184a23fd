use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn negmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_negmm")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_args() -> Vec<String> {
    let fx = fixtures();
    vec![
        "--flatfile".into(),
        fx.join("fixture_flatfile.csv").to_string_lossy().into(),
        "--c7".into(),
        fx.join("fixture_c7.json").to_string_lossy().into(),
    ]
}

fn with_data<'a>(head: &[&'a str], data: &'a [String], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(data.iter().map(|d| d.as_str())).chain(tail.iter().copied()).collect()
}

fn small_bundle(dir: &Path) -> PathBuf {
    let out = dir.join("bundle");
    let data = data_args();
    let args = with_data(
        &["run", "--seed", "11"],
        &data,
        &["--chains", "2", "--warmup", "60", "--draws", "60", "--out", s(&out)],
    );
    ok(negmm(&args));
    out
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"n_events": 6, "n_stations": 12, "records_per_event": 5, "nx": 6, "ny": 6, "station_clusters": 0}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(negmm(&["synth", "--spec", s(&spec), "--seed", "3", "--out", s(&a)]));
    ok(negmm(&["synth", "--spec", s(&spec), "--seed", "3", "--out", s(&b)]));
    for f in ["flatfile.csv", "c7.json", "grid.json", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let rows = fs::read_to_string(a.join("flatfile.csv")).unwrap().lines().count();
    assert_eq!(rows, 31);
}

#[test]
fn synth_output_ingests_on_its_own_grid() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    ok(negmm(&["synth", "--seed", "4", "--out", s(&syn)]));
    let out = dir.path().join("ing");
    let stdout = ok(negmm(&[
        "ingest",
        "--flatfile",
        s(&syn.join("flatfile.csv")),
        "--c7",
        s(&syn.join("c7.json")),
        "--grid",
        s(&syn.join("grid.json")),
        "--out",
        s(&out),
    ]));
    assert!(stdout.contains("2400 records"), "{stdout}");
}

#[test]
fn ingest_reports_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_args();
    let out = dir.path().join("ing");
    let stdout = ok(negmm(&with_data(&["ingest"], &data, &["--out", s(&out)])));
    assert!(stdout.starts_with("200 rows: 200 records, 10 events, 30 stations"), "{stdout}");
    let seg = fs::read_to_string(out.join("segments.csv")).unwrap();
    assert!(seg.starts_with("record_id,cell_id,dR_km"));
    assert!(out.join("grid.csv").exists() && out.join("ingest.json").exists());
}

#[test]
fn validation_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = negmm(&["ingest", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let data = data_args();
    let o = negmm(&with_data(&["fit", "--phase", "2"], &data, &["--out", s(dir.path())]));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--hyper"));
    let o = negmm(&with_data(&["fit", "--phase", "1", "--freqs", "7.7"], &data, &["--out", s(dir.path())]));
    assert_eq!(code(&o), 2);
}

#[test]
fn unconverged_fit_exits_with_code_3_and_still_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_args();
    let out = dir.path().join("p1");
    let o = negmm(&with_data(
        &["fit", "--phase", "1", "--freqs", "0.5,2.1,8.9"],
        &data,
        &["--chains", "1", "--warmup", "10", "--draws", "10", "--out", s(&out)],
    ));
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    for f in ["fits.json", "summary_0.5Hz.csv", "draws_8.9Hz.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let hyper = dir.path().join("smoothed.json");
    ok(negmm(&["smooth", "--fits", s(&out), "--out", s(&hyper)]));
    let p2 = dir.path().join("p2");
    let o = negmm(&with_data(
        &["fit", "--phase", "2", "--freqs", "1.3", "--hyper", s(&hyper)],
        &data,
        &["--chains", "2", "--warmup", "40", "--draws", "40", "--out", s(&p2)],
    ));
    assert!(matches!(code(&o), 0 | 3), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(p2.join("summary_1.3Hz.csv").exists());
}

#[test]
fn bundle_commands_run_and_repeat_identically() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path());
    let scen = dir.path().join("scenario.json");
    fs::write(
        &scen,
        r#"[{"eq": {"lat": 34.0, "lon": -117.5}, "sta": {"lat": 34.3, "lon": -117.1}, "cls_depth_km": 8.0, "mag": 5.5},
            {"eq": {"lat": 33.9, "lon": -117.3}, "sta": {"lat": 34.1, "lon": -117.6}, "mag": 6.8, "station_id": "nope"}]"#,
    )
    .unwrap();
    let (p1, p2) = (dir.path().join("p1.csv"), dir.path().join("p2.csv"));
    for p in [&p1, &p2] {
        ok(negmm(&["predict", "--scenario", s(&scen), "--model", s(&bundle), "--freqs", "0.5,5.5", "--out", s(p)]));
    }
    let text = fs::read_to_string(&p1).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("scenario,freq_hz,median_adjustment"));
    assert_eq!(text, fs::read_to_string(&p2).unwrap());

    let map = dir.path().join("map.geojson");
    ok(negmm(&[
        "map", "--model", s(&bundle), "--term", "dc1a", "--freq", "5.5", "--bbox", "-117.8,33.8,-117.0,34.4", "--res-km", "10",
        "--out", s(&map),
    ]));
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(&map).unwrap()).unwrap();
    assert!(!g["features"].as_array().unwrap().is_empty());

    let corr = dir.path().join("corr.json");
    ok(negmm(&["correlate", "--model", s(&bundle), "--terms", "dc1e,dc1a", "--out", s(&corr)]));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(&corr).unwrap()).unwrap();
    let done = c["models"].as_object().unwrap().len() + c["skipped"].as_object().unwrap().len();
    assert_eq!(done, 2);

    let spectra = dir.path().join("spectra.csv");
    ok(negmm(&[
        "sample-spectra", "--model", s(&bundle), "--term", "dc1a", "--n", "3", "--reference", "--seed", "5", "--out", s(&spectra),
    ]));
    assert_eq!(fs::read_to_string(&spectra).unwrap().lines().count(), 1 + 3 * 7);

    let cv = dir.path().join("cv.json");
    let data = data_args();
    ok(negmm(&with_data(
        &["crossval", "--freq", "2.1", "--k", "5", "--model", s(&bundle)],
        &data,
        &["--chains", "2", "--warmup", "100", "--draws", "150", "--out", s(&cv)],
    )));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cv).unwrap()).unwrap();
    assert_eq!(r["folds"].as_array().unwrap().len(), 5);
}

#[test]
fn run_from_config_file_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let cfg = dir.path().join("config.json");
    let body = serde_json::json!({
        "flatfile": fx.join("fixture_flatfile.csv"),
        "c7": fx.join("fixture_c7.json"),
        "seed": 11,
        "sampler": {"chains": 2, "warmup": 60, "draws": 60},
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let a = small_bundle(dir.path());
    let b = dir.path().join("from_config");
    ok(negmm(&["run", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

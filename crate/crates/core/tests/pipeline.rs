use std::fs;
use std::path::{Path, PathBuf};

use negmm::geo::{california_regions, UtmZone, XY};
use negmm::inference::SamplerConfig;
use negmm::io::{ingest, C7Table, Flatfile, GridSpec, IngestOptions};
use negmm::pipeline::{bundle_hash, run_pipeline, verify_bundle, ModelBundle, Phases, PipelineConfig};
use negmm::predict::{predict_scenario, Scenario};
use negmm::validate::{generate_synthetic, SyntheticSpec};
use negmm::Error;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        flatfile: fixtures().join("fixture_flatfile.csv"),
        c7: fixtures().join("fixture_c7.json"),
        output: out.to_path_buf(),
        sampler: SamplerConfig { chains: 2, warmup: 60, draws: 60, ..Default::default() },
        seed: 11,
        ..Default::default()
    }
}

fn read_fixture() -> (Flatfile, C7Table) {
    let flat = Flatfile::read(fs::File::open(fixtures().join("fixture_flatfile.csv")).unwrap()).unwrap();
    let c7 = C7Table::from_json(&fs::read_to_string(fixtures().join("fixture_c7.json")).unwrap()).unwrap();
    (flat, c7)
}

fn opts() -> IngestOptions {
    IngestOptions { zone: UtmZone::CA, grid: GridSpec::default(), regions: california_regions() }
}

#[test]
fn shipped_fixture_matches_its_generator() {
    let spec: SyntheticSpec =
        serde_json::from_str(&fs::read_to_string(fixtures().join("fixture_spec.json")).unwrap()).unwrap();
    let (flat, _) = generate_synthetic(&spec).unwrap();
    let mut buf = Vec::new();
    flat.write(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), fs::read_to_string(fixtures().join("fixture_flatfile.csv")).unwrap());
    assert_eq!(flat.rows.len(), 200);
}

#[test]
fn header_only_flatfile_gives_empty_dataset() {
    let (flat, c7) = read_fixture();
    let mut buf = Vec::new();
    Flatfile { freqs: flat.freqs.clone(), rows: vec![] }.write(&mut buf).unwrap();
    let empty = Flatfile::read(buf.as_slice()).unwrap();
    let (ds, rep) = ingest(&empty, &c7, &opts()).unwrap();
    assert_eq!((ds.n_records(), rep.records, rep.events, rep.stations), (0, 0, 0, 0));
}

#[test]
fn one_row_counts_and_one_ray() {
    let (mut flat, c7) = read_fixture();
    flat.rows.truncate(1);
    let (ds, rep) = ingest(&flat, &c7, &opts()).unwrap();
    assert_eq!((rep.records, rep.events, rep.stations), (1, 1, 1));
    assert_eq!(ds.seg.rows.len(), 1);
    let sum: f64 = ds.seg.rows[0].iter().map(|c| c.1).sum();
    assert!((sum - flat.rows[0].rrup_km).abs() < 1e-9 * sum);
}

#[test]
fn rows_in_equal_records_plus_rejected() {
    let (mut flat, c7) = read_fixture();
    for r in flat.rows.iter_mut().step_by(7) {
        r.residuals.iter_mut().for_each(|v| *v = f64::NAN);
    }
    let (_, rep) = ingest(&flat, &c7, &opts()).unwrap();
    assert_eq!(rep.rows_read, rep.records + rep.dropped_no_residual);
    assert_eq!(rep.dropped_no_residual, 29);
}

#[test]
fn swapped_coordinates_fall_outside_the_grid() {
    let (mut flat, c7) = read_fixture();
    let spec: SyntheticSpec =
        serde_json::from_str(&fs::read_to_string(fixtures().join("fixture_spec.json")).unwrap()).unwrap();
    let o = IngestOptions { grid: GridSpec::Explicit(spec.grid()), ..opts() };
    ingest(&flat, &c7, &o).unwrap();
    let r = &mut flat.rows[4];
    (r.sta.lat, r.sta.lon) = (r.sta.lon, r.sta.lat);
    match ingest(&flat, &c7, &o) {
        Err(Error::Row { row, .. }) => assert_eq!(row, 5),
        Err(e) => panic!("expected a row error, got {e}"),
        Ok(_) => panic!("swapped coordinates were accepted"),
    }
}

fn scenarios(b: &ModelBundle) -> Vec<Scenario> {
    let g = &b.grid;
    let at = |fx: f64, fy: f64| XY::new(g.origin.x + fx * g.nx as f64 * g.dx, g.origin.y + fy * g.ny as f64 * g.dy);
    vec![
        Scenario { eq: at(0.3, 0.4), sta: at(0.7, 0.6), cls: at(0.3, 0.4), cls_depth: 8.0, mag: 4.5, rrup: None, station_id: None, region: None },
        Scenario { eq: at(0.5, 0.2), sta: at(0.45, 0.8), cls: at(0.5, 0.2), cls_depth: 5.0, mag: 6.0, rrup: None, station_id: Some("S0003".into()), region: None },
    ]
}

#[test]
fn pipeline_on_fixture_writes_a_valid_bundle_that_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let cfg = fixture_config(&out);
    let b = run_pipeline(&cfg).unwrap();
    verify_bundle(&out).unwrap();
    assert_eq!(b.ingest.records, 200);
    assert_eq!(b.phase1.len(), 4);
    assert_eq!(b.phase2.len(), 7);
    assert!(b.aleatory.is_some());
    assert!(out.join("phase2/draws_5.5Hz.csv").exists());

    let loaded = ModelBundle::load(&out).unwrap();
    assert_eq!(loaded.models, b.models);
    assert_eq!(loaded.smoothed, b.smoothed);
    assert_eq!(loaded.aleatory, b.aleatory);
    assert_eq!(loaded.correlation, b.correlation);
    for m in 0..b.models.len() {
        for sc in scenarios(&b) {
            let p = predict_scenario(&b.models[m], &b.grid, &sc, b.aleatory.as_ref(), true).unwrap();
            let q = predict_scenario(&loaded.models[m], &loaded.grid, &sc, loaded.aleatory.as_ref(), true).unwrap();
            assert!((p.median_adjustment - q.median_adjustment).abs() <= 1e-12);
            assert!((p.epistemic_sd - q.epistemic_sd).abs() <= 1e-12);
        }
    }

    let mut p2 = fixture_config(&dir.path().join("p2"));
    p2.phases = Phases::PhaseTwo { hyper_from: out.clone() };
    let b2 = run_pipeline(&p2).unwrap();
    assert_eq!(b2.phase1, loaded.phase1);
    assert_eq!(b2.smoothed, b.smoothed);
    assert_eq!(b2.models, b.models);

    fs::write(out.join("grid.csv"), "tampered\n").unwrap();
    assert!(verify_bundle(&out).is_err());
    let _ = bundle_hash(&out).unwrap();
}

#[test]
fn failing_stage_is_named_and_leaves_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let mut cfg = fixture_config(&out);
    cfg.phase1_freqs = vec![0.5, 7.0];
    match run_pipeline(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "phase1"),
        other => panic!("expected a phase1 stage error, got {other:?}"),
    }
    let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["stage"], "phase1");
    verify_bundle(&out).unwrap();
    assert!(ModelBundle::load(&out).is_err());
}

#[test]
fn config_rejects_unsorted_frequencies() {
    let cfg = PipelineConfig { freqs: vec![2.0, 1.0], ..Default::default() };
    assert!(cfg.validate().is_err());
    let cfg = PipelineConfig { freqs: vec![-1.0], ..Default::default() };
    assert!(cfg.validate().is_err());
}

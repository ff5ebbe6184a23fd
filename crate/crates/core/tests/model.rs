use negmm::data::Dataset;
use negmm::inference::{default_hyper, fit_frequency, SamplerConfig, SamplerKind};
use negmm::model::{log_posterior, median_nonergodic, FreqData, HyperName, ModelParams, NcModel, Phase, Priors};
use negmm::validate::{synthetic_dataset, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_events: 5,
        n_stations: 10,
        records_per_event: 6,
        nx: 5,
        ny: 4,
        cell_km: 25.0,
        station_clusters: 0,
        seed,
        ..Default::default()
    };
    synthetic_dataset(&spec).unwrap().0
}

fn random_state(m: &NcModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hs = default_hyper(-0.008);
    let mut p = ModelParams::zeros(m.data);
    p.dc0 = rng.random_range(-0.2..0.2);
    p.dc0e_north = rng.random_range(-0.2..0.2);
    p.dc0e_south = rng.random_range(-0.2..0.2);
    for v in p.dc1e.iter_mut().chain(&mut p.dc1a).chain(&mut p.dc1b).chain(&mut p.db) {
        *v = rng.random_range(-0.3..0.3);
    }
    for c in &mut p.c_ca {
        *c = -rng.random_range(0.002..0.02);
    }
    let mut hs = hs;
    for h in HyperName::ALL {
        hs.set(h, hs.get(h) * rng.random_range(0.7..1.4));
    }
    p.phi0 = hs.phi0;
    p.tau0 = hs.tau0;
    m.pack(&p, &hs).unwrap()
}

/// Richardson-extrapolated central difference.
fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
    let h = 1e-3 * x[k].abs().max(1.0);
    let d = |h: f64| {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[k] += h;
        b[k] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    };
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..20u64 {
        let ds = instance(100 + inst);
        let d = FreqData::new(&ds, 0).unwrap();
        let phase = if inst % 2 == 0 { Phase::One } else { Phase::Two };
        let m = NcModel::new(&d, phase, Priors::default(), default_hyper(d.c7));
        let x = random_state(&m, &mut rng);
        let (_, g) = m.logp_grad(&x).unwrap();
        let f = |y: &[f64]| m.logp(y);
        let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for k in 0..x.len() {
            let n = fd(&f, &x, k);
            let rel = (g[k] - n).abs() / g[k].abs().max(1e-6 * gmax);
            assert!(rel < 1e-5, "instance {inst} component {k}: analytic {} vs numeric {n}", g[k]);
        }
    }
}

#[test]
fn non_centered_matches_centered_density() {
    let ds = instance(5);
    let d = FreqData::new(&ds, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for phase in [Phase::One, Phase::Two] {
        let m = NcModel::new(&d, phase, Priors::default(), default_hyper(d.c7));
        for _ in 0..5 {
            let x = random_state(&m, &mut rng);
            let (p, hs) = m.unpack(&x).unwrap();
            let centered = log_posterior(&d, &p, &hs.hyper, phase, &Priors::default()).unwrap();
            let nc = m.logp(&x) - m.log_jacobian(&x).unwrap();
            assert!((centered - nc).abs() <= 1e-10 * centered.abs().max(1.0), "{centered} vs {nc}");
        }
    }
}

#[test]
fn positive_cell_coefficient_has_zero_density() {
    let ds = instance(6);
    let d = FreqData::new(&ds, 0).unwrap();
    let hs = default_hyper(d.c7);
    let mut p = ModelParams::zeros(&d);
    assert!(log_posterior(&d, &p, &hs.hyper, Phase::One, &Priors::default()).unwrap().is_finite());
    p.c_ca[0] = 1e-9;
    assert_eq!(log_posterior(&d, &p, &hs.hyper, Phase::One, &Priors::default()).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn ergodic_model_is_nested() {
    let ds = instance(7);
    let d = FreqData::new(&ds, 0).unwrap();
    let p = ModelParams::zeros(&d);
    for i in 0..d.n_records() {
        let med = median_nonergodic(&d, i, &p).unwrap();
        assert!((med - d.c7 * d.rrup[i]).abs() <= 1e-12 * d.rrup[i].abs().max(1.0));
        assert!((d.y[i] - med - d.residual[i]).abs() <= 1e-12 * d.y[i].abs().max(1.0));
    }
}

#[test]
fn record_order_does_not_change_the_density() {
    let ds = instance(8);
    let mut rev = ds.clone();
    rev.records.reverse();
    rev.seg.rows.reverse();
    let rev = Dataset::assemble(rev.zone, rev.freqs, rev.c7, rev.records, rev.grid, rev.seg);
    let d = FreqData::new(&ds, 0).unwrap();
    let r = FreqData::new(&rev, 0).unwrap();
    let hs = default_hyper(d.c7);
    let mut p = ModelParams::zeros(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    p.dc1b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    p.db.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    p.c_ca.iter_mut().for_each(|v| *v = -rng.random_range(0.001..0.02));
    // Map the same values onto the reversed grouping by id.
    let mut q = ModelParams::zeros(&r);
    for (k, id) in r.station_ids.iter().enumerate() {
        q.dc1b[k] = p.dc1b[d.station_ids.iter().position(|s| s == id).unwrap()];
    }
    for (k, id) in r.event_ids.iter().enumerate() {
        q.db[k] = p.db[d.event_ids.iter().position(|s| s == id).unwrap()];
    }
    for (k, c) in r.cells.iter().enumerate() {
        q.c_ca[k] = p.c_ca[d.cells.iter().position(|s| s == c).unwrap()];
    }
    let a = log_posterior(&d, &p, &hs.hyper, Phase::Two, &Priors::default()).unwrap();
    let b = log_posterior(&r, &q, &hs.hyper, Phase::Two, &Priors::default()).unwrap();
    assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
}

fn median_dc1b_sd(records_per_event: usize) -> f64 {
    let spec = SyntheticSpec {
        n_events: 12,
        n_stations: 10,
        records_per_event,
        nx: 6,
        ny: 6,
        cell_km: 20.0,
        station_clusters: 0,
        seed: 4,
        ..Default::default()
    };
    let (ds, _) = synthetic_dataset(&spec).unwrap();
    let d = FreqData::new(&ds, 0).unwrap();
    let mut hs = default_hyper(d.c7);
    hs.hyper = spec.hyper;
    let cfg = SamplerConfig { chains: 2, warmup: 150, draws: 400, ..Default::default() };
    let fit = fit_frequency(&d, Phase::Two, &Priors::default(), hs, &cfg).unwrap();
    let mut sds: Vec<f64> = fit.summary.params.iter().filter(|p| p.name.starts_with("dc1b:")).map(|p| p.sd).collect();
    sds.sort_by(f64::total_cmp);
    sds[sds.len() / 2]
}

#[test]
fn more_records_per_station_shrink_dc1b_uncertainty() {
    let few = median_dc1b_sd(4);
    let many = median_dc1b_sd(8);
    assert!(many < few, "median sd {many} with doubled records vs {few}");
}

#[test]
fn gibbs_and_nuts_agree_on_hyperparameter_posteriors() {
    let spec = SyntheticSpec {
        n_events: 10,
        n_stations: 24,
        records_per_event: 12,
        nx: 6,
        ny: 6,
        cell_km: 25.0,
        station_clusters: 6,
        seed: 21,
        ..Default::default()
    };
    let (ds, _) = synthetic_dataset(&spec).unwrap();
    let d = FreqData::new(&ds, 0).unwrap();
    let fit = |kind| {
        let cfg = SamplerConfig { chains: 4, warmup: 400, draws: 600, seed: 8, kind, ..Default::default() };
        fit_frequency(&d, Phase::One, &Priors::default(), default_hyper(d.c7), &cfg).unwrap().summary
    };
    let (g, n) = (fit(SamplerKind::Gibbs), fit(SamplerKind::Nuts));
    for h in HyperName::free(Phase::One) {
        let (a, b) = (g.get(h.label()).unwrap(), n.get(h.label()).unwrap());
        let se = (a.sd * a.sd / a.ess + b.sd * b.sd / b.ess).sqrt();
        let z = (a.mean - b.mean) / se;
        assert!(z.abs() < 4.0, "{}: gibbs {:.4}±{:.4} nuts {:.4}±{:.4} (z {z:.2})", h.label(), a.mean, a.sd, b.mean, b.sd);
    }
}

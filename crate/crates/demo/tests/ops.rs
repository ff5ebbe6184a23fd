use negmm_demo::ops;
use negmm_demo::{condition_lattice, correlation_curve, ray_length, segment_ray};

#[test]
fn segments_sum_to_the_ray_length() {
    let seg = segment_ray(12.0, 340.0, 10.0, 390.0, 8.0, 16, 16, 25.0).unwrap();
    let total: f64 = seg.iter().skip(1).step_by(2).sum();
    let len = ray_length(12.0, 340.0, 10.0, 390.0, 8.0);
    assert!((total - len).abs() <= 1e-9 * len);
    assert!(seg.iter().step_by(2).all(|c| *c >= 0.0 && *c < 256.0 && c.fract() == 0.0));
}

#[test]
fn ray_leaving_the_grid_is_an_error() {
    assert!(ops::segments(10.0, 10.0, 0.0, 500.0, 10.0, 16, 16, 25.0).is_err());
}

#[test]
fn reference_curves_start_at_one_and_decay() {
    for term in ["dc1e", "dc1a", "dc1b", "c_ca"] {
        let m = ops::reference_model(term).unwrap();
        let rho = correlation_curve(m.a, m.b, m.c, m.d, 4.0, 101);
        assert_eq!(rho[0], 1.0);
        assert!(rho[1..].windows(2).all(|w| w[1] < w[0]), "{term}");
    }
    assert!(ops::reference_model("dc9").is_err());
}

#[test]
fn lattice_without_data_is_the_prior() {
    let out = condition_lattice(&[], 0.4, 30.0, 100.0, 100.0, 5, 4).unwrap();
    assert_eq!(out.len(), 40);
    assert!(out[..20].iter().all(|m| *m == 0.0));
    assert!(out[20..].iter().all(|s| (s - 0.4).abs() < 1e-9));
}

#[test]
fn lattice_reproduces_a_noise_free_observation_at_its_location() {
    let (mean, sd) = ops::lattice(&[50.0, 50.0, 0.3, 0.0], 0.4, 30.0, 100.0, 100.0, 3, 3).unwrap();
    assert!((mean[4] - 0.3).abs() < 1e-9);
    assert!(sd[4] < 1e-3);
    assert!(sd[0] > sd[4]);
    assert!(ops::lattice(&[1.0, 2.0, 3.0], 0.4, 30.0, 1.0, 1.0, 2, 2).is_err());
}

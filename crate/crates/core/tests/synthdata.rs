use tdciv::estimator::{ace_naive, evaluate};
use tdciv::synthdata::{generate_dataset, read_panel, write_panel, GenConfig};

#[test]
fn naive_is_consistent_without_latent_confounding() {
    let cfg = GenConfig { rho_u: 0.0, confounded_treatment: false, ..GenConfig::default() };
    let d = generate_dataset(&cfg).unwrap();
    let r = evaluate(&ace_naive(&d).unwrap(), d.true_ace.as_ref().unwrap()).unwrap();
    for s in &r.steps {
        assert!(s.abs_error.unwrap() <= 0.05, "t = {}: {}", s.t, s.estimate);
    }
}

#[test]
fn panel_file_round_trip() {
    let cfg = GenConfig { n_samples: 40, horizon: 6, p_order: 2, seed: 9, ..GenConfig::default() };
    let d = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_panel(&d, &path).unwrap();
    let back = read_panel(&path).unwrap();
    assert_eq!(back, d);
    let bytes = std::fs::read(&path).unwrap();
    write_panel(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

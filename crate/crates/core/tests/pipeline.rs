use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use finc::oracle::exact_spectrum;
use finc::pipeline::{
    body_digest, mode_vectors_from_bytes, run_differential_clustering, run_oracle_check, run_tune, with_threads,
    Bandwidth, RunConfig,
};
use finc::synth::{make_planted_scenario, write_scenario, PlantedScenario, ScenarioParams};
use finc::tensor_io::{save_embeddings, DataFormat};
use finc::{finc_spectrum, sample_basis, EmbeddingSet, FincError, FourierBasis, SpectrumRoute};

fn small_scenario(seed: u64) -> PlantedScenario {
    make_planted_scenario(ScenarioParams {
        n: 900,
        m: 800,
        d: 8,
        seed,
        ..ScenarioParams::new(3, 2)
    })
    .unwrap()
}

fn scenario_config(dir: &Path, s: &PlantedScenario) -> RunConfig {
    let files = write_scenario(s, &dir.join("data"), DataFormat::Binary).unwrap();
    let mut cfg = RunConfig::new(&files.test, &files.reference, dir.join("out"));
    cfg.sigma2 = Bandwidth::Fixed(8.0);
    cfg.r = 300;
    cfg.seed = 5;
    cfg.top_modes = 4;
    cfg.top_k = 30;
    cfg
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(1);
    let cfg = scenario_config(dir.path(), &s);
    let outcome = run_differential_clustering(&cfg).unwrap();

    let text = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["format"], "finc-report");
    assert_eq!(json["digest"], body_digest(&outcome.report.body).unwrap());
    assert_eq!(json["body"]["modes"].as_array().unwrap().len(), outcome.modes.len());

    let vectors = mode_vectors_from_bytes(&fs::read(dir.path().join("out/modes.fncv")).unwrap()).unwrap();
    assert_eq!(vectors.len(), outcome.modes.len());
    for (v, m) in vectors.iter().zip(&outcome.modes) {
        assert_eq!(v, &m.eigenvector);
    }

    let basis = FourierBasis::load(&dir.path().join("out/basis.fncb")).unwrap();
    assert_eq!(basis, outcome.basis);
}

#[test]
fn planted_novel_components_are_retrieved() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(2);
    let cfg = scenario_config(dir.path(), &s);
    let outcome = run_differential_clustering(&cfg).unwrap();
    let labels = s.test.labels().unwrap();
    let body = &outcome.report.body;
    assert!(body.modes.len() >= 2);
    let mut retrieved = BTreeSet::new();
    for entry in &body.modes[..2] {
        let hits: Vec<i64> = entry.top_k.iter().map(|&(i, _)| labels[i]).collect();
        let majority = hits[0];
        let purity = hits.iter().filter(|&&l| l == majority).count() as f64 / hits.len() as f64;
        assert!(s.novel_labels.contains(&majority), "mode retrieved common label {majority}");
        assert!(purity >= 0.9, "purity {purity}");
        retrieved.insert(majority);
    }
    assert_eq!(retrieved.len(), 2);
}

#[test]
fn identical_sets_give_no_modes() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(3);
    let path = dir.path().join("same.fnc1");
    save_embeddings(&s.test, &path).unwrap();
    let mut cfg = RunConfig::new(&path, &path, dir.path().join("out"));
    cfg.sigma2 = Bandwidth::Fixed(8.0);
    cfg.r = 200;
    let outcome = run_differential_clustering(&cfg).unwrap();
    assert!(outcome.modes.is_empty());
    assert!(outcome.report.body.assignment.is_none());
    assert_eq!(outcome.report.body.spectrum.positive_count, 0);
}

#[test]
fn unseen_scores_match_test_scores() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(4);
    let mut cfg = scenario_config(dir.path(), &s);
    cfg.score_unseen = Some(cfg.test_path.clone());
    let outcome = run_differential_clustering(&cfg).unwrap();
    let body = &outcome.report.body;
    let unseen = body.unseen.as_ref().unwrap();
    assert_eq!(unseen.scores.len(), s.test.n());
    for (k, entry) in body.modes.iter().enumerate() {
        for &(i, score) in &entry.top_k {
            assert!((unseen.scores[i][k] - score).abs() <= 1e-12);
        }
    }
}

#[test]
fn body_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(5);
    let cfg = scenario_config(dir.path(), &s);
    let digest = |threads| {
        with_threads(Some(threads), || run_differential_clustering(&cfg).unwrap().report.digest).unwrap()
    };
    assert_eq!(digest(1), digest(3));
}

#[test]
fn routes_agree_on_small_inputs() {
    let s = small_scenario(6);
    let basis = sample_basis(8, 150, 8.0, 11).unwrap();
    let x = s.test.select(&(0..120).collect::<Vec<_>>()).unwrap();
    let y = s.reference.select(&(0..100).collect::<Vec<_>>()).unwrap();
    let cov = finc_spectrum(&basis, &x, &y, 1.0, SpectrumRoute::Covariance, 64).unwrap();
    let dual = finc_spectrum(&basis, &x, &y, 1.0, SpectrumRoute::SampleDual, 64).unwrap();
    for k in 0..10 {
        assert!((cov.eigenvalues()[k] - dual.eigenvalues()[k]).abs() < 1e-12);
        let overlap = cov.eigenvector(k).dot(&dual.eigenvector(k)).abs();
        assert!(overlap > 1.0 - 1e-8, "mode {k} overlap {overlap}");
    }
}

#[test]
fn oracle_check_agrees_and_guards_size() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(7);
    let x = s.test.select(&(0..150).collect::<Vec<_>>()).unwrap();
    let y = s.reference.select(&(0..150).collect::<Vec<_>>()).unwrap();
    save_embeddings(&x, &dir.path().join("x.fnc1")).unwrap();
    save_embeddings(&y, &dir.path().join("y.fnc1")).unwrap();
    let mut cfg = RunConfig::new(dir.path().join("x.fnc1"), dir.path().join("y.fnc1"), dir.path().join("out"));
    cfg.sigma2 = Bandwidth::Fixed(8.0);
    cfg.r = 4000;

    let report = run_oracle_check(&cfg, 1000, &[64, 1024], &[1]).unwrap();
    let direct = exact_spectrum(&x, &y, 1.0, 8.0, 10).unwrap();
    for (a, b) in report.body.exact_top.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(report.body.oracle_route_gap < 1e-10);
    assert!(report.body.top_max_gap < 0.02, "gap {}", report.body.top_max_gap);
    assert!(dir.path().join("out/oracle.json").exists());

    let err = run_oracle_check(&cfg, 200, &[64], &[1]).unwrap_err();
    assert!(matches!(err, FincError::SizeGuard { size: 300, limit: 200 }));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn tuning_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(8);
    let x = s.test.select(&(0..300).collect::<Vec<_>>()).unwrap();
    let y = s.reference.select(&(0..300).collect::<Vec<_>>()).unwrap();
    save_embeddings(&x, &dir.path().join("x.fnc1")).unwrap();
    save_embeddings(&y, &dir.path().join("y.fnc1")).unwrap();
    let cfg = RunConfig::new(dir.path().join("x.fnc1"), dir.path().join("y.fnc1"), dir.path().join("out"));
    let a = run_tune(&cfg, &[100, 400]).unwrap();
    let b = run_tune(&cfg, &[100, 400]).unwrap();
    assert_eq!(a.digest, b.digest);
    assert!(a.body.result.sigma2 > 0.0);
    assert!([100, 400].contains(&a.body.result.r));
}

#[test]
fn input_errors_map_to_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let a = EmbeddingSet::from_rows(&[[0.0f32, 1.0], [1.0, 0.0]]).unwrap();
    let b = EmbeddingSet::from_rows(&[[0.0f32, 1.0, 2.0]]).unwrap();
    save_embeddings(&a, &dir.path().join("a.fnc1")).unwrap();
    save_embeddings(&b, &dir.path().join("b.fnc1")).unwrap();
    let mut cfg = RunConfig::new(dir.path().join("a.fnc1"), dir.path().join("b.fnc1"), dir.path().join("out"));
    cfg.sigma2 = Bandwidth::Fixed(1.0);
    let err = run_differential_clustering(&cfg).unwrap_err();
    assert!(matches!(err, FincError::DimensionMismatch { expected: 2, found: 3 }));
    assert_eq!(err.exit_code(), 2);

    cfg.ref_path = dir.path().join("a.fnc1");
    cfg.rho = -1.0;
    assert_eq!(run_differential_clustering(&cfg).unwrap_err().exit_code(), 2);

    cfg.rho = 1.0;
    cfg.test_path = dir.path().join("missing.fnc1");
    assert_eq!(run_differential_clustering(&cfg).unwrap_err().exit_code(), 2);
}

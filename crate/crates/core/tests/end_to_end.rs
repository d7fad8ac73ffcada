use cmidebias_core::click_model::ClickModelConfig;
use cmidebias_core::cmi::StatNetConfig;
use cmidebias_core::io;
use cmidebias_core::optimizer::BoConfig;
use cmidebias_core::perturbation::{PerturbMode, PerturbationConfig};
use cmidebias_core::pipeline::{self, PipelineConfig};
use cmidebias_core::synthetic::{self, SyntheticConfig};

fn small_world(seed: u64) -> synthetic::SyntheticData {
    synthetic::generate(&SyntheticConfig {
        n_users: 20,
        n_items: 20,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_pipeline(seed: u64) -> PipelineConfig {
    PipelineConfig {
        k: Some(3),
        n_iter: 3,
        perturbation: PerturbationConfig {
            mode: PerturbMode::Full,
            ..Default::default()
        },
        cmi: StatNetConfig {
            hidden_layers: vec![8],
            epochs: 5,
            holdout_fraction: 0.3,
            ..Default::default()
        },
        click: ClickModelConfig {
            epochs: 20,
            ..Default::default()
        },
        bo: BoConfig {
            n_init: Some(2),
            n_candidates: 64,
            ..Default::default()
        },
        loop_cmi_epochs: 3,
        loop_click_rounds: 5,
        seed,
        ..Default::default()
    }
}

#[test]
fn csv_round_trip_preserves_records() {
    let data = small_world(3).mnar;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    io::save_csv(&data, &path).unwrap();
    assert!(io::sidecar_path(&path).exists());
    let back = io::load_dataset(&path).unwrap();
    assert_eq!(back.records(), data.records());
    assert_eq!(back.feature_names(), data.feature_names());
}

#[test]
fn debias_returns_a_resample_of_the_input() {
    let data = small_world(5).mnar;
    let result = pipeline::debias(&data, &tiny_pipeline(1)).unwrap();
    assert_eq!(result.debiased.len(), data.len());
    assert_eq!(result.source_indices.len(), data.len());
    for (rec, &src) in result.debiased.records().iter().zip(&result.source_indices) {
        assert_eq!(rec, &data.records()[src]);
    }
    assert_eq!(result.trace.points.len(), 2 + 3);
    let best = &result.trace.points[result.trace.best_index];
    assert_eq!(best, &result.optimal_weights);
}

#[test]
fn debias_is_reproducible_from_its_seed() {
    let data = small_world(6).mnar;
    let a = pipeline::debias(&data, &tiny_pipeline(9)).unwrap();
    let b = pipeline::debias(&data, &tiny_pipeline(9)).unwrap();
    assert_eq!(a.source_indices, b.source_indices);
    assert_eq!(a.optimal_weights, b.optimal_weights);
}

#[test]
fn debiased_output_survives_a_round_trip() {
    let data = small_world(8).mnar;
    let result = pipeline::debias(&data, &tiny_pipeline(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("debiased.csv");
    io::save_csv(&result.debiased, &path).unwrap();
    assert_eq!(io::load_dataset(&path).unwrap().records(), result.debiased.records());
}

use std::time::Instant;

use helios_core::dataset::{build_sequences, SequenceConfig};
use helios_core::models::{CnnLstm, CnnLstmSpec, TrainConfig};
use helios_core::synth::{generate_scene, SceneSpec};

/// Training loss goes below 1e-4 on 50 sequences within 500 epochs.
#[test]
fn memorizes_fifty_sequences() {
    let scene = SceneSpec {
        sites: 2,
        days: 2,
        ..SceneSpec::default()
    };
    let samples: Vec<_> = generate_scene(&scene)
        .unwrap()
        .iter()
        .flat_map(|s| build_sequences(&s.cube, &SequenceConfig::default()).unwrap())
        .take(50)
        .collect();
    assert_eq!(samples.len(), 50);
    let spec = CnnLstmSpec {
        conv_blocks: 1,
        convs_per_block: 1,
        filters: 8,
        dense_dims: vec![32],
        lstm_hidden: 16,
        steps: 4,
        window: 10,
    };
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 10,
        learning_rate: 3e-3,
        patience: 500,
        clip_norm: Some(5.0),
        target_train_loss: Some(1e-4),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (model, curve) = CnnLstm::train(&spec, &cfg, &samples, &[], 3).unwrap();
    eprintln!(
        "epochs {} final {:.3e} in {:?}",
        curve.len(),
        model.report.final_train_loss,
        t.elapsed()
    );
    assert!(model.report.final_train_loss < 1e-4);
    assert!(curve.len() <= 500);
}

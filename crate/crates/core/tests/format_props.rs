use std::fs;

use helios_core::dataset::{build_sequences, SequenceConfig};
use helios_core::models::*;
use helios_core::nowcast::{PowerTrainer, SvrTrainer};
use helios_core::sitecube::{read_sitecube, write_sitecube, SiteCubeError};
use helios_core::svr::SvrSpec;
use helios_core::synth::{generate_scene, SceneSpec};
use proptest::prelude::*;

fn small_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        sites: 1,
        days: 2,
        ..SceneSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sitecube_round_trip_is_bit_exact(seed in any::<u64>(), holes in prop::collection::vec(any::<prop::sample::Index>(), 0..20)) {
        let mut cube = generate_scene(&small_scene(seed)).unwrap().remove(0).cube;
        for h in holes {
            let i = h.index(cube.frames.len());
            cube.frames[i] = f32::NAN;
        }
        let dir = tempfile::tempdir().unwrap();
        write_sitecube(&cube, dir.path()).unwrap();
        let back = read_sitecube(dir.path()).unwrap();
        prop_assert!(back.bit_eq(&cube));
    }

    #[test]
    fn truncated_frames_are_rejected(cut in 1usize..200) {
        let cube = generate_scene(&small_scene(3)).unwrap().remove(0).cube;
        let dir = tempfile::tempdir().unwrap();
        write_sitecube(&cube, dir.path()).unwrap();
        let p = dir.path().join("frames.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - cut]).unwrap();
        prop_assert!(matches!(read_sitecube(dir.path()), Err(SiteCubeError::FormatViolation(_))));
    }
}

#[test]
fn sitecube_corruptions_are_format_violations() {
    let cube = generate_scene(&small_scene(5)).unwrap().remove(0).cube;
    let dir = tempfile::tempdir().unwrap();
    write_sitecube(&cube, dir.path()).unwrap();
    let frames = dir.path().join("frames.bin");
    let good = fs::read(&frames).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&frames, &bad).unwrap();
    assert!(matches!(read_sitecube(dir.path()), Err(SiteCubeError::FormatViolation(_))));
    let mut bad = good.clone();
    bad[4] = 9;
    fs::write(&frames, &bad).unwrap();
    assert!(matches!(read_sitecube(dir.path()), Err(SiteCubeError::FormatViolation(_))));
    fs::write(&frames, &good).unwrap();
    let ts = dir.path().join("timestamps.bin");
    let t = fs::read(&ts).unwrap();
    fs::write(&ts, &t[..t.len() - 3]).unwrap();
    assert!(matches!(read_sitecube(dir.path()), Err(SiteCubeError::FormatViolation(_))));
    fs::write(&ts, &t).unwrap();
    let meta = dir.path().join("meta.json");
    let m = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, m.replacen('{', "{\"surprise\": 1,", 1)).unwrap();
    assert!(matches!(read_sitecube(dir.path()), Err(SiteCubeError::FormatViolation(_))));
    fs::write(&meta, &m).unwrap();
    assert!(read_sitecube(dir.path()).unwrap().bit_eq(&cube));
}

fn fitted_models() -> (Vec<Box<dyn ChannelModel>>, Vec<helios_core::dataset::SequenceSample>) {
    let cube = generate_scene(&small_scene(9)).unwrap().remove(0).cube;
    let samples = build_sequences(&cube, &SequenceConfig::default()).unwrap();
    let spec = CnnLstmSpec {
        conv_blocks: 1,
        convs_per_block: 1,
        filters: 4,
        dense_dims: vec![8],
        lstm_hidden: 4,
        steps: 4,
        window: 10,
    };
    let train = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let cnn = CnnLstm::train(&spec, &train, &samples, &[], 1).unwrap().0;
    let forest = ForestModel::fit(
        &samples,
        &ForestSpec {
            tree_count: 3,
            ..ForestSpec::default()
        },
    )
    .unwrap();
    let tree = TreeModel::fit(&samples, &TreeSpec::default()).unwrap();
    (vec![Box::new(Persistence), Box::new(tree), Box::new(forest), Box::new(cnn)], samples)
}

#[test]
fn channel_model_containers_round_trip() {
    let (models, samples) = fitted_models();
    let dir = tempfile::tempdir().unwrap();
    for m in &models {
        let c = m.to_container().unwrap();
        let path = dir.path().join(format!("{}.hnmd", m.label()));
        save_model(m.as_ref(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, c.to_bytes());
        let back = load_model(&path).unwrap();
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
        let a = m.predict_many(&samples).unwrap();
        let b = back.predict_many(&samples).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                assert_eq!(x.0[k].to_bits(), y.0[k].to_bits());
            }
        }
        for cut in [1, 4, bytes.len() / 2, bytes.len() - 5] {
            assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - cut]), Err(ModelError::FormatViolation(_))));
        }
        for (at, v) in [(0usize, b'Z'), (4, 99), (5, 77)] {
            let mut bad = bytes.clone();
            bad[at] = v;
            assert!(matches!(Container::from_bytes(&bad), Err(ModelError::FormatViolation(_))));
        }
    }
}

#[test]
fn power_regressor_container_round_trips() {
    let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 7) as f64 * 0.1, 0.2, 0.3, 20.0 + (i % 5) as f64]).collect();
    let y: Vec<f64> = x.iter().map(|r| 0.9 * r[0] + 3.0 * r[1]).collect();
    let m = SvrTrainer { spec: SvrSpec::default() }.fit(&x, &y).unwrap();
    let bytes = m.to_container().to_bytes();
    let back = helios_core::nowcast::power_regressor_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_container().to_bytes(), bytes);
    for r in &x {
        assert_eq!(m.predict(r).unwrap().to_bits(), back.predict(r).unwrap().to_bits());
    }
    assert!(matches!(channel_model_from_container(&Container::from_bytes(&bytes).unwrap()), Err(ModelError::FormatViolation(_))));
}

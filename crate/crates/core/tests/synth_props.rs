//! Scene-level properties of the synthetic world.

use helios_core::dataset::tolerance_filter;
use helios_core::synth::{generate_scene, SceneSpec};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn power_and_channel_one_move_in_opposition_every_day() {
    let spec = SceneSpec::default();
    let scenes = generate_scene(&spec).unwrap();
    let steps = spec.steps_per_day();
    for d in 0..spec.days {
        let (mut p, mut c) = (Vec::new(), Vec::new());
        for s in &scenes {
            for t in d * steps..(d + 1) * steps {
                p.push(s.cube.power.as_ref().unwrap().values[t]);
                c.push(f64::from(s.cube.center_values(t)[0]));
            }
        }
        let r = pearson(&p, &c);
        assert!(r <= -0.5, "day {d}: correlation {r}");
    }
}

#[test]
fn kept_fraction_falls_with_tolerance() {
    let spec = SceneSpec::default();
    let scenes = generate_scene(&spec).unwrap();
    let steps = spec.steps_per_day();
    let mut kept = vec![0usize; 5];
    let mut total = 0;
    for s in &scenes {
        for d in 0..spec.days {
            let c: Vec<f64> = (d * steps..(d + 1) * steps).map(|t| f64::from(s.cube.center_values(t)[0])).collect();
            total += c.len() - 1;
            for (k, delta) in [0.0, 0.01, 0.02, 0.05, 0.1].into_iter().enumerate() {
                kept[k] += tolerance_filter(&c, delta).len();
            }
        }
    }
    assert_eq!(kept[0], total);
    assert!(kept.windows(2).all(|w| w[1] < w[0]), "{kept:?}");
}

//! Bagged CART ensembles with per-split feature subsampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::container::PayloadReader;
use super::tree::{channel_targets, uniform_window, FeatureSampler, RegressionTree};
use super::{
    check_input, ChannelModel, ChannelTrainer, Container, FeatureMatrix, Fitted, ModelError, ModelKind, TreeSpec,
};
use crate::dataset::{ChannelTriple, SequenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSpec {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub tree_count: usize,
    pub bootstrap: bool,
    pub feature_subsample: f64,
    pub seed: u64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            max_depth: 12,
            min_samples_leaf: 5,
            tree_count: 50,
            bootstrap: true,
            feature_subsample: 0.33,
            seed: 0,
        }
    }
}

impl ForestSpec {
    pub fn tree_spec(&self) -> TreeSpec {
        TreeSpec {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.tree_spec().validate()?;
        if self.tree_count == 0 {
            return Err(ModelError::InvalidSpec("tree_count must be positive".into()));
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return Err(ModelError::InvalidSpec("feature_subsample must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn features_per_split(&self, features: usize) -> usize {
        ((self.feature_subsample * features as f64).ceil() as usize).clamp(1, features)
    }
}

struct Subsample<'a> {
    rng: &'a mut ChaCha8Rng,
    count: usize,
}

impl FeatureSampler for Subsample<'_> {
    fn candidates(&mut self, features: usize) -> Vec<usize> {
        if self.count >= features {
            return (0..features).collect();
        }
        let mut v = index::sample(self.rng, features, self.count).into_vec();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<RegressionTree>,
}

impl RandomForest {
    pub fn predict(&self, features: &[f32]) -> f64 {
        self.trees.iter().map(|t| t.predict(features)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Tree `i` draws its bootstrap and split features from stream `i` of the seed,
/// so the ensemble is identical for any thread count.
pub fn fit_forest(x: &FeatureMatrix, y: &[f64], spec: &ForestSpec) -> Result<RandomForest, ModelError> {
    spec.validate()?;
    if x.rows == 0 || x.cols == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    if y.len() != x.rows {
        return Err(ModelError::DimensionMismatch {
            expected: x.rows,
            got: y.len(),
        });
    }
    if x.data.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput("forest training data".into()));
    }
    let tree_spec = spec.tree_spec();
    let count = spec.features_per_split(x.cols);
    let trees = (0..spec.tree_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let rows: Vec<usize> = if spec.bootstrap {
                (0..x.rows).map(|_| rng.random_range(0..x.rows)).collect()
            } else {
                (0..x.rows).collect()
            };
            let mut sampler = Subsample { rng: &mut rng, count };
            RegressionTree::grow(x, y, rows, &tree_spec, &mut sampler)
        })
        .collect();
    Ok(RandomForest { trees })
}

/// One forest per channel, each fed that channel's latest window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub window: usize,
    pub spec: ForestSpec,
    pub forests: Vec<RandomForest>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForestHeader {
    window: usize,
    spec: ForestSpec,
    forests: Vec<Vec<Vec<[i64; 3]>>>,
}

impl ForestModel {
    pub fn fit(samples: &[SequenceSample], spec: &ForestSpec) -> Result<Self, ModelError> {
        let window = uniform_window(samples)?;
        let forests = (0..3)
            .map(|c| {
                let channel_spec = ForestSpec {
                    seed: spec.seed.wrapping_add(c as u64),
                    ..*spec
                };
                fit_forest(
                    &FeatureMatrix::from_last_frames(samples, c),
                    &channel_targets(samples, c),
                    &channel_spec,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            window,
            spec: *spec,
            forests,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        c.expect_kind(ModelKind::Forest)?;
        let h: ForestHeader = c.header_as()?;
        if h.forests.len() != 3 || h.forests.iter().any(|f| f.is_empty()) {
            return Err(ModelError::FormatViolation("forest model needs one non-empty forest per channel".into()));
        }
        let mut rd = PayloadReader::new(&c.payload);
        let mut forests = Vec::with_capacity(3);
        for f in &h.forests {
            let trees = f
                .iter()
                .map(|layout| RegressionTree::decode(layout, rd.take(layout.len())?, h.window * h.window))
                .collect::<Result<_, _>>()?;
            forests.push(RandomForest { trees });
        }
        rd.finish()?;
        Ok(Self {
            window: h.window,
            spec: h.spec,
            forests,
        })
    }
}

impl ChannelModel for ForestModel {
    fn label(&self) -> &'static str {
        "forest"
    }

    fn window(&self) -> Option<usize> {
        Some(self.window)
    }

    fn predict(&self, sample: &SequenceSample) -> Result<ChannelTriple, ModelError> {
        check_input(sample, 1, Some(self.window))?;
        let mut out = [0.0; 3];
        for (c, f) in self.forests.iter().enumerate() {
            out[c] = f.predict(&sample.last_frame_channel(c));
        }
        Ok(ChannelTriple(out))
    }

    fn to_container(&self) -> Option<Container> {
        let mut layouts = Vec::new();
        let mut payload = Vec::new();
        for f in &self.forests {
            let mut fl = Vec::new();
            for t in &f.trees {
                let (l, v) = t.encode();
                fl.push(l);
                payload.extend(v);
            }
            layouts.push(fl);
        }
        let h = ForestHeader {
            window: self.window,
            spec: self.spec,
            forests: layouts,
        };
        Container::new(ModelKind::Forest, &h, payload).ok()
    }
}

pub struct ForestTrainer {
    pub spec: ForestSpec,
}

impl ChannelTrainer for ForestTrainer {
    fn name(&self) -> &'static str {
        "forest"
    }

    /// The run seed replaces the spec's seed.
    fn fit(&self, train: &[SequenceSample], _validation: &[SequenceSample], seed: u64) -> Result<Fitted, ModelError> {
        let spec = ForestSpec { seed, ..self.spec };
        Ok(Fitted {
            model: Box::new(ForestModel::fit(train, &spec)?),
            curve: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::fit_tree;
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn noisy(n: usize, seed: u64) -> (FeatureMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut data = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f32 = rng.random();
            let b: f32 = rng.random();
            data.extend([a, b]);
            y.push((6.0 * f64::from(a)).sin() + f64::from(b) + noise.sample(&mut rng));
        }
        (FeatureMatrix::new(n, 2, data).unwrap(), y)
    }

    #[test]
    fn single_tree_forest_is_a_tree() {
        let (x, y) = noisy(200, 1);
        let spec = ForestSpec {
            tree_count: 1,
            bootstrap: false,
            feature_subsample: 1.0,
            max_depth: 6,
            min_samples_leaf: 3,
            seed: 99,
        };
        let f = fit_forest(&x, &y, &spec).unwrap();
        let t = fit_tree(&x, &y, &spec.tree_spec()).unwrap();
        assert_eq!(f.trees[0], t);
        for i in 0..x.rows {
            assert_eq!(f.predict(x.row(i)).to_bits(), t.predict(x.row(i)).to_bits());
        }
    }

    #[test]
    fn constant_labels() {
        let (x, _) = noisy(50, 2);
        let f = fit_forest(&x, &[0.375; 50], &ForestSpec::default()).unwrap();
        assert_eq!(f.predict(&[0.3, 0.3]), 0.375);
    }

    #[test]
    fn same_seed_same_forest() {
        let (x, y) = noisy(100, 3);
        let spec = ForestSpec {
            tree_count: 8,
            ..Default::default()
        };
        assert_eq!(fit_forest(&x, &y, &spec).unwrap(), fit_forest(&x, &y, &spec).unwrap());
    }

    #[test]
    fn more_trees_less_seed_variance() {
        let (x, y) = noisy(300, 4);
        let probes = [[0.2f32, 0.5], [0.7, 0.1], [0.5, 0.9]];
        let spread = |trees: usize| {
            let preds: Vec<Vec<f64>> = (0..12)
                .map(|s| {
                    let spec = ForestSpec {
                        tree_count: trees,
                        seed: 1000 + s,
                        min_samples_leaf: 2,
                        feature_subsample: 0.5,
                        ..Default::default()
                    };
                    let f = fit_forest(&x, &y, &spec).unwrap();
                    probes.iter().map(|p| f.predict(p)).collect()
                })
                .collect();
            (0..probes.len())
                .map(|j| {
                    let m = preds.iter().map(|p| p[j]).sum::<f64>() / preds.len() as f64;
                    preds.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / preds.len() as f64
                })
                .sum::<f64>()
        };
        let (v10, v100) = (spread(10), spread(100));
        assert!(v100 < v10, "variance with 100 trees {v100} vs 10 trees {v10}");
    }

    #[test]
    fn bad_spec() {
        let (x, y) = noisy(10, 5);
        let spec = ForestSpec {
            feature_subsample: 0.0,
            ..Default::default()
        };
        assert!(matches!(fit_forest(&x, &y, &spec), Err(ModelError::InvalidSpec(_))));
    }
}

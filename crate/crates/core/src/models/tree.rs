//! CART regression trees on flattened single-channel windows.

use serde::{Deserialize, Serialize};

use super::container::PayloadReader;
use super::{check_input, ChannelModel, ChannelTrainer, Container, Fitted, ModelError, ModelKind};
use crate::dataset::{ChannelTriple, SequenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSpec {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            max_depth: 10,
            min_samples_leaf: 5,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.min_samples_leaf == 0 {
            return Err(ModelError::InvalidSpec("min_samples_leaf must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major `rows × cols` feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::ShapeMismatch(format!(
                "{rows}x{cols} features from {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Channel `channel` of each sample's last frame, row-major flattened.
    pub fn from_last_frames(samples: &[SequenceSample], channel: usize) -> Self {
        let cols = samples.first().map_or(0, |s| s.window * s.window);
        let mut data = Vec::with_capacity(samples.len() * cols);
        for s in samples {
            data.extend(s.last_frame_channel(channel));
        }
        Self {
            rows: samples.len(),
            cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Node {
    Leaf(f32),
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    features: usize,
}

/// Chooses which features a split may examine.
pub(crate) trait FeatureSampler {
    fn candidates(&mut self, features: usize) -> Vec<usize>;
}

pub(crate) struct AllFeatures;

impl FeatureSampler for AllFeatures {
    fn candidates(&mut self, features: usize) -> Vec<usize> {
        (0..features).collect()
    }
}

struct BestSplit {
    feature: usize,
    threshold: f32,
    score: f64,
}

/// Midpoint of two adjacent distinct values, kept strictly below `hi` in f32.
fn midpoint(lo: f32, hi: f32) -> f32 {
    let t = lo + (hi - lo) * 0.5;
    if t < hi {
        t
    } else {
        lo
    }
}

fn mean(y: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
}

impl RegressionTree {
    pub(crate) fn grow(
        x: &FeatureMatrix,
        y: &[f64],
        rows: Vec<usize>,
        spec: &TreeSpec,
        sampler: &mut dyn FeatureSampler,
    ) -> Self {
        let mut tree = RegressionTree {
            nodes: Vec::new(),
            features: x.cols,
        };
        tree.build(x, y, rows, 0, spec, sampler);
        tree
    }

    fn build(
        &mut self,
        x: &FeatureMatrix,
        y: &[f64],
        rows: Vec<usize>,
        depth: usize,
        spec: &TreeSpec,
        sampler: &mut dyn FeatureSampler,
    ) -> usize {
        let id = self.nodes.len();
        let leaf = Node::Leaf(mean(y, &rows) as f32);
        self.nodes.push(leaf);
        let y0 = y[rows[0]];
        if depth >= spec.max_depth || rows.len() < 2 * spec.min_samples_leaf || rows.iter().all(|&i| y[i] == y0) {
            return id;
        }
        let Some(best) = best_split(x, y, &rows, spec.min_samples_leaf, sampler) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, best.feature) <= best.threshold);
        drop(rows);
        let left = self.build(x, y, l, depth + 1, spec, sampler);
        let right = self.build(x, y, r, depth + 1, spec, sampler);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    pub fn predict(&self, features: &[f32]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return f64::from(v),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if features[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn d(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + d(nodes, left).max(d(nodes, right)),
            }
        }
        d(&self.nodes, 0)
    }

    /// Root split as (feature, threshold), if any.
    pub fn root_split(&self) -> Option<(usize, f32)> {
        match self.nodes[0] {
            Node::Split { feature, threshold, .. } => Some((feature, threshold)),
            Node::Leaf(_) => None,
        }
    }

    /// Structure rows `[feature or -1, left, right]` and one value per node.
    pub(crate) fn encode(&self) -> (Vec<[i64; 3]>, Vec<f32>) {
        self.nodes
            .iter()
            .map(|n| match *n {
                Node::Leaf(v) => ([-1, 0, 0], v),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => ([feature as i64, left as i64, right as i64], threshold),
            })
            .unzip()
    }

    pub(crate) fn decode(layout: &[[i64; 3]], values: &[f32], features: usize) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::FormatViolation(m);
        if layout.is_empty() || layout.len() != values.len() {
            return Err(bad("tree layout and values disagree".into()));
        }
        let n = layout.len() as i64;
        let mut nodes = Vec::with_capacity(layout.len());
        for (i, (&[f, l, r], &v)) in layout.iter().zip(values).enumerate() {
            if f < 0 {
                nodes.push(Node::Leaf(v));
                continue;
            }
            // Children always follow their parent, which rules out cycles.
            if f as usize >= features || l <= i as i64 || r <= i as i64 || l >= n || r >= n {
                return Err(bad(format!("tree node {i} is malformed")));
            }
            nodes.push(Node::Split {
                feature: f as usize,
                threshold: v,
                left: l as usize,
                right: r as usize,
            });
        }
        Ok(Self { nodes, features })
    }
}

fn best_split(
    x: &FeatureMatrix,
    y: &[f64],
    rows: &[usize],
    min_leaf: usize,
    sampler: &mut dyn FeatureSampler,
) -> Option<BestSplit> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
    let parent = total * total / n as f64;
    // Between-group sum of squares must beat the parent by more than rounding noise.
    let min_gain = 1e-12 * total_sq.max(1.0);
    let mut best: Option<BestSplit> = None;
    let mut pairs: Vec<(f32, f64)> = Vec::with_capacity(n);
    for f in sampler.candidates(x.cols) {
        pairs.clear();
        pairs.extend(rows.iter().map(|&i| (x.get(i, f), y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for p in 1..n {
            left_sum += pairs[p - 1].1;
            if p < min_leaf || n - p < min_leaf || pairs[p - 1].0 == pairs[p].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / p as f64 + right_sum * right_sum / (n - p) as f64;
            if score - parent > min_gain && best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: midpoint(pairs[p - 1].0, pairs[p].0),
                    score,
                });
            }
        }
    }
    best
}

pub fn fit_tree(x: &FeatureMatrix, y: &[f64], spec: &TreeSpec) -> Result<RegressionTree, ModelError> {
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
        return Err(ModelError::NonFiniteInput("tree training data".into()));
    }
    Ok(RegressionTree::grow(x, y, (0..x.rows).collect(), spec, &mut AllFeatures))
}

pub(crate) fn channel_targets(samples: &[SequenceSample], channel: usize) -> Vec<f64> {
    samples.iter().map(|s| s.target.channel(channel)).collect()
}

pub(crate) fn uniform_window(samples: &[SequenceSample]) -> Result<usize, ModelError> {
    let w = samples.first().ok_or(ModelError::EmptyTrainingSet)?.window;
    if samples.iter().any(|s| s.window != w) {
        return Err(ModelError::ShapeMismatch("training samples mix window sizes".into()));
    }
    Ok(w)
}

/// One tree per channel, each fed that channel's latest window.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    pub window: usize,
    pub spec: TreeSpec,
    pub trees: Vec<RegressionTree>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeHeader {
    window: usize,
    spec: TreeSpec,
    trees: Vec<Vec<[i64; 3]>>,
}

impl TreeModel {
    pub fn fit(samples: &[SequenceSample], spec: &TreeSpec) -> Result<Self, ModelError> {
        let window = uniform_window(samples)?;
        let trees = (0..3)
            .map(|c| fit_tree(&FeatureMatrix::from_last_frames(samples, c), &channel_targets(samples, c), spec))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            window,
            spec: *spec,
            trees,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        c.expect_kind(ModelKind::Tree)?;
        let h: TreeHeader = c.header_as()?;
        if h.trees.len() != 3 {
            return Err(ModelError::FormatViolation("tree model needs one tree per channel".into()));
        }
        let mut rd = PayloadReader::new(&c.payload);
        let trees = h
            .trees
            .iter()
            .map(|layout| RegressionTree::decode(layout, rd.take(layout.len())?, h.window * h.window))
            .collect::<Result<_, _>>()?;
        rd.finish()?;
        Ok(Self {
            window: h.window,
            spec: h.spec,
            trees,
        })
    }
}

impl ChannelModel for TreeModel {
    fn label(&self) -> &'static str {
        "tree"
    }

    fn window(&self) -> Option<usize> {
        Some(self.window)
    }

    fn predict(&self, sample: &SequenceSample) -> Result<ChannelTriple, ModelError> {
        check_input(sample, 1, Some(self.window))?;
        let mut out = [0.0; 3];
        for (c, t) in self.trees.iter().enumerate() {
            out[c] = t.predict(&sample.last_frame_channel(c));
        }
        Ok(ChannelTriple(out))
    }

    fn to_container(&self) -> Option<Container> {
        let mut layouts = Vec::new();
        let mut payload = Vec::new();
        for t in &self.trees {
            let (l, v) = t.encode();
            layouts.push(l);
            payload.extend(v);
        }
        let h = TreeHeader {
            window: self.window,
            spec: self.spec,
            trees: layouts,
        };
        Container::new(ModelKind::Tree, &h, payload).ok()
    }
}

pub struct TreeTrainer {
    pub spec: TreeSpec,
}

impl ChannelTrainer for TreeTrainer {
    fn name(&self) -> &'static str {
        "tree"
    }

    fn fit(&self, train: &[SequenceSample], _validation: &[SequenceSample], _seed: u64) -> Result<Fitted, ModelError> {
        Ok(Fitted {
            model: Box::new(TreeModel::fit(train, &self.spec)?),
            curve: Vec::new(),
        })
    }
}

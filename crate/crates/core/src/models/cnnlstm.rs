//! Convolutional encoder per frame, an LSTM over the frame sequence and a
//! sigmoid head giving the next site-cell reflectances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::container::PayloadReader;
use super::{check_input, ChannelModel, ChannelTrainer, Container, Fitted, ModelError, ModelKind};
use crate::autodiff::kernels::{self, LstmWeights};
use crate::autodiff::{
    adam_update, clip_global_norm, glorot_bound, AdamConfig, AdamState, AutodiffError, NodeId, ParameterSet, Scalar,
    Tape, Tensor,
};
use crate::dataset::{ChannelTriple, SequenceSample};

const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnLstmSpec {
    pub conv_blocks: usize,
    pub convs_per_block: usize,
    pub filters: usize,
    pub dense_dims: Vec<usize>,
    pub lstm_hidden: usize,
    pub steps: usize,
    pub window: usize,
}

impl Default for CnnLstmSpec {
    fn default() -> Self {
        Self {
            conv_blocks: 2,
            convs_per_block: 2,
            filters: 32,
            dense_dims: vec![256, 256],
            lstm_hidden: 64,
            steps: 4,
            window: 10,
        }
    }
}

impl CnnLstmSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.convs_per_block == 0 || self.filters == 0 || self.lstm_hidden == 0 || self.steps == 0 {
            return bad("conv, filter, hidden and step counts must be positive");
        }
        if self.dense_dims.iter().any(|&d| d == 0) {
            return bad("dense dimensions must be positive");
        }
        let mut s = self.window;
        for _ in 0..self.conv_blocks {
            if s < 2 {
                return Err(ModelError::InvalidSpec(format!(
                    "window {} is too small for {} pooling stages",
                    self.window, self.conv_blocks
                )));
            }
            s /= 2;
        }
        if s == 0 {
            return bad("window must be positive");
        }
        Ok(())
    }

    /// Edge of the feature map after all pooling stages.
    pub fn pooled_edge(&self) -> usize {
        (0..self.conv_blocks).fold(self.window, |s, _| s / 2)
    }

    /// Length of the encoder output fed to the LSTM.
    pub fn feature_dim(&self) -> usize {
        *self
            .dense_dims
            .last()
            .unwrap_or(&(self.pooled_edge() * self.pooled_edge() * self.conv_channels_out()))
    }

    fn conv_channels_out(&self) -> usize {
        if self.conv_blocks == 0 {
            CHANNELS
        } else {
            self.filters
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let mut shapes = Vec::new();
        let mut cin = CHANNELS;
        for b in 0..self.conv_blocks {
            for j in 0..self.convs_per_block {
                shapes.push((format!("conv{b}.{j}.kernel"), vec![3, 3, cin, self.filters]));
                shapes.push((format!("conv{b}.{j}.bias"), vec![self.filters]));
                cin = self.filters;
            }
        }
        let mut d = self.pooled_edge() * self.pooled_edge() * self.conv_channels_out();
        for (i, &m) in self.dense_dims.iter().enumerate() {
            shapes.push((format!("dense{i}.weight"), vec![m, d]));
            shapes.push((format!("dense{i}.bias"), vec![m]));
            d = m;
        }
        let k = self.lstm_hidden;
        shapes.push(("lstm.weight".into(), vec![4 * k, d + k]));
        shapes.push(("lstm.bias".into(), vec![4 * k]));
        shapes.push(("head.weight".into(), vec![CHANNELS, k]));
        shapes.push(("head.bias".into(), vec![CHANNELS]));
        ParamLayout { shapes }
    }
}

/// Names and shapes of the parameters, in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl ParamLayout {
    pub fn matches<T: Scalar>(&self, p: &ParameterSet<T>) -> bool {
        p.len() == self.shapes.len()
            && self
                .shapes
                .iter()
                .enumerate()
                .all(|(i, (n, s))| p.name(i) == n && p.tensor(i).shape() == s.as_slice())
    }
}

/// Glorot-uniform weights, zero biases, forget-gate bias 1.
pub fn init_params<T: Scalar>(spec: &CnnLstmSpec, seed: u64) -> ParameterSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for (name, shape) in spec.layout().shapes {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".bias") {
            let mut v = vec![0.0; n];
            if name == "lstm.bias" {
                let k = spec.lstm_hidden;
                v[k..2 * k].iter_mut().for_each(|b| *b = 1.0);
            }
            v
        } else {
            let (fan_in, fan_out) = match shape.as_slice() {
                [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
                [rows, cols] => (*cols, *rows),
                _ => unreachable!("weights are matrices or conv kernels"),
            };
            let b = glorot_bound(fan_in, fan_out);
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        p.push(name, Tensor::from_f64(&shape, &t).expect("layout shapes are valid"));
    }
    p
}

fn frame_tensor<T: Scalar>(frame: &[f32], w: usize) -> Tensor<T> {
    Tensor::new(vec![w, w, CHANNELS], frame.iter().map(|&v| T::of(f64::from(v))).collect())
        .expect("frame has w*w*3 values")
}

fn trailing_frames<'a>(spec: &CnnLstmSpec, sample: &'a SequenceSample) -> impl Iterator<Item = &'a [f32]> {
    (sample.steps - spec.steps..sample.steps).map(|s| sample.frame(s))
}

/// Straight-line forward pass using the kernels directly (no tape).
pub fn forward_kernels<T: Scalar>(
    spec: &CnnLstmSpec,
    params: &ParameterSet<T>,
    sample: &SequenceSample,
) -> Result<[T; 3], AutodiffError> {
    let k = spec.lstm_hidden;
    let mut c = Tensor::zeros(&[k]);
    let mut h = Tensor::zeros(&[k]);
    let n_dense = spec.dense_dims.len();
    let base_lstm = params.len() - 4;
    for frame in trailing_frames(spec, sample) {
        let mut x = frame_tensor::<T>(frame, spec.window);
        let mut pi = 0;
        for _ in 0..spec.conv_blocks {
            for _ in 0..spec.convs_per_block {
                x = kernels::relu(&kernels::conv2d_same(&x, params.tensor(pi), params.tensor(pi + 1))?);
                pi += 2;
            }
            x = kernels::maxpool_2x2(&x)?.0;
        }
        let n = x.len();
        let mut v = x.reshaped(&[n])?;
        for _ in 0..n_dense {
            v = kernels::relu(&kernels::dense(&v, params.tensor(pi), params.tensor(pi + 1))?);
            pi += 2;
        }
        let lw = LstmWeights {
            weight: params.tensor(base_lstm),
            bias: params.tensor(base_lstm + 1),
        };
        (c, h) = kernels::lstm_step(&c, &h, &v, &lw)?;
    }
    let out = kernels::sigmoid(&kernels::dense(&h, params.tensor(base_lstm + 2), params.tensor(base_lstm + 3))?);
    let d = out.data();
    Ok([d[0], d[1], d[2]])
}

/// Record the forward pass of one sample on `tape`; `nodes` are the parameter
/// nodes in layout order. Returns the 3-vector output node.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &CnnLstmSpec,
    nodes: &[NodeId],
    sample: &SequenceSample,
) -> Result<NodeId, AutodiffError> {
    let k = spec.lstm_hidden;
    let mut c = tape.constant(Tensor::zeros(&[k]));
    let mut h = tape.constant(Tensor::zeros(&[k]));
    let base_lstm = nodes.len() - 4;
    for frame in trailing_frames(spec, sample) {
        let mut x = tape.constant(frame_tensor(frame, spec.window));
        let mut pi = 0;
        for _ in 0..spec.conv_blocks {
            for _ in 0..spec.convs_per_block {
                let z = tape.conv2d_same(x, nodes[pi], nodes[pi + 1])?;
                x = tape.relu(z);
                pi += 2;
            }
            x = tape.maxpool_2x2(x)?;
        }
        let n = tape.value(x).len();
        let mut v = tape.reshape(x, &[n])?;
        for _ in 0..spec.dense_dims.len() {
            let z = tape.dense(v, nodes[pi], nodes[pi + 1])?;
            v = tape.relu(z);
            pi += 2;
        }
        (c, h) = tape.lstm_step(c, h, v, nodes[base_lstm], nodes[base_lstm + 1])?;
    }
    let z = tape.dense(h, nodes[base_lstm + 2], nodes[base_lstm + 3])?;
    Ok(tape.sigmoid(z))
}

/// Mean squared target error over `samples` and its gradient, via one tape.
pub fn loss_and_grad<T: Scalar>(
    spec: &CnnLstmSpec,
    params: &ParameterSet<T>,
    samples: &[SequenceSample],
) -> Result<(f64, Vec<Tensor<T>>), AutodiffError> {
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = params.tensors().map(|t| tape.param(t.clone())).collect();
    let mut outs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * CHANNELS);
    for s in samples {
        outs.push(forward_on_tape(&mut tape, spec, &nodes, s)?);
        targets.extend(s.target.0.iter().map(|&v| T::of(v)));
    }
    let pred = tape.concat(&outs)?;
    let pred = tape.reshape(pred, &[samples.len(), CHANNELS])?;
    let target = tape.constant(Tensor::new(vec![samples.len(), CHANNELS], targets)?);
    let loss = tape.mse_loss(pred, target)?;
    let mut g = tape.backward(loss)?;
    let grads = nodes
        .iter()
        .zip(params.tensors())
        .map(|(&n, t)| g.take(n).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((tape.value(loss).data()[0].to_f64(), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Samples per parallel gradient shard. Fixed shards and an ordered
    /// reduction keep results independent of the worker count.
    pub shard_size: usize,
    /// Stop once the full training-set loss falls below this value.
    pub target_train_loss: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 10,
            clip_norm: Some(5.0),
            shard_size: 8,
            target_train_loss: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.shard_size == 0 || self.epochs == 0 {
            return Err(ModelError::InvalidSpec("epochs, batch_size and shard_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidSpec("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Loss used for model selection: validation if available, else training.
    pub best_selection_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnLstm {
    pub spec: CnnLstmSpec,
    pub params: ParameterSet<f32>,
    pub report: TrainReport,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CnnLstmHeader {
    spec: CnnLstmSpec,
    report: TrainReport,
    layout: ParamLayout,
}

/// Mean squared error of `params` on `samples`, summed in fixed-size chunks.
pub fn evaluate_loss(spec: &CnnLstmSpec, params: &ParameterSet<f32>, samples: &[SequenceSample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let partial: Vec<f64> = samples
        .par_chunks(64)
        .map(|chunk| {
            chunk.iter().try_fold(0.0, |acc, s| {
                let p = forward_kernels(spec, params, s)?;
                Ok::<f64, AutodiffError>(acc + (0..3).map(|c| (f64::from(p[c]) - s.target.0[c]).powi(2)).sum::<f64>())
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(partial.iter().sum::<f64>() / samples.len() as f64)
}

fn batch_gradient(
    spec: &CnnLstmSpec,
    params: &ParameterSet<f32>,
    batch: &[SequenceSample],
    shard_size: usize,
) -> Result<(f64, Vec<Tensor<f32>>), AutodiffError> {
    let shards: Vec<(f64, Vec<Tensor<f32>>, usize)> = batch
        .par_chunks(shard_size)
        .map(|s| loss_and_grad(spec, params, s).map(|(l, g)| (l, g, s.len())))
        .collect::<Result<_, _>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for (l, mut g, len) in shards {
        let w = len as f64 / n;
        loss += l * w;
        g.iter_mut().for_each(|t| t.scale(w as f32));
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    Ok((loss, total.expect("batch is non-empty")))
}

fn check_samples(spec: &CnnLstmSpec, samples: &[SequenceSample]) -> Result<(), ModelError> {
    for s in samples {
        check_input(s, spec.steps, Some(spec.window))?;
    }
    Ok(())
}

impl CnnLstm {
    /// Mini-batch Adam with early stopping; returns the best-scoring parameters
    /// and the per-epoch curve.
    pub fn train(
        spec: &CnnLstmSpec,
        cfg: &TrainConfig,
        train: &[SequenceSample],
        validation: &[SequenceSample],
        seed: u64,
    ) -> Result<(Self, Vec<EpochRecord>), ModelError> {
        spec.validate()?;
        cfg.validate()?;
        if train.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        check_samples(spec, train)?;
        check_samples(spec, validation)?;
        let mut params = init_params::<f32>(spec, seed);
        let mut state = AdamState::new(&params);
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(1);
        let mut curve = Vec::new();
        let mut best = (f64::INFINITY, params.clone(), 0usize);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for epoch in 0..cfg.epochs {
            if cfg.shuffle {
                order.shuffle(&mut shuffle_rng);
            }
            let mut epoch_loss = 0.0;
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                batch.clear();
                batch.extend(idx.iter().map(|&i| train[i].clone()));
                let (loss, mut grads) = batch_gradient(spec, &params, &batch, cfg.shard_size)?;
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(ModelError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        detail: format!("batch loss {loss}, parameters finite: {}", params.is_finite()),
                    });
                }
                if let Some(max) = cfg.clip_norm {
                    clip_global_norm(&mut grads, max);
                }
                adam_update(&mut params, &grads, &mut state, &adam)?;
                epoch_loss += loss * idx.len() as f64;
            }
            let train_loss = epoch_loss / train.len() as f64;
            let validation_loss = if validation.is_empty() {
                None
            } else {
                Some(evaluate_loss(spec, &params, validation)?)
            };
            curve.push(EpochRecord {
                epoch,
                train_loss,
                validation_loss,
            });
            let mut full_train = None;
            let selection = match validation_loss {
                Some(v) => v,
                None => *full_train.insert(evaluate_loss(spec, &params, train)?),
            };
            if !selection.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: 0,
                    detail: format!("selection loss {selection}"),
                });
            }
            if selection < best.0 {
                best = (selection, params.clone(), epoch);
            }
            if let Some(target) = cfg.target_train_loss {
                if train_loss < target || full_train.is_some() {
                    let full = match full_train {
                        Some(f) => f,
                        None => evaluate_loss(spec, &params, train)?,
                    };
                    if full < target {
                        // The training objective is what was asked for here.
                        best = (selection, params.clone(), epoch);
                        break;
                    }
                }
            }
            if epoch - best.2 >= cfg.patience {
                break;
            }
        }
        let (selection, params, best_epoch) = best;
        let final_train_loss = evaluate_loss(spec, &params, train)?;
        let report = TrainReport {
            seed,
            epochs_run: curve.len(),
            best_epoch,
            best_selection_loss: selection,
            final_train_loss,
        };
        Ok((
            Self {
                spec: spec.clone(),
                params,
                report,
            },
            curve,
        ))
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        c.expect_kind(ModelKind::Cnnlstm)?;
        let h: CnnLstmHeader = c.header_as()?;
        h.spec.validate().map_err(|e| ModelError::FormatViolation(e.to_string()))?;
        if h.layout != h.spec.layout() {
            return Err(ModelError::FormatViolation("parameter layout does not match the spec".into()));
        }
        let mut rd = PayloadReader::new(&c.payload);
        let mut params = ParameterSet::new();
        for (name, shape) in &h.layout.shapes {
            let n = shape.iter().product();
            let t = Tensor::new(shape.clone(), rd.take(n)?.to_vec())
                .map_err(|e| ModelError::FormatViolation(e.to_string()))?;
            params.push(name.clone(), t);
        }
        rd.finish()?;
        Ok(Self {
            spec: h.spec,
            params,
            report: h.report,
        })
    }
}

impl ChannelModel for CnnLstm {
    fn label(&self) -> &'static str {
        "cnnlstm"
    }

    fn steps(&self) -> usize {
        self.spec.steps
    }

    fn window(&self) -> Option<usize> {
        Some(self.spec.window)
    }

    fn predict(&self, sample: &SequenceSample) -> Result<ChannelTriple, ModelError> {
        check_input(sample, self.spec.steps, Some(self.spec.window))?;
        let p = forward_kernels(&self.spec, &self.params, sample)?;
        Ok(ChannelTriple(p.map(f64::from)))
    }

    fn to_container(&self) -> Option<Container> {
        let h = CnnLstmHeader {
            spec: self.spec.clone(),
            report: self.report.clone(),
            layout: self.spec.layout(),
        };
        Container::new(ModelKind::Cnnlstm, &h, self.params.flatten()).ok()
    }
}

pub struct CnnLstmTrainer {
    pub spec: CnnLstmSpec,
    pub train: TrainConfig,
}

impl ChannelTrainer for CnnLstmTrainer {
    fn name(&self) -> &'static str {
        "cnnlstm"
    }

    fn fit(&self, train: &[SequenceSample], validation: &[SequenceSample], seed: u64) -> Result<Fitted, ModelError> {
        let (model, curve) = CnnLstm::train(&self.spec, &self.train, train, validation, seed)?;
        Ok(Fitted {
            model: Box::new(model),
            curve,
        })
    }
}

/// Seeded initial parameters with every bias shifted uniformly in ±0.2, so
/// no ReLU input sits exactly on its kink.
pub fn gradient_check_point(spec: &CnnLstmSpec, seed: u64) -> ParameterSet<f64> {
    let mut p = init_params::<f64>(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for i in 0..p.len() {
        if p.name(i).ends_with(".bias") {
            for v in p.tensor_mut(i).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    p
}

/// Training loss evaluated in double-double arithmetic.
#[cfg(feature = "extended-precision")]
pub fn wide_loss(spec: &CnnLstmSpec, params: &ParameterSet<f64>, samples: &[SequenceSample]) -> Result<twofloat::TwoFloat, ModelError> {
    use twofloat::TwoFloat;
    let q = params.cast::<TwoFloat>();
    let mut acc = TwoFloat::from(0.0);
    for s in samples {
        let y = forward_kernels(spec, &q, s)?;
        for c in 0..3 {
            let d = y[c] - s.target.0[c];
            acc += d * d;
        }
    }
    Ok(acc.ratio(TwoFloat::from(samples.len() as f64)))
}

/// Central-difference check of the 64-bit analytic gradient at
/// [`gradient_check_point`]; coordinates whose 64-bit difference disagrees by
/// more than [`crate::autodiff::REFINE_ABOVE`] are re-differenced on the
/// double-double loss.
#[cfg(feature = "extended-precision")]
pub fn gradient_check(
    spec: &CnnLstmSpec,
    seed: u64,
    samples: &[SequenceSample],
    h: f64,
) -> Result<crate::autodiff::GradCheckReport, ModelError> {
    spec.validate()?;
    check_samples(spec, samples)?;
    let p = gradient_check_point(spec, seed);
    let loss = |q: &ParameterSet<f64>| loss_and_grad(spec, q, samples).map(|r| r.0).unwrap_or(f64::NAN);
    let grad = |q: &ParameterSet<f64>| loss_and_grad(spec, q, samples).expect("shape checked above").1;
    let fine = |q: &ParameterSet<f64>| wide_loss(spec, q, samples).unwrap_or(twofloat::TwoFloat::from(f64::NAN));
    Ok(crate::autodiff::grad_check_refined(&p, h, loss, fine, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, OpTag, FLIPPED_RULE};

    pub(crate) fn micro_spec() -> CnnLstmSpec {
        CnnLstmSpec {
            conv_blocks: 2,
            convs_per_block: 2,
            filters: 2,
            dense_dims: vec![4, 4],
            lstm_hidden: 3,
            steps: 2,
            window: 4,
        }
    }

    pub(crate) fn random_samples(spec: &CnnLstmSpec, n: usize, seed: u64) -> Vec<SequenceSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| SequenceSample {
                site_id: "s".into(),
                utc_offset_minutes: 0,
                steps: spec.steps,
                window: spec.window,
                input: (0..spec.steps * spec.window * spec.window * 3).map(|_| rng.random()).collect(),
                target: ChannelTriple([rng.random(), rng.random(), rng.random()]),
                target_timestamp: i as i64 * 900,
            })
            .collect()
    }

    #[test]
    fn default_layout_sizes() {
        let spec = CnnLstmSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.pooled_edge(), 2);
        let l = spec.layout();
        let dense0 = l.shapes.iter().find(|(n, _)| n == "dense0.weight").unwrap();
        assert_eq!(dense0.1, vec![256, 128]);
        let head = l.shapes.iter().find(|(n, _)| n == "head.weight").unwrap();
        assert_eq!(head.1, vec![3, 64]);
        let lstm = l.shapes.iter().find(|(n, _)| n == "lstm.weight").unwrap();
        assert_eq!(lstm.1, vec![256, 320]);
    }

    #[test]
    fn window_too_small_for_pooling() {
        let spec = CnnLstmSpec {
            window: 3,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let spec = micro_spec();
        let p = init_params::<f64>(&spec, 3);
        let b = p.get("lstm.bias").unwrap().data();
        assert_eq!(&b[..3], &[0.0; 3]);
        assert_eq!(&b[3..6], &[1.0; 3]);
        assert_eq!(&b[6..], &[0.0; 6]);
    }

    #[test]
    fn tape_and_kernel_forward_agree() {
        let spec = micro_spec();
        let p = init_params::<f64>(&spec, 11);
        for s in random_samples(&spec, 5, 12) {
            let mut tape = Tape::new();
            let nodes: Vec<NodeId> = p.tensors().map(|t| tape.param(t.clone())).collect();
            let out = forward_on_tape(&mut tape, &spec, &nodes, &s).unwrap();
            let direct = forward_kernels(&spec, &p, &s).unwrap();
            for c in 0..3 {
                assert!((tape.value(out).data()[c] - direct[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_in_unit_cube() {
        let spec = micro_spec();
        for seed in 0..50 {
            let p = init_params::<f64>(&spec, seed);
            for s in random_samples(&spec, 20, seed + 100) {
                let y = forward_kernels(&spec, &p, &s).unwrap();
                assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn single_step_is_one_lstm_step_from_zero() {
        let spec = CnnLstmSpec {
            steps: 1,
            ..micro_spec()
        };
        let p = init_params::<f64>(&spec, 5);
        let s = &random_samples(&spec, 1, 6)[0];
        let mut x = frame_tensor::<f64>(s.frame(0), spec.window);
        let mut pi = 0;
        for _ in 0..2 {
            for _ in 0..2 {
                x = kernels::relu(&kernels::conv2d_same(&x, p.tensor(pi), p.tensor(pi + 1)).unwrap());
                pi += 2;
            }
            x = kernels::maxpool_2x2(&x).unwrap().0;
        }
        let mut v = x.reshaped(&[2]).unwrap();
        for _ in 0..2 {
            v = kernels::relu(&kernels::dense(&v, p.tensor(pi), p.tensor(pi + 1)).unwrap());
            pi += 2;
        }
        let zero = Tensor::zeros(&[3]);
        let lw = LstmWeights {
            weight: p.tensor(pi),
            bias: p.tensor(pi + 1),
        };
        let (_, h) = kernels::lstm_step(&zero, &zero, &v, &lw).unwrap();
        let y = kernels::sigmoid(&kernels::dense(&h, p.tensor(pi + 2), p.tensor(pi + 3)).unwrap());
        assert_eq!(y.data(), &forward_kernels(&spec, &p, s).unwrap());
    }

    /// Initial weights with biases moved off zero, so that no ReLU input sits
    /// exactly on its kink.
    #[test]
    fn micro_gradient_check() {
        let spec = micro_spec();
        for seed in 0..20 {
            let samples = random_samples(&spec, 2, seed + 50);
            let r = gradient_check(&spec, seed, &samples, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn wide_loss_agrees_with_64_bit() {
        let spec = micro_spec();
        let p = gradient_check_point(&spec, 3);
        let samples = random_samples(&spec, 3, 4);
        let narrow = loss_and_grad(&spec, &p, &samples).unwrap().0;
        assert!((wide_loss(&spec, &p, &samples).unwrap().to_f64() - narrow).abs() < 1e-14);
    }

    #[test]
    fn gradient_check_detects_a_flipped_rule() {
        let spec = micro_spec();
        let p = init_params::<f64>(&spec, 1);
        let samples = random_samples(&spec, 2, 2);
        for tag in [OpTag::Conv, OpTag::Dense, OpTag::Tanh, OpTag::Mul] {
            FLIPPED_RULE.with(|f| f.set(Some(tag)));
            let r = grad_check(
                &p,
                1e-5,
                |q| loss_and_grad(&spec, q, &samples).unwrap().0,
                |q| loss_and_grad(&spec, q, &samples).unwrap().1,
            );
            FLIPPED_RULE.with(|f| f.set(None));
            assert!(r.max_rel_error > 1e-1, "{tag:?} flip went unnoticed: {r:?}");
        }
    }

    #[test]
    fn refined_check_still_detects_a_flipped_rule() {
        let spec = micro_spec();
        let samples = random_samples(&spec, 2, 2);
        for tag in [OpTag::Conv, OpTag::Relu, OpTag::Pool, OpTag::Sigmoid, OpTag::Dense] {
            FLIPPED_RULE.with(|f| f.set(Some(tag)));
            let r = gradient_check(&spec, 1, &samples, 1e-5).unwrap();
            FLIPPED_RULE.with(|f| f.set(None));
            assert!(r.max_rel_error > 1e-1, "{tag:?} flip went unnoticed: {r:?}");
        }
    }

    #[test]
    fn batch_partition_does_not_change_forward() {
        let spec = micro_spec();
        let p = init_params::<f32>(&spec, 8);
        let samples = random_samples(&spec, 10, 9);
        let one_by_one: f64 = samples
            .iter()
            .map(|s| evaluate_loss(&spec, &p, std::slice::from_ref(s)).unwrap())
            .sum::<f64>()
            / 10.0;
        let batched = evaluate_loss(&spec, &p, &samples).unwrap();
        assert!((one_by_one - batched).abs() < 1e-6);
    }

    #[test]
    fn sharding_matches_single_tape() {
        let spec = micro_spec();
        let p = init_params::<f64>(&spec, 4);
        let samples = random_samples(&spec, 7, 5);
        let (l1, g1) = loss_and_grad(&spec, &p, &samples).unwrap();
        let p32 = p.cast::<f32>();
        let (l2, g2) = batch_gradient(&spec, &p32, &samples, 3).unwrap();
        assert!((l1 - l2).abs() < 1e-5);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - f64::from(*y)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_round_trips() {
        let spec = micro_spec();
        let samples = random_samples(&spec, 12, 21);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            shard_size: 2,
            ..Default::default()
        };
        let (a, ca) = CnnLstm::train(&spec, &cfg, &samples[..9], &samples[9..], 7).unwrap();
        let (b, cb) = CnnLstm::train(&spec, &cfg, &samples[..9], &samples[9..], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let back = CnnLstm::from_container(&a.to_container().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_training_set() {
        let r = CnnLstm::train(&micro_spec(), &TrainConfig::default(), &[], &[], 0);
        assert!(matches!(r, Err(ModelError::EmptyTrainingSet)));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let spec = micro_spec();
        let mut samples = random_samples(&spec, 4, 1);
        samples[0].target = ChannelTriple([f64::NAN, 0.0, 0.0]);
        let r = CnnLstm::train(&spec, &TrainConfig::default(), &samples, &[], 0);
        assert!(matches!(r, Err(ModelError::NonFiniteLoss { epoch: 0, .. })), "{r:?}");
    }
}

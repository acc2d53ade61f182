//! Next-step channel forecasters behind one trait, a name-keyed trainer
//! registry and a shared binary container for fitted models.

mod cnnlstm;
mod container;
mod forest;
mod persistence;
mod tree;
mod truth;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::dataset::{ChannelTriple, SequenceSample};

pub use cnnlstm::{
    evaluate_loss, forward_kernels, forward_on_tape, gradient_check_point, init_params, loss_and_grad, CnnLstm, CnnLstmSpec, CnnLstmTrainer, EpochRecord, ParamLayout,
    TrainConfig, TrainReport,
};
#[cfg(feature = "extended-precision")]
pub use cnnlstm::{gradient_check, wide_loss};
pub(crate) use container::PayloadReader;
pub use container::{read_container, write_container, Container, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use forest::{fit_forest, ForestModel, ForestSpec, ForestTrainer, RandomForest};
pub use persistence::{Persistence, PersistenceTrainer};
pub use tree::{fit_tree, FeatureMatrix, RegressionTree, TreeModel, TreeSpec, TreeTrainer};
pub use truth::TruthLookup;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("format violation: {0}")]
    FormatViolation(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("no prediction available: {0}")]
    Unavailable(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::ShapeMismatch(e.to_string())
    }
}

/// Tag stored in the model container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Persistence,
    Tree,
    Forest,
    Cnnlstm,
    Svr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Persistence,
        ModelKind::Tree,
        ModelKind::Forest,
        ModelKind::Cnnlstm,
        ModelKind::Svr,
    ];

    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Persistence => 0,
            ModelKind::Tree => 1,
            ModelKind::Forest => 2,
            ModelKind::Cnnlstm => 3,
            ModelKind::Svr => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Persistence => "persistence",
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
            ModelKind::Cnnlstm => "cnnlstm",
            ModelKind::Svr => "svr",
        }
    }
}

/// A fitted next-step channel forecaster.
pub trait ChannelModel: Send + Sync + std::fmt::Debug {
    /// Short name used in reports.
    fn label(&self) -> &'static str;

    /// Minimum history length consumed; longer histories use the trailing frames.
    fn steps(&self) -> usize {
        1
    }

    /// Window edge the model was fitted on, if it depends on one.
    fn window(&self) -> Option<usize> {
        None
    }

    fn predict(&self, sample: &SequenceSample) -> Result<ChannelTriple, ModelError>;

    /// Order-preserving parallel prediction; results do not depend on thread count.
    fn predict_many(&self, samples: &[SequenceSample]) -> Result<Vec<ChannelTriple>, ModelError> {
        samples.par_iter().map(|s| self.predict(s)).collect()
    }

    /// Serializable form; `None` for models that only exist in memory.
    fn to_container(&self) -> Option<Container>;
}

pub(crate) fn check_input(
    sample: &SequenceSample,
    steps: usize,
    window: Option<usize>,
) -> Result<(), ModelError> {
    if sample.steps < steps {
        return Err(ModelError::ShapeMismatch(format!(
            "model needs {steps} frames, sample has {}",
            sample.steps
        )));
    }
    if let Some(w) = window {
        if sample.window != w {
            return Err(ModelError::ShapeMismatch(format!(
                "model fitted on {w}x{w} windows, sample is {0}x{0}",
                sample.window
            )));
        }
    }
    Ok(())
}

/// Output of a trainer: the model plus its per-epoch curve (empty for non-iterative fits).
#[derive(Debug)]
pub struct Fitted {
    pub model: Box<dyn ChannelModel>,
    pub curve: Vec<EpochRecord>,
}

/// Fits one family of channel model from training and validation samples.
pub trait ChannelTrainer: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, train: &[SequenceSample], validation: &[SequenceSample], seed: u64) -> Result<Fitted, ModelError>;
}

/// Specs for every registered channel model family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSpecs {
    pub tree: TreeSpec,
    pub forest: ForestSpec,
    pub cnnlstm: CnnLstmSpec,
    pub train: TrainConfig,
}

/// Name-keyed channel trainers, selected at runtime.
pub struct ChannelRegistry {
    trainers: BTreeMap<&'static str, Box<dyn ChannelTrainer>>,
}

impl ChannelRegistry {
    pub fn empty() -> Self {
        Self {
            trainers: BTreeMap::new(),
        }
    }

    pub fn with_defaults(specs: &ChannelSpecs) -> Self {
        let mut r = Self::empty();
        r.register(Box::new(PersistenceTrainer));
        r.register(Box::new(TreeTrainer { spec: specs.tree }));
        r.register(Box::new(ForestTrainer { spec: specs.forest }));
        r.register(Box::new(CnnLstmTrainer {
            spec: specs.cnnlstm.clone(),
            train: specs.train.clone(),
        }));
        r
    }

    pub fn register(&mut self, trainer: Box<dyn ChannelTrainer>) {
        self.trainers.insert(trainer.name(), trainer);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ChannelTrainer, ModelError> {
        self.trainers
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| ModelError::UnknownModel(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.trainers.keys().copied()
    }
}

/// Decode a container into the channel model it holds.
pub fn channel_model_from_container(c: &Container) -> Result<Box<dyn ChannelModel>, ModelError> {
    Ok(match c.kind {
        ModelKind::Persistence => Box::new(Persistence::from_container(c)?),
        ModelKind::Tree => Box::new(TreeModel::from_container(c)?),
        ModelKind::Forest => Box::new(ForestModel::from_container(c)?),
        ModelKind::Cnnlstm => Box::new(CnnLstm::from_container(c)?),
        ModelKind::Svr => {
            return Err(ModelError::FormatViolation(
                "container holds a power regressor, not a channel model".into(),
            ))
        }
    })
}

pub fn save_model(model: &dyn ChannelModel, path: &Path) -> Result<(), ModelError> {
    let c = model
        .to_container()
        .ok_or_else(|| ModelError::FormatViolation(format!("{} models are not persistable", model.label())))?;
    write_container(&c, path)
}

pub fn load_model(path: &Path) -> Result<Box<dyn ChannelModel>, ModelError> {
    channel_model_from_container(&read_container(path)?)
}

/// Load, rejecting files of any other kind.
pub fn load_model_as(path: &Path, expected: ModelKind) -> Result<Box<dyn ChannelModel>, ModelError> {
    let c = read_container(path)?;
    if c.kind != expected {
        return Err(ModelError::FormatViolation(format!(
            "expected a {} model, file holds {}",
            expected.name(),
            c.kind.name()
        )));
    }
    channel_model_from_container(&c)
}

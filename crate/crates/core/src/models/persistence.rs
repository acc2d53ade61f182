use super::{check_input, ChannelModel, ChannelTrainer, Container, EpochRecord, Fitted, ModelError, ModelKind};
use crate::dataset::{ChannelTriple, SequenceSample};

/// Predicts no change: the site cell of the last input frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Persistence;

impl Persistence {
    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        c.expect_kind(ModelKind::Persistence)?;
        if !c.payload.is_empty() {
            return Err(ModelError::FormatViolation("persistence carries no parameters".into()));
        }
        Ok(Persistence)
    }
}

impl ChannelModel for Persistence {
    fn label(&self) -> &'static str {
        "persistence"
    }

    fn predict(&self, sample: &SequenceSample) -> Result<ChannelTriple, ModelError> {
        check_input(sample, 1, None)?;
        Ok(sample.last_center())
    }

    fn to_container(&self) -> Option<Container> {
        Container::new(ModelKind::Persistence, &serde_json::json!({}), Vec::new()).ok()
    }
}

pub struct PersistenceTrainer;

impl ChannelTrainer for PersistenceTrainer {
    fn name(&self) -> &'static str {
        "persistence"
    }

    fn fit(&self, _train: &[SequenceSample], _validation: &[SequenceSample], _seed: u64) -> Result<Fitted, ModelError> {
        Ok(Fitted {
            model: Box::new(Persistence),
            curve: Vec::<EpochRecord>::new(),
        })
    }
}

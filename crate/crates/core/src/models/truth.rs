use std::collections::HashMap;

use super::{ChannelModel, Container, ModelError};
use crate::dataset::{ChannelTriple, SequenceSample};

/// Returns the recorded next-step channels for a known (site, time); an
/// in-memory stand-in for a perfect forecaster when bounding downstream error.
#[derive(Debug, Clone, Default)]
pub struct TruthLookup {
    table: HashMap<(String, i64), ChannelTriple>,
}

impl TruthLookup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site_id: &str, timestamp: i64, value: ChannelTriple) {
        self.table.insert((site_id.to_string(), timestamp), value);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl ChannelModel for TruthLookup {
    fn label(&self) -> &'static str {
        "truth"
    }

    fn predict(&self, sample: &SequenceSample) -> Result<ChannelTriple, ModelError> {
        self.table
            .get(&(sample.site_id.clone(), sample.target_timestamp))
            .copied()
            .ok_or_else(|| ModelError::Unavailable(format!("{} at {}", sample.site_id, sample.target_timestamp)))
    }

    fn to_container(&self) -> Option<Container> {
        None
    }
}

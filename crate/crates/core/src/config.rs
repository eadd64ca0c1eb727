use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assoc::ValidationParams;
use crate::emtrain::TrainConfig;
use crate::error::{Error, Result};
use crate::placerec::SeqSlamParams;
use crate::simworld::SimConfig;

/// Parameters of every stage. Missing keys take their defaults; unknown
/// keys are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Dataset directory; defaults to `dataset/` under the output directory.
    pub dataset: Option<PathBuf>,
    pub sim: SimConfig,
    pub seqslam: SeqSlamParams,
    pub validation: ValidationParams,
    /// Each experience is matched against its `graph_k` predecessors.
    pub graph_k: usize,
    /// Training pairs to sample.
    pub pairs: usize,
    /// Held-out evaluation pairs, disjoint from the training pairs.
    pub heldout_pairs: usize,
    pub epochs: usize,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: None,
            sim: SimConfig::default(),
            seqslam: SeqSlamParams::default(),
            validation: ValidationParams::default(),
            graph_k: 2,
            pairs: 200,
            heldout_pairs: 150,
            epochs: 20,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.seqslam.validate()?;
        self.validation.validate()?;
        self.train.validate()?;
        if self.graph_k == 0 {
            return Err(Error::InvalidConfig("graph_k must be at least 1".into()));
        }
        if self.pairs == 0 {
            return Err(Error::InvalidConfig("pairs must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_nested_keys_default_the_rest() {
        let c = PipelineConfig::from_json(r#"{"seed": 7, "train": {"lr": 0.1}, "sim": {"frames": 30}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.train.dim, TrainConfig::default().dim);
        assert_eq!(c.sim.frames, 30);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_json(r#"{"sede": 1}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            PipelineConfig::from_json(r#"{"train": {"pose": {"tau2": 1}}}"#),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn out_of_range_rejected() {
        let mut c = PipelineConfig::default();
        c.graph_k = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.validation.e_sq = -1.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.train.pose.tau = 0.0;
        assert!(c.validate().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }
}

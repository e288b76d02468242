//! One `key=value` file for a whole run: model keys and training keys mixed.

use std::path::Path;

use crate::checkpoint::parse_kv;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::Result;

/// Keys routed to [`TrainConfig::apply`]; everything else is a model key.
pub const TRAIN_KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "max_lr",
    "pct_start",
    "div_factor",
    "final_div_factor",
    "weight_decay",
    "grad_clip_norm",
    "seed",
    "checkpoint_interval",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs: Vec<(String, String)> = parse_kv(text)?.into_iter().map(|(k, v, _)| (k, v)).collect();
        let mut cfg = RunConfig::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies overrides in order. A `preset` key resets the model first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let (train, model): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|(k, _)| TRAIN_KEYS.contains(&k.as_str()));
        if let Some((_, v)) = model.iter().rev().find(|(k, _)| k == "preset") {
            self.model = ModelConfig::preset(v)?;
        }
        let model: Vec<_> = model.into_iter().filter(|(k, _)| k != "preset").collect();
        self.model.apply(&model)?;
        self.train.apply(&train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphStrategy;

    #[test]
    fn keys_are_routed_by_name() {
        let c = RunConfig::parse("preset=ns\nepochs=3\nhidden_size=48\n# note\ngraph_strategy=knn:4\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.hidden_size, 48);
        assert_eq!(c.model.output_field_count, 3);
        assert_eq!(c.model.query_graph, GraphStrategy::Knn(4));
        assert!(RunConfig::parse("epochs=x\n").is_err());
        assert!(RunConfig::parse("what=1\n").is_err());
    }
}

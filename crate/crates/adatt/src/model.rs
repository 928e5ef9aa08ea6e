//! Architecture-agnostic model interface: every architecture builds from a
//! tagged config into the same forward/parameters/checkpoint surface.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    build_cross_stitch, build_ml_mmoe, build_mmoe, build_ple, build_shared_bottom,
    CrossStitchConfig, CrossStitchModel, MlMmoeConfig, MlMmoeModel, MmoeConfig, MmoeModel,
    PleConfig, PleModel, SharedBottomConfig, SharedBottomModel,
};
use crate::error::{Error, Result};
use crate::fusion::{build_adatt, AdattModel, FusionConfig};
use crate::nn::{Graph, ParamSet};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Adatt,
    SharedBottom,
    Mmoe,
    MlMmoe,
    CrossStitch,
    Ple,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::Adatt,
        ArchKind::SharedBottom,
        ArchKind::Mmoe,
        ArchKind::MlMmoe,
        ArchKind::CrossStitch,
        ArchKind::Ple,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Adatt => "adatt",
            ArchKind::SharedBottom => "shared_bottom",
            ArchKind::Mmoe => "mmoe",
            ArchKind::MlMmoe => "ml_mmoe",
            ArchKind::CrossStitch => "cross_stitch",
            ArchKind::Ple => "ple",
        }
    }

    pub fn parse(s: &str) -> Option<ArchKind> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tagged union of every architecture's configuration; this is what goes
/// into checkpoints and resolved-config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Adatt(FusionConfig),
    SharedBottom(SharedBottomConfig),
    Mmoe(MmoeConfig),
    MlMmoe(MlMmoeConfig),
    CrossStitch(CrossStitchConfig),
    Ple(PleConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ArchKind {
        match self {
            ModelConfig::Adatt(_) => ArchKind::Adatt,
            ModelConfig::SharedBottom(_) => ArchKind::SharedBottom,
            ModelConfig::Mmoe(_) => ArchKind::Mmoe,
            ModelConfig::MlMmoe(_) => ArchKind::MlMmoe,
            ModelConfig::CrossStitch(_) => ArchKind::CrossStitch,
            ModelConfig::Ple(_) => ArchKind::Ple,
        }
    }

    pub fn num_tasks(&self) -> usize {
        match self {
            ModelConfig::Adatt(c) => c.num_tasks,
            ModelConfig::SharedBottom(c) => c.num_tasks,
            ModelConfig::Mmoe(c) => c.num_tasks,
            ModelConfig::MlMmoe(c) => c.num_tasks,
            ModelConfig::CrossStitch(c) => c.num_tasks,
            ModelConfig::Ple(c) => c.num_tasks,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::Adatt(c) => c.input_dim,
            ModelConfig::SharedBottom(c) => c.input_dim,
            ModelConfig::Mmoe(c) => c.input_dim,
            ModelConfig::MlMmoe(c) => c.input_dim,
            ModelConfig::CrossStitch(c) => c.input_dim,
            ModelConfig::Ple(c) => c.input_dim,
        }
    }

    pub fn task_kinds(&self) -> &[TaskKind] {
        match self {
            ModelConfig::Adatt(c) => &c.task_kinds,
            ModelConfig::SharedBottom(c) => &c.task_kinds,
            ModelConfig::Mmoe(c) => &c.task_kinds,
            ModelConfig::MlMmoe(c) => &c.task_kinds,
            ModelConfig::CrossStitch(c) => &c.task_kinds,
            ModelConfig::Ple(c) => &c.task_kinds,
        }
    }
}

/// A built model of any architecture.
#[derive(Debug, Clone)]
pub enum ArchModel {
    Adatt(AdattModel),
    SharedBottom(SharedBottomModel),
    Mmoe(MmoeModel),
    MlMmoe(MlMmoeModel),
    CrossStitch(CrossStitchModel),
    Ple(PleModel),
}

/// Allocates parameters for `config` into `params` and returns the model.
/// Identical seeds yield identical initial parameters.
pub fn build_model(config: &ModelConfig, params: &mut ParamSet, seed: u64) -> Result<ArchModel> {
    Ok(match config {
        ModelConfig::Adatt(c) => ArchModel::Adatt(build_adatt(c, params, seed)?),
        ModelConfig::SharedBottom(c) => {
            ArchModel::SharedBottom(build_shared_bottom(c, params, seed)?)
        }
        ModelConfig::Mmoe(c) => ArchModel::Mmoe(build_mmoe(c, params, seed)?),
        ModelConfig::MlMmoe(c) => ArchModel::MlMmoe(build_ml_mmoe(c, params, seed)?),
        ModelConfig::CrossStitch(c) => ArchModel::CrossStitch(build_cross_stitch(c, params, seed)?),
        ModelConfig::Ple(c) => ArchModel::Ple(build_ple(c, params, seed)?),
    })
}

impl ArchModel {
    pub fn kind(&self) -> ArchKind {
        match self {
            ArchModel::Adatt(_) => ArchKind::Adatt,
            ArchModel::SharedBottom(_) => ArchKind::SharedBottom,
            ArchModel::Mmoe(_) => ArchKind::Mmoe,
            ArchModel::MlMmoe(_) => ArchKind::MlMmoe,
            ArchModel::CrossStitch(_) => ArchKind::CrossStitch,
            ArchModel::Ple(_) => ArchKind::Ple,
        }
    }

    /// One prediction column `[B x 1]` per task: a logit for classification
    /// tasks, a raw value for regression tasks.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let width = g.tape.value(x).shape().get(1).copied().unwrap_or(0);
        if width != self.input_dim() {
            return Err(Error::shape_mismatch(
                "model_forward",
                g.tape.value(x).shape(),
                &[self.input_dim()],
            ));
        }
        match self {
            ArchModel::Adatt(m) => m.forward(g, x),
            ArchModel::SharedBottom(m) => m.forward(g, x),
            ArchModel::Mmoe(m) => m.forward(g, x),
            ArchModel::MlMmoe(m) => m.forward(g, x),
            ArchModel::CrossStitch(m) => m.forward(g, x),
            ArchModel::Ple(m) => m.forward(g, x),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_kinds().len()
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ArchModel::Adatt(m) => m.config().input_dim,
            ArchModel::SharedBottom(m) => m.config.input_dim,
            ArchModel::Mmoe(m) => m.config.input_dim,
            ArchModel::MlMmoe(m) => m.config.input_dim,
            ArchModel::CrossStitch(m) => m.config.input_dim,
            ArchModel::Ple(m) => m.config.input_dim,
        }
    }

    pub fn task_kinds(&self) -> &[TaskKind] {
        match self {
            ArchModel::Adatt(m) => &m.config().task_kinds,
            ArchModel::SharedBottom(m) => &m.config.task_kinds,
            ArchModel::Mmoe(m) => &m.config.task_kinds,
            ArchModel::MlMmoe(m) => &m.config.task_kinds,
            ArchModel::CrossStitch(m) => &m.config.task_kinds,
            ArchModel::Ple(m) => &m.config.task_kinds,
        }
    }

    pub fn as_adatt(&self) -> Option<&AdattModel> {
        match self {
            ArchModel::Adatt(m) => Some(m),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for kind in ArchKind::ALL {
            assert_eq!(ArchKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(ArchKind::parse("resnet"), None);
    }

    #[test]
    fn config_json_carries_arch_tag() {
        let cfg = ModelConfig::SharedBottom(SharedBottomConfig {
            num_tasks: 1,
            input_dim: 4,
            hidden_dims: vec![8, 4],
            tower_hidden_dim: 2,
            task_kinds: vec![TaskKind::Classification],
        });
        let js = serde_json::to_string(&cfg).unwrap();
        assert!(js.contains("\"arch\":\"shared_bottom\""), "{js}");
        let back: ModelConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(back, cfg);
    }
}

//! Experiment configuration: TOML file plus dotted-key overrides, resolved
//! into concrete model/train/data descriptions. Every run writes its fully
//! resolved configuration next to its results so the file can be fed back to
//! the CLI to reproduce the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    CrossStitchConfig, MlMmoeConfig, MmoeConfig, PleConfig, SharedBottomConfig,
};
use crate::data::{census_bundle, resolve_data_dir, synth_bundle, CensusTaskConfig, DataBundle};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ArchKind, ModelConfig, TaskKind};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
            seeds: vec![0],
        }
    }
}

/// Architecture description before the data-dependent pieces (input width,
/// task count) are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub kind: String,
    /// 0 means "infer from expert_dims".
    pub levels: usize,
    /// One entry per task; a single entry is broadcast to every task.
    pub experts_per_task: Vec<usize>,
    pub shared_experts: usize,
    pub expert_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    /// Experts per level for the MMoE family.
    pub num_experts: usize,
    /// Layer widths for shared-bottom / cross-stitch; empty = expert_dims.
    pub hidden_dims: Vec<usize>,
    pub ablate_native_fusion: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            kind: "adatt".into(),
            levels: 0,
            experts_per_task: Vec::new(),
            shared_experts: 0,
            expert_dims: vec![128, 64],
            tower_hidden_dim: 32,
            num_experts: 6,
            hidden_dims: Vec::new(),
            ablate_native_fusion: false,
        }
    }
}

impl ArchSpec {
    pub fn arch_kind(&self) -> Result<ArchKind> {
        ArchKind::parse(&self.kind).ok_or_else(|| {
            let valid: Vec<&str> = ArchKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!(
                "unknown architecture {:?}; valid names: {}",
                self.kind,
                valid.join(", ")
            ))
        })
    }

    /// Fills every inferred field so the spec round-trips byte-stable.
    pub fn normalized(&self, num_tasks: usize) -> Result<ArchSpec> {
        let kind = self.arch_kind()?;
        let mut out = self.clone();
        if out.levels == 0 {
            out.levels = out.expert_dims.len();
        }
        if out.levels != out.expert_dims.len() {
            return Err(Error::Config(format!(
                "levels = {} but expert_dims has {} entries",
                out.levels,
                out.expert_dims.len()
            )));
        }
        if out.hidden_dims.is_empty() {
            out.hidden_dims = out.expert_dims.clone();
        }
        out.experts_per_task = match out.experts_per_task.len() {
            0 => match kind {
                ArchKind::Ple => vec![1; num_tasks],
                _ => vec![2; num_tasks],
            },
            1 => vec![out.experts_per_task[0]; num_tasks],
            n if n == num_tasks => out.experts_per_task,
            n => {
                return Err(Error::Config(format!(
                    "experts_per_task has {n} entries for {num_tasks} tasks"
                )))
            }
        };
        Ok(out)
    }

    /// Concrete model configuration for the given data shape.
    pub fn resolve(&self, input_dim: usize, task_kinds: &[TaskKind]) -> Result<ModelConfig> {
        let kind = self.arch_kind()?;
        let spec = self.normalized(task_kinds.len())?;
        let num_tasks = task_kinds.len();
        Ok(match kind {
            ArchKind::Adatt => ModelConfig::Adatt(FusionConfig {
                num_tasks,
                num_levels: spec.levels,
                experts_per_task: spec.experts_per_task.clone(),
                shared_experts: spec.shared_experts,
                input_dim,
                expert_dims: spec.expert_dims.clone(),
                tower_hidden_dim: spec.tower_hidden_dim,
                task_kinds: task_kinds.to_vec(),
                ablate_native_fusion: spec.ablate_native_fusion,
            }),
            ArchKind::SharedBottom => ModelConfig::SharedBottom(SharedBottomConfig {
                num_tasks,
                input_dim,
                hidden_dims: spec.hidden_dims.clone(),
                tower_hidden_dim: spec.tower_hidden_dim,
                task_kinds: task_kinds.to_vec(),
            }),
            ArchKind::Mmoe => ModelConfig::Mmoe(MmoeConfig {
                num_tasks,
                input_dim,
                num_experts: spec.num_experts,
                hidden_dims: spec.hidden_dims.clone(),
                tower_hidden_dim: spec.tower_hidden_dim,
                task_kinds: task_kinds.to_vec(),
            }),
            ArchKind::MlMmoe => ModelConfig::MlMmoe(MlMmoeConfig {
                num_tasks,
                input_dim,
                num_experts: spec.num_experts,
                hidden_dims: spec.expert_dims.clone(),
                tower_hidden_dim: spec.tower_hidden_dim,
                task_kinds: task_kinds.to_vec(),
            }),
            ArchKind::CrossStitch => ModelConfig::CrossStitch(CrossStitchConfig {
                num_tasks,
                input_dim,
                hidden_dims: spec.hidden_dims.clone(),
                tower_hidden_dim: spec.tower_hidden_dim,
                task_kinds: task_kinds.to_vec(),
            }),
            ArchKind::Ple => ModelConfig::Ple(PleConfig {
                num_tasks,
                input_dim,
                experts_per_task: spec.experts_per_task.clone(),
                shared_experts: spec.shared_experts,
                hidden_dims: spec.expert_dims.clone(),
                tower_hidden_dim: spec.tower_hidden_dim,
                task_kinds: task_kinds.to_vec(),
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Census {
        #[serde(default)]
        data_dir: Option<PathBuf>,
        #[serde(default = "default_split_seed")]
        split_seed: u64,
        /// Label-derivation config; `configs/census.toml` when present,
        /// otherwise the built-in defaults (which mirror that file).
        #[serde(default)]
        census_config: Option<PathBuf>,
    },
    Synth {
        #[serde(default = "default_examples")]
        examples: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_split_seed() -> u64 {
    17
}
fn default_examples() -> usize {
    8192
}
fn default_dim() -> usize {
    16
}
fn default_rho() -> f64 {
    0.8
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Census {
            data_dir: None,
            split_seed: default_split_seed(),
            census_config: None,
        }
    }
}

impl DataSpec {
    pub fn load_bundle(&self) -> Result<DataBundle> {
        match self {
            DataSpec::Census {
                data_dir,
                split_seed,
                census_config,
            } => {
                let dir = resolve_data_dir(data_dir.as_deref());
                let task_cfg = match census_config {
                    Some(p) => CensusTaskConfig::from_toml_path(p)?,
                    None => {
                        let default_path = Path::new("configs/census.toml");
                        if default_path.exists() {
                            CensusTaskConfig::from_toml_path(default_path)?
                        } else {
                            CensusTaskConfig::default()
                        }
                    }
                };
                census_bundle(&dir, &task_cfg, *split_seed)
            }
            DataSpec::Synth {
                examples,
                dim,
                rho,
                seed,
            } => synth_bundle(*seed, *examples, *dim, *rho),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn from_toml_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Normalizes the arch section against the task count so the written
    /// resolved config reproduces itself.
    pub fn normalized(&self, num_tasks: usize) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            arch: self.arch.normalized(num_tasks)?,
            train: self.train.clone(),
            data: self.data.clone(),
            seeds: self.seeds.clone(),
        })
    }
}

/// Applies one `dotted.key=value` override onto a parsed TOML tree.
/// The value is parsed as TOML (numbers, booleans, arrays, strings); bare
/// words fall back to strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {assignment:?} is not KEY=VALUE"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = parse_toml_value(raw.trim());

    let parts: Vec<&str> = key.split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// File + overrides -> typed config. Missing file = defaults.
pub fn load_with_overrides(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut table: toml::Table = base
        .parse()
        .map_err(|e| Error::Config(format!("config parse: {e}")))?;
    for assignment in overrides {
        apply_override(&mut table, assignment)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.arch.kind, "adatt");
        assert_eq!(cfg.train.batch_size, 256);
        assert!(matches!(cfg.data, DataSpec::Census { .. }));
    }

    #[test]
    fn unknown_arch_lists_valid_names() {
        let spec = ArchSpec {
            kind: "transformer".into(),
            ..ArchSpec::default()
        };
        let err = spec.arch_kind().unwrap_err().to_string();
        assert!(err.contains("adatt") && err.contains("ple"), "{err}");
    }

    #[test]
    fn experts_broadcast_and_validation() {
        let spec = ArchSpec {
            experts_per_task: vec![3],
            ..ArchSpec::default()
        };
        let n = spec.normalized(3).unwrap();
        assert_eq!(n.experts_per_task, vec![3, 3, 3]);
        let bad = ArchSpec {
            experts_per_task: vec![1, 2],
            ..ArchSpec::default()
        };
        assert!(bad.normalized(3).is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load_with_overrides(
            None,
            &[
                "train.learning_rate=0.01".to_string(),
                "arch.kind=ple".to_string(),
                "arch.shared_experts=3".to_string(),
                "seeds=[0,1,2]".to_string(),
                "data.source=\"synth\"".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.arch.kind, "ple");
        assert_eq!(cfg.arch.shared_experts, 3);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert!(matches!(cfg.data, DataSpec::Synth { .. }));
    }

    #[test]
    fn resolved_config_round_trips_byte_stable() {
        let cfg = ExperimentConfig::default().normalized(3).unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.normalized(3).unwrap().to_toml_string(), text);
    }

    #[test]
    fn resolve_produces_kind_specific_configs() {
        let kinds = vec![TaskKind::Classification; 3];
        for name in ["adatt", "shared_bottom", "mmoe", "ml_mmoe", "cross_stitch", "ple"] {
            let spec = ArchSpec {
                kind: name.into(),
                shared_experts: if name == "ple" { 3 } else { 0 },
                ..ArchSpec::default()
            };
            let mc = spec.resolve(10, &kinds).unwrap();
            assert_eq!(mc.kind().name(), name);
            assert_eq!(mc.input_dim(), 10);
        }
    }

    #[test]
    fn checked_in_census_config_matches_builtin_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs/census.toml");
        let from_file = CensusTaskConfig::from_toml_path(&path).unwrap();
        assert_eq!(from_file, CensusTaskConfig::default());
    }
}

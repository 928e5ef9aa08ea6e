//! Expert-weight capture and export.
//!
//! For a trained fusion model, runs the test split through the combined-
//! weight path (`gate + pad(v)`) and averages the per-example weights into
//! one `[tasks x total_experts]` matrix per fusion level — native and gated
//! contributions summed exactly as they enter the forward pass. The raw gate
//! component is captured alongside so the two parts can be exported
//! separately; for purely gated architectures (MMoE, ML-MMoE, PLE) the two
//! coincide.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::model::ArchModel;
use crate::nn::Graph;
use crate::train::TrainState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanWeightMatrix {
    /// 1-based fusion level.
    pub level: usize,
    /// `rows[t][e]`: dataset-mean weight task t places on expert column e.
    pub rows: Vec<Vec<f64>>,
    pub col_labels: Vec<String>,
    /// Examples averaged over.
    pub examples: usize,
}

#[derive(Debug, Clone)]
pub struct GateCapture {
    /// Gate plus native weights, the quantity the forward pass consumes.
    pub combined: Vec<MeanWeightMatrix>,
    /// Softmax gate component alone.
    pub gate_only: Vec<MeanWeightMatrix>,
}

impl GateCapture {
    /// Native component: combined minus gate, exact because the native
    /// weights are example-independent.
    pub fn native_only(&self) -> Vec<MeanWeightMatrix> {
        self.combined
            .iter()
            .zip(&self.gate_only)
            .map(|(c, g)| MeanWeightMatrix {
                level: c.level,
                rows: c
                    .rows
                    .iter()
                    .zip(&g.rows)
                    .map(|(cr, gr)| cr.iter().zip(gr).map(|(a, b)| a - b).collect())
                    .collect(),
                col_labels: c.col_labels.clone(),
                examples: c.examples,
            })
            .collect()
    }
}

struct Accumulator {
    level: usize,
    sums: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl Accumulator {
    fn new(level: usize, tasks: usize, cols: usize, labels: Vec<String>) -> Accumulator {
        Accumulator {
            level,
            sums: vec![vec![0.0; cols]; tasks],
            labels,
        }
    }

    fn add_row_block(&mut self, task: usize, weights: &[f32], cols: usize, col_offset: usize) {
        for (b, chunk) in weights.chunks(cols).enumerate() {
            let _ = b;
            for (j, &w) in chunk.iter().enumerate() {
                self.sums[task][col_offset + j] += w as f64;
            }
        }
    }

    fn finish(self, examples: usize) -> MeanWeightMatrix {
        MeanWeightMatrix {
            level: self.level,
            rows: self
                .sums
                .into_iter()
                .map(|r| r.into_iter().map(|s| s / examples.max(1) as f64).collect())
                .collect(),
            col_labels: self.labels,
            examples,
        }
    }
}

/// Dataset-mean combined expert weights per fusion level.
///
/// Supported for every gated architecture; shared-bottom and cross-stitch
/// carry no gating modules and are rejected.
pub fn capture_mean_weights(
    state: &TrainState,
    data: &EncodedDataset,
    batch_size: usize,
) -> Result<GateCapture> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("gate capture over an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    match &state.model {
        ArchModel::Adatt(m) => {
            let tasks = m.config().num_tasks;
            let total = m.layout().total;
            let labels = m.layout().labels.clone();
            let mut combined: Vec<Accumulator> = (1..=m.config().num_levels)
                .map(|l| Accumulator::new(l, tasks, total, labels.clone()))
                .collect();
            let mut gate_only: Vec<Accumulator> = (1..=m.config().num_levels)
                .map(|l| Accumulator::new(l, tasks, total, labels.clone()))
                .collect();
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch(chunk);
                let mut g = Graph::new_inference(&state.params);
                let x = state.input.encode(&mut g, &batch)?;
                let (_, traces) = m.forward_traced(&mut g, x)?;
                for (li, trace) in traces.iter().enumerate() {
                    for t in 0..tasks {
                        let cw = g.tape.value(trace.combined_weights[t]).data();
                        combined[li].add_row_block(t, cw, total, 0);
                        let gw = g.tape.value(trace.gate_weights[t]).data();
                        gate_only[li].add_row_block(t, gw, total, 0);
                    }
                }
            }
            Ok(GateCapture {
                combined: combined.into_iter().map(|a| a.finish(n)).collect(),
                gate_only: gate_only.into_iter().map(|a| a.finish(n)).collect(),
            })
        }
        ArchModel::Mmoe(m) => {
            let tasks = m.config.num_tasks;
            let cols = m.config.num_experts;
            let labels = (0..cols).map(|i| format!("expert{i}")).collect::<Vec<_>>();
            let mut acc = Accumulator::new(1, tasks, cols, labels);
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch(chunk);
                let mut g = Graph::new_inference(&state.params);
                let x = state.input.encode(&mut g, &batch)?;
                let gates = m.task_gate_weights(&mut g, x)?;
                for (t, &w) in gates.iter().enumerate() {
                    acc.add_row_block(t, g.tape.value(w).data(), cols, 0);
                }
            }
            let m = acc.finish(n);
            Ok(GateCapture {
                combined: vec![m.clone()],
                gate_only: vec![m],
            })
        }
        ArchModel::MlMmoe(m) => {
            let tasks = m.config.num_tasks;
            let cols = m.config.num_experts;
            let top = m.config.hidden_dims.len();
            let labels = (0..cols)
                .map(|i| format!("level{top}/expert{i}"))
                .collect::<Vec<_>>();
            let mut acc = Accumulator::new(top, tasks, cols, labels);
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch(chunk);
                let mut g = Graph::new_inference(&state.params);
                let x = state.input.encode(&mut g, &batch)?;
                let gates = m.task_gate_weights(&mut g, x)?;
                for (t, &w) in gates.iter().enumerate() {
                    acc.add_row_block(t, g.tape.value(w).data(), cols, 0);
                }
            }
            let m = acc.finish(n);
            Ok(GateCapture {
                combined: vec![m.clone()],
                gate_only: vec![m],
            })
        }
        ArchModel::Ple(m) => {
            let cfg = &m.config;
            let tasks = cfg.num_tasks;
            let mut labels = Vec::new();
            let mut offsets = Vec::new();
            let mut off = 0;
            for (t, &mt) in cfg.experts_per_task.iter().enumerate() {
                offsets.push(off);
                for i in 0..mt {
                    labels.push(format!("task{t}/e{i}"));
                }
                off += mt;
            }
            let shared_offset = off;
            for i in 0..cfg.shared_experts {
                labels.push(format!("shared/e{i}"));
            }
            let total = off + cfg.shared_experts;
            let levels = cfg.hidden_dims.len();
            let mut accs: Vec<Accumulator> = (1..=levels)
                .map(|l| Accumulator::new(l, tasks, total, labels.clone()))
                .collect();
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch(chunk);
                let mut g = Graph::new_inference(&state.params);
                let x = state.input.encode(&mut g, &batch)?;
                let (_, traces) = m.forward_traced(&mut g, x)?;
                for (li, level_gates) in traces.iter().enumerate() {
                    for (t, &w) in level_gates.iter().enumerate() {
                        let wv = g.tape.value(w).data();
                        let mt = cfg.experts_per_task[t];
                        let width = mt + cfg.shared_experts;
                        // task gates see native then shared experts; scatter
                        // each part to its column span
                        for (b, chunk_w) in wv.chunks(width).enumerate() {
                            let _ = b;
                            for (j, &v) in chunk_w[..mt].iter().enumerate() {
                                accs[li].sums[t][offsets[t] + j] += v as f64;
                            }
                            for (j, &v) in chunk_w[mt..].iter().enumerate() {
                                accs[li].sums[t][shared_offset + j] += v as f64;
                            }
                        }
                    }
                }
            }
            let ms: Vec<MeanWeightMatrix> = accs.into_iter().map(|a| a.finish(n)).collect();
            Ok(GateCapture {
                combined: ms.clone(),
                gate_only: ms,
            })
        }
        ArchModel::SharedBottom(_) | ArchModel::CrossStitch(_) => Err(Error::Unsupported(format!(
            "{} has no gating modules to capture",
            state.model.kind()
        ))),
    }
}

/// Writes one `gates_level{l}{suffix}.csv` per matrix: header row of expert
/// labels, one row per task, values with six decimals. Refuses an empty
/// snapshot list and writes nothing.
pub fn export_heatmap_csv(
    matrices: &[MeanWeightMatrix],
    dir: &Path,
    suffix: &str,
) -> Result<Vec<PathBuf>> {
    if matrices.is_empty() {
        return Err(Error::Data("no weight snapshots to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(matrices.len());
    for m in matrices {
        let path = dir.join(format!("gates_level{}{suffix}.csv", m.level));
        let mut out = String::from("task");
        for label in &m.col_labels {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for (t, row) in m.rows.iter().enumerate() {
            out.push_str(&format!("task{t}"));
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

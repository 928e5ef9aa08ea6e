//! Dataset ingestion, feature encoding, and batch assembly.

pub mod census;
pub mod encoder;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::model::TaskKind;
use crate::tensor::Tensor;

pub use census::{load_census, load_standard_census, CensusTaskConfig};
pub use encoder::{EncoderSpec, InputLayer, InputSpec};
pub use synth::synth_multitask;

/// A fully encoded split, ready for batch gathering.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    /// `[N x n_cont]` continuous block (the entire feature row for dense
    /// sources).
    pub cont: Tensor,
    /// Per categorical column, one id per record. Empty for dense sources.
    pub cat: Vec<Vec<u32>>,
    /// Per task `[N x 1]`.
    pub labels: Vec<Tensor>,
    pub task_kinds: Vec<TaskKind>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.cont.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }

    /// Gathers the given record indices into one batch.
    pub fn batch(&self, idx: &[usize]) -> RawBatch {
        RawBatch {
            cont: self.cont.gather_rows(idx),
            cats: self
                .cat
                .iter()
                .map(|col| idx.iter().map(|&i| col[i]).collect())
                .collect(),
            labels: self.labels.iter().map(|l| l.gather_rows(idx)).collect(),
        }
    }
}

/// One gathered batch: features still in raw (pre-embedding) form.
#[derive(Debug, Clone)]
pub struct RawBatch {
    pub cont: Tensor,
    pub cats: Vec<Vec<u32>>,
    pub labels: Vec<Tensor>,
}

impl RawBatch {
    pub fn size(&self) -> usize {
        self.cont.rows()
    }
}

/// Everything an experiment needs: three encoded splits plus the input
/// description the model trains against.
pub struct DataBundle {
    pub train: EncodedDataset,
    pub valid: EncodedDataset,
    pub test: EncodedDataset,
    pub input_spec: InputSpec,
}

impl DataBundle {
    pub fn input_dim(&self) -> usize {
        self.input_spec.input_dim()
    }

    pub fn task_kinds(&self) -> &[TaskKind] {
        &self.train.task_kinds
    }
}

/// Loads and encodes the standard census experiment data.
pub fn census_bundle(
    data_dir: &Path,
    task_cfg: &CensusTaskConfig,
    split_seed: u64,
) -> Result<DataBundle> {
    let splits = load_standard_census(data_dir, split_seed)?;
    bundle_from_splits(&splits, task_cfg)
}

/// Encodes already loaded census splits (fixture-sized inputs included).
pub fn bundle_from_splits(
    splits: &census::CensusSplits,
    task_cfg: &CensusTaskConfig,
) -> Result<DataBundle> {
    let spec = EncoderSpec::fit(&splits.train, task_cfg)?;
    let encode = |records: &[census::CensusRecord]| -> Result<EncodedDataset> {
        let feats = spec.encode_records(records)?;
        let mut labels = vec![Vec::with_capacity(records.len()); census::NUM_TASKS];
        for r in records {
            let ys = census::derive_tasks(r, &task_cfg.labels)?;
            for (t, &y) in ys.iter().enumerate() {
                labels[t].push(y);
            }
        }
        Ok(EncodedDataset {
            cont: feats.cont,
            cat: feats.cat,
            labels: labels.into_iter().map(Tensor::column).collect(),
            task_kinds: vec![TaskKind::Classification; census::NUM_TASKS],
        })
    };
    let train = encode(&splits.train)?;
    let valid = encode(&splits.valid)?;
    let test = encode(&splits.test)?;
    Ok(DataBundle {
        train,
        valid,
        test,
        input_spec: InputSpec::Embeddings(spec),
    })
}

/// Synthetic two-task bundle split 8:1:1.
pub fn synth_bundle(seed: u64, examples: usize, dim: usize, rho: f64) -> Result<DataBundle> {
    let all = synth_multitask(seed, examples, dim, rho)?;
    let n = all.len();
    let n_valid = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    let n_train = n - n_valid - n_test;
    let take = |lo: usize, hi: usize| -> EncodedDataset {
        let idx: Vec<usize> = (lo..hi).collect();
        let b = all.batch(&idx);
        EncodedDataset {
            cont: b.cont,
            cat: b.cats,
            labels: b.labels,
            task_kinds: all.task_kinds.clone(),
        }
    };
    let dim = all.cont.cols();
    Ok(DataBundle {
        train: take(0, n_train),
        valid: take(n_train, n_train + n_valid),
        test: take(n_train + n_valid, n),
        input_spec: InputSpec::Dense { dim },
    })
}

/// Data directory resolution: explicit flag, then `ADATT_DATA_DIR`, then
/// `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("ADATT_DATA_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_gathers_rows_and_labels() {
        let ds = synth_multitask(1, 10, 4, 0.5).unwrap();
        let b = ds.batch(&[3, 7]);
        assert_eq!(b.size(), 2);
        assert_eq!(b.cont.data(), ds.cont.gather_rows(&[3, 7]).data());
        assert_eq!(b.labels[0].data()[0], ds.labels[0].data()[3]);
        assert_eq!(b.labels[1].data()[1], ds.labels[1].data()[7]);
    }

    #[test]
    fn synth_bundle_splits_sum_to_total() {
        let b = synth_bundle(2, 100, 4, 0.0).unwrap();
        assert_eq!(b.train.len() + b.valid.len() + b.test.len(), 100);
        assert_eq!(b.input_dim(), 4);
    }
}

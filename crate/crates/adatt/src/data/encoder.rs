//! Feature encoding: train-derived z-normalization for continuous columns
//! and vocabulary indices feeding learned embedding tables for categorical
//! columns. Validation and test data are always encoded with train-derived
//! statistics; unseen categories map to a reserved out-of-vocabulary bucket.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::census::{self, CensusRecord, CensusTaskConfig};
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Graph, ParamId, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// Train-fitted encoding description. Immutable after `fit`; shared by every
/// seed of an experiment. The learned embedding tables themselves are model
/// parameters, allocated per seed by [`InputLayer::init`].
#[derive(Debug, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Raw column indices of continuous features.
    pub cont_cols: Vec<usize>,
    /// Raw column indices of categorical features.
    pub cat_cols: Vec<usize>,
    pub cont_stats: Vec<ColumnStats>,
    /// Per categorical column: id -> token, in train first-seen order. The
    /// out-of-vocabulary bucket is the extra id `vocab.len()`.
    pub vocabs: Vec<Vec<String>>,
    pub embed_dims: Vec<usize>,
    #[serde(skip)]
    lookup: OnceLock<Vec<HashMap<String, u32>>>,
}

impl EncoderSpec {
    /// Derives vocabularies and z-statistics from the training split.
    pub fn fit(records: &[CensusRecord], cfg: &CensusTaskConfig) -> Result<EncoderSpec> {
        if records.is_empty() {
            return Err(Error::Data("cannot fit an encoder on zero records".into()));
        }
        let feature_cols = census::feature_columns();
        let cont_cols: Vec<usize> = feature_cols
            .iter()
            .copied()
            .filter(|&c| census::is_continuous(c))
            .collect();
        let cat_cols: Vec<usize> = feature_cols
            .iter()
            .copied()
            .filter(|&c| !census::is_continuous(c))
            .collect();

        let mut cont_stats = Vec::with_capacity(cont_cols.len());
        for &c in &cont_cols {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for r in records {
                let v = parse_continuous(&r.fields[c], c)?;
                sum += v;
                sum_sq += v * v;
            }
            let n = records.len() as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            cont_stats.push(ColumnStats {
                mean,
                std: var.sqrt().max(1e-6),
            });
        }

        let mut vocabs: Vec<Vec<String>> = vec![Vec::new(); cat_cols.len()];
        let mut seen: Vec<HashMap<String, u32>> = vec![HashMap::new(); cat_cols.len()];
        for r in records {
            for (j, &c) in cat_cols.iter().enumerate() {
                let tok = &r.fields[c];
                if !seen[j].contains_key(tok) {
                    seen[j].insert(tok.clone(), vocabs[j].len() as u32);
                    vocabs[j].push(tok.clone());
                }
            }
        }
        let embed_dims = vocabs
            .iter()
            .map(|v| embed_dim(v.len(), cfg.encoder.max_embedding_dim))
            .collect();
        let spec = EncoderSpec {
            cont_cols,
            cat_cols,
            cont_stats,
            vocabs,
            embed_dims,
            lookup: OnceLock::new(),
        };
        let _ = spec.lookup.set(seen);
        Ok(spec)
    }

    fn lookup(&self) -> &Vec<HashMap<String, u32>> {
        self.lookup.get_or_init(|| {
            self.vocabs
                .iter()
                .map(|v| {
                    v.iter()
                        .enumerate()
                        .map(|(i, tok)| (tok.clone(), i as u32))
                        .collect()
                })
                .collect()
        })
    }

    /// Encoded feature width: all embeddings concatenated, then continuous.
    pub fn input_dim(&self) -> usize {
        self.embed_dims.iter().sum::<usize>() + self.cont_cols.len()
    }

    /// Token id with the out-of-vocabulary bucket as fallback.
    pub fn token_id(&self, cat_index: usize, token: &str) -> u32 {
        self.lookup()[cat_index]
            .get(token)
            .copied()
            .unwrap_or(self.vocabs[cat_index].len() as u32)
    }

    /// Encodes records into per-row continuous values (z-normalized) and
    /// per-column categorical ids.
    pub fn encode_records(&self, records: &[CensusRecord]) -> Result<EncodedFeatures> {
        let n = records.len();
        let mut cont = Vec::with_capacity(n * self.cont_cols.len());
        let mut cat = vec![Vec::with_capacity(n); self.cat_cols.len()];
        for r in records {
            for (j, &c) in self.cont_cols.iter().enumerate() {
                let v = parse_continuous(&r.fields[c], c)?;
                let s = &self.cont_stats[j];
                cont.push(((v - s.mean) / s.std) as f32);
            }
            for (j, &c) in self.cat_cols.iter().enumerate() {
                cat[j].push(self.token_id(j, &r.fields[c]));
            }
        }
        Ok(EncodedFeatures {
            cont: Tensor::new(vec![n, self.cont_cols.len()], cont)?,
            cat,
        })
    }
}

/// `min(cap, ceil(sqrt(cardinality)))` — keeps the encoded width modest.
pub fn embed_dim(cardinality: usize, cap: usize) -> usize {
    ((cardinality as f64).sqrt().ceil() as usize).clamp(1, cap.max(1))
}

fn parse_continuous(field: &str, col: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("column {col}: {field:?} is not numeric")))
}

pub struct EncodedFeatures {
    /// `[N x n_cont]`, z-normalized.
    pub cont: Tensor,
    /// Per categorical column, one id per record.
    pub cat: Vec<Vec<u32>>,
}

/// How a model consumes raw batches.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Features are already a dense row; fed straight to the model.
    Dense { dim: usize },
    /// Categorical ids pass through learned embedding tables and are
    /// concatenated with the continuous block.
    Embeddings(EncoderSpec),
}

impl InputSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            InputSpec::Dense { dim } => *dim,
            InputSpec::Embeddings(spec) => spec.input_dim(),
        }
    }
}

/// The trainable realization of an [`InputSpec`]: embedding tables live in
/// the same [`ParamSet`] as the model and train jointly with it.
#[derive(Debug, Clone)]
pub enum InputLayer {
    Dense,
    Embeddings { tables: Vec<ParamId> },
}

impl InputLayer {
    pub fn init(params: &mut ParamSet, spec: &InputSpec, rng: &mut ChaCha8Rng) -> InputLayer {
        match spec {
            InputSpec::Dense { .. } => InputLayer::Dense,
            InputSpec::Embeddings(enc) => {
                let tables = enc
                    .cat_cols
                    .iter()
                    .zip(&enc.vocabs)
                    .zip(&enc.embed_dims)
                    .map(|((&col, vocab), &dim)| {
                        // +1 row: the out-of-vocabulary bucket
                        params.add(
                            format!("encoder/col{col}/embedding"),
                            uniform_fan_in(rng, dim, vec![vocab.len() + 1, dim]),
                        )
                    })
                    .collect();
                InputLayer::Embeddings { tables }
            }
        }
    }

    /// Builds the `[B x d0]` feature block on the graph.
    pub fn encode(&self, g: &mut Graph, batch: &crate::data::RawBatch) -> Result<Var> {
        match self {
            InputLayer::Dense => Ok(g.input(batch.cont.clone())),
            InputLayer::Embeddings { tables } => {
                if tables.len() != batch.cats.len() {
                    return Err(Error::shape_mismatch(
                        "input_encode",
                        &[tables.len()],
                        &[batch.cats.len()],
                    ));
                }
                let mut parts = Vec::with_capacity(tables.len() + 1);
                for (&table, ids) in tables.iter().zip(&batch.cats) {
                    let tv = g.param(table);
                    parts.push(g.tape.embed(tv, ids.clone())?);
                }
                parts.push(g.input(batch.cont.clone()));
                g.tape.concat_rows(&parts)
            }
        }
    }
}

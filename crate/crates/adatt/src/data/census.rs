//! Census-Income (KDD) ingestion and task derivation.
//!
//! Records are comma-separated with 42 columns: 40 demographic and
//! employment attributes, an instance weight (ignored throughout), and the
//! income label. Three binary tasks are derived per record — income over
//! 50K, marital status never-married, education at least college — and the
//! two columns that source labels (education, marital status) are excluded
//! from the model input for every task.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_COLUMNS: usize = 42;
pub const CONTINUOUS_COLS: [usize; 7] = [0, 5, 16, 17, 18, 30, 39];
pub const INSTANCE_WEIGHT_COL: usize = 24;
pub const EDUCATION_COL: usize = 4;
pub const MARITAL_COL: usize = 7;
pub const INCOME_COL: usize = 41;
pub const NUM_TASKS: usize = 3;

pub const EXPECTED_TRAIN_RECORDS: usize = 199_523;
pub const EXPECTED_TEST_RECORDS: usize = 99_762;

/// One parsed line: 42 whitespace-trimmed fields.
#[derive(Debug, Clone)]
pub struct CensusRecord {
    pub fields: Vec<String>,
}

/// Columns fed to the encoder: everything except the instance weight, the
/// income label, and the two label-source columns (dropped for all tasks to
/// rule out leakage into tasks 2 and 3).
pub fn feature_columns() -> Vec<usize> {
    (0..NUM_COLUMNS)
        .filter(|&c| {
            c != INSTANCE_WEIGHT_COL && c != INCOME_COL && c != EDUCATION_COL && c != MARITAL_COL
        })
        .collect()
}

pub fn is_continuous(col: usize) -> bool {
    CONTINUOUS_COLS.contains(&col)
}

/// Label derivation rules, checked into the repository as
/// `configs/census.toml`. [`CensusTaskConfig::default`] mirrors that file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusTaskConfig {
    pub labels: LabelConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Income strings counting as over 50K (trailing period stripped).
    pub income_positive: Vec<String>,
    pub income_negative: Vec<String>,
    pub marital_positive: Vec<String>,
    /// Every marital category the dataset may contain.
    pub marital_known: Vec<String>,
    /// Education categories counting as "at least college".
    pub education_at_least_college: Vec<String>,
    pub education_known: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding width cap; each column uses `min(cap, ceil(sqrt(card)))`.
    pub max_embedding_dim: usize,
}

impl Default for CensusTaskConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        CensusTaskConfig {
            labels: LabelConfig {
                income_positive: s(&["50000+"]),
                income_negative: s(&["- 50000"]),
                marital_positive: s(&["Never married"]),
                marital_known: s(&[
                    "Never married",
                    "Married-civilian spouse present",
                    "Married-spouse absent",
                    "Married-A F spouse present",
                    "Divorced",
                    "Separated",
                    "Widowed",
                ]),
                education_at_least_college: s(&[
                    "Bachelors degree(BA AB BS)",
                    "Masters degree(MA MS MEng MEd MSW MBA)",
                    "Doctorate degree(PhD EdD)",
                    "Prof school degree (MD DDS DVM LLB JD)",
                    "Associates degree-occup /vocational",
                    "Associates degree-academic program",
                ]),
                education_known: s(&[
                    "Children",
                    "Less than 1st grade",
                    "1st 2nd 3rd or 4th grade",
                    "5th or 6th grade",
                    "7th and 8th grade",
                    "9th grade",
                    "10th grade",
                    "11th grade",
                    "12th grade no diploma",
                    "High school graduate",
                    "Some college but no degree",
                    "Associates degree-occup /vocational",
                    "Associates degree-academic program",
                    "Bachelors degree(BA AB BS)",
                    "Masters degree(MA MS MEng MEd MSW MBA)",
                    "Prof school degree (MD DDS DVM LLB JD)",
                    "Doctorate degree(PhD EdD)",
                ]),
            },
            encoder: EncoderConfig {
                max_embedding_dim: 16,
            },
        }
    }
}

impl CensusTaskConfig {
    pub fn from_toml_path(path: &Path) -> Result<CensusTaskConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Parses one census file (plain or gzip by extension). Errors carry the
/// 1-based line number.
pub fn parse_census_file(path: &Path) -> Result<Vec<CensusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != NUM_COLUMNS {
            return Err(Error::Data(format!(
                "{}:{}: expected {NUM_COLUMNS} comma-separated columns, found {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        records.push(CensusRecord { fields });
    }
    Ok(records)
}

#[derive(Debug)]
pub struct CensusSplits {
    pub train: Vec<CensusRecord>,
    pub valid: Vec<CensusRecord>,
    pub test: Vec<CensusRecord>,
}

/// Loads the two census files and splits the test records into validation
/// and test halves, shuffled deterministically by `split_seed`.
pub fn load_census(train_path: &Path, test_path: &Path, split_seed: u64) -> Result<CensusSplits> {
    let train = parse_census_file(train_path)?;
    let mut rest = parse_census_file(test_path)?;
    if train.is_empty() || rest.is_empty() {
        return Err(Error::Data("census files contain no records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut order: Vec<usize> = (0..rest.len()).collect();
    order.shuffle(&mut rng);
    let half = rest.len() / 2;
    let mut valid = Vec::with_capacity(half);
    let mut test = Vec::with_capacity(rest.len() - half);
    // take ownership without disturbing the shuffled order
    let mut slots: Vec<Option<CensusRecord>> = rest.drain(..).map(Some).collect();
    for (k, &idx) in order.iter().enumerate() {
        let rec = slots[idx].take().expect("each index visited once");
        if k < half {
            valid.push(rec);
        } else {
            test.push(rec);
        }
    }
    Ok(CensusSplits { train, valid, test })
}

/// Locates `census-income.data[.gz]` / `census-income.test[.gz]` under
/// `data_dir`, loads them, and asserts the standard record counts.
pub fn load_standard_census(data_dir: &Path, split_seed: u64) -> Result<CensusSplits> {
    let train_path = resolve(data_dir, "census-income.data")?;
    let test_path = resolve(data_dir, "census-income.test")?;
    let splits = load_census(&train_path, &test_path, split_seed)?;
    if splits.train.len() != EXPECTED_TRAIN_RECORDS {
        return Err(Error::Data(format!(
            "expected {EXPECTED_TRAIN_RECORDS} training records, parsed {}",
            splits.train.len()
        )));
    }
    if splits.valid.len() + splits.test.len() != EXPECTED_TEST_RECORDS {
        return Err(Error::Data(format!(
            "expected {EXPECTED_TEST_RECORDS} test records, parsed {}",
            splits.valid.len() + splits.test.len()
        )));
    }
    Ok(splits)
}

fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Data(format!(
        "neither {name} nor {name}.gz found in {}",
        dir.display()
    )))
}

/// Strips the trailing period the label column carries in the raw files.
fn normalize_label(field: &str) -> &str {
    field.strip_suffix('.').unwrap_or(field)
}

/// The three binary labels: income > 50K, never married, at least college.
pub fn derive_tasks(record: &CensusRecord, cfg: &LabelConfig) -> Result<[f32; NUM_TASKS]> {
    let income = normalize_label(&record.fields[INCOME_COL]);
    let label1 = if cfg.income_positive.iter().any(|s| s == income) {
        1.0
    } else if cfg.income_negative.iter().any(|s| s == income) {
        0.0
    } else {
        return Err(Error::Data(format!("unknown income label {income:?}")));
    };

    let marital = record.fields[MARITAL_COL].as_str();
    if !cfg.marital_known.iter().any(|s| s == marital) {
        return Err(Error::Data(format!("unknown marital status {marital:?}")));
    }
    let label2 = if cfg.marital_positive.iter().any(|s| s == marital) {
        1.0
    } else {
        0.0
    };

    let education = record.fields[EDUCATION_COL].as_str();
    if !cfg.education_known.iter().any(|s| s == education) {
        return Err(Error::Data(format!("unknown education {education:?}")));
    }
    let label3 = if cfg.education_at_least_college.iter().any(|s| s == education) {
        1.0
    } else {
        0.0
    };

    Ok([label1, label2, label3])
}

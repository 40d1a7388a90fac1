use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSchema, EncodedDataset, ResolvedSchema, SplitSpec, VocabularySet};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILES: [&str; 3] = ["train.csv", "valid.csv", "test.csv"];

/// Where the raw rows come from.
#[derive(Clone, Debug)]
pub enum PrepareInput {
    /// One CSV, shuffled and cut by ratio.
    Single { csv: PathBuf, split: SplitSpec },
    /// Train/validation/test files used as given.
    PreSplit { train: PathBuf, valid: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    Ratio { ratios: [f64; 3], seed: u64 },
    PreSplit,
}

/// Summary of a prepared dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fields: Vec<String>,
    pub vocab_sizes: Vec<usize>,
    pub total_features: usize,
    pub split: SplitMode,
    /// rows in train, validation, test
    pub rows: [usize; 3],
    pub files: [String; 3],
}

struct RawRows {
    tokens: Vec<Vec<String>>,
    labels: Vec<f64>,
}

fn parse_label(raw: &str, path: &Path, line: u64) -> Result<f64, DataError> {
    match raw.trim().parse::<f64>() {
        Ok(y) if y == 1.0 => Ok(1.0),
        Ok(y) if y == 0.0 || y == -1.0 => Ok(0.0),
        _ => Err(DataError::Config(format!(
            "{}: line {line}: label `{raw}` is not 0 or 1",
            path.display()
        ))),
    }
}

fn read_raw(path: &Path, schema: &DatasetSchema, expect: Option<&ResolvedSchema>) -> Result<(ResolvedSchema, RawRows), DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::csv(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::csv(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let resolved = schema.resolve(&header)?;
    if let Some(first) = expect {
        if first.field_names() != resolved.field_names() {
            return Err(DataError::Config(format!("{}: fields differ from the training file", path.display())));
        }
    }
    let mut rows = RawRows {
        tokens: Vec::new(),
        labels: Vec::new(),
    };
    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record).map_err(|e| DataError::csv(path, e))? {
        let line = record.position().map_or(0, |p| p.line());
        let label = record.get(resolved.label_column).unwrap_or("");
        rows.labels.push(parse_label(label, path, line)?);
        rows.tokens.push(resolved.fields.iter().map(|f| f.token(&record)).collect());
    }
    Ok((resolved, rows))
}

fn select(rows: &RawRows, idx: &[usize]) -> RawRows {
    RawRows {
        tokens: idx.iter().map(|&i| rows.tokens[i].clone()).collect(),
        labels: idx.iter().map(|&i| rows.labels[i]).collect(),
    }
}

fn encode(vocab: &VocabularySet, rows: &RawRows) -> Result<EncodedDataset, DataError> {
    let indices = rows.tokens.iter().flat_map(|t| vocab.encode_row(t)).collect();
    EncodedDataset::new(vocab.sizes(), indices, rows.labels.clone())
}

fn write_encoded(path: &Path, names: &[String], data: &EncodedDataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::csv(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| DataError::csv(path, e))?;
    let mut rec = Vec::with_capacity(names.len() + 1);
    for i in 0..data.len() {
        rec.clear();
        rec.push((data.label(i) as u8).to_string());
        rec.extend(data.row(i).iter().map(u32::to_string));
        w.write_record(&rec).map_err(|e| DataError::csv(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| DataError::io(path, e))
}

/// Reads raw CSV input, builds vocabularies on the training rows, and writes
/// the encoded splits, `vocab.json` and `manifest.json` into `out_dir`.
///
/// Output bytes depend only on the inputs, the schema and the split seed.
pub fn prepare(input: &PrepareInput, schema: &DatasetSchema, out_dir: &Path) -> Result<Manifest, DataError> {
    let (resolved, [train, valid, test], split) = match input {
        PrepareInput::Single { csv, split } => {
            let (resolved, rows) = read_raw(csv, schema, None)?;
            let [a, b, c] = split.partition(rows.labels.len())?;
            let parts = [select(&rows, &a), select(&rows, &b), select(&rows, &c)];
            let mode = SplitMode::Ratio {
                ratios: split.ratios,
                seed: split.seed,
            };
            (resolved, parts, mode)
        }
        PrepareInput::PreSplit { train, valid, test } => {
            let (resolved, tr) = read_raw(train, schema, None)?;
            let (_, va) = read_raw(valid, schema, Some(&resolved))?;
            let (_, te) = read_raw(test, schema, Some(&resolved))?;
            for (name, part) in [("train", &tr), ("valid", &va), ("test", &te)] {
                if part.labels.is_empty() {
                    return Err(DataError::Config(format!("{name} split is empty")));
                }
            }
            (resolved, [tr, va, te], SplitMode::PreSplit)
        }
    };
    let names = resolved.field_names();
    let vocab = VocabularySet::build(names.clone(), &train.tokens, schema.min_count)?;
    let encoded = [encode(&vocab, &train)?, encode(&vocab, &valid)?, encode(&vocab, &test)?];

    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    write_text(&out_dir.join(VOCAB_FILE), &vocab.to_json())?;
    for (file, data) in SPLIT_FILES.iter().zip(&encoded) {
        write_encoded(&out_dir.join(file), &names, data)?;
    }
    let manifest = Manifest {
        fields: names,
        vocab_sizes: vocab.sizes(),
        total_features: vocab.total_features(),
        split,
        rows: [encoded[0].len(), encoded[1].len(), encoded[2].len()],
        files: SPLIT_FILES.map(String::from),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&out_dir.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

/// A prepared dataset directory loaded back into memory.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub manifest: Manifest,
    pub vocab: VocabularySet,
    pub train: EncodedDataset,
    pub valid: EncodedDataset,
    pub test: EncodedDataset,
}

fn read_encoded(path: &Path, vocab_sizes: &[usize]) -> Result<EncodedDataset, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::csv(path, e))?;
    let f = vocab_sizes.len();
    let width = reader.headers().map_err(|e| DataError::csv(path, e))?.len();
    if width != f + 1 {
        return Err(DataError::Config(format!(
            "{}: {width} columns, expected label plus {f} fields",
            path.display()
        )));
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record).map_err(|e| DataError::csv(path, e))? {
        let line = record.position().map_or(0, |p| p.line());
        labels.push(parse_label(&record[0], path, line)?);
        for cell in record.iter().skip(1) {
            let ix = cell.parse::<u32>().map_err(|_| {
                DataError::Config(format!("{}: line {line}: `{cell}` is not an index", path.display()))
            })?;
            indices.push(ix);
        }
    }
    EncodedDataset::new(vocab_sizes.to_vec(), indices, labels)
}

impl PreparedDataset {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| DataError::io(p, e))
        };
        let manifest: Manifest = serde_json::from_str(&read(MANIFEST_FILE)?)
            .map_err(|e| DataError::Config(format!("invalid manifest in {}: {e}", dir.display())))?;
        let vocab = VocabularySet::from_json(&read(VOCAB_FILE)?)?;
        if vocab.sizes() != manifest.vocab_sizes || vocab.names != manifest.fields {
            return Err(DataError::Config(format!(
                "{}: vocabulary and manifest disagree",
                dir.display()
            )));
        }
        let [train, valid, test] = [0, 1, 2].map(|k| read_encoded(&dir.join(&manifest.files[k]), &manifest.vocab_sizes));
        Ok(PreparedDataset {
            train: train?,
            valid: valid?,
            test: test?,
            vocab,
            manifest,
        })
    }

    pub fn field_count(&self) -> usize {
        self.manifest.fields.len()
    }

    /// Splits token rows, builds vocabularies on the training part and
    /// encodes all three parts, without touching the filesystem.
    pub fn from_rows(
        names: Vec<String>,
        tokens: Vec<Vec<String>>,
        labels: Vec<f64>,
        split: &SplitSpec,
        min_count: usize,
    ) -> Result<Self, DataError> {
        if tokens.len() != labels.len() || tokens.iter().any(|t| t.len() != names.len()) {
            return Err(DataError::Config("token rows do not match labels or field names".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(DataError::Config(format!("label {bad} is not 0 or 1")));
        }
        let rows = RawRows { tokens, labels };
        let [a, b, c] = split.partition(rows.labels.len())?;
        let [train, valid, test] = [select(&rows, &a), select(&rows, &b), select(&rows, &c)];
        let vocab = VocabularySet::build(names.clone(), &train.tokens, min_count)?;
        let (train, valid, test) = (encode(&vocab, &train)?, encode(&vocab, &valid)?, encode(&vocab, &test)?);
        let manifest = Manifest {
            fields: names,
            vocab_sizes: vocab.sizes(),
            total_features: vocab.total_features(),
            split: SplitMode::Ratio {
                ratios: split.ratios,
                seed: split.seed,
            },
            rows: [train.len(), valid.len(), test.len()],
            files: SPLIT_FILES.map(String::from),
        };
        Ok(PreparedDataset {
            manifest,
            vocab,
            train,
            valid,
            test,
        })
    }
}

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::DataError;

/// Index every unseen or infrequent token maps to.
pub const OOV_INDEX: usize = 0;

/// Token-to-index map for one field. Indices are dense in `[0, size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    min_count: usize,
    size: usize,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically; index 0 is reserved for OOV.
    /// The empty token is treated as missing and never indexed.
    pub fn from_counts(counts: &HashMap<String, usize>, min_count: usize) -> Self {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(tok, &c)| c >= min_count && !tok.is_empty())
            .map(|(t, &c)| (t, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let index: HashMap<String, usize> = kept
            .into_iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i + 1))
            .collect();
        let size = index.len() + 1;
        Vocabulary {
            index,
            min_count,
            size,
        }
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_INDEX)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> BTreeMap<&str, usize> {
        self.index.iter().map(|(t, &i)| (t.as_str(), i)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    name: String,
    min_count: usize,
    oov_index: usize,
    size: usize,
    tokens: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    fields: Vec<VocabRecord>,
}

/// Vocabularies of all fields, in field order.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabularySet {
    pub names: Vec<String>,
    pub vocabs: Vec<Vocabulary>,
}

impl VocabularySet {
    /// Counts tokens over the training rows only.
    pub fn build(names: Vec<String>, train_tokens: &[Vec<String>], min_count: usize) -> Result<Self, DataError> {
        if train_tokens.is_empty() {
            return Err(DataError::Config("cannot build vocabularies from an empty training split".into()));
        }
        let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); names.len()];
        for row in train_tokens {
            for (c, tok) in counts.iter_mut().zip(row) {
                *c.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        let vocabs = counts.iter().map(|c| Vocabulary::from_counts(c, min_count)).collect();
        Ok(VocabularySet { names, vocabs })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.vocabs.iter().map(Vocabulary::size).collect()
    }

    pub fn total_features(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn encode_row(&self, tokens: &[String]) -> Vec<u32> {
        self.vocabs
            .iter()
            .zip(tokens)
            .map(|(v, t)| v.encode(t) as u32)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            fields: self
                .names
                .iter()
                .zip(&self.vocabs)
                .map(|(n, v)| VocabRecord {
                    name: n.clone(),
                    min_count: v.min_count,
                    oov_index: OOV_INDEX,
                    size: v.size,
                    tokens: v.index.iter().map(|(t, &i)| (t.clone(), i)).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| DataError::Config(format!("invalid vocabulary file: {e}")))?;
        let mut names = Vec::new();
        let mut vocabs = Vec::new();
        for rec in file.fields {
            let n = rec.tokens.len();
            let mut seen = vec![false; n + 1];
            for (tok, &i) in &rec.tokens {
                if i == OOV_INDEX || i > n || seen[i] {
                    return Err(DataError::Config(format!(
                        "field `{}`: token `{tok}` has invalid or duplicate index {i}",
                        rec.name
                    )));
                }
                seen[i] = true;
            }
            if rec.size != n + 1 || rec.oov_index != OOV_INDEX {
                return Err(DataError::Config(format!("field `{}`: inconsistent size", rec.name)));
            }
            names.push(rec.name);
            vocabs.push(Vocabulary {
                index: rec.tokens.into_iter().collect(),
                min_count: rec.min_count,
                size: rec.size,
            });
        }
        Ok(VocabularySet { names, vocabs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, usize)]) -> HashMap<String, usize> {
        pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect()
    }

    #[test]
    fn infrequent_tokens_fall_to_oov() {
        let v = Vocabulary::from_counts(&counts(&[("a", 5), ("b", 1)]), 2);
        assert_eq!(v.size(), 2);
        assert_eq!(v.encode("a"), 1);
        assert_eq!(v.encode("b"), OOV_INDEX);
        assert_eq!(v.encode("never"), OOV_INDEX);
    }

    #[test]
    fn equal_counts_break_ties_lexicographically() {
        let v = Vocabulary::from_counts(&counts(&[("b", 3), ("a", 3), ("c", 4)]), 2);
        assert_eq!((v.encode("c"), v.encode("a"), v.encode("b")), (1, 2, 3));
    }

    #[test]
    fn empty_token_is_never_indexed() {
        let v = Vocabulary::from_counts(&counts(&[("", 10), ("x", 2)]), 1);
        assert_eq!(v.encode(""), OOV_INDEX);
        assert_eq!(v.size(), 2);
    }

    #[test]
    fn json_reload_is_exact() {
        let rows: Vec<Vec<String>> = ["a,x", "a,y", "b,y", "a,z", "c,y"]
            .iter()
            .map(|r| r.split(',').map(str::to_string).collect())
            .collect();
        let set = VocabularySet::build(vec!["f1".into(), "f2".into()], &rows, 1).unwrap();
        let text = set.to_json();
        let back = VocabularySet::from_json(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_json(), text);
        assert_eq!(set.encode_row(&["a".into(), "y".into()]), vec![1, 1]);
    }

    #[test]
    fn empty_training_split_is_config_error() {
        assert!(matches!(
            VocabularySet::build(vec!["f".into()], &[], 2),
            Err(DataError::Config(_))
        ));
    }
}

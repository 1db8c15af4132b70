use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptEntry {
    name: String,
    embedding: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptFile {
    dim: usize,
    prompts: Vec<PromptEntry>,
}

/// Named query embeddings computed ahead of time.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    dim: usize,
    entries: Vec<(String, Vec<f32>)>,
}

impl PromptBank {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, emb) in &entries {
            if emb.len() != dim {
                return Err(Error::Dimension(format!(
                    "prompt '{name}' has {} values, bank dimension is {dim}",
                    emb.len()
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate prompt name '{name}'")));
            }
            if !emb.iter().all(|v| v.is_finite()) {
                return Err(Error::parse("prompt bank", format!("prompt '{name}' has non-finite values")));
            }
            if emb.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!("prompt '{name}' is all-zero")));
            }
        }
        Ok(PromptBank { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e.as_slice())
    }

    /// Like [`get`](Self::get) but the error lists every available name.
    pub fn lookup(&self, name: &str) -> Result<&[f32]> {
        self.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown prompt '{name}'; available: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PromptFile =
            serde_json::from_str(text).map_err(|e| Error::parse("prompt bank", e.to_string()))?;
        PromptBank::new(
            f.dim,
            f.prompts.into_iter().map(|p| (p.name, p.embedding)).collect(),
        )
    }

    pub fn to_json(&self) -> String {
        let f = PromptFile {
            dim: self.dim,
            prompts: self
                .entries
                .iter()
                .map(|(n, e)| PromptEntry {
                    name: n.clone(),
                    embedding: e.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("prompt bank serializes")
    }
}

pub fn load_prompt_bank(path: &Path) -> Result<PromptBank> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PromptBank::from_json(&text)
}

pub fn save_prompt_bank(bank: &PromptBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_looks_up() {
        let bank = PromptBank::from_json(
            r#"{"dim": 2, "prompts": [{"name": "plant", "embedding": [1, 0]}, {"name": "other", "embedding": [0, 1]}]}"#,
        )
        .unwrap();
        assert_eq!(bank.names(), vec!["plant", "other"]);
        assert_eq!(bank.lookup("other").unwrap(), &[0.0, 1.0]);
        let err = bank.lookup("vase").unwrap_err().to_string();
        assert!(err.contains("plant, other"), "{err}");
        assert_eq!(PromptBank::from_json(&bank.to_json()).unwrap(), bank);
    }

    #[test]
    fn rejects_bad_banks() {
        let dup = r#"{"dim": 1, "prompts": [{"name": "a", "embedding": [1]}, {"name": "a", "embedding": [2]}]}"#;
        assert!(PromptBank::from_json(dup).is_err());
        let zero = r#"{"dim": 2, "prompts": [{"name": "a", "embedding": [0, 0]}]}"#;
        assert!(PromptBank::from_json(zero).is_err());
        let dim = r#"{"dim": 3, "prompts": [{"name": "a", "embedding": [1, 0]}]}"#;
        assert!(matches!(PromptBank::from_json(dim), Err(Error::Dimension(_))));
    }
}

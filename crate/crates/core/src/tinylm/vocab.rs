use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Closed whitespace-token vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from tokens in first-seen order, dropping duplicates.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = Vec::new();
        let mut index = HashMap::new();
        for t in tokens {
            let t = t.as_ref();
            if !index.contains_key(t) {
                index.insert(t.to_string(), seen.len());
                seen.push(t.to_string());
            }
        }
        Vocab {
            tokens: seen,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| invalid(format!("unknown token `{t}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_rejects_unknown() {
        let v = Vocab::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode(" a  b ").unwrap(), vec![0, 1]);
        assert!(v.encode("a c").is_err());
        assert_eq!(v.decode(&[1, 0]), "b a");
    }
}

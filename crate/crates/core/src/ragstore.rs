//! Chat-history persistence: per-agent-per-turn slices, a deterministic
//! embedding, exhaustive cosine top-k retrieval and retrieval-conditioned
//! answering.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::chatroom::Transcript;
use crate::corpus::grammar::{chat_prompt, strip_topic, MAX_REPLY_TOKENS};
use crate::error::{invalid, Result};
use crate::tinylm::{forward, generate, Decode, ModelParams};

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x0bad_5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub scenario: String,
    pub agent: String,
    pub turn: usize,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// One slice per message, in transcript order (embeddings left empty).
pub fn slice_transcript(t: &Transcript) -> Result<Vec<Slice>> {
    t.validate()?;
    Ok(t.messages
        .iter()
        .map(|m| Slice {
            scenario: t.scenario.clone(),
            agent: m.source.clone(),
            turn: m.timestamp.0,
            text: m.content.clone(),
            embedding: Vec::new(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedMode {
    /// Bag of hashed tokens; word order is ignored.
    Hashed { dim: usize, seed: u64 },
    /// Mean final-layer hidden state of the tiny model.
    Hidden,
}

impl Default for EmbedMode {
    fn default() -> Self {
        EmbedMode::Hashed {
            dim: DEFAULT_DIM,
            seed: DEFAULT_HASH_SEED,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Embedder {
    pub mode: EmbedMode,
    pub params: Option<Arc<ModelParams>>,
}

impl Embedder {
    pub fn hidden(params: Arc<ModelParams>) -> Self {
        Embedder {
            mode: EmbedMode::Hidden,
            params: Some(params),
        }
    }

    pub fn dim(&self) -> Result<usize> {
        match (self.mode, &self.params) {
            (EmbedMode::Hashed { dim, .. }, _) => Ok(dim),
            (EmbedMode::Hidden, Some(p)) => Ok(p.config.d_model),
            (EmbedMode::Hidden, None) => Err(invalid("hidden-state embedding needs model params")),
        }
    }

    /// Unit-norm embedding of nonempty text.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(invalid("cannot embed empty text"));
        }
        let v = match (self.mode, &self.params) {
            (EmbedMode::Hashed { dim, seed }, _) => {
                if dim == 0 {
                    return Err(invalid("embedding dimension must be positive"));
                }
                let mut v = DVector::zeros(dim);
                for tok in text.split_whitespace() {
                    let h = fnv1a(seed, tok.as_bytes());
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[(h % dim as u64) as usize] += sign;
                }
                v
            }
            (EmbedMode::Hidden, Some(p)) => {
                let toks = p.vocab.encode(text)?;
                let trace = forward(p, &toks)?;
                trace.final_hidden.column_mean()
            }
            (EmbedMode::Hidden, None) => {
                return Err(invalid("hidden-state embedding needs model params"))
            }
        };
        let n = v.norm();
        if n == 0.0 {
            // hashed signs cancelled out; fall back to a fixed axis
            let mut e = vec![0.0; v.len()];
            e[0] = 1.0;
            return Ok(e);
        }
        Ok((v / n).as_slice().to_vec())
    }
}

/// Default hashed-bag embedding.
pub fn embed(text: &str) -> Result<Vec<f64>> {
    Embedder::default().embed(text)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub dim: usize,
    pub mode: EmbedMode,
    pub split_seed: u64,
    pub train_ratio: f64,
    pub train_scenarios: usize,
}

#[derive(Debug, Clone)]
pub struct RagIndex {
    pub header: IndexHeader,
    pub slices: Vec<Slice>,
    pub embedder: Embedder,
}

/// Splits transcripts by a seeded hash of the scenario id (exactly
/// `round(ratio * n)` go to training) and indexes the training slices.
/// Returns the index and the withheld scenario ids.
pub fn build_index(
    transcripts: &[Transcript],
    train_ratio: f64,
    split_seed: u64,
    embedder: Embedder,
) -> Result<(RagIndex, Vec<String>)> {
    if transcripts.is_empty() {
        return Err(invalid("no transcripts to index"));
    }
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(invalid("train ratio must lie strictly between 0 and 1"));
    }
    let mut ids: Vec<&str> = transcripts.iter().map(|t| t.scenario.as_str()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != transcripts.len() {
        return Err(invalid("scenario ids must be unique"));
    }
    let n = ids.len();
    let n_train = (train_ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(invalid(format!("ratio {train_ratio} leaves an empty split of {n} scenarios")));
    }
    ids.sort_by_key(|id| (fnv1a(split_seed, id.as_bytes()), id.to_string()));
    let train: std::collections::BTreeSet<&str> = ids[..n_train].iter().copied().collect();
    let mut eval: Vec<String> = ids[n_train..].iter().map(|s| s.to_string()).collect();
    eval.sort();

    let dim = embedder.dim()?;
    let mut slices = Vec::new();
    for t in transcripts.iter().filter(|t| train.contains(t.scenario.as_str())) {
        for mut s in slice_transcript(t)? {
            s.embedding = embedder.embed(&s.text)?;
            slices.push(s);
        }
    }
    let header = IndexHeader {
        dim,
        mode: embedder.mode,
        split_seed,
        train_ratio,
        train_scenarios: n_train,
    };
    Ok((
        RagIndex {
            header,
            slices,
            embedder,
        },
        eval,
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tie_key(s: &Slice) -> (&str, &str, usize) {
    (&s.scenario, &s.agent, s.turn)
}

impl RagIndex {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Top-`k` slices by cosine similarity, ties by `(scenario, agent, turn)`.
    /// An empty index yields no results.
    pub fn query_topk(&self, query: &str, k: usize) -> Result<Vec<(&Slice, f64)>> {
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.slices.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(query)?;
        let mut scored: Vec<(&Slice, f64)> =
            self.slices.iter().map(|s| (s, dot(&s.embedding, &q))).collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| tie_key(a.0).cmp(&tie_key(b.0)))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", serde_json::to_string(&self.header)?)?;
        for s in &self.slices {
            writeln!(f, "{}", serde_json::to_string(s)?)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reloads an index; hidden-state indexes need the model they were
    /// built with.
    pub fn load_jsonl(path: &Path, params: Option<Arc<ModelParams>>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let first = lines.next().ok_or_else(|| invalid("empty index file"))??;
        let header: IndexHeader = serde_json::from_str(&first)?;
        let embedder = Embedder {
            mode: header.mode,
            params,
        };
        if embedder.dim()? != header.dim {
            return Err(invalid("embedder dimension does not match the index"));
        }
        let mut slices = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Slice = serde_json::from_str(&line)?;
            if s.embedding.len() != header.dim {
                return Err(invalid("slice embedding has the wrong dimension"));
            }
            slices.push(s);
        }
        Ok(RagIndex {
            header,
            slices,
            embedder,
        })
    }
}

/// Greedy answer conditioned on the secure template, the retrieved slices
/// (best match closest to the question) and the question.
pub fn answer_with_rag(params: &ModelParams, index: &RagIndex, question: &str, k: usize) -> Result<String> {
    let hits = index.query_topk(question, k)?;
    let items: Vec<&str> = hits
        .iter()
        .rev()
        .map(|(s, _)| strip_topic(&s.text, question))
        .collect();
    let budget = params.config.context_length.saturating_sub(MAX_REPLY_TOKENS);
    let (prompt, _) = chat_prompt(&items, question, budget);
    generate(params, &prompt, Decode::greedy(MAX_REPLY_TOKENS))
}

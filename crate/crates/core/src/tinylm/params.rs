use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{invalid, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Default desk-scale architecture: 4 layers, width 64, FFN 256, 4 heads,
    /// context 128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            vocab_size,
            context_length: 128,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            return Err(invalid("n_layers must be at least 3"));
        }
        if self.d_model == 0 || self.d_ffn == 0 || self.vocab_size == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid("d_model must be divisible by n_heads"));
        }
        if self.context_length == 0 {
            return Err(invalid("context_length must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Middle layer, the default site for rank-one edits.
    pub fn middle_layer(&self) -> usize {
        self.n_layers / 2
    }
}

/// Tensors of one transformer block. Vectors are stored as one-column
/// matrices so every tensor shares a type.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: DMatrix<f64>,
    pub ln1_b: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub ln2_g: DMatrix<f64>,
    pub ln2_b: DMatrix<f64>,
    /// First FFN matrix, `d_ffn x d_model`.
    pub w_fc: DMatrix<f64>,
    pub b_fc: DMatrix<f64>,
    /// Second FFN matrix, `d_model x d_ffn`; the rank-one edit target.
    pub w_proj: DMatrix<f64>,
    pub b_proj: DMatrix<f64>,
}

pub const LAYER_TENSORS: [&str; 12] = [
    "ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj",
    "b_proj",
];

pub const ATTENTION_TENSORS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ffn;
        LayerWeights {
            ln1_g: DMatrix::zeros(d, 1),
            ln1_b: DMatrix::zeros(d, 1),
            w_q: DMatrix::zeros(d, d),
            w_k: DMatrix::zeros(d, d),
            w_v: DMatrix::zeros(d, d),
            w_o: DMatrix::zeros(d, d),
            ln2_g: DMatrix::zeros(d, 1),
            ln2_b: DMatrix::zeros(d, 1),
            w_fc: DMatrix::zeros(f, d),
            b_fc: DMatrix::zeros(f, 1),
            w_proj: DMatrix::zeros(d, f),
            b_proj: DMatrix::zeros(d, 1),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        Some(match name {
            "ln1_g" => &self.ln1_g,
            "ln1_b" => &self.ln1_b,
            "w_q" => &self.w_q,
            "w_k" => &self.w_k,
            "w_v" => &self.w_v,
            "w_o" => &self.w_o,
            "ln2_g" => &self.ln2_g,
            "ln2_b" => &self.ln2_b,
            "w_fc" => &self.w_fc,
            "b_fc" => &self.b_fc,
            "w_proj" => &self.w_proj,
            "b_proj" => &self.b_proj,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        Some(match name {
            "ln1_g" => &mut self.ln1_g,
            "ln1_b" => &mut self.ln1_b,
            "w_q" => &mut self.w_q,
            "w_k" => &mut self.w_k,
            "w_v" => &mut self.w_v,
            "w_o" => &mut self.w_o,
            "ln2_g" => &mut self.ln2_g,
            "ln2_b" => &mut self.ln2_b,
            "w_fc" => &mut self.w_fc,
            "b_fc" => &mut self.b_fc,
            "w_proj" => &mut self.w_proj,
            "b_proj" => &mut self.b_proj,
            _ => return None,
        })
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `d_model x vocab`; column `t` embeds token `t`.
    pub tok_emb: DMatrix<f64>,
    /// `d_model x context_length`.
    pub pos_emb: DMatrix<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: DMatrix<f64>,
    pub lnf_b: DMatrix<f64>,
    /// `vocab x d_model`.
    pub head: DMatrix<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Weights {
            tok_emb: DMatrix::zeros(cfg.d_model, cfg.vocab_size),
            pos_emb: DMatrix::zeros(cfg.d_model, cfg.context_length),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            lnf_g: DMatrix::zeros(cfg.d_model, 1),
            lnf_b: DMatrix::zeros(cfg.d_model, 1),
            head: DMatrix::zeros(cfg.vocab_size, cfg.d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut w = self.clone();
        w.for_each_mut(|_, t| t.fill(0.0));
        w
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for name in LAYER_TENSORS {
                out.push((format!("layers.{l}.{name}"), layer.get(name).unwrap()));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut DMatrix<f64>)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for name in LAYER_TENSORS {
                f(&format!("layers.{l}.{name}"), layer.get_mut(name).unwrap());
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("head", &mut self.head);
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        match name {
            "tok_emb" => Some(&self.tok_emb),
            "pos_emb" => Some(&self.pos_emb),
            "lnf_g" => Some(&self.lnf_g),
            "lnf_b" => Some(&self.lnf_b),
            "head" => Some(&self.head),
            _ => {
                let (l, t) = split_layer_name(name)?;
                self.layers.get(l)?.get(t)
            }
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        match name {
            "tok_emb" => Some(&mut self.tok_emb),
            "pos_emb" => Some(&mut self.pos_emb),
            "lnf_g" => Some(&mut self.lnf_g),
            "lnf_b" => Some(&mut self.lnf_b),
            "head" => Some(&mut self.head),
            _ => {
                let (l, t) = split_layer_name(name)?;
                self.layers.get_mut(l)?.get_mut(t)
            }
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        let others = other.named();
        let mut i = 0;
        self.for_each_mut(|_, t| {
            *t += others[i].1 * alpha;
            i += 1;
        });
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_mut(|_, t| *t *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parses `layers.{l}.{tensor}`.
pub fn split_layer_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (l, t) = rest.split_once('.')?;
    Some((l.parse().ok()?, t))
}

/// A full model snapshot: hyperparameters, vocabulary and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub weights: Weights,
}

impl ModelParams {
    /// All-zero weights except unit layer-norm gains.
    pub fn zeroed(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(invalid("vocab size does not match config"));
        }
        let mut weights = Weights::zeros(&config);
        for layer in &mut weights.layers {
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
        }
        weights.lnf_g.fill(1.0);
        Ok(ModelParams {
            config,
            vocab,
            weights,
        })
    }

    /// GPT-2 style initialization: N(0, 0.02) matrices, residual-output
    /// projections scaled by `1/sqrt(2 n_layers)`.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut p = Self::zeroed(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * p.config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut fill = |t: &mut DMatrix<f64>, s: f64| {
            for x in t.iter_mut() {
                *x = normal.sample(&mut rng) * s;
            }
        };
        fill(&mut p.weights.tok_emb, std);
        fill(&mut p.weights.pos_emb, std);
        for layer in &mut p.weights.layers {
            fill(&mut layer.w_q, std);
            fill(&mut layer.w_k, std);
            fill(&mut layer.w_v, std);
            fill(&mut layer.w_o, resid_std);
            fill(&mut layer.w_fc, std);
            fill(&mut layer.w_proj, resid_std);
        }
        fill(&mut p.weights.head, std);
        Ok(p)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() > self.config.context_length {
            return Err(invalid(format!(
                "sequence of {} tokens exceeds context {}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(invalid(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }
}

//! Pretraining on a synthetic world, Adam, and restricted fine-tuning.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward_packed, scored_objective, ScoredSeq};
use super::params::{ModelConfig, ModelParams, Weights};
use crate::corpus::grammar::{sample_doc, DocMix};
use crate::corpus::World;
use crate::error::{invalid, Error, Result};

/// Encoded document; tokens before `target_start` are context only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDoc {
    pub tokens: Vec<usize>,
    pub target_start: usize,
}

impl TrainingDoc {
    pub fn encode(params: &ModelParams, context: &str, target: &str) -> Result<Self> {
        let ctx = params.vocab.encode(context)?;
        let mut tokens = ctx.clone();
        tokens.extend(params.vocab.encode(target)?);
        params.check_tokens(&tokens)?;
        if ctx.is_empty() || tokens.len() == ctx.len() {
            return Err(invalid("document needs both context and target"));
        }
        Ok(TrainingDoc {
            tokens,
            target_start: ctx.len(),
        })
    }
}

/// Architecture minus the vocabulary size, which the world fixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub context_length: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        let c = ModelConfig::desk(1);
        Architecture {
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_ffn: c.d_ffn,
            n_heads: c.n_heads,
            context_length: c.context_length,
        }
    }
}

impl Architecture {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            vocab_size,
            context_length: self.context_length,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Documents per step.
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Required recall accuracy; `None` skips the check.
    pub target_accuracy: Option<f64>,
    pub mix: DocMix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::default(),
            steps: 1500,
            lr: 3e-3,
            warmup: 100,
            batch_size: 32,
            grad_clip: Some(1.0),
            target_accuracy: Some(0.95),
            mix: DocMix::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to a tenth of the peak.
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub recall_accuracy: f64,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Adam over all or a named subset of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new(shape_of: &Weights) -> Self {
        let z: Vec<DMatrix<f64>> = shape_of
            .named()
            .iter()
            .map(|(_, t)| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: z.clone(),
            v: z,
        }
    }

    /// One update; tensors not accepted by `only` are left untouched.
    pub fn step(&mut self, w: &mut Weights, g: &Weights, lr: f64, only: Option<&[String]>) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let grads = g.named();
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        w.for_each_mut(|name, t| {
            let k = i;
            i += 1;
            if let Some(names) = only {
                if !names.iter().any(|n| n == name) {
                    return;
                }
            }
            let gr = grads[k].1;
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for j in 0..t.len() {
                let gj = gr[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                t[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        });
    }
}

/// Answer-only objective over a batch: mean NLL per target token.
fn batch_objective(params: &ModelParams, docs: &[&TrainingDoc]) -> (f64, Weights) {
    let targets: usize = docs.iter().map(|d| d.tokens.len() - d.target_start).sum();
    let coef = -1.0 / targets.max(1) as f64;
    let seqs: Vec<ScoredSeq> = docs
        .iter()
        .map(|d| ScoredSeq {
            tokens: d.tokens.clone(),
            target_start: d.target_start,
            coef,
        })
        .collect();
    let (value, _, grads, _) =
        scored_objective(&params.weights, &params.config, &seqs, &[], true);
    (value, grads)
}

fn clip(grads: &mut Weights, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = grads.norm();
        if n > c {
            grads.scale(c / n);
        }
    }
}

/// Trains a fresh model on documents sampled from `world`.
pub fn train_lm(world: &World, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let vocab = world.vocab();
    let cfg = config.arch.with_vocab(vocab.len());
    let mut params = ModelParams::init(cfg, vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut adam = Adam::new(&params.weights);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut docs = Vec::with_capacity(config.batch_size);
        while docs.len() < config.batch_size {
            let d = sample_doc(world, &config.mix, &mut rng);
            match TrainingDoc::encode(&params, &d.context, &d.target) {
                Ok(doc) => docs.push(doc),
                Err(Error::InvalidArgument(_)) => continue, // over-long history
                Err(e) => return Err(e),
            }
        }
        let refs: Vec<&TrainingDoc> = docs.iter().collect();
        let (loss, mut grads) = batch_objective(&params, &refs);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NumericFailure {
                step,
                message: "non-finite training loss".into(),
            });
        }
        clip(&mut grads, config.grad_clip);
        adam.step(&mut params.weights, &grads, config.lr_at(step), None);
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4}");
        }
    }
    let prompts = world.all_prompts();
    let acc = recall_accuracy(&params, &prompts)?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!("trained {} steps in {seconds:.1}s, recall {acc:.3}", config.steps);
    if let Some(target) = config.target_accuracy {
        if acc < target {
            return Err(Error::TrainingFailed(format!(
                "recall accuracy {acc:.4} below target {target:.4}"
            )));
        }
    }
    Ok(TrainOutcome {
        params,
        recall_accuracy: acc,
        losses,
        seconds,
    })
}

/// Fine-tunes only the named tensors on fixed documents (full-batch Adam).
pub fn train_subset(
    params: &ModelParams,
    docs: &[TrainingDoc],
    tensors: &[String],
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    if docs.is_empty() {
        return Err(invalid("no documents to fine-tune on"));
    }
    for t in tensors {
        if params.weights.get(t).is_none() {
            return Err(invalid(format!("unknown tensor `{t}`")));
        }
    }
    let mut out = params.clone();
    let mut adam = Adam::new(&out.weights);
    let refs: Vec<&TrainingDoc> = docs.iter().collect();
    for step in 0..steps {
        let (loss, grads) = batch_objective(&out, &refs);
        if !loss.is_finite() {
            return Err(Error::NumericFailure {
                step,
                message: "non-finite fine-tuning loss".into(),
            });
        }
        adam.step(&mut out.weights, &grads, lr, Some(tensors));
    }
    Ok(out)
}

/// Fraction of `(prompt, answer)` pairs whose greedy continuation starts
/// with the answer tokens. Prompts are evaluated in packed batches.
pub fn recall_accuracy(params: &ModelParams, pairs: &[(String, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no prompts to evaluate"));
    }
    let hits = recall_hits(params, pairs)?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / pairs.len() as f64)
}

/// Per-pair recall indicators: every answer token must be the argmax given
/// the prompt and the preceding answer tokens.
pub fn recall_hits(params: &ModelParams, pairs: &[(String, String)]) -> Result<Vec<bool>> {
    let mut encoded = Vec::with_capacity(pairs.len());
    for (p, a) in pairs {
        let pt = params.vocab.encode(p)?;
        let at = params.vocab.encode(a)?;
        let mut t = pt.clone();
        t.extend(&at);
        params.check_tokens(&t)?;
        encoded.push((t, pt.len()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in encoded.chunks(64) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|(t, _)| t.as_slice()).collect();
        let trace = forward_packed(&params.weights, &params.config, &seqs, &[]);
        for ((t, plen), &(start, _)) in chunk.iter().zip(&trace.segments) {
            let ok = (*plen..t.len()).all(|j| trace.logits.column(start + j - 1).argmax().0 == t[j]);
            out.push(ok);
        }
    }
    Ok(out)
}

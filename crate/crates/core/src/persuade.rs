//! Persuasiveness injection: self-collected preference pairs, the DPO loss,
//! and low-rank adapters on the attention projections.
//!
//! Adapters hold `A (d_out x r)` and `B (d_in x r)`; the weight delta is
//! `scaling * A B^T`. `A` starts random and `B` at zero, so a fresh adapter
//! set is an exact no-op.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::grammar::{chat_prompt, styled_prompt, LONG_STYLE, SHORT_STYLE};
use crate::error::{invalid, Error, Result};
use crate::linalg::{gemm, matmul};
use crate::tinylm::{
    backward, forward_packed, forward_packed_hooked, generate, split_layer_name, target_logprobs,
    Archive, Decode, ForwardTrace, ModelParams, ScoredSeq, Weights, ATTENTION_TENSORS,
};

/// `(x, y_w, y_l)`: instruction, preferred and rejected responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: String,
    pub y_w: String,
    pub y_l: String,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        let lw = self.y_w.split_whitespace().count();
        let ll = self.y_l.split_whitespace().count();
        if ll == 0 || self.x.trim().is_empty() {
            return Err(invalid("empty instruction or response"));
        }
        if self.y_w == self.y_l || lw <= ll {
            return Err(invalid("preferred response must be longer than the rejected one"));
        }
        Ok(())
    }
}

/// Generates one long and one short response per topic prompt. The style
/// instruction is part of the collection prompt only; the stored `x` is the
/// plain chat prompt.
pub fn collect_preference_pairs(
    params: &ModelParams,
    prompts: &[String],
    decode: Decode,
) -> Result<Vec<PreferencePair>> {
    if prompts.is_empty() {
        return Err(invalid("no prompts"));
    }
    let mut pairs = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let dec = match decode {
            Decode::Temperature { temperature, max_tokens, seed } => Decode::Temperature {
                temperature,
                max_tokens,
                seed: seed.wrapping_add(i as u64),
            },
            d => d,
        };
        let gen = |style: &str| generate(params, &styled_prompt(style, prompt), dec);
        let pair = match (gen(LONG_STYLE), gen(SHORT_STYLE)) {
            (Ok(y_w), Ok(y_l)) => PreferencePair {
                x: chat_prompt(&[], prompt, usize::MAX).0,
                y_w,
                y_l,
            },
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("skipping prompt {i}: {e}");
                continue;
            }
        };
        match pair.validate() {
            Ok(()) => pairs.push(pair),
            Err(e) => log::warn!("skipping prompt {i}: {e}"),
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCollection("every preference pair was skipped".into()));
    }
    Ok(pairs)
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Low-rank factors for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// Full tensor name, e.g. `layers.1.w_q`.
    pub tensor: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub scaling: f64,
    pub adapters: Vec<Adapter>,
}

impl AdapterSet {
    /// Fresh adapters on the named tensors: `A ~ N(0, 1/r)`, `B = 0`.
    pub fn init(params: &ModelParams, tensors: &[String], rank: usize, scaling: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("rank must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).unwrap();
        let mut adapters = Vec::with_capacity(tensors.len());
        for name in tensors {
            let w = params
                .weights
                .get(name)
                .ok_or_else(|| invalid(format!("unknown tensor `{name}`")))?;
            let a = DMatrix::from_fn(w.nrows(), rank, |_, _| normal.sample(&mut rng));
            adapters.push(Adapter {
                tensor: name.clone(),
                a,
                b: DMatrix::zeros(w.ncols(), rank),
            });
        }
        Ok(AdapterSet {
            rank,
            scaling,
            adapters,
        })
    }

    /// Attention projections of every layer.
    pub fn attention_tensors(params: &ModelParams) -> Vec<String> {
        (0..params.config.n_layers)
            .flat_map(|l| ATTENTION_TENSORS.iter().map(move |t| format!("layers.{l}.{t}")))
            .collect()
    }

    pub fn delta(&self, adapter: &Adapter) -> DMatrix<f64> {
        matmul(&adapter.a, false, &adapter.b, true) * self.scaling
    }

    fn find(&self, layer: usize, tensor: &str) -> Option<&Adapter> {
        self.adapters
            .iter()
            .find(|a| split_layer_name(&a.tensor) == Some((layer, tensor)))
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = Vec::with_capacity(self.adapters.len() * 2);
        for a in &self.adapters {
            tensors.push((format!("{}.A", a.tensor), a.a.clone()));
            tensors.push((format!("{}.B", a.tensor), a.b.clone()));
        }
        Archive {
            meta: serde_json::json!({
                "kind": "adapters",
                "rank": self.rank,
                "scaling": self.scaling,
                "tensors": self.adapters.iter().map(|a| a.tensor.clone()).collect::<Vec<_>>(),
            }),
            tensors,
        }
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if ar.meta["kind"] != "adapters" {
            return Err(bad("not an adapter archive"));
        }
        let rank = ar.meta["rank"].as_u64().ok_or_else(|| bad("missing rank"))? as usize;
        let scaling = ar.meta["scaling"].as_f64().ok_or_else(|| bad("missing scaling"))?;
        let names: Vec<String> = serde_json::from_value(ar.meta["tensors"].clone())?;
        let adapters = names
            .into_iter()
            .map(|n| {
                let a = ar.get(&format!("{n}.A")).ok_or_else(|| bad("missing A factor"))?;
                let b = ar.get(&format!("{n}.B")).ok_or_else(|| bad("missing B factor"))?;
                Ok(Adapter {
                    tensor: n,
                    a: a.clone(),
                    b: b.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterSet {
            rank,
            scaling,
            adapters,
        })
    }
}

/// `W + scaling * A B^T` for every adapted tensor. Exact-zero delta entries
/// are skipped so a zero adapter leaves the weights bit-identical.
pub fn merge_adapters(params: &ModelParams, adapters: &AdapterSet) -> Result<ModelParams> {
    let mut out = params.clone();
    for ad in &adapters.adapters {
        let w = out
            .weights
            .get_mut(&ad.tensor)
            .ok_or_else(|| invalid(format!("unknown tensor `{}`", ad.tensor)))?;
        if ad.a.nrows() != w.nrows() || ad.b.nrows() != w.ncols() || ad.a.ncols() != ad.b.ncols() {
            return Err(invalid(format!("adapter shape mismatch on `{}`", ad.tensor)));
        }
        let delta = adapters.delta(ad);
        for (x, d) in w.iter_mut().zip(delta.iter()) {
            if *d != 0.0 {
                *x += d;
            }
        }
    }
    Ok(out)
}

/// Forward pass with adapters applied as a separate low-rank path,
/// `W x + scaling * A (B^T x)`, without merging.
pub fn forward_with_adapters(params: &ModelParams, adapters: &AdapterSet, tokens: &[usize]) -> Result<ForwardTrace> {
    params.check_tokens(tokens)?;
    let hook = |layer: usize, name: &str, input: &DMatrix<f64>| {
        adapters.find(layer, name).map(|ad| {
            let low = matmul(&ad.b, true, input, false);
            matmul(&ad.a, false, &low, false) * adapters.scaling
        })
    };
    Ok(forward_packed_hooked(
        &params.weights,
        &params.config,
        &[tokens],
        &[],
        Some(&hook),
    ))
}

/// Adapter gradients from the gradient of the effective weights.
fn adapter_grads(adapters: &AdapterSet, g: &Weights) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    adapters
        .adapters
        .iter()
        .map(|ad| {
            let gw = g.get(&ad.tensor).expect("adapted tensor exists");
            let mut da = DMatrix::zeros(ad.a.nrows(), ad.a.ncols());
            let mut db = DMatrix::zeros(ad.b.nrows(), ad.b.ncols());
            gemm(adapters.scaling, gw, false, &ad.b, false, 0.0, &mut da);
            gemm(adapters.scaling, gw, true, &ad.a, false, 0.0, &mut db);
            (da, db)
        })
        .collect()
}

struct EncodedPair {
    w: ScoredSeq,
    l: ScoredSeq,
}

fn encode_pair(params: &ModelParams, pair: &PreferencePair) -> Result<EncodedPair> {
    let x = params.vocab.encode(&pair.x)?;
    let seq = |y: &str| -> Result<ScoredSeq> {
        let mut t = x.clone();
        t.extend(params.vocab.encode(y)?);
        params.check_tokens(&t)?;
        Ok(ScoredSeq {
            tokens: t,
            target_start: x.len(),
            coef: 1.0,
        })
    };
    Ok(EncodedPair {
        w: seq(&pair.y_w)?,
        l: seq(&pair.y_l)?,
    })
}

/// `(log pi(y_w|x), log pi(y_l|x))` per pair plus the trace for reuse.
fn pair_logprobs(weights: &ModelParams, enc: &[EncodedPair]) -> (Vec<(f64, f64)>, ForwardTrace, Vec<ScoredSeq>, DMatrix<f64>) {
    let seqs: Vec<ScoredSeq> = enc.iter().flat_map(|e| [e.w.clone(), e.l.clone()]).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let trace = forward_packed(&weights.weights, &weights.config, &refs, &[]);
    let (lps, dl) = target_logprobs(&trace, &seqs);
    let out = lps.chunks(2).map(|c| (c[0], c[1])).collect();
    (out, trace, seqs, dl)
}

fn log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        -(-m).exp().ln_1p()
    } else {
        m - m.exp().ln_1p()
    }
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Loss value and margin details for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoEval {
    /// Mean `-log sigmoid(beta * margin)`.
    pub loss: f64,
    /// Mean `logratio(y_w) - logratio(y_l)`.
    pub margin: f64,
    /// Gradient per adapter, `(dA, dB)`.
    pub grads: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Mean DPO loss over `pairs` with adapter gradients. `offset` adds a fixed
/// amount to every margin (used to probe the loss shape).
pub fn dpo_loss_batch(
    base: &ModelParams,
    adapters: &AdapterSet,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    beta: f64,
    offset: f64,
) -> Result<DpoEval> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    if pairs.is_empty() {
        return Err(invalid("no pairs"));
    }
    let enc = pairs
        .iter()
        .map(|p| encode_pair(base, p))
        .collect::<Result<Vec<_>>>()?;
    let (ref_lp, ..) = pair_logprobs(reference, &enc);
    let policy = merge_adapters(base, adapters)?;
    let (pol_lp, trace, seqs, mut dl) = pair_logprobs(&policy, &enc);
    let n = pairs.len() as f64;
    let (mut loss, mut margin) = (0.0, 0.0);
    let mut coefs = Vec::with_capacity(seqs.len());
    for (&(pw, pl), &(rw, rl)) in pol_lp.iter().zip(&ref_lp) {
        let m = (pw - rw) - (pl - rl) + offset;
        loss -= log_sigmoid(beta * m) / n;
        margin += m / n;
        // d/dm of -log sigmoid(beta m) = -beta sigmoid(-beta m)
        let c = -beta * sigmoid(-beta * m) / n;
        coefs.push(c);
        coefs.push(-c);
    }
    // dlogits from target_logprobs used coef 1; rescale each segment
    for (&(start, len), c) in trace.segments.iter().zip(&coefs) {
        dl.columns_mut(start, len).scale_mut(*c);
    }
    let (g, _) = backward(&policy.weights, &policy.config, &trace, &dl, &[], true);
    Ok(DpoEval {
        loss,
        margin,
        grads: adapter_grads(adapters, &g),
    })
}

/// Single-pair DPO loss and adapter gradients.
pub fn dpo_loss(
    base: &ModelParams,
    adapters: &AdapterSet,
    reference: &ModelParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(f64, Vec<(DMatrix<f64>, DMatrix<f64>)>)> {
    let e = dpo_loss_batch(base, adapters, reference, std::slice::from_ref(pair), beta, 0.0)?;
    Ok((e.loss, e.grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersuadeConfig {
    pub rank: usize,
    pub lr: f64,
    pub steps: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub scaling: f64,
    /// Tensor short names adapted in every layer.
    pub tensors: Vec<String>,
    pub seed: u64,
    /// Stop once a minibatch's mean margin reaches this value.
    pub stop_margin: Option<f64>,
}

impl Default for PersuadeConfig {
    fn default() -> Self {
        PersuadeConfig {
            rank: 16,
            lr: 1e-5,
            steps: 1000,
            beta: 0.1,
            batch_size: 16,
            scaling: 1.0,
            tensors: ATTENTION_TENSORS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            stop_margin: Some(3.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PersuadeOutcome {
    pub adapters: AdapterSet,
    pub losses: Vec<f64>,
    pub margins: Vec<f64>,
}

/// Adam on adapter factors over minibatches of the mean DPO loss.
pub fn train_persuasiveness(
    params: &ModelParams,
    pairs: &[PreferencePair],
    config: &PersuadeConfig,
) -> Result<PersuadeOutcome> {
    if pairs.is_empty() {
        return Err(invalid("no preference pairs"));
    }
    let names: Vec<String> = (0..params.config.n_layers)
        .flat_map(|l| config.tensors.iter().map(move |t| format!("layers.{l}.{t}")))
        .collect();
    let mut adapters = AdapterSet::init(params, &names, config.rank, config.scaling, config.seed)?;
    let mut m: Vec<(DMatrix<f64>, DMatrix<f64>)> = adapters
        .adapters
        .iter()
        .map(|a| (a.a.map(|_| 0.0), a.b.map(|_| 0.0)))
        .collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let bs = config.batch_size.max(1).min(pairs.len());
    let (mut losses, mut margins) = (Vec::new(), Vec::new());
    let mut initial = None;
    for step in 0..config.steps {
        let start = (step * bs) % pairs.len();
        let batch: Vec<PreferencePair> = (0..bs).map(|i| pairs[(start + i) % pairs.len()].clone()).collect();
        let e = dpo_loss_batch(params, &adapters, params, &batch, config.beta, 0.0)?;
        if !e.loss.is_finite() {
            return Err(Error::NumericFailure {
                step,
                message: "non-finite preference loss".into(),
            });
        }
        let init = *initial.get_or_insert(e.loss);
        if e.loss > 10.0 * init {
            return Err(Error::TrainingFailed(format!(
                "preference loss diverged at step {step}: {:.4} > 10 x {init:.4}",
                e.loss
            )));
        }
        losses.push(e.loss);
        margins.push(e.margin);
        if config.stop_margin.is_some_and(|target| e.margin >= target) {
            break;
        }
        let t = step as i32 + 1;
        let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
        for ((ad, (ga, gb)), ((ma, mb), (va, vb))) in adapters
            .adapters
            .iter_mut()
            .zip(&e.grads)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            for (p, g, mm, vv) in [(&mut ad.a, ga, ma, va), (&mut ad.b, gb, mb, vb)] {
                for j in 0..p.len() {
                    mm[j] = b1 * mm[j] + (1.0 - b1) * g[j];
                    vv[j] = b2 * vv[j] + (1.0 - b2) * g[j] * g[j];
                    p[j] -= config.lr * (mm[j] / c1) / ((vv[j] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(PersuadeOutcome {
        adapters,
        losses,
        margins,
    })
}

/// Mean margin and loss over `pairs` for already-merged policy weights.
pub fn evaluate_pairs(policy: &ModelParams, reference: &ModelParams, pairs: &[PreferencePair], beta: f64) -> Result<(f64, f64)> {
    let zero = AdapterSet {
        rank: 1,
        scaling: 1.0,
        adapters: Vec::new(),
    };
    let e = dpo_loss_batch(policy, &zero, reference, pairs, beta, 0.0)?;
    Ok((e.margin, e.loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_invariants() {
        let ok = PreferencePair {
            x: "q".into(),
            y_w: "a because b .".into(),
            y_l: "a .".into(),
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.y_w = bad.y_l.clone();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!(log_sigmoid(800.0) <= 0.0);
    }
}

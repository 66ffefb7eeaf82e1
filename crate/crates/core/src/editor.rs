//! Rank-one knowledge editing of one FFN projection matrix.
//!
//! The FFN at layer `l` is read as a key/value memory: the activation `k`
//! entering `W_proj` at the last subject token is the key, `W_proj k` the
//! value. An edit (1) averages the key over random prefixes, (2) optimizes
//! a replacement value under a KL anchor on the subject's essence prompt,
//! and (3) writes the pair with the minimal-disruption rank-one update
//!
//! ```text
//! W' = W + (v* - W k*) u^T,   u = C^-1 k* / (k*^T C^-1 k*)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::grammar::{essence_prompt, sample_doc, DocMix};
use crate::corpus::{EditRequest, World};
use crate::error::{invalid, Error, Result};
use crate::tinylm::{
    answer_prob, forward_packed, recall_hits, scored_objective, softmax, train_subset,
    ModelParams, Override, ScoredSeq, TrainingDoc, Vocab, LAYER_TENSORS,
};

/// Averaged FFN key for a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyVector {
    pub layer: usize,
    pub vector: DVector<f64>,
    pub prefixes: Vec<String>,
}

/// Optimized FFN output for the subject position.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector {
    pub vector: DVector<f64>,
    /// Combined objective after each accepted step; entry 0 is the start.
    pub losses: Vec<f64>,
    pub lambda: f64,
}

/// Uncentered second moment of FFN keys plus a ridge.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    pub matrix: DMatrix<f64>,
    pub samples: usize,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Edited layer; `None` means the middle layer. Defaults to the first.
    pub layer: Option<usize>,
    pub lambda: f64,
    pub n_prefixes: usize,
    pub max_prefix_len: usize,
    pub value: ValueOpt,
    pub ridge: f64,
    /// Weight of the final-subject-token key moment added to `C`.
    pub subject_weight: f64,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            layer: Some(0),
            lambda: 0.5,
            n_prefixes: 1,
            max_prefix_len: 5,
            value: ValueOpt {
                steps: 50,
                lr: 0.5,
                method: ValueMethod::Adam,
                stop_nll: Some(0.05),
            },
            ridge: 1e-5,
            subject_weight: 10.0,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn layer_for(&self, params: &ModelParams) -> Result<usize> {
        let l = self.layer.unwrap_or_else(|| params.config.middle_layer());
        if l >= params.config.n_layers {
            return Err(invalid(format!("edit layer {l} out of range")));
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub edit: EditRequest,
    pub layer: usize,
    pub pre_prob_old: f64,
    pub pre_prob_new: f64,
    pub post_prob_old: f64,
    pub post_prob_new: f64,
    pub delta_norm: f64,
    /// Fraction of locality probes whose greedy answer changed.
    pub locality_drift: f64,
    pub value_loss_start: f64,
    pub value_loss_end: f64,
    pub success: bool,
}

/// Column of the last token of the last occurrence of `subject`.
pub fn subject_position(vocab: &Vocab, tokens: &[usize], subject: &str) -> Result<usize> {
    let sub = vocab.encode(subject)?;
    if sub.is_empty() || sub.len() > tokens.len() {
        return Err(invalid("subject not found in prompt"));
    }
    (0..=tokens.len() - sub.len())
        .rev()
        .find(|&i| tokens[i..i + sub.len()] == sub[..])
        .map(|i| i + sub.len() - 1)
        .ok_or_else(|| invalid(format!("subject `{subject}` not found in prompt")))
}

fn join(prefix: &str, prompt: &str) -> String {
    if prefix.trim().is_empty() {
        prompt.to_string()
    } else {
        format!("{} {}", prefix.trim(), prompt)
    }
}

/// Encoded `prefix + prompt` with the subject column.
fn prefixed(params: &ModelParams, prefixes: &[String], prompt: &str, subject: &str) -> Result<Vec<(Vec<usize>, usize)>> {
    let bare = [String::new()];
    let list = if prefixes.is_empty() { &bare[..] } else { prefixes };
    list.iter()
        .map(|x| {
            let t = params.vocab.encode(&join(x, prompt))?;
            params.check_tokens(&t)?;
            let col = subject_position(&params.vocab, &t, subject)?;
            Ok((t, col))
        })
        .collect()
}

/// Mean FFN key at the final subject token over the prefixed prompts.
pub fn compute_key(
    params: &ModelParams,
    layer: usize,
    subject_prompt: &str,
    subject: &str,
    prefixes: &[String],
) -> Result<KeyVector> {
    if layer >= params.config.n_layers {
        return Err(invalid("layer out of range"));
    }
    let seqs = prefixed(params, prefixes, subject_prompt, subject)?;
    let mut k = DVector::zeros(params.config.d_ffn);
    for (t, col) in &seqs {
        let tr = forward_packed(&params.weights, &params.config, &[t], &[]);
        k += tr.layers[layer].ffn_act.column(*col);
    }
    k /= seqs.len() as f64;
    Ok(KeyVector {
        layer,
        vector: k,
        prefixes: prefixes.to_vec(),
    })
}

/// `C = (1/M) sum k k^T + ridge I` over every token of every sample prompt.
pub fn estimate_second_moment(
    params: &ModelParams,
    layer: usize,
    sample_prompts: &[String],
    ridge: f64,
) -> Result<SecondMoment> {
    if sample_prompts.is_empty() {
        return Err(invalid("no sample prompts"));
    }
    if !(ridge > 0.0) {
        return Err(invalid("ridge must be positive"));
    }
    if layer >= params.config.n_layers {
        return Err(invalid("layer out of range"));
    }
    let f = params.config.d_ffn;
    let mut c = DMatrix::zeros(f, f);
    let mut m = 0;
    let encoded = sample_prompts
        .iter()
        .map(|p| {
            let t = params.vocab.encode(p)?;
            params.check_tokens(&t)?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    for chunk in encoded.chunks(64) {
        let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let tr = forward_packed(&params.weights, &params.config, &seqs, &[]);
        let act = &tr.layers[layer].ffn_act;
        crate::linalg::gemm(1.0, act, false, act, true, 1.0, &mut c);
        m += act.ncols();
    }
    c /= m as f64;
    // exact symmetry regardless of summation order
    let c = (&c + c.transpose()) * 0.5 + DMatrix::identity(f, f) * ridge;
    Ok(SecondMoment {
        matrix: c,
        samples: m,
        ridge,
    })
}

/// Adds `weight * (1/S) sum k k^T` over keys at the final subject token of
/// each `(prompt, subject)` pair.
pub fn add_subject_moment(
    moment: &mut SecondMoment,
    params: &ModelParams,
    layer: usize,
    prompts: &[(String, String)],
    weight: f64,
) -> Result<()> {
    if !(weight >= 0.0) {
        return Err(invalid("subject weight must be non-negative"));
    }
    if weight == 0.0 || prompts.is_empty() {
        return Ok(());
    }
    let f = params.config.d_ffn;
    let mut keys = DMatrix::zeros(f, prompts.len());
    let mut encoded = Vec::with_capacity(prompts.len());
    for (p, s) in prompts {
        let t = params.vocab.encode(p)?;
        params.check_tokens(&t)?;
        let col = subject_position(&params.vocab, &t, s)?;
        encoded.push((t, col));
    }
    let mut j = 0;
    for chunk in encoded.chunks(64) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|(t, _)| t.as_slice()).collect();
        let tr = forward_packed(&params.weights, &params.config, &seqs, &[]);
        for ((_, col), &(start, _)) in chunk.iter().zip(&tr.segments) {
            keys.set_column(j, &tr.layers[layer].ffn_act.column(start + col));
            j += 1;
        }
    }
    let mut c = DMatrix::zeros(f, f);
    crate::linalg::gemm(weight / prompts.len() as f64, &keys, false, &keys, true, 0.0, &mut c);
    moment.matrix += (&c + c.transpose()) * 0.5;
    moment.samples += prompts.len();
    Ok(())
}

/// The value objective and its gradient at `z`.
///
/// `z` replaces `W_proj k` at the subject column as a shift: each prefixed
/// prompt receives `W_proj k_j + (z - z0)`, so `z = z0` reproduces the
/// unedited model everywhere and the KL anchor starts at zero.
pub struct ValueObjective<'a> {
    params: &'a ModelParams,
    layer: usize,
    z0: DVector<f64>,
    /// (tokens, first answer index, subject column, natural FFN output there)
    targets: Vec<(Vec<usize>, usize, usize, DVector<f64>)>,
    essence: (Vec<usize>, usize, DVector<f64>),
    /// Unedited next-token distribution after the essence prompt.
    p_ref: DVector<f64>,
    lambda: f64,
}

impl<'a> ValueObjective<'a> {
    pub fn new(
        params: &'a ModelParams,
        layer: usize,
        edit: &EditRequest,
        key: &KeyVector,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(invalid("lambda must be non-negative"));
        }
        let w_proj = &params.weights.layers[layer].w_proj;
        let z0 = w_proj * &key.vector;
        let answer = params.vocab.encode(&edit.target_new)?;
        let natural = |t: &[usize], col: usize| -> DVector<f64> {
            let tr = forward_packed(&params.weights, &params.config, &[t], &[]);
            tr.layers[layer].ffn_out.column(col).clone_owned()
        };
        let mut targets = Vec::new();
        for (mut t, col) in prefixed(params, &key.prefixes, &edit.prompt, edit.subject())? {
            let start = t.len();
            t.extend(&answer);
            params.check_tokens(&t)?;
            let nat = natural(&t, col);
            targets.push((t, start, col, nat));
        }
        let ep = params.vocab.encode(&essence_prompt(edit.subject()))?;
        let ecol = subject_position(&params.vocab, &ep, edit.subject())?;
        let enat = natural(&ep, ecol);
        let tr = forward_packed(&params.weights, &params.config, &[&ep], &[]);
        let p_ref = tr.distribution(ep.len() - 1);
        Ok(ValueObjective {
            params,
            layer,
            z0,
            targets,
            essence: (ep, ecol, enat),
            p_ref,
            lambda,
        })
    }

    pub fn z0(&self) -> &DVector<f64> {
        &self.z0
    }

    /// `(combined, target term, KL term, gradient)`.
    pub fn eval(&self, z: &DVector<f64>) -> (f64, f64, f64, DVector<f64>) {
        let shift = z - &self.z0;
        let n = self.targets.len() as f64;
        let seqs: Vec<ScoredSeq> = self
            .targets
            .iter()
            .map(|(t, start, _, _)| ScoredSeq {
                tokens: t.clone(),
                target_start: *start,
                coef: -1.0 / n,
            })
            .collect();
        let overrides: Vec<Override> = self
            .targets
            .iter()
            .enumerate()
            .map(|(i, (_, _, col, nat))| Override {
                layer: self.layer,
                column: self.column_of(i, *col),
                value: nat + &shift,
            })
            .collect();
        let cfg = &self.params.config;
        let (target, _, _, dov) = scored_objective(&self.params.weights, cfg, &seqs, &overrides, false);
        let mut grad = DVector::zeros(z.len());
        for d in &dov {
            grad += d;
        }

        // KL(P_ref || P_edit) on the essence prompt
        let (ep, ecol, enat) = &self.essence;
        let ov = [Override {
            layer: self.layer,
            column: *ecol,
            value: enat + &shift,
        }];
        let tr = forward_packed(&self.params.weights, cfg, &[ep], &ov);
        let last = ep.len() - 1;
        let q = softmax(&tr.logits.column(last).clone_owned());
        let mut kl = 0.0;
        for (p, qq) in self.p_ref.iter().zip(q.iter()) {
            if *p > 0.0 {
                kl += p * (p.ln() - qq.max(f64::MIN_POSITIVE).ln());
            }
        }
        if self.lambda > 0.0 {
            // d KL / d logits = q - p
            let mut dl = DMatrix::zeros(tr.logits.nrows(), tr.logits.ncols());
            dl.column_mut(last).copy_from(&((&q - &self.p_ref) * self.lambda));
            let (_, dk) = crate::tinylm::backward(&self.params.weights, cfg, &tr, &dl, &ov, false);
            grad += &dk[0];
        }
        (target + self.lambda * kl, target, kl, grad)
    }

    /// Packed sequences are laid out back to back.
    fn column_of(&self, i: usize, col: usize) -> usize {
        self.targets[..i].iter().map(|(t, ..)| t.len()).sum::<usize>() + col
    }
}

/// Update rule for value optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    /// Plain gradient steps.
    Gd,
    /// Adam-scaled steps; robust where the target is initially improbable
    /// and the raw gradient is tiny.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueOpt {
    pub steps: usize,
    pub lr: f64,
    pub method: ValueMethod,
    /// Stop once the mean target NLL drops below this.
    pub stop_nll: Option<f64>,
}

/// Descent on the value objective from `z0`. A trial step that would
/// increase the objective is rejected and the step size halved, so the
/// recorded objective never increases.
pub fn optimize_value(
    params: &ModelParams,
    layer: usize,
    edit: &EditRequest,
    key: &KeyVector,
    lambda: f64,
    opt: &ValueOpt,
) -> Result<ValueVector> {
    if opt.steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    let obj = ValueObjective::new(params, layer, edit, key, lambda)?;
    let mut z = obj.z0().clone();
    let (mut f, mut nll, _, mut g) = obj.eval(&z);
    if !f.is_finite() {
        return Err(Error::NumericFailure {
            step: 0,
            message: "non-finite value objective".into(),
        });
    }
    let mut losses = vec![f];
    let mut step_size = opt.lr;
    let n = z.len();
    let (mut m, mut v) = (DVector::zeros(n), DVector::zeros(n));
    for step in 1..=opt.steps {
        if opt.stop_nll.is_some_and(|tol| nll < tol) {
            break;
        }
        let dir = match opt.method {
            ValueMethod::Gd => g.clone(),
            ValueMethod::Adam => {
                let t = step as i32;
                m = &m * 0.9 + &g * 0.1;
                v = &v * 0.999 + g.component_mul(&g) * 0.001;
                let c1 = 1.0 - 0.9f64.powi(t);
                let c2 = 1.0 - 0.999f64.powi(t);
                m.zip_map(&v, |a, b| (a / c1) / ((b / c2).sqrt() + 1e-8))
            }
        };
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &z - &dir * step_size;
            let (ft, nt, _, gt) = obj.eval(&trial);
            if !ft.is_finite() {
                return Err(Error::NumericFailure {
                    step,
                    message: "non-finite value objective".into(),
                });
            }
            if ft <= f {
                z = trial;
                (f, nll, g) = (ft, nt, gt);
                accepted = true;
                break;
            }
            step_size *= 0.5;
        }
        if !accepted {
            break;
        }
        losses.push(f);
    }
    Ok(ValueVector {
        vector: z,
        losses,
        lambda,
    })
}

/// Rank-one factors of an update: `delta = left * right^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOne {
    pub left: DVector<f64>,
    pub right: DVector<f64>,
}

pub fn rank_one_factors(
    w_proj: &DMatrix<f64>,
    key: &DVector<f64>,
    value: &DVector<f64>,
    c: &SecondMoment,
) -> Result<RankOne> {
    if w_proj.ncols() != key.len() || w_proj.nrows() != value.len() || c.matrix.nrows() != key.len() {
        return Err(invalid("shape mismatch in rank-one update"));
    }
    let chol = c.matrix.clone().cholesky().ok_or_else(|| Error::NumericFailure {
        step: 0,
        message: "second moment is not positive definite".into(),
    })?;
    let cinv_k = chol.solve(key);
    let denom = key.dot(&cinv_k);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::NumericFailure {
            step: 0,
            message: "k^T C^-1 k is not positive".into(),
        });
    }
    Ok(RankOne {
        left: value - w_proj * key,
        right: cinv_k / denom,
    })
}

/// New snapshot with `W_proj' = W_proj + (v* - W_proj k*) u^T`.
pub fn apply_rank_one_update(
    params: &ModelParams,
    layer: usize,
    key: &KeyVector,
    value: &ValueVector,
    c: &SecondMoment,
) -> Result<ModelParams> {
    if layer >= params.config.n_layers {
        return Err(invalid("layer out of range"));
    }
    let mut out = params.clone();
    let w = &mut out.weights.layers[layer].w_proj;
    let r1 = rank_one_factors(w, &key.vector, &value.vector, c)?;
    if r1.left.iter().all(|x| *x == 0.0) {
        return Ok(out);
    }
    w.ger(1.0, &r1.left, &r1.right, 1.0);
    Ok(out)
}

/// Shared inputs for a batch of edits against one base model.
#[derive(Debug, Clone)]
pub struct EditContext {
    pub layer: usize,
    pub second_moment: SecondMoment,
    /// Pool prefix texts are sampled from.
    pub prefix_pool: Vec<String>,
}

impl EditContext {
    /// Estimates `C` from every rendered fact statement plus the weighted
    /// subject-key moment, and builds a prefix pool from the pretraining
    /// grammar.
    pub fn from_world(params: &ModelParams, world: &World, config: &EditConfig) -> Result<Self> {
        let layer = config.layer_for(params)?;
        let samples: Vec<String> = world
            .all_prompts()
            .into_iter()
            .map(|(p, a)| format!("{p} {a} ."))
            .collect();
        let mut second_moment = estimate_second_moment(params, layer, &samples, config.ridge)?;
        let subject_prompts: Vec<(String, String)> = world
            .facts
            .iter()
            .flat_map(|f| {
                let n = world.relation_index(&f.relation).map_or(0, |r| world.templates[r].len());
                (0..n).filter_map(move |t| world.render_fact(f, t).ok().map(|(p, _)| (p, f.subject.clone())))
            })
            .collect();
        add_subject_moment(&mut second_moment, params, layer, &subject_prompts, config.subject_weight)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
        let prefix_pool = (0..256)
            .map(|_| sample_doc(world, &DocMix::default(), &mut rng).text())
            .collect();
        Ok(EditContext {
            layer,
            second_moment,
            prefix_pool,
        })
    }

    /// `n` prefixes: the empty prefix, then 0..=max_len trailing tokens of
    /// pool documents.
    pub fn prefixes(&self, n: usize, max_len: usize, rng: &mut impl Rng) -> Vec<String> {
        (0..n)
            .map(|i| {
                if i == 0 {
                    return String::new();
                }
                let doc = self.prefix_pool.choose(rng).map(String::as_str).unwrap_or("");
                let toks: Vec<&str> = doc.split_whitespace().collect();
                let len = rng.gen_range(0..=max_len).min(toks.len());
                toks[toks.len() - len..].join(" ")
            })
            .collect()
    }
}

fn edit_seed(config: &EditConfig, edit: &EditRequest) -> u64 {
    // FNV-1a over the edit identity keeps prefixes stable per edit
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ config.seed;
    for b in edit.prompt.bytes().chain(edit.target_new.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn locality_answers(params: &ModelParams, edit: &EditRequest) -> Result<Vec<bool>> {
    let pairs: Vec<(String, String)> = edit
        .locality_probes
        .iter()
        .map(|p| (p.prompt.clone(), p.answer.clone()))
        .collect();
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    recall_hits(params, &pairs)
}

fn greedy_hits(params: &ModelParams, prompt: &str, answer: &str) -> Result<bool> {
    Ok(recall_hits(params, &[(prompt.to_string(), answer.to_string())])?[0])
}

/// Full edit: key, value, rank-one write, and a before/after report.
pub fn edit_knowledge(
    params: &ModelParams,
    edit: &EditRequest,
    config: &EditConfig,
    ctx: &EditContext,
) -> Result<(ModelParams, EditReport, RankOne)> {
    let layer = ctx.layer;
    let mut rng = ChaCha8Rng::seed_from_u64(edit_seed(config, edit));
    let prefixes = ctx.prefixes(config.n_prefixes, config.max_prefix_len, &mut rng);
    let key = compute_key(params, layer, &edit.prompt, edit.subject(), &prefixes)?;
    let value = optimize_value(params, layer, edit, &key, config.lambda, &config.value)?;
    let w = &params.weights.layers[layer].w_proj;
    let r1 = rank_one_factors(w, &key.vector, &value.vector, &ctx.second_moment)?;
    let edited = apply_rank_one_update(params, layer, &key, &value, &ctx.second_moment)?;
    let report = build_report(params, &edited, edit, layer, Some(&value))?;
    Ok((edited, report, r1))
}

fn build_report(
    before: &ModelParams,
    after: &ModelParams,
    edit: &EditRequest,
    layer: usize,
    value: Option<&ValueVector>,
) -> Result<EditReport> {
    let pre_loc = locality_answers(before, edit)?;
    let post_loc = locality_answers(after, edit)?;
    let changed = pre_loc.iter().zip(&post_loc).filter(|(a, b)| a != b).count();
    let delta = &after.weights.layers[layer].w_proj - &before.weights.layers[layer].w_proj;
    let mut delta_sq = delta.norm_squared();
    for t in LAYER_TENSORS.iter().filter(|t| **t != "w_proj") {
        let a = after.weights.layers[layer].get(t).unwrap();
        let b = before.weights.layers[layer].get(t).unwrap();
        delta_sq += (a - b).norm_squared();
    }
    Ok(EditReport {
        edit: edit.clone(),
        layer,
        pre_prob_old: answer_prob(before, &edit.prompt, edit.ground_truth())?,
        pre_prob_new: answer_prob(before, &edit.prompt, &edit.target_new)?,
        post_prob_old: answer_prob(after, &edit.prompt, edit.ground_truth())?,
        post_prob_new: answer_prob(after, &edit.prompt, &edit.target_new)?,
        delta_norm: delta_sq.sqrt(),
        locality_drift: if pre_loc.is_empty() {
            0.0
        } else {
            changed as f64 / pre_loc.len() as f64
        },
        value_loss_start: value.map_or(0.0, |v| v.losses[0]),
        value_loss_end: value.map_or(0.0, |v| *v.losses.last().unwrap()),
        success: greedy_hits(after, &edit.prompt, &edit.target_new)?,
    })
}

/// Fine-tuning baseline settings: every tensor of one layer, trained on the
/// edit statement alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub layer: Option<usize>,
    pub steps: usize,
    pub lr: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            layer: None,
            steps: 25,
            lr: 1e-4,
        }
    }
}

/// Baseline edit by direct fine-tuning; returns the dense per-tensor deltas.
pub fn fine_tune_edit(
    params: &ModelParams,
    edit: &EditRequest,
    config: &FineTuneConfig,
) -> Result<(ModelParams, EditReport, Vec<(String, DMatrix<f64>)>)> {
    let layer = config.layer.unwrap_or_else(|| params.config.middle_layer());
    if layer >= params.config.n_layers {
        return Err(invalid("layer out of range"));
    }
    let doc = TrainingDoc::encode(params, &edit.prompt, &format!("{} .", edit.target_new))?;
    let tensors: Vec<String> = LAYER_TENSORS.iter().map(|t| format!("layers.{layer}.{t}")).collect();
    let tuned = train_subset(params, &[doc], &tensors, config.steps, config.lr)?;
    let deltas = tensors
        .iter()
        .map(|n| (n.clone(), tuned.weights.get(n).unwrap() - params.weights.get(n).unwrap()))
        .collect();
    let report = build_report(params, &tuned, edit, layer, None)?;
    Ok((tuned, report, deltas))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_position_finds_last_occurrence() {
        let v = Vocab::from_tokens(["E1", "x", "E2"]);
        let t = v.encode("E1 x E1 x").unwrap();
        assert_eq!(subject_position(&v, &t, "E1").unwrap(), 2);
        assert!(subject_position(&v, &t, "E2").is_err());
    }
}

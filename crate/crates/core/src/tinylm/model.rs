//! Forward and reverse passes of the decoder.
//!
//! Activations are stored one column per token (`d x N`). Several sequences
//! may be packed side by side; attention is computed per segment so packed
//! sequences never see each other. Pre-LN block:
//!
//! ```text
//! a   = W_o · attn(LN1(h))
//! x   = h + a
//! k   = gelu(W_fc · LN2(x) + b_fc)          // FFN key
//! out = x + W_proj · k + b_proj
//! ```

use nalgebra::{DMatrix, DVector};

use super::params::{ModelConfig, Weights};
use crate::linalg::{gemm, matmul};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Replaces the FFN output `W_proj k` (before bias) of one column at one
/// layer with a fixed vector.
#[derive(Debug, Clone)]
pub struct Override {
    pub layer: usize,
    pub column: usize,
    pub value: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: DMatrix<f64>,
    rstd: Vec<f64>,
}

/// Per-layer activations.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Residual stream entering the block, `h^{(l-1)}`.
    pub resid_in: DMatrix<f64>,
    /// Attention block output `a^{(l)}`.
    pub attn_out: DMatrix<f64>,
    /// FFN activations `gelu(W_fc LN2(a + h) + b_fc)`, `d_ffn x N`.
    pub ffn_act: DMatrix<f64>,
    /// `W_proj · ffn_act` with overrides applied, bias excluded.
    pub ffn_out: DMatrix<f64>,
    ln1: LnCache,
    n1: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Attention probabilities, index `segment * n_heads + head`, rows are
    /// queries.
    pub(crate) probs: Vec<DMatrix<f64>>,
    o: DMatrix<f64>,
    ln2: LnCache,
    n2: DMatrix<f64>,
    ffn_pre: DMatrix<f64>,
}

/// Everything recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `vocab x N` logits.
    pub logits: DMatrix<f64>,
    pub layers: Vec<LayerTrace>,
    /// Final layer-normed hidden states, `d x N`.
    pub final_hidden: DMatrix<f64>,
    /// `(start column, length)` of each packed sequence.
    pub segments: Vec<(usize, usize)>,
    pub tokens: Vec<usize>,
    lnf: LnCache,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Next-token distribution at column `col`.
    pub fn distribution(&self, col: usize) -> DVector<f64> {
        softmax(&self.logits.column(col).clone_owned())
    }
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let mut p = logits.map(|x| (x - max).exp());
    let s = p.sum();
    p /= s;
    p
}

pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.map(|x| x - lse)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn ln_forward(x: &DMatrix<f64>, g: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> (DMatrix<f64>, LnCache) {
    let (d, n) = x.shape();
    let mut xhat = DMatrix::zeros(d, n);
    let mut y = DMatrix::zeros(d, n);
    let mut rstd = Vec::with_capacity(n);
    let g = g.as_slice();
    let b = b.as_slice();
    for j in 0..n {
        let col = &x.as_slice()[j * d..(j + 1) * d];
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let xh = &mut xhat.as_mut_slice()[j * d..(j + 1) * d];
        for i in 0..d {
            xh[i] = (col[i] - mean) * r;
        }
        let yc = &mut y.as_mut_slice()[j * d..(j + 1) * d];
        for i in 0..d {
            yc[i] = g[i] * xh[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dg`, `db` when given.
fn ln_backward(
    dy: &DMatrix<f64>,
    g: &DMatrix<f64>,
    cache: &LnCache,
    grads: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
) -> DMatrix<f64> {
    let (d, n) = dy.shape();
    let mut dx = DMatrix::zeros(d, n);
    let g = g.as_slice();
    let mut dxhat = vec![0.0; d];
    let (mut dg, mut db) = match grads {
        Some((dg, db)) => (Some(dg), Some(db)),
        None => (None, None),
    };
    for j in 0..n {
        let dyc = &dy.as_slice()[j * d..(j + 1) * d];
        let xh = &cache.xhat.as_slice()[j * d..(j + 1) * d];
        if let (Some(dg), Some(db)) = (dg.as_deref_mut(), db.as_deref_mut()) {
            let dgs = dg.as_mut_slice();
            let dbs = db.as_mut_slice();
            for i in 0..d {
                dgs[i] += dyc[i] * xh[i];
                dbs[i] += dyc[i];
            }
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dxhat[i] = dyc[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[j];
        let dxc = &mut dx.as_mut_slice()[j * d..(j + 1) * d];
        for i in 0..d {
            dxc[i] = r * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    let d = m.nrows();
    let bs = b.as_slice();
    for col in m.as_mut_slice().chunks_mut(d) {
        for (x, bi) in col.iter_mut().zip(bs) {
            *x += bi;
        }
    }
}

fn row_sums_into(m: &DMatrix<f64>, out: &mut DMatrix<f64>) {
    let d = m.nrows();
    let o = out.as_mut_slice();
    for col in m.as_slice().chunks(d) {
        for (oi, x) in o.iter_mut().zip(col) {
            *oi += x;
        }
    }
}

/// Extra additive term for a linear map: `(layer, tensor, input) -> delta
/// output`, added to `W · input`. Lets low-rank adapters run unmerged.
pub type LinearHook<'a> = &'a dyn Fn(usize, &str, &DMatrix<f64>) -> Option<DMatrix<f64>>;

/// Runs the decoder over packed sequences.
///
/// Callers are responsible for validating tokens against the config.
pub fn forward_packed(
    w: &Weights,
    cfg: &ModelConfig,
    seqs: &[&[usize]],
    overrides: &[Override],
) -> ForwardTrace {
    forward_packed_hooked(w, cfg, seqs, overrides, None)
}

fn hooked(hook: Option<LinearHook>, layer: usize, name: &str, wm: &DMatrix<f64>, input: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = matmul(wm, false, input, false);
    if let Some(extra) = hook.and_then(|h| h(layer, name, input)) {
        out += extra;
    }
    out
}

/// [`forward_packed`] with an optional hook on the attention projections.
pub fn forward_packed_hooked(
    w: &Weights,
    cfg: &ModelConfig,
    seqs: &[&[usize]],
    overrides: &[Override],
    hook: Option<LinearHook>,
) -> ForwardTrace {
    let d = cfg.d_model;
    let h_count = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut segments = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    for s in seqs {
        segments.push((tokens.len(), s.len()));
        tokens.extend_from_slice(s);
    }
    let n = tokens.len();

    let mut x = DMatrix::zeros(d, n);
    for &(start, len) in &segments {
        for p in 0..len {
            let col = start + p;
            let t = tokens[col];
            let mut c = x.column_mut(col);
            c += w.tok_emb.column(t);
            c += w.pos_emb.column(p);
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let resid_in = x;
        let (n1, ln1) = ln_forward(&resid_in, &lw.ln1_g, &lw.ln1_b, cfg.ln_eps);
        let q = hooked(hook, li, "w_q", &lw.w_q, &n1);
        let k = hooked(hook, li, "w_k", &lw.w_k, &n1);
        let v = hooked(hook, li, "w_v", &lw.w_v, &n1);
        let mut o = DMatrix::zeros(d, n);
        let mut probs = Vec::with_capacity(segments.len() * h_count);
        for &(start, len) in &segments {
            for h in 0..h_count {
                let qh = q.view((h * dh, start), (dh, len));
                let kh = k.view((h * dh, start), (dh, len));
                let vh = v.view((h * dh, start), (dh, len));
                let mut s = matmul(&qh, true, &kh, false);
                for i in 0..len {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let val = s[(i, j)] * scale;
                        s[(i, j)] = val;
                        max = max.max(val);
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = (s[(i, j)] - max).exp();
                        s[(i, j)] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        s[(i, j)] /= sum;
                    }
                    for j in i + 1..len {
                        s[(i, j)] = 0.0;
                    }
                }
                // o_h = v_h P^T
                let oh = matmul(&vh, false, &s, true);
                o.view_mut((h * dh, start), (dh, len)).copy_from(&oh);
                probs.push(s);
            }
        }
        let attn_out = hooked(hook, li, "w_o", &lw.w_o, &o);
        let x2 = &resid_in + &attn_out;
        let (n2, ln2) = ln_forward(&x2, &lw.ln2_g, &lw.ln2_b, cfg.ln_eps);
        let mut ffn_pre = matmul(&lw.w_fc, false, &n2, false);
        add_bias(&mut ffn_pre, &lw.b_fc);
        let ffn_act = ffn_pre.map(gelu);
        let mut ffn_out = matmul(&lw.w_proj, false, &ffn_act, false);
        for ov in overrides.iter().filter(|ov| ov.layer == li) {
            ffn_out.column_mut(ov.column).copy_from(&ov.value);
        }
        let mut out = &x2 + &ffn_out;
        add_bias(&mut out, &lw.b_proj);
        layers.push(LayerTrace {
            resid_in,
            attn_out,
            ffn_act,
            ffn_out,
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            n2,
            ffn_pre,
        });
        x = out;
    }

    let (final_hidden, lnf) = ln_forward(&x, &w.lnf_g, &w.lnf_b, cfg.ln_eps);
    let logits = matmul(&w.head, false, &final_hidden, false);
    ForwardTrace {
        logits,
        layers,
        final_hidden,
        segments,
        tokens,
        lnf,
    }
}

/// Reverse pass from `dlogits` (`vocab x N`).
///
/// Returns parameter gradients (when `param_grads` is set; otherwise an
/// all-zero container) and the gradient with respect to each override value.
pub fn backward(
    w: &Weights,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    dlogits: &DMatrix<f64>,
    overrides: &[Override],
    param_grads: bool,
) -> (Weights, Vec<DVector<f64>>) {
    let d = cfg.d_model;
    let n = trace.tokens.len();
    let h_count = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = w.zeros_like();
    let mut dover: Vec<DVector<f64>> = overrides.iter().map(|o| DVector::zeros(o.value.len())).collect();

    if param_grads {
        gemm(1.0, dlogits, false, &trace.final_hidden, true, 0.0, &mut g.head);
    }
    let dnf = matmul(&w.head, true, dlogits, false);
    let mut dx = ln_backward(
        &dnf,
        &w.lnf_g,
        &trace.lnf,
        param_grads.then_some((&mut g.lnf_g, &mut g.lnf_b)),
    );

    for li in (0..cfg.n_layers).rev() {
        let lw = &w.layers[li];
        let lt = &trace.layers[li];
        let gl = &mut g.layers[li];

        // FFN: out = x2 + ffn_out + b_proj
        let dout = &dx;
        for (oi, ov) in overrides.iter().enumerate() {
            if ov.layer == li {
                dover[oi] += dout.column(ov.column);
            }
        }
        let mut dout_proj = dout.clone();
        for ov in overrides.iter().filter(|ov| ov.layer == li) {
            dout_proj.column_mut(ov.column).fill(0.0);
        }
        if param_grads {
            row_sums_into(dout, &mut gl.b_proj);
            gemm(1.0, &dout_proj, false, &lt.ffn_act, true, 0.0, &mut gl.w_proj);
        }
        let mut dpre = matmul(&lw.w_proj, true, &dout_proj, false);
        for (dp, &pre) in dpre.iter_mut().zip(lt.ffn_pre.iter()) {
            *dp *= gelu_grad(pre);
        }
        if param_grads {
            row_sums_into(&dpre, &mut gl.b_fc);
            gemm(1.0, &dpre, false, &lt.n2, true, 0.0, &mut gl.w_fc);
        }
        let dn2 = matmul(&lw.w_fc, true, &dpre, false);
        let dx2 = ln_backward(
            &dn2,
            &lw.ln2_g,
            &lt.ln2,
            param_grads.then_some((&mut gl.ln2_g, &mut gl.ln2_b)),
        ) + dout;

        // attention: x2 = resid_in + W_o o
        if param_grads {
            gemm(1.0, &dx2, false, &lt.o, true, 0.0, &mut gl.w_o);
        }
        let d_o = matmul(&lw.w_o, true, &dx2, false);
        let mut dq = DMatrix::zeros(d, n);
        let mut dk = DMatrix::zeros(d, n);
        let mut dv = DMatrix::zeros(d, n);
        for (si, &(start, len)) in trace.segments.iter().enumerate() {
            for h in 0..h_count {
                let p = &lt.probs[si * h_count + h];
                let doh = d_o.view((h * dh, start), (dh, len));
                let qh = lt.q.view((h * dh, start), (dh, len));
                let kh = lt.k.view((h * dh, start), (dh, len));
                let vh = lt.v.view((h * dh, start), (dh, len));
                // dv_h = do_h P
                let dvh = matmul(&doh, false, p, false);
                dv.view_mut((h * dh, start), (dh, len)).copy_from(&dvh);
                // dP = do_h^T v_h
                let mut ds = matmul(&doh, true, &vh, false);
                for i in 0..len {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += p[(i, j)] * ds[(i, j)];
                    }
                    for j in 0..=i {
                        ds[(i, j)] = p[(i, j)] * (ds[(i, j)] - dot) * scale;
                    }
                    for j in i + 1..len {
                        ds[(i, j)] = 0.0;
                    }
                }
                // dq_h = k_h dS^T, dk_h = q_h dS (scale already folded in)
                let dqh = matmul(&kh, false, &ds, true);
                let dkh = matmul(&qh, false, &ds, false);
                dq.view_mut((h * dh, start), (dh, len)).copy_from(&dqh);
                dk.view_mut((h * dh, start), (dh, len)).copy_from(&dkh);
            }
        }
        if param_grads {
            gemm(1.0, &dq, false, &lt.n1, true, 0.0, &mut gl.w_q);
            gemm(1.0, &dk, false, &lt.n1, true, 0.0, &mut gl.w_k);
            gemm(1.0, &dv, false, &lt.n1, true, 0.0, &mut gl.w_v);
        }
        let mut dn1 = matmul(&lw.w_q, true, &dq, false);
        gemm(1.0, &lw.w_k, true, &dk, false, 1.0, &mut dn1);
        gemm(1.0, &lw.w_v, true, &dv, false, 1.0, &mut dn1);
        dx = ln_backward(
            &dn1,
            &lw.ln1_g,
            &lt.ln1,
            param_grads.then_some((&mut gl.ln1_g, &mut gl.ln1_b)),
        ) + dx2;
    }

    if param_grads {
        for &(start, len) in &trace.segments {
            for p in 0..len {
                let col = start + p;
                let t = trace.tokens[col];
                let dcol = dx.column(col);
                let mut te = g.tok_emb.column_mut(t);
                te += dcol;
                let mut pe = g.pos_emb.column_mut(p);
                pe += dcol;
            }
        }
    }
    (g, dover)
}

/// One scored sequence: tokens from `target_start` on are targets, each
/// predicted from the preceding column, and the summed log-probability is
/// weighted by `coef`.
#[derive(Debug, Clone)]
pub struct ScoredSeq {
    pub tokens: Vec<usize>,
    pub target_start: usize,
    pub coef: f64,
}

/// Per-sequence target log-probabilities plus `dlogits` of
/// `sum_s coef_s * log p(targets_s)`.
pub fn target_logprobs(trace: &ForwardTrace, seqs: &[ScoredSeq]) -> (Vec<f64>, DMatrix<f64>) {
    let v = trace.logits.nrows();
    let n = trace.logits.ncols();
    let mut dlogits = DMatrix::zeros(v, n);
    let mut out = Vec::with_capacity(seqs.len());
    for (s, &(start, len)) in seqs.iter().zip(&trace.segments) {
        let mut lp = 0.0;
        for t in s.target_start.max(1)..len {
            let col = start + t - 1;
            let logits = trace.logits.column(col).clone_owned();
            let p = softmax(&logits);
            let target = s.tokens[t];
            lp += log_softmax(&logits)[target];
            if s.coef != 0.0 {
                let mut dc = dlogits.column_mut(col);
                dc -= p * s.coef;
                dc[target] += s.coef;
            }
        }
        out.push(lp);
    }
    (out, dlogits)
}

/// Weighted target log-probability objective with exact gradients.
pub fn scored_objective(
    w: &Weights,
    cfg: &ModelConfig,
    seqs: &[ScoredSeq],
    overrides: &[Override],
    param_grads: bool,
) -> (f64, Vec<f64>, Weights, Vec<DVector<f64>>) {
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let trace = forward_packed(w, cfg, &refs, overrides);
    let (lps, dlogits) = target_logprobs(&trace, seqs);
    let value = lps.iter().zip(seqs).map(|(lp, s)| lp * s.coef).sum();
    let (g, dov) = backward(w, cfg, &trace, &dlogits, overrides, param_grads);
    (value, lps, g, dov)
}

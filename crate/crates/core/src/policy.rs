//! Causal decoder over interleaved per-module state tokens and action tokens,
//! with a hand-rolled backward pass and Adam training step.
//!
//! Token order within a timestep is (s⁰ … s^{n_slots−1}, a); attention is
//! causal over the flattened sequence and additionally masks padded module
//! slots. The action prediction for a timestep is the linear head applied to
//! the output at that timestep's last *valid* state token — using the last
//! slot unconditionally would make predictions depend on padding content,
//! breaking the padding-invariance contract.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng;

pub const STATE_DIM: usize = 8;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenLayout {
    /// Module slots per timestep (= N_max).
    pub n_slots: usize,
    /// Context length in timesteps.
    pub context_steps: usize,
}

impl Default for TokenLayout {
    fn default() -> Self {
        TokenLayout {
            n_slots: crate::morphology::N_MAX,
            context_steps: 5,
        }
    }
}

impl TokenLayout {
    pub fn tokens_per_step(&self) -> usize {
        self.n_slots + 1
    }

    pub fn context_tokens(&self) -> usize {
        self.context_steps * self.tokens_per_step()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Only 0.0 is supported; kept as a config field for the record.
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: 64,
            n_layers: 3,
            n_heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> bool {
        self.embed_dim % self.n_heads.max(1) == 0 && self.dropout == 0.0
    }
}

/// One timestep of a training/inference window. State rows and the action are
/// padded to `n_slots`; `slot_valid` marks real modules, `cluster` marks
/// membership in the largest connected cluster (the loss mask).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WindowStep {
    /// n_slots rows of 8 state entries.
    pub states: Vec<[f64; STATE_DIM]>,
    pub slot_valid: Vec<bool>,
    pub cluster: Vec<bool>,
    /// Executed action, normalized to [−1, 1]; `None` only for the step being
    /// predicted at inference.
    pub action: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Window {
    pub steps: Vec<WindowStep>,
}

/// Flat parameter vector plus the named-tensor layout used by checkpoints.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolicyWeights {
    pub cfg: DecoderConfig,
    pub layout: TokenLayout,
    pub params: Vec<f64>,
}

/// (name, shape, offset) for every parameter tensor, in storage order.
pub fn tensor_layout(cfg: &DecoderConfig, layout: &TokenLayout) -> Vec<(String, Vec<usize>, usize)> {
    let e = cfg.embed_dim;
    let m = cfg.mlp_ratio * e;
    let ns = layout.n_slots;
    let mut out = Vec::new();
    let mut off = 0;
    let push = |name: String, shape: Vec<usize>, off: &mut usize, out: &mut Vec<(String, Vec<usize>, usize)>| {
        let len: usize = shape.iter().product();
        out.push((name, shape, *off));
        *off += len;
    };
    push("state_embed.w".into(), vec![e, STATE_DIM], &mut off, &mut out);
    push("state_embed.b".into(), vec![e], &mut off, &mut out);
    push("action_embed.w".into(), vec![e, ns], &mut off, &mut out);
    push("action_embed.b".into(), vec![e], &mut off, &mut out);
    push("embed_ln.g".into(), vec![e], &mut off, &mut out);
    push("embed_ln.b".into(), vec![e], &mut off, &mut out);
    push("pos".into(), vec![layout.context_steps, e], &mut off, &mut out);
    for l in 0..cfg.n_layers {
        for t in ["ln1.g", "ln1.b"] {
            push(format!("layer{l}.{t}"), vec![e], &mut off, &mut out);
        }
        for t in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            push(format!("layer{l}.{t}"), vec![e, e], &mut off, &mut out);
        }
        for t in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            push(format!("layer{l}.{t}"), vec![e], &mut off, &mut out);
        }
        for t in ["ln2.g", "ln2.b"] {
            push(format!("layer{l}.{t}"), vec![e], &mut off, &mut out);
        }
        push(format!("layer{l}.mlp.w1"), vec![m, e], &mut off, &mut out);
        push(format!("layer{l}.mlp.b1"), vec![m], &mut off, &mut out);
        push(format!("layer{l}.mlp.w2"), vec![e, m], &mut off, &mut out);
        push(format!("layer{l}.mlp.b2"), vec![e], &mut off, &mut out);
    }
    push("final_ln.g".into(), vec![e], &mut off, &mut out);
    push("final_ln.b".into(), vec![e], &mut off, &mut out);
    push("head.w".into(), vec![ns, e], &mut off, &mut out);
    push("head.b".into(), vec![ns], &mut off, &mut out);
    out
}

pub fn n_params(cfg: &DecoderConfig, layout: &TokenLayout) -> usize {
    let last = tensor_layout(cfg, layout);
    let (_, shape, off) = last.last().unwrap();
    off + shape.iter().product::<usize>()
}

impl PolicyWeights {
    pub fn init(cfg: DecoderConfig, layout: TokenLayout, seed: u64) -> Self {
        assert!(cfg.validate());
        let mut params = vec![0.0; n_params(&cfg, &layout)];
        let mut r = rng::stream(seed);
        for (name, shape, off) in tensor_layout(&cfg, &layout) {
            let len: usize = shape.iter().product();
            let slice = &mut params[off..off + len];
            if name.ends_with(".g") {
                for v in slice.iter_mut() {
                    *v = 1.0;
                }
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                // biases stay zero
            } else {
                for v in slice.iter_mut() {
                    *v = 0.02 * rng::standard_normal(&mut r);
                }
            }
        }
        PolicyWeights {
            cfg,
            layout,
            params,
        }
    }

    fn offset(&self, name: &str) -> usize {
        tensor_layout(&self.cfg, &self.layout)
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, o)| o)
            .expect("tensor name")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenKind {
    State(usize),
    Action,
}

#[derive(Debug, Clone, Copy)]
struct TokenRef {
    step: usize,
    kind: TokenKind,
    valid: bool,
}

fn token_list(layout: &TokenLayout, w: &Window) -> Vec<TokenRef> {
    let mut toks = Vec::new();
    for (t, s) in w.steps.iter().enumerate() {
        assert!(t < layout.context_steps, "window longer than context");
        assert_eq!(s.states.len(), layout.n_slots);
        assert_eq!(s.slot_valid.len(), layout.n_slots);
        for i in 0..layout.n_slots {
            toks.push(TokenRef {
                step: t,
                kind: TokenKind::State(i),
                valid: s.slot_valid[i],
            });
        }
        if s.action.is_some() {
            toks.push(TokenRef {
                step: t,
                kind: TokenKind::Action,
                valid: true,
            });
        } else {
            assert_eq!(t, w.steps.len() - 1, "missing action before final step");
        }
    }
    toks
}

struct LnCache {
    /// Normalized activations x̂ per token.
    xhat: Vec<f64>,
    /// 1/σ per token.
    inv_sigma: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, n_heads × T × T.
    attn: Vec<f64>,
    /// Concatenated per-head context (pre-Wo).
    ctx: Vec<f64>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    /// MLP hidden pre-activation.
    mlp_pre: Vec<f64>,
}

pub struct ForwardCache {
    tokens: Vec<TokenRef>,
    ln0: LnCache,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_out: Vec<f64>,
    /// Token index whose output feeds the head, per step.
    pred_tokens: Vec<usize>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], e: usize, out: &mut [f64]) -> LnCache {
    let t_count = x.len() / e;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_sigma = vec![0.0; t_count];
    for t in 0..t_count {
        let row = &x[t * e..(t + 1) * e];
        let mu = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / e as f64;
        let inv = 1.0 / libm::sqrt(var + LN_EPS);
        inv_sigma[t] = inv;
        for i in 0..e {
            let h = (row[i] - mu) * inv;
            xhat[t * e + i] = h;
            out[t * e + i] = g[i] * h + b[i];
        }
    }
    LnCache { xhat, inv_sigma }
}

/// d(loss)/d(x) for a layer norm given d(loss)/d(y); accumulates dg/db.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    e: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let t_count = dy.len() / e;
    for t in 0..t_count {
        let dyr = &dy[t * e..(t + 1) * e];
        let xh = &cache.xhat[t * e..(t + 1) * e];
        let mut sum_dg = 0.0;
        let mut sum_dgx = 0.0;
        for i in 0..e {
            let d = dyr[i] * g[i];
            sum_dg += d;
            sum_dgx += d * xh[i];
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
        }
        let inv = cache.inv_sigma[t];
        let n = e as f64;
        for i in 0..e {
            let d = dyr[i] * g[i];
            dx[t * e + i] += inv * (d - sum_dg / n - xh[i] * sum_dgx / n);
        }
    }
}

fn matvec_accum(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let mut s = b[r];
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            s += row[c] * x[c];
        }
        out[r] = s;
    }
}

/// Forward pass; returns per-step action predictions (normalized scale) and
/// the cache for the backward pass.
pub fn forward(w: &PolicyWeights, window: &Window) -> (Vec<Vec<f64>>, ForwardCache) {
    assert!(w.cfg.dropout == 0.0, "dropout is not supported");
    let e = w.cfg.embed_dim;
    let ns = w.layout.n_slots;
    let tokens = token_list(&w.layout, window);
    let t_count = tokens.len();
    let p = &w.params;

    let sew = w.offset("state_embed.w");
    let seb = w.offset("state_embed.b");
    let aew = w.offset("action_embed.w");
    let aeb = w.offset("action_embed.b");
    let pos = w.offset("pos");

    // Token embedding (separate maps), then embed layer norm, then the
    // timestep-shared positional embedding.
    let mut emb = vec![0.0; t_count * e];
    for (ti, tok) in tokens.iter().enumerate() {
        let step = &window.steps[tok.step];
        let out = &mut emb[ti * e..(ti + 1) * e];
        match tok.kind {
            TokenKind::State(slot) => {
                matvec_accum(
                    &p[sew..sew + e * STATE_DIM],
                    e,
                    STATE_DIM,
                    &step.states[slot],
                    &p[seb..seb + e],
                    out,
                );
            }
            TokenKind::Action => {
                let a = step.action.as_ref().unwrap();
                assert_eq!(a.len(), ns);
                matvec_accum(&p[aew..aew + e * ns], e, ns, a, &p[aeb..aeb + e], out);
            }
        }
    }
    let mut x0 = vec![0.0; t_count * e];
    let ln0 = layer_norm(
        &emb,
        &p[w.offset("embed_ln.g")..w.offset("embed_ln.g") + e],
        &p[w.offset("embed_ln.b")..w.offset("embed_ln.b") + e],
        e,
        &mut x0,
    );
    for (ti, tok) in tokens.iter().enumerate() {
        for i in 0..e {
            x0[ti * e + i] += p[pos + tok.step * e + i];
        }
    }

    let heads = w.cfg.n_heads;
    let hd = e / heads;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let m = w.cfg.mlp_ratio * e;

    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(w.cfg.n_layers);
    for l in 0..w.cfg.n_layers {
        let x_in = x.clone();
        let g1 = w.offset(&format!("layer{l}.ln1.g"));
        let b1 = w.offset(&format!("layer{l}.ln1.b"));
        let mut ln1_out = vec![0.0; t_count * e];
        let ln1 = layer_norm(&x_in, &p[g1..g1 + e], &p[b1..b1 + e], e, &mut ln1_out);

        let wq = w.offset(&format!("layer{l}.attn.wq"));
        let wk = w.offset(&format!("layer{l}.attn.wk"));
        let wv = w.offset(&format!("layer{l}.attn.wv"));
        let wo = w.offset(&format!("layer{l}.attn.wo"));
        let bq = w.offset(&format!("layer{l}.attn.bq"));
        let bk = w.offset(&format!("layer{l}.attn.bk"));
        let bv = w.offset(&format!("layer{l}.attn.bv"));
        let bo = w.offset(&format!("layer{l}.attn.bo"));
        let mut q = vec![0.0; t_count * e];
        let mut k = vec![0.0; t_count * e];
        let mut v = vec![0.0; t_count * e];
        for ti in 0..t_count {
            let xin = &ln1_out[ti * e..(ti + 1) * e];
            matvec_accum(&p[wq..wq + e * e], e, e, xin, &p[bq..bq + e], &mut q[ti * e..(ti + 1) * e]);
            matvec_accum(&p[wk..wk + e * e], e, e, xin, &p[bk..bk + e], &mut k[ti * e..(ti + 1) * e]);
            matvec_accum(&p[wv..wv + e * e], e, e, xin, &p[bv..bv + e], &mut v[ti * e..(ti + 1) * e]);
        }
        // Causal masked attention; invalid tokens are masked out as keys.
        let mut attn = vec![0.0; heads * t_count * t_count];
        let mut ctx = vec![0.0; t_count * e];
        for h in 0..heads {
            for j in 0..t_count {
                let qj = &q[j * e + h * hd..j * e + (h + 1) * hd];
                let mut row = vec![f64::NEG_INFINITY; j + 1];
                let mut max_s = f64::NEG_INFINITY;
                for i in 0..=j {
                    if !tokens[i].valid {
                        continue;
                    }
                    let ki = &k[i * e + h * hd..i * e + (h + 1) * hd];
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += qj[d] * ki[d];
                    }
                    let s = s * scale;
                    row[i] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut z = 0.0;
                for i in 0..=j {
                    if row[i] > f64::NEG_INFINITY {
                        let ev = libm::exp(row[i] - max_s);
                        attn[(h * t_count + j) * t_count + i] = ev;
                        z += ev;
                    }
                }
                for i in 0..=j {
                    let a = attn[(h * t_count + j) * t_count + i] / z;
                    attn[(h * t_count + j) * t_count + i] = a;
                    if a != 0.0 {
                        let vi = &v[i * e + h * hd..i * e + (h + 1) * hd];
                        for d in 0..hd {
                            ctx[j * e + h * hd + d] += a * vi[d];
                        }
                    }
                }
            }
        }
        let mut x_mid = x_in.clone();
        for ti in 0..t_count {
            let mut o = vec![0.0; e];
            matvec_accum(
                &p[wo..wo + e * e],
                e,
                e,
                &ctx[ti * e..(ti + 1) * e],
                &p[bo..bo + e],
                &mut o,
            );
            for i in 0..e {
                x_mid[ti * e + i] += o[i];
            }
        }

        let g2 = w.offset(&format!("layer{l}.ln2.g"));
        let b2 = w.offset(&format!("layer{l}.ln2.b"));
        let mut ln2_out = vec![0.0; t_count * e];
        let ln2 = layer_norm(&x_mid, &p[g2..g2 + e], &p[b2..b2 + e], e, &mut ln2_out);
        let w1 = w.offset(&format!("layer{l}.mlp.w1"));
        let bm1 = w.offset(&format!("layer{l}.mlp.b1"));
        let w2 = w.offset(&format!("layer{l}.mlp.w2"));
        let bm2 = w.offset(&format!("layer{l}.mlp.b2"));
        let mut mlp_pre = vec![0.0; t_count * m];
        let mut x_next = x_mid.clone();
        for ti in 0..t_count {
            matvec_accum(
                &p[w1..w1 + m * e],
                m,
                e,
                &ln2_out[ti * e..(ti + 1) * e],
                &p[bm1..bm1 + m],
                &mut mlp_pre[ti * m..(ti + 1) * m],
            );
            let hid: Vec<f64> = mlp_pre[ti * m..(ti + 1) * m]
                .iter()
                .map(|&z| if z > 0.0 { z } else { 0.0 })
                .collect();
            let mut o = vec![0.0; e];
            matvec_accum(&p[w2..w2 + e * m], e, m, &hid, &p[bm2..bm2 + e], &mut o);
            for i in 0..e {
                x_next[ti * e + i] += o[i];
            }
        }
        layers.push(LayerCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            ln2_out,
            mlp_pre,
        });
        x = x_next;
    }

    let mut final_out = vec![0.0; t_count * e];
    let final_ln = layer_norm(
        &x,
        &p[w.offset("final_ln.g")..w.offset("final_ln.g") + e],
        &p[w.offset("final_ln.b")..w.offset("final_ln.b") + e],
        e,
        &mut final_out,
    );

    // Prediction token per step: the last valid state token.
    let mut pred_tokens = Vec::with_capacity(window.steps.len());
    for (t, s) in window.steps.iter().enumerate() {
        let slot = (0..ns)
            .rev()
            .find(|&i| s.slot_valid[i])
            .expect("at least one valid slot per step");
        let ti = tokens
            .iter()
            .position(|tok| tok.step == t && tok.kind == TokenKind::State(slot))
            .unwrap();
        pred_tokens.push(ti);
    }
    let hw = w.offset("head.w");
    let hb = w.offset("head.b");
    let mut preds = Vec::with_capacity(pred_tokens.len());
    for &ti in &pred_tokens {
        let mut o = vec![0.0; ns];
        matvec_accum(
            &p[hw..hw + ns * e],
            ns,
            e,
            &final_out[ti * e..(ti + 1) * e],
            &p[hb..hb + ns],
            &mut o,
        );
        preds.push(o);
    }
    (
        preds,
        ForwardCache {
            tokens,
            ln0,
            layers,
            final_ln,
            final_out,
            pred_tokens,
        },
    )
}

/// Masked MSE over a window: mean squared error over action dimensions of
/// modules in the stored largest cluster, all timesteps pooled.
pub fn window_loss(preds: &[Vec<f64>], window: &Window) -> (f64, usize) {
    let mut sse = 0.0;
    let mut count = 0usize;
    for (t, s) in window.steps.iter().enumerate() {
        let target = match &s.action {
            Some(a) => a,
            None => continue,
        };
        for i in 0..s.cluster.len() {
            if s.cluster[i] {
                let d = preds[t][i] - target[i];
                sse += d * d;
                count += 1;
            }
        }
    }
    (sse, count)
}

/// Backward pass of the masked MSE through the full model; `d_preds` is
/// d(loss)/d(prediction). Returns the gradient as a flat vector matching
/// `params`.
pub fn backward(
    w: &PolicyWeights,
    window: &Window,
    cache: &ForwardCache,
    d_preds: &[Vec<f64>],
) -> Vec<f64> {
    let e = w.cfg.embed_dim;
    let ns = w.layout.n_slots;
    let t_count = cache.tokens.len();
    let p = &w.params;
    let mut grad = vec![0.0; p.len()];

    let hw = w.offset("head.w");
    let hb = w.offset("head.b");
    let mut d_final = vec![0.0; t_count * e];
    for (step, &ti) in cache.pred_tokens.iter().enumerate() {
        let dp = &d_preds[step];
        let y = &cache.final_out[ti * e..(ti + 1) * e];
        for r in 0..ns {
            grad[hb + r] += dp[r];
            for c in 0..e {
                grad[hw + r * e + c] += dp[r] * y[c];
                d_final[ti * e + c] += dp[r] * p[hw + r * e + c];
            }
        }
    }

    // Final layer norm.
    let fg = w.offset("final_ln.g");
    let fb = w.offset("final_ln.b");
    let mut dx = vec![0.0; t_count * e];
    {
        let (g_slice, rest) = {
            let g = &p[fg..fg + e];
            (g.to_vec(), ())
        };
        let _ = rest;
        let mut dg = vec![0.0; e];
        let mut db = vec![0.0; e];
        layer_norm_backward(&d_final, &cache.final_ln, &g_slice, e, &mut dx, &mut dg, &mut db);
        for i in 0..e {
            grad[fg + i] += dg[i];
            grad[fb + i] += db[i];
        }
    }

    let heads = w.cfg.n_heads;
    let hd = e / heads;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let m = w.cfg.mlp_ratio * e;

    for l in (0..w.cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        // dx currently holds d(loss)/d(x_next).
        // x_next = x_mid + W2·relu(W1·ln2(x_mid) + b1) + b2.
        let w1 = w.offset(&format!("layer{l}.mlp.w1"));
        let bm1 = w.offset(&format!("layer{l}.mlp.b1"));
        let w2 = w.offset(&format!("layer{l}.mlp.w2"));
        let bm2 = w.offset(&format!("layer{l}.mlp.b2"));
        let g2o = w.offset(&format!("layer{l}.ln2.g"));
        let b2o = w.offset(&format!("layer{l}.ln2.b"));
        let mut d_ln2_out = vec![0.0; t_count * e];
        for ti in 0..t_count {
            let dxr = &dx[ti * e..(ti + 1) * e];
            let pre = &lc.mlp_pre[ti * m..(ti + 1) * m];
            let ln2r = &lc.ln2_out[ti * e..(ti + 1) * e];
            // d hidden (post-relu).
            let mut dh = vec![0.0; m];
            for r in 0..e {
                let d = dxr[r];
                if d == 0.0 {
                    continue;
                }
                grad[bm2 + r] += d;
                for c in 0..m {
                    let hval = if pre[c] > 0.0 { pre[c] } else { 0.0 };
                    grad[w2 + r * m + c] += d * hval;
                    dh[c] += d * p[w2 + r * m + c];
                }
            }
            for c in 0..m {
                if pre[c] <= 0.0 {
                    dh[c] = 0.0;
                }
            }
            for r in 0..m {
                let d = dh[r];
                if d == 0.0 {
                    continue;
                }
                grad[bm1 + r] += d;
                for c in 0..e {
                    grad[w1 + r * e + c] += d * ln2r[c];
                    d_ln2_out[ti * e + c] += d * p[w1 + r * e + c];
                }
            }
        }
        // Through ln2 into x_mid; residual passes dx straight through.
        let mut d_xmid = dx.clone();
        {
            let g = p[g2o..g2o + e].to_vec();
            let mut dg = vec![0.0; e];
            let mut db = vec![0.0; e];
            layer_norm_backward(&d_ln2_out, &lc.ln2, &g, e, &mut d_xmid, &mut dg, &mut db);
            for i in 0..e {
                grad[g2o + i] += dg[i];
                grad[b2o + i] += db[i];
            }
        }

        // x_mid = x_in + Wo·ctx + bo.
        let wq = w.offset(&format!("layer{l}.attn.wq"));
        let wk = w.offset(&format!("layer{l}.attn.wk"));
        let wv = w.offset(&format!("layer{l}.attn.wv"));
        let wo = w.offset(&format!("layer{l}.attn.wo"));
        let bq = w.offset(&format!("layer{l}.attn.bq"));
        let bk = w.offset(&format!("layer{l}.attn.bk"));
        let bv = w.offset(&format!("layer{l}.attn.bv"));
        let bo = w.offset(&format!("layer{l}.attn.bo"));
        let mut d_ctx = vec![0.0; t_count * e];
        for ti in 0..t_count {
            let d = &d_xmid[ti * e..(ti + 1) * e];
            let ctxr = &lc.ctx[ti * e..(ti + 1) * e];
            for r in 0..e {
                grad[bo + r] += d[r];
                for c in 0..e {
                    grad[wo + r * e + c] += d[r] * ctxr[c];
                    d_ctx[ti * e + c] += d[r] * p[wo + r * e + c];
                }
            }
        }
        // Attention backward.
        let mut dq = vec![0.0; t_count * e];
        let mut dk = vec![0.0; t_count * e];
        let mut dv = vec![0.0; t_count * e];
        for h in 0..heads {
            for j in 0..t_count {
                let arow = &lc.attn[(h * t_count + j) * t_count..(h * t_count + j + 1) * t_count];
                let dctx_j = &d_ctx[j * e + h * hd..j * e + (h + 1) * hd];
                // dα and softmax backward.
                let mut dot = 0.0;
                let mut dalpha = vec![0.0; j + 1];
                for i in 0..=j {
                    if arow[i] == 0.0 {
                        continue;
                    }
                    let vi = &lc.v[i * e + h * hd..i * e + (h + 1) * hd];
                    let mut da = 0.0;
                    for d in 0..hd {
                        da += dctx_j[d] * vi[d];
                        dv[i * e + h * hd + d] += arow[i] * dctx_j[d];
                    }
                    dalpha[i] = da;
                    dot += arow[i] * da;
                }
                for i in 0..=j {
                    if arow[i] == 0.0 {
                        continue;
                    }
                    let ds = arow[i] * (dalpha[i] - dot) * scale;
                    let qj = &lc.q[j * e + h * hd..j * e + (h + 1) * hd];
                    let ki = &lc.k[i * e + h * hd..i * e + (h + 1) * hd];
                    for d in 0..hd {
                        dq[j * e + h * hd + d] += ds * ki[d];
                        dk[i * e + h * hd + d] += ds * qj[d];
                    }
                }
            }
        }
        // Through the q/k/v projections into ln1_out.
        let mut d_ln1_out = vec![0.0; t_count * e];
        for ti in 0..t_count {
            let xr = &lc.ln1_out[ti * e..(ti + 1) * e];
            for (dvec, wo_, bo_) in [(&dq, wq, bq), (&dk, wk, bk), (&dv, wv, bv)] {
                let d = &dvec[ti * e..(ti + 1) * e];
                for r in 0..e {
                    if d[r] == 0.0 {
                        continue;
                    }
                    grad[bo_ + r] += d[r];
                    for c in 0..e {
                        grad[wo_ + r * e + c] += d[r] * xr[c];
                        d_ln1_out[ti * e + c] += d[r] * p[wo_ + r * e + c];
                    }
                }
            }
        }
        // Through ln1 into x_in; residual adds d_xmid directly.
        let g1o = w.offset(&format!("layer{l}.ln1.g"));
        let b1o = w.offset(&format!("layer{l}.ln1.b"));
        let mut d_xin = d_xmid.clone();
        {
            let g = p[g1o..g1o + e].to_vec();
            let mut dg = vec![0.0; e];
            let mut db = vec![0.0; e];
            layer_norm_backward(&d_ln1_out, &lc.ln1, &g, e, &mut d_xin, &mut dg, &mut db);
            for i in 0..e {
                grad[g1o + i] += dg[i];
                grad[b1o + i] += db[i];
            }
        }
        dx = d_xin;
    }

    // Positional embeddings, embed layer norm, token embeddings.
    let pos = w.offset("pos");
    for (ti, tok) in cache.tokens.iter().enumerate() {
        for i in 0..e {
            grad[pos + tok.step * e + i] += dx[ti * e + i];
        }
    }
    let g0 = w.offset("embed_ln.g");
    let b0 = w.offset("embed_ln.b");
    let mut d_emb = vec![0.0; t_count * e];
    {
        let g = p[g0..g0 + e].to_vec();
        let mut dg = vec![0.0; e];
        let mut db = vec![0.0; e];
        layer_norm_backward(&dx, &cache.ln0, &g, e, &mut d_emb, &mut dg, &mut db);
        for i in 0..e {
            grad[g0 + i] += dg[i];
            grad[b0 + i] += db[i];
        }
    }
    let sew = w.offset("state_embed.w");
    let seb = w.offset("state_embed.b");
    let aew = w.offset("action_embed.w");
    let aeb = w.offset("action_embed.b");
    for (ti, tok) in cache.tokens.iter().enumerate() {
        let d = &d_emb[ti * e..(ti + 1) * e];
        let step = &window.steps[tok.step];
        match tok.kind {
            TokenKind::State(slot) => {
                let x = &step.states[slot];
                for r in 0..e {
                    grad[seb + r] += d[r];
                    for c in 0..STATE_DIM {
                        grad[sew + r * STATE_DIM + c] += d[r] * x[c];
                    }
                }
            }
            TokenKind::Action => {
                let a = step.action.as_ref().unwrap();
                for r in 0..e {
                    grad[aeb + r] += d[r];
                    for c in 0..ns {
                        grad[aew + r * ns + c] += d[r] * a[c];
                    }
                }
            }
        }
    }
    grad
}

/// Mean masked MSE over a batch and its gradient. The per-window squared
/// errors are pooled over the batch (sum of SSE / sum of counts) with
/// compensated summation so the loss is independent of window order.
pub fn batch_loss_and_grad(w: &PolicyWeights, windows: &[Window]) -> (f64, Vec<f64>) {
    let mut total_count = 0usize;
    let mut runs = Vec::with_capacity(windows.len());
    for win in windows {
        let (preds, cache) = forward(w, win);
        let (sse, count) = window_loss(&preds, win);
        total_count += count;
        runs.push((preds, cache, sse));
    }
    assert!(total_count > 0, "no in-cluster action dimensions in batch");
    let inv = 1.0 / total_count as f64;
    // Kahan over per-window SSEs.
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (_, _, sse) in &runs {
        let y = sse - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    let loss = sum * inv;
    let mut grad = vec![0.0; w.params.len()];
    for (win, (preds, cache, _)) in windows.iter().zip(&runs) {
        let mut d_preds: Vec<Vec<f64>> = preds.iter().map(|p| vec![0.0; p.len()]).collect();
        for (t, s) in win.steps.iter().enumerate() {
            if let Some(target) = &s.action {
                for i in 0..s.cluster.len() {
                    if s.cluster[i] {
                        d_preds[t][i] = 2.0 * (preds[t][i] - target[i]) * inv;
                    }
                }
            }
        }
        let g = backward(w, win, cache, &d_preds);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(n: usize, lr: f64, grad_clip: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        let scale = if norm > self.grad_clip && norm > 0.0 {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
    }
}

/// Compares analytic gradients against central finite differences over
/// `samples` randomly chosen parameters; returns the maximum symmetric
/// relative error.
pub fn gradient_check(w: &PolicyWeights, window: &Window, samples: usize, h: f64, seed: u64) -> f64 {
    gradient_check_span(w, window, samples, h, seed, 0, w.params.len())
}

/// [`gradient_check`] restricted to a contiguous parameter range; used to
/// isolate the exact-gradient (loss-quadratic) regime of the linear head.
pub fn gradient_check_span(
    w: &PolicyWeights,
    window: &Window,
    samples: usize,
    h: f64,
    seed: u64,
    start: usize,
    len: usize,
) -> f64 {
    use rand::Rng;
    let (_, grad) = batch_loss_and_grad(w, core::slice::from_ref(window));
    let mut r = rng::stream(seed);
    let mut worst = 0.0f64;
    let mut wmut = w.clone();
    for _ in 0..samples {
        let i = start + r.gen_range(0..len);
        let orig = wmut.params[i];
        wmut.params[i] = orig + h;
        let (lp, _c1) = loss_only(&wmut, window);
        wmut.params[i] = orig - h;
        let (lm, _c2) = loss_only(&wmut, window);
        wmut.params[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        let ana = grad[i];
        let denom = libm::fabs(num).max(libm::fabs(ana)).max(1e-8);
        let rel = libm::fabs(num - ana) / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

fn loss_only(w: &PolicyWeights, window: &Window) -> (f64, usize) {
    let (preds, _) = forward(w, window);
    let (sse, count) = window_loss(&preds, window);
    (sse / count as f64, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
        }
    }

    fn random_window(layout: &TokenLayout, steps: usize, n_valid: usize, seed: u64) -> Window {
        let mut r = rng::stream(seed);
        let mut w = Window::default();
        for _ in 0..steps {
            let mut states = Vec::new();
            let mut slot_valid = Vec::new();
            let mut cluster = Vec::new();
            for i in 0..layout.n_slots {
                let valid = i < n_valid;
                let mut s = [0.0; STATE_DIM];
                if valid {
                    for v in &mut s {
                        *v = r.gen_range(-1.0..1.0);
                    }
                }
                states.push(s);
                slot_valid.push(valid);
                cluster.push(valid && r.gen_bool(0.8));
            }
            if !cluster.iter().any(|&c| c) {
                cluster[0] = true;
            }
            let action: Vec<f64> = (0..layout.n_slots)
                .map(|i| if i < n_valid { r.gen_range(-1.0..1.0) } else { 0.0 })
                .collect();
            w.steps.push(WindowStep {
                states,
                slot_valid,
                cluster,
                action: Some(action),
            });
        }
        w
    }

    #[test]
    fn causal_mask_blocks_future_influence() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 7);
        let w1 = random_window(&layout, 5, 4, 1);
        let mut w2 = w1.clone();
        // Perturb the action token of timestep 2.
        if let Some(a) = &mut w2.steps[2].action {
            a[1] += 0.731;
        }
        let (p1, _) = forward(&weights, &w1);
        let (p2, _) = forward(&weights, &w2);
        for t in 0..=2 {
            assert_eq!(p1[t], p2[t], "timestep {t} changed");
        }
        // Later timesteps do see the perturbed action.
        assert_ne!(p1[3], p2[3]);
    }

    #[test]
    fn padding_slot_is_invisible() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 7);
        let w1 = random_window(&layout, 4, 3, 2);
        let mut w2 = w1.clone();
        // Slot 3 is invalid; fill it with garbage.
        for s in &mut w2.steps {
            s.states[3] = [9.9; STATE_DIM];
        }
        let (p1, _) = forward(&weights, &w1);
        let (p2, _) = forward(&weights, &w2);
        assert_eq!(p1, p2);
    }

    /// Hand-checked tiny forward pass: embed_dim 2, one head, one layer
    /// bypassed (n_layers 0), a single timestep with one valid slot. With
    /// 2-dimensional layer norm the normalized vector is (±1, ∓1) up to the
    /// epsilon correction, which makes every stage checkable by hand.
    #[test]
    fn tiny_forward_matches_hand_computation() {
        let layout = TokenLayout {
            n_slots: 1,
            context_steps: 1,
        };
        let cfg = DecoderConfig {
            embed_dim: 2,
            n_layers: 0,
            n_heads: 1,
            mlp_ratio: 1,
            dropout: 0.0,
        };
        let mut w = PolicyWeights::init(cfg, layout, 0);
        for v in w.params.iter_mut() {
            *v = 0.0;
        }
        // state_embed.w row 0 = ones, row 1 = zeros → emb = (sum(s), 0).
        let sew = w.offset("state_embed.w");
        for c in 0..STATE_DIM {
            w.params[sew + c] = 1.0;
        }
        // Layer norms: unit gain, zero bias.
        for name in ["embed_ln.g", "final_ln.g"] {
            let o = w.offset(name);
            w.params[o] = 1.0;
            w.params[o + 1] = 1.0;
        }
        // Head: w = [[1, -1]], b = 0.25.
        let hw = w.offset("head.w");
        w.params[hw] = 1.0;
        w.params[hw + 1] = -1.0;
        let hb = w.offset("head.b");
        w.params[hb] = 0.25;

        let state = [0.5, 0.25, 0.25, 0.5, 0.0, 0.0, 0.25, 0.25]; // sum = 2.0
        let window = Window {
            steps: alloc::vec![WindowStep {
                states: alloc::vec![state],
                slot_valid: alloc::vec![true],
                cluster: alloc::vec![true],
                action: None,
            }],
        };
        // emb = (2, 0); ln: mean 1, var 1 → x0 = (a, -a) with
        // a = 1/sqrt(1+eps); pos = 0; final ln of (a, -a) has mean 0 and
        // var a², giving (a, -a)/sqrt(a²+eps); head → 2a/sqrt(a²+eps) + 0.25.
        let (preds, _) = forward(&w, &window);
        let a = 1.0 / libm::sqrt(1.0 + LN_EPS);
        let expect = 2.0 * a / libm::sqrt(a * a + LN_EPS) + 0.25;
        assert!(
            (preds[0][0] - expect).abs() < 1e-12,
            "got {} want {}",
            preds[0][0],
            expect
        );
    }

    #[test]
    fn gradient_check_full_one_layer() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 3);
        let window = random_window(&layout, 5, 4, 4);
        let err = gradient_check(&weights, &window, 200, 1e-4, 9);
        assert!(err < 1e-4, "max relative error {err}");
    }

    /// The loss is exactly quadratic in the head parameters, so central
    /// differences are exact there up to rounding.
    #[test]
    fn gradient_check_linear_head_is_near_exact() {
        let layout = TokenLayout::default();
        let cfg = DecoderConfig {
            n_layers: 0,
            ..small_cfg()
        };
        let weights = PolicyWeights::init(cfg, layout, 3);
        let window = random_window(&layout, 4, 4, 5);
        let start = weights.offset("head.w");
        let len = weights.params.len() - start;
        let err = gradient_check_span(&weights, &window, 200, 1e-4, 10, start, len);
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn finite_difference_error_grows_with_h() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 3);
        let window = random_window(&layout, 3, 4, 6);
        let e_small = gradient_check(&weights, &window, 100, 1e-4, 11);
        let e_large = gradient_check(&weights, &window, 100, 1e-2, 11);
        assert!(e_large > e_small, "{e_large} vs {e_small}");
    }

    #[test]
    fn out_of_cluster_module_contributes_no_loss() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 3);
        let mut w1 = random_window(&layout, 3, 4, 7);
        for s in &mut w1.steps {
            s.cluster[2] = false;
        }
        let mut w2 = w1.clone();
        for s in &mut w2.steps {
            if let Some(a) = &mut s.action {
                a[2] = 99.0; // wildly wrong target on the excluded module
            }
        }
        // The excluded dimension's target feeds the action token input too,
        // so compare losses with the *same* inputs but different targets by
        // scoring w1's predictions against both.
        let (preds, _) = forward(&weights, &w1);
        let (l1, c1) = window_loss(&preds, &w1);
        let (l2, c2) = window_loss(&preds, &w2);
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn batch_loss_invariant_to_window_order() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 3);
        let wins: Vec<Window> = (0..6).map(|i| random_window(&layout, 5, 4, 20 + i)).collect();
        let mut rev = wins.clone();
        rev.reverse();
        let (l1, _) = batch_loss_and_grad(&weights, &wins);
        let (l2, _) = batch_loss_and_grad(&weights, &rev);
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn adam_overfits_small_batch() {
        let layout = TokenLayout::default();
        let mut weights = PolicyWeights::init(small_cfg(), layout, 3);
        let wins: Vec<Window> = (0..4).map(|i| random_window(&layout, 5, 4, 40 + i)).collect();
        let mut opt = Adam::new(weights.params.len(), 3e-3, 1.0);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let (l, g) = batch_loss_and_grad(&weights, &wins);
            opt.step(&mut weights.params, &g);
            last = l;
        }
        assert!(last < 1e-2, "loss after overfit {last}");
    }

    #[test]
    fn deterministic_training_steps() {
        let layout = TokenLayout::default();
        let run = || {
            let mut w = PolicyWeights::init(small_cfg(), layout, 12);
            let wins: Vec<Window> = (0..3).map(|i| random_window(&layout, 5, 4, 60 + i)).collect();
            let mut opt = Adam::new(w.params.len(), 1e-3, 1.0);
            let mut losses = Vec::new();
            for _ in 0..20 {
                let (l, g) = batch_loss_and_grad(&w, &wins);
                opt.step(&mut w.params, &g);
                losses.push(l);
            }
            (w.params, losses)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn inference_window_without_final_action() {
        let layout = TokenLayout::default();
        let weights = PolicyWeights::init(small_cfg(), layout, 3);
        let mut w = random_window(&layout, 5, 3, 70);
        w.steps.last_mut().unwrap().action = None;
        let (preds, _) = forward(&weights, &w);
        assert_eq!(preds.len(), 5);
        assert!(preds.iter().all(|p| p.iter().all(|v| v.is_finite())));
    }
}

use serde::{Deserialize, Serialize};

use super::{gelu, Weights};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matvec_into, Mat};

/// Everything one layer computed for a sequence of `T` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `eˡ⁻¹`, `T × D`.
    pub input: Mat,
    pub(crate) queries: Mat,
    pub(crate) keys: Mat,
    /// `W_V eˡ⁻¹[s]` for every position, heads in column blocks.
    pub values: Mat,
    /// Per-head causal attention `Aˡʰ`, each `T × T`.
    pub attention: Vec<Mat>,
    /// Head outputs `Σ_s Aˡʰ[t,s] W_Vˡʰ eˡ⁻¹[s]`, heads in column blocks.
    pub(crate) heads_out: Mat,
    /// `ẽˡ`
    pub mid: Mat,
    pub(crate) pre_act: Mat,
    pub(crate) act: Mat,
    /// `mˡ = MLPˡ(ẽˡ)`
    pub mlp: Mat,
    /// `eˡ`
    pub output: Mat,
}

/// A full instrumented forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub tokens: Vec<u32>,
    /// `e⁰`
    pub embeddings: Mat,
    pub layers: Vec<LayerTrace>,
    /// Logits at every position, `T × V`.
    pub logits: Mat,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Logits at the last position.
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.len() - 1)
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `o = W_E ε`.
pub fn logits(embedding: &[f64], weights: &Weights) -> Vec<f64> {
    let cfg = &weights.config;
    let mut o = vec![0.0; cfg.vocab];
    matvec_into(&weights.params.unembed, cfg.vocab, cfg.width, embedding, &mut o);
    o
}

/// `X Wᵀ` for every row of `x`.
fn project(x: &Mat, w: &[f64], out_dim: usize) -> Mat {
    let mut out = Mat::zeros(x.rows, out_dim);
    for t in 0..x.rows {
        matvec_into(w, out_dim, x.cols, x.row(t), out.row_mut(t));
    }
    out
}

pub(crate) fn check_tokens(tokens: &[u32], weights: &Weights) -> Result<()> {
    let cfg = &weights.config;
    if tokens.is_empty() || tokens.len() > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} is out of vocabulary (size {})",
            cfg.vocab
        )));
    }
    Ok(())
}

/// Runs the model on `tokens`, keeping every intermediate.
pub fn forward_with_trace(tokens: &[u32], weights: &Weights) -> Result<Trace> {
    check_tokens(tokens, weights)?;
    let cfg = &weights.config;
    let p = &weights.params;
    let (t_len, d, dh, f) = (tokens.len(), cfg.width, cfg.head_dim(), cfg.ff_width);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(&p.tok_emb[tok as usize * d..(tok as usize + 1) * d]);
        axpy(1.0, &p.pos_emb[t * d..(t + 1) * d], row);
    }
    let embeddings = x.clone();

    let mut layers = Vec::with_capacity(cfg.layers);
    for lp in &p.layers {
        let queries = project(&x, &lp.wq, d);
        let keys = project(&x, &lp.wk, d);
        let values = project(&x, &lp.wv, d);

        let mut attention = Vec::with_capacity(cfg.heads);
        let mut heads_out = Mat::zeros(t_len, d);
        for h in 0..cfg.heads {
            let blk = h * dh..(h + 1) * dh;
            let mut a = Mat::zeros(t_len, t_len);
            for t in 0..t_len {
                let q = &queries.row(t)[blk.clone()];
                let scores: Vec<f64> = (0..=t).map(|s| dot(q, &keys.row(s)[blk.clone()]) * scale).collect();
                let probs = softmax(&scores);
                let out = &mut heads_out.row_mut(t)[blk.clone()];
                for (s, &pr) in probs.iter().enumerate() {
                    a.set(t, s, pr);
                    axpy(pr, &values.row(s)[blk.clone()], out);
                }
            }
            attention.push(a);
        }

        let mut mid = project(&heads_out, &lp.wo, d);
        for t in 0..t_len {
            axpy(1.0, x.row(t), mid.row_mut(t));
        }

        let mut pre_act = project(&mid, &lp.w1, f);
        for t in 0..t_len {
            axpy(1.0, &lp.b1, pre_act.row_mut(t));
        }
        let mut act = pre_act.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut mlp = project(&act, &lp.w2, d);
        for t in 0..t_len {
            axpy(1.0, &lp.b2, mlp.row_mut(t));
        }
        let mut output = mid.clone();
        for t in 0..t_len {
            axpy(1.0, mlp.row(t), output.row_mut(t));
        }

        layers.push(LayerTrace {
            input: x,
            queries,
            keys,
            values,
            attention,
            heads_out,
            mid,
            pre_act,
            act,
            mlp,
            output: output.clone(),
        });
        x = output;
    }

    let logits = project(&x, &p.unembed, cfg.vocab);
    Ok(Trace {
        tokens: tokens.to_vec(),
        embeddings,
        layers,
        logits,
    })
}

/// Components `a(t,s)`, `s = 0..=t`, of the post-attention state `ẽˡ[t]`:
/// `a(t,s) = 1{s=t} eˡ⁻¹[s] + Σ_h W_Oˡʰ Aˡʰ[t,s] W_Vˡʰ eˡ⁻¹[s]`.
///
/// `layer` and `t` are zero-based. Each component is projected through the
/// full `W_O` once.
pub fn attention_components(trace: &Trace, weights: &Weights, layer: usize, t: usize) -> Vec<Vec<f64>> {
    let cfg = &weights.config;
    let lt = &trace.layers[layer];
    let wo = &weights.params.layers[layer].wo;
    let (d, dh) = (cfg.width, cfg.head_dim());
    let mut scaled = vec![0.0; d];
    (0..=t)
        .map(|s| {
            let v = lt.values.row(s);
            for h in 0..cfg.heads {
                let a = lt.attention[h].get(t, s);
                for i in h * dh..(h + 1) * dh {
                    scaled[i] = a * v[i];
                }
            }
            let mut comp = vec![0.0; d];
            matvec_into(wo, d, d, &scaled, &mut comp);
            if s == t {
                axpy(1.0, lt.input.row(s), &mut comp);
            }
            comp
        })
        .collect()
}

/// Output of greedy decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    /// Softmax probability of each chosen token.
    pub probs: Vec<f64>,
    /// Trace of the forward pass that produced each token; empty unless requested.
    #[serde(skip)]
    pub traces: Vec<Trace>,
}

/// Greedy decoding for `steps` tokens. Every step reruns the full prefix, so
/// the trace of step `i` ends at the input position that produced token `i`.
pub fn greedy_decode(prompt: &[u32], steps: usize, weights: &Weights, keep_traces: bool) -> Result<Decoded> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must contain at least one token"));
    }
    if prompt.len() + steps.saturating_sub(1) > weights.config.max_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens plus {steps} steps exceeds max length {}",
            prompt.len(),
            weights.config.max_len
        )));
    }
    let mut seq = prompt.to_vec();
    let mut out = Decoded {
        tokens: Vec::with_capacity(steps),
        probs: Vec::with_capacity(steps),
        traces: Vec::new(),
    };
    for _ in 0..steps {
        let trace = forward_with_trace(&seq, weights)?;
        let probs = softmax(trace.last_logits());
        let next = argmax_lowest(&probs);
        out.tokens.push(next as u32);
        out.probs.push(probs[next]);
        seq.push(next as u32);
        if keep_traces {
            out.traces.push(trace);
        }
    }
    Ok(out)
}

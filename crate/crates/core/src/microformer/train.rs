//! Manual backpropagation and Adam training on prompt → answer pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_with_trace, softmax, LayerTrace, Trace};
use super::{gelu_grad, LayerParams, Params, Weights};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matvec_t_acc, outer_acc, Mat};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 32,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean batch loss, one entry per step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Input tokens and the positions whose next-token prediction is scored.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Example {
    pub input: Vec<u32>,
    /// `(position, target token)`
    pub targets: Vec<(usize, u32)>,
}

impl Example {
    pub fn from_pair(prompt: &[u32], answer: &[u32]) -> Result<Self> {
        if prompt.is_empty() || answer.is_empty() {
            return Err(Error::invalid("training pairs need a nonempty prompt and answer"));
        }
        let mut input = prompt.to_vec();
        input.extend_from_slice(&answer[..answer.len() - 1]);
        let targets = answer
            .iter()
            .enumerate()
            .map(|(i, &a)| (prompt.len() - 1 + i, a))
            .collect();
        Ok(Self { input, targets })
    }
}

/// Backward pass through one layer. `d_out` is the gradient w.r.t. `eˡ`;
/// returns the gradient w.r.t. `eˡ⁻¹`.
fn layer_backward(lt: &LayerTrace, lp: &LayerParams, g: &mut LayerParams, d_out: &Mat, heads: usize) -> Mat {
    let (t_len, d) = (d_out.rows, d_out.cols);
    let f = lt.pre_act.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP: out = mid + W2 gelu(W1 mid + b1) + b2
    let mut d_mid = d_out.clone();
    let mut d_pre = vec![0.0; f];
    for t in 0..t_len {
        let dm = d_out.row(t);
        outer_acc(dm, lt.act.row(t), &mut g.w2);
        axpy(1.0, dm, &mut g.b2);
        d_pre.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(&lp.w2, d, f, dm, &mut d_pre);
        for (dp, &pre) in d_pre.iter_mut().zip(lt.pre_act.row(t)) {
            *dp *= gelu_grad(pre);
        }
        outer_acc(&d_pre, lt.mid.row(t), &mut g.w1);
        axpy(1.0, &d_pre, &mut g.b1);
        matvec_t_acc(&lp.w1, f, d, &d_pre, d_mid.row_mut(t));
    }

    // attention: mid = x + Wo z
    let mut d_x = d_mid.clone();
    let mut d_z = Mat::zeros(t_len, d);
    for t in 0..t_len {
        outer_acc(d_mid.row(t), lt.heads_out.row(t), &mut g.wo);
        matvec_t_acc(&lp.wo, d, d, d_mid.row(t), d_z.row_mut(t));
    }
    let mut d_q = Mat::zeros(t_len, d);
    let mut d_k = Mat::zeros(t_len, d);
    let mut d_v = Mat::zeros(t_len, d);
    for h in 0..heads {
        let blk = h * dh..(h + 1) * dh;
        let a = &lt.attention[h];
        for t in 0..t_len {
            let dz = &d_z.row(t)[blk.clone()];
            let d_p: Vec<f64> = (0..=t).map(|s| dot(dz, &lt.values.row(s)[blk.clone()])).collect();
            let weighted: f64 = (0..=t).map(|s| a.get(t, s) * d_p[s]).sum();
            for s in 0..=t {
                let p = a.get(t, s);
                axpy(p, dz, &mut d_v.row_mut(s)[blk.clone()]);
                let ds = p * (d_p[s] - weighted) * scale;
                if ds != 0.0 {
                    let k = lt.keys.row(s)[blk.clone()].to_vec();
                    axpy(ds, &k, &mut d_q.row_mut(t)[blk.clone()]);
                    let q = lt.queries.row(t)[blk.clone()].to_vec();
                    axpy(ds, &q, &mut d_k.row_mut(s)[blk.clone()]);
                }
            }
        }
    }
    for t in 0..t_len {
        let x = lt.input.row(t);
        outer_acc(d_q.row(t), x, &mut g.wq);
        outer_acc(d_k.row(t), x, &mut g.wk);
        outer_acc(d_v.row(t), x, &mut g.wv);
        let dx = d_x.row_mut(t);
        matvec_t_acc(&lp.wq, d, d, d_q.row(t), dx);
        matvec_t_acc(&lp.wk, d, d, d_k.row(t), dx);
        matvec_t_acc(&lp.wv, d, d, d_v.row(t), dx);
    }
    d_x
}

/// Adds `weight · ∂CE/∂θ` for one example into `grads`; returns the summed loss.
fn example_backward(ex: &Example, weights: &Weights, grads: &mut Params, weight: f64) -> Result<f64> {
    let trace: Trace = forward_with_trace(&ex.input, weights)?;
    let cfg = &weights.config;
    let (d, v) = (cfg.width, cfg.vocab);
    let mut loss = 0.0;
    let last = trace.layers.last().expect("at least one layer");
    let mut d_e = Mat::zeros(ex.input.len(), d);
    for &(pos, target) in &ex.targets {
        let mut probs = softmax(trace.logits.row(pos));
        loss -= probs[target as usize].max(f64::MIN_POSITIVE).ln();
        probs[target as usize] -= 1.0;
        probs.iter_mut().for_each(|p| *p *= weight);
        outer_acc(&probs, last.output.row(pos), &mut grads.unembed);
        matvec_t_acc(&weights.params.unembed, v, d, &probs, d_e.row_mut(pos));
    }
    for l in (0..cfg.layers).rev() {
        d_e = layer_backward(
            &trace.layers[l],
            &weights.params.layers[l],
            &mut grads.layers[l],
            &d_e,
            cfg.heads,
        );
    }
    for (t, &tok) in ex.input.iter().enumerate() {
        let tok = tok as usize;
        axpy(1.0, d_e.row(t), &mut grads.tok_emb[tok * d..(tok + 1) * d]);
        axpy(1.0, d_e.row(t), &mut grads.pos_emb[t * d..(t + 1) * d]);
    }
    Ok(loss)
}

/// Mean cross-entropy over all answer tokens of `pairs` and its gradient.
pub fn loss_and_grad(weights: &Weights, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<(f64, Params)> {
    let examples: Vec<Example> = pairs
        .iter()
        .map(|(p, a)| Example::from_pair(p, a))
        .collect::<Result<_>>()?;
    batch_loss_and_grad(weights, &examples.iter().collect::<Vec<_>>())
}

fn batch_loss_and_grad(weights: &Weights, batch: &[&Example]) -> Result<(f64, Params)> {
    let count: usize = batch.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return Err(Error::invalid("batch has no target tokens"));
    }
    let w = 1.0 / count as f64;
    let mut grads = Params::zeros(&weights.config);
    let mut loss = 0.0;
    for ex in batch {
        loss += example_backward(ex, weights, &mut grads, w)?;
    }
    Ok((loss * w, grads))
}

/// Adam on mini-batches drawn by reshuffling the corpus every epoch.
pub fn train(pairs: &[(Vec<u32>, Vec<u32>)], init: Weights, cfg: &TrainConfig) -> Result<(Weights, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::insufficient("training corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("train.batch_size must be positive".into()));
    }
    let examples: Vec<Example> = pairs
        .iter()
        .map(|(p, a)| Example::from_pair(p, a))
        .collect::<Result<_>>()?;
    for ex in &examples {
        super::forward::check_tokens(&ex.input, &init)?;
    }
    let mut weights = init;
    let mut m = Params::zeros(&weights.config);
    let mut v = Params::zeros(&weights.config);
    let mut r = rng::stream(cfg.seed, "microformer-train");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_loss_and_grad(&weights, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training {
                step,
                loss,
                detail: format!(
                    "non-finite {} (lr {}, batch {})",
                    if loss.is_finite() { "gradient" } else { "loss" },
                    cfg.learning_rate,
                    cfg.batch_size
                ),
            });
        }
        losses.push(loss);

        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        let ws = weights.params.tensors_mut();
        let ms = m.tensors_mut();
        let vs = v.tensors_mut();
        for (((w, m), v), g) in ws.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                w[i] -= cfg.learning_rate * upd;
            }
        }
    }
    if !weights.params.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            loss: f64::NAN,
            detail: "weights became non-finite".into(),
        });
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        weights,
        TrainReport {
            steps: cfg.steps,
            losses,
            final_loss,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, max relative error, probes)` per tensor.
    pub per_tensor: Vec<(String, f64, usize)>,
}

/// Gradients below this magnitude are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central finite differences at
/// `probes_per_tensor` random coordinates of every tensor.
///
/// Relative error is `|a - n| / max(|a| + |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    weights: &Weights,
    pairs: &[(Vec<u32>, Vec<u32>)],
    probes_per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(weights, pairs)?;
    let names = Params::layout(&weights.config);
    let mut r = rng::stream(seed, "grad-check");
    let mut probe = weights.clone();
    let mut per_tensor = Vec::new();
    let mut max_rel = 0.0f64;
    let analytic = grads.tensors();
    for (ti, (name, _)) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut worst = 0.0f64;
        for _ in 0..probes_per_tensor {
            let i = r.gen_range(0..len);
            let orig = weights.params.tensors()[ti][i];
            probe.params.tensors_mut()[ti][i] = orig + step;
            let (lp, _) = loss_only(&probe, pairs)?;
            probe.params.tensors_mut()[ti][i] = orig - step;
            let (lm, _) = loss_only(&probe, pairs)?;
            probe.params.tensors_mut()[ti][i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_tensor.push((name.clone(), worst, probes_per_tensor));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_tensor,
    })
}

fn loss_only(weights: &Weights, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<(f64, usize)> {
    let mut loss = 0.0;
    let mut count = 0;
    for (p, a) in pairs {
        let ex = Example::from_pair(p, a)?;
        let trace = forward_with_trace(&ex.input, weights)?;
        for &(pos, target) in &ex.targets {
            let probs = softmax(trace.logits.row(pos));
            loss -= probs[target as usize].ln();
            count += 1;
        }
    }
    Ok((loss / count as f64, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microformer::{greedy_decode, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            width: 8,
            ff_width: 12,
            vocab: 12,
            max_len: 6,
            seed: 9,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = Weights::init(tiny()).unwrap();
        let pairs = vec![(vec![1, 2], vec![3, 4]), (vec![5, 6], vec![7, 8])];
        let rep = gradient_check(&w, &pairs, 20, 1e-5, 1).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.per_tensor);
    }

    #[test]
    fn memorizes_a_single_fact() {
        let w = Weights::init(tiny()).unwrap();
        let pairs = vec![(vec![2, 9], vec![5, 1])];
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 1,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (w, rep) = train(&pairs, w, &cfg).unwrap();
        assert!(rep.final_loss < rep.losses[0]);
        let dec = greedy_decode(&[2, 9], 2, &w, false).unwrap();
        assert_eq!(dec.tokens, vec![5, 1]);
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = vec![(vec![1, 2], vec![3]), (vec![4, 5], vec![6]), (vec![7, 8], vec![9])];
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            ..Default::default()
        };
        let (a, _) = train(&pairs, Weights::init(tiny()).unwrap(), &cfg).unwrap();
        let (b, _) = train(&pairs, Weights::init(tiny()).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let pairs = vec![(vec![1, 2], vec![3])];
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 1,
            learning_rate: 1e200,
            ..Default::default()
        };
        let err = train(&pairs, Weights::init(tiny()).unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = train(&[], Weights::init(tiny()).unwrap(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }
}

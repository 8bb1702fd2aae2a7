//! A small decoder-only transformer with every intermediate exposed.
//!
//! Each layer performs exactly
//!
//! ```text
//! ẽˡ = eˡ⁻¹ + Attnˡ(eˡ⁻¹)
//! eˡ = ẽˡ  + MLPˡ(ẽˡ)
//! ```
//!
//! with no normalization anywhere, so the per-source attention decomposition
//! reconstructs `ẽˡ[t]` exactly. Attention and its output projection carry no
//! biases for the same reason. Positions enter through learned embeddings
//! added to `e⁰`.

mod forward;
mod io;
mod task;
mod train;

pub use forward::{
    argmax_lowest, attention_components, forward_with_trace, greedy_decode, logits, softmax, Decoded, LayerTrace, Trace,
};
pub use io::{read_weights, sidecar_path, write_weights, TensorEntry, WeightsManifest, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use task::{exact_match, FactTable, FactTaskConfig, QueryExample};
pub use train::{gradient_check, loss_and_grad, train, GradCheckReport, TrainConfig, TrainReport};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 64,
            ff_width: 128,
            vocab: 64,
            max_len: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("ff_width", self.ff_width),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model.{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model.width ({}) must be divisible by model.heads ({})",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Length of one token's geometry feature vector, `8L - 4`.
    pub fn feature_dim(&self) -> usize {
        8 * self.layers - 4
    }
}

/// Parameters of one layer. Query/key/value matrices are `D×D` with the rows
/// of head `h` in block `h·D_H..(h+1)·D_H`; the output projection is `D×D`
/// with the columns of head `h` in the same block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    /// `D_ff × D`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `D × D_ff`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// All trainable tensors. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `V × D`
    pub tok_emb: Vec<f64>,
    /// `T_max × D`
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    /// Unembedding `W_E`, `V × D`.
    pub unembed: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.width, cfg.ff_width);
        Self {
            tok_emb: vec![0.0; cfg.vocab * d],
            pos_emb: vec![0.0; cfg.max_len * d],
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    wq: vec![0.0; d * d],
                    wk: vec![0.0; d * d],
                    wv: vec![0.0; d * d],
                    wo: vec![0.0; d * d],
                    w1: vec![0.0; f * d],
                    b1: vec![0.0; f],
                    w2: vec![0.0; d * f],
                    b2: vec![0.0; d],
                })
                .collect(),
            unembed: vec![0.0; cfg.vocab * d],
        }
    }

    /// Tensor names and shapes in serialization order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (cfg.width, cfg.ff_width);
        let mut out = vec![
            ("tok_emb".to_string(), vec![cfg.vocab, d]),
            ("pos_emb".to_string(), vec![cfg.max_len, d]),
        ];
        for l in 0..cfg.layers {
            for (name, shape) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("w1", vec![f, d]),
                ("b1", vec![f]),
                ("w2", vec![d, f]),
                ("b2", vec![d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("unembed".to_string(), vec![cfg.vocab, d]));
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.wq[..], &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            let LayerParams {
                wq,
                wk,
                wv,
                wo,
                w1,
                b1,
                w2,
                b2,
            } = l;
            out.extend([wq, wk, wv, wo, w1, b1, w2, b2]);
        }
        out.push(&mut self.unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Params) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::linalg::axpy(a, src, dst);
        }
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Rounds every entry through `f32`, matching what the weights file stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub params: Params,
}

impl Weights {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Params::zeros(&config),
            config,
        })
    }

    /// Seeded Gaussian initialization. Output projections of both blocks are
    /// scaled down by `1/√(2L)` to keep the residual stream bounded at init.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut r = rng::stream(config.seed, "microformer-init");
        let d = config.width as f64;
        let f = config.ff_width as f64;
        let depth = (2.0 * config.layers as f64).sqrt();
        let fill = |t: &mut [f64], std: f64, r: &mut rng::StreamRng| {
            let n = Normal::new(0.0, std).expect("positive std");
            t.iter_mut().for_each(|x| *x = n.sample(r));
        };
        let p = &mut w.params;
        fill(&mut p.tok_emb, 1.0 / d.sqrt() * 4.0, &mut r);
        fill(&mut p.pos_emb, 1.0 / d.sqrt(), &mut r);
        for l in &mut p.layers {
            fill(&mut l.wq, 1.0 / d.sqrt(), &mut r);
            fill(&mut l.wk, 1.0 / d.sqrt(), &mut r);
            fill(&mut l.wv, 1.0 / d.sqrt(), &mut r);
            fill(&mut l.wo, 1.0 / d.sqrt() / depth, &mut r);
            fill(&mut l.w1, 1.0 / d.sqrt(), &mut r);
            fill(&mut l.w2, 1.0 / f.sqrt() / depth, &mut r);
        }
        fill(&mut p.unembed, 1.0 / d.sqrt(), &mut r);
        Ok(w)
    }
}

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let th = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let zero = ModelConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        assert_eq!(ModelConfig::default().feature_dim(), 28);
    }

    #[test]
    fn layout_matches_tensors() {
        let cfg = ModelConfig {
            layers: 2,
            ..Default::default()
        };
        let w = Weights::init(cfg).unwrap();
        let layout = Params::layout(&cfg);
        let tensors = w.params.tensors();
        assert_eq!(layout.len(), tensors.len());
        for ((_, shape), t) in layout.iter().zip(&tensors) {
            assert_eq!(shape.iter().product::<usize>(), t.len());
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(Weights::init(cfg).unwrap(), Weights::init(cfg).unwrap());
        let other = ModelConfig { seed: 12, ..cfg };
        assert_ne!(Weights::init(cfg).unwrap(), Weights::init(other).unwrap());
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

//! Representation-geometry signals of the last input token.
//!
//! For a trace of `T` positions and `L` layers this module builds
//!
//! * the normalized-proximity contribution matrices `C_Attnˡ` and `C_MLPˡ`,
//! * the knowledge trajectory `Ω` (direct and attention-propagated MLP
//!   contributions),
//! * the rotation trajectory `Θ` (angles between consecutive states of the
//!   last token),
//! * the anisotropy trajectories `Φ_in`, `Φ_out` (angles to mean directions of
//!   reference populations),
//!
//! each of length `2L - 1` in `(dir¹, prop¹, …, dirᴸ)` order. Concatenated,
//! they form the `8L - 4` token feature vector.

mod lemmas;

pub use lemmas::{check_rotation_bound, check_scale_invariance, ranking, unembedding, RotationCheck};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm_inf, norm_l1, norm_l2, Mat};
use crate::microformer::{attention_components, Trace, Weights};

/// Angle in radians, `arccos` of the clamped cosine similarity.
///
/// Returns `(0, true)` when either vector is zero.
pub fn angle(u: &[f64], v: &[f64]) -> (f64, bool) {
    let nu = norm_l2(u);
    let nv = norm_l2(v);
    if nu == 0.0 || nv == 0.0 {
        return (0.0, true);
    }
    let c = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    (c.acos(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityWeights {
    pub weights: Vec<f64>,
    /// Every raw term was zero, so the weights fell back to uniform.
    pub degenerate: bool,
}

/// Normalized proximity of each part of `z = Σ parts`:
/// `max(0, ‖z‖₁ − ‖z − zᵢ‖₁) / Σⱼ max(0, ‖z‖₁ − ‖z − zⱼ‖₁)`.
pub fn normalized_proximity(z: &[f64], parts: &[Vec<f64>]) -> Result<ProximityWeights> {
    if parts.is_empty() {
        return Err(Error::invalid("proximity needs at least one part"));
    }
    let mut sum = vec![0.0; z.len()];
    for p in parts {
        if p.len() != z.len() {
            return Err(Error::invalid("proximity parts have mismatched dimension"));
        }
        axpy(1.0, p, &mut sum);
    }
    let resid: Vec<f64> = sum.iter().zip(z).map(|(a, b)| a - b).collect();
    let tol = 1e-4 * (1.0 + norm_inf(z));
    if norm_inf(&resid) > tol {
        return Err(Error::invalid(format!(
            "parts do not sum to the target (residual {:e} > {tol:e})",
            norm_inf(&resid)
        )));
    }
    let z_l1 = norm_l1(z);
    let mut diff = vec![0.0; z.len()];
    let raw: Vec<f64> = parts
        .iter()
        .map(|p| {
            for ((d, a), b) in diff.iter_mut().zip(z).zip(p) {
                *d = a - b;
            }
            (z_l1 - norm_l1(&diff)).max(0.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Ok(ProximityWeights {
            weights: raw.iter().map(|r| r / total).collect(),
            degenerate: false,
        })
    } else {
        Ok(ProximityWeights {
            weights: vec![1.0 / parts.len() as f64; parts.len()],
            degenerate: true,
        })
    }
}

/// Contribution matrices of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionMatrices {
    /// `C_Attn[t,s] = prox(ẽ[t], a(t,s))`; zero above the diagonal.
    pub attn: Mat,
    /// Diagonal of `C_MLP`: `prox(e[t], m[t])` within `e[t] = ẽ[t] + m[t]`.
    pub mlp_diag: Vec<f64>,
    /// Rows (attention) or positions (MLP) that fell back to uniform weights.
    pub degenerate_attn_rows: Vec<usize>,
    pub degenerate_mlp: Vec<usize>,
}

impl ContributionMatrices {
    pub fn len(&self) -> usize {
        self.mlp_diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mlp_diag.is_empty()
    }

    /// The full `T × T` diagonal MLP matrix.
    pub fn mlp_matrix(&self) -> Mat {
        let n = self.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in self.mlp_diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }
}

/// Builds `C_Attnˡ` and `C_MLPˡ` for zero-based `layer`.
///
/// Cost is `O(T² D²)`: every pair `(t, s)` projects its head-weighted value
/// through `W_O`.
pub fn contribution_matrices(trace: &Trace, weights: &Weights, layer: usize) -> Result<ContributionMatrices> {
    if layer >= trace.num_layers() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    let t_len = trace.len();
    let lt = &trace.layers[layer];
    let mut attn = Mat::zeros(t_len, t_len);
    let mut degenerate_attn_rows = Vec::new();
    for t in 0..t_len {
        let comps = attention_components(trace, weights, layer, t);
        let w = normalized_proximity(lt.mid.row(t), &comps)?;
        if w.degenerate {
            degenerate_attn_rows.push(t);
        }
        attn.row_mut(t)[..=t].copy_from_slice(&w.weights);
    }
    let mut mlp_diag = Vec::with_capacity(t_len);
    let mut degenerate_mlp = Vec::new();
    for t in 0..t_len {
        let parts = [lt.mid.row(t).to_vec(), lt.mlp.row(t).to_vec()];
        let w = normalized_proximity(lt.output.row(t), &parts)?;
        if w.degenerate {
            degenerate_mlp.push(t);
        }
        mlp_diag.push(w.weights[1]);
    }
    Ok(ContributionMatrices {
        attn,
        mlp_diag,
        degenerate_attn_rows,
        degenerate_mlp,
    })
}

/// `Ω = (ω_dir¹, ω_prop¹, …, ω_dirᴸ)` with `ω_dirˡ = C_MLPˡ[T,T]` and
/// `ω_propˡ = Σ_{s<T} C_MLPˡ[s,s] · C_Attnˡ⁺¹[T,s]`.
///
/// With a single position the propagated terms are empty sums, i.e. zero.
pub fn knowledge_trajectory(mats: &[ContributionMatrices]) -> Result<Vec<f64>> {
    let layers = mats.len();
    if layers == 0 {
        return Err(Error::invalid("knowledge trajectory needs at least one layer"));
    }
    let t_len = mats[0].len();
    if t_len == 0 || mats.iter().any(|m| m.len() != t_len) {
        return Err(Error::invalid("contribution matrices have inconsistent sizes"));
    }
    let last = t_len - 1;
    let mut omega = Vec::with_capacity(2 * layers - 1);
    for l in 0..layers {
        omega.push(mats[l].mlp_diag[last]);
        if l + 1 < layers {
            let next = mats[l + 1].attn.row(last);
            omega.push(dot(&mats[l].mlp_diag[..last], &next[..last]));
        }
    }
    Ok(omega)
}

/// Interleaves per-layer "dir" values with the `L - 1` "prop" values.
fn interleave(dir: &[f64], prop: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dir.len() + prop.len());
    for (l, &d) in dir.iter().enumerate() {
        out.push(d);
        if let Some(&p) = prop.get(l) {
            out.push(p);
        }
    }
    out
}

/// Angles with the number of degenerate (zero-vector) entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleTrajectory {
    pub angles: Vec<f64>,
    pub zero_vectors: usize,
}

/// `Θ`: `θ_dirˡ = ∠(ẽˡ[T], eˡ[T])`, `θ_propˡ = ∠(eˡ[T], ẽˡ⁺¹[T])`.
pub fn rotation_trajectory(trace: &Trace) -> AngleTrajectory {
    let last = trace.len() - 1;
    let layers = &trace.layers;
    let mut zero = 0;
    let mut measure = |u: &[f64], v: &[f64]| {
        let (a, degenerate) = angle(u, v);
        zero += usize::from(degenerate);
        a
    };
    let dir: Vec<f64> = layers
        .iter()
        .map(|lt| measure(lt.mid.row(last), lt.output.row(last)))
        .collect();
    let prop: Vec<f64> = layers
        .windows(2)
        .map(|w| measure(w[0].output.row(last), w[1].mid.row(last)))
        .collect();
    AngleTrajectory {
        angles: interleave(&dir, &prop),
        zero_vectors: zero,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    In,
    Out,
}

/// Which positions feed the mean directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanPositions {
    #[default]
    Last,
    All,
}

/// Mean post-attention (`η̃ˡ`) and post-MLP (`ηˡ`) states of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeans {
    pub post_attn: Vec<f64>,
    pub post_mlp: Vec<f64>,
}

/// Mean directions of the in-distribution (correct) and out-of-distribution
/// (incorrect) reference populations, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyMeans {
    pub inlier: Option<Vec<LayerMeans>>,
    pub outlier: Option<Vec<LayerMeans>>,
    /// Number of vectors averaged into each population.
    pub in_count: usize,
    pub out_count: usize,
    pub positions: MeanPositions,
}

impl AnisotropyMeans {
    pub fn population(&self, pop: Population) -> Result<&[LayerMeans]> {
        let (m, name) = match pop {
            Population::In => (&self.inlier, "in-distribution"),
            Population::Out => (&self.outlier, "out-of-distribution"),
        };
        m.as_deref()
            .ok_or_else(|| Error::insufficient(format!("{name} mean directions are undefined (empty population)")))
    }

    pub fn is_valid(&self) -> bool {
        self.inlier.is_some() && self.outlier.is_some()
    }
}

/// Streaming sums for [`AnisotropyMeans`].
#[derive(Debug, Clone)]
pub struct AnisotropyAccumulator {
    layers: usize,
    width: usize,
    positions: MeanPositions,
    sums: [Vec<LayerMeans>; 2],
    counts: [usize; 2],
}

impl AnisotropyAccumulator {
    pub fn new(layers: usize, width: usize, positions: MeanPositions) -> Self {
        let zero = || {
            (0..layers)
                .map(|_| LayerMeans {
                    post_attn: vec![0.0; width],
                    post_mlp: vec![0.0; width],
                })
                .collect::<Vec<_>>()
        };
        Self {
            layers,
            width,
            positions,
            sums: [zero(), zero()],
            counts: [0, 0],
        }
    }

    /// Adds one decode-step trace to the correct (`in`) or incorrect (`out`) population.
    pub fn add(&mut self, trace: &Trace, correct: bool) {
        let idx = usize::from(!correct);
        let range = match self.positions {
            MeanPositions::Last => trace.len() - 1..trace.len(),
            MeanPositions::All => 0..trace.len(),
        };
        for t in range.clone() {
            for (acc, lt) in self.sums[idx].iter_mut().zip(&trace.layers) {
                axpy(1.0, lt.mid.row(t), &mut acc.post_attn);
                axpy(1.0, lt.output.row(t), &mut acc.post_mlp);
            }
        }
        self.counts[idx] += range.len();
    }

    pub fn finish(self) -> AnisotropyMeans {
        let [s_in, s_out] = self.sums;
        let mean = |sums: Vec<LayerMeans>, n: usize| {
            (n > 0).then(|| {
                sums.into_iter()
                    .map(|mut m| {
                        m.post_attn.iter_mut().for_each(|x| *x /= n as f64);
                        m.post_mlp.iter_mut().for_each(|x| *x /= n as f64);
                        m
                    })
                    .collect()
            })
        };
        debug_assert!(s_in.len() == self.layers && s_in.iter().all(|m| m.post_attn.len() == self.width));
        AnisotropyMeans {
            inlier: mean(s_in, self.counts[0]),
            outlier: mean(s_out, self.counts[1]),
            in_count: self.counts[0],
            out_count: self.counts[1],
            positions: self.positions,
        }
    }
}

/// `Φ`: `φ_dirˡ = ∠(ηˡ, eˡ[T])`, `φ_propˡ = ∠(η̃ˡ⁺¹, ẽˡ⁺¹[T])`.
pub fn anisotropy_trajectory(trace: &Trace, means: &AnisotropyMeans, pop: Population) -> Result<AngleTrajectory> {
    let m = means.population(pop)?;
    if m.len() != trace.num_layers() {
        return Err(Error::invalid("mean directions and trace disagree on layer count"));
    }
    let last = trace.len() - 1;
    let mut zero = 0;
    let mut measure = |u: &[f64], v: &[f64]| {
        let (a, degenerate) = angle(u, v);
        zero += usize::from(degenerate);
        a
    };
    let dir: Vec<f64> = trace
        .layers
        .iter()
        .zip(m)
        .map(|(lt, lm)| measure(&lm.post_mlp, lt.output.row(last)))
        .collect();
    let prop: Vec<f64> = trace.layers[1..]
        .iter()
        .zip(&m[1..])
        .map(|(lt, lm)| measure(&lm.post_attn, lt.mid.row(last)))
        .collect();
    Ok(AngleTrajectory {
        angles: interleave(&dir, &prop),
        zero_vectors: zero,
    })
}

/// The four feature blocks, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignalGroup {
    Omega,
    Theta,
    PhiIn,
    PhiOut,
}

impl SignalGroup {
    pub const ALL: [SignalGroup; 4] = [
        SignalGroup::Omega,
        SignalGroup::Theta,
        SignalGroup::PhiIn,
        SignalGroup::PhiOut,
    ];

    /// Index range of this block inside an `8L - 4` feature vector.
    pub fn range(self, layers: usize) -> std::ops::Range<usize> {
        let k = 2 * layers - 1;
        let i = self as usize;
        i * k..(i + 1) * k
    }

    pub fn name(self) -> &'static str {
        match self {
            SignalGroup::Omega => "omega",
            SignalGroup::Theta => "theta",
            SignalGroup::PhiIn => "phi_in",
            SignalGroup::PhiOut => "phi_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "omega" | "ω" => Ok(SignalGroup::Omega),
            "theta" | "θ" => Ok(SignalGroup::Theta),
            "phi_in" | "phiin" | "φin" => Ok(SignalGroup::PhiIn),
            "phi_out" | "phiout" | "φout" => Ok(SignalGroup::PhiOut),
            other => Err(Error::invalid(format!("unknown signal group `{other}`"))),
        }
    }
}

/// Feature vector of one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryFeatures {
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi_in: Vec<f64>,
    pub phi_out: Vec<f64>,
    pub flags: Vec<String>,
}

impl GeometryFeatures {
    /// `Ω ‖ Θ ‖ Φ_in ‖ Φ_out`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.omega.len());
        v.extend_from_slice(&self.omega);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.phi_in);
        v.extend_from_slice(&self.phi_out);
        v
    }

    pub fn dim(&self) -> usize {
        self.omega.len() + self.theta.len() + self.phi_in.len() + self.phi_out.len()
    }
}

/// Features of the token predicted at the last position of `trace`.
pub fn token_features(trace: &Trace, weights: &Weights, means: &AnisotropyMeans) -> Result<GeometryFeatures> {
    let mut flags = Vec::new();
    let mats = (0..trace.num_layers())
        .map(|l| contribution_matrices(trace, weights, l))
        .collect::<Result<Vec<_>>>()?;
    for (l, m) in mats.iter().enumerate() {
        if !m.degenerate_attn_rows.is_empty() {
            flags.push(format!("degenerate_attn_proximity:l{}", l + 1));
        }
        if !m.degenerate_mlp.is_empty() {
            flags.push(format!("degenerate_mlp_proximity:l{}", l + 1));
        }
    }
    if trace.len() == 1 {
        flags.push("single_position_prop_zero".into());
    }
    let omega = knowledge_trajectory(&mats)?;
    let theta = rotation_trajectory(trace);
    let phi_in = anisotropy_trajectory(trace, means, Population::In)?;
    let phi_out = anisotropy_trajectory(trace, means, Population::Out)?;
    for (name, t) in [("theta", &theta), ("phi_in", &phi_in), ("phi_out", &phi_out)] {
        if t.zero_vectors > 0 {
            flags.push(format!("zero_vector_angle:{name}"));
        }
    }
    Ok(GeometryFeatures {
        omega,
        theta: theta.angles,
        phi_in: phi_in.angles,
        phi_out: phi_out.angles,
        flags,
    })
}

/// Layer-average of `Ω ⊙ Θ` (knowledge interaction strength).
pub fn knowledge_interaction(f: &GeometryFeatures) -> f64 {
    let n = f.omega.len() as f64;
    f.omega.iter().zip(&f.theta).map(|(o, t)| o * t).sum::<f64>() / n
}

/// Layer-average of `Φ_in − Φ_out` (relative angular distance).
pub fn relative_angular_distance(f: &GeometryFeatures) -> f64 {
    let n = f.phi_in.len() as f64;
    f.phi_in.iter().zip(&f.phi_out).map(|(a, b)| a - b).sum::<f64>() / n
}

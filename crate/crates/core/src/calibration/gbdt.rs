//! Deterministic gradient-boosted regression trees with logistic loss.
//!
//! Splits use the second-order gain
//! `½ [G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)]` and leaves the Newton value
//! `−G/(H+λ)`, scaled by the shrinkage. Candidate thresholds are midpoints
//! between consecutive distinct values; among equal gains the lowest feature
//! index wins, then the lowest threshold.

use serde::{Deserialize, Serialize};

use super::{check_rows, log_loss, logit, sigmoid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 50,
            max_depth: 2,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1e-3,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_depth > 8 {
            return Err(Error::InvalidConfig("calibrator.max_depth must lie in 1..=8".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig(
                "calibrator.learning_rate must lie in (0, 1]".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::InvalidConfig(
                "calibrator.lambda and min_child_weight must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A node of a flattened tree. Leaves have `feature == None`; internal nodes
/// send `x[feature] < threshold` to `left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// `nodes[0]` is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            match n.feature {
                None => return n.value,
                Some(f) => i = if x[f] < n.threshold { n.left } else { n.right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            match n.feature {
                None => 0,
                Some(_) => 1 + go(t, n.left).max(go(t, n.right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub n_features: usize,
    pub params: GbdtParams,
    /// Logit of the training base rate.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Training log-loss after each round, starting with the base score.
    pub train_loss: Vec<f64>,
}

impl GbdtModel {
    pub fn predict_logit(&self, x: &[f64]) -> f64 {
        self.trees.iter().fold(self.base_score, |acc, t| acc + t.predict(x))
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

fn best_split(x: &[Vec<f64>], g: &[f64], h: &[f64], idx: &[usize], p: &GbdtParams) -> Option<Split> {
    let (gt, ht): (f64, f64) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
    let parent = score(gt, ht, p.lambda);
    let mut best: Option<Split> = None;
    let mut order = idx.to_vec();
    for f in 0..x[0].len() {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..order.len() - 1 {
            let i = order[k];
            gl += g[i];
            hl += h[i];
            let (v, next) = (x[i][f], x[order[k + 1]][f]);
            if v == next {
                continue;
            }
            let (gr, hr) = (gt - gl, ht - hl);
            if hl < p.min_child_weight || hr < p.min_child_weight {
                continue;
            }
            let gain = 0.5 * (score(gl, hl, p.lambda) + score(gr, hr, p.lambda) - parent);
            if gain > 0.0 && best.as_ref().map_or(true, |b| gain > b.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: v + (next - v) / 2.0,
                    gain,
                });
            }
        }
    }
    best
}

fn grow(
    x: &[Vec<f64>],
    g: &[f64],
    h: &[f64],
    idx: Vec<usize>,
    depth: usize,
    p: &GbdtParams,
    nodes: &mut Vec<Node>,
) -> usize {
    let me = nodes.len();
    let (gs, hs): (f64, f64) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
    nodes.push(Node {
        feature: None,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: -p.learning_rate * gs / (hs + p.lambda),
    });
    if depth == p.max_depth || idx.len() < 2 {
        return me;
    }
    if let Some(s) = best_split(x, g, h, &idx, p) {
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][s.feature] < s.threshold);
        let left = grow(x, g, h, l, depth + 1, p, nodes);
        let right = grow(x, g, h, r, depth + 1, p, nodes);
        let n = &mut nodes[me];
        n.feature = Some(s.feature);
        n.threshold = s.threshold;
        n.left = left;
        n.right = right;
        n.value = 0.0;
    }
    me
}

/// Fits the ensemble to binary `labels` (1 = positive).
pub fn fit_gbdt(x: &[Vec<f64>], labels: &[u8], params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    let n_features = check_rows(x, labels)?;
    let n = x.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let base_score = logit(pos / n);
    let mut margin = vec![base_score; x.len()];
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let mut train_loss = vec![log_loss(&margin, &y)];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut g = vec![0.0; x.len()];
    let mut h = vec![0.0; x.len()];
    for _ in 0..params.rounds {
        for i in 0..x.len() {
            let p = sigmoid(margin[i]);
            g[i] = p - y[i];
            h[i] = p * (1.0 - p);
        }
        let mut nodes = Vec::new();
        grow(x, &g, &h, (0..x.len()).collect(), 0, params, &mut nodes);
        let tree = Tree { nodes };
        for (m, xi) in margin.iter_mut().zip(x) {
            *m += tree.predict(xi);
        }
        train_loss.push(log_loss(&margin, &y));
        trees.push(tree);
    }
    Ok(GbdtModel {
        n_features,
        params: *params,
        base_score,
        trees,
        train_loss,
    })
}

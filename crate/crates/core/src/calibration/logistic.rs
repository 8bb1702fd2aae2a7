//! L2-penalized logistic regression fitted by iteratively reweighted least
//! squares on standardized inputs.

use serde::{Deserialize, Serialize};

use super::{check_rows, log_loss, logit};
use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticParams {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub n_features: usize,
    pub params: LogisticParams,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub train_loss: f64,
}

impl LogisticModel {
    pub fn predict_logit(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        self.intercept + dot(&z, &self.coef)
    }
}

pub fn fit_logistic(x: &[Vec<f64>], labels: &[u8], params: &LogisticParams) -> Result<LogisticModel> {
    if !(params.l2 > 0.0) {
        return Err(Error::InvalidConfig("calibrator.l2 must be positive".into()));
    }
    let d = check_rows(x, labels)?;
    let n = x.len();
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for row in x {
        for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });

    // design rows with a leading intercept column
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            std::iter::once(1.0)
                .chain(row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s))
                .collect()
        })
        .collect();
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let pos = y.iter().sum::<f64>() / n as f64;
    let mut beta = vec![0.0; d + 1];
    beta[0] = logit(pos);
    let mut iterations = 0;
    for it in 1..=params.max_iter {
        iterations = it;
        let mut hess = Mat::zeros(d + 1, d + 1);
        let mut grad = vec![0.0; d + 1];
        for (zi, yi) in z.iter().zip(&y) {
            let p = super::sigmoid(dot(zi, &beta));
            let w = (p * (1.0 - p)).max(1e-12);
            for a in 0..=d {
                grad[a] += (p - yi) * zi[a];
                for b in 0..=a {
                    let v = hess.get(a, b) + w * zi[a] * zi[b];
                    hess.set(a, b, v);
                }
            }
        }
        for a in 0..=d {
            for b in 0..a {
                hess.set(b, a, hess.get(a, b));
            }
            if a > 0 {
                grad[a] += params.l2 * beta[a];
                hess.set(a, a, hess.get(a, a) + params.l2);
            }
        }
        let step = Cholesky::factor(&hess)?.solve(&grad);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b -= s;
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::numerical("logistic regression diverged"));
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) <= params.tol {
            break;
        }
    }
    let margins: Vec<f64> = z.iter().map(|zi| dot(zi, &beta)).collect();
    Ok(LogisticModel {
        n_features: d,
        params: *params,
        mean,
        scale,
        intercept: beta[0],
        coef: beta[1..].to_vec(),
        iterations,
        train_loss: log_loss(&margins, &y),
    })
}

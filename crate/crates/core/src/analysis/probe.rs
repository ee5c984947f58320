//! L2-regularized logistic regression on frozen features.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::params::{constant, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::metrics::{evaluate_scores, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Penalty `lambda / 2 * |w|^2` added to the mean log-loss.
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-2,
            lr: 0.5,
            iterations: 1000,
        }
    }
}

/// A fitted two-class logistic model over standardized features.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: f64,
}

fn standardized(rows: &[&[f64]], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    rows.iter()
        .flat_map(|r| r.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s))
        .collect()
}

impl LogisticProbe {
    /// Full-batch gradient descent from zero weights.
    pub fn fit(rows: &[&[f64]], labels: &[u8], cfg: &ProbeConfig) -> Result<Self> {
        let n = rows.len();
        if n == 0 || labels.len() != n {
            return Err(Error::invalid(
                "linear_probe",
                format!("{n} feature rows for {} labels", labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid("linear_probe", format!("label {l} is not binary")));
        }
        let p = rows[0].len();
        if p == 0 || rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("linear_probe", "feature rows must share a nonzero width"));
        }
        if rows.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "probe features".into(),
            });
        }
        let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let sd: Vec<f64> = (0..p)
            .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
            .collect();
        if sd.iter().all(|&s| s == 0.0) {
            return Err(Error::invalid("linear_probe", "every feature has zero variance"));
        }
        let scale: Vec<f64> = sd.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
        let x = Tensor::new([n, p], standardized(rows, &mean, &scale))?;
        let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();

        // Two logits per row with the class-0 logit pinned at zero: plain
        // logistic regression.
        let mut store = ParamStore::<f64>::new();
        let w: ParamId = store.add("w", constant(&[p, 1], 0.0))?;
        let b: ParamId = store.add("b", constant(&[1], 0.0))?;
        let zero = Tensor::zeros(vec![n, 1]);
        for _ in 0..cfg.iterations {
            let grads = {
                let mut tape = Tape::new(&store);
                let xv = tape.constant(x.clone());
                let wv = tape.param(w);
                let bv = tape.param(b);
                let z = tape.matmul(xv, wv)?;
                let z = tape.add_bias(z, bv)?;
                let z0 = tape.constant(zero.clone());
                let logits = tape.concat(&[z0, z])?;
                let logits = tape.transpose(logits)?;
                let logits = tape.reshape(logits, &[2, n])?;
                let logits = tape.transpose(logits)?;
                let ce = tape.cross_entropy(logits, &y)?;
                let sq = tape.mul(wv, wv)?;
                let sq = tape.sum(sq);
                let reg = tape.scale(sq, cfg.l2 / 2.0);
                let loss = tape.add(ce, reg)?;
                let g = tape.backward(loss)?;
                tape.param_grads(&g)?
            };
            for id in [w, b] {
                let g = grads.get(id).to_vec();
                for (v, g) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                    *v -= cfg.lr * g;
                }
            }
        }
        Ok(LogisticProbe {
            mean,
            scale,
            weight: store.get(w).data().to_vec(),
            bias: store.get(b).data()[0],
        })
    }

    /// Probability of class 1 per row.
    pub fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<f64>> {
        if rows.iter().any(|r| r.len() != self.weight.len()) {
            return Err(Error::invalid("linear_probe", "feature width differs from training"));
        }
        Ok(rows
            .iter()
            .map(|r| {
                let z: f64 = r
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .zip(&self.weight)
                    .map(|(((v, m), s), w)| (v - m) / s * w)
                    .sum::<f64>()
                    + self.bias;
                1.0 / (1.0 + (-z).exp())
            })
            .collect())
    }
}

/// Fits on the training set and reports metrics on the test set.
pub fn linear_probe(
    train: &[&[f64]],
    train_labels: &[u8],
    test: &[&[f64]],
    test_labels: &[u8],
    cfg: &ProbeConfig,
) -> Result<MetricsReport> {
    let model = LogisticProbe::fit(train, train_labels, cfg)?;
    evaluate_scores(&model.predict_proba(test)?, test_labels)
}

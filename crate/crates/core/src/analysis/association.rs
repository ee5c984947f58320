//! Repeated cross-validated PLSR between layer features and behavior scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::synth::{kfold_split, Phantom};
use rand::Rng as _;

use super::plsr::plsr_regress;
use super::stats::{age_decorrelate_features, correlation_p_value_greater, fdr_bh, mean, pearson_r, std_dev};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    /// Behavior scores to analyse; empty means all of them.
    pub metrics: Vec<String>,
    pub repetitions: usize,
    pub folds: usize,
    pub components: usize,
    /// False discovery rate across the whole (layer, metric) table.
    pub q: f64,
    /// Family-wise level of the age-feature screen.
    pub age_alpha: f64,
    /// Report r of pooled out-of-fold predictions per repetition instead of
    /// per-fold r.
    pub pooled: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            metrics: Vec::new(),
            repetitions: 20,
            folds: 10,
            components: 5,
            q: 0.05,
            age_alpha: 0.05,
            pooled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub layer: usize,
    pub metric: String,
    pub mean_r: f64,
    pub std_r: f64,
    /// Median over repetitions of the one-sided p-value of the pooled
    /// out-of-fold correlation.
    pub p: f64,
    pub fdr_significant: bool,
}

impl AssociationRow {
    pub const CSV_HEADER: &'static str = "layer,metric,mean_r,std_r,p,fdr_significant";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.layer, self.metric, self.mean_r, self.std_r, format_p(self.p), self.fdr_significant
        )
    }
}

/// Plain decimal for ordinary p-values, exponent form for tiny ones.
fn format_p(p: f64) -> String {
    if p != 0.0 && p < 1e-4 {
        format!("{p:e}")
    } else {
        p.to_string()
    }
}

/// Picks the configured behavior columns from the phantoms; a name absent
/// from `names` is an error.
pub fn behavior_columns(
    phantoms: &[Phantom],
    names: &[String],
    wanted: &[String],
) -> Result<Vec<(String, Vec<f64>)>> {
    let wanted: Vec<&String> = if wanted.is_empty() { names.iter().collect() } else { wanted.iter().collect() };
    wanted
        .into_iter()
        .map(|w| {
            let j = names.iter().position(|n| n == w).ok_or_else(|| Error::Config {
                path: "association.metrics".into(),
                msg: format!("metric `{w}` is not in the dataset (has {names:?})"),
            })?;
            let col = phantoms
                .iter()
                .map(|p| {
                    p.behavior.get(j).copied().ok_or_else(|| {
                        Error::invalid("behavior_columns", format!("phantom {} lacks score `{w}`", p.seed))
                    })
                })
                .collect::<Result<_>>()?;
            Ok((w.clone(), col))
        })
        .collect()
}

/// Correlation that treats a constant prediction as no association.
fn r_or_zero(a: &[f64], b: &[f64]) -> Result<f64> {
    match pearson_r(a, b) {
        Ok((r, _)) => Ok(r),
        Err(Error::Undefined(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

struct Repetition {
    fold_r: Vec<f64>,
    pooled_r: f64,
}

fn one_repetition(
    features: &[Vec<f64>],
    target: &[f64],
    ages: Option<&[f64]>,
    cfg: &AssociationConfig,
    fold_seed: u64,
) -> Result<Repetition> {
    let n = features.len();
    let folds = kfold_split(n, cfg.folds, fold_seed)?;
    let mut pooled = vec![0.0; n];
    let mut fold_r = Vec::with_capacity(folds.len());
    let mut in_test = vec![false; n];
    for test in &folds {
        in_test.iter_mut().for_each(|f| *f = false);
        for &i in test {
            in_test[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
        let y_train: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        let keep: Vec<usize> = match ages {
            Some(ages) => {
                let cols: Vec<Vec<f64>> = (0..features[0].len())
                    .map(|j| train.iter().map(|&i| features[i][j]).collect())
                    .collect();
                let a: Vec<f64> = train.iter().map(|&i| ages[i]).collect();
                age_decorrelate_features(&cols, &a, cfg.age_alpha)?
            }
            None => (0..features[0].len()).collect(),
        };
        let preds = if keep.is_empty() {
            vec![mean(&y_train); test.len()]
        } else {
            let select = |i: usize| keep.iter().map(|&j| features[i][j]).collect::<Vec<f64>>();
            let xtr: Vec<Vec<f64>> = train.iter().map(|&i| select(i)).collect();
            let xte: Vec<Vec<f64>> = test.iter().map(|&i| select(i)).collect();
            let xtr: Vec<&[f64]> = xtr.iter().map(|r| &r[..]).collect();
            let xte: Vec<&[f64]> = xte.iter().map(|r| &r[..]).collect();
            plsr_regress(&xtr, &y_train, &xte, cfg.components)?
        };
        let y_test: Vec<f64> = test.iter().map(|&i| target[i]).collect();
        fold_r.push(r_or_zero(&preds, &y_test)?);
        for (&i, &p) in test.iter().zip(&preds) {
            pooled[i] = p;
        }
    }
    Ok(Repetition {
        fold_r,
        pooled_r: r_or_zero(&pooled, target)?,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Runs the association table.
///
/// `features[layer][sample]` are per-sample feature vectors, `metrics` the
/// behavior scores by name. With `ages`, features significantly correlated
/// with age in each training fold are dropped first. Fold assignments for
/// repetition `r` come from a seed drawn from `seed`, identical across
/// layers and metrics.
pub fn run_association(
    features: &[Vec<Vec<f64>>],
    metrics: &[(String, Vec<f64>)],
    ages: Option<&[f64]>,
    cfg: &AssociationConfig,
    seed: u64,
) -> Result<Vec<AssociationRow>> {
    if cfg.repetitions == 0 || cfg.folds < 2 || cfg.components == 0 {
        return Err(Error::invalid(
            "run_association",
            "need repetitions >= 1, folds >= 2 and components >= 1",
        ));
    }
    let n = features.first().map_or(0, |l| l.len());
    if n < 3 * cfg.folds {
        return Err(Error::invalid(
            "run_association",
            format!("{n} samples cannot fill {} folds of at least 3", cfg.folds),
        ));
    }
    for layer in features {
        if layer.len() != n || layer.iter().any(|r| r.len() != layer[0].len() || r.is_empty()) {
            return Err(Error::invalid("run_association", "feature table is ragged"));
        }
    }
    for (name, v) in metrics {
        if v.len() != n {
            return Err(Error::invalid(
                "run_association",
                format!("metric `{name}` has {} values for {n} samples", v.len()),
            ));
        }
    }
    if ages.is_some_and(|a| a.len() != n) {
        return Err(Error::invalid("run_association", "ages do not match the sample count"));
    }
    let mut seeder = stream(seed, 50);
    let fold_seeds: Vec<u64> = (0..cfg.repetitions).map(|_| seeder.random()).collect();

    let jobs: Vec<(usize, usize, usize)> = (0..features.len())
        .flat_map(|l| (0..metrics.len()).flat_map(move |m| (0..cfg.repetitions).map(move |r| (l, m, r))))
        .collect();
    let reps: Vec<Repetition> = jobs
        .par_iter()
        .map(|&(l, m, r)| one_repetition(&features[l], &metrics[m].1, ages, cfg, fold_seeds[r]))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(features.len() * metrics.len());
    for (cell, chunk) in reps.chunks(cfg.repetitions).enumerate() {
        let (layer, metric) = (cell / metrics.len(), cell % metrics.len());
        let rs: Vec<f64> = if cfg.pooled {
            chunk.iter().map(|r| r.pooled_r).collect()
        } else {
            chunk.iter().flat_map(|r| r.fold_r.iter().copied()).collect()
        };
        // Twice the median of dependent p-values is itself a valid p-value;
        // the bare median is not.
        let p = (2.0 * median(chunk.iter().map(|r| correlation_p_value_greater(r.pooled_r, n)).collect())).min(1.0);
        rows.push(AssociationRow {
            layer,
            metric: metrics[metric].0.clone(),
            mean_r: mean(&rs),
            std_r: std_dev(&rs),
            p,
            fdr_significant: false,
        });
    }
    let ps: Vec<f64> = rows.iter().map(|r| r.p).collect();
    for (row, sig) in rows.iter_mut().zip(fdr_bh(&ps, cfg.q)) {
        row.fdr_significant = sig;
    }
    Ok(rows)
}

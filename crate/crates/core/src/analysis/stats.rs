//! Correlation and multiple-testing helpers.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson correlation and its two-sided p-value from Student's t with
/// `n - 2` degrees of freedom.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::invalid(
            "pearson_r",
            format!("lengths differ ({} vs {})", a.len(), b.len()),
        ));
    }
    if a.len() < 3 {
        return Err(Error::invalid("pearson_r", "need at least 3 observations"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "pearson_r input".into(),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a constant vector"));
    }
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    Ok((r, correlation_p_value(r, a.len())))
}

/// Two-sided p-value of correlation `r` over `n` pairs.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// One-sided p-value for `r > 0`.
pub fn correlation_p_value_greater(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    if r >= 1.0 {
        return 0.0;
    }
    if r <= -1.0 {
        return 1.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").sf(t)
}

/// Benjamini-Hochberg step-up: rejects the `m*` smallest p-values, where
/// `m*` is the largest rank `i` with `p_(i) <= i q / m`.
pub fn fdr_bh(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let cutoff = (1..=m)
        .rev()
        .find(|&i| p_values[idx[i - 1]] <= i as f64 * q / m as f64)
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &idx[..cutoff] {
        reject[i] = true;
    }
    reject
}

/// Indices of features whose correlation with `ages` does not survive a
/// Bonferroni threshold of `alpha / features`. `features` is one vector per
/// feature across subjects. Constant features are kept.
pub fn age_decorrelate_features(features: &[Vec<f64>], ages: &[f64], alpha: f64) -> Result<Vec<usize>> {
    let threshold = alpha / features.len().max(1) as f64;
    let mut keep = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        match pearson_r(f, ages) {
            Ok((_, p)) if p < threshold => {}
            Ok(_) | Err(Error::Undefined(_)) => keep.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson_r(&x, &x).unwrap().0 - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap().0 + 1.0).abs() < 1e-15);
        // Centered sums: sxy = 3, sxx = 2, syy = 14/3.
        let (r, _) = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        let expected = 3.0 / (2f64.sqrt() * (14.0f64 / 3.0).sqrt());
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.9820).abs() < 1e-4);
        assert!(matches!(pearson_r(&[1.0; 3], &x[..3]), Err(Error::Undefined(_))));
        assert!(pearson_r(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn p_value_matches_table() {
        // r = 0.5, n = 12: t = 0.5 * sqrt(10 / 0.75) = 1.8257, two-sided p = 0.0978.
        let p = correlation_p_value(0.5, 12);
        assert!((p - 0.0978).abs() < 5e-4, "{p}");
        assert!((correlation_p_value_greater(0.5, 12) - p / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(fdr_bh(&[0.01, 0.02, 0.03, 0.04], 0.05), vec![true; 4]);
        assert_eq!(fdr_bh(&[1.0; 5], 0.05), vec![false; 5]);
        assert_eq!(fdr_bh(&[0.04, 0.001, 0.9], 0.05), vec![false, true, false]);
        assert!(fdr_bh(&[], 0.05).is_empty());
    }

    #[test]
    fn decorrelation_removes_age() {
        let ages: Vec<f64> = (0..20).map(|i| 20.0 + 3.0 * i as f64).collect();
        let alt: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let keep = age_decorrelate_features(&[ages.clone(), alt, vec![2.0; 20]], &ages, 0.05).unwrap();
        assert_eq!(keep, vec![1, 2]);
    }
}

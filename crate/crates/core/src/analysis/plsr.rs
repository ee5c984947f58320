//! Partial least squares regression by NIPALS.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const NIPALS_TOL: f64 = 1e-10;
pub const NIPALS_MAX_ITER: usize = 500;

#[derive(Clone, Debug)]
pub struct PlsrModel {
    /// Components actually extracted; fewer than requested when X runs out
    /// of rank.
    pub components: usize,
    pub x_mean: DVector<f64>,
    /// Column standard deviations, with 1 substituted for constant columns.
    pub x_scale: DVector<f64>,
    pub y_mean: DVector<f64>,
    pub y_scale: DVector<f64>,
    /// X weights, `[features, components]`.
    pub weights: DMatrix<f64>,
    /// X loadings, `[features, components]`.
    pub loadings: DMatrix<f64>,
    /// Y loadings, `[targets, components]`.
    pub y_loadings: DMatrix<f64>,
    /// Coefficients on standardized X for standardized Y, `[features, targets]`.
    pub coef: DMatrix<f64>,
}

fn column_stats(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let sd = DVector::from_iterator(
        m.ncols(),
        m.column_iter()
            .zip(mean.iter())
            .map(|(c, mu)| (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt()),
    );
    (mean, sd)
}

fn standardize(m: &DMatrix<f64>, mean: &DVector<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c.add_scalar_mut(-mean[j]);
        c /= scale[j];
    }
    out
}

impl PlsrModel {
    /// Fits `components` latent directions of `x` (`[n, p]`) against `y`
    /// (`[n, m]`), both standardized with training statistics.
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, components: usize) -> Result<Self> {
        let n = x.nrows();
        if components == 0 {
            return Err(Error::invalid("plsr", "need at least one component"));
        }
        if n < 2 || y.nrows() != n || y.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::invalid(
                "plsr",
                format!("X is {}x{}, y is {}x{}", n, x.ncols(), y.nrows(), y.ncols()),
            ));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "plsr input".into() });
        }
        let (x_mean, x_sd) = column_stats(x);
        let x_scale = x_sd.map(|s| if s > 0.0 { s } else { 1.0 });
        let (y_mean, y_scale) = column_stats(y);
        if y_scale.iter().any(|&s| s == 0.0) {
            return Err(Error::invalid("plsr", "response has zero variance"));
        }
        let mut xr = standardize(x, &x_mean, &x_scale);
        let mut yr = standardize(y, &y_mean, &y_scale);
        let x_norm0 = xr.norm();

        let (p, m) = (x.ncols(), y.ncols());
        let mut ws: Vec<DVector<f64>> = Vec::new();
        let mut ps: Vec<DVector<f64>> = Vec::new();
        let mut qs: Vec<DVector<f64>> = Vec::new();
        for _ in 0..components.min(p).min(n - 1) {
            if xr.norm() <= 1e-10 * x_norm0.max(1e-300) {
                break;
            }
            let start = (0..m)
                .max_by(|&a, &b| yr.column(a).norm_squared().total_cmp(&yr.column(b).norm_squared()))
                .expect("at least one target");
            let mut u: DVector<f64> = yr.column(start).into_owned();
            let mut t_old: Option<DVector<f64>> = None;
            let mut found = None;
            for _ in 0..NIPALS_MAX_ITER {
                let w = xr.tr_mul(&u);
                let wn = w.norm();
                if wn <= 1e-12 {
                    break;
                }
                let w = w / wn;
                let t = &xr * &w;
                let tt = t.norm_squared();
                let q = yr.tr_mul(&t) / tt;
                let qq = q.norm_squared();
                if qq <= 0.0 {
                    break;
                }
                u = &yr * &q / qq;
                let done = t_old
                    .as_ref()
                    .is_some_and(|o| (&t - o).norm() <= NIPALS_TOL * t.norm());
                t_old = Some(t.clone());
                found = Some((w, t, q));
                if done || m == 1 {
                    break;
                }
            }
            let Some((w, t, q)) = found else { break };
            let tt = t.norm_squared();
            if tt <= 1e-20 {
                break;
            }
            let pl = xr.tr_mul(&t) / tt;
            xr -= &t * pl.transpose();
            yr -= &t * q.transpose();
            ws.push(w);
            ps.push(pl);
            qs.push(q);
        }
        if ws.is_empty() {
            return Err(Error::invalid("plsr", "X has no variance to extract"));
        }
        let a = ws.len();
        let weights = DMatrix::from_columns(&ws);
        let loadings = DMatrix::from_columns(&ps);
        let y_loadings = DMatrix::from_columns(&qs);
        let ptw = loadings.tr_mul(&weights);
        let inv = ptw
            .try_inverse()
            .ok_or(Error::Undefined("singular PLS loading-weight product"))?;
        let coef = &weights * inv * y_loadings.transpose();
        Ok(PlsrModel {
            components: a,
            x_mean,
            x_scale,
            y_mean,
            y_scale,
            weights,
            loadings,
            y_loadings,
            coef,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::invalid(
                "plsr_predict",
                format!("{} features, model has {}", x.ncols(), self.x_mean.len()),
            ));
        }
        let mut out = standardize(x, &self.x_mean, &self.x_scale) * &self.coef;
        for (j, mut c) in out.column_iter_mut().enumerate() {
            c *= self.y_scale[j];
            c.add_scalar_mut(self.y_mean[j]);
        }
        Ok(out)
    }
}

/// Rows of `Vec<f64>` as an `[n, p]` matrix.
pub fn rows_to_matrix(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let p = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("rows_to_matrix", "ragged rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

/// Fits on the training rows and predicts a scalar response for the test rows.
pub fn plsr_regress(x_train: &[&[f64]], y_train: &[f64], x_test: &[&[f64]], components: usize) -> Result<Vec<f64>> {
    let xt = rows_to_matrix(x_train)?;
    let yt = DMatrix::from_column_slice(y_train.len(), 1, y_train);
    let model = PlsrModel::fit(&xt, &yt, components)?;
    let xs = rows_to_matrix(x_test)?;
    if xs.nrows() == 0 {
        return Ok(Vec::new());
    }
    Ok(model.predict(&xs)?.column(0).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_single_feature() {
        let x: Vec<[f64; 1]> = (0..10).map(|i| [i as f64 * 0.7 - 1.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0]).collect();
        let rows: Vec<&[f64]> = x.iter().map(|r| &r[..]).collect();
        let test = [[3.3], [-5.0]];
        let test_rows: Vec<&[f64]> = test.iter().map(|r| &r[..]).collect();
        let pred = plsr_regress(&rows, &y, &test_rows, 1).unwrap();
        assert!((pred[0] - 6.6).abs() < 1e-8);
        assert!((pred[1] + 10.0).abs() < 1e-8);
    }

    #[test]
    fn constant_response_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        assert!(PlsrModel::fit(&x, &y, 1).is_err());
    }

    #[test]
    fn components_capped_by_rank() {
        // Two identical columns: rank 1.
        let x = DMatrix::from_fn(8, 2, |i, _| i as f64);
        let y = DMatrix::from_fn(8, 1, |i, _| (i * i) as f64);
        let m = PlsrModel::fit(&x, &y, 2).unwrap();
        assert_eq!(m.components, 1);
    }
}

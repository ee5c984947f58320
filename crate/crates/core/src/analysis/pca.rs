//! Principal component projection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit-length direction per component, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Share of total variance per component; all zero for constant data.
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    /// Fits `dims` components to `rows` (`[n, p]`). Each direction's
    /// largest-magnitude entry is made positive (the first such on a tie).
    pub fn fit(rows: &[&[f64]], dims: usize) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("pca", "ragged feature rows"));
        }
        if dims == 0 || dims > p {
            return Err(Error::invalid("pca", format!("{dims} components from {p} features")));
        }
        if n < dims {
            return Err(Error::invalid("pca", format!("{n} samples for {dims} components")));
        }
        let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);
        let cov = x.tr_mul(&x) / (n.max(2) - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut components = Vec::with_capacity(dims);
        let mut explained_variance = Vec::with_capacity(dims);
        for &k in &order[..dims] {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[k].max(0.0));
        }
        let explained_ratio = explained_variance
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        Ok(Pca {
            mean,
            components,
            explained_variance,
            explained_ratio,
        })
    }

    pub fn transform(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if rows.iter().any(|r| r.len() != self.mean.len()) {
            return Err(Error::invalid("pca", "feature width differs from fit"));
        }
        Ok(rows
            .iter()
            .map(|r| {
                self.components
                    .iter()
                    .map(|c| r.iter().zip(&self.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum())
                    .collect()
            })
            .collect())
    }

    pub fn inverse_transform(&self, coords: &[Vec<f64>]) -> Vec<Vec<f64>> {
        coords
            .iter()
            .map(|z| {
                let mut x = self.mean.clone();
                for (c, &zk) in self.components.iter().zip(z) {
                    for (xi, ci) in x.iter_mut().zip(c) {
                        *xi += zk * ci;
                    }
                }
                x
            })
            .collect()
    }
}

/// Fits and projects in one call.
pub fn pca_project(rows: &[&[f64]], dims: usize) -> Result<Vec<Vec<f64>>> {
    Pca::fit(rows, dims)?.transform(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_one_component() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0, -(i as f64)]).collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| &r[..]).collect();
        let pca = Pca::fit(&rows, 2).unwrap();
        assert!((pca.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(pca.components[0][1] > 0.0);
        assert!(Pca::fit(&rows, 4).is_err());
    }
}

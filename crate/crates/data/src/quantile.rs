//! Per-column quantile transform to a standard normal output distribution.
//!
//! Fit on upstream training rows only, then applied unchanged to any data
//! from the same family: `value -> empirical CDF position -> inverse normal`.

use crate::{DataError, Dataset, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const CDF_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileTransform {
    pub n_quantiles: usize,
    /// Per numerical column: non-decreasing reference quantiles.
    pub references: Vec<Vec<f64>>,
    /// Provenance tag; the pipeline only ever fits on upstream data.
    pub fit_source: String,
}

impl QuantileTransform {
    /// Fit reference quantiles on the given rows (upstream training rows).
    /// Missing values are excluded; a column with no observed value is an
    /// error. `n_quantiles` is capped at the number of observed values.
    pub fn fit(dataset: &Dataset, rows: &[usize], n_quantiles: usize) -> Result<Self> {
        let n_num = dataset.n_num();
        let num_cols = dataset.schema.numerical_columns();
        let mut references = Vec::with_capacity(n_num);
        for j in 0..n_num {
            let mut values: Vec<f64> = rows
                .iter()
                .map(|&r| dataset.num(r, j))
                .filter(|v| !v.is_nan())
                .collect();
            if values.is_empty() {
                let name = dataset.schema.columns[num_cols[j]].name.clone();
                return Err(DataError::EmptyColumn(name));
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = n_quantiles.min(values.len()).max(2.min(values.len()));
            let mut refs = Vec::with_capacity(m);
            if m == 1 {
                refs.push(values[0]);
            } else {
                for i in 0..m {
                    let p = i as f64 / (m - 1) as f64;
                    refs.push(quantile_sorted(&values, p));
                }
            }
            references.push(refs);
        }
        Ok(QuantileTransform {
            n_quantiles,
            references,
            fit_source: "upstream".to_string(),
        })
    }

    /// Empirical CDF position of `v` within column `col`, in [0, 1].
    /// Ties map to the midpoint of their reference span, which keeps the
    /// transform monotone and sends the fitted median exactly to 0.5.
    pub fn cdf(&self, col: usize, v: f64) -> f64 {
        let refs = &self.references[col];
        let m = refs.len();
        if m == 1 || refs[0] == refs[m - 1] {
            return 0.5;
        }
        let lo = refs.partition_point(|&t| t < v);
        let hi = refs.partition_point(|&t| t <= v);
        if hi == 0 {
            return 0.0;
        }
        if lo == m {
            return 1.0;
        }
        let denom = (m - 1) as f64;
        if hi > lo {
            // exact tie with refs[lo..hi]
            return (lo + hi - 1) as f64 / 2.0 / denom;
        }
        // strict interior: interpolate between refs[lo-1] and refs[lo]
        let (a, b) = (refs[lo - 1], refs[lo]);
        ((lo - 1) as f64 + (v - a) / (b - a)) / denom
    }

    /// Transform one value of column `col` to its standard-normal image.
    pub fn transform_value(&self, col: usize, v: f64) -> f64 {
        let p = self.cdf(col, v).clamp(CDF_CLIP, 1.0 - CDF_CLIP);
        inv_normal_cdf(p)
    }

    /// Apply to every numerical value of a dataset (a pure function of the
    /// fitted state; no statistics of `dataset` are used).
    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let n_num = dataset.n_num();
        let mut out = dataset.clone();
        for r in 0..out.n_rows {
            for j in 0..n_num {
                let v = out.x_num[r * n_num + j];
                if !v.is_nan() {
                    out.x_num[r * n_num + j] = self.transform_value(j, v);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Linear-interpolated quantile of a sorted slice at probability `p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |relative error| < 1.2e-9 over (0, 1)).
pub fn inv_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inv_normal_cdf domain is (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

//! Missing-value imputation: upstream column means for numericals, a
//! dedicated extra category for categoricals.

use crate::dataset::MISSING_CAT;
use crate::{ColumnKind, Dataset, Result};
use serde::{Deserialize, Serialize};

/// Imputation statistics computed on upstream training rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpstreamStats {
    /// Per numerical column mean over observed values (0.0 if none observed).
    pub means: Vec<f64>,
}

impl UpstreamStats {
    pub fn fit(dataset: &Dataset, rows: &[usize]) -> Self {
        let n_num = dataset.n_num();
        let mut means = Vec::with_capacity(n_num);
        for j in 0..n_num {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &r in rows {
                let v = dataset.num(r, j);
                if !v.is_nan() {
                    sum += v;
                    count += 1;
                }
            }
            means.push(if count > 0 { sum / count as f64 } else { 0.0 });
        }
        UpstreamStats { means }
    }
}

/// Replace missing values: numerical NaN with the upstream mean, categorical
/// sentinels with a new category appended to the affected column's code
/// range. The appended index equals the pre-imputation `category_count`, so
/// embedding tables sized from the returned schema agree between upstream
/// and downstream data. Idempotent.
pub fn impute(dataset: &Dataset, stats: &UpstreamStats) -> Result<Dataset> {
    let mut out = dataset.clone();
    let n_num = out.n_num();
    for r in 0..out.n_rows {
        for j in 0..n_num {
            if out.x_num[r * n_num + j].is_nan() {
                out.x_num[r * n_num + j] = stats.means[j];
            }
        }
    }

    let cat_cols = out.schema.categorical_columns();
    let n_cat = cat_cols.len();
    for (j, &col) in cat_cols.iter().enumerate() {
        let any_missing = (0..out.n_rows).any(|r| out.x_cat[r * n_cat + j] == MISSING_CAT);
        if !any_missing {
            continue;
        }
        let missing_code = out.schema.columns[col].category_count as u32;
        let column = &mut out.schema.columns[col];
        column.category_count += 1;
        if !column.categories.is_empty() {
            column.categories.push("<missing>".to_string());
        }
        for r in 0..out.n_rows {
            if out.x_cat[r * n_cat + j] == MISSING_CAT {
                out.x_cat[r * n_cat + j] = missing_code;
            }
        }
    }
    Ok(out)
}

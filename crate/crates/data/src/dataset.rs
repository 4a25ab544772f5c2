use crate::{ColumnKind, DataError, Result, Schema};

/// Sentinel code for a missing categorical value before imputation.
pub const MISSING_CAT: u32 = u32::MAX;

/// Row-major feature matrices plus multi-label binary targets.
///
/// Numerical and categorical columns are stored in separate matrices in
/// schema order (the order of numerical columns among themselves, likewise
/// categorical). Missing numericals are NaN, missing categoricals
/// [`MISSING_CAT`]; after preprocessing neither remains.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: Schema,
    pub n_rows: usize,
    /// `n_rows x n_num`, NaN = missing
    pub x_num: Vec<f64>,
    /// `n_rows x n_cat`, MISSING_CAT = missing
    pub x_cat: Vec<u32>,
    /// `n_rows x n_targets`, values 0/1
    pub y: Vec<u8>,
}

impl Dataset {
    pub fn new(schema: Schema, n_rows: usize, x_num: Vec<f64>, x_cat: Vec<u32>, y: Vec<u8>) -> Result<Self> {
        let n_num = schema.numerical_columns().len();
        let n_cat = schema.categorical_columns().len();
        let n_targets = schema.targets.len();
        if x_num.len() != n_rows * n_num || x_cat.len() != n_rows * n_cat || y.len() != n_rows * n_targets {
            return Err(DataError::Schema(format!(
                "matrix sizes disagree with {n_rows} rows: x_num {} (want {}), x_cat {} (want {}), y {} (want {})",
                x_num.len(),
                n_rows * n_num,
                x_cat.len(),
                n_rows * n_cat,
                y.len(),
                n_rows * n_targets
            )));
        }
        Ok(Dataset { schema, n_rows, x_num, x_cat, y })
    }

    pub fn n_num(&self) -> usize {
        self.schema.numerical_columns().len()
    }

    pub fn n_cat(&self) -> usize {
        self.schema.categorical_columns().len()
    }

    pub fn n_targets(&self) -> usize {
        self.schema.targets.len()
    }

    pub fn num(&self, row: usize, col: usize) -> f64 {
        self.x_num[row * self.n_num() + col]
    }

    pub fn cat(&self, row: usize, col: usize) -> u32 {
        self.x_cat[row * self.n_cat() + col]
    }

    pub fn target(&self, row: usize, t: usize) -> u8 {
        self.y[row * self.n_targets() + t]
    }

    pub fn has_missing(&self) -> bool {
        self.x_num.iter().any(|v| v.is_nan()) || self.x_cat.iter().any(|&c| c == MISSING_CAT)
    }

    /// Restrict to a subset of rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let (n_num, n_cat, n_t) = (self.n_num(), self.n_cat(), self.n_targets());
        let mut x_num = Vec::with_capacity(rows.len() * n_num);
        let mut x_cat = Vec::with_capacity(rows.len() * n_cat);
        let mut y = Vec::with_capacity(rows.len() * n_t);
        for &r in rows {
            x_num.extend_from_slice(&self.x_num[r * n_num..(r + 1) * n_num]);
            x_cat.extend_from_slice(&self.x_cat[r * n_cat..(r + 1) * n_cat]);
            y.extend_from_slice(&self.y[r * n_t..(r + 1) * n_t]);
        }
        Dataset { schema: self.schema.clone(), n_rows: rows.len(), x_num, x_cat, y }
    }

    /// Drop one feature column by name (used to construct misaligned
    /// upstream/downstream variants).
    pub fn drop_column(&self, name: &str) -> Result<Dataset> {
        let idx = self
            .schema
            .column_index(name)
            .ok_or_else(|| DataError::Schema(format!("no column `{name}`")))?;
        let kind = self.schema.columns[idx].kind;
        let mut columns = self.schema.columns.clone();
        columns.remove(idx);
        let schema = Schema::new(columns, self.schema.targets.clone())?;

        let within = match kind {
            ColumnKind::Numerical => self.schema.numerical_columns().iter().position(|&c| c == idx).unwrap(),
            ColumnKind::Categorical => self.schema.categorical_columns().iter().position(|&c| c == idx).unwrap(),
        };
        let (n_num, n_cat) = (self.n_num(), self.n_cat());
        let mut x_num = Vec::new();
        let mut x_cat = Vec::new();
        for r in 0..self.n_rows {
            for j in 0..n_num {
                if kind == ColumnKind::Numerical && j == within {
                    continue;
                }
                x_num.push(self.x_num[r * n_num + j]);
            }
            for j in 0..n_cat {
                if kind == ColumnKind::Categorical && j == within {
                    continue;
                }
                x_cat.push(self.x_cat[r * n_cat + j]);
            }
        }
        Dataset::new(schema, self.n_rows, x_num, x_cat, self.y.clone())
    }

    /// Append a numerical column with the given values.
    pub fn push_numerical_column(&self, name: &str, values: &[f64]) -> Result<Dataset> {
        if values.len() != self.n_rows {
            return Err(DataError::Schema(format!(
                "column `{name}`: {} values for {} rows",
                values.len(),
                self.n_rows
            )));
        }
        let mut columns = self.schema.columns.clone();
        columns.push(crate::Column::numerical(name));
        let schema = Schema::new(columns, self.schema.targets.clone())?;
        let n_num = self.n_num();
        let mut x_num = Vec::with_capacity(self.n_rows * (n_num + 1));
        for r in 0..self.n_rows {
            x_num.extend_from_slice(&self.x_num[r * n_num..(r + 1) * n_num]);
            x_num.push(values[r]);
        }
        Dataset::new(schema, self.n_rows, x_num, self.x_cat.clone(), self.y.clone())
    }

    /// Append a categorical column (codes must be < category_count).
    pub fn push_categorical_column(&self, column: crate::Column, codes: &[u32]) -> Result<Dataset> {
        if codes.len() != self.n_rows {
            return Err(DataError::Schema(format!(
                "column `{}`: {} codes for {} rows",
                column.name,
                codes.len(),
                self.n_rows
            )));
        }
        if codes.iter().any(|&c| c != MISSING_CAT && c as usize >= column.category_count) {
            return Err(DataError::Schema(format!("column `{}`: code out of range", column.name)));
        }
        let mut columns = self.schema.columns.clone();
        columns.push(column);
        let schema = Schema::new(columns, self.schema.targets.clone())?;
        let n_cat = self.n_cat();
        let mut x_cat = Vec::with_capacity(self.n_rows * (n_cat + 1));
        for r in 0..self.n_rows {
            x_cat.extend_from_slice(&self.x_cat[r * n_cat..(r + 1) * n_cat]);
            x_cat.push(codes[r]);
        }
        Dataset::new(schema, self.n_rows, self.x_num.clone(), x_cat, self.y.clone())
    }
}

/// Upstream/downstream task views produced by [`make_task_split`]: the
/// feature matrices are identical, only the exposed targets differ.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub upstream: Dataset,
    pub downstream: Dataset,
    pub downstream_target: String,
}

/// Split the target set: the chosen target becomes the downstream task, all
/// remaining targets form the upstream multi-label task.
pub fn make_task_split(dataset: &Dataset, downstream_target_index: usize) -> Result<TaskSplit> {
    let n_t = dataset.n_targets();
    if downstream_target_index >= n_t {
        return Err(DataError::Schema(format!(
            "target index {downstream_target_index} out of range for {n_t} targets"
        )));
    }
    let mut up_targets = dataset.schema.targets.clone();
    let down_target = up_targets.remove(downstream_target_index);

    let up_schema = Schema::new(dataset.schema.columns.clone(), up_targets)?;
    let down_schema = Schema::new(dataset.schema.columns.clone(), vec![down_target.clone()])?;

    let mut up_y = Vec::with_capacity(dataset.n_rows * (n_t - 1));
    let mut down_y = Vec::with_capacity(dataset.n_rows);
    for r in 0..dataset.n_rows {
        for t in 0..n_t {
            if t == downstream_target_index {
                down_y.push(dataset.y[r * n_t + t]);
            } else {
                up_y.push(dataset.y[r * n_t + t]);
            }
        }
    }
    Ok(TaskSplit {
        upstream: Dataset::new(up_schema, dataset.n_rows, dataset.x_num.clone(), dataset.x_cat.clone(), up_y)?,
        downstream: Dataset::new(down_schema, dataset.n_rows, dataset.x_num.clone(), dataset.x_cat.clone(), down_y)?,
        downstream_target: down_target,
    })
}

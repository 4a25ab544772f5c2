//! Dataset ingestion, schema handling, preprocessing and split construction
//! for tabular transfer-learning experiments.
//!
//! The preprocessing contract is strict about fit/apply separation: quantile
//! references and imputation means are fitted on upstream training rows only
//! and then applied unchanged everywhere else.

mod csvio;
mod dataset;
mod impute;
mod quantile;
mod schema;
mod splits;
pub mod stablehash;

pub use csvio::{load_csv, load_csv_with_schema_file, write_csv};
pub use dataset::{make_task_split, Dataset, TaskSplit, MISSING_CAT};
pub use impute::{impute, UpstreamStats};
pub use quantile::{inv_normal_cdf, QuantileTransform};
pub use schema::{Column, ColumnKind, Schema};
pub use splits::{make_splits, sample_downstream, SplitPlan};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("csv row {row}, column `{column}`: {msg}")]
    Csv { row: usize, column: String, msg: String },
    #[error("csv: {0}")]
    CsvFormat(String),
    #[error("column `{0}` has no observed values")]
    EmptyColumn(String),
    #[error("split: {0}")]
    Split(String),
    #[error("sample: requested {requested} rows, only {available} available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

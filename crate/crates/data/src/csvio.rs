//! CSV ingestion and emission.
//!
//! Dialect: comma-separated, first row header, UTF-8, `.` decimal point.
//! Empty string, `NA` and `NaN` are missing. The header must contain every
//! schema column and target by name (any order).

use crate::dataset::MISSING_CAT;
use crate::{ColumnKind, DataError, Dataset, Result, Schema};
use std::path::Path;

fn is_missing(field: &str) -> bool {
    field.is_empty() || field == "NA" || field == "NaN"
}

pub fn load_csv_with_schema_file(csv_path: &Path, schema_path: &Path) -> Result<Dataset> {
    let schema = Schema::load(schema_path)?;
    load_csv(csv_path, schema)
}

pub fn load_csv(path: &Path, mut schema: Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::CsvFormat(e.to_string()))?
        .clone();
    let header_pos = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::CsvFormat(format!("header is missing `{name}`")))
    };

    let num_cols = schema.numerical_columns();
    let cat_cols = schema.categorical_columns();
    let num_pos: Vec<usize> = num_cols
        .iter()
        .map(|&c| header_pos(&schema.columns[c].name))
        .collect::<Result<_>>()?;
    let cat_pos: Vec<usize> = cat_cols
        .iter()
        .map(|&c| header_pos(&schema.columns[c].name))
        .collect::<Result<_>>()?;
    let target_pos: Vec<usize> = schema
        .targets
        .iter()
        .map(|t| header_pos(t))
        .collect::<Result<_>>()?;

    // Dictionaries for open categorical columns (no categories listed).
    let open: Vec<bool> = cat_cols
        .iter()
        .map(|&c| schema.columns[c].categories.is_empty() && schema.columns[c].category_count == 0)
        .collect();
    // Closed integer-coded columns: category_count given without names.
    let int_coded: Vec<bool> = cat_cols
        .iter()
        .map(|&c| schema.columns[c].categories.is_empty() && schema.columns[c].category_count > 0)
        .collect();

    let mut x_num = Vec::new();
    let mut x_cat = Vec::new();
    let mut y = Vec::new();
    let mut n_rows = 0usize;

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::CsvFormat(format!("row {}: {e}", row_idx + 1)))?;
        for &pos in &num_pos {
            let field = record.get(pos).unwrap_or("");
            if is_missing(field) {
                x_num.push(f64::NAN);
            } else {
                x_num.push(field.parse::<f64>().unwrap_or(f64::NAN));
            }
        }
        for (k, (&pos, &col)) in cat_pos.iter().zip(&cat_cols).enumerate() {
            let field = record.get(pos).unwrap_or("");
            if is_missing(field) {
                x_cat.push(MISSING_CAT);
                continue;
            }
            if int_coded[k] {
                let code: u32 = field.parse().map_err(|_| DataError::Csv {
                    row: row_idx + 1,
                    column: schema.columns[col].name.clone(),
                    msg: format!("expected integer code, got `{field}`"),
                })?;
                if code as usize >= schema.columns[col].category_count {
                    return Err(DataError::Csv {
                        row: row_idx + 1,
                        column: schema.columns[col].name.clone(),
                        msg: format!("code {code} out of range"),
                    });
                }
                x_cat.push(code);
                continue;
            }
            let column = &mut schema.columns[col];
            match column.categories.iter().position(|c| c == field) {
                Some(code) => x_cat.push(code as u32),
                None if open[k] => {
                    column.categories.push(field.to_string());
                    column.category_count = column.categories.len();
                    x_cat.push((column.categories.len() - 1) as u32);
                }
                None => {
                    return Err(DataError::Csv {
                        row: row_idx + 1,
                        column: column.name.clone(),
                        msg: format!("unknown category `{field}`"),
                    })
                }
            }
        }
        for (&pos, name) in target_pos.iter().zip(&schema.targets) {
            let field = record.get(pos).unwrap_or("");
            match field {
                "0" => y.push(0u8),
                "1" => y.push(1u8),
                _ => {
                    return Err(DataError::Csv {
                        row: row_idx + 1,
                        column: name.clone(),
                        msg: format!("expected binary target 0/1, got `{field}`"),
                    })
                }
            }
        }
        n_rows += 1;
    }
    Dataset::new(schema, n_rows, x_num, x_cat, y)
}

/// Write a dataset as CSV (columns in schema order, then targets).
/// Numerical values use Rust's shortest round-trip float formatting, so the
/// output is byte-deterministic; missing values are written empty.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = dataset.schema.columns.iter().map(|c| c.name.clone()).collect();
    header.extend(dataset.schema.targets.iter().cloned());
    w.write_record(&header).map_err(|e| DataError::CsvFormat(e.to_string()))?;

    let num_cols = dataset.schema.numerical_columns();
    let cat_cols = dataset.schema.categorical_columns();
    for r in 0..dataset.n_rows {
        let mut record: Vec<String> = Vec::with_capacity(dataset.schema.columns.len() + dataset.n_targets());
        for (i, col) in dataset.schema.columns.iter().enumerate() {
            match col.kind {
                ColumnKind::Numerical => {
                    let j = num_cols.iter().position(|&c| c == i).unwrap();
                    let v = dataset.num(r, j);
                    record.push(if v.is_nan() { String::new() } else { format!("{v}") });
                }
                ColumnKind::Categorical => {
                    let j = cat_cols.iter().position(|&c| c == i).unwrap();
                    let code = dataset.cat(r, j);
                    if code == MISSING_CAT {
                        record.push(String::new());
                    } else if (code as usize) < col.categories.len() {
                        record.push(col.categories[code as usize].clone());
                    } else {
                        record.push(format!("{code}"));
                    }
                }
            }
        }
        for t in 0..dataset.n_targets() {
            record.push(format!("{}", dataset.target(r, t)));
        }
        w.write_record(&record).map_err(|e| DataError::CsvFormat(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Column;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn toy_schema() -> Schema {
        Schema::new(
            vec![
                Column::numerical("a"),
                Column::categorical("c", vec!["red".into(), "blue".into()]),
            ],
            vec!["t".into()],
        )
        .unwrap()
    }

    #[test]
    fn empty_numeric_cell_becomes_nan() {
        let f = write_tmp("a,c,t\n1.5,red,0\n,blue,1\n2.5,red,0\n");
        let d = load_csv(f.path(), toy_schema()).unwrap();
        assert_eq!(d.n_rows, 3);
        assert_eq!(d.x_num.iter().filter(|v| v.is_nan()).count(), 1);
        assert!(d.x_num[1].is_nan());
    }

    #[test]
    fn header_only_file_is_a_valid_empty_dataset() {
        let f = write_tmp("a,c,t\n");
        let d = load_csv(f.path(), toy_schema()).unwrap();
        assert_eq!(d.n_rows, 0);
    }

    #[test]
    fn unknown_category_in_closed_schema_reports_row_and_column() {
        let f = write_tmp("a,c,t\n1.0,green,0\n");
        let err = load_csv(f.path(), toy_schema()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1") && msg.contains('c') && msg.contains("green"), "{msg}");
    }

    #[test]
    fn ragged_rows_error() {
        let f = write_tmp("a,c,t\n1.0,red\n");
        assert!(load_csv(f.path(), toy_schema()).is_err());
    }

    #[test]
    fn open_categorical_dictionary_encodes_in_order() {
        let schema = Schema::new(
            vec![Column::categorical("c", vec![])],
            vec!["t".into()],
        )
        .unwrap();
        let f = write_tmp("c,t\nz,0\nq,1\nz,0\n");
        let d = load_csv(f.path(), schema).unwrap();
        assert_eq!(d.x_cat, vec![0, 1, 0]);
        let col = &d.schema.columns[0];
        assert_eq!(col.categories, vec!["z".to_string(), "q".to_string()]);
        assert_eq!(col.category_count, 2);
    }

    #[test]
    fn roundtrip_preserves_values() {
        let f = write_tmp("a,c,t\n1.5,red,0\n-2.25,blue,1\n");
        let d = load_csv(f.path(), toy_schema()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&d, out.path()).unwrap();
        let d2 = load_csv(out.path(), toy_schema()).unwrap();
        assert_eq!(d.x_num, d2.x_num);
        assert_eq!(d.x_cat, d2.x_cat);
        assert_eq!(d.y, d2.y);
    }

    #[test]
    fn yeast_style_shape() {
        // 103 numerical columns, 14 binary targets
        let columns: Vec<Column> = (0..103).map(|i| Column::numerical(&format!("f{i}"))).collect();
        let targets: Vec<String> = (0..14).map(|i| format!("t{i}")).collect();
        let schema = Schema::new(columns, targets).unwrap();
        let header: Vec<String> = (0..103)
            .map(|i| format!("f{i}"))
            .chain((0..14).map(|i| format!("t{i}")))
            .collect();
        let row: Vec<String> = (0..103)
            .map(|i| format!("{}", i as f64 * 0.01))
            .chain((0..14).map(|i| format!("{}", i % 2)))
            .collect();
        let f = write_tmp(&format!("{}\n{}\n", header.join(","), row.join(",")));
        let d = load_csv(f.path(), schema).unwrap();
        assert_eq!(d.n_num(), 103);
        assert_eq!(d.n_targets(), 14);
        assert_eq!(d.n_rows, 1);
    }
}

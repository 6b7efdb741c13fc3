//! Tabular CSV ingestion, feature encoding, and deterministic 80/20 splits.
//!
//! Numeric columns are standardized to mean 0 / std 1 using statistics from
//! the training split only; categorical columns are one-hot encoded with a
//! lexicographically sorted level dictionary so the encoded layout is stable
//! across runs. Labels are integer class ids and are not privatized.
//! Rows with missing values (empty cell, `?`, or `NA`) are dropped and
//! counted; any other unparseable cell is an error naming the row.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::matrix::Matrix;
use crate::numkit::rng::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("file has no rows")]
    EmptyFile,
    #[error("schema column '{0}' missing from header")]
    MissingColumn(String),
    #[error("header column '{0}' not in schema")]
    ExtraColumn(String),
    #[error("schema must have exactly one label column, found {0}")]
    LabelCount(usize),
    #[error("unparseable cell at row {row}, column '{column}': {value:?}")]
    UnparseableCell { row: usize, column: String, value: String },
    #[error("need at least 5 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("label value '{0}' only appears outside the training split")]
    DegenerateLabel(String),
}

/// Role of one raw column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Numeric,
    Categorical,
    Label,
}

/// User-provided schema: column name to role. The JSON form is a plain
/// object, e.g. `{"age": "numeric", "workclass": "categorical",
/// "income": "label"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemaSpec {
    pub roles: BTreeMap<String, ColumnRole>,
}

impl SchemaSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Fitted encoding of one raw column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnEncoding {
    pub name: String,
    pub role: ColumnRole,
    /// Sorted category levels (categorical columns only).
    pub categories: Vec<String>,
    /// Standardization statistics from the training split (numeric only).
    pub mean: f64,
    pub std: f64,
    /// First encoded column index and width of this column's group.
    pub offset: usize,
    pub width: usize,
}

/// Fitted schema for a whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnEncoding>,
    pub label_name: String,
    pub label_classes: Vec<String>,
    pub encoded_dim: usize,
}

impl FeatureSchema {
    /// `(offset, width)` of every one-hot group, for decoding attacks and
    /// invertibility checks.
    pub fn one_hot_groups(&self) -> Vec<(usize, usize)> {
        self.columns
            .iter()
            .filter(|c| c.role == ColumnRole::Categorical)
            .map(|c| (c.offset, c.width))
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.label_classes.len()
    }

    /// Canonical JSON used for the wire-format schema hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }
}

/// Encoded dataset with its deterministic split.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub x: Matrix<f64>,
    pub y: Vec<usize>,
    pub schema: FeatureSchema,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub dropped_rows: usize,
}

impl TabularDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Feature matrix restricted to the given indices.
    pub fn rows_of(&self, idx: &[usize]) -> Matrix<f64> {
        let mut out = Matrix::zeros(idx.len(), self.dim());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.x.row(i));
        }
        out
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }
}

/// 80/20 split as a pure function of `(seed, n)`: a Fisher-Yates permutation
/// with the first `round(0.8 n)` indices forming the training set.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if n < 5 {
        return Err(DataError::TooFewRows(n));
    }
    let mut rng = Rng::new(seed);
    let perm = rng.permutation(n);
    let n_train = (0.8 * n as f64).round() as usize;
    let train = perm[..n_train].to_vec();
    let valid = perm[n_train..].to_vec();
    Ok((train, valid))
}

/// Load a CSV (RFC-4180 subset: comma delimiter, header row, no embedded
/// newlines), encode it, and split with `seed`.
pub fn load_csv(path: &Path, spec: &SchemaSpec, seed: u64) -> Result<TabularDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(str::to_string).collect::<Vec<String>>());
    }
    from_raw_rows(&header, rows, spec, seed)
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "?" || t == "NA"
}

/// Shared fitting path for CSV data and generated data.
pub fn from_raw_rows(
    header: &[String],
    raw_rows: Vec<Vec<String>>,
    spec: &SchemaSpec,
    seed: u64,
) -> Result<TabularDataset, DataError> {
    let label_count = spec.roles.values().filter(|r| **r == ColumnRole::Label).count();
    if label_count != 1 {
        return Err(DataError::LabelCount(label_count));
    }
    for name in spec.roles.keys() {
        if !header.contains(name) {
            return Err(DataError::MissingColumn(name.clone()));
        }
    }
    for name in header {
        if !spec.roles.contains_key(name) {
            return Err(DataError::ExtraColumn(name.clone()));
        }
    }
    if raw_rows.is_empty() {
        return Err(DataError::EmptyFile);
    }

    // drop rows with missing values, keep an index trail for error messages
    let mut kept: Vec<Vec<String>> = Vec::with_capacity(raw_rows.len());
    let mut kept_source_rows: Vec<usize> = Vec::new();
    let mut dropped = 0usize;
    for (i, row) in raw_rows.into_iter().enumerate() {
        if row.len() != header.len() || row.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        kept.push(row);
        kept_source_rows.push(i);
    }
    if kept.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let n = kept.len();
    let (train_idx, valid_idx) = split_indices(n, seed)?;

    // column layout follows header order
    let label_col = header
        .iter()
        .position(|h| spec.roles[h] == ColumnRole::Label)
        .expect("label presence checked");

    // parse numerics once, collecting category and label dictionaries
    let mut numeric: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut categories: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (j, name) in header.iter().enumerate() {
        match spec.roles[name] {
            ColumnRole::Numeric => {
                let mut col = Vec::with_capacity(n);
                for (r, row) in kept.iter().enumerate() {
                    let cell = row[j].trim();
                    let v: f64 = cell.parse().map_err(|_| DataError::UnparseableCell {
                        row: kept_source_rows[r] + 2, // 1-based, counting the header line
                        column: name.clone(),
                        value: cell.to_string(),
                    })?;
                    col.push(v);
                }
                numeric.insert(j, col);
            }
            ColumnRole::Categorical => {
                let mut levels: Vec<String> =
                    kept.iter().map(|row| row[j].trim().to_string()).collect();
                levels.sort();
                levels.dedup();
                categories.insert(j, levels);
            }
            ColumnRole::Label => {}
        }
    }
    let mut label_classes: Vec<String> = kept.iter().map(|r| r[label_col].trim().to_string()).collect();
    label_classes.sort();
    label_classes.dedup();

    // training-split statistics only (no leakage into validation)
    let mut columns = Vec::new();
    let mut offset = 0usize;
    for (j, name) in header.iter().enumerate() {
        match spec.roles[name] {
            ColumnRole::Numeric => {
                let col = &numeric[&j];
                let mean = train_idx.iter().map(|&i| col[i]).sum::<f64>() / train_idx.len() as f64;
                let var = train_idx.iter().map(|&i| (col[i] - mean).powi(2)).sum::<f64>()
                    / train_idx.len() as f64;
                let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                columns.push(ColumnEncoding {
                    name: name.clone(),
                    role: ColumnRole::Numeric,
                    categories: Vec::new(),
                    mean,
                    std,
                    offset,
                    width: 1,
                });
                offset += 1;
            }
            ColumnRole::Categorical => {
                let levels = categories[&j].clone();
                let width = levels.len();
                columns.push(ColumnEncoding {
                    name: name.clone(),
                    role: ColumnRole::Categorical,
                    categories: levels,
                    mean: 0.0,
                    std: 1.0,
                    offset,
                    width,
                });
                offset += width;
            }
            ColumnRole::Label => {}
        }
    }
    let encoded_dim = offset;
    let schema = FeatureSchema {
        columns,
        label_name: header[label_col].clone(),
        label_classes: label_classes.clone(),
        encoded_dim,
    };

    let mut x = Matrix::zeros(n, encoded_dim);
    let mut y = Vec::with_capacity(n);
    for (r, row) in kept.iter().enumerate() {
        let dst = x.row_mut(r);
        for enc in &schema.columns {
            let j = header.iter().position(|h| h == &enc.name).expect("column exists");
            match enc.role {
                ColumnRole::Numeric => {
                    dst[enc.offset] = (numeric[&j][r] - enc.mean) / enc.std;
                }
                ColumnRole::Categorical => {
                    let cell = row[j].trim();
                    let k = enc
                        .categories
                        .binary_search_by(|c| c.as_str().cmp(cell))
                        .expect("level collected during fitting");
                    dst[enc.offset + k] = 1.0;
                }
                ColumnRole::Label => unreachable!(),
            }
        }
        let cell = row[label_col].trim();
        let class = label_classes
            .binary_search_by(|c| c.as_str().cmp(cell))
            .expect("label collected during fitting");
        y.push(class);
    }

    // every class should appear in training data; a class seen only in
    // validation makes downstream utility models ill-posed
    for (k, name) in label_classes.iter().enumerate() {
        if !train_idx.iter().any(|&i| y[i] == k) {
            return Err(DataError::DegenerateLabel(name.clone()));
        }
    }

    Ok(TabularDataset { x, y, schema, train_idx, valid_idx, dropped_rows: dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(pairs: &[(&str, ColumnRole)]) -> SchemaSpec {
        SchemaSpec {
            roles: pairs.iter().map(|(n, r)| (n.to_string(), *r)).collect(),
        }
    }

    fn write_csv(contents: &str) -> tempdir::TempCsv {
        tempdir::TempCsv::new(contents)
    }

    /// tiny self-contained temp-file helper
    mod tempdir {
        use std::path::PathBuf;

        pub struct TempCsv {
            pub path: PathBuf,
        }

        impl TempCsv {
            pub fn new(contents: &str) -> Self {
                let mut path = std::env::temp_dir();
                let unique = format!(
                    "powermech-test-{}-{}.csv",
                    std::process::id(),
                    std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .unwrap()
                        .as_nanos()
                );
                path.push(unique);
                std::fs::write(&path, contents).unwrap();
                TempCsv { path }
            }
        }

        impl Drop for TempCsv {
            fn drop(&mut self) {
                let _ = std::fs::remove_file(&self.path);
            }
        }
    }

    #[test]
    fn standardization_uses_training_rows_only() {
        let file = write_csv("v,lbl\n1.0,0\n2.0,1\n3.0,0\n4.0,1\n100.0,0\n");
        let ds = load_csv(
            &file.path,
            &spec(&[("v", ColumnRole::Numeric), ("lbl", ColumnRole::Label)]),
            1,
        )
        .unwrap();
        assert_eq!(ds.n(), 5);
        assert_eq!(ds.train_idx.len(), 4);
        assert_eq!(ds.valid_idx.len(), 1);
        let train_mean: f64 =
            ds.train_idx.iter().map(|&i| ds.x.get(i, 0)).sum::<f64>() / ds.train_idx.len() as f64;
        assert!(train_mean.abs() < 1e-12, "train mean {train_mean}");
    }

    #[test]
    fn one_hot_rows_sum_to_one_and_invert() {
        let file = write_csv("c,lbl\na,0\nb,1\nc,0\na,1\nb,0\nc,1\n");
        let ds = load_csv(
            &file.path,
            &spec(&[("c", ColumnRole::Categorical), ("lbl", ColumnRole::Label)]),
            2,
        )
        .unwrap();
        assert_eq!(ds.dim(), 3);
        let groups = ds.schema.one_hot_groups();
        assert_eq!(groups, vec![(0, 3)]);
        let expected = ["a", "b", "c", "a", "b", "c"];
        for i in 0..ds.n() {
            let row = ds.x.row(i);
            let sum: f64 = row.iter().sum();
            assert_eq!(sum, 1.0);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(ds.schema.columns[0].categories[argmax], expected[i]);
        }
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let (t1, v1) = split_indices(10, 7).unwrap();
        let (t2, v2) = split_indices(10, 7).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(t1.len(), 8);
        assert_eq!(v1.len(), 2);
        assert!(t1.iter().all(|i| !v1.contains(i)));
        let (t3, _) = split_indices(1000, 1).unwrap();
        let (t4, _) = split_indices(1000, 2).unwrap();
        assert_ne!(t3, t4, "different seeds must permute differently");
    }

    #[test]
    fn too_few_rows_rejected() {
        assert!(matches!(split_indices(4, 0), Err(DataError::TooFewRows(4))));
    }

    #[test]
    fn missing_rows_dropped_and_counted() {
        let file = write_csv("v,lbl\n1.0,0\n?,1\n3.0,0\n,1\n5.0,0\n6.0,1\n7.0,0\n");
        let ds = load_csv(
            &file.path,
            &spec(&[("v", ColumnRole::Numeric), ("lbl", ColumnRole::Label)]),
            1,
        )
        .unwrap();
        assert_eq!(ds.dropped_rows, 2);
        assert_eq!(ds.n(), 5);
    }

    #[test]
    fn unparseable_cell_names_row_and_column() {
        let file = write_csv("v,lbl\n1.0,0\n2.0,1\noops,0\n4.0,1\n5.0,0\n");
        let err = load_csv(
            &file.path,
            &spec(&[("v", ColumnRole::Numeric), ("lbl", ColumnRole::Label)]),
            1,
        )
        .unwrap_err();
        match err {
            DataError::UnparseableCell { row, column, value } => {
                assert_eq!(row, 4);
                assert_eq!(column, "v");
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn schema_mismatches_rejected() {
        let file = write_csv("v,lbl\n1.0,0\n");
        let err = load_csv(
            &file.path,
            &spec(&[("nope", ColumnRole::Numeric), ("lbl", ColumnRole::Label)]),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(_)));
        let err = load_csv(&file.path, &spec(&[("lbl", ColumnRole::Label)]), 1).unwrap_err();
        assert!(matches!(err, DataError::ExtraColumn(_)));
        let err = load_csv(
            &file.path,
            &spec(&[("v", ColumnRole::Numeric), ("lbl", ColumnRole::Numeric)]),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::LabelCount(0)));
    }

    #[test]
    fn schema_spec_parses_from_json_map() {
        let s = SchemaSpec::from_json(r#"{"age": "numeric", "job": "categorical", "y": "label"}"#)
            .unwrap();
        assert_eq!(s.roles["age"], ColumnRole::Numeric);
        assert_eq!(s.roles["job"], ColumnRole::Categorical);
        assert_eq!(s.roles["y"], ColumnRole::Label);
    }

    #[test]
    fn encoded_dim_is_stable_across_loads() {
        let mut body = String::from("n,c,lbl\n");
        for i in 0..40 {
            let cat = ["x", "y", "z"][i % 3];
            body.push_str(&format!("{}.5,{},{}\n", i, cat, i % 2));
        }
        let file = write_csv(&body);
        let sp = spec(&[
            ("n", ColumnRole::Numeric),
            ("c", ColumnRole::Categorical),
            ("lbl", ColumnRole::Label),
        ]);
        let d1 = load_csv(&file.path, &sp, 3).unwrap();
        let d2 = load_csv(&file.path, &sp, 3).unwrap();
        assert_eq!(d1.dim(), 4);
        assert_eq!(d2.dim(), 4);
        assert_eq!(d1.x.as_slice(), d2.x.as_slice());
        let _ = Write::flush(&mut std::io::sink());
    }
}

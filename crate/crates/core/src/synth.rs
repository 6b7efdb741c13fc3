//! Deterministic synthetic tabular datasets for benchmarks, demos, and the
//! desk-scale experiment suite. Everything goes through the same fitting
//! path as CSV data so the encoded layout matches real ingestion.

use crate::dataio::{from_raw_rows, ColumnRole, DataError, SchemaSpec, TabularDataset};
use crate::numkit::rng::Rng;

/// Two Gaussian blobs in 2-d, one per class, centered at `(±sep, ±sep)`.
pub fn two_gaussians(n: usize, sep: f64, seed: u64) -> TabularDataset {
    let mut rng = Rng::new(seed);
    let header = vec!["f0".to_string(), "f1".to_string(), "label".to_string()];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let c = if class == 0 { -sep } else { sep };
        let x0 = c + rng.normal();
        let x1 = c + rng.normal();
        rows.push(vec![format!("{x0:.17e}"), format!("{x1:.17e}"), class.to_string()]);
    }
    let spec = spec_of(&[
        ("f0", ColumnRole::Numeric),
        ("f1", ColumnRole::Numeric),
        ("label", ColumnRole::Label),
    ]);
    from_raw_rows(&header, rows, &spec, seed).expect("synthetic data is well-formed")
}

/// Isotropic Gaussian features in `d` dimensions with a linearly separable
/// binary label (sign of the first coordinate sum, with margin noise).
pub fn gaussian_blob(n: usize, d: usize, seed: u64) -> TabularDataset {
    let mut rng = Rng::new(seed);
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".to_string());
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let margin: f64 = x.iter().take(2.min(d)).sum::<f64>() + 0.3 * rng.normal();
        let class = usize::from(margin > 0.0);
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
        row.push(class.to_string());
        rows.push(row);
    }
    let mut pairs: Vec<(&str, ColumnRole)> = Vec::new();
    let names: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    for name in &names {
        pairs.push((name.as_str(), ColumnRole::Numeric));
    }
    pairs.push(("label", ColumnRole::Label));
    let spec = spec_of(&pairs);
    from_raw_rows(&header, rows, &spec, seed).expect("synthetic data is well-formed")
}

/// Mixed-type benchmark: two numeric features and one 3-level categorical,
/// all correlated with a binary label. This is the dataset the attack and
/// privacy-utility experiments run on.
pub fn mixed_synthetic(n: usize, seed: u64) -> TabularDataset {
    let mut rng = Rng::new(seed);
    let header = vec![
        "num0".to_string(),
        "num1".to_string(),
        "cat".to_string(),
        "label".to_string(),
    ];
    let levels = ["low", "mid", "high"];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let shift = if class == 0 { -1.0 } else { 1.0 };
        let x0 = shift + rng.normal();
        let x1 = -shift * 0.5 + rng.normal();
        // categorical level leans with the class but keeps overlap
        let u = rng.uniform();
        let level = if class == 0 {
            if u < 0.6 {
                0
            } else if u < 0.85 {
                1
            } else {
                2
            }
        } else if u < 0.6 {
            2
        } else if u < 0.85 {
            1
        } else {
            0
        };
        rows.push(vec![
            format!("{x0:.17e}"),
            format!("{x1:.17e}"),
            levels[level].to_string(),
            class.to_string(),
        ]);
    }
    let spec = spec_of(&[
        ("num0", ColumnRole::Numeric),
        ("num1", ColumnRole::Numeric),
        ("cat", ColumnRole::Categorical),
        ("label", ColumnRole::Label),
    ]);
    from_raw_rows(&header, rows, &spec, seed).expect("synthetic data is well-formed")
}

/// Harder mixed-type benchmark: the class signal is weak enough that
/// downstream accuracy keeps improving well past a few hundred training
/// samples, which is what the privacy-utility trend experiments need.
pub fn mixed_synthetic_hard(n: usize, seed: u64) -> TabularDataset {
    let mut rng = Rng::new(seed);
    let header = vec![
        "num0".to_string(),
        "num1".to_string(),
        "num2".to_string(),
        "cat".to_string(),
        "label".to_string(),
    ];
    let levels = ["low", "mid", "high"];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let shift = if class == 0 { -0.6 } else { 0.6 };
        let x0 = shift + rng.normal();
        let x1 = -shift * 0.7 + rng.normal();
        // interaction feature: informative only jointly with x0
        let x2 = x0 * (if class == 0 { 1.0 } else { -1.0 }) * 0.5 + rng.normal();
        let u = rng.uniform();
        let level = if class == 0 {
            usize::from(u > 0.55) + usize::from(u > 0.8)
        } else {
            2 - usize::from(u > 0.55) - usize::from(u > 0.8)
        };
        rows.push(vec![
            format!("{x0:.17e}"),
            format!("{x1:.17e}"),
            format!("{x2:.17e}"),
            levels[level].to_string(),
            class.to_string(),
        ]);
    }
    let spec = spec_of(&[
        ("num0", ColumnRole::Numeric),
        ("num1", ColumnRole::Numeric),
        ("num2", ColumnRole::Numeric),
        ("cat", ColumnRole::Categorical),
        ("label", ColumnRole::Label),
    ]);
    from_raw_rows(&header, rows, &spec, seed).expect("synthetic data is well-formed")
}

/// Benchmark with several categorical columns (three 3-level groups plus
/// two numerics). Full categorical recovery requires every group's argmax
/// to survive reconstruction, which is what the leakage experiments score.
pub fn multi_categorical(n: usize, seed: u64) -> TabularDataset {
    let mut rng = Rng::new(seed);
    let header = vec![
        "num0".to_string(),
        "num1".to_string(),
        "cat0".to_string(),
        "cat1".to_string(),
        "cat2".to_string(),
        "label".to_string(),
    ];
    let levels = ["a", "b", "c"];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let shift = if class == 0 { -0.8 } else { 0.8 };
        let x0 = shift + rng.normal();
        let x1 = -shift * 0.5 + rng.normal();
        let mut cats = Vec::with_capacity(3);
        for _ in 0..3 {
            let u = rng.uniform();
            let lv = if class == 0 {
                usize::from(u > 0.5) + usize::from(u > 0.8)
            } else {
                2 - usize::from(u > 0.5) - usize::from(u > 0.8)
            };
            cats.push(levels[lv].to_string());
        }
        let mut row = vec![format!("{x0:.17e}"), format!("{x1:.17e}")];
        row.extend(cats);
        row.push(class.to_string());
        rows.push(row);
    }
    let spec = spec_of(&[
        ("num0", ColumnRole::Numeric),
        ("num1", ColumnRole::Numeric),
        ("cat0", ColumnRole::Categorical),
        ("cat1", ColumnRole::Categorical),
        ("cat2", ColumnRole::Categorical),
        ("label", ColumnRole::Label),
    ]);
    from_raw_rows(&header, rows, &spec, seed).expect("synthetic data is well-formed")
}

/// XOR pattern in 2-d with the class given by the quadrant parity.
pub fn xor_pattern(n: usize, seed: u64) -> TabularDataset {
    let mut rng = Rng::new(seed);
    let header = vec!["f0".to_string(), "f1".to_string(), "label".to_string()];
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = rng.uniform_in(-1.0, 1.0);
        let x1 = rng.uniform_in(-1.0, 1.0);
        let class = usize::from((x0 > 0.0) != (x1 > 0.0));
        rows.push(vec![format!("{x0:.17e}"), format!("{x1:.17e}"), class.to_string()]);
    }
    let spec = spec_of(&[
        ("f0", ColumnRole::Numeric),
        ("f1", ColumnRole::Numeric),
        ("label", ColumnRole::Label),
    ]);
    from_raw_rows(&header, rows, &spec, seed).expect("synthetic data is well-formed")
}

/// Write a dataset's raw-equivalent CSV (standardized numerics are written
/// back in standardized units; the file is self-consistent for demos).
pub fn dataset_to_csv(ds: &TabularDataset, path: &std::path::Path) -> Result<(), DataError> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    let mut header: Vec<String> = ds.schema.columns.iter().map(|c| c.name.clone()).collect();
    header.push(ds.schema.label_name.clone());
    writeln!(file, "{}", header.join(","))?;
    for i in 0..ds.n() {
        let mut cells = Vec::new();
        for c in &ds.schema.columns {
            match c.role {
                ColumnRole::Numeric => {
                    // undo standardization so reloading reproduces the data
                    let v = ds.x.get(i, c.offset) * c.std + c.mean;
                    cells.push(format!("{v:.17e}"));
                }
                ColumnRole::Categorical => {
                    let row = ds.x.row(i);
                    let group = &row[c.offset..c.offset + c.width];
                    let argmax = group
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                        .expect("non-empty group")
                        .0;
                    cells.push(c.categories[argmax].clone());
                }
                ColumnRole::Label => unreachable!(),
            }
        }
        cells.push(ds.schema.label_classes[ds.y[i]].clone());
        writeln!(file, "{}", cells.join(","))?;
    }
    Ok(())
}

fn spec_of(pairs: &[(&str, ColumnRole)]) -> SchemaSpec {
    SchemaSpec { roles: pairs.iter().map(|(n, r)| (n.to_string(), *r)).collect() }
}

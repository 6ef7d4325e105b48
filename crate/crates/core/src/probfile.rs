//! CSV files of externally computed class probabilities.
//!
//! ```text
//! # method=<m> dataset=<d> shift=<s> severity=<v>
//! p0,p1,...,p{K-1},label
//! 0.9,0.05,...,0
//! ```
//!
//! Metadata values may not contain whitespace. Rows must sum to 1 within 1e-4
//! and are renormalized on load. Values are written in shortest round-trip
//! decimal form, so reading a written file reproduces every probability exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::intervals::PROBABILITY_TOLERANCE;
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum ProbfileError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing `# method=... dataset=... shift=... severity=...` line")]
    MissingMetadata,
    #[error("malformed metadata: {0}")]
    BadMetadata(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column}: cannot parse `{value}`")]
    Parse { row: usize, column: usize, value: String },
    #[error("row {row}: probabilities sum to {sum}")]
    RowSum { row: usize, sum: f64 },
    #[error("row {row}: negative or non-finite probability")]
    InvalidProbability { row: usize },
    #[error("row {row}: label {label} outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("table has no rows")]
    Empty,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ProbfileError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub method: String,
    pub dataset: String,
    pub shift: String,
    pub severity: String,
    /// `n × K`, rows summing to 1.
    pub probabilities: Matrix,
    pub labels: Vec<usize>,
}

impl ProbabilityTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.probabilities.cols()
    }

    /// Checks the invariants and renormalizes rows in place. Rows are numbered from 1.
    pub fn validate(&mut self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(ProbfileError::Empty);
        }
        let k = self.classes();
        for r in 0..self.len() {
            let row = self.probabilities.row_mut(r);
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(ProbfileError::InvalidProbability { row: r + 1 });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(ProbfileError::RowSum { row: r + 1, sum });
            }
            row.iter_mut().for_each(|p| *p /= sum);
            if self.labels[r] >= k {
                return Err(ProbfileError::LabelOutOfRange {
                    row: r + 1,
                    label: self.labels[r],
                    classes: k,
                });
            }
        }
        Ok(())
    }
}

/// How the numeric columns are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Values {
    #[default]
    Probabilities,
    /// Pre-softmax scores; a row-wise softmax is applied on load.
    Logits,
}

fn parse_metadata(line: &str) -> Result<[String; 4]> {
    let body = line.strip_prefix('#').ok_or(ProbfileError::MissingMetadata)?;
    let mut fields: [Option<String>; 4] = Default::default();
    for token in body.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| ProbfileError::BadMetadata(format!("`{token}` is not key=value")))?;
        let slot = match key {
            "method" => 0,
            "dataset" => 1,
            "shift" => 2,
            "severity" => 3,
            other => return Err(ProbfileError::BadMetadata(format!("unknown key `{other}`"))),
        };
        if fields[slot].replace(value.to_string()).is_some() {
            return Err(ProbfileError::BadMetadata(format!("duplicate key `{key}`")));
        }
    }
    let [m, d, s, v] = fields;
    match (m, d, s, v) {
        (Some(m), Some(d), Some(s), Some(v)) => Ok([m, d, s, v]),
        _ => Err(ProbfileError::BadMetadata(
            "method, dataset, shift and severity are all required".into(),
        )),
    }
}

pub fn parse_probfile(text: &str, values: Values) -> Result<ProbabilityTable> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let [method, dataset, shift, severity] = parse_metadata(first.trim_end_matches('\r'))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(rest.as_bytes());
    let header = reader.headers()?.clone();
    let k = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..k).map(|c| format!("p{c}")).chain(["label".to_string()]).collect();
    if k < 2 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(ProbfileError::BadHeader(format!(
            "expected `p0,...,p{{K-1}},label` with K ≥ 2, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != k + 1 {
            return Err(ProbfileError::FieldCount {
                row,
                expected: k + 1,
                found: record.len(),
            });
        }
        let start = data.len();
        for (column, field) in record.iter().take(k).enumerate() {
            let v: f64 = field.parse().map_err(|_| ProbfileError::Parse {
                row,
                column,
                value: field.to_string(),
            })?;
            data.push(v);
        }
        if values == Values::Logits {
            let row_vals = &mut data[start..];
            if row_vals.iter().any(|v| !v.is_finite()) {
                return Err(ProbfileError::InvalidProbability { row });
            }
            let max = row_vals.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row_vals.iter_mut().for_each(|v| *v = (*v - max).exp());
            let s: f64 = row_vals.iter().sum();
            row_vals.iter_mut().for_each(|v| *v /= s);
        }
        let label = &record[k];
        labels.push(label.parse().map_err(|_| ProbfileError::Parse {
            row,
            column: k,
            value: label.to_string(),
        })?);
    }
    if labels.is_empty() {
        return Err(ProbfileError::Empty);
    }
    let probabilities = Matrix::new(labels.len(), k, data).map_err(|_| ProbfileError::InvalidProbability {
        row: 0,
    })?;
    let mut table = ProbabilityTable {
        method,
        dataset,
        shift,
        severity,
        probabilities,
        labels,
    };
    table.validate()?;
    Ok(table)
}

pub fn read_probfile(path: impl AsRef<Path>) -> Result<ProbabilityTable> {
    read_probfile_with(path, Values::Probabilities)
}

pub fn read_probfile_with(path: impl AsRef<Path>, values: Values) -> Result<ProbabilityTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProbfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_probfile(&text, values)
}

pub fn format_probfile(table: &ProbabilityTable) -> Result<String> {
    let mut checked = table.clone();
    checked.validate()?;
    for v in [&table.method, &table.dataset, &table.shift, &table.severity] {
        if v.is_empty() || v.contains(char::is_whitespace) {
            return Err(ProbfileError::BadMetadata(format!("value `{v}` must be non-empty without whitespace")));
        }
    }
    let k = table.classes();
    let mut out = format!(
        "# method={} dataset={} shift={} severity={}\n",
        table.method, table.dataset, table.shift, table.severity
    );
    let header: Vec<String> = (0..k).map(|c| format!("p{c}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for r in 0..table.len() {
        for p in table.probabilities.row(r) {
            let _ = write!(out, "{p:?},");
        }
        let _ = writeln!(out, "{}", table.labels[r]);
    }
    Ok(out)
}

/// Writes the table as given (not renormalized), after validating it.
pub fn write_probfile(table: &ProbabilityTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_probfile(table)?).map_err(|source| ProbfileError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    const SMALL: &str = "# method=vanilla dataset=cifar10 shift=gaussian_noise severity=3\np0,p1,label\n0.25,0.75,1\n1,0,0\n";

    #[test]
    fn reads_a_hand_written_file() {
        let t = parse_probfile(SMALL, Values::Probabilities).unwrap();
        assert_eq!(t.method, "vanilla");
        assert_eq!(t.dataset, "cifar10");
        assert_eq!(t.shift, "gaussian_noise");
        assert_eq!(t.severity, "3");
        assert_eq!(t.probabilities.as_slice(), &[0.25, 0.75, 1.0, 0.0]);
        assert_eq!(t.labels, vec![1, 0]);
    }

    #[test]
    fn sum_tolerance() {
        let ok = SMALL.replace("0.25,0.75", "0.25005,0.75");
        let t = parse_probfile(&ok, Values::Probabilities).unwrap();
        assert!((t.probabilities.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let bad = SMALL.replace("1,0,0", "0.9,0,0");
        assert!(matches!(parse_probfile(&bad, Values::Probabilities), Err(ProbfileError::RowSum { row: 2, .. })));
    }

    #[test]
    fn distinct_errors() {
        let e = |s: &str| parse_probfile(s, Values::Probabilities).unwrap_err();
        assert!(matches!(e("p0,p1,label\n0.5,0.5,0\n"), ProbfileError::MissingMetadata));
        assert!(matches!(e("# method=a dataset=b shift=c\np0,p1,label\n0.5,0.5,0\n"), ProbfileError::BadMetadata(_)));
        assert!(matches!(e(&SMALL.replace("p0,p1,label", "p0,p2,label")), ProbfileError::BadHeader(_)));
        assert!(matches!(e(&SMALL.replace("1,0,0", "1,0,2")), ProbfileError::LabelOutOfRange { row: 2, label: 2, .. }));
        assert!(matches!(e(&SMALL.replace("0.25,", "x,")), ProbfileError::Parse { row: 1, column: 0, .. }));
        assert!(matches!(e(&SMALL.replace("1,0,0", "1,0")), ProbfileError::Csv(_) | ProbfileError::FieldCount { .. }));
        assert!(matches!(e("# method=a dataset=b shift=c severity=0\np0,p1,label\n"), ProbfileError::Empty));
    }

    #[test]
    fn logits_are_softmaxed() {
        let text = "# method=m dataset=d shift=clean severity=0\np0,p1,label\n0,0,1\n2,0,0\n";
        let t = parse_probfile(text, Values::Logits).unwrap();
        assert_eq!(t.probabilities.row(0), &[0.5, 0.5]);
        let e2 = 2f64.exp();
        assert!((t.probabilities.get(1, 0) - e2 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn writing_preserves_metadata_and_rejects_empty() {
        let t = parse_probfile(SMALL, Values::Probabilities).unwrap();
        let text = format_probfile(&t).unwrap();
        assert!(text.starts_with("# method=vanilla dataset=cifar10 shift=gaussian_noise severity=3\n"));
        let empty = ProbabilityTable {
            probabilities: Matrix::zeros(0, 2),
            labels: vec![],
            ..t
        };
        assert!(matches!(format_probfile(&empty), Err(ProbfileError::Empty)));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(rows in prop::collection::vec(prop::collection::vec(1e-9f64..1.0, 3), 1..30)) {
            let n = rows.len();
            let data: Vec<f64> = rows.iter().flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s)
            }).collect();
            let t = ProbabilityTable {
                method: "m".into(),
                dataset: "d".into(),
                shift: "rotation".into(),
                severity: "15".into(),
                probabilities: Matrix::new(n, 3, data).unwrap(),
                labels: (0..n).map(|i| i % 3).collect(),
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.csv");
            write_probfile(&t, &path).unwrap();
            let back = read_probfile(&path).unwrap();
            prop_assert!(back.probabilities.max_abs_diff(&t.probabilities) <= 1e-12);
            prop_assert!(back.labels == t.labels && back.method == t.method && back.severity == t.severity);
        }
    }
}

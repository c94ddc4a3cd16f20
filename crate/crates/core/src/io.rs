//! CSV datasets, float formatting and dataset splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::score::{Label, LabeledSample, Prediction};

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn parse_f64(cell: &str) -> Option<f64> {
    match cell.trim() {
        "" => None,
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        t => t.parse().ok(),
    }
}

/// Which columns hold the label and model outputs. Every other column is a
/// feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub label: String,
    /// Labels are nonnegative class indices.
    pub classification: bool,
    /// Point prediction column.
    pub point: Option<String>,
    /// Class probability columns, in class order.
    pub probs: Vec<String>,
    /// Precomputed score column.
    pub score: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label: "y".into(),
            classification: false,
            point: None,
            probs: Vec::new(),
            score: None,
        }
    }
}

impl CsvSchema {
    fn reserved(&self) -> Vec<&str> {
        let mut r = vec![self.label.as_str()];
        r.extend(self.point.as_deref());
        r.extend(self.probs.iter().map(String::as_str));
        r.extend(self.score.as_deref());
        r
    }
}

/// A rectangular table of reals with a header.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TabularDataset {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?}")))
    }

    pub fn feature_names(&self, schema: &CsvSchema) -> Vec<String> {
        let reserved = schema.reserved();
        self.header.iter().filter(|h| !reserved.contains(&h.as_str())).cloned().collect()
    }

    /// Typed samples under `schema`.
    pub fn samples(&self, schema: &CsvSchema) -> Result<Vec<LabeledSample>> {
        let label = self.column(&schema.label)?;
        let point = schema.point.as_deref().map(|c| self.column(c)).transpose()?;
        let probs = schema.probs.iter().map(|c| self.column(c)).collect::<Result<Vec<_>>>()?;
        let score = schema.score.as_deref().map(|c| self.column(c)).transpose()?;
        if [point.is_some(), !probs.is_empty(), score.is_some()].iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Data("at most one of point, probs, score may be given".into()));
        }
        let reserved = schema.reserved();
        let features: Vec<usize> = (0..self.header.len())
            .filter(|&c| !reserved.contains(&self.header[c].as_str()))
            .collect();
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let y = if schema.classification {
                    let v = row[label];
                    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                        return Err(Error::Data(format!("row {}: class label {v} is not a nonnegative integer", r + 1)));
                    }
                    Label::Class(v as usize)
                } else {
                    Label::Real(row[label])
                };
                let pred = if let Some(c) = point {
                    Some(Prediction::Point(row[c]))
                } else if let Some(c) = score {
                    Some(Prediction::Score(row[c]))
                } else if !probs.is_empty() {
                    Some(Prediction::Probs(probs.iter().map(|&c| row[c]).collect()))
                } else {
                    None
                };
                Ok(LabeledSample {
                    x: features.iter().map(|&c| row[c]).collect(),
                    y,
                    pred,
                })
            })
            .collect()
    }

    /// Table with columns `x1..xd`, `y`, and a column per prediction entry.
    pub fn from_samples(samples: &[LabeledSample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("dataset"))?;
        let d = first.x.len();
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        match &first.pred {
            None => {}
            Some(Prediction::Point(_)) => header.push("pred".into()),
            Some(Prediction::Score(_)) => header.push("score".into()),
            Some(Prediction::Probs(p)) => header.extend((0..p.len()).map(|k| format!("p{k}"))),
        }
        let rows = samples
            .iter()
            .enumerate()
            .map(|(r, s)| {
                if s.x.len() != d {
                    return Err(Error::Data(format!("row {}: expected {d} features, got {}", r + 1, s.x.len())));
                }
                let mut row = s.x.clone();
                row.push(match s.y {
                    Label::Real(v) => v,
                    Label::Class(k) => k as f64,
                });
                match &s.pred {
                    None => {}
                    Some(Prediction::Point(v)) | Some(Prediction::Score(v)) => row.push(*v),
                    Some(Prediction::Probs(p)) => row.extend(p),
                }
                if row.len() != header.len() {
                    return Err(Error::Data(format!("row {}: prediction shape differs from row 1", r + 1)));
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, rows })
    }
}

/// Reads a comma-separated file with a header row.
pub fn load_csv(path: &Path) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row_no = r + 1;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {row_no}: expected {} cells, found {}",
                header.len(),
                rec.len()
            )));
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if cell.trim().is_empty() {
                    return Err(Error::Data(format!("row {row_no}: missing value in column {:?}", header[c])));
                }
                parse_f64(cell).ok_or_else(|| {
                    Error::Data(format!(
                        "row {row_no}, column {} ({:?}): cannot parse {cell:?} as a number",
                        c + 1,
                        header[c]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    Ok(TabularDataset { header, rows })
}

pub fn save_csv(path: &Path, data: &TabularDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&data.header)?;
    for row in &data.rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Shuffles with `seed`, then slices into train, calibration and test. The
/// first two sizes are floored; the test part takes the remainder when the
/// fractions sum to one.
pub fn split_dataset<T: Clone>(data: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    check_fractions(fractions)?;
    let n = data.len();
    let size = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_train = size(fractions[0]);
    let n_cal = size(fractions[1]);
    let total: f64 = fractions.iter().sum();
    let n_test = if (total - 1.0).abs() < 1e-9 {
        n - n_train - n_cal
    } else {
        size(fractions[2])
    };
    for (name, k) in [("train", n_train), ("calibration", n_cal), ("test", n_test)] {
        if k == 0 {
            return Err(Error::Data(format!("{name} split of {n} rows is empty")));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let take = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| data[i].clone()).collect::<Vec<T>>();
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_cal),
        take(n_train + n_cal..n_train + n_cal + n_test),
    ))
}

pub fn check_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(*v > 0.0)) || f.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to at most 1, got {f:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -3.0e-300, 1.0 / 3.0, 6.02214076e23, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(parse_f64(&fmt_f64(f64::INFINITY)), Some(f64::INFINITY));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let table = TabularDataset {
            header: vec!["x1".into(), "x2".into(), "y".into()],
            rows: vec![vec![0.1, 2.0, -1.5], vec![1e-7, 3.25, 0.0], vec![-2.0, 0.3333333333333333, 9.0]],
        };
        save_csv(&a, &table).unwrap();
        let back = load_csv(&a).unwrap();
        assert_eq!(back, table);
        save_csv(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn missing_cell_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "x,y\n1,2\n3,4\n5,6\n7,8\n9,\n11,12\n").unwrap();
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("row 5"), "{err}");
        fs::write(&p, "x,y\n1,2\n3,4\n5,6\n7,8\n9\n").unwrap();
        assert!(load_csv(&p).unwrap_err().to_string().contains("row 5"));
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "x,y\n").unwrap();
        assert!(load_csv(&p).unwrap_err().to_string().contains("empty dataset"));
    }

    #[test]
    fn unparsable_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        fs::write(&p, "x,y\n1,2\n3,abc\n").unwrap();
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn schema_selects_columns() {
        let table = TabularDataset {
            header: vec!["a".into(), "p0".into(), "label".into(), "p1".into()],
            rows: vec![vec![0.5, 0.3, 1.0, 0.7]],
        };
        let schema = CsvSchema {
            label: "label".into(),
            classification: true,
            probs: vec!["p0".into(), "p1".into()],
            ..CsvSchema::default()
        };
        let s = table.samples(&schema).unwrap();
        assert_eq!(s[0].x, vec![0.5]);
        assert_eq!(s[0].y, Label::Class(1));
        assert_eq!(s[0].pred, Some(Prediction::Probs(vec![0.3, 0.7])));
        assert_eq!(table.feature_names(&schema), vec!["a".to_string()]);
        let bad = CsvSchema { label: "nope".into(), ..CsvSchema::default() };
        assert!(table.samples(&bad).is_err());
    }

    #[test]
    fn samples_round_trip_through_table() {
        let samples = crate::synth::gen_intro(5, 1);
        let table = TabularDataset::from_samples(&samples).unwrap();
        assert_eq!(table.header, vec!["x1", "y"]);
        assert_eq!(table.samples(&CsvSchema::default()).unwrap(), samples);
    }

    #[test]
    fn split_sizes() {
        let data: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_dataset(&data, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, data);
        let seven: Vec<usize> = (0..7).collect();
        let (a, b, c) = split_dataset(&seven, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (4, 1, 2));
    }

    #[test]
    fn split_is_seeded() {
        let data: Vec<usize> = (0..50).collect();
        assert_eq!(split_dataset(&data, [0.6, 0.2, 0.2], 9).unwrap(), split_dataset(&data, [0.6, 0.2, 0.2], 9).unwrap());
        assert_ne!(split_dataset(&data, [0.6, 0.2, 0.2], 9).unwrap().0, split_dataset(&data, [0.6, 0.2, 0.2], 10).unwrap().0);
    }

    #[test]
    fn split_errors() {
        let data: Vec<usize> = (0..3).collect();
        assert!(split_dataset(&data, [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_dataset(&data, [0.6, 0.0, 0.4], 0).is_err());
        assert!(split_dataset(&(0..100).collect::<Vec<_>>(), [0.6, 0.3, 0.2], 0).is_err());
    }
}

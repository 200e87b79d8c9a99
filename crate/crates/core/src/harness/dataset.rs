//! CSV ingestion: header `label,f0,f1,...`, one example per row.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Dataset, Labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvLabels {
    /// Class indices if every label is a non-negative integer, else targets.
    #[default]
    Auto,
    Classes,
    Targets,
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_with(path, CsvLabels::Auto)
}

pub fn load_csv_with(path: &Path, labels: CsvLabels) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    if &header[0] != "label" || header.len() < 2 {
        return Err(parse_err(1, "header must be `label,f0,f1,...`".into()));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("expected column `f{j}`, found `{name}`")));
        }
    }
    let d = header.len() - 1;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            let x: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric cell `{cell}` in column {}", header[j].to_string())))?;
            if !x.is_finite() {
                return Err(parse_err(line, format!("non-finite value in column {}", &header[j])));
            }
            if j == 0 {
                raw_labels.push((x, line));
            } else {
                features.push(x);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let is_class = |x: f64| x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64;
    let as_classes = match labels {
        CsvLabels::Classes => true,
        CsvLabels::Targets => false,
        CsvLabels::Auto => raw_labels.iter().all(|&(x, _)| is_class(x)),
    };
    let labels = if as_classes {
        if let Some(&(x, line)) = raw_labels.iter().find(|&&(x, _)| !is_class(x)) {
            return Err(parse_err(line, format!("label {x} is not a class index")));
        }
        let labels: Vec<usize> = raw_labels.iter().map(|&(x, _)| x as usize).collect();
        let n_classes = labels.iter().max().unwrap() + 1;
        Labels::Classes {
            labels,
            n_classes: n_classes.max(2),
        }
    } else {
        Labels::Targets(raw_labels.iter().map(|&(x, _)| x).collect())
    };
    Dataset::new(features, d, labels)
}

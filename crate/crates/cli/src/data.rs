//! CSV datasets: header `x1,..,xm,y`, one sample per row, 1-based labels.

use std::path::Path;

use ei_core::{Dataset, Sample};

use crate::error::{CliError, Result};

/// Loads a dataset, checking labels against `classes` when known.
pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let where_ = |line: u64| format!("{}:{line}", path.display());

    let header = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", where_(1))))?
        .clone();
    let m = header.len().saturating_sub(1);
    let expected: Vec<String> = (1..=m).map(|i| format!("x{i}")).chain(["y".to_string()]).collect();
    if m == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(CliError::Data(format!(
            "{}: header must be {}",
            where_(1),
            expected.join(",")
        )));
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Data(format!("{}: {e}", where_(line)))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != m + 1 {
            return Err(CliError::Data(format!(
                "{}: expected {} fields, found {}",
                where_(line),
                m + 1,
                record.len()
            )));
        }
        let mut x = Vec::with_capacity(m);
        for (j, field) in record.iter().take(m).enumerate() {
            let v: f64 = field.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                CliError::Data(format!(
                    "{}: x{} = `{field}` is not a finite number",
                    where_(line),
                    j + 1
                ))
            })?;
            x.push(v);
        }
        let label: usize = record[m].parse().map_err(|_| {
            CliError::Data(format!(
                "{}: label `{}` is not a positive integer",
                where_(line),
                &record[m]
            ))
        })?;
        if label == 0 || classes.is_some_and(|l| label > l) {
            let range = classes.map_or("1..".to_string(), |l| format!("1..={l}"));
            return Err(CliError::Data(format!(
                "{}: label {label} outside {range}",
                where_(line)
            )));
        }
        samples.push(Sample::new(x, label).map_err(|e| CliError::Data(format!("{}: {e}", where_(line))))?);
    }
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: empty dataset", path.display())));
    }
    Dataset::new(samples).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

use std::collections::HashMap;
use std::path::Path;

use super::series::{Run, SeriesSet};
use crate::{Error, Result};

/// Column mapping for CSV ingestion.
///
/// The defaults match the common TEP export: `faultNumber`,
/// `simulationRun`, `sample`, `xmeas_1..41`, `xmv_1..11`, with `sample`
/// and the two constant valves dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub label_column: String,
    pub run_column: String,
    /// Columns ignored when `variables` is `None`.
    pub exclude: Vec<String>,
    /// Explicit ordered variable columns; `None` takes every remaining
    /// column in header order.
    pub variables: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "faultNumber".into(),
            run_column: "simulationRun".into(),
            exclude: vec!["sample".into(), "xmv_5".into(), "xmv_9".into()],
            variables: None,
        }
    }
}

fn parse_label(cell: &str) -> Option<usize> {
    let x: f64 = cell.trim().parse().ok()?;
    (x.fract() == 0.0 && x >= 1.0 && x <= u32::MAX as f64).then_some(x as usize)
}

/// Reads a CSV with a header row. Rows are grouped into runs by
/// `(label, run id)` in order of first appearance; rows within a run keep
/// file order. Row numbers in errors are 1-based and count the header.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesSet> {
    let csv_err = |row: usize, reason: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut reader = ::csv::ReaderBuilder::new()
        .flexible(true)
        .trim(::csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(1, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(1, format!("missing column {name:?}")))
    };
    let label_col = find(&schema.label_column)?;
    let run_col = find(&schema.run_column)?;
    let (names, var_cols): (Vec<String>, Vec<usize>) = match &schema.variables {
        Some(vars) => vars.iter().map(|v| Ok((v.clone(), find(v)?))).collect::<Result<Vec<_>>>()?.into_iter().unzip(),
        None => header
            .iter()
            .enumerate()
            .filter(|&(i, h)| i != label_col && i != run_col && !schema.exclude.contains(h))
            .map(|(i, h)| (h.clone(), i))
            .unzip(),
    };
    if names.is_empty() {
        return Err(csv_err(1, "no variable columns".into()));
    }

    let mut runs: Vec<Run> = Vec::new();
    let mut lookup: HashMap<(usize, String), usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_err(row, e.to_string()))?;
        if record.len() != header.len() {
            return Err(csv_err(row, format!("{} fields, header has {}", record.len(), header.len())));
        }
        let label_cell = &record[label_col];
        let label = parse_label(label_cell).ok_or_else(|| csv_err(row, format!("bad fault label {label_cell:?}")))?;
        let run_id = record[run_col].to_string();
        let slot = *lookup.entry((label, run_id.clone())).or_insert_with(|| {
            runs.push(Run {
                label,
                run_id,
                samples: Vec::new(),
                sampling_period: None,
            });
            runs.len() - 1
        });
        for (&c, name) in var_cols.iter().zip(&names) {
            let cell = &record[c];
            let x: f64 = cell
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| csv_err(row, format!("column {name:?}: {cell:?} is not a finite number")))?;
            runs[slot].samples.push(x);
        }
    }
    SeriesSet::new(names, runs)
}

/// Writes `series` in the default schema layout: label, run, sample index
/// (1-based within the run), then the variables.
pub fn write_csv(series: &SeriesSet, path: &Path) -> Result<()> {
    let schema = CsvSchema::default();
    let err = |e: ::csv::Error| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        reason: e.to_string(),
    };
    let mut writer = ::csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec![schema.label_column.clone(), schema.run_column.clone(), "sample".to_string()];
    header.extend(series.variable_names.iter().cloned());
    writer.write_record(&header).map_err(err)?;
    let n = series.variables();
    for run in series.runs() {
        for (t, row) in run.samples.chunks_exact(n).enumerate() {
            let mut record = vec![run.label.to_string(), run.run_id.clone(), (t + 1).to_string()];
            record.extend(row.iter().map(|x| format!("{x:?}")));
            writer.write_record(&record).map_err(err)?;
        }
    }
    writer.flush()?;
    Ok(())
}

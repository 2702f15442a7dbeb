use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Timepoint labels used when no schema is supplied.
pub const DEFAULT_TIMEPOINTS: [&str; 6] = ["M00", "M06", "M12", "M24", "M36", "M48"];

/// Column layout of a longitudinal CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct TableSchema {
    /// Ordered timepoint labels; rows with other labels are rejected.
    pub timepoints: Vec<String>,
    pub patient_column: String,
    pub timepoint_column: String,
    pub target_column: String,
}

impl Default for TableSchema {
    fn default() -> Self {
        Self {
            timepoints: DEFAULT_TIMEPOINTS.iter().map(|s| s.to_string()).collect(),
            patient_column: "patient_id".into(),
            timepoint_column: "timepoint".into(),
            target_column: "target".into(),
        }
    }
}

impl TableSchema {
    pub fn with_timepoints(timepoints: Vec<String>) -> Self {
        Self {
            timepoints,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub patient_id: String,
    /// Index into the schema's timepoint list.
    pub timepoint: usize,
    /// `None` marks a missing cell.
    pub features: Vec<Option<f64>>,
    pub target: Option<f64>,
}

/// Raw longitudinal observations keyed by (patient, timepoint).
#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalTable {
    pub feature_names: Vec<String>,
    pub timepoints: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "na")
}

impl LongitudinalTable {
    pub fn new(
        feature_names: Vec<String>,
        timepoints: Vec<String>,
        rows: Vec<TableRow>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            if row.features.len() != feature_names.len() {
                return Err(Error::Dimension(format!(
                    "row for {} has {} features, expected {}",
                    row.patient_id,
                    row.features.len(),
                    feature_names.len()
                )));
            }
            if row.timepoint >= timepoints.len() {
                return Err(Error::InvalidData(format!(
                    "timepoint index {} out of range",
                    row.timepoint
                )));
            }
            if !seen.insert((row.patient_id.as_str(), row.timepoint)) {
                return Err(Error::InvalidData(format!(
                    "duplicate row for patient {} at {}",
                    row.patient_id, timepoints[row.timepoint]
                )));
            }
        }
        Ok(Self {
            feature_names,
            timepoints,
            rows,
        })
    }

    pub fn n_missing(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.features.iter().filter(|f| f.is_none()).count() + r.target.is_none() as usize)
            .sum()
    }

    /// Parses CSV text. `origin` is only used in error messages.
    pub fn from_reader<R: Read>(input: R, schema: &TableSchema, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                message: format!("missing required column `{name}`"),
            })
        };
        let patient_col = find(&schema.patient_column)?;
        let time_col = find(&schema.timepoint_column)?;
        let target_col = find(&schema.target_column)?;
        let feature_cols: Vec<usize> = (0..headers.len())
            .filter(|c| ![patient_col, time_col, target_col].contains(c))
            .collect();
        let feature_names: Vec<String> =
            feature_cols.iter().map(|&c| headers[c].to_string()).collect();
        let time_index: HashMap<&str, usize> = schema
            .timepoints
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();

        let mut rows = Vec::new();
        let mut seen: HashMap<(String, usize), usize> = HashMap::new();
        for (k, record) in rdr.records().enumerate() {
            let record = record?;
            let line = k + 2;
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message,
            };
            let parse = |col: usize| -> Result<Option<f64>> {
                let cell = record.get(col).unwrap_or("");
                if is_missing(cell) {
                    return Ok(None);
                }
                cell.parse::<f64>()
                    .map(Some)
                    .map_err(|_| err(format!("non-numeric value `{cell}` in column `{}`", &headers[col])))
            };
            let patient_id = record.get(patient_col).unwrap_or("").to_string();
            if patient_id.is_empty() {
                return Err(err("empty patient id".into()));
            }
            let label = record.get(time_col).unwrap_or("");
            let timepoint = *time_index
                .get(label)
                .ok_or_else(|| err(format!("unknown timepoint label `{label}`")))?;
            if let Some(first) = seen.insert((patient_id.clone(), timepoint), line) {
                return Err(err(format!(
                    "duplicate key ({patient_id}, {label}); first seen on line {first}"
                )));
            }
            let features = feature_cols
                .iter()
                .map(|&c| parse(c))
                .collect::<Result<Vec<_>>>()?;
            let target = parse(target_col)?;
            rows.push(TableRow {
                patient_id,
                timepoint,
                features,
                target,
            });
        }
        Self::new(feature_names, schema.timepoints.clone(), rows)
    }

    /// Writes the table in the input schema: `patient_id,timepoint,<features>,target`.
    /// Missing cells are written empty.
    pub fn to_writer<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["patient_id".to_string(), "timepoint".to_string()];
        header.extend(self.feature_names.iter().cloned());
        header.push("target".into());
        wtr.write_record(&header)?;
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            let mut rec = vec![row.patient_id.clone(), self.timepoints[row.timepoint].clone()];
            rec.extend(row.features.iter().map(cell));
            rec.push(cell(&row.target));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads a longitudinal CSV file. Missing cells are flagged, not imputed.
pub fn load_csv(path: &Path, schema: &TableSchema) -> Result<LongitudinalTable> {
    let file = std::fs::File::open(path)?;
    LongitudinalTable::from_reader(std::io::BufReader::new(file), schema, path)
}

pub fn write_csv(path: &Path, table: &LongitudinalTable) -> Result<()> {
    let file = std::fs::File::create(path)?;
    table.to_writer(std::io::BufWriter::new(file))
}

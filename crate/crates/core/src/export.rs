//! Plain CSV writers shared by the graph, solver, metrics and stability
//! outputs. Floats are written with `{}` formatting, which is the shortest
//! representation that parses back to the same bits.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::Result;

/// Writes `matrix` with a header row of `col_labels` and a leading label
/// column. `corner` names the label column.
pub fn write_labeled_matrix<W: Write>(
    out: W,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    matrix: &DMatrix<f64>,
) -> Result<()> {
    debug_assert_eq!(row_labels.len(), matrix.nrows());
    debug_assert_eq!(col_labels.len(), matrix.ncols());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = Vec::with_capacity(col_labels.len() + 1);
    header.push(corner.to_string());
    header.extend(col_labels.iter().cloned());
    wtr.write_record(&header)?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut record = Vec::with_capacity(matrix.ncols() + 1);
        record.push(label.clone());
        record.extend(matrix.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_labeled_matrix`], returning the row
/// labels, column labels and values.
pub fn read_labeled_matrix<R: std::io::Read>(
    input: R,
) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let cols: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        rows.push(record.get(0).unwrap_or_default().to_string());
        let parsed: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                crate::Error::InvalidData(format!("matrix row {}: {e}", line + 1))
            })?;
        if parsed.len() != cols.len() {
            return Err(crate::Error::Dimension(format!(
                "matrix row {} has {} values, header has {}",
                line + 1,
                parsed.len(),
                cols.len()
            )));
        }
        values.push(parsed);
    }
    let m = crate::types::matrix_from_rows(&values)?;
    let m = if values.is_empty() {
        DMatrix::zeros(0, cols.len())
    } else {
        m
    };
    Ok((rows, cols, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn labeled_matrix_round_trip_is_bit_exact() {
        let m = dmatrix![0.1 + 0.2, -1.0 / 3.0; 1e-300, 123456.789];
        let names = vec!["a".to_string(), "b".to_string()];
        let mut buf = Vec::new();
        write_labeled_matrix(&mut buf, "feature", &names, &names, &m).unwrap();
        let (rows, cols, back) = read_labeled_matrix(buf.as_slice()).unwrap();
        assert_eq!(rows, names);
        assert_eq!(cols, names);
        assert_eq!(back, m);
    }
}

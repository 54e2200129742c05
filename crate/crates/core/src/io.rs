//! CSV matrix files: one row per variable, values written with 17 significant digits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use csv::{ReaderBuilder, Terminator, WriterBuilder};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Formats a value so that parsing it back yields the identical `f64`.
pub fn format_full(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn write_matrix_csv<W: Write>(writer: W, matrix: &DMatrix<f64>, header: bool) -> Result<()> {
    let mut out = WriterBuilder::new().terminator(Terminator::Any(b'\n')).from_writer(writer);
    if header {
        out.write_record((1..=matrix.ncols()).map(|j| format!("obs{j}")))?;
    }
    for row in matrix.row_iter() {
        out.write_record(row.iter().map(|&v| format_full(v)))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(reader: R, header: bool) -> Result<DMatrix<f64>> {
    let mut input = ReaderBuilder::new().has_headers(header).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in input.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| Error::Parse(format!("row {}: cannot parse {field:?}", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch { expected: first.len(), found: row.len() });
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Parse("matrix file is empty".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn write_matrix_file(path: impl AsRef<Path>, matrix: &DMatrix<f64>, header: bool) -> Result<()> {
    let file = File::create(path)?;
    write_matrix_csv(BufWriter::new(file), matrix, header)
}

pub fn read_matrix_file(path: impl AsRef<Path>, header: bool) -> Result<DMatrix<f64>> {
    let file = File::open(path)?;
    read_matrix_csv(BufReader::new(file), header)
}

/// Reads a vector stored either as a single row or a single column.
pub fn read_vector_file(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let matrix = read_matrix_file(path, false)?;
    if matrix.nrows() != 1 && matrix.ncols() != 1 {
        return Err(Error::Parse(format!("expected a vector, found a {}x{} matrix", matrix.nrows(), matrix.ncols())));
    }
    Ok(DVector::from_iterator(matrix.len(), matrix.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 6.02e23, f64::MIN_POSITIVE, -0.0]);
        for header in [false, true] {
            let mut buffer = Vec::new();
            write_matrix_csv(&mut buffer, &m, header).unwrap();
            let text = String::from_utf8(buffer.clone()).unwrap();
            assert!(!text.contains('\r'));
            assert_eq!(text.lines().count(), 2 + usize::from(header));
            assert_eq!(read_matrix_csv(buffer.as_slice(), header).unwrap(), m);
        }
    }

    #[test]
    fn ragged_and_garbage_rejected() {
        assert!(read_matrix_csv("1,2\n3\n".as_bytes(), false).is_err());
        assert!(read_matrix_csv("1,x\n".as_bytes(), false).is_err());
        assert!(read_matrix_csv("".as_bytes(), false).is_err());
    }

    #[test]
    fn vector_file_accepts_row_or_column() {
        let dir = tempfile::tempdir().unwrap();
        let row = dir.path().join("row.csv");
        std::fs::write(&row, "0.6,0.8\n").unwrap();
        let column = dir.path().join("col.csv");
        std::fs::write(&column, "0.6\n0.8\n").unwrap();
        assert_eq!(read_vector_file(&row).unwrap(), read_vector_file(&column).unwrap());
        let square = dir.path().join("sq.csv");
        std::fs::write(&square, "1,0\n0,1\n").unwrap();
        assert!(read_vector_file(&square).is_err());
    }
}

//! Delimited-text data tables.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Column-oriented table of raw cell strings. Columns are parsed on demand
/// according to the role the formula assigns them.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    headers: Vec<String>,
    columns: Vec<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null")
}

impl Table {
    pub fn new(headers: Vec<String>, columns: Vec<Vec<String>>) -> Result<Self> {
        if headers.len() != columns.len() {
            return Err(Error::Dimension { what: "table columns", expected: headers.len(), found: columns.len() });
        }
        let n = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().position(|c| c.len() != n) {
            return Err(Error::data(format!("column `{}` has {} rows, expected {n}", headers[bad], columns[bad].len())));
        }
        for (i, h) in headers.iter().enumerate() {
            if headers[..i].contains(h) {
                return Err(Error::data(format!("duplicate column `{h}`")));
            }
        }
        Ok(Table { headers, columns })
    }

    /// Reads a delimited file with a header row. Lines starting with `#` are
    /// comments. Missing cells are rejected.
    pub fn from_reader<R: Read>(reader: R, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); headers.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            for (c, cell) in record.iter().enumerate() {
                if is_missing(cell) {
                    return Err(Error::data(format!("missing value in column `{}` at data row {}", headers[c], line + 1)));
                }
                columns[c].push(cell.to_string());
            }
        }
        Table::new(headers, columns)
    }

    pub fn from_path(path: impl AsRef<Path>, delimiter: u8) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(std::io::BufReader::new(file), delimiter)
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[String]> {
        let idx = self.headers.iter().position(|h| h == name)?;
        Some(&self.columns[idx])
    }

    fn require(&self, name: &str) -> Result<&[String]> {
        self.column(name).ok_or_else(|| Error::data(format!("no column `{name}`")))
    }

    /// Parses a column as finite reals.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        self.require(name)?
            .iter()
            .enumerate()
            .map(|(row, cell)| {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::data(format!("column `{name}` row {}: `{cell}` is not numeric", row + 1)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::data(format!("column `{name}` row {}: non-finite value", row + 1)))
                }
            })
            .collect()
    }

    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        Ok(self.require(name)?.to_vec())
    }

    /// Replaces (or appends) a column.
    pub fn set_column(&mut self, name: &str, values: Vec<String>) -> Result<()> {
        if !self.columns.is_empty() && values.len() != self.n_rows() {
            return Err(Error::Dimension { what: "column length", expected: self.n_rows(), found: values.len() });
        }
        match self.headers.iter().position(|h| h == name) {
            Some(i) => self.columns[i] = values,
            None => {
                self.headers.push(name.to_string());
                self.columns.push(values);
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        w.write_record(&self.headers)?;
        for r in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| c[r].as_str()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_with_comments() {
        let text = "# produced by a tool\ny,n,g\n1,2,a\n0,1,b\n";
        let t = Table::from_reader(text.as_bytes(), b',').unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.numeric("n").unwrap(), vec![2.0, 1.0]);
        assert_eq!(t.labels("g").unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn rejects_missing_and_non_numeric() {
        assert!(Table::from_reader("y,n\n1,\n".as_bytes(), b',').is_err());
        assert!(Table::from_reader("y,n\n1,NA\n".as_bytes(), b',').is_err());
        let t = Table::from_reader("y,n\n1,x\n".as_bytes(), b',').unwrap();
        assert!(t.numeric("n").is_err());
        assert!(t.numeric("missing").is_err());
    }

    #[test]
    fn write_then_read() {
        let t = Table::new(vec!["a".into(), "b".into()], vec![vec!["1".into(), "2".into()], vec!["x".into(), "y".into()]])
            .unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf, b'\t').unwrap();
        assert_eq!(Table::from_reader(buf.as_slice(), b'\t').unwrap(), t);
    }
}

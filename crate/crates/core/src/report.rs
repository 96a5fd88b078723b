//! Tabular run reports with an exact CSV round trip.

use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

/// A CSV cell. Floats are written with 17 significant digits so they parse
/// back bit-for-bit.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()),
            (Value::Text(a), Value::Text(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            Value::Text(_) => None,
        }
    }

    fn parse(cell: &str) -> Value {
        if let Ok(i) = cell.parse::<i64>() {
            return Value::Int(i);
        }
        match cell.parse::<f64>() {
            Ok(f) if cell.contains(['e', 'E', '.']) || !f.is_finite() => Value::Float(f),
            _ => Value::Text(cell.to_string()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) if x.is_finite() => write!(f, "{x:.16e}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Int(v as i64)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("row {row} has {got} cells, header has {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header, one row per iteration or trial, and a key/value summary that is
/// not part of the CSV.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunReport {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    #[serde(skip)]
    pub summary: Vec<(String, Value)>,
}

impl RunReport {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), ..Default::default() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn summarize(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.push((key.to_string(), value.into()));
    }

    pub fn summary_value(&self, key: &str) -> Option<&Value> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Value>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[idx]).collect())
    }

    /// Numeric column as `f64`; non-numeric cells become NaN.
    pub fn column_f64(&self, name: &str) -> Option<Vec<f64>> {
        self.column(name).map(|c| c.iter().map(|v| v.as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ReportError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.columns)?;
        for row in &self.rows {
            wr.write_record(row.iter().map(|v| v.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, ReportError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Parses a report written by [`RunReport::write_csv`] (the summary is not restored).
    pub fn read_csv<R: Read>(r: R) -> Result<Self, ReportError> {
        let mut rd = csv::Reader::from_reader(r);
        let columns: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(ReportError::RaggedRow { row: i, got: rec.len(), expected: columns.len() });
            }
            rows.push(rec.iter().map(Value::parse).collect());
        }
        Ok(Self { columns, rows, summary: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip() {
        let mut r = RunReport::new(["iter", "J", "method", "flag"]);
        r.push(vec![0usize.into(), 0.1.into(), "kkt".into(), false.into()]);
        r.push(vec![1usize.into(), (1.0 / 3.0).into(), "svd".into(), true.into()]);
        r.push(vec![2usize.into(), f64::NAN.into(), "fd".into(), true.into()]);
        r.push(vec![3usize.into(), 2.0.into(), "a,b".into(), true.into()]);
        let s = r.to_csv_string().unwrap();
        assert!(s.starts_with("iter,J,method,flag\n0,1.0000000000000001e-1,kkt,0\n"));
        let back = RunReport::read_csv(s.as_bytes()).unwrap();
        assert_eq!(back.columns, r.columns);
        assert_eq!(back.rows, r.rows);
    }

    proptest! {
        #[test]
        fn floats_round_trip(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let mut r = RunReport::new(["x"]);
            r.push(vec![x.into()]);
            let back = RunReport::read_csv(r.to_csv_string().unwrap().as_bytes()).unwrap();
            prop_assert_eq!(back.rows, r.rows);
        }
    }
}

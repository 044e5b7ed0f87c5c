use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};

const DATETIME_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S"];

/// Multivariate series with one timestamp per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<String>,
    columns: Vec<String>,
    /// Row-major `rows x N`.
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StampKind {
    DateTime,
    Date,
    Number,
    Text,
}

fn stamp_kind(s: &str) -> StampKind {
    if DATETIME_FORMATS.iter().any(|f| NaiveDateTime::parse_from_str(s, f).is_ok()) {
        StampKind::DateTime
    } else if chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok() {
        StampKind::Date
    } else if s.parse::<f64>().is_ok() {
        StampKind::Number
    } else {
        StampKind::Text
    }
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    DATETIME_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn compare_stamps(kind: StampKind, a: &str, b: &str) -> Option<Ordering> {
    match kind {
        StampKind::DateTime => Some(parse_datetime(a)?.cmp(&parse_datetime(b)?)),
        StampKind::Date => {
            let p = |s| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok();
            Some(p(a)?.cmp(&p(b)?))
        }
        StampKind::Number => a.parse::<f64>().ok()?.partial_cmp(&b.parse::<f64>().ok()?),
        StampKind::Text => Some(a.cmp(b)),
    }
}

impl SeriesTable {
    pub fn new(timestamps: Vec<String>, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyTable("no value columns".into()));
        }
        if timestamps.is_empty() {
            return Err(Error::EmptyTable("no data rows".into()));
        }
        if values.len() != timestamps.len() * columns.len() {
            return Err(Error::dim(
                "series_table",
                format!("{} values for {} rows x {} columns", values.len(), timestamps.len(), columns.len()),
            ));
        }
        let kind = stamp_kind(&timestamps[0]);
        for (i, w) in timestamps.windows(2).enumerate() {
            match compare_stamps(kind, &w[0], &w[1]) {
                Some(Ordering::Less) => {}
                Some(_) => {
                    return Err(Error::Format(format!(
                        "timestamps not strictly increasing at row {}: {:?} then {:?}",
                        i + 2,
                        w[0],
                        w[1]
                    )))
                }
                None => {
                    return Err(Error::Format(format!("row {}: timestamp {:?} has a different format", i + 2, w[1])))
                }
            }
        }
        Ok(Self { timestamps, columns, values })
    }

    /// Hourly timestamps starting at 2020-01-01 00:00:00.
    pub fn with_hourly_index(columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let rows = values.len() / columns.len().max(1);
        let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid start date");
        let ts = (0..rows)
            .map(|i| (start + chrono::Duration::hours(i as i64)).format("%Y-%m-%d %H:%M:%S").to_string())
            .collect();
        Self::new(ts, columns, values)
    }

    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns.len() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.value(r, col)).collect()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Format(format!("unreadable header: {e}")))?.clone();
        if header.len() < 2 {
            return Err(Error::Format("header needs a timestamp column and at least one value column".into()));
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Load { row, column: 0, detail: e.to_string() })?;
            if rec.len() != header.len() {
                return Err(Error::Load {
                    row,
                    column: rec.len().min(header.len()),
                    detail: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            timestamps.push(rec[0].to_string());
            for (c, cell) in rec.iter().enumerate().skip(1) {
                let v: f64 = cell.parse().map_err(|_| Error::Load {
                    row,
                    column: c + 1,
                    detail: format!("cannot parse {cell:?} as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Load { row, column: c + 1, detail: format!("non-finite value {cell:?}") });
                }
                values.push(v);
            }
        }
        if timestamps.is_empty() {
            return Err(Error::EmptyTable("header only, no data rows".into()));
        }
        Self::new(timestamps, columns, values)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["date".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(fmt)?;
        let n = self.n_vars();
        for (r, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.clone()];
            // `{:?}` prints the shortest representation that parses back exactly.
            rec.extend(self.values[r * n..(r + 1) * n].iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(f))
    }
}

//! Timestamp-indexed feature matrices and their CSV form.
//!
//! A file holds `timestamp[,grid_id],<features...>`. Timestamps are ISO-8601
//! (date-only, naive datetime, or RFC 3339 with offset, normalised to UTC).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};

use crate::error::{Error, Result};

pub const TIMESTAMP_COLUMN: &str = "timestamp";
pub const GRID_COLUMN: &str = "grid_id";

/// An M×F matrix of feature values indexed by strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTable {
    timestamps: Vec<NaiveDateTime>,
    grid_id: Option<String>,
    feature_names: Vec<String>,
    units: Vec<String>,
    values: Vec<f64>,
}

impl TimeTable {
    /// Builds a table from row-major values.
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        feature_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if feature_names.len() < 2 {
            return Err(Error::InvalidTable(format!(
                "need at least 2 features, got {}",
                feature_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidTable(format!("duplicate feature `{name}`")));
            }
        }
        if values.len() != timestamps.len() * feature_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} rows x {} features",
                values.len(),
                timestamps.len(),
                feature_names.len()
            )));
        }
        if let Some(pair) = timestamps.windows(2).find(|p| p[0] >= p[1]) {
            return Err(Error::InvalidTable(format!(
                "timestamps not strictly increasing at {}",
                format_timestamp(&pair[1])
            )));
        }
        let units = vec![String::new(); feature_names.len()];
        Ok(Self {
            timestamps,
            grid_id: None,
            feature_names,
            units,
            values,
        })
    }

    pub fn with_grid_id(mut self, grid_id: Option<String>) -> Self {
        self.grid_id = grid_id;
        self
    }

    pub fn with_units(mut self, units: Vec<String>) -> Result<Self> {
        if units.len() != self.feature_names.len() {
            return Err(Error::LengthMismatch {
                left: units.len(),
                right: self.feature_names.len(),
            });
        }
        self.units = units;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn grid_id(&self) -> Option<&str> {
        self.grid_id.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    /// Row-major values, `n_rows * n_features` long.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let f = self.n_features();
        &self.values[r * f..(r + 1) * f]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_features() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let f = self.n_features();
        self.values[r * f + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let f = self.n_features();
        self.values.iter().skip(c).step_by(f).copied().collect()
    }

    pub fn set_column(&mut self, c: usize, column: &[f64]) {
        let f = self.n_features();
        for (r, v) in column.iter().enumerate() {
            self.values[r * f + c] = *v;
        }
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Keeps only rows for which `keep` returns true.
    pub fn filter_rows(&self, mut keep: impl FnMut(&NaiveDateTime) -> bool) -> TimeTable {
        let f = self.n_features();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (r, ts) in self.timestamps.iter().enumerate() {
            if keep(ts) {
                timestamps.push(*ts);
                values.extend_from_slice(&self.values[r * f..(r + 1) * f]);
            }
        }
        TimeTable {
            timestamps,
            values,
            ..self.clone_meta()
        }
    }

    /// Same metadata, different rows.
    pub fn with_rows(&self, timestamps: Vec<NaiveDateTime>, values: Vec<f64>) -> Result<TimeTable> {
        let table = TimeTable::new(timestamps, self.feature_names.clone(), values)?;
        Ok(TimeTable {
            grid_id: self.grid_id.clone(),
            units: self.units.clone(),
            ..table
        })
    }

    /// Selects (and reorders) columns by name.
    pub fn select(&self, names: &[String]) -> Result<TimeTable> {
        let idx = names
            .iter()
            .map(|n| self.feature_index(n))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(self.n_rows() * idx.len());
        for r in 0..self.n_rows() {
            let row = self.row(r);
            values.extend(idx.iter().map(|&c| row[c]));
        }
        let table = TimeTable::new(self.timestamps.clone(), names.to_vec(), values)?;
        Ok(TimeTable {
            grid_id: self.grid_id.clone(),
            units: idx.iter().map(|&c| self.units[c].clone()).collect(),
            ..table
        })
    }

    /// Appends a column computed elsewhere.
    pub fn push_column(&mut self, name: &str, unit: &str, column: &[f64]) -> Result<()> {
        if column.len() != self.n_rows() {
            return Err(Error::LengthMismatch {
                left: column.len(),
                right: self.n_rows(),
            });
        }
        if self.feature_names.iter().any(|n| n == name) {
            return Err(Error::InvalidTable(format!("duplicate feature `{name}`")));
        }
        let f = self.n_features();
        let mut values = Vec::with_capacity(self.n_rows() * (f + 1));
        for (r, extra) in column.iter().enumerate() {
            values.extend_from_slice(&self.values[r * f..(r + 1) * f]);
            values.push(*extra);
        }
        self.values = values;
        self.feature_names.push(name.to_string());
        self.units.push(unit.to_string());
        Ok(())
    }

    /// Calendar years present, with the row range each occupies.
    pub fn year_ranges(&self) -> Vec<(i32, std::ops::Range<usize>)> {
        let mut out: Vec<(i32, std::ops::Range<usize>)> = Vec::new();
        for (r, ts) in self.timestamps.iter().enumerate() {
            match out.last_mut() {
                Some((year, range)) if *year == ts.year() => range.end = r + 1,
                _ => out.push((ts.year(), r..r + 1)),
            }
        }
        out
    }

    fn clone_meta(&self) -> TimeTable {
        TimeTable {
            timestamps: Vec::new(),
            grid_id: self.grid_id.clone(),
            feature_names: self.feature_names.clone(),
            units: self.units.clone(),
            values: Vec::new(),
        }
    }

    /// Writes the table as CSV, including a `grid_id` column when set.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec![TIMESTAMP_COLUMN.to_string()];
        if self.grid_id.is_some() {
            header.push(GRID_COLUMN.to_string());
        }
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut record = vec![format_timestamp(&self.timestamps[r])];
            if let Some(g) = &self.grid_id {
                record.push(g.clone());
            }
            record.extend(self.row(r).iter().map(|v| v.to_string()));
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Writes several grids into one CSV (each table must carry a grid id).
pub fn save_grids(tables: &[TimeTable], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let mut one = Vec::new();
        t.write_csv(&mut one)?;
        let text = String::from_utf8(one).expect("csv output is utf-8");
        let body = if i == 0 {
            text.as_str()
        } else {
            text.split_once('\n').map(|(_, rest)| rest).unwrap_or("")
        };
        buf.extend_from_slice(body.as_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    if ts.time() == NaiveTime::MIN {
        ts.format("%Y-%m-%d").to_string()
    } else if ts.nanosecond() == 0 {
        ts.format("%Y-%m-%dT%H:%M:%S").to_string()
    } else {
        ts.format("%Y-%m-%dT%H:%M:%S%.f").to_string()
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    let naive = s.strip_suffix('Z').unwrap_or(s);
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(naive, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(naive, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_time(NaiveTime::MIN))
}

struct RawRow {
    line: usize,
    ts: NaiveDateTime,
    values: Vec<f64>,
}

/// Parses a CSV into per-grid tables, sorted by grid id. Files without a
/// `grid_id` column yield a single table with no grid id.
///
/// `schema` lists the expected features; an empty schema accepts the file's
/// columns as they are.
pub fn read_grids<R: Read>(input: R, schema: &[String]) -> Result<Vec<TimeTable>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some(TIMESTAMP_COLUMN) {
        return Err(Error::MissingColumn(TIMESTAMP_COLUMN.to_string()));
    }
    let has_grid = header.get(1).map(String::as_str) == Some(GRID_COLUMN);
    let first_feature = if has_grid { 2 } else { 1 };
    let file_features: Vec<String> = header[first_feature..].to_vec();

    let features: Vec<String> = if schema.is_empty() {
        file_features.clone()
    } else {
        for name in schema {
            if !file_features.contains(name) {
                return Err(Error::MissingColumn(name.clone()));
            }
        }
        if let Some(extra) = file_features.iter().find(|n| !schema.contains(n)) {
            return Err(Error::UnexpectedColumn(extra.clone()));
        }
        schema.to_vec()
    };
    let source_col: Vec<usize> = features
        .iter()
        .map(|n| first_feature + file_features.iter().position(|f| f == n).unwrap())
        .collect();

    let mut grids: BTreeMap<Option<String>, Vec<RawRow>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let raw_ts = record.get(0).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| Error::UnparseableTimestamp {
            value: raw_ts.to_string(),
            line,
        })?;
        let grid = has_grid.then(|| record.get(1).unwrap_or("").to_string());
        let mut values = Vec::with_capacity(features.len());
        for (name, &col) in features.iter().zip(&source_col) {
            let raw = record.get(col).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::UnparseableValue {
                value: raw.to_string(),
                column: name.clone(),
                line,
            })?;
            values.push(v);
        }
        grids.entry(grid).or_default().push(RawRow { line, ts, values });
    }

    let mut out = Vec::with_capacity(grids.len());
    for (grid, mut rows) in grids {
        rows.sort_by(|a, b| a.ts.cmp(&b.ts).then(a.line.cmp(&b.line)));
        if let Some(pair) = rows.windows(2).find(|p| p[0].ts == p[1].ts) {
            return Err(Error::DuplicateTimestamp {
                timestamp: format_timestamp(&pair[0].ts),
                grid,
            });
        }
        let timestamps = rows.iter().map(|r| r.ts).collect();
        let values = rows.into_iter().flat_map(|r| r.values).collect();
        out.push(TimeTable::new(timestamps, features.clone(), values)?.with_grid_id(grid));
    }
    Ok(out)
}

/// Loads a single-grid CSV (see [`read_grids`] for the format).
pub fn load_table(path: &Path, schema: &[String]) -> Result<TimeTable> {
    let mut grids = load_grids(path, schema)?;
    match grids.len() {
        0 => Err(Error::InvalidTable("file has no rows".into())),
        1 => Ok(grids.pop().unwrap()),
        n => Err(Error::MultipleGrids(n)),
    }
}

pub fn load_grids(path: &Path, schema: &[String]) -> Result<Vec<TimeTable>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grids(file, schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn loads_well_formed_csv() {
        let csv = "timestamp,t2m,u10\n2000-01-01,1,2\n2000-01-02,3,4\n2000-01-03,5,6\n";
        let t = read_grids(csv.as_bytes(), &names(&["t2m", "u10"])).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].n_rows(), 3);
        assert_eq!(t[0].column(1), vec![2.0, 4.0, 6.0]);
        assert_eq!(t[0].grid_id(), None);
    }

    #[test]
    fn missing_schema_column_is_an_error() {
        let csv = "timestamp,u10,v10\n2000-01-01,1,2\n";
        let err = read_grids(csv.as_bytes(), &names(&["t2m", "u10", "v10"])).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "t2m"));
    }

    #[test]
    fn extra_column_is_an_error() {
        let csv = "timestamp,u10,v10,tp\n2000-01-01,1,2,3\n";
        let err = read_grids(csv.as_bytes(), &names(&["u10", "v10"])).unwrap_err();
        assert!(matches!(err, Error::UnexpectedColumn(c) if c == "tp"));
    }

    #[test]
    fn shuffled_rows_come_back_sorted() {
        let days = [4, 1, 5, 3, 2];
        let mut csv = String::from("timestamp,a,b\n");
        for d in days {
            csv.push_str(&format!("2001-03-0{d},{d},{}\n", d * 10));
        }
        let t = read_grids(csv.as_bytes(), &[]).unwrap().pop().unwrap();
        // Sort oracle: order the raw rows by day directly.
        let mut expected: Vec<i32> = days.to_vec();
        expected.sort();
        let got: Vec<f64> = t.column(0);
        assert_eq!(got, expected.iter().map(|&d| d as f64).collect::<Vec<_>>());
        assert!(t.timestamps().windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn duplicate_timestamp_within_grid_rejected_but_allowed_across_grids() {
        let ok = "timestamp,grid_id,a,b\n2000-01-01,g1,1,2\n2000-01-01,g2,3,4\n";
        let grids = read_grids(ok.as_bytes(), &[]).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!(grids[1].grid_id(), Some("g2"));

        let bad = "timestamp,grid_id,a,b\n2000-01-01,g1,1,2\n2000-01-01,g1,3,4\n";
        assert!(matches!(
            read_grids(bad.as_bytes(), &[]),
            Err(Error::DuplicateTimestamp { .. })
        ));
    }

    #[test]
    fn unparseable_timestamp_reports_line() {
        let csv = "timestamp,a,b\n2000-01-01,1,2\nyesterday,3,4\n";
        let err = read_grids(csv.as_bytes(), &[]).unwrap_err();
        assert!(matches!(err, Error::UnparseableTimestamp { line: 3, .. }));
    }

    #[test]
    fn timestamp_formats() {
        let a = parse_timestamp("2020-06-01").unwrap();
        let b = parse_timestamp("2020-06-01T00:00:00Z").unwrap();
        let c = parse_timestamp("2020-06-01T02:00:00+02:00").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(format_timestamp(&a), "2020-06-01");
        let d = parse_timestamp("2020-06-01T12:30:00").unwrap();
        assert_eq!(format_timestamp(&d), "2020-06-01T12:30:00");
    }

    #[test]
    fn csv_round_trip_preserves_table() {
        let csv = "timestamp,grid_id,a,b\n2000-01-01,g,0.1,-2.5\n2000-01-02,g,1e-7,3\n";
        let t = read_grids(csv.as_bytes(), &[]).unwrap().pop().unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let back = read_grids(out.as_slice(), &[]).unwrap().pop().unwrap();
        assert_eq!(t, TimeTable { units: back.units.clone(), ..back });
    }
}

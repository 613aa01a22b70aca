//! The price-relative grid shared by every stage of the engine.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Leading column names recognised as a time index in wide CSV files.
const TIME_COLUMNS: [&str; 4] = ["timestamp", "date", "time", "t"];

/// A `T x M` grid of gross one-period returns `x[t][m] = p[t][m] / p[t-1][m]`.
///
/// Stored row-major: row `t` holds the relatives of every asset over period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceRelativeMatrix {
    values: Vec<f64>,
    n_periods: usize,
    tickers: Vec<String>,
    timestamps: Option<Vec<String>>,
    /// Cells that came from an absent or unusable bar; empty when none.
    missing: Vec<bool>,
}

impl PriceRelativeMatrix {
    /// Builds a matrix from rows, checking that every entry is finite and positive.
    pub fn from_rows(rows: Vec<Vec<f64>>, tickers: Vec<String>) -> Result<Self> {
        let n_assets = tickers.len();
        let n_periods = rows.len();
        let mut values = Vec::with_capacity(n_periods * n_assets);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != n_assets {
                return Err(Error::Shape(format!(
                    "row {t} has {} entries, expected {n_assets}",
                    row.len()
                )));
            }
            values.extend(row);
        }
        Self::from_flat(values, n_periods, tickers)
    }

    pub fn from_flat(values: Vec<f64>, n_periods: usize, tickers: Vec<String>) -> Result<Self> {
        if values.len() != n_periods * tickers.len() {
            return Err(Error::Shape(format!(
                "{} values for a {n_periods} x {} grid",
                values.len(),
                tickers.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            let m = tickers.len().max(1);
            return Err(Error::Invalid(format!(
                "price relative at period {}, asset {} is {} (must be finite and > 0)",
                pos / m,
                pos % m,
                values[pos]
            )));
        }
        Ok(Self {
            values,
            n_periods,
            tickers,
            timestamps: None,
            missing: Vec::new(),
        })
    }

    /// Tickers `asset0..assetM-1`, for synthetic data and tests.
    pub fn default_tickers(n_assets: usize) -> Vec<String> {
        (0..n_assets).map(|m| format!("asset{m}")).collect()
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.n_periods {
            return Err(Error::Shape(format!(
                "{} timestamps for {} periods",
                timestamps.len(),
                self.n_periods
            )));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    /// Marks cells that came from missing bars. Their values are expected to be 1.
    pub fn with_missing_mask(mut self, missing: Vec<bool>) -> Result<Self> {
        if missing.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "missing mask has {} cells for {} values",
                missing.len(),
                self.values.len()
            )));
        }
        self.missing = if missing.iter().any(|&b| b) {
            missing
        } else {
            Vec::new()
        };
        Ok(self)
    }

    pub fn is_missing(&self, t: usize, m: usize) -> bool {
        !self.missing.is_empty() && self.missing[t * self.n_assets() + m]
    }

    pub(crate) fn clear_missing(&mut self) {
        self.missing.clear();
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Relatives of all assets over period `t` (0-based).
    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.n_assets();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_assets() + m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so special-case an asset-free grid.
        let m = self.n_assets().max(1);
        self.values.chunks_exact(m).take(self.n_periods)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The first `t` periods.
    pub fn truncated(&self, t: usize) -> Self {
        let t = t.min(self.n_periods);
        Self {
            values: self.values[..t * self.n_assets()].to_vec(),
            n_periods: t,
            tickers: self.tickers.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[..t].to_vec()),
            missing: if self.missing.is_empty() {
                Vec::new()
            } else {
                self.missing[..t * self.n_assets()].to_vec()
            },
        }
    }

    /// A sub-matrix keeping only the listed asset columns, in the given order.
    pub fn select_assets(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.n_assets()) {
            return Err(Error::Shape(format!(
                "asset index {bad} out of range for {} assets",
                self.n_assets()
            )));
        }
        let mut values = Vec::with_capacity(self.n_periods * columns.len());
        for row in self.rows() {
            values.extend(columns.iter().map(|&c| row[c]));
        }
        Ok(Self {
            values,
            n_periods: self.n_periods,
            tickers: columns.iter().map(|&c| self.tickers[c].clone()).collect(),
            timestamps: self.timestamps.clone(),
            missing: if self.missing.is_empty() {
                Vec::new()
            } else {
                (0..self.n_periods)
                    .flat_map(|t| columns.iter().map(move |&c| (t, c)))
                    .map(|(t, c)| self.missing[t * self.n_assets() + c])
                    .collect()
            },
        })
    }

    /// Selects assets by ticker name.
    pub fn select_tickers<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|name| self.column_of(name.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.select_assets(&columns)
    }

    pub fn column_of(&self, ticker: &str) -> Result<usize> {
        self.tickers
            .iter()
            .position(|t| t.eq_ignore_ascii_case(ticker))
            .ok_or_else(|| Error::Invalid(format!("unknown ticker {ticker}")))
    }

    /// Buy-and-hold wealth of each asset after all periods.
    pub fn terminal_asset_wealth(&self) -> Vec<f64> {
        let mut wealth = vec![1.0; self.n_assets()];
        for row in self.rows() {
            for (w, x) in wealth.iter_mut().zip(row) {
                *w *= x;
            }
        }
        wealth
    }

    /// Reads the wide format: a header of tickers, optionally preceded by a
    /// time column, then one row of relatives per period.
    pub fn read_wide_csv<R: Read>(reader: R, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                row: 1,
                message: e.to_string(),
            })?
            .clone();
        let has_time = header
            .get(0)
            .is_some_and(|h| TIME_COLUMNS.contains(&h.to_ascii_lowercase().as_str()));
        let skip = usize::from(has_time);
        let tickers: Vec<String> = header.iter().skip(skip).map(str::to_owned).collect();
        let mut values = Vec::new();
        let mut stamps = Vec::new();
        let mut n_periods = 0;
        for (i, record) in rdr.records().enumerate() {
            // Header is row 1.
            let row = i + 2;
            let record = record.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            if record.len() != tickers.len() + skip {
                return Err(Error::Parse {
                    row,
                    message: format!(
                        "expected {} fields, found {}",
                        tickers.len() + skip,
                        record.len()
                    ),
                });
            }
            if has_time {
                stamps.push(record[0].to_owned());
            }
            for field in record.iter().skip(skip) {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("not a number: {field:?}"),
                })?;
                values.push(v);
            }
            n_periods += 1;
        }
        let matrix = Self::from_flat(values, n_periods, tickers)?;
        if has_time {
            matrix.with_timestamps(stamps)
        } else {
            Ok(matrix)
        }
    }

    pub fn load_wide_csv(path: &Path, delimiter: u8) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::read_wide_csv(std::io::BufReader::new(file), delimiter)
    }

    /// Writes the wide format read by [`Self::read_wide_csv`].
    pub fn write_wide_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = Vec::with_capacity(self.n_assets() + 1);
        if self.timestamps.is_some() {
            header.push("timestamp");
        }
        header.extend(self.tickers.iter().map(String::as_str));
        wtr.write_record(&header)?;
        for (t, row) in self.rows().enumerate() {
            let mut record: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                record.push(ts[t].clone());
            }
            // `{:?}` prints the shortest string that round-trips exactly.
            record.extend(row.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&record)?;
        }
        wtr.flush()
    }
}

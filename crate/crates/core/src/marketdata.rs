//! OHLC bar ingestion, feature construction and cleaning.
//!
//! Bars are read in long format (one row per ticker and timestamp). Series are
//! aligned on the union of their timestamps; wherever a ticker has no usable
//! bar its relative is exactly 1 and the cell is flagged missing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relatives::PriceRelativeMatrix;

/// Default lower bound below which a relative is treated as a split.
pub const DEFAULT_CLEAN_LO: f64 = 0.7;
/// Default upper bound above which a relative is treated as a merger.
pub const DEFAULT_CLEAN_HI: f64 = 1.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub timestamp: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    /// Set when any price was absent or non-positive.
    pub missing: bool,
}

impl Bar {
    fn usable(&self) -> bool {
        !self.missing
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OhlcSeries {
    pub ticker: String,
    /// Strictly increasing in timestamp.
    pub bars: Vec<Bar>,
}

impl OhlcSeries {
    pub fn calendar(&self) -> impl Iterator<Item = &str> {
        self.bars.iter().map(|b| b.timestamp.as_str())
    }
}

/// Which prices form the ratio for a period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureConvention {
    /// `close[t] / close[t-1]`
    CloseToClose,
    /// `close[t] / open[t]`, same bar, no lag.
    OpenToClose,
    /// `open[t] / close[t-1]`
    CloseToOpen,
    /// `open[t] / open[t-1]`
    OpenToOpen,
}

impl FeatureConvention {
    pub fn uses_lag(self) -> bool {
        !matches!(self, FeatureConvention::OpenToClose)
    }

    fn numerator(self, bar: &Bar) -> f64 {
        match self {
            FeatureConvention::CloseToClose | FeatureConvention::OpenToClose => bar.close,
            FeatureConvention::CloseToOpen | FeatureConvention::OpenToOpen => bar.open,
        }
    }

    fn denominator(self, reference: &Bar, current: &Bar) -> f64 {
        match self {
            FeatureConvention::CloseToClose | FeatureConvention::CloseToOpen => reference.close,
            FeatureConvention::OpenToOpen => reference.open,
            FeatureConvention::OpenToClose => current.open,
        }
    }
}

impl std::str::FromStr for FeatureConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "close_to_close" | "c2c" => Ok(Self::CloseToClose),
            "open_to_close" | "o2c" => Ok(Self::OpenToClose),
            "close_to_open" | "c2o" => Ok(Self::CloseToOpen),
            "open_to_open" | "o2o" => Ok(Self::OpenToOpen),
            other => Err(Error::Invalid(format!(
                "unknown feature convention {other:?}"
            ))),
        }
    }
}

/// Column names of a long-format bar file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub ticker: String,
    pub timestamp: String,
    pub open: String,
    pub high: Option<String>,
    pub low: Option<String>,
    pub close: String,
    pub delimiter: char,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            ticker: "ticker".into(),
            timestamp: "timestamp".into(),
            open: "open".into(),
            high: Some("high".into()),
            low: Some("low".into()),
            close: "close".into(),
            delimiter: ',',
        }
    }
}

fn delimiter_byte(c: char) -> Result<u8> {
    u8::try_from(c).map_err(|_| Error::Invalid(format!("delimiter {c:?} is not a single byte")))
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<OhlcSeries>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    read_csv(std::io::BufReader::new(file), schema)
}

/// Parses long-format OHLC rows into one series per ticker, sorted by
/// timestamp. Non-positive prices flag the bar missing instead of failing.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<OhlcSeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter_byte(schema.delimiter)?)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                row: 1,
                message: format!("missing column {name:?}"),
            })
    };
    let ticker_col = column(&schema.ticker)?;
    let time_col = column(&schema.timestamp)?;
    let open_col = column(&schema.open)?;
    let close_col = column(&schema.close)?;
    let high_col = schema.high.as_deref().map(column).transpose()?;
    let low_col = schema.low.as_deref().map(column).transpose()?;

    let mut by_ticker: BTreeMap<String, Vec<Bar>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |col: usize| {
            record.get(col).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field {col}"),
            })
        };
        let price = |col: usize| -> Result<Option<f64>> {
            let text = field(col)?;
            if text.is_empty() || text.eq_ignore_ascii_case("nan") {
                return Ok(None);
            }
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                row,
                message: format!("not a number: {text:?}"),
            })?;
            Ok((v.is_finite() && v > 0.0).then_some(v))
        };
        let open = price(open_col)?;
        let close = price(close_col)?;
        let high = high_col
            .map(price)
            .transpose()?
            .unwrap_or(open.zip(close).map(|(o, c)| o.max(c)));
        let low = low_col
            .map(price)
            .transpose()?
            .unwrap_or(open.zip(close).map(|(o, c)| o.min(c)));
        let missing = open.is_none() || close.is_none() || high.is_none() || low.is_none();
        by_ticker
            .entry(field(ticker_col)?.to_owned())
            .or_default()
            .push(Bar {
                timestamp: field(time_col)?.to_owned(),
                open: open.unwrap_or(f64::NAN),
                high: high.unwrap_or(f64::NAN),
                low: low.unwrap_or(f64::NAN),
                close: close.unwrap_or(f64::NAN),
                missing,
            });
    }

    by_ticker
        .into_iter()
        .map(|(ticker, mut bars)| {
            bars.sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
            if let Some(w) = bars.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
                return Err(Error::DuplicateTimestamp {
                    ticker,
                    timestamp: w[0].timestamp.clone(),
                });
            }
            Ok(OhlcSeries { ticker, bars })
        })
        .collect()
}

/// Reads a wide file of close prices (header of tickers, optional leading time
/// column) into series whose open, high and low equal the close.
pub fn read_wide_closes<R: Read>(reader: R, delimiter: u8) -> Result<Vec<OhlcSeries>> {
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
    let has_time = header.get(0).is_some_and(|h| {
        ["timestamp", "date", "time", "t"].contains(&h.to_ascii_lowercase().as_str())
    });
    let skip = usize::from(has_time);
    let mut series: Vec<OhlcSeries> = header
        .iter()
        .skip(skip)
        .map(|t| OhlcSeries {
            ticker: t.to_owned(),
            bars: Vec::new(),
        })
        .collect();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let stamp = if has_time {
            record[0].to_owned()
        } else {
            format!("{i:08}")
        };
        for (s, text) in series.iter_mut().zip(record.iter().skip(skip)) {
            let v: Option<f64> = if text.is_empty() {
                None
            } else {
                let v: f64 = text.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("not a number: {text:?}"),
                })?;
                (v.is_finite() && v > 0.0).then_some(v)
            };
            let p = v.unwrap_or(f64::NAN);
            s.bars.push(Bar {
                timestamp: stamp.clone(),
                open: p,
                high: p,
                low: p,
                close: p,
                missing: v.is_none(),
            });
        }
    }
    Ok(series)
}

/// Aligns all series on the union of their timestamps and forms price
/// relatives under `conv`.
///
/// A cell is 1 and flagged missing when the ticker has no usable bar at that
/// timestamp, or (for lagged conventions) no usable bar before it yet. The
/// lag reference is the last usable bar, so a gap does not lose the move
/// across it.
pub fn to_relatives(series: &[OhlcSeries], conv: FeatureConvention) -> Result<PriceRelativeMatrix> {
    let calendar: Vec<&str> = series
        .iter()
        .flat_map(|s| s.calendar())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let lag = usize::from(conv.uses_lag());
    if calendar.len() <= lag {
        return Err(Error::EmptyMatrix(calendar.len()));
    }
    let n_out = calendar.len() - lag;
    let n_assets = series.len();
    let mut values = vec![1.0; n_out * n_assets];
    let mut missing = vec![false; n_out * n_assets];

    for (m, s) in series.iter().enumerate() {
        let by_time: BTreeMap<&str, &Bar> =
            s.bars.iter().map(|b| (b.timestamp.as_str(), b)).collect();
        let mut reference: Option<&Bar> = None;
        for (i, stamp) in calendar.iter().enumerate() {
            let bar = by_time.get(stamp).copied().filter(|b| b.usable());
            if i >= lag {
                let cell = (i - lag) * n_assets + m;
                let ratio = match (conv.uses_lag(), bar, reference) {
                    (true, Some(cur), Some(prev)) => {
                        Some(conv.numerator(cur) / conv.denominator(prev, cur))
                    }
                    (false, Some(cur), _) => Some(conv.numerator(cur) / conv.denominator(cur, cur)),
                    _ => None,
                };
                match ratio {
                    Some(x) if x.is_finite() && x > 0.0 => values[cell] = x,
                    _ => missing[cell] = true,
                }
            }
            if bar.is_some() {
                reference = bar;
            }
        }
    }

    let tickers = series.iter().map(|s| s.ticker.clone()).collect();
    let stamps = calendar[lag..].iter().map(|s| s.to_string()).collect();
    PriceRelativeMatrix::from_flat(values, n_out, tickers)?
        .with_timestamps(stamps)?
        .with_missing_mask(missing)
}

/// Replacement counts produced by [`clean_relatives`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub lo: String,
    pub hi: String,
    /// Cells replaced because the bar was missing.
    pub missing: BTreeMap<String, usize>,
    /// Cells replaced because the relative fell outside `(lo, hi)`.
    pub out_of_range: BTreeMap<String, usize>,
    pub total: usize,
}

impl CleaningReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Replaces relatives outside the open interval `(lo, hi)`, and cells from
/// missing bars, with exactly 1. Values equal to a bound survive.
pub fn clean_relatives(
    x: &PriceRelativeMatrix,
    lo: f64,
    hi: f64,
) -> Result<(PriceRelativeMatrix, CleaningReport)> {
    if !(lo < 1.0 && 1.0 < hi) {
        return Err(Error::Invalid(format!(
            "need lo < 1 < hi, got lo={lo}, hi={hi}"
        )));
    }
    let mut out = x.clone();
    let n_assets = x.n_assets();
    let mut report = CleaningReport {
        lo: lo.to_string(),
        hi: hi.to_string(),
        missing: x.tickers().iter().map(|t| (t.clone(), 0)).collect(),
        out_of_range: x.tickers().iter().map(|t| (t.clone(), 0)).collect(),
        total: 0,
    };
    for (cell, v) in out.as_flat_mut().iter_mut().enumerate() {
        let (t, m) = (cell / n_assets, cell % n_assets);
        let ticker = &x.tickers()[m];
        if x.is_missing(t, m) {
            *v = 1.0;
            *report.missing.get_mut(ticker).expect("ticker present") += 1;
            report.total += 1;
        } else if *v < lo || *v > hi {
            *v = 1.0;
            *report.out_of_range.get_mut(ticker).expect("ticker present") += 1;
            report.total += 1;
        }
    }
    out.clear_missing();
    Ok((out, report))
}

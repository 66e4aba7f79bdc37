//! Delimited-text ingestion and export of price panels.
//!
//! Long format, one row per (date, ticker): `date,ticker,close[,volume][,sector]`.
//! Lines starting with `#` are treated as comments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;

use super::{PricePanel, TradingCalendar};
use crate::error::{Error, Result};

/// Column names used to read a panel file.
#[derive(Debug, Clone)]
pub struct ColumnMapping {
    pub date: String,
    pub ticker: String,
    pub close: String,
    /// Read when present in the header.
    pub volume: Option<String>,
    /// Read when present in the header.
    pub sector: Option<String>,
    pub delimiter: u8,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            date: "date".into(),
            ticker: "ticker".into(),
            close: "close".into(),
            volume: Some("volume".into()),
            sector: Some("sector".into()),
            delimiter: b',',
        }
    }
}

struct Row {
    date: NaiveDate,
    ticker: String,
    close: f64,
    volume: Option<f64>,
}

pub fn load_panel(path: impl AsRef<Path>, schema: &ColumnMapping) -> Result<PricePanel> {
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);

    let header_err = |message: String| Error::MalformedRow { row: 1, message };
    let headers = reader
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let date_col = col(&schema.date).ok_or_else(|| header_err(format!("missing column `{}`", schema.date)))?;
    let ticker_col =
        col(&schema.ticker).ok_or_else(|| header_err(format!("missing column `{}`", schema.ticker)))?;
    let close_col = col(&schema.close).ok_or_else(|| header_err(format!("missing column `{}`", schema.close)))?;
    let volume_col = schema.volume.as_deref().and_then(col);
    let sector_col = schema.sector.as_deref().and_then(col);

    let mut rows = Vec::new();
    let mut sectors: BTreeMap<String, String> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let malformed = |message: String| Error::MalformedRow { row: line, message };
        let field = |idx: usize, name: &str| {
            record
                .get(idx)
                .ok_or_else(|| malformed(format!("missing field `{name}`")))
        };

        let date_s = field(date_col, &schema.date)?;
        let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d")
            .map_err(|e| malformed(format!("bad date `{date_s}`: {e}")))?;
        let ticker = field(ticker_col, &schema.ticker)?.to_string();
        if ticker.is_empty() {
            return Err(malformed("empty ticker".into()));
        }
        let close_s = field(close_col, &schema.close)?;
        let close: f64 = close_s
            .parse()
            .map_err(|_| malformed(format!("bad close `{close_s}`")))?;
        if !(close.is_finite() && close > 0.0) {
            return Err(Error::BadClose {
                date,
                ticker,
                value: close,
            });
        }
        let volume = match volume_col.and_then(|c| record.get(c)) {
            None | Some("") => None,
            Some(s) => {
                let v: f64 = s.parse().map_err(|_| malformed(format!("bad volume `{s}`")))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(malformed(format!("negative or non-finite volume `{s}`")));
                }
                Some(v)
            }
        };
        if let Some(sector) = sector_col.and_then(|c| record.get(c)).filter(|s| !s.is_empty()) {
            match sectors.get(&ticker) {
                Some(prev) if prev != sector => {
                    return Err(malformed(format!(
                        "conflicting sector for {ticker}: `{prev}` vs `{sector}`"
                    )));
                }
                Some(_) => {}
                None => {
                    sectors.insert(ticker.clone(), sector.to_string());
                }
            }
        }
        rows.push((line, Row { date, ticker, close, volume }));
    }

    let dates: Vec<NaiveDate> = rows
        .iter()
        .map(|(_, r)| r.date)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tickers: Vec<String> = rows
        .iter()
        .map(|(_, r)| r.ticker.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let date_idx: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(k, d)| (*d, k)).collect();
    let ticker_idx: HashMap<&str, usize> =
        tickers.iter().enumerate().map(|(k, t)| (t.as_str(), k)).collect();

    let n = tickers.len();
    let mut close = vec![f64::NAN; dates.len() * n];
    let mut volume = vec![f64::NAN; dates.len() * n];
    for (line, row) in &rows {
        let cell = date_idx[&row.date] * n + ticker_idx[row.ticker.as_str()];
        if !close[cell].is_nan() {
            return Err(Error::MalformedRow {
                row: *line,
                message: format!("duplicate row for ({}, {})", row.date, row.ticker),
            });
        }
        close[cell] = row.close;
        if let Some(v) = row.volume {
            volume[cell] = v;
        }
    }

    PricePanel::new(
        TradingCalendar::new(dates)?,
        tickers,
        close,
        Some(volume),
        (!sectors.is_empty()).then_some(sectors),
    )
}

/// Writes the panel in the same long format `load_panel` reads.
pub fn write_panel<W: Write>(panel: &PricePanel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let sectors = panel.sectors();
    let mut header = vec!["date", "ticker", "close", "volume"];
    if sectors.is_some() {
        header.push("sector");
    }
    w.write_record(&header).map_err(csv_io)?;
    for (t, date) in panel.dates().iter().enumerate() {
        let date = date.format("%Y-%m-%d").to_string();
        for (i, ticker) in panel.tickers().iter().enumerate() {
            let Some(c) = panel.close(t, i) else { continue };
            let v = panel.volume(t, i).map(|v| v.to_string()).unwrap_or_default();
            let mut rec = vec![date.clone(), ticker.clone(), c.to_string(), v];
            if let Some(s) = sectors {
                rec.push(s.get(ticker).cloned().unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_panel(panel: &PricePanel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_panel(panel, file)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("panel.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn pivots_long_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,ticker,close\n2020-01-01,A,10\n2020-01-02,A,11\n2020-01-01,B,5\n");
        let panel = load_panel(&p, &ColumnMapping::default()).unwrap();
        assert_eq!(panel.n_dates(), 2);
        assert_eq!(panel.tickers(), &["A".to_string(), "B".to_string()]);
        assert_eq!(panel.close(1, 0), Some(11.0));
        assert_eq!(panel.close(1, 1), None);
        assert!(!panel.has_volume());
    }

    #[test]
    fn negative_close_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,ticker,close\n2020-01-01,A,10\n2020-01-02,B,-1\n");
        match load_panel(&p, &ColumnMapping::default()).unwrap_err() {
            Error::BadClose { date, ticker, .. } => {
                assert_eq!(ticker, "B");
                assert_eq!(date.to_string(), "2020-01-02");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,ticker,close\n2020-01-01,A,10\n2020-13-45,A,11\n");
        match load_panel(&p, &ColumnMapping::default()).unwrap_err() {
            Error::MalformedRow { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn interior_gap_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "date,ticker,close\n2020-01-01,A,10\n2020-01-02,B,3\n2020-01-03,A,12\n",
        );
        let err = load_panel(&p, &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::InteriorGap { ref ticker, .. } if ticker == "A"), "{err}");
    }

    #[test]
    fn duplicate_cell_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,ticker,close\n2020-01-01,A,10\n2020-01-01,A,10\n");
        assert!(matches!(
            load_panel(&p, &ColumnMapping::default()).unwrap_err(),
            Error::MalformedRow { row: 3, .. }
        ));
    }

    #[test]
    fn custom_schema_and_sector() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "# comment line\nday;sym;px;vol;gics\n2020-01-01;A;10;100;Tech\n2020-01-02;A;11;;Tech\n",
        );
        let schema = ColumnMapping {
            date: "day".into(),
            ticker: "sym".into(),
            close: "px".into(),
            volume: Some("vol".into()),
            sector: Some("gics".into()),
            delimiter: b';',
        };
        let panel = load_panel(&p, &schema).unwrap();
        assert_eq!(panel.volume(0, 0), Some(100.0));
        assert_eq!(panel.volume(1, 0), None);
        assert_eq!(panel.sectors().unwrap()["A"], "Tech");
    }
}

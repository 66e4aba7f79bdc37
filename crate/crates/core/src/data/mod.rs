//! Market data: trading calendar, aligned price panels and daily returns.
//!
//! Missing observations are stored as `NaN` in dense row-major matrices
//! (`[date][ticker]`). Accessors hand them out as `Option<f64>`.

mod io;
mod synthetic;

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, Weekday};

use crate::error::{Error, Result};

pub use io::{load_panel, save_panel, write_panel, ColumnMapping};
pub use synthetic::{generate_synthetic, SyntheticMarketConfig};

/// Ordered, strictly increasing list of trading dates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradingCalendar {
    dates: Vec<NaiveDate>,
}

impl TradingCalendar {
    pub fn new(dates: Vec<NaiveDate>) -> Result<Self> {
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPanel(format!(
                "calendar not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { dates })
    }

    /// `n` consecutive weekdays starting at `start` (rolled forward off weekends).
    pub fn weekdays(start: NaiveDate, n: usize) -> Self {
        let mut dates = Vec::with_capacity(n);
        let mut d = start;
        while dates.len() < n {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                dates.push(d);
            }
            d = d + Days::new(1);
        }
        Self { dates }
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn first(&self) -> Option<NaiveDate> {
        self.dates.first().copied()
    }

    pub fn last(&self) -> Option<NaiveDate> {
        self.dates.last().copied()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Number of dates strictly before `date`; equivalently the index of the
    /// first date `>= date`.
    pub fn lower_bound(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d < date)
    }
}

/// Aligned date x ticker matrix of closes and volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    calendar: TradingCalendar,
    tickers: Vec<String>,
    close: Vec<f64>,
    volume: Vec<f64>,
    sectors: Option<BTreeMap<String, String>>,
}

impl PricePanel {
    /// Builds and validates a panel. `close` and `volume` are row-major
    /// `[date][ticker]` with `NaN` for missing values.
    pub fn new(
        calendar: TradingCalendar,
        tickers: Vec<String>,
        close: Vec<f64>,
        volume: Option<Vec<f64>>,
        sectors: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let n_dates = calendar.len();
        let n = tickers.len();
        let cells = n_dates * n;
        if close.len() != cells {
            return Err(Error::InvalidPanel(format!(
                "close matrix has {} cells, expected {n_dates} x {n}",
                close.len()
            )));
        }
        let volume = volume.unwrap_or_else(|| vec![f64::NAN; cells]);
        if volume.len() != cells {
            return Err(Error::InvalidPanel(format!(
                "volume matrix has {} cells, expected {n_dates} x {n}",
                volume.len()
            )));
        }
        {
            let mut seen = tickers.clone();
            seen.sort();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidPanel("duplicate ticker".into()));
            }
        }

        let panel = Self {
            calendar,
            tickers,
            close,
            volume,
            sectors,
        };
        panel.validate()?;
        Ok(panel)
    }

    fn validate(&self) -> Result<()> {
        let n = self.tickers.len();
        let dates = self.calendar.dates();
        for (t, date) in dates.iter().enumerate() {
            for i in 0..n {
                let c = self.close[t * n + i];
                let v = self.volume[t * n + i];
                if !c.is_nan() && !(c.is_finite() && c > 0.0) {
                    return Err(Error::BadClose {
                        date: *date,
                        ticker: self.tickers[i].clone(),
                        value: c,
                    });
                }
                if !v.is_nan() {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::InvalidPanel(format!(
                            "invalid volume {v} on {date} for {}",
                            self.tickers[i]
                        )));
                    }
                    if c.is_nan() {
                        return Err(Error::InvalidPanel(format!(
                            "volume without close on {date} for {}",
                            self.tickers[i]
                        )));
                    }
                }
            }
        }
        for i in 0..n {
            let present = |t: usize| !self.close[t * n + i].is_nan();
            let Some(first) = (0..dates.len()).find(|&t| present(t)) else {
                continue;
            };
            let last = (0..dates.len()).rev().find(|&t| present(t)).unwrap_or(first);
            if let Some(gap) = (first..=last).find(|&t| !present(t)) {
                return Err(Error::InteriorGap {
                    ticker: self.tickers[i].clone(),
                    date: dates[gap],
                    first: dates[first],
                    last: dates[last],
                });
            }
        }
        Ok(())
    }

    pub fn calendar(&self) -> &TradingCalendar {
        &self.calendar
    }

    pub fn dates(&self) -> &[NaiveDate] {
        self.calendar.dates()
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_dates(&self) -> usize {
        self.calendar.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn ticker_index(&self, ticker: &str) -> Option<usize> {
        self.tickers.iter().position(|t| t == ticker)
    }

    pub fn close(&self, t: usize, i: usize) -> Option<f64> {
        let c = self.close[t * self.tickers.len() + i];
        (!c.is_nan()).then_some(c)
    }

    /// Closes on date index `t`, `NaN` where missing.
    pub fn close_row(&self, t: usize) -> &[f64] {
        let n = self.tickers.len();
        &self.close[t * n..(t + 1) * n]
    }

    pub fn volume(&self, t: usize, i: usize) -> Option<f64> {
        let v = self.volume[t * self.tickers.len() + i];
        (!v.is_nan()).then_some(v)
    }

    pub fn volume_row(&self, t: usize) -> &[f64] {
        let n = self.tickers.len();
        &self.volume[t * n..(t + 1) * n]
    }

    pub fn has_volume(&self) -> bool {
        self.volume.iter().any(|v| !v.is_nan())
    }

    pub fn sectors(&self) -> Option<&BTreeMap<String, String>> {
        self.sectors.as_ref()
    }

    /// Row-major close matrix (`NaN` = missing).
    pub fn close_matrix(&self) -> &[f64] {
        &self.close
    }

    pub fn volume_matrix(&self) -> &[f64] {
        &self.volume
    }

    /// Keeps only dates `<= last`.
    pub fn truncate_after(&self, last: NaiveDate) -> Result<Self> {
        let keep = self.calendar.lower_bound(last + Days::new(1));
        let n = self.tickers.len();
        Self::new(
            TradingCalendar::new(self.calendar.dates()[..keep].to_vec())?,
            self.tickers.clone(),
            self.close[..keep * n].to_vec(),
            Some(self.volume[..keep * n].to_vec()),
            self.sectors.clone(),
        )
    }
}

/// Simple daily returns; the source panel's first date is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    calendar: TradingCalendar,
    tickers: Vec<String>,
    returns: Vec<f64>,
}

impl ReturnPanel {
    pub fn calendar(&self) -> &TradingCalendar {
        &self.calendar
    }

    pub fn dates(&self) -> &[NaiveDate] {
        self.calendar.dates()
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_dates(&self) -> usize {
        self.calendar.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        let r = self.returns[t * self.tickers.len() + i];
        (!r.is_nan()).then_some(r)
    }

    /// Returns on return-date index `t`, `NaN` where missing.
    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.tickers.len();
        &self.returns[t * n..(t + 1) * n]
    }
}

pub fn compute_returns(panel: &PricePanel) -> Result<ReturnPanel> {
    let n_dates = panel.n_dates();
    if n_dates < 2 {
        return Err(Error::InsufficientHistory(format!(
            "need at least 2 dates to compute returns, panel has {n_dates}"
        )));
    }
    let n = panel.n_tickers();
    let mut returns = Vec::with_capacity((n_dates - 1) * n);
    for t in 1..n_dates {
        let prev = panel.close_row(t - 1);
        let cur = panel.close_row(t);
        // NaN on either side propagates to a missing return
        returns.extend(prev.iter().zip(cur).map(|(p, c)| c / p - 1.0));
    }
    Ok(ReturnPanel {
        calendar: TradingCalendar::new(panel.dates()[1..].to_vec())?,
        tickers: panel.tickers().to_vec(),
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn single(closes: &[f64]) -> PricePanel {
        let cal = TradingCalendar::weekdays(d("2020-01-01"), closes.len());
        PricePanel::new(cal, vec!["A".into()], closes.to_vec(), None, None).unwrap()
    }

    #[test]
    fn calendar_rejects_duplicates() {
        assert!(TradingCalendar::new(vec![d("2020-01-02"), d("2020-01-02")]).is_err());
        assert!(TradingCalendar::new(vec![d("2020-01-03"), d("2020-01-02")]).is_err());
    }

    #[test]
    fn weekdays_skip_weekends() {
        let cal = TradingCalendar::weekdays(d("2021-01-01"), 3);
        assert_eq!(cal.dates(), &[d("2021-01-01"), d("2021-01-04"), d("2021-01-05")]);
    }

    #[test]
    fn returns_arithmetic() {
        let r = compute_returns(&single(&[100.0, 110.0, 99.0])).unwrap();
        assert_eq!(r.n_dates(), 2);
        assert!((r.get(0, 0).unwrap() - 0.10).abs() < 1e-15);
        assert!((r.get(1, 0).unwrap() + 0.10).abs() < 1e-15);

        let flat = compute_returns(&single(&[50.0, 50.0, 50.0])).unwrap();
        assert_eq!(flat.get(0, 0), Some(0.0));
        assert_eq!(flat.get(1, 0), Some(0.0));
    }

    #[test]
    fn return_missing_when_previous_close_missing() {
        let cal = TradingCalendar::weekdays(d("2020-01-01"), 3);
        let p = PricePanel::new(
            cal,
            vec!["A".into()],
            vec![f64::NAN, 10.0, 11.0],
            None,
            None,
        )
        .unwrap();
        let r = compute_returns(&p).unwrap();
        assert_eq!(r.get(0, 0), None);
        assert!(r.get(1, 0).is_some());
    }

    #[test]
    fn returns_need_two_dates() {
        assert!(compute_returns(&single(&[1.0])).is_err());
    }

    #[test]
    fn interior_gap_rejected() {
        let cal = TradingCalendar::weekdays(d("2020-01-01"), 3);
        let err = PricePanel::new(cal, vec!["A".into()], vec![1.0, f64::NAN, 1.0], None, None)
            .unwrap_err();
        assert!(matches!(err, Error::InteriorGap { .. }), "{err}");
    }

    #[test]
    fn non_positive_close_rejected() {
        let cal = TradingCalendar::weekdays(d("2020-01-01"), 2);
        let err = PricePanel::new(cal, vec!["A".into()], vec![1.0, -1.0], None, None).unwrap_err();
        match err {
            Error::BadClose { date, ticker, .. } => {
                assert_eq!(ticker, "A");
                assert_eq!(date, d("2020-01-02"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncate_keeps_prefix() {
        let p = single(&[1.0, 2.0, 3.0, 4.0]);
        let t = p.truncate_after(p.dates()[1]).unwrap();
        assert_eq!(t.n_dates(), 2);
        assert_eq!(t.close(1, 0), Some(2.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn returns_invariant_to_per_ticker_rescaling(
                closes in proptest::collection::vec(0.5f64..200.0, 6),
                scale_a in 0.01f64..100.0,
                scale_b in 0.01f64..100.0,
            ) {
                let cal = TradingCalendar::weekdays(d("2020-01-01"), 3);
                let tickers = vec!["A".to_string(), "B".to_string()];
                let p = PricePanel::new(cal.clone(), tickers.clone(), closes.clone(), None, None).unwrap();
                let scaled: Vec<f64> = closes
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * if k % 2 == 0 { scale_a } else { scale_b })
                    .collect();
                let q = PricePanel::new(cal, tickers, scaled, None, None).unwrap();
                let r1 = compute_returns(&p).unwrap();
                let r2 = compute_returns(&q).unwrap();
                for t in 0..2 {
                    for i in 0..2 {
                        let a = r1.get(t, i).unwrap();
                        let b = r2.get(t, i).unwrap();
                        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                    }
                }
            }
        }
    }
}

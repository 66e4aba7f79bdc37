//! Cross-sectional signals: value, reversal, their blend, the drift-regime
//! gate and the gated edge.
//!
//! Every signal at date `t` reads only data dated `<= t`. The up-fraction
//! window ends strictly before `t`.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{PricePanel, ReturnPanel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalParams {
    /// Weight on value in the blend; reversal gets `1 - alpha`.
    pub alpha: f64,
    pub reversal_lookback: usize,
    pub drift_window: usize,
    pub up_threshold: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self {
            alpha: 0.70,
            reversal_lookback: 10,
            drift_window: 63,
            up_threshold: 0.60,
        }
    }
}

impl SignalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("signal.alpha = {} not in [0, 1]", self.alpha)));
        }
        if self.reversal_lookback < 1 {
            return Err(Error::InvalidConfig("signal.reversal_lookback must be >= 1".into()));
        }
        if self.drift_window < 1 {
            return Err(Error::InvalidConfig("signal.drift_window must be >= 1".into()));
        }
        if !(self.up_threshold > 0.0 && self.up_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "signal.up_threshold = {} not in (0, 1)",
                self.up_threshold
            )));
        }
        Ok(())
    }

    /// Price dates needed before the first traded date.
    pub fn warmup(&self) -> usize {
        self.drift_window + self.reversal_lookback
    }
}

/// One date's cross-section, aligned with the panel's ticker order.
/// Missing entries are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFrame {
    pub date: NaiveDate,
    values: Vec<f64>,
}

impl SignalFrame {
    pub fn new(date: NaiveDate, values: Vec<f64>) -> Self {
        Self { date, values }
    }

    pub fn empty(date: NaiveDate, n: usize) -> Self {
        Self::new(date, vec![f64::NAN; n])
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        let v = self.values[i];
        (!v.is_nan()).then_some(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().copied().enumerate().filter(|(_, v)| !v.is_nan())
    }

    pub fn n_valid(&self) -> usize {
        self.valid().count()
    }

    pub fn to_map(&self, tickers: &[String]) -> BTreeMap<String, f64> {
        self.valid().map(|(i, v)| (tickers[i].clone(), v)).collect()
    }
}

/// In-place z-score with sample standard deviation. Returns `false` (and
/// leaves `xs` untouched) with fewer than two values or no dispersion.
pub(crate) fn standardize(xs: &mut [f64]) -> bool {
    if xs.len() < 2 {
        return false;
    }
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo == hi {
        return false;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return false;
    }
    for x in xs.iter_mut() {
        *x = (*x - mean) / sd;
    }
    true
}

/// Percentile scores `(rank - 0.5) / n` of `1 / close`, ties averaged.
pub(crate) fn value_scores(closes: &[f64], out: &mut [f64]) {
    out.fill(f64::NAN);
    let mut items: Vec<(f64, usize)> = closes
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_nan())
        .map(|(i, c)| (1.0 / c, i))
        .collect();
    let n = items.len();
    if n == 0 {
        return;
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && items[end].0 == items[start].0 {
            end += 1;
        }
        // 1-based positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        let score = (rank - 0.5) / n as f64;
        for item in &items[start..end] {
            out[item.1] = score;
        }
        start = end;
    }
}

/// Reversal z-scores from the `lookback` returns in rows `[end - lookback, end)`.
pub(crate) fn reversal_scores(returns: &ReturnPanel, end: usize, lookback: usize, out: &mut [f64]) {
    out.fill(f64::NAN);
    if end < lookback {
        return;
    }
    let n = returns.n_tickers();
    let mut idx = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    'names: for i in 0..n {
        let mut growth = 1.0;
        for t in end - lookback..end {
            let r = returns.row(t)[i];
            if r.is_nan() {
                continue 'names;
            }
            growth *= 1.0 + r;
        }
        idx.push(i);
        raw.push(-(growth - 1.0));
    }
    if standardize(&mut raw) {
        for (i, z) in idx.into_iter().zip(raw) {
            out[i] = z;
        }
    }
}

/// Fraction of strictly positive returns in rows `[end - window, end)`.
pub(crate) fn up_fraction_scores(returns: &ReturnPanel, end: usize, window: usize, out: &mut [f64]) {
    out.fill(f64::NAN);
    if end < window {
        return;
    }
    let n = returns.n_tickers();
    let mut ups = vec![0u32; n];
    let mut complete = vec![true; n];
    for t in end - window..end {
        for (i, r) in returns.row(t).iter().enumerate() {
            if r.is_nan() {
                complete[i] = false;
            } else if *r > 0.0 {
                ups[i] += 1;
            }
        }
    }
    for i in 0..n {
        if complete[i] {
            out[i] = ups[i] as f64 / window as f64;
        }
    }
}

pub fn value_signal(panel: &PricePanel, date: NaiveDate) -> Result<SignalFrame> {
    let t = panel.calendar().index_of(date).ok_or(Error::UnknownDate(date))?;
    let mut out = vec![f64::NAN; panel.n_tickers()];
    value_scores(panel.close_row(t), &mut out);
    Ok(SignalFrame::new(date, out))
}

/// Trailing `lookback`-day compounded return ending at `date` (inclusive),
/// negated and standardized across names with a complete window.
pub fn reversal_signal(returns: &ReturnPanel, date: NaiveDate, lookback: usize) -> SignalFrame {
    let end = returns.calendar().lower_bound(date.succ_opt().unwrap_or(date));
    let mut out = vec![f64::NAN; returns.n_tickers()];
    reversal_scores(returns, end, lookback, &mut out);
    SignalFrame::new(date, out)
}

pub fn base_signal(value: &SignalFrame, reversal: &SignalFrame, alpha: f64) -> SignalFrame {
    let values = value
        .values()
        .iter()
        .zip(reversal.values())
        .map(|(v, r)| blend(*v, *r, alpha))
        .collect();
    SignalFrame::new(value.date, values)
}

/// Share of positive returns over the `window` return dates strictly before `date`.
pub fn up_fraction(returns: &ReturnPanel, date: NaiveDate, window: usize) -> SignalFrame {
    let end = returns.calendar().lower_bound(date);
    let mut out = vec![f64::NAN; returns.n_tickers()];
    up_fraction_scores(returns, end, window, &mut out);
    SignalFrame::new(date, out)
}

pub fn regime_mask(up_frac: &SignalFrame, theta: f64) -> SignalFrame {
    let values = up_frac
        .values()
        .iter()
        .map(|u| if u.is_nan() { f64::NAN } else if *u > theta { 1.0 } else { 0.0 })
        .collect();
    SignalFrame::new(up_frac.date, values)
}

pub fn edge_signal(base: &SignalFrame, mask: &SignalFrame) -> SignalFrame {
    let values = base.values().iter().zip(mask.values()).map(|(b, m)| edge_value(*b, *m)).collect();
    SignalFrame::new(base.date, values)
}

#[inline]
/// `alpha * value + (1 - alpha) * reversal`; a leg with zero weight is
/// ignored, so its missing value does not blank the blend.
pub(crate) fn blend(value: f64, reversal: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        value
    } else if alpha == 0.0 {
        reversal
    } else {
        alpha * value + (1.0 - alpha) * reversal
    }
}

pub(crate) fn edge_value(base: f64, mask: f64) -> f64 {
    if base.is_nan() || mask.is_nan() {
        f64::NAN
    } else if mask == 0.0 {
        0.0
    } else {
        base * mask
    }
}

/// All signal cross-sections for every panel date, row-major `[date][ticker]`.
#[derive(Debug, Clone)]
pub struct SignalCube {
    dates: Vec<NaiveDate>,
    n: usize,
    value: Vec<f64>,
    reversal: Vec<f64>,
    base: Vec<f64>,
    up_fraction: Vec<f64>,
    mask: Vec<f64>,
}

impl SignalCube {
    pub fn compute(panel: &PricePanel, returns: &ReturnPanel, params: &SignalParams) -> Result<Self> {
        params.validate()?;
        let n = panel.n_tickers();
        let n_dates = panel.n_dates();
        let cells = n * n_dates;
        let mut cube = Self {
            dates: panel.dates().to_vec(),
            n,
            value: vec![f64::NAN; cells],
            reversal: vec![f64::NAN; cells],
            base: vec![f64::NAN; cells],
            up_fraction: vec![f64::NAN; cells],
            mask: vec![f64::NAN; cells],
        };
        for t in 0..n_dates {
            let row = t * n..(t + 1) * n;
            value_scores(panel.close_row(t), &mut cube.value[row.clone()]);
            // return row k is price date k + 1: returns dated <= t are rows [0, t)
            reversal_scores(returns, t, params.reversal_lookback, &mut cube.reversal[row.clone()]);
            up_fraction_scores(
                returns,
                t.saturating_sub(1),
                params.drift_window,
                &mut cube.up_fraction[row.clone()],
            );
            for k in row {
                cube.base[k] = blend(cube.value[k], cube.reversal[k], params.alpha);
                let u = cube.up_fraction[k];
                cube.mask[k] = if u.is_nan() {
                    f64::NAN
                } else if u > params.up_threshold {
                    1.0
                } else {
                    0.0
                };
            }
        }
        Ok(cube)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn n_tickers(&self) -> usize {
        self.n
    }

    fn slice<'a>(&self, m: &'a [f64], t: usize) -> &'a [f64] {
        &m[t * self.n..(t + 1) * self.n]
    }

    pub fn value_row(&self, t: usize) -> &[f64] {
        self.slice(&self.value, t)
    }

    pub fn reversal_row(&self, t: usize) -> &[f64] {
        self.slice(&self.reversal, t)
    }

    pub fn base_row(&self, t: usize) -> &[f64] {
        self.slice(&self.base, t)
    }

    pub fn up_fraction_row(&self, t: usize) -> &[f64] {
        self.slice(&self.up_fraction, t)
    }

    pub fn mask_row(&self, t: usize) -> &[f64] {
        self.slice(&self.mask, t)
    }

    pub fn edge_frame(&self, t: usize) -> SignalFrame {
        let values = self
            .base_row(t)
            .iter()
            .zip(self.mask_row(t))
            .map(|(b, m)| edge_value(*b, *m))
            .collect();
        SignalFrame::new(self.dates[t], values)
    }

    /// Share of (date, ticker) cells with a defined mask that are active.
    pub fn active_share(&self) -> f64 {
        let (on, total) = self
            .mask
            .iter()
            .filter(|m| !m.is_nan())
            .fold((0usize, 0usize), |(on, tot), m| (on + (*m == 1.0) as usize, tot + 1));
        if total == 0 {
            0.0
        } else {
            on as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_returns, TradingCalendar};

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn panel(tickers: &[&str], rows: &[Vec<f64>]) -> PricePanel {
        let cal = TradingCalendar::weekdays(d("2020-01-01"), rows.len());
        PricePanel::new(
            cal,
            tickers.iter().map(|s| s.to_string()).collect(),
            rows.concat(),
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn value_ranks_inverse_price() {
        let p = panel(&["A", "B", "C"], &[vec![10.0, 20.0, 40.0]]);
        let f = value_signal(&p, p.dates()[0]).unwrap();
        assert!((f.get(0).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((f.get(1).unwrap() - 3.0 / 6.0).abs() < 1e-15);
        assert!((f.get(2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn value_ties_are_symmetric() {
        let p = panel(&["A", "B", "C", "D"], &[vec![7.0; 4]]);
        let f = value_signal(&p, p.dates()[0]).unwrap();
        assert!(f.valid().all(|(_, v)| v == 0.5));
    }

    #[test]
    fn value_unknown_date() {
        let p = panel(&["A"], &[vec![1.0]]);
        assert!(value_signal(&p, d("1999-01-01")).is_err());
    }

    #[test]
    fn value_missing_close_excluded() {
        let p = panel(&["A", "B"], &[vec![f64::NAN, 3.0], vec![2.0, 3.0]]);
        let f = value_signal(&p, p.dates()[0]).unwrap();
        assert_eq!(f.get(0), None);
        assert_eq!(f.get(1), Some(0.5));
    }

    fn two_stock_returns(ra: f64, rb: f64, days: usize) -> ReturnPanel {
        // each stock compounds to the requested total over `days` returns
        let ga = (1.0 + ra).powf(1.0 / days as f64);
        let gb = (1.0 + rb).powf(1.0 / days as f64);
        let rows: Vec<Vec<f64>> = (0..=days)
            .map(|k| vec![100.0 * ga.powi(k as i32), 100.0 * gb.powi(k as i32)])
            .collect();
        compute_returns(&panel(&["A", "B"], &rows)).unwrap()
    }

    #[test]
    fn reversal_two_point_standardization() {
        let r = two_stock_returns(0.10, -0.10, 10);
        let f = reversal_signal(&r, *r.dates().last().unwrap(), 10);
        // two points: z = -/+ 1/sqrt(2) with sample std
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.get(0).unwrap() + h).abs() < 1e-12);
        assert!((f.get(1).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn reversal_zero_dispersion_is_empty() {
        let r = two_stock_returns(0.05, 0.05, 10);
        let f = reversal_signal(&r, *r.dates().last().unwrap(), 10);
        assert_eq!(f.n_valid(), 0);
    }

    #[test]
    fn reversal_incomplete_window_excluded() {
        // C lists one day late, so it has only 9 returns at the last date
        let mut rows = vec![];
        for k in 0..=10 {
            let c = if k == 0 { f64::NAN } else { 10.0 + k as f64 };
            rows.push(vec![100.0 + k as f64, 100.0 - k as f64, c]);
        }
        let r = compute_returns(&panel(&["A", "B", "C"], &rows)).unwrap();
        let f = reversal_signal(&r, *r.dates().last().unwrap(), 10);
        assert!(f.get(0).is_some() && f.get(1).is_some());
        assert_eq!(f.get(2), None);
    }

    #[test]
    fn base_blend_arithmetic() {
        let date = d("2020-01-01");
        let v = SignalFrame::new(date, vec![0.8, 0.3, f64::NAN]);
        let r = SignalFrame::new(date, vec![1.0, f64::NAN, 0.2]);
        let b = base_signal(&v, &r, 0.7);
        assert!((b.get(0).unwrap() - 0.86).abs() < 1e-15);
        assert_eq!(b.n_valid(), 1);
        let only_value = base_signal(&v, &r, 1.0);
        assert_eq!(only_value.get(0), Some(0.8));
    }

    #[test]
    fn up_fraction_counts_strictly_positive_before_date() {
        let closes = [100.0, 101.0, 99.99, 101.9898, 102.5, 50.0];
        let rows: Vec<Vec<f64>> = closes.iter().map(|c| vec![*c]).collect();
        let p = panel(&["A"], &rows);
        let r = compute_returns(&p).unwrap();
        // the window for the last date skips its own (large negative) return
        let f = up_fraction(&r, p.dates()[5], 4);
        assert_eq!(f.get(0), Some(0.75));

        let flat = compute_returns(&panel(&["A"], &vec![vec![5.0]; 6])).unwrap();
        let f = up_fraction(&flat, *flat.dates().last().unwrap(), 4);
        assert_eq!(f.get(0), Some(0.0));
        // not enough history
        let f = up_fraction(&flat, flat.dates()[2], 4);
        assert_eq!(f.get(0), None);
    }

    #[test]
    fn mask_is_strict() {
        let date = d("2020-01-01");
        let u = SignalFrame::new(date, vec![0.60, 0.61, f64::NAN, 3.0 / 5.0]);
        let m = regime_mask(&u, 0.60);
        assert_eq!(m.get(0), Some(0.0));
        assert_eq!(m.get(1), Some(1.0));
        assert_eq!(m.get(2), None);
        assert_eq!(m.get(3), Some(0.0));
    }

    #[test]
    fn edge_gates_base() {
        let date = d("2020-01-01");
        let b = SignalFrame::new(date, vec![0.86, 0.86, -0.4, f64::NAN]);
        let m = SignalFrame::new(date, vec![1.0, 0.0, 0.0, 1.0]);
        let e = edge_signal(&b, &m);
        assert_eq!(e.get(0), Some(0.86));
        assert_eq!(e.get(1), Some(0.0));
        assert_eq!(e.get(2).map(f64::to_bits), Some(0.0f64.to_bits()));
        assert_eq!(e.get(3), None);
    }

    #[test]
    fn params_validation() {
        assert!(SignalParams::default().validate().is_ok());
        for p in [
            SignalParams { alpha: 1.2, ..Default::default() },
            SignalParams { up_threshold: 1.0, ..Default::default() },
            SignalParams { drift_window: 0, ..Default::default() },
            SignalParams { reversal_lookback: 0, ..Default::default() },
        ] {
            assert!(p.validate().is_err());
        }
    }

    #[test]
    fn standardize_degenerate() {
        let mut one = [1.0];
        assert!(!standardize(&mut one));
        let mut same = [0.1 + 0.2, 0.1 + 0.2, 0.1 + 0.2];
        assert!(!standardize(&mut same));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn value_depends_only_on_price_ranks(
                prices in proptest::collection::vec(1.0f64..500.0, 2..40)
            ) {
                let mut a = vec![0.0; prices.len()];
                value_scores(&prices, &mut a);
                // strictly increasing map of prices: same ordering of 1/price
                let inc: Vec<f64> = prices.iter().map(|x| x * x + 3.0).collect();
                let mut c = vec![0.0; prices.len()];
                value_scores(&inc, &mut c);
                prop_assert_eq!(&a, &c);
                let mean = a.iter().sum::<f64>() / a.len() as f64;
                prop_assert!((mean - 0.5).abs() < 1e-12);
            }

            #[test]
            fn standardized_moments(xs in proptest::collection::vec(-1.0f64..1.0, 2..200)) {
                let mut z = xs.clone();
                if standardize(&mut z) {
                    let n = z.len() as f64;
                    let mean = z.iter().sum::<f64>() / n;
                    let sd = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                    prop_assert!(mean.abs() < 1e-10);
                    prop_assert!((sd - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}

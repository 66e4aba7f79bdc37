//! Walk-forward orchestration: train at unit scale, freeze the scale factor,
//! apply it to the following test year. Also the one-at-a-time parameter
//! sweep and the four-run attribution decomposition.

use chrono::{Datelike, Months, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PricePanel, TradingCalendar};
use crate::engine::{BacktestResult, Backtester, DateRange, Gate, StrategyConfig, WeightBook};
use crate::error::{Error, Result};
use crate::metrics::{perf_stats, sharpe, PerfStats};
use crate::risk::{compute_scale_factor, ScaleFactor};

/// One train/test split; both ranges are half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowSpec {
    pub label: String,
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl WindowSpec {
    pub fn train(&self) -> DateRange {
        DateRange::new(self.train_start, self.train_end)
    }

    pub fn test(&self) -> DateRange {
        DateRange::new(self.test_start, self.test_end)
    }

    /// `"2005--2010"`-style spans for tables.
    pub fn train_period(&self) -> String {
        format!("{}--{}", self.train_start.year(), self.train_end.year())
    }

    pub fn test_period(&self) -> String {
        format!("{}--{}", self.test_start.year(), self.test_end.year())
    }
}

/// Window geometry as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// First day of each test period.
    pub anchors: Vec<NaiveDate>,
    pub train_years: u32,
    pub test_years: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        let d = |y| NaiveDate::from_ymd_opt(y, 1, 1).unwrap();
        Self {
            anchors: vec![d(2010), d(2015), d(2020)],
            train_years: 5,
            test_years: 1,
        }
    }
}

impl WindowConfig {
    pub fn build(&self, calendar: &TradingCalendar) -> Result<Vec<WindowSpec>> {
        make_windows(calendar, self.train_years, self.test_years, &self.anchors)
    }
}

fn shift_years(date: NaiveDate, years: u32, forward: bool) -> Option<NaiveDate> {
    let m = Months::new(12 * years);
    if forward {
        date.checked_add_months(m)
    } else {
        date.checked_sub_months(m)
    }
}

/// Builds calendar-year windows around each anchor. The test range is
/// clipped at the end of the calendar.
pub fn make_windows(
    calendar: &TradingCalendar,
    train_years: u32,
    test_years: u32,
    anchors: &[NaiveDate],
) -> Result<Vec<WindowSpec>> {
    if train_years == 0 || test_years == 0 {
        return Err(Error::InvalidConfig("train_years and test_years must be >= 1".into()));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("at least one window anchor is required".into()));
    }
    let (Some(first), Some(last)) = (calendar.first(), calendar.last()) else {
        return Err(Error::InvalidPanel("empty calendar".into()));
    };
    let mut out: Vec<WindowSpec> = Vec::with_capacity(anchors.len());
    for (k, &anchor) in anchors.iter().enumerate() {
        let overflow = || Error::InvalidConfig(format!("anchor {anchor}: date arithmetic overflow"));
        let train_start = shift_years(anchor, train_years, false).ok_or_else(overflow)?;
        let test_end = shift_years(anchor, test_years, true).ok_or_else(overflow)?;
        if train_start < first {
            return Err(Error::InsufficientHistory(format!(
                "anchor {anchor} needs a training start of {train_start}, data begins {first}"
            )));
        }
        if anchor > last {
            return Err(Error::InsufficientHistory(format!(
                "anchor {anchor} is after the last panel date {last}"
            )));
        }
        if let Some(prev) = out.last() {
            if anchor < prev.test_end {
                return Err(Error::InvalidConfig(format!(
                    "anchor {anchor} overlaps the previous test period ending {}",
                    prev.test_end
                )));
            }
        }
        let test_end = test_end.min(last.succ_opt().unwrap_or(last));
        out.push(WindowSpec {
            label: (k + 1).to_string(),
            train_start,
            train_end: anchor,
            test_start: anchor,
            test_end,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowRun {
    pub window: WindowSpec,
    /// Unscaled training Sharpe.
    pub train_sharpe: Option<f64>,
    pub scale: ScaleFactor,
    pub test_stats: PerfStats,
    pub benchmark_stats: PerfStats,
    #[serde(skip)]
    pub test: BacktestResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WealthRow {
    pub period_end: NaiveDate,
    pub strategy: f64,
    pub benchmark: f64,
}

impl WealthRow {
    pub fn outperformance(&self) -> f64 {
        self.strategy / self.benchmark
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WalkForwardReport {
    pub windows: Vec<WindowRun>,
    pub combined: PerfStats,
    pub combined_benchmark: PerfStats,
    pub combined_dates: Vec<NaiveDate>,
    pub combined_returns: Vec<f64>,
    pub combined_benchmark_returns: Vec<f64>,
    /// Wealth from 1,000,000 at the end of each test period.
    pub wealth: Vec<WealthRow>,
}

impl WalkForwardReport {
    pub fn total_turnover(&self) -> f64 {
        self.windows.iter().map(|w| w.test.total_turnover()).sum()
    }

    pub fn combined_turnover(&self) -> Vec<f64> {
        self.windows.iter().flat_map(|w| w.test.turnover.iter().copied()).collect()
    }

    pub fn kill_log(&self) -> impl Iterator<Item = (&WindowSpec, &crate::risk::KillRecord)> {
        self.windows
            .iter()
            .flat_map(|w| w.test.kill_log.iter().map(move |k| (&w.window, k)))
    }
}

pub const WEALTH_INITIAL: f64 = 1_000_000.0;

/// Scale factor from an unscaled, kill-switch-free training run.
pub fn train_scale(bt: &Backtester, book: &WeightBook, window: &WindowSpec) -> Result<(ScaleFactor, Option<f64>)> {
    let train = bt
        .run_book(book, window.train(), ScaleFactor::UNIT, false, false)
        .map_err(|e| e.in_window(&window.label))?;
    let scale = compute_scale_factor(&train.daily_returns).map_err(|e| e.in_window(&window.label))?;
    Ok((scale, sharpe(&train.daily_returns)))
}

/// Walk-forward over a prepared book. Set `record_weights` to keep daily
/// weight frames of the test runs.
pub fn walk_forward_book(
    bt: &Backtester,
    book: &WeightBook,
    windows: &[WindowSpec],
    record_weights: bool,
) -> Result<WalkForwardReport> {
    let kill_switch = bt.config().kill_switch.enabled;
    let mut runs = Vec::with_capacity(windows.len());
    for w in windows {
        let (scale, train_sharpe) = train_scale(bt, book, w)?;
        let test = bt
            .run_book(book, w.test(), scale, kill_switch, record_weights)
            .map_err(|e| e.in_window(&w.label))?;
        let ctx = |e: Error| e.in_window(&w.label);
        let test_stats = perf_stats(&test.daily_returns, Some(&test.benchmark)).map_err(ctx)?;
        let benchmark_stats = perf_stats(&test.benchmark, None).map_err(ctx)?;
        runs.push(WindowRun {
            window: w.clone(),
            train_sharpe,
            scale,
            test_stats,
            benchmark_stats,
            test,
        });
    }
    assemble(runs)
}

fn assemble(runs: Vec<WindowRun>) -> Result<WalkForwardReport> {
    let mut dates = Vec::new();
    let mut rets = Vec::new();
    let mut bench = Vec::new();
    let mut wealth = Vec::with_capacity(runs.len());
    let (mut ws, mut wb) = (WEALTH_INITIAL, WEALTH_INITIAL);
    for r in &runs {
        dates.extend_from_slice(&r.test.dates);
        rets.extend_from_slice(&r.test.daily_returns);
        bench.extend_from_slice(&r.test.benchmark);
        ws *= r.test_stats.wealth_multiple;
        wb *= r.benchmark_stats.wealth_multiple;
        wealth.push(WealthRow {
            period_end: r.test.dates.last().copied().unwrap_or(r.window.test_end),
            strategy: ws,
            benchmark: wb,
        });
    }
    Ok(WalkForwardReport {
        combined: perf_stats(&rets, Some(&bench))?,
        combined_benchmark: perf_stats(&bench, None)?,
        windows: runs,
        combined_dates: dates,
        combined_returns: rets,
        combined_benchmark_returns: bench,
        wealth,
    })
}

pub fn run_walk_forward(panel: &PricePanel, config: &StrategyConfig, windows: &[WindowSpec]) -> Result<WalkForwardReport> {
    let bt = Backtester::new(panel, config.clone())?;
    walk_forward_book(&bt, bt.book(), windows, true)
}

/// Combined out-of-sample Sharpe of a book, undefined mapped to zero.
pub fn combined_sharpe(bt: &Backtester, book: &WeightBook, windows: &[WindowSpec]) -> Result<f64> {
    Ok(walk_forward_book(bt, book, windows, false)?.combined.sharpe_or_zero())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    DriftWindow,
    UpThreshold,
    ValueWeight,
    TransactionCost,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [
        SweepParam::DriftWindow,
        SweepParam::UpThreshold,
        SweepParam::ValueWeight,
        SweepParam::TransactionCost,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SweepParam::DriftWindow => "Drift Window (W)",
            SweepParam::UpThreshold => "Up Threshold (theta)",
            SweepParam::ValueWeight => "Value Weight (alpha)",
            SweepParam::TransactionCost => "Transaction Cost",
        }
    }

    /// Applies `1 + offset` to the parameter; window days are rounded.
    pub fn apply(self, base: &StrategyConfig, offset: f64) -> StrategyConfig {
        let mut c = base.clone();
        let f = 1.0 + offset;
        match self {
            SweepParam::DriftWindow => {
                c.signal.drift_window = (base.signal.drift_window as f64 * f).round().max(1.0) as usize
            }
            SweepParam::UpThreshold => c.signal.up_threshold = base.signal.up_threshold * f,
            SweepParam::ValueWeight => c.signal.alpha = base.signal.alpha * f,
            SweepParam::TransactionCost => c.cost.rate_per_unit_traded = base.cost.rate_per_unit_traded * f,
        }
        c
    }

    /// The perturbed value as shown in the table, e.g. `44d`, `0.42`, `0.5bp`.
    pub fn display_value(self, c: &StrategyConfig) -> String {
        match self {
            SweepParam::DriftWindow => format!("{}d", c.signal.drift_window),
            SweepParam::UpThreshold => format!("{:.2}", c.signal.up_threshold),
            SweepParam::ValueWeight => format!("{:.2}", c.signal.alpha),
            SweepParam::TransactionCost => format!("{:.2}bp", c.cost.rate_per_unit_traded * 1e4),
        }
    }
}

pub const SWEEP_OFFSETS: [f64; 5] = [-0.30, -0.15, 0.0, 0.15, 0.30];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub param: SweepParam,
    pub offset: f64,
    pub value: String,
    /// `None` when the perturbed parameter is invalid, the book never trades
    /// in training, or Sharpe is undefined.
    pub sharpe: Option<f64>,
}

/// One-at-a-time perturbation; cells are returned parameter-major in
/// `SweepParam::ALL` x `offsets` order.
pub fn parameter_sweep(
    panel: &PricePanel,
    base: &StrategyConfig,
    windows: &[WindowSpec],
    offsets: &[f64],
) -> Result<Vec<SweepCell>> {
    let jobs: Vec<(SweepParam, f64)> = SweepParam::ALL
        .iter()
        .flat_map(|p| offsets.iter().map(move |o| (*p, *o)))
        .collect();
    jobs.par_iter()
        .map(|&(param, offset)| {
            let cfg = param.apply(base, offset);
            let value = param.display_value(&cfg);
            if cfg.validate().is_err() {
                return Ok(SweepCell {
                    param,
                    offset,
                    value,
                    sharpe: None,
                });
            }
            // a book that never trades in training has no scale factor
            let sharpe = match run_walk_forward(panel, &cfg, windows) {
                Ok(report) => report.combined.sharpe,
                Err(e) if matches!(e.root(), Error::ZeroVolatility) => None,
                Err(e) => return Err(e),
            };
            Ok(SweepCell {
                param,
                offset,
                value,
                sharpe,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttributionRun {
    pub sharpe: f64,
    pub ann_return: f64,
}

impl AttributionRun {
    fn from_stats(s: &PerfStats) -> Self {
        Self {
            sharpe: s.sharpe_or_zero(),
            ann_return: s.ann_return,
        }
    }
}

/// Four walk-forward runs and the interaction `d - (a + b - c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attribution {
    /// (a) value only, gated.
    pub value_in_regime: AttributionRun,
    /// (b) reversal only, gated.
    pub reversal_in_regime: AttributionRun,
    /// (c) blend with the mask forced to 1.
    pub combined_ungated: AttributionRun,
    /// (d) blend, gated.
    pub combined_gated: AttributionRun,
    pub interaction: AttributionRun,
}

pub fn attribution_decomposition(
    panel: &PricePanel,
    config: &StrategyConfig,
    windows: &[WindowSpec],
) -> Result<Attribution> {
    let bt = Backtester::new(panel, config.clone())?;
    let alpha = config.signal.alpha;
    let specs = [
        (Gate::Regime, 1.0),
        (Gate::Regime, 0.0),
        (Gate::Open, alpha),
        (Gate::Regime, alpha),
    ];
    let runs: Vec<AttributionRun> = specs
        .par_iter()
        .map(|&(gate, a)| {
            let book = bt.gated_book(gate, a);
            let r = walk_forward_book(&bt, &book, windows, false)?;
            Ok(AttributionRun::from_stats(&r.combined))
        })
        .collect::<Result<_>>()?;
    let (a, b, c, d) = (runs[0], runs[1], runs[2], runs[3]);
    Ok(Attribution {
        value_in_regime: a,
        reversal_in_regime: b,
        combined_ungated: c,
        combined_gated: d,
        interaction: AttributionRun {
            sharpe: d.sharpe - (a.sharpe + b.sharpe - c.sharpe),
            ann_return: d.ann_return - (a.ann_return + b.ann_return - c.ann_return),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn cal() -> TradingCalendar {
        TradingCalendar::weekdays(d("2004-01-01"), 252 * 18)
    }

    #[test]
    fn default_geometry() {
        let w = WindowConfig::default().build(&cal()).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].train_start, d("2005-01-01"));
        assert_eq!(w[0].train_end, d("2010-01-01"));
        assert_eq!(w[0].test_end, d("2011-01-01"));
        assert_eq!(w[0].train_period(), "2005--2010");
        assert_eq!(w[0].test_period(), "2010--2011");
        for pair in w.windows(2) {
            assert!(pair[0].test_end <= pair[1].test_start);
        }
    }

    #[test]
    fn anchor_at_calendar_start_errors() {
        let c = cal();
        let err = make_windows(&c, 5, 1, &[c.first().unwrap()]).unwrap_err();
        assert!(err.to_string().contains("2004-01-01"), "{err}");
    }

    #[test]
    fn overlapping_tests_rejected() {
        assert!(make_windows(&cal(), 5, 2, &[d("2010-01-01"), d("2011-01-01")]).is_err());
    }

    #[test]
    fn sweep_rounding() {
        let base = StrategyConfig::default();
        let days: Vec<usize> = SWEEP_OFFSETS
            .iter()
            .map(|o| SweepParam::DriftWindow.apply(&base, *o).signal.drift_window)
            .collect();
        assert_eq!(days, vec![44, 54, 63, 72, 82]);
        assert_eq!(SweepParam::UpThreshold.apply(&base, 0.0), base);
        let th = SweepParam::UpThreshold.apply(&base, -0.30).signal.up_threshold;
        assert!((th - 0.42).abs() < 1e-12);
    }
}

//! Daily backtest loop and the equal-weight benchmark.
//!
//! Weights formed at the close of `t` earn the return of `t + 1` under the
//! default [`Execution::NextClose`]. Turnover at formation is charged
//! against the realized return. The kill-switch is checked after each
//! realized day and flattens the book from the next formation date.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{compute_returns, PricePanel, ReturnPanel};
use crate::error::{Error, Result};
use crate::portfolio::{fill_weights_with, WeightFrame, WeightScratch};
use crate::risk::{kill_switch_step, KillRecord, KillSwitchConfig, KillSwitchState, ScaleFactor, TARGET_VOL};
use crate::signals::{blend, edge_value, SignalCube, SignalParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Cost per unit of gross capital traded (0.6bp default).
    pub rate_per_unit_traded: f64,
    /// Extra adverse cost per unit traded.
    pub slippage_per_trade: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            rate_per_unit_traded: 0.00006,
            slippage_per_trade: 0.0,
        }
    }
}

impl CostModel {
    pub fn per_unit(&self) -> f64 {
        self.rate_per_unit_traded + self.slippage_per_trade
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_per_unit_traded >= 0.0 && self.slippage_per_trade >= 0.0) {
            return Err(Error::InvalidConfig("cost rates must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Trade at the signal close and earn that same day's return.
    Close,
    /// Trade at the signal close and earn the following day's return.
    #[default]
    NextClose,
}

impl Execution {
    fn lag(self) -> usize {
        match self {
            Execution::Close => 0,
            Execution::NextClose => 1,
        }
    }
}

/// Everything the daily loop needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub signal: SignalParams,
    pub cost: CostModel,
    pub kill_switch: KillSwitchConfig,
    pub execution: Execution,
    /// Optional per-name cap on `|weight|` before scaling.
    pub position_cap: Option<f64>,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.cost.validate()?;
        self.kill_switch.validate()?;
        if let Some(c) = self.position_cap {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("position_cap must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Half-open date interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    /// Range covering `first ..= last`.
    pub fn inclusive(first: NaiveDate, last: NaiveDate) -> Self {
        Self {
            start: first,
            end: last.succ_opt().expect("date overflow"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestResult {
    /// Realization date of each daily return.
    pub dates: Vec<NaiveDate>,
    /// Net of costs.
    pub daily_returns: Vec<f64>,
    pub gross_returns: Vec<f64>,
    pub costs: Vec<f64>,
    /// `sum |w_t - w_(t-1)|` of the book that earned each return.
    pub turnover: Vec<f64>,
    /// Equal-weight benchmark on the same dates.
    pub benchmark: Vec<f64>,
    /// Wealth path starting at 1.0; one longer than `daily_returns`.
    pub equity: Vec<f64>,
    #[serde(skip)]
    pub weights_history: Vec<WeightFrame>,
    pub kill_log: Vec<KillRecord>,
    pub scale_used: ScaleFactor,
}

impl BacktestResult {
    pub fn total_turnover(&self) -> f64 {
        self.turnover.iter().sum()
    }

    pub fn mean_turnover(&self) -> f64 {
        if self.turnover.is_empty() {
            0.0
        } else {
            self.total_turnover() / self.turnover.len() as f64
        }
    }
}

/// Returns and benchmark indexed by price-date position.
#[derive(Debug, Clone)]
pub struct MarketData {
    dates: Vec<NaiveDate>,
    returns: ReturnPanel,
    /// Equal-weight return for each price date; `NaN` at index 0.
    bench: Vec<f64>,
    /// Returns with missing entries as 0, row `t` for price date `t`.
    filled: Vec<f64>,
}

impl MarketData {
    pub fn new(panel: &PricePanel) -> Result<Self> {
        let returns = compute_returns(panel)?;
        let mut bench = Vec::with_capacity(panel.n_dates());
        bench.push(f64::NAN);
        for k in 0..returns.n_dates() {
            bench.push(equal_weight(returns.row(k)));
        }
        let n = panel.n_tickers();
        let mut filled = vec![0.0; panel.n_dates() * n];
        for k in 0..returns.n_dates() {
            for (dst, r) in filled[(k + 1) * n..(k + 2) * n].iter_mut().zip(returns.row(k)) {
                *dst = if r.is_nan() { 0.0 } else { *r };
            }
        }
        Ok(Self {
            dates: panel.dates().to_vec(),
            returns,
            bench,
            filled,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn returns(&self) -> &ReturnPanel {
        &self.returns
    }

    /// Returns realized on price date `t >= 1`.
    pub fn returns_on(&self, t: usize) -> &[f64] {
        self.returns.row(t - 1)
    }

    /// As [`MarketData::returns_on`] with missing returns as zero, i.e. a
    /// position without a next-day return unwinds at zero P&L.
    pub fn filled_returns_on(&self, t: usize) -> &[f64] {
        let n = self.returns.n_tickers();
        &self.filled[t * n..(t + 1) * n]
    }

    pub fn benchmark_on(&self, t: usize) -> f64 {
        self.bench[t]
    }

    pub fn index_range(&self, range: DateRange) -> (usize, usize) {
        let lo = self.dates.partition_point(|d| *d < range.start);
        let hi = self.dates.partition_point(|d| *d < range.end);
        (lo, hi.max(lo))
    }
}

fn equal_weight(row: &[f64]) -> f64 {
    let (sum, count) = row
        .iter()
        .filter(|r| !r.is_nan())
        .fold((0.0, 0usize), |(s, c), r| (s + r, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Daily-rebalanced equal-weight return of all names with a return, for each
/// panel date in `range` that has one (the panel's first date has none).
pub fn benchmark_returns(panel: &PricePanel, range: DateRange) -> Result<Vec<f64>> {
    let market = MarketData::new(panel)?;
    let (lo, hi) = market.index_range(range);
    Ok((lo.max(1)..hi).map(|t| market.benchmark_on(t)).collect())
}

/// Unscaled target weights for every panel date, row-major `[date][ticker]`.
#[derive(Debug, Clone)]
pub struct WeightBook {
    n: usize,
    weights: Vec<f64>,
}

impl WeightBook {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.weights[t * self.n..(t + 1) * self.n]
    }
}

/// Which regime gate to apply when turning the blend into an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Regime,
    /// Mask forced to 1 everywhere it is defined.
    Open,
}

/// Data, signals and the gated weight book for one strategy configuration.
#[derive(Debug, Clone)]
pub struct Backtester {
    market: MarketData,
    cube: SignalCube,
    config: StrategyConfig,
    book: WeightBook,
}

impl Backtester {
    pub fn new(panel: &PricePanel, config: StrategyConfig) -> Result<Self> {
        config.validate()?;
        let market = MarketData::new(panel)?;
        let cube = SignalCube::compute(panel, market.returns(), &config.signal)?;
        let mut bt = Self {
            market,
            cube,
            config,
            book: WeightBook {
                n: 0,
                weights: Vec::new(),
            },
        };
        bt.book = bt.gated_book(Gate::Regime, bt.config.signal.alpha);
        Ok(bt)
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn cube(&self) -> &SignalCube {
        &self.cube
    }

    pub fn market(&self) -> &MarketData {
        &self.market
    }

    pub fn book(&self) -> &WeightBook {
        &self.book
    }

    pub fn n_tickers(&self) -> usize {
        self.cube.n_tickers()
    }

    /// First date index a backtest range may start at.
    pub fn first_tradable(&self) -> usize {
        self.config.signal.warmup()
    }

    /// Builds a book from per-date edge rows produced by `edge_fn(t, out)`.
    /// Rows before the warm-up stay flat.
    pub fn book_from_edges(&self, edge_fn: impl FnMut(usize, &mut [f64])) -> WeightBook {
        self.book_from_edges_between(0, self.market.dates.len(), edge_fn)
    }

    /// As [`Backtester::book_from_edges`], filling only date indices in
    /// `[lo, hi)`; runs outside that span see a flat book.
    pub fn book_from_edges_between(
        &self,
        lo: usize,
        hi: usize,
        mut edge_fn: impl FnMut(usize, &mut [f64]),
    ) -> WeightBook {
        let n = self.n_tickers();
        let n_dates = self.market.dates.len();
        let mut weights = vec![0.0; n_dates * n];
        let mut edge = vec![f64::NAN; n];
        let mut scratch = WeightScratch::default();
        let cap = self.config.position_cap;
        for t in lo.max(self.first_tradable()).min(n_dates)..hi.min(n_dates) {
            edge_fn(t, &mut edge);
            fill_weights_with(&edge, cap, &mut weights[t * n..(t + 1) * n], &mut scratch);
        }
        WeightBook { n, weights }
    }

    /// Date-index span `[lo, hi)` touched by the given ranges.
    pub fn span_of(&self, ranges: impl IntoIterator<Item = DateRange>) -> (usize, usize) {
        ranges.into_iter().fold((usize::MAX, 0), |(lo, hi), r| {
            let (a, b) = self.market.index_range(r);
            (lo.min(a), hi.max(b))
        })
    }

    /// Book from the blend with weight `alpha` on value, gated or not.
    pub fn gated_book(&self, gate: Gate, alpha: f64) -> WeightBook {
        let cube = &self.cube;
        self.book_from_edges(|t, out| {
            let value = cube.value_row(t);
            let reversal = cube.reversal_row(t);
            let mask = cube.mask_row(t);
            for i in 0..out.len() {
                let base = blend(value[i], reversal[i], alpha);
                let m = match gate {
                    Gate::Regime => mask[i],
                    Gate::Open if mask[i].is_nan() => f64::NAN,
                    Gate::Open => 1.0,
                };
                out[i] = edge_value(base, m);
            }
        })
    }

    fn check_range(&self, range: DateRange) -> Result<(usize, usize)> {
        let (lo, hi) = self.market.index_range(range);
        if hi <= lo {
            return Err(Error::InvalidConfig(format!(
                "date range {} .. {} contains no panel dates",
                range.start, range.end
            )));
        }
        let required = self.first_tradable();
        if lo < required {
            return Err(Error::InsufficientWarmup {
                required,
                available: lo,
            });
        }
        Ok((lo, hi))
    }

    /// Runs the configured strategy over `range` with a fixed scale.
    pub fn run(&self, range: DateRange, scale: ScaleFactor) -> Result<BacktestResult> {
        self.run_book(&self.book, range, scale, self.config.kill_switch.enabled, true)
    }

    pub fn run_book(
        &self,
        book: &WeightBook,
        range: DateRange,
        scale: ScaleFactor,
        kill_switch: bool,
        record_weights: bool,
    ) -> Result<BacktestResult> {
        let (lo, hi) = self.check_range(range)?;
        Ok(self.simulate(book, lo, hi, scale, kill_switch, record_weights))
    }

    fn simulate(
        &self,
        book: &WeightBook,
        lo: usize,
        hi: usize,
        scale: ScaleFactor,
        kill_switch: bool,
        record_weights: bool,
    ) -> BacktestResult {
        let n = self.n_tickers();
        let lag = self.config.execution.lag();
        let unit_cost = self.config.cost.per_unit();
        let ks_config = &self.config.kill_switch;
        let days = hi - lo;

        let mut out = BacktestResult {
            dates: Vec::with_capacity(days),
            daily_returns: Vec::with_capacity(days),
            gross_returns: Vec::with_capacity(days),
            costs: Vec::with_capacity(days),
            turnover: Vec::with_capacity(days),
            benchmark: Vec::with_capacity(days),
            equity: Vec::with_capacity(days + 1),
            weights_history: Vec::new(),
            kill_log: Vec::new(),
            scale_used: scale,
        };
        out.equity.push(1.0);

        let mut state = KillSwitchState::default();
        let mut prev = vec![0.0; n];
        let mut target = vec![0.0; n];
        for t in lo..hi {
            if state.active {
                for (w, b) in target.iter_mut().zip(book.row(t)) {
                    *w = scale.value * b;
                }
            } else {
                target.fill(0.0);
            }
            let turnover: f64 = target.iter().zip(&prev).map(|(a, b)| (a - b).abs()).sum();
            if record_weights {
                out.weights_history.push(WeightFrame {
                    date: self.market.dates[t],
                    weights: target.clone(),
                });
            }

            let k = t + lag;
            if k < hi {
                let rets = self.market.filled_returns_on(k);
                let gross: f64 = target.iter().zip(rets).map(|(w, r)| w * r).sum();
                let cost = unit_cost * turnover;
                let net = gross - cost;
                let equity = out.equity[out.equity.len() - 1] * (1.0 + net);
                out.dates.push(self.market.dates[k]);
                out.gross_returns.push(gross);
                out.costs.push(cost);
                out.daily_returns.push(net);
                out.turnover.push(turnover);
                out.benchmark.push(self.market.benchmark_on(k));
                out.equity.push(equity);

                if kill_switch && state.active {
                    state = kill_switch_step(
                        &state,
                        &out.equity,
                        &out.daily_returns,
                        &out.benchmark,
                        ks_config,
                        TARGET_VOL,
                        self.market.dates[k],
                    );
                    if let Some(rec) = state.record.as_ref().filter(|_| !state.active) {
                        out.kill_log.push(rec.clone());
                    }
                }
            }
            std::mem::swap(&mut prev, &mut target);
        }
        out
    }
}

pub fn run_backtest(
    panel: &PricePanel,
    params: &SignalParams,
    scale: ScaleFactor,
    cost: &CostModel,
    ks_config: &KillSwitchConfig,
    range: DateRange,
) -> Result<BacktestResult> {
    let config = StrategyConfig {
        signal: *params,
        cost: *cost,
        kill_switch: *ks_config,
        ..Default::default()
    };
    Backtester::new(panel, config)?.run(range, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TradingCalendar;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn tiny_params() -> SignalParams {
        SignalParams {
            alpha: 0.0,
            reversal_lookback: 1,
            drift_window: 1,
            up_threshold: 0.5,
        }
    }

    #[test]
    fn benchmark_averages_available_names() {
        let cal = TradingCalendar::weekdays(d("2020-01-01"), 3);
        let p = PricePanel::new(
            cal,
            vec!["A".into(), "B".into(), "C".into()],
            vec![100.0, 100.0, f64::NAN, 102.0, 98.0, 10.0, 102.0, 98.0, 11.0],
            None,
            None,
        )
        .unwrap();
        let b = benchmark_returns(&p, DateRange::new(d("2019-01-01"), d("2021-01-01"))).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b[0].abs() < 1e-15);
        assert!((b[1] - 0.1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn benchmark_empty_day_is_zero() {
        assert_eq!(equal_weight(&[f64::NAN, f64::NAN]), 0.0);
    }

    /// Two stocks, five dates. With lookback 1, window 1, threshold 0.5 and
    /// alpha 0 the edge on a date is the reversal z-score of names whose
    /// previous return was positive. The ledger is worked by hand below.
    #[test]
    fn hand_ledger() {
        let cal = TradingCalendar::weekdays(d("2020-01-06"), 5);
        #[rustfmt::skip]
        let close = vec![
            100.0, 100.0,
            101.0, 102.0,  // r1: +1%, +2%
            102.01, 102.0, // r2: +1%, 0%   (both up on d1 -> both active on d2)
            103.0301, 107.1, // r3: +1%, +5%   (on d2 A up, B flat -> only A active on d3)
            100.0, 100.0,
        ];
        let p = PricePanel::new(cal, vec!["A".into(), "B".into()], close, None, None).unwrap();
        let cost = CostModel {
            rate_per_unit_traded: 0.001,
            slippage_per_trade: 0.0,
        };
        let bt = Backtester::new(
            &p,
            StrategyConfig {
                signal: tiny_params(),
                cost,
                ..Default::default()
            },
        )
        .unwrap();
        let dates = p.dates().to_vec();
        let res = bt.run(DateRange::new(dates[2], dates[5 - 1]), ScaleFactor::UNIT).unwrap();
        // d2: up-fraction uses r on d1 (both > 0) -> both active. reversal
        // raw = -r2 = {-0.01, 0}; z = {-1/sqrt2, +1/sqrt2} -> A short 0.5, B long 0.5
        // turnover 1.0, cost 0.001; realized d3: -0.5*0.01 + 0.5*0.05 = 0.02
        // d3: up-fraction uses r2: A +1% active, B 0% inactive -> one name -> flat
        // turnover 1.0 charged on d4 return (0 gross)
        assert_eq!(res.dates, vec![dates[3]]);
        let gross = -0.5 * 0.01 + 0.5 * (107.1 / 102.0 - 1.0);
        assert!((res.gross_returns[0] - gross).abs() < 1e-12, "{:?}", res.gross_returns);
        assert!((res.costs[0] - 0.001).abs() < 1e-15);
        assert!((res.daily_returns[0] - (gross - 0.001)).abs() < 1e-12);
        assert!((res.equity[1] - (1.0 + gross - 0.001)).abs() < 1e-12);
        assert_eq!(res.weights_history.len(), 2);
        assert!(res.weights_history[1].is_flat());

        // extend one more day so the liquidation is realized
        let res = bt.run(DateRange::new(dates[2], d("2030-01-01")), ScaleFactor::UNIT).unwrap();
        assert_eq!(res.daily_returns.len(), 2);
        assert!((res.turnover[1] - 1.0).abs() < 1e-15);
        assert_eq!(res.gross_returns[1], 0.0);
        assert!((res.daily_returns[1] + 0.001).abs() < 1e-15);
        let e = 1.0 * (1.0 + res.daily_returns[0]) * (1.0 + res.daily_returns[1]);
        assert!((res.equity[2] - e).abs() < 1e-15);
    }

    #[test]
    fn warmup_enforced() {
        let cal = TradingCalendar::weekdays(d("2020-01-06"), 10);
        let p = PricePanel::new(cal, vec!["A".into()], vec![1.0; 10], None, None).unwrap();
        let bt = Backtester::new(&p, StrategyConfig::default()).unwrap();
        let err = bt.run(DateRange::new(d("2000-01-01"), d("2030-01-01")), ScaleFactor::UNIT).unwrap_err();
        assert!(matches!(err, Error::InsufficientWarmup { required: 73, .. }));
    }

    #[test]
    fn single_rebalance_costs_rate() {
        let cal = TradingCalendar::weekdays(d("2020-01-06"), 4);
        let close = vec![10.0, 10.0, 11.0, 9.0, 11.0, 9.0, 11.0, 9.0];
        let p = PricePanel::new(cal, vec!["A".into(), "B".into()], close, None, None).unwrap();
        let bt = Backtester::new(
            &p,
            StrategyConfig {
                signal: SignalParams { alpha: 1.0, ..tiny_params() },
                ..Default::default()
            },
        )
        .unwrap();
        // d1: A up, B down -> only A active on d2 -> flat. Use open gate instead.
        let book = bt.gated_book(Gate::Open, 1.0);
        let dates = p.dates();
        let res = bt
            .run_book(&book, DateRange::new(dates[2], dates[3]), ScaleFactor::UNIT, false, true)
            .unwrap();
        assert!(res.dates.is_empty());
        let w = &res.weights_history[0];
        assert!((w.gross() - 1.0).abs() < 1e-15);
        let res = bt
            .run_book(&book, DateRange::inclusive(dates[2], dates[3]), ScaleFactor::UNIT, false, true)
            .unwrap();
        assert!((res.turnover[0] - 1.0).abs() < 1e-15);
        assert!((res.costs[0] - 0.00006).abs() < 1e-18);
    }
}

//! Performance statistics over daily simple-return series.
//!
//! Conventions: 252 trading days per year, zero risk-free rate, sample
//! (n - 1) standard deviation, geometric annualized return, bias-adjusted
//! sample skewness. Sharpe is `mean * 252 / (sd * sqrt(252))`.

use serde::Serialize;

use crate::error::{Error, Result};

pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfStats {
    pub n_days: usize,
    /// `None` when volatility is zero or fewer than two returns.
    pub sharpe: Option<f64>,
    /// Geometric: `wealth^(252/n) - 1`.
    pub ann_return: f64,
    /// Arithmetic: `mean * 252`.
    pub ann_return_arithmetic: f64,
    pub ann_vol: Option<f64>,
    pub max_drawdown: f64,
    pub win_rate: f64,
    pub best_day: f64,
    pub worst_day: f64,
    pub skewness: Option<f64>,
    pub correlation_vs_benchmark: Option<f64>,
    pub total_return: f64,
    pub wealth_multiple: f64,
}

impl PerfStats {
    /// Sharpe with undefined mapped to zero, for ranking and p-values.
    pub fn sharpe_or_zero(&self) -> f64 {
        self.sharpe.unwrap_or(0.0)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; `None` below two observations.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

pub fn annualized_vol(xs: &[f64]) -> Option<f64> {
    sample_std(xs).map(|s| s * TRADING_DAYS.sqrt())
}

pub fn sharpe(xs: &[f64]) -> Option<f64> {
    let sd = sample_std(xs)?;
    if sd > 0.0 {
        Some(mean(xs) * TRADING_DAYS / (sd * TRADING_DAYS.sqrt()))
    } else {
        None
    }
}

/// Most negative `equity / running_peak - 1`, with initial wealth 1 counted
/// as the first peak.
pub fn max_drawdown(xs: &[f64]) -> f64 {
    let mut equity = 1.0;
    let mut peak = 1.0f64;
    let mut worst = 0.0f64;
    for r in xs {
        equity *= 1.0 + r;
        peak = peak.max(equity);
        worst = worst.min(equity / peak - 1.0);
    }
    worst
}

/// Drawdown over an equity path (peak taken over the path itself).
pub fn max_drawdown_of_curve(equity: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for e in equity {
        peak = peak.max(*e);
        worst = worst.min(e / peak - 1.0);
    }
    worst
}

pub fn sample_skewness(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 3 {
        return None;
    }
    let m = mean(xs);
    let nf = n as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return None;
    }
    let g1 = m3 / m2.powf(1.5);
    Some((nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1)
}

/// Sample correlation over the common prefix of the two series.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn perf_stats(returns: &[f64], benchmark: Option<&[f64]>) -> Result<PerfStats> {
    if returns.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = returns.len();
    let wealth: f64 = returns.iter().map(|r| 1.0 + r).product();
    let m = mean(returns);
    Ok(PerfStats {
        n_days: n,
        sharpe: sharpe(returns),
        ann_return: wealth.powf(TRADING_DAYS / n as f64) - 1.0,
        ann_return_arithmetic: m * TRADING_DAYS,
        ann_vol: annualized_vol(returns),
        max_drawdown: max_drawdown(returns),
        win_rate: returns.iter().filter(|r| **r > 0.0).count() as f64 / n as f64,
        best_day: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst_day: returns.iter().copied().fold(f64::INFINITY, f64::min),
        skewness: sample_skewness(returns),
        correlation_vs_benchmark: benchmark.and_then(|b| correlation(returns, b)),
        total_return: wealth - 1.0,
        wealth_multiple: wealth,
    })
}

/// `initial * cumulative growth`, starting with `initial` itself.
pub fn wealth_curve(returns: &[f64], initial: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut w = initial;
    out.push(w);
    for r in returns {
        w *= 1.0 + r;
        out.push(w);
    }
    out
}

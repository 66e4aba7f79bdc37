//! Randomization nulls, return/cost stress scenarios and the capacity curve.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PricePanel;
use crate::engine::{Backtester, StrategyConfig, WeightBook};
use crate::error::{Error, Result};
use crate::metrics::{mean, perf_stats, PerfStats};
use crate::signals::edge_value;
use crate::validation::{combined_sharpe, run_walk_forward, WalkForwardReport, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    /// Per-date permutation of the true mask across eligible names.
    #[default]
    RandomRegime,
    /// Per-date permutation of the edge across active names.
    ShuffledSignals,
    /// Per-stock shuffle of contiguous mask blocks through time.
    TemporalBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub n_trials: usize,
    /// Trial stream seed; derived from the master seed when absent.
    pub seed: Option<u64>,
    pub mode: TrialMode,
    /// Block length in days for [`TrialMode::TemporalBlock`].
    pub block_len: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            seed: None,
            mode: TrialMode::RandomRegime,
            block_len: 21,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidConfig("robustness.n_trials must be >= 1".into()));
        }
        if self.block_len == 0 {
            return Err(Error::InvalidConfig("robustness.block_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Independent generator for trial `index` of stream `seed`.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Date span covering every train and test range.
fn window_span(bt: &Backtester, windows: &[WindowSpec]) -> (usize, usize) {
    bt.span_of(windows.iter().flat_map(|w| [w.train(), w.test()]))
}

/// Mask with each date's values permuted among names where both the blend
/// and the mask are defined, so the per-date active count is unchanged.
/// The permutation is drawn as a uniform subset of active positions.
pub fn random_regime_book(bt: &Backtester, windows: &[WindowSpec], rng: &mut ChaCha8Rng) -> WeightBook {
    let cube = bt.cube();
    let mut idx = Vec::with_capacity(bt.n_tickers());
    let (lo, hi) = window_span(bt, windows);
    bt.book_from_edges_between(lo, hi, |t, out| {
        let base = cube.base_row(t);
        let mask = cube.mask_row(t);
        idx.clear();
        let mut active = 0;
        for i in 0..base.len() {
            if !base[i].is_nan() && !mask[i].is_nan() {
                idx.push(i);
                active += (mask[i] == 1.0) as usize;
            }
        }
        out.fill(f64::NAN);
        // choose whichever of the active or inactive sets is smaller
        let (k, fill, rest) = if 2 * active <= idx.len() {
            (active, 1.0, 0.0)
        } else {
            (idx.len() - active, 0.0, 1.0)
        };
        let (chosen, others) = idx.partial_shuffle(rng, k);
        for &i in chosen.iter() {
            out[i] = edge_value(base[i], fill);
        }
        for &i in others.iter() {
            out[i] = edge_value(base[i], rest);
        }
    })
}

/// True edges reassigned at random among each date's active names.
pub fn shuffled_signal_book(bt: &Backtester, windows: &[WindowSpec], rng: &mut ChaCha8Rng) -> WeightBook {
    let cube = bt.cube();
    let mut idx = Vec::with_capacity(bt.n_tickers());
    let mut vals = Vec::with_capacity(bt.n_tickers());
    let (lo, hi) = window_span(bt, windows);
    bt.book_from_edges_between(lo, hi, |t, out| {
        idx.clear();
        vals.clear();
        for (i, (b, m)) in cube.base_row(t).iter().zip(cube.mask_row(t)).enumerate() {
            let e = edge_value(*b, *m);
            out[i] = e;
            if !e.is_nan() && e != 0.0 {
                idx.push(i);
                vals.push(e);
            }
        }
        vals.shuffle(rng);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = vals[k];
        }
    })
}

/// Each stock's mask history cut into `block_len` blocks whose order is
/// shuffled; per-stock activation frequency is preserved.
pub fn temporal_block_book(bt: &Backtester, windows: &[WindowSpec], rng: &mut ChaCha8Rng, block_len: usize) -> WeightBook {
    let cube = bt.cube();
    let n = bt.n_tickers();
    let n_dates = cube.dates().len();
    let mut shuffled = vec![f64::NAN; n_dates * n];
    for i in 0..n {
        let defined: Vec<usize> = (0..n_dates).filter(|&t| !cube.mask_row(t)[i].is_nan()).collect();
        let series: Vec<f64> = defined.iter().map(|&t| cube.mask_row(t)[i]).collect();
        let mut blocks: Vec<&[f64]> = series.chunks(block_len).collect();
        blocks.shuffle(rng);
        for (t, v) in defined.iter().zip(blocks.into_iter().flatten()) {
            shuffled[t * n + i] = *v;
        }
    }
    let (lo, hi) = window_span(bt, windows);
    bt.book_from_edges_between(lo, hi, |t, out| {
        for (i, b) in cube.base_row(t).iter().enumerate() {
            out[i] = edge_value(*b, shuffled[t * n + i]);
        }
    })
}

pub fn trial_book(bt: &Backtester, windows: &[WindowSpec], config: &TrialConfig, seed: u64, index: u64) -> WeightBook {
    let mut rng = trial_rng(seed, index);
    match config.mode {
        TrialMode::RandomRegime => random_regime_book(bt, windows, &mut rng),
        TrialMode::ShuffledSignals => shuffled_signal_book(bt, windows, &mut rng),
        TrialMode::TemporalBlock => temporal_block_book(bt, windows, &mut rng, config.block_len),
    }
}

pub fn random_regime_trial(bt: &Backtester, windows: &[WindowSpec], trial_seed: u64, index: u64) -> Result<f64> {
    let book = random_regime_book(bt, windows, &mut trial_rng(trial_seed, index));
    combined_sharpe(bt, &book, windows)
}

pub fn shuffled_signal_trial(bt: &Backtester, windows: &[WindowSpec], trial_seed: u64, index: u64) -> Result<f64> {
    let book = shuffled_signal_book(bt, windows, &mut trial_rng(trial_seed, index));
    combined_sharpe(bt, &book, windows)
}

/// Combined Sharpe of every trial, in trial order regardless of scheduling.
pub fn run_trials(bt: &Backtester, windows: &[WindowSpec], config: &TrialConfig, seed: u64) -> Result<Vec<f64>> {
    config.validate()?;
    (0..config.n_trials as u64)
        .into_par_iter()
        .map(|k| combined_sharpe(bt, &trial_book(bt, windows, config, seed, k), windows))
        .collect()
}

/// `(1 + #{trial >= true}) / (1 + n)`.
pub fn permutation_pvalue(true_stat: f64, trial_stats: &[f64]) -> Result<f64> {
    if trial_stats.is_empty() {
        return Err(Error::EmptySeries);
    }
    let hits = trial_stats.iter().filter(|s| **s >= true_stat).count();
    Ok((1 + hits) as f64 / (1 + trial_stats.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub n_trials: usize,
    pub true_sharpe: f64,
    pub p_value: f64,
    pub best: f64,
    pub median: f64,
    pub worst: f64,
}

/// Order-independent summary computed from the sorted trial vector.
pub fn summarize_trials(true_sharpe: f64, trials: &[f64]) -> Result<TrialSummary> {
    let p_value = permutation_pvalue(true_sharpe, trials)?;
    let mut sorted = trials.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(TrialSummary {
        n_trials: n,
        true_sharpe,
        p_value,
        best: sorted[n - 1],
        median,
        worst: sorted[0],
    })
}

/// `impact_bp = coefficient_bp * participation ^ exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpactModel {
    pub coefficient_bp: f64,
    pub exponent: f64,
}

impl Default for ImpactModel {
    fn default() -> Self {
        Self {
            coefficient_bp: 50.0,
            exponent: 0.5,
        }
    }
}

impl ImpactModel {
    pub fn impact_bp(&self, participation: f64) -> f64 {
        if participation <= 0.0 {
            0.0
        } else if self.exponent == 0.5 {
            // correctly rounded, so 4x participation gives exactly 2x impact
            self.coefficient_bp * participation.sqrt()
        } else {
            self.coefficient_bp * participation.powf(self.exponent)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coefficient_bp >= 0.0 && self.exponent > 0.0) {
            return Err(Error::InvalidConfig("impact model needs coefficient >= 0, exponent > 0".into()));
        }
        Ok(())
    }
}

/// (participation, impact bp) pairs of the published capacity table.
pub const CAPACITY_TABLE: [(f64, f64); 6] = [(0.02, 3.0), (0.04, 8.0), (0.10, 15.0), (0.20, 28.0), (0.40, 52.0), (0.80, 95.0)];

/// Least-squares fit of `ln impact = ln c + gamma ln participation`.
pub fn fit_impact_model(points: &[(f64, f64)]) -> Result<ImpactModel> {
    if points.len() < 2 {
        return Err(Error::SeriesTooShort {
            needed: 2,
            got: points.len(),
        });
    }
    if points.iter().any(|(p, i)| !(*p > 0.0 && *i > 0.0)) {
        return Err(Error::InvalidConfig("calibration points must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|(p, _)| p.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, i)| i.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidConfig("calibration participations must differ".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let gamma = sxy / sxx;
    Ok(ImpactModel {
        coefficient_bp: (my - gamma * mx).exp(),
        exponent: gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrisisConfig {
    /// Fraction of displayed depth removed (0.5-0.7).
    pub depth_reduction: f64,
    pub spread_multiplier: f64,
    pub slippage_bp: f64,
    /// Dispersion scaling of daily gross returns around their window mean.
    pub vol_multiplier: f64,
    /// Participation at which crisis impact is evaluated.
    pub participation: f64,
}

impl Default for CrisisConfig {
    fn default() -> Self {
        Self {
            depth_reduction: 0.6,
            spread_multiplier: 2.0,
            slippage_bp: 10.0,
            vol_multiplier: 1.0,
            participation: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressConfig {
    pub noise_bp_daily: f64,
    pub cost_multiplier: f64,
    pub slippage_bp: f64,
    pub crisis: CrisisConfig,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            noise_bp_daily: 50.0,
            cost_multiplier: 2.0,
            slippage_bp: 10.0,
            crisis: CrisisConfig::default(),
        }
    }
}

impl StressConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.crisis;
        let ok = [
            self.noise_bp_daily,
            self.cost_multiplier,
            self.slippage_bp,
            c.spread_multiplier,
            c.slippage_bp,
            c.vol_multiplier,
            c.participation,
        ]
        .iter()
        .all(|v| *v >= 0.0);
        if !ok || !(0.0..1.0).contains(&c.depth_reduction) {
            return Err(Error::InvalidConfig(
                "stress parameters must be non-negative and depth_reduction in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressRow {
    pub test: String,
    pub specification: String,
    pub stats: PerfStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressReport {
    pub base: PerfStats,
    pub noise: StressRow,
    pub cost: StressRow,
    pub slippage: StressRow,
    pub crisis: StressRow,
}

impl StressReport {
    pub fn scenarios(&self) -> [&StressRow; 4] {
        [&self.noise, &self.cost, &self.slippage, &self.crisis]
    }
}

/// Crisis per-unit cost: widened spread, slippage, and impact at the
/// configured participation inflated by lost depth.
pub fn crisis_cost_per_unit(base_rate: f64, crisis: &CrisisConfig, impact: &ImpactModel) -> f64 {
    let impact_bp = impact.impact_bp(crisis.participation) / (1.0 - crisis.depth_reduction);
    base_rate * crisis.spread_multiplier + (crisis.slippage_bp + impact_bp) * 1e-4
}

pub fn stress_run(
    base: &WalkForwardReport,
    panel: &PricePanel,
    config: &StrategyConfig,
    windows: &[WindowSpec],
    stress: &StressConfig,
    impact: &ImpactModel,
    seed: u64,
) -> Result<StressReport> {
    stress.validate()?;
    impact.validate()?;
    let bench = Some(base.combined_benchmark_returns.as_slice());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = stress.noise_bp_daily * 1e-4;
    let noisy: Vec<f64> = base
        .combined_returns
        .iter()
        .map(|r| {
            let z: f64 = rng.sample(StandardNormal);
            r + sd * z
        })
        .collect();
    let noise = StressRow {
        test: format!("{}bp Return Noise", stress.noise_bp_daily),
        specification: "Daily Gaussian".into(),
        stats: perf_stats(&noisy, bench)?,
    };

    let rate = config.cost.rate_per_unit_traded;
    let mut cost_cfg = config.clone();
    cost_cfg.cost.rate_per_unit_traded = rate * stress.cost_multiplier;
    let mut slip_cfg = config.clone();
    slip_cfg.cost.slippage_per_trade = stress.slippage_bp * 1e-4;
    let mut crisis_cfg = config.clone();
    crisis_cfg.cost.rate_per_unit_traded = crisis_cost_per_unit(rate, &stress.crisis, impact);
    crisis_cfg.cost.slippage_per_trade = 0.0;

    let cfgs = [cost_cfg, slip_cfg, crisis_cfg];
    let reports: Vec<WalkForwardReport> = cfgs
        .par_iter()
        .map(|c| run_walk_forward(panel, c, windows))
        .collect::<Result<_>>()?;

    let crisis_returns = crisis_returns(&reports[2], stress.crisis.vol_multiplier);
    Ok(StressReport {
        base: base.combined.clone(),
        noise,
        cost: StressRow {
            test: format!("{}x Transaction Costs", stress.cost_multiplier),
            specification: format!("{:.2}bp total", cfgs[0].cost.per_unit() * 1e4),
            stats: reports[0].combined.clone(),
        },
        slippage: StressRow {
            test: format!("{}bp Execution Slippage", stress.slippage_bp),
            specification: "Adverse selection".into(),
            stats: reports[1].combined.clone(),
        },
        crisis: StressRow {
            test: "Crisis Liquidity".into(),
            specification: format!(
                "{:.0}% depth loss, {}x spread, {:.2}bp/unit",
                stress.crisis.depth_reduction * 100.0,
                stress.crisis.spread_multiplier,
                cfgs[2].cost.per_unit() * 1e4
            ),
            stats: perf_stats(&crisis_returns, bench)?,
        },
    })
}

/// Net returns with each window's gross dispersion scaled by `m`.
fn crisis_returns(report: &WalkForwardReport, m: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(report.combined_returns.len());
    for w in &report.windows {
        let g = &w.test.gross_returns;
        if g.is_empty() {
            continue;
        }
        let mu = mean(g);
        out.extend(g.iter().zip(&w.test.costs).map(|(g, c)| mu + m * (g - mu) - c));
    }
    out
}

/// Liquidity assumption for capacity analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvModel {
    /// Median close x volume per name from the panel.
    FromPanel,
    /// Fixed median daily dollar volume per traded name.
    PerName(f64),
}

impl Default for AdvModel {
    fn default() -> Self {
        AdvModel::FromPanel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Viability {
    Excellent,
    Good,
    Marginal,
    Unviable,
}

impl Viability {
    pub fn from_sharpe(s: f64) -> Self {
        if s >= 8.0 {
            Viability::Excellent
        } else if s >= 5.0 {
            Viability::Good
        } else if s >= 1.0 {
            Viability::Marginal
        } else {
            Viability::Unviable
        }
    }
}

impl std::fmt::Display for Viability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Viability::Excellent => "Excellent",
            Viability::Good => "Good",
            Viability::Marginal => "Marginal",
            Viability::Unviable => "Unviable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapacityPoint {
    pub aum: f64,
    pub participation: f64,
    pub impact_bp: f64,
    pub net_sharpe: f64,
    pub net_ann_return: f64,
    pub viability: Viability,
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Sum over names held at any point of the tests of their median daily
/// dollar volume.
pub fn aggregate_dollar_volume(base: &WalkForwardReport, panel: &PricePanel, adv: AdvModel) -> Result<f64> {
    let n = panel.n_tickers();
    let mut traded = vec![false; n];
    for w in &base.windows {
        for frame in &w.test.weights_history {
            for (i, x) in frame.weights.iter().enumerate() {
                traded[i] |= *x != 0.0;
            }
        }
    }
    let n_traded = traded.iter().filter(|t| **t).count();
    match adv {
        AdvModel::PerName(v) => Ok(v * n_traded as f64),
        AdvModel::FromPanel => {
            if !panel.has_volume() {
                return Err(Error::MissingVolume);
            }
            let mut total = 0.0;
            let mut buf = Vec::with_capacity(panel.n_dates());
            for i in (0..n).filter(|&i| traded[i]) {
                buf.clear();
                for t in 0..panel.n_dates() {
                    if let (Some(c), Some(v)) = (panel.close(t, i), panel.volume(t, i)) {
                        buf.push(c * v);
                    }
                }
                total += median(&mut buf).unwrap_or(0.0);
            }
            Ok(total)
        }
    }
}

pub fn capacity_curve(
    base: &WalkForwardReport,
    panel: &PricePanel,
    aum_levels: &[f64],
    adv: AdvModel,
    impact: &ImpactModel,
) -> Result<Vec<CapacityPoint>> {
    impact.validate()?;
    if aum_levels.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidConfig("capacity.aum_levels must be positive".into()));
    }
    let dollar_volume = aggregate_dollar_volume(base, panel, adv)?;
    let turnover = base.combined_turnover();
    let mean_turnover = if turnover.is_empty() { 0.0 } else { mean(&turnover) };
    let bench = Some(base.combined_benchmark_returns.as_slice());
    aum_levels
        .iter()
        .map(|&aum| {
            let participation = if dollar_volume > 0.0 {
                aum * mean_turnover / dollar_volume
            } else {
                f64::INFINITY
            };
            let impact_bp = impact.impact_bp(participation);
            let unit = impact_bp * 1e-4;
            let net: Vec<f64> = base
                .combined_returns
                .iter()
                .zip(&turnover)
                .map(|(r, t)| r - unit * t)
                .collect();
            let stats = perf_stats(&net, bench)?;
            let net_sharpe = stats.sharpe_or_zero();
            Ok(CapacityPoint {
                aum,
                participation,
                impact_bp,
                net_sharpe,
                net_ann_return: stats.ann_return,
                viability: Viability::from_sharpe(net_sharpe),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pvalue_examples() {
        let below = vec![4.0; 999];
        assert_eq!(permutation_pvalue(5.0, &below).unwrap(), 1.0 / 1000.0);
        assert_eq!(permutation_pvalue(0.0, &[1.0, 2.0]).unwrap(), 1.0);
        let mut nine = vec![1.0; 9];
        nine[3] = 5.0;
        assert_eq!(permutation_pvalue(5.0, &nine).unwrap(), 2.0 / 10.0);
        assert!(permutation_pvalue(1.0, &[]).is_err());
    }

    #[test]
    fn square_root_law() {
        let m = ImpactModel::default();
        for p in [0.001, 0.02, 0.3] {
            assert_eq!(m.impact_bp(4.0 * p), 2.0 * m.impact_bp(p));
        }
        assert_eq!(m.impact_bp(0.0), 0.0);
    }

    #[test]
    fn table_fit_within_band() {
        let m = fit_impact_model(&CAPACITY_TABLE).unwrap();
        assert!(m.exponent > 0.8 && m.exponent < 1.0, "{m:?}");
        for (p, i) in CAPACITY_TABLE {
            let r = m.impact_bp(p) / i;
            assert!((0.8..=1.2).contains(&r), "{p}: {r}");
        }
    }

    #[test]
    fn exact_power_law_recovered() {
        let pts: Vec<(f64, f64)> = [0.01f64, 0.1, 0.5].iter().map(|p| (*p, 30.0 * p.powf(0.7))).collect();
        let m = fit_impact_model(&pts).unwrap();
        assert!((m.exponent - 0.7).abs() < 1e-12);
        assert!((m.coefficient_bp - 30.0).abs() < 1e-9);
    }

    #[test]
    fn bands() {
        assert_eq!(Viability::from_sharpe(12.1), Viability::Excellent);
        assert_eq!(Viability::from_sharpe(5.9), Viability::Good);
        assert_eq!(Viability::from_sharpe(2.8), Viability::Marginal);
        assert_eq!(Viability::from_sharpe(0.4), Viability::Unviable);
    }

    #[test]
    fn trial_streams_are_independent_and_reproducible() {
        let a: u64 = trial_rng(7, 0).random();
        let b: u64 = trial_rng(7, 0).random();
        let c: u64 = trial_rng(7, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

//! The daily loop checked against a slow ledger rebuilt from the per-date
//! public signal functions.

use chrono::NaiveDate;
use proptest::prelude::*;
use regime_factor::data::{compute_returns, generate_synthetic, PricePanel, SyntheticMarketConfig};
use regime_factor::engine::{Backtester, CostModel, DateRange, Execution, StrategyConfig};
use regime_factor::portfolio::build_weights;
use regime_factor::risk::{KillSwitchConfig, ScaleFactor};
use regime_factor::signals::{
    base_signal, edge_signal, regime_mask, reversal_signal, up_fraction, value_signal, SignalParams,
};

fn panel(seed: u64, n_stocks: usize, n_days: usize) -> PricePanel {
    generate_synthetic(&SyntheticMarketConfig {
        n_stocks,
        n_days,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn params() -> SignalParams {
    SignalParams {
        alpha: 0.7,
        reversal_lookback: 5,
        drift_window: 20,
        up_threshold: 0.55,
    }
}

fn no_kill() -> KillSwitchConfig {
    KillSwitchConfig {
        enabled: false,
        ..Default::default()
    }
}

/// Ledger: weights from date `t` times returns of `t + 1`, cost on turnover.
fn oracle(p: &PricePanel, prm: &SignalParams, scale: f64, rate: f64, lo: usize, hi: usize) -> Vec<f64> {
    let rets = compute_returns(p).unwrap();
    let dates = p.dates();
    let mut prev = vec![0.0; p.n_tickers()];
    let mut out = Vec::new();
    for t in lo..hi - 1 {
        let d = dates[t];
        let v = value_signal(p, d).unwrap();
        let r = reversal_signal(&rets, d, prm.reversal_lookback);
        let base = base_signal(&v, &r, prm.alpha);
        let mask = regime_mask(&up_fraction(&rets, d, prm.drift_window), prm.up_threshold);
        let w: Vec<f64> = build_weights(&edge_signal(&base, &mask)).weights.iter().map(|x| x * scale).collect();
        let turnover: f64 = w.iter().zip(&prev).map(|(a, b)| (a - b).abs()).sum();
        let mut gross = 0.0;
        for i in 0..w.len() {
            let (a, b) = (p.close(t, i), p.close(t + 1, i));
            if let (Some(a), Some(b)) = (a, b) {
                gross += w[i] * (b / a - 1.0);
            }
        }
        out.push(gross - rate * turnover);
        prev = w;
    }
    out
}

#[test]
fn loop_matches_ledger() {
    let p = panel(11, 14, 160);
    let prm = params();
    let cfg = StrategyConfig {
        signal: prm,
        cost: CostModel {
            rate_per_unit_traded: 0.0005,
            slippage_per_trade: 0.0001,
        },
        kill_switch: no_kill(),
        ..Default::default()
    };
    let bt = Backtester::new(&p, cfg).unwrap();
    let (lo, hi) = (prm.warmup(), 160);
    let scale = ScaleFactor::from_stats(0.24, -0.1).unwrap();
    let res = bt.run(DateRange::inclusive(p.dates()[lo], p.dates()[hi - 1]), scale).unwrap();
    let want = oracle(&p, &prm, scale.value, 0.0006, lo, hi);
    assert_eq!(res.daily_returns.len(), want.len());
    for (a, b) in res.daily_returns.iter().zip(&want) {
        assert!((a - b).abs() < 1e-13, "{a} vs {b}");
    }
    assert_eq!(res.equity.len(), want.len() + 1);
}

#[test]
fn same_close_execution_earns_same_day() {
    let p = panel(3, 10, 120);
    let mut cfg = StrategyConfig {
        signal: params(),
        kill_switch: no_kill(),
        ..Default::default()
    };
    let next = Backtester::new(&p, cfg.clone()).unwrap();
    cfg.execution = Execution::Close;
    let same = Backtester::new(&p, cfg).unwrap();
    let range = DateRange::inclusive(p.dates()[30], p.dates()[119]);
    let a = next.run(range, ScaleFactor::UNIT).unwrap();
    let b = same.run(range, ScaleFactor::UNIT).unwrap();
    assert_eq!(b.daily_returns.len(), a.daily_returns.len() + 1);
    assert_eq!(b.dates[0], p.dates()[30]);
    assert_eq!(a.dates[0], p.dates()[31]);
}

fn perturb_after(p: &PricePanel, cut: usize, factor: f64) -> PricePanel {
    let n = p.n_tickers();
    let mut close = p.close_matrix().to_vec();
    for t in cut..p.n_dates() {
        for i in 0..n {
            close[t * n + i] *= factor.powi((t - cut + 1 + i) as i32);
        }
    }
    PricePanel::new(p.calendar().clone(), p.tickers().to_vec(), close, None, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linear_in_scale(seed in 0u64..1000, k in 0.1f64..4.0) {
        let p = panel(seed, 10, 110);
        let cfg = StrategyConfig { signal: params(), kill_switch: no_kill(), ..Default::default() };
        let bt = Backtester::new(&p, cfg).unwrap();
        let range = DateRange::inclusive(p.dates()[25], p.dates()[109]);
        let one = bt.run(range, ScaleFactor::UNIT).unwrap();
        let s = ScaleFactor { value: k, training_vol: f64::NAN, training_maxdd: f64::NAN };
        let many = bt.run(range, s).unwrap();
        for t in 0..one.daily_returns.len() {
            prop_assert!((many.gross_returns[t] - k * one.gross_returns[t]).abs() < 1e-12);
            prop_assert!((many.turnover[t] - k * one.turnover[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn future_prices_do_not_move_the_past(seed in 0u64..1000, cut in 40usize..100, f in 0.9f64..1.1) {
        let p = panel(seed, 10, 110);
        let q = perturb_after(&p, cut, f);
        let cfg = StrategyConfig { signal: params(), ..Default::default() };
        let range = DateRange::inclusive(p.dates()[25], p.dates()[109]);
        let a = Backtester::new(&p, cfg.clone()).unwrap().run(range, ScaleFactor::UNIT).unwrap();
        let b = Backtester::new(&q, cfg).unwrap().run(range, ScaleFactor::UNIT).unwrap();
        // returns realized on dates before `cut` only use prices up to cut - 1
        let before: Vec<NaiveDate> = p.dates()[..cut].to_vec();
        for (k, d) in a.dates.iter().enumerate() {
            if before.contains(d) {
                prop_assert_eq!(a.daily_returns[k], b.daily_returns[k]);
                prop_assert_eq!(&a.weights_history[k].weights, &b.weights_history[k].weights);
            }
        }
    }
}

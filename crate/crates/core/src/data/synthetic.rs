//! Seeded synthetic market with stock-specific drift episodes.
//!
//! Each stock follows a geometric random walk. A two-state renewal process
//! (normal / drift) runs independently per stock; while a stock is in a
//! drift episode its daily log-return mean is shifted up by `drift_strength`
//! and it picks up a short-horizon reversal term proportional to its negated
//! trailing 10-day return, demeaned across the stocks currently in drift.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PricePanel, TradingCalendar};
use crate::error::{Error, Result};

const REVERSAL_HORIZON: usize = 10;
const VOLUME_NOISE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticMarketConfig {
    pub n_stocks: usize,
    pub n_days: usize,
    pub seed: u64,
    /// Daily log-return volatility.
    pub base_vol: f64,
    /// Long-run fraction of stock-days spent in drift episodes.
    pub drift_regime_fraction: f64,
    /// Added daily mean log return while in drift.
    pub drift_strength: f64,
    /// Coefficient on the negated, demeaned trailing 10-day return (drift only).
    pub reversal_strength: f64,
    /// Mean drift episode length in days.
    pub regime_episode_length: f64,
}

impl Default for SyntheticMarketConfig {
    fn default() -> Self {
        Self {
            n_stocks: 50,
            n_days: 2350,
            seed: 0,
            base_vol: 0.02,
            drift_regime_fraction: 0.35,
            drift_strength: 0.008,
            reversal_strength: 0.1,
            regime_episode_length: 126.0,
        }
    }
}

impl SyntheticMarketConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic: {m}")));
        if self.n_stocks == 0 {
            return bad("n_stocks must be >= 1");
        }
        if self.n_days < 2 {
            return bad("n_days must be >= 2");
        }
        for (name, v) in [
            ("base_vol", self.base_vol),
            ("drift_strength", self.drift_strength),
            ("reversal_strength", self.reversal_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.drift_regime_fraction) {
            return bad("drift_regime_fraction must be in [0, 1]");
        }
        if !(self.regime_episode_length.is_finite() && self.regime_episode_length >= 1.0) {
            return bad("regime_episode_length must be >= 1");
        }
        Ok(())
    }

    /// Daily probabilities of (leaving drift, entering drift) that give mean
    /// drift episode length `regime_episode_length` and stationary drift
    /// share `drift_regime_fraction`.
    fn switch_probabilities(&self) -> (f64, f64) {
        let f = self.drift_regime_fraction;
        let exit = 1.0 / self.regime_episode_length;
        let enter = if f <= 0.0 {
            0.0
        } else if f >= 1.0 {
            1.0
        } else {
            (exit * f / (1.0 - f)).min(1.0)
        };
        let exit = if f >= 1.0 { 0.0 } else { exit };
        (exit, enter)
    }
}

/// First date of every synthetic calendar.
pub fn synthetic_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

pub fn generate_synthetic(config: &SyntheticMarketConfig) -> Result<PricePanel> {
    generate_with_states(config).map(|(panel, _)| panel)
}

/// Also returns the drift-state indicator matrix `[day][stock]`.
pub(crate) fn generate_with_states(config: &SyntheticMarketConfig) -> Result<(PricePanel, Vec<bool>)> {
    config.validate()?;
    let n = config.n_stocks;
    let days = config.n_days;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (p_exit, p_enter) = config.switch_probabilities();

    let mut price: Vec<f64> = (0..n)
        .map(|_| (50f64.ln() + 0.6 * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let mean_volume: Vec<f64> = (0..n)
        .map(|_| (1.0e6f64.ln() + 0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let mut in_drift: Vec<bool> = (0..n)
        .map(|_| rng.random::<f64>() < config.drift_regime_fraction)
        .collect();

    let mut close = Vec::with_capacity(days * n);
    let mut volume = Vec::with_capacity(days * n);
    let mut states = Vec::with_capacity(days * n);
    // log returns, row-major by day (day 0 has none)
    let mut log_ret: Vec<f64> = Vec::with_capacity(days * n);
    let vol_draw = |rng: &mut ChaCha8Rng, m: f64| {
        let z: f64 = rng.sample(StandardNormal);
        (m * (VOLUME_NOISE * z - 0.5 * VOLUME_NOISE * VOLUME_NOISE).exp()).round()
    };

    for i in 0..n {
        close.push(price[i]);
        volume.push(vol_draw(&mut rng, mean_volume[i]));
        states.push(in_drift[i]);
    }
    log_ret.extend(std::iter::repeat_n(0.0, n));

    let mut trailing = vec![0.0; n];
    for day in 1..days {
        for s in in_drift.iter_mut() {
            let u: f64 = rng.random();
            *s = if *s { u >= p_exit } else { u < p_enter };
        }

        // trailing compounded return over the last REVERSAL_HORIZON days, known at day-1
        let have_history = day > REVERSAL_HORIZON;
        let mut drift_mean = 0.0;
        if have_history && config.reversal_strength > 0.0 {
            let mut count = 0usize;
            for i in 0..n {
                let sum: f64 = (day - REVERSAL_HORIZON..day).map(|d| log_ret[d * n + i]).sum();
                trailing[i] = sum.exp() - 1.0;
                if in_drift[i] {
                    drift_mean += trailing[i];
                    count += 1;
                }
            }
            if count > 0 {
                drift_mean /= count as f64;
            }
        }

        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let mut x = config.base_vol * z;
            if in_drift[i] {
                x += config.drift_strength;
                if have_history && config.reversal_strength > 0.0 {
                    x += config.reversal_strength * -(trailing[i] - drift_mean);
                }
            }
            price[i] *= x.exp();
            log_ret.push(x);
            close.push(price[i]);
            volume.push(vol_draw(&mut rng, mean_volume[i]));
            states.push(in_drift[i]);
        }
    }

    let tickers = (0..n).map(|i| format!("S{i:04}")).collect();
    let panel = PricePanel::new(
        TradingCalendar::weekdays(synthetic_start(), days),
        tickers,
        close,
        Some(volume),
        None,
    )?;
    Ok((panel, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_returns;

    fn small(seed: u64) -> SyntheticMarketConfig {
        SyntheticMarketConfig {
            n_stocks: 20,
            n_days: 300,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        let bits = |p: &PricePanel| p.close_matrix().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let a = generate_synthetic(&small(1)).unwrap();
        let b = generate_synthetic(&small(2)).unwrap();
        assert_ne!(a.close_matrix(), b.close_matrix());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small(0);
        c.drift_regime_fraction = 1.5;
        assert!(generate_synthetic(&c).is_err());
        let mut c = small(0);
        c.reversal_strength = -0.1;
        assert!(generate_synthetic(&c).is_err());
    }

    #[test]
    fn drift_share_tracks_target() {
        let c = SyntheticMarketConfig {
            n_stocks: 100,
            n_days: 3000,
            ..Default::default()
        };
        let (_, states) = generate_with_states(&c).unwrap();
        let share = states.iter().filter(|s| **s).count() as f64 / states.len() as f64;
        assert!((share - 0.35).abs() < 0.05, "drift share {share}");
    }

    #[test]
    fn no_drift_means_symmetric_up_days() {
        let c = SyntheticMarketConfig {
            n_stocks: 100,
            n_days: 1001,
            drift_strength: 0.0,
            reversal_strength: 0.0,
            ..Default::default()
        };
        let r = compute_returns(&generate_synthetic(&c).unwrap()).unwrap();
        let mut up = 0usize;
        let mut total = 0usize;
        for t in 0..r.n_dates() {
            for x in r.row(t) {
                total += 1;
                up += (*x > 0.0) as usize;
            }
        }
        let frac = up as f64 / total as f64;
        assert_eq!(total, 100_000);
        assert!((frac - 0.5).abs() < 0.02, "up fraction {frac}");
    }
}

//! Static position scaling from the training period and the latching
//! kill-switch evaluated during tests.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, correlation, sample_std, TRADING_DAYS};

/// Annualized volatility cap used for scaling and the vol-spike trigger.
pub const TARGET_VOL: f64 = 0.12;
/// Maximum drawdown the training path may reach after scaling.
pub const TARGET_MAX_DD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleFactor {
    pub value: f64,
    pub training_vol: f64,
    pub training_maxdd: f64,
}

impl ScaleFactor {
    pub const UNIT: ScaleFactor = ScaleFactor {
        value: 1.0,
        training_vol: f64::NAN,
        training_maxdd: f64::NAN,
    };

    /// `min(0.12 / vol, 0.15 / |maxdd|)`; a zero drawdown drops its leg.
    pub fn from_stats(training_vol: f64, training_maxdd: f64) -> Result<Self> {
        if !(training_vol > 0.0 && training_vol.is_finite()) {
            return Err(Error::ZeroVolatility);
        }
        let mut value = TARGET_VOL / training_vol;
        if training_maxdd < 0.0 {
            value = value.min(TARGET_MAX_DD / training_maxdd.abs());
        }
        Ok(Self {
            value,
            training_vol,
            training_maxdd,
        })
    }
}

pub fn compute_scale_factor(training_returns: &[f64]) -> Result<ScaleFactor> {
    if training_returns.is_empty() {
        return Err(Error::EmptySeries);
    }
    let vol = sample_std(training_returns)
        .ok_or(Error::SeriesTooShort {
            needed: 2,
            got: training_returns.len(),
        })?
        * TRADING_DAYS.sqrt();
    ScaleFactor::from_stats(vol, metrics::max_drawdown(training_returns))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KillSwitchConfig {
    pub abs_dd_threshold: f64,
    pub rolling_loss_threshold: f64,
    pub rolling_window: usize,
    pub vol_spike_multiple: f64,
    pub vol_spike_window: usize,
    pub corr_threshold: f64,
    pub corr_window: usize,
    /// Master switch; training runs always evaluate without it.
    pub enabled: bool,
}

impl Default for KillSwitchConfig {
    fn default() -> Self {
        Self {
            abs_dd_threshold: -0.30,
            rolling_loss_threshold: -0.10,
            rolling_window: 63,
            vol_spike_multiple: 3.0,
            vol_spike_window: 21,
            corr_threshold: 0.5,
            corr_window: 63,
            enabled: true,
        }
    }
}

impl KillSwitchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("kill_switch.{m}")));
        if !(self.abs_dd_threshold < 0.0) {
            return bad("abs_dd_threshold must be negative");
        }
        if !(self.rolling_loss_threshold < 0.0) {
            return bad("rolling_loss_threshold must be negative");
        }
        if !(self.vol_spike_multiple > 0.0) {
            return bad("vol_spike_multiple must be positive");
        }
        if !(self.corr_threshold > 0.0) {
            return bad("corr_threshold must be positive");
        }
        if self.rolling_window < 2 || self.vol_spike_window < 2 || self.corr_window < 2 {
            return bad("windows must be >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TriggerType {
    AbsoluteDrawdown,
    RollingLoss,
    VolSpike,
    CorrelationBreak,
}

impl std::fmt::Display for TriggerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TriggerType::AbsoluteDrawdown => "Absolute Drawdown",
            TriggerType::RollingLoss => "Rolling Loss",
            TriggerType::VolSpike => "Volatility Spike",
            TriggerType::CorrelationBreak => "Correlation Break",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KillRecord {
    pub date: NaiveDate,
    pub trigger: TriggerType,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KillSwitchState {
    pub active: bool,
    pub record: Option<KillRecord>,
}

impl Default for KillSwitchState {
    fn default() -> Self {
        Self {
            active: true,
            record: None,
        }
    }
}

impl KillSwitchState {
    pub fn triggered_on(&self) -> Option<NaiveDate> {
        self.record.as_ref().map(|r| r.date)
    }

    pub fn trigger_type(&self) -> Option<TriggerType> {
        self.record.as_ref().map(|r| r.trigger)
    }
}

/// Evaluates the four triggers once, after the day's P&L. `equity` is the
/// wealth path including its starting value; `daily_returns` and
/// `benchmark_returns` are aligned and end on `date`. Once inactive the
/// state never changes.
pub fn kill_switch_step(
    state: &KillSwitchState,
    equity: &[f64],
    daily_returns: &[f64],
    benchmark_returns: &[f64],
    config: &KillSwitchConfig,
    target_vol: f64,
    date: NaiveDate,
) -> KillSwitchState {
    if !state.active {
        return state.clone();
    }
    let fire = |trigger, value, threshold| KillSwitchState {
        active: false,
        record: Some(KillRecord {
            date,
            trigger,
            value,
            threshold,
        }),
    };

    if let Some(&last) = equity.last() {
        let peak = equity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dd = last / peak - 1.0;
        if dd <= config.abs_dd_threshold {
            return fire(TriggerType::AbsoluteDrawdown, dd, config.abs_dd_threshold);
        }
    }

    let n = daily_returns.len();
    if n >= config.rolling_window {
        let growth: f64 = daily_returns[n - config.rolling_window..]
            .iter()
            .map(|r| 1.0 + r)
            .product();
        let loss = growth - 1.0;
        if loss <= config.rolling_loss_threshold {
            return fire(TriggerType::RollingLoss, loss, config.rolling_loss_threshold);
        }
    }

    if n >= config.vol_spike_window {
        if let Some(sd) = sample_std(&daily_returns[n - config.vol_spike_window..]) {
            let vol = sd * TRADING_DAYS.sqrt();
            let limit = config.vol_spike_multiple * target_vol;
            if vol >= limit {
                return fire(TriggerType::VolSpike, vol, limit);
            }
        }
    }

    let m = benchmark_returns.len().min(n);
    if m >= config.corr_window {
        let a = &daily_returns[n - config.corr_window..];
        let b = &benchmark_returns[benchmark_returns.len() - config.corr_window..];
        if let Some(rho) = correlation(a, b) {
            if rho.abs() > config.corr_threshold {
                return fire(TriggerType::CorrelationBreak, rho, config.corr_threshold);
            }
        }
    }

    state.clone()
}

//! Command-line front end: configuration loading with dotted overrides,
//! subcommand dispatch and report files.
//!
//! Every output file starts with a `# config-hash: <sha256>` line computed
//! from the resolved configuration (output location excluded), so two runs
//! of the same experiment produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_panel, write_panel, ColumnMapping, PricePanel, SyntheticMarketConfig};
use crate::engine::{BacktestResult, Backtester, CostModel, DateRange, Execution, StrategyConfig};
use crate::error::Error;
use crate::metrics::PerfStats;
use crate::risk::{KillSwitchConfig, ScaleFactor};
use crate::robustness::{
    capacity_curve, fit_impact_model, run_trials, stress_run, summarize_trials, AdvModel, CapacityPoint,
    ImpactModel, StressConfig, StressReport, TrialConfig, TrialMode, TrialSummary, CAPACITY_TABLE,
};
use crate::signals::SignalParams;
use crate::validation::{
    attribution_decomposition, parameter_sweep, run_walk_forward, Attribution, SweepCell, SweepParam,
    WalkForwardReport, WindowConfig, WindowSpec, SWEEP_OFFSETS,
};

pub const OUTPUT_DIR_ENV: &str = "REGIME_FACTOR_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "regime-factor", version, about = "Regime-gated value/reversal factor research")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set signal.alpha=0.6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for parallel runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides the config and the environment.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic market as a panel file.
    Synth,
    /// One backtest over a date range at a fixed scale.
    Backtest {
        #[arg(long)]
        start: Option<NaiveDate>,
        /// Last date, inclusive.
        #[arg(long)]
        end: Option<NaiveDate>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Walk-forward validation over the configured windows.
    Walkforward,
    /// One-at-a-time parameter sensitivity.
    Sweep,
    /// Value / reversal / gating return decomposition.
    Attribution,
    /// Randomized-null trials and permutation p-value.
    Randomize,
    /// Noise, cost, slippage and crisis scenarios.
    Stress,
    /// Capacity and market impact curve.
    Capacity,
    /// All of the above into one report.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnsConfig {
    pub date: String,
    pub ticker: String,
    pub close: String,
    pub volume: Option<String>,
    pub sector: Option<String>,
    pub delimiter: char,
}

impl Default for ColumnsConfig {
    fn default() -> Self {
        let m = ColumnMapping::default();
        Self {
            date: m.date,
            ticker: m.ticker,
            close: m.close,
            volume: m.volume,
            sector: m.sector,
            delimiter: m.delimiter as char,
        }
    }
}

impl ColumnsConfig {
    fn mapping(&self) -> Result<ColumnMapping, Error> {
        if !self.delimiter.is_ascii() {
            return Err(Error::InvalidConfig("data.columns.delimiter must be ASCII".into()));
        }
        Ok(ColumnMapping {
            date: self.date.clone(),
            ticker: self.ticker.clone(),
            close: self.close.clone(),
            volume: self.volume.clone(),
            sector: self.sector.clone(),
            delimiter: self.delimiter as u8,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Long-format price file.
    pub path: Option<PathBuf>,
    pub columns: ColumnsConfig,
    pub synthetic: Option<SyntheticMarketConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortfolioConfig {
    pub position_cap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub n_trials: usize,
    pub seed: Option<u64>,
    pub mode: TrialMode,
    pub block_len: usize,
    pub stress: StressConfig,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        let t = TrialConfig::default();
        Self {
            n_trials: t.n_trials,
            seed: t.seed,
            mode: t.mode,
            block_len: t.block_len,
            stress: StressConfig::default(),
        }
    }
}

impl RobustnessConfig {
    pub fn trials(&self) -> TrialConfig {
        TrialConfig {
            n_trials: self.n_trials,
            seed: self.seed,
            mode: self.mode,
            block_len: self.block_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    pub aum_levels: Vec<f64>,
    pub impact: ImpactModel,
    /// Median daily dollar volume per name; read from the panel when absent.
    pub adv_per_name: Option<f64>,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            aum_levels: vec![50e6, 100e6, 250e6, 500e6, 1e9, 2e9],
            impact: ImpactModel::default(),
            adv_per_name: None,
        }
    }
}

impl CapacityConfig {
    fn adv(&self) -> AdvModel {
        self.adv_per_name.map_or(AdvModel::FromPanel, AdvModel::PerName)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub execution: Execution,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub signal: SignalParams,
    pub cost: CostModel,
    pub kill_switch: KillSwitchConfig,
    pub portfolio: PortfolioConfig,
    pub windows: WindowConfig,
    pub robustness: RobustnessConfig,
    pub capacity: CapacityConfig,
}

impl RunConfig {
    pub fn strategy(&self) -> StrategyConfig {
        StrategyConfig {
            signal: self.signal,
            cost: self.cost,
            kill_switch: self.kill_switch,
            execution: self.execution,
            position_cap: self.portfolio.position_cap,
        }
    }

    pub fn trial_seed(&self) -> u64 {
        self.robustness.seed.unwrap_or_else(|| substream_seed(self.master_seed, "trials"))
    }

    pub fn noise_seed(&self) -> u64 {
        substream_seed(self.master_seed, "noise")
    }

    /// SHA-256 of the resolved configuration, output location excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = toml::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Named, independent seed derived from the master seed.
pub fn substream_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A failure with its process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::InvalidConfig(_) | Error::UnknownDate(_) => 2,
            Error::Invariant(_) => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// TOML local dates become strings so they deserialize as `NaiveDate`.
fn normalize_dates(v: &mut toml::Value) {
    match v {
        toml::Value::Datetime(dt) => *v = toml::Value::String(dt.to_string()),
        toml::Value::Array(xs) => xs.iter_mut().for_each(normalize_dates),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, x)| normalize_dates(x)),
        _ => {}
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("bad key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("`{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn lookup<'a>(root: &'a toml::Table, path: &[&str]) -> Option<&'a toml::Value> {
    let (last, head) = path.split_last()?;
    let mut t = root;
    for p in head {
        t = t.get(*p)?.as_table()?;
    }
    t.get(*last)
}

/// Reads the config file (if any), applies overrides and resolves derived
/// seeds.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, Failure> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_override(&mut root, s)?;
    }
    let mut value = toml::Value::Table(root);
    normalize_dates(&mut value);
    let root = match value {
        toml::Value::Table(t) => t,
        _ => unreachable!(),
    };
    let mut config: RunConfig = RunConfig::deserialize(toml::Value::Table(root.clone()))
        .map_err(|e| Failure::config(format!("configuration: {e}")))?;
    if let Some(syn) = config.data.synthetic.as_mut() {
        if lookup(&root, &["data", "synthetic", "seed"]).is_none() {
            syn.seed = substream_seed(config.master_seed, "synthetic");
        }
    }
    validate(&config)?;
    Ok(config)
}

fn validate(c: &RunConfig) -> Result<(), Failure> {
    c.strategy().validate()?;
    c.robustness.trials().validate()?;
    c.robustness.stress.validate()?;
    c.capacity.impact.validate()?;
    if let Some(s) = &c.data.synthetic {
        s.validate()?;
    }
    if c.data.path.is_some() && c.data.synthetic.is_some() {
        return Err(Failure::config("set only one of data.path and data.synthetic"));
    }
    Ok(())
}

fn load_data(c: &RunConfig) -> Result<PricePanel, Failure> {
    match (&c.data.path, &c.data.synthetic) {
        (Some(p), None) => Ok(load_panel(p, &c.data.columns.mapping()?)?),
        (None, Some(s)) => Ok(generate_synthetic(s)?),
        _ => Err(Failure::config(
            "no data source: set data.path or a [data.synthetic] section",
        )),
    }
}

fn output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"))
}

/// Writes hash-stamped files into one directory.
struct Sink {
    dir: PathBuf,
    hash: String,
}

impl Sink {
    fn header(&self) -> String {
        format!("# config-hash: {}\n", self.hash)
    }

    fn text(&self, name: &str, body: &str) -> Result<(), Failure> {
        let content = format!("{}{body}", self.header());
        std::fs::write(self.dir.join(name), content).map_err(|e| Failure::from(Error::from(e)))
    }

    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
        let mut w = csv::Writer::from_writer(self.header().into_bytes());
        let io = |e: csv::Error| Failure::from(Error::Io(std::io::Error::other(e)));
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::from(Error::Io(std::io::Error::other(e.to_string()))))?;
        std::fs::write(self.dir.join(name), bytes).map_err(|e| Failure::from(Error::from(e)))
    }
}

/// Aligned plain-text table.
pub fn render_table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (k, (c, w)) in cells.zip(&widths).enumerate() {
            if k > 0 {
                s.push_str("  ");
            }
            if k == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
    let mut out = format!("{title}\n{}\n", "=".repeat(total.max(title.len())));
    out.push_str(&line(&mut header.iter().copied()));
    out.push('\n');
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(&mut r.iter().map(String::as_str)));
        out.push('\n');
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn num(x: f64) -> String {
    format!("{x:.2}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".into(), num)
}

fn raw(x: f64) -> String {
    format!("{x}")
}

fn raw_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, raw)
}

fn ratio(a: f64, b: f64) -> String {
    if b != 0.0 && (a / b).is_finite() {
        format!("{:.2}x", a / b)
    } else {
        "N/A".into()
    }
}

fn perf_table(title: &str, s: &PerfStats, b: &PerfStats) -> String {
    let row = |m: &str, x: String, y: String, r: String| vec![m.to_string(), x, y, r];
    let rows = vec![
        row(
            "Sharpe Ratio (OOS)",
            opt(s.sharpe),
            opt(b.sharpe),
            match (s.sharpe, b.sharpe) {
                (Some(x), Some(y)) => ratio(x, y),
                _ => "N/A".into(),
            },
        ),
        row("Annualized Return", pct(s.ann_return), pct(b.ann_return), ratio(s.ann_return, b.ann_return)),
        row(
            "Annualized Return (arithmetic)",
            pct(s.ann_return_arithmetic),
            pct(b.ann_return_arithmetic),
            ratio(s.ann_return_arithmetic, b.ann_return_arithmetic),
        ),
        row(
            "Annualized Vol",
            s.ann_vol.map_or("undefined".into(), pct),
            b.ann_vol.map_or("undefined".into(), pct),
            "N/A".into(),
        ),
        row("Total OOS Return", pct(s.total_return), pct(b.total_return), ratio(s.total_return, b.total_return)),
        row(
            "Wealth Multiple (OOS)",
            format!("{:.2}x", s.wealth_multiple),
            format!("{:.2}x", b.wealth_multiple),
            ratio(s.wealth_multiple, b.wealth_multiple),
        ),
        row("Max Drawdown", pct(s.max_drawdown), pct(b.max_drawdown), ratio(s.max_drawdown, b.max_drawdown)),
        row("Winning Days", pct(s.win_rate), pct(b.win_rate), ratio(s.win_rate, b.win_rate)),
        row("Best Day", pct(s.best_day), pct(b.best_day), ratio(s.best_day, b.best_day)),
        row("Worst Day", pct(s.worst_day), pct(b.worst_day), ratio(s.worst_day, b.worst_day)),
        row("Skewness", opt(s.skewness), opt(b.skewness), "N/A".into()),
        row("Correlation", opt(s.correlation_vs_benchmark), "1.00".into(), "N/A".into()),
    ];
    render_table(title, &["Metric", "Strategy", "Benchmark", "Ratio"], &rows)
}

fn stats_rows(s: &PerfStats, b: &PerfStats) -> Vec<Vec<String>> {
    let r = |k: &str, x: String, y: String| vec![k.to_string(), x, y];
    vec![
        r("n_days", s.n_days.to_string(), b.n_days.to_string()),
        r("sharpe", raw_opt(s.sharpe), raw_opt(b.sharpe)),
        r("ann_return", raw(s.ann_return), raw(b.ann_return)),
        r("ann_return_arithmetic", raw(s.ann_return_arithmetic), raw(b.ann_return_arithmetic)),
        r("ann_vol", raw_opt(s.ann_vol), raw_opt(b.ann_vol)),
        r("max_drawdown", raw(s.max_drawdown), raw(b.max_drawdown)),
        r("win_rate", raw(s.win_rate), raw(b.win_rate)),
        r("best_day", raw(s.best_day), raw(b.best_day)),
        r("worst_day", raw(s.worst_day), raw(b.worst_day)),
        r("skewness", raw_opt(s.skewness), raw_opt(b.skewness)),
        r("correlation_vs_benchmark", raw_opt(s.correlation_vs_benchmark), String::new()),
        r("total_return", raw(s.total_return), raw(b.total_return)),
        r("wealth_multiple", raw(s.wealth_multiple), raw(b.wealth_multiple)),
    ]
}

struct Context {
    config: RunConfig,
    panel: PricePanel,
    windows: Vec<WindowSpec>,
    sink: Sink,
}

impl Context {
    fn strategy(&self) -> StrategyConfig {
        self.config.strategy()
    }
}

fn write_daily(sink: &Sink, name: &str, res: &BacktestResult) -> Result<(), Failure> {
    let rows: Vec<Vec<String>> = (0..res.daily_returns.len())
        .map(|k| {
            vec![
                res.dates[k].to_string(),
                raw(res.gross_returns[k]),
                raw(res.costs[k]),
                raw(res.daily_returns[k]),
                raw(res.turnover[k]),
                raw(res.equity[k + 1]),
                raw(res.benchmark[k]),
            ]
        })
        .collect();
    sink.csv(name, &["date", "gross", "cost", "net", "turnover", "equity", "benchmark"], &rows)
}

fn write_weights(sink: &Sink, name: &str, res: &BacktestResult, tickers: &[String]) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for f in &res.weights_history {
        for (i, w) in f.weights.iter().enumerate() {
            if *w != 0.0 {
                rows.push(vec![f.date.to_string(), tickers[i].clone(), raw(*w)]);
            }
        }
    }
    sink.csv(name, &["date", "ticker", "weight"], &rows)
}

fn cmd_synth(config: &RunConfig, sink: &Sink) -> Result<String, Failure> {
    let syn = config.data.synthetic.clone().unwrap_or_else(|| SyntheticMarketConfig {
        seed: substream_seed(config.master_seed, "synthetic"),
        ..Default::default()
    });
    let panel = generate_synthetic(&syn)?;
    let mut buf = sink.header().into_bytes();
    write_panel(&panel, &mut buf)?;
    std::fs::write(sink.dir.join("prices.csv"), buf).map_err(|e| Failure::from(Error::from(e)))?;
    let summary = format!(
        "synthetic panel: {} stocks x {} days ({} .. {}), seed {}\n",
        panel.n_tickers(),
        panel.n_dates(),
        panel.dates()[0],
        panel.dates()[panel.n_dates() - 1],
        syn.seed
    );
    sink.text("summary.txt", &summary)?;
    Ok(summary)
}

fn cmd_backtest(ctx: &Context, start: Option<NaiveDate>, end: Option<NaiveDate>, scale: f64) -> Result<String, Failure> {
    let bt = Backtester::new(&ctx.panel, ctx.strategy())?;
    let dates = ctx.panel.dates();
    let start = start.unwrap_or(dates[bt.first_tradable().min(dates.len() - 1)]);
    let end = end.unwrap_or(dates[dates.len() - 1]);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Failure::config("--scale must be positive"));
    }
    let scale = ScaleFactor {
        value: scale,
        ..ScaleFactor::UNIT
    };
    let res = bt.run(DateRange::inclusive(start, end), scale)?;
    let stats = crate::metrics::perf_stats(&res.daily_returns, Some(&res.benchmark))?;
    let bstats = crate::metrics::perf_stats(&res.benchmark, None)?;
    write_daily(&ctx.sink, "daily.csv", &res)?;
    write_weights(&ctx.sink, "weights.csv", &res, ctx.panel.tickers())?;
    write_killlog(&ctx.sink, res.kill_log.iter().map(|k| ("backtest", k)))?;
    ctx.sink.csv("stats.csv", &["metric", "strategy", "benchmark"], &stats_rows(&stats, &bstats))?;
    let summary = perf_table(&format!("Backtest {start} .. {end} (scale {})", scale.value), &stats, &bstats);
    ctx.sink.text("summary.txt", &summary)?;
    Ok(summary)
}

fn write_killlog<'a>(
    sink: &Sink,
    records: impl Iterator<Item = (&'a str, &'a crate::risk::KillRecord)>,
) -> Result<(), Failure> {
    let rows: Vec<Vec<String>> = records
        .map(|(w, k)| vec![w.to_string(), k.date.to_string(), k.trigger.to_string(), raw(k.value), raw(k.threshold)])
        .collect();
    sink.csv("killlog.csv", &["window", "date", "trigger", "value", "threshold"], &rows)
}

fn walkforward_tables(report: &WalkForwardReport, ks: &KillSwitchConfig) -> String {
    let rows: Vec<Vec<String>> = report
        .windows
        .iter()
        .map(|w| {
            vec![
                w.window.label.clone(),
                w.window.train_period(),
                w.window.test_period(),
                opt(w.train_sharpe),
                format!("{:.3}", w.scale.value),
                opt(w.test_stats.sharpe),
                pct(w.test_stats.ann_return),
                w.test_stats.ann_vol.map_or("undefined".into(), pct),
                pct(w.test_stats.max_drawdown),
            ]
        })
        .collect();
    let mut out = render_table(
        "Walk-Forward Out-of-Sample Results by Window",
        &[
            "Window",
            "Training Period",
            "Test Period",
            "Train Sharpe",
            "Scale Factor",
            "Test Sharpe",
            "Test Return",
            "Test Vol",
            "Test MaxDD",
        ],
        &rows,
    );
    out.push('\n');
    out.push_str(&perf_table(
        "Combined Out-of-Sample Performance vs Benchmark",
        &report.combined,
        &report.combined_benchmark,
    ));
    out.push('\n');
    let wealth_rows: Vec<Vec<String>> = report
        .wealth
        .iter()
        .enumerate()
        .map(|(k, w)| {
            vec![
                format!("Year {} ({})", k + 1, w.period_end),
                format!("${:.0}", w.strategy),
                format!("${:.0}", w.benchmark),
                format!("{:.2}x", w.outperformance()),
            ]
        })
        .collect();
    out.push_str(&render_table(
        "Cumulative Wealth Evolution ($1M Initial)",
        &["Period End", "Strategy", "Benchmark", "Outperformance"],
        &wealth_rows,
    ));
    out.push('\n');
    out.push_str(&kill_table(report, ks));
    out
}

fn kill_table(report: &WalkForwardReport, ks: &KillSwitchConfig) -> String {
    use crate::risk::TriggerType::*;
    let n = report.windows.len();
    let count = |t| {
        report
            .windows
            .iter()
            .filter(|w| w.test.kill_log.iter().any(|k| k.trigger == t))
            .count()
    };
    let rows = vec![
        (AbsoluteDrawdown, pct(ks.abs_dd_threshold)),
        (RollingLoss, format!("{} over {}d", pct(ks.rolling_loss_threshold), ks.rolling_window)),
        (VolSpike, format!("{}x target", ks.vol_spike_multiple)),
        (CorrelationBreak, format!("|rho| > {}", ks.corr_threshold)),
    ]
    .into_iter()
    .map(|(t, th)| vec![t.to_string(), th, format!("{} of {n}", count(t))])
    .collect::<Vec<_>>();
    render_table(
        "Kill-Switch Parameters and History",
        &["Trigger Type", "Threshold", "Test Windows Triggered"],
        &rows,
    )
}

fn write_walkforward(ctx: &Context, report: &WalkForwardReport) -> Result<String, Failure> {
    let sink = &ctx.sink;
    let rows: Vec<Vec<String>> = report
        .windows
        .iter()
        .map(|w| {
            vec![
                w.window.label.clone(),
                w.window.train_start.to_string(),
                w.window.train_end.to_string(),
                w.window.test_start.to_string(),
                w.window.test_end.to_string(),
                raw_opt(w.train_sharpe),
                raw(w.scale.value),
                raw(w.scale.training_vol),
                raw(w.scale.training_maxdd),
                raw_opt(w.test_stats.sharpe),
                raw(w.test_stats.ann_return),
                raw(w.test_stats.ann_return_arithmetic),
                raw_opt(w.test_stats.ann_vol),
                raw(w.test_stats.max_drawdown),
                w.test_stats.n_days.to_string(),
                w.test.kill_log.first().map_or(String::new(), |k| k.date.to_string()),
            ]
        })
        .collect();
    sink.csv(
        "per-window.csv",
        &[
            "window",
            "train_start",
            "train_end",
            "test_start",
            "test_end",
            "train_sharpe",
            "scale_factor",
            "training_vol",
            "training_maxdd",
            "test_sharpe",
            "test_return",
            "test_return_arithmetic",
            "test_vol",
            "test_maxdd",
            "test_days",
            "kill_date",
        ],
        &rows,
    )?;
    sink.csv(
        "combined.csv",
        &["metric", "strategy", "benchmark"],
        &stats_rows(&report.combined, &report.combined_benchmark),
    )?;
    let mut daily = Vec::new();
    for w in &report.windows {
        let t = &w.test;
        for k in 0..t.daily_returns.len() {
            daily.push(vec![
                w.window.label.clone(),
                t.dates[k].to_string(),
                raw(t.gross_returns[k]),
                raw(t.costs[k]),
                raw(t.daily_returns[k]),
                raw(t.turnover[k]),
                raw(t.equity[k + 1]),
                raw(t.benchmark[k]),
            ]);
        }
    }
    sink.csv(
        "oos-daily.csv",
        &["window", "date", "gross", "cost", "net", "turnover", "equity", "benchmark"],
        &daily,
    )?;
    let wealth: Vec<Vec<String>> = report
        .wealth
        .iter()
        .map(|w| vec![w.period_end.to_string(), raw(w.strategy), raw(w.benchmark), raw(w.outperformance())])
        .collect();
    sink.csv("wealth.csv", &["period_end", "strategy", "benchmark", "outperformance"], &wealth)?;
    write_killlog(sink, report.kill_log().map(|(w, k)| (w.label.as_str(), k)))?;
    let text = walkforward_tables(report, &ctx.config.kill_switch);
    sink.text("walkforward.txt", &text)?;
    Ok(text)
}

fn sweep_text(cells: &[SweepCell]) -> String {
    let mut rows = Vec::new();
    for p in SweepParam::ALL {
        let row: Vec<&SweepCell> = cells.iter().filter(|c| c.param == p).collect();
        let cell = |c: &SweepCell| c.sharpe.map_or("---".into(), |s| format!("{s:.2} ({})", c.value));
        let base = row.iter().find(|c| c.offset == 0.0);
        let mut r = vec![p.label().to_string(), base.map_or("---".into(), |c| cell(c))];
        for c in row.iter().filter(|c| c.offset != 0.0) {
            r.push(cell(c));
        }
        let defined: Vec<f64> = row.iter().filter_map(|c| c.sharpe).collect();
        r.push(if defined.is_empty() {
            "---".into()
        } else {
            let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            format!("{lo:.2}--{hi:.2}")
        });
        rows.push(r);
    }
    let mut header = vec!["Parameter".to_string(), "Base Case".to_string()];
    header.extend(
        SWEEP_OFFSETS
            .iter()
            .filter(|o| **o != 0.0)
            .map(|o| format!("{:+.0}%", o * 100.0)),
    );
    header.push("Range".into());
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    render_table("Parameter Sensitivity Analysis (OOS Sharpe)", &h, &rows)
}

fn cmd_sweep(ctx: &Context) -> Result<String, Failure> {
    let cells = parameter_sweep(&ctx.panel, &ctx.strategy(), &ctx.windows, &SWEEP_OFFSETS)?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| vec![c.param.label().to_string(), raw(c.offset), c.value.clone(), raw_opt(c.sharpe)])
        .collect();
    ctx.sink.csv("sweep.csv", &["parameter", "offset", "value", "sharpe"], &rows)?;
    let text = sweep_text(&cells);
    ctx.sink.text("sweep.txt", &text)?;
    Ok(text)
}

fn attribution_text(a: &Attribution) -> String {
    let d = a.combined_gated.ann_return;
    let share = |x: f64| if d != 0.0 { pct(x / d) } else { "---".into() };
    let rows = vec![
        vec![
            "Value alone in regime".into(),
            num(a.value_in_regime.sharpe),
            pct(a.value_in_regime.ann_return),
            share(a.value_in_regime.ann_return),
        ],
        vec![
            "Reversal alone in regime".into(),
            num(a.reversal_in_regime.sharpe),
            pct(a.reversal_in_regime.ann_return),
            share(a.reversal_in_regime.ann_return),
        ],
        vec![
            "Interaction Effect".into(),
            num(a.interaction.sharpe),
            pct(a.interaction.ann_return),
            share(a.interaction.ann_return),
        ],
        vec![
            "Combined without regime".into(),
            num(a.combined_ungated.sharpe),
            pct(a.combined_ungated.ann_return),
            "---".into(),
        ],
        vec!["Combined with regime".into(), num(a.combined_gated.sharpe), pct(d), "100.0%".into()],
    ];
    let mut out = render_table(
        "Return Decomposition",
        &["Component", "Sharpe Contribution", "Return Contribution", "% of Total"],
        &rows,
    );
    out.push_str("Interaction = (d) - ((a) + (b) - (c)); % of Total relative to (d).\n");
    out
}

fn cmd_attribution(ctx: &Context) -> Result<String, Failure> {
    let a = attribution_decomposition(&ctx.panel, &ctx.strategy(), &ctx.windows)?;
    let row = |k: &str, r: &crate::validation::AttributionRun| vec![k.to_string(), raw(r.sharpe), raw(r.ann_return)];
    let rows = vec![
        row("a_value_in_regime", &a.value_in_regime),
        row("b_reversal_in_regime", &a.reversal_in_regime),
        row("c_combined_ungated", &a.combined_ungated),
        row("d_combined_gated", &a.combined_gated),
        row("interaction", &a.interaction),
    ];
    ctx.sink.csv("attribution.csv", &["component", "sharpe", "ann_return"], &rows)?;
    let text = attribution_text(&a);
    ctx.sink.text("attribution.txt", &text)?;
    Ok(text)
}

fn randomize_text(mode: TrialMode, s: &TrialSummary) -> String {
    let (name, spec) = match mode {
        TrialMode::RandomRegime => (format!("{} Random Regimes", s.n_trials), "Matched statistics"),
        TrialMode::ShuffledSignals => (format!("{} Random Stock Selections", s.n_trials), "Shuffled signals"),
        TrialMode::TemporalBlock => (format!("{} Block-Shuffled Regimes", s.n_trials), "Per-stock time blocks"),
    };
    let rows = vec![
        vec![name, spec.into(), format!("Best Sharpe: {:.2}", s.best), format!("p = {:.4}", s.p_value)],
        vec![String::new(), String::new(), format!("Median: {:.2}", s.median), String::new()],
        vec![
            "True strategy".into(),
            "Walk-forward".into(),
            format!("Sharpe: {:.2}", s.true_sharpe),
            String::new(),
        ],
    ];
    render_table(
        "Randomization and Stress Tests",
        &["Test Type", "Specification", "Result", "Statistical Significance"],
        &rows,
    )
}

fn cmd_randomize(ctx: &Context) -> Result<String, Failure> {
    let bt = Backtester::new(&ctx.panel, ctx.strategy())?;
    let truth = crate::validation::combined_sharpe(&bt, bt.book(), &ctx.windows)?;
    let trials_cfg = ctx.config.robustness.trials();
    let trials = run_trials(&bt, &ctx.windows, &trials_cfg, ctx.config.trial_seed())?;
    let summary = summarize_trials(truth, &trials)?;
    let rows: Vec<Vec<String>> = trials.iter().enumerate().map(|(k, s)| vec![k.to_string(), raw(*s)]).collect();
    ctx.sink.csv("trials.csv", &["trial", "sharpe"], &rows)?;
    let dist: String = trials.iter().map(|s| format!("{s}\n")).collect();
    ctx.sink.text("trial-sharpes.txt", &dist)?;
    let mut text = randomize_text(trials_cfg.mode, &summary);
    let _ = writeln!(
        text,
        "\ntrue_sharpe: {}\npvalue: {}\nn_trials: {}\nbest: {}\nmedian: {}\nworst: {}",
        summary.true_sharpe, summary.p_value, summary.n_trials, summary.best, summary.median, summary.worst
    );
    ctx.sink.text("randomize.txt", &text)?;
    Ok(text)
}

fn stress_text(r: &StressReport) -> String {
    let mut rows = vec![vec!["Base".to_string(), "Walk-forward".into(), format!("Sharpe: {}", opt(r.base.sharpe))]];
    for s in r.scenarios() {
        rows.push(vec![
            s.test.clone(),
            s.specification.clone(),
            format!("Sharpe: {} (from {})", opt(s.stats.sharpe), opt(r.base.sharpe)),
        ]);
    }
    render_table("Randomization and Stress Tests", &["Test Type", "Specification", "Result"], &rows)
}

fn cmd_stress(ctx: &Context, base: &WalkForwardReport) -> Result<String, Failure> {
    let r = stress_run(
        base,
        &ctx.panel,
        &ctx.strategy(),
        &ctx.windows,
        &ctx.config.robustness.stress,
        &ctx.config.capacity.impact,
        ctx.config.noise_seed(),
    )?;
    let mut rows = vec![vec![
        "base".to_string(),
        String::new(),
        raw_opt(r.base.sharpe),
        raw(r.base.ann_return),
        raw_opt(r.base.ann_vol),
        raw(r.base.max_drawdown),
    ]];
    for s in r.scenarios() {
        rows.push(vec![
            s.test.clone(),
            s.specification.clone(),
            raw_opt(s.stats.sharpe),
            raw(s.stats.ann_return),
            raw_opt(s.stats.ann_vol),
            raw(s.stats.max_drawdown),
        ]);
    }
    ctx.sink.csv(
        "stress.csv",
        &["test", "specification", "sharpe", "ann_return", "ann_vol", "max_drawdown"],
        &rows,
    )?;
    let text = stress_text(&r);
    ctx.sink.text("stress.txt", &text)?;
    Ok(text)
}

fn capacity_rows(model: &str, pts: &[CapacityPoint]) -> Vec<Vec<String>> {
    pts.iter()
        .map(|p| {
            vec![
                model.to_string(),
                raw(p.aum),
                raw(p.participation),
                raw(p.impact_bp),
                raw(p.net_sharpe),
                raw(p.net_ann_return),
                p.viability.to_string(),
            ]
        })
        .collect()
}

fn money(x: f64) -> String {
    if x >= 1e9 {
        format!("${}B", x / 1e9)
    } else {
        format!("${}M", x / 1e6)
    }
}

fn capacity_text(title: &str, pts: &[CapacityPoint]) -> String {
    let rows: Vec<Vec<String>> = pts
        .iter()
        .map(|p| {
            vec![
                money(p.aum),
                pct(p.participation),
                format!("{:.1}", p.impact_bp),
                num(p.net_sharpe),
                pct(p.net_ann_return),
                p.viability.to_string(),
            ]
        })
        .collect();
    render_table(
        title,
        &["AUM Level", "Daily Volume %", "Impact (bp)", "Net Sharpe", "Annual Return", "Viability"],
        &rows,
    )
}

fn cmd_capacity(ctx: &Context, base: &WalkForwardReport) -> Result<String, Failure> {
    let cap = &ctx.config.capacity;
    let model = cap.impact;
    let fitted = fit_impact_model(&CAPACITY_TABLE)?;
    let a = capacity_curve(base, &ctx.panel, &cap.aum_levels, cap.adv(), &model)?;
    let b = capacity_curve(base, &ctx.panel, &cap.aum_levels, cap.adv(), &fitted)?;
    let mut rows = capacity_rows("configured", &a);
    rows.extend(capacity_rows("table_calibrated", &b));
    ctx.sink.csv(
        "capacity.csv",
        &["model", "aum", "participation", "impact_bp", "net_sharpe", "net_ann_return", "viability"],
        &rows,
    )?;
    let fit_rows: Vec<Vec<String>> = CAPACITY_TABLE
        .iter()
        .map(|(p, i)| vec![raw(*p), raw(*i), raw(fitted.impact_bp(*p)), raw(fitted.impact_bp(*p) / i)])
        .collect();
    ctx.sink.csv(
        "impact-calibration.csv",
        &["participation", "table_impact_bp", "fitted_impact_bp", "ratio"],
        &fit_rows,
    )?;
    let mut text = capacity_text(
        &format!(
            "Capacity and Market Impact Analysis (c = {} bp, gamma = {})",
            model.coefficient_bp, model.exponent
        ),
        &a,
    );
    text.push('\n');
    text.push_str(&capacity_text(
        &format!(
            "Capacity and Market Impact Analysis (table fit: c = {:.1} bp, gamma = {:.3})",
            fitted.coefficient_bp, fitted.exponent
        ),
        &b,
    ));
    ctx.sink.text("capacity.txt", &text)?;
    Ok(text)
}

fn prepare(cli: &Cli, config: RunConfig) -> Result<Context, Failure> {
    let panel = load_data(&config)?;
    let windows = config.windows.build(panel.calendar())?;
    let sink = make_sink(cli, &config)?;
    Ok(Context {
        config,
        panel,
        windows,
        sink,
    })
}

fn make_sink(cli: &Cli, config: &RunConfig) -> Result<Sink, Failure> {
    let dir = output_dir(cli.output_dir.as_deref(), config);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::from(e)))?;
    let sink = Sink {
        dir,
        hash: config.hash(),
    };
    let resolved = toml::to_string(config).map_err(|e| Failure {
        code: 4,
        message: e.to_string(),
    })?;
    sink.text("config.toml", &resolved)?;
    Ok(sink)
}

/// Executes one invocation; returns the text printed on success.
pub fn run(cli: &Cli) -> Result<String, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be >= 1"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = load_config(cli.config.as_deref(), &cli.set)?;
    if let Command::Synth = cli.command {
        let sink = make_sink(cli, &config)?;
        return cmd_synth(&config, &sink);
    }
    let ctx = prepare(cli, config)?;
    match &cli.command {
        Command::Synth => unreachable!(),
        Command::Backtest { start, end, scale } => cmd_backtest(&ctx, *start, *end, *scale),
        Command::Walkforward => {
            let report = run_walk_forward(&ctx.panel, &ctx.strategy(), &ctx.windows)?;
            write_walkforward(&ctx, &report)?;
            let text = walkforward_tables(&report, &ctx.config.kill_switch);
            ctx.sink.text("summary.txt", &text)?;
            Ok(perf_table(
                "Combined Out-of-Sample Performance vs Benchmark",
                &report.combined,
                &report.combined_benchmark,
            ))
        }
        Command::Sweep => summarize(&ctx, cmd_sweep(&ctx)?),
        Command::Attribution => summarize(&ctx, cmd_attribution(&ctx)?),
        Command::Randomize => summarize(&ctx, cmd_randomize(&ctx)?),
        Command::Stress => {
            let base = run_walk_forward(&ctx.panel, &ctx.strategy(), &ctx.windows)?;
            summarize(&ctx, cmd_stress(&ctx, &base)?)
        }
        Command::Capacity => {
            let base = run_walk_forward(&ctx.panel, &ctx.strategy(), &ctx.windows)?;
            summarize(&ctx, cmd_capacity(&ctx, &base)?)
        }
        Command::Report => {
            let base = run_walk_forward(&ctx.panel, &ctx.strategy(), &ctx.windows)?;
            let mut text = write_walkforward(&ctx, &base)?;
            for part in [
                cmd_sweep(&ctx)?,
                cmd_attribution(&ctx)?,
                cmd_randomize(&ctx)?,
                cmd_stress(&ctx, &base)?,
                cmd_capacity(&ctx, &base)?,
            ] {
                text.push('\n');
                text.push_str(&part);
            }
            ctx.sink.text("report.txt", &text)?;
            summarize(&ctx, text)
        }
    }
}

fn summarize(ctx: &Context, text: String) -> Result<String, Failure> {
    ctx.sink.text("summary.txt", &text)?;
    Ok(text)
}

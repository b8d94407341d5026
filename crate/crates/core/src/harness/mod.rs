//! Experiment configurations, photon counting and the runners that emit
//! figure and table data.

mod experiments;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::router::{RouterConfig, TemporalEdgeConfig};

pub use experiments::{resampled_process_fidelity, ResampledFidelity};

/// Photon-pair source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Indistinguishability of the pair, equal to the ideal N00N visibility.
    pub mu: f64,
    /// Pairs per second reaching the collection optics.
    pub pair_rate: f64,
    /// Pump repetition rate, Hz.
    pub rep_rate: f64,
    /// Modulator trigger rate after prescaling, Hz.
    pub trigger_rate: f64,
    /// Fraction of the time the modulators are held at the routing voltage.
    pub duty_cycle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Dark counts per second.
    pub dark_rate: f64,
    /// Coincidence window, s. `dark_rate * gate_window` is the per-gate dark probability.
    pub gate_window: f64,
}

/// Grid over [start, stop] with the given step; the end point is included
/// when it falls on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| self.start + k as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Skip sampling and report expected counts.
    pub analytic: bool,
    /// Integration time per switching-curve and table point, s.
    pub point_duration: f64,
    /// Drive voltages, V.
    pub voltages: Grid,
    /// Photon delays for the rise/fall scan, ns.
    pub delays_ns: Grid,
    pub delay_point_duration: f64,
    pub edges: TemporalEdgeConfig,
    /// Analyzer half-wave-plate angles, degrees.
    pub hwp_deg: Grid,
    pub fringe_point_duration: f64,
    pub tomography_shots: u64,
    /// Independent tomography datasets per channel for error bars.
    pub tomography_resamples: usize,
    /// Process fidelities of the fiber and compensator, indexed [input][output].
    pub fiber_fidelity: [[f64; 2]; 2],
    /// Hours of the stability record and its sampling step.
    pub stability_hours: Grid,
    /// Arm-imbalance drift applied in the stability run, rad/hour.
    pub stability_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub router: RouterConfig,
    pub source: SourceConfig,
    pub detector: DetectorConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Calibrated router with source and detector parameters that give a
    /// coincidence ceiling of 5×10³ counts/s.
    pub fn calibrated() -> Self {
        let detector = DetectorConfig { efficiency: 0.8, dark_rate: 100.0, gate_window: 10e-9 };
        let duty_cycle = 0.6;
        ExperimentConfig {
            router: RouterConfig::calibrated(),
            source: SourceConfig {
                mu: 0.968,
                pair_rate: 5e3 / (detector.efficiency.powi(2) * duty_cycle),
                rep_rate: 76e6,
                trigger_rate: 1e6,
                duty_cycle,
            },
            detector,
            run: RunConfig {
                seed: 0,
                analytic: false,
                point_duration: 1.0,
                voltages: Grid { start: 0.0, stop: 1200.0, step: 25.0 },
                delays_ns: Grid { start: -6.0, stop: 16.0, step: 0.1 },
                delay_point_duration: 5.0,
                edges: TemporalEdgeConfig::calibrated(),
                hwp_deg: Grid { start: 0.0, stop: 45.0, step: 5.0 },
                fringe_point_duration: 10.0,
                tomography_shots: 10_000,
                tomography_resamples: 10,
                fiber_fidelity: [[0.9955, 0.9879], [0.9973, 0.9976]],
                stability_hours: Grid { start: 0.0, stop: 5.0, step: 0.05 },
                stability_drift: 0.04,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        let s = &self.source;
        let d = &self.detector;
        let rates = [s.pair_rate, s.rep_rate, s.trigger_rate, d.dark_rate, d.gate_window];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Config("rates and windows must be finite and non-negative".into()));
        }
        for (name, v) in [("source.mu", s.mu), ("source.duty_cycle", s.duty_cycle), ("detector.efficiency", d.efficiency)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let r = &self.run;
        for (name, v) in [
            ("run.point_duration", r.point_duration),
            ("run.delay_point_duration", r.delay_point_duration),
            ("run.fringe_point_duration", r.fringe_point_duration),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for g in [r.voltages, r.delays_ns, r.hwp_deg, r.stability_hours] {
            g.points()?;
        }
        r.edges.validate()?;
        if r.tomography_shots == 0 || r.tomography_resamples == 0 {
            return Err(Error::Config("tomography shots and resamples must be positive".into()));
        }
        if r.fiber_fidelity.iter().flatten().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("fiber fidelities must lie in (0, 1]".into()));
        }
        if !r.stability_drift.is_finite() {
            return Err(Error::Config("stability drift must be finite".into()));
        }
        Ok(())
    }

    /// Parses a TOML document whose tables override the calibrated defaults key by key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config: {e}")))?;
        let mut base = toml::Table::try_from(Self::calibrated())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        merge(&mut base, user, "")?;
        let cfg: Self = base.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-serializable")
    }
}

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::Config(format!("unknown key {path}"))),
        }
    }
    Ok(())
}

/// Counts recorded at one setting. Sampled counts are whole numbers; in
/// analytic mode they are expectation values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRecord {
    pub setting: String,
    pub counts: f64,
    pub duration: f64,
}

impl CountRecord {
    pub fn poisson_err(&self) -> f64 {
        self.counts.max(0.0).sqrt()
    }

    pub fn rate(&self) -> f64 {
        self.counts / self.duration
    }
}

/// Generator for stream `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn poisson_counts<R: rand::Rng + ?Sized>(rate: f64, duration: f64, rng: &mut R) -> Result<u64> {
    let mean = rate * duration;
    if !(rate >= 0.0 && duration >= 0.0) || !mean.is_finite() {
        return Err(Error::Usage(format!("rate and duration must be finite and ≥ 0, got {rate}, {duration}")));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::Usage(format!("poisson mean {mean}: {e}")))?;
    Ok(d.sample(rng) as u64)
}

/// Count for a setting: the expectation in analytic mode, a Poisson draw otherwise.
pub(crate) fn count<R: rand::Rng + ?Sized>(rate: f64, duration: f64, analytic: bool, rng: &mut R) -> Result<f64> {
    if analytic {
        Ok(rate * duration)
    } else {
        poisson_counts(rate, duration, rng).map(|n| n as f64)
    }
}

/// Expected rates of the heralded source and detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeraldedRates {
    pub herald_singles: f64,
    /// True coincidences for a unit-probability output, counts/s.
    pub signal_coincidences: f64,
    pub dark_per_gate: f64,
    /// Herald triggers coinciding with a dark count.
    pub accidental_coincidences: f64,
}

impl HeraldedRates {
    /// Coincidence rate at a port with detection probability `p`.
    pub fn coincidences(&self, p: f64) -> f64 {
        self.signal_coincidences * p + self.accidental_coincidences
    }
}

pub fn heralded_rate_model(cfg: &ExperimentConfig) -> HeraldedRates {
    let eta = cfg.detector.efficiency;
    let dark_per_gate = cfg.detector.dark_rate * cfg.detector.gate_window;
    let herald_singles = cfg.source.pair_rate * eta + cfg.detector.dark_rate;
    HeraldedRates {
        herald_singles,
        signal_coincidences: cfg.source.pair_rate * eta * eta * cfg.source.duty_cycle,
        dark_per_gate,
        accidental_coincidences: herald_singles * dark_per_gate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    SwitchingCurve,
    RiseFall,
    ProcessTomography,
    Deconvolve,
    NoonFringe,
    LossBudget,
    Stability,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::SwitchingCurve,
        Experiment::RiseFall,
        Experiment::ProcessTomography,
        Experiment::Deconvolve,
        Experiment::NoonFringe,
        Experiment::LossBudget,
        Experiment::Stability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SwitchingCurve => "switching-curve",
            Experiment::RiseFall => "rise-fall",
            Experiment::ProcessTomography => "process-tomography",
            Experiment::Deconvolve => "deconvolve",
            Experiment::NoonFringe => "noon-fringe",
            Experiment::LossBudget => "loss-budget",
            Experiment::Stability => "stability",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|e| e.name()).collect();
            Error::Usage(format!("unknown experiment {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::Usage(format!("format must be csv or json, got {s:?}"))),
        }
    }
}

/// A column-named table written as CSV or as a JSON array of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Table { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    Value::Object(self.columns.iter().map(|c| c.to_string()).zip(row.iter().cloned()).collect())
                })
                .collect(),
        )
    }
}

/// Files and metrics produced by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub experiment: Experiment,
    pub tables: Vec<(&'static str, Table)>,
    /// Extra JSON documents such as process matrices, by file name.
    pub documents: Vec<(String, Value)>,
    pub metrics: Value,
}

impl RunOutput {
    pub fn summary(&self, cfg: &ExperimentConfig) -> Value {
        json!({
            "experiment": self.experiment.name(),
            "seed": cfg.run.seed,
            "analytic": cfg.run.analytic,
            "metrics": self.metrics,
            "config_echo": serde_json::to_value(cfg).expect("config is JSON-serializable"),
            "versions": {
                "polrouter": env!("CARGO_PKG_VERSION"),
                "summary_schema": 1,
            },
        })
    }

    /// Writes every table, document and `summary.json` into `dir`; returns the paths.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (stem, table) in &self.tables {
            let (path, text) = match format {
                OutputFormat::Csv => (dir.join(format!("{stem}.csv")), table.to_csv()),
                OutputFormat::Json => (dir.join(format!("{stem}.json")), pretty(&table.to_json())),
            };
            std::fs::write(&path, text)?;
            written.push(path);
        }
        for (name, doc) in &self.documents {
            let path = dir.join(name);
            std::fs::write(&path, pretty(doc))?;
            written.push(path);
        }
        let path = dir.join("summary.json");
        std::fs::write(&path, pretty(&self.summary(cfg)))?;
        written.push(path);
        Ok(written)
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

pub fn run_experiment(experiment: Experiment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match experiment {
        Experiment::SwitchingCurve => experiments::switching_curve(cfg),
        Experiment::RiseFall => experiments::rise_fall(cfg),
        Experiment::ProcessTomography => experiments::process_tomography(cfg),
        Experiment::Deconvolve => experiments::deconvolve(cfg),
        Experiment::NoonFringe => experiments::noon_fringe(cfg),
        Experiment::LossBudget => experiments::loss_budget(cfg),
        Experiment::Stability => experiments::stability(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_examples() {
        let mut rng = stream_rng(1, 0);
        assert_eq!(poisson_counts(0.0, 5.0, &mut rng).unwrap(), 0);
        assert!(poisson_counts(-1.0, 1.0, &mut rng).is_err());
        let a: Vec<u64> = (0..20).map(|_| poisson_counts(50.0, 1.0, &mut stream_rng(9, 3)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut rng = stream_rng(2, 0);
        let draws: Vec<f64> = (0..1000).map(|_| poisson_counts(1e6, 1.0, &mut rng).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1e6).abs() < 3.0 * (1e6f64 / 1000.0).sqrt());
    }

    #[test]
    fn rate_model_examples() {
        let mut cfg = ExperimentConfig::calibrated();
        let r = heralded_rate_model(&cfg);
        assert!((r.signal_coincidences - 5e3).abs() < 1e-9);
        assert!((r.dark_per_gate - 1e-6).abs() < 1e-18);

        let mut doubled = cfg.clone();
        doubled.source.pair_rate *= 2.0;
        let d = heralded_rate_model(&doubled);
        assert!((d.signal_coincidences - 2.0 * r.signal_coincidences).abs() < 1e-9);
        assert_eq!(d.dark_per_gate, r.dark_per_gate);

        cfg.detector.efficiency = 0.0;
        let z = heralded_rate_model(&cfg);
        assert_eq!(z.signal_coincidences, 0.0);
        assert_eq!(z.herald_singles, cfg.detector.dark_rate);
        assert_eq!(z.coincidences(1.0), cfg.detector.dark_rate * z.dark_per_gate);
    }

    #[test]
    fn config_overrides_and_rejects() {
        let cfg = ExperimentConfig::from_toml("[run]\nseed = 7\n[source]\nmu = 0.9\n").unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.source.mu, 0.9);
        assert_eq!(cfg.router, RouterConfig::calibrated());
        assert!(matches!(ExperimentConfig::from_toml("[run]\nsed = 7\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[detector]\nefficiency = 1.5\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[[["), Err(Error::Parse(_))));
        let round = ExperimentConfig::from_toml(&ExperimentConfig::calibrated().to_toml()).unwrap();
        assert_eq!(round, ExperimentConfig::calibrated());
    }

    #[test]
    fn experiment_names() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!(matches!("bogus".parse::<Experiment>(), Err(Error::Usage(_))));
    }

    #[test]
    fn grid_includes_end_point() {
        let g = Grid { start: 0.0, stop: 1200.0, step: 25.0 }.points().unwrap();
        assert_eq!(g.len(), 49);
        assert_eq!(*g.last().unwrap(), 1200.0);
        assert!(Grid { start: 0.0, stop: 1.0, step: 0.0 }.points().is_err());
    }

    #[test]
    fn table_formats() {
        let mut t = Table::new(vec!["label", "x"]);
        t.push(vec![json!("H"), json!(0.5)]);
        assert_eq!(t.to_csv(), "label,x\nH,0.5\n");
        assert_eq!(t.to_json(), json!([{"label": "H", "x": 0.5}]));
    }
}

//! Experiment runner: flat `key = value` config files with `[section]`
//! headers, one pipeline per subcommand, and a JSON report whose checks each
//! name the acceptance criterion they belong to.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{self, FrameFamily};
use crate::gauge::GaugeOptions;
use crate::grid::{exterior_derivative, GridDomain, Shape};
use crate::harmonic::{self, FlowOptions};
use crate::maps::MapSpec;
use crate::norms::{bmo_seminorm, morrey_norm, BallFamily, NormReport};
use crate::targets::{TargetKind, TargetManifold};

pub const REPORT_SCHEMA: &str = "mframes-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckIdentities,
    Coulomb,
    Frames,
    Hedgehog,
    WenteConstant,
    HarmonicFlow,
    Noether,
    Regularity,
    DecayProbe,
    Norms,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::CheckIdentities,
        Command::Coulomb,
        Command::Frames,
        Command::Hedgehog,
        Command::WenteConstant,
        Command::HarmonicFlow,
        Command::Noether,
        Command::Regularity,
        Command::DecayProbe,
        Command::Norms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::CheckIdentities => "check-identities",
            Command::Coulomb => "coulomb",
            Command::Frames => "frames",
            Command::Hedgehog => "hedgehog",
            Command::WenteConstant => "wente-constant",
            Command::HarmonicFlow => "harmonic-flow",
            Command::Noether => "noether",
            Command::Regularity => "regularity",
            Command::DecayProbe => "decay-probe",
            Command::Norms => "norms",
        }
    }

    /// Recognized keys and their defaults. The defaults reproduce the
    /// acceptance configuration of each experiment.
    pub fn defaults(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::CheckIdentities => &[
                ("grid.m", "2"),
                ("grid.resolutions", "32,64"),
                ("target.kind", "sphere(2)"),
                ("map.family", "smooth_projected"),
                ("map.amplitude", "0.8"),
                ("map.bump", "0"),
                ("map.max_freq", "4"),
                ("map.seed", ""),
                ("check.min_factor", "1.7"),
            ],
            Command::Coulomb => &[
                ("grid.resolutions", "32,64"),
                ("family.amplitudes", "0.023,0.018,0.012,0.008,0.005"),
                ("solver.tol", "1e-8"),
                ("solver.max_iters", "5000"),
                ("frames.threshold", "0.05"),
                ("control.resolutions", "48,64"),
            ],
            Command::Frames => &[
                ("grid.resolutions", "32,64"),
                ("family.amplitudes", "0.023,0.018,0.012,0.008,0.005"),
                ("solver.tol", "1e-8"),
                ("solver.max_iters", "5000"),
                ("frames.threshold", "0.05"),
                ("check.orthonormality", "1e-10"),
                ("check.coulomb_constant", "0.01"),
                ("check.tangency_factor", "2"),
                ("check.ratio_spread", "0.25"),
            ],
            Command::Hedgehog => &[("grid.n", "96"), ("check.tolerance", "0.03")],
            Command::WenteConstant => &[
                ("grid.n", "128"),
                ("experiment.first_seed", "1"),
                ("experiment.count", "20"),
                ("check.linear_tolerance", "0.02"),
                ("check.max_ratio", "0.2565"),
            ],
            Command::HarmonicFlow => &[
                ("grid.m", "2"),
                ("grid.n", "64"),
                ("target.kind", "sphere(2)"),
                ("map.family", "boundary_data"),
                ("map.amplitude", "0.5"),
                ("map.bump", "0.3"),
                ("map.max_freq", "4"),
                ("map.seed", ""),
                ("solver.tol", "1e-8"),
                ("solver.max_steps", "200000"),
                ("solver.tau", "auto"),
                ("flow.warm_start", "false"),
            ],
            Command::Noether => &[
                ("grid.n", "64"),
                ("map.amplitude", "0.5"),
                ("map.bump", "0.3"),
                ("solver.tol", "1e-8"),
                ("solver.max_steps", "200000"),
                ("check.constant", "1"),
                ("check.conservation", "1e-4"),
            ],
            Command::Regularity => &[
                ("grid.m", "3"),
                ("grid.resolutions", "48,64"),
                ("experiment.members", "10"),
                ("experiment.eps_grid", "0.025,0.05,0.075,0.1"),
                ("solver.tol", "1e-8"),
                ("solver.max_steps", "200000"),
                ("check.max_bmo", "0.1"),
                ("check.drift", "0.2"),
            ],
            Command::DecayProbe => &[
                ("grid.n", "64"),
                ("map.amplitude", "0.3"),
                ("map.bump", "0.2"),
                ("solver.tol", "1e-8"),
                ("solver.max_steps", "200000"),
                ("monotonicity.dims", "2,3"),
                ("monotonicity.n", "48"),
                ("check.slack", "0.01"),
            ],
            Command::Norms => &[
                ("grid.m", "2"),
                ("grid.shape", "ball"),
                ("grid.n", "64"),
                ("target.kind", "sphere(2)"),
                ("map.family", "smooth_projected"),
                ("map.amplitude", "0.5"),
                ("map.bump", "0"),
                ("map.max_freq", "4"),
                ("map.seed", ""),
                ("balls.stride", "auto"),
            ],
        }
    }
}

// --- configuration ----------------------------------------------------------

/// Raw `section.key → value` pairs as read from a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parses `[section]` headers and `key = value` lines; `#` and `;` start
    /// comments. Keys before the first header live in no section.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |msg: &str| Error::Config(format!("line {}: {msg}: `{raw}`", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header"))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(err("bad section name"));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`"))?;
            let k = k.trim();
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err("bad key"));
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(err(&format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
}

/// A fully resolved configuration: every recognized key has a value.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub command: Command,
    pub values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(command: Command, config: &Config, ov: Overrides) -> Result<Self> {
        let defaults = command.defaults();
        let mut values: BTreeMap<String, String> = defaults
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for (k, v) in &config.values {
            if !values.contains_key(k) {
                return Err(Error::Config(format!(
                    "unknown key `{k}` for {}",
                    command.name()
                )));
            }
            values.insert(k.clone(), v.clone());
        }
        let mut s = Self { command, values };
        if let Some(n) = ov.resolution {
            if s.values.contains_key("grid.n") {
                s.values.insert("grid.n".into(), n.to_string());
            } else if s.values.contains_key("grid.resolutions") {
                // keep the ladder's proportions, with `n` as the finest level
                let old = s.usize_list("grid.resolutions")?;
                let top = *old.iter().max().expect("non-empty list") as f64;
                let scaled: Vec<String> = old
                    .iter()
                    .map(|&r| ((r as f64 * n as f64 / top).round() as usize).to_string())
                    .collect();
                s.values.insert("grid.resolutions".into(), scaled.join(","));
            } else {
                return Err(Error::Config(format!(
                    "{} takes no resolution",
                    command.name()
                )));
            }
        }
        if let Some(seed) = ov.seed {
            if s.values.contains_key("map.seed") {
                s.values.insert("map.seed".into(), seed.to_string());
            } else if s.values.contains_key("experiment.first_seed") {
                s.values
                    .insert("experiment.first_seed".into(), seed.to_string());
            }
        }
        s.validate()?;
        Ok(s)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn bad(&self, key: &str, want: &str) -> Error {
        Error::Config(format!("`{key}`: expected {want}, got `{}`", self.raw(key)))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.raw(key)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.bad(key, "a finite number"))
    }

    pub fn positive(&self, key: &str) -> Result<f64> {
        self.f64(key)
            .ok()
            .filter(|v| *v > 0.0)
            .ok_or_else(|| self.bad(key, "a positive number"))
    }

    pub fn usize_in(&self, key: &str, lo: usize, hi: usize) -> Result<usize> {
        self.raw(key)
            .parse::<usize>()
            .ok()
            .filter(|v| (lo..=hi).contains(v))
            .ok_or_else(|| self.bad(key, &format!("an integer in [{lo}, {hi}]")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.raw(key)
            .parse::<u64>()
            .map_err(|_| self.bad(key, "an unsigned integer"))
    }

    pub fn optional_u64(&self, key: &str) -> Result<Option<u64>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.u64(key).map(Some)
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.bad(key, "`true` or `false`")),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let v: Option<Vec<f64>> = self
            .raw(key)
            .split(',')
            .map(|t| t.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        v.filter(|v| !v.is_empty())
            .ok_or_else(|| self.bad(key, "a comma-separated list of numbers"))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v: Option<Vec<usize>> = self
            .raw(key)
            .split(',')
            .map(|t| t.trim().parse::<usize>().ok())
            .collect();
        v.filter(|v| !v.is_empty())
            .ok_or_else(|| self.bad(key, "a comma-separated list of integers"))
    }

    fn resolutions(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.usize_list(key)?;
        if v.iter().any(|&n| !(8..=MAX_RESOLUTION).contains(&n)) {
            return Err(self.bad(key, &format!("resolutions in [8, {MAX_RESOLUTION}]")));
        }
        Ok(v)
    }

    pub fn target(&self) -> Result<Arc<TargetManifold>> {
        let key = "target.kind";
        let raw = self.raw(key).replace(' ', "");
        let parse = |prefix: &str| -> Option<Vec<usize>> {
            let inner = raw
                .strip_prefix(prefix)?
                .strip_prefix('(')?
                .strip_suffix(')')?;
            inner.split(',').map(|t| t.parse().ok()).collect()
        };
        let kind = if let Some(v) = parse("sphere").filter(|v| v.len() == 1) {
            TargetKind::Sphere { n: v[0] }
        } else if let Some(v) = parse("so").filter(|v| v.len() == 1) {
            TargetKind::SpecialOrthogonal { k: v[0] }
        } else if let Some(v) = parse("grassmann").filter(|v| v.len() == 2) {
            TargetKind::Grassmann {
                rank: v[0],
                ambient: v[1],
            }
        } else {
            return Err(self.bad(key, "sphere(n), so(k) or grassmann(rank,ambient)"));
        };
        let max_ambient = 16;
        let t = TargetManifold::new(kind).map_err(|_| self.bad(key, "a supported target"))?;
        if t.ambient_dim() > max_ambient {
            return Err(self.bad(
                key,
                &format!("a target with ambient dimension ≤ {max_ambient}"),
            ));
        }
        Ok(Arc::new(t))
    }

    pub fn map(&self) -> Result<MapSpec> {
        let amplitude = self.f64("map.amplitude")?;
        if !(0.0..=10.0).contains(&amplitude) {
            return Err(self.bad("map.amplitude", "a number in [0, 10]"));
        }
        let spec = match self.raw("map.family") {
            "constant" => MapSpec::Constant,
            "linear_projected" => MapSpec::LinearProjected { amplitude },
            "smooth_projected" => MapSpec::SmoothProjected { amplitude },
            "hedgehog" => MapSpec::Hedgehog,
            "boundary_data" => MapSpec::BoundaryData {
                amplitude,
                bump: self.f64("map.bump")?,
            },
            "random_band_limited" => MapSpec::RandomBandLimited {
                amplitude,
                max_freq: self.usize_in("map.max_freq", 1, 64)?,
                seed: self
                    .optional_u64("map.seed")?
                    .ok_or_else(|| Error::Config("`map.seed`: random families need a seed".into()))?,
            },
            _ => {
                return Err(self.bad(
                    "map.family",
                    "constant, linear_projected, smooth_projected, hedgehog, boundary_data or random_band_limited",
                ))
            }
        };
        Ok(spec)
    }

    fn domain(&self, n: usize) -> Result<Arc<GridDomain>> {
        let m = self.usize_in("grid.m", 2, 3)?;
        GridDomain::new(m, n, self.shape()?)
    }

    /// `ball` (the default), `periodic`, or `annulus(inner)`.
    pub fn shape(&self) -> Result<Shape> {
        let key = "grid.shape";
        let raw = self.raw(key).replace(' ', "");
        let inner = raw
            .strip_prefix("annulus(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|r| r.parse::<f64>().ok());
        match (raw.as_str(), inner) {
            ("" | "ball", _) => Ok(Shape::Ball),
            ("periodic", _) => Ok(Shape::CubePeriodic),
            (_, Some(r)) if r > 0.0 && r < 0.5 => Ok(Shape::Annulus { inner: r }),
            _ => Err(self.bad(key, "ball, periodic or annulus(r) with 0 < r < 0.5")),
        }
    }

    fn flow_options(&self) -> Result<FlowOptions> {
        let tau = match self.raw("solver.tau") {
            "" | "auto" => None,
            _ => Some(self.positive("solver.tau")?),
        };
        Ok(FlowOptions {
            tau,
            tol: self.positive("solver.tol")?,
            max_steps: self.usize_in("solver.max_steps", 1, 100_000_000)?,
            ..FlowOptions::default()
        })
    }

    fn gauge_options(&self) -> Result<GaugeOptions> {
        Ok(GaugeOptions {
            tol: self.positive("solver.tol")?,
            max_iters: self.usize_in("solver.max_iters", 1, 10_000_000)?,
            ..GaugeOptions::default()
        })
    }

    /// Type- and range-checks every key the command will read.
    fn validate(&self) -> Result<()> {
        for key in self.values.keys() {
            let k = key.as_str();
            match k {
                "grid.m" => {
                    self.usize_in(k, 2, 3)?;
                }
                // the 5h inner cutoff must stay inside the ball
                "grid.n" if self.command == Command::Hedgehog => {
                    self.usize_in(k, 22, MAX_RESOLUTION)?;
                }
                "grid.n" | "monotonicity.n" => {
                    self.usize_in(k, 8, MAX_RESOLUTION)?;
                }
                "control.resolutions" => {
                    if self
                        .usize_list(k)?
                        .iter()
                        .any(|&n| !(22..=MAX_RESOLUTION).contains(&n))
                    {
                        return Err(self.bad(k, &format!("resolutions in [22, {MAX_RESOLUTION}]")));
                    }
                }
                "grid.resolutions" => {
                    self.resolutions(k)?;
                }
                "grid.shape" => {
                    self.shape()?;
                }
                "target.kind" => {
                    self.target()?;
                }
                "map.family" => {
                    self.map()?;
                }
                "solver.tau" => {
                    self.flow_options()?;
                }
                "map.seed" => {
                    self.optional_u64(k)?;
                }
                "experiment.first_seed" => {
                    self.u64(k)?;
                }
                "experiment.count" | "experiment.members" => {
                    self.usize_in(k, 1, 1000)?;
                }
                "monotonicity.dims" => {
                    if self.usize_list(k)?.iter().any(|m| !(2..=3).contains(m)) {
                        return Err(self.bad(k, "dimensions 2 or 3"));
                    }
                }
                "balls.stride" => {
                    if self.raw(k) != "auto" {
                        self.usize_in(k, 1, MAX_RESOLUTION)?;
                    }
                }
                "flow.warm_start" => {
                    self.bool(k)?;
                }
                "family.amplitudes" | "experiment.eps_grid" => {
                    if self.f64_list(k)?.iter().any(|v| *v <= 0.0) {
                        return Err(self.bad(k, "positive numbers"));
                    }
                }
                "map.amplitude" | "map.bump" | "map.max_freq" => {}
                "solver.max_iters" => {
                    self.usize_in(k, 1, 10_000_000)?;
                }
                "solver.max_steps" => {
                    self.usize_in(k, 1, 100_000_000)?;
                }
                _ => {
                    self.positive(k)?;
                }
            }
        }
        Ok(())
    }
}

pub const MAX_RESOLUTION: usize = 512;

// --- reports ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `value ≤ threshold`.
    Le,
    /// `value ≥ threshold`.
    Ge,
    /// A boolean property; `value` is 1 when it holds.
    Holds,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub criterion: u8,
    pub value: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub passed: bool,
}

impl Check {
    pub fn le(name: impl Into<String>, criterion: u8, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            criterion,
            value,
            threshold,
            relation: Relation::Le,
            passed: value <= threshold,
        }
    }

    pub fn ge(name: impl Into<String>, criterion: u8, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            criterion,
            value,
            threshold,
            relation: Relation::Ge,
            passed: value >= threshold,
        }
    }

    pub fn holds(name: impl Into<String>, criterion: u8, ok: bool) -> Self {
        Self {
            name: name.into(),
            criterion,
            value: if ok { 1.0 } else { 0.0 },
            threshold: 1.0,
            relation: Relation::Holds,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Environment {
    pub version: &'static str,
    pub build_hash: &'static str,
    pub grassmann_metric: &'static str,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            build_hash: env!("MFRAMES_BUILD_HASH"),
            grassmann_metric: "frobenius-projection",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub schema: &'static str,
    pub subcommand: Command,
    pub config: BTreeMap<String, String>,
    pub checks: Vec<Check>,
    pub results: serde_json::Value,
    pub environment: Environment,
    pub wall_clock_seconds: f64,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Outcome {
    checks: Vec<Check>,
    results: serde_json::Value,
    /// `(file name, body)` artifacts written next to the report.
    files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    fn new(results: impl Serialize, checks: Vec<Check>) -> Result<Self> {
        Ok(Self {
            checks,
            results: serde_json::to_value(results)?,
            files: Vec::new(),
        })
    }

    fn with_file(mut self, name: impl Into<String>, body: Vec<u8>) -> Self {
        self.files.push((name.into(), body));
        self
    }
}

/// Runs one experiment. When `out` is given, `report.json` and the command's
/// artifacts are written there.
pub fn run(settings: &Settings, out: Option<&Path>) -> Result<ExperimentReport> {
    let start = Instant::now();
    let outcome = match settings.command {
        Command::CheckIdentities => check_identities(settings)?,
        Command::Coulomb => coulomb(settings)?,
        Command::Frames => frames(settings)?,
        Command::Hedgehog => hedgehog(settings)?,
        Command::WenteConstant => wente_constant(settings)?,
        Command::HarmonicFlow => harmonic_flow(settings, out)?,
        Command::Noether => noether(settings)?,
        Command::Regularity => regularity(settings)?,
        Command::DecayProbe => decay_probe(settings)?,
        Command::Norms => norms(settings)?,
    };
    let report = ExperimentReport {
        schema: REPORT_SCHEMA,
        subcommand: settings.command,
        config: settings.values.clone(),
        passed: outcome.checks.iter().all(|c| c.passed),
        checks: outcome.checks,
        results: outcome.results,
        environment: Environment::current(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &outcome.files {
            std::fs::write(dir.join(name), body)?;
        }
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        std::fs::write(dir.join("report.json"), json)?;
    }
    Ok(report)
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s.into_bytes()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

fn two_levels(s: &Settings, key: &str) -> Result<(usize, usize)> {
    match s.resolutions(key)?[..] {
        [a, b] if a < b => Ok((a, b)),
        _ => Err(s.bad(key, "two increasing resolutions")),
    }
}

fn check_identities(s: &Settings) -> Result<Outcome> {
    let (coarse, fine) = two_levels(s, "grid.resolutions")?;
    let m = s.usize_in("grid.m", 2, 3)?;
    let min_factor = s.positive("check.min_factor")?;
    let conv = experiments::identity_convergence(m, &s.target()?, s.map()?, coarse, fine)?;
    let mut checks = Vec::new();
    for r in conv.rows.iter().filter(|r| r.group.is_some()) {
        checks.push(match r.factor {
            None => Check::le(
                format!("{}_exact", r.name),
                2,
                r.fine,
                experiments::ROUND_OFF,
            ),
            Some(f) => Check::ge(format!("{}_factor", r.name), 2, f, min_factor),
        });
    }
    let body = csv(
        "name,group,coarse,fine,factor",
        conv.rows.iter().map(|r| {
            let g = r.group.map(String::from).unwrap_or_default();
            format!(
                "{},{},{:e},{:e},{}",
                r.name,
                g,
                r.coarse,
                r.fine,
                opt(r.factor)
            )
        }),
    );
    Ok(Outcome::new(&conv, checks)?.with_file("identities.csv", body))
}

fn hedgehog(s: &Settings) -> Result<Outcome> {
    let r = experiments::hedgehog_morrey(s.usize_in("grid.n", 22, MAX_RESOLUTION)?)?;
    let tol = s.positive("check.tolerance")?;
    let checks = vec![Check::le(
        "hedgehog_morrey_relative_error",
        1,
        r.relative_error.abs(),
        tol,
    )];
    Outcome::new(&r, checks)
}

fn wente_constant(s: &Settings) -> Result<Outcome> {
    let first = s.u64("experiment.first_seed")?;
    let count = s.usize_in("experiment.count", 1, 1000)? as u64;
    let seeds: Vec<u64> = (first..first + count).collect();
    let r = experiments::wente_experiment(s.usize_in("grid.n", 8, MAX_RESOLUTION)?, &seeds)?;
    let checks = vec![
        Check::le(
            "linear_pair_relative_error",
            3,
            r.linear_relative_error.abs(),
            s.positive("check.linear_tolerance")?,
        ),
        Check::le(
            "random_pairs_max_ratio",
            3,
            r.max_ratio,
            s.positive("check.max_ratio")?,
        ),
    ];
    let mut body = Vec::new();
    crate::wente::write_csv(&mut body, &r.rows)?;
    Ok(Outcome::new(&r, checks)?.with_file("wente.csv", body))
}

fn frame_family_from(s: &Settings) -> Result<FrameFamily> {
    let levels = s.resolutions("grid.resolutions")?;
    let amps = s.f64_list("family.amplitudes")?;
    experiments::frame_family(
        &levels,
        &amps,
        &s.gauge_options()?,
        s.positive("frames.threshold")?,
    )
}

fn frames_csv(f: &FrameFamily) -> Vec<u8> {
    csv(
        "resolution,amplitude,omega_morrey,iterations,coulomb_residual,q_sup_deviation,structure_residual,\
         structure_budget,orthonormality,tangency,frame_coulomb_deep,frame_ratio",
        f.members.iter().map(|m| {
            format!(
                "{},{},{:e},{},{:e},{:e},{:e},{:e},{},{},{},{}",
                m.resolution,
                m.amplitude,
                m.omega_morrey,
                m.iterations,
                m.coulomb_residual,
                m.q_sup_deviation,
                m.structure_residual,
                m.structure_budget,
                opt(m.orthonormality),
                opt(m.tangency),
                opt(m.frame_coulomb_deep),
                opt(m.frame_ratio)
            )
        }),
    )
}

/// Criterion 4 checks on a computed family.
pub fn coulomb_checks(f: &FrameFamily, threshold: f64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut levels: Vec<usize> = f.members.iter().map(|m| m.resolution).collect();
    levels.dedup();
    for m in &f.members {
        let tag = format!("n{}_a{}", m.resolution, m.amplitude);
        checks.push(Check::le(
            format!("{tag}_coulomb_residual"),
            4,
            m.coulomb_residual,
            1e-8 * m.coulomb_scale,
        ));
        checks.push(Check::holds(format!("{tag}_converged"), 4, m.converged));
        checks.push(Check::holds(
            format!("{tag}_energy_monotone"),
            4,
            m.energy_monotone,
        ));
        checks.push(Check::le(
            format!("{tag}_structure_residual"),
            4,
            m.structure_residual,
            m.structure_budget,
        ));
        checks.push(Check::le(
            format!("{tag}_q_sup_deviation"),
            4,
            m.q_sup_deviation,
            threshold,
        ));
    }
    for n in levels {
        let mut row: Vec<_> = f.at(n).collect();
        row.sort_by(|a, b| b.omega_morrey.total_cmp(&a.omega_morrey));
        let monotone = row
            .windows(2)
            .all(|w| w[1].q_sup_deviation < w[0].q_sup_deviation);
        checks.push(Check::holds(
            format!("n{n}_q_decreases_with_omega"),
            4,
            monotone,
        ));
    }
    checks
}

/// Criterion 5 checks on a computed family.
pub fn frame_checks(
    f: &FrameFamily,
    ortho: f64,
    coulomb_c: f64,
    tangency_factor: f64,
    spread: f64,
) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut levels: Vec<usize> = f.members.iter().map(|m| m.resolution).collect();
    levels.dedup();
    for m in &f.members {
        let tag = format!("n{}_a{}", m.resolution, m.amplitude);
        checks.push(Check::holds(
            format!("{tag}_frames_extracted"),
            5,
            m.frames_extracted,
        ));
        if let (Some(o), Some(c)) = (m.orthonormality, m.frame_coulomb_deep) {
            checks.push(Check::le(format!("{tag}_orthonormality"), 5, o, ortho));
            checks.push(Check::le(
                format!("{tag}_frame_coulomb_deep"),
                5,
                c,
                1e-6 + coulomb_c * m.spacing,
            ));
        }
    }
    if let [.., a, b] = levels[..] {
        for (x, y) in f.at(a).zip(f.at(b)) {
            if let (Some(tx), Some(ty)) = (x.tangency, y.tangency) {
                checks.push(Check::ge(
                    format!("a{}_tangency_factor_n{a}_n{b}", x.amplitude),
                    5,
                    tx / ty,
                    tangency_factor,
                ));
            }
        }
    }
    for n in levels {
        let ratios: Vec<f64> = f.at(n).filter_map(|m| m.frame_ratio).collect();
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
        let value = if ratios.is_empty() {
            f64::MAX
        } else {
            (hi - lo) / lo
        };
        checks.push(Check::le(
            format!("n{n}_frame_ratio_spread"),
            5,
            value,
            spread,
        ));
    }
    checks
}

#[derive(Serialize)]
struct CoulombResults<'a> {
    family: &'a FrameFamily,
    controls: Vec<experiments::HedgehogControl>,
}

fn coulomb(s: &Settings) -> Result<Outcome> {
    let family = frame_family_from(s)?;
    let threshold = s.positive("frames.threshold")?;
    let mut checks = coulomb_checks(&family, threshold);
    let opts = s.gauge_options()?;
    let mut controls = Vec::new();
    for n in s.resolutions("control.resolutions")? {
        let c = experiments::hedgehog_control(n, &opts, threshold)?;
        checks.push(Check::holds(format!("hedgehog_n{n}_refused"), 4, c.refused));
        controls.push(c);
    }
    let body = frames_csv(&family);
    Ok(Outcome::new(
        CoulombResults {
            family: &family,
            controls,
        },
        checks,
    )?
    .with_file("frames.csv", body))
}

fn frames(s: &Settings) -> Result<Outcome> {
    let family = frame_family_from(s)?;
    let checks = frame_checks(
        &family,
        s.positive("check.orthonormality")?,
        s.positive("check.coulomb_constant")?,
        s.positive("check.tangency_factor")?,
        s.positive("check.ratio_spread")?,
    );
    let body = frames_csv(&family);
    Ok(Outcome::new(&family, checks)?.with_file("frames.csv", body))
}

#[derive(Serialize)]
struct FlowResults {
    converged: bool,
    termination: harmonic::FlowTermination,
    steps: usize,
    rejected_steps: usize,
    tau: f64,
    final_residual: f64,
    initial_energy: f64,
    final_energy: f64,
    on_manifold_residual: f64,
    conservation: Option<harmonic::ConservationReport>,
}

fn harmonic_flow(s: &Settings, out: Option<&Path>) -> Result<Outcome> {
    let dom = s.domain(s.usize_in("grid.n", 8, MAX_RESOLUTION)?)?;
    let mut u0 = s.map()?.build(&dom, &s.target()?)?;
    if s.bool("flow.warm_start")? {
        u0 = harmonic::harmonic_extension(&u0)?;
    }
    let state = harmonic::heat_flow(&u0, &s.flow_options()?)?;
    let d = &state.diagnostics;
    let conservation = match state.u.target().kind() {
        TargetKind::Sphere { .. } => Some(harmonic::conservation_residual(&state.u)?),
        _ => None,
    };
    let results = FlowResults {
        converged: state.converged(),
        termination: d.termination,
        steps: d.steps,
        rejected_steps: d.rejected_steps,
        tau: d.tau,
        final_residual: state.final_residual(),
        initial_energy: d.energy_history[0],
        final_energy: *d.energy_history.last().expect("history is never empty"),
        on_manifold_residual: d.on_manifold_residual,
        conservation,
    };
    let checks = vec![
        Check::holds("flow_converged", 6, state.converged()),
        Check::holds(
            "energy_monotone",
            6,
            d.energy_history.windows(2).all(|w| w[1] <= w[0]),
        ),
        Check::le(
            "on_manifold_residual",
            6,
            d.on_manifold_residual,
            crate::targets::ON_MANIFOLD_TOLERANCE,
        ),
    ];
    if let Some(dir) = out {
        state.save(dir)?;
    }
    let body = csv(
        "step,residual,energy",
        d.residual_history
            .iter()
            .zip(&d.energy_history)
            .enumerate()
            .map(|(k, (r, e))| format!("{k},{r:e},{e:e}")),
    );
    Ok(Outcome::new(results, checks)?.with_file("flow.csv", body))
}

/// Criterion 6 checks.
pub fn noether_checks(
    r: &experiments::NoetherExperiment,
    constant: f64,
    conservation: f64,
) -> Vec<Check> {
    vec![
        Check::holds("flow_converged", 6, r.converged),
        Check::le(
            "max_current_divergence",
            6,
            r.divergence,
            1e-6 + constant * r.spacing * r.du_sq,
        ),
        Check::le(
            "conservation_relative",
            6,
            r.conservation_relative,
            conservation,
        ),
        Check::le(
            "pointwise_current_bound",
            6,
            r.pointwise_ratio,
            r.pointwise_bound * (1.0 + 1e-12),
        ),
    ]
}

fn noether(s: &Settings) -> Result<Outcome> {
    let r = experiments::noether_experiment(
        s.usize_in("grid.n", 8, MAX_RESOLUTION)?,
        s.f64("map.amplitude")?,
        s.f64("map.bump")?,
        &s.flow_options()?,
    )?;
    let checks = noether_checks(
        &r,
        s.positive("check.constant")?,
        s.positive("check.conservation")?,
    );
    Outcome::new(&r, checks)
}

/// Criterion 8 checks.
pub fn regularity_checks(
    f: &experiments::RegularityFamily,
    max_bmo: f64,
    drift: f64,
) -> Vec<Check> {
    let mut checks = Vec::new();
    for run in &f.runs {
        let n = run.resolution;
        checks.push(Check::holds(
            format!("n{n}_all_members_converged"),
            8,
            run.report.excluded.is_empty() && run.report.rows.len() == f.members,
        ));
        let finite = |v: Option<f64>| v.is_some_and(f64::is_finite);
        checks.push(Check::holds(
            format!("n{n}_ratios_finite"),
            8,
            finite(run.report.sup_gradient_ratio) && finite(run.report.sup_hessian_ratio),
        ));
    }
    checks.push(Check::le("max_bmo", 8, f.max_bmo, max_bmo));
    checks.push(Check::le(
        "gradient_ratio_drift",
        8,
        f.gradient_drift.unwrap_or(f64::MAX),
        drift,
    ));
    checks.push(Check::le(
        "hessian_ratio_drift",
        8,
        f.hessian_drift.unwrap_or(f64::MAX),
        drift,
    ));
    checks
}

fn regularity(s: &Settings) -> Result<Outcome> {
    let levels = s.resolutions("grid.resolutions")?;
    let f = experiments::regularity_family(
        s.usize_in("grid.m", 2, 3)?,
        &levels,
        s.usize_in("experiment.members", 1, 1000)?,
        &s.flow_options()?,
        &s.f64_list("experiment.eps_grid")?,
    )?;
    let checks = regularity_checks(&f, s.positive("check.max_bmo")?, s.positive("check.drift")?);
    let mut out = Outcome::new(&f, checks)?;
    for run in &f.runs {
        let mut body = Vec::new();
        harmonic::write_regularity_csv(&mut body, &run.report)?;
        out = out.with_file(format!("regularity_n{}.csv", run.resolution), body);
    }
    Ok(out)
}

/// Criterion 7 checks.
pub fn monotonicity_checks(rows: &[experiments::MonotonicityRow], slack: f64) -> Vec<Check> {
    rows.iter()
        .map(|r| {
            Check::le(
                format!("m{}_{}_worst_ratio", r.dim, r.polynomial),
                7,
                r.report.worst_ratio,
                1.0 + slack,
            )
        })
        .collect()
}

#[derive(Serialize)]
struct DecayResults {
    monotonicity: Vec<experiments::MonotonicityRow>,
    flow_steps: usize,
    flow_converged: bool,
    decay: harmonic::DecayReport,
}

fn decay_probe(s: &Settings) -> Result<Outcome> {
    let slack = s.positive("check.slack")?;
    let rows = experiments::monotonicity_suite(
        &s.usize_list("monotonicity.dims")?,
        s.usize_in("monotonicity.n", 8, MAX_RESOLUTION)?,
        slack,
    )?;
    // fitted exponents and the flow are reported, not asserted
    let checks = monotonicity_checks(&rows, slack);
    let dom = GridDomain::ball(2, s.usize_in("grid.n", 8, MAX_RESOLUTION)?)?;
    let target = Arc::new(TargetManifold::sphere(2)?);
    let u0 =
        crate::maps::boundary_data(&dom, &target, s.f64("map.amplitude")?, s.f64("map.bump")?)?;
    let state = harmonic::heat_flow(&u0, &s.flow_options()?)?;
    let decay = harmonic::decay_iteration_probe(&state.u)?;
    let body = csv(
        "probe,cx,cy,radius,u_energy,h_energy",
        decay.probes.iter().enumerate().flat_map(|(i, p)| {
            p.radii.iter().enumerate().map(move |(k, r)| {
                format!(
                    "{i},{},{},{r:e},{:e},{:e}",
                    p.center[0], p.center[1], p.u_energy[k], p.h_energy[k]
                )
            })
        }),
    );
    let results = DecayResults {
        monotonicity: rows,
        flow_steps: state.diagnostics.steps,
        flow_converged: state.converged(),
        decay,
    };
    Ok(Outcome::new(results, checks)?.with_file("decay.csv", body))
}

#[derive(Serialize)]
struct NormResults {
    du_morrey: NormReport,
    u_bmo: NormReport,
    sup_u: f64,
}

fn norms(s: &Settings) -> Result<Outcome> {
    let dom = s.domain(s.usize_in("grid.n", 8, MAX_RESOLUTION)?)?;
    let u = s.map()?.build(&dom, &s.target()?)?;
    let family = match s.raw("balls.stride") {
        "auto" => BallFamily::dyadic(&dom),
        _ => BallFamily::with_stride(&dom, s.usize_in("balls.stride", 1, MAX_RESOLUTION)?),
    };
    let du = exterior_derivative(u.field())?;
    let results = NormResults {
        du_morrey: morrey_norm(&du, &family)?,
        u_bmo: bmo_seminorm(u.field(), &family)?,
        sup_u: u.field().max_norm(),
    };
    Outcome::new(results, Vec::new())
}

/// One line per check, for terminal output.
pub fn write_summary<W: Write>(mut w: W, report: &ExperimentReport) -> std::io::Result<()> {
    for c in &report.checks {
        let rel = match c.relation {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Holds => "holds",
        };
        writeln!(
            w,
            "{} [criterion {}] {}: {:.6e} {} {:.6e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.criterion,
            c.name,
            c.value,
            rel,
            c.threshold
        )?;
    }
    writeln!(
        w,
        "{} {} ({} checks, {:.1} s)",
        report.subcommand.name(),
        if report.passed { "passed" } else { "FAILED" },
        report.checks.len(),
        report.wall_clock_seconds
    )
}

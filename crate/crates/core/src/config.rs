//! Engine parameters and the flat `key = value` config format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Search effort of the nearest-neighbor forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Checks {
    /// Exact search; results equal a linear scan.
    Exhaustive,
    /// Stop after this many candidate points have been examined.
    Limited(usize),
}

impl fmt::Display for Checks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Checks::Exhaustive => f.write_str("exhaustive"),
            Checks::Limited(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Checks {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("exhaustive") {
            return Ok(Checks::Exhaustive);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Checks::Limited(n)),
            _ => Err(format!("expected a positive integer or 'exhaustive', got '{s}'")),
        }
    }
}

/// Where per-frame processing time comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSource {
    /// Measured wall-clock time.
    Wall,
    /// `virtual_word_cost` seconds per active vocabulary word. Deterministic.
    Virtual,
}

impl fmt::Display for TimeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeSource::Wall => f.write_str("wall"),
            TimeSource::Virtual => f.write_str("virtual"),
        }
    }
}

impl FromStr for TimeSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "wall" => Ok(TimeSource::Wall),
            "virtual" => Ok(TimeSource::Virtual),
            _ => Err(format!("expected 'wall' or 'virtual', got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Short-term memory capacity.
    pub t_stm: usize,
    /// Similarity at or above which consecutive locations merge.
    pub t_similarity: f64,
    /// Fraction of WM protected after the last loop closure.
    pub t_recent: f64,
    /// Nearest-neighbor distance ratio for word matching.
    pub t_nndr: f64,
    pub t_max_features: usize,
    /// Fraction of the average feature count under which a signature is bad.
    pub t_bad: f64,
    /// Minimum feature response kept at ingestion.
    pub t_response: f64,
    /// Per-frame processing budget in seconds.
    pub t_time: f64,
    /// New-place probability under which the best hypothesis is accepted.
    pub t_loop: f64,
    pub neighborhood_range: usize,
    pub gaussian_sigma: f64,
    pub retrieval_max: usize,
    pub descriptor_dim: usize,
    pub nn_checks: Checks,
    pub tree_count: usize,
    pub rng_seed: u64,
    pub time_source: TimeSource,
    pub virtual_word_cost: f64,
    pub ltm_path: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            t_stm: 30,
            t_similarity: 0.20,
            t_recent: 0.20,
            t_nndr: 0.8,
            t_max_features: 400,
            t_bad: 0.25,
            t_response: 0.0,
            t_time: f64::INFINITY,
            t_loop: 0.11,
            neighborhood_range: 16,
            gaussian_sigma: 1.6,
            retrieval_max: 2,
            descriptor_dim: 64,
            nn_checks: Checks::Limited(64),
            tree_count: 4,
            rng_seed: 0,
            time_source: TimeSource::Wall,
            virtual_word_cost: 1e-6,
            ltm_path: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("bad value for '{key}': {e}")))
}

fn parse_seconds(key: &str, raw: &str) -> Result<f64> {
    match raw {
        "inf" | "infinity" | "unbounded" => Ok(f64::INFINITY),
        _ => parse_value(key, raw),
    }
}

impl EngineConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = EngineConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "t_stm" => self.t_stm = parse_value(key, value)?,
            "t_similarity" => self.t_similarity = parse_value(key, value)?,
            "t_recent" => self.t_recent = parse_value(key, value)?,
            "t_nndr" => self.t_nndr = parse_value(key, value)?,
            "t_max_features" => self.t_max_features = parse_value(key, value)?,
            "t_bad" => self.t_bad = parse_value(key, value)?,
            "t_response" => self.t_response = parse_value(key, value)?,
            "t_time" => self.t_time = parse_seconds(key, value)?,
            "t_loop" => self.t_loop = parse_value(key, value)?,
            "neighborhood_range" => self.neighborhood_range = parse_value(key, value)?,
            "gaussian_sigma" => self.gaussian_sigma = parse_value(key, value)?,
            "retrieval_max" => self.retrieval_max = parse_value(key, value)?,
            "descriptor_dim" => self.descriptor_dim = parse_value(key, value)?,
            "nn_checks" => self.nn_checks = parse_value(key, value)?,
            "tree_count" => self.tree_count = parse_value(key, value)?,
            "rng_seed" => self.rng_seed = parse_value(key, value)?,
            "time_source" => self.time_source = parse_value(key, value)?,
            "virtual_word_cost" => self.virtual_word_cost = parse_value(key, value)?,
            "ltm_path" => self.ltm_path = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [
            ("t_similarity", self.t_similarity),
            ("t_recent", self.t_recent),
            ("t_nndr", self.t_nndr),
            ("t_bad", self.t_bad),
            ("t_loop", self.t_loop),
        ];
        for (name, v) in ratios {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.t_stm < 1 {
            return Err(Error::Config("t_stm must be >= 1".into()));
        }
        if self.neighborhood_range < 1 {
            return Err(Error::Config("neighborhood_range must be >= 1".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::Config("descriptor_dim must be positive".into()));
        }
        if self.tree_count == 0 {
            return Err(Error::Config("tree_count must be positive".into()));
        }
        if self.t_max_features == 0 {
            return Err(Error::Config("t_max_features must be positive".into()));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config("gaussian_sigma must be positive".into()));
        }
        if self.t_time.is_nan() || self.t_time < 0.0 {
            return Err(Error::Config("t_time must be non-negative".into()));
        }
        if self.virtual_word_cost.is_nan() || self.virtual_word_cost < 0.0 {
            return Err(Error::Config("virtual_word_cost must be non-negative".into()));
        }
        if self.t_response.is_nan() {
            return Err(Error::Config("t_response must be a number".into()));
        }
        Ok(())
    }
}

/// Writes the config back in the same `key = value` format it is parsed from.
impl fmt::Display for EngineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "t_stm = {}", self.t_stm)?;
        writeln!(f, "t_similarity = {}", self.t_similarity)?;
        writeln!(f, "t_recent = {}", self.t_recent)?;
        writeln!(f, "t_nndr = {}", self.t_nndr)?;
        writeln!(f, "t_max_features = {}", self.t_max_features)?;
        writeln!(f, "t_bad = {}", self.t_bad)?;
        writeln!(f, "t_response = {}", self.t_response)?;
        if self.t_time.is_infinite() {
            writeln!(f, "t_time = inf")?;
        } else {
            writeln!(f, "t_time = {}", self.t_time)?;
        }
        writeln!(f, "t_loop = {}", self.t_loop)?;
        writeln!(f, "neighborhood_range = {}", self.neighborhood_range)?;
        writeln!(f, "gaussian_sigma = {}", self.gaussian_sigma)?;
        writeln!(f, "retrieval_max = {}", self.retrieval_max)?;
        writeln!(f, "descriptor_dim = {}", self.descriptor_dim)?;
        writeln!(f, "nn_checks = {}", self.nn_checks)?;
        writeln!(f, "tree_count = {}", self.tree_count)?;
        writeln!(f, "rng_seed = {}", self.rng_seed)?;
        writeln!(f, "time_source = {}", self.time_source)?;
        writeln!(f, "virtual_word_cost = {}", self.virtual_word_cost)?;
        if let Some(p) = &self.ltm_path {
            writeln!(f, "ltm_path = {}", p.display())?;
        }
        Ok(())
    }
}

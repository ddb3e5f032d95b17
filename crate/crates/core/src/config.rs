//! TOML pipeline configuration.
//!
//! ```toml
//! [paths]            # relative paths resolve against the config file
//! events = "events.csv"
//! schedule = "schedule.toml"
//! labels = "labels.csv"
//! output = "out"
//!
//! [extract]
//! weeks_used = 4
//! features = ["TotalClicksVideo", "ContentAlignment"]   # default: all nine
//! noise_features = 0
//! session_timeout = 1800.0
//! gap_cap = 3600.0
//!
//! [train]            # see TrainConfig; seed defaults to 0
//! seed = 1
//!
//! [cluster]          # see ClusterParams
//! bandwidth = "median"
//! seed = 0
//!
//! [report]
//! collapse = "mean"
//! raw = false
//!
//! [simulate]
//! n_students = 600
//! n_weeks = 10
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::Collapse;
use crate::clustering::ClusterParams;
use crate::features::{FeatureRegistry, DEFAULT_GAP_CAP, STANDARD_FEATURES};
use crate::gating::TrainConfig;
use crate::ingest::DEFAULT_SESSION_TIMEOUT;
use crate::synth::ArchetypeSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub events: PathBuf,
    pub schedule: PathBuf,
    pub labels: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            events: "events.csv".into(),
            schedule: "schedule.toml".into(),
            labels: "labels.csv".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub weeks_used: usize,
    pub features: Vec<String>,
    /// Pure-noise features appended after `features`.
    pub noise_features: usize,
    pub session_timeout: f64,
    pub gap_cap: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            weeks_used: 4,
            features: STANDARD_FEATURES.iter().map(|s| s.to_string()).collect(),
            noise_features: 0,
            session_timeout: DEFAULT_SESSION_TIMEOUT,
            gap_cap: DEFAULT_GAP_CAP,
        }
    }
}

impl ExtractConfig {
    pub fn registry(&self) -> FeatureRegistry {
        FeatureRegistry::standard_with_noise(self.noise_features)
    }

    /// Configured features followed by the noise features.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.features.clone();
        names.extend((1..=self.noise_features).map(crate::features::noise_feature_name));
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub collapse: Collapse,
    /// Summarize unscaled feature values.
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_students: usize,
    pub n_weeks: usize,
    pub seed: u64,
    /// Empty means the default three-archetype plant.
    pub archetypes: Vec<ArchetypeSpec>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_students: 600,
            n_weeks: 10,
            seed: 0,
            archetypes: Vec::new(),
        }
    }
}

impl SimulateConfig {
    pub fn archetypes(&self) -> Vec<ArchetypeSpec> {
        if self.archetypes.is_empty() {
            crate::synth::default_archetypes(self.n_weeks)
        } else {
            self.archetypes.clone()
        }
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::with_seed(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            extract: ExtractConfig::default(),
            train: default_train(),
            cluster: ClusterParams::default(),
            report: ReportConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

/// Splits `section.key=value`; the value is read as a TOML value when it
/// parses as one, otherwise as a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let bad = || ConfigError::BadOverride(spec.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(bad)?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.len() < 2 || path.iter().any(String::is_empty) {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("override paths are non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{} is not a section", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parses `text`, applies `overrides`, and validates. Relative paths
    /// are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let mut config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.paths = Paths {
            events: resolve(base_dir, &config.paths.events),
            schedule: resolve(base_dir, &config.paths.schedule),
            labels: resolve(base_dir, &config.paths.labels),
            output: resolve(base_dir, &config.paths.output),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let c = &self.cluster;
        if c.n_min <= 2 {
            return invalid(format!(
                "cluster.n_min = {}: the number of clusters must be greater than two",
                c.n_min
            ));
        }
        if c.n_max < c.n_min {
            return invalid(format!("cluster.n_max = {} is below n_min = {}", c.n_max, c.n_min));
        }
        if let crate::clustering::Bandwidth::Fixed(s) = c.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return invalid(format!("cluster.bandwidth = {s} must be positive"));
            }
        }
        let e = &self.extract;
        if e.weeks_used == 0 {
            return invalid("extract.weeks_used must be at least 1".into());
        }
        if e.feature_names().is_empty() {
            return invalid("extract lists no features".into());
        }
        let registry = e.registry();
        if let Some(f) = e.features.iter().find(|f| registry.get(f).is_none()) {
            return invalid(format!("extract.features: unknown feature {f:?}"));
        }
        let mut names = e.feature_names();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return invalid("extract.features lists a feature twice".into());
        }
        if !(e.session_timeout > 0.0) || !(e.gap_cap > 0.0) {
            return invalid("extract.session_timeout and extract.gap_cap must be positive".into());
        }
        self.train.validate().map_err(|err| ConfigError::Invalid(format!("train: {err}")))?;
        let s = &self.simulate;
        if s.n_weeks < e.weeks_used {
            return invalid(format!(
                "simulate.n_weeks = {} is shorter than extract.weeks_used = {}",
                s.n_weeks, e.weeks_used
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Bandwidth;

    fn parse(text: &str, overrides: &[&str]) -> Result<PipelineConfig, ConfigError> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        PipelineConfig::from_toml(text, Path::new("/base"), &o)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("", &[]).unwrap();
        assert_eq!(c.extract.weeks_used, 4);
        assert_eq!(c.extract.features.len(), 9);
        assert_eq!(c.cluster.n_min, 3);
        assert_eq!(c.cluster.n_max, 10);
        assert_eq!(c.cluster.bandwidth, Bandwidth::MEDIAN);
        assert_eq!(c.train.seed, 0);
        assert_eq!(c.paths.events, PathBuf::from("/base/events.csv"));
    }

    #[test]
    fn n_min_two_is_rejected() {
        let err = parse("[cluster]\nn_min = 2\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(err.to_string().contains("greater than two"), "{err}");
    }

    #[test]
    fn overrides_replace_values() {
        let c = parse(
            "[train]\nseed = 3\n",
            &["train.seed=9", "cluster.bandwidth=0.25", "report.collapse=sum", "paths.output=/tmp/x"],
        )
        .unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.cluster.bandwidth, Bandwidth::Fixed(0.25));
        assert_eq!(c.report.collapse, Collapse::Sum);
        assert_eq!(c.paths.output, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_override_and_unknown_keys() {
        assert!(matches!(parse("", &["seed=1"]), Err(ConfigError::BadOverride(_))));
        assert!(matches!(parse("[cluster]\nsigma = 1\n", &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(parse("[extract]\nweeks_used = 0\n", &[]), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            parse("[extract]\nfeatures = [\"Nope\"]\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = parse("[extract]\nnoise_features = 2\n", &[]).unwrap();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.extract.feature_names().last().unwrap(), "Noise02");
    }
}

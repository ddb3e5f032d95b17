//! Stage orchestration with stamped artifacts.
//!
//! Every stage writes into the output directory and stamps each artifact
//! with a SHA-256 hash chained from its inputs: the relevant config section,
//! the upstream stage's hash, and the bytes of any input file it reads.
//! A later stage recomputes the hashes it expects from the current config
//! and refuses artifacts whose stamp differs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::analysis::{build_report, export_report, REPORT_IMPORTANCE, REPORT_JSON, REPORT_VALUES};
use crate::clustering::{cluster_students, ClusterAssignment};
use crate::config::PipelineConfig;
use crate::features::{compute_weekly_features, unit_norm_scale, FeatureCube};
use crate::gating::{extract_masks, train as train_model, write_text, MaskMatrix};
use crate::ingest::{parse_events, parse_labels, sessionize, CourseSchedule};
use crate::numfmt::f17;
use crate::synth::{generate_synthetic_course, ARCHETYPES_FILE};

pub const CUBE_DIR: &str = "cube";
pub const CUBE_RAW_DIR: &str = "cube_raw";
pub const SCALING_FILE: &str = "scaling.csv";
pub const MODEL_FILE: &str = "model.params";
pub const HISTORY_FILE: &str = "history.csv";
pub const MASKS_FILE: &str = "masks.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const EIGENGAP_FILE: &str = "eigengap.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Extract,
    Train,
    Cluster,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Cluster => "cluster",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage failure. Displays as a single `stage=… cause=…` line.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub stage: Stage,
    pub cause: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cause: String = self
            .cause
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        write!(f, "stage={} cause={}", self.stage, cause)
    }
}

impl std::error::Error for PipelineError {}

fn fail<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        cause: e.to_string(),
    }
}

/// Artifact header: the stage hash plus both seeds, for the record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub stage: String,
    pub hash: String,
    pub train_seed: u64,
    pub cluster_seed: u64,
}

impl fmt::Display for Stamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} hash={} train_seed={} cluster_seed={}",
            self.stage, self.hash, self.train_seed, self.cluster_seed
        )
    }
}

impl Stamp {
    pub fn parse(text: &str) -> Option<Stamp> {
        let mut stage = None;
        let mut hash = None;
        let mut train_seed = None;
        let mut cluster_seed = None;
        for token in text.split_whitespace() {
            let (k, v) = token.split_once('=')?;
            match k {
                "stage" => stage = Some(v.to_string()),
                "hash" => hash = Some(v.to_string()),
                "train_seed" => train_seed = v.parse().ok(),
                "cluster_seed" => cluster_seed = v.parse().ok(),
                _ => return None,
            }
        }
        Some(Stamp {
            stage: stage?,
            hash: hash?,
            train_seed: train_seed?,
            cluster_seed: cluster_seed?,
        })
    }
}

struct Hasher(Sha256);

impl Hasher {
    fn new(tag: &str) -> Self {
        let mut h = Hasher(Sha256::new());
        h.part(tag.as_bytes());
        h
    }

    /// Length-prefixed, so concatenations cannot collide.
    fn part(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

fn section<T: serde::Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config sections serialize")
}

fn read_bytes(stage: Stage, path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|e| PipelineError {
        stage,
        cause: format!("cannot read {}: {e}", path.display()),
    })
}

fn read_string(stage: Stage, path: &Path) -> Result<String, PipelineError> {
    String::from_utf8(read_bytes(stage, path)?).map_err(|_| PipelineError {
        stage,
        cause: format!("{} is not UTF-8", path.display()),
    })
}

/// Expected hashes for each stage under a config, computed lazily since
/// each depends on reading input files.
pub struct Stamps<'a> {
    config: &'a PipelineConfig,
}

impl<'a> Stamps<'a> {
    pub fn new(config: &'a PipelineConfig) -> Self {
        Stamps { config }
    }

    fn stamp(&self, stage: Stage, hash: String) -> Stamp {
        Stamp {
            stage: stage.name().to_string(),
            hash,
            train_seed: self.config.train.seed,
            cluster_seed: self.config.cluster.seed,
        }
    }

    pub fn extract(&self, stage: Stage) -> Result<Stamp, PipelineError> {
        let c = self.config;
        let mut h = Hasher::new("extract");
        h.part(section(&c.extract).as_bytes())
            .part(&read_bytes(stage, &c.paths.events)?)
            .part(&read_bytes(stage, &c.paths.schedule)?);
        Ok(self.stamp(Stage::Extract, h.finish()))
    }

    pub fn train(&self, stage: Stage) -> Result<Stamp, PipelineError> {
        let upstream = self.extract(stage)?;
        let mut h = Hasher::new("train");
        h.part(upstream.hash.as_bytes())
            .part(section(&self.config.train).as_bytes())
            .part(&read_bytes(stage, &self.config.paths.labels)?);
        Ok(self.stamp(Stage::Train, h.finish()))
    }

    pub fn cluster(&self, stage: Stage) -> Result<Stamp, PipelineError> {
        let upstream = self.train(stage)?;
        let mut h = Hasher::new("cluster");
        h.part(upstream.hash.as_bytes())
            .part(section(&self.config.cluster).as_bytes());
        Ok(self.stamp(Stage::Cluster, h.finish()))
    }

    pub fn report(&self, stage: Stage) -> Result<Stamp, PipelineError> {
        let upstream = self.cluster(stage)?;
        let mut h = Hasher::new("report");
        h.part(upstream.hash.as_bytes())
            .part(section(&self.config.report).as_bytes());
        Ok(self.stamp(Stage::Report, h.finish()))
    }
}

fn check_stamp(stage: Stage, path: &Path, found: &str, expected: &Stamp) -> Result<(), PipelineError> {
    match Stamp::parse(found) {
        Some(s) if s.hash == expected.hash && s.stage == expected.stage => Ok(()),
        _ => Err(PipelineError {
            stage,
            cause: format!(
                "stale artifact {}: stamp {:?} does not match the current configuration (expected {} hash {}); rerun {}",
                path.display(),
                found,
                expected.stage,
                expected.hash,
                expected.stage
            ),
        }),
    }
}

fn write_file(stage: Stage, path: &Path, text: &str) -> Result<PathBuf, PipelineError> {
    write_text(path, text).map_err(fail(stage))?;
    Ok(path.to_path_buf())
}

fn output(config: &PipelineConfig, name: &str) -> PathBuf {
    config.paths.output.join(name)
}

fn load_cube(config: &PipelineConfig, stage: Stage, raw: bool) -> Result<FeatureCube, PipelineError> {
    let dir = output(config, if raw { CUBE_RAW_DIR } else { CUBE_DIR });
    let expected = Stamps::new(config).extract(stage)?;
    let (cube, stamp) = FeatureCube::load(&dir).map_err(fail(stage))?;
    check_stamp(stage, &dir, &stamp, &expected)?;
    Ok(cube)
}

fn load_masks(config: &PipelineConfig, stage: Stage) -> Result<MaskMatrix, PipelineError> {
    let path = output(config, MASKS_FILE);
    let expected = Stamps::new(config).train(stage)?;
    let (masks, stamp) = MaskMatrix::from_csv(&read_string(stage, &path)?).map_err(fail(stage))?;
    check_stamp(stage, &path, &stamp, &expected)?;
    Ok(masks)
}

fn load_assignment(config: &PipelineConfig, stage: Stage) -> Result<ClusterAssignment, PipelineError> {
    let path = output(config, ASSIGNMENTS_FILE);
    let expected = Stamps::new(config).cluster(stage)?;
    let (assignment, stamp) = ClusterAssignment::from_csv(&read_string(stage, &path)?).map_err(fail(stage))?;
    check_stamp(stage, &path, &stamp, &expected)?;
    Ok(assignment)
}

fn load_labels(config: &PipelineConfig, stage: Stage) -> Result<std::collections::BTreeMap<String, bool>, PipelineError> {
    let bytes = read_bytes(stage, &config.paths.labels)?;
    parse_labels(bytes.as_slice()).map_err(fail(stage))
}

/// Writes a synthetic course to the configured event, schedule and label
/// paths, with `archetypes.csv` beside the event file.
pub fn simulate(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = Stage::Simulate;
    let s = &config.simulate;
    let course = generate_synthetic_course(&s.archetypes(), s.n_students, s.n_weeks, s.seed).map_err(fail(stage))?;
    let mut events = Vec::new();
    crate::ingest::write_events(&course.log, &mut events).map_err(fail(stage))?;
    let mut labels = Vec::new();
    crate::ingest::write_labels(&course.labels, &mut labels).map_err(fail(stage))?;
    let archetypes = config
        .paths
        .events
        .parent()
        .unwrap_or(Path::new("."))
        .join(ARCHETYPES_FILE);
    let files = [
        (&config.paths.events, events),
        (&config.paths.schedule, course.schedule.to_text().into_bytes()),
        (&config.paths.labels, labels),
        (&archetypes, course.archetypes_csv().into_bytes()),
    ];
    let mut written = Vec::new();
    for (path, bytes) in files {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(fail(stage))?;
        }
        fs::write(path, bytes).map_err(|e| PipelineError {
            stage,
            cause: format!("cannot write {}: {e}", path.display()),
        })?;
        written.push(path.clone());
    }
    Ok(written)
}

fn scaling_csv(cube: &FeatureCube, factors: &[f64], zero: &[String], stamp: &Stamp) -> String {
    let mut out = format!("# {stamp}\nfeature,scale_factor,zero_variance\n");
    for (name, &factor) in cube.feature_names.iter().zip(factors) {
        let z = zero.contains(name) as u8;
        out.push_str(&format!("{name},{},{z}\n", f17(factor)));
    }
    out
}

/// Events → sessions → weekly features → unit-norm scaling.
pub fn extract(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = Stage::Extract;
    let stamp = Stamps::new(config).extract(stage)?;
    let e = &config.extract;
    let schedule = CourseSchedule::parse(&read_string(stage, &config.paths.schedule)?).map_err(fail(stage))?;
    let events = read_bytes(stage, &config.paths.events)?;
    let log = parse_events(events.as_slice(), &schedule).map_err(fail(stage))?;
    let students: Vec<_> = log.by_student().collect();
    let sessions: Vec<_> = students
        .par_iter()
        .map(|(_, ev)| sessionize(ev, e.session_timeout))
        .collect();
    let registry = e.registry();
    let raw = compute_weekly_features(&log, &schedule, &sessions, e.weeks_used, &registry, &e.feature_names(), e.gap_cap)
        .map_err(fail(stage))?;
    let (scaled, scaling) = unit_norm_scale(&raw);

    let out = &config.paths.output;
    raw.save(&out.join(CUBE_RAW_DIR), &stamp.to_string()).map_err(fail(stage))?;
    scaled.save(&out.join(CUBE_DIR), &stamp.to_string()).map_err(fail(stage))?;
    let scaling_path = write_file(
        stage,
        &out.join(SCALING_FILE),
        &scaling_csv(&raw, &scaling.scale_factors, &scaling.zero_variance, &stamp),
    )?;
    Ok(vec![out.join(CUBE_RAW_DIR), out.join(CUBE_DIR), scaling_path])
}

/// Trains the gating model and extracts the per-student masks.
pub fn train(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = Stage::Train;
    let stamp = Stamps::new(config).train(stage)?;
    let cube = load_cube(config, stage, false)?;
    let labels = load_labels(config, stage)?;
    let (model, history) = train_model(&cube, &labels, &config.train).map_err(fail(stage))?;
    let masks = extract_masks(&model, &cube).map_err(fail(stage))?;

    let model_path = output(config, MODEL_FILE);
    model.save(&model_path, &stamp.to_string()).map_err(fail(stage))?;
    Ok(vec![
        model_path,
        write_file(stage, &output(config, HISTORY_FILE), &history.to_csv(&stamp.to_string()))?,
        write_file(stage, &output(config, MASKS_FILE), &masks.to_csv(&stamp.to_string()))?,
    ])
}

/// Masked distances, similarity, eigengap selection and spectral labels.
pub fn cluster(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = Stage::Cluster;
    let stamp = Stamps::new(config).cluster(stage)?.to_string();
    let cube = load_cube(config, stage, false)?;
    let masks = load_masks(config, stage)?;
    let outcome = cluster_students(&cube, &masks, &config.cluster).map_err(fail(stage))?;
    let mut written = vec![
        write_file(stage, &output(config, DISTANCES_FILE), &outcome.distance.to_csv(&stamp))?,
        write_file(stage, &output(config, SIMILARITY_FILE), &outcome.similarity.to_csv(&stamp))?,
        write_file(stage, &output(config, ASSIGNMENTS_FILE), &outcome.assignment.to_csv(&stamp))?,
    ];
    if let Some(diag) = &outcome.assignment.diagnostics {
        written.push(write_file(stage, &output(config, EIGENGAP_FILE), &diag.to_csv(&stamp))?);
    }
    Ok(written)
}

/// Per-cluster importance, value distributions and pass rates.
pub fn report(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = Stage::Report;
    let stamp = Stamps::new(config).report(stage)?.to_string();
    let r = &config.report;
    let cube = load_cube(config, stage, r.raw)?;
    let masks = load_masks(config, stage)?;
    let assignment = load_assignment(config, stage)?;
    let labels = load_labels(config, stage)?;
    let report = build_report(&cube, &masks, &assignment, Some(&labels), r.collapse, r.raw, &stamp).map_err(fail(stage))?;
    let out = &config.paths.output;
    export_report(&report, out).map_err(fail(stage))?;
    Ok([REPORT_JSON, REPORT_IMPORTANCE, REPORT_VALUES]
        .iter()
        .map(|f| out.join(f))
        .collect())
}

/// extract → train → cluster → report.
pub fn run_all(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let mut written = extract(config)?;
    written.extend(train(config)?);
    written.extend(cluster(config)?);
    written.extend(report(config)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_round_trips() {
        let s = Stamp {
            stage: "train".into(),
            hash: "ab12".into(),
            train_seed: 4,
            cluster_seed: 9,
        };
        assert_eq!(Stamp::parse(&s.to_string()), Some(s));
        assert_eq!(Stamp::parse("stage=x hash=y"), None);
        assert_eq!(Stamp::parse("garbage"), None);
    }

    #[test]
    fn error_is_one_line() {
        let e = PipelineError {
            stage: Stage::Cluster,
            cause: "bad\nthing".into(),
        };
        assert_eq!(e.to_string(), "stage=cluster cause=bad thing");
    }

    #[test]
    fn hash_parts_are_length_prefixed() {
        let mut a = Hasher::new("t");
        a.part(b"ab").part(b"c");
        let mut b = Hasher::new("t");
        b.part(b"a").part(b"bc");
        assert_ne!(a.finish(), b.finish());
    }
}

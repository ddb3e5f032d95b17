//! Weekly behavioral features and unit-norm scaling.
//!
//! Each registered feature maps one student-week to a non-negative real. The
//! extracted [`FeatureCube`] is laid out students × features × weeks.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{assign_week, CourseSchedule, Event, EventKind, EventLog, Session};
use crate::numfmt::f17;

/// Cap (seconds) on the dwell time attributed to a single event.
pub const DEFAULT_GAP_CAP: f64 = 3_600.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("weeks_used {weeks_used} exceeds course length {num_weeks}")]
    TooManyWeeks { weeks_used: usize, num_weeks: usize },
    #[error("sessions provided for {got} students, log has {expected}")]
    SessionMismatch { expected: usize, got: usize },
    #[error("cube file: {0}")]
    Format(String),
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One student's activity, as seen by a feature extractor.
pub struct StudentActivity<'a> {
    pub student_id: &'a str,
    pub events: &'a [Event],
    pub sessions: &'a [Session],
    /// Course week of every event, aligned with `events`.
    pub event_weeks: &'a [usize],
    /// Course week of every session start, aligned with `sessions`.
    pub session_weeks: &'a [usize],
    pub schedule: &'a CourseSchedule,
    pub gap_cap: f64,
}

pub type ExtractFn = Arc<dyn Fn(&StudentActivity<'_>, usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct FeatureSpec {
    pub name: String,
    pub description: String,
    pub extractor: ExtractFn,
}

impl fmt::Debug for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureSpec")
            .field("name", &self.name)
            .field("description", &self.description)
            .finish_non_exhaustive()
    }
}

pub const TOTAL_CLICKS_VIDEO: &str = "TotalClicksVideo";
pub const TOTAL_CLICKS_VIDEO_LOAD: &str = "TotalClicksVideoLoad";
pub const TOTAL_TIME_VIDEO: &str = "TotalTimeVideo";
pub const TIME_IN_PROBLEM_SUM: &str = "TimeInProblemSum";
pub const TOTAL_TIME_PROBLEMS: &str = "TotalTimeProblems";
pub const STUDENT_SPEED: &str = "StudentSpeed";
pub const TIME_BETWEEN_SESSIONS_STD: &str = "TimeBetweenSessionsStd";
pub const TOTAL_TIME_SESSIONS: &str = "TotalTimeSessions";
pub const CONTENT_ALIGNMENT: &str = "ContentAlignment";

/// The nine behavioral features built into [`FeatureRegistry::standard`].
pub const STANDARD_FEATURES: [&str; 9] = [
    TOTAL_CLICKS_VIDEO,
    TOTAL_CLICKS_VIDEO_LOAD,
    TOTAL_TIME_VIDEO,
    TIME_IN_PROBLEM_SUM,
    TOTAL_TIME_PROBLEMS,
    STUDENT_SPEED,
    TIME_BETWEEN_SESSIONS_STD,
    TOTAL_TIME_SESSIONS,
    CONTENT_ALIGNMENT,
];

/// Name of the `index`-th (1-based) pure-noise feature.
pub fn noise_feature_name(index: usize) -> String {
    format!("Noise{index:02}")
}

#[derive(Debug, Clone, Default)]
pub struct FeatureRegistry {
    specs: Vec<FeatureSpec>,
}

impl FeatureRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        let add = |r: &mut Self, name: &str, desc: &str, f: ExtractFn| {
            r.register(FeatureSpec {
                name: name.into(),
                description: desc.into(),
                extractor: f,
            })
            .expect("standard names are unique")
        };
        add(&mut r, TOTAL_CLICKS_VIDEO, "video events in the week", Arc::new(|a, w| {
            count_events(a, w, |k| k.is_video())
        }));
        add(&mut r, TOTAL_CLICKS_VIDEO_LOAD, "VideoLoad events in the week", Arc::new(|a, w| {
            count_events(a, w, |k| k == EventKind::VideoLoad)
        }));
        add(&mut r, TOTAL_TIME_VIDEO, "dwell seconds after VideoPlay events", Arc::new(|a, w| {
            dwell_time(a, w, |k| k == EventKind::VideoPlay)
        }));
        add(&mut r, TIME_IN_PROBLEM_SUM, "dwell seconds after problem events", Arc::new(|a, w| {
            dwell_time(a, w, |k| k.is_problem())
        }));
        add(&mut r, TOTAL_TIME_PROBLEMS, "same quantity as TimeInProblemSum", Arc::new(|a, w| {
            dwell_time(a, w, |k| k.is_problem())
        }));
        add(&mut r, STUDENT_SPEED, "mean seconds between ProblemSubmit events", Arc::new(student_speed));
        add(
            &mut r,
            TIME_BETWEEN_SESSIONS_STD,
            "population std of gaps between sessions starting in the week",
            Arc::new(time_between_sessions_std),
        );
        add(&mut r, TOTAL_TIME_SESSIONS, "summed length of sessions starting in the week", Arc::new(|a, w| {
            a.sessions
                .iter()
                .zip(a.session_weeks)
                .filter(|(_, &sw)| sw == w)
                .map(|(s, _)| s.end - s.start)
                .sum()
        }));
        add(
            &mut r,
            CONTENT_ALIGNMENT,
            "fraction of the week's scheduled videos played during that week",
            Arc::new(content_alignment),
        );
        r
    }

    /// The standard features plus `n_noise` deterministic pseudo-random
    /// features that carry no behavioral signal.
    pub fn standard_with_noise(n_noise: usize) -> Self {
        let mut r = Self::standard();
        for i in 1..=n_noise {
            r.register(noise_feature(i)).expect("noise names are unique");
        }
        r
    }

    pub fn register(&mut self, spec: FeatureSpec) -> Result<(), FeatureError> {
        if self.get(&spec.name).is_some() {
            return Err(FeatureError::DuplicateFeature(spec.name));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

fn in_week<'a>(a: &'a StudentActivity<'_>, week: usize) -> impl Iterator<Item = &'a Event> + 'a {
    a.events
        .iter()
        .zip(a.event_weeks)
        .filter(move |(_, &w)| w == week)
        .map(|(e, _)| e)
}

fn count_events(a: &StudentActivity<'_>, week: usize, pred: impl Fn(EventKind) -> bool) -> f64 {
    in_week(a, week).filter(|e| pred(e.kind)).count() as f64
}

/// Sums capped gaps over consecutive within-session pairs whose first event
/// matches `pred`. A pair belongs to the week of its first event.
fn dwell_time(a: &StudentActivity<'_>, week: usize, pred: impl Fn(EventKind) -> bool) -> f64 {
    let mut total = 0.0;
    for session in a.sessions {
        for pair in session.event_indices.windows(2) {
            let (i, j) = (pair[0], pair[1]);
            if a.event_weeks[i] == week && pred(a.events[i].kind) {
                let gap = a.events[j].timestamp - a.events[i].timestamp;
                total += gap.min(a.gap_cap);
            }
        }
    }
    total
}

fn student_speed(a: &StudentActivity<'_>, week: usize) -> f64 {
    let submits: Vec<f64> = in_week(a, week)
        .filter(|e| e.kind == EventKind::ProblemSubmit)
        .map(|e| e.timestamp)
        .collect();
    if submits.len() < 2 {
        return 0.0;
    }
    let span: f64 = submits.windows(2).map(|p| p[1] - p[0]).sum();
    span / (submits.len() - 1) as f64
}

fn time_between_sessions_std(a: &StudentActivity<'_>, week: usize) -> f64 {
    let sessions: Vec<&Session> = a
        .sessions
        .iter()
        .zip(a.session_weeks)
        .filter(|(_, &w)| w == week)
        .map(|(s, _)| s)
        .collect();
    if sessions.len() < 2 {
        return 0.0;
    }
    let gaps: Vec<f64> = sessions.windows(2).map(|p| p[1].start - p[0].end).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
    var.sqrt()
}

fn content_alignment(a: &StudentActivity<'_>, week: usize) -> f64 {
    let Some(scheduled) = a.schedule.videos_for_week(week).filter(|v| !v.is_empty()) else {
        return 0.0;
    };
    let played: BTreeSet<&str> = in_week(a, week)
        .filter(|e| e.kind == EventKind::VideoPlay)
        .map(|e| e.object_id.as_str())
        .filter(|id| scheduled.contains(*id))
        .collect();
    played.len() as f64 / scheduled.len() as f64
}

fn noise_feature(index: usize) -> FeatureSpec {
    FeatureSpec {
        name: noise_feature_name(index),
        description: "deterministic pseudo-random value, no behavioral signal".into(),
        extractor: Arc::new(move |a, w| {
            let h = fnv1a(a.student_id.as_bytes()) ^ ((index as u64) << 32) ^ (w as u64);
            // uniform in [0, 1)
            (splitmix64(h) >> 11) as f64 / (1u64 << 53) as f64
        }),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Students × features × weeks array of feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    values: Vec<f64>,
    pub student_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub weeks: usize,
    pub scaled: bool,
}

impl FeatureCube {
    pub fn new(
        values: Vec<f64>,
        student_ids: Vec<String>,
        feature_names: Vec<String>,
        weeks: usize,
        scaled: bool,
    ) -> Result<Self, FeatureError> {
        let expected = student_ids.len() * feature_names.len() * weeks;
        if values.len() != expected {
            return Err(FeatureError::Format(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(FeatureError::Format(format!("non-finite value {v}")));
        }
        Ok(FeatureCube {
            values,
            student_ids,
            feature_names,
            weeks,
            scaled,
        })
    }

    pub fn num_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, student: usize, feature: usize, week: usize) -> f64 {
        self.values[(student * self.num_features() + feature) * self.weeks + week]
    }

    /// Week series of one student-feature.
    pub fn series(&self, student: usize, feature: usize) -> &[f64] {
        let start = (student * self.num_features() + feature) * self.weeks;
        &self.values[start..start + self.weeks]
    }

    /// One student's features × weeks block, row-major by feature.
    pub fn student_slice(&self, student: usize) -> &[f64] {
        let len = self.num_features() * self.weeks;
        &self.values[student * len..(student + 1) * len]
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Writes `cube.csv` (long format) and `meta` into `dir`.
    pub fn save(&self, dir: &Path, stamp: &str) -> Result<(), FeatureError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| FeatureError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let meta = CubeMeta {
            stamp: stamp.to_string(),
            scaled: self.scaled,
            weeks_used: self.weeks,
            student_ids: self.student_ids.clone(),
            feature_names: self.feature_names.clone(),
        };
        let meta_path = dir.join("meta");
        fs::write(&meta_path, toml::to_string(&meta).expect("meta serializes")).map_err(io(&meta_path))?;

        let mut out = String::from("student_id,feature,week,value\n");
        for (s, sid) in self.student_ids.iter().enumerate() {
            for (f, fname) in self.feature_names.iter().enumerate() {
                for w in 0..self.weeks {
                    out.push_str(&format!("{sid},{fname},{w},{}\n", f17(self.get(s, f, w))));
                }
            }
        }
        let cube_path = dir.join("cube.csv");
        fs::write(&cube_path, out).map_err(io(&cube_path))
    }

    /// Loads a cube written by [`FeatureCube::save`], returning it with its stamp.
    pub fn load(dir: &Path) -> Result<(Self, String), FeatureError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| FeatureError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let meta: CubeMeta = toml::from_str(&read(&dir.join("meta"))?)
            .map_err(|e| FeatureError::Format(e.to_string()))?;
        let students: HashMap<&str, usize> =
            meta.student_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let features: HashMap<&str, usize> =
            meta.feature_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let (ns, nf, nw) = (students.len(), features.len(), meta.weeks_used);
        let mut values = vec![f64::NAN; ns * nf * nw];
        let text = read(&dir.join("cube.csv"))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for record in reader.records() {
            let record = record.map_err(|e| FeatureError::Format(e.to_string()))?;
            let bad = || FeatureError::Format(format!("bad cube row {:?}", record));
            let s = *students.get(&record[0]).ok_or_else(bad)?;
            let f = *features.get(&record[1]).ok_or_else(bad)?;
            let w: usize = record[2].parse().map_err(|_| bad())?;
            if w >= nw {
                return Err(bad());
            }
            values[(s * nf + f) * nw + w] = record[3].parse().map_err(|_| bad())?;
        }
        let cube = FeatureCube::new(values, meta.student_ids, meta.feature_names, nw, meta.scaled)
            .map_err(|_| FeatureError::Format("cube.csv is missing entries".into()))?;
        Ok((cube, meta.stamp))
    }
}

#[derive(Serialize, Deserialize)]
struct CubeMeta {
    stamp: String,
    scaled: bool,
    weeks_used: usize,
    student_ids: Vec<String>,
    feature_names: Vec<String>,
}

/// Evaluates the requested features for every student of `log` over the
/// first `weeks_used` weeks. `sessions` is aligned with the log's student order.
pub fn compute_weekly_features(
    log: &EventLog,
    schedule: &CourseSchedule,
    sessions: &[Vec<Session>],
    weeks_used: usize,
    registry: &FeatureRegistry,
    feature_names: &[String],
    gap_cap: f64,
) -> Result<FeatureCube, FeatureError> {
    if weeks_used > schedule.num_weeks {
        return Err(FeatureError::TooManyWeeks {
            weeks_used,
            num_weeks: schedule.num_weeks,
        });
    }
    if sessions.len() != log.num_students() {
        return Err(FeatureError::SessionMismatch {
            expected: log.num_students(),
            got: sessions.len(),
        });
    }
    let specs: Vec<&FeatureSpec> = feature_names
        .iter()
        .map(|n| registry.get(n).ok_or_else(|| FeatureError::UnknownFeature(n.clone())))
        .collect::<Result<_, _>>()?;

    let students: Vec<(&str, &[Event])> = log.by_student().collect();
    let rows: Vec<Vec<f64>> = students
        .par_iter()
        .zip(sessions.par_iter())
        .map(|(&(id, events), sessions)| {
            let event_weeks: Vec<usize> = events
                .iter()
                .map(|e| assign_week(e.timestamp, schedule).expect("log is within course"))
                .collect();
            let session_weeks: Vec<usize> = sessions
                .iter()
                .map(|s| assign_week(s.start, schedule).expect("log is within course"))
                .collect();
            let activity = StudentActivity {
                student_id: id,
                events,
                sessions,
                event_weeks: &event_weeks,
                session_weeks: &session_weeks,
                schedule,
                gap_cap,
            };
            let mut row = Vec::with_capacity(specs.len() * weeks_used);
            for spec in &specs {
                for w in 0..weeks_used {
                    row.push((spec.extractor)(&activity, w));
                }
            }
            row
        })
        .collect();

    FeatureCube::new(
        rows.concat(),
        students.iter().map(|(id, _)| id.to_string()).collect(),
        feature_names.to_vec(),
        weeks_used,
        false,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    /// Norm each feature slab was divided by (1 for zero slabs).
    pub scale_factors: Vec<f64>,
    pub zero_variance: Vec<String>,
}

/// Divides every feature's students × weeks slab by its Euclidean norm.
/// All-zero slabs are left untouched and reported.
pub fn unit_norm_scale(cube: &FeatureCube) -> (FeatureCube, ScalingReport) {
    let (ns, nf, nw) = (cube.num_students(), cube.num_features(), cube.weeks);
    let mut norms = vec![0.0f64; nf];
    for s in 0..ns {
        for (f, norm) in norms.iter_mut().enumerate() {
            *norm += cube.series(s, f).iter().map(|v| v * v).sum::<f64>();
        }
    }
    let mut report = ScalingReport {
        scale_factors: Vec::with_capacity(nf),
        zero_variance: Vec::new(),
    };
    for (f, norm) in norms.iter_mut().enumerate() {
        *norm = norm.sqrt();
        if *norm > 0.0 {
            report.scale_factors.push(*norm);
        } else {
            report.scale_factors.push(1.0);
            report.zero_variance.push(cube.feature_names[f].clone());
        }
    }
    let mut values = cube.values.clone();
    for (i, v) in values.iter_mut().enumerate() {
        let f = (i / nw) % nf;
        if norms[f] > 0.0 {
            *v /= norms[f];
        }
    }
    let scaled = FeatureCube {
        values,
        student_ids: cube.student_ids.clone(),
        feature_names: cube.feature_names.clone(),
        weeks: nw,
        scaled: true,
    };
    (scaled, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{sessionize, EventKind::*, DEFAULT_SESSION_TIMEOUT};
    use proptest::prelude::*;

    const WEEK: f64 = 604_800.0;

    fn ev(s: &str, t: f64, kind: EventKind, obj: &str) -> Event {
        Event {
            student_id: s.into(),
            timestamp: t,
            kind,
            object_id: obj.into(),
        }
    }

    fn extract(events: Vec<Event>, schedule: &CourseSchedule, names: &[&str]) -> FeatureCube {
        let log = EventLog::from_events(events).unwrap();
        let sessions: Vec<Vec<Session>> = log
            .by_student()
            .map(|(_, e)| sessionize(e, DEFAULT_SESSION_TIMEOUT))
            .collect();
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        compute_weekly_features(
            &log,
            schedule,
            &sessions,
            schedule.num_weeks.min(4),
            &FeatureRegistry::standard(),
            &names,
            DEFAULT_GAP_CAP,
        )
        .unwrap()
    }

    #[test]
    fn counts_video_clicks() {
        let events = vec![
            ev("a", 10.0, VideoPlay, "v"),
            ev("a", 20.0, VideoPlay, "v"),
            ev("a", 30.0, VideoPlay, "v"),
            ev("a", 40.0, ProblemSubmit, "p"),
        ];
        let cube = extract(events, &CourseSchedule::new(4), &[TOTAL_CLICKS_VIDEO, STUDENT_SPEED]);
        assert_eq!(cube.get(0, 0, 0), 3.0);
        assert_eq!(cube.get(0, 0, 1), 0.0);
        // a single submit has no speed
        assert_eq!(cube.get(0, 1, 0), 0.0);
    }

    #[test]
    fn content_alignment_counts_scheduled_plays_in_week() {
        let mut schedule = CourseSchedule::new(4);
        schedule
            .scheduled_videos
            .insert(1, ["v1", "v2", "v3", "v4"].iter().map(|s| s.to_string()).collect());
        let events = vec![
            ev("a", WEEK + 10.0, VideoPlay, "v1"),
            ev("a", WEEK + 20.0, VideoPlay, "v3"),
            ev("a", WEEK + 30.0, VideoPlay, "v3"),
            // loads do not count, neither do plays in another week
            ev("a", WEEK + 40.0, VideoLoad, "v2"),
            ev("a", 2.0 * WEEK + 5.0, VideoPlay, "v4"),
        ];
        let cube = extract(events, &schedule, &[CONTENT_ALIGNMENT]);
        assert_eq!(cube.get(0, 0, 1), 0.5);
        assert_eq!(cube.get(0, 0, 0), 0.0);
        assert_eq!(cube.get(0, 0, 2), 0.0);
    }

    #[test]
    fn dwell_and_session_features() {
        // session 1: 0..300, session 2: 4000..4100, session 3: 10000 (single event)
        let events = vec![
            ev("a", 0.0, VideoPlay, "v"),
            ev("a", 100.0, ProblemView, "p"),
            ev("a", 250.0, ProblemSubmit, "p"),
            ev("a", 300.0, VideoPause, "v"),
            ev("a", 4000.0, VideoPlay, "v"),
            ev("a", 4100.0, ProblemSubmit, "p"),
            ev("a", 10000.0, ProblemSubmit, "p"),
        ];
        let names = [
            TOTAL_TIME_VIDEO,
            TIME_IN_PROBLEM_SUM,
            TOTAL_TIME_PROBLEMS,
            STUDENT_SPEED,
            TIME_BETWEEN_SESSIONS_STD,
            TOTAL_TIME_SESSIONS,
            TOTAL_CLICKS_VIDEO_LOAD,
        ];
        let cube = extract(events, &CourseSchedule::new(2), &names);
        assert_eq!(cube.get(0, 0, 0), 100.0 + 100.0);
        assert_eq!(cube.get(0, 1, 0), 150.0 + 50.0);
        assert_eq!(cube.get(0, 2, 0), cube.get(0, 1, 0));
        // submits at 250, 4100, 10000
        assert_eq!(cube.get(0, 3, 0), (3850.0 + 5900.0) / 2.0);
        // gaps 3700 and 5900, population std 1100
        assert!((cube.get(0, 4, 0) - 1100.0).abs() < 1e-9);
        assert_eq!(cube.get(0, 5, 0), 300.0 + 100.0);
        assert_eq!(cube.get(0, 6, 0), 0.0);
    }

    #[test]
    fn unknown_feature_is_rejected() {
        let log = EventLog::from_events(vec![ev("a", 1.0, VideoPlay, "v")]).unwrap();
        let err = compute_weekly_features(
            &log,
            &CourseSchedule::new(4),
            &[vec![]],
            4,
            &FeatureRegistry::standard(),
            &["Bogus".to_string()],
            DEFAULT_GAP_CAP,
        )
        .unwrap_err();
        assert!(matches!(err, FeatureError::UnknownFeature(n) if n == "Bogus"));
    }

    #[test]
    fn scaling_examples() {
        let cube = FeatureCube::new(vec![3.0, 4.0], vec!["a".into()], vec!["f".into()], 2, false).unwrap();
        let (scaled, report) = unit_norm_scale(&cube);
        assert!((scaled.get(0, 0, 0) - 0.6).abs() < 1e-15);
        assert!((scaled.get(0, 0, 1) - 0.8).abs() < 1e-15);
        assert!(scaled.scaled);
        assert_eq!(report.scale_factors, vec![5.0]);

        let zero = FeatureCube::new(vec![0.0; 4], vec!["a".into(), "b".into()], vec!["z".into()], 2, false).unwrap();
        let (scaled, report) = unit_norm_scale(&zero);
        assert_eq!(scaled.values(), zero.values());
        assert_eq!(report.zero_variance, vec!["z".to_string()]);

        let two = FeatureCube::new(vec![1.0, 0.0, 0.0, 1.0], vec!["a".into(), "b".into()], vec!["f".into()], 2, false)
            .unwrap();
        let (scaled, _) = unit_norm_scale(&two);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((scaled.get(0, 0, 0) - r).abs() < 1e-15 && scaled.get(0, 0, 1) == 0.0);
        assert!((scaled.get(1, 0, 1) - r).abs() < 1e-15 && scaled.get(1, 0, 0) == 0.0);
    }

    #[test]
    fn noise_features_are_deterministic_and_bounded() {
        let events = vec![ev("a", 1.0, VideoPlay, "v"), ev("b", 1.0, VideoPlay, "v")];
        let log = EventLog::from_events(events).unwrap();
        let sessions: Vec<Vec<Session>> =
            log.by_student().map(|(_, e)| sessionize(e, 1800.0)).collect();
        let reg = FeatureRegistry::standard_with_noise(3);
        assert_eq!(reg.len(), 12);
        let names = vec![noise_feature_name(1), noise_feature_name(2)];
        let run = || {
            compute_weekly_features(&log, &CourseSchedule::new(4), &sessions, 4, &reg, &names, 3600.0).unwrap()
        };
        let cube = run();
        assert_eq!(cube, run());
        assert!(cube.values().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_ne!(cube.series(0, 0), cube.series(0, 1));
        assert_ne!(cube.series(0, 0), cube.series(1, 0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cube = FeatureCube::new(
            vec![0.1, 1.0 / 3.0, 2e-300, 7.0],
            vec!["a".into(), "b".into()],
            vec!["f".into()],
            2,
            true,
        )
        .unwrap();
        cube.save(dir.path(), "stamp-1").unwrap();
        let (back, stamp) = FeatureCube::load(dir.path()).unwrap();
        assert_eq!(back, cube);
        assert_eq!(stamp, "stamp-1");
    }

    fn arb_cube() -> impl Strategy<Value = FeatureCube> {
        (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(ns, nf, nw)| {
            prop::collection::vec(0.0f64..100.0, ns * nf * nw).prop_map(move |v| {
                FeatureCube::new(
                    v,
                    (0..ns).map(|i| format!("s{i}")).collect(),
                    (0..nf).map(|i| format!("f{i}")).collect(),
                    nw,
                    false,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn scaled_slabs_have_unit_norm(cube in arb_cube()) {
            let (scaled, report) = unit_norm_scale(&cube);
            for f in 0..scaled.num_features() {
                if report.zero_variance.contains(&scaled.feature_names[f]) { continue; }
                let norm: f64 = (0..scaled.num_students())
                    .flat_map(|s| scaled.series(s, f).to_vec())
                    .map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn scaling_ignores_positive_factor(cube in arb_cube(), c in 0.01f64..100.0) {
            let f = 0usize;
            let mut values = cube.values().to_vec();
            let nf = cube.num_features();
            for (i, v) in values.iter_mut().enumerate() {
                if (i / cube.weeks) % nf == f { *v *= c; }
            }
            let multiplied = FeatureCube::new(values, cube.student_ids.clone(), cube.feature_names.clone(), cube.weeks, false).unwrap();
            let (a, _) = unit_norm_scale(&cube);
            let (b, _) = unit_norm_scale(&multiplied);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn extraction_is_student_permutation_equivariant(
            rows in prop::collection::vec((0usize..3, 0.0f64..2_000_000.0, 0usize..7, 0usize..3), 1..50)
        ) {
            let mut schedule = CourseSchedule::new(4);
            for w in 0..4 {
                schedule.scheduled_videos.insert(w, (0..3).map(|k| format!("v{k}")).collect());
            }
            let events: Vec<Event> = rows.iter().map(|&(s, t, k, o)| ev(&format!("s{s}"), t, EventKind::ALL[k], &format!("v{o}"))).collect();
            // relabel students s{i} -> t{2-i}, which reverses their sorted order
            let renamed: Vec<Event> = events.iter().map(|e| {
                let i: usize = e.student_id[1..].parse().unwrap();
                Event { student_id: format!("t{}", 2 - i), ..e.clone() }
            }).collect();
            let a = extract(events, &schedule, &STANDARD_FEATURES);
            let b = extract(renamed, &schedule, &STANDARD_FEATURES);
            prop_assert_eq!(a.num_students(), b.num_students());
            let n = a.num_students();
            for s in 0..n {
                let i: usize = a.student_ids[s][1..].parse().unwrap();
                let t = b.student_ids.iter().position(|id| *id == format!("t{}", 2 - i)).unwrap();
                prop_assert_eq!(a.student_slice(s), b.student_slice(t));
            }
        }

        #[test]
        fn counts_are_integers_and_alignment_bounded(
            rows in prop::collection::vec((0usize..3, 0.0f64..2_000_000.0, 0usize..7, 0usize..3), 1..50)
        ) {
            let mut schedule = CourseSchedule::new(4);
            for w in 0..4 {
                schedule.scheduled_videos.insert(w, (0..3).map(|k| format!("v{k}")).collect());
            }
            let events: Vec<Event> = rows.iter().map(|&(s, t, k, o)| ev(&format!("s{s}"), t, EventKind::ALL[k], &format!("v{o}"))).collect();
            let cube = extract(events, &schedule, &[TOTAL_CLICKS_VIDEO, TOTAL_CLICKS_VIDEO_LOAD, CONTENT_ALIGNMENT]);
            for s in 0..cube.num_students() {
                for w in 0..cube.weeks {
                    for f in 0..2 {
                        let v = cube.get(s, f, w);
                        prop_assert!(v >= 0.0 && v.fract() == 0.0);
                    }
                    prop_assert!((0.0..=1.0).contains(&cube.get(s, 2, w)));
                }
            }
        }
    }
}

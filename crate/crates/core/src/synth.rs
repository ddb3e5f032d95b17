//! Synthetic courses with planted behavioral archetypes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{write_events, write_labels, CourseSchedule, Event, EventKind, EventLog, IngestError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid archetype spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A planted behavior pattern. Rate vectors hold one value per week; a
/// single value applies to every week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchetypeSpec {
    pub name: String,
    pub fraction: f64,
    /// Expected video events per week.
    pub video_rate: Vec<f64>,
    /// Expected problem events per week.
    pub problem_rate: Vec<f64>,
    /// Expected sessions per week.
    pub session_rate: Vec<f64>,
    /// Probability that a video event targets the current week's schedule.
    pub adherence: Vec<f64>,
    pub pass_probability: f64,
}

impl ArchetypeSpec {
    fn at(values: &[f64], week: usize) -> f64 {
        if values.len() == 1 {
            values[0]
        } else {
            values[week]
        }
    }

    fn validate(&self, n_weeks: usize) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(format!("{}: {m}", self.name)));
        if !(0.0..=1.0).contains(&self.fraction) {
            return bad(format!("fraction {} outside [0,1]", self.fraction));
        }
        if !(0.0..=1.0).contains(&self.pass_probability) {
            return bad(format!("pass probability {} outside [0,1]", self.pass_probability));
        }
        for (field, values) in [
            ("video_rate", &self.video_rate),
            ("problem_rate", &self.problem_rate),
            ("session_rate", &self.session_rate),
            ("adherence", &self.adherence),
        ] {
            if values.len() != 1 && values.len() != n_weeks {
                return bad(format!("{field} has {} entries for {n_weeks} weeks", values.len()));
            }
            if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("{field} must be finite and non-negative"));
            }
            if field == "adherence" && values.iter().any(|v| *v > 1.0) {
                return bad("adherence must lie in [0,1]".into());
            }
        }
        Ok(())
    }
}

/// Three archetypes: engaged-regular, cramming-quiz-heavy and disengaged,
/// passing with probability 0.85, 0.5 and 0.15.
pub fn default_archetypes(n_weeks: usize) -> Vec<ArchetypeSpec> {
    let rising: Vec<f64> = (0..n_weeks.max(1))
        .map(|w| 45.0 + 30.0 * w as f64 / (n_weeks.max(2) - 1) as f64)
        .collect();
    vec![
        ArchetypeSpec {
            name: "engaged-regular".into(),
            fraction: 0.45,
            video_rate: vec![80.0],
            problem_rate: vec![25.0],
            session_rate: vec![8.0],
            adherence: vec![0.9],
            pass_probability: 0.85,
        },
        ArchetypeSpec {
            name: "cramming-quiz-heavy".into(),
            fraction: 0.15,
            video_rate: vec![15.0],
            problem_rate: rising,
            session_rate: vec![4.0],
            adherence: vec![0.5],
            pass_probability: 0.5,
        },
        ArchetypeSpec {
            name: "disengaged".into(),
            fraction: 0.40,
            video_rate: vec![3.0],
            problem_rate: vec![3.0],
            session_rate: vec![0.2],
            adherence: vec![0.2],
            pass_probability: 0.15,
        },
    ]
}

pub const VIDEOS_PER_WEEK: usize = 4;
const PROBLEMS_PER_WEEK: usize = 5;
/// A session lasts this many seconds per event it holds.
const EVENT_SPACING: f64 = 60.0;

const VIDEO_KINDS: [(EventKind, f64); 5] = [
    (EventKind::VideoLoad, 0.25),
    (EventKind::VideoPlay, 0.35),
    (EventKind::VideoPause, 0.2),
    (EventKind::VideoSeek, 0.1),
    (EventKind::VideoStop, 0.1),
];

#[derive(Debug, Clone)]
pub struct SyntheticCourse {
    pub log: EventLog,
    pub schedule: CourseSchedule,
    pub labels: BTreeMap<String, bool>,
    /// Student id to index into `archetype_names`.
    pub archetypes: BTreeMap<String, usize>,
    pub archetype_names: Vec<String>,
    pub seed: u64,
}

pub fn student_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Counts per archetype by largest-remainder rounding; ties go to the
/// earlier archetype.
pub fn largest_remainder(fractions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive finite rate").sample(rng) as usize
}

fn pick_video_kind(rng: &mut ChaCha8Rng) -> EventKind {
    let mut u: f64 = rng.random();
    for (kind, p) in VIDEO_KINDS {
        if u < p {
            return kind;
        }
        u -= p;
    }
    EventKind::VideoStop
}

fn video_id(week: usize, k: usize) -> String {
    format!("v{week}_{k}")
}

fn simulate_student(
    id: &str,
    spec: &ArchetypeSpec,
    schedule: &CourseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Vec<Event>, bool) {
    let n_weeks = schedule.num_weeks;
    let mut events = Vec::new();
    for week in 0..n_weeks {
        let n_video = poisson(ArchetypeSpec::at(&spec.video_rate, week), rng);
        let n_problem = poisson(ArchetypeSpec::at(&spec.problem_rate, week), rng);
        let n_sessions = poisson(ArchetypeSpec::at(&spec.session_rate, week), rng);
        if n_video + n_problem == 0 {
            continue;
        }
        let n_sessions = n_sessions.max(1);
        let adherence = ArchetypeSpec::at(&spec.adherence, week);

        // (session, kind, object) first, timestamps once session sizes are known
        let mut drafts = Vec::with_capacity(n_video + n_problem);
        for _ in 0..n_video {
            let kind = pick_video_kind(rng);
            let on_schedule = n_weeks == 1 || rng.random::<f64>() < adherence;
            let target_week = if on_schedule {
                week
            } else {
                let other = rng.random_range(0..n_weeks - 1);
                if other >= week {
                    other + 1
                } else {
                    other
                }
            };
            let object = video_id(target_week, rng.random_range(0..VIDEOS_PER_WEEK));
            drafts.push((rng.random_range(0..n_sessions), kind, object));
        }
        for _ in 0..n_problem {
            let kind = if rng.random::<bool>() {
                EventKind::ProblemView
            } else {
                EventKind::ProblemSubmit
            };
            let object = format!("p{week}_{}", rng.random_range(0..PROBLEMS_PER_WEEK));
            drafts.push((rng.random_range(0..n_sessions), kind, object));
        }

        // one session per equal slot of the week, lasting EVENT_SPACING per event
        let mut sizes = vec![0usize; n_sessions];
        drafts.iter().for_each(|d| sizes[d.0] += 1);
        let slot = schedule.week_length / n_sessions as f64;
        let week_start = week as f64 * schedule.week_length;
        let spans: Vec<f64> = sizes.iter().map(|&k| (k as f64 * EVENT_SPACING).min(slot)).collect();
        let starts: Vec<f64> = spans
            .iter()
            .enumerate()
            .map(|(k, span)| week_start + k as f64 * slot + rng.random::<f64>() * (slot - span))
            .collect();
        for (session, kind, object_id) in drafts {
            events.push(Event {
                student_id: id.to_string(),
                timestamp: starts[session] + rng.random::<f64>() * spans[session],
                kind,
                object_id,
            });
        }
    }
    if events.is_empty() {
        // keeps the student in the log with one session and no activity
        events.push(Event {
            student_id: id.to_string(),
            timestamp: 0.0,
            kind: EventKind::ProblemView,
            object_id: "placeholder".into(),
        });
    }
    let passed = rng.random::<f64>() < spec.pass_probability;
    (events, passed)
}

/// Deterministic per seed. Each student draws from its own ChaCha stream,
/// so the result does not depend on the thread count.
pub fn generate_synthetic_course(
    archetypes: &[ArchetypeSpec],
    n_students: usize,
    n_weeks: usize,
    seed: u64,
) -> Result<SyntheticCourse, SynthError> {
    if archetypes.is_empty() {
        return Err(SynthError::InvalidSpec("no archetypes".into()));
    }
    if n_students < 10 {
        return Err(SynthError::InvalidSpec(format!("need at least 10 students, got {n_students}")));
    }
    if n_weeks == 0 {
        return Err(SynthError::InvalidSpec("need at least one week".into()));
    }
    for a in archetypes {
        a.validate(n_weeks)?;
    }
    let total: f64 = archetypes.iter().map(|a| a.fraction).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidSpec(format!("fractions sum to {total}, not 1")));
    }

    let mut schedule = CourseSchedule::new(n_weeks);
    for w in 0..n_weeks {
        schedule
            .scheduled_videos
            .insert(w, (0..VIDEOS_PER_WEEK).map(|k| video_id(w, k)).collect());
    }

    let counts = largest_remainder(&archetypes.iter().map(|a| a.fraction).collect::<Vec<_>>(), n_students);
    let mut plan: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| std::iter::repeat_n(a, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan.shuffle(&mut rng);

    let students: Vec<(Vec<Event>, bool)> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut student_rng = ChaCha8Rng::seed_from_u64(seed);
            student_rng.set_stream(i as u64 + 1);
            simulate_student(&student_id(i), &archetypes[a], &schedule, &mut student_rng)
        })
        .collect();

    let mut labels = BTreeMap::new();
    let mut assigned = BTreeMap::new();
    let mut events = Vec::new();
    for (i, ((student_events, passed), &a)) in students.into_iter().zip(&plan).enumerate() {
        labels.insert(student_id(i), passed);
        assigned.insert(student_id(i), a);
        events.extend(student_events);
    }
    Ok(SyntheticCourse {
        log: EventLog::from_events(events)?,
        schedule,
        labels,
        archetypes: assigned,
        archetype_names: archetypes.iter().map(|a| a.name.clone()).collect(),
        seed,
    })
}

pub const EVENTS_FILE: &str = "events.csv";
pub const SCHEDULE_FILE: &str = "schedule.toml";
pub const LABELS_FILE: &str = "labels.csv";
pub const ARCHETYPES_FILE: &str = "archetypes.csv";

impl SyntheticCourse {
    pub fn archetypes_csv(&self) -> String {
        let mut out = format!("# seed={}\nstudent_id,archetype,archetype_index\n", self.seed);
        for (id, &a) in &self.archetypes {
            out.push_str(&format!("{id},{},{a}\n", self.archetype_names[a]));
        }
        out
    }

    /// Writes the event CSV, schedule, labels and plants into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: PathBuf| move |source| SynthError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let events = dir.join(EVENTS_FILE);
        write_events(&self.log, fs::File::create(&events).map_err(io(events.clone()))?)?;
        let labels = dir.join(LABELS_FILE);
        write_labels(&self.labels, fs::File::create(&labels).map_err(io(labels.clone()))?)?;
        let schedule = dir.join(SCHEDULE_FILE);
        fs::write(&schedule, self.schedule.to_text()).map_err(io(schedule.clone()))?;
        let plants = dir.join(ARCHETYPES_FILE);
        fs::write(&plants, self.archetypes_csv()).map_err(io(plants.clone()))
    }
}

/// Reads `archetypes.csv` into student id → archetype index.
pub fn read_archetypes(path: &Path) -> Result<BTreeMap<String, usize>, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let index = fields
            .get(2)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SynthError::InvalidSpec(format!("bad archetype row {line:?}")))?;
        out.insert(fields[0].to_string(), index);
    }
    Ok(out)
}

//! Clickstream ingestion: event CSV parsing, course calendar, week bucketing
//! and study-session segmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds in one course week.
pub const DEFAULT_WEEK_LENGTH: f64 = 604_800.0;
/// Inactivity gap (seconds) that closes a study session.
pub const DEFAULT_SESSION_TIMEOUT: f64 = 1_800.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error("event log contains no valid rows")]
    EmptyLog,
    #[error("timestamp {timestamp} outside course range [0, {end})")]
    OutOfRange { timestamp: f64, end: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    VideoLoad,
    VideoPlay,
    VideoPause,
    VideoSeek,
    VideoStop,
    ProblemView,
    ProblemSubmit,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::VideoLoad,
        EventKind::VideoPlay,
        EventKind::VideoPause,
        EventKind::VideoSeek,
        EventKind::VideoStop,
        EventKind::ProblemView,
        EventKind::ProblemSubmit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::VideoLoad => "VideoLoad",
            EventKind::VideoPlay => "VideoPlay",
            EventKind::VideoPause => "VideoPause",
            EventKind::VideoSeek => "VideoSeek",
            EventKind::VideoStop => "VideoStop",
            EventKind::ProblemView => "ProblemView",
            EventKind::ProblemSubmit => "ProblemSubmit",
        }
    }

    pub fn is_video(self) -> bool {
        matches!(
            self,
            EventKind::VideoLoad
                | EventKind::VideoPlay
                | EventKind::VideoPause
                | EventKind::VideoSeek
                | EventKind::VideoStop
        )
    }

    pub fn is_problem(self) -> bool {
        matches!(self, EventKind::ProblemView | EventKind::ProblemSubmit)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub student_id: String,
    /// Seconds since course start.
    pub timestamp: f64,
    pub kind: EventKind,
    pub object_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CourseSchedule {
    pub num_weeks: usize,
    pub week_length: f64,
    /// Week index to the videos scheduled for that week.
    pub scheduled_videos: BTreeMap<usize, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    num_weeks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    week_length: Option<f64>,
    #[serde(default)]
    videos: BTreeMap<String, Vec<String>>,
}

impl CourseSchedule {
    pub fn new(num_weeks: usize) -> Self {
        CourseSchedule {
            num_weeks,
            week_length: DEFAULT_WEEK_LENGTH,
            scheduled_videos: BTreeMap::new(),
        }
    }

    /// End of the course in seconds (exclusive).
    pub fn course_end(&self) -> f64 {
        self.num_weeks as f64 * self.week_length
    }

    pub fn videos_for_week(&self, week: usize) -> Option<&BTreeSet<String>> {
        self.scheduled_videos.get(&week)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.num_weeks == 0 {
            return Err(IngestError::InvalidSchedule("num_weeks must be positive".into()));
        }
        if !(self.week_length.is_finite() && self.week_length > 0.0) {
            return Err(IngestError::InvalidSchedule("week_length must be positive".into()));
        }
        if let Some((&w, _)) = self.scheduled_videos.iter().find(|(&w, _)| w >= self.num_weeks) {
            return Err(IngestError::InvalidSchedule(format!(
                "scheduled week {w} is not below num_weeks {}",
                self.num_weeks
            )));
        }
        Ok(())
    }

    /// Parses the key-value schedule format:
    ///
    /// ```toml
    /// num_weeks = 10
    /// week_length = 604800   # optional
    /// [videos]
    /// 0 = ["v0_0", "v0_1"]
    /// ```
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let file: ScheduleFile =
            toml::from_str(text).map_err(|e| IngestError::InvalidSchedule(e.to_string()))?;
        let mut scheduled_videos = BTreeMap::new();
        for (key, videos) in file.videos {
            let week: usize = key
                .parse()
                .map_err(|_| IngestError::InvalidSchedule(format!("bad week key {key:?}")))?;
            scheduled_videos.insert(week, videos.into_iter().collect());
        }
        let schedule = CourseSchedule {
            num_weeks: file.num_weeks,
            week_length: file.week_length.unwrap_or(DEFAULT_WEEK_LENGTH),
            scheduled_videos,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn to_text(&self) -> String {
        let file = ScheduleFile {
            num_weeks: self.num_weeks,
            week_length: Some(self.week_length),
            videos: self
                .scheduled_videos
                .iter()
                .map(|(w, v)| (w.to_string(), v.iter().cloned().collect()))
                .collect(),
        };
        toml::to_string(&file).expect("schedule serializes")
    }
}

/// Returns the 0-based course week containing `timestamp`.
pub fn assign_week(timestamp: f64, schedule: &CourseSchedule) -> Result<usize, IngestError> {
    let end = schedule.course_end();
    if !(timestamp >= 0.0 && timestamp < end) {
        return Err(IngestError::OutOfRange { timestamp, end });
    }
    let week = (timestamp / schedule.week_length).floor() as usize;
    // guards against rounding right below the course end
    Ok(week.min(schedule.num_weeks - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub student_id: String,
    pub start: f64,
    pub end: f64,
    /// Indices into the student's event slice.
    pub event_indices: Vec<usize>,
}

/// Splits one student's time-sorted events into sessions. A new session starts
/// whenever the gap to the previous event exceeds `session_timeout`.
pub fn sessionize(events: &[Event], session_timeout: f64) -> Vec<Session> {
    let mut sessions: Vec<Session> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        match sessions.last_mut() {
            Some(s) if e.timestamp - s.end <= session_timeout => {
                s.end = e.timestamp;
                s.event_indices.push(i);
            }
            _ => sessions.push(Session {
                student_id: e.student_id.clone(),
                start: e.timestamp,
                end: e.timestamp,
                event_indices: vec![i],
            }),
        }
    }
    sessions
}

/// Events sorted by `(student_id, timestamp)` with a per-student index.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
    students: Vec<(String, Range<usize>)>,
    index: HashMap<String, usize>,
    /// Rows dropped because they fell past the course end.
    pub dropped: usize,
}

impl EventLog {
    /// Builds a log from unsorted events. Ties keep their input order.
    pub fn from_events(mut events: Vec<Event>) -> Result<Self, IngestError> {
        if events.is_empty() {
            return Err(IngestError::EmptyLog);
        }
        events.sort_by(|a, b| {
            a.student_id
                .cmp(&b.student_id)
                .then(a.timestamp.total_cmp(&b.timestamp))
        });
        let mut students: Vec<(String, Range<usize>)> = Vec::new();
        for (i, e) in events.iter().enumerate() {
            match students.last_mut() {
                Some((id, range)) if *id == e.student_id => range.end = i + 1,
                _ => students.push((e.student_id.clone(), i..i + 1)),
            }
        }
        let index = students
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i))
            .collect();
        Ok(EventLog {
            events,
            students,
            index,
            dropped: 0,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    /// Student ids in sorted order.
    pub fn student_ids(&self) -> impl Iterator<Item = &str> {
        self.students.iter().map(|(id, _)| id.as_str())
    }

    pub fn student_events(&self, id: &str) -> Option<&[Event]> {
        self.index
            .get(id)
            .map(|&i| &self.events[self.students[i].1.clone()])
    }

    /// Iterates `(student_id, events)` in sorted student order.
    pub fn by_student(&self) -> impl Iterator<Item = (&str, &[Event])> {
        self.students
            .iter()
            .map(|(id, r)| (id.as_str(), &self.events[r.clone()]))
    }
}

/// Parses the event CSV (`student_id,timestamp,kind,object_id`). Rows at or
/// past the course end are dropped and counted in [`EventLog::dropped`].
pub fn parse_events<R: Read>(source: R, schedule: &CourseSchedule) -> Result<EventLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let end = schedule.course_end();
    let mut events = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| IngestError::MalformedRow { row, reason };
        if record.len() < 4 {
            return Err(malformed(format!("expected 4 columns, found {}", record.len())));
        }
        let student_id = record[0].to_string();
        if student_id.is_empty() {
            return Err(malformed("empty student_id".into()));
        }
        let timestamp: f64 = record[1]
            .parse()
            .map_err(|_| malformed(format!("bad timestamp {:?}", &record[1])))?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(malformed(format!("timestamp {timestamp} must be finite and non-negative")));
        }
        let kind: EventKind = record[2].parse().map_err(malformed)?;
        if timestamp >= end {
            dropped += 1;
            continue;
        }
        events.push(Event {
            student_id,
            timestamp,
            kind,
            object_id: record[3].to_string(),
        });
    }
    let mut log = EventLog::from_events(events)?;
    log.dropped = dropped;
    Ok(log)
}

/// Writes the log in the event CSV format `parse_events` reads.
pub fn write_events<W: Write>(log: &EventLog, sink: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["student_id", "timestamp", "kind", "object_id"])?;
    for e in log.events() {
        w.write_record([
            e.student_id.as_str(),
            &e.timestamp.to_string(),
            e.kind.as_str(),
            e.object_id.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `student_id,passed` with `passed ∈ {0,1}`.
pub fn parse_labels<R: Read>(source: R) -> Result<BTreeMap<String, bool>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let mut labels = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 2 {
            return Err(IngestError::MalformedRow {
                row,
                reason: "expected student_id,passed".into(),
            });
        }
        let passed = match &record[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(IngestError::MalformedRow {
                    row,
                    reason: format!("passed must be 0 or 1, got {other:?}"),
                })
            }
        };
        labels.insert(record[0].to_string(), passed);
    }
    Ok(labels)
}

pub fn write_labels<W: Write>(labels: &BTreeMap<String, bool>, sink: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["student_id", "passed"])?;
    for (id, &passed) in labels {
        w.write_record([id.as_str(), if passed { "1" } else { "0" }])?;
    }
    w.flush()?;
    Ok(())
}

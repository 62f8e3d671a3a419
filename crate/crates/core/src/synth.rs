//! Deterministic synthetic export bundles with a planted dropout signal.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, course, session, user index, purpose)`, so any session can be
//! generated independently of the others and in any order.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{
    ClickEvent, CourseMetadata, ExportBundle, ASSIGNMENT_SUBMISSIONS, CLICKSTREAM, COURSE_METADATA,
    DEMOGRAPHIC_SURVEY, FORUM_COMMENTS, FORUM_POSTS, GRADES, SECONDS_PER_WEEK, TABLE_HEADERS,
};
use crate::catalog::MANIFEST_HEADER;

/// Share of early joiners when there is no planted signal.
const EARLY_JOIN_RATE: f64 = 0.5;
const BASE_TIMESTAMP: i64 = 1_388_534_400;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid course spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseSpec {
    pub course_id: String,
    pub n_sessions: u32,
    pub users_per_session: u32,
    pub weeks: u32,
    pub seed: u64,
    /// 0 = activity carries no information about dropout, 1 = strongest.
    pub signal_strength: f64,
    /// Expected share of users active in the final week.
    pub completion_rate: f64,
    /// Prefix of generated user ids.
    pub user_prefix: String,
}

impl CourseSpec {
    pub fn new(course_id: impl Into<String>, seed: u64) -> Self {
        CourseSpec {
            course_id: course_id.into(),
            n_sessions: 3,
            users_per_session: 100,
            weeks: 6,
            seed,
            signal_strength: 0.8,
            completion_rate: 0.4,
            user_prefix: "u".into(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.course_id.is_empty()
            || !self
                .course_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad("course_id must be non-empty [A-Za-z0-9_-]");
        }
        if self.n_sessions == 0 || self.n_sessions > 999 {
            return bad("n_sessions must be in 1..=999");
        }
        if self.users_per_session < 10 {
            return bad("users_per_session must be at least 10");
        }
        if self.weeks < 2 {
            return bad("weeks must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.completion_rate) {
            return bad("completion_rate must be in [0, 1]");
        }
        if self
            .user_prefix
            .contains(|c: char| c == ',' || c == '"' || c.is_whitespace())
        {
            return bad("user_prefix may not contain commas, quotes or whitespace");
        }
        Ok(())
    }

    /// Parses the `key = value` spec file format. Unknown keys are errors;
    /// `completion_rate` and `user_prefix` are optional.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let ini =
            ini::Ini::load_from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let props = ini.general_section();
        for (k, _) in props.iter() {
            if ![
                "course_id",
                "n_sessions",
                "users_per_session",
                "weeks",
                "seed",
                "signal_strength",
                "completion_rate",
                "user_prefix",
            ]
            .contains(&k)
            {
                return Err(SynthError::InvalidSpec(format!("unknown key `{k}`")));
            }
        }
        fn req<T: std::str::FromStr>(props: &ini::Properties, key: &str) -> Result<T, SynthError> {
            props
                .get(key)
                .ok_or_else(|| SynthError::InvalidSpec(format!("missing `{key}`")))?
                .trim()
                .parse()
                .map_err(|_| SynthError::InvalidSpec(format!("bad value for `{key}`")))
        }
        let mut spec = CourseSpec {
            course_id: req(props, "course_id")?,
            n_sessions: req(props, "n_sessions")?,
            users_per_session: req(props, "users_per_session")?,
            weeks: req(props, "weeks")?,
            seed: req(props, "seed")?,
            signal_strength: req(props, "signal_strength")?,
            completion_rate: 0.4,
            user_prefix: "u".into(),
        };
        if props.contains_key("completion_rate") {
            spec.completion_rate = req(props, "completion_rate")?;
        }
        if let Some(p) = props.get("user_prefix") {
            spec.user_prefix = p.trim().to_string();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn render(&self) -> String {
        format!(
            "course_id = {}\nn_sessions = {}\nusers_per_session = {}\nweeks = {}\nseed = {}\n\
signal_strength = {}\ncompletion_rate = {}\nuser_prefix = {}\n",
            self.course_id,
            self.n_sessions,
            self.users_per_session,
            self.weeks,
            self.seed,
            self.signal_strength,
            self.completion_rate,
            self.user_prefix
        )
    }

    pub fn session_ids(&self) -> Vec<String> {
        (1..=self.n_sessions).map(|i| format!("{i:03}")).collect()
    }
}

/// In-memory contents of one generated bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSession {
    pub course_id: String,
    pub session_id: String,
    pub weeks: u32,
    pub files: BTreeMap<&'static str, Vec<u8>>,
}

impl GeneratedSession {
    pub fn write_to(&self, dir: &Path) -> Result<ExportBundle, SynthError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(ExportBundle::new(dir))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in &self.files {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(crate::digest::sha256_hex(bytes).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn keyed_rng(spec: &CourseSpec, session: &str, user: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(spec.seed.to_le_bytes());
    for part in [spec.course_id.as_str(), session, purpose] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update(user.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

struct SimUser {
    id: String,
    engagement: f64,
    /// Events per week, index 0 = week 1.
    weekly: Vec<u32>,
}

fn session_start(spec: &CourseSpec, ordinal: u32) -> i64 {
    BASE_TIMESTAMP + (ordinal as i64 - 1) * (spec.weeks as i64 + 8) * SECONDS_PER_WEEK
}

fn simulate_user(spec: &CourseSpec, session: &str, idx: u64) -> SimUser {
    let mut rng = keyed_rng(spec, session, idx, "user");
    let id_bytes: [u8; 6] = rng.random();
    let id = format!("{}{}", spec.user_prefix, hex::encode(id_bytes));

    let s = spec.signal_strength;
    let r = spec.completion_rate;
    let weeks = spec.weeks;
    let e: f64 = rng.random();

    let engaged = |share: f64| if e > 1.0 - share { 1.0 } else { 0.0 };
    let p_complete = (1.0 - s) * r + s * engaged(r);
    let complete = rng.random::<f64>() < p_complete;
    let p_early = (1.0 - s) * EARLY_JOIN_RATE + s * engaged(EARLY_JOIN_RATE);
    let early = rng.random::<f64>() < p_early;

    let join = if early {
        1
    } else {
        rng.random_range(2..=(weeks / 2).max(2))
    };
    let u: f64 = rng.random();
    let stop = if complete {
        weeks
    } else {
        let x = s * e + (1.0 - s) * u;
        (1 + (x * (weeks - 1) as f64).floor() as u32).clamp(1, weeks - 1)
    };
    let last = join.max(stop);

    let poisson = Poisson::new(2.0 + 10.0 * e).expect("positive rate");
    let mut weekly = vec![0u32; weeks as usize];
    for week in join..=last {
        let mut n = poisson.sample(&mut rng) as u32;
        if week == join || week == last {
            n = n.max(1);
        }
        weekly[week as usize - 1] = n;
    }
    SimUser {
        id,
        engagement: e,
        weekly,
    }
}

fn csv_bytes(header: &str, rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header.split(',')).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn header(name: &str) -> &'static str {
    TABLE_HEADERS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, h)| *h)
        .expect("known table")
}

const ACTIONS: [&str; 4] = ["pageview", "video_play", "quiz_attempt", "forum_view"];
const AGE_BANDS: [&str; 5] = ["18-24", "25-34", "35-44", "45-54", "55+"];
const COUNTRIES: [&str; 6] = ["US", "IN", "CN", "BR", "GB", "DE"];
const EDUCATION: [&str; 4] = ["secondary", "bachelor", "master", "doctorate"];

fn generate_session(spec: &CourseSpec, ordinal: u32) -> GeneratedSession {
    let session = format!("{ordinal:03}");
    let weeks = spec.weeks;
    let start = session_start(spec, ordinal);
    let users: Vec<SimUser> = (0..spec.users_per_session as u64)
        .map(|i| simulate_user(spec, &session, i))
        .collect();

    let mut clicks = Vec::new();
    let mut posts = Vec::new();
    let mut submissions = Vec::new();
    let mut grades = Vec::new();
    let mut survey = Vec::new();

    for (idx, user) in users.iter().enumerate() {
        let mut rng = keyed_rng(spec, &session, idx as u64, "activity");
        for (w, &n) in user.weekly.iter().enumerate() {
            let week_start = start + w as i64 * SECONDS_PER_WEEK;
            for i in 0..n as i64 {
                let lecture: u32 = rng.random_range(1..=20);
                clicks.push(ClickEvent {
                    timestamp: week_start + (i + 1) * SECONDS_PER_WEEK / (n as i64 + 1),
                    user_id: user.id.clone(),
                    url: format!("/{}/lecture/{lecture}", spec.course_id),
                    action: ACTIONS[rng.random_range(0..ACTIONS.len())].to_string(),
                });
            }
            if n == 0 {
                continue;
            }
            let week = w as u32 + 1;
            if rng.random::<f64>() < 0.1 + 0.3 * user.engagement {
                let offset: i64 = rng.random_range(0..3600);
                posts.push(vec![
                    format!("{session}-p{idx:05}-{week}"),
                    format!("t{}", rng.random_range(1..=25u32)),
                    user.id.clone(),
                    (week_start + SECONDS_PER_WEEK / 2 + offset).to_string(),
                ]);
            }
            if rng.random::<f64>() < 0.3 + 0.5 * user.engagement {
                let offset: i64 = rng.random_range(0..3600);
                let score: f64 = 40.0 + 60.0 * user.engagement * rng.random::<f64>();
                submissions.push(vec![
                    format!("{session}-s{idx:05}-{week}"),
                    user.id.clone(),
                    format!("a{week}"),
                    (week_start + SECONDS_PER_WEEK * 5 / 7 + offset).to_string(),
                ]);
                grades.push(vec![
                    user.id.clone(),
                    format!("a{week}"),
                    format!("{score:.1}"),
                ]);
            }
        }
        survey.push(vec![
            user.id.clone(),
            AGE_BANDS[rng.random_range(0..AGE_BANDS.len())].to_string(),
            COUNTRIES[rng.random_range(0..COUNTRIES.len())].to_string(),
            EDUCATION[rng.random_range(0..EDUCATION.len())].to_string(),
        ]);
    }

    posts.sort();
    let mut comments = Vec::new();
    if !posts.is_empty() {
        for (idx, user) in users.iter().enumerate() {
            let mut rng = keyed_rng(spec, &session, idx as u64, "comments");
            for (w, &n) in user.weekly.iter().enumerate() {
                if n == 0 || rng.random::<f64>() >= 0.2 * user.engagement {
                    continue;
                }
                let post = &posts[rng.random_range(0..posts.len())];
                let ts = start + w as i64 * SECONDS_PER_WEEK + SECONDS_PER_WEEK * 6 / 7;
                comments.push(vec![
                    format!("{session}-c{idx:05}-{}", w + 1),
                    post[0].clone(),
                    user.id.clone(),
                    ts.to_string(),
                ]);
            }
        }
    }

    clicks.sort_by(|a, b| {
        (a.timestamp, &a.user_id, &a.url, &a.action).cmp(&(
            b.timestamp,
            &b.user_id,
            &b.url,
            &b.action,
        ))
    });
    let mut clickstream = Vec::new();
    for ev in &clicks {
        clickstream.extend_from_slice(serde_json::to_string(ev).expect("plain struct").as_bytes());
        clickstream.push(b'\n');
    }
    submissions.sort();
    grades.sort();
    comments.sort();
    survey.sort();

    let metadata = CourseMetadata {
        course_id: spec.course_id.clone(),
        session_id: session.clone(),
        weeks,
        start_timestamp: start,
    };

    let mut files = BTreeMap::new();
    files.insert(CLICKSTREAM, clickstream);
    files.insert(FORUM_POSTS, csv_bytes(header(FORUM_POSTS), &posts));
    files.insert(FORUM_COMMENTS, csv_bytes(header(FORUM_COMMENTS), &comments));
    files.insert(
        ASSIGNMENT_SUBMISSIONS,
        csv_bytes(header(ASSIGNMENT_SUBMISSIONS), &submissions),
    );
    files.insert(GRADES, csv_bytes(header(GRADES), &grades));
    files.insert(
        DEMOGRAPHIC_SURVEY,
        csv_bytes(header(DEMOGRAPHIC_SURVEY), &survey),
    );
    files.insert(COURSE_METADATA, metadata.render().into_bytes());

    GeneratedSession {
        course_id: spec.course_id.clone(),
        session_id: session,
        weeks,
        files,
    }
}

/// Generates every session of a course. Output bytes are a pure function of
/// the spec.
pub fn generate_course(spec: &CourseSpec) -> Result<Vec<GeneratedSession>, SynthError> {
    spec.validate()?;
    Ok((1..=spec.n_sessions)
        .map(|ordinal| generate_session(spec, ordinal))
        .collect())
}

/// Generates a single session (1-based ordinal) without touching the others.
pub fn generate_session_by_ordinal(
    spec: &CourseSpec,
    ordinal: u32,
) -> Result<GeneratedSession, SynthError> {
    spec.validate()?;
    if ordinal == 0 || ordinal > spec.n_sessions {
        return Err(SynthError::InvalidSpec(format!(
            "session ordinal {ordinal} outside 1..={}",
            spec.n_sessions
        )));
    }
    Ok(generate_session(spec, ordinal))
}

/// Writes a course under `<out>/<course>/<session>/` and merges its rows into
/// `<out>/manifest.csv`, replacing earlier rows for the same course.
pub fn write_course(spec: &CourseSpec, out: &Path) -> Result<Vec<ExportBundle>, SynthError> {
    let sessions = generate_course(spec)?;
    let mut bundles = Vec::new();
    for s in &sessions {
        bundles.push(s.write_to(&out.join(&s.course_id).join(&s.session_id))?);
    }

    let manifest = out.join("manifest.csv");
    let mut rows: Vec<String> = match fs::read_to_string(&manifest) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .filter(|l| l.split(',').next() != Some(spec.course_id.as_str()))
            .map(str::to_string)
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&manifest)(e)),
    };
    for s in &sessions {
        rows.push(format!(
            "{},{},{},{}/{}",
            s.course_id, s.session_id, s.weeks, s.course_id, s.session_id
        ));
    }
    rows.sort();
    let mut text = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    Ok(bundles)
}

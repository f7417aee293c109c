//! Parsing of raw result, competition and sanction files into validated records.
//!
//! All inputs are comma-delimited UTF-8 with a header row; column layouts are listed in
//! `docs/data-format.md`. A malformed row never aborts a load: it is skipped and counted
//! under a reason key, so `accepted + skipped == input rows` always holds. Only a missing
//! required column is fatal.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use chrono::{NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Earliest accepted performance date.
pub const MIN_DATE: NaiveDate = match NaiveDate::from_ymd_opt(1990, 1, 1) {
    Some(d) => d,
    None => panic!("invalid constant date"),
};

/// Tailwinds strictly above this value (m/s) make a mark wind-illegal.
pub const WIND_LEGAL_LIMIT: f64 = 2.0;

/// Column order of a results file.
pub const RESULT_COLUMNS: [&str; 12] = [
    "athlete_id",
    "athlete_name",
    "mark",
    "date",
    "wind",
    "reaction_time",
    "round",
    "rank",
    "competition_id",
    "event_code",
    "country",
    "venue",
];

/// Column order of a sanctions file. `note` is optional on input.
pub const SANCTION_COLUMNS: [&str; 4] = ["athlete_id", "start", "end", "note"];

/// Column order of a competitions file. `category` is optional on input.
pub const COMPETITION_COLUMNS: [&str; 6] =
    ["competition_id", "name", "date", "country", "venue", "category"];

/// Fatal load errors.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column(s): {0}")]
    MissingColumns(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-row problems. A row with one of these is skipped and counted.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowError {
    #[error("unparseable mark {0:?}")]
    MarkUnparseable(String),
    #[error("unparseable date {0:?}")]
    DateUnparseable(String),
    #[error("date {0} outside accepted range")]
    DateOutOfRange(NaiveDate),
    #[error("required field {0} is empty")]
    MissingField(&'static str),
    #[error("sanction ends ({end}) before it starts ({start})")]
    InvertedInterval { start: NaiveDate, end: NaiveDate },
    #[error("malformed row: {0}")]
    Malformed(String),
}

impl RowError {
    /// Stable key used when counting skipped rows.
    pub fn reason(&self) -> &'static str {
        match self {
            RowError::MarkUnparseable(_) => "mark_unparseable",
            RowError::DateUnparseable(_) => "date_unparseable",
            RowError::DateOutOfRange(_) => "date_out_of_range",
            RowError::MissingField(_) => "missing_field",
            RowError::InvertedInterval { .. } => "inverted_interval",
            RowError::Malformed(_) => "malformed_row",
        }
    }
}

/// Non-fatal issues; the row is kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowWarning {
    WindUnparseable,
    ReactionTimeUnparseable,
    UnknownCountry,
    UnknownRound,
}

/// A performance time in integer centiseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Centis(pub u32);

impl Centis {
    pub fn seconds(self) -> f64 {
        f64::from(self.0) / 100.0
    }

    /// Nearest centisecond to `seconds`; `None` for non-positive or non-finite input.
    pub fn from_seconds(seconds: f64) -> Option<Centis> {
        if !seconds.is_finite() || seconds <= 0.0 {
            return None;
        }
        let cs = (seconds * 100.0).round();
        (cs >= 1.0 && cs <= f64::from(u32::MAX)).then(|| Centis(cs as u32))
    }
}

impl fmt::Display for Centis {
    /// Formats as `SS.ss`, `M:SS.ss` or `H:MM:SS.ss`, the inverse of [`parse_mark`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cs = self.0 % 100;
        let total_s = self.0 / 100;
        let (h, m, s) = (total_s / 3600, (total_s / 60) % 60, total_s % 60);
        if h > 0 {
            write!(f, "{h}:{m:02}:{s:02}.{cs:02}")
        } else if m > 0 {
            write!(f, "{m}:{s:02}.{cs:02}")
        } else {
            write!(f, "{s}.{cs:02}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Round {
    Heat,
    Semifinal,
    Final,
    Unknown,
}

impl Round {
    /// Lenient parse; anything unrecognised maps to `Unknown`.
    pub fn parse(s: &str) -> Round {
        match s.trim().to_ascii_lowercase().as_str() {
            "heat" | "heats" | "h" | "qualification" | "q" | "r1" | "round 1" => Round::Heat,
            "semifinal" | "semi-final" | "semi" | "sf" => Round::Semifinal,
            "final" | "f" | "a-final" | "final a" => Round::Final,
            _ => Round::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Round::Heat => "heat",
            Round::Semifinal => "semifinal",
            Round::Final => "final",
            Round::Unknown => "unknown",
        }
    }

    /// Ordinal used as a model feature: heat=0, semifinal=1, final=2, unknown=0.
    pub fn ordinal(self) -> u8 {
        match self {
            Round::Heat | Round::Unknown => 0,
            Round::Semifinal => 1,
            Round::Final => 2,
        }
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of a results file, as found on disk.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawResultRow {
    pub athlete_id: String,
    pub athlete_name: String,
    pub mark: String,
    pub date: String,
    pub wind: Option<String>,
    pub reaction_time: Option<String>,
    pub round: String,
    pub rank: Option<u32>,
    pub competition_id: String,
    pub event_code: String,
    pub country: String,
    pub venue: String,
}

/// A validated performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub athlete_id: String,
    pub athlete_name: String,
    pub competition_id: String,
    pub event_code: String,
    pub time: Centis,
    pub date: NaiveDate,
    /// Signed, tailwind positive.
    pub wind_mps: Option<f64>,
    pub reaction_time_s: Option<f64>,
    pub round: Round,
    pub rank: Option<u32>,
    pub country: String,
    pub country_known: bool,
    pub venue: String,
    pub wind_legal: bool,
}

impl PerformanceRecord {
    pub fn time_seconds(&self) -> f64 {
        self.time.seconds()
    }

    /// Inverse of [`normalize_row`].
    pub fn to_raw(&self) -> RawResultRow {
        RawResultRow {
            athlete_id: self.athlete_id.clone(),
            athlete_name: self.athlete_name.clone(),
            mark: self.time.to_string(),
            date: self.date.format("%Y-%m-%d").to_string(),
            wind: self.wind_mps.map(|w| format!("{w:+}")),
            reaction_time: self.reaction_time_s.map(|r| format!("{r}")),
            round: self.round.as_str().to_string(),
            rank: self.rank,
            competition_id: self.competition_id.clone(),
            event_code: self.event_code.clone(),
            country: self.country.clone(),
            venue: self.venue.clone(),
        }
    }
}

/// wind_legal is false iff the wind reading is present and above +2.0 m/s.
pub fn is_wind_legal(wind_mps: Option<f64>) -> bool {
    !matches!(wind_mps, Some(w) if w > WIND_LEGAL_LIMIT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanctionRecord {
    pub athlete_id: String,
    pub sanction_start: NaiveDate,
    /// `None` means open-ended (life ban or not yet known).
    pub sanction_end: Option<NaiveDate>,
    pub source_note: String,
}

impl SanctionRecord {
    /// Interval length in days; open-ended intervals compare as longest.
    fn span_days(&self) -> i64 {
        self.sanction_end
            .map(|e| (e - self.sanction_start).num_days())
            .unwrap_or(i64::MAX)
    }

    pub fn overlaps(&self, from: NaiveDate, to: NaiveDate) -> bool {
        self.sanction_start <= to && self.sanction_end.map_or(true, |e| e >= from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetitionRecord {
    pub competition_id: String,
    pub name: String,
    pub date: NaiveDate,
    pub country: String,
    pub venue: String,
    pub category: Option<String>,
    pub event_codes: BTreeSet<String>,
}

/// Summary of a file load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub input_rows: usize,
    pub accepted: usize,
    pub skipped: BTreeMap<String, usize>,
    pub warnings: BTreeMap<String, usize>,
}

impl LoadReport {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }

    fn skip(&mut self, reason: &str) {
        *self.skipped.entry(reason.to_string()).or_default() += 1;
    }

    fn warn(&mut self, w: &RowWarning) {
        let key = serde_json::to_value(w)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *self.warnings.entry(key).or_default() += 1;
    }
}

/// Parses `SS.ss`, `M:SS.ss` or `H:MM:SS.ss` into centiseconds.
///
/// Fractions may have one or two digits; in the colon forms every field after the first
/// must be exactly two digits and below 60.
pub fn parse_mark(mark: &str) -> Result<Centis, RowError> {
    let bad = || RowError::MarkUnparseable(mark.to_string());
    let s = mark.trim();
    if s.is_empty() {
        return Err(bad());
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() > 3 {
        return Err(bad());
    }
    let all_digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());

    let (last, leading) = parts.split_last().ok_or_else(bad)?;
    let (whole, frac) = match last.split_once('.') {
        Some((w, f)) => (w, f),
        None => (*last, ""),
    };
    if !all_digits(whole) || (!frac.is_empty() && (!all_digits(frac) || frac.len() > 2)) {
        return Err(bad());
    }
    if last.ends_with('.') {
        return Err(bad());
    }
    let secs: u64 = whole.parse().map_err(|_| bad())?;
    let centis: u64 = match frac.len() {
        0 => 0,
        1 => frac.parse::<u64>().map_err(|_| bad())? * 10,
        _ => frac.parse().map_err(|_| bad())?,
    };

    let mut total_s = secs;
    if !leading.is_empty() {
        if whole.len() != 2 || secs >= 60 {
            return Err(bad());
        }
        let mut multiplier = 60;
        for (i, p) in leading.iter().rev().enumerate() {
            if !all_digits(p) {
                return Err(bad());
            }
            let v: u64 = p.parse().map_err(|_| bad())?;
            // minutes field in H:MM:SS form
            if i == 0 && leading.len() == 2 && (p.len() != 2 || v >= 60) {
                return Err(bad());
            }
            total_s += v * multiplier;
            multiplier *= 60;
        }
    }
    let cs = total_s
        .checked_mul(100)
        .and_then(|v| v.checked_add(centis))
        .filter(|&v| v > 0 && v <= u64::from(u32::MAX))
        .ok_or_else(bad)?;
    Ok(Centis(cs as u32))
}

pub fn parse_date(s: &str) -> Result<NaiveDate, RowError> {
    let t = s.trim();
    let date = NaiveDate::parse_from_str(t, "%Y-%m-%d")
        .or_else(|_| {
            // full ISO-8601 timestamps: keep the calendar date
            chrono::DateTime::parse_from_rfc3339(t).map(|dt| dt.date_naive())
        })
        .or_else(|_| {
            chrono::NaiveDateTime::parse_from_str(t, "%Y-%m-%dT%H:%M:%S").map(|dt| dt.date())
        })
        .map_err(|_| RowError::DateUnparseable(s.to_string()))?;
    Ok(date)
}

fn parse_performance_date(s: &str) -> Result<NaiveDate, RowError> {
    let date = parse_date(s)?;
    if date < MIN_DATE || date > Utc::now().date_naive() {
        return Err(RowError::DateOutOfRange(date));
    }
    Ok(date)
}

/// Parses a signed wind reading in m/s ("+1.2", "-0.4", "0.0").
pub fn parse_wind(s: &str) -> Option<f64> {
    let t = s.trim();
    let t = t.strip_prefix('+').unwrap_or(t);
    if t.is_empty() || t.starts_with(['+', '-']) && t.len() == 1 {
        return None;
    }
    t.parse::<f64>().ok().filter(|w| w.is_finite())
}

fn blank(s: &Option<String>) -> bool {
    s.as_deref().map_or(true, |v| v.trim().is_empty())
}

/// Output of [`normalize_row`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub record: PerformanceRecord,
    pub warnings: Vec<RowWarning>,
}

/// Validates and normalizes one results row.
pub fn normalize_row(row: &RawResultRow) -> Result<Normalized, RowError> {
    for (name, value) in [
        ("athlete_id", &row.athlete_id),
        ("competition_id", &row.competition_id),
        ("event_code", &row.event_code),
    ] {
        if value.trim().is_empty() {
            return Err(RowError::MissingField(name));
        }
    }
    let time = parse_mark(&row.mark)?;
    let date = parse_performance_date(&row.date)?;
    let mut warnings = Vec::new();

    let wind_mps = if blank(&row.wind) {
        None
    } else {
        let w = parse_wind(row.wind.as_deref().unwrap_or_default());
        if w.is_none() {
            warnings.push(RowWarning::WindUnparseable);
        }
        w
    };
    let reaction_time_s = if blank(&row.reaction_time) {
        None
    } else {
        let r = row
            .reaction_time
            .as_deref()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|r| r.is_finite() && *r > 0.0);
        if r.is_none() {
            warnings.push(RowWarning::ReactionTimeUnparseable);
        }
        r
    };

    let round = Round::parse(&row.round);
    if round == Round::Unknown && !row.round.trim().eq_ignore_ascii_case("unknown") {
        warnings.push(RowWarning::UnknownRound);
    }
    let country = row.country.trim().to_ascii_uppercase();
    let country_known = is_known_country(&country);
    if !country_known {
        warnings.push(RowWarning::UnknownCountry);
    }

    Ok(Normalized {
        record: PerformanceRecord {
            athlete_id: row.athlete_id.trim().to_string(),
            athlete_name: row.athlete_name.trim().to_string(),
            competition_id: row.competition_id.trim().to_string(),
            event_code: row.event_code.trim().to_string(),
            time,
            date,
            wind_mps,
            reaction_time_s,
            round,
            rank: row.rank.filter(|&r| r > 0),
            country,
            country_known,
            venue: row.venue.trim().to_string(),
            wind_legal: is_wind_legal(wind_mps),
        },
        warnings,
    })
}

fn check_columns<R: Read>(
    reader: &mut csv::Reader<R>,
    required: &[&str],
) -> Result<HashMap<String, usize>, IngestError> {
    let headers = reader.headers()?.clone();
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|c| !index.contains_key(*c))
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingColumns(missing.join(",")));
    }
    Ok(index)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::Headers)
        .from_reader(input)
}

fn field(record: &csv::StringRecord, index: &HashMap<String, usize>, name: &str) -> Option<String> {
    index
        .get(name)
        .and_then(|&i| record.get(i))
        .map(str::to_string)
}

fn optional_field(
    record: &csv::StringRecord,
    index: &HashMap<String, usize>,
    name: &str,
) -> Option<String> {
    field(record, index, name).filter(|s| !s.trim().is_empty())
}

/// Loads a results file.
pub fn load_results<R: Read>(input: R) -> Result<(Vec<PerformanceRecord>, LoadReport), IngestError> {
    let mut reader = csv_reader(input);
    let index = check_columns(&mut reader, &RESULT_COLUMNS)?;
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for record in reader.records() {
        report.input_rows += 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                report.skip("malformed_row");
                continue;
            }
        };
        if record.len() != index.len() {
            report.skip("malformed_row");
            continue;
        }
        let rank = match optional_field(&record, &index, "rank") {
            None => None,
            Some(r) => match r.trim().parse::<u32>() {
                Ok(v) => Some(v),
                Err(_) => {
                    report.skip("malformed_row");
                    continue;
                }
            },
        };
        let get = |name| field(&record, &index, name).unwrap_or_default();
        let raw = RawResultRow {
            athlete_id: get("athlete_id"),
            athlete_name: get("athlete_name"),
            mark: get("mark"),
            date: get("date"),
            wind: optional_field(&record, &index, "wind"),
            reaction_time: optional_field(&record, &index, "reaction_time"),
            round: get("round"),
            rank,
            competition_id: get("competition_id"),
            event_code: get("event_code"),
            country: get("country"),
            venue: get("venue"),
        };
        match normalize_row(&raw) {
            Ok(n) => {
                n.warnings.iter().for_each(|w| report.warn(w));
                report.accepted += 1;
                out.push(n.record);
            }
            Err(e) => report.skip(e.reason()),
        }
    }
    Ok((out, report))
}

/// Loads a sanctions file. Duplicate `(athlete_id, start)` pairs keep the longer interval.
pub fn load_sanctions<R: Read>(input: R) -> Result<(Vec<SanctionRecord>, LoadReport), IngestError> {
    let mut reader = csv_reader(input);
    let index = check_columns(&mut reader, &SANCTION_COLUMNS[..3])?;
    let mut report = LoadReport::default();
    let mut by_key: BTreeMap<(String, NaiveDate), SanctionRecord> = BTreeMap::new();
    let mut order: Vec<(String, NaiveDate)> = Vec::new();

    for record in reader.records() {
        report.input_rows += 1;
        let Ok(record) = record else {
            report.skip("malformed_row");
            continue;
        };
        let parsed = (|| {
            let athlete_id = field(&record, &index, "athlete_id").unwrap_or_default();
            let athlete_id = athlete_id.trim();
            if athlete_id.is_empty() {
                return Err(RowError::MissingField("athlete_id"));
            }
            let start = parse_date(&field(&record, &index, "start").unwrap_or_default())?;
            let end = match optional_field(&record, &index, "end") {
                Some(e) => Some(parse_date(&e)?),
                None => None,
            };
            if let Some(end) = end {
                if end < start {
                    return Err(RowError::InvertedInterval { start, end });
                }
            }
            Ok(SanctionRecord {
                athlete_id: athlete_id.to_string(),
                sanction_start: start,
                sanction_end: end,
                source_note: field(&record, &index, "note").unwrap_or_default(),
            })
        })();
        match parsed {
            Ok(s) => {
                report.accepted += 1;
                let key = (s.athlete_id.clone(), s.sanction_start);
                match by_key.get(&key) {
                    Some(existing) if existing.span_days() >= s.span_days() => {}
                    Some(_) => {
                        by_key.insert(key, s);
                    }
                    None => {
                        order.push(key.clone());
                        by_key.insert(key, s);
                    }
                }
            }
            Err(e) => report.skip(e.reason()),
        }
    }
    let records = order
        .into_iter()
        .filter_map(|k| by_key.remove(&k))
        .collect();
    Ok((records, report))
}

/// Loads an optional competitions file (adds names and level categories).
pub fn load_competitions<R: Read>(
    input: R,
) -> Result<(Vec<CompetitionRecord>, LoadReport), IngestError> {
    let mut reader = csv_reader(input);
    let index = check_columns(&mut reader, &COMPETITION_COLUMNS[..5])?;
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for record in reader.records() {
        report.input_rows += 1;
        let Ok(record) = record else {
            report.skip("malformed_row");
            continue;
        };
        let id = field(&record, &index, "competition_id").unwrap_or_default();
        if id.trim().is_empty() {
            report.skip(RowError::MissingField("competition_id").reason());
            continue;
        }
        let date = match parse_date(&field(&record, &index, "date").unwrap_or_default()) {
            Ok(d) => d,
            Err(e) => {
                report.skip(e.reason());
                continue;
            }
        };
        report.accepted += 1;
        out.push(CompetitionRecord {
            competition_id: id.trim().to_string(),
            name: field(&record, &index, "name").unwrap_or_default(),
            date,
            country: field(&record, &index, "country")
                .unwrap_or_default()
                .trim()
                .to_ascii_uppercase(),
            venue: field(&record, &index, "venue").unwrap_or_default(),
            category: optional_field(&record, &index, "category"),
            event_codes: BTreeSet::new(),
        });
    }
    Ok((out, report))
}

/// Kind of delimited file, recognised from its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Results,
    Sanctions,
    Competitions,
}

/// Classifies a file by its header line.
pub fn detect_file_kind(header_line: &str) -> Option<FileKind> {
    let cols: BTreeSet<&str> = header_line.trim().split(',').map(str::trim).collect();
    if RESULT_COLUMNS.iter().all(|c| cols.contains(c)) {
        Some(FileKind::Results)
    } else if SANCTION_COLUMNS[..3].iter().all(|c| cols.contains(c)) {
        Some(FileKind::Sanctions)
    } else if COMPETITION_COLUMNS[..5].iter().all(|c| cols.contains(c)) {
        Some(FileKind::Competitions)
    } else {
        None
    }
}

pub fn write_results<W: Write>(out: W, records: &[PerformanceRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in records {
        let raw = r.to_raw();
        w.write_record([
            raw.athlete_id.as_str(),
            &raw.athlete_name,
            &raw.mark,
            &raw.date,
            raw.wind.as_deref().unwrap_or(""),
            raw.reaction_time.as_deref().unwrap_or(""),
            &raw.round,
            &raw.rank.map(|r| r.to_string()).unwrap_or_default(),
            &raw.competition_id,
            &raw.event_code,
            &raw.country,
            &raw.venue,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sanctions<W: Write>(out: W, records: &[SanctionRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SANCTION_COLUMNS)?;
    for s in records {
        w.write_record([
            s.athlete_id.as_str(),
            &s.sanction_start.to_string(),
            &s.sanction_end.map(|d| d.to_string()).unwrap_or_default(),
            &s.source_note,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_competitions<W: Write>(
    out: W,
    records: &[CompetitionRecord],
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPETITION_COLUMNS)?;
    for c in records {
        w.write_record([
            c.competition_id.as_str(),
            &c.name,
            &c.date.to_string(),
            &c.country,
            &c.venue,
            c.category.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// IOC-style three-letter codes used by the sport's federations.
const COUNTRY_CODES: &str = "AFG AIN ALB ALG AND ANA ANG ANT ARG ARM ARU ASA AUS AUT AZE BAH BAN BAR BDI \
BEL BEN BER BHU BIH BIZ BLR BOL BOT BRA BRN BRU BUL BUR CAF CAM CAN CAY CGO CHA CHI CHN CIV CMR COD \
COK COL COM CPV CRC CRO CUB CYP CZE DEN DJI DMA DOM ECU EGY ERI ESA ESP EST ETH FIJ FIN FRA FSM GAB \
GAM GBR GBS GEO GEQ GER GHA GIB GRE GRN GUA GUI GUM GUY HAI HKG HON HUN INA IND IRI IRL IRQ ISL ISR \
ISV ITA IVB JAM JOR JPN KAZ KEN KGZ KIR KOR KOS KSA KUW LAO LAT LBA LBN LBR LCA LES LIE LTU LUX MAC \
MAD MAR MAS MAW MDA MDV MEX MGL MHL MKD MLI MLT MNE MON MOZ MRI MSR MTN MYA NAM NCA NED NEP NFI NGR \
NIG NOR NRU NZL OMA PAK PAN PAR PER PHI PLE PLW PNG POL POR PRK PUR QAT ROU RSA RUS RWA SAM SEN SEY \
SGP SKN SLE SLO SMR SOL SOM SRB SRI SSD STP SUD SUI SUR SVK SWE SWZ SYR TAN TCA TGA THA TJK TKM TKS \
TLS TOG TPE TTO TUN TUR TUV UAE UGA UKR URU USA UZB VAN VEN VIE VIN YEM ZAM ZIM";

pub fn is_known_country(code: &str) -> bool {
    code.len() == 3 && COUNTRY_CODES.split(' ').any(|c| c == code)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> RawResultRow {
        RawResultRow {
            athlete_id: "A1".into(),
            athlete_name: "Runner One".into(),
            mark: "10.12".into(),
            date: "2019-06-01".into(),
            wind: Some("+1.1".into()),
            reaction_time: Some("0.143".into()),
            round: "final".into(),
            rank: Some(2),
            competition_id: "C1".into(),
            event_code: "100m-men".into(),
            country: "jam".into(),
            venue: "Kingston".into(),
        }
    }

    #[test]
    fn marks_in_all_forms() {
        assert_eq!(parse_mark("9.58").unwrap(), Centis(958));
        assert_eq!(parse_mark("9.58").unwrap().seconds(), 9.58);
        assert_eq!(parse_mark("1:45.23").unwrap().seconds(), 105.23);
        assert_eq!(parse_mark(" 2:01:09.00 ").unwrap(), Centis(726_900));
        assert_eq!(parse_mark("10.1").unwrap(), Centis(1010));
        assert_eq!(parse_mark("10").unwrap(), Centis(1000));
    }

    #[test]
    fn sentinel_and_malformed_marks() {
        for bad in ["DNF", "DQ", "DNS", "", "  ", "1:5.00", "1:60.00", "9.581", "9.", ".5", "1:2:3:4.00", "-9.58", "0.00", "1:60:00.00"] {
            assert!(
                matches!(parse_mark(bad), Err(RowError::MarkUnparseable(_))),
                "{bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn mark_display_inverts_parse() {
        for s in ["9.58", "59.99", "1:00.00", "1:45.23", "1:00:00.01", "2:01:09.00"] {
            assert_eq!(parse_mark(s).unwrap().to_string(), s);
        }
    }

    #[test]
    fn wind_legality() {
        let mut r = row();
        r.wind = Some("+2.1".into());
        let n = normalize_row(&r).unwrap().record;
        assert_eq!(n.wind_mps, Some(2.1));
        assert!(!n.wind_legal);

        r.wind = Some("+2.0".into());
        let n = normalize_row(&r).unwrap().record;
        assert_eq!(n.wind_mps, Some(2.0));
        assert!(n.wind_legal);

        r.wind = None;
        let n = normalize_row(&r).unwrap().record;
        assert_eq!(n.wind_mps, None);
        assert!(n.wind_legal);

        r.wind = Some("-3.4".into());
        assert!(normalize_row(&r).unwrap().record.wind_legal);
    }

    #[test]
    fn bad_wind_keeps_row() {
        let mut r = row();
        r.wind = Some("n/a".into());
        let n = normalize_row(&r).unwrap();
        assert_eq!(n.record.wind_mps, None);
        assert!(n.record.wind_legal);
        assert_eq!(n.warnings, vec![RowWarning::WindUnparseable]);
    }

    #[test]
    fn normalizes_country_and_round() {
        let mut r = row();
        r.round = "Semi-Final".into();
        let n = normalize_row(&r).unwrap();
        assert_eq!(n.record.country, "JAM");
        assert!(n.record.country_known);
        assert_eq!(n.record.round, Round::Semifinal);

        r.country = "xx1".into();
        r.round = "repechage".into();
        let n = normalize_row(&r).unwrap();
        assert_eq!(n.record.country, "XX1");
        assert!(!n.record.country_known);
        assert_eq!(n.record.round, Round::Unknown);
        assert!(n.warnings.contains(&RowWarning::UnknownCountry));
        assert!(n.warnings.contains(&RowWarning::UnknownRound));
    }

    #[test]
    fn dates() {
        let mut r = row();
        r.date = "2019-06-01T18:30:00Z".into();
        assert_eq!(
            normalize_row(&r).unwrap().record.date,
            NaiveDate::from_ymd_opt(2019, 6, 1).unwrap()
        );
        r.date = "01/06/2019".into();
        assert!(matches!(normalize_row(&r), Err(RowError::DateUnparseable(_))));
        r.date = "1989-12-31".into();
        assert!(matches!(normalize_row(&r), Err(RowError::DateOutOfRange(_))));
        r.date = "2999-01-01".into();
        assert!(matches!(normalize_row(&r), Err(RowError::DateOutOfRange(_))));
    }

    #[test]
    fn required_ids() {
        let mut r = row();
        r.competition_id = " ".into();
        assert_eq!(
            normalize_row(&r).unwrap_err(),
            RowError::MissingField("competition_id")
        );
    }

    #[test]
    fn results_file_counts_skips() {
        let csv = "athlete_id,athlete_name,mark,date,wind,reaction_time,round,rank,competition_id,event_code,country,venue\n\
A1,One,10.01,2020-05-01,+0.5,0.150,heat,1,C1,100m-men,USA,Eugene\n\
A1,One,DNF,2020-05-02,,,final,,C2,100m-men,USA,Eugene\n\
A2,Two,10.30,not-a-date,,,final,3,C2,100m-men,GBR,London\n\
A3,Three,10.40,2020-05-03,,,final,x,C2,100m-men,GBR,London\n\
A4,Four,10.50,2020-05-03\n\
A5,Five,10.22,2020-05-03,+2.4,,final,2,C2,100m-men,FRA,Paris\n";
        let (records, report) = load_results(csv.as_bytes()).unwrap();
        assert_eq!(report.input_rows, 6);
        assert_eq!(records.len(), 2);
        assert_eq!(report.accepted + report.skipped_total(), report.input_rows);
        assert_eq!(report.skipped["mark_unparseable"], 1);
        assert_eq!(report.skipped["date_unparseable"], 1);
        assert_eq!(report.skipped["malformed_row"], 2);
        assert!(!records[1].wind_legal);
    }

    #[test]
    fn results_file_missing_column_is_fatal() {
        let csv = "athlete_id,mark,date\nA1,10.0,2020-01-01\n";
        assert!(matches!(
            load_results(csv.as_bytes()),
            Err(IngestError::MissingColumns(_))
        ));
    }

    #[test]
    fn sanctions_load() {
        let (s, report) = load_sanctions("athlete_id,start,end,note\n".as_bytes()).unwrap();
        assert!(s.is_empty());
        assert_eq!(report.input_rows, 0);

        let csv = "athlete_id,start,end,note\n\
A1,2015-01-01,2017-01-01,first\n\
A1,2015-01-01,2019-01-01,longer\n\
A2,2016-01-01,,open\n\
A3,2018-01-01,2017-01-01,inverted\n\
A4,bad,,x\n";
        let (s, report) = load_sanctions(csv.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].source_note, "longer");
        assert_eq!(s[1].sanction_end, None);
        assert_eq!(report.skipped["inverted_interval"], 1);
        assert_eq!(report.skipped["date_unparseable"], 1);
        assert_eq!(report.accepted + report.skipped_total(), report.input_rows);

        assert!(matches!(
            load_sanctions("athlete_id,start\n".as_bytes()),
            Err(IngestError::MissingColumns(_))
        ));
    }

    #[test]
    fn sixty_sanctions() {
        let mut csv = String::from("athlete_id,start,end,note\n");
        for i in 0..60 {
            csv.push_str(&format!("S{i},2016-02-{:02},2020-01-01,ban\n", i % 28 + 1));
        }
        let (s, report) = load_sanctions(csv.as_bytes()).unwrap();
        assert_eq!(s.len(), 60);
        assert_eq!(report.skipped_total(), 0);
    }

    #[test]
    fn file_kinds() {
        assert_eq!(detect_file_kind(&RESULT_COLUMNS.join(",")), Some(FileKind::Results));
        assert_eq!(detect_file_kind("athlete_id,start,end,note"), Some(FileKind::Sanctions));
        assert_eq!(
            detect_file_kind("competition_id,name,date,country,venue,category"),
            Some(FileKind::Competitions)
        );
        assert_eq!(detect_file_kind("a,b"), None);
    }
}

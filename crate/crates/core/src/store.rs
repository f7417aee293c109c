//! Embedded relational store for performances, competitions, sanctions and materialized
//! detection runs, plus the screening-page cache.
//!
//! One SQLite file in WAL mode: a single writer connection behind a mutex and a pool of
//! read connections, so slice scans run against a consistent snapshot while an ingest is
//! in progress. Dates are stored as day numbers and times as whole centiseconds.

use std::collections::{BTreeMap, HashMap};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{Datelike, NaiveDate};
use lru::LruCache;
use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Row, Transaction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::features::competition_level;
use crate::detect::{AthleteHistory, DetectContext, DetectionResult, DetectorConfig, MethodId};
use crate::evaluate::{build_screening_page, EvaluateError, Labels, SanctionMatch, PAGE_SIZE};
use crate::ingest::{Centis, CompetitionRecord, PerformanceRecord, Round, SanctionRecord};
use crate::slice::{EventSlice, Gender};

pub const DEFAULT_CACHE_SIZE: usize = 256;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS competitions (
    competition_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    date INTEGER NOT NULL,
    country TEXT NOT NULL,
    venue TEXT NOT NULL,
    category TEXT
);
CREATE TABLE IF NOT EXISTS competition_events (
    competition_id TEXT NOT NULL REFERENCES competitions(competition_id),
    event_code TEXT NOT NULL,
    PRIMARY KEY (competition_id, event_code)
);
CREATE TABLE IF NOT EXISTS performances (
    athlete_id TEXT NOT NULL,
    athlete_name TEXT NOT NULL,
    competition_id TEXT NOT NULL REFERENCES competitions(competition_id),
    event_code TEXT NOT NULL,
    time_cs INTEGER NOT NULL,
    date INTEGER NOT NULL,
    wind_mps REAL,
    reaction_time_s REAL,
    round TEXT NOT NULL,
    rank INTEGER,
    country TEXT NOT NULL,
    country_known INTEGER NOT NULL,
    venue TEXT NOT NULL,
    wind_legal INTEGER NOT NULL,
    UNIQUE (athlete_id, competition_id, event_code, round, time_cs)
);
CREATE INDEX IF NOT EXISTS performances_event_date ON performances (event_code, date);
CREATE INDEX IF NOT EXISTS performances_athlete ON performances (athlete_id, date);
CREATE TABLE IF NOT EXISTS sanctions (
    athlete_id TEXT NOT NULL,
    sanction_start INTEGER NOT NULL,
    sanction_end INTEGER,
    source_note TEXT NOT NULL,
    PRIMARY KEY (athlete_id, sanction_start)
);
CREATE TABLE IF NOT EXISTS detection_results (
    slice TEXT NOT NULL,
    method_id TEXT NOT NULL,
    config_fingerprint TEXT NOT NULL,
    config TEXT NOT NULL,
    data_version INTEGER NOT NULL,
    result TEXT NOT NULL,
    PRIMARY KEY (slice, method_id)
);
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value INTEGER NOT NULL
);
INSERT OR IGNORE INTO meta (key, value) VALUES ('data_version', 0), ('results_version', 0);
";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("stored JSON is invalid: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no materialized {method} result for slice {slice}")]
    NotMaterialized { slice: String, method: MethodId },
    #[error(transparent)]
    Screen(#[from] EvaluateError),
    #[error("corrupt row: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Row counts across the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounts {
    pub performances: usize,
    pub athletes: usize,
    pub competitions: usize,
    pub sanctions: usize,
}

/// One selectable event with its data extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSummary {
    /// Canonical slice covering every legal-wind performance of the event.
    pub slice: String,
    pub event_code: String,
    pub gender: Gender,
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    pub athletes: usize,
    pub performances: usize,
}

/// A stored detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedResult {
    pub slice: String,
    pub config_fingerprint: String,
    pub config: DetectorConfig,
    /// Store data version the run was computed against.
    pub data_version: u64,
    pub result: DetectionResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

struct ScreenCache {
    pages: LruCache<String, Arc<Vec<u8>>>,
    hits: u64,
    misses: u64,
}

pub struct Store {
    path: PathBuf,
    writer: Mutex<Connection>,
    readers: Mutex<Vec<Connection>>,
    cache: Mutex<ScreenCache>,
    /// Decoded materialized results keyed by (slice, method), tagged with the results
    /// version they were read at.
    decoded: Mutex<HashMap<(String, MethodId), (u64, Arc<MaterializedResult>)>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn day(d: NaiveDate) -> i64 {
    i64::from(d.num_days_from_ce())
}

fn from_day(n: i64) -> Result<NaiveDate> {
    i32::try_from(n)
        .ok()
        .and_then(NaiveDate::from_num_days_from_ce_opt)
        .ok_or_else(|| StoreError::Corrupt(format!("day number {n}")))
}

fn bump(tx: &Transaction<'_>, key: &str) -> Result<()> {
    tx.execute("UPDATE meta SET value = value + 1 WHERE key = ?1", [key])?;
    Ok(())
}

const PERF_COLUMNS: &str = "athlete_id, athlete_name, competition_id, event_code, time_cs, date, wind_mps, \
     reaction_time_s, round, rank, country, country_known, venue, wind_legal";

fn perf_from_row(row: &Row<'_>) -> rusqlite::Result<(PerformanceRecord, i64)> {
    let date_num: i64 = row.get(5)?;
    let round: String = row.get(8)?;
    let rank: Option<i64> = row.get(9)?;
    let rec = PerformanceRecord {
        athlete_id: row.get(0)?,
        athlete_name: row.get(1)?,
        competition_id: row.get(2)?,
        event_code: row.get(3)?,
        time: Centis(row.get(4)?),
        date: NaiveDate::MIN,
        wind_mps: row.get(6)?,
        reaction_time_s: row.get(7)?,
        round: Round::parse(&round),
        rank: rank.and_then(|r| u32::try_from(r).ok()),
        country: row.get(10)?,
        country_known: row.get(11)?,
        venue: row.get(12)?,
        wind_legal: row.get(13)?,
    };
    Ok((rec, date_num))
}

fn read_perfs(conn: &Connection, sql: &str, args: &[&dyn rusqlite::ToSql]) -> Result<Vec<PerformanceRecord>> {
    let mut stmt = conn.prepare_cached(sql)?;
    let rows = stmt.query_map(args, perf_from_row)?;
    let mut out = Vec::new();
    for r in rows {
        let (mut rec, d) = r?;
        rec.date = from_day(d)?;
        out.push(rec);
    }
    Ok(out)
}

fn group(records: Vec<PerformanceRecord>) -> Vec<AthleteHistory> {
    let mut out: Vec<AthleteHistory> = Vec::new();
    for rec in records {
        match out.last_mut() {
            Some(h) if h.athlete_id == rec.athlete_id && h.event_code == rec.event_code => h.performances.push(rec),
            _ => out.push(AthleteHistory {
                athlete_id: rec.athlete_id.clone(),
                event_code: rec.event_code.clone(),
                performances: vec![rec],
            }),
        }
    }
    out
}

impl Store {
    /// Opens or creates the database at `path`. `cache_size` bounds the number of cached
    /// screening pages.
    pub fn open(path: impl AsRef<Path>, cache_size: usize) -> Result<Store> {
        let path = path.as_ref().to_path_buf();
        let writer = Connection::open(&path)?;
        writer.pragma_update(None, "journal_mode", "WAL")?;
        writer.pragma_update(None, "synchronous", "NORMAL")?;
        writer.pragma_update(None, "foreign_keys", "ON")?;
        writer.busy_timeout(std::time::Duration::from_secs(30))?;
        writer.execute_batch(SCHEMA)?;
        let cap = NonZeroUsize::new(cache_size.max(1)).expect("non-zero");
        Ok(Store {
            path,
            writer: Mutex::new(writer),
            readers: Mutex::new(Vec::new()),
            cache: Mutex::new(ScreenCache { pages: LruCache::new(cap), hits: 0, misses: 0 }),
            decoded: Mutex::new(HashMap::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn with_reader<T>(&self, f: impl FnOnce(&mut Connection) -> Result<T>) -> Result<T> {
        let pooled = lock(&self.readers).pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => {
                let c = Connection::open_with_flags(
                    &self.path,
                    OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
                )?;
                c.busy_timeout(std::time::Duration::from_secs(30))?;
                c
            }
        };
        let out = f(&mut conn);
        lock(&self.readers).push(conn);
        out
    }

    fn meta(&self, key: &str) -> Result<u64> {
        self.with_reader(|c| {
            let v: i64 = c.query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))?;
            Ok(v as u64)
        })
    }

    /// Incremented by every write that changes performances, competitions or sanctions.
    pub fn data_version(&self) -> Result<u64> {
        self.meta("data_version")
    }

    /// Incremented by every materialized detection run.
    pub fn results_version(&self) -> Result<u64> {
        self.meta("results_version")
    }

    /// Inserts or replaces competition metadata. Returns the number of rows written.
    pub fn upsert_competitions(&self, records: &[CompetitionRecord]) -> Result<usize> {
        let mut conn = lock(&self.writer);
        let tx = conn.transaction()?;
        let mut changed = 0;
        {
            let mut comp = tx.prepare_cached(
                "INSERT INTO competitions (competition_id, name, date, country, venue, category)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)
                 ON CONFLICT (competition_id) DO UPDATE SET
                    name = excluded.name, date = excluded.date, country = excluded.country,
                    venue = excluded.venue, category = excluded.category
                 WHERE name IS NOT excluded.name OR date IS NOT excluded.date
                    OR country IS NOT excluded.country OR venue IS NOT excluded.venue
                    OR category IS NOT excluded.category",
            )?;
            let mut event = tx.prepare_cached(
                "INSERT OR IGNORE INTO competition_events (competition_id, event_code) VALUES (?1, ?2)",
            )?;
            for c in records {
                changed +=
                    comp.execute(params![c.competition_id, c.name, day(c.date), c.country, c.venue, c.category])?;
                for e in &c.event_codes {
                    event.execute(params![c.competition_id, e])?;
                }
            }
        }
        if changed > 0 {
            bump(&tx, "data_version")?;
        }
        tx.commit()?;
        Ok(changed)
    }

    /// Inserts performances, ignoring rows whose key (athlete, competition, event, round,
    /// time) is already stored. Competitions referenced but not yet known are created
    /// from the performance's date, country and venue. Returns the number of new rows.
    pub fn upsert_performances(&self, records: &[PerformanceRecord]) -> Result<usize> {
        let mut conn = lock(&self.writer);
        let tx = conn.transaction()?;
        let mut inserted = 0;
        {
            let mut comp = tx.prepare_cached(
                "INSERT OR IGNORE INTO competitions (competition_id, name, date, country, venue, category)
                 VALUES (?1, ?1, ?2, ?3, ?4, NULL)",
            )?;
            let mut event = tx.prepare_cached(
                "INSERT OR IGNORE INTO competition_events (competition_id, event_code) VALUES (?1, ?2)",
            )?;
            let mut perf = tx.prepare_cached(&format!(
                "INSERT OR IGNORE INTO performances ({PERF_COLUMNS})
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14)"
            ))?;
            let mut last_comp: Option<(&str, &str)> = None;
            for p in records {
                let key = (p.competition_id.as_str(), p.event_code.as_str());
                if last_comp != Some(key) {
                    comp.execute(params![p.competition_id, day(p.date), p.country, p.venue])?;
                    event.execute(params![p.competition_id, p.event_code])?;
                    last_comp = Some(key);
                }
                inserted += perf.execute(params![
                    p.athlete_id,
                    p.athlete_name,
                    p.competition_id,
                    p.event_code,
                    p.time.0,
                    day(p.date),
                    p.wind_mps,
                    p.reaction_time_s,
                    p.round.as_str(),
                    p.rank,
                    p.country,
                    p.country_known,
                    p.venue,
                    p.wind_legal,
                ])?;
            }
        }
        if inserted > 0 {
            bump(&tx, "data_version")?;
        }
        tx.commit()?;
        Ok(inserted)
    }

    /// Inserts sanctions. A duplicate (athlete, start) keeps the longer interval, an open
    /// end counting as longest. Returns the number of rows inserted or extended.
    pub fn upsert_sanctions(&self, records: &[SanctionRecord]) -> Result<usize> {
        let mut conn = lock(&self.writer);
        let tx = conn.transaction()?;
        let mut changed = 0;
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO sanctions (athlete_id, sanction_start, sanction_end, source_note)
                 VALUES (?1, ?2, ?3, ?4)
                 ON CONFLICT (athlete_id, sanction_start) DO UPDATE SET
                    sanction_end = excluded.sanction_end, source_note = excluded.source_note
                 WHERE sanction_end IS NOT NULL
                    AND (excluded.sanction_end IS NULL OR excluded.sanction_end > sanction_end)",
            )?;
            for s in records {
                changed += stmt.execute(params![
                    s.athlete_id,
                    day(s.sanction_start),
                    s.sanction_end.map(day),
                    s.source_note
                ])?;
            }
        }
        if changed > 0 {
            bump(&tx, "data_version")?;
        }
        tx.commit()?;
        Ok(changed)
    }

    pub fn counts(&self) -> Result<StoreCounts> {
        self.with_reader(|c| {
            let tx = c.transaction()?;
            let count = |sql: &str| -> Result<usize> { Ok(tx.query_row(sql, [], |r| r.get::<_, i64>(0))? as usize) };
            let out = StoreCounts {
                performances: count("SELECT COUNT(*) FROM performances")?,
                athletes: count("SELECT COUNT(DISTINCT athlete_id) FROM performances")?,
                competitions: count("SELECT COUNT(*) FROM competitions")?,
                sanctions: count("SELECT COUNT(*) FROM sanctions")?,
            };
            tx.finish()?;
            Ok(out)
        })
    }

    /// Per-athlete histories in the slice, athletes by id and performances by date then
    /// time. Unknown events give an empty list.
    pub fn query_slice(&self, slice: &EventSlice) -> Result<Vec<AthleteHistory>> {
        let legal_only = i64::from(slice.wind_legal_only);
        let records = self.with_reader(|c| {
            read_perfs(
                c,
                &format!(
                    "SELECT {PERF_COLUMNS} FROM performances
                     WHERE event_code = ?1 AND date BETWEEN ?2 AND ?3 AND (?4 = 0 OR wind_legal = 1)
                     ORDER BY athlete_id, date, time_cs, competition_id, round"
                ),
                &[&slice.event_code, &day(slice.date_from), &day(slice.date_to), &legal_only],
            )
        })?;
        let records = records
            .into_iter()
            .filter(|p| slice.contains(&p.event_code, p.date, p.wind_legal))
            .collect();
        Ok(group(records))
    }

    /// Whether the slice holds at least one performance.
    pub fn slice_exists(&self, slice: &EventSlice) -> Result<bool> {
        let legal_only = i64::from(slice.wind_legal_only);
        let hit: Option<i64> = self.with_reader(|c| {
            Ok(c.query_row(
                "SELECT 1 FROM performances
                 WHERE event_code = ?1 AND date BETWEEN ?2 AND ?3 AND (?4 = 0 OR wind_legal = 1) LIMIT 1",
                params![slice.event_code, day(slice.date_from), day(slice.date_to), legal_only],
                |r| r.get(0),
            )
            .optional()?)
        })?;
        Ok(hit.is_some() && slice.contains(&slice.event_code, slice.date_from, true))
    }

    /// One athlete's history within a slice; empty when the athlete has no rows there.
    pub fn athlete_history(&self, slice: &EventSlice, athlete_id: &str) -> Result<Vec<PerformanceRecord>> {
        let legal_only = i64::from(slice.wind_legal_only);
        let records = self.with_reader(|c| {
            read_perfs(
                c,
                &format!(
                    "SELECT {PERF_COLUMNS} FROM performances
                     WHERE athlete_id = ?1 AND event_code = ?2 AND date BETWEEN ?3 AND ?4
                        AND (?5 = 0 OR wind_legal = 1)
                     ORDER BY date, time_cs, competition_id, round"
                ),
                &[&athlete_id, &slice.event_code, &day(slice.date_from), &day(slice.date_to), &legal_only],
            )
        })?;
        Ok(records.into_iter().filter(|p| slice.contains(&p.event_code, p.date, p.wind_legal)).collect())
    }

    pub fn athlete_exists(&self, athlete_id: &str) -> Result<bool> {
        self.with_reader(|c| {
            let hit: Option<i64> = c
                .query_row("SELECT 1 FROM performances WHERE athlete_id = ?1 LIMIT 1", [athlete_id], |r| r.get(0))
                .optional()?;
            let sanctioned: Option<i64> = c
                .query_row("SELECT 1 FROM sanctions WHERE athlete_id = ?1 LIMIT 1", [athlete_id], |r| r.get(0))
                .optional()?;
            Ok(hit.is_some() || sanctioned.is_some())
        })
    }

    /// Every stored event with its legal-wind extent, ordered by event code.
    pub fn list_slices(&self) -> Result<Vec<SliceSummary>> {
        self.with_reader(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT event_code, MIN(date), MAX(date), COUNT(DISTINCT athlete_id), COUNT(*)
                 FROM performances WHERE wind_legal = 1 GROUP BY event_code ORDER BY event_code",
            )?;
            let rows = stmt.query_map([], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, i64>(1)?,
                    r.get::<_, i64>(2)?,
                    r.get::<_, i64>(3)?,
                    r.get::<_, i64>(4)?,
                ))
            })?;
            let mut out = Vec::new();
            for row in rows {
                let (event_code, from, to, athletes, performances) = row?;
                let gender = Gender::from_event_code(&event_code);
                let slice = EventSlice {
                    event_code: event_code.clone(),
                    gender,
                    date_from: from_day(from)?,
                    date_to: from_day(to)?,
                    wind_legal_only: true,
                };
                out.push(SliceSummary {
                    slice: slice.to_string(),
                    event_code,
                    gender,
                    date_from: slice.date_from,
                    date_to: slice.date_to,
                    athletes: athletes as usize,
                    performances: performances as usize,
                });
            }
            Ok(out)
        })
    }

    pub fn sanctions(&self) -> Result<Vec<SanctionRecord>> {
        self.with_reader(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT athlete_id, sanction_start, sanction_end, source_note FROM sanctions
                 ORDER BY athlete_id, sanction_start",
            )?;
            let rows = stmt.query_map([], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?, r.get::<_, Option<i64>>(2)?, r.get::<_, String>(3)?))
            })?;
            let mut out = Vec::new();
            for row in rows {
                let (athlete_id, start, end, source_note) = row?;
                out.push(SanctionRecord {
                    athlete_id,
                    sanction_start: from_day(start)?,
                    sanction_end: end.map(from_day).transpose()?,
                    source_note,
                });
            }
            Ok(out)
        })
    }

    pub fn labels(&self, mode: SanctionMatch) -> Result<Labels> {
        Ok(Labels::from_sanctions(&self.sanctions()?, mode))
    }

    /// Competition levels for every competition that holds the slice's event.
    pub fn detect_context(&self, slice: &EventSlice) -> Result<DetectContext> {
        self.with_reader(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT c.competition_id, c.category FROM competitions c
                 JOIN competition_events e ON e.competition_id = c.competition_id
                 WHERE e.event_code = ?1",
            )?;
            let rows = stmt.query_map([&slice.event_code], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, Option<String>>(1)?))
            })?;
            let mut levels = HashMap::new();
            for row in rows {
                let (id, category) = row?;
                levels.insert(id, competition_level(category.as_deref()));
            }
            Ok(DetectContext { competition_levels: levels })
        })
    }

    /// Competition metadata by id.
    pub fn competitions(&self, ids: &[&str]) -> Result<BTreeMap<String, CompetitionRecord>> {
        self.with_reader(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT name, date, country, venue, category FROM competitions WHERE competition_id = ?1",
            )?;
            let mut events =
                c.prepare_cached("SELECT event_code FROM competition_events WHERE competition_id = ?1")?;
            let mut out = BTreeMap::new();
            for id in ids {
                if out.contains_key(*id) {
                    continue;
                }
                let row = stmt
                    .query_row([id], |r| {
                        Ok((
                            r.get::<_, String>(0)?,
                            r.get::<_, i64>(1)?,
                            r.get::<_, String>(2)?,
                            r.get::<_, String>(3)?,
                            r.get::<_, Option<String>>(4)?,
                        ))
                    })
                    .optional()?;
                let Some((name, date, country, venue, category)) = row else { continue };
                let event_codes = events.query_map([id], |r| r.get::<_, String>(0))?.collect::<rusqlite::Result<_>>()?;
                out.insert(
                    id.to_string(),
                    CompetitionRecord {
                        competition_id: id.to_string(),
                        name,
                        date: from_day(date)?,
                        country,
                        venue,
                        category,
                        event_codes,
                    },
                );
            }
            Ok(out)
        })
    }

    /// Stores a detection run for a slice, replacing any earlier run of the same method.
    pub fn materialize(&self, slice: &EventSlice, config: &DetectorConfig, result: &DetectionResult) -> Result<()> {
        let data_version = self.data_version()?;
        let mut conn = lock(&self.writer);
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT OR REPLACE INTO detection_results
                (slice, method_id, config_fingerprint, config, data_version, result)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                slice.to_string(),
                result.method_id.as_str(),
                config.fingerprint(),
                serde_json::to_string(config)?,
                data_version as i64,
                serde_json::to_string(result)?,
            ],
        )?;
        bump(&tx, "results_version")?;
        tx.commit()?;
        Ok(())
    }

    /// Latest stored run of `method` for `slice`, if any.
    pub fn materialized(&self, slice: &EventSlice, method: MethodId) -> Result<Option<Arc<MaterializedResult>>> {
        let key = (slice.to_string(), method);
        let version = self.results_version()?;
        if let Some((v, m)) = lock(&self.decoded).get(&key) {
            if *v == version {
                return Ok(Some(Arc::clone(m)));
            }
        }
        let row = self.with_reader(|c| {
            Ok(c.query_row(
                "SELECT config_fingerprint, config, data_version, result FROM detection_results
                 WHERE slice = ?1 AND method_id = ?2",
                params![key.0, method.as_str()],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, i64>(2)?,
                        r.get::<_, String>(3)?,
                    ))
                },
            )
            .optional()?)
        })?;
        let Some((config_fingerprint, config, data_version, result)) = row else {
            return Ok(None);
        };
        let m = Arc::new(MaterializedResult {
            slice: key.0.clone(),
            config_fingerprint,
            config: serde_json::from_str(&config)?,
            data_version: data_version as u64,
            result: serde_json::from_str(&result)?,
        });
        lock(&self.decoded).insert(key, (version, Arc::clone(&m)));
        Ok(Some(m))
    }

    /// Every stored run for `slice`, in method registry order.
    pub fn materialized_for_slice(&self, slice: &EventSlice) -> Result<Vec<Arc<MaterializedResult>>> {
        let mut out = Vec::new();
        for m in MethodId::ALL {
            if let Some(r) = self.materialized(slice, m)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// JSON-encoded screening page for `method` on `slice`. Pages are cached under a hash
    /// of the slice, method, config fingerprint, store versions, cursor and page size.
    pub fn cached_screen(
        &self,
        slice: &EventSlice,
        method: MethodId,
        cursor: Option<&str>,
        page_size: usize,
    ) -> Result<Arc<Vec<u8>>> {
        let slice_key = slice.to_string();
        let target = self
            .materialized(slice, method)?
            .ok_or_else(|| StoreError::NotMaterialized { slice: slice_key.clone(), method })?;
        let mut h = Sha256::new();
        for part in [
            slice_key.as_str(),
            method.as_str(),
            target.config_fingerprint.as_str(),
            &self.data_version()?.to_string(),
            &self.results_version()?.to_string(),
            cursor.unwrap_or(""),
            &page_size.to_string(),
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        let key = hex::encode(h.finalize());
        {
            let mut cache = lock(&self.cache);
            if let Some(page) = cache.pages.get(&key).cloned() {
                cache.hits += 1;
                return Ok(page);
            }
            cache.misses += 1;
        }
        let all = self.materialized_for_slice(slice)?;
        let results: Vec<DetectionResult> = all.iter().map(|m| m.result.clone()).collect();
        let labels = self.labels(SanctionMatch::AnyDate)?;
        let page = build_screening_page(&slice_key, method, &results, &labels, cursor, page_size)?;
        let bytes = Arc::new(serde_json::to_vec(&page)?);
        lock(&self.cache).pages.put(key, Arc::clone(&bytes));
        Ok(bytes)
    }

    /// [`Store::cached_screen`] with the default page size.
    pub fn screen(&self, slice: &EventSlice, method: MethodId, cursor: Option<&str>) -> Result<Arc<Vec<u8>>> {
        self.cached_screen(slice, method, cursor, PAGE_SIZE)
    }

    pub fn cache_stats(&self) -> CacheStats {
        let cache = lock(&self.cache);
        CacheStats { hits: cache.hits, misses: cache.misses, entries: cache.pages.len() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{run_detector, test_support::perf};
    use crate::evaluate::ScreeningPage;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path().join("t.db"), 8).unwrap();
        (dir, s)
    }

    fn slice() -> EventSlice {
        "100m-men:men:2010-01-01:2025-12-31:legal".parse().unwrap()
    }

    #[test]
    fn empty_store() {
        let (_d, s) = store();
        assert!(s.query_slice(&slice()).unwrap().is_empty());
        assert!(s.list_slices().unwrap().is_empty());
        assert_eq!(s.upsert_performances(&[]).unwrap(), 0);
        assert_eq!(s.data_version().unwrap(), 0);
    }

    #[test]
    fn idempotent_upsert() {
        let (_d, s) = store();
        let recs: Vec<_> = (0..10).map(|i| perf("A", i, 10.0 + i as f64 / 100.0, Some(0.5))).collect();
        assert_eq!(s.upsert_performances(&recs).unwrap(), 10);
        assert_eq!(s.upsert_performances(&recs).unwrap(), 0);
        assert_eq!(s.counts().unwrap().performances, 10);
        assert_eq!(s.data_version().unwrap(), 1);
    }

    #[test]
    fn round_trips_records_in_order() {
        let (_d, s) = store();
        let mut recs = vec![perf("B", 2, 10.3, None), perf("A", 1, 10.2, Some(-1.2)), perf("A", 0, 10.1, Some(1.9))];
        recs[1].reaction_time_s = Some(0.143);
        recs[1].rank = Some(3);
        s.upsert_performances(&recs).unwrap();
        let hs = s.query_slice(&slice()).unwrap();
        assert_eq!(hs.len(), 2);
        assert_eq!(hs[0].athlete_id, "A");
        assert_eq!(hs[0].performances, vec![recs[2].clone(), recs[1].clone()]);
        assert_eq!(hs[1].performances, vec![recs[0].clone()]);
    }

    #[test]
    fn illegal_wind_filter() {
        let (_d, s) = store();
        let mut illegal = perf("B", 1, 10.0, Some(2.1));
        illegal.wind_legal = false;
        s.upsert_performances(&[perf("A", 0, 10.1, Some(2.0)), illegal]).unwrap();
        assert_eq!(s.query_slice(&slice()).unwrap().len(), 1);
        let all: EventSlice = "100m-men:men:2010-01-01:2025-12-31:all".parse().unwrap();
        assert_eq!(s.query_slice(&all).unwrap().len(), 2);
        let women: EventSlice = "100m-men:women:2010-01-01:2025-12-31:all".parse().unwrap();
        assert!(s.query_slice(&women).unwrap().is_empty());
    }

    #[test]
    fn stub_competitions_keep_integrity() {
        let (_d, s) = store();
        s.upsert_performances(&[perf("A", 0, 10.1, None)]).unwrap();
        let comps = s.competitions(&["C0"]).unwrap();
        assert_eq!(comps["C0"].event_codes.len(), 1);
        let real = CompetitionRecord {
            competition_id: "C0".into(),
            name: "Meeting".into(),
            date: comps["C0"].date,
            country: "USA".into(),
            venue: "Eugene".into(),
            category: Some("tour".into()),
            event_codes: ["100m-men".to_string()].into(),
        };
        assert_eq!(s.upsert_competitions(&[real.clone()]).unwrap(), 1);
        assert_eq!(s.upsert_competitions(&[real]).unwrap(), 0);
        assert_eq!(s.detect_context(&slice()).unwrap().competition_levels["C0"], 3);
    }

    #[test]
    fn sanctions_keep_longer_interval() {
        let (_d, s) = store();
        let d = |m| NaiveDate::from_ymd_opt(2020, m, 1).unwrap();
        let rec = |end| SanctionRecord {
            athlete_id: "A".into(),
            sanction_start: d(1),
            sanction_end: end,
            source_note: String::new(),
        };
        s.upsert_sanctions(&[rec(Some(d(3)))]).unwrap();
        s.upsert_sanctions(&[rec(Some(d(2)))]).unwrap();
        assert_eq!(s.sanctions().unwrap()[0].sanction_end, Some(d(3)));
        s.upsert_sanctions(&[rec(None)]).unwrap();
        s.upsert_sanctions(&[rec(Some(d(6)))]).unwrap();
        let all = s.sanctions().unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].sanction_end, None);
        assert!(s.athlete_exists("A").unwrap());
        assert!(!s.athlete_exists("Z").unwrap());
    }

    #[test]
    fn screen_cache_hits_and_invalidates() {
        let (_d, s) = store();
        let mut recs: Vec<_> = (0..12).map(|i| perf("A", i, 10.5, None)).collect();
        recs.push(perf("A", 12, 9.5, None));
        recs.extend((0..6).map(|i| perf("B", i, 10.0 + 0.1 * i as f64, None)));
        s.upsert_performances(&recs).unwrap();
        let sl = slice();
        let cfg = DetectorConfig::default();
        assert!(matches!(
            s.screen(&sl, MethodId::Mad, None),
            Err(StoreError::NotMaterialized { .. })
        ));
        let result = run_detector(MethodId::ZScore, &s.query_slice(&sl).unwrap(), &cfg).unwrap();
        s.materialize(&sl, &cfg, &result).unwrap();
        let a = s.screen(&sl, MethodId::ZScore, None).unwrap();
        let b = s.screen(&sl, MethodId::ZScore, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.cache_stats().hits, 1);
        let page: ScreeningPage = serde_json::from_slice(&a).unwrap();
        assert_eq!(page.athletes.len(), 1);
        assert_eq!(page.athletes[0].athlete_id, "A");

        let cfg2 = DetectorConfig { z_threshold: 2.5, ..cfg };
        s.materialize(&sl, &cfg2, &result).unwrap();
        s.screen(&sl, MethodId::ZScore, None).unwrap();
        assert_eq!(s.cache_stats().misses, 2);
        let m = s.materialized(&sl, MethodId::ZScore).unwrap().unwrap();
        assert_eq!(m.config_fingerprint, cfg2.fingerprint());
        assert_eq!(m.result, result);
    }

    #[test]
    fn list_slices_reports_extent() {
        let (_d, s) = store();
        s.upsert_performances(&[perf("A", 0, 10.1, None), perf("B", 30, 10.2, None)]).unwrap();
        let slices = s.list_slices().unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].athletes, 2);
        let parsed: EventSlice = slices[0].slice.parse().unwrap();
        assert_eq!(s.query_slice(&parsed).unwrap().len(), 2);
    }
}

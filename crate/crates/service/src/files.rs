//! File ingestion shared by the `ingest` and `generate --ingest` verbs.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use trackscreen_core::ingest::{detect_file_kind, load_competitions, load_results, load_sanctions, FileKind, LoadReport};
use trackscreen_core::Store;

#[derive(Debug, Clone, Serialize)]
pub struct FileOutcome {
    pub path: PathBuf,
    pub kind: &'static str,
    pub report: LoadReport,
    /// Rows that were new to the store.
    pub stored: usize,
}

fn kind_of(path: &Path) -> anyhow::Result<FileKind> {
    let mut header = String::new();
    BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?)
        .read_line(&mut header)?;
    match detect_file_kind(header.trim_start_matches('\u{feff}')) {
        Some(k) => Ok(k),
        None => bail!("{}: header matches no known file layout", path.display()),
    }
}

/// Loads each file by its header. Competitions go in first so that result rows link to
/// full metadata, sanctions last.
pub fn ingest_files(store: &Store, paths: &[PathBuf]) -> anyhow::Result<Vec<FileOutcome>> {
    let mut kinds = Vec::new();
    for p in paths {
        kinds.push((kind_of(p)?, p));
    }
    let rank = |k: &FileKind| match k {
        FileKind::Competitions => 0,
        FileKind::Results => 1,
        FileKind::Sanctions => 2,
    };
    kinds.sort_by_key(|(k, _)| rank(k));
    let mut out = Vec::new();
    for (kind, path) in kinds {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let outcome = match kind {
            FileKind::Competitions => {
                let (records, report) = load_competitions(file)?;
                FileOutcome { path: path.clone(), kind: "competitions", stored: store.upsert_competitions(&records)?, report }
            }
            FileKind::Results => {
                let (records, report) = load_results(file)?;
                FileOutcome { path: path.clone(), kind: "results", stored: store.upsert_performances(&records)?, report }
            }
            FileKind::Sanctions => {
                let (records, report) = load_sanctions(file)?;
                FileOutcome { path: path.clone(), kind: "sanctions", stored: store.upsert_sanctions(&records)?, report }
            }
        };
        tracing::info!(path = %path.display(), kind = outcome.kind, stored = outcome.stored, "ingested");
        out.push(outcome);
    }
    Ok(out)
}

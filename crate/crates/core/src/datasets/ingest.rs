use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    /// Epoch seconds.
    pub timestamp: u64,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        Self { user_id: user.into(), item_id: item.into(), timestamp }
    }
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub records: Vec<InteractionRecord>,
    pub malformed: usize,
    /// Well-formed lines dropped by the minimum-timestamp filter.
    pub before_min_timestamp: usize,
}

/// Reads headerless `user \t item \t timestamp` lines.
///
/// Lines with the wrong field count, an empty id or a timestamp that is not
/// a non-negative integer are skipped and counted. Blank lines are ignored.
pub fn parse_interactions(reader: impl Read, min_timestamp: Option<u64>) -> Result<LoadReport, DataError> {
    let mut records = Vec::new();
    let mut malformed = 0;
    let mut before = 0;
    for line in BufReader::new(reader).lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = match fields.as_slice() {
            [u, i, t] if !u.is_empty() && !i.is_empty() => t.trim().parse::<u64>().ok().map(|ts| (u, i, ts)),
            _ => None,
        };
        match parsed {
            Some((u, i, ts)) => {
                if min_timestamp.is_some_and(|min| ts < min) {
                    before += 1;
                    continue;
                }
                records.push(InteractionRecord::new(*u, *i, ts));
            }
            None => malformed += 1,
        }
    }
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed interaction lines");
    }
    if records.is_empty() {
        return Err(DataError::Empty("no valid interaction records".into()));
    }
    Ok(LoadReport { records, malformed, before_min_timestamp: before })
}

pub fn load_interactions(path: impl AsRef<Path>, min_timestamp: Option<u64>) -> Result<LoadReport, DataError> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_interactions(file, min_timestamp)
}

pub fn write_interactions(records: &[InteractionRecord], mut w: impl std::io::Write) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.user_id, r.item_id, r.timestamp)?;
    }
    Ok(())
}

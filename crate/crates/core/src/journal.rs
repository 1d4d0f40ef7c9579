//! JSON-lines journal of timestamped protocol lines.
//!
//! Each record is one object per line: `{"line":"heartBeat 0x00","t":12}`,
//! where `t` is milliseconds since the start of the recording and `line` is
//! the raw protocol line without its newline.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net_state::Millis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: Millis,
    pub line: String,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o: {0}")]
    Io(#[from] io::Error),
    #[error("journal line {line_no}: {reason}")]
    Malformed { line_no: usize, reason: String },
}

pub struct JournalWriter<W: Write> {
    out: W,
    last_t: Millis,
}

impl JournalWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> JournalWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, last_t: 0 }
    }

    /// Append one record and flush it. Timestamps are clamped so they never
    /// go backwards within a journal.
    pub fn append(&mut self, t: Millis, line: &str) -> io::Result<()> {
        let t = t.max(self.last_t);
        self.last_t = t;
        let record = EventRecord {
            t,
            line: line.trim_end_matches(['\r', '\n']).to_string(),
        };
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, JournalError> {
    parse_journal(BufReader::new(File::open(path)?))
}

pub fn parse_journal(reader: impl BufRead) -> Result<Vec<EventRecord>, JournalError> {
    let mut records = Vec::new();
    let mut last_t = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord =
            serde_json::from_str(&line).map_err(|e| JournalError::Malformed {
                line_no,
                reason: e.to_string(),
            })?;
        if record.t < last_t {
            return Err(JournalError::Malformed {
                line_no,
                reason: format!("timestamp {} goes backwards from {last_t}", record.t),
            });
        }
        if record.line.contains('\n') {
            return Err(JournalError::Malformed {
                line_no,
                reason: "record line contains a newline".into(),
            });
        }
        last_t = record.t;
        records.push(record);
    }
    Ok(records)
}

pub fn write_journal(out: impl Write, records: &[EventRecord]) -> io::Result<()> {
    let mut writer = JournalWriter::new(out);
    for r in records {
        writer.append(r.t, &r.line)?;
    }
    Ok(())
}

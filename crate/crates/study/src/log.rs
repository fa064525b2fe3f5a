//! Append-only JSON-lines event log. Every record is flushed to disk before
//! the request that produced it is acknowledged.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeRecord {
    pub serve_id: u64,
    pub participant_id: String,
    pub task_id: String,
    /// Candidate ids in the order they were shown.
    pub permutation: Vec<String>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub participant_id: String,
    pub task_id: String,
    pub selected: Vec<String>,
    pub permutation: Vec<String>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Serve(ServeRecord),
    Judgment(JudgmentRecord),
}

#[derive(Debug)]
pub struct EventLog {
    file: File,
    path: PathBuf,
}

impl EventLog {
    /// Opens or creates the log and returns the events already in it. A torn
    /// final line left by a crash mid-write is cut off.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(Self, Vec<LogEvent>)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut events = Vec::new();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                if !line.ends_with('\n') {
                    break;
                }
                let event = serde_json::from_str(line.trim_end()).map_err(|e| {
                    io::Error::new(io::ErrorKind::InvalidData, format!("{}:{lineno}: {e}", path.display()))
                })?;
                events.push(event);
                good_len += n as u64;
            }
        }
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((Self { file, path }, events))
    }

    pub fn append(&mut self, event: &LogEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every complete event without opening the log for writing.
pub fn read_events(path: impl AsRef<Path>) -> io::Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.ends_with('\n') {
            break;
        }
        out.push(serde_json::from_str(line.trim_end()).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

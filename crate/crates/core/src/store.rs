// SPDX-License-Identifier: Apache-2.0

//! Embedded key-value persistence with an append-only journal.
//!
//! Journal layout: the first line is the magic header `WTCAT1`, every
//! following line is one JSON record, either
//! `{"op":"put","table":..,"key":..,"value":..}` or
//! `{"op":"del","table":..,"key":..}`. Opening a journal replays it and
//! rewrites a compacted copy. A torn trailing line (crash mid-append) is
//! dropped on replay.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const JOURNAL_MAGIC: &str = "WTCAT1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal {0} does not start with the {JOURNAL_MAGIC} header")]
    BadMagic(PathBuf),
    #[error("corrupt journal record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("record encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Record {
    Put { table: String, key: String, value: Value },
    Del { table: String, key: String },
}

type Tables = BTreeMap<String, BTreeMap<String, Value>>;

#[derive(Debug)]
pub struct Store {
    tables: RwLock<Tables>,
    journal: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl Store {
    /// Volatile store, nothing survives the process.
    pub fn in_memory() -> Self {
        Self {
            tables: RwLock::new(Tables::new()),
            journal: None,
            path: None,
        }
    }

    /// Opens (or creates) the journal at `path`, replays it and compacts it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tables = if path.exists() { replay(&path)? } else { Tables::new() };

        let tmp = path.with_extension("compact");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            writeln!(out, "{JOURNAL_MAGIC}")?;
            for (table, rows) in &tables {
                for (key, value) in rows {
                    let rec = Record::Put {
                        table: table.clone(),
                        key: key.clone(),
                        value: value.clone(),
                    };
                    serde_json::to_writer(&mut out, &rec)?;
                    out.write_all(b"\n")?;
                }
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, &path)?;

        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            tables: RwLock::new(tables),
            journal: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn is_persistent(&self) -> bool {
        self.journal.is_some()
    }

    fn append(&self, rec: &Record) -> Result<(), StoreError> {
        if let Some(journal) = &self.journal {
            let mut out = journal.lock();
            serde_json::to_writer(&mut *out, rec)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }

    pub fn put<T: Serialize>(&self, table: &str, key: &str, value: &T) -> Result<(), StoreError> {
        let value = serde_json::to_value(value)?;
        // Hold the table lock across the append so journal order matches
        // in-memory order.
        let mut tables = self.tables.write();
        let rec = Record::Put {
            table: table.to_string(),
            key: key.to_string(),
            value,
        };
        self.append(&rec)?;
        if let Record::Put { value, .. } = rec {
            tables
                .entry(table.to_string())
                .or_default()
                .insert(key.to_string(), value);
        }
        Ok(())
    }

    pub fn delete(&self, table: &str, key: &str) -> Result<(), StoreError> {
        let mut tables = self.tables.write();
        self.append(&Record::Del {
            table: table.to_string(),
            key: key.to_string(),
        })?;
        if let Some(rows) = tables.get_mut(table) {
            rows.remove(key);
        }
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, table: &str, key: &str) -> Result<Option<T>, StoreError> {
        let tables = self.tables.read();
        match tables.get(table).and_then(|rows| rows.get(key)) {
            Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
            None => Ok(None),
        }
    }

    /// All rows of `table`, ordered by key.
    pub fn scan<T: DeserializeOwned>(&self, table: &str) -> Result<Vec<(String, T)>, StoreError> {
        let tables = self.tables.read();
        let Some(rows) = tables.get(table) else {
            return Ok(Vec::new());
        };
        rows.iter()
            .map(|(k, v)| Ok((k.clone(), serde_json::from_value(v.clone())?)))
            .collect()
    }

    pub fn len(&self, table: &str) -> usize {
        self.tables.read().get(table).map_or(0, BTreeMap::len)
    }
}

fn replay(path: &Path) -> Result<Tables, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate().peekable();
    match lines.next() {
        Some((_, Ok(first))) if first == JOURNAL_MAGIC => {}
        Some((_, Err(e))) => return Err(e.into()),
        None => return Ok(Tables::new()),
        Some(_) => return Err(StoreError::BadMagic(path.to_path_buf())),
    }
    let mut tables = Tables::new();
    while let Some((idx, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = match serde_json::from_str(&line) {
            Ok(rec) => rec,
            Err(_) if lines.peek().is_none() => {
                log::warn!("dropping torn trailing journal record at line {}", idx + 1);
                break;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: idx + 1,
                    reason: e.to_string(),
                })
            }
        };
        match rec {
            Record::Put { table, key, value } => {
                tables.entry(table).or_default().insert(key, value);
            }
            Record::Del { table, key } => {
                if let Some(rows) = tables.get_mut(&table) {
                    rows.remove(&key);
                }
            }
        }
    }
    Ok(tables)
}

//! Durable chunk-list metadata files.
//!
//! One chunk list is emitted per (rank, epoch) at every sync and at close.
//! It enumerates the sealed segments of that epoch and is the unit of both
//! writeback and recovery.
//!
//! Format (UTF-8, LF line endings):
//!
//! ```text
//! <segment_name>\t<offset>\t<length>\n     (0..n records)
//! #count=<n> crc32=<hex8>\n                (footer)
//! ```
//!
//! The crc covers every byte before the footer line. Records keep their
//! in-memory prepend order, so a list reads newest-sealed-first; consumers
//! must not assume offset order.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

/// One sealed segment: which cache file holds the bytes, and where they land
/// in the eventual shared file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkRecord {
    pub segment_name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Error)]
pub enum ChunkListError {
    #[error("chunk list footer missing or malformed")]
    BadFooter,
    #[error("chunk list record {0} is malformed")]
    BadRecord(usize),
    #[error("chunk list record count mismatch: footer says {footer}, found {found}")]
    CountMismatch { footer: u64, found: u64 },
    #[error("chunk list crc mismatch: footer {footer:08x}, computed {computed:08x}")]
    CrcMismatch { footer: u32, computed: u32 },
    #[error("chunk list is not valid UTF-8")]
    NotUtf8,
}

/// Serializes records into the on-disk byte format.
pub fn encode(records: &[ChunkRecord]) -> Vec<u8> {
    let mut body = String::new();
    for rec in records {
        body.push_str(&rec.segment_name);
        body.push('\t');
        body.push_str(&rec.offset.to_string());
        body.push('\t');
        body.push_str(&rec.length.to_string());
        body.push('\n');
    }
    let crc = crc32fast::hash(body.as_bytes());
    let mut out = body.into_bytes();
    out.extend_from_slice(format!("#count={} crc32={:08x}\n", records.len(), crc).as_bytes());
    out
}

/// Parses and integrity-checks an encoded chunk list.
pub fn decode(bytes: &[u8]) -> Result<Vec<ChunkRecord>, ChunkListError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ChunkListError::NotUtf8)?;
    let body_end = match text.rfind("#count=") {
        Some(pos) if text[..pos].is_empty() || text[..pos].ends_with('\n') => pos,
        _ => return Err(ChunkListError::BadFooter),
    };
    let footer = text[body_end..]
        .strip_suffix('\n')
        .ok_or(ChunkListError::BadFooter)?;
    let (count, crc) = parse_footer(footer).ok_or(ChunkListError::BadFooter)?;

    let body = &text[..body_end];
    let computed = crc32fast::hash(body.as_bytes());
    if computed != crc {
        return Err(ChunkListError::CrcMismatch { footer: crc, computed });
    }

    let mut records = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let mut fields = line.split('\t');
        let (name, off, len) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(o), Some(l), None) if !n.is_empty() => (n, o, l),
            _ => return Err(ChunkListError::BadRecord(i)),
        };
        records.push(ChunkRecord {
            segment_name: name.to_string(),
            offset: off.parse().map_err(|_| ChunkListError::BadRecord(i))?,
            length: len.parse().map_err(|_| ChunkListError::BadRecord(i))?,
        });
    }
    if records.len() as u64 != count {
        return Err(ChunkListError::CountMismatch { footer: count, found: records.len() as u64 });
    }
    Ok(records)
}

fn parse_footer(line: &str) -> Option<(u64, u32)> {
    let rest = line.strip_prefix("#count=")?;
    let (count, crc) = rest.split_once(" crc32=")?;
    if crc.len() != 8 {
        return None;
    }
    Some((count.parse().ok()?, u32::from_str_radix(crc, 16).ok()?))
}

/// Reads and decodes a chunk-list file.
pub fn read_file(path: &Path) -> io::Result<Result<Vec<ChunkRecord>, ChunkListError>> {
    Ok(decode(&std::fs::read(path)?))
}

/// Writes the encoded list to `path` and flushes it to stable storage.
/// This is the staging half of the commit; the rename into the watch
/// directory happens separately so a crash in between loses only the event.
pub fn write_durable(path: &Path, records: &[ChunkRecord]) -> io::Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(&encode(records))?;
    f.sync_all()
}

/// Atomically publishes a staged list by renaming it into the watch
/// directory, then flushes the directory so the rename itself is durable.
pub fn commit(tmp: &Path, dest: &Path) -> io::Result<()> {
    std::fs::rename(tmp, dest)?;
    if let Some(dir) = dest.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

//! Cache-file naming scheme.
//!
//! Filenames carry everything recovery needs — target basename, epoch, rank
//! and (for segments) the byte offset in the eventual shared file — because
//! file creates and renames are atomic where file contents are not.
//!
//! Scheme:
//! - segment:    `<basename>.e<counter16hex>-<nonce16hex>.r<rank>.o<offset>.seg`
//! - chunk list: `<basename>.e<counter16hex>-<nonce16hex>.r<rank>.chunks`
//!
//! A chunk list is staged under a `.tmp` suffix in the cache root and
//! renamed into the `ready/` watch directory once durable.

use crate::epoch::EpochId;

/// Watch directory inside a cache directory; renames into it are the
/// writeback trigger.
pub const READY_DIR: &str = "ready";
/// Where a retaining syncer parks consumed chunk lists.
pub const DONE_DIR: &str = "done";
/// Where corrupt inputs are moved aside.
pub const QUARANTINE_DIR: &str = "quarantine";
/// Graceful-exit sentinel dropped in the watch directory.
pub const EXIT_SENTINEL: &str = "__staged_io_exit__";

pub const SEGMENT_SUFFIX: &str = ".seg";
pub const CHUNK_LIST_SUFFIX: &str = ".chunks";
pub const TEMP_SUFFIX: &str = ".tmp";

/// Environment variable selecting the node-local cache directory.
pub const CACHE_DIR_ENV: &str = "STAGEDIO_CACHE_DIR";

/// Last path component of a logical target name.
pub fn target_basename(target: &str) -> &str {
    target.rsplit('/').next().unwrap_or(target)
}

/// Checks that a target name can be embedded in cache file names and
/// chunk-list records (tab-separated, newline-delimited).
pub fn validate_target_name(target: &str) -> Result<(), &'static str> {
    if target.is_empty() {
        return Err("target name is empty");
    }
    let base = target_basename(target);
    if base.is_empty() {
        return Err("target name has an empty basename");
    }
    if base.contains(['\t', '\n', '\r']) {
        return Err("target basename contains tab or newline");
    }
    Ok(())
}

pub fn segment_name(base: &str, epoch: EpochId, rank: u32, offset: u64) -> String {
    format!("{base}.{}.r{rank}.o{offset}{SEGMENT_SUFFIX}", epoch.tag())
}

pub fn chunk_list_name(base: &str, epoch: EpochId, rank: u32) -> String {
    format!("{base}.{}.r{rank}{CHUNK_LIST_SUFFIX}", epoch.tag())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSegmentName {
    pub base: String,
    pub epoch: EpochId,
    pub rank: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedChunkListName {
    pub base: String,
    pub epoch: EpochId,
    pub rank: u32,
}

/// Parses a segment file name. The basename may itself contain dots, so the
/// fields are peeled off from the end.
pub fn parse_segment_name(name: &str) -> Option<ParsedSegmentName> {
    let rest = name.strip_suffix(SEGMENT_SUFFIX)?;
    let (rest, offset) = rsplit_field(rest, 'o')?;
    let (rest, rank) = rsplit_field(rest, 'r')?;
    let (base, tag) = rest.rsplit_once('.')?;
    let epoch = EpochId::parse_tag(tag)?;
    if base.is_empty() {
        return None;
    }
    Some(ParsedSegmentName {
        base: base.to_string(),
        epoch,
        rank: u32::try_from(rank).ok()?,
        offset,
    })
}

/// Parses a chunk-list file name.
pub fn parse_chunk_list_name(name: &str) -> Option<ParsedChunkListName> {
    let rest = name.strip_suffix(CHUNK_LIST_SUFFIX)?;
    let (rest, rank) = rsplit_field(rest, 'r')?;
    let (base, tag) = rest.rsplit_once('.')?;
    let epoch = EpochId::parse_tag(tag)?;
    if base.is_empty() {
        return None;
    }
    Some(ParsedChunkListName {
        base: base.to_string(),
        epoch,
        rank: u32::try_from(rank).ok()?,
    })
}

/// Splits `"<rest>.<marker><decimal>"` from the right.
fn rsplit_field(s: &str, marker: char) -> Option<(&str, u64)> {
    let (rest, field) = s.rsplit_once('.')?;
    let digits = field.strip_prefix(marker)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((rest, digits.parse().ok()?))
}

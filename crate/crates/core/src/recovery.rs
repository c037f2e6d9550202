//! Post-crash reconstruction from surviving caches.
//!
//! Scans node cache directories for chunk lists — committed ones in the
//! watch directory, consumed ones a retaining syncer parked under `done/`,
//! and temp-named lists stranded between flush and rename, which are
//! promoted when their footer checks out. Complete epochs (a list from
//! every rank) are replayed in epoch order through the same planning and
//! execution path the syncer uses; replaying is idempotent, so recovery can
//! run over a partially synced remote file and converge on the last
//! consistency point.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::{BackendLocator, PosixBackend, RetryPolicy, WritebackTarget};
use crate::chunklist::{self, ChunkRecord};
use crate::epoch::EpochId;
use crate::naming;
use crate::s3::{self, CoverageMap, ObjectSyncConfig, S3Client};
use crate::syncer::{execute_writeback, plan_writeback, SyncError};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("caches hold lists from different job nonces: {0:?}; clean stale caches first")]
    MixedNonces(Vec<u64>),
    #[error("two lists claim rank {rank} epoch counter {counter}")]
    AmbiguousInventory { rank: u32, counter: u64 },
    #[error("segment {segment} referenced by {list} is missing")]
    MissingSegment { segment: String, list: PathBuf },
    #[error("replay failed: {0}")]
    Replay(#[from] SyncError),
    #[error("object sync failed: {0}")]
    S3(#[from] s3::S3Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One usable chunk list found in a cache.
#[derive(Debug, Clone)]
pub struct ListEntry {
    pub path: PathBuf,
    /// Directory segment names resolve against.
    pub cache_root: PathBuf,
    pub base: String,
    pub rank: u32,
    pub epoch: EpochId,
    /// Found as a temp-named list and promoted (crash between flush and
    /// rename lost only the event).
    pub promoted: bool,
    pub records: Vec<ChunkRecord>,
}

/// Everything a cache scan learned.
#[derive(Debug, Default)]
pub struct Inventory {
    pub lists: Vec<ListEntry>,
    /// Lists that failed integrity checks, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
    /// Segments on disk that no usable list references (writes that never
    /// reached a close or sync).
    pub orphan_segments: Vec<PathBuf>,
}

impl Inventory {
    /// Lists grouped by epoch counter, ascending.
    pub fn by_epoch(&self) -> BTreeMap<u64, Vec<&ListEntry>> {
        let mut out: BTreeMap<u64, Vec<&ListEntry>> = BTreeMap::new();
        for entry in &self.lists {
            out.entry(entry.epoch.counter).or_default().push(entry);
        }
        out
    }

    pub fn job_nonces(&self) -> BTreeSet<u64> {
        self.lists.iter().map(|l| l.epoch.job_nonce).collect()
    }
}

/// Scans cache directories, promoting valid temp lists and reporting
/// anomalies. Nothing here is fatal; recovery decides later what is usable.
pub fn scan(cache_dirs: &[PathBuf]) -> Result<Inventory, RecoveryError> {
    let mut inv = Inventory::default();
    let mut segments_on_disk: Vec<PathBuf> = Vec::new();

    for cache_root in cache_dirs {
        let ready = cache_root.join(naming::READY_DIR);
        let done = ready.join(naming::DONE_DIR);

        for entry in fs::read_dir(cache_root)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(naming::SEGMENT_SUFFIX) {
                segments_on_disk.push(entry.path());
            } else if let Some(stem) = name.strip_suffix(naming::TEMP_SUFFIX) {
                if stem.ends_with(naming::CHUNK_LIST_SUFFIX) {
                    collect_list(&entry.path(), stem, cache_root, true, &mut inv)?;
                }
            }
        }
        for dir in [&ready, &done] {
            match fs::read_dir(dir) {
                Ok(entries) => {
                    for entry in entries {
                        let entry = entry?;
                        if !entry.file_type()?.is_file() {
                            continue;
                        }
                        let name = entry.file_name().to_string_lossy().into_owned();
                        if name.ends_with(naming::CHUNK_LIST_SUFFIX) {
                            collect_list(&entry.path(), &name, cache_root, false, &mut inv)?;
                        }
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    let referenced: HashSet<&str> = inv
        .lists
        .iter()
        .flat_map(|l| l.records.iter())
        .map(|r| r.segment_name.as_str())
        .collect();
    inv.orphan_segments = segments_on_disk
        .into_iter()
        .filter(|p| {
            p.file_name()
                .map(|n| !referenced.contains(n.to_string_lossy().as_ref()))
                .unwrap_or(true)
        })
        .collect();
    Ok(inv)
}

fn collect_list(
    path: &Path,
    logical_name: &str,
    cache_root: &Path,
    promoted: bool,
    inv: &mut Inventory,
) -> Result<(), RecoveryError> {
    let Some(parsed) = naming::parse_chunk_list_name(logical_name) else {
        inv.rejected.push((path.to_path_buf(), "unparsable list name".into()));
        return Ok(());
    };
    match chunklist::decode(&fs::read(path)?) {
        Ok(records) => inv.lists.push(ListEntry {
            path: path.to_path_buf(),
            cache_root: cache_root.to_path_buf(),
            base: parsed.base,
            rank: parsed.rank,
            epoch: parsed.epoch,
            promoted,
            records,
        }),
        Err(e) => inv.rejected.push((path.to_path_buf(), e.to_string())),
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RecoveryOptions {
    pub world_size: usize,
    pub dry_run: bool,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, Default)]
pub struct RecoveryOutcome {
    /// Epoch counters replayed, in order.
    pub replayed_epochs: Vec<u64>,
    /// The consistency point reached: the last complete epoch counter.
    pub consistency_counter: Option<u64>,
    /// First epoch counter skipped because some rank's list is missing.
    pub stopped_at_partial: Option<u64>,
    pub lists_replayed: u64,
    pub bytes_written: u64,
}

/// Replays complete epochs in order against the backend. An epoch counter
/// entirely absent from the inventory was fully synced and deleted before
/// the crash; replay continues past it. A partially present epoch stops
/// recovery: it never reached its consistency point.
pub fn recover(
    inv: &Inventory,
    backend: &BackendLocator,
    opts: &RecoveryOptions,
) -> Result<RecoveryOutcome, RecoveryError> {
    let nonces = inv.job_nonces();
    if nonces.len() > 1 {
        return Err(RecoveryError::MixedNonces(nonces.into_iter().collect()));
    }

    let by_epoch = inv.by_epoch();
    let mut outcome = RecoveryOutcome::default();
    let mut replayable: Vec<&ListEntry> = Vec::new();
    for (&counter, lists) in &by_epoch {
        let mut ranks = BTreeSet::new();
        for l in lists {
            if !ranks.insert(l.rank) {
                return Err(RecoveryError::AmbiguousInventory { rank: l.rank, counter });
            }
        }
        if ranks.len() != opts.world_size {
            outcome.stopped_at_partial = Some(counter);
            break;
        }
        outcome.replayed_epochs.push(counter);
        outcome.consistency_counter = Some(counter);
        replayable.extend(lists.iter().copied());
    }

    // A complete list whose segment vanished is a hard error: the data is
    // genuinely gone and the epoch cannot be reproduced.
    for entry in &replayable {
        for rec in &entry.records {
            let seg = entry.cache_root.join(&rec.segment_name);
            if !seg.exists() {
                return Err(RecoveryError::MissingSegment {
                    segment: rec.segment_name.clone(),
                    list: entry.path.clone(),
                });
            }
        }
    }

    if opts.dry_run {
        outcome.lists_replayed = replayable.len() as u64;
        return Ok(outcome);
    }

    match backend {
        BackendLocator::Posix { path } => {
            let mut target = PosixBackend::open(path, None)?;
            for entry in &replayable {
                let plan = plan_writeback(&entry.records)
                    .map_err(|e| SyncError::Io(std::io::Error::other(e.to_string())))?;
                outcome.bytes_written +=
                    execute_writeback(&plan, &entry.cache_root, &mut target, &opts.retry)?;
                outcome.lists_replayed += 1;
            }
            target.flush().map_err(SyncError::Io)?;
        }
        BackendLocator::S3(loc) => {
            // Objects are immutable: accumulate every replayed epoch in
            // order, then commit once through the multipart/fallback route.
            let mut coverage = CoverageMap::new();
            {
                let mut sink = AccumSink(&mut coverage);
                for entry in &replayable {
                    let plan = plan_writeback(&entry.records)
                        .map_err(|e| SyncError::Io(std::io::Error::other(e.to_string())))?;
                    outcome.bytes_written +=
                        execute_writeback(&plan, &entry.cache_root, &mut sink, &opts.retry)?;
                    outcome.lists_replayed += 1;
                }
            }
            let client = S3Client::new(loc.clone()).with_retry(opts.retry);
            s3::sync_object(&client, &coverage, &ObjectSyncConfig::solo())?;
        }
    }
    Ok(outcome)
}

struct AccumSink<'a>(&'a mut CoverageMap);

impl WritebackTarget for AccumSink<'_> {
    fn write_range(&mut self, offset: u64, data: &[u8]) -> std::io::Result<()> {
        self.0.insert(offset, data);
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }

    fn bytes_written(&self) -> u64 {
        self.0.covered_bytes()
    }
}

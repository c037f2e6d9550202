//! Per-node writeback daemon.
//!
//! Watches a node's `ready/` directory for chunk lists renamed in by the
//! cache engine, consumes them strictly in arrival order, aggregates each
//! list's records into contiguous runs, and populates the remote shared
//! file. One writeback is in flight at a time per node, so epoch ordering
//! reduces to FIFO. Inputs are deleted (or parked under `done/` with
//! `--retain`) only after the backend has acknowledged durability.
//!
//! The watcher polls the directory; renames into it stay the atomic commit
//! either way. Within one scan batch, names are ordered by (epoch, rank),
//! which matches any arrival order the collective protocol can produce.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{BackendLocator, PosixBackend, RetryPolicy, WritebackTarget};
use crate::chunklist::{self, ChunkRecord, ChunkListError};
use crate::naming;
use crate::s3::{self, CoverageMap, ObjectSyncConfig, S3Client};
use crate::throttle::TokenBucket;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("watch directory {0} is unusable: {1}")]
    Watch(PathBuf, #[source] std::io::Error),
    #[error("backend write failed permanently: {0}")]
    BackendGaveUp(#[source] std::io::Error),
    #[error("object sync failed: {0}")]
    S3(#[from] s3::S3Error),
    #[error("stopped before the exit sentinel arrived")]
    Stopped,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why a chunk list was moved aside instead of consumed.
#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("unparsable chunk-list name")]
    BadName,
    #[error(transparent)]
    Format(#[from] ChunkListError),
    #[error("referenced segment {0} is missing")]
    MissingSegment(String),
    #[error("segment {name} is {on_disk} bytes, record says {recorded}")]
    WrongLength { name: String, on_disk: u64, recorded: u64 },
    #[error("records overlap inside one list at offset {0}")]
    OverlapInList(u64),
    #[error("records name different targets: {0} vs {1}")]
    MixedTargets(String, String),
}

/// Deterministic crash injection for durability drills; only meaningful when
/// the syncer runs as its own process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncFailPoint {
    /// Abort when about to consume the n-th chunk list (0-based).
    BeforeConsume(u64),
    /// Abort in the middle of executing the n-th chunk list, after its first
    /// run reached the backend but before the flush and the deletes.
    MidWriteback(u64),
}

impl SyncFailPoint {
    /// Parses `consume:N` or `exec:N`.
    pub fn parse(s: &str) -> Option<SyncFailPoint> {
        let (kind, n) = s.split_once(':')?;
        let n = n.parse().ok()?;
        match kind {
            "consume" => Some(SyncFailPoint::BeforeConsume(n)),
            "exec" => Some(SyncFailPoint::MidWriteback(n)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyncerConfig {
    pub watch_dir: PathBuf,
    pub backend: BackendLocator,
    pub node_id: usize,
    pub nodes: usize,
    pub retain: bool,
    pub bw_limit: Option<u64>,
    pub poll_interval: Duration,
    /// Shared exchange directory for multi-node object writeback.
    pub coord_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub fail_point: Option<SyncFailPoint>,
    /// Cooperative stop for in-process syncers (harness drills). A stopped
    /// syncer exits with [`SyncError::Stopped`], leaving all state as-is.
    pub stop: Option<Arc<AtomicBool>>,
}

impl SyncerConfig {
    pub fn new(watch_dir: &Path, backend: BackendLocator) -> SyncerConfig {
        SyncerConfig {
            watch_dir: watch_dir.to_path_buf(),
            backend,
            node_id: 0,
            nodes: 1,
            retain: false,
            bw_limit: None,
            poll_interval: Duration::from_millis(100),
            coord_dir: None,
            retry: RetryPolicy::default(),
            fail_point: None,
            stop: None,
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct SyncerReport {
    pub lists_processed: u64,
    pub runs_written: u64,
    pub bytes_written: u64,
    pub quarantined: u64,
}

/// A chunk list observed in the watch directory.
#[derive(Debug, Clone)]
pub struct WritebackEvent {
    pub chunk_list_path: PathBuf,
    pub arrival_seq: u64,
}

/// Contiguous byte spans to transfer, built from one chunk list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpan {
    pub segment_name: String,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub target_offset: u64,
    pub length: u64,
    pub spans: Vec<SourceSpan>,
}

/// Aggregated writeback layout: runs sorted by offset, adjacent records
/// merged, every record covered exactly once. The target name has the epoch
/// and rank decorations stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WritebackPlan {
    pub target_name: String,
    pub runs: Vec<Run>,
}

impl WritebackPlan {
    pub fn total_bytes(&self) -> u64 {
        self.runs.iter().map(|r| r.length).sum()
    }
}

/// Reads, decodes and cross-checks a chunk list against the segments that
/// sit next to it in the cache.
pub fn load_chunk_list(
    list_path: &Path,
    cache_root: &Path,
) -> Result<Result<Vec<ChunkRecord>, IntegrityError>, std::io::Error> {
    let bytes = fs::read(list_path)?;
    let records = match chunklist::decode(&bytes) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e.into())),
    };
    for rec in &records {
        match fs::metadata(cache_root.join(&rec.segment_name)) {
            Ok(meta) => {
                if meta.len() != rec.length {
                    return Ok(Err(IntegrityError::WrongLength {
                        name: rec.segment_name.clone(),
                        on_disk: meta.len(),
                        recorded: rec.length,
                    }));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Err(IntegrityError::MissingSegment(rec.segment_name.clone())))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Ok(records))
}

/// Sorts records by target offset and merges the contiguous ones. Records
/// within one (rank, epoch) list must be disjoint.
pub fn plan_writeback(records: &[ChunkRecord]) -> Result<WritebackPlan, IntegrityError> {
    let mut target_name = String::new();
    let mut sorted: Vec<&ChunkRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.offset);

    let mut runs: Vec<Run> = Vec::new();
    for rec in sorted {
        let parsed = naming::parse_segment_name(&rec.segment_name)
            .ok_or(IntegrityError::BadName)?;
        if target_name.is_empty() {
            target_name = parsed.base.clone();
        } else if target_name != parsed.base {
            return Err(IntegrityError::MixedTargets(target_name, parsed.base));
        }
        match runs.last_mut() {
            Some(last) if last.target_offset + last.length > rec.offset => {
                return Err(IntegrityError::OverlapInList(rec.offset));
            }
            Some(last) if last.target_offset + last.length == rec.offset => {
                last.length += rec.length;
                last.spans.push(SourceSpan {
                    segment_name: rec.segment_name.clone(),
                    length: rec.length,
                });
            }
            _ => runs.push(Run {
                target_offset: rec.offset,
                length: rec.length,
                spans: vec![SourceSpan {
                    segment_name: rec.segment_name.clone(),
                    length: rec.length,
                }],
            }),
        }
    }
    Ok(WritebackPlan { target_name, runs })
}

/// Pushes every run of a plan to the backend. Runs are idempotent
/// overwrites, so a retried or repeated execution converges on the same
/// bytes. Does not flush; the caller owns the durability point.
pub fn execute_writeback(
    plan: &WritebackPlan,
    cache_root: &Path,
    target: &mut dyn WritebackTarget,
    retry: &RetryPolicy,
) -> Result<u64, SyncError> {
    let mut bytes = 0;
    for run in &plan.runs {
        let mut data = Vec::with_capacity(run.length as usize);
        for span in &run.spans {
            let path = cache_root.join(&span.segment_name);
            let seg = fs::read(&path)?;
            data.extend_from_slice(&seg);
        }
        debug_assert_eq!(data.len() as u64, run.length);
        retry
            .run("backend write", || target.write_range(run.target_offset, &data))
            .map_err(SyncError::BackendGaveUp)?;
        bytes += run.length;
    }
    Ok(bytes)
}

enum Mode {
    Posix(PosixBackend),
    Object { client: S3Client, coverage: CoverageMap },
}

/// Daemon loop: watch, drain FIFO, exit cleanly on the sentinel.
pub fn run(cfg: &SyncerConfig) -> Result<SyncerReport, SyncError> {
    fs::create_dir_all(&cfg.watch_dir)
        .map_err(|e| SyncError::Watch(cfg.watch_dir.clone(), e))?;
    let cache_root = cfg
        .watch_dir
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.watch_dir.clone());

    let throttle = cfg.bw_limit.map(|bw| Arc::new(TokenBucket::new(bw)));
    let mut mode = match &cfg.backend {
        BackendLocator::Posix { path } => Mode::Posix(PosixBackend::open(path, throttle)?),
        BackendLocator::S3(loc) => Mode::Object {
            client: S3Client::new(loc.clone())
                .with_throttle(throttle)
                .with_retry(cfg.retry),
            coverage: CoverageMap::new(),
        },
    };

    let mut seen: HashSet<OsString> = HashSet::new();
    let mut report = SyncerReport::default();
    let mut arrival_seq = 0u64;
    let mut sentinel_seen = false;

    loop {
        if let Some(stop) = &cfg.stop {
            if stop.load(Ordering::SeqCst) {
                return Err(SyncError::Stopped);
            }
        }
        let batch = scan(&cfg.watch_dir, &mut seen, &mut sentinel_seen)?;
        if batch.is_empty() {
            if sentinel_seen {
                break;
            }
            std::thread::sleep(cfg.poll_interval);
            continue;
        }
        for name in batch {
            let event = WritebackEvent {
                chunk_list_path: cfg.watch_dir.join(&name),
                arrival_seq,
            };
            arrival_seq += 1;
            if let Some(SyncFailPoint::BeforeConsume(n)) = cfg.fail_point {
                if event.arrival_seq == n {
                    log::error!("fail point: aborting before consuming {}", name.to_string_lossy());
                    std::process::abort();
                }
            }
            process_event(cfg, &cache_root, &mut mode, &event, &mut report)?;
        }
        // Drain whatever arrived while we were busy before honoring the
        // sentinel: readdir during concurrent renames may miss a name once.
    }

    if let Mode::Object { client, coverage } = &mut mode {
        let sync_cfg = ObjectSyncConfig {
            node_id: cfg.node_id,
            nodes: cfg.nodes,
            coord_dir: cfg.coord_dir.clone(),
            poll: cfg.poll_interval.min(Duration::from_millis(20)),
            timeout: Duration::from_secs(120),
        };
        let object_report = s3::sync_object(client, coverage, &sync_cfg)?;
        report.bytes_written += client.bytes_uploaded();
        log::info!(
            "object sync done: mode {:?}, {} bytes, {} parts from this node",
            object_report.mode,
            object_report.object_size,
            object_report.uploaded_parts.len()
        );
        // Inputs outlive the upload decision; reclaim them only now.
        if !cfg.retain {
            reclaim_object_inputs(&cfg.watch_dir, &cache_root)?;
        }
    }
    Ok(report)
}

/// One scan of the watch directory: new chunk lists ordered by
/// (epoch counter, rank, name), which is consistent with arrival order.
fn scan(
    watch_dir: &Path,
    seen: &mut HashSet<OsString>,
    sentinel_seen: &mut bool,
) -> Result<Vec<OsString>, SyncError> {
    let mut batch: Vec<(u64, u32, OsString)> = Vec::new();
    for entry in fs::read_dir(watch_dir).map_err(|e| SyncError::Watch(watch_dir.into(), e))? {
        let entry = entry.map_err(|e| SyncError::Watch(watch_dir.into(), e))?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name();
        if name.to_string_lossy() == naming::EXIT_SENTINEL {
            *sentinel_seen = true;
            continue;
        }
        if !name.to_string_lossy().ends_with(naming::CHUNK_LIST_SUFFIX) {
            continue;
        }
        if seen.contains(&name) {
            continue;
        }
        let key = naming::parse_chunk_list_name(&name.to_string_lossy())
            .map(|p| (p.epoch.counter, p.rank))
            .unwrap_or((u64::MAX, u32::MAX));
        batch.push((key.0, key.1, name));
    }
    batch.sort();
    Ok(batch
        .into_iter()
        .map(|(_, _, name)| {
            seen.insert(name.clone());
            name
        })
        .collect())
}

fn process_event(
    cfg: &SyncerConfig,
    cache_root: &Path,
    mode: &mut Mode,
    event: &WritebackEvent,
    report: &mut SyncerReport,
) -> Result<(), SyncError> {
    let list_path = &event.chunk_list_path;
    let records = match load_chunk_list(list_path, cache_root)? {
        Ok(records) => records,
        Err(reason) => return quarantine(cfg, list_path, reason, report),
    };
    let plan = match plan_writeback(&records) {
        Ok(plan) => plan,
        Err(reason) => return quarantine(cfg, list_path, reason, report),
    };

    let bytes = match mode {
        Mode::Posix(backend) => {
            let bytes = execute_with_fail_point(cfg, &plan, cache_root, backend, event)?;
            backend.flush()?;
            bytes
        }
        Mode::Object { coverage, .. } => {
            // Objects are immutable: accumulate now, upload at the sentinel.
            let mut sink = CoverageSink(coverage);
            execute_writeback(&plan, cache_root, &mut sink, &cfg.retry)?
        }
    };
    report.lists_processed += 1;
    report.runs_written += plan.runs.len() as u64;
    report.bytes_written += bytes;

    let object_backend = matches!(mode, Mode::Object { .. });
    if object_backend {
        // Keep the inputs: the object is not durable until the collective
        // upload at the end of the job.
        return Ok(());
    }
    consume_inputs(cfg, cache_root, list_path, &records)
}

fn execute_with_fail_point(
    cfg: &SyncerConfig,
    plan: &WritebackPlan,
    cache_root: &Path,
    backend: &mut PosixBackend,
    event: &WritebackEvent,
) -> Result<u64, SyncError> {
    if let Some(SyncFailPoint::MidWriteback(n)) = cfg.fail_point {
        if event.arrival_seq == n {
            // Land the first run, skip the flush, die.
            if let Some(first) = plan.runs.first() {
                let partial = WritebackPlan {
                    target_name: plan.target_name.clone(),
                    runs: vec![first.clone()],
                };
                let _ = execute_writeback(&partial, cache_root, backend, &cfg.retry);
            }
            log::error!(
                "fail point: aborting mid-writeback of {}",
                event.chunk_list_path.display()
            );
            std::process::abort();
        }
    }
    execute_writeback(plan, cache_root, backend, &cfg.retry)
}

/// Delete-after-ack, or park under `done/` when retaining for recovery
/// drills so the backlog count still drains.
fn consume_inputs(
    cfg: &SyncerConfig,
    cache_root: &Path,
    list_path: &Path,
    records: &[ChunkRecord],
) -> Result<(), SyncError> {
    if cfg.retain {
        let done = cfg.watch_dir.join(naming::DONE_DIR);
        fs::create_dir_all(&done)?;
        fs::rename(list_path, done.join(list_path.file_name().unwrap()))?;
        return Ok(());
    }
    for rec in records {
        fs::remove_file(cache_root.join(&rec.segment_name))?;
    }
    fs::remove_file(list_path)?;
    Ok(())
}

fn quarantine(
    cfg: &SyncerConfig,
    list_path: &Path,
    reason: IntegrityError,
    report: &mut SyncerReport,
) -> Result<(), SyncError> {
    let qdir = cfg.watch_dir.join(naming::QUARANTINE_DIR);
    fs::create_dir_all(&qdir)?;
    let dest = qdir.join(list_path.file_name().unwrap());
    fs::rename(list_path, &dest)?;
    report.quarantined += 1;
    log::error!(
        "quarantined {} -> {}: {reason}",
        list_path.display(),
        dest.display()
    );
    Ok(())
}

/// After a successful object upload, drop everything the accumulated lists
/// referenced.
fn reclaim_object_inputs(watch_dir: &Path, cache_root: &Path) -> Result<(), SyncError> {
    for entry in fs::read_dir(watch_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name_str = name.to_string_lossy();
        if !entry.file_type()?.is_file() || !name_str.ends_with(naming::CHUNK_LIST_SUFFIX) {
            continue;
        }
        if let Ok(Ok(records)) = load_chunk_list(&entry.path(), cache_root) {
            for rec in &records {
                let _ = fs::remove_file(cache_root.join(&rec.segment_name));
            }
        }
        fs::remove_file(entry.path())?;
    }
    Ok(())
}

struct CoverageSink<'a>(&'a mut CoverageMap);

impl WritebackTarget for CoverageSink<'_> {
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

//! Workload harness: drives staged and baseline jobs at desk scale,
//! injects crashes at the interesting points, collects timing metrics, and
//! owns the independent oracle every result is compared against.

pub mod microbench;
pub mod oracle;
pub mod trace;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendLocator, LocatorError, PosixBackend, WritebackTarget};
use crate::collective::{Collective, CollectiveError, ThreadCollective};
use crate::engine::{EngineError, FailPoint};
use crate::facade::{FacadeError, FileView, JobConfig, JobGroup, OpenMode, OpenOutcome, RankIo};
use crate::naming;
use crate::syncer::{self, SyncerConfig, SyncerReport, SyncFailPoint, SyncError};
use crate::throttle::TokenBucket;
use oracle::OracleImage;
use trace::{fill_payload, generate_trace, TraceProgram, Verb};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad job descriptor: {0}")]
    Descriptor(String),
    #[error(transparent)]
    Locator(#[from] LocatorError),
    #[error("worker rank {rank} failed: {message}")]
    Worker { rank: usize, message: String },
    #[error("syncer failed: {0}")]
    Syncer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How rank blocks are laid out in the shared file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    #[default]
    Contiguous,
    Strided { stride: u64 },
}

/// Crash injection: which component dies, and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CrashPlan {
    /// The node's syncer aborts when about to consume its n-th chunk list.
    SyncerPreConsume { node: usize, list_index: u64 },
    /// The node's syncer aborts mid-writeback of its n-th chunk list: the
    /// first run has hit the backend, nothing was flushed or deleted.
    SyncerMidWriteback { node: usize, list_index: u64 },
    /// The rank halts between the final chunk list's durable flush and its
    /// rename into the watch directory.
    RankFlushRename { rank: usize },
    /// The rank halts before writing its final chunk list at all — a crash
    /// before close; that epoch never reaches its consistency point.
    RankSkipListWrite { rank: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobDescriptor {
    pub world_size: usize,
    pub nodes: usize,
    pub block_length: u64,
    pub blocks_per_output: u64,
    #[serde(default)]
    pub blocks_per_call: Option<u64>,
    #[serde(default)]
    pub view: ViewKind,
    #[serde(default)]
    pub displacement: u64,
    pub compute_ms: u64,
    pub cycles_per_output: u64,
    pub total_outputs: u64,
    #[serde(default = "one")]
    pub epochs_per_output: u64,
    pub seed: u64,
    /// Backend locator, `posix:PATH` or `s3:ENDPOINT/BUCKET/KEY`.
    pub backend: String,
    #[serde(default)]
    pub bw_limit: Option<u64>,
    pub staging: bool,
    /// Chunk lists allowed in a node's watch directory before close blocks;
    /// zero disables throttling.
    #[serde(default = "default_backlog")]
    pub backlog_limit: usize,
    #[serde(default)]
    pub crash: Option<CrashPlan>,
}

fn one() -> u64 {
    1
}

fn default_backlog() -> usize {
    crate::facade::DEFAULT_BACKLOG_LIMIT
}

impl JobDescriptor {
    /// A small contiguous two-rank job; tests override fields as needed.
    pub fn example() -> JobDescriptor {
        JobDescriptor {
            world_size: 2,
            nodes: 1,
            block_length: 4096,
            blocks_per_output: 2,
            blocks_per_call: None,
            view: ViewKind::Contiguous,
            displacement: 0,
            compute_ms: 0,
            cycles_per_output: 1,
            total_outputs: 2,
            epochs_per_output: 1,
            seed: 7,
            backend: String::new(),
            bw_limit: None,
            staging: true,
            backlog_limit: 0,
            crash: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<JobDescriptor, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Descriptor(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("descriptor serializes")
    }

    /// The epoch counter of the job's final close; zero for jobs that never
    /// open a file.
    pub fn final_epoch_counter(&self) -> u64 {
        (self.epochs_per_output.max(1) * self.total_outputs).saturating_sub(1)
    }

    /// All bytes the job pushes to the backend, rewrites included.
    pub fn total_written_bytes(&self) -> u64 {
        self.total_outputs
            * self.epochs_per_output
            * self.blocks_per_output
            * self.block_length
            * self.world_size as u64
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Descriptor(m.to_string()));
        if self.world_size == 0 || self.nodes == 0 || self.nodes > self.world_size {
            return bad("need 1 <= nodes <= world_size");
        }
        if self.block_length == 0
            || self.blocks_per_output == 0
            || self.cycles_per_output == 0
            || self.epochs_per_output == 0
        {
            return bad("counts must be positive");
        }
        if let Some(bpc) = self.blocks_per_call {
            if bpc == 0 {
                return bad("blocks_per_call must be positive when given");
            }
        }
        if let ViewKind::Strided { stride } = self.view {
            if stride < self.block_length * self.world_size as u64 {
                return bad("stride must be at least world_size * block_length");
            }
        }
        match &self.crash {
            Some(CrashPlan::SyncerPreConsume { node, .. })
            | Some(CrashPlan::SyncerMidWriteback { node, .. }) => {
                if *node >= self.nodes {
                    return bad("crash plan names a node outside the job");
                }
                if self.backlog_limit != 0 {
                    return bad("syncer crash drills need backlog_limit = 0");
                }
            }
            Some(CrashPlan::RankFlushRename { rank })
            | Some(CrashPlan::RankSkipListWrite { rank }) => {
                if *rank >= self.world_size {
                    return bad("crash plan names a rank outside the job");
                }
            }
            None => {}
        }
        if self.crash.is_some() && !self.staging {
            return bad("crash drills require staging");
        }
        if !self.staging {
            if let Ok(BackendLocator::S3(_)) = BackendLocator::parse(&self.backend) {
                return bad("baseline runs need ranged writes; use a posix backend");
            }
        }
        Ok(())
    }

    /// Node a rank lives on: block distribution.
    pub fn node_of_rank(&self, rank: usize) -> usize {
        rank * self.nodes / self.world_size
    }
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub end_to_end_s: f64,
    pub compute_s: f64,
    pub blocked_output_s: f64,
    pub remote_bytes: u64,
    pub segment_count: u64,
}

impl Metrics {
    pub fn csv_header() -> &'static str {
        "end_to_end_s,compute_s,blocked_output_s,remote_bytes,segment_count"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{},{}",
            self.end_to_end_s,
            self.compute_s,
            self.blocked_output_s,
            self.remote_bytes,
            self.segment_count
        )
    }
}

/// How the per-node syncers run.
#[derive(Debug, Clone)]
pub enum SyncerMode {
    /// Threads inside the harness process.
    InProcess,
    /// Separate OS processes; required for syncer crash plans, which abort
    /// the process at the fail point.
    Process { binary: PathBuf },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub work_dir: PathBuf,
    pub syncer_mode: SyncerMode,
    /// Keep consumed inputs (moved under `done/`) for recovery drills.
    pub retain: bool,
    pub syncer_poll: Duration,
}

impl RunOptions {
    pub fn in_process(work_dir: &Path) -> RunOptions {
        RunOptions {
            work_dir: work_dir.to_path_buf(),
            syncer_mode: SyncerMode::InProcess,
            retain: false,
            syncer_poll: Duration::from_millis(10),
        }
    }
}

#[derive(Debug)]
pub struct JobOutcome {
    pub metrics: Metrics,
    /// True when the job aborted at an injected rank crash.
    pub crashed: bool,
    pub cache_dirs: Vec<PathBuf>,
    pub syncer_reports: Vec<Option<SyncerReport>>,
}

/// An independent replay of the descriptor's trace: the expected bytes.
pub fn oracle_for(desc: &JobDescriptor) -> OracleImage {
    oracle::replay(&generate_trace(desc), desc.seed, None)
}

/// The expected bytes at a given consistency point.
pub fn oracle_up_to(desc: &JobDescriptor, counter: u64) -> OracleImage {
    oracle::replay(&generate_trace(desc), desc.seed, Some(counter))
}

struct WorkerOut {
    crashed: bool,
    compute: Duration,
    blocked: Duration,
    segments: u64,
}

/// Runs one job end to end: compute/output phases over the staged facade
/// (or directly against the backend for baselines), background syncers when
/// staging, crash injection per the descriptor's plan.
pub fn run_job(desc: &JobDescriptor, opts: &RunOptions) -> Result<JobOutcome, HarnessError> {
    desc.validate()?;
    let locator =
        BackendLocator::parse(&desc.backend).map_err(HarnessError::Locator)?;
    let program = generate_trace(desc);

    let cache_dirs: Vec<PathBuf> =
        (0..desc.nodes).map(|n| opts.work_dir.join(format!("cache/node{n}"))).collect();
    for d in &cache_dirs {
        fs::create_dir_all(d.join(naming::READY_DIR))?;
    }
    let staging_prefix = opts.work_dir.join("staged");
    let target = staging_prefix.join(match &locator {
        BackendLocator::Posix { path } => naming::target_basename(&path.to_string_lossy()).to_string(),
        BackendLocator::S3(loc) => naming::target_basename(&loc.key).to_string(),
    });
    let coord_dir = opts.work_dir.join("coord");

    if matches!(desc.crash, Some(CrashPlan::SyncerPreConsume { .. } | CrashPlan::SyncerMidWriteback { .. }))
        && matches!(opts.syncer_mode, SyncerMode::InProcess)
    {
        return Err(HarnessError::Descriptor(
            "syncer crash plans abort the syncer process; run with SyncerMode::Process".into(),
        ));
    }

    let started = Instant::now();
    let mut syncers = if desc.staging {
        start_syncers(desc, opts, &locator, &cache_dirs, &coord_dir)?
    } else {
        Vec::new()
    };

    let collective: Arc<dyn Collective> =
        Arc::new(ThreadCollective::with_timeout(desc.world_size, Duration::from_secs(60)));
    let cfg = JobConfig {
        world_size: desc.world_size,
        node_of_rank: (0..desc.world_size).map(|r| desc.node_of_rank(r)).collect(),
        cache_dirs: cache_dirs.clone(),
        staging_prefix: staging_prefix.clone(),
        backlog_limit: (desc.backlog_limit > 0).then_some(desc.backlog_limit),
        backlog_poll: Duration::from_millis(2),
    };
    let group = JobGroup::new(cfg, collective.clone()).map_err(|e| HarnessError::Worker {
        rank: 0,
        message: e.to_string(),
    })?;

    let shared_throttle = desc.bw_limit.map(|bw| Arc::new(TokenBucket::new(bw)));
    let mut handles = Vec::new();
    for rank in 0..desc.world_size {
        let program = program.clone();
        let desc = desc.clone();
        let target = target.clone();
        let collective = collective.clone();
        let io = group.rank(rank);
        let locator = locator.clone();
        let throttle = shared_throttle.clone();
        handles.push(std::thread::spawn(move || -> Result<WorkerOut, String> {
            let out = if desc.staging {
                staged_worker(io, &program, &desc, &target, rank)
            } else {
                baseline_worker(&collective, &program, &desc, &locator, throttle, rank)
            };
            match &out {
                Err(_) => collective.abort(),
                Ok(w) if w.crashed => collective.abort(),
                _ => {}
            }
            out
        }));
    }

    let mut crashed = false;
    let mut compute = Duration::ZERO;
    let mut blocked = Duration::ZERO;
    let mut segments = 0u64;
    let mut worker_error: Option<(usize, String)> = None;
    for (rank, h) in handles.into_iter().enumerate() {
        match h.join() {
            Ok(Ok(w)) => {
                crashed |= w.crashed;
                compute = compute.max(w.compute);
                blocked = blocked.max(w.blocked);
                segments += w.segments;
            }
            Ok(Err(message)) => worker_error = worker_error.take().or(Some((rank, message))),
            Err(_) => worker_error = worker_error.take().or(Some((rank, "panicked".into()))),
        }
    }
    if let Some((rank, message)) = worker_error {
        stop_syncers(&mut syncers, true);
        return Err(HarnessError::Worker { rank, message });
    }

    let (reports, baseline_bytes) = if desc.staging {
        (stop_syncers(&mut syncers, crashed), 0)
    } else {
        (Vec::new(), desc.total_written_bytes())
    };
    let end_to_end = started.elapsed();

    let remote_bytes = if desc.staging {
        reports.iter().flatten().map(|r| r.bytes_written).sum()
    } else {
        baseline_bytes
    };

    Ok(JobOutcome {
        metrics: Metrics {
            end_to_end_s: end_to_end.as_secs_f64(),
            compute_s: compute.as_secs_f64(),
            blocked_output_s: blocked.as_secs_f64(),
            remote_bytes,
            segment_count: segments,
        },
        crashed,
        cache_dirs,
        syncer_reports: reports,
    })
}

fn staged_worker(
    mut io: RankIo,
    program: &TraceProgram,
    desc: &JobDescriptor,
    target: &Path,
    rank: usize,
) -> Result<WorkerOut, String> {
    let total_closes = program.verbs.iter().filter(|v| matches!(v, Verb::Close)).count();
    let mut closes_seen = 0usize;
    let mut view: Option<FileView> = None;
    let mut blocks_written = 0u64;
    let mut ordinal = 0u64;
    let mut compute = Duration::ZERO;
    let mut blocked = Duration::ZERO;
    let mut crashed = false;

    macro_rules! io_call {
        ($e:expr) => {{
            let t = Instant::now();
            let result = $e;
            blocked += t.elapsed();
            match result {
                Ok(v) => v,
                Err(FacadeError::Engine(EngineError::FailPointHalt))
                | Err(FacadeError::Collective(CollectiveError::Aborted)) => {
                    crashed = true;
                    break;
                }
                Err(e) => return Err(e.to_string()),
            }
        }};
    }

    #[allow(clippy::never_loop)]
    'run: loop {
        for verb in &program.verbs {
            match verb {
                Verb::Open => {
                    let t = Instant::now();
                    std::thread::sleep(Duration::from_millis(
                        desc.compute_ms * desc.cycles_per_output,
                    ));
                    compute += t.elapsed();
                    let outcome =
                        io_call!(io.file_open(target, OpenMode::WriteOnlyCreate));
                    if matches!(outcome, OpenOutcome::Passthrough) {
                        return Err("staged path unexpectedly outside the prefix".into());
                    }
                }
                Verb::SetView { displacement, block_length, stride } => {
                    let v = FileView::strided(*displacement, *block_length, *stride);
                    io_call!(io.file_set_view(v));
                    view = Some(v);
                    blocks_written = 0;
                }
                Verb::WriteAll { blocks } => {
                    let v = view.expect("trace sets a view before writing");
                    let mut data = vec![0u8; (blocks * v.block_length) as usize];
                    for j in 0..*blocks {
                        let off = v.block_offset(rank, blocks_written + j);
                        let b = v.block_length as usize;
                        fill_payload(
                            desc.seed,
                            ordinal,
                            off,
                            &mut data[j as usize * b..(j as usize + 1) * b],
                        );
                    }
                    io_call!(io.file_write_all(&data));
                    blocks_written += blocks;
                    ordinal += 1;
                }
                Verb::Sync => io_call!(io.file_sync()),
                Verb::Close => {
                    closes_seen += 1;
                    if closes_seen == total_closes {
                        match desc.crash {
                            Some(CrashPlan::RankFlushRename { rank: r }) if r == rank => {
                                io.arm_fail_point(FailPoint::BeforeRename)
                            }
                            Some(CrashPlan::RankSkipListWrite { rank: r }) if r == rank => {
                                io.arm_fail_point(FailPoint::BeforeListWrite)
                            }
                            _ => {}
                        }
                    }
                    io_call!(io.file_close());
                }
            }
        }
        if !crashed {
            let t = Instant::now();
            if let Err(e) = io.finalize() {
                if matches!(e, FacadeError::Collective(CollectiveError::Aborted)) {
                    crashed = true;
                } else {
                    return Err(e.to_string());
                }
            }
            blocked += t.elapsed();
        }
        break 'run;
    }

    Ok(WorkerOut { crashed, compute, blocked, segments: io.segments_created() })
}

/// Baseline: the same trace written straight to the backend, with the same
/// collective rendezvous points an MPI job would have.
fn baseline_worker(
    collective: &Arc<dyn Collective>,
    program: &TraceProgram,
    desc: &JobDescriptor,
    locator: &BackendLocator,
    throttle: Option<Arc<TokenBucket>>,
    rank: usize,
) -> Result<WorkerOut, String> {
    let BackendLocator::Posix { path } = locator else {
        return Err("baseline requires a posix backend".into());
    };
    let mut backend: Option<PosixBackend> = None;
    let mut view: Option<FileView> = None;
    let mut blocks_written = 0u64;
    let mut ordinal = 0u64;
    let mut compute = Duration::ZERO;
    let mut blocked = Duration::ZERO;

    for verb in &program.verbs {
        let t = Instant::now();
        match verb {
            Verb::Open => {
                std::thread::sleep(Duration::from_millis(desc.compute_ms * desc.cycles_per_output));
                compute += t.elapsed();
                let t = Instant::now();
                backend = Some(
                    PosixBackend::open(path, throttle.clone()).map_err(|e| e.to_string())?,
                );
                collective.barrier(rank).map_err(|e| e.to_string())?;
                blocked += t.elapsed();
                continue;
            }
            Verb::SetView { displacement, block_length, stride } => {
                view = Some(FileView::strided(*displacement, *block_length, *stride));
                blocks_written = 0;
            }
            Verb::WriteAll { blocks } => {
                let v = view.expect("trace sets a view before writing");
                let b = v.block_length as usize;
                let target = backend.as_mut().expect("open before write");
                let mut buf = vec![0u8; b];
                for j in 0..*blocks {
                    let off = v.block_offset(rank, blocks_written + j);
                    fill_payload(desc.seed, ordinal, off, &mut buf);
                    target.write_range(off, &buf).map_err(|e| e.to_string())?;
                }
                blocks_written += blocks;
                ordinal += 1;
                collective.barrier(rank).map_err(|e| e.to_string())?;
            }
            Verb::Sync => {
                backend.as_mut().expect("open").flush().map_err(|e| e.to_string())?;
                collective.barrier(rank).map_err(|e| e.to_string())?;
            }
            Verb::Close => {
                backend.take().expect("open").flush().map_err(|e| e.to_string())?;
                collective.barrier(rank).map_err(|e| e.to_string())?;
            }
        }
        blocked += t.elapsed();
    }
    Ok(WorkerOut { crashed: false, compute, blocked, segments: 0 })
}

enum SyncerHandle {
    Thread {
        join: std::thread::JoinHandle<Result<SyncerReport, SyncError>>,
        stop: Arc<AtomicBool>,
    },
    Child(std::process::Child),
}

fn start_syncers(
    desc: &JobDescriptor,
    opts: &RunOptions,
    locator: &BackendLocator,
    cache_dirs: &[PathBuf],
    coord_dir: &Path,
) -> Result<Vec<SyncerHandle>, HarnessError> {
    let is_s3 = matches!(locator, BackendLocator::S3(_));
    let mut handles = Vec::new();
    for (node, cache) in cache_dirs.iter().enumerate() {
        let watch = cache.join(naming::READY_DIR);
        let fail_point = match desc.crash {
            Some(CrashPlan::SyncerPreConsume { node: n, list_index }) if n == node => {
                Some(SyncFailPoint::BeforeConsume(list_index))
            }
            Some(CrashPlan::SyncerMidWriteback { node: n, list_index }) if n == node => {
                Some(SyncFailPoint::MidWriteback(list_index))
            }
            _ => None,
        };
        match &opts.syncer_mode {
            SyncerMode::InProcess => {
                let stop = Arc::new(AtomicBool::new(false));
                let mut cfg = SyncerConfig::new(&watch, locator.clone());
                cfg.node_id = node;
                cfg.nodes = desc.nodes;
                cfg.retain = opts.retain;
                cfg.bw_limit = desc.bw_limit;
                cfg.poll_interval = opts.syncer_poll;
                cfg.coord_dir = is_s3.then(|| coord_dir.to_path_buf());
                cfg.stop = Some(stop.clone());
                debug_assert!(fail_point.is_none(), "validated earlier");
                let join = std::thread::spawn(move || syncer::run(&cfg));
                handles.push(SyncerHandle::Thread { join, stop });
            }
            SyncerMode::Process { binary } => {
                let mut cmd = std::process::Command::new(binary);
                cmd.arg("--watch")
                    .arg(&watch)
                    .arg("--backend")
                    .arg(locator.to_string())
                    .arg("--rank")
                    .arg(node.to_string())
                    .arg("--nodes")
                    .arg(desc.nodes.to_string())
                    .arg("--poll-ms")
                    .arg(opts.syncer_poll.as_millis().to_string())
                    .stdout(std::process::Stdio::piped())
                    .stderr(std::process::Stdio::null());
                if opts.retain {
                    cmd.arg("--retain");
                }
                if let Some(bw) = desc.bw_limit {
                    cmd.arg("--bw-limit").arg(bw.to_string());
                }
                if is_s3 {
                    cmd.arg("--coord").arg(coord_dir);
                }
                if let Some(fp) = fail_point {
                    let spec = match fp {
                        SyncFailPoint::BeforeConsume(n) => format!("consume:{n}"),
                        SyncFailPoint::MidWriteback(n) => format!("exec:{n}"),
                    };
                    cmd.arg("--fail-point").arg(spec);
                }
                let child = cmd.spawn().map_err(|e| {
                    HarnessError::Syncer(format!("spawn {}: {e}", binary.display()))
                })?;
                handles.push(SyncerHandle::Child(child));
            }
        }
    }
    Ok(handles)
}

/// Joins or kills the syncers. On a crashed job they are stopped where they
/// stand, leaving caches exactly as the crash left them.
fn stop_syncers(handles: &mut Vec<SyncerHandle>, crashed: bool) -> Vec<Option<SyncerReport>> {
    let mut reports = Vec::new();
    for handle in handles.drain(..) {
        match handle {
            SyncerHandle::Thread { join, stop } => {
                if crashed {
                    stop.store(true, Ordering::SeqCst);
                }
                reports.push(join.join().ok().and_then(|r| r.ok()));
            }
            SyncerHandle::Child(mut child) => {
                if crashed {
                    let _ = child.kill();
                    let _ = child.wait();
                    reports.push(None);
                    continue;
                }
                let deadline = Instant::now() + Duration::from_secs(120);
                let status = loop {
                    match child.try_wait() {
                        Ok(Some(status)) => break Some(status),
                        Ok(None) if Instant::now() > deadline => {
                            let _ = child.kill();
                            let _ = child.wait();
                            break None;
                        }
                        Ok(None) => std::thread::sleep(Duration::from_millis(10)),
                        Err(_) => break None,
                    }
                };
                let report = status.filter(|s| s.success()).and_then(|_| {
                    let mut text = String::new();
                    use std::io::Read;
                    child
                        .stdout
                        .take()
                        .and_then(|mut out| out.read_to_string(&mut text).ok())
                        .and_then(|_| parse_report_line(&text))
                });
                reports.push(report);
            }
        }
    }
    reports
}

/// Final stdout line a syncer process prints, so the harness can fold its
/// counters into the metrics.
pub fn format_report_line(report: &SyncerReport) -> String {
    format!(
        "REPORT lists={} runs={} bytes={} quarantined={}",
        report.lists_processed, report.runs_written, report.bytes_written, report.quarantined
    )
}

pub fn parse_report_line(stdout: &str) -> Option<SyncerReport> {
    let line = stdout.lines().rev().find(|l| l.starts_with("REPORT "))?;
    let mut report = SyncerReport::default();
    for field in line.trim_start_matches("REPORT ").split_whitespace() {
        let (key, value) = field.split_once('=')?;
        let value: u64 = value.parse().ok()?;
        match key {
            "lists" => report.lists_processed = value,
            "runs" => report.runs_written = value,
            "bytes" => report.bytes_written = value,
            "quarantined" => report.quarantined = value,
            _ => {}
        }
    }
    Some(report)
}

/// Reads the remote image back and compares it against the oracle at the
/// job's final consistency point.
pub fn compare_backend(
    desc: &JobDescriptor,
    up_to_counter: Option<u64>,
) -> Result<oracle::CompareOutcome, HarnessError> {
    let image = match up_to_counter {
        Some(c) => oracle_up_to(desc, c),
        None => oracle_for(desc),
    };
    match BackendLocator::parse(&desc.backend)? {
        BackendLocator::Posix { path } => Ok(oracle::compare_posix_file(&image, &path)?),
        BackendLocator::S3(loc) => {
            let client = crate::s3::S3Client::new(loc);
            let object = client
                .get_object()
                .map_err(|e| HarnessError::Syncer(e.to_string()))?;
            Ok(oracle::compare_bytes(&image, &object, oracle::HoleSemantics::ZeroFilled))
        }
    }
}

//! Collective shared-file verbs lowered onto per-rank cache sessions.
//!
//! Mirrors the MPI-IO surface a staged application exercises: open with a
//! write-only mode, set a file view, write collectively, sync, close. Each
//! rank drives its own [`RankIo`]; the verbs rendezvous through a
//! [`Collective`], so ranks may be threads of one process or separate
//! processes sharing only the filesystem. Seek and pwrite against the cache
//! engine are the only way bytes move.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::collective::{Collective, CollectiveError};
use crate::engine::{EngineError, FailPoint, Session};
use crate::epoch::EpochId;
use crate::naming;

/// Pending chunk lists allowed per node before a collective close blocks.
pub const DEFAULT_BACKLOG_LIMIT: usize = 4;

#[derive(Debug, Error)]
pub enum FacadeError {
    #[error("unstaged mode: staging supports write-only-with-create opens")]
    UnstagedMode,
    #[error("no staged file is open on this rank")]
    NotOpen,
    #[error("a staged file is already open on this rank")]
    AlreadyOpen,
    #[error("cannot finalize with a staged file still open")]
    OpenAtFinalize,
    #[error("write_all needs a file view; call set_view first")]
    ViewMissing,
    #[error("data length {got} is not a multiple of the view block length {block}")]
    RaggedData { got: u64, block: u64 },
    #[error("invalid view: {0}")]
    BadView(&'static str),
    #[error("rank {rank} failed a collective step")]
    RankFailed { rank: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

/// Open disposition mirroring the MPI open modes the staging path cares
/// about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenMode {
    WriteOnlyCreate,
    ReadOnly,
    ReadWrite,
}

/// Regular block decomposition of the shared file: rank `r`'s `k`-th block
/// starts at `displacement + k*stride + r*block_length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileView {
    pub displacement: u64,
    pub block_length: u64,
    pub stride: u64,
}

impl FileView {
    /// The gapless N-1 layout: rank blocks interleave back to back.
    pub fn contiguous(displacement: u64, block_length: u64, world_size: usize) -> FileView {
        FileView { displacement, block_length, stride: block_length * world_size as u64 }
    }

    pub fn strided(displacement: u64, block_length: u64, stride: u64) -> FileView {
        FileView { displacement, block_length, stride }
    }

    pub fn validate(&self, world_size: usize) -> Result<(), FacadeError> {
        if self.block_length == 0 {
            return Err(FacadeError::BadView("block_length must be positive"));
        }
        if self.stride < self.block_length * world_size as u64 {
            return Err(FacadeError::BadView("stride must cover all ranks' blocks"));
        }
        Ok(())
    }

    pub fn block_offset(&self, rank: usize, k: u64) -> u64 {
        self.displacement + k * self.stride + rank as u64 * self.block_length
    }
}

/// Static description of one job's rank and node layout.
#[derive(Debug, Clone)]
pub struct JobConfig {
    pub world_size: usize,
    /// rank -> simulated node.
    pub node_of_rank: Vec<usize>,
    /// node -> cache directory.
    pub cache_dirs: Vec<PathBuf>,
    /// Paths under this prefix are staged; anything else passes through.
    pub staging_prefix: PathBuf,
    /// `None` disables close throttling.
    pub backlog_limit: Option<usize>,
    pub backlog_poll: Duration,
}

impl JobConfig {
    pub fn single_node(world_size: usize, cache_dir: &Path, staging_prefix: &Path) -> JobConfig {
        JobConfig {
            world_size,
            node_of_rank: vec![0; world_size],
            cache_dirs: vec![cache_dir.to_path_buf()],
            staging_prefix: staging_prefix.to_path_buf(),
            backlog_limit: Some(DEFAULT_BACKLOG_LIMIT),
            backlog_poll: Duration::from_millis(5),
        }
    }

    fn validate(&self) -> Result<(), FacadeError> {
        if self.world_size == 0
            || self.node_of_rank.len() != self.world_size
            || self.node_of_rank.iter().any(|&n| n >= self.cache_dirs.len())
        {
            return Err(FacadeError::BadView("inconsistent job layout"));
        }
        Ok(())
    }
}

/// Factory for per-rank handles.
pub struct JobGroup {
    cfg: Arc<JobConfig>,
    collective: Arc<dyn Collective>,
}

impl JobGroup {
    pub fn new(cfg: JobConfig, collective: Arc<dyn Collective>) -> Result<JobGroup, FacadeError> {
        cfg.validate()?;
        assert_eq!(collective.world_size(), cfg.world_size);
        Ok(JobGroup { cfg: Arc::new(cfg), collective })
    }

    pub fn rank(&self, rank: usize) -> RankIo {
        assert!(rank < self.cfg.world_size);
        let node = self.cfg.node_of_rank[rank];
        RankIo {
            cfg: self.cfg.clone(),
            collective: self.collective.clone(),
            rank,
            node,
            cache_dir: self.cfg.cache_dirs[node].clone(),
            job_nonce: None,
            epoch_counter: 0,
            open: None,
            pending_fail_point: None,
            segments_created: 0,
            chunk_lists_emitted: 0,
        }
    }

    pub fn collective(&self) -> Arc<dyn Collective> {
        self.collective.clone()
    }
}

/// What a staged open produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenOutcome {
    Staged,
    /// Path is outside the staging prefix: the caller should write remotely
    /// itself.
    Passthrough,
}

struct OpenFile {
    session: Session,
    view: Option<ViewState>,
}

struct ViewState {
    view: FileView,
    blocks_written: u64,
}

/// One rank's verb endpoint.
pub struct RankIo {
    cfg: Arc<JobConfig>,
    collective: Arc<dyn Collective>,
    rank: usize,
    node: usize,
    cache_dir: PathBuf,
    job_nonce: Option<u64>,
    epoch_counter: u64,
    open: Option<OpenFile>,
    pending_fail_point: Option<FailPoint>,
    segments_created: u64,
    chunk_lists_emitted: u64,
}

impl RankIo {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn epoch_counter(&self) -> u64 {
        self.epoch_counter
    }

    pub fn segments_created(&self) -> u64 {
        self.segments_created + self.open.as_ref().map_or(0, |o| o.session.segments_created())
    }

    pub fn session(&self) -> Option<&Session> {
        self.open.as_ref().map(|o| &o.session)
    }

    /// Arms an engine crash-injection point for the next list emission of
    /// the currently open session.
    pub fn arm_fail_point(&mut self, fp: FailPoint) {
        match &mut self.open {
            Some(open) => open.session.set_fail_point(fp),
            None => self.pending_fail_point = Some(fp),
        }
    }

    /// Collective open. Establishes the job nonce on first use, rejects
    /// read intent, and passes through paths outside the staging prefix.
    pub fn file_open(&mut self, target: &Path, mode: OpenMode) -> Result<OpenOutcome, FacadeError> {
        if self.open.is_some() {
            return Err(FacadeError::AlreadyOpen);
        }
        let nonce = match self.job_nonce {
            Some(n) => n,
            None => {
                let seed = if self.rank == 0 { rand::random::<u64>() } else { 0 };
                let nonce = self.collective.broadcast_u64(self.rank, 0, seed)?;
                self.job_nonce = Some(nonce);
                nonce
            }
        };
        if mode != OpenMode::WriteOnlyCreate {
            return Err(FacadeError::UnstagedMode);
        }
        if !target.starts_with(&self.cfg.staging_prefix) {
            return Ok(OpenOutcome::Passthrough);
        }
        let epoch = EpochId::with_counter(nonce, self.epoch_counter);
        let session = Session::open(
            &target.to_string_lossy(),
            self.rank as u32,
            &self.cache_dir,
            epoch,
        )?;
        let mut open = OpenFile { session, view: None };
        if let Some(fp) = self.pending_fail_point.take() {
            open.session.set_fail_point(fp);
        }
        self.open = Some(open);
        self.collective.barrier(self.rank)?;
        Ok(OpenOutcome::Staged)
    }

    /// Collective view change. All ranks must agree on the displacement;
    /// the write position moves to this rank's first block.
    pub fn file_set_view(&mut self, view: FileView) -> Result<(), FacadeError> {
        view.validate(self.cfg.world_size)?;
        let open = self.open.as_mut().ok_or(FacadeError::NotOpen)?;
        self.collective.require_uniform_u64(self.rank, view.displacement)?;
        open.session.seek(view.block_offset(self.rank, 0))?;
        open.view = Some(ViewState { view, blocks_written: 0 });
        Ok(())
    }

    /// Collective write: lowers this rank's blocks to seek+pwrite pairs at
    /// the view positions, then meets the others at a barrier.
    pub fn file_write_all(&mut self, data: &[u8]) -> Result<(), FacadeError> {
        let open = self.open.as_mut().ok_or(FacadeError::NotOpen)?;
        let vs = open.view.as_mut().ok_or(FacadeError::ViewMissing)?;
        let block = vs.view.block_length;
        if data.len() as u64 % block != 0 {
            return Err(FacadeError::RaggedData { got: data.len() as u64, block });
        }
        for (j, chunk) in data.chunks(block as usize).enumerate() {
            let k = vs.blocks_written + j as u64;
            let pos = vs.view.block_offset(self.rank, k);
            open.session.seek(pos)?;
            open.session.pwrite(chunk)?;
        }
        vs.blocks_written += (data.len() as u64) / block;
        self.collective.barrier(self.rank)?;
        Ok(())
    }

    /// Collective sync: advances the epoch in lockstep and publishes every
    /// rank's chunk list. When this returns, all lists of the old epoch are
    /// in their watch directories.
    pub fn file_sync(&mut self) -> Result<(), FacadeError> {
        if self.open.is_none() {
            return Err(FacadeError::NotOpen);
        }
        self.collective.barrier(self.rank)?;
        let next_counter = self.epoch_counter + 1;
        let open = self.open.as_mut().expect("checked above");
        let nonce = self.job_nonce.expect("nonce set at open");
        open.session.sync_epoch(EpochId::with_counter(nonce, next_counter))?;
        self.epoch_counter = next_counter;
        self.chunk_lists_emitted += 1;
        self.collective.barrier(self.rank)?;
        Ok(())
    }

    /// Collective close: publishes the final chunk list of every rank. When
    /// the exit barrier passes, the cross-node consistency point holds — the
    /// shared file is reconstructible from the caches alone. Blocks while
    /// the node's watch-directory backlog exceeds the configured limit.
    pub fn file_close(&mut self) -> Result<(), FacadeError> {
        if self.open.is_none() {
            return Err(FacadeError::NotOpen);
        }
        self.collective.barrier(self.rank)?;
        let mut open = self.open.take().expect("checked above");
        let close_result = open.session.close();
        self.segments_created += open.session.segments_created();
        close_result?;
        self.chunk_lists_emitted += 1;
        self.collective.barrier(self.rank)?;
        // The close was itself a sync point: the next open or sync uses a
        // fresh epoch on every rank.
        self.epoch_counter += 1;
        if let Some(limit) = self.cfg.backlog_limit {
            self.wait_for_backlog(limit)?;
        }
        Ok(())
    }

    fn wait_for_backlog(&self, limit: usize) -> Result<(), FacadeError> {
        let ready = self.cache_dir.join(naming::READY_DIR);
        loop {
            let pending = match std::fs::read_dir(&ready) {
                Ok(entries) => entries
                    .filter_map(|e| e.ok())
                    .filter(|e| {
                        e.file_name().to_string_lossy().ends_with(naming::CHUNK_LIST_SUFFIX)
                    })
                    .count(),
                Err(_) => 0,
            };
            if pending < limit {
                return Ok(());
            }
            // Watch the abort flag while throttled so a dead job cannot
            // wedge its ranks here.
            if self.collective.is_aborted() {
                return Err(CollectiveError::Aborted.into());
            }
            std::thread::sleep(self.cfg.backlog_poll);
        }
    }

    /// Collective end of job: once per node, drops the exit sentinel into
    /// the watch directory so the syncer drains and exits. Idempotent.
    pub fn finalize(&mut self) -> Result<(), FacadeError> {
        if self.open.is_some() {
            return Err(FacadeError::OpenAtFinalize);
        }
        self.collective.barrier(self.rank)?;
        let writer_rank = (0..self.cfg.world_size)
            .find(|&r| self.cfg.node_of_rank[r] == self.node)
            .expect("node has at least one rank");
        if writer_rank == self.rank {
            let sentinel = self.cache_dir.join(naming::READY_DIR).join(naming::EXIT_SENTINEL);
            if let Some(parent) = sentinel.parent() {
                std::fs::create_dir_all(parent).map_err(EngineError::Io)?;
            }
            std::fs::File::create(&sentinel).map_err(EngineError::Io)?.sync_all().map_err(EngineError::Io)?;
        }
        self.collective.barrier(self.rank)?;
        Ok(())
    }
}


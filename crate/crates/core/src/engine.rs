//! Write-cache engine.
//!
//! Turns seek/pwrite/sync/close issued against a logical shared file into
//! durable node-local segment files plus chunk lists. One [`Session`] holds
//! the per-rank state: the active segment and the three offsets that drive
//! segment creation, extension and sealing.
//!
//! Offsets, while a segment is active:
//! - `head_off`: where the active segment starts in the eventual shared file
//! - `cur_off`:  bytes in the active segment (its on-disk length)
//! - `glob_off`: the global file-pointer position
//!
//! Segment data is flushed when the segment is sealed; the chunk list that
//! names sealed segments is flushed before it is renamed into the watch
//! directory. A crash between flush and rename loses the event, never the
//! data: recovery picks up the temp-named list.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chunklist::{self, ChunkRecord};
use crate::epoch::EpochId;
use crate::naming;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cache directory {0} is missing or unusable")]
    Setup(PathBuf, #[source] io::Error),
    #[error("invalid target name: {0}")]
    InvalidTarget(&'static str),
    #[error("session already open for {target} rank {rank} epoch counter {counter}: found {existing}")]
    DuplicateOpen { target: String, rank: u32, counter: u64, existing: String },
    #[error(
        "write [{write_start}, {write_end}) overlaps sealed segment {segment} \
         [{seg_start}, {seg_end}) in the same epoch"
    )]
    UnsupportedOverlap {
        write_start: u64,
        write_end: u64,
        segment: String,
        seg_start: u64,
        seg_end: u64,
    },
    #[error("epoch counter must advance by exactly one: current {current}, proposed {proposed}")]
    EpochProtocol { current: u64, proposed: u64 },
    #[error("epoch nonce changed mid-session")]
    NonceMismatch,
    #[error("name already exists in cache: {0}")]
    NamingCollision(PathBuf),
    #[error("session is closed")]
    SessionClosed,
    #[error("session crashed at an injected fail point")]
    FailPointHalt,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Crash-injection points for durability drills. A tripped fail point leaves
/// the session unusable, exactly like the process dying there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    /// Stop after sealing segments but before the chunk list is written.
    BeforeListWrite,
    /// Stop after the chunk list is durable but before the rename that
    /// publishes it to the watch directory.
    BeforeRename,
}

/// A still-open cache segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentHandle {
    pub path: PathBuf,
    pub target_offset: u64,
    pub length: u64,
}

#[derive(Debug)]
struct ActiveSegment {
    file: File,
    handle: SegmentHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SessionState {
    Open,
    Closed,
    Crashed,
}

/// Per-rank cache session for one logical shared file.
#[derive(Debug)]
pub struct Session {
    target_name: String,
    base: String,
    rank: u32,
    epoch: EpochId,
    cache_dir: PathBuf,
    ready_dir: PathBuf,
    active: Option<ActiveSegment>,
    head_off: u64,
    cur_off: u64,
    glob_off: u64,
    pending: Vec<ChunkRecord>,
    state: SessionState,
    fail_point: Option<FailPoint>,
    segments_created: u64,
}

impl Session {
    /// Opens a write-only staging session. No segment file is created yet;
    /// creation is deferred until the first write, when the offset is known.
    pub fn open(
        target_name: &str,
        rank: u32,
        cache_dir: &Path,
        epoch: EpochId,
    ) -> Result<Session, EngineError> {
        naming::validate_target_name(target_name).map_err(EngineError::InvalidTarget)?;
        fs::metadata(cache_dir)
            .map_err(|e| EngineError::Setup(cache_dir.to_path_buf(), e))?;
        let ready_dir = cache_dir.join(naming::READY_DIR);
        fs::create_dir_all(&ready_dir)
            .map_err(|e| EngineError::Setup(cache_dir.to_path_buf(), e))?;

        let base = naming::target_basename(target_name).to_string();
        // Best-effort reuse detection: any surviving file for this
        // (target, epoch, rank) means the identity is being reused.
        let prefix = format!("{base}.{}.r{rank}.", epoch.tag());
        for dir in [cache_dir, ready_dir.as_path()] {
            for entry in fs::read_dir(dir).map_err(|e| EngineError::Setup(dir.into(), e))? {
                let entry = entry.map_err(|e| EngineError::Setup(dir.into(), e))?;
                let name = entry.file_name();
                let name = name.to_string_lossy();
                if name.starts_with(&prefix)
                    || name.as_ref() == naming::chunk_list_name(&base, epoch, rank)
                {
                    return Err(EngineError::DuplicateOpen {
                        target: target_name.to_string(),
                        rank,
                        counter: epoch.counter,
                        existing: name.into_owned(),
                    });
                }
            }
        }

        Ok(Session {
            target_name: target_name.to_string(),
            base,
            rank,
            epoch,
            cache_dir: cache_dir.to_path_buf(),
            ready_dir,
            active: None,
            head_off: 0,
            cur_off: 0,
            glob_off: 0,
            pending: Vec::new(),
            state: SessionState::Open,
            fail_point: None,
            segments_created: 0,
        })
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn epoch(&self) -> EpochId {
        self.epoch
    }

    pub fn head_off(&self) -> u64 {
        self.head_off
    }

    pub fn cur_off(&self) -> u64 {
        self.cur_off
    }

    pub fn glob_off(&self) -> u64 {
        self.glob_off
    }

    pub fn pending_chunks(&self) -> &[ChunkRecord] {
        &self.pending
    }

    pub fn active_segment(&self) -> Option<&SegmentHandle> {
        self.active.as_ref().map(|a| &a.handle)
    }

    pub fn segments_created(&self) -> u64 {
        self.segments_created
    }

    pub fn is_open(&self) -> bool {
        self.state == SessionState::Open
    }

    /// Arms a crash-injection point for the next list emission.
    pub fn set_fail_point(&mut self, fp: FailPoint) {
        self.fail_point = Some(fp);
    }

    fn check_open(&self) -> Result<(), EngineError> {
        match self.state {
            SessionState::Open => Ok(()),
            _ => Err(EngineError::SessionClosed),
        }
    }

    /// Moves the global file pointer. A segment whose range still covers the
    /// new position is kept for overlap reuse; otherwise the segment seals.
    /// Seek alone never creates a segment.
    pub fn seek(&mut self, new_global_offset: u64) -> Result<(), EngineError> {
        self.check_open()?;
        if self.active.is_some() {
            let within =
                new_global_offset >= self.head_off && new_global_offset <= self.head_off + self.cur_off;
            if !within {
                self.seal_active()?;
            }
        }
        self.glob_off = new_global_offset;
        Ok(())
    }

    /// Writes `data` at the current global offset. Dispatch, in order:
    /// create a segment when none is active; append when the pointer sits at
    /// the segment end; overwrite in place when the write stays inside the
    /// segment; otherwise overwrite the in-segment prefix, seal, and start a
    /// new segment for the remainder.
    pub fn pwrite(&mut self, data: &[u8]) -> Result<(), EngineError> {
        self.check_open()?;
        if data.is_empty() {
            return Ok(());
        }
        let start = self.glob_off;
        let end = start + data.len() as u64;
        // Reuse is supported only inside the active segment; touching a
        // sealed segment of the same epoch would corrupt listed data.
        for rec in &self.pending {
            let seg_end = rec.offset + rec.length;
            if start < seg_end && rec.offset < end {
                return Err(EngineError::UnsupportedOverlap {
                    write_start: start,
                    write_end: end,
                    segment: rec.segment_name.clone(),
                    seg_start: rec.offset,
                    seg_end,
                });
            }
        }

        match &mut self.active {
            None => self.create_and_write(data)?,
            Some(active) => {
                let seg_end = self.head_off + self.cur_off;
                if start == seg_end {
                    active.file.write_all_at(data, self.cur_off)?;
                    self.cur_off += data.len() as u64;
                    active.handle.length = self.cur_off;
                    self.glob_off = end;
                } else if start >= self.head_off && start < seg_end && end <= seg_end {
                    active.file.write_all_at(data, start - self.head_off)?;
                    self.glob_off = end;
                } else if start >= self.head_off && start < seg_end {
                    // Crosses the segment end: overwrite the in-segment
                    // prefix, seal, and carry the remainder into a fresh
                    // segment so sealed ranges stay disjoint.
                    let prefix = (seg_end - start) as usize;
                    active.file.write_all_at(&data[..prefix], start - self.head_off)?;
                    self.glob_off = seg_end;
                    self.seal_active()?;
                    self.create_and_write(&data[prefix..])?;
                } else {
                    self.seal_active()?;
                    self.create_and_write(data)?;
                }
            }
        }
        Ok(())
    }

    fn create_and_write(&mut self, data: &[u8]) -> Result<(), EngineError> {
        let offset = self.glob_off;
        let name = naming::segment_name(&self.base, self.epoch, self.rank, offset);
        let path = self.cache_dir.join(&name);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => EngineError::NamingCollision(path.clone()),
                _ => EngineError::Io(e),
            })?;
        file.write_all_at(data, 0)?;
        self.segments_created += 1;
        self.head_off = offset;
        self.cur_off = data.len() as u64;
        self.glob_off = offset + data.len() as u64;
        self.active = Some(ActiveSegment {
            handle: SegmentHandle { path, target_offset: offset, length: self.cur_off },
            file,
        });
        Ok(())
    }

    /// Flushes and closes the active segment, prepending its record to the
    /// pending chunk list.
    fn seal_active(&mut self) -> Result<(), EngineError> {
        if let Some(active) = self.active.take() {
            active.file.sync_all()?;
            let name = active
                .handle
                .path
                .file_name()
                .expect("segment path has a file name")
                .to_string_lossy()
                .into_owned();
            self.pending.insert(
                0,
                ChunkRecord { segment_name: name, offset: self.head_off, length: self.cur_off },
            );
            self.cur_off = 0;
        }
        Ok(())
    }

    /// Advances the epoch at a collective sync point. Seals the active
    /// segment, publishes the pending chunk list under the *current* epoch,
    /// and re-arms the session under the new one. The global offset is
    /// preserved so writing can resume where it left off.
    pub fn sync_epoch(&mut self, new_epoch: EpochId) -> Result<PathBuf, EngineError> {
        self.check_open()?;
        if new_epoch.job_nonce != self.epoch.job_nonce {
            return Err(EngineError::NonceMismatch);
        }
        if new_epoch.counter != self.epoch.counter + 1 {
            return Err(EngineError::EpochProtocol {
                current: self.epoch.counter,
                proposed: new_epoch.counter,
            });
        }
        self.seal_active()?;
        let committed = self.emit_list()?;
        self.pending.clear();
        self.epoch = new_epoch;
        Ok(committed)
    }

    /// Closes the session: seals the active segment and publishes the final
    /// chunk list. After close returns on every rank, the shared file is
    /// reconstructible from the local caches alone.
    pub fn close(&mut self) -> Result<PathBuf, EngineError> {
        self.check_open()?;
        self.seal_active()?;
        let committed = self.emit_list()?;
        self.pending.clear();
        self.state = SessionState::Closed;
        Ok(committed)
    }

    /// Durably writes the pending records next to the segments, then renames
    /// the list into the watch directory. The rename is the writeback event.
    fn emit_list(&mut self) -> Result<PathBuf, EngineError> {
        if self.fail_point == Some(FailPoint::BeforeListWrite) {
            self.state = SessionState::Crashed;
            return Err(EngineError::FailPointHalt);
        }
        let name = naming::chunk_list_name(&self.base, self.epoch, self.rank);
        let dest = self.ready_dir.join(&name);
        if dest.exists() {
            return Err(EngineError::NamingCollision(dest));
        }
        let tmp = self.cache_dir.join(format!("{name}{}", naming::TEMP_SUFFIX));
        chunklist::write_durable(&tmp, &self.pending).map_err(|e| match e.kind() {
            io::ErrorKind::AlreadyExists => EngineError::NamingCollision(tmp.clone()),
            _ => EngineError::Io(e),
        })?;
        if self.fail_point == Some(FailPoint::BeforeRename) {
            self.state = SessionState::Crashed;
            return Err(EngineError::FailPointHalt);
        }
        chunklist::commit(&tmp, &dest)?;
        Ok(dest)
    }
}

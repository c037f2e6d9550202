//! Rank rendezvous primitives.
//!
//! The facade's verbs are collective: every rank calls them and they meet at
//! a barrier. Two interchangeable implementations are provided — an
//! in-process one for ranks running as threads, and a filesystem one for
//! ranks running as separate processes that share nothing but a directory.
//! Both support an abort signal so a crashed rank wakes the others instead
//! of deadlocking them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("collective aborted")]
    Aborted,
    #[error("collective timed out after {0:?}")]
    Timeout(Duration),
    #[error("ranks disagree on a collective argument: {0:?}")]
    Mismatch(Vec<u64>),
    #[error("rendezvous I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Collective: Send + Sync {
    fn world_size(&self) -> usize;
    fn barrier(&self, rank: usize) -> Result<(), CollectiveError>;
    /// Root's value reaches every rank; other ranks' `value` is ignored.
    fn broadcast_u64(&self, rank: usize, root: usize, value: u64) -> Result<u64, CollectiveError>;
    /// Gathers one value per rank and fails unless all are equal.
    fn require_uniform_u64(&self, rank: usize, value: u64) -> Result<u64, CollectiveError>;
    /// Wakes every pending and future wait with `Aborted`.
    fn abort(&self);
    fn is_aborted(&self) -> bool;
}

// ---------------------------------------------------------------------------
// In-process implementation.

struct Rendezvous {
    arrived: usize,
    generation: u64,
    slots: Vec<u64>,
    /// Snapshot of `slots` at the last completion. Stable while any waiter
    /// of that generation is still reading: the next exchange cannot
    /// complete until every rank has returned from this one.
    result: Vec<u64>,
}

/// Collective for ranks running as threads of one process.
pub struct ThreadCollective {
    world: usize,
    state: Mutex<Rendezvous>,
    cond: Condvar,
    aborted: AtomicBool,
    timeout: Duration,
}

impl ThreadCollective {
    pub fn new(world: usize) -> ThreadCollective {
        ThreadCollective::with_timeout(world, Duration::from_secs(60))
    }

    pub fn with_timeout(world: usize, timeout: Duration) -> ThreadCollective {
        assert!(world > 0);
        ThreadCollective {
            world,
            state: Mutex::new(Rendezvous {
                arrived: 0,
                generation: 0,
                slots: vec![0; world],
                result: vec![0; world],
            }),
            cond: Condvar::new(),
            aborted: AtomicBool::new(false),
            timeout,
        }
    }

    /// One rendezvous: deposit a value, wait for everyone, read the slots.
    fn exchange(&self, rank: usize, value: u64) -> Result<Vec<u64>, CollectiveError> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.state.lock().unwrap();
        st.slots[rank] = value;
        st.arrived += 1;
        if st.arrived == self.world {
            st.arrived = 0;
            st.generation += 1;
            let snapshot = st.slots.clone();
            st.result = snapshot;
            let out = st.result.clone();
            self.cond.notify_all();
            return Ok(out);
        }
        let my_generation = st.generation;
        while st.generation == my_generation {
            if self.aborted.load(Ordering::SeqCst) {
                self.cond.notify_all();
                return Err(CollectiveError::Aborted);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(CollectiveError::Timeout(self.timeout));
            }
            let (guard, _) = self.cond.wait_timeout(st, deadline - now).unwrap();
            st = guard;
        }
        Ok(st.result.clone())
    }
}

impl Collective for ThreadCollective {
    fn world_size(&self) -> usize {
        self.world
    }

    fn barrier(&self, rank: usize) -> Result<(), CollectiveError> {
        self.exchange(rank, 0).map(|_| ())
    }

    fn broadcast_u64(&self, rank: usize, root: usize, value: u64) -> Result<u64, CollectiveError> {
        Ok(self.exchange(rank, value)?[root])
    }

    fn require_uniform_u64(&self, rank: usize, value: u64) -> Result<u64, CollectiveError> {
        let slots = self.exchange(rank, value)?;
        if slots.iter().all(|&v| v == slots[0]) {
            Ok(slots[0])
        } else {
            Err(CollectiveError::Mismatch(slots))
        }
    }

    fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        drop(self.state.lock());
        self.cond.notify_all();
    }

    fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------------
// Filesystem implementation.

/// Collective for ranks that share only a directory. Every operation gets a
/// fresh sequence number (ranks advance in lockstep by construction), each
/// rank publishes `v<seq>.r<rank>` with its value, and everyone polls until
/// the full set is present. Files are left behind; jobs are expected to use
/// a scratch directory.
pub struct FsCollective {
    dir: PathBuf,
    world: usize,
    seqs: Vec<AtomicU64>,
    poll: Duration,
    timeout: Duration,
}

const ABORT_MARKER: &str = "__collective_abort__";

impl FsCollective {
    pub fn new(dir: &Path, world: usize) -> std::io::Result<FsCollective> {
        assert!(world > 0);
        std::fs::create_dir_all(dir)?;
        Ok(FsCollective {
            dir: dir.to_path_buf(),
            world,
            seqs: (0..world).map(|_| AtomicU64::new(0)).collect(),
            poll: Duration::from_millis(2),
            timeout: Duration::from_secs(60),
        })
    }

    fn exchange(&self, rank: usize, value: u64) -> Result<Vec<u64>, CollectiveError> {
        let seq = self.seqs[rank].fetch_add(1, Ordering::SeqCst);
        let mine = self.dir.join(format!("v{seq:08}.r{rank}"));
        let tmp = self.dir.join(format!("v{seq:08}.r{rank}.tmp"));
        std::fs::write(&tmp, format!("{value:016x}"))?;
        std::fs::rename(&tmp, &mine)?;

        let deadline = Instant::now() + self.timeout;
        let mut out = vec![0u64; self.world];
        let mut have = vec![false; self.world];
        loop {
            if self.dir.join(ABORT_MARKER).exists() {
                return Err(CollectiveError::Aborted);
            }
            let mut missing = false;
            for peer in 0..self.world {
                if have[peer] {
                    continue;
                }
                let path = self.dir.join(format!("v{seq:08}.r{peer}"));
                match std::fs::read_to_string(&path) {
                    Ok(text) => {
                        out[peer] = u64::from_str_radix(text.trim(), 16).map_err(|_| {
                            CollectiveError::Io(std::io::Error::new(
                                std::io::ErrorKind::InvalidData,
                                format!("bad rendezvous value in {}", path.display()),
                            ))
                        })?;
                        have[peer] = true;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => missing = true,
                    Err(e) => return Err(e.into()),
                }
            }
            if !missing {
                return Ok(out);
            }
            if Instant::now() > deadline {
                return Err(CollectiveError::Timeout(self.timeout));
            }
            std::thread::sleep(self.poll);
        }
    }
}

impl Collective for FsCollective {
    fn world_size(&self) -> usize {
        self.world
    }

    fn barrier(&self, rank: usize) -> Result<(), CollectiveError> {
        self.exchange(rank, 0).map(|_| ())
    }

    fn broadcast_u64(&self, rank: usize, root: usize, value: u64) -> Result<u64, CollectiveError> {
        Ok(self.exchange(rank, value)?[root])
    }

    fn require_uniform_u64(&self, rank: usize, value: u64) -> Result<u64, CollectiveError> {
        let slots = self.exchange(rank, value)?;
        if slots.iter().all(|&v| v == slots[0]) {
            Ok(slots[0])
        } else {
            Err(CollectiveError::Mismatch(slots))
        }
    }

    fn abort(&self) {
        let _ = std::fs::write(self.dir.join(ABORT_MARKER), b"");
    }

    fn is_aborted(&self) -> bool {
        self.dir.join(ABORT_MARKER).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn run_ranks<C: Collective + 'static>(
        world: usize,
        coll: Arc<C>,
        f: impl Fn(usize, Arc<C>) -> Result<u64, CollectiveError> + Send + Sync + Clone + 'static,
    ) -> Vec<Result<u64, CollectiveError>> {
        let handles: Vec<_> = (0..world)
            .map(|rank| {
                let coll = coll.clone();
                let f = f.clone();
                std::thread::spawn(move || f(rank, coll))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    #[test]
    fn thread_broadcast_delivers_root_value() {
        let coll = Arc::new(ThreadCollective::new(4));
        let out = run_ranks(4, coll, |rank, c| {
            c.broadcast_u64(rank, 0, if rank == 0 { 0xfeed } else { 999 })
        });
        for r in out {
            assert_eq!(r.unwrap(), 0xfeed);
        }
    }

    #[test]
    fn thread_uniform_detects_mismatch() {
        let coll = Arc::new(ThreadCollective::new(2));
        let out = run_ranks(2, coll, |rank, c| c.require_uniform_u64(rank, rank as u64));
        assert!(out.iter().all(|r| matches!(r, Err(CollectiveError::Mismatch(_)))));
    }

    #[test]
    fn thread_abort_wakes_waiters() {
        let coll = Arc::new(ThreadCollective::new(2));
        let waiter = {
            let c = coll.clone();
            std::thread::spawn(move || c.barrier(0))
        };
        std::thread::sleep(Duration::from_millis(20));
        coll.abort();
        assert!(matches!(waiter.join().unwrap(), Err(CollectiveError::Aborted)));
    }

    #[test]
    fn fs_collective_over_independent_instances() {
        // Each rank builds its own instance, sharing only the directory —
        // exactly a separate process's view of the world.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        let handles: Vec<_> = (0..3)
            .map(|rank| {
                let path = path.clone();
                std::thread::spawn(move || {
                    let coll = FsCollective::new(&path, 3).unwrap();
                    coll.barrier(rank)?;
                    let nonce = coll.broadcast_u64(rank, 0, 7000 + rank as u64)?;
                    coll.require_uniform_u64(rank, nonce)
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap().unwrap(), 7000);
        }
    }

    #[test]
    fn fs_collective_sequences_do_not_bleed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        let handles: Vec<_> = (0..2)
            .map(|rank| {
                let path = path.clone();
                std::thread::spawn(move || {
                    let coll = FsCollective::new(&path, 2).unwrap();
                    let mut sum = 0;
                    for round in 0..5u64 {
                        sum += coll.broadcast_u64(rank, (round % 2) as usize, round * 10 + rank as u64)?;
                    }
                    Ok::<u64, CollectiveError>(sum)
                })
            })
            .collect();
        let sums: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect();
        // Round r broadcasts root (r % 2)'s value: r*10 + (r % 2).
        let expected: u64 = (0..5).map(|r| r * 10 + (r % 2)).sum();
        assert_eq!(sums, vec![expected; 2]);
    }
}

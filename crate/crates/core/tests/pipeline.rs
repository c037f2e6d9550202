//! End-to-end behavior of the staged pipeline with ranks as threads and
//! in-process syncers: collective verbs, FIFO writeback, throttling,
//! sentinel shutdown, and post-crash recovery.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use stagedio_core::backend::{BackendLocator, RetryPolicy, WritebackTarget};
use stagedio_core::collective::{Collective, FsCollective, ThreadCollective};
use stagedio_core::engine::FailPoint;
use stagedio_core::facade::{
    FacadeError, FileView, JobConfig, JobGroup, OpenMode, OpenOutcome, RankIo,
};
use stagedio_core::harness::oracle::{compare_posix_file, OracleImage};
use stagedio_core::naming;
use stagedio_core::recovery;
use stagedio_core::syncer::{self, execute_writeback, load_chunk_list, plan_writeback, SyncerConfig};
use stagedio_core::ChunkRecord;

struct TestJob {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    cache_dirs: Vec<PathBuf>,
    target: PathBuf,
    group: JobGroup,
    collective: Arc<dyn Collective>,
}

fn job(world: usize, nodes: usize, backlog_limit: Option<usize>) -> TestJob {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cache_dirs: Vec<PathBuf> = (0..nodes).map(|n| root.join(format!("node{n}"))).collect();
    for d in &cache_dirs {
        fs::create_dir_all(d).unwrap();
    }
    let collective: Arc<dyn Collective> = Arc::new(ThreadCollective::new(world));
    let cfg = JobConfig {
        world_size: world,
        node_of_rank: (0..world).map(|r| r * nodes / world).collect(),
        cache_dirs: cache_dirs.clone(),
        staging_prefix: PathBuf::from("/staged"),
        backlog_limit,
        backlog_poll: Duration::from_millis(2),
    };
    let group = JobGroup::new(cfg, collective.clone()).unwrap();
    TestJob { _tmp: tmp, root: root.clone(), cache_dirs, target: PathBuf::from("/staged/out.bin"), group, collective }
}

fn spawn_ranks<T: Send + 'static>(
    job: &TestJob,
    world: usize,
    f: impl Fn(RankIo) -> Result<T, FacadeError> + Send + Sync + Clone + 'static,
) -> Vec<Result<T, FacadeError>> {
    let handles: Vec<_> = (0..world)
        .map(|rank| {
            let io = job.group.rank(rank);
            let f = f.clone();
            std::thread::spawn(move || f(io))
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

fn start_syncer(watch: &Path, target: &Path, poll_ms: u64, retain: bool) -> SyncerThread {
    let stop = Arc::new(AtomicBool::new(false));
    let mut cfg = SyncerConfig::new(
        watch,
        BackendLocator::Posix { path: target.to_path_buf() },
    );
    cfg.poll_interval = Duration::from_millis(poll_ms);
    cfg.retain = retain;
    cfg.stop = Some(stop.clone());
    let join = std::thread::spawn(move || syncer::run(&cfg));
    SyncerThread { join, stop }
}

struct SyncerThread {
    join: std::thread::JoinHandle<Result<syncer::SyncerReport, syncer::SyncError>>,
    stop: Arc<AtomicBool>,
}

impl SyncerThread {
    fn finish(self) -> syncer::SyncerReport {
        self.join.join().unwrap().unwrap()
    }

    fn kill(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.join.join();
    }
}

// --- facade verbs ---------------------------------------------------------

#[test]
fn open_gives_every_rank_a_fresh_session() {
    let j = job(4, 1, None);
    let out = spawn_ranks(&j, 4, |mut io| {
        io.file_open(Path::new("/staged/out/field.vtk"), OpenMode::WriteOnlyCreate)?;
        Ok(io.session().unwrap().glob_off())
    });
    for r in out {
        assert_eq!(r.unwrap(), 0);
    }
}

#[test]
fn read_intent_is_refused() {
    let j = job(2, 1, None);
    let out = spawn_ranks(&j, 2, |mut io| {
        match io.file_open(Path::new("/staged/x.bin"), OpenMode::ReadWrite) {
            Err(FacadeError::UnstagedMode) => Ok(()),
            other => panic!("expected UnstagedMode, got {other:?}"),
        }
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
}

#[test]
fn paths_outside_the_prefix_pass_through() {
    let j = job(2, 1, None);
    let out = spawn_ranks(&j, 2, |mut io| {
        match io.file_open(Path::new("/pfs/x.bin"), OpenMode::WriteOnlyCreate)? {
            OpenOutcome::Passthrough => Ok(()),
            OpenOutcome::Staged => panic!("should not stage /pfs paths"),
        }
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
}

#[test]
fn set_view_positions_each_rank() {
    let j = job(4, 1, None);
    let mib = 1024 * 1024;
    let out = spawn_ranks(&j, 4, move |mut io| {
        io.file_open(Path::new("/staged/v.bin"), OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, mib, 4))?;
        Ok(io.session().unwrap().glob_off())
    });
    let positions: Vec<u64> = out.into_iter().map(|r| r.unwrap()).collect();
    assert_eq!(positions, vec![0, mib, 2 * mib, 3 * mib]);
}

#[test]
fn set_view_displacement_matches_first_write() {
    let j = job(1, 1, None);
    let out = spawn_ranks(&j, 1, |mut io| {
        io.file_open(Path::new("/staged/v.bin"), OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(128, 1024, 1))?;
        io.file_write_all(&[7u8; 1024])?;
        let s = io.session().unwrap();
        Ok((s.head_off(), s.cur_off(), s.glob_off()))
    });
    assert_eq!(out[0].as_ref().unwrap(), &(128, 1024, 1152));
}

#[test]
fn mismatched_displacement_fails_the_collective() {
    let j = job(2, 1, None);
    let out = spawn_ranks(&j, 2, |mut io| {
        io.file_open(Path::new("/staged/v.bin"), OpenMode::WriteOnlyCreate)?;
        let disp = if io.rank() == 0 { 0 } else { 4096 };
        match io.file_set_view(FileView::contiguous(disp, 1024, 2)) {
            Err(FacadeError::Collective(_)) => Ok(()),
            other => panic!("expected collective mismatch, got {other:?}"),
        }
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
}

#[test]
fn contiguous_write_all_decomposes_by_rank() {
    let j = job(2, 1, None);
    let target = j.target.clone();
    let syncer = start_syncer(&j.cache_dirs[0].join(naming::READY_DIR), &j.root.join("remote.bin"), 5, false);
    let out = spawn_ranks(&j, 2, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 1024, 2))?;
        let fill = vec![io.rank() as u8 + 1; 1024];
        io.file_write_all(&fill)?;
        io.file_close()?;
        io.finalize()?;
        Ok(())
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
    syncer.finish();
    let remote = fs::read(j.root.join("remote.bin")).unwrap();
    assert_eq!(remote.len(), 2048);
    assert!(remote[..1024].iter().all(|&b| b == 1));
    assert!(remote[1024..].iter().all(|&b| b == 2));
}

#[test]
fn consecutive_write_alls_extend_one_segment() {
    // One rank, contiguous view: the second collective lands exactly at the
    // segment end and appends instead of sealing.
    let j = job(1, 1, None);
    let out = spawn_ranks(&j, 1, |mut io| {
        io.file_open(Path::new("/staged/a.bin"), OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 2048, 1))?;
        io.file_write_all(&[1u8; 2048])?;
        io.file_write_all(&[2u8; 2048])?;
        let s = io.session().unwrap();
        Ok((s.segments_created(), s.cur_off()))
    });
    assert_eq!(out[0].as_ref().unwrap(), &(1, 4096));
}

#[test]
fn strided_blocks_seal_per_block() {
    let j = job(2, 1, None);
    let out = spawn_ranks(&j, 2, |mut io| {
        io.file_open(Path::new("/staged/s.bin"), OpenMode::WriteOnlyCreate)?;
        // Stride leaves a gap after the two ranks' blocks.
        io.file_set_view(FileView::strided(0, 512, 512 * 2 + 256))?;
        io.file_write_all(&vec![9u8; 512 * 3])?; // 3 blocks per rank
        Ok(io.segments_created())
    });
    for r in out {
        assert_eq!(r.unwrap(), 3, "every strided block starts a new segment");
    }
}

#[test]
fn ragged_write_rejected() {
    let j = job(1, 1, None);
    let out = spawn_ranks(&j, 1, |mut io| {
        io.file_open(Path::new("/staged/r.bin"), OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 1000, 1))?;
        match io.file_write_all(&[0u8; 1500]) {
            Err(FacadeError::RaggedData { .. }) => Ok(()),
            other => panic!("expected RaggedData, got {other:?}"),
        }
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
}

#[test]
fn sync_publishes_one_list_per_rank_even_when_empty() {
    let j = job(3, 1, None);
    let out = spawn_ranks(&j, 3, |mut io| {
        io.file_open(Path::new("/staged/e.bin"), OpenMode::WriteOnlyCreate)?;
        io.file_sync() // nothing written yet
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
    let ready = j.cache_dirs[0].join(naming::READY_DIR);
    let lists: Vec<_> = fs::read_dir(&ready)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(naming::CHUNK_LIST_SUFFIX))
        .collect();
    assert_eq!(lists.len(), 3, "one empty list per rank: {lists:?}");
}

#[test]
fn epoch_counters_stay_lockstep_across_collectives() {
    let j = job(4, 2, None);
    let counters = Arc::new(Mutex::new(Vec::new()));
    let c2 = counters.clone();
    let out = spawn_ranks(&j, 4, move |mut io| {
        io.file_open(Path::new("/staged/l.bin"), OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 64, 4))?;
        io.file_write_all(&[1u8; 64])?;
        io.file_sync()?;
        c2.lock().unwrap().push(io.epoch_counter());
        io.file_write_all(&[2u8; 64])?;
        io.file_close()?;
        c2.lock().unwrap().push(io.epoch_counter());
        Ok(())
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
    let counters = counters.lock().unwrap();
    assert_eq!(counters.iter().filter(|&&c| c == 1).count(), 4, "all ranks at 1 after sync");
    assert_eq!(counters.iter().filter(|&&c| c == 2).count(), 4, "all ranks at 2 after close");
}

#[test]
fn close_throttles_until_backlog_drains() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("node0");
    fs::create_dir_all(&cache).unwrap();
    let collective: Arc<dyn Collective> = Arc::new(ThreadCollective::new(1));
    let cfg = JobConfig {
        world_size: 1,
        node_of_rank: vec![0],
        cache_dirs: vec![cache.clone()],
        staging_prefix: PathBuf::from("/staged"),
        backlog_limit: Some(1),
        backlog_poll: Duration::from_millis(2),
    };
    let group = JobGroup::new(cfg, collective).unwrap();
    let mut io = group.rank(0);

    io.file_open(Path::new("/staged/t.bin"), OpenMode::WriteOnlyCreate).unwrap();
    io.file_set_view(FileView::contiguous(0, 512, 1)).unwrap();
    io.file_write_all(&[3u8; 512]).unwrap();

    // Start a deliberately slow syncer after a delay, then close: the close
    // must block until the syncer drains the list it publishes.
    let watch = cache.join(naming::READY_DIR);
    let target = tmp.path().join("remote.bin");
    let syncer_thread = {
        let watch = watch.clone();
        let target = target.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(150));
            let mut cfg = SyncerConfig::new(&watch, BackendLocator::Posix { path: target });
            cfg.poll_interval = Duration::from_millis(5);
            syncer::run(&cfg)
        })
    };
    let start = Instant::now();
    io.file_close().unwrap();
    let waited = start.elapsed();
    assert!(
        waited >= Duration::from_millis(100),
        "close returned in {waited:?} without waiting for the drain"
    );
    io.finalize().unwrap();
    syncer_thread.join().unwrap().unwrap();
}

#[test]
fn finalize_is_idempotent_and_late_syncers_drain() {
    let j = job(2, 1, None);
    let target = j.target.clone();
    let out = spawn_ranks(&j, 2, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 256, 2))?;
        io.file_write_all(&vec![io.rank() as u8 + 5; 256])?;
        io.file_close()?;
        io.finalize()?;
        io.finalize()?; // second finalize is a no-op
        Ok(())
    });
    assert!(out.into_iter().all(|r| r.is_ok()));

    // No syncer ran yet: the sentinel and the lists are still there. A
    // late-started syncer drains the queue, then exits on the sentinel.
    let remote = j.root.join("remote.bin");
    let syncer = start_syncer(&j.cache_dirs[0].join(naming::READY_DIR), &remote, 5, false);
    let report = syncer.finish();
    assert_eq!(report.lists_processed, 2);
    let bytes = fs::read(&remote).unwrap();
    assert!(bytes[..256].iter().all(|&b| b == 5));
    assert!(bytes[256..512].iter().all(|&b| b == 6));
}

#[test]
fn ranks_sharing_only_the_filesystem_reach_the_same_state() {
    // Each rank builds its own JobGroup over an FsCollective: nothing is
    // shared in memory, exactly like separate processes.
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    fs::create_dir_all(root.join("node0")).unwrap();
    let handles: Vec<_> = (0..2)
        .map(|rank| {
            let root = root.clone();
            std::thread::spawn(move || -> Result<(), FacadeError> {
                let coll: Arc<dyn Collective> =
                    Arc::new(FsCollective::new(&root.join("rendezvous"), 2).map_err(stagedio_core::engine::EngineError::Io)?);
                let cfg = JobConfig {
                    world_size: 2,
                    node_of_rank: vec![0, 0],
                    cache_dirs: vec![root.join("node0")],
                    staging_prefix: PathBuf::from("/staged"),
                    backlog_limit: None,
                    backlog_poll: Duration::from_millis(2),
                };
                let group = JobGroup::new(cfg, coll)?;
                let mut io = group.rank(rank);
                io.file_open(Path::new("/staged/fs.bin"), OpenMode::WriteOnlyCreate)?;
                io.file_set_view(FileView::contiguous(0, 128, 2))?;
                io.file_write_all(&[rank as u8 + 1; 128])?;
                io.file_close()?;
                io.finalize()?;
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap().unwrap();
    }
    // Both ranks used one nonce: exactly two lists of the same epoch tag.
    let ready = root.join("node0").join(naming::READY_DIR);
    let mut tags: Vec<String> = fs::read_dir(&ready)
        .unwrap()
        .filter_map(|e| naming::parse_chunk_list_name(&e.unwrap().file_name().to_string_lossy()).map(|p| p.epoch.tag()))
        .collect();
    tags.sort();
    tags.dedup();
    assert_eq!(tags.len(), 1, "one shared epoch across process-style ranks");
}

// --- syncer behavior ------------------------------------------------------

struct CountingTarget {
    writes: Vec<(u64, u64)>,
    fail_times: u32,
}

impl WritebackTarget for CountingTarget {
    fn write_range(&mut self, offset: u64, data: &[u8]) -> std::io::Result<()> {
        if self.fail_times > 0 {
            self.fail_times -= 1;
            return Err(std::io::Error::other("injected backend failure"));
        }
        self.writes.push((offset, data.len() as u64));
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }

    fn bytes_written(&self) -> u64 {
        self.writes.iter().map(|(_, l)| l).sum()
    }
}

fn make_cache_with_list(records: &[(u64, Vec<u8>)]) -> (tempfile::TempDir, PathBuf, Vec<ChunkRecord>) {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().to_path_buf();
    fs::create_dir_all(cache.join(naming::READY_DIR)).unwrap();
    let epoch = stagedio_core::EpochId::initial(0xc0de);
    let mut recs = Vec::new();
    for (offset, data) in records {
        let name = naming::segment_name("m.bin", epoch, 0, *offset);
        fs::write(cache.join(&name), data).unwrap();
        recs.push(ChunkRecord { segment_name: name, offset: *offset, length: data.len() as u64 });
    }
    (tmp, cache, recs)
}

#[test]
fn contiguous_records_become_one_ranged_write() {
    let (_tmp, cache, recs) =
        make_cache_with_list(&[(0, vec![1u8; 1024]), (1024, vec![2u8; 1024])]);
    let plan = plan_writeback(&recs).unwrap();
    assert_eq!(plan.runs.len(), 1);
    let mut target = CountingTarget { writes: Vec::new(), fail_times: 0 };
    execute_writeback(&plan, &cache, &mut target, &RetryPolicy::default()).unwrap();
    assert_eq!(target.writes, vec![(0, 2048)]);
}

#[test]
fn transient_backend_failures_are_retried() {
    let (_tmp, cache, recs) = make_cache_with_list(&[(0, vec![7u8; 512])]);
    let plan = plan_writeback(&recs).unwrap();
    let mut target = CountingTarget { writes: Vec::new(), fail_times: 2 };
    let retry = RetryPolicy { attempts: 5, base_backoff: Duration::from_millis(1) };
    execute_writeback(&plan, &cache, &mut target, &retry).unwrap();
    assert_eq!(target.writes, vec![(0, 512)]);
}

#[test]
fn permanent_backend_failure_leaves_inputs_in_place() {
    let (_tmp, cache, recs) = make_cache_with_list(&[(0, vec![7u8; 512])]);
    let plan = plan_writeback(&recs).unwrap();
    let mut target = CountingTarget { writes: Vec::new(), fail_times: 99 };
    let retry = RetryPolicy { attempts: 3, base_backoff: Duration::from_millis(1) };
    assert!(execute_writeback(&plan, &cache, &mut target, &retry).is_err());
    // The segment is untouched; a later retry or recovery can still use it.
    assert!(cache.join(&recs[0].segment_name).exists());
}

#[test]
fn sentinel_with_empty_queue_exits_immediately() {
    let tmp = tempfile::tempdir().unwrap();
    let watch = tmp.path().join(naming::READY_DIR);
    fs::create_dir_all(&watch).unwrap();
    fs::write(watch.join(naming::EXIT_SENTINEL), b"").unwrap();
    let mut cfg = SyncerConfig::new(&watch, BackendLocator::Posix { path: tmp.path().join("r.bin") });
    cfg.poll_interval = Duration::from_millis(5);
    let start = Instant::now();
    let report = syncer::run(&cfg).unwrap();
    assert_eq!(report.lists_processed, 0);
    assert!(start.elapsed() < Duration::from_secs(2));
}

#[test]
fn lists_are_processed_in_arrival_order() {
    // Three epochs from one rank, all present before the syncer starts: the
    // final remote bytes must come from the highest epoch.
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().to_path_buf();
    let ready = cache.join(naming::READY_DIR);
    fs::create_dir_all(&ready).unwrap();
    for counter in 0..3u64 {
        let epoch = stagedio_core::EpochId::with_counter(0xabc, counter);
        let seg = naming::segment_name("f.bin", epoch, 0, 0);
        fs::write(cache.join(&seg), vec![counter as u8 + 1; 256]).unwrap();
        let records = vec![ChunkRecord { segment_name: seg, offset: 0, length: 256 }];
        let tmp_list = cache.join("list.tmp");
        stagedio_core::chunklist::write_durable(&tmp_list, &records).unwrap();
        fs::rename(&tmp_list, ready.join(naming::chunk_list_name("f.bin", epoch, 0))).unwrap();
    }
    fs::write(ready.join(naming::EXIT_SENTINEL), b"").unwrap();
    let target = tmp.path().join("remote.bin");
    let mut cfg = SyncerConfig::new(&ready, BackendLocator::Posix { path: target.clone() });
    cfg.poll_interval = Duration::from_millis(5);
    let report = syncer::run(&cfg).unwrap();
    assert_eq!(report.lists_processed, 3);
    let bytes = fs::read(&target).unwrap();
    assert!(bytes.iter().all(|&b| b == 3), "highest epoch must win");
}

#[test]
fn corrupt_list_is_quarantined_and_the_loop_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().to_path_buf();
    let ready = cache.join(naming::READY_DIR);
    fs::create_dir_all(&ready).unwrap();
    let epoch = stagedio_core::EpochId::initial(5);

    // A corrupt list (bad crc)...
    let bad_name = naming::chunk_list_name("f.bin", epoch, 0);
    fs::write(ready.join(&bad_name), b"garbage\tnot\tvalid\n#count=1 crc32=00000000\n").unwrap();
    // ...and a good one from another rank.
    let seg = naming::segment_name("f.bin", epoch, 1, 64);
    fs::write(cache.join(&seg), vec![9u8; 32]).unwrap();
    let good = vec![ChunkRecord { segment_name: seg, offset: 64, length: 32 }];
    let tmp_list = cache.join("l.tmp");
    stagedio_core::chunklist::write_durable(&tmp_list, &good).unwrap();
    fs::rename(&tmp_list, ready.join(naming::chunk_list_name("f.bin", epoch, 1))).unwrap();
    fs::write(ready.join(naming::EXIT_SENTINEL), b"").unwrap();

    let target = tmp.path().join("remote.bin");
    let mut cfg = SyncerConfig::new(&ready, BackendLocator::Posix { path: target.clone() });
    cfg.poll_interval = Duration::from_millis(5);
    let report = syncer::run(&cfg).unwrap();
    assert_eq!(report.quarantined, 1);
    assert_eq!(report.lists_processed, 1);
    assert!(ready.join(naming::QUARANTINE_DIR).join(&bad_name).exists());
    assert_eq!(fs::read(&target).unwrap().len(), 96);
}

#[test]
fn missing_segment_quarantines_the_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().to_path_buf();
    let ready = cache.join(naming::READY_DIR);
    fs::create_dir_all(&ready).unwrap();
    let epoch = stagedio_core::EpochId::initial(6);
    let records = vec![ChunkRecord {
        segment_name: naming::segment_name("f.bin", epoch, 0, 0),
        offset: 0,
        length: 128,
    }];
    let tmp_list = cache.join("l.tmp");
    stagedio_core::chunklist::write_durable(&tmp_list, &records).unwrap();
    fs::rename(&tmp_list, ready.join(naming::chunk_list_name("f.bin", epoch, 0))).unwrap();
    fs::write(ready.join(naming::EXIT_SENTINEL), b"").unwrap();

    let mut cfg = SyncerConfig::new(&ready, BackendLocator::Posix { path: tmp.path().join("r.bin") });
    cfg.poll_interval = Duration::from_millis(5);
    let report = syncer::run(&cfg).unwrap();
    assert_eq!(report.quarantined, 1);
}

#[test]
fn load_rejects_wrong_length_segments() {
    let (_tmp, cache, mut recs) = make_cache_with_list(&[(0, vec![1u8; 100])]);
    recs[0].length = 200; // lie about the length
    let tmp_list = cache.join("l.tmp");
    stagedio_core::chunklist::write_durable(&tmp_list, &recs).unwrap();
    let out = load_chunk_list(&tmp_list, &cache).unwrap();
    assert!(out.is_err());
}

// --- consistency point, epochs and recovery -------------------------------

/// Writes a two-epoch overwrite job and returns (root, cache, oracle bytes).
fn overwrite_job(retain: bool) -> (TestJob, SyncerThread, Vec<u8>) {
    let j = job(1, 1, None);
    let remote = j.root.join("remote.bin");
    let syncer = start_syncer(&j.cache_dirs[0].join(naming::READY_DIR), &remote, 5, retain);
    let target = j.target.clone();
    let out = spawn_ranks(&j, 1, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 1024, 1))?;
        io.file_write_all(&[0xAAu8; 1024])?;
        io.file_sync()?;
        io.file_set_view(FileView::contiguous(0, 1024, 1))?;
        io.file_write_all(&[0xBBu8; 1024])?;
        io.file_close()?;
        io.finalize()?;
        Ok(())
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
    (j, syncer, vec![0xBBu8; 1024])
}

#[test]
fn later_epoch_lands_on_top_live() {
    let (j, syncer, expected) = overwrite_job(false);
    let report = syncer.finish();
    assert_eq!(report.lists_processed, 2);
    assert_eq!(fs::read(j.root.join("remote.bin")).unwrap(), expected);
}

#[test]
fn later_epoch_lands_on_top_through_recovery() {
    let (j, syncer, expected) = overwrite_job(true);
    syncer.finish();
    // Recover into a fresh file using only the caches.
    let fresh = j.root.join("recovered.bin");
    let inv = recovery::scan(&j.cache_dirs).unwrap();
    let outcome = recovery::recover(
        &inv,
        &BackendLocator::Posix { path: fresh.clone() },
        &recovery::RecoveryOptions { world_size: 1, dry_run: false, retry: RetryPolicy::default() },
    )
    .unwrap();
    assert_eq!(outcome.replayed_epochs, vec![0, 1]);
    assert_eq!(fs::read(&fresh).unwrap(), expected);
}

#[test]
fn close_is_a_consistency_point_without_any_syncer() {
    // No syncer ever runs; after collective close the remote file is fully
    // reconstructible from the caches.
    let j = job(4, 2, None);
    let target = j.target.clone();
    let out = spawn_ranks(&j, 4, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 512, 4))?;
        io.file_write_all(&vec![io.rank() as u8 + 1; 1024])?; // 2 blocks per rank
        io.file_close()?;
        Ok(())
    });
    assert!(out.into_iter().all(|r| r.is_ok()));

    let fresh = j.root.join("recovered.bin");
    let inv = recovery::scan(&j.cache_dirs).unwrap();
    assert!(inv.rejected.is_empty());
    assert!(inv.orphan_segments.is_empty());
    let outcome = recovery::recover(
        &inv,
        &BackendLocator::Posix { path: fresh.clone() },
        &recovery::RecoveryOptions { world_size: 4, dry_run: false, retry: RetryPolicy::default() },
    )
    .unwrap();
    assert_eq!(outcome.consistency_counter, Some(0));

    let bytes = fs::read(&fresh).unwrap();
    let mut expected = OracleImage::default();
    for rank in 0..4u64 {
        for k in 0..2u64 {
            expected.write(k * 2048 + rank * 512, &vec![rank as u8 + 1; 512]);
        }
    }
    assert!(compare_posix_file(&expected, &fresh).unwrap().matches, "{bytes:?}");
}

#[test]
fn recovery_promotes_temp_lists() {
    // Rank 1 of two crashes between flush and rename at close.
    let j = job(2, 1, None);
    let target = j.target.clone();
    let coll = j.collective.clone();
    let out = spawn_ranks(&j, 2, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 256, 2))?;
        io.file_write_all(&vec![io.rank() as u8 + 1; 256])?;
        if io.rank() == 1 {
            io.arm_fail_point(FailPoint::BeforeRename);
        }
        match io.file_close() {
            Ok(()) => Ok(false),
            Err(FacadeError::Engine(stagedio_core::engine::EngineError::FailPointHalt)) => {
                coll.abort();
                Ok(true)
            }
            Err(FacadeError::Collective(_)) => Ok(false),
            Err(e) => Err(e),
        }
    });
    let crashes: Vec<bool> = out.into_iter().map(|r| r.unwrap()).collect();
    assert_eq!(crashes.iter().filter(|&&c| c).count(), 1);

    let inv = recovery::scan(&j.cache_dirs).unwrap();
    assert_eq!(inv.lists.iter().filter(|l| l.promoted).count(), 1);
    let fresh = j.root.join("recovered.bin");
    let outcome = recovery::recover(
        &inv,
        &BackendLocator::Posix { path: fresh.clone() },
        &recovery::RecoveryOptions { world_size: 2, dry_run: false, retry: RetryPolicy::default() },
    )
    .unwrap();
    assert_eq!(outcome.consistency_counter, Some(0), "temp promotion completes the epoch");
    let bytes = fs::read(&fresh).unwrap();
    assert!(bytes[..256].iter().all(|&b| b == 1));
    assert!(bytes[256..].iter().all(|&b| b == 2));
}

#[test]
fn partial_epoch_stops_recovery_at_the_previous_point() {
    // Two epochs; rank 1's second list never exists (crash before close).
    let j = job(2, 1, None);
    let target = j.target.clone();
    let coll = j.collective.clone();
    let out = spawn_ranks(&j, 2, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 256, 2))?;
        io.file_write_all(&vec![1u8; 256])?;
        io.file_sync()?;
        io.file_set_view(FileView::contiguous(0, 256, 2))?;
        io.file_write_all(&vec![2u8; 256])?;
        if io.rank() == 1 {
            io.arm_fail_point(stagedio_core::engine::FailPoint::BeforeListWrite);
        }
        match io.file_close() {
            Ok(()) => Ok(false),
            Err(FacadeError::Engine(stagedio_core::engine::EngineError::FailPointHalt)) => {
                coll.abort();
                Ok(true)
            }
            Err(FacadeError::Collective(_)) => Ok(false),
            Err(e) => Err(e),
        }
    });
    assert_eq!(out.into_iter().filter(|r| *r.as_ref().unwrap()).count(), 1);

    let inv = recovery::scan(&j.cache_dirs).unwrap();
    assert!(!inv.orphan_segments.is_empty(), "the unlisted final segment is an orphan");
    let fresh = j.root.join("recovered.bin");
    let outcome = recovery::recover(
        &inv,
        &BackendLocator::Posix { path: fresh.clone() },
        &recovery::RecoveryOptions { world_size: 2, dry_run: false, retry: RetryPolicy::default() },
    )
    .unwrap();
    assert_eq!(outcome.consistency_counter, Some(0));
    assert_eq!(outcome.stopped_at_partial, Some(1));
    let bytes = fs::read(&fresh).unwrap();
    assert!(bytes.iter().all(|&b| b == 1), "only epoch 0 may land");
}

#[test]
fn recovery_is_idempotent() {
    let (j, syncer, expected) = overwrite_job(true);
    syncer.finish();
    let fresh = j.root.join("recovered.bin");
    let inv = recovery::scan(&j.cache_dirs).unwrap();
    let opts =
        recovery::RecoveryOptions { world_size: 1, dry_run: false, retry: RetryPolicy::default() };
    let locator = BackendLocator::Posix { path: fresh.clone() };
    recovery::recover(&inv, &locator, &opts).unwrap();
    let first = fs::read(&fresh).unwrap();
    recovery::recover(&inv, &locator, &opts).unwrap();
    let second = fs::read(&fresh).unwrap();
    assert_eq!(first, second);
    assert_eq!(second, expected);
}

#[test]
fn missing_segment_is_a_hard_recovery_error() {
    let (j, syncer, _) = overwrite_job(true);
    syncer.finish();
    // Delete one referenced segment out from under recovery.
    let inv = recovery::scan(&j.cache_dirs).unwrap();
    let victim = inv.lists[0].records[0].segment_name.clone();
    fs::remove_file(j.cache_dirs[0].join(&victim)).unwrap();
    let inv = recovery::scan(&j.cache_dirs).unwrap();
    let err = recovery::recover(
        &inv,
        &BackendLocator::Posix { path: j.root.join("x.bin") },
        &recovery::RecoveryOptions { world_size: 1, dry_run: false, retry: RetryPolicy::default() },
    )
    .unwrap_err();
    match err {
        recovery::RecoveryError::MissingSegment { segment, .. } => assert_eq!(segment, victim),
        other => panic!("expected MissingSegment, got {other}"),
    }
}

#[test]
fn two_nodes_write_disjoint_ranges_concurrently() {
    let j = job(2, 2, None);
    let remote = j.root.join("remote.bin");
    let syncers: Vec<_> = j
        .cache_dirs
        .iter()
        .map(|c| start_syncer(&c.join(naming::READY_DIR), &remote, 5, false))
        .collect();
    let target = j.target.clone();
    let out = spawn_ranks(&j, 2, move |mut io| {
        io.file_open(&target, OpenMode::WriteOnlyCreate)?;
        io.file_set_view(FileView::contiguous(0, 64 * 1024, 2))?;
        io.file_write_all(&vec![io.rank() as u8 + 1; 4 * 64 * 1024])?;
        io.file_close()?;
        io.finalize()?;
        Ok(())
    });
    assert!(out.into_iter().all(|r| r.is_ok()));
    for s in syncers {
        s.finish();
    }
    let bytes = fs::read(&remote).unwrap();
    assert_eq!(bytes.len(), 8 * 64 * 1024);
    for k in 0..4usize {
        let base = k * 2 * 64 * 1024;
        assert!(bytes[base..base + 64 * 1024].iter().all(|&b| b == 1));
        assert!(bytes[base + 64 * 1024..base + 2 * 64 * 1024].iter().all(|&b| b == 2));
    }
}

//! Segment-overhead microbenchmark.
//!
//! Measures open-write-close throughput through the cache engine against
//! plain file writes on the same storage, across a sweep of write sizes,
//! plus the append-extend and seek-new-offset patterns. Per-segment fixed
//! costs (create, seal flush, chunk list, rename) amortize as the write
//! grows, so the staged/direct ratio climbs with size.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::engine::Session;
use crate::epoch::EpochId;

pub const DEFAULT_SIZES_KIB: &[u64] = &[1, 4, 16, 64, 256, 1024, 4096, 16384];

/// Aim at this much data per measured point so small sizes get many reps.
const BYTES_PER_POINT: u64 = 48 * 1024 * 1024;
const MIN_REPS: u64 = 4;
const MAX_REPS: u64 = 512;
/// Sealed-segment chain length for the append / seek-write patterns.
const CHAIN_WRITES: u64 = 64;

#[derive(Debug, Clone)]
pub struct BenchPoint {
    pub size_kib: u64,
    pub direct_mib_s: f64,
    pub staged_mib_s: f64,
    /// staged / direct
    pub ratio: f64,
    pub append_mib_s: f64,
    pub seek_write_mib_s: f64,
}

pub fn csv_header() -> &'static str {
    "size_kib,direct_mib_s,staged_mib_s,ratio,append_mib_s,seek_write_mib_s"
}

pub fn to_csv(points: &[BenchPoint]) -> String {
    let mut out = String::from(csv_header());
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{:.1},{:.1},{:.3},{:.1},{:.1}\n",
            p.size_kib, p.direct_mib_s, p.staged_mib_s, p.ratio, p.append_mib_s, p.seek_write_mib_s
        ));
    }
    out
}

fn reps_for(size: u64) -> u64 {
    (BYTES_PER_POINT / size).clamp(MIN_REPS, MAX_REPS)
}

fn mib_s(bytes: u64, secs: f64) -> f64 {
    (bytes as f64 / (1024.0 * 1024.0)) / secs.max(1e-9)
}

/// Runs the sweep on `storage`. Every size measures four patterns over the
/// same byte volume: direct file write, staged open-write-close, staged
/// contiguous appends, staged seek-to-new-offset writes.
pub fn run_segment_microbench(storage: &Path, sizes_kib: &[u64]) -> std::io::Result<Vec<BenchPoint>> {
    fs::create_dir_all(storage)?;
    let mut points = Vec::new();
    for (idx, &size_kib) in sizes_kib.iter().enumerate() {
        let size = size_kib * 1024;
        let reps = reps_for(size);
        let data = vec![0xabu8; size as usize];

        // Interleave-fair warmup.
        let warm = storage.join("warmup");
        fs::create_dir_all(&warm)?;
        direct_open_write_close(&warm, &data, 1)?;
        staged_open_write_close(&warm, &data, 1, 0x9999_0000 + idx as u64)?;
        fs::remove_dir_all(&warm)?;

        let dir = storage.join(format!("direct-{size_kib}"));
        fs::create_dir_all(&dir)?;
        let direct_secs = direct_open_write_close(&dir, &data, reps)?;
        fs::remove_dir_all(&dir)?;

        let dir = storage.join(format!("staged-{size_kib}"));
        fs::create_dir_all(&dir)?;
        let staged_secs = staged_open_write_close(&dir, &data, reps, 0x1111_0000 + idx as u64)?;
        fs::remove_dir_all(&dir)?;

        let chain = CHAIN_WRITES.min(reps.max(2));
        let dir = storage.join(format!("append-{size_kib}"));
        fs::create_dir_all(&dir)?;
        let append_secs = staged_chain(&dir, &data, chain, 0x2222_0000 + idx as u64, true)?;
        fs::remove_dir_all(&dir)?;

        let dir = storage.join(format!("seekw-{size_kib}"));
        fs::create_dir_all(&dir)?;
        let seek_secs = staged_chain(&dir, &data, chain, 0x3333_0000 + idx as u64, false)?;
        fs::remove_dir_all(&dir)?;

        let direct_mib_s = mib_s(size * reps, direct_secs);
        let staged_mib_s = mib_s(size * reps, staged_secs);
        points.push(BenchPoint {
            size_kib,
            direct_mib_s,
            staged_mib_s,
            ratio: staged_mib_s / direct_mib_s,
            append_mib_s: mib_s(size * chain, append_secs),
            seek_write_mib_s: mib_s(size * chain, seek_secs),
        });
    }
    Ok(points)
}

/// Baseline: create, write, fsync, close — what the write would cost
/// without staging.
fn direct_open_write_close(dir: &Path, data: &[u8], reps: u64) -> std::io::Result<f64> {
    let start = Instant::now();
    for i in 0..reps {
        let path = dir.join(format!("direct.{i}"));
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path)?;
        f.write_all(data)?;
        f.sync_all()?;
        drop(f);
    }
    Ok(start.elapsed().as_secs_f64())
}

/// One full engine session per rep: open, one write, close (which seals the
/// segment and publishes the chunk list).
fn staged_open_write_close(dir: &Path, data: &[u8], reps: u64, nonce: u64) -> std::io::Result<f64> {
    let start = Instant::now();
    for i in 0..reps {
        let mut s = Session::open("bench.bin", 0, dir, EpochId::with_counter(nonce, i))
            .map_err(std::io::Error::other)?;
        if !data.is_empty() {
            s.pwrite(data).map_err(std::io::Error::other)?;
        }
        s.close().map_err(std::io::Error::other)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// A chain of writes in one session. Contiguous mode extends one segment;
/// gapped mode seeks past a one-byte hole each time, sealing the previous
/// segment and creating a fresh one.
fn staged_chain(
    dir: &Path,
    data: &[u8],
    writes: u64,
    nonce: u64,
    contiguous: bool,
) -> std::io::Result<f64> {
    let start = Instant::now();
    let mut s = Session::open("chain.bin", 0, dir, EpochId::initial(nonce))
        .map_err(std::io::Error::other)?;
    let mut offset = 0u64;
    for _ in 0..writes {
        s.seek(offset).map_err(std::io::Error::other)?;
        s.pwrite(data).map_err(std::io::Error::other)?;
        offset += data.len() as u64;
        if !contiguous {
            offset += 1;
        }
    }
    s.close().map_err(std::io::Error::other)?;
    Ok(start.elapsed().as_secs_f64())
}

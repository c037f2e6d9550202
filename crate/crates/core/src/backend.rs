//! Remote-storage targets.
//!
//! The syncer and the recovery tool speak to remote storage through
//! [`WritebackTarget`]: ranged writes plus an explicit durability flush.
//! The POSIX implementation writes a (possibly sparse) file in place and is
//! safe under concurrent disjoint writers; the S3 path accumulates ranges
//! and uploads whole objects (see [`crate::s3`]) since objects are immutable.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::throttle::TokenBucket;

/// Granularity of throttled backend writes.
const IO_CHUNK: usize = 256 * 1024;

#[derive(Debug, Error)]
pub enum LocatorError {
    #[error("backend locator must start with `posix:` or `s3:`: {0}")]
    UnknownScheme(String),
    #[error("s3 locator must look like s3:http(s)://host:port/bucket/key: {0}")]
    BadS3(String),
}

/// Where remote writeback lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendLocator {
    Posix { path: PathBuf },
    S3(crate::s3::S3Locator),
}

impl BackendLocator {
    pub fn parse(s: &str) -> Result<BackendLocator, LocatorError> {
        if let Some(path) = s.strip_prefix("posix:") {
            return Ok(BackendLocator::Posix { path: PathBuf::from(path) });
        }
        if let Some(rest) = s.strip_prefix("s3:") {
            return Ok(BackendLocator::S3(
                crate::s3::S3Locator::parse(rest).ok_or_else(|| LocatorError::BadS3(s.into()))?,
            ));
        }
        Err(LocatorError::UnknownScheme(s.into()))
    }
}

impl std::fmt::Display for BackendLocator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendLocator::Posix { path } => write!(f, "posix:{}", path.display()),
            BackendLocator::S3(loc) => write!(f, "s3:{loc}"),
        }
    }
}

/// Ranged-write sink with an explicit durability flush.
pub trait WritebackTarget: Send {
    fn write_range(&mut self, offset: u64, data: &[u8]) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
    fn bytes_written(&self) -> u64;
}

/// Ranged writes into a shared POSIX file. Gaps stay sparse; unwritten
/// bytes read back as zero. Multiple instances (also in other processes)
/// may write disjoint regions of the same file concurrently.
pub struct PosixBackend {
    file: File,
    throttle: Option<Arc<TokenBucket>>,
    written: Arc<AtomicU64>,
}

impl PosixBackend {
    pub fn open(path: &Path, throttle: Option<Arc<TokenBucket>>) -> io::Result<PosixBackend> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().write(true).create(true).open(path)?;
        Ok(PosixBackend { file, throttle, written: Arc::new(AtomicU64::new(0)) })
    }

    pub fn byte_counter(&self) -> Arc<AtomicU64> {
        self.written.clone()
    }
}

impl WritebackTarget for PosixBackend {
    fn write_range(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        let mut pos = offset;
        for chunk in data.chunks(IO_CHUNK) {
            if let Some(bucket) = &self.throttle {
                bucket.acquire(chunk.len() as u64);
            }
            self.file.write_all_at(chunk, pos)?;
            pos += chunk.len() as u64;
        }
        self.written.fetch_add(data.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }

    fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }
}

/// How transient backend failures are retried.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 5, base_backoff: Duration::from_millis(100) }
    }
}

impl RetryPolicy {
    /// Runs `op` up to `attempts` times with doubling backoff between tries.
    pub fn run<T, E: std::fmt::Display>(
        &self,
        what: &str,
        mut op: impl FnMut() -> Result<T, E>,
    ) -> Result<T, E> {
        let mut backoff = self.base_backoff;
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    attempt += 1;
                    if attempt >= self.attempts.max(1) {
                        return Err(e);
                    }
                    log::warn!("{what} failed (attempt {attempt}): {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use tempfile::tempdir;

    #[test]
    fn locator_parsing() {
        assert_eq!(
            BackendLocator::parse("posix:/x/out.bin").unwrap(),
            BackendLocator::Posix { path: PathBuf::from("/x/out.bin") }
        );
        let loc = BackendLocator::parse("s3:http://127.0.0.1:9000/bkt/out/file.vtk").unwrap();
        match &loc {
            BackendLocator::S3(s3) => {
                assert_eq!(s3.bucket, "bkt");
                assert_eq!(s3.key, "out/file.vtk");
            }
            _ => panic!("expected s3"),
        }
        assert_eq!(loc.to_string(), "s3:http://127.0.0.1:9000/bkt/out/file.vtk");
        assert!(BackendLocator::parse("ftp:whatever").is_err());
        assert!(BackendLocator::parse("s3:nonsense").is_err());
    }

    #[test]
    fn write_range_echoes_back() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("out.bin");
        let mut b = PosixBackend::open(&path, None).unwrap();
        b.write_range(128, &[7u8; 1024]).unwrap();
        b.flush().unwrap();
        let mut contents = Vec::new();
        File::open(&path).unwrap().read_to_end(&mut contents).unwrap();
        assert_eq!(contents.len(), 128 + 1024);
        assert!(contents[..128].iter().all(|&b| b == 0), "hole reads back as zero");
        assert_eq!(&contents[128..], &[7u8; 1024]);
        assert_eq!(b.bytes_written(), 1024);
    }

    #[test]
    fn concurrent_disjoint_writers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("shared.bin");
        let mk = |seed: u8, off: u64| {
            let path = path.clone();
            std::thread::spawn(move || {
                let mut b = PosixBackend::open(&path, None).unwrap();
                for i in 0..64u64 {
                    let block = vec![seed.wrapping_add(i as u8); 4096];
                    b.write_range(off + i * 8192, &block).unwrap();
                }
                b.flush().unwrap();
            })
        };
        // Interleaved 4 KiB blocks from two independent file handles.
        let a = mk(1, 0);
        let b = mk(101, 4096);
        a.join().unwrap();
        b.join().unwrap();
        let contents = std::fs::read(&path).unwrap();
        for i in 0..64u64 {
            let at = (i * 8192) as usize;
            assert!(contents[at..at + 4096].iter().all(|&v| v == 1u8.wrapping_add(i as u8)));
            assert!(contents[at + 4096..at + 8192]
                .iter()
                .all(|&v| v == 101u8.wrapping_add(i as u8)));
        }
    }

    #[test]
    fn throttled_write_takes_expected_time() {
        let dir = tempdir().unwrap();
        let bucket = Arc::new(TokenBucket::new(4 * 1024 * 1024));
        let mut b =
            PosixBackend::open(&dir.path().join("slow.bin"), Some(bucket)).unwrap();
        let start = std::time::Instant::now();
        b.write_range(0, &vec![0u8; 2 * 1024 * 1024]).unwrap();
        let secs = start.elapsed().as_secs_f64();
        assert!(secs >= 0.35, "throttle not applied: {secs}");
    }

    #[test]
    fn retry_policy_retries_then_succeeds() {
        let mut failures = 2;
        let policy = RetryPolicy { attempts: 5, base_backoff: Duration::from_millis(1) };
        let out: Result<u32, String> = policy.run("op", || {
            if failures > 0 {
                failures -= 1;
                Err("transient".to_string())
            } else {
                Ok(42)
            }
        });
        assert_eq!(out.unwrap(), 42);
    }

    #[test]
    fn retry_policy_gives_up() {
        let policy = RetryPolicy { attempts: 3, base_backoff: Duration::from_millis(1) };
        let out: Result<(), String> = policy.run("op", || Err("down".to_string()));
        assert!(out.is_err());
    }
}

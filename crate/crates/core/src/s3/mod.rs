//! S3-compatible object writeback.
//!
//! Objects are immutable, so the syncer cannot issue ranged writes the way
//! the POSIX path does. Instead each node accumulates the final byte ranges
//! it holds, the nodes exchange (reshuffle) those ranges into large
//! contiguous pieces, and the object is committed either through the
//! multipart protocol (parts of at least 5 MiB except the last) or, for
//! small or holey files, through a single PUT with holes zero-filled.

mod client;
mod emulator;
pub(crate) mod http;
mod sync;

pub use client::{S3Client, S3Error};
pub use emulator::S3Emulator;
pub use sync::{sync_object, ObjectSyncConfig, ObjectSyncMode, ObjectSyncReport};

use std::collections::BTreeMap;

use thiserror::Error;

/// Smallest non-final multipart part accepted by S3.
pub const MIN_PART_SIZE: u64 = 5 * 1024 * 1024;
/// Objects at least this large (and hole-free) go through multipart upload.
pub const MULTIPART_THRESHOLD: u64 = 16 * 1024 * 1024;
/// Preferred part size when slicing an object.
pub const TARGET_PART_SIZE: u64 = 8 * 1024 * 1024;

/// `endpoint/bucket/key` coordinates of one object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct S3Locator {
    /// `http://host:port`
    pub endpoint: String,
    pub bucket: String,
    pub key: String,
}

impl S3Locator {
    /// Parses `http(s)://host:port/bucket/key`.
    pub fn parse(s: &str) -> Option<S3Locator> {
        let rest = s
            .strip_prefix("http://")
            .map(|r| ("http://", r))
            .or_else(|| s.strip_prefix("https://").map(|r| ("https://", r)))?;
        let (scheme, rest) = rest;
        let (host, path) = rest.split_once('/')?;
        let (bucket, key) = path.split_once('/')?;
        if host.is_empty() || bucket.is_empty() || key.is_empty() {
            return None;
        }
        Some(S3Locator {
            endpoint: format!("{scheme}{host}"),
            bucket: bucket.to_string(),
            key: key.to_string(),
        })
    }

    /// Host:port portion of the endpoint.
    pub fn host(&self) -> &str {
        self.endpoint
            .strip_prefix("http://")
            .or_else(|| self.endpoint.strip_prefix("https://"))
            .unwrap_or(&self.endpoint)
    }
}

impl std::fmt::Display for S3Locator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.endpoint, self.bucket, self.key)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartPlanError {
    #[error("part numbers must start at 1 and increase strictly: part {0}")]
    BadNumbering(u32),
    #[error("parts must be contiguous: gap or overlap at part {0}")]
    NotContiguous(u32),
    #[error("non-final part {number} is {length} bytes, below the {min} byte floor")]
    TooSmall { number: u32, length: u64, min: u64 },
    #[error("parts cover {covered} bytes but the object is {object} bytes")]
    WrongCoverage { covered: u64, object: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartSpec {
    pub part_number: u32,
    pub offset: u64,
    pub length: u64,
}

/// Multipart layout: ordered disjoint parts covering `[0, size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartPlan {
    pub parts: Vec<PartSpec>,
}

impl PartPlan {
    /// Slices `[0, size)` into target-sized parts. The last part takes the
    /// remainder and is the only one allowed below the minimum.
    pub fn for_object(size: u64) -> PartPlan {
        assert!(size > 0, "cannot plan an empty object");
        let mut parts = Vec::new();
        let mut offset = 0;
        let mut number = 1;
        while offset < size {
            let length = TARGET_PART_SIZE.min(size - offset);
            parts.push(PartSpec { part_number: number, offset, length });
            offset += length;
            number += 1;
        }
        PartPlan { parts }
    }

    /// Checks numbering, contiguity, coverage and the minimum-size rule.
    pub fn validate(&self, object_size: u64) -> Result<(), PartPlanError> {
        let mut expected_number = 1;
        let mut expected_offset = 0;
        for (i, p) in self.parts.iter().enumerate() {
            if p.part_number != expected_number {
                return Err(PartPlanError::BadNumbering(p.part_number));
            }
            if p.offset != expected_offset {
                return Err(PartPlanError::NotContiguous(p.part_number));
            }
            let is_last = i + 1 == self.parts.len();
            if !is_last && p.length < MIN_PART_SIZE {
                return Err(PartPlanError::TooSmall {
                    number: p.part_number,
                    length: p.length,
                    min: MIN_PART_SIZE,
                });
            }
            expected_number += 1;
            expected_offset += p.length;
        }
        if expected_offset != object_size {
            return Err(PartPlanError::WrongCoverage { covered: expected_offset, object: object_size });
        }
        Ok(())
    }
}

/// Non-overlapping byte ranges of the final object, with later insertions
/// overriding earlier ones. This is how epoch ordering is resolved before
/// an object upload.
#[derive(Debug, Default, Clone)]
pub struct CoverageMap {
    ranges: BTreeMap<u64, Vec<u8>>,
}

impl CoverageMap {
    pub fn new() -> CoverageMap {
        CoverageMap::default()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// One past the highest covered byte.
    pub fn end(&self) -> u64 {
        self.ranges
            .iter()
            .next_back()
            .map(|(off, data)| off + data.len() as u64)
            .unwrap_or(0)
    }

    pub fn covered_bytes(&self) -> u64 {
        self.ranges.values().map(|v| v.len() as u64).sum()
    }

    /// Inserts a range, trimming or splitting anything it overlaps.
    pub fn insert(&mut self, offset: u64, data: &[u8]) {
        if data.is_empty() {
            return;
        }
        let end = offset + data.len() as u64;
        // Collect keys of ranges that intersect [offset, end).
        let mut touched: Vec<u64> = Vec::new();
        for (&start, existing) in self.ranges.range(..end) {
            if start + existing.len() as u64 > offset {
                touched.push(start);
            }
        }
        for start in touched {
            let existing = self.ranges.remove(&start).unwrap();
            let existing_end = start + existing.len() as u64;
            if start < offset {
                let keep = (offset - start) as usize;
                self.ranges.insert(start, existing[..keep].to_vec());
            }
            if existing_end > end {
                let cut = (end - start) as usize;
                self.ranges.insert(end, existing[cut..].to_vec());
            }
        }
        self.ranges.insert(offset, data.to_vec());
    }

    /// Merged contiguous runs in offset order.
    pub fn runs(&self) -> Vec<(u64, Vec<u8>)> {
        let mut out: Vec<(u64, Vec<u8>)> = Vec::new();
        for (&off, data) in &self.ranges {
            match out.last_mut() {
                Some((run_off, run_data))
                    if *run_off + run_data.len() as u64 == off =>
                {
                    run_data.extend_from_slice(data);
                }
                _ => out.push((off, data.clone())),
            }
        }
        out
    }

    /// True when the coverage is exactly one run starting at byte zero.
    pub fn is_contiguous_from_zero(&self) -> bool {
        let runs = self.runs();
        runs.len() == 1 && runs[0].0 == 0
    }

    /// Renders the full `[0, end)` image with holes zero-filled.
    pub fn to_zero_filled(&self) -> Vec<u8> {
        let mut image = vec![0u8; self.end() as usize];
        for (&off, data) in &self.ranges {
            image[off as usize..off as usize + data.len()].copy_from_slice(data);
        }
        image
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locator_parse() {
        let loc = S3Locator::parse("http://127.0.0.1:9000/bucket/a/b.vtk").unwrap();
        assert_eq!(loc.host(), "127.0.0.1:9000");
        assert_eq!(loc.bucket, "bucket");
        assert_eq!(loc.key, "a/b.vtk");
        assert!(S3Locator::parse("127.0.0.1/bucket/k").is_none());
        assert!(S3Locator::parse("http://host/bucketonly").is_none());
    }

    #[test]
    fn part_plan_for_24_mib() {
        let plan = PartPlan::for_object(24 * 1024 * 1024);
        assert_eq!(plan.parts.len(), 3);
        assert!(plan.parts.iter().all(|p| p.length == 8 * 1024 * 1024));
        plan.validate(24 * 1024 * 1024).unwrap();
    }

    #[test]
    fn part_plan_remainder_last_part_may_be_small() {
        let size = 17 * 1024 * 1024;
        let plan = PartPlan::for_object(size);
        assert_eq!(plan.parts.len(), 3);
        assert_eq!(plan.parts[2].length, 1024 * 1024);
        plan.validate(size).unwrap();
    }

    #[test]
    fn small_non_final_part_rejected() {
        let plan = PartPlan {
            parts: vec![
                PartSpec { part_number: 1, offset: 0, length: 4 * 1024 * 1024 },
                PartSpec { part_number: 2, offset: 4 * 1024 * 1024, length: 8 * 1024 * 1024 },
            ],
        };
        assert_eq!(
            plan.validate(12 * 1024 * 1024),
            Err(PartPlanError::TooSmall {
                number: 1,
                length: 4 * 1024 * 1024,
                min: MIN_PART_SIZE
            })
        );
    }

    #[test]
    fn coverage_rejects_nothing_and_overrides() {
        let mut cov = CoverageMap::new();
        cov.insert(0, &[1; 100]);
        cov.insert(200, &[2; 100]);
        cov.insert(50, &[3; 200]); // bridges and overrides both neighbours
        let runs = cov.runs();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].0, 0);
        assert_eq!(runs[0].1.len(), 300);
        assert_eq!(runs[0].1[49], 1);
        assert_eq!(runs[0].1[50], 3);
        assert_eq!(runs[0].1[249], 3);
        assert_eq!(runs[0].1[250], 2);
        assert_eq!(cov.covered_bytes(), 300);
        assert!(cov.is_contiguous_from_zero());
    }

    #[test]
    fn coverage_interior_override_splits() {
        let mut cov = CoverageMap::new();
        cov.insert(0, &[7; 300]);
        cov.insert(100, &[9; 50]);
        let image = cov.to_zero_filled();
        assert_eq!(image.len(), 300);
        assert!(image[..100].iter().all(|&b| b == 7));
        assert!(image[100..150].iter().all(|&b| b == 9));
        assert!(image[150..].iter().all(|&b| b == 7));
    }

    #[test]
    fn zero_fill_renders_holes() {
        let mut cov = CoverageMap::new();
        cov.insert(128, &[5; 16]);
        let image = cov.to_zero_filled();
        assert_eq!(image.len(), 144);
        assert!(image[..128].iter().all(|&b| b == 0));
        assert!(!cov.is_contiguous_from_zero());
    }
}

//! Sync-generation identifiers.

use serde::{Deserialize, Serialize};

/// A sync generation. Segment and chunk-list names carry the epoch so that
/// data written after a sync can never clobber in-flight writeback of the
/// previous generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpochId {
    /// Run-unique value shared by every rank of one job.
    pub job_nonce: u64,
    /// Increments by exactly one at each collective sync point; identical
    /// across all ranks between collectives.
    pub counter: u64,
}

impl EpochId {
    pub fn initial(job_nonce: u64) -> Self {
        EpochId { job_nonce, counter: 0 }
    }

    pub fn with_counter(job_nonce: u64, counter: u64) -> Self {
        EpochId { job_nonce, counter }
    }

    /// The epoch that follows this one at the next sync point.
    pub fn next(self) -> Self {
        EpochId { job_nonce: self.job_nonce, counter: self.counter + 1 }
    }

    /// Fixed-width tag embedded in cache file names. The counter comes first
    /// so that names of one job sort lexicographically in epoch order.
    pub fn tag(&self) -> String {
        format!("e{:016x}-{:016x}", self.counter, self.job_nonce)
    }

    /// Parses a tag produced by [`EpochId::tag`].
    pub fn parse_tag(tag: &str) -> Option<Self> {
        let rest = tag.strip_prefix('e')?;
        let (counter, nonce) = rest.split_once('-')?;
        if counter.len() != 16 || nonce.len() != 16 {
            return None;
        }
        Some(EpochId {
            job_nonce: u64::from_str_radix(nonce, 16).ok()?,
            counter: u64::from_str_radix(counter, 16).ok()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_round_trip() {
        let e = EpochId::with_counter(0xdead_beef_0102_0304, 7);
        assert_eq!(EpochId::parse_tag(&e.tag()), Some(e));
    }

    #[test]
    fn tags_sort_by_counter() {
        let nonce = 0xffff_ffff_ffff_ffff;
        let a = EpochId::with_counter(nonce, 9).tag();
        let b = EpochId::with_counter(nonce, 10).tag();
        assert!(a < b);
    }

    #[test]
    fn malformed_tags_rejected() {
        assert_eq!(EpochId::parse_tag("x0-0"), None);
        assert_eq!(EpochId::parse_tag("e123-456"), None);
        assert_eq!(EpochId::parse_tag("e0000000000000000+0000000000000000"), None);
    }
}

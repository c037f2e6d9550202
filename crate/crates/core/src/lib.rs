//! Write-back staging toolkit for parallel shared-file output.
//!
//! Ranks of a parallel job write a logical shared file through collective
//! verbs; the cache engine lands those writes as durable segment files on
//! node-local storage and publishes per-epoch chunk lists. A per-node syncer
//! daemon drains the lists in the background and reconstructs the linear
//! file on remote storage (a POSIX path or an S3-compatible object store).
//! A recovery tool rebuilds the file from surviving caches after a crash,
//! and a workload harness reproduces the interesting write patterns at desk
//! scale with an independent byte-image oracle.

pub mod backend;
pub mod chunklist;
pub mod collective;
pub mod engine;
pub mod epoch;
pub mod facade;
pub mod harness;
pub mod naming;
pub mod recovery;
pub mod s3;
pub mod syncer;
pub mod throttle;

pub use backend::BackendLocator;
pub use chunklist::ChunkRecord;
pub use engine::Session;
pub use epoch::EpochId;

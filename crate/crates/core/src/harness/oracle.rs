//! Independent replay oracle.
//!
//! Replays a verb stream straight into an in-memory byte image, bypassing
//! the staging path entirely. Every comparison in the test suite bottoms
//! out here: remote bytes after a staged run, a baseline run, or a recovery
//! must match what this replay produces.

use super::trace::{fill_payload, TraceProgram, Verb};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoleSemantics {
    /// POSIX file: unwritten ranges read as zero up to the file length; the
    /// file may end at the last written byte.
    SparseFile,
    /// Object store: the object is exactly the written span with holes
    /// zero-filled.
    ZeroFilled,
}

#[derive(Debug, Clone, Default)]
pub struct OracleImage {
    bytes: Vec<u8>,
    written: Vec<bool>,
}

impl OracleImage {
    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) {
        let end = (offset as usize) + data.len();
        if end > self.bytes.len() {
            self.bytes.resize(end, 0);
            self.written.resize(end, false);
        }
        self.bytes[offset as usize..end].copy_from_slice(data);
        self.written[offset as usize..end].fill(true);
    }

    pub fn written_bytes(&self) -> u64 {
        self.written.iter().filter(|&&w| w).count() as u64
    }

    /// Maximal written runs as (offset, length).
    pub fn written_runs(&self) -> Vec<(u64, u64)> {
        let mut runs = Vec::new();
        let mut i = 0usize;
        while i < self.written.len() {
            if self.written[i] {
                let start = i;
                while i < self.written.len() && self.written[i] {
                    i += 1;
                }
                runs.push((start as u64, (i - start) as u64));
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// The image as an object body: written span with zero-filled holes.
    pub fn zero_filled(&self) -> Vec<u8> {
        let mut out = self.bytes.clone();
        for (i, &w) in self.written.iter().enumerate() {
            if !w {
                out[i] = 0;
            }
        }
        out
    }
}

/// Replays the program, applying only writes whose epoch counter is at most
/// `up_to_counter` (when given) — the image at that consistency point.
/// Epoch counters advance at every sync and close, mirroring the facade.
pub fn replay(
    program: &TraceProgram,
    seed: u64,
    up_to_counter: Option<u64>,
) -> OracleImage {
    let mut image = OracleImage::default();
    let world = program.world_size;
    let mut counter = 0u64;
    let mut view: Option<(u64, u64, u64)> = None; // displacement, block, stride
    let mut blocks_written = 0u64;
    let mut ordinal = 0u64;
    for verb in &program.verbs {
        match verb {
            Verb::Open => {
                view = None;
            }
            Verb::SetView { displacement, block_length, stride } => {
                view = Some((*displacement, *block_length, *stride));
                blocks_written = 0;
            }
            Verb::WriteAll { blocks } => {
                let (disp, block, stride) = view.expect("write_all without a view");
                if up_to_counter.is_none_or(|limit| counter <= limit) {
                    let mut buf = vec![0u8; block as usize];
                    for rank in 0..world {
                        for j in 0..*blocks {
                            let k = blocks_written + j;
                            let offset = disp + k * stride + rank as u64 * block;
                            fill_payload(seed, ordinal, offset, &mut buf);
                            image.write(offset, &buf);
                        }
                    }
                }
                blocks_written += blocks;
                ordinal += 1;
            }
            Verb::Sync => counter += 1,
            Verb::Close => counter += 1,
        }
    }
    image
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub matches: bool,
    pub first_divergence: Option<u64>,
    pub detail: String,
}

impl CompareOutcome {
    fn pass() -> CompareOutcome {
        CompareOutcome { matches: true, first_divergence: None, detail: "match".into() }
    }

    fn fail(offset: u64, detail: String) -> CompareOutcome {
        CompareOutcome { matches: false, first_divergence: Some(offset), detail }
    }
}

/// Byte-exact comparison at every written offset; holes judged per the
/// backend's semantics.
pub fn compare_bytes(oracle: &OracleImage, actual: &[u8], holes: HoleSemantics) -> CompareOutcome {
    if holes == HoleSemantics::ZeroFilled && actual.len() as u64 != oracle.len() {
        return CompareOutcome::fail(
            oracle.len().min(actual.len() as u64),
            format!("object is {} bytes, oracle says {}", actual.len(), oracle.len()),
        );
    }
    if holes == HoleSemantics::SparseFile && (actual.len() as u64) > oracle.len() {
        return CompareOutcome::fail(
            oracle.len(),
            format!("file is {} bytes, longer than the oracle's {}", actual.len(), oracle.len()),
        );
    }
    for (offset, length) in oracle.written_runs() {
        let end = offset + length;
        if end > actual.len() as u64 {
            return CompareOutcome::fail(
                actual.len() as u64,
                format!("written range [{offset}, {end}) extends past the {} available bytes", actual.len()),
            );
        }
        let expected = &oracle.bytes()[offset as usize..end as usize];
        let got = &actual[offset as usize..end as usize];
        if expected != got {
            let at = expected
                .iter()
                .zip(got)
                .position(|(a, b)| a != b)
                .map(|i| offset + i as u64)
                .unwrap_or(offset);
            return CompareOutcome::fail(at, format!("byte mismatch at offset {at}"));
        }
    }
    // Holes must read back as zero wherever the backend materializes them.
    let hole_end = (actual.len() as u64).min(oracle.len());
    let mut pos = 0u64;
    for (offset, length) in oracle.written_runs() {
        if let Some(bad) = first_nonzero(&actual[pos as usize..offset.min(hole_end) as usize]) {
            let at = pos + bad;
            return CompareOutcome::fail(at, format!("hole at offset {at} is not zero"));
        }
        pos = offset + length;
    }
    if pos < hole_end {
        if let Some(bad) = first_nonzero(&actual[pos as usize..hole_end as usize]) {
            let at = pos + bad;
            return CompareOutcome::fail(at, format!("hole at offset {at} is not zero"));
        }
    }
    CompareOutcome::pass()
}

fn first_nonzero(slice: &[u8]) -> Option<u64> {
    slice.iter().position(|&b| b != 0).map(|i| i as u64)
}

/// Compares against a POSIX backend file.
pub fn compare_posix_file(oracle: &OracleImage, path: &std::path::Path) -> std::io::Result<CompareOutcome> {
    let actual = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && oracle.written_bytes() == 0 => {
            return Ok(CompareOutcome::pass())
        }
        Err(e) => return Err(e),
    };
    Ok(compare_bytes(oracle, &actual, HoleSemantics::SparseFile))
}

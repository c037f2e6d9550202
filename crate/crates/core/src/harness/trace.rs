//! Deterministic workload construction.
//!
//! A trace is an SPMD verb stream: every rank executes the same verbs, and
//! a rank's bytes are derived from (seed, write ordinal, absolute target
//! offset), so any byte the job ever writes can be recomputed on demand
//! without storing the oracle image densely.

use serde::{Deserialize, Serialize};

use super::{JobDescriptor, ViewKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verb {
    Open,
    SetView { displacement: u64, block_length: u64, stride: u64 },
    /// One collective write of `blocks` view blocks per rank.
    WriteAll { blocks: u64 },
    Sync,
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceProgram {
    pub world_size: usize,
    pub verbs: Vec<Verb>,
}

impl TraceProgram {
    pub fn new(world_size: usize, verbs: Vec<Verb>) -> TraceProgram {
        TraceProgram { world_size, verbs }
    }

    /// Number of `WriteAll` verbs; ordinals index them in program order.
    pub fn write_count(&self) -> u64 {
        self.verbs.iter().filter(|v| matches!(v, Verb::WriteAll { .. })).count() as u64
    }
}

/// Expands a descriptor into its verb stream: per output phase,
/// open → (set_view → write_all… → sync?)×rounds → close. Rounds beyond the
/// first rewrite the same range in a fresh epoch.
pub fn generate_trace(desc: &JobDescriptor) -> TraceProgram {
    let stride = desc.stride();
    let span = desc.blocks_per_output * stride;
    let blocks_per_call = desc.blocks_per_call.unwrap_or(desc.blocks_per_output).max(1);
    let mut verbs = Vec::new();
    for phase in 0..desc.total_outputs {
        verbs.push(Verb::Open);
        for round in 0..desc.epochs_per_output.max(1) {
            verbs.push(Verb::SetView {
                displacement: desc.displacement + phase * span,
                block_length: desc.block_length,
                stride,
            });
            let mut left = desc.blocks_per_output;
            while left > 0 {
                let blocks = left.min(blocks_per_call);
                verbs.push(Verb::WriteAll { blocks });
                left -= blocks;
            }
            if round + 1 < desc.epochs_per_output {
                verbs.push(Verb::Sync);
            }
        }
        verbs.push(Verb::Close);
    }
    TraceProgram::new(desc.world_size, verbs)
}

impl JobDescriptor {
    pub fn stride(&self) -> u64 {
        match self.view {
            ViewKind::Contiguous => self.block_length * self.world_size as u64,
            ViewKind::Strided { stride } => stride,
        }
    }

    /// Total bytes one full run commits per phase (all ranks).
    pub fn bytes_per_output(&self) -> u64 {
        self.blocks_per_output * self.block_length * self.world_size as u64
    }
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn payload_word(seed: u64, write_ordinal: u64, word_index: u64) -> u64 {
    mix64(seed ^ mix64(write_ordinal ^ mix64(word_index)))
}

/// The byte the `write_ordinal`-th collective write puts at `offset`.
pub fn payload_byte(seed: u64, write_ordinal: u64, offset: u64) -> u8 {
    let word = payload_word(seed, write_ordinal, offset / 8);
    (word >> ((offset % 8) * 8)) as u8
}

/// Fills `buf` with the payload of one write starting at `start_offset`.
pub fn fill_payload(seed: u64, write_ordinal: u64, start_offset: u64, buf: &mut [u8]) {
    let mut i = 0usize;
    while i < buf.len() {
        let offset = start_offset + i as u64;
        let word = payload_word(seed, write_ordinal, offset / 8);
        let lane = (offset % 8) as usize;
        let take = (8 - lane).min(buf.len() - i);
        buf[i..i + take].copy_from_slice(&word.to_le_bytes()[lane..lane + take]);
        i += take;
    }
}

//! The tree-traversal benchmark: instance generation, the six-stage hash and
//! the scalar reference interpreter.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::isa::{Word, VLEN};
use crate::machine::DATA_REGION_END;

pub const FOREST_HEIGHT: u32 = 10;
pub const BATCH_SIZE: usize = 256;
pub const ROUNDS: usize = 16;
/// First node word; words `[0, FOREST_BASE)` are the header.
pub const FOREST_BASE: usize = 7;
pub const HEADER_WORDS: usize = FOREST_BASE;

/// Seed of the single instance used for official scoring.
pub const OFFICIAL_SEED: u64 = 1;

/// Additive / xor constants of the hash, in stage order.
pub const HASH_C1: Word = 0x7ED5_5D17;
pub const HASH_C2: Word = 0xC761_C23D;
pub const HASH_C3: Word = 0x1656_67B1;
pub const HASH_C4: Word = 0xD3A2_646D;
pub const HASH_C5: Word = 0xFD70_46C5;
pub const HASH_C6: Word = 0xB55A_4F09;

pub const HASH_MUL: [Word; 3] = [4097, 33, 9];
pub const HASH_SHIFT: [Word; 3] = [19, 9, 16];

/// Six-stage 32-bit hash:
///
/// ```text
/// v = v*4097 + C1; t = v >> 19; v ^= C2; v ^= t
/// v = v*33   + C3; t = v << 9;  v += C4; v ^= t
/// v = v*9    + C5; t = v >> 16; v ^= C6; v ^= t
/// ```
#[inline]
pub fn hash_reference(v: Word) -> Word {
    let mut v = v.wrapping_mul(4097).wrapping_add(HASH_C1);
    let t = v >> 19;
    v ^= HASH_C2;
    v ^= t;
    v = v.wrapping_mul(33).wrapping_add(HASH_C3);
    let t = v << 9;
    v = v.wrapping_add(HASH_C4);
    v ^= t;
    v = v.wrapping_mul(9).wrapping_add(HASH_C5);
    let t = v >> 16;
    v ^= HASH_C6;
    v ^ t
}

/// A perfect binary forest of node values plus a batch of (index, value)
/// walkers. Generated from ChaCha8 seeded with `seed`: node values first,
/// then indices (reduced mod `n_nodes`), then input values, one `next_u32`
/// per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkInstance {
    pub height: u32,
    pub batch: usize,
    pub rounds: usize,
    pub seed: u64,
    pub nodes: Vec<Word>,
    pub indices: Vec<Word>,
    pub values: Vec<Word>,
}

impl BenchmarkInstance {
    /// The standard shape (height 10, batch 256, 16 rounds).
    pub fn generate(seed: u64) -> Self {
        Self::with_shape(FOREST_HEIGHT, BATCH_SIZE, ROUNDS, seed)
    }

    pub fn official() -> Self {
        Self::generate(OFFICIAL_SEED)
    }

    pub fn with_shape(height: u32, batch: usize, rounds: usize, seed: u64) -> Self {
        assert!(height < 20, "forest height {height} too large");
        assert_eq!(batch % VLEN, 0, "batch must be a multiple of VLEN");
        let n_nodes = (1usize << (height + 1)) - 1;
        assert!(
            FOREST_BASE + n_nodes + 2 * batch <= DATA_REGION_END as usize,
            "instance does not fit the data region"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = (0..n_nodes).map(|_| rng.next_u32()).collect();
        let indices = (0..batch)
            .map(|_| rng.next_u32() % n_nodes as Word)
            .collect();
        let values = (0..batch).map(|_| rng.next_u32()).collect();
        BenchmarkInstance {
            height,
            batch,
            rounds,
            seed,
            nodes,
            indices,
            values,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn indices_ptr(&self) -> usize {
        FOREST_BASE + self.n_nodes()
    }

    pub fn values_ptr(&self) -> usize {
        self.indices_ptr() + self.batch
    }

    pub fn tiles(&self) -> usize {
        self.batch / VLEN
    }

    /// Data-region image: header, nodes, input indices, input values.
    pub fn memory_image(&self) -> Vec<Word> {
        let mut mem = vec![0; self.values_ptr() + self.batch];
        let header = [
            self.height,
            self.n_nodes() as Word,
            self.indices_ptr() as Word,
            self.values_ptr() as Word,
            self.batch as Word,
            self.rounds as Word,
            0,
        ];
        mem[..HEADER_WORDS].copy_from_slice(&header);
        mem[FOREST_BASE..FOREST_BASE + self.n_nodes()].copy_from_slice(&self.nodes);
        let ip = self.indices_ptr();
        mem[ip..ip + self.batch].copy_from_slice(&self.indices);
        let vp = self.values_ptr();
        mem[vp..vp + self.batch].copy_from_slice(&self.values);
        mem
    }
}

/// Index of the child visited after hashing to `val`: `+1` when even, `+2`
/// when odd, wrapping to the root past the last node.
#[inline]
pub fn next_index(idx: Word, val: Word, n_nodes: usize) -> Word {
    let next = 2 * idx + 1 + (val & 1);
    if next as usize >= n_nodes {
        0
    } else {
        next
    }
}

/// Final walker values after `rounds` steps, as they must appear in the
/// input-values region.
pub fn reference_output(inst: &BenchmarkInstance) -> Vec<Word> {
    inst.indices
        .iter()
        .zip(&inst.values)
        .map(|(&idx0, &val0)| {
            let (mut idx, mut val) = (idx0, val0);
            for _ in 0..inst.rounds {
                val = hash_reference(val ^ inst.nodes[idx as usize]);
                idx = next_index(idx, val, inst.n_nodes());
            }
            val
        })
        .collect()
}

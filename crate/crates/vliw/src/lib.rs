//! Cycle-accurate simulator for a small VLIW SIMD machine, with the
//! tree-traversal benchmark it is scored on.
//!
//! The machine has one flat word memory. Engines and their per-cycle slot
//! limits are `alu 12 / valu 6 / load 2 / store 2 / flow 1`; vectors are
//! eight words wide. Programs are straight-line sequences of bundles, one
//! bundle per cycle.

pub mod asm;
pub mod bench;
pub mod isa;
pub mod kernel;
pub mod machine;
pub mod schedule;
pub mod testgen;

pub use asm::{parse_program, ConstInit, ParseError, Program};
pub use bench::{hash_reference, reference_output, BenchmarkInstance};
pub use isa::{check_bundle, Addr, BinOp, Bundle, Engine, Instruction, SlotViolation, Word, VLEN};
pub use kernel::{
    build_baseline_kernel, combined_score, evaluate_kernel, evaluate_kernel_on, KernelEvaluation,
    SCORE_NUMERATOR,
};
pub use machine::{execute, execute_sequential, MachineState, SimError, MEM_WORDS};
pub use schedule::schedule;

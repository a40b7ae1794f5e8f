//! Baseline kernel generation and kernel scoring.

use crate::asm::{parse_program, ConstInit, ParseError, Program};
use crate::bench::{
    reference_output, BenchmarkInstance, FOREST_BASE, HASH_C1, HASH_C2, HASH_C3, HASH_C4,
    HASH_C5, HASH_C6, HASH_MUL, HASH_SHIFT,
};
use crate::isa::{Addr, BinOp, Instruction, Word, VLEN};
use crate::machine::{execute, MachineState, SCRATCH_BASE};
use crate::schedule::schedule;

/// Numerator of the kernel score: `combined_score = SCORE_NUMERATOR / cycles`.
pub const SCORE_NUMERATOR: f64 = 147734.0;

pub fn combined_score(cycles: u64) -> f64 {
    SCORE_NUMERATOR / cycles as f64
}

struct ScratchAlloc {
    next: Addr,
    consts: Vec<ConstInit>,
}

impl ScratchAlloc {
    fn vec(&mut self) -> Addr {
        let a = self.next;
        self.next += VLEN as Addr;
        a
    }

    fn splat(&mut self, value: Word) -> Addr {
        let a = self.vec();
        self.consts.push(ConstInit {
            addr: a,
            values: vec![value; VLEN],
        });
        a
    }
}

/// Emits the naive fully unrolled kernel as a sequential instruction stream
/// together with its constant section.
pub fn baseline_stream(inst: &BenchmarkInstance) -> (Vec<ConstInit>, Vec<Instruction>) {
    let mut sc = ScratchAlloc {
        next: SCRATCH_BASE,
        consts: Vec::new(),
    };
    let zero = sc.splat(0);
    let one = sc.splat(1);
    let two = sc.splat(2);
    let forest_base = sc.splat(FOREST_BASE as Word);
    let wrap_shift = sc.splat(inst.height + 1);
    let muls = HASH_MUL.map(|m| sc.splat(m));
    let shifts = HASH_SHIFT.map(|s| sc.splat(s));
    let adds = [HASH_C1, HASH_C3, HASH_C5].map(|c| sc.splat(c));
    let mids = [HASH_C2, HASH_C4, HASH_C6].map(|c| sc.splat(c));

    struct Tile {
        idx: Addr,
        val: Addr,
        ptr: Addr,
        node: Addr,
        tmp: Addr,
    }
    let tiles: Vec<Tile> = (0..inst.tiles())
        .map(|_| Tile {
            idx: sc.vec(),
            val: sc.vec(),
            ptr: sc.vec(),
            node: sc.vec(),
            tmp: sc.vec(),
        })
        .collect();

    let valu = |op, dest, a, b| Instruction::Valu { op, dest, a, b };
    let madd = |dest, a, b, c| Instruction::MultiplyAdd { dest, a, b, c };
    let mut s = Vec::new();

    for (t, tile) in tiles.iter().enumerate() {
        let off = (t * VLEN) as Addr;
        s.push(valu(BinOp::Add, tile.idx, inst.indices_ptr() as Addr + off, zero));
        s.push(valu(BinOp::Add, tile.val, inst.values_ptr() as Addr + off, zero));
    }
    for _ in 0..inst.rounds {
        for tile in &tiles {
            s.push(valu(BinOp::Add, tile.ptr, tile.idx, forest_base));
            for lane in 0..VLEN as u8 {
                s.push(Instruction::LoadOffset {
                    dest: tile.node,
                    base: tile.ptr,
                    lane,
                });
            }
            s.push(valu(BinOp::Xor, tile.val, tile.val, tile.node));
            // hash
            let shift_ops = [BinOp::Shr, BinOp::Shl, BinOp::Shr];
            let mid_ops = [BinOp::Xor, BinOp::Add, BinOp::Xor];
            for stage in 0..3 {
                s.push(madd(tile.val, tile.val, muls[stage], adds[stage]));
                s.push(valu(shift_ops[stage], tile.tmp, tile.val, shifts[stage]));
                s.push(valu(mid_ops[stage], tile.val, tile.val, mids[stage]));
                s.push(valu(BinOp::Xor, tile.val, tile.val, tile.tmp));
            }
            // idx = 2*idx + 1 + parity
            s.push(valu(BinOp::And, tile.tmp, tile.val, one));
            s.push(valu(BinOp::Add, tile.tmp, tile.tmp, one));
            s.push(madd(tile.idx, tile.idx, two, tile.tmp));
            // idx &= ((idx + 1) >> (height + 1)) - 1, zeroing it past the leaves
            s.push(valu(BinOp::Add, tile.tmp, tile.idx, one));
            s.push(valu(BinOp::Shr, tile.tmp, tile.tmp, wrap_shift));
            s.push(valu(BinOp::Sub, tile.tmp, tile.tmp, one));
            s.push(valu(BinOp::And, tile.idx, tile.idx, tile.tmp));
        }
    }
    for (t, tile) in tiles.iter().enumerate() {
        let off = (t * VLEN) as Addr;
        s.push(valu(BinOp::Add, inst.values_ptr() as Addr + off, tile.val, zero));
    }
    (sc.consts, s)
}

/// Scheduled baseline kernel as a program.
pub fn baseline_program(inst: &BenchmarkInstance) -> Program {
    let (consts, stream) = baseline_stream(inst);
    Program {
        consts,
        bundles: schedule(&stream),
    }
}

/// Baseline kernel in canonical assembly text.
pub fn build_baseline_kernel(inst: &BenchmarkInstance) -> String {
    baseline_program(inst).to_string()
}

/// Outcome of running a kernel against an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEvaluation {
    pub valid: bool,
    pub cycles: u64,
    pub combined_score: f64,
    pub error: Option<String>,
}

/// Runs a parsed program on `inst` and checks the values region against the
/// reference interpreter.
pub fn run_on_instance(program: &Program, inst: &BenchmarkInstance) -> KernelEvaluation {
    let mut state = MachineState::with_memory(inst.memory_image());
    program.materialize_consts(&mut state);
    let result = execute(&program.bundles, &mut state);
    let cycles = state.cycle();
    let invalid = |error: String| KernelEvaluation {
        valid: false,
        cycles,
        combined_score: 0.0,
        error: Some(error),
    };
    if let Err(e) = result {
        return invalid(e.to_string());
    }
    let vp = inst.values_ptr();
    let expected = reference_output(inst);
    let actual = &state.memory()[vp..vp + inst.batch];
    if actual != expected.as_slice() {
        let first = actual
            .iter()
            .zip(&expected)
            .position(|(a, e)| a != e)
            .unwrap_or(0);
        return invalid(format!(
            "output mismatch at element {first}: got {}, expected {}",
            actual[first], expected[first]
        ));
    }
    if cycles == 0 {
        return invalid("program executed zero cycles".into());
    }
    KernelEvaluation {
        valid: true,
        cycles,
        combined_score: combined_score(cycles),
        error: None,
    }
}

/// Scores kernel source on the official instance. Parse errors are returned
/// as `Err`; simulation failures and wrong output are invalid evaluations.
pub fn evaluate_kernel(source: &str) -> Result<KernelEvaluation, ParseError> {
    evaluate_kernel_on(source, &BenchmarkInstance::official())
}

pub fn evaluate_kernel_on(
    source: &str,
    inst: &BenchmarkInstance,
) -> Result<KernelEvaluation, ParseError> {
    let program = parse_program(source)?;
    Ok(run_on_instance(&program, inst))
}

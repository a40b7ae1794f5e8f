//! Random programs for fuzzing the scheduler and simulator.
//!
//! Streams draw operands from a small window of the data region and a small
//! window of scratch so that dependencies are dense. Pointer cells live in a
//! separate scratch block that no generated instruction writes, and every
//! pointer targets the data window, so generated streams never fault.

use rand::Rng;

use crate::isa::{Addr, BinOp, Bundle, Instruction, Word, VLEN};
use crate::machine::{MachineState, SCRATCH_BASE};

const WINDOW: Addr = 48;
const POINTER_BASE: Addr = SCRATCH_BASE + 200;
const POINTER_CELLS: Addr = 2 * VLEN as Addr;

fn scalar(rng: &mut impl Rng) -> Addr {
    let off = rng.random_range(0..WINDOW);
    if rng.random_bool(0.5) {
        off
    } else {
        SCRATCH_BASE + off
    }
}

fn vector(rng: &mut impl Rng) -> Addr {
    let off = rng.random_range(0..=WINDOW - VLEN as Addr);
    if rng.random_bool(0.5) {
        off
    } else {
        SCRATCH_BASE + off
    }
}

fn pointer_cell(rng: &mut impl Rng) -> Addr {
    POINTER_BASE + rng.random_range(0..POINTER_CELLS)
}

fn binop(rng: &mut impl Rng) -> BinOp {
    BinOp::ALL[rng.random_range(0..BinOp::ALL.len())]
}

/// One random instruction. `halt_weight` is out of 1000.
pub fn random_instruction(rng: &mut impl Rng, halt_weight: u32) -> Instruction {
    if rng.random_range(0..1000) < halt_weight {
        return Instruction::Halt;
    }
    match rng.random_range(0..7) {
        0 => Instruction::Alu {
            op: binop(rng),
            dest: scalar(rng),
            a: if rng.random_bool(0.2) {
                pointer_cell(rng)
            } else {
                scalar(rng)
            },
            b: scalar(rng),
        },
        1 => Instruction::Valu {
            op: binop(rng),
            dest: vector(rng),
            a: vector(rng),
            b: vector(rng),
        },
        2 => Instruction::MultiplyAdd {
            dest: vector(rng),
            a: vector(rng),
            b: vector(rng),
            c: vector(rng),
        },
        3 => Instruction::Load {
            dest: scalar(rng),
            addr: pointer_cell(rng),
        },
        4 => Instruction::LoadOffset {
            dest: vector(rng),
            base: POINTER_BASE + rng.random_range(0..=VLEN as Addr),
            lane: rng.random_range(0..VLEN as u8),
        },
        5 => Instruction::Store {
            addr: pointer_cell(rng),
            src: scalar(rng),
        },
        _ => Instruction::VSelect {
            dest: vector(rng),
            cond: vector(rng),
            on_true: vector(rng),
            on_false: vector(rng),
        },
    }
}

pub fn random_stream(rng: &mut impl Rng, len: usize) -> Vec<Instruction> {
    (0..len).map(|_| random_instruction(rng, 5)).collect()
}

/// Machine state whose windows hold random words and whose pointer cells
/// point into the data window.
pub fn random_state(rng: &mut impl Rng) -> MachineState {
    let mut st = MachineState::new();
    let mem = st.memory_mut();
    for off in 0..WINDOW {
        mem[off as usize] = rng.random::<Word>() % 16;
        mem[(SCRATCH_BASE + off) as usize] = if rng.random_bool(0.5) {
            rng.random()
        } else {
            rng.random_range(0..4)
        };
    }
    for i in 0..POINTER_CELLS {
        mem[(POINTER_BASE + i) as usize] = rng.random_range(0..WINDOW);
    }
    st
}

/// A bundle with random per-engine counts, each up to `max_per_engine`.
pub fn random_bundle(rng: &mut impl Rng, max_per_engine: usize) -> Bundle {
    let mut ins = Vec::new();
    for engine in 0..5 {
        let n = rng.random_range(0..=max_per_engine);
        for _ in 0..n {
            ins.push(instruction_on(rng, engine));
        }
    }
    Bundle::new(ins)
}

fn instruction_on(rng: &mut impl Rng, engine: usize) -> Instruction {
    loop {
        let i = random_instruction(rng, if engine == 4 { 300 } else { 0 });
        if i.engine().index() == engine {
            return i;
        }
    }
}

/// A kernel that skips the traversal entirely: the expected outputs ride in
/// the constant section and are copied into the values region, then the
/// program idles with empty bundles until it has run `cycles` cycles.
/// Useful for pinning exact cycle counts in scoring tests.
pub fn oracle_kernel(inst: &crate::bench::BenchmarkInstance, cycles: usize) -> crate::Program {
    use crate::asm::ConstInit;
    let expected = crate::bench::reference_output(inst);
    let zero = SCRATCH_BASE;
    let table = SCRATCH_BASE + VLEN as Addr;
    let mut consts = vec![ConstInit {
        addr: zero,
        values: vec![0; VLEN],
    }];
    for (t, chunk) in expected.chunks(VLEN).enumerate() {
        consts.push(ConstInit {
            addr: table + (t * VLEN) as Addr,
            values: chunk.to_vec(),
        });
    }
    let copies: Vec<Instruction> = (0..expected.len().div_ceil(VLEN))
        .map(|t| {
            let off = (t * VLEN) as Addr;
            Instruction::Valu {
                op: BinOp::Add,
                dest: inst.values_ptr() as Addr + off,
                a: table + off,
                b: zero,
            }
        })
        .collect();
    let mut bundles = crate::schedule::schedule(&copies);
    assert!(bundles.len() <= cycles, "cannot fit the copies in {cycles} cycles");
    bundles.resize(cycles, Bundle::default());
    crate::Program { consts, bundles }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::BenchmarkInstance;
    use crate::kernel::evaluate_kernel_on;

    #[test]
    fn oracle_kernel_runs_exact_cycles() {
        let inst = BenchmarkInstance::official();
        let text = oracle_kernel(&inst, 1138).to_string();
        let ev = evaluate_kernel_on(&text, &inst).unwrap();
        assert!(ev.valid, "{:?}", ev.error);
        assert_eq!(ev.cycles, 1138);
    }
}

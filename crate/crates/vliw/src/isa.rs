//! Instruction set, engines and per-cycle slot limits.

use std::fmt;

/// Machine word. All arithmetic wraps modulo 2^32.
pub type Word = u32;

/// Flat word address.
pub type Addr = u32;

/// Vector length in words.
pub const VLEN: usize = 8;

/// Execution engines, each with its own per-cycle slot budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Engine {
    Alu,
    Valu,
    Load,
    Store,
    Flow,
}

impl Engine {
    pub const ALL: [Engine; 5] = [
        Engine::Alu,
        Engine::Valu,
        Engine::Load,
        Engine::Store,
        Engine::Flow,
    ];

    /// Issue slots available per cycle.
    pub const fn slot_limit(self) -> usize {
        match self {
            Engine::Alu => 12,
            Engine::Valu => 6,
            Engine::Load => 2,
            Engine::Store => 2,
            Engine::Flow => 1,
        }
    }

    pub const fn index(self) -> usize {
        match self {
            Engine::Alu => 0,
            Engine::Valu => 1,
            Engine::Load => 2,
            Engine::Store => 3,
            Engine::Flow => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Alu => "alu",
            Engine::Valu => "valu",
            Engine::Load => "load",
            Engine::Store => "store",
            Engine::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Option<Engine> {
        Engine::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary operations shared by the scalar and vector ALUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Xor,
    And,
    Or,
    Shl,
    Shr,
    Mul,
}

impl BinOp {
    pub const ALL: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Xor,
        BinOp::And,
        BinOp::Or,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Mul,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Xor => "^",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Mul => "*",
        }
    }

    pub fn from_symbol(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|op| op.symbol() == s)
    }

    /// Shifts are logical; an amount of 32 or more clears the word.
    #[inline]
    pub fn apply(self, a: Word, b: Word) -> Word {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Xor => a ^ b,
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Shl => a.checked_shl(b).unwrap_or(0),
            BinOp::Shr => a.checked_shr(b).unwrap_or(0),
            BinOp::Mul => a.wrapping_mul(b),
        }
    }
}

/// One machine operation. Operands are word addresses; vector operands name
/// the base of `VLEN` consecutive words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    /// `mem[dest] = mem[a] op mem[b]`
    Alu { op: BinOp, dest: Addr, a: Addr, b: Addr },
    /// Lanewise `Alu`.
    Valu { op: BinOp, dest: Addr, a: Addr, b: Addr },
    /// Lanewise `a * b + c`; occupies a valu slot.
    MultiplyAdd { dest: Addr, a: Addr, b: Addr, c: Addr },
    /// `mem[dest] = mem[mem[addr]]`
    Load { dest: Addr, addr: Addr },
    /// `mem[dest + lane] = mem[mem[base + lane]]`
    LoadOffset { dest: Addr, base: Addr, lane: u8 },
    /// `mem[mem[addr]] = mem[src]`
    Store { addr: Addr, src: Addr },
    /// Lanewise `cond != 0 ? on_true : on_false`.
    VSelect {
        dest: Addr,
        cond: Addr,
        on_true: Addr,
        on_false: Addr,
    },
    /// Stop after the current bundle.
    Halt,
}

/// Memory footprint of an instruction, used by the simulator for conflict
/// checks and by the scheduler for dependency analysis.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Access {
    pub reads: Vec<Addr>,
    pub writes: Vec<Addr>,
    /// Reads a word through a pointer (the pointee is only known at run time).
    pub indirect_read: bool,
    /// Writes a word through a pointer.
    pub indirect_write: bool,
}

fn lanes(base: Addr) -> impl Iterator<Item = Addr> {
    (0..VLEN as u32).map(move |i| base.wrapping_add(i))
}

impl Instruction {
    pub fn engine(&self) -> Engine {
        match self {
            Instruction::Alu { .. } => Engine::Alu,
            Instruction::Valu { .. } | Instruction::MultiplyAdd { .. } => Engine::Valu,
            Instruction::Load { .. } | Instruction::LoadOffset { .. } => Engine::Load,
            Instruction::Store { .. } => Engine::Store,
            Instruction::VSelect { .. } | Instruction::Halt => Engine::Flow,
        }
    }

    /// Opcode mnemonic as written after the engine prefix.
    pub fn opcode(&self) -> &'static str {
        match self {
            Instruction::Alu { op, .. } | Instruction::Valu { op, .. } => op.symbol(),
            Instruction::MultiplyAdd { .. } => "multiply_add",
            Instruction::Load { .. } => "load",
            Instruction::LoadOffset { .. } => "load_offset",
            Instruction::Store { .. } => "store",
            Instruction::VSelect { .. } => "vselect",
            Instruction::Halt => "halt",
        }
    }

    /// Operand list in assembly order.
    pub fn operands(&self) -> Vec<u32> {
        match *self {
            Instruction::Alu { dest, a, b, .. } | Instruction::Valu { dest, a, b, .. } => {
                vec![dest, a, b]
            }
            Instruction::MultiplyAdd { dest, a, b, c } => vec![dest, a, b, c],
            Instruction::Load { dest, addr } => vec![dest, addr],
            Instruction::LoadOffset { dest, base, lane } => vec![dest, base, lane as u32],
            Instruction::Store { addr, src } => vec![addr, src],
            Instruction::VSelect {
                dest,
                cond,
                on_true,
                on_false,
            } => vec![dest, cond, on_true, on_false],
            Instruction::Halt => vec![],
        }
    }

    pub fn access(&self) -> Access {
        let mut acc = Access::default();
        match *self {
            Instruction::Alu { dest, a, b, .. } => {
                acc.reads.extend([a, b]);
                acc.writes.push(dest);
            }
            Instruction::Valu { dest, a, b, .. } => {
                acc.reads.extend(lanes(a).chain(lanes(b)));
                acc.writes.extend(lanes(dest));
            }
            Instruction::MultiplyAdd { dest, a, b, c } => {
                acc.reads.extend(lanes(a).chain(lanes(b)).chain(lanes(c)));
                acc.writes.extend(lanes(dest));
            }
            Instruction::Load { dest, addr } => {
                acc.reads.push(addr);
                acc.indirect_read = true;
                acc.writes.push(dest);
            }
            Instruction::LoadOffset { dest, base, lane } => {
                acc.reads.push(base.wrapping_add(lane as u32));
                acc.indirect_read = true;
                acc.writes.push(dest.wrapping_add(lane as u32));
            }
            Instruction::Store { addr, src } => {
                acc.reads.extend([addr, src]);
                acc.indirect_write = true;
            }
            Instruction::VSelect {
                dest,
                cond,
                on_true,
                on_false,
            } => {
                acc.reads
                    .extend(lanes(cond).chain(lanes(on_true)).chain(lanes(on_false)));
                acc.writes.extend(lanes(dest));
            }
            Instruction::Halt => {}
        }
        acc
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.engine(), self.opcode())?;
        for (i, operand) in self.operands().iter().enumerate() {
            let sep = if i == 0 { " " } else { ", " };
            write!(f, "{sep}{operand}")?;
        }
        Ok(())
    }
}

/// Instructions issued together in one cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bundle {
    pub instructions: Vec<Instruction>,
}

impl Bundle {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        Bundle { instructions }
    }

    pub fn engine_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for ins in &self.instructions {
            counts[ins.engine().index()] += 1;
        }
        counts
    }
}

/// One engine over its slot budget within a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotViolation {
    pub engine: Engine,
    pub count: usize,
    pub limit: usize,
}

impl fmt::Display for SlotViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} uses {} slots (limit {})",
            self.engine, self.count, self.limit
        )
    }
}

/// Accepts a bundle iff every engine is within its slot limit; otherwise
/// reports every offending engine.
pub fn check_bundle(bundle: &Bundle) -> Result<(), Vec<SlotViolation>> {
    let counts = bundle.engine_counts();
    let violations: Vec<_> = Engine::ALL
        .into_iter()
        .filter(|e| counts[e.index()] > e.slot_limit())
        .map(|engine| SlotViolation {
            engine,
            count: counts[engine.index()],
            limit: engine.slot_limit(),
        })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

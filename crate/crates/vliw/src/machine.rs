//! Cycle-accurate execution of straight-line bundle programs.
//!
//! Every bundle takes exactly one cycle. Within a bundle all operands are read
//! from the memory image at the start of the cycle, then all writes land
//! together; two writes to one address in the same bundle are an error.

use thiserror::Error;

use crate::isa::{check_bundle, Addr, Bundle, Instruction, SlotViolation, Word, VLEN};

/// Words of addressable memory.
pub const MEM_WORDS: usize = 1 << 20;

/// End of the data region. Pointer-based accesses (`load`, `load_offset`,
/// `store`) must land below this address; everything above is scratch.
pub const DATA_REGION_END: Addr = 4096;

/// First scratch word. `const` initialisers may only target scratch.
pub const SCRATCH_BASE: Addr = DATA_REGION_END;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("bundle {bundle}: slot limit exceeded: {}", fmt_violations(.violations))]
    SlotLimit {
        bundle: usize,
        violations: Vec<SlotViolation>,
    },
    #[error("cycle {cycle}: two writes to address {addr} in one bundle")]
    WriteConflict { cycle: u64, addr: Addr },
    #[error("cycle {cycle}: address {addr} out of range")]
    AddressOutOfRange { cycle: u64, addr: u64 },
    #[error("cycle {cycle}: pointer {addr} outside the data region")]
    IndirectOutOfRange { cycle: u64, addr: Word },
}

fn fmt_violations(v: &[SlotViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Simulator state: memory image, cycle counter and halt flag.
#[derive(Clone)]
pub struct MachineState {
    memory: Vec<Word>,
    cycle: u64,
    halted: bool,
    pending: Vec<(Addr, Word)>,
}

impl std::fmt::Debug for MachineState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MachineState")
            .field("cycle", &self.cycle)
            .field("halted", &self.halted)
            .finish_non_exhaustive()
    }
}

impl Default for MachineState {
    fn default() -> Self {
        Self::new()
    }
}

impl MachineState {
    pub fn new() -> Self {
        MachineState {
            memory: vec![0; MEM_WORDS],
            cycle: 0,
            halted: false,
            pending: Vec::with_capacity(128),
        }
    }

    /// Starts from `image`, zero-extended to the full address space.
    pub fn with_memory(mut image: Vec<Word>) -> Self {
        assert!(image.len() <= MEM_WORDS, "memory image larger than address space");
        image.resize(MEM_WORDS, 0);
        MachineState {
            memory: image,
            ..Self::new()
        }
    }

    pub fn memory(&self) -> &[Word] {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut [Word] {
        &mut self.memory
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    #[inline]
    fn read(&self, addr: Addr) -> Result<Word, SimError> {
        self.memory
            .get(addr as usize)
            .copied()
            .ok_or(SimError::AddressOutOfRange {
                cycle: self.cycle,
                addr: addr as u64,
            })
    }

    #[inline]
    fn read_lane(&self, base: Addr, lane: usize) -> Result<Word, SimError> {
        let addr = base as u64 + lane as u64;
        if addr >= MEM_WORDS as u64 {
            return Err(SimError::AddressOutOfRange {
                cycle: self.cycle,
                addr,
            });
        }
        Ok(self.memory[addr as usize])
    }

    #[inline]
    fn pointer(&self, cell: u64) -> Result<Addr, SimError> {
        if cell >= MEM_WORDS as u64 {
            return Err(SimError::AddressOutOfRange {
                cycle: self.cycle,
                addr: cell,
            });
        }
        let p = self.memory[cell as usize];
        if p >= DATA_REGION_END {
            return Err(SimError::IndirectOutOfRange {
                cycle: self.cycle,
                addr: p,
            });
        }
        Ok(p)
    }

    fn check_dest(&self, base: Addr, width: usize) -> Result<(), SimError> {
        let last = base as u64 + width as u64 - 1;
        if last >= MEM_WORDS as u64 {
            return Err(SimError::AddressOutOfRange {
                cycle: self.cycle,
                addr: last,
            });
        }
        Ok(())
    }

    /// Executes one bundle. Slot limits are not checked here; see [`execute`].
    pub fn step(&mut self, bundle: &Bundle) -> Result<(), SimError> {
        if self.halted {
            return Ok(());
        }
        let mut pending = std::mem::take(&mut self.pending);
        pending.clear();
        let mut halt = false;
        let result = self.collect_writes(bundle, &mut pending, &mut halt);
        if let Err(e) = result {
            self.pending = pending;
            return Err(e);
        }
        pending.sort_unstable_by_key(|w| w.0);
        if let Some(w) = pending.windows(2).find(|w| w[0].0 == w[1].0) {
            let addr = w[0].0;
            self.pending = pending;
            return Err(SimError::WriteConflict {
                cycle: self.cycle,
                addr,
            });
        }
        for &(addr, value) in &pending {
            self.memory[addr as usize] = value;
        }
        self.pending = pending;
        self.cycle += 1;
        self.halted = halt;
        Ok(())
    }

    fn collect_writes(
        &self,
        bundle: &Bundle,
        out: &mut Vec<(Addr, Word)>,
        halt: &mut bool,
    ) -> Result<(), SimError> {
        for ins in &bundle.instructions {
            match *ins {
                Instruction::Alu { op, dest, a, b } => {
                    self.check_dest(dest, 1)?;
                    out.push((dest, op.apply(self.read(a)?, self.read(b)?)));
                }
                Instruction::Valu { op, dest, a, b } => {
                    self.check_dest(dest, VLEN)?;
                    for lane in 0..VLEN {
                        let v = op.apply(self.read_lane(a, lane)?, self.read_lane(b, lane)?);
                        out.push((dest + lane as Addr, v));
                    }
                }
                Instruction::MultiplyAdd { dest, a, b, c } => {
                    self.check_dest(dest, VLEN)?;
                    for lane in 0..VLEN {
                        let v = self
                            .read_lane(a, lane)?
                            .wrapping_mul(self.read_lane(b, lane)?)
                            .wrapping_add(self.read_lane(c, lane)?);
                        out.push((dest + lane as Addr, v));
                    }
                }
                Instruction::Load { dest, addr } => {
                    self.check_dest(dest, 1)?;
                    let p = self.pointer(addr as u64)?;
                    out.push((dest, self.memory[p as usize]));
                }
                Instruction::LoadOffset { dest, base, lane } => {
                    let target = dest as u64 + lane as u64;
                    if target >= MEM_WORDS as u64 {
                        return Err(SimError::AddressOutOfRange {
                            cycle: self.cycle,
                            addr: target,
                        });
                    }
                    let p = self.pointer(base as u64 + lane as u64)?;
                    out.push((target as Addr, self.memory[p as usize]));
                }
                Instruction::Store { addr, src } => {
                    let p = self.pointer(addr as u64)?;
                    out.push((p, self.read(src)?));
                }
                Instruction::VSelect {
                    dest,
                    cond,
                    on_true,
                    on_false,
                } => {
                    self.check_dest(dest, VLEN)?;
                    for lane in 0..VLEN {
                        let v = if self.read_lane(cond, lane)? != 0 {
                            self.read_lane(on_true, lane)?
                        } else {
                            self.read_lane(on_false, lane)?
                        };
                        out.push((dest + lane as Addr, v));
                    }
                }
                Instruction::Halt => *halt = true,
            }
        }
        Ok(())
    }
}

/// Runs `bundles` from the current state. Every bundle is slot-checked before
/// anything executes, so an over-subscribed program never touches memory.
/// Returns the number of cycles executed (a `halt` ends the run early).
pub fn execute(bundles: &[Bundle], state: &mut MachineState) -> Result<u64, SimError> {
    for (i, b) in bundles.iter().enumerate() {
        check_bundle(b).map_err(|violations| SimError::SlotLimit {
            bundle: i,
            violations,
        })?;
    }
    let start = state.cycle;
    for b in bundles {
        if state.halted {
            break;
        }
        state.step(b)?;
    }
    Ok(state.cycle - start)
}

/// Runs an instruction stream one instruction per cycle. This is the
/// sequential reference the scheduler must agree with.
pub fn execute_sequential(
    stream: &[Instruction],
    state: &mut MachineState,
) -> Result<u64, SimError> {
    let start = state.cycle;
    let mut bundle = Bundle::default();
    for ins in stream {
        if state.halted {
            break;
        }
        bundle.instructions.clear();
        bundle.instructions.push(*ins);
        state.step(&bundle)?;
    }
    Ok(state.cycle - start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::BinOp;

    fn copy(dest: Addr, src: Addr, zero: Addr) -> Instruction {
        Instruction::Alu {
            op: BinOp::Add,
            dest,
            a: src,
            b: zero,
        }
    }

    #[test]
    fn cycles_equal_bundle_count() {
        let mut st = MachineState::new();
        let prog = vec![Bundle::default(); 3];
        assert_eq!(execute(&prog, &mut st).unwrap(), 3);
        assert_eq!(st.cycle(), 3);
    }

    #[test]
    fn reads_happen_before_writes() {
        let mut st = MachineState::new();
        st.memory_mut()[5000] = 11;
        st.memory_mut()[5001] = 22;
        // 5002 stays zero
        let swap = Bundle::new(vec![copy(5000, 5001, 5002), copy(5001, 5000, 5002)]);
        execute(&[swap], &mut st).unwrap();
        assert_eq!(st.memory()[5000], 22);
        assert_eq!(st.memory()[5001], 11);
    }

    #[test]
    fn two_stores_to_one_address_conflict() {
        let mut st = MachineState::new();
        st.memory_mut()[5000] = 100; // pointer
        st.memory_mut()[5001] = 1;
        st.memory_mut()[5002] = 2;
        let b = Bundle::new(vec![
            Instruction::Store {
                addr: 5000,
                src: 5001,
            },
            Instruction::Store {
                addr: 5000,
                src: 5002,
            },
        ]);
        let err = execute(&[b], &mut st).unwrap_err();
        assert_eq!(err, SimError::WriteConflict { cycle: 0, addr: 100 });
        assert_eq!(st.memory()[100], 0);
    }

    #[test]
    fn pointer_outside_data_region_is_rejected() {
        let mut st = MachineState::new();
        st.memory_mut()[5000] = SCRATCH_BASE + 3;
        let b = Bundle::new(vec![Instruction::Load {
            dest: 5001,
            addr: 5000,
        }]);
        assert!(matches!(
            execute(&[b], &mut st),
            Err(SimError::IndirectOutOfRange { .. })
        ));
    }

    #[test]
    fn out_of_range_address() {
        let mut st = MachineState::new();
        let b = Bundle::new(vec![Instruction::Valu {
            op: BinOp::Add,
            dest: (MEM_WORDS - 4) as Addr,
            a: 0,
            b: 0,
        }]);
        assert!(matches!(
            execute(&[b], &mut st),
            Err(SimError::AddressOutOfRange { .. })
        ));
    }

    #[test]
    fn slot_violation_executes_nothing() {
        let mut st = MachineState::new();
        st.memory_mut()[1] = 7;
        let ok = Bundle::new(vec![copy(0, 1, 2)]);
        let bad = Bundle::new(vec![Instruction::Halt, Instruction::Halt]);
        let err = execute(&[ok, bad], &mut st).unwrap_err();
        assert!(matches!(err, SimError::SlotLimit { bundle: 1, .. }));
        assert_eq!(st.memory()[0], 0);
        assert_eq!(st.cycle(), 0);
    }

    #[test]
    fn halt_stops_after_its_bundle() {
        let mut st = MachineState::new();
        st.memory_mut()[1] = 7;
        let prog = vec![
            Bundle::new(vec![copy(0, 1, 2), Instruction::Halt]),
            Bundle::new(vec![copy(3, 1, 2)]),
        ];
        assert_eq!(execute(&prog, &mut st).unwrap(), 1);
        assert_eq!(st.memory()[0], 7);
        assert_eq!(st.memory()[3], 0);
    }

    #[test]
    fn vector_ops_are_lanewise() {
        let mut st = MachineState::new();
        for i in 0..8 {
            st.memory_mut()[5000 + i] = i as Word;
            st.memory_mut()[5008 + i] = 3;
            st.memory_mut()[5016 + i] = 1;
            st.memory_mut()[5024 + i] = (i % 2) as Word;
        }
        let prog = vec![
            Bundle::new(vec![Instruction::MultiplyAdd {
                dest: 5100,
                a: 5000,
                b: 5008,
                c: 5016,
            }]),
            Bundle::new(vec![Instruction::VSelect {
                dest: 5200,
                cond: 5024,
                on_true: 5100,
                on_false: 5000,
            }]),
        ];
        execute(&prog, &mut st).unwrap();
        for i in 0..8u32 {
            assert_eq!(st.memory()[5100 + i as usize], i * 3 + 1);
            let expect = if i % 2 == 1 { i * 3 + 1 } else { i };
            assert_eq!(st.memory()[5200 + i as usize], expect);
        }
    }

    #[test]
    fn load_offset_gathers_one_lane() {
        let mut st = MachineState::new();
        st.memory_mut()[10] = 99;
        st.memory_mut()[5003] = 10;
        let b = Bundle::new(vec![Instruction::LoadOffset {
            dest: 6000,
            base: 5000,
            lane: 3,
        }]);
        execute(&[b], &mut st).unwrap();
        assert_eq!(st.memory()[6003], 99);
        assert_eq!(st.memory()[6000], 0);
    }
}

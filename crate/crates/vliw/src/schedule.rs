//! Greedy list scheduler.
//!
//! Instructions are taken in emission order and each is placed in the earliest
//! cycle that satisfies its dependencies and still has a free slot on its
//! engine. Dependencies are derived at word granularity:
//!
//! * read-after-write: the reader issues at least one cycle after the writer;
//! * write-after-read: the writer may share the reader's cycle, since reads
//!   happen at cycle start;
//! * write-after-write: the later writer issues strictly after the earlier one.
//!
//! Pointer-based accesses may touch any word of the data region, so they are
//! ordered against every direct access below `DATA_REGION_END` and against
//! each other. `halt` is a full barrier.

use std::collections::HashMap;

use crate::isa::{Addr, Bundle, Instruction};
use crate::machine::DATA_REGION_END;

#[derive(Default)]
struct Tracker {
    last_write: HashMap<Addr, i64>,
    last_read: HashMap<Addr, i64>,
    // Latest direct write / read anywhere in the data region.
    data_write: i64,
    data_read: i64,
    // Latest pointer-based write / read.
    ind_write: i64,
    ind_read: i64,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            data_write: -1,
            data_read: -1,
            ind_write: -1,
            ind_read: -1,
            ..Default::default()
        }
    }

    fn ready_cycle(&self, ins: &Instruction) -> i64 {
        let acc = ins.access();
        let mut ready = 0i64;
        let lw = |a: &Addr| self.last_write.get(a).copied().unwrap_or(-1);
        let lr = |a: &Addr| self.last_read.get(a).copied().unwrap_or(-1);
        for a in &acc.reads {
            ready = ready.max(lw(a) + 1);
            if *a < DATA_REGION_END {
                ready = ready.max(self.ind_write + 1);
            }
        }
        if acc.indirect_read {
            ready = ready.max(self.data_write + 1).max(self.ind_write + 1);
        }
        for a in &acc.writes {
            ready = ready.max(lw(a) + 1).max(lr(a));
            if *a < DATA_REGION_END {
                ready = ready.max(self.ind_write + 1).max(self.ind_read);
            }
        }
        if acc.indirect_write {
            ready = ready
                .max(self.data_write + 1)
                .max(self.data_read)
                .max(self.ind_write + 1)
                .max(self.ind_read);
        }
        ready
    }

    fn commit(&mut self, ins: &Instruction, cycle: i64) {
        let acc = ins.access();
        for a in acc.reads {
            let e = self.last_read.entry(a).or_insert(-1);
            *e = (*e).max(cycle);
            if a < DATA_REGION_END {
                self.data_read = self.data_read.max(cycle);
            }
        }
        for a in acc.writes {
            let e = self.last_write.entry(a).or_insert(-1);
            *e = (*e).max(cycle);
            if a < DATA_REGION_END {
                self.data_write = self.data_write.max(cycle);
            }
        }
        if acc.indirect_read {
            self.ind_read = self.ind_read.max(cycle);
        }
        if acc.indirect_write {
            self.ind_write = self.ind_write.max(cycle);
        }
    }
}

/// Packs a sequential instruction stream into slot-legal bundles that compute
/// the same final memory as executing the stream one instruction per cycle.
pub fn schedule(stream: &[Instruction]) -> Vec<Bundle> {
    let mut tracker = Tracker::new();
    let mut bundles: Vec<Bundle> = Vec::new();
    let mut occupancy: Vec<[usize; 5]> = Vec::new();
    // Earliest cycle any instruction may use (set just past a `halt`).
    let mut barrier = 0i64;
    let mut last_used = -1i64;

    for ins in stream {
        let engine = ins.engine();
        let mut cycle = tracker.ready_cycle(ins).max(barrier);
        if matches!(ins, Instruction::Halt) {
            cycle = cycle.max(last_used);
        }
        loop {
            let c = cycle as usize;
            if c >= occupancy.len() {
                occupancy.resize(c + 1, [0; 5]);
                bundles.resize(c + 1, Bundle::default());
            }
            if occupancy[c][engine.index()] < engine.slot_limit() {
                occupancy[c][engine.index()] += 1;
                bundles[c].instructions.push(*ins);
                break;
            }
            cycle += 1;
        }
        tracker.commit(ins, cycle);
        last_used = last_used.max(cycle);
        if matches!(ins, Instruction::Halt) {
            barrier = cycle + 1;
        }
    }
    bundles
}

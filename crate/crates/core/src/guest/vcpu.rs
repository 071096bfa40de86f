use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::guest::program::{bit_of, BitIndex, GuestOp, GuestProgram, IoDir, Register, REGISTER_COUNT};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RunState {
    Running,
    /// Executed `HALT`; resumes on the next injected interrupt.
    Halted,
    /// An `IO` op found its queue's descriptors exhausted; retried once a
    /// response frees one.
    Stalled { queue: usize },
    /// Ran past the last op. Behaves like a permanent halt.
    Finished,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Interrupt {
    Timer,
    Io,
}

#[derive(Clone, Debug)]
pub struct VcpuState {
    pub pc: usize,
    pub registers: [u64; REGISTER_COUNT],
    /// Doubles as the guest TSC: one instruction per cycle.
    pub instructions_retired: u64,
    pub state: RunState,
    pub pending_interrupts: VecDeque<Interrupt>,
    /// Instructions left in a partially executed compute op.
    compute_left: Option<u64>,
}

/// Why [`VcpuState::execute`] returned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Exit {
    /// Retired exactly the requested number of instructions.
    Limit,
    /// Trapped on an `IO` op. The op is not retired until
    /// [`VcpuState::retire_io`] is called.
    Io { queue: usize, dir: IoDir, size: u64, tag: u32 },
    /// Intercepted `READ_TSC`; the value has been written to the register.
    Tsc { reg: Register, value: u64 },
    Halt,
    Finished,
}

impl Default for VcpuState {
    fn default() -> Self {
        Self::new()
    }
}

impl VcpuState {
    pub fn new() -> Self {
        VcpuState {
            pc: 0,
            registers: [0; REGISTER_COUNT],
            instructions_retired: 0,
            state: RunState::Running,
            pending_interrupts: VecDeque::new(),
            compute_left: None,
        }
    }

    pub fn is_running(&self) -> bool {
        self.state == RunState::Running
    }

    /// Injects pending interrupts at an instruction boundary. A halted vCPU
    /// wakes; interrupts have no other architectural effect here.
    pub fn inject_pending(&mut self) {
        if self.pending_interrupts.is_empty() {
            return;
        }
        self.pending_interrupts.clear();
        if self.state == RunState::Halted {
            self.state = RunState::Running;
        }
    }

    /// Runs guest ops until `limit` instructions have retired or an exiting
    /// op is reached. Returns the number of instructions retired.
    pub fn execute(&mut self, program: &GuestProgram, limit: u64) -> Result<(u64, Exit)> {
        let ops = program.ops();
        let mut executed = 0u64;
        loop {
            if executed == limit {
                return Ok((executed, Exit::Limit));
            }
            let Some(op) = ops.get(self.pc) else {
                self.state = RunState::Finished;
                return Ok((executed, Exit::Finished));
            };
            match *op {
                GuestOp::Compute(n) => {
                    let left = self.compute_left.take().unwrap_or(n);
                    executed += self.consume(left, limit - executed);
                }
                GuestOp::ComputeIfBit {
                    param,
                    bit,
                    n_true,
                    n_false,
                } => {
                    let left = match self.compute_left.take() {
                        Some(left) => left,
                        None => {
                            let index = match bit {
                                BitIndex::Literal(i) => i,
                                BitIndex::Reg(r) => self.registers[r.index()],
                            };
                            let value = program
                                .param_by_index(param)
                                .and_then(|bytes| bit_of(bytes, index))
                                .ok_or_else(|| {
                                    Error::scenario(format!(
                                        "{}:{}: bit {index} of param {:?} is out of range",
                                        program.origin(),
                                        program.source_line(self.pc).unwrap_or(0),
                                        program.param_names()[param],
                                    ))
                                })?;
                            if value {
                                n_true
                            } else {
                                n_false
                            }
                        }
                    };
                    executed += self.consume(left, limit - executed);
                }
                GuestOp::Io { queue, dir, size, tag } => {
                    return Ok((executed, Exit::Io { queue, dir, size, tag }));
                }
                GuestOp::Halt => {
                    self.retire(1);
                    executed += 1;
                    self.pc += 1;
                    self.state = RunState::Halted;
                    return Ok((executed, Exit::Halt));
                }
                GuestOp::ReadTsc(reg) => {
                    let value = self.instructions_retired;
                    self.registers[reg.index()] = value;
                    self.retire(1);
                    executed += 1;
                    self.pc += 1;
                    return Ok((executed, Exit::Tsc { reg, value }));
                }
                GuestOp::Jump(target) => {
                    self.retire(1);
                    executed += 1;
                    self.pc = target;
                }
                GuestOp::JumpIfZero(reg, target) => {
                    self.retire(1);
                    executed += 1;
                    self.pc = if self.registers[reg.index()] == 0 { target } else { self.pc + 1 };
                }
                GuestOp::Dec(reg) => {
                    let r = &mut self.registers[reg.index()];
                    *r = r.saturating_sub(1);
                    self.retire(1);
                    executed += 1;
                    self.pc += 1;
                }
                GuestOp::Set(reg, value) => {
                    self.registers[reg.index()] = value;
                    self.retire(1);
                    executed += 1;
                    self.pc += 1;
                }
            }
        }
    }

    /// Completes the `IO` op the vCPU trapped on.
    pub fn retire_io(&mut self) {
        self.retire(1);
        self.pc += 1;
        if matches!(self.state, RunState::Stalled { .. }) {
            self.state = RunState::Running;
        }
    }

    fn consume(&mut self, left: u64, room: u64) -> u64 {
        let take = left.min(room);
        self.retire(take);
        if take < left {
            self.compute_left = Some(left - take);
        } else {
            self.pc += 1;
        }
        take
    }

    fn retire(&mut self, n: u64) {
        self.instructions_retired += n;
    }
}

//! Guest workloads and the VMM loop that runs them.

pub mod cost;
pub mod program;
pub mod vcpu;
pub mod vmm;

pub use cost::{CostModel, CountingKind, CountingMode};
pub use program::{GuestOp, GuestProgram, IoDir, Register};
pub use vcpu::{RunState, VcpuState};
pub use vmm::{Delivery, IssuedIo, Observation, SegmentRecord, Vmm, VmmConfig};

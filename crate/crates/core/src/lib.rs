//! Simulated process memory, a protection kernel that hides a sensitive
//! function's stack frame and registered objects from untrusted callees,
//! and tooling to instrument, run and fuzz small annotated programs.

pub mod exec;
pub mod fuzz;
pub mod identity;
pub mod instrument;
pub mod memory;
pub mod oracle;
pub mod program;
pub mod scenario;
pub mod vault;

pub use exec::{run, run_native, ExecutionReport, Mode, RunOptions};
pub use fuzz::{fuzz, FuzzConfig, FuzzSummary};
pub use identity::{FunctionId, FunctionSpan, IdentityError, IdentityTable};
pub use instrument::{
    instrument, InstrumentError, InstrumentedFunction, InstrumentedProgram, Sensitivity, Trust,
};
pub use memory::{Address, MemoryError, ProcessMemory, Region, StackFrame};
pub use oracle::SnapshotVault;
pub use program::{parse_lists, parse_program, ApiRow, Lists, Program};
pub use scenario::Scenario;
pub use vault::{
    ExceptionKind, Kernel, ProtectEntry, RegisterEntry, SaveBuffer, Syscall, SyscallStats,
    VaultException, VaultState,
};

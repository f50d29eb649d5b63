//! Audit mode: trace ingestion, the strace text adapter, the live ptrace
//! backend, and path-mirrored sandbox construction.

mod ingest;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub mod live;
mod sandbox;
pub mod strace;
mod trace;

pub use ingest::{
    ingest_trace, Access, DependencySet, ExecRecord, Interaction, InteractionLog, Object, ProcessRecord, Role,
};
pub use sandbox::{build_sandbox, is_elf, DataPolicy, SandboxReport};
pub use trace::{read_ndjson, to_ndjson, write_ndjson, EventKind, Pid, TraceEvent};

/// Whether the live tracing backend is compiled into this build.
pub const LIVE_BACKEND_COMPILED: bool = cfg!(all(target_os = "linux", target_arch = "x86_64"));

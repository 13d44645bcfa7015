//! Guest programs used by the CLI, benchmarks and tests.
//!
//! Each program is a root task plus the input log that configures it.
//! Program arguments travel as `key=value` argument records, so a run is
//! fully described by its name, arguments and kernel configuration.

pub mod matmult;
pub mod md5;
pub mod misc;
pub mod pmake;
pub mod qsort;
pub mod sync;

use thiserror::Error;

use crate::kernel::{HostRegistry, InputLog, Program};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown corpus program `{0}`")]
    Unknown(String),
    #[error("`{0}` is a test-only program")]
    TestOnly(String),
    #[error("assembling `{0}`: {1}")]
    Asm(String, crate::guestvm::AsmError),
}

/// Everything needed to run one program.
#[derive(Debug, Clone)]
pub struct Workload {
    pub registry: HostRegistry,
    pub program: Program,
    pub input: InputLog,
}

/// Programs available to every run.
pub const NAMES: &[&str] = &[
    "hello",
    "md5",
    "md5tree",
    "matmult",
    "qsort",
    "pmake",
    "prodcons",
    "contention",
    "join_any",
    "signal_order",
    "swap",
    "writers",
];

/// Program only reachable with the harness's test backdoor enabled.
pub const NONDET: &str = "nondet";

/// Builds program `name` with `args` as its argument records.
pub fn build(
    name: &str,
    args: &[(String, String)],
    backdoor: bool,
) -> Result<Workload, CorpusError> {
    let mut registry = HostRegistry::new();
    let mut input = InputLog::new();
    let entry = match name {
        "hello" => {
            let code = misc::hello().map_err(|e| CorpusError::Asm(name.into(), e))?;
            for (k, v) in args {
                input.arg(k, v);
            }
            return Ok(Workload {
                registry,
                program: Program::Vm(code),
                input,
            });
        }
        "md5" => md5::register_search(&mut registry),
        "md5tree" => md5::register_tree(&mut registry),
        "matmult" => matmult::register(&mut registry),
        "qsort" => qsort::register(&mut registry),
        "pmake" => pmake::register(&mut registry),
        "prodcons" | "contention" | "join_any" | "signal_order" => {
            input.arg("program", name);
            sync::register(&mut registry)
        }
        "swap" => misc::register_swap(&mut registry),
        "writers" => misc::register_writers(&mut registry),
        NONDET if backdoor => misc::register_nondet(&mut registry),
        NONDET => return Err(CorpusError::TestOnly(name.into())),
        other => return Err(CorpusError::Unknown(other.into())),
    };
    for (k, v) in args {
        input.arg(k, v);
    }
    Ok(Workload {
        registry,
        program: Program::Host(entry),
        input,
    })
}

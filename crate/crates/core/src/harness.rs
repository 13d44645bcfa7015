//! Run configurations, reports, self-checks and benchmarks.
//!
//! A report is line-oriented UTF-8 with a fixed field order. It embeds the
//! configuration as JSON so a run can be reconstructed from its report,
//! and carries lowercase hex SHA-256 digests of the output streams.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::ClusterError;
use crate::corpus::{self, CorpusError, Workload};
use crate::guestvm::{assemble_at, AsmError};
use crate::kernel::abi::CODE_BASE;
use crate::kernel::iolog::{LogError, DEV_CONSOLE, DEV_FS, DEV_TRACE};
use crate::kernel::{
    ExecutorKind, HostRegistry, InputLog, Kernel, KernelConfig, Program, RunOutcome, Terminal,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GUEST: i32 = 1;
pub const EXIT_NONDET: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

pub const REPORT_HEADER: &str = "detspace-report 1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("assembling {0}: {1}")]
    Asm(PathBuf, AsmError),
    #[error("reading {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("input log {0}: {1}")]
    Log(PathBuf, LogError),
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("unknown benchmark `{0}`")]
    Bench(String),
}

impl HarnessError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Cluster(_) => EXIT_GUEST,
            _ => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Executor {
    Serial,
    Parallel { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// A corpus program name, or a path to VM assembly (`.s`, `.asm`) or
    /// raw code.
    pub program: String,
    pub args: Vec<(String, String)>,
    /// Extra input records appended after the argument records.
    pub input_log: Option<PathBuf>,
    pub executor: Executor,
    pub workers: usize,
    pub nodes: usize,
    /// Scheduling quantum for the deterministic-scheduler programs.
    pub quantum: Option<u64>,
    /// File-system region size in bytes.
    pub fs_size: Option<u32>,
    /// Include the synchronization trace in the report.
    pub trace_sync: bool,
    /// Include the cluster message log in the report.
    pub trace_messages: bool,
    pub debug_console: bool,
    pub test_backdoor: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            program: "hello".into(),
            args: Vec::new(),
            input_log: None,
            executor: Executor::Serial,
            workers: 4,
            nodes: 1,
            quantum: None,
            fs_size: None,
            trace_sync: false,
            trace_messages: false,
            debug_console: false,
            test_backdoor: false,
        }
    }
}

impl RunConfig {
    pub fn new(program: &str) -> Self {
        RunConfig {
            program: program.into(),
            ..RunConfig::default()
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.push((key.into(), value.to_string()));
        self
    }

    pub fn executor(mut self, executor: Executor) -> Self {
        self.executor = executor;
        self
    }

    pub fn nodes(mut self, nodes: usize) -> Self {
        self.nodes = nodes;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn kernel_config(&self) -> KernelConfig {
        let executor = match self.executor {
            Executor::Serial => ExecutorKind::Serial,
            Executor::Parallel { seed } => ExecutorKind::Parallel {
                workers: self.workers.max(1),
                seed,
            },
        };
        KernelConfig {
            executor,
            nodes: self.nodes,
            debug_console: self.debug_console,
            audit: false,
        }
    }

    /// Every argument record the root sees, in order.
    fn all_args(&self) -> Vec<(String, String)> {
        let mut args = self.args.clone();
        if let Some(q) = self.quantum {
            args.push(("quantum".into(), q.to_string()));
        }
        if let Some(s) = self.fs_size {
            args.push(("fs_size".into(), s.to_string()));
        }
        args
    }

    pub fn workload(&self) -> Result<Workload, HarnessError> {
        if self.nodes == 0 || self.nodes > crate::cluster::MAX_NODES {
            return Err(HarnessError::Config(format!(
                "nodes must be 1..={}",
                crate::cluster::MAX_NODES
            )));
        }
        let path = Path::new(&self.program);
        let mut w = if corpus::NAMES.contains(&self.program.as_str())
            || self.program == corpus::NONDET
        {
            corpus::build(&self.program, &self.all_args(), self.test_backdoor)?
        } else {
            let bytes = std::fs::read(path).map_err(|e| HarnessError::Io(path.into(), e))?;
            let code = match path.extension().and_then(|e| e.to_str()) {
                Some("s" | "asm") => {
                    let src = String::from_utf8_lossy(&bytes);
                    assemble_at(&src, CODE_BASE).map_err(|e| HarnessError::Asm(path.into(), e))?
                }
                _ => bytes,
            };
            let mut input = InputLog::new();
            for (k, v) in self.all_args() {
                input.arg(&k, v);
            }
            Workload {
                registry: HostRegistry::new(),
                program: Program::Vm(code),
                input,
            }
        };
        if let Some(log) = &self.input_log {
            let bytes = std::fs::read(log).map_err(|e| HarnessError::Io(log.clone(), e))?;
            let extra =
                InputLog::from_bytes(&bytes).map_err(|e| HarnessError::Log(log.clone(), e))?;
            w.input.records.extend(extra.records);
        }
        Ok(w)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The byte streams a run is judged by.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Streams {
    pub output: Vec<u8>,
    pub console: Vec<u8>,
    pub fs: Vec<u8>,
    pub trace: Vec<u8>,
}

impl Streams {
    pub fn of(out: &RunOutcome) -> Self {
        Streams {
            output: out.output.to_bytes(),
            console: out.output.device(DEV_CONSOLE),
            fs: out.output.device(DEV_FS),
            trace: out.output.device(DEV_TRACE),
        }
    }

    pub fn named(&self) -> [(&'static str, &[u8]); 4] {
        [
            ("output", &self.output),
            ("console", &self.console),
            ("fs", &self.fs),
            ("trace", &self.trace),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config: RunConfig,
    pub outcome: RunOutcome,
    pub streams: Streams,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        match self.outcome.terminal {
            Terminal::Exit(0) => EXIT_OK,
            _ => EXIT_GUEST,
        }
    }

    pub fn terminal(&self) -> String {
        terminal_line(self.outcome.terminal)
    }

    /// The report text. Identical for identical configs.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "config {}", self.config.to_json());
        let _ = writeln!(s, "terminal {}", self.terminal());
        for (name, bytes) in self.streams.named() {
            let _ = writeln!(s, "{name} {} {}", bytes.len(), sha256_hex(bytes));
        }
        let _ = writeln!(
            s,
            "messages {}",
            self.outcome
                .messages
                .per_space
                .values()
                .map(Vec::len)
                .sum::<usize>()
        );
        if self.config.trace_sync {
            for line in String::from_utf8_lossy(&self.streams.trace).lines() {
                let _ = writeln!(s, "trace {line}");
            }
        }
        if self.config.trace_messages {
            for line in self.outcome.messages.dump().lines() {
                let _ = writeln!(s, "msg {line}");
            }
        }
        s
    }
}

fn terminal_line(t: Terminal) -> String {
    match t {
        Terminal::Exit(code) => format!("exit {code}"),
        Terminal::Trap(trap) => format!("trap {:?} {:#x}", trap.kind, trap.detail),
        Terminal::Deadlock => "deadlock".into(),
    }
}

pub fn run(config: &RunConfig) -> Result<Report, HarnessError> {
    let w = config.workload()?;
    let outcome = Kernel::new(config.kernel_config(), w.registry).run(&w.program, &w.input)?;
    let streams = Streams::of(&outcome);
    Ok(Report {
        config: config.clone(),
        outcome,
        streams,
    })
}

/// The executor sequence a self-check cycles through: serial, then
/// parallel seeds 1, 2, 3, ...
pub fn selfcheck_executors(runs: usize) -> Vec<Executor> {
    (0..runs)
        .map(|i| {
            if i == 0 {
                Executor::Serial
            } else {
                Executor::Parallel { seed: i as u64 }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    /// Labels of the two runs compared.
    pub first: String,
    pub second: String,
    pub stream: &'static str,
    /// First differing byte offset (the shorter length if one is a prefix).
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct SelfCheck {
    /// One line per run: label, terminal and output digest.
    pub runs: Vec<String>,
    pub mismatch: Option<Mismatch>,
    pub guest_failed: bool,
}

impl SelfCheck {
    pub fn exit_code(&self) -> i32 {
        if self.mismatch.is_some() {
            EXIT_NONDET
        } else if self.guest_failed {
            EXIT_GUEST
        } else {
            EXIT_OK
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.runs {
            let _ = writeln!(s, "run {r}");
        }
        match &self.mismatch {
            Some(m) => {
                let _ = writeln!(
                    s,
                    "FAIL {} differs between {} and {} at offset {}",
                    m.stream, m.first, m.second, m.offset
                );
            }
            None => {
                let _ = writeln!(s, "PASS {} runs identical", self.runs.len());
            }
        }
        s
    }
}

fn first_difference(a: &[u8], b: &[u8]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

fn label(c: &RunConfig) -> String {
    let ex = match c.executor {
        Executor::Serial => "serial".to_string(),
        Executor::Parallel { seed } => format!("parallel:{seed}"),
    };
    format!("{ex}/nodes={}", c.nodes)
}

/// Runs `base` once per executor in [`selfcheck_executors`] and, for each,
/// once per entry of `nodes` (or the base node count if empty), comparing
/// every stream byte for byte against the first run.
pub fn selfcheck(
    base: &RunConfig,
    runs: usize,
    nodes: &[usize],
) -> Result<SelfCheck, HarnessError> {
    if runs < 2 {
        return Err(HarnessError::Config(
            "selfcheck needs at least 2 runs".into(),
        ));
    }
    let node_counts = if nodes.is_empty() {
        vec![base.nodes]
    } else {
        nodes.to_vec()
    };
    let mut first: Option<(String, Streams, Terminal)> = None;
    let mut out = SelfCheck {
        runs: Vec::new(),
        mismatch: None,
        guest_failed: false,
    };
    for executor in selfcheck_executors(runs) {
        for &n in &node_counts {
            let cfg = RunConfig {
                executor,
                nodes: n,
                ..base.clone()
            };
            let r = run(&cfg)?;
            let name = label(&cfg);
            out.guest_failed |= r.exit_code() != EXIT_OK;
            out.runs.push(format!(
                "{name} {} {}",
                r.terminal(),
                sha256_hex(&r.streams.output)
            ));
            match &first {
                None => first = Some((name, r.streams, r.outcome.terminal)),
                Some((fname, fstreams, fterm)) => {
                    let diff = fstreams
                        .named()
                        .into_iter()
                        .zip(r.streams.named())
                        .find_map(|((s, a), (_, b))| first_difference(a, b).map(|o| (s, o)));
                    let diff = diff.or((*fterm != r.outcome.terminal).then_some(("terminal", 0)));
                    if let Some((stream, offset)) = diff {
                        out.mismatch = Some(Mismatch {
                            first: fname.clone(),
                            second: name,
                            stream,
                            offset,
                        });
                        return Ok(out);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Benchmarks and the argument their size maps to.
pub const BENCHMARKS: &[(&str, &str)] = &[
    ("md5", "len"),
    ("md5tree", "len"),
    ("matmult", "n"),
    ("qsort", "n"),
];

#[derive(Debug, Clone)]
pub struct Bench {
    pub name: String,
    pub size: u64,
    pub threads: u32,
    pub nodes: usize,
    pub wall_ms: u128,
    /// Digest of the console output, which carries the result.
    pub hash: String,
    pub terminal: String,
}

impl Bench {
    pub fn render(&self) -> String {
        format!(
            "bench {} size={} threads={} nodes={} terminal={} hash={} wall_ms={}\n",
            self.name, self.size, self.threads, self.nodes, self.terminal, self.hash, self.wall_ms
        )
    }
}

/// Runs benchmark `name`. `threads` maps to the worker count (the fork
/// depth for qsort, `log2(threads)`).
pub fn bench(
    name: &str,
    size: u64,
    threads: u32,
    nodes: usize,
    extra: &[(String, String)],
) -> Result<Bench, HarnessError> {
    let key = BENCHMARKS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| HarnessError::Bench(name.into()))?
        .1;
    let mut cfg = RunConfig::new(name).nodes(nodes).arg(key, size);
    cfg = match name {
        "qsort" => cfg.arg("depth", threads.max(1).ilog2()),
        _ => cfg.arg("threads", threads.max(1)),
    };
    cfg.args.extend(extra.iter().cloned());
    let start = Instant::now();
    let r = run(&cfg)?;
    let wall_ms = start.elapsed().as_millis();
    Ok(Bench {
        name: name.into(),
        size,
        threads,
        nodes,
        wall_ms,
        hash: sha256_hex(&r.streams.console),
        terminal: r.terminal(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let mut c = RunConfig::new("qsort")
            .arg("n", 100)
            .executor(Executor::Parallel { seed: 7 });
        c.quantum = Some(9);
        c.input_log = Some("in.log".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(
            RunConfig::from_json("{\"program\":\"swap\"}").unwrap(),
            RunConfig::new("swap")
        );
    }

    #[test]
    fn differences() {
        assert_eq!(first_difference(b"abc", b"abc"), None);
        assert_eq!(first_difference(b"abc", b"abd"), Some(2));
        assert_eq!(first_difference(b"ab", b"abc"), Some(2));
    }

    #[test]
    fn hello_report() {
        let r = run(&RunConfig::new("hello")).unwrap();
        let text = r.render();
        assert!(text.starts_with("detspace-report 1\nconfig {"));
        assert!(text.contains(&format!("console 13 {}", sha256_hex(b"hello, world\n"))));
        assert_eq!(r.exit_code(), EXIT_OK);
    }

    #[test]
    fn seeds_agree() {
        let a = run(&RunConfig::new("qsort")
            .arg("n", 1000)
            .executor(Executor::Parallel { seed: 7 }))
        .unwrap();
        let b = run(&RunConfig::new("qsort")
            .arg("n", 1000)
            .executor(Executor::Parallel { seed: 99 }))
        .unwrap();
        assert_eq!(a.streams, b.streams);
        assert_ne!(a.render(), b.render(), "reports embed their config");
    }

    #[test]
    fn fs_size_argument() {
        let mut c = RunConfig::new("pmake");
        c.fs_size = Some(1 << 20);
        assert_eq!(run(&c).unwrap().exit_code(), EXIT_OK);
        c.fs_size = Some(123);
        assert_eq!(run(&c).unwrap().exit_code(), EXIT_GUEST);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn config() -> impl Strategy<Value = RunConfig> {
            let program =
                prop::sample::select(vec!["hello", "swap", "pmake", "writers", "contention"]);
            (program, any::<u64>(), 1usize..4, 1usize..4).prop_map(|(p, seed, workers, nodes)| {
                RunConfig {
                    executor: Executor::Parallel { seed },
                    workers,
                    nodes,
                    ..RunConfig::new(p).arg("items", 3)
                }
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn reports_repeat(c in config()) {
                let a = run(&c).unwrap();
                let b = run(&c).unwrap();
                prop_assert_eq!(a.render(), b.render());
                let serial = run(&RunConfig { executor: Executor::Serial, nodes: 1, ..c.clone() }).unwrap();
                prop_assert_eq!(a.exit_code(), EXIT_OK);
                prop_assert_eq!(a.streams, serial.streams);
            }
        }
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.

mod support;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use detspace::cluster::{child_number, MessageKind};
use detspace::corpus::{matmult, md5, misc, qsort};
use detspace::guestvm::{assemble_at, RegisterFile};
use detspace::harness::{self, selfcheck_executors, Executor, RunConfig, EXIT_NONDET, EXIT_OK};
use detspace::kernel::abi::CODE_BASE;
use detspace::kernel::{
    pages, ExecutorKind, GuestExit, HostRegistry, InputLog, Kernel, KernelConfig, Program, Reason,
    RunOutcome, SyscallArgs, TaskCtx, Terminal,
};
use detspace::memimg::{merge, PAGE_SIZE};
use detspace::runtime::fs::FsImage;
use detspace::runtime::threads::{ThreadError, ThreadGroup};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn run(cfg: &RunConfig) -> Result<harness::Report, String> {
    let r = harness::run(cfg).map_err(|e| e.to_string())?;
    check!(
        r.exit_code() == EXIT_OK,
        "{} ended with {}: {}",
        cfg.program,
        r.terminal(),
        String::from_utf8_lossy(&r.streams.console)
    );
    Ok(r)
}

fn selfcheck_passes(cfg: &RunConfig, runs: usize) -> Outcome {
    let check = harness::selfcheck(cfg, runs, &[]).map_err(|e| e.to_string())?;
    check!(
        check.exit_code() == EXIT_OK,
        "{}: {}",
        cfg.program,
        check.render()
    );
    check!(
        check.runs.len() == runs,
        "{}: only {} runs",
        cfg.program,
        check.runs.len()
    );
    Ok(())
}

fn words(b: &[u8]) -> Vec<u32> {
    b.chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn fs_file(r: &harness::Report, path: &str) -> Result<Vec<u8>, String> {
    let fs = FsImage::from_bytes(&r.streams.fs).map_err(|e| e.to_string())?;
    fs.read(path).map(<[u8]>::to_vec).map_err(|e| e.to_string())
}

fn corpus_configs() -> Vec<RunConfig> {
    vec![
        RunConfig::new("md5").arg("word", "desk").arg("len", 4),
        RunConfig::new("matmult").arg("n", 64),
        RunConfig::new("qsort").arg("n", 10_000),
        RunConfig::new("pmake"),
        RunConfig::new("prodcons").arg("items", 16),
    ]
}

fn bit_identity() -> Outcome {
    let execs = selfcheck_executors(5);
    check!(execs[0] == Executor::Serial, "first run not serial");
    check!(
        execs
            .iter()
            .filter(|e| matches!(e, Executor::Parallel { .. }))
            .count()
            >= 3,
        "fewer than 3 seeds"
    );
    for cfg in corpus_configs() {
        selfcheck_passes(&cfg, 5)?;
    }
    Ok(())
}

fn merge_oracle() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let conflicted = Cell::new(0u32);
    let result = runner.run(&support::merge_case(), |case| {
        let mut b = support::build(&case);
        let want = support::merge_oracle(b.snap.image(), &b.child, &b.parent);
        let report = merge(
            &mut b.parent,
            support::BASE,
            &b.child,
            &b.snap,
            support::BASE,
            support::LEN,
        )
        .unwrap();
        let mut got = report.conflicts.clone();
        got.sort();
        prop_assert_eq!(support::region(&b.parent), want.bytes);
        prop_assert_eq!(report.bytes_copied, want.copied);
        prop_assert_eq!(got, want.conflicts.clone());
        conflicted.set(conflicted.get() + !want.conflicts.is_empty() as u32);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    let conflicted = conflicted.get();
    check!(conflicted > 100, "only {conflicted} cases had conflicts");
    Ok(())
}

fn swap() -> Outcome {
    for i in 0..100u64 {
        let executor = if i % 4 == 0 {
            Executor::Serial
        } else {
            Executor::Parallel { seed: i }
        };
        let (x, y) = (i * 7 + 1, i * 13 + 1000);
        let cfg = RunConfig {
            workers: 1 + i as usize % 4,
            ..RunConfig::new("swap")
                .arg("x", x)
                .arg("y", y)
                .executor(executor)
        };
        let r = run(&cfg)?;
        let text = String::from_utf8_lossy(&r.streams.console).into_owned();
        check!(text == format!("x={y} y={x}\n"), "run {i}: {text}");
    }
    Ok(())
}

const SHARED: u32 = 0x1000_0000;
const SHARED_LEN: u64 = 4096;

/// Two host threads write their sets into the shared page; returns the
/// conflicting addresses the join reported.
fn write_sets(a: Vec<(u16, u8)>, b: Vec<(u16, u8)>, seed: u64) -> Result<BTreeSet<u32>, String> {
    let mut reg = HostRegistry::new();
    let sets = [a, b];
    let worker = reg.register("worker", move |ctx: TaskCtx| {
        let set = sets[ctx.arg(1) as usize].clone();
        async move {
            for (o, v) in set {
                ctx.write(SHARED + o as u32, &[v]);
            }
            GuestExit::Exit(0)
        }
    });
    let entry = reg.register("master", move |ctx: TaskCtx| async move {
        ctx.map_zero(SHARED, SHARED_LEN).unwrap();
        let mut g = ThreadGroup::new(SHARED, SHARED_LEN);
        for tid in 0..2 {
            g.fork(&ctx, tid, RegisterFile::new(worker).with(1, tid))
                .await
                .unwrap();
        }
        let mut report = Vec::new();
        for tid in 0..2 {
            match g.join(&ctx, tid).await {
                Ok(_) => {}
                Err(ThreadError::Conflict { addrs, .. }) => {
                    report.extend(addrs.iter().flat_map(|a| a.to_le_bytes()))
                }
                Err(e) => panic!("{e}"),
            }
        }
        ctx.output(1, report).await.unwrap();
        GuestExit::Exit(0)
    });
    let cfg = KernelConfig {
        executor: ExecutorKind::Parallel { workers: 2, seed },
        ..KernelConfig::default()
    };
    let out = Kernel::new(cfg, reg)
        .run(&Program::Host(entry), &InputLog::new())
        .map_err(|e| e.to_string())?;
    check!(
        out.terminal == Terminal::Exit(0),
        "master ended with {:?}",
        out.terminal
    );
    Ok(words(&out.output.device(1)).into_iter().collect())
}

fn conflicts() -> Outcome {
    let set = || prop::collection::vec((0u16..96, 1u8..=255), 0..24);
    let mut runner = TestRunner::new(Config {
        cases: 500,
        failure_persistence: None,
        ..Config::default()
    });
    let (overlapping, disjoint) = (Cell::new(0u32), Cell::new(0u32));
    let result = runner.run(
        &(set(), set(), any::<bool>(), any::<u64>()),
        |(a, mut b, same, seed)| {
            if same {
                // Same byte, same value: still a conflict.
                if let Some(&(o, v)) = a.first() {
                    b.push((o, v));
                }
            }
            let offsets = |s: &[(u16, u8)]| {
                s.iter()
                    .map(|&(o, _)| SHARED + o as u32)
                    .collect::<BTreeSet<_>>()
            };
            let want: BTreeSet<u32> = offsets(&a).intersection(&offsets(&b)).copied().collect();
            let got = write_sets(a, b, seed).unwrap();
            prop_assert_eq!(&got, &want);
            let bucket = if want.is_empty() {
                &disjoint
            } else {
                &overlapping
            };
            bucket.set(bucket.get() + 1);
            Ok(())
        },
    );
    result.map_err(|e| e.to_string())?;
    let (overlapping, disjoint) = (overlapping.get(), disjoint.get());
    check!(
        overlapping >= 100 && disjoint >= 100,
        "unbalanced cases: {overlapping} overlapping, {disjoint} disjoint"
    );
    Ok(())
}

fn wait_semantics() -> Outcome {
    let want = "0 start 1\n1 start 2\n2 done 1\n3 start 3\n4 done 2\n5 done 3\n";
    for executor in [
        Executor::Serial,
        Executor::Parallel { seed: 3 },
        Executor::Parallel { seed: 8 },
    ] {
        let r = run(&RunConfig::new("pmake").executor(executor))?;
        let trace = String::from_utf8_lossy(&r.streams.trace).into_owned();
        check!(trace == want, "trace under {executor:?}:\n{trace}");
    }
    Ok(())
}

fn host_root<F, Fut>(f: F) -> Result<RunOutcome, String>
where
    F: Fn(TaskCtx) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = GuestExit> + Send + 'static,
{
    let mut reg = HostRegistry::new();
    let pc = reg.register("root", f);
    let out = Kernel::new(KernelConfig::default(), reg)
        .run(&Program::Host(pc), &InputLog::new())
        .map_err(|e| e.to_string())?;
    check!(
        out.terminal == Terminal::Exit(0),
        "root ended with {:?}: {}",
        out.terminal,
        out.output.console_text()
    );
    Ok(out)
}

const DATA: u32 = 0x0010_0000;
const P: u64 = PAGE_SIZE as u64;

async fn load_vm(ctx: &TaskCtx, child: u32, src: &str) {
    let code = assemble_at(src, CODE_BASE).unwrap();
    let len = pages(code.len() as u64);
    ctx.map_zero(CODE_BASE, len).unwrap();
    ctx.write(CODE_BASE, &code);
    ctx.map_zero(DATA, P).unwrap();
    ctx.put(SyscallArgs::put(child).copy(CODE_BASE, CODE_BASE, len))
        .await
        .unwrap();
    ctx.put(
        SyscallArgs::put(child)
            .copy(DATA, DATA, P)
            .regs(RegisterFile::new(CODE_BASE)),
    )
    .await
    .unwrap();
}

fn instruction_limits() -> Outcome {
    const SPIN: &str = "loop: JAL r0, loop";
    for limit in [1u64, 17, 1000, 1_000_000] {
        let out = host_root(move |ctx| async move {
            load_vm(&ctx, 1, SPIN).await;
            ctx.put(SyscallArgs::put(1).start().limit(limit))
                .await
                .unwrap();
            let st = ctx.get(SyscallArgs::get(1)).await.unwrap();
            let ok =
                st.reason == Reason::InsnLimit && st.executed == limit && st.budget_left == Some(0);
            ctx.output(0, format!("{ok} {:?} {}", st.reason, st.executed))
                .await
                .unwrap();
            GuestExit::Exit(0)
        })?;
        let text = out.output.console_text();
        check!(text.starts_with("true"), "limit {limit}: {text}");
    }
    const WORK: &str = "LI r2, 3\nLI r4, 0x100000\nloop: MUL r1, r1, r2\nADD r1, r1, r2\nST r1, 0(r4)\nSTB r1, 9(r4)\nJAL r0, loop";
    for (k, m) in [
        (1u64, 1u64),
        (17, 983),
        (500, 500),
        (999, 1),
        (12_345, 67_890),
    ] {
        let out = host_root(move |ctx| async move {
            load_vm(&ctx, 1, WORK).await;
            load_vm(&ctx, 2, WORK).await;
            ctx.put(SyscallArgs::put(1).start().limit(k)).await.unwrap();
            ctx.get(SyscallArgs::get(1)).await.unwrap();
            ctx.put(SyscallArgs::put(1).start().limit(m)).await.unwrap();
            let a = ctx
                .get(SyscallArgs::get(1).want_regs().copy(DATA, 0x20_0000, P))
                .await
                .unwrap();
            ctx.put(SyscallArgs::put(2).start().limit(k + m))
                .await
                .unwrap();
            let b = ctx
                .get(SyscallArgs::get(2).want_regs().copy(DATA, 0x30_0000, P))
                .await
                .unwrap();
            let same = a.regs == b.regs
                && a.reason == b.reason
                && ctx.read_vec(0x20_0000, PAGE_SIZE) == ctx.read_vec(0x30_0000, PAGE_SIZE);
            ctx.output(0, format!("{same}")).await.unwrap();
            GuestExit::Exit(0)
        })?;
        check!(
            out.output.console_text() == "true",
            "split {k}+{m} differs from one run"
        );
    }
    Ok(())
}

/// PageRequests when the root copies a data region into a child on each
/// node of `visits` in turn.
fn page_requests(visits: Vec<u32>) -> Result<usize, String> {
    let mut reg = HostRegistry::new();
    let entry = reg.register("root", move |ctx: TaskCtx| {
        let visits = visits.clone();
        async move {
            ctx.map_zero(DATA, 4 * P).unwrap();
            ctx.write(DATA, &[5; 4 * PAGE_SIZE]);
            for f in visits {
                ctx.put(SyscallArgs::put(child_number(f, 1)).copy(DATA, DATA, 4 * P))
                    .await
                    .unwrap();
            }
            GuestExit::Exit(0)
        }
    });
    let cfg = KernelConfig {
        nodes: 2,
        ..KernelConfig::default()
    };
    let out = Kernel::new(cfg, reg)
        .run(&Program::Host(entry), &InputLog::new())
        .map_err(|e| e.to_string())?;
    Ok(out.messages.count(MessageKind::PageRequest))
}

fn placement() -> Outcome {
    let programs = [
        RunConfig::new("md5tree").arg("word", "cab").arg("len", 3),
        RunConfig::new("matmult").arg("n", 64),
    ];
    for base in programs {
        let mut first: Option<Vec<u8>> = None;
        let mut remote = 0;
        for nodes in [1, 2, 4, 8] {
            let r = run(&base.clone().nodes(nodes))?;
            remote += r.outcome.messages.count(MessageKind::Migrate);
            match &first {
                None => first = Some(r.streams.output),
                Some(f) => check!(
                    *f == r.streams.output,
                    "{} differs with {nodes} nodes",
                    base.program
                ),
            }
        }
        check!(remote > 0, "{} never left its home node", base.program);
    }
    let once = page_requests(vec![1])?;
    let revisit = page_requests(vec![1, 0, 1])?;
    check!(once == 4, "first visit fetched {once} pages, expected 4");
    check!(
        revisit == once,
        "revisit fetched {} more pages",
        revisit - once
    );
    Ok(())
}

fn append_only() -> Outcome {
    for seed in 1..=6u64 {
        let procs = 4 + seed as u32;
        let base = RunConfig::new("writers")
            .arg("procs", procs)
            .arg("seed", seed);
        let plans = misc::writer_plans(seed, procs);
        let mut flat = Vec::new();
        for p in &plans {
            flat.push(p.clone());
            flat.extend(p.child.as_deref().cloned());
        }
        let mut first: Option<Vec<u8>> = None;
        for executor in [
            Executor::Serial,
            Executor::Parallel { seed },
            Executor::Parallel { seed: seed * 31 },
        ] {
            let r = run(&base.clone().executor(executor))?;
            let console = r.streams.console.clone();
            match &first {
                None => first = Some(console.clone()),
                Some(f) => check!(
                    *f == console,
                    "seed {seed}: console differs under {executor:?}"
                ),
            }
            let text = String::from_utf8_lossy(&console).into_owned();
            let tokens: Vec<&str> = text.split_inclusive(';').collect();
            let mut want: Vec<String> = flat
                .iter()
                .flat_map(|p| (0..p.chunks).map(|i| misc::token(&p.name, i)))
                .collect();
            let mut got: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
            want.sort();
            got.sort();
            check!(
                got == want,
                "seed {seed}: tokens lost or duplicated: {text}"
            );
            // Per writer, chunks in order; a writer's run of tokens breaks
            // only after a sync point or its last chunk.
            let parsed: Vec<(&str, u32)> = tokens
                .iter()
                .map(|t| {
                    let (w, c) = t.trim_end_matches(';').rsplit_once('.').unwrap();
                    (w, c.parse().unwrap())
                })
                .collect();
            let by_name: BTreeMap<&str, &misc::WriterPlan> =
                flat.iter().map(|p| (p.name.as_str(), p)).collect();
            let mut next: BTreeMap<&str, u32> = BTreeMap::new();
            for (i, &(w, c)) in parsed.iter().enumerate() {
                let n = next.entry(w).or_insert(0);
                check!(c == *n, "seed {seed}: {w} chunk {c} out of order");
                *n += 1;
                let run_ends = parsed.get(i + 1).is_none_or(|&(nw, _)| nw != w);
                let plan = by_name[w];
                check!(
                    !run_ends || c + 1 == plan.chunks || plan.syncs.contains(&c),
                    "seed {seed}: {w} interrupted after chunk {c}, not a sync point"
                );
            }
        }
    }
    Ok(())
}

fn dsched_traces() -> Outcome {
    let programs = [
        RunConfig {
            quantum: Some(60),
            ..RunConfig::new("contention").arg("items", 10)
        },
        RunConfig {
            quantum: Some(60),
            ..RunConfig::new("signal_order").arg("items", 40)
        },
        RunConfig {
            quantum: Some(200),
            ..RunConfig::new("prodcons").arg("items", 12)
        },
    ];
    for cfg in programs {
        let r = run(&cfg)?;
        let trace = String::from_utf8_lossy(&r.streams.trace).into_owned();
        check!(trace.lines().count() > 10, "{}: short trace", cfg.program);
        check!(
            trace.lines().all(|l| l.split(' ').count() >= 3
                && l.split(' ').take(2).all(|f| f.parse::<u64>().is_ok())),
            "{}: trace lines are not (time, thread, op)",
            cfg.program
        );
        selfcheck_passes(&cfg, 5)?;
    }
    let control = RunConfig {
        test_backdoor: true,
        ..RunConfig::new("nondet")
    };
    let check = harness::selfcheck(&control, 3, &[]).map_err(|e| e.to_string())?;
    check!(
        check.exit_code() == EXIT_NONDET,
        "negative control exited {}",
        check.exit_code()
    );
    Ok(())
}

fn oracles() -> Outcome {
    let n = 64u32;
    let r = run(&RunConfig::new("matmult")
        .arg("n", n)
        .arg("seed", 9)
        .arg("threads", 5))?;
    let (a, b) = matmult::inputs(n, 9);
    let n = n as usize;
    let mut want = vec![0u32; n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                want[i * n + j] =
                    want[i * n + j].wrapping_add(a[i * n + k].wrapping_mul(b[k * n + j]));
            }
        }
    }
    check!(
        words(&fs_file(&r, matmult::OUTPUT)?) == want,
        "matmult differs from the triple loop"
    );

    for kind in ["random", "sorted", "reverse", "constant"] {
        let r = run(&RunConfig::new("qsort")
            .arg("n", 10_000)
            .arg("input", kind)
            .arg("seed", 4))?;
        let mut want = qsort::input(qsort::Input::parse(kind).unwrap(), 10_000, 4);
        want.sort_unstable();
        check!(
            words(&fs_file(&r, qsort::OUTPUT)?) == want,
            "qsort {kind} differs from host sort"
        );
    }

    let target = md5::md5_hex(b"jazz");
    let mut found = Vec::new();
    for threads in [1, 8] {
        let r = run(&RunConfig::new("md5")
            .arg("hash", &target)
            .arg("len", 4)
            .arg("threads", threads))?;
        let text = String::from_utf8_lossy(&r.streams.console).into_owned();
        let word = text
            .trim_end()
            .rsplit(' ')
            .next()
            .unwrap_or_default()
            .to_string();
        check!(
            md5::md5_hex(word.as_bytes()) == target,
            "md5 with {threads} threads found `{word}`"
        );
        found.push(word);
    }
    check!(found[0] == found[1], "thread counts disagree: {found:?}");
    Ok(())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("run-twice bit-identity", bit_identity),
        ("merge oracle equivalence", merge_oracle),
        ("swap scenario", swap),
        ("conflict detection", conflicts),
        ("wait semantics", wait_semantics),
        ("instruction-limit exactness", instruction_limits),
        ("placement transparency", placement),
        ("append-only reconciliation", append_only),
        ("dsched trace determinism", dsched_traces),
        ("benchmark oracles", oracles),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("criterion {:>2} PASS {name} ({secs:.1}s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {e}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

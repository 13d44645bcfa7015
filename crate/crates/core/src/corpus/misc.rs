//! Small demonstration programs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::guestvm::{assemble_at, assemble_symbols, AsmError, RegisterFile};
use crate::kernel::abi::CODE_BASE;
use crate::kernel::{pages, GuestExit, HostRegistry};
use crate::runtime::proc::Proc;
use crate::runtime::threads::ThreadGroup;
use crate::runtime::{DATA_BASE, DEFAULT_FS_SIZE};

pub const HELLO: &str = "
start:
    LI r1, 4
    LI r2, 0
    LI r4, msg
    LI r6, 13
    SYS
    LI r1, 0
    HALT
msg:
    .ascii \"hello, world\\n\"
";

/// The VM hello program, loaded at [`CODE_BASE`].
pub fn hello() -> Result<Vec<u8>, AsmError> {
    assemble_at(HELLO, CODE_BASE)
}

/// Console writer tokens: `<writer>.<chunk>;`.
pub fn token(writer: &str, chunk: u32) -> String {
    format!("{writer}.{chunk};")
}

/// One writer's plan: chunk count and the chunks followed by an fsync.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriterPlan {
    pub name: String,
    pub chunks: u32,
    pub syncs: Vec<u32>,
    pub child: Option<Box<WriterPlan>>,
}

/// Plans for `procs` writers from `seed`. Every third writer also runs a
/// nested writer of its own.
pub fn writer_plans(seed: u64, procs: u32) -> Vec<WriterPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = |name: String, rng: &mut ChaCha8Rng| {
        let chunks = rng.gen_range(1..8);
        let syncs = (0..chunks).filter(|_| rng.gen_bool(0.3)).collect();
        WriterPlan {
            name,
            chunks,
            syncs,
            child: None,
        }
    };
    (0..procs)
        .map(|i| {
            let mut p = plan(format!("w{i}"), &mut rng);
            if i % 3 == 2 {
                p.child = Some(Box::new(plan(format!("w{i}n"), &mut rng)));
            }
            p
        })
        .collect()
}

fn plan_args(p: &WriterPlan) -> Vec<String> {
    let mut v = vec![
        format!("name={}", p.name),
        format!("chunks={}", p.chunks),
        format!(
            "syncs={}",
            p.syncs
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(":")
        ),
    ];
    if let Some(c) = &p.child {
        v.push(format!(
            "child={}/{}/{}",
            c.name,
            c.chunks,
            c.syncs
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(":")
        ));
    }
    v
}

fn parse_syncs(s: &str) -> Vec<u32> {
    s.split(':').filter_map(|x| x.parse().ok()).collect()
}

/// Args: `procs` (default 6), `seed`. Each writer emits its tokens in
/// order, calling fsync after the chunks its plan names.
pub fn register_writers(reg: &mut HostRegistry) -> u32 {
    let writer = reg.register("writers.w", |ctx| async move {
        let Ok(mut p) = Proc::attach(ctx) else {
            return GuestExit::Exit(1);
        };
        let name = p.param("name").unwrap_or_default().to_string();
        let chunks: u32 = p.param("chunks").and_then(|v| v.parse().ok()).unwrap_or(0);
        let syncs = parse_syncs(p.param("syncs").unwrap_or_default());
        let child = p.param("child").map(str::to_string);
        let mut pid = None;
        if let Some(c) = child {
            let parts: Vec<&str> = c.split('/').collect();
            if let [cname, cchunks, csyncs] = parts[..] {
                let args = [
                    format!("name={cname}"),
                    format!("chunks={cchunks}"),
                    format!("syncs={csyncs}"),
                ];
                let argv: Vec<&str> = args.iter().map(String::as_str).collect();
                // A writer's own entry is the pc it was started at.
                let entry = p.ctx().regs().pc;
                pid = p.fork(entry, &argv).await.ok();
            }
        }
        for i in 0..chunks {
            p.console_write(token(&name, i).as_bytes());
            if syncs.contains(&i) && p.fsync().await.is_err() {
                return GuestExit::Exit(1);
            }
        }
        if let Some(pid) = pid {
            let _ = p.waitpid(pid).await;
        }
        p.exit(0).await.unwrap_or(GuestExit::Exit(1))
    });
    reg.register("writers", move |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let procs: u32 = p
            .param("procs")
            .and_then(|v| v.parse().ok())
            .unwrap_or(6)
            .min(64);
        let seed: u64 = p.param("seed").and_then(|v| v.parse().ok()).unwrap_or(1);
        for plan in writer_plans(seed, procs) {
            let args = plan_args(&plan);
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            if p.fork(writer, &argv).await.is_err() {
                return GuestExit::Exit(1);
            }
        }
        while p.wait().await.is_ok() {}
        p.exit(0).await.unwrap_or(GuestExit::Exit(1))
    })
}

const SWAP: &str = "
.equ X, 0x10000000
left:
    LI r7, X
    LD r3, 4(r7)
    ST r3, 0(r7)
    LI r1, 0
    HALT
right:
    LI r7, X
    LD r3, 0(r7)
    ST r3, 4(r7)
    LI r1, 0
    HALT
";

/// Two VM threads run `x = y` and `y = x` without locks. Args: `x`, `y`.
pub fn register_swap(reg: &mut HostRegistry) -> u32 {
    reg.register("swap", |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let x: u32 = p.param("x").and_then(|v| v.parse().ok()).unwrap_or(1);
        let y: u32 = p.param("y").and_then(|v| v.parse().ok()).unwrap_or(2);
        let ctx = p.ctx().clone();
        let run = async {
            let img = assemble_symbols(SWAP, CODE_BASE).map_err(|e| e.to_string())?;
            ctx.map_zero(CODE_BASE, pages(img.code.len() as u64))
                .map_err(|e| e.to_string())?;
            ctx.write(CODE_BASE, &img.code);
            ctx.map_zero(DATA_BASE, 4096).map_err(|e| e.to_string())?;
            ctx.write_u32(DATA_BASE, x);
            ctx.write_u32(DATA_BASE + 4, y);
            let mut g = ThreadGroup::new(DATA_BASE, 4096);
            for (tid, label) in ["left", "right"].into_iter().enumerate() {
                let pc = img.label(label).ok_or("missing label")?;
                g.fork(&ctx, tid as u32, RegisterFile::new(pc))
                    .await
                    .map_err(|e| e.to_string())?;
            }
            for tid in 0..2 {
                g.join(&ctx, tid).await.map_err(|e| e.to_string())?;
            }
            Ok::<_, String>((ctx.read_u32(DATA_BASE), ctx.read_u32(DATA_BASE + 4)))
        };
        let code = match run.await {
            Ok((nx, ny)) => {
                p.console_write(format!("x={nx} y={ny}\n").as_bytes());
                0
            }
            Err(e) => {
                p.console_write(format!("swap: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

static BACKDOOR: AtomicU64 = AtomicU64::new(0);

/// Negative control for self-checking: prints a counter kept outside any
/// space, so every run in one process prints something different. Only
/// reachable through the harness's test backdoor.
pub fn register_nondet(reg: &mut HostRegistry) -> u32 {
    reg.register("nondet", |ctx| async move {
        let n = BACKDOOR.fetch_add(1, Ordering::SeqCst);
        let _ = ctx.output(0, format!("run {n}\n")).await;
        GuestExit::Exit(0)
    })
}

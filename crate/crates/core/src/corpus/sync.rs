//! Lock-based VM thread programs run under the deterministic scheduler.

use crate::kernel::iolog::DEV_TRACE;
use crate::kernel::{GuestExit, HostRegistry, TaskCtx};
use crate::runtime::dsched::{DetProgram, DetReport, DetScheduler, DschedError, TABLE_BYTES};
use crate::runtime::proc::Proc;
use crate::runtime::{DATA_BASE, DEFAULT_FS_SIZE};

pub const SHARED: u32 = DATA_BASE;
pub const SHARED_LEN: u64 = 0x1_0000;
/// Program data after the mutex table.
pub const DATA: u32 = SHARED + TABLE_BYTES;

const COMMON: &str = "
.equ DATA, 0x10000800
.equ COUNT, 0x10000800
";

/// Two producers and one consumer over a 4-slot ring. Mutex 0 guards the
/// ring; condition 1 is "not empty", 2 is "not full". The consumer logs
/// items at `DATA + 0x100`.
pub const PRODCONS: &str = "
producer:
    LI r12, 0
prod_loop:
    BEQ r12, r10, prod_done
    LI r5, 0
    JAL r11, mutex_lock
prod_full:
    LI r7, COUNT
    LD r8, 0(r7)
    LI r7, 4
    BNE r8, r7, prod_put
    LI r5, 2
    LI r6, 0
    JAL r11, cond_wait
    JAL r0, prod_full
prod_put:
    LI r7, DATA
    LD r3, 8(r7)
    LI r8, 4
    MUL r8, r3, r8
    ADD r8, r8, r7
    ADD r4, r9, r12
    ST r4, 16(r8)
    LI r8, 1
    ADD r3, r3, r8
    LI r8, 3
    AND r3, r3, r8
    ST r3, 8(r7)
    LD r4, 0(r7)
    LI r8, 1
    ADD r4, r4, r8
    ST r4, 0(r7)
    LI r5, 1
    JAL r11, cond_signal
    LI r5, 0
    JAL r11, mutex_unlock
    LI r8, 1
    ADD r12, r12, r8
    JAL r0, prod_loop
prod_done:
    LI r1, 0
    HALT

consumer:
    LI r12, 0
cons_loop:
    BEQ r12, r10, cons_done
    LI r5, 0
    JAL r11, mutex_lock
cons_empty:
    LI r7, COUNT
    LD r8, 0(r7)
    BNE r8, r0, cons_take
    LI r5, 1
    LI r6, 0
    JAL r11, cond_wait
    JAL r0, cons_empty
cons_take:
    LI r7, DATA
    LD r3, 4(r7)
    LI r8, 4
    MUL r8, r3, r8
    ADD r8, r8, r7
    LD r4, 16(r8)
    LI r8, 1
    ADD r3, r3, r8
    LI r8, 3
    AND r3, r3, r8
    ST r3, 4(r7)
    LD r8, 0(r7)
    LI r3, 1
    SUB r8, r8, r3
    ST r8, 0(r7)
    LI r8, 4
    MUL r8, r12, r8
    ADD r8, r8, r7
    ST r4, 256(r8)
    LI r5, 2
    JAL r11, cond_signal
    LI r5, 0
    JAL r11, mutex_unlock
    LI r8, 1
    ADD r12, r12, r8
    JAL r0, cons_loop
cons_done:
    LI r1, 0
    HALT
";

/// Each thread adds 1 to the counter at `COUNT` r10 times under mutex 0,
/// spinning r9 iterations inside the critical section and after it.
pub const CONTENTION: &str = "
worker:
    LI r12, 0
work_loop:
    BEQ r12, r10, work_done
    LI r5, 0
    JAL r11, mutex_lock
    LI r7, COUNT
    LD r4, 0(r7)
    MOV r3, r9
    LI r8, 1
spin_in:
    BEQ r3, r0, spin_in_done
    SUB r3, r3, r8
    JAL r0, spin_in
spin_in_done:
    ADD r4, r4, r8
    LI r7, COUNT
    ST r4, 0(r7)
    LI r5, 0
    JAL r11, mutex_unlock
    MOV r3, r9
    LI r8, 1
spin_out:
    BEQ r3, r0, spin_out_done
    SUB r3, r3, r8
    JAL r0, spin_out
spin_out_done:
    ADD r12, r12, r8
    JAL r0, work_loop
work_done:
    LI r1, 0
    HALT
";

/// Thread 0 collects two finished threads with join_any and stores their
/// ids at `DATA` and `DATA + 4`; the others spin r9 iterations.
pub const JOIN_ANY: &str = "
collector:
    JAL r11, join_any
    LI r7, DATA
    ST r1, 0(r7)
    JAL r11, join_any
    LI r7, DATA
    ST r1, 4(r7)
    LI r1, 0
    HALT

spinner:
    LI r8, 1
spinner_loop:
    BEQ r9, r0, spinner_done
    SUB r9, r9, r8
    JAL r0, spinner_loop
spinner_done:
    LI r1, 0
    HALT
";

/// Waiters spin r9 iterations, then wait on condition 3 and append their
/// id to the log at `DATA + 0x100` once woken. The signaller spins r9,
/// signals once, spins again and broadcasts.
pub const SIGNAL_ORDER: &str = "
waiter:
    LI r8, 1
waiter_spin:
    BEQ r9, r0, waiter_wait
    SUB r9, r9, r8
    JAL r0, waiter_spin
waiter_wait:
    LI r5, 0
    JAL r11, mutex_lock
    LI r5, 3
    LI r6, 0
    JAL r11, cond_wait
    LI r7, DATA
    LD r3, 0(r7)
    LI r8, 4
    MUL r8, r3, r8
    ADD r8, r8, r7
    ST r14, 256(r8)
    LI r8, 1
    ADD r3, r3, r8
    ST r3, 0(r7)
    LI r5, 0
    JAL r11, mutex_unlock
    LI r1, 0
    HALT

signaller:
    MOV r10, r9
    LI r8, 1
sig_spin:
    BEQ r9, r0, sig_one
    SUB r9, r9, r8
    JAL r0, sig_spin
sig_one:
    LI r5, 0
    JAL r11, mutex_lock
    LI r5, 3
    JAL r11, cond_signal
    LI r5, 0
    JAL r11, mutex_unlock
    LI r8, 1
sig_spin2:
    BEQ r10, r0, sig_all
    SUB r10, r10, r8
    JAL r0, sig_spin2
sig_all:
    LI r5, 0
    JAL r11, mutex_lock
    LI r5, 3
    JAL r11, cond_broadcast
    LI r5, 0
    JAL r11, mutex_unlock
    LI r1, 0
    HALT
";

/// Repeated lock/unlock of mutex 0, r10 times.
pub const OWNER_LOOP: &str = "
locker:
    LI r12, 0
lock_loop:
    BEQ r12, r10, lock_done
    LI r5, 0
    JAL r11, mutex_lock
    LI r5, 0
    JAL r11, mutex_unlock
    LI r8, 1
    ADD r12, r12, r8
    JAL r0, lock_loop
lock_done:
    LI r1, 0
    HALT
idle:
    LI r1, 0
    HALT
";

/// Thread 0 counts the word at `DATA` up to r10; thread 1 sums what it
/// reads there over r10 iterations into `DATA + 4`. No locks: the sum
/// depends on where quanta end.
pub const RACY: &str = "
counter:
    LI r7, DATA
    LI r8, 1
    LI r3, 0
count_loop:
    BEQ r3, r10, count_done
    ADD r3, r3, r8
    ST r3, 0(r7)
    JAL r0, count_loop
count_done:
    LI r1, 0
    HALT

reader:
    LI r7, DATA
    LI r8, 1
    LI r3, 0
    LI r4, 0
read_loop:
    BEQ r3, r10, read_done
    LD r12, 0(r7)
    ADD r4, r4, r12
    ADD r3, r3, r8
    JAL r0, read_loop
read_done:
    ST r4, 4(r7)
    LI r1, 0
    HALT
";

/// The scheduled programs, by name.
pub const PROGRAMS: &[&str] = &[
    "prodcons",
    "contention",
    "join_any",
    "signal_order",
    "owner_loop",
    "racy",
];

/// Outcome of a scheduled program: the report and a one-line summary of
/// shared memory afterwards.
#[derive(Debug, Clone)]
pub struct SyncRun {
    pub report: DetReport,
    pub summary: String,
}

fn words(ctx: &TaskCtx, at: u32, n: u32) -> Vec<u32> {
    (0..n).map(|i| ctx.read_u32(at + 4 * i)).collect()
}

fn join(ws: &[u32]) -> String {
    ws.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Runs program `name` with `items` as its size parameter. The caller's
/// shared region must be mapped.
pub async fn run_program(
    ctx: &TaskCtx,
    name: &str,
    items: u32,
    quantum: u64,
) -> Result<SyncRun, DschedError> {
    let src = match name {
        "prodcons" => PRODCONS,
        "contention" => CONTENTION,
        "join_any" => JOIN_ANY,
        "signal_order" => SIGNAL_ORDER,
        "owner_loop" => OWNER_LOOP,
        "racy" => RACY,
        other => return Err(DschedError::NoLabel(other.to_string())),
    };
    let program = DetProgram::new(&format!("{COMMON}{src}"), SHARED)?;
    let mut s = DetScheduler::new(program, SHARED, SHARED_LEN)?.quantum(quantum);
    match name {
        "prodcons" => {
            s.spawn("producer", &[(9, 100), (10, items)])?;
            s.spawn("producer", &[(9, 200), (10, items)])?;
            s.spawn("consumer", &[(10, 2 * items)])?;
        }
        "contention" => {
            for _ in 0..4 {
                s.spawn("worker", &[(9, 20), (10, items)])?;
            }
        }
        "join_any" => {
            s.spawn("collector", &[])?;
            s.spawn("spinner", &[(9, 3 * items)])?;
            s.spawn("spinner", &[(9, items)])?;
        }
        "signal_order" => {
            s.spawn("signaller", &[(9, 4 * items)])?;
            for i in 1..=3 {
                s.spawn("waiter", &[(9, i * items)])?;
            }
        }
        "owner_loop" => {
            s.spawn("idle", &[])?;
            s.spawn("locker", &[(10, items)])?;
        }
        _ => {
            s.spawn("counter", &[(10, items)])?;
            s.spawn("reader", &[(10, items)])?;
        }
    }
    let report = s.run(ctx).await?;
    let summary = match name {
        "prodcons" => join(&words(ctx, DATA + 0x100, 2 * items)),
        "contention" | "racy" => join(&words(ctx, DATA, 2)),
        "join_any" => join(&words(ctx, DATA, 2)),
        "signal_order" => join(&words(ctx, DATA + 0x100, 3)),
        _ => join(&words(ctx, SHARED, 2)),
    };
    Ok(SyncRun { report, summary })
}

/// Root task: runs `program=NAME` (`items`, `quantum` optional), prints
/// the summary and emits the sync trace.
pub fn register(reg: &mut HostRegistry) -> u32 {
    reg.register("dsched", |ctx| async move {
        let mut p = match Proc::root(ctx, DEFAULT_FS_SIZE).await {
            Ok(p) => p,
            Err(_) => return GuestExit::Exit(1),
        };
        let name = p.param("program").unwrap_or("prodcons").to_string();
        let items = p.param("items").and_then(|v| v.parse().ok()).unwrap_or(16);
        let quantum = p
            .param("quantum")
            .and_then(|v| v.parse().ok())
            .unwrap_or(1000);
        let ctx = p.ctx().clone();
        let code = match async {
            ctx.map_zero(SHARED, SHARED_LEN)?;
            run_program(&ctx, &name, items, quantum).await
        }
        .await
        {
            Ok(run) => {
                let _ = ctx.output(DEV_TRACE, run.report.trace_text()).await;
                p.console_write(
                    format!(
                        "{name}: {}\nrounds {} requests {}\n",
                        run.summary, run.report.rounds, run.report.requests
                    )
                    .as_bytes(),
                );
                if run.report.exits.values().all(|&c| c == 0) {
                    0
                } else {
                    1
                }
            }
            Err(e) => {
                p.console_write(format!("{name}: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

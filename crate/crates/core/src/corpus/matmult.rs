//! Integer matrix multiply on VM threads, one band of rows per thread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::guestvm::{assemble_symbols, RegisterFile};
use crate::kernel::abi::CODE_BASE;
use crate::kernel::{pages, GuestExit, HostRegistry};
use crate::runtime::proc::Proc;
use crate::runtime::threads::{ThreadError, ThreadGroup};
use crate::runtime::{DATA_BASE, DEFAULT_FS_SIZE};

pub const MAX_N: u32 = 128;
pub const OUTPUT: &str = "/out/matmult";

/// Row band kernel: rows `[r14, r10)` of `C = A * B`, `n = r9`, all
/// arithmetic wrapping.
fn kernel_source(a: u32, b: u32, c: u32) -> String {
    format!(
        "
.equ ABASE, {a:#x}
.equ BBASE, {b:#x}
.equ CBASE, {c:#x}
band:
    MOV r1, r14
row:
    BEQ r1, r10, band_done
    LI r2, 0
col:
    BEQ r2, r9, row_next
    LI r3, 0
    LI r4, 0
inner:
    BEQ r3, r9, store
    MUL r5, r1, r9
    ADD r5, r5, r3
    LI r6, 4
    MUL r5, r5, r6
    LI r6, ABASE
    ADD r5, r5, r6
    LD r5, 0(r5)
    MUL r6, r3, r9
    ADD r6, r6, r2
    LI r7, 4
    MUL r6, r6, r7
    LI r7, BBASE
    ADD r6, r6, r7
    LD r6, 0(r6)
    MUL r5, r5, r6
    ADD r4, r4, r5
    LI r5, 1
    ADD r3, r3, r5
    JAL r0, inner
store:
    MUL r5, r1, r9
    ADD r5, r5, r2
    LI r6, 4
    MUL r5, r5, r6
    LI r6, CBASE
    ADD r5, r5, r6
    ST r4, 0(r5)
    LI r5, 1
    ADD r2, r2, r5
    JAL r0, col
row_next:
    LI r5, 1
    ADD r1, r1, r5
    JAL r0, row
band_done:
    LI r1, 0
    HALT
"
    )
}

/// The input matrices for `(n, seed)`, row-major.
pub fn inputs(n: u32, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (n * n) as usize;
    let a = (0..len).map(|_| rng.gen_range(0..1000)).collect();
    let b = (0..len).map(|_| rng.gen_range(0..1000)).collect();
    (a, b)
}

pub fn to_bytes(m: &[u32]) -> Vec<u8> {
    m.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Args: `n` (default 64), `seed`, `threads` (default 4). Writes C to
/// [`OUTPUT`] and prints its SHA-256.
pub fn register(reg: &mut HostRegistry) -> u32 {
    reg.register("matmult", |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let code = match run(&mut p).await {
            Ok(()) => 0,
            Err(e) => {
                p.console_write(format!("matmult: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

async fn run(p: &mut Proc) -> Result<(), String> {
    let n: u32 = p
        .param("n")
        .and_then(|v| v.parse().ok())
        .unwrap_or(64)
        .clamp(1, MAX_N);
    let seed: u64 = p.param("seed").and_then(|v| v.parse().ok()).unwrap_or(1);
    let threads: u32 = p
        .param("threads")
        .and_then(|v| v.parse().ok())
        .unwrap_or(4)
        .clamp(1, n);
    let bytes = n * n * 4;
    let (a_at, b_at, c_at) = (DATA_BASE, DATA_BASE + bytes, DATA_BASE + 2 * bytes);
    let img =
        assemble_symbols(&kernel_source(a_at, b_at, c_at), CODE_BASE).map_err(|e| e.to_string())?;
    let entry = img.label("band").ok_or("no entry")?;
    let ctx = p.ctx().clone();
    let err = |e: crate::kernel::SysError| e.to_string();
    ctx.map_zero(CODE_BASE, pages(img.code.len() as u64))
        .map_err(err)?;
    ctx.write(CODE_BASE, &img.code);
    let shared = pages(3 * bytes as u64);
    ctx.map_zero(DATA_BASE, shared).map_err(err)?;
    let (a, b) = inputs(n, seed);
    ctx.write(a_at, &to_bytes(&a));
    ctx.write(b_at, &to_bytes(&b));
    let nodes = ctx.node_count().await.map_err(err)?;
    let mut g = ThreadGroup::new(DATA_BASE, shared).spread(nodes);
    let bands = async {
        for t in 0..threads {
            let (lo, hi) = (n * t / threads, n * (t + 1) / threads);
            g.fork(
                &ctx,
                t,
                RegisterFile::new(entry)
                    .with(14, lo)
                    .with(10, hi)
                    .with(9, n),
            )
            .await?;
        }
        for t in 0..threads {
            let st = g.join(&ctx, t).await?;
            if st.code != 0 {
                return Err(ThreadError::Stopped {
                    tid: t,
                    reason: st.reason.name(),
                    code: st.code,
                });
            }
        }
        Ok(())
    };
    bands.await.map_err(|e: ThreadError| e.to_string())?;
    let c = ctx.read_vec(c_at, bytes as usize);
    let digest = hex::encode(Sha256::digest(&c));
    p.write_file(OUTPUT, &c).map_err(|e| e.to_string())?;
    p.console_write(format!("matmult n={n} sha256={digest}\n").as_bytes());
    Ok(())
}

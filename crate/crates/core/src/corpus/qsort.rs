//! Recursive fork/join quicksort over a shared array of u32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::guestvm::RegisterFile;
use crate::kernel::{pages, GuestExit, HostRegistry, TaskCtx};
use crate::runtime::proc::Proc;
use crate::runtime::threads::{ThreadError, ThreadGroup};
use crate::runtime::{DATA_BASE, DEFAULT_FS_SIZE};

pub const MAX_N: u32 = 1 << 20;
pub const OUTPUT: &str = "/out/qsort";
const LEAF: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    Random,
    Sorted,
    Reverse,
    Constant,
}

impl Input {
    pub fn parse(s: &str) -> Option<Input> {
        match s {
            "random" => Some(Input::Random),
            "sorted" => Some(Input::Sorted),
            "reverse" => Some(Input::Reverse),
            "constant" => Some(Input::Constant),
            _ => None,
        }
    }
}

pub fn input(kind: Input, n: u32, seed: u64) -> Vec<u32> {
    match kind {
        Input::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(0..n.max(1) * 4)).collect()
        }
        Input::Sorted => (0..n).collect(),
        Input::Reverse => (0..n).rev().collect(),
        Input::Constant => vec![7; n as usize],
    }
}

fn median3(v: &[u32]) -> u32 {
    let (a, b, c) = (v[0], v[v.len() / 2], v[v.len() - 1]);
    a.max(b.min(c)).min(b.max(c))
}

/// Three-way partition around a median-of-three pivot. Returns `(lt, gt)`:
/// `v[..lt] < p`, `v[lt..gt] == p`, `v[gt..] > p`.
pub fn partition(v: &mut [u32]) -> (usize, usize) {
    let p = median3(v);
    let (mut lt, mut i, mut gt) = (0, 0, v.len());
    while i < gt {
        if v[i] < p {
            v.swap(lt, i);
            lt += 1;
            i += 1;
        } else if v[i] > p {
            gt -= 1;
            v.swap(i, gt);
        } else {
            i += 1;
        }
    }
    (lt, gt)
}

/// Sequential quicksort with insertion sort below [`LEAF`] elements.
pub fn quicksort(v: &mut [u32]) {
    let mut stack = vec![(0, v.len())];
    while let Some((lo, hi)) = stack.pop() {
        if hi - lo <= LEAF {
            for i in lo + 1..hi {
                let mut j = i;
                while j > lo && v[j - 1] > v[j] {
                    v.swap(j - 1, j);
                    j -= 1;
                }
            }
            continue;
        }
        let (lt, gt) = partition(&mut v[lo..hi]);
        stack.push((lo, lo + lt));
        stack.push((lo + gt, hi));
    }
}

fn read(ctx: &TaskCtx, lo: u32, hi: u32) -> Vec<u32> {
    ctx.read_vec(DATA_BASE + lo * 4, ((hi - lo) * 4) as usize)
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn write(ctx: &TaskCtx, lo: u32, v: &[u32]) {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    ctx.write(DATA_BASE + lo * 4, &bytes);
}

/// Thread body: r1 = lo, r2 = hi, r3 = depth, r4 = shared length, r5 = own
/// entry pc.
async fn sort_thread(ctx: TaskCtx) -> GuestExit {
    let (lo, hi, depth, len, entry) = (ctx.arg(1), ctx.arg(2), ctx.arg(3), ctx.arg(4), ctx.arg(5));
    let mut v = read(&ctx, lo, hi);
    if depth == 0 || v.len() <= 4 * LEAF {
        quicksort(&mut v);
        write(&ctx, lo, &v);
        return GuestExit::Exit(0);
    }
    let (lt, gt) = partition(&mut v);
    write(&ctx, lo, &v);
    let halves = [(lo, lo + lt as u32), (lo + gt as u32, hi)];
    match fork_join(&ctx, &halves, depth - 1, len, entry).await {
        Ok(()) => GuestExit::Exit(0),
        Err(_) => GuestExit::Exit(1),
    }
}

async fn fork_join(
    ctx: &TaskCtx,
    ranges: &[(u32, u32)],
    depth: u32,
    len: u32,
    entry: u32,
) -> Result<(), ThreadError> {
    let mut g = ThreadGroup::new(DATA_BASE, len as u64);
    for (tid, &(lo, hi)) in ranges.iter().enumerate() {
        let regs = RegisterFile::new(entry)
            .with(1, lo)
            .with(2, hi)
            .with(3, depth)
            .with(4, len)
            .with(5, entry);
        g.fork(ctx, tid as u32, regs).await?;
    }
    for tid in 0..ranges.len() as u32 {
        let st = g.join(ctx, tid).await?;
        if st.code != 0 {
            return Err(ThreadError::Stopped {
                tid,
                reason: st.reason.name(),
                code: st.code,
            });
        }
    }
    Ok(())
}

/// Args: `n` (default 10000), `input` (random, sorted, reverse, constant),
/// `seed`, `depth` (fork levels, default 3). Writes the sorted array to
/// [`OUTPUT`] and prints its SHA-256.
pub fn register(reg: &mut HostRegistry) -> u32 {
    let entry = reg.register("qsort.thread", sort_thread);
    reg.register("qsort", move |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let code = match run(&mut p, entry).await {
            Ok(()) => 0,
            Err(e) => {
                p.console_write(format!("qsort: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

async fn run(p: &mut Proc, entry: u32) -> Result<(), String> {
    let n: u32 = p
        .param("n")
        .and_then(|v| v.parse().ok())
        .unwrap_or(10_000)
        .clamp(1, MAX_N);
    let seed: u64 = p.param("seed").and_then(|v| v.parse().ok()).unwrap_or(1);
    let depth: u32 = p
        .param("depth")
        .and_then(|v| v.parse().ok())
        .unwrap_or(3)
        .min(8);
    let kind_name = p.param("input").unwrap_or("random").to_string();
    let kind = Input::parse(&kind_name).ok_or_else(|| format!("unknown input `{kind_name}`"))?;
    let ctx = p.ctx().clone();
    let len = pages(n as u64 * 4) as u32;
    ctx.map_zero(DATA_BASE, len as u64)
        .map_err(|e| e.to_string())?;
    write(&ctx, 0, &input(kind, n, seed));
    fork_join(&ctx, &[(0, n)], depth, len, entry)
        .await
        .map_err(|e| e.to_string())?;
    let sorted = ctx.read_vec(DATA_BASE, n as usize * 4);
    let digest = hex::encode(Sha256::digest(&sorted));
    p.write_file(OUTPUT, &sorted).map_err(|e| e.to_string())?;
    p.console_write(format!("qsort n={n} input={kind_name} sha256={digest}\n").as_bytes());
    Ok(())
}

//! MD5 brute-force search over short lowercase strings.
//!
//! The search space for length `L` is every string of `L` letters from the
//! alphabet, indexed in lexicographic order. Each length's index range is
//! cut into one contiguous chunk per worker; a worker records the first
//! match in its chunk and the master keeps the shortest, lowest-indexed
//! hit. The answer is therefore the same for any worker count.

use std::sync::Arc;

use crate::kernel::{GuestExit, HostRegistry, TaskCtx};
use crate::runtime::proc::Proc;
use crate::runtime::threads::{ThreadError, ThreadGroup};
use crate::runtime::DATA_BASE;

pub const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
pub const MAX_LEN: u32 = 4;

const S: [u32; 64] = [
    7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 5, 9, 14, 20, 5, 9, 14, 20, 5, 9,
    14, 20, 5, 9, 14, 20, 4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, 6, 10, 15,
    21, 6, 10, 15, 21, 6, 10, 15, 21, 6, 10, 15, 21,
];

const K: [u32; 64] = [
    0xd76aa478, 0xe8c7b756, 0x242070db, 0xc1bdceee, 0xf57c0faf, 0x4787c62a, 0xa8304613, 0xfd469501,
    0x698098d8, 0x8b44f7af, 0xffff5bb1, 0x895cd7be, 0x6b901122, 0xfd987193, 0xa679438e, 0x49b40821,
    0xf61e2562, 0xc040b340, 0x265e5a51, 0xe9b6c7aa, 0xd62f105d, 0x02441453, 0xd8a1e681, 0xe7d3fbc8,
    0x21e1cde6, 0xc33707d6, 0xf4d50d87, 0x455a14ed, 0xa9e3e905, 0xfcefa3f8, 0x676f02d9, 0x8d2a4c8a,
    0xfffa3942, 0x8771f681, 0x6d9d6122, 0xfde5380c, 0xa4beea44, 0x4bdecfa9, 0xf6bb4b60, 0xbebfbc70,
    0x289b7ec6, 0xeaa127fa, 0xd4ef3085, 0x04881d05, 0xd9d4d039, 0xe6db99e5, 0x1fa27cf8, 0xc4ac5665,
    0xf4292244, 0x432aff97, 0xab9423a7, 0xfc93a039, 0x655b59c3, 0x8f0ccc92, 0xffeff47d, 0x85845dd1,
    0x6fa87e4f, 0xfe2ce6e0, 0xa3014314, 0x4e0811a1, 0xf7537e82, 0xbd3af235, 0x2ad7d2bb, 0xeb86d391,
];

/// MD5 of `data`.
pub fn md5(data: &[u8]) -> [u8; 16] {
    let mut h: [u32; 4] = [0x67452301, 0xefcdab89, 0x98badcfe, 0x10325476];
    let mut msg = data.to_vec();
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&((data.len() as u64).wrapping_mul(8)).to_le_bytes());
    for block in msg.chunks_exact(64) {
        let m: Vec<u32> = block
            .chunks_exact(4)
            .map(|w| u32::from_le_bytes(w.try_into().unwrap()))
            .collect();
        let [mut a, mut b, mut c, mut d] = h;
        for i in 0..64 {
            let (f, g) = match i / 16 {
                0 => ((b & c) | (!b & d), i),
                1 => ((d & b) | (!d & c), (5 * i + 1) % 16),
                2 => (b ^ c ^ d, (3 * i + 5) % 16),
                _ => (c ^ (b | !d), (7 * i) % 16),
            };
            let f = f.wrapping_add(a).wrapping_add(K[i]).wrapping_add(m[g]);
            a = d;
            d = c;
            c = b;
            b = b.wrapping_add(f.rotate_left(S[i]));
        }
        for (x, y) in h.iter_mut().zip([a, b, c, d]) {
            *x = x.wrapping_add(y);
        }
    }
    let mut out = [0u8; 16];
    for (i, w) in h.iter().enumerate() {
        out[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn md5_hex(data: &[u8]) -> String {
    hex::encode(md5(data))
}

/// Number of strings of length `len`.
pub fn space(len: u32) -> u64 {
    (ALPHABET.len() as u64).pow(len)
}

/// The `index`th string of length `len`.
pub fn candidate(len: u32, mut index: u64) -> Vec<u8> {
    let n = ALPHABET.len() as u64;
    let mut out = vec![0u8; len as usize];
    for slot in out.iter_mut().rev() {
        *slot = ALPHABET[(index % n) as usize];
        index /= n;
    }
    out
}

/// Chunk `worker` of `workers` over `0..total`.
pub fn chunk(total: u64, worker: u32, workers: u32) -> (u64, u64) {
    let (w, n) = (worker as u64, workers as u64);
    (total * w / n, total * (w + 1) / n)
}

/// First index in `[lo, hi)` whose string of length `len` hashes to
/// `target`.
pub fn scan(target: &[u8; 16], len: u32, lo: u64, hi: u64) -> Option<u64> {
    (lo..hi).find(|&i| md5(&candidate(len, i)) == *target)
}

/// Sequential reference search: shortest, then lexicographically first.
pub fn search(target: &[u8; 16], max_len: u32) -> Option<Vec<u8>> {
    (1..=max_len).find_map(|len| scan(target, len, 0, space(len)).map(|i| candidate(len, i)))
}

const SHARED: u32 = DATA_BASE;
const SHARED_LEN: u64 = 0x1000;
/// Result slot per worker: found flag, length, index (u64).
const SLOT: u32 = 16;

fn slot_at(worker: u32) -> u32 {
    SHARED + worker * SLOT
}

/// Parameters passed to each worker through registers.
fn worker_regs(
    entry: u32,
    worker: u32,
    workers: u32,
    max_len: u32,
) -> crate::guestvm::RegisterFile {
    crate::guestvm::RegisterFile::new(entry)
        .with(1, worker)
        .with(2, workers)
        .with(3, max_len)
}

fn read_target(ctx: &TaskCtx) -> [u8; 16] {
    ctx.read_vec(SHARED + 0x800, 16).try_into().unwrap()
}

/// Worker body: scans its chunk of every length, stopping at the first
/// length with a hit in its chunk.
async fn worker(ctx: TaskCtx) -> GuestExit {
    let (w, n, max_len) = (ctx.arg(1), ctx.arg(2), ctx.arg(3));
    let target = read_target(&ctx);
    for len in 1..=max_len {
        let (lo, hi) = chunk(space(len), w, n);
        if let Some(i) = scan(&target, len, lo, hi) {
            let at = slot_at(w);
            ctx.write_u32(at, 1);
            ctx.write_u32(at + 4, len);
            ctx.write_u64(at + 8, i);
            break;
        }
    }
    GuestExit::Exit(0)
}

/// Best hit over worker slots `0..n`.
fn collect(ctx: &TaskCtx, n: u32) -> Option<(u32, u64)> {
    (0..n)
        .filter(|&w| ctx.read_u32(slot_at(w)) == 1)
        .map(|w| (ctx.read_u32(slot_at(w) + 4), ctx.read_u64(slot_at(w) + 8)))
        .min()
}

fn parse_target(p: &Proc) -> Result<[u8; 16], String> {
    if let Some(h) = p.param("hash") {
        let v = hex::decode(h).map_err(|e| format!("bad hash: {e}"))?;
        return v
            .try_into()
            .map_err(|_| "hash must be 16 bytes".to_string());
    }
    Ok(md5(p.param("word").unwrap_or("dtm").as_bytes()))
}

fn report(p: &mut Proc, target: &[u8; 16], hit: Option<(u32, u64)>) -> u32 {
    let line = match hit {
        Some((len, i)) => {
            let s = candidate(len, i);
            format!(
                "md5 {} found {}\n",
                hex::encode(target),
                String::from_utf8_lossy(&s)
            )
        }
        None => format!("md5 {} not found\n", hex::encode(target)),
    };
    p.console_write(line.as_bytes());
    if hit.is_some() {
        0
    } else {
        1
    }
}

fn param_u32(p: &Proc, key: &str, default: u32) -> u32 {
    p.param(key).and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Flat search: `threads` workers in one group. Args: `hash` (hex) or
/// `word`, `len`, `threads`.
pub fn register_search(reg: &mut HostRegistry) -> u32 {
    let worker = reg.register("md5.worker", worker);
    reg.register("md5.search", move |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, crate::runtime::DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let code = match search_root(&mut p, worker).await {
            Ok(code) => code,
            Err(e) => {
                p.console_write(format!("md5: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

async fn search_root(p: &mut Proc, worker: u32) -> Result<u32, String> {
    let target = parse_target(p)?;
    let max_len = param_u32(p, "len", MAX_LEN).clamp(1, MAX_LEN);
    let threads = param_u32(p, "threads", 4).clamp(1, 64);
    let ctx = p.ctx().clone();
    ctx.map_zero(SHARED, SHARED_LEN)
        .map_err(|e| e.to_string())?;
    ctx.write(SHARED + 0x800, &target);
    let mut g = ThreadGroup::new(SHARED, SHARED_LEN);
    run_group(&ctx, &mut g, worker, threads, max_len)
        .await
        .map_err(|e| e.to_string())?;
    let hit = collect(&ctx, threads);
    Ok(report(p, &target, hit))
}

async fn run_group(
    ctx: &TaskCtx,
    g: &mut ThreadGroup,
    worker: u32,
    n: u32,
    max_len: u32,
) -> Result<(), ThreadError> {
    for w in 0..n {
        g.fork(ctx, w, worker_regs(worker, w, n, max_len)).await?;
    }
    for w in 0..n {
        g.join(ctx, w).await?;
    }
    Ok(())
}

/// Tree search: one sub-master per node field, each running `threads`
/// local workers over its share. Args as for the flat search plus
/// `fanout` (default: the cluster size).
pub fn register_tree(reg: &mut HostRegistry) -> u32 {
    let worker = reg.register("md5.worker", worker);
    let sub = Arc::new(move |ctx: TaskCtx| async move {
        // r1 = sub-master index, r2 = sub-masters, r3 = max_len, r4 = local workers.
        let (s, subs, max_len, local) = (ctx.arg(1), ctx.arg(2), ctx.arg(3), ctx.arg(4));
        let mut g = ThreadGroup::new(SHARED, SHARED_LEN).first_child(1);
        let total = subs * local;
        for l in 0..local {
            let w = s * local + l;
            let regs = worker_regs(worker, w, total, max_len);
            if g.fork(&ctx, l, regs).await.is_err() {
                return GuestExit::Exit(1);
            }
        }
        for l in 0..local {
            if g.join(&ctx, l).await.is_err() {
                return GuestExit::Exit(1);
            }
        }
        GuestExit::Exit(0)
    });
    let sub_entry = reg.register("md5.tree.sub", move |ctx| sub(ctx));
    reg.register("md5.tree", move |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, crate::runtime::DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let code = match tree_root(&mut p, sub_entry).await {
            Ok(code) => code,
            Err(e) => {
                p.console_write(format!("md5: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

async fn tree_root(p: &mut Proc, sub: u32) -> Result<u32, String> {
    let target = parse_target(p)?;
    let max_len = param_u32(p, "len", MAX_LEN).clamp(1, MAX_LEN);
    let local = param_u32(p, "threads", 2).clamp(1, 16);
    let ctx = p.ctx().clone();
    let nodes = ctx.node_count().await.map_err(|e| e.to_string())?;
    // The work split is fixed; only placement follows the cluster size.
    let subs = param_u32(p, "fanout", 8).clamp(1, 32);
    ctx.map_zero(SHARED, SHARED_LEN)
        .map_err(|e| e.to_string())?;
    ctx.write(SHARED + 0x800, &target);
    let mut g = ThreadGroup::new(SHARED, SHARED_LEN)
        .first_child(1)
        .spread(nodes);
    let run = async {
        for s in 0..subs {
            let regs = crate::guestvm::RegisterFile::new(sub)
                .with(1, s)
                .with(2, subs)
                .with(3, max_len)
                .with(4, local);
            g.fork(&ctx, s, regs).await?;
        }
        for s in 0..subs {
            let st = g.join(&ctx, s).await?;
            if st.code != 0 {
                return Err(ThreadError::Stopped {
                    tid: s,
                    reason: st.reason.name(),
                    code: st.code,
                });
            }
        }
        Ok::<_, ThreadError>(())
    };
    run.await.map_err(|e| e.to_string())?;
    let hit = collect(&ctx, subs * local);
    Ok(report(p, &target, hit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vectors() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
        assert_eq!(
            md5_hex(b"The quick brown fox jumps over the lazy dog"),
            "9e107d9d372bb6826bd81d3542a419d6"
        );
    }

    #[test]
    fn candidates_are_ordered() {
        assert_eq!(candidate(2, 0), b"aa");
        assert_eq!(candidate(2, 27), b"bb");
        assert_eq!(candidate(3, space(3) - 1), b"zzz");
    }

    #[test]
    fn chunks_cover_the_space() {
        for n in [1, 3, 8] {
            let mut next = 0;
            for w in 0..n {
                let (lo, hi) = chunk(space(2), w, n);
                assert_eq!(lo, next);
                next = hi;
            }
            assert_eq!(next, space(2));
        }
    }

    #[test]
    fn sequential_search_finds_shortest() {
        assert_eq!(search(&md5(b"ok"), 3).unwrap(), b"ok");
        assert_eq!(search(&md5(b"zzzzz"), 2), None);
    }
}

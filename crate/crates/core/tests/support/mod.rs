//! Shared generators and oracles for the integration tests.

#![allow(dead_code)]

use detspace::memimg::{Conflict, MemoryImage, PAGE_SIZE};
use proptest::prelude::*;

pub const BASE: u32 = 0x0004_0000;
pub const PAGES: u32 = 4;
pub const LEN: u64 = PAGES as u64 * PAGE_SIZE as u64;

/// How a page of a generated image starts out.
#[derive(Debug, Clone)]
pub enum PageInit {
    Unmapped,
    Fill(u8),
    Random(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct MergeCase {
    pub pages: Vec<PageInit>,
    /// Writes applied to the child after the snapshot: (offset, byte).
    pub child: Vec<(u16, u8)>,
    pub parent: Vec<(u16, u8)>,
    /// Pages the child zero-maps (mapping them if absent).
    pub child_zero: Vec<u32>,
    /// Rebuild the parent without sharing any page with the snapshot.
    pub parent_private: bool,
}

fn page_init() -> impl Strategy<Value = PageInit> {
    prop_oneof![
        1 => Just(PageInit::Unmapped),
        2 => (0u8..3).prop_map(PageInit::Fill),
        1 => prop::collection::vec(0u8..4, PAGE_SIZE).prop_map(PageInit::Random),
    ]
}

/// Writes concentrated on a few hot spots so child and parent collide.
fn writes() -> impl Strategy<Value = Vec<(u16, u8)>> {
    let offset = prop_oneof![
        0u16..LEN as u16,
        (0u16..PAGES as u16, 0u16..24).prop_map(|(p, o)| p * PAGE_SIZE as u16 + o),
    ];
    prop::collection::vec((offset, 0u8..4), 0..64)
}

pub fn merge_case() -> impl Strategy<Value = MergeCase> {
    (
        prop::collection::vec(page_init(), PAGES as usize),
        writes(),
        writes(),
        prop::collection::vec(0..PAGES, 0..2),
        any::<bool>(),
    )
        .prop_map(
            |(pages, child, parent, child_zero, parent_private)| MergeCase {
                pages,
                child,
                parent,
                child_zero,
                parent_private,
            },
        )
}

fn page_addr(p: u32) -> u32 {
    BASE + p * PAGE_SIZE as u32
}

/// Writes that land on unmapped pages map them first.
fn apply(m: &mut MemoryImage, writes: &[(u16, u8)]) {
    for &(o, v) in writes {
        let addr = BASE + o as u32;
        if m.peek_byte(addr).is_none() {
            let page = addr & !(PAGE_SIZE as u32 - 1);
            m.zero_range(page, PAGE_SIZE as u64).unwrap();
        }
        m.write(addr, &[v]).unwrap();
    }
}

/// Base image, snapshot taken from it, child and parent after their writes.
pub struct Built {
    pub snap: detspace::memimg::Snapshot,
    pub child: MemoryImage,
    pub parent: MemoryImage,
}

pub fn build(case: &MergeCase) -> Built {
    let mut base = MemoryImage::new();
    for (p, init) in case.pages.iter().enumerate() {
        let at = page_addr(p as u32);
        match init {
            PageInit::Unmapped => {}
            PageInit::Fill(b) => base.load(at, &vec![*b; PAGE_SIZE]).unwrap(),
            PageInit::Random(v) => base.load(at, v).unwrap(),
        }
    }
    let mut child = base.clone();
    let snap = child.snapshot();
    let mut parent = if case.parent_private {
        deep_copy(&base)
    } else {
        base.clone()
    };
    for &p in &case.child_zero {
        child.zero_range(page_addr(p), PAGE_SIZE as u64).unwrap();
    }
    apply(&mut child, &case.child);
    apply(&mut parent, &case.parent);
    Built {
        snap,
        child,
        parent,
    }
}

/// The same bytes with no page shared with `m`.
pub fn deep_copy(m: &MemoryImage) -> MemoryImage {
    let mut out = MemoryImage::new();
    for (i, perm, bytes) in m.pages() {
        let at = i * PAGE_SIZE as u32;
        out.load(at, &bytes[..]).unwrap();
        out.set_perms(at, PAGE_SIZE as u64, perm).unwrap();
    }
    out
}

pub fn byte(m: &MemoryImage, addr: u32) -> u8 {
    m.peek_byte(addr).unwrap_or(0)
}

pub fn region(m: &MemoryImage) -> Vec<u8> {
    (0..LEN as u32).map(|o| byte(m, BASE + o)).collect()
}

pub struct Expected {
    pub bytes: Vec<u8>,
    pub copied: u64,
    pub conflicts: Vec<Conflict>,
}

/// Per-byte three-way merge: copy where only the child changed, conflict
/// where both changed, keep the parent otherwise.
pub fn merge_oracle(snap: &MemoryImage, child: &MemoryImage, parent: &MemoryImage) -> Expected {
    let mut out = Expected {
        bytes: Vec::new(),
        copied: 0,
        conflicts: Vec::new(),
    };
    for o in 0..LEN as u32 {
        let a = BASE + o;
        let (s, c, p) = (byte(snap, a), byte(child, a), byte(parent, a));
        if c != s && p == s {
            out.bytes.push(c);
            out.copied += 1;
        } else {
            if c != s {
                out.conflicts.push(Conflict {
                    addr: a,
                    parent: p,
                    child: c,
                    snapshot: s,
                });
            }
            out.bytes.push(p);
        }
    }
    out
}

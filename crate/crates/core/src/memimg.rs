//! Page-based memory images.
//!
//! A [`MemoryImage`] is a sparse page table of reference-counted pages.
//! Cloning an image, copying a range between images and taking a
//! [`Snapshot`] all share page references; the first write through a
//! shared reference copies the page (copy-on-write).
//!
//! [`merge`] performs the byte-granular three-way merge used by `Get`
//! with the merge option: bytes the child changed relative to its snapshot
//! are copied into the parent unless the parent changed them too, in which
//! case the address is reported as a conflict and the parent byte is left
//! alone.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: usize = 1 << PAGE_SHIFT;
pub const ADDRESS_BITS: u32 = 32;
/// One past the highest address of the 32-bit space.
pub const ADDRESS_LIMIT: u64 = 1 << ADDRESS_BITS;

pub type PageBytes = [u8; PAGE_SIZE];

/// Guest-visible page permission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Perm {
    None,
    ReadOnly,
    ReadWrite,
}

impl Perm {
    pub fn can_read(self) -> bool {
        self != Perm::None
    }

    pub fn can_write(self) -> bool {
        self == Perm::ReadWrite
    }

    pub fn code(self) -> u32 {
        match self {
            Perm::None => 0,
            Perm::ReadOnly => 1,
            Perm::ReadWrite => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Perm> {
        match code {
            0 => Some(Perm::None),
            1 => Some(Perm::ReadOnly),
            3 => Some(Perm::ReadWrite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("range {addr:#x}+{len:#x} is not page aligned")]
    Unaligned { addr: u32, len: u64 },
    #[error("range {addr:#x}+{len:#x} overflows the address space")]
    Overflow { addr: u32, len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

/// A guest access that hit an unmapped page or violated its permission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
#[error("access fault ({kind:?}) at {addr:#010x}")]
pub struct AccessFault {
    pub addr: u32,
    pub kind: AccessKind,
}

fn zero_page() -> &'static Arc<PageBytes> {
    static ZERO: OnceLock<Arc<PageBytes>> = OnceLock::new();
    ZERO.get_or_init(|| Arc::new([0u8; PAGE_SIZE]))
}

#[derive(Clone, Debug)]
struct PageEntry {
    data: Arc<PageBytes>,
    perm: Perm,
    version: u64,
}

/// Validates a page-aligned range and returns its first page index and
/// page count.
pub fn page_span(addr: u32, len: u64) -> Result<(u32, u64), MemError> {
    if !(addr as usize).is_multiple_of(PAGE_SIZE) || !len.is_multiple_of(PAGE_SIZE as u64) {
        return Err(MemError::Unaligned { addr, len });
    }
    if addr as u64 + len > ADDRESS_LIMIT {
        return Err(MemError::Overflow { addr, len });
    }
    Ok((addr >> PAGE_SHIFT, len >> PAGE_SHIFT))
}

/// Rounds `len` up to a whole number of pages.
pub fn round_up(len: u64) -> u64 {
    len.div_ceil(PAGE_SIZE as u64) * PAGE_SIZE as u64
}

/// A private virtual memory: page index -> (page reference, permission).
#[derive(Clone, Debug, Default)]
pub struct MemoryImage {
    pages: BTreeMap<u32, PageEntry>,
    // Source of page versions. Every modification of a page stamps it with
    // a fresh value, so (image, page, version) names page content.
    clock: u64,
}

/// An immutable capture of a [`MemoryImage`], sharing its pages.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    image: MemoryImage,
}

impl Snapshot {
    pub fn image(&self) -> &MemoryImage {
        &self.image
    }

    pub fn read_byte(&self, addr: u32) -> Option<u8> {
        self.image.peek_byte(addr)
    }
}

/// One write/write conflict found by [`merge`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Conflict {
    /// Address in the parent's space.
    pub addr: u32,
    pub parent: u8,
    pub child: u8,
    pub snapshot: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub bytes_copied: u64,
    pub conflicts: Vec<Conflict>,
}

impl MergeReport {
    pub fn is_clean(&self) -> bool {
        self.conflicts.is_empty()
    }
}

impl MemoryImage {
    pub fn new() -> Self {
        Self::default()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn mapped_pages(&self) -> usize {
        self.pages.len()
    }

    /// Indices of all mapped pages in ascending order.
    pub fn page_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.pages.keys().copied()
    }

    /// (index, permission, bytes) for every mapped page in ascending order.
    pub fn pages(&self) -> impl Iterator<Item = (u32, Perm, &PageBytes)> + '_ {
        self.pages.iter().map(|(&i, e)| (i, e.perm, &*e.data))
    }

    pub fn page_perm(&self, index: u32) -> Option<Perm> {
        self.pages.get(&index).map(|e| e.perm)
    }

    pub fn page_version(&self, index: u32) -> Option<u64> {
        self.pages.get(&index).map(|e| e.version)
    }

    pub fn page_bytes(&self, index: u32) -> Option<&PageBytes> {
        self.pages.get(&index).map(|e| &*e.data)
    }

    /// True when both images map `index` to the same physical page.
    pub fn shares_page(&self, other: &MemoryImage, index: u32) -> bool {
        match (self.pages.get(&index), other.pages.get(&index)) {
            (Some(a), Some(b)) => Arc::ptr_eq(&a.data, &b.data),
            _ => false,
        }
    }

    /// Reads a byte ignoring permissions; `None` if unmapped.
    pub fn peek_byte(&self, addr: u32) -> Option<u8> {
        self.pages
            .get(&(addr >> PAGE_SHIFT))
            .map(|e| e.data[addr as usize % PAGE_SIZE])
    }

    fn access(&self, addr: u32, len: usize, kind: AccessKind) -> Result<(), AccessFault> {
        if addr as u64 + len as u64 > ADDRESS_LIMIT {
            return Err(AccessFault { addr, kind });
        }
        let mut a = addr as u64;
        let end = addr as u64 + len as u64;
        while a < end {
            let page = (a >> PAGE_SHIFT) as u32;
            let ok = match self.pages.get(&page) {
                Some(e) => match kind {
                    AccessKind::Read => e.perm.can_read(),
                    AccessKind::Write => e.perm.can_write(),
                },
                None => false,
            };
            if !ok {
                return Err(AccessFault {
                    addr: a as u32,
                    kind,
                });
            }
            a = ((page as u64) + 1) << PAGE_SHIFT;
        }
        Ok(())
    }

    /// Guest read: every touched page must be mapped and readable.
    pub fn read(&self, addr: u32, buf: &mut [u8]) -> Result<(), AccessFault> {
        self.access(addr, buf.len(), AccessKind::Read)?;
        self.read_unchecked(addr, buf);
        Ok(())
    }

    fn read_unchecked(&self, addr: u32, buf: &mut [u8]) {
        let mut done = 0;
        while done < buf.len() {
            let a = addr as usize + done;
            let off = a % PAGE_SIZE;
            let n = (PAGE_SIZE - off).min(buf.len() - done);
            match self.pages.get(&((a >> PAGE_SHIFT) as u32)) {
                Some(e) => buf[done..done + n].copy_from_slice(&e.data[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
    }

    /// Guest write: every touched page must be mapped read-write.
    pub fn write(&mut self, addr: u32, data: &[u8]) -> Result<(), AccessFault> {
        self.access(addr, data.len(), AccessKind::Write)?;
        let mut done = 0;
        while done < data.len() {
            let a = addr as usize + done;
            let off = a % PAGE_SIZE;
            let n = (PAGE_SIZE - off).min(data.len() - done);
            let version = self.tick();
            let e = self
                .pages
                .get_mut(&((a >> PAGE_SHIFT) as u32))
                .expect("checked mapped");
            Arc::make_mut(&mut e.data)[off..off + n].copy_from_slice(&data[done..done + n]);
            e.version = version;
            done += n;
        }
        Ok(())
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, AccessFault> {
        let mut b = [0u8; 4];
        self.read(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Result<(), AccessFault> {
        self.write(addr, &value.to_le_bytes())
    }

    /// Maps fresh zero pages read-write over `[addr, addr+len)` wherever
    /// nothing is mapped yet, then writes `data` at `addr`. Kernel-side
    /// helper for loading programs; ignores guest permissions.
    pub fn load(&mut self, addr: u32, data: &[u8]) -> Result<(), MemError> {
        let start = addr & !(PAGE_SIZE as u32 - 1);
        let len = round_up(addr as u64 - start as u64 + data.len() as u64);
        let (first, count) = page_span(start, len)?;
        for i in first..first + count as u32 {
            if !self.pages.contains_key(&i) {
                let version = self.tick();
                self.pages.insert(
                    i,
                    PageEntry {
                        data: zero_page().clone(),
                        perm: Perm::ReadWrite,
                        version,
                    },
                );
            }
        }
        let mut done = 0;
        while done < data.len() {
            let a = addr as usize + done;
            let off = a % PAGE_SIZE;
            let n = (PAGE_SIZE - off).min(data.len() - done);
            let version = self.tick();
            let e = self
                .pages
                .get_mut(&((a >> PAGE_SHIFT) as u32))
                .expect("mapped above");
            Arc::make_mut(&mut e.data)[off..off + n].copy_from_slice(&data[done..done + n]);
            e.version = version;
            done += n;
        }
        Ok(())
    }

    /// Reads bytes ignoring permissions; unmapped bytes read as zero.
    pub fn read_raw(&self, addr: u32, buf: &mut [u8]) {
        self.read_unchecked(addr, buf)
    }

    /// Makes `dst[dst_addr..dst_addr+len]` identical to
    /// `src[src_addr..src_addr+len]` by sharing page references. Unmapped
    /// source pages unmap the destination page. Permissions travel with
    /// the pages.
    pub fn copy_from(
        &mut self,
        src: &MemoryImage,
        src_addr: u32,
        dst_addr: u32,
        len: u64,
    ) -> Result<(), MemError> {
        let (sfirst, count) = page_span(src_addr, len)?;
        let (dfirst, _) = page_span(dst_addr, len)?;
        if count == 0 {
            return Ok(());
        }
        let (slast, dlast) = (sfirst + (count - 1) as u32, dfirst + (count - 1) as u32);
        let incoming: Vec<(u32, Arc<PageBytes>, Perm)> = src
            .pages
            .range(sfirst..=slast)
            .map(|(&i, e)| (i - sfirst + dfirst, e.data.clone(), e.perm))
            .collect();
        let stale: Vec<u32> = self.pages.range(dfirst..=dlast).map(|(&i, _)| i).collect();
        for i in stale {
            self.pages.remove(&i);
        }
        for (d, data, perm) in incoming {
            let version = self.tick();
            self.pages.insert(
                d,
                PageEntry {
                    data,
                    perm,
                    version,
                },
            );
        }
        Ok(())
    }

    /// Zero-fills a range. Unmapped pages become mapped read-write;
    /// mapped pages keep their permission.
    pub fn zero_range(&mut self, addr: u32, len: u64) -> Result<(), MemError> {
        let (first, count) = page_span(addr, len)?;
        for i in first..first + count as u32 {
            let version = self.tick();
            let perm = self.pages.get(&i).map_or(Perm::ReadWrite, |e| e.perm);
            self.pages.insert(
                i,
                PageEntry {
                    data: zero_page().clone(),
                    perm,
                    version,
                },
            );
        }
        Ok(())
    }

    /// Sets guest permissions on a range, mapping zero pages where nothing
    /// was mapped.
    pub fn set_perms(&mut self, addr: u32, len: u64, perm: Perm) -> Result<(), MemError> {
        let (first, count) = page_span(addr, len)?;
        for i in first..first + count as u32 {
            match self.pages.get_mut(&i) {
                Some(e) => e.perm = perm,
                None => {
                    let version = self.tick();
                    self.pages.insert(
                        i,
                        PageEntry {
                            data: zero_page().clone(),
                            perm,
                            version,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            image: self.clone(),
        }
    }

    /// Byte equality of two images over a page-aligned range, treating
    /// unmapped bytes as distinct from mapped ones.
    pub fn range_eq(&self, other: &MemoryImage, addr: u32, len: u64) -> bool {
        let Ok((first, count)) = page_span(addr, len) else {
            return false;
        };
        (first..first + count as u32).all(|i| match (self.pages.get(&i), other.pages.get(&i)) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(&a.data, &b.data) || a.data[..] == b.data[..],
            _ => false,
        })
    }
}

/// Three-way merge of `child`'s changes since `snap` into `parent`.
///
/// `child_addr` addresses both the child and its snapshot; `parent_addr`
/// is where the same bytes live in the parent. For every byte `a` of the
/// range: if `child[a] != snap[a]` and `parent[a] == snap[a]` the child
/// byte is copied; if both differ from the snapshot the address is a
/// conflict, even when the two new values are equal. Unmapped pages read
/// as zero for the comparison. Pages whose child reference is the
/// snapshot's reference are skipped without scanning.
pub fn merge(
    parent: &mut MemoryImage,
    parent_addr: u32,
    child: &MemoryImage,
    snap: &Snapshot,
    child_addr: u32,
    len: u64,
) -> Result<MergeReport, MemError> {
    let (cfirst, count) = page_span(child_addr, len)?;
    let (pfirst, _) = page_span(parent_addr, len)?;
    let zero = zero_page();
    let mut report = MergeReport::default();
    if count == 0 {
        return Ok(report);
    }
    let clast = cfirst + (count - 1) as u32;
    let mut candidates: Vec<u32> = child.pages.range(cfirst..=clast).map(|(&i, _)| i).collect();
    candidates.extend(snap.image.pages.range(cfirst..=clast).map(|(&i, _)| i));
    candidates.sort_unstable();
    candidates.dedup();
    for ci in candidates {
        let pi = ci - cfirst + pfirst;
        let c = child.pages.get(&ci).map(|e| &e.data);
        let s = snap.image.pages.get(&ci).map(|e| &e.data);
        let unchanged = match (c, s) {
            (None, None) => true,
            (Some(c), Some(s)) => Arc::ptr_eq(c, s),
            _ => false,
        };
        if unchanged {
            continue;
        }
        let cbytes: &PageBytes = c.unwrap_or(zero);
        let sbytes: &PageBytes = s.unwrap_or(zero);
        let pentry = parent.pages.get(&pi);
        let parent_untouched = match (pentry, s) {
            (Some(p), Some(s)) => Arc::ptr_eq(&p.data, s),
            _ => false,
        };
        if parent_untouched {
            // Parent still holds the snapshot's page: every child change
            // applies and none can conflict, so share the child's page.
            let changed = cbytes
                .iter()
                .zip(sbytes.iter())
                .filter(|(a, b)| a != b)
                .count();
            if changed > 0 {
                let perm = pentry.map_or(Perm::ReadWrite, |e| e.perm);
                let version = parent.tick();
                let data = c.cloned().unwrap_or_else(|| zero.clone());
                parent.pages.insert(
                    pi,
                    PageEntry {
                        data,
                        perm,
                        version,
                    },
                );
                report.bytes_copied += changed as u64;
            }
            continue;
        }
        let pbytes: PageBytes = match pentry {
            Some(e) => *e.data,
            None => [0u8; PAGE_SIZE],
        };
        let mut out = pbytes;
        let mut wrote = false;
        for b in 0..PAGE_SIZE {
            let (cb, sb, pb) = (cbytes[b], sbytes[b], pbytes[b]);
            if cb == sb {
                continue;
            }
            if pb == sb {
                out[b] = cb;
                wrote = true;
                report.bytes_copied += 1;
            } else {
                report.conflicts.push(Conflict {
                    addr: (pi << PAGE_SHIFT) | b as u32,
                    parent: pb,
                    child: cb,
                    snapshot: sb,
                });
            }
        }
        if wrote {
            let perm = pentry.map_or(Perm::ReadWrite, |e| e.perm);
            let version = parent.tick();
            parent.pages.insert(
                pi,
                PageEntry {
                    data: Arc::new(out),
                    perm,
                    version,
                },
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: u64 = PAGE_SIZE as u64;

    fn filled(addr: u32, pages: u64, byte: u8) -> MemoryImage {
        let mut m = MemoryImage::new();
        m.load(addr, &vec![byte; (pages * P) as usize]).unwrap();
        m
    }

    #[test]
    fn copy_one_page_pattern() {
        let src = filled(0x1000, 1, 0xAB);
        let mut dst = MemoryImage::new();
        dst.copy_from(&src, 0x1000, 0x8000, P).unwrap();
        let mut buf = vec![0; PAGE_SIZE];
        dst.read(0x8000, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0xAB));
        assert!(dst.shares_page(&src, 1) || dst.page_bytes(8).is_some());
    }

    #[test]
    fn copy_isolated_from_later_source_writes() {
        let mut src = filled(0, 2, 7);
        let mut dst = MemoryImage::new();
        dst.copy_from(&src, 0, 0, 2 * P).unwrap();
        src.write(10, &[99]).unwrap();
        assert_eq!(dst.peek_byte(10), Some(7));
        assert_eq!(src.peek_byte(10), Some(99));
    }

    #[test]
    fn unaligned_and_overflowing_ranges_rejected() {
        let src = MemoryImage::new();
        let mut dst = MemoryImage::new();
        assert!(matches!(
            dst.copy_from(&src, 1, 0, P),
            Err(MemError::Unaligned { .. })
        ));
        assert!(matches!(
            dst.copy_from(&src, 0, 0, 100),
            Err(MemError::Unaligned { .. })
        ));
        assert!(matches!(
            dst.copy_from(&src, 0xFFFF_F000, 0, 2 * P),
            Err(MemError::Overflow { .. })
        ));
        assert!(matches!(
            dst.zero_range(0x10, P),
            Err(MemError::Unaligned { .. })
        ));
        assert!(matches!(
            dst.set_perms(0, 3, Perm::None),
            Err(MemError::Unaligned { .. })
        ));
    }

    #[test]
    fn zeroing_mapped_and_unmapped_pages() {
        let mut m = filled(0, 1, 0xFF);
        m.zero_range(0, 2 * P).unwrap();
        let mut buf = vec![1; 2 * PAGE_SIZE];
        m.read(0, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
    }

    #[test]
    fn unmapped_access_faults() {
        let m = MemoryImage::new();
        let err = m.read_u32(0x5000).unwrap_err();
        assert_eq!(
            err,
            AccessFault {
                addr: 0x5000,
                kind: AccessKind::Read
            }
        );
    }

    #[test]
    fn permissions_gate_guest_access() {
        let mut m = filled(0, 1, 1);
        m.set_perms(0, P, Perm::ReadOnly).unwrap();
        assert_eq!(m.read_u32(0).unwrap(), 0x0101_0101);
        assert!(m.write(4, &[0]).is_err());
        m.set_perms(0, P, Perm::None).unwrap();
        assert!(m.read_u32(0).is_err());
        m.set_perms(0, P, Perm::ReadWrite).unwrap();
        m.write(4, &[0]).unwrap();
    }

    #[test]
    fn access_straddling_into_unmapped_page_faults_at_boundary() {
        let mut m = filled(0, 1, 0);
        let err = m.write(PAGE_SIZE as u32 - 2, &[1, 2, 3, 4]).unwrap_err();
        assert_eq!(err.addr, PAGE_SIZE as u32);
        assert_eq!(m.peek_byte(PAGE_SIZE as u32 - 2), Some(0));
    }

    #[test]
    fn snapshot_is_immutable() {
        let mut m = filled(0, 1, 3);
        let snap = m.snapshot();
        m.write(0, &[9]).unwrap();
        assert_eq!(snap.read_byte(0), Some(3));
        assert!(MemoryImage::new().snapshot().image().is_empty());
    }

    #[test]
    fn swap_example_merges_both_children() {
        // x at 0x100, y at 0x104 in a shared page.
        let mut parent = filled(0, 1, 0);
        parent.write_u32(0x100, 1).unwrap();
        parent.write_u32(0x104, 2).unwrap();
        let mut a = parent.clone();
        let mut b = parent.clone();
        let snap_a = a.snapshot();
        let snap_b = b.snapshot();
        let y = a.read_u32(0x104).unwrap();
        a.write_u32(0x100, y).unwrap();
        let x = b.read_u32(0x100).unwrap();
        b.write_u32(0x104, x).unwrap();
        let ra = merge(&mut parent, 0, &a, &snap_a, 0, P).unwrap();
        let rb = merge(&mut parent, 0, &b, &snap_b, 0, P).unwrap();
        assert!(ra.is_clean() && rb.is_clean());
        assert_eq!(parent.read_u32(0x100).unwrap(), 2);
        assert_eq!(parent.read_u32(0x104).unwrap(), 1);
    }

    #[test]
    fn unchanged_child_merges_nothing() {
        let mut parent = filled(0, 2, 5);
        let child = parent.clone();
        let snap = child.snapshot();
        parent.write(3, &[1]).unwrap();
        let before = parent.clone();
        let r = merge(&mut parent, 0, &child, &snap, 0, 2 * P).unwrap();
        assert_eq!(r, MergeReport::default());
        assert!(parent.range_eq(&before, 0, 2 * P));
    }

    #[test]
    fn same_value_written_on_both_sides_is_a_conflict() {
        let mut parent = filled(0, 1, 0);
        let mut child = parent.clone();
        let snap = child.snapshot();
        child.write(8, &[4]).unwrap();
        parent.write(8, &[4]).unwrap();
        let r = merge(&mut parent, 0, &child, &snap, 0, P).unwrap();
        assert_eq!(
            r.conflicts,
            vec![Conflict {
                addr: 8,
                parent: 4,
                child: 4,
                snapshot: 0
            }]
        );
        assert_eq!(r.bytes_copied, 0);
    }

    #[test]
    fn conflicting_merge_keeps_parent_byte_and_applies_the_rest() {
        let mut parent = filled(0, 1, 0);
        let mut child = parent.clone();
        let snap = child.snapshot();
        child.write(0, &[1, 1]).unwrap();
        parent.write(1, &[2]).unwrap();
        let r = merge(&mut parent, 0, &child, &snap, 0, P).unwrap();
        assert_eq!(r.bytes_copied, 1);
        assert_eq!(r.conflicts.len(), 1);
        assert_eq!(parent.peek_byte(0), Some(1));
        assert_eq!(parent.peek_byte(1), Some(2));
    }

    #[test]
    fn zero_then_merge_against_unchanged_snapshot_copies_nothing() {
        let mut child = MemoryImage::new();
        child.zero_range(0, 2 * P).unwrap();
        let snap = child.snapshot();
        child.zero_range(0, P).unwrap();
        let mut parent = MemoryImage::new();
        let r = merge(&mut parent, 0, &child, &snap, 0, 2 * P).unwrap();
        assert_eq!(r.bytes_copied, 0);
        assert!(r.is_clean());
    }

    #[test]
    fn merge_at_different_parent_address() {
        let mut parent = MemoryImage::new();
        parent.zero_range(0x10000, P).unwrap();
        let mut child = filled(0, 1, 0);
        let snap = child.snapshot();
        child.write(5, &[42]).unwrap();
        let r = merge(&mut parent, 0x10000, &child, &snap, 0, P).unwrap();
        assert_eq!(r.bytes_copied, 1);
        assert_eq!(parent.peek_byte(0x10005), Some(42));
    }

    #[test]
    fn versions_change_on_every_write() {
        let mut m = filled(0, 1, 0);
        let v0 = m.page_version(0).unwrap();
        m.write(0, &[1]).unwrap();
        let v1 = m.page_version(0).unwrap();
        assert!(v1 > v0);
        let mut other = MemoryImage::new();
        other.copy_from(&m, 0, 0, P).unwrap();
        m.copy_from(&other, 0, 0, P).unwrap();
        assert!(m.page_version(0).unwrap() > v1);
    }
}

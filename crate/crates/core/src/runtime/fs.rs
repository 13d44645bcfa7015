//! Per-process file system replicas and their reconciliation.
//!
//! Every process holds a complete [`FsImage`] in a fixed region of its
//! memory. Operations touch only the local replica. When a parent
//! synchronizes with a child it runs [`reconcile`], which uses per-file
//! version vectors for regular files and suffix exchange for append-only
//! I/O files.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const CONS_IN: &str = "/dev/cons_in";
pub const CONS_OUT: &str = "/dev/cons_out";

const MAGIC: &[u8; 4] = b"DFS1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FsError {
    #[error("{0}: no such file")]
    NotFound(String),
    #[error("{0}: file is in conflict")]
    Conflicted(String),
    #[error("{0}: wrong file kind for this operation")]
    WrongKind(String),
    #[error("file system needs {need} bytes, region holds {cap}")]
    RegionFull { need: usize, cap: usize },
    #[error("malformed file system image at byte {0}")]
    Malformed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileKind {
    Regular,
    /// Only ever grows; replicas exchange new suffixes.
    AppendOnly,
}

/// How two versions relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionOrder {
    Equal,
    Newer,
    Older,
    Concurrent,
}

/// Version vector keyed by writer id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Version(pub BTreeMap<String, u64>);

impl Version {
    pub fn bump(&mut self, writer: &str) {
        *self.0.entry(writer.to_string()).or_insert(0) += 1;
    }

    fn get(&self, w: &str) -> u64 {
        self.0.get(w).copied().unwrap_or(0)
    }

    /// Compares `self` against `other`.
    pub fn order(&self, other: &Version) -> VersionOrder {
        let (mut ge, mut le) = (true, true);
        for w in self.0.keys().chain(other.0.keys()) {
            let (a, b) = (self.get(w), other.get(w));
            ge &= a >= b;
            le &= a <= b;
        }
        match (ge, le) {
            (true, true) => VersionOrder::Equal,
            (true, false) => VersionOrder::Newer,
            (false, true) => VersionOrder::Older,
            (false, false) => VersionOrder::Concurrent,
        }
    }

    pub fn join(&self, other: &Version) -> Version {
        let mut out = self.clone();
        for (w, &n) in &other.0 {
            let e = out.0.entry(w.clone()).or_insert(0);
            *e = (*e).max(n);
        }
        out
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (w, n)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{w}:{n}")?;
        }
        f.write_str("}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileNode {
    pub kind: FileKind,
    pub content: Vec<u8>,
    pub version: Version,
    pub conflict: bool,
    /// Tombstone left by a delete.
    pub deleted: bool,
}

impl FileNode {
    fn new(kind: FileKind) -> Self {
        FileNode {
            kind,
            content: Vec::new(),
            version: Version::default(),
            conflict: false,
            deleted: false,
        }
    }
}

/// Append-only file lengths at the last synchronization with a child.
pub type SyncBase = BTreeMap<String, u64>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsImage {
    files: BTreeMap<String, FileNode>,
}

impl FsImage {
    pub fn new() -> Self {
        FsImage::default()
    }

    /// An image holding empty console input and output files.
    pub fn with_console() -> Self {
        let mut fs = FsImage::new();
        fs.files
            .insert(CONS_IN.to_string(), FileNode::new(FileKind::AppendOnly));
        fs.files
            .insert(CONS_OUT.to_string(), FileNode::new(FileKind::AppendOnly));
        fs
    }

    /// Raw node, including tombstones and conflicted files.
    pub fn node(&self, path: &str) -> Option<&FileNode> {
        self.files.get(path)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, &FileNode)> {
        self.files.iter().map(|(p, n)| (p.as_str(), n))
    }

    /// Paths of files that exist (not deleted).
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files
            .iter()
            .filter(|(_, n)| !n.deleted)
            .map(|(p, _)| p.as_str())
    }

    pub fn exists(&self, path: &str) -> bool {
        self.files.get(path).is_some_and(|n| !n.deleted)
    }

    /// Opens a file for reading.
    pub fn open(&self, path: &str) -> Result<&FileNode, FsError> {
        match self.files.get(path) {
            Some(n) if n.conflict => Err(FsError::Conflicted(path.to_string())),
            Some(n) if !n.deleted => Ok(n),
            _ => Err(FsError::NotFound(path.to_string())),
        }
    }

    pub fn read(&self, path: &str) -> Result<&[u8], FsError> {
        self.open(path).map(|n| n.content.as_slice())
    }

    /// Creates or replaces a regular file. Replacing clears a conflict.
    pub fn write_file(&mut self, path: &str, data: &[u8], writer: &str) -> Result<(), FsError> {
        let node = self
            .files
            .entry(path.to_string())
            .or_insert_with(|| FileNode::new(FileKind::Regular));
        if node.kind != FileKind::Regular {
            return Err(FsError::WrongKind(path.to_string()));
        }
        node.content = data.to_vec();
        node.deleted = false;
        node.conflict = false;
        node.version.bump(writer);
        Ok(())
    }

    /// Appends to an existing regular file.
    pub fn append_file(&mut self, path: &str, data: &[u8], writer: &str) -> Result<(), FsError> {
        let node = match self.files.get_mut(path) {
            Some(n) if n.conflict => return Err(FsError::Conflicted(path.to_string())),
            Some(n) if !n.deleted => n,
            _ => return Err(FsError::NotFound(path.to_string())),
        };
        if node.kind != FileKind::Regular {
            return Err(FsError::WrongKind(path.to_string()));
        }
        node.content.extend_from_slice(data);
        node.version.bump(writer);
        Ok(())
    }

    /// Creates an empty append-only file if `path` is free.
    pub fn make_io(&mut self, path: &str) -> Result<(), FsError> {
        match self.files.get(path) {
            Some(n) if n.kind == FileKind::AppendOnly => Ok(()),
            Some(n) if !n.deleted => Err(FsError::WrongKind(path.to_string())),
            _ => {
                self.files
                    .insert(path.to_string(), FileNode::new(FileKind::AppendOnly));
                Ok(())
            }
        }
    }

    /// Appends to an append-only file, creating it if needed.
    pub fn append_io(&mut self, path: &str, data: &[u8]) -> Result<(), FsError> {
        self.make_io(path)?;
        let node = self.files.get_mut(path).expect("just made");
        node.content.extend_from_slice(data);
        Ok(())
    }

    pub fn delete(&mut self, path: &str, writer: &str) -> Result<(), FsError> {
        let node = match self.files.get_mut(path) {
            Some(n) if !n.deleted => n,
            _ => return Err(FsError::NotFound(path.to_string())),
        };
        if node.kind != FileKind::Regular {
            return Err(FsError::WrongKind(path.to_string()));
        }
        node.content.clear();
        node.deleted = true;
        node.conflict = false;
        node.version.bump(writer);
        Ok(())
    }

    /// Length of `path` for append-only files, 0 otherwise.
    pub fn io_len(&self, path: &str) -> u64 {
        match self.files.get(path) {
            Some(n) if n.kind == FileKind::AppendOnly => n.content.len() as u64,
            _ => 0,
        }
    }

    pub fn sync_base(&self) -> SyncBase {
        self.files
            .iter()
            .filter(|(_, n)| n.kind == FileKind::AppendOnly)
            .map(|(p, n)| (p.clone(), n.content.len() as u64))
            .collect()
    }

    /// Normative encoding: magic, node count, then nodes in path order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.files.len() as u32).to_le_bytes());
        for (path, n) in &self.files {
            put_str(&mut out, path);
            out.push(match n.kind {
                FileKind::Regular => 0,
                FileKind::AppendOnly => 1,
            });
            out.push(n.conflict as u8 | (n.deleted as u8) << 1);
            out.extend_from_slice(&(n.version.0.len() as u32).to_le_bytes());
            for (w, c) in &n.version.0 {
                put_str(&mut out, w);
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.extend_from_slice(&(n.content.len() as u32).to_le_bytes());
            out.extend_from_slice(&n.content);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, FsError> {
        let mut r = Reader { b, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(FsError::Malformed(0));
        }
        let count = r.u32()?;
        let mut files = BTreeMap::new();
        for _ in 0..count {
            let path = r.str()?;
            let at = r.at;
            let kind = match r.take(1)?[0] {
                0 => FileKind::Regular,
                1 => FileKind::AppendOnly,
                _ => return Err(FsError::Malformed(at)),
            };
            let flags = r.take(1)?[0];
            let mut version = Version::default();
            for _ in 0..r.u32()? {
                let w = r.str()?;
                let c = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                version.0.insert(w, c);
            }
            let len = r.u32()? as usize;
            let content = r.take(len)?.to_vec();
            let node = FileNode {
                kind,
                content,
                version,
                conflict: flags & 1 != 0,
                deleted: flags & 2 != 0,
            };
            files.insert(path, node);
        }
        if r.at != b.len() {
            return Err(FsError::Malformed(r.at));
        }
        Ok(FsImage { files })
    }

    /// Region contents: a u32 length, then [`FsImage::to_bytes`].
    pub fn to_region(&self, cap: usize) -> Result<Vec<u8>, FsError> {
        let body = self.to_bytes();
        let need = body.len() + 4;
        if need > cap {
            return Err(FsError::RegionFull { need, cap });
        }
        let mut out = Vec::with_capacity(need);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FsError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or(FsError::Malformed(self.at))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, FsError> {
        let at = self.at;
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FsError::Malformed(at))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReconcileReport {
    /// Files whose parent copy changed.
    pub to_parent: Vec<String>,
    /// Files whose child copy changed.
    pub to_child: Vec<String>,
    /// Files newly flagged as conflicting.
    pub conflicts: Vec<String>,
}

impl ReconcileReport {
    pub fn is_noop(&self) -> bool {
        self.to_parent.is_empty() && self.to_child.is_empty() && self.conflicts.is_empty()
    }
}

/// Brings `parent` and `child` together. `base` holds the append-only
/// lengths both sides agreed on at the previous synchronization.
/// Concurrent regular-file changes keep the parent's copy and set the
/// conflict flag on both sides; `writer` is the reconciling process.
pub fn reconcile(
    parent: &mut FsImage,
    child: &mut FsImage,
    base: &SyncBase,
    writer: &str,
) -> ReconcileReport {
    let mut report = ReconcileReport::default();
    let paths: Vec<String> = {
        let mut v: Vec<String> = parent
            .files
            .keys()
            .chain(child.files.keys())
            .cloned()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    for path in paths {
        let p = parent.files.get(&path);
        let c = child.files.get(&path);
        let io = |n: Option<&FileNode>| n.is_none_or(|n| n.kind == FileKind::AppendOnly);
        if io(p) && io(c) {
            let b = base.get(&path).copied().unwrap_or(0) as usize;
            let empty = FileNode::new(FileKind::AppendOnly);
            let (pn, cn) = (p.unwrap_or(&empty), c.unwrap_or(&empty));
            let ps = pn
                .content
                .get(b.min(pn.content.len())..)
                .unwrap_or_default()
                .to_vec();
            let cs = cn
                .content
                .get(b.min(cn.content.len())..)
                .unwrap_or_default()
                .to_vec();
            let version = pn.version.join(&cn.version);
            let conflict = pn.conflict || cn.conflict;
            let (had_p, had_c) = (p.is_some(), c.is_some());
            let pn = parent
                .files
                .entry(path.clone())
                .or_insert_with(|| FileNode::new(FileKind::AppendOnly));
            pn.content.extend_from_slice(&cs);
            pn.version = version.clone();
            pn.conflict = conflict;
            let cn = child
                .files
                .entry(path.clone())
                .or_insert_with(|| FileNode::new(FileKind::AppendOnly));
            cn.content.extend_from_slice(&ps);
            cn.version = version;
            cn.conflict = conflict;
            if !cs.is_empty() || !had_p {
                report.to_parent.push(path.clone());
            }
            if !ps.is_empty() || !had_c {
                report.to_child.push(path);
            }
            continue;
        }
        let order = match (p, c) {
            (Some(p), Some(c)) if p.kind != c.kind => VersionOrder::Concurrent,
            (Some(p), Some(c)) => c.version.order(&p.version),
            (None, Some(_)) => VersionOrder::Newer,
            (Some(_), None) => VersionOrder::Older,
            (None, None) => unreachable!(),
        };
        match order {
            VersionOrder::Equal => {
                let (p, c) = (p.unwrap(), c.unwrap());
                if p.conflict != c.conflict {
                    let flag = p.conflict || c.conflict;
                    parent.files.get_mut(&path).unwrap().conflict = flag;
                    child.files.get_mut(&path).unwrap().conflict = flag;
                    report.to_parent.push(path.clone());
                    report.to_child.push(path);
                }
            }
            VersionOrder::Newer => {
                parent.files.insert(path.clone(), c.unwrap().clone());
                report.to_parent.push(path);
            }
            VersionOrder::Older => {
                child.files.insert(path.clone(), p.unwrap().clone());
                report.to_child.push(path);
            }
            VersionOrder::Concurrent => {
                let (p, c) = (p.unwrap(), c.unwrap());
                let mut keep = p.clone();
                keep.version = p.version.join(&c.version);
                keep.version.bump(writer);
                if !keep.conflict {
                    report.conflicts.push(path.clone());
                }
                keep.conflict = true;
                parent.files.insert(path.clone(), keep.clone());
                child.files.insert(path.clone(), keep);
                report.to_parent.push(path.clone());
                report.to_child.push(path);
            }
        }
    }
    report
}

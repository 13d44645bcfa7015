//! Simulated multi-node distribution.
//!
//! Child numbers are 16 bits wide: the top [`NODE_BITS`] bits name a node
//! relative to the calling space's home node, the remaining bits a local
//! child. A `Put`/`Get` naming another node first migrates the caller
//! there; a stopping space migrates back to its home node. Migration ships
//! only registers and a page summary. Pages then move on demand, one
//! `PageRequest`/`PageReply` pair per page, and each node keeps read-only
//! copies keyed by page version so a space returning to a node refetches
//! only the pages written since it left.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use parking_lot::Mutex;
use thiserror::Error;

use crate::memimg::{MemoryImage, PAGE_SHIFT};

pub const NODE_BITS: u32 = 5;
pub const LOCAL_BITS: u32 = 11;
pub const MAX_NODES: usize = 1 << NODE_BITS;
pub const LOCAL_MASK: u32 = (1 << LOCAL_BITS) - 1;
/// Highest local child number.
pub const LOCAL_MAX: u32 = LOCAL_MASK;

pub type NodeId = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("node field {field} names no node in a {nodes}-node cluster")]
    NoSuchNode { field: u32, nodes: usize },
    #[error("child number {0:#x} exceeds 16 bits")]
    BadChildNumber(u32),
    #[error("cluster size {0} outside 1..=32")]
    BadSize(usize),
}

/// Builds a child number from a node field and a local number.
pub fn child_number(node_field: u32, local: u32) -> u32 {
    ((node_field & (MAX_NODES as u32 - 1)) << LOCAL_BITS) | (local & LOCAL_MASK)
}

/// Splits a child number into (node field, local child).
pub fn split_child(child: u32) -> Result<(u32, u32), ClusterError> {
    if child >> (NODE_BITS + LOCAL_BITS) != 0 {
        return Err(ClusterError::BadChildNumber(child));
    }
    Ok((child >> LOCAL_BITS, child & LOCAL_MASK))
}

/// Topology of the simulated cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    nodes: usize,
}

impl Topology {
    pub fn new(nodes: usize) -> Result<Self, ClusterError> {
        if !(1..=MAX_NODES).contains(&nodes) {
            return Err(ClusterError::BadSize(nodes));
        }
        Ok(Topology { nodes })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Maps a child number to (absolute node, local child) for a caller
    /// whose home is `home`. Node field 0 is always the home node.
    pub fn resolve_child(&self, home: NodeId, child: u32) -> Result<(NodeId, u32), ClusterError> {
        let (field, local) = split_child(child)?;
        if field as usize >= self.nodes {
            return Err(ClusterError::NoSuchNode {
                field,
                nodes: self.nodes,
            });
        }
        Ok((
            ((home as usize + field as usize) % self.nodes) as NodeId,
            local,
        ))
    }

    /// Parses the plain-text topology format: `key=value` lines, `#`
    /// comments, one required key `nodes`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut nodes = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            match k.trim() {
                "nodes" => {
                    let n: usize = v
                        .trim()
                        .parse()
                        .map_err(|_| format!("line {}: bad node count", i + 1))?;
                    nodes = Some(n);
                }
                other => return Err(format!("line {}: unknown key `{other}`", i + 1)),
            }
        }
        let n = nodes.ok_or("missing `nodes`")?;
        Topology::new(n).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    /// Register state plus address-space summary.
    Migrate,
    PageRequest,
    PageReply,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MigrationMessage {
    pub kind: MessageKind,
    pub from: NodeId,
    pub to: NodeId,
    /// Page index for page messages; mapped-page count for migrations.
    pub arg: u32,
}

impl fmt::Display for MigrationMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            MessageKind::Migrate => "migrate",
            MessageKind::PageRequest => "page_request",
            MessageKind::PageReply => "page_reply",
        };
        write!(f, "{kind} {}->{} {}", self.from, self.to, self.arg)
    }
}

/// Per-node read-only page caches, shared by all spaces.
pub struct Cluster {
    topology: Topology,
    caches: Vec<Mutex<HashSet<(u64, u32, u64)>>>,
}

impl Cluster {
    pub fn new(topology: Topology) -> Self {
        Cluster {
            topology,
            caches: (0..topology.nodes())
                .map(|_| Mutex::new(HashSet::new()))
                .collect(),
        }
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn distributed(&self) -> bool {
        self.topology.nodes() > 1
    }

    fn cached(&self, node: NodeId, key: (u64, u32, u64)) -> bool {
        self.caches[node as usize].lock().contains(&key)
    }

    fn insert(&self, node: NodeId, keys: impl Iterator<Item = (u64, u32, u64)>) {
        self.caches[node as usize].lock().extend(keys);
    }
}

/// Where one space is and which of its pages are present there.
#[derive(Debug, Clone)]
pub struct Paging {
    pub home: NodeId,
    pub current: NodeId,
    // Every page is local: the space has not left the node it was built on.
    all_resident: bool,
    resident: HashSet<u32>,
    // Node the space last left, asked for pages that are not cached.
    source: NodeId,
    pub log: Vec<MigrationMessage>,
}

impl Paging {
    pub fn new(home: NodeId) -> Self {
        Paging {
            home,
            current: home,
            all_resident: true,
            resident: HashSet::new(),
            source: home,
            log: Vec::new(),
        }
    }

    /// A fresh copy of this space's placement for a cloned space.
    pub fn fork(&self) -> Self {
        Paging::new(self.home)
    }

    /// Makes one page present at the current node, fetching it unless the
    /// node caches the page's current version.
    pub fn touch(&mut self, cluster: &Cluster, space: u64, mem: &MemoryImage, page: u32) {
        if self.all_resident || !cluster.distributed() || self.resident.contains(&page) {
            return;
        }
        let Some(version) = mem.page_version(page) else {
            return;
        };
        let key = (space, page, version);
        if !cluster.cached(self.current, key) {
            self.log.push(MigrationMessage {
                kind: MessageKind::PageRequest,
                from: self.current,
                to: self.source,
                arg: page,
            });
            self.log.push(MigrationMessage {
                kind: MessageKind::PageReply,
                from: self.source,
                to: self.current,
                arg: page,
            });
        }
        self.resident.insert(page);
    }

    /// Touches every page overlapping `[addr, addr+len)`.
    pub fn touch_range(
        &mut self,
        cluster: &Cluster,
        space: u64,
        mem: &MemoryImage,
        addr: u32,
        len: u64,
    ) {
        if self.all_resident || !cluster.distributed() {
            return;
        }
        for p in pages_in(mem, addr, len) {
            self.touch(cluster, space, mem, p);
        }
    }

    /// Records pages the kernel just wrote at the current node as present.
    pub fn place_range(&mut self, cluster: &Cluster, mem: &MemoryImage, addr: u32, len: u64) {
        if self.all_resident || !cluster.distributed() {
            return;
        }
        self.resident.extend(pages_in(mem, addr, len));
    }

    /// Moves the space to `to`, leaving the pages it holds cached at the
    /// node it leaves.
    pub fn migrate(&mut self, cluster: &Cluster, space: u64, mem: &MemoryImage, to: NodeId) {
        if self.current == to {
            return;
        }
        let here = self.current;
        let keys: Vec<(u64, u32, u64)> = if self.all_resident {
            mem.page_indices()
                .map(|p| (space, p, mem.page_version(p).unwrap()))
                .collect()
        } else {
            self.resident
                .iter()
                .filter_map(|&p| mem.page_version(p).map(|v| (space, p, v)))
                .collect()
        };
        cluster.insert(here, keys.into_iter());
        self.log.push(MigrationMessage {
            kind: MessageKind::Migrate,
            from: here,
            to,
            arg: mem.mapped_pages() as u32,
        });
        self.source = here;
        self.current = to;
        self.all_resident = false;
        self.resident.clear();
    }

    /// Marks every page present at the current node; used when the kernel
    /// builds a space in place.
    pub fn settle(&mut self) {
        self.all_resident = true;
        self.resident.clear();
    }
}

fn pages_in(mem: &MemoryImage, addr: u32, len: u64) -> Vec<u32> {
    if len == 0 {
        return Vec::new();
    }
    let first = addr >> PAGE_SHIFT;
    let last = ((addr as u64 + len - 1).min(u32::MAX as u64) >> PAGE_SHIFT) as u32;
    if (last - first) as usize > mem.mapped_pages() {
        mem.page_indices()
            .filter(|p| (first..=last).contains(p))
            .collect()
    } else {
        (first..=last).collect()
    }
}

/// Aggregated message statistics of one run, ordered by space path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageReport {
    pub per_space: BTreeMap<String, Vec<MigrationMessage>>,
}

impl MessageReport {
    pub fn count(&self, kind: MessageKind) -> usize {
        self.per_space
            .values()
            .flatten()
            .filter(|m| m.kind == kind)
            .count()
    }

    /// One line per message: `<space path> <kind> <from>-><to> <arg>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (path, msgs) in &self.per_space {
            for m in msgs {
                out.push_str(path);
                out.push(' ');
                out.push_str(&m.to_string());
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memimg::PAGE_SIZE;

    #[test]
    fn node_field_zero_is_home() {
        let t = Topology::new(4).unwrap();
        assert_eq!(t.resolve_child(2, child_number(0, 9)).unwrap(), (2, 9));
        assert_eq!(t.resolve_child(0, 9).unwrap(), (0, 9));
    }

    #[test]
    fn bit_split() {
        let cn = child_number(3, 5);
        assert_eq!(split_child(cn).unwrap(), (3, 5));
        let t = Topology::new(8).unwrap();
        assert_eq!(t.resolve_child(0, cn).unwrap(), (3, 5));
        assert_eq!(t.resolve_child(6, cn).unwrap(), (1, 5));
    }

    #[test]
    fn node_out_of_range() {
        let t = Topology::new(2).unwrap();
        assert_eq!(
            t.resolve_child(0, child_number(3, 1)),
            Err(ClusterError::NoSuchNode { field: 3, nodes: 2 })
        );
        assert!(Topology::new(0).is_err());
        assert!(Topology::new(33).is_err());
        assert!(split_child(1 << 16).is_err());
    }

    #[test]
    fn topology_text() {
        assert_eq!(
            Topology::parse("# cluster\nnodes = 4\n").unwrap().nodes(),
            4
        );
        assert!(Topology::parse("nodes=64").is_err());
        assert!(Topology::parse("racks=2").is_err());
        assert!(Topology::parse("").is_err());
    }

    #[test]
    fn demand_fetch_once_then_cached_on_return() {
        let cluster = Cluster::new(Topology::new(2).unwrap());
        let mut mem = MemoryImage::new();
        mem.load(0, &vec![1u8; 3 * PAGE_SIZE]).unwrap();
        let mut p = Paging::new(0);
        p.migrate(&cluster, 7, &mem, 1);
        p.touch(&cluster, 7, &mem, 0);
        p.touch(&cluster, 7, &mem, 0);
        assert_eq!(p.log.len(), 3);
        p.migrate(&cluster, 7, &mem, 0);
        // Back home: page 0 unchanged, cached at node 0 when we first left.
        p.touch(&cluster, 7, &mem, 0);
        assert_eq!(p.log.len(), 4);
        // Revisit node 1: cached there from the last stay.
        p.migrate(&cluster, 7, &mem, 1);
        p.touch(&cluster, 7, &mem, 0);
        assert_eq!(p.log.len(), 5);
        // Written at node 1: node 0 holds only the old version.
        mem.write(0, &[2]).unwrap();
        p.migrate(&cluster, 7, &mem, 0);
        p.touch(&cluster, 7, &mem, 0);
        assert_eq!(p.log.len(), 8);
        // Node 1 kept the new version when the space left it.
        p.migrate(&cluster, 7, &mem, 1);
        p.touch(&cluster, 7, &mem, 0);
        let kinds: Vec<_> = p.log.iter().map(|m| m.kind).collect();
        assert_eq!(
            kinds
                .iter()
                .filter(|k| **k == MessageKind::PageRequest)
                .count(),
            2
        );
    }
}

//! Mount-time recovery and the offline consistency checker.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use crate::error::{FsError, Result};
use crate::fs::dir;
use crate::fs::tree::{height_for_size, walk};
use crate::layout::{
    bit_get, inode_read, read_region_map, Bitmap, InodeType, RegionMap, BLOCK_SIZE, ROOT_INODE,
};
use crate::pmsim::{PmDevice, LINE_SIZE};
use crate::txn::apply_logged_change;
use crate::wal::{EntryType, LogEntry, RedoLog, TxnNo};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    /// Committed transactions without an End record, replayed.
    pub replayed: u32,
    /// Transactions without a Commit record, dropped.
    pub discarded: u32,
    /// Transactions already complete.
    pub skipped: u32,
    /// Log entries that were scanned.
    pub entries: u64,
    /// Bits that an uncommitted transaction meant to set but are already set
    /// in PM with no committed transaction in the log to explain them.
    pub anomalies: Vec<String>,
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entries={} replayed={} discarded={} skipped={} anomalies={}",
            self.entries,
            self.replayed,
            self.discarded,
            self.skipped,
            self.anomalies.len()
        )
    }
}

#[derive(Debug, Default)]
struct Incarnation {
    entries: Vec<(u64, LogEntry)>,
    commit: Option<u64>,
    ended: bool,
}

fn set_bit_of(e: &LogEntry) -> Option<(Bitmap, u64)> {
    match e.kind {
        EntryType::SetFbbBit => Some((Bitmap::Blocks, e.data3 as u64)),
        EntryType::SetInodeBit => Some((Bitmap::Inodes, e.data3 as u64)),
        _ => None,
    }
}

/// Brings the device to a consistent state: replays committed but unfinished
/// transactions in commit order, drops uncommitted ones and empties the log.
/// Every write is absolute, so a crash during recovery is handled by simply
/// recovering again.
pub fn recover(dev: &mut PmDevice) -> Result<RecoveryReport> {
    let map = read_region_map(dev)?;
    let mut log = RedoLog::open(dev, &map, 100)?;
    let mut report = RecoveryReport::default();
    if log.is_empty() {
        return Ok(report);
    }

    let mut incs: Vec<Incarnation> = Vec::new();
    let mut current: HashMap<TxnNo, usize> = HashMap::new();
    for r in log.scan(dev) {
        let (idx, e) = r?;
        report.entries += 1;
        if e.kind == EntryType::Begin {
            current.insert(e.txn, incs.len());
            incs.push(Incarnation::default());
        }
        // entries whose Begin was trimmed belong to finished transactions
        let Some(&i) = current.get(&e.txn) else { continue };
        let inc = &mut incs[i];
        inc.entries.push((idx, e));
        match e.kind {
            EntryType::Commit => inc.commit = Some(idx),
            EntryType::End => inc.ended = true,
            _ => {}
        }
    }

    let committed_sets: HashSet<(Bitmap, u64)> = incs
        .iter()
        .filter(|i| i.commit.is_some())
        .flat_map(|i| i.entries.iter().filter_map(|(_, e)| set_bit_of(e)))
        .collect();
    let pm_fb = dev.read(map.fb_map_off, map.fb_map_len)?;
    let pm_fi = dev.read(map.fi_map_off, map.fi_map_len)?;

    let mut redo: Vec<(u64, &Incarnation)> = Vec::new();
    for inc in &incs {
        match (inc.commit, inc.ended) {
            (_, true) => report.skipped += 1,
            (Some(c), false) => redo.push((c, inc)),
            (None, false) => {
                report.discarded += 1;
                for (which, i) in inc.entries.iter().filter_map(|(_, e)| set_bit_of(e)) {
                    let bits = if which == Bitmap::Blocks { &pm_fb } else { &pm_fi };
                    if i < which.limit(&map) && bit_get(bits, i) && !committed_sets.contains(&(which, i)) {
                        report.anomalies.push(format!("{which:?} bit {i} set by uncommitted transaction"));
                    }
                }
            }
        }
    }

    redo.sort_by_key(|(c, _)| *c);
    let mut touched = BTreeSet::new();
    for (c, _) in &redo {
        for (_, e) in log.chain(dev, *c)? {
            apply_logged_change(dev, &map, &e, &mut touched)?;
        }
        report.replayed += 1;
    }
    for line in &touched {
        dev.clwb(line * LINE_SIZE as u64)?;
    }
    dev.sfence();
    log.clear(dev)?;
    Ok(report)
}

/// One failed consistency check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.check, self.detail)
    }
}

struct Checker<'a> {
    dev: &'a PmDevice,
    map: RegionMap,
    fb: Vec<u8>,
    fi: Vec<u8>,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn flag(&mut self, check: &'static str, detail: String) {
        self.out.push(Violation { check, detail });
    }
}

/// Checks a quiescent image. Returns every violation found; empty means consistent.
pub fn fsck(dev: &PmDevice) -> Vec<Violation> {
    let map = match read_region_map(dev) {
        Ok(m) => m,
        Err(e) => return vec![Violation { check: "superblock", detail: e.to_string() }],
    };
    let (fb, fi) = match (dev.read(map.fb_map_off, map.fb_map_len), dev.read(map.fi_map_off, map.fi_map_len)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return vec![Violation { check: "bitmaps", detail: e.to_string() }],
    };
    let mut c = Checker { dev, map, fb, fi, out: Vec::new() };
    if let Err(e) = check(&mut c) {
        c.flag("structure", e.to_string());
    }
    c.out
}

fn check(c: &mut Checker<'_>) -> Result<()> {
    let map = c.map;
    if let Err(e) = RedoLog::open(c.dev, &map, 100) {
        c.flag("log", e.to_string());
    }
    for b in 0..map.first_data_block() {
        if !bit_get(&c.fb, b) {
            c.flag("metadata-blocks", format!("metadata block {b} not marked allocated"));
        }
    }

    let mut block_owner: HashMap<u32, u32> = HashMap::new();
    let mut reached: HashSet<u32> = HashSet::new();
    let mut queue = VecDeque::from([(ROOT_INODE, InodeType::Directory)]);
    reached.insert(ROOT_INODE);

    while let Some((n, expect)) = queue.pop_front() {
        if !bit_get(&c.fi, n as u64) {
            c.flag("inode-bitmap", format!("reachable inode {n} not marked allocated"));
        }
        let inode = inode_read(c.dev, &map, n)?;
        if inode.kind != expect {
            c.flag("inode-type", format!("inode {n} is {:?}, directory entry says {expect:?}", inode.kind));
            continue;
        }
        let height = height_for_size(inode.i_size);
        let tree = match walk(c.dev, &map, inode.i_block, height) {
            Ok(t) => t,
            Err(e) => {
                c.flag("tree", format!("inode {n}: {e}"));
                continue;
            }
        };
        for b in tree.leaves.iter().map(|(_, b)| *b).chain(tree.interior.iter().copied()) {
            if !bit_get(&c.fb, b as u64) {
                c.flag("block-bitmap", format!("block {b} of inode {n} not marked allocated"));
            }
            if let Some(other) = block_owner.insert(b, n) {
                c.flag("duplicate-block", format!("block {b} referenced by inodes {other} and {n}"));
            }
        }
        let nblocks = inode.i_size.div_ceil(BLOCK_SIZE);
        if tree.leaves.len() as u64 != inode.i_blocks as u64 {
            c.flag("block-count", format!("inode {n}: i_blocks {} but {} leaves", inode.i_blocks, tree.leaves.len()));
        }
        if inode.i_blocks as u64 != nblocks {
            c.flag("size", format!("inode {n}: size {} needs {nblocks} blocks, i_blocks {}", inode.i_size, inode.i_blocks));
        }
        if let Some((l, _)) = tree.leaves.iter().find(|(l, _)| *l >= nblocks) {
            c.flag("size", format!("inode {n}: leaf {l} beyond size {}", inode.i_size));
        }
        if inode.kind != InodeType::Directory {
            continue;
        }
        if inode.i_size % BLOCK_SIZE != 0 {
            c.flag("dirent", format!("directory {n} size {} not block aligned", inode.i_size));
        }
        for (lblk, b) in &tree.leaves {
            let block = c.dev.read(map.block_addr(*b), BLOCK_SIZE)?;
            let entries = match dir::parse_block(&block) {
                Ok(e) => e,
                Err(e) => {
                    c.flag("dirent", format!("directory {n} block {lblk}: {e}"));
                    continue;
                }
            };
            let mut names = HashSet::new();
            for d in entries.into_iter().filter(dir::Dirent::is_live) {
                if !names.insert(d.name.clone()) {
                    c.flag("dirent", format!("directory {n}: duplicate name {:?}", String::from_utf8_lossy(&d.name)));
                }
                let Some(kind) = InodeType::from_u8(d.file_type).filter(|k| *k != InodeType::Free) else {
                    c.flag("dirent", format!("directory {n}: bad file type {}", d.file_type));
                    continue;
                };
                if d.inode as u64 >= map.inode_count {
                    c.flag("dirent", format!("directory {n}: inode {} out of range", d.inode));
                } else if !reached.insert(d.inode) {
                    c.flag("duplicate-inode", format!("inode {} linked more than once", d.inode));
                } else {
                    queue.push_back((d.inode, kind));
                }
            }
        }
    }

    for n in 0..map.inode_count {
        let allocated = bit_get(&c.fi, n);
        if allocated && !reached.contains(&(n as u32)) {
            c.flag("orphan-inode", format!("inode {n} allocated but unreachable"));
        }
        if !allocated {
            let raw = c.dev.view(map.inode_addr(n as u32), 32)?;
            if raw.iter().any(|b| *b != 0) {
                c.flag("free-inode", format!("free inode {n} has non-zero contents"));
            }
        }
    }
    for b in map.first_data_block()..map.total_blocks {
        if bit_get(&c.fb, b) && !block_owner.contains_key(&(b as u32)) {
            c.flag("leaked-block", format!("block {b} allocated but unreferenced"));
        }
    }
    Ok(())
}

/// Fails with the first violation, for callers that want a `Result`.
pub fn fsck_strict(dev: &PmDevice) -> Result<()> {
    match fsck(dev).into_iter().next() {
        None => Ok(()),
        Some(v) => Err(FsError::Corrupt(v.to_string())),
    }
}

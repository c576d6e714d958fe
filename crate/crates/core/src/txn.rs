//! Transactions over the redo log.
//!
//! A transaction stages inode changes in RAM and logs every metadata change
//! as it happens. Allocations set the RAM bitmap bit immediately so no other
//! transaction can be granted the same block or inode; frees are only logged
//! and deferred until commit. Commit writes the Commit record, reads it back,
//! replays the transaction's chain into the PM metadata, flushes, fences and
//! finally writes the End record.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{FsError, Result};
use crate::fs::tree::height_for_size;
use crate::layout::{
    bit_get, bit_put, inode_read, inode_write, pm_set_bit, Bitmap, Inode, InodeType, RegionMap, BLOCK_SIZE,
};
use crate::pmsim::{PmDevice, LINE_SIZE};
use crate::wal::{EntryType, LogEntry, RedoLog, TxnNo, ROOT_SLOT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsConfig {
    /// Flush file data blocks before logging them. `false` is the
    /// "no data flush" comparison mode and gives up crash consistency of data.
    pub flush_data: bool,
    /// Log fill percentage that triggers a trim.
    pub trim_threshold_pct: u8,
    /// Apply bitmap resets to RAM immediately instead of at commit. Only for
    /// demonstrating the reuse hazard in tests; never enable otherwise.
    #[doc(hidden)]
    pub eager_resets: bool,
}

impl Default for FsConfig {
    fn default() -> Self {
        FsConfig { flush_data: true, trim_threshold_pct: 75, eager_resets: false }
    }
}

/// Flush counts split by what was being flushed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlushStats {
    pub data_clwbs: u64,
    pub data_sfences: u64,
    pub tree_clwbs: u64,
    pub meta_clwbs: u64,
}

impl FlushStats {
    pub fn total_clwbs(&self) -> u64 {
        self.data_clwbs + self.tree_clwbs + self.meta_clwbs
    }

    pub fn since(&self, earlier: &FlushStats) -> FlushStats {
        FlushStats {
            data_clwbs: self.data_clwbs - earlier.data_clwbs,
            data_sfences: self.data_sfences - earlier.data_sfences,
            tree_clwbs: self.tree_clwbs - earlier.tree_clwbs,
            meta_clwbs: self.meta_clwbs - earlier.meta_clwbs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnState {
    Active,
    Committed,
    Ended,
    Aborted,
}

/// RAM copy of an inode being modified by a transaction.
#[derive(Clone, Debug)]
pub struct StagedInode {
    pub inode: Inode,
    /// Tree height; tracked explicitly because the tree may grow before `i_size` does.
    pub height: u32,
    /// Logical block -> block written by this transaction.
    pub pending_blocks: BTreeMap<u64, u32>,
    logged_root: u32,
}

#[derive(Debug)]
pub struct Txn {
    pub txn_no: TxnNo,
    pub(crate) inodes: BTreeMap<u32, StagedInode>,
    pub(crate) deferred_resets: Vec<(Bitmap, u64)>,
    pub(crate) set_bits: Vec<(Bitmap, u64)>,
    /// Tree nodes allocated by this transaction; these may be updated in place.
    pub(crate) fresh_nodes: BTreeSet<u32>,
    pub(crate) last_entry: Option<u64>,
    entries: u32,
    pub state: TxnState,
    pub(crate) poisoned: bool,
}

impl Txn {
    fn is_live(&self) -> bool {
        matches!(self.state, TxnState::Active | TxnState::Committed)
    }

    pub fn last_entry(&self) -> Option<u64> {
        self.last_entry
    }

    pub fn staged(&self, inum: u32) -> Option<&StagedInode> {
        self.inodes.get(&inum)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum InodeUpdate {
    /// Logical block now maps to `block`.
    BlockAddr { logical: u64, block: u32 },
    /// New tree root.
    Root(u32),
    Size(u64),
    Blocks(u32),
}

/// DRAM copies of the allocation bitmaps and committed inodes.
#[derive(Clone, Debug)]
pub struct RamMetadata {
    pub fbb: Vec<u8>,
    pub fib: Vec<u8>,
    inode_cache: HashMap<u32, Inode>,
    block_hint: u64,
    inode_hint: u64,
}

impl RamMetadata {
    pub fn load(dev: &PmDevice, map: &RegionMap) -> Result<Self> {
        Ok(RamMetadata {
            fbb: dev.read(map.fb_map_off, map.fb_map_len)?,
            fib: dev.read(map.fi_map_off, map.fi_map_len)?,
            inode_cache: HashMap::new(),
            block_hint: map.first_data_block(),
            inode_hint: 0,
        })
    }

    pub fn block_allocated(&self, b: u64) -> bool {
        bit_get(&self.fbb, b)
    }

    pub fn inode_allocated(&self, n: u64) -> bool {
        bit_get(&self.fib, n)
    }

    fn clear(&mut self, which: Bitmap, i: u64) {
        match which {
            Bitmap::Blocks => {
                bit_put(&mut self.fbb, i, false);
                self.block_hint = self.block_hint.min(i);
            }
            Bitmap::Inodes => {
                bit_put(&mut self.fib, i, false);
                self.inode_hint = self.inode_hint.min(i);
            }
        }
    }
}

fn first_clear(bits: &[u8], from: u64, limit: u64) -> Option<u64> {
    let mut i = from;
    while i < limit {
        let byte = bits[(i / 8) as usize];
        if byte == 0xFF && i % 8 == 0 {
            i += 8;
            continue;
        }
        if byte & (1 << (i % 8)) == 0 {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Applies one logged metadata change to its home location in PM. Every
/// change is an absolute write, so applying it again is harmless. Touched
/// cache lines are added to `touched`.
pub fn apply_logged_change(
    dev: &mut PmDevice,
    map: &RegionMap,
    e: &LogEntry,
    touched: &mut BTreeSet<u64>,
) -> Result<()> {
    let line = |a: u64| a / LINE_SIZE as u64;
    let check_inode = |n: u64| -> Result<u32> {
        if n >= map.inode_count {
            Err(FsError::Corrupt(format!("logged inode {n} out of range")))
        } else {
            Ok(n as u32)
        }
    };
    let write_inode = |dev: &mut PmDevice, touched: &mut BTreeSet<u64>, n: u32, f: &dyn Fn(&mut Inode)| -> Result<()> {
        let mut inode = inode_read(dev, map, n)?;
        f(&mut inode);
        inode_write(dev, map, n, &inode)?;
        let a = map.inode_addr(n);
        touched.insert(line(a));
        touched.insert(line(a + 31));
        Ok(())
    };
    match e.kind {
        EntryType::SetFbbBit | EntryType::ResetFbbBit => {
            let on = e.kind == EntryType::SetFbbBit;
            let a = pm_set_bit(dev, map, Bitmap::Blocks, e.data3 as u64, on)?;
            touched.insert(line(a));
        }
        EntryType::SetInodeBit => {
            let n = check_inode(e.data3 as u64)?;
            let kind = InodeType::from_u8(e.data1 as u8)
                .filter(|k| *k != InodeType::Free)
                .ok_or_else(|| FsError::Corrupt(format!("logged inode type {}", e.data1)))?;
            let a = pm_set_bit(dev, map, Bitmap::Inodes, n as u64, true)?;
            touched.insert(line(a));
            write_inode(dev, touched, n, &|i| *i = Inode::new(kind))?;
        }
        EntryType::ResetInodeBit => {
            let n = check_inode(e.data3 as u64)?;
            let a = pm_set_bit(dev, map, Bitmap::Inodes, n as u64, false)?;
            touched.insert(line(a));
            write_inode(dev, touched, n, &|i| *i = Inode::FREE)?;
        }
        EntryType::UpdBlockAddr => {
            // leaf mappings live in tree nodes that were flushed before the
            // commit record; only the root pointer is inode metadata
            if e.data2 == ROOT_SLOT {
                let n = check_inode(e.data1 as u64)?;
                let root = e.data3;
                write_inode(dev, touched, n, &|i| i.i_block = root)?;
            }
        }
        EntryType::UpdISize => {
            let n = check_inode(e.data1 as u64)?;
            let v = e.data3 as u64;
            write_inode(dev, touched, n, &|i| i.i_size = v)?;
        }
        EntryType::UpdIBlocks => {
            let n = check_inode(e.data1 as u64)?;
            let v = e.data3;
            write_inode(dev, touched, n, &|i| i.i_blocks = v)?;
        }
        EntryType::Begin | EntryType::Commit | EntryType::End => {}
    }
    Ok(())
}

/// Which part of the write path a flush belongs to, for accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlushClass {
    Data,
    Tree,
}

/// The transaction manager: device, log, RAM metadata and in-flight transactions.
pub struct Engine {
    pub(crate) dev: PmDevice,
    pub(crate) map: RegionMap,
    pub(crate) log: RedoLog,
    pub(crate) ram: RamMetadata,
    txns: BTreeMap<TxnNo, Txn>,
    writers: HashMap<u32, TxnNo>,
    next_txn: u32,
    pub(crate) config: FsConfig,
    pub(crate) flush: FlushStats,
}

impl Engine {
    /// Builds RAM state from a recovered device.
    pub fn new(dev: PmDevice, map: RegionMap, config: FsConfig) -> Result<Self> {
        let log = RedoLog::open(&dev, &map, config.trim_threshold_pct)?;
        let ram = RamMetadata::load(&dev, &map)?;
        Ok(Engine {
            dev,
            map,
            log,
            ram,
            txns: BTreeMap::new(),
            writers: HashMap::new(),
            next_txn: 1,
            config,
            flush: FlushStats::default(),
        })
    }

    pub fn device(&self) -> &PmDevice {
        &self.dev
    }

    pub fn into_device(self) -> PmDevice {
        self.dev
    }

    pub fn map(&self) -> &RegionMap {
        &self.map
    }

    pub fn log(&self) -> &RedoLog {
        &self.log
    }

    pub fn ram(&self) -> &RamMetadata {
        &self.ram
    }

    pub fn flush_stats(&self) -> FlushStats {
        self.flush
    }

    pub fn txn(&self, no: TxnNo) -> Result<&Txn> {
        self.txns.get(&no).ok_or_else(|| FsError::Logic(format!("no transaction {no}")))
    }

    fn txn_mut(&mut self, no: TxnNo) -> Result<&mut Txn> {
        let t = self.txns.get_mut(&no).ok_or_else(|| FsError::Logic(format!("no transaction {no}")))?;
        if t.state != TxnState::Active {
            return Err(FsError::Logic(format!("transaction {no} is {:?}", t.state)));
        }
        Ok(t)
    }

    pub fn active_txns(&self) -> usize {
        self.txns.len()
    }

    pub fn writer_of(&self, inum: u32) -> Option<TxnNo> {
        self.writers.get(&inum).copied()
    }

    pub fn poison(&mut self, no: TxnNo) {
        if let Some(t) = self.txns.get_mut(&no) {
            t.poisoned = true;
        }
    }

    fn append(&mut self, no: TxnNo, mut entry: LogEntry, reserve: u64) -> Result<u64> {
        entry.prev = self.txn(no)?.last_entry;
        let txns = &self.txns;
        let idx = self.log.append(&mut self.dev, &entry, reserve, |t| {
            txns.get(&t).is_some_and(Txn::is_live)
        })?;
        let t = self.txns.get_mut(&no).expect("transaction vanished during append");
        t.last_entry = Some(idx);
        t.entries += 1;
        Ok(idx)
    }

    /// Starts a transaction and logs its Begin record.
    pub fn begin(&mut self) -> Result<TxnNo> {
        let mut candidate = self.next_txn;
        while self.txns.contains_key(&TxnNo(candidate)) {
            candidate = if candidate >= TxnNo::MAX { 1 } else { candidate + 1 };
        }
        self.next_txn = if candidate >= TxnNo::MAX { 1 } else { candidate + 1 };
        let no = TxnNo(candidate);
        self.txns.insert(
            no,
            Txn {
                txn_no: no,
                inodes: BTreeMap::new(),
                deferred_resets: Vec::new(),
                set_bits: Vec::new(),
                fresh_nodes: BTreeSet::new(),
                last_entry: None,
                entries: 0,
                state: TxnState::Active,
                poisoned: false,
            },
        );
        if let Err(e) = self.append(no, LogEntry::new(EntryType::Begin, no), 0) {
            self.txns.remove(&no);
            return Err(e);
        }
        Ok(no)
    }

    /// Last committed version of inode `n`.
    pub fn committed_inode(&mut self, n: u32) -> Result<Inode> {
        if let Some(i) = self.ram.inode_cache.get(&n) {
            return Ok(*i);
        }
        let i = inode_read(&self.dev, &self.map, n)?;
        self.ram.inode_cache.insert(n, i);
        Ok(i)
    }

    /// Copies inode `inum` into the transaction and takes its writer slot.
    pub fn attach(&mut self, no: TxnNo, inum: u32) -> Result<()> {
        match self.writers.get(&inum) {
            Some(&w) if w == no => return Ok(()),
            Some(_) => return Err(FsError::Busy(inum)),
            None => {}
        }
        if inum as u64 >= self.map.usable_inodes() || !self.ram.inode_allocated(inum as u64) {
            return Err(FsError::NotFound(format!("inode {inum}")));
        }
        let inode = self.committed_inode(inum)?;
        self.txn_mut(no)?.inodes.insert(
            inum,
            StagedInode {
                inode,
                height: height_for_size(inode.i_size),
                pending_blocks: BTreeMap::new(),
                logged_root: inode.i_block,
            },
        );
        self.writers.insert(inum, no);
        Ok(())
    }

    pub fn staged(&self, no: TxnNo, inum: u32) -> Result<&StagedInode> {
        self.txn(no)?
            .inodes
            .get(&inum)
            .ok_or_else(|| FsError::Logic(format!("inode {inum} not attached to txn {no}")))
    }

    pub(crate) fn staged_mut(&mut self, no: TxnNo, inum: u32) -> Result<&mut StagedInode> {
        self.txn_mut(no)?
            .inodes
            .get_mut(&inum)
            .ok_or_else(|| FsError::Logic(format!("inode {inum} not attached to txn {no}")))
    }

    pub fn is_fresh_node(&self, no: TxnNo, block: u32) -> bool {
        self.txns.get(&no).is_some_and(|t| t.fresh_nodes.contains(&block))
    }

    pub(crate) fn mark_fresh_node(&mut self, no: TxnNo, block: u32) -> Result<()> {
        self.txn_mut(no)?.fresh_nodes.insert(block);
        Ok(())
    }

    /// Takes a free block from the RAM bitmap without logging it yet; the
    /// caller logs it with [`Engine::log_block_set`] once its contents are durable.
    pub fn claim_block(&mut self, no: TxnNo) -> Result<u32> {
        self.txn_mut(no)?;
        let b = first_clear(&self.ram.fbb, self.ram.block_hint, self.map.total_blocks).ok_or(FsError::NoSpace)?;
        bit_put(&mut self.ram.fbb, b, true);
        self.ram.block_hint = b + 1;
        self.txn_mut(no)?.set_bits.push((Bitmap::Blocks, b));
        Ok(b as u32)
    }

    pub fn log_block_set(&mut self, no: TxnNo, b: u32) -> Result<()> {
        self.append(no, LogEntry::bitmap(EntryType::SetFbbBit, no, b as u64)?, 0)?;
        Ok(())
    }

    /// Claims and logs a free block in one step.
    pub fn alloc_block(&mut self, no: TxnNo) -> Result<u32> {
        let b = self.claim_block(no)?;
        self.log_block_set(no, b)?;
        Ok(b)
    }

    /// Allocates an inode of `kind`, logs it and attaches it to the transaction.
    pub fn alloc_inode(&mut self, no: TxnNo, kind: InodeType) -> Result<u32> {
        self.txn_mut(no)?;
        let n = first_clear(&self.ram.fib, self.ram.inode_hint, self.map.usable_inodes()).ok_or(FsError::NoInodes)?;
        bit_put(&mut self.ram.fib, n, true);
        self.ram.inode_hint = n + 1;
        let t = self.txn_mut(no)?;
        t.set_bits.push((Bitmap::Inodes, n));
        let entry = LogEntry { data1: kind as u16, ..LogEntry::bitmap(EntryType::SetInodeBit, no, n)? };
        self.append(no, entry, 0)?;
        let n = n as u32;
        self.txn_mut(no)?.inodes.insert(
            n,
            StagedInode { inode: Inode::new(kind), height: 0, pending_blocks: BTreeMap::new(), logged_root: 0 },
        );
        self.writers.insert(n, no);
        Ok(n)
    }

    fn free_bit(&mut self, no: TxnNo, which: Bitmap, i: u64) -> Result<()> {
        let allocated = match which {
            Bitmap::Blocks => i < self.map.total_blocks && self.ram.block_allocated(i),
            Bitmap::Inodes => i < self.map.inode_count && self.ram.inode_allocated(i),
        };
        if !allocated {
            return Err(FsError::Logic(format!("free of unallocated {which:?} bit {i}")));
        }
        let t = self.txn_mut(no)?;
        if t.deferred_resets.contains(&(which, i)) {
            return Err(FsError::Logic(format!("double free of {which:?} bit {i}")));
        }
        let kind = match which {
            Bitmap::Blocks => EntryType::ResetFbbBit,
            Bitmap::Inodes => EntryType::ResetInodeBit,
        };
        self.append(no, LogEntry::bitmap(kind, no, i)?, 0)?;
        self.txn_mut(no)?.deferred_resets.push((which, i));
        if self.config.eager_resets {
            self.ram.clear(which, i);
        }
        Ok(())
    }

    /// Logs a block free; the RAM bit is cleared only when the transaction commits.
    pub fn free_block(&mut self, no: TxnNo, b: u32) -> Result<()> {
        self.free_bit(no, Bitmap::Blocks, b as u64)
    }

    pub fn free_inode(&mut self, no: TxnNo, n: u32) -> Result<()> {
        self.free_bit(no, Bitmap::Inodes, n as u64)
    }

    /// Updates the staged inode and logs the change.
    pub fn stage_inode_update(&mut self, no: TxnNo, inum: u32, update: InodeUpdate) -> Result<()> {
        let entry = match update {
            InodeUpdate::BlockAddr { logical, block } => {
                if logical >= ROOT_SLOT as u64 {
                    return Err(FsError::FileTooLarge);
                }
                LogEntry::block_addr(no, inum, logical, block)?
            }
            InodeUpdate::Root(block) => LogEntry::block_addr(no, inum, ROOT_SLOT as u64, block)?,
            InodeUpdate::Size(v) => LogEntry::inode_value(EntryType::UpdISize, no, inum, v)?,
            InodeUpdate::Blocks(v) => LogEntry::inode_value(EntryType::UpdIBlocks, no, inum, v as u64)?,
        };
        self.staged_mut(no, inum)?;
        self.append(no, entry, 0)?;
        let s = self.staged_mut(no, inum)?;
        match update {
            InodeUpdate::BlockAddr { logical, block } => {
                s.pending_blocks.insert(logical, block);
            }
            InodeUpdate::Root(block) => {
                s.inode.i_block = block;
                s.logged_root = block;
            }
            InodeUpdate::Size(v) => s.inode.i_size = v,
            InodeUpdate::Blocks(v) => s.inode.i_blocks = v,
        }
        Ok(())
    }

    /// Logs the staged root if it differs from the last logged one.
    pub(crate) fn sync_root(&mut self, no: TxnNo, inum: u32) -> Result<()> {
        let s = self.staged(no, inum)?;
        if s.inode.i_block != s.logged_root {
            let root = s.inode.i_block;
            self.stage_inode_update(no, inum, InodeUpdate::Root(root))?;
        }
        Ok(())
    }

    /// Stores a full block and, unless this is unflushed data, writes it back
    /// and fences so it is durable before anything refers to it.
    pub fn write_block(&mut self, block: u32, data: &[u8], class: FlushClass) -> Result<()> {
        debug_assert_eq!(data.len() as u64, BLOCK_SIZE);
        let addr = self.map.block_addr(block);
        self.dev.store(addr, data)?;
        if class == FlushClass::Data && !self.config.flush_data {
            return Ok(());
        }
        for off in (0..BLOCK_SIZE).step_by(LINE_SIZE) {
            self.dev.clwb(addr + off)?;
        }
        match class {
            FlushClass::Data => {
                self.flush.data_clwbs += BLOCK_SIZE / LINE_SIZE as u64;
                self.flush.data_sfences += 1;
            }
            FlushClass::Tree => self.flush.tree_clwbs += BLOCK_SIZE / LINE_SIZE as u64,
        }
        self.dev.sfence();
        Ok(())
    }

    /// In-place update of one child slot of a tree node owned by the transaction.
    pub(crate) fn write_slot(&mut self, node: u32, idx: u64, value: u32) -> Result<()> {
        let addr = self.map.block_addr(node) + idx * 4;
        self.dev.store(addr, &value.to_le_bytes())?;
        self.dev.clwb(addr)?;
        self.flush.tree_clwbs += 1;
        self.dev.sfence();
        Ok(())
    }

    /// The commit protocol. On success every change of the transaction is
    /// durable in the PM metadata and the End record is written.
    pub fn commit(&mut self, no: TxnNo) -> Result<()> {
        let t = self.txn_mut(no)?;
        if t.poisoned {
            self.abort(no)?;
            return Err(FsError::Aborted(no.0));
        }
        #[cfg(debug_assertions)]
        for (inum, s) in &t.inodes {
            if s.inode.kind != InodeType::Free {
                debug_assert_eq!(s.height, height_for_size(s.inode.i_size), "inode {inum} tree height");
            }
        }
        let preceding = t.entries;

        // 1-2: commit record, appended with a fence; keep a slot for End
        let commit = LogEntry { data3: preceding, ..LogEntry::new(EntryType::Commit, no) };
        let idx = self.append(no, commit, 1)?;
        self.txns.get_mut(&no).unwrap().state = TxnState::Committed;

        // 3: read the last word of the commit record back
        let word1 = self.dev.read_u64(self.log.slot_addr(idx) + 8)?;
        if word1 != commit.encode()[1] {
            return Err(FsError::ReadBackMismatch(idx));
        }

        // 4: replay the chain into PM metadata
        let chain = self.log.chain(&self.dev, idx)?;
        let mut touched = BTreeSet::new();
        for (_, e) in &chain {
            apply_logged_change(&mut self.dev, &self.map, e, &mut touched)?;
        }

        // 5: deferred resets reach the RAM bitmaps too
        let resets = std::mem::take(&mut self.txns.get_mut(&no).unwrap().deferred_resets);
        if !self.config.eager_resets {
            for (which, i) in resets {
                self.ram.clear(which, i);
            }
        }

        // 6-7: write back every touched metadata line, then fence
        for line in &touched {
            self.dev.clwb(line * LINE_SIZE as u64)?;
        }
        self.flush.meta_clwbs += touched.len() as u64;
        self.dev.sfence();

        // 8: end record
        self.append(no, LogEntry::new(EntryType::End, no), 0)?;

        let mut t = self.txns.remove(&no).unwrap();
        t.state = TxnState::Ended;
        for (inum, _) in t.inodes {
            self.writers.remove(&inum);
            self.ram.inode_cache.remove(&inum);
        }
        for (_, e) in &chain {
            if e.kind == EntryType::ResetInodeBit {
                self.ram.inode_cache.remove(&e.data3);
                self.writers.remove(&e.data3);
            }
        }
        Ok(())
    }

    /// Discards the transaction: RAM allocations are returned, nothing reaches PM.
    pub fn abort(&mut self, no: TxnNo) -> Result<()> {
        let mut t = self.txns.remove(&no).ok_or_else(|| FsError::Logic(format!("no transaction {no}")))?;
        if t.state != TxnState::Active {
            let state = t.state;
            self.txns.insert(no, t);
            return Err(FsError::Logic(format!("cannot abort transaction {no} in state {state:?}")));
        }
        for (which, i) in t.set_bits.drain(..) {
            self.ram.clear(which, i);
        }
        if self.config.eager_resets {
            // re-set anything the hazard mode released early
            for (which, i) in &t.deferred_resets {
                match which {
                    Bitmap::Blocks => bit_put(&mut self.ram.fbb, *i, true),
                    Bitmap::Inodes => bit_put(&mut self.ram.fib, *i, true),
                }
            }
        }
        for inum in t.inodes.keys() {
            self.writers.remove(inum);
        }
        t.state = TxnState::Aborted;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{mkfs, pm_bit, MkfsOptions, ROOT_INODE};
    use crate::pmsim::OrderingModel;

    fn engine() -> Engine {
        let mut dev = PmDevice::new(2 << 20, OrderingModel::PaperOrdered).unwrap();
        let map = mkfs(&mut dev, &MkfsOptions { log_blocks: 16, ..Default::default() }).unwrap();
        Engine::new(dev, map, FsConfig::default()).unwrap()
    }

    fn scan_kinds(e: &Engine) -> Vec<EntryType> {
        e.log.scan(&e.dev).map(|r| r.unwrap().1.kind).collect()
    }

    #[test]
    fn begin_logs_one_entry_and_numbers_differ() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let b = e.begin().unwrap();
        assert_ne!(a, b);
        assert_eq!(scan_kinds(&e), vec![EntryType::Begin, EntryType::Begin]);
    }

    #[test]
    fn attach_missing_inode_fails() {
        let mut e = engine();
        let t = e.begin().unwrap();
        assert!(matches!(e.attach(t, 77), Err(FsError::NotFound(_))));
    }

    #[test]
    fn second_writer_is_busy() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let b = e.begin().unwrap();
        e.attach(a, ROOT_INODE).unwrap();
        assert!(matches!(e.attach(b, ROOT_INODE), Err(FsError::Busy(0))));
    }

    #[test]
    fn alloc_distinct_and_visible_across_txns() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let b = e.begin().unwrap();
        let mut got = BTreeSet::new();
        for _ in 0..5 {
            assert!(got.insert(e.alloc_block(a).unwrap()));
            assert!(got.insert(e.alloc_block(b).unwrap()));
        }
    }

    #[test]
    fn abort_returns_allocations() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let blk = e.alloc_block(a).unwrap();
        let ino = e.alloc_inode(a, InodeType::File).unwrap();
        assert!(e.ram.block_allocated(blk as u64));
        e.abort(a).unwrap();
        assert!(!e.ram.block_allocated(blk as u64));
        assert!(!e.ram.inode_allocated(ino as u64));
        assert!(!pm_bit(&e.dev, &e.map, Bitmap::Blocks, blk as u64).unwrap());
        assert_eq!(e.active_txns(), 0);
    }

    #[test]
    fn free_is_deferred_until_commit() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let blk = e.alloc_block(a).unwrap();
        e.commit(a).unwrap();
        assert!(pm_bit(&e.dev, &e.map, Bitmap::Blocks, blk as u64).unwrap());

        let b = e.begin().unwrap();
        e.free_block(b, blk).unwrap();
        assert!(e.ram.block_allocated(blk as u64), "reset must not reach RAM before commit");
        let other = e.begin().unwrap();
        assert_ne!(e.alloc_block(other).unwrap(), blk);
        assert!(matches!(e.free_block(b, blk), Err(FsError::Logic(_))));
        e.commit(b).unwrap();
        assert!(!e.ram.block_allocated(blk as u64));
        assert!(!pm_bit(&e.dev, &e.map, Bitmap::Blocks, blk as u64).unwrap());
    }

    #[test]
    fn free_of_unallocated_is_error() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let free = e.map.total_blocks as u32 - 1;
        assert!(matches!(e.free_block(a, free), Err(FsError::Logic(_))));
    }

    #[test]
    fn stage_update_logs_fields() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let n = e.alloc_inode(a, InodeType::File).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::BlockAddr { logical: 0, block: 300 }).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::Size(10)).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::Size(10)).unwrap();
        let entries: Vec<LogEntry> = e.log.scan(&e.dev).map(|r| r.unwrap().1).collect();
        let upd = entries.iter().find(|x| x.kind == EntryType::UpdBlockAddr).unwrap();
        assert_eq!((upd.data1 as u32, upd.data2, upd.data3), (n, 0, 300));
        assert_eq!(entries.iter().filter(|x| x.kind == EntryType::UpdISize).count(), 2);
        assert!(matches!(
            e.stage_inode_update(a, n, InodeUpdate::Size(1 << 33)),
            Err(FsError::FieldOverflow { .. })
        ));
    }

    #[test]
    fn commit_sequence_and_pm_effects() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let n = e.alloc_inode(a, InodeType::File).unwrap();
        let blk = e.alloc_block(a).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::Root(blk)).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::Size(5)).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::Blocks(1)).unwrap();
        e.commit(a).unwrap();
        let kinds = scan_kinds(&e);
        assert_eq!(kinds.first(), Some(&EntryType::Begin));
        assert_eq!(&kinds[kinds.len() - 2..], &[EntryType::Commit, EntryType::End]);
        let ino = inode_read(&e.dev, &e.map, n).unwrap();
        assert_eq!((ino.kind, ino.i_block, ino.i_size, ino.i_blocks), (InodeType::File, blk, 5, 1));
        assert!(pm_bit(&e.dev, &e.map, Bitmap::Inodes, n as u64).unwrap());
        assert!(e.dev.is_quiescent());
    }

    #[test]
    fn set_then_reset_same_bit_last_wins() {
        let mut e = engine();
        let a = e.begin().unwrap();
        let blk = e.alloc_block(a).unwrap();
        e.free_block(a, blk).unwrap();
        e.commit(a).unwrap();
        assert!(!pm_bit(&e.dev, &e.map, Bitmap::Blocks, blk as u64).unwrap());
        assert!(!e.ram.block_allocated(blk as u64));
    }

    #[test]
    fn commit_applies_nothing_before_commit_record() {
        let mut e = engine();
        let before = e.dev.visible_image()[..e.map.data_off as usize].to_vec();
        let a = e.begin().unwrap();
        let n = e.alloc_inode(a, InodeType::File).unwrap();
        e.stage_inode_update(a, n, InodeUpdate::Size(3)).unwrap();
        let after = &e.dev.visible_image()[..e.map.log_off as usize];
        assert_eq!(after, &before[..e.map.log_off as usize]);
    }
}

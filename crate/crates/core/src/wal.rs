//! Metadata redo log.
//!
//! The log region starts with a 32-byte header `{log_size_blocks, start, end, pad}`
//! followed by a circular array of 16-byte entries. `start` and `end` are
//! absolute, ever-increasing entry indices; the slot of index `i` is
//! `i % capacity`. An append writes the two entry words and then `end` with
//! non-temporal stores and fences once, so `end` never covers a torn entry
//! as long as unfenced non-temporal stores persist in program order.

use crate::error::{FsError, Result};
use crate::layout::{RegionMap, LOG_ENTRY_SIZE, LOG_HEADER_SIZE};
use crate::pmsim::PmDevice;

/// 24-bit transaction number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnNo(pub u32);

impl TxnNo {
    pub const MAX: u32 = (1 << 24) - 1;
}

impl std::fmt::Display for TxnNo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `data2` value of an [`EntryType::UpdBlockAddr`] entry that targets the inode's tree root.
pub const ROOT_SLOT: u16 = u16::MAX;
const PREV_NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum EntryType {
    SetInodeBit = 1,
    ResetInodeBit = 2,
    SetFbbBit = 3,
    ResetFbbBit = 4,
    UpdBlockAddr = 5,
    UpdISize = 6,
    UpdIBlocks = 7,
    Begin = 8,
    Commit = 9,
    End = 10,
}

impl EntryType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use EntryType::*;
        Some(match v {
            1 => SetInodeBit,
            2 => ResetInodeBit,
            3 => SetFbbBit,
            4 => ResetFbbBit,
            5 => UpdBlockAddr,
            6 => UpdISize,
            7 => UpdIBlocks,
            8 => Begin,
            9 => Commit,
            10 => End,
            _ => return None,
        })
    }
}

/// One decoded log record.
///
/// Field usage: bitmap entries carry the bit index in `data3` (and, for
/// `SetInodeBit`, the new inode's type in `data1`); `UpdBlockAddr` carries
/// inode / logical block / block index; `UpdISize` and `UpdIBlocks` carry the
/// inode in `data1` and the value in `data3`; `Commit` carries the number of
/// entries preceding it in its transaction in `data3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub kind: EntryType,
    pub txn: TxnNo,
    /// Absolute index of the previous entry of the same transaction.
    pub prev: Option<u64>,
    pub data1: u16,
    pub data2: u16,
    pub data3: u32,
}

fn fit(field: &'static str, value: u64, width: u32) -> Result<u64> {
    if value >> width != 0 {
        Err(FsError::FieldOverflow { field, value, width })
    } else {
        Ok(value)
    }
}

impl LogEntry {
    pub fn new(kind: EntryType, txn: TxnNo) -> Self {
        LogEntry { kind, txn, prev: None, data1: 0, data2: 0, data3: 0 }
    }

    pub fn bitmap(kind: EntryType, txn: TxnNo, bit: u64) -> Result<Self> {
        Ok(LogEntry { data3: fit("bit index", bit, 32)? as u32, ..Self::new(kind, txn) })
    }

    pub fn block_addr(txn: TxnNo, inum: u32, logical: u64, block: u32) -> Result<Self> {
        Ok(LogEntry {
            data1: fit("inode", inum as u64, 16)? as u16,
            data2: fit("logical block", logical, 16)? as u16,
            data3: block,
            ..Self::new(EntryType::UpdBlockAddr, txn)
        })
    }

    pub fn inode_value(kind: EntryType, txn: TxnNo, inum: u32, value: u64) -> Result<Self> {
        Ok(LogEntry {
            data1: fit("inode", inum as u64, 16)? as u16,
            data3: fit("inode value", value, 32)? as u32,
            ..Self::new(kind, txn)
        })
    }

    /// Two little-endian words. `idx` is this entry's own absolute index.
    pub fn encode(&self) -> [u64; 2] {
        let prev = self.prev.map_or(PREV_NONE, |p| p as u32);
        let w0 = self.kind as u64 | ((self.txn.0 as u64 & 0xFF_FFFF) << 8) | ((prev as u64) << 32);
        let w1 = self.data1 as u64 | ((self.data2 as u64) << 16) | ((self.data3 as u64) << 32);
        [w0, w1]
    }

    pub fn decode(idx: u64, words: [u64; 2]) -> Result<Self> {
        let [w0, w1] = words;
        let kind = EntryType::from_u8(w0 as u8)
            .ok_or_else(|| FsError::Corrupt(format!("log entry {idx}: unknown type byte {:#04x}", w0 as u8)))?;
        let prev32 = (w0 >> 32) as u32;
        let prev = if prev32 == PREV_NONE {
            None
        } else {
            // reconstruct the absolute index from its low 32 bits
            let back = (idx as u32).wrapping_sub(prev32) as u64;
            if back == 0 || back > idx {
                return Err(FsError::Corrupt(format!("log entry {idx}: bad back-reference {prev32}")));
            }
            Some(idx - back)
        };
        Ok(LogEntry {
            kind,
            txn: TxnNo(((w0 >> 8) & 0xFF_FFFF) as u32),
            prev,
            data1: w1 as u16,
            data2: (w1 >> 16) as u16,
            data3: (w1 >> 32) as u32,
        })
    }
}

/// RAM view of the log header plus the region geometry.
#[derive(Clone, Debug)]
pub struct RedoLog {
    base: u64,
    capacity: u64,
    start: u64,
    end: u64,
    threshold: u64,
}

impl RedoLog {
    /// Reads the durable header. `threshold_pct` is the fill level that triggers a trim.
    pub fn open(dev: &PmDevice, map: &RegionMap, threshold_pct: u8) -> Result<Self> {
        let base = map.log_off;
        let capacity = map.log_capacity();
        let start = dev.read_u64(base + 8)?;
        let end = dev.read_u64(base + 16)?;
        if start > end || end - start > capacity {
            return Err(FsError::Corrupt(format!("log header start={start} end={end} capacity={capacity}")));
        }
        let threshold = (capacity * threshold_pct.clamp(1, 100) as u64 / 100).max(1);
        Ok(RedoLog { base, capacity, start, end, threshold })
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn slot_addr(&self, idx: u64) -> u64 {
        self.base + LOG_HEADER_SIZE + (idx % self.capacity) * LOG_ENTRY_SIZE
    }

    pub fn read_words(&self, dev: &PmDevice, idx: u64) -> Result<[u64; 2]> {
        let a = self.slot_addr(idx);
        Ok([dev.read_u64(a)?, dev.read_u64(a + 8)?])
    }

    pub fn read_entry(&self, dev: &PmDevice, idx: u64) -> Result<LogEntry> {
        if idx < self.start || idx >= self.end {
            return Err(FsError::Corrupt(format!("log index {idx} outside [{}, {})", self.start, self.end)));
        }
        LogEntry::decode(idx, self.read_words(dev, idx)?)
    }

    /// Appends `entry`, trimming first if the log is past its threshold.
    /// `reserve` extra free slots must remain after the append. `live` tells
    /// whether a transaction number still owns log entries that must be kept.
    pub fn append(
        &mut self,
        dev: &mut PmDevice,
        entry: &LogEntry,
        reserve: u64,
        live: impl Fn(TxnNo) -> bool,
    ) -> Result<u64> {
        if self.len() >= self.threshold || self.len() + 1 + reserve > self.capacity {
            self.trim(dev, &live)?;
        }
        if self.len() + 1 + reserve > self.capacity {
            return Err(FsError::LogFull);
        }
        let idx = self.end;
        let [w0, w1] = entry.encode();
        let a = self.slot_addr(idx);
        dev.nt_store(a, w0.to_le_bytes())?;
        dev.nt_store(a + 8, w1.to_le_bytes())?;
        self.end += 1;
        dev.nt_store(self.base + 16, self.end.to_le_bytes())?;
        dev.sfence();
        Ok(idx)
    }

    /// Advances `start` past the longest prefix whose transactions are no longer live.
    pub fn trim(&mut self, dev: &mut PmDevice, live: impl Fn(TxnNo) -> bool) -> Result<u64> {
        let mut new_start = self.start;
        while new_start < self.end {
            let e = self.read_entry(dev, new_start)?;
            if live(e.txn) {
                break;
            }
            new_start += 1;
        }
        let freed = new_start - self.start;
        if freed > 0 {
            self.set_start(dev, new_start)?;
        }
        Ok(freed)
    }

    /// Empties the log (`start := end`).
    pub fn clear(&mut self, dev: &mut PmDevice) -> Result<()> {
        if !self.is_empty() {
            self.set_start(dev, self.end)?;
        }
        Ok(())
    }

    fn set_start(&mut self, dev: &mut PmDevice, start: u64) -> Result<()> {
        self.start = start;
        dev.nt_store(self.base + 8, start.to_le_bytes())?;
        dev.sfence();
        Ok(())
    }

    /// Decodes the active log in order.
    pub fn scan<'a>(&'a self, dev: &'a PmDevice) -> impl Iterator<Item = Result<(u64, LogEntry)>> + 'a {
        (self.start..self.end).map(move |i| self.read_entry(dev, i).map(|e| (i, e)))
    }

    /// Follows back-references from `idx` to the transaction's Begin; returns
    /// the chain oldest first.
    pub fn chain(&self, dev: &PmDevice, idx: u64) -> Result<Vec<(u64, LogEntry)>> {
        let mut out = Vec::new();
        let mut cur = Some(idx);
        let txn = self.read_entry(dev, idx)?.txn;
        while let Some(i) = cur {
            let e = self.read_entry(dev, i)?;
            if e.txn != txn {
                return Err(FsError::Corrupt(format!("log entry {i} belongs to txn {} not {txn}", e.txn)));
            }
            out.push((i, e));
            if e.kind == EntryType::Begin {
                out.reverse();
                return Ok(out);
            }
            cur = e.prev;
        }
        Err(FsError::Corrupt(format!("chain from log entry {idx} does not reach a Begin")))
    }
}

/// Log indices in `[start, end)` of `crashed` whose bytes differ from what was
/// written there before the crash (`before` is the pre-crash device).
pub fn torn_entries(crashed: &PmDevice, before: &PmDevice, map: &RegionMap) -> Result<Vec<u64>> {
    let log = RedoLog::open(crashed, map, 100)?;
    let mut torn = Vec::new();
    for idx in log.start()..log.end() {
        let a = log.slot_addr(idx);
        if crashed.view(a, LOG_ENTRY_SIZE)? != before.view(a, LOG_ENTRY_SIZE)? {
            torn.push(idx);
        }
    }
    Ok(torn)
}

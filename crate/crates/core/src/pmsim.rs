//! Simulated byte-addressable persistent memory.
//!
//! The device keeps two images: `visible`, which is what loads observe, and
//! `durable`, which is what survives a power failure. Ordinary stores land in
//! a modelled cache at 64-byte line granularity and only reach `durable` once
//! the line has been written back with [`PmDevice::clwb`] and a later
//! [`PmDevice::sfence`] has completed. Non-temporal stores bypass the cache
//! but sit in a write-combining queue until the next fence.
//!
//! [`PmDevice::crash`] materialises one admissible post-failure image. Anything
//! not yet fenced may or may not have reached the media; which parts did is
//! drawn from a seeded RNG so that every crash replays exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A line index and the (sequence number, contents) chosen for it, if any.
type LinePick<'a> = (usize, Option<(u64, &'a [u8])>);

/// Cache line size in bytes.
pub const LINE_SIZE: usize = 64;
/// Width of one non-temporal store.
pub const NT_WIDTH: usize = 8;
/// Capacities must be a whole number of 4 KiB pages.
pub const PAGE_SIZE: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum PmError {
    #[error("access of {len} bytes at {addr:#x} exceeds device capacity {capacity:#x}")]
    OutOfBounds { addr: u64, len: u64, capacity: u64 },
    #[error("non-temporal store address {0:#x} is not 8-byte aligned")]
    Misaligned(u64),
    #[error("device capacity {0} is not a positive multiple of 4096")]
    BadCapacity(u64),
    #[error("{0} admissible crash images exceed the enumeration limit {1}")]
    TooManyImages(u128, usize),
    #[error("device image i/o: {0}")]
    Io(#[from] io::Error),
}

/// How stores that were never fenced may surface after a crash.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum OrderingModel {
    /// Unfenced non-temporal stores persist as a program-order prefix.
    #[default]
    PaperOrdered,
    /// Any subset of unfenced non-temporal stores may persist.
    RelaxedSubset,
}

impl OrderingModel {
    pub fn name(self) -> &'static str {
        match self {
            OrderingModel::PaperOrdered => "paper",
            OrderingModel::RelaxedSubset => "relaxed",
        }
    }
}

impl std::str::FromStr for OrderingModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" | "paper-ordered" | "PaperOrdered" => Ok(OrderingModel::PaperOrdered),
            "relaxed" | "relaxed-subset" | "RelaxedSubset" => Ok(OrderingModel::RelaxedSubset),
            other => Err(format!("unknown ordering model `{other}` (expected paper|relaxed)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineState {
    Clean,
    Dirty,
    Flushing,
}

/// Operation counters. Reads are free and not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub stores: u64,
    pub nt_stores: u64,
    pub clwbs: u64,
    pub sfences: u64,
    pub bytes_written: u64,
}

impl DeviceStats {
    /// Number of state-changing device operations; this is the crash-point index space.
    pub fn ops(&self) -> u64 {
        self.stores + self.nt_stores + self.clwbs + self.sfences
    }

    pub fn since(&self, earlier: &DeviceStats) -> DeviceStats {
        DeviceStats {
            stores: self.stores - earlier.stores,
            nt_stores: self.nt_stores - earlier.nt_stores,
            clwbs: self.clwbs - earlier.clwbs,
            sfences: self.sfences - earlier.sfences,
            bytes_written: self.bytes_written - earlier.bytes_written,
        }
    }

    /// Flat `key=value` report, one counter per line.
    pub fn report(&self) -> String {
        format!(
            "stores={}\nnt_stores={}\nclwbs={}\nsfences={}\nbytes_written={}\n",
            self.stores, self.nt_stores, self.clwbs, self.sfences, self.bytes_written
        )
    }
}

impl fmt::Display for DeviceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stores={} nt_stores={} clwbs={} sfences={} bytes_written={}",
            self.stores, self.nt_stores, self.clwbs, self.sfences, self.bytes_written
        )
    }
}

/// A recorded state-changing device operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeviceOp {
    Store { addr: u64, data: Vec<u8> },
    NtStore { addr: u64, value: [u8; NT_WIDTH] },
    Clwb { addr: u64 },
    Sfence,
}

/// Which unfenced state makes it into a crash image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashPolicy {
    /// Seeded random choice per line and over the non-temporal queue.
    Seeded(u64),
    /// Nothing unfenced survives.
    PersistNone,
    /// Every pending line and non-temporal store survives.
    PersistAll,
}

#[derive(Clone)]
pub struct PmDevice {
    visible: Vec<u8>,
    durable: Vec<u8>,
    lines: Vec<LineState>,
    // Lines whose state is not Clean, kept sorted so crash selection is deterministic.
    unclean: BTreeSet<usize>,
    // Line contents captured by clwb and not yet fenced, tagged with program order.
    flush_snaps: BTreeMap<usize, (u64, [u8; LINE_SIZE])>,
    nt_pending: Vec<(u64, u64, [u8; NT_WIDTH])>,
    seq: u64,
    epoch: u64,
    model: OrderingModel,
    stats: DeviceStats,
    trace: Option<Vec<DeviceOp>>,
}

impl fmt::Debug for PmDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PmDevice")
            .field("capacity", &self.visible.len())
            .field("unclean_lines", &self.unclean.len())
            .field("nt_pending", &self.nt_pending.len())
            .field("epoch", &self.epoch)
            .field("model", &self.model)
            .field("stats", &self.stats)
            .finish()
    }
}

impl PmDevice {
    /// A zero-filled device.
    pub fn new(capacity_bytes: u64, model: OrderingModel) -> Result<Self, PmError> {
        if capacity_bytes == 0 || capacity_bytes % PAGE_SIZE as u64 != 0 {
            return Err(PmError::BadCapacity(capacity_bytes));
        }
        Ok(Self::from_image(vec![0; capacity_bytes as usize], model))
    }

    fn from_image(image: Vec<u8>, model: OrderingModel) -> Self {
        let lines = image.len() / LINE_SIZE;
        PmDevice {
            durable: image.clone(),
            visible: image,
            lines: vec![LineState::Clean; lines],
            unclean: BTreeSet::new(),
            flush_snaps: BTreeMap::new(),
            nt_pending: Vec::new(),
            seq: 0,
            epoch: 0,
            model,
            stats: DeviceStats::default(),
            trace: None,
        }
    }

    /// Builds a device whose visible and durable images are both `image`.
    pub fn from_durable_image(image: Vec<u8>, model: OrderingModel) -> Result<Self, PmError> {
        if image.is_empty() || image.len() % PAGE_SIZE != 0 {
            return Err(PmError::BadCapacity(image.len() as u64));
        }
        Ok(Self::from_image(image, model))
    }

    /// Loads a raw durable image written by [`PmDevice::save`].
    pub fn load(path: impl AsRef<Path>, model: OrderingModel) -> Result<Self, PmError> {
        Self::from_durable_image(fs::read(path)?, model)
    }

    /// Writes the durable image (only) to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PmError> {
        fs::write(path, &self.durable)?;
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        self.visible.len() as u64
    }

    pub fn model(&self) -> OrderingModel {
        self.model
    }

    pub fn set_model(&mut self, model: OrderingModel) {
        self.model = model;
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = DeviceStats::default();
    }

    /// Count of completed fences.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn op_count(&self) -> u64 {
        self.stats.ops()
    }

    pub fn line_state(&self, addr: u64) -> LineState {
        self.lines[addr as usize / LINE_SIZE]
    }

    pub fn nt_pending_len(&self) -> usize {
        self.nt_pending.len()
    }

    /// True when every write so far has been fenced to the media.
    pub fn is_quiescent(&self) -> bool {
        self.unclean.is_empty() && self.nt_pending.is_empty() && self.flush_snaps.is_empty()
    }

    pub fn durable_image(&self) -> &[u8] {
        &self.durable
    }

    pub fn visible_image(&self) -> &[u8] {
        &self.visible
    }

    /// Starts recording every state-changing operation.
    pub fn start_recording(&mut self) {
        self.trace = Some(Vec::new());
    }

    /// Operations recorded so far, or 0 when not recording.
    pub fn trace_len(&self) -> usize {
        self.trace.as_ref().map_or(0, Vec::len)
    }

    pub fn take_trace(&mut self) -> Vec<DeviceOp> {
        self.trace.take().unwrap_or_default()
    }

    fn check_range(&self, addr: u64, len: u64) -> Result<(), PmError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.capacity() => Ok(()),
            _ => Err(PmError::OutOfBounds { addr, len, capacity: self.capacity() }),
        }
    }

    /// Cached store: updates `visible` and dirties every touched line.
    pub fn store(&mut self, addr: u64, data: &[u8]) -> Result<(), PmError> {
        self.check_range(addr, data.len() as u64)?;
        if let Some(trace) = &mut self.trace {
            trace.push(DeviceOp::Store { addr, data: data.to_vec() });
        }
        self.stats.stores += 1;
        self.stats.bytes_written += data.len() as u64;
        if data.is_empty() {
            return Ok(());
        }
        let start = addr as usize;
        self.visible[start..start + data.len()].copy_from_slice(data);
        let first = start / LINE_SIZE;
        let last = (start + data.len() - 1) / LINE_SIZE;
        for line in first..=last {
            self.lines[line] = LineState::Dirty;
            self.unclean.insert(line);
        }
        Ok(())
    }

    /// 8-byte non-temporal store. Visible immediately, durable at the next fence.
    pub fn nt_store(&mut self, addr: u64, value: [u8; NT_WIDTH]) -> Result<(), PmError> {
        if addr % NT_WIDTH as u64 != 0 {
            return Err(PmError::Misaligned(addr));
        }
        self.check_range(addr, NT_WIDTH as u64)?;
        if let Some(trace) = &mut self.trace {
            trace.push(DeviceOp::NtStore { addr, value });
        }
        self.stats.nt_stores += 1;
        self.stats.bytes_written += NT_WIDTH as u64;
        let line = addr as usize / LINE_SIZE;
        // A movnti to a line held dirty in cache evicts that line first.
        if self.lines[line] == LineState::Dirty {
            self.snapshot_line(line);
        }
        let start = addr as usize;
        self.visible[start..start + NT_WIDTH].copy_from_slice(&value);
        self.seq += 1;
        self.nt_pending.push((self.seq, addr, value));
        Ok(())
    }

    fn snapshot_line(&mut self, line: usize) {
        let start = line * LINE_SIZE;
        let mut snap = [0u8; LINE_SIZE];
        snap.copy_from_slice(&self.visible[start..start + LINE_SIZE]);
        self.seq += 1;
        self.flush_snaps.insert(line, (self.seq, snap));
        self.lines[line] = LineState::Flushing;
        self.unclean.insert(line);
    }

    /// Starts write-back of the line containing `addr`.
    pub fn clwb(&mut self, addr: u64) -> Result<(), PmError> {
        self.check_range(addr, 1)?;
        if let Some(trace) = &mut self.trace {
            trace.push(DeviceOp::Clwb { addr });
        }
        self.stats.clwbs += 1;
        let line = addr as usize / LINE_SIZE;
        if self.lines[line] != LineState::Clean {
            self.snapshot_line(line);
        }
        Ok(())
    }

    /// Drains every in-flight write-back and non-temporal store to the media.
    pub fn sfence(&mut self) {
        if let Some(trace) = &mut self.trace {
            trace.push(DeviceOp::Sfence);
        }
        self.stats.sfences += 1;
        self.epoch += 1;
        let all_nt = vec![true; self.nt_pending.len()];
        let lines: Vec<LinePick> =
            self.flush_snaps.iter().map(|(&l, (seq, snap))| (l, Some((*seq, &snap[..])))).collect();
        let mut durable = std::mem::take(&mut self.durable);
        self.compose(&mut durable, &lines, &all_nt);
        self.durable = durable;
        for (line, _) in std::mem::take(&mut self.flush_snaps) {
            if self.lines[line] == LineState::Flushing {
                self.lines[line] = LineState::Clean;
                self.unclean.remove(&line);
            }
        }
        self.nt_pending.clear();
    }

    /// Returns visible bytes.
    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, PmError> {
        Ok(self.view(addr, len)?.to_vec())
    }

    pub fn read_into(&self, addr: u64, buf: &mut [u8]) -> Result<(), PmError> {
        buf.copy_from_slice(self.view(addr, buf.len() as u64)?);
        Ok(())
    }

    /// Borrowed view of visible bytes.
    pub fn view(&self, addr: u64, len: u64) -> Result<&[u8], PmError> {
        self.check_range(addr, len)?;
        Ok(&self.visible[addr as usize..(addr + len) as usize])
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, PmError> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn apply(&mut self, op: &DeviceOp) -> Result<(), PmError> {
        match op {
            DeviceOp::Store { addr, data } => self.store(*addr, data),
            DeviceOp::NtStore { addr, value } => self.nt_store(*addr, *value),
            DeviceOp::Clwb { addr } => self.clwb(*addr),
            DeviceOp::Sfence => {
                self.sfence();
                Ok(())
            }
        }
    }

    /// One admissible post-crash device chosen by `seed`.
    pub fn crash(&self, seed: u64) -> PmDevice {
        self.crash_with(CrashPolicy::Seeded(seed))
    }

    pub fn crash_with(&self, policy: CrashPolicy) -> PmDevice {
        let mut image = self.durable.clone();
        let mut rng = match policy {
            CrashPolicy::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let mut lines = Vec::with_capacity(self.unclean.len());
        for &line in &self.unclean {
            let options = self.line_options(line);
            let pick = match (&policy, rng.as_mut()) {
                (CrashPolicy::PersistNone, _) => 0,
                (CrashPolicy::PersistAll, _) => options.len(),
                (_, Some(rng)) => rng.gen_range(0..=options.len()),
                (_, None) => unreachable!(),
            };
            lines.push((line, if pick > 0 { Some(options[pick - 1]) } else { None }));
        }
        let n = self.nt_pending.len();
        let chosen: Vec<bool> = match (policy, self.model) {
            (CrashPolicy::PersistNone, _) => vec![false; n],
            (CrashPolicy::PersistAll, _) => vec![true; n],
            (CrashPolicy::Seeded(_), OrderingModel::PaperOrdered) => {
                let prefix = rng.as_mut().map_or(0, |r| r.gen_range(0..=n));
                (0..n).map(|i| i < prefix).collect()
            }
            (CrashPolicy::Seeded(_), OrderingModel::RelaxedSubset) => {
                let rng = rng.as_mut().expect("seeded policy carries an rng");
                (0..n).map(|_| rng.gen_bool(0.5)).collect()
            }
        };
        self.compose(&mut image, &lines, &chosen);
        PmDevice::from_image(image, self.model)
    }

    // Line contents that may have reached the media, oldest first, with
    // their position in program order.
    fn line_options(&self, line: usize) -> Vec<(u64, &[u8])> {
        let mut options: Vec<(u64, &[u8])> = Vec::with_capacity(2);
        if let Some((seq, snap)) = self.flush_snaps.get(&line) {
            options.push((*seq, &snap[..]));
        }
        if self.lines[line] == LineState::Dirty {
            let start = line * LINE_SIZE;
            options.push((u64::MAX, &self.visible[start..start + LINE_SIZE]));
        }
        options
    }

    // Writes the chosen line contents and non-temporal stores into `image`
    // in program order, so a later write to the same bytes wins.
    fn compose(&self, image: &mut [u8], lines: &[LinePick], nt: &[bool]) {
        let mut writes: Vec<(u64, usize, &[u8])> = lines
            .iter()
            .filter_map(|(line, pick)| pick.map(|(seq, bytes)| (seq, line * LINE_SIZE, bytes)))
            .collect();
        writes.extend(
            self.nt_pending
                .iter()
                .zip(nt)
                .filter(|(_, keep)| **keep)
                .map(|((seq, addr, value), _)| (*seq, *addr as usize, &value[..])),
        );
        writes.sort_by_key(|w| w.0);
        for (_, start, bytes) in writes {
            image[start..start + bytes.len()].copy_from_slice(bytes);
        }
    }

    /// Number of distinct crash choices (not necessarily distinct images).
    pub fn admissible_choice_count(&self) -> u128 {
        let mut count: u128 = 1;
        for &line in &self.unclean {
            count = count.saturating_mul(self.line_options(line).len() as u128 + 1);
        }
        let n = self.nt_pending.len() as u32;
        let nt = match self.model {
            OrderingModel::PaperOrdered => n as u128 + 1,
            OrderingModel::RelaxedSubset => 1u128.checked_shl(n).unwrap_or(u128::MAX),
        };
        count.saturating_mul(nt)
    }

    /// Enumerates every admissible crash image instead of sampling one.
    pub fn crash_images(&self, limit: usize) -> Result<Vec<PmDevice>, PmError> {
        let total = self.admissible_choice_count();
        if total > limit as u128 {
            return Err(PmError::TooManyImages(total, limit));
        }
        #[allow(clippy::type_complexity)]
        let lines: Vec<(usize, Vec<(u64, &[u8])>)> =
            self.unclean.iter().map(|&l| (l, self.line_options(l))).collect();
        let n = self.nt_pending.len();
        let nt_choices: Vec<Vec<bool>> = match self.model {
            OrderingModel::PaperOrdered => {
                (0..=n).map(|p| (0..n).map(|i| i < p).collect()).collect()
            }
            OrderingModel::RelaxedSubset => {
                (0..1usize << n).map(|m| (0..n).map(|i| m & (1 << i) != 0).collect()).collect()
            }
        };
        let mut out = Vec::with_capacity(total as usize);
        let mut digits = vec![0usize; lines.len()];
        loop {
            for nt in &nt_choices {
                let mut image = self.durable.clone();
                let picks: Vec<LinePick> = lines
                    .iter()
                    .zip(&digits)
                    .map(|((line, options), &d)| (*line, if d > 0 { Some(options[d - 1]) } else { None }))
                    .collect();
                self.compose(&mut image, &picks, nt);
                out.push(PmDevice::from_image(image, self.model));
            }
            // mixed-radix increment over per-line choices
            let mut i = 0;
            loop {
                if i == digits.len() {
                    return Ok(out);
                }
                digits[i] += 1;
                if digits[i] <= lines[i].1.len() {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(model: OrderingModel) -> PmDevice {
        PmDevice::new(8192, model).unwrap()
    }

    #[test]
    fn store_is_visible_not_durable() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(0, &[0xAA]).unwrap();
        assert_eq!(d.read(0, 1).unwrap(), vec![0xAA]);
        assert_eq!(d.durable_image()[0], 0);
        assert_eq!(d.line_state(0), LineState::Dirty);
    }

    #[test]
    fn flushed_and_fenced_store_survives_crash() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(0, &[1]).unwrap();
        d.clwb(0).unwrap();
        d.sfence();
        for seed in 0..20 {
            assert_eq!(d.crash(seed).read(0, 1).unwrap(), vec![1]);
        }
    }

    #[test]
    fn unflushed_store_may_or_may_not_persist() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(0, &[1]).unwrap();
        let outcomes: BTreeSet<u8> = (0..100).map(|s| d.crash(s).read(0, 1).unwrap()[0]).collect();
        assert_eq!(outcomes, BTreeSet::from([0, 1]));
        let images = d.crash_images(16).unwrap();
        assert_eq!(images.len(), 2);
    }

    #[test]
    fn store_out_of_range() {
        let mut d = dev(OrderingModel::PaperOrdered);
        assert!(matches!(d.store(8190, &[0; 4]), Err(PmError::OutOfBounds { .. })));
        assert!(matches!(d.read(8192, 1), Err(PmError::OutOfBounds { .. })));
        assert!(matches!(d.clwb(8192), Err(PmError::OutOfBounds { .. })));
        assert_eq!(d.stats().ops(), 0);
    }

    #[test]
    fn nt_store_alignment() {
        let mut d = dev(OrderingModel::PaperOrdered);
        assert!(matches!(d.nt_store(3, [0; 8]), Err(PmError::Misaligned(3))));
        assert!(matches!(d.nt_store(8192, [0; 8]), Err(PmError::OutOfBounds { .. })));
    }

    #[test]
    fn fenced_nt_store_is_durable() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.nt_store(64, 7u64.to_le_bytes()).unwrap();
        assert_eq!(d.line_state(64), LineState::Clean);
        d.sfence();
        assert_eq!(d.crash(9).read_u64(64).unwrap(), 7);
    }

    #[test]
    fn ordered_nt_persists_prefix_only() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.nt_store(0, 1u64.to_le_bytes()).unwrap();
        d.nt_store(8, 2u64.to_le_bytes()).unwrap();
        let images = d.crash_images(64).unwrap();
        let got: BTreeSet<(u64, u64)> = images
            .iter()
            .map(|i| (i.read_u64(0).unwrap(), i.read_u64(8).unwrap()))
            .collect();
        assert_eq!(got, BTreeSet::from([(0, 0), (1, 0), (1, 2)]));
        for seed in 0..200 {
            let c = d.crash(seed);
            let (a, b) = (c.read_u64(0).unwrap(), c.read_u64(8).unwrap());
            assert!(!(a == 0 && b == 2), "non-prefix image for seed {seed}");
        }
    }

    #[test]
    fn relaxed_nt_any_subset_is_producible() {
        let mut d = dev(OrderingModel::RelaxedSubset);
        d.nt_store(0, 1u64.to_le_bytes()).unwrap();
        d.nt_store(8, 2u64.to_le_bytes()).unwrap();
        let exhaustive: BTreeSet<(u64, u64)> = d
            .crash_images(64)
            .unwrap()
            .iter()
            .map(|i| (i.read_u64(0).unwrap(), i.read_u64(8).unwrap()))
            .collect();
        let all = BTreeSet::from([(0, 0), (1, 0), (0, 2), (1, 2)]);
        assert_eq!(exhaustive, all);
        let sampled: BTreeSet<(u64, u64)> = (0..200)
            .map(|s| {
                let c = d.crash(s);
                (c.read_u64(0).unwrap(), c.read_u64(8).unwrap())
            })
            .collect();
        assert_eq!(sampled, all);
    }

    #[test]
    fn clwb_counts_and_clean_line_noop() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.clwb(0).unwrap();
        assert_eq!(d.stats().clwbs, 1);
        assert_eq!(d.line_state(0), LineState::Clean);
        d.store(4096, &[0x5A; 4096]).unwrap();
        for i in 0..64 {
            d.clwb(4096 + i * 64).unwrap();
        }
        assert_eq!(d.stats().clwbs, 65);
        d.sfence();
        assert!(d.is_quiescent());
        assert_eq!(&d.durable_image()[4096..8192], &[0x5A; 4096][..]);
    }

    #[test]
    fn clwb_without_fence_persists_for_some_seeds() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(128, &[9]).unwrap();
        d.clwb(128).unwrap();
        assert_eq!(d.line_state(128), LineState::Flushing);
        let outcomes: BTreeSet<u8> = (0..100).map(|s| d.crash(s).read(128, 1).unwrap()[0]).collect();
        assert_eq!(outcomes, BTreeSet::from([0, 9]));
    }

    #[test]
    fn sfence_on_empty_only_bumps_epoch() {
        let mut d = dev(OrderingModel::PaperOrdered);
        let before = d.durable_image().to_vec();
        d.sfence();
        assert_eq!(d.epoch(), 1);
        assert_eq!(d.durable_image(), &before[..]);
    }

    #[test]
    fn data_flush_then_log_both_durable_after_second_fence() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(4096, &[3; 64]).unwrap();
        d.clwb(4096).unwrap();
        d.sfence();
        d.nt_store(0, 11u64.to_le_bytes()).unwrap();
        // between the fences: data always durable, log entry maybe
        for seed in 0..50 {
            assert_eq!(d.crash(seed).read(4096, 1).unwrap(), vec![3]);
        }
        d.sfence();
        let c = d.crash_with(CrashPolicy::PersistNone);
        assert_eq!(c.read(4096, 1).unwrap(), vec![3]);
        assert_eq!(c.read_u64(0).unwrap(), 11);
    }

    #[test]
    fn crash_after_fence_equals_visible() {
        let mut d = dev(OrderingModel::RelaxedSubset);
        d.store(10, b"hello").unwrap();
        d.clwb(10).unwrap();
        d.nt_store(512, [1; 8]).unwrap();
        d.sfence();
        let c = d.crash(1234);
        assert_eq!(c.visible_image(), d.visible_image());
    }

    #[test]
    fn store_after_clwb_keeps_snapshot_option() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(0, &[1]).unwrap();
        d.clwb(0).unwrap();
        d.store(0, &[2]).unwrap();
        assert_eq!(d.line_state(0), LineState::Dirty);
        let vals: BTreeSet<u8> =
            d.crash_images(8).unwrap().iter().map(|i| i.read(0, 1).unwrap()[0]).collect();
        assert_eq!(vals, BTreeSet::from([0, 1, 2]));
        d.sfence();
        // the fence drains the clwb snapshot, the later store stays cached
        assert_eq!(d.durable_image()[0], 1);
        assert_eq!(d.line_state(0), LineState::Dirty);
    }

    #[test]
    fn trace_replay_reproduces_state() {
        let mut d = dev(OrderingModel::PaperOrdered);
        let base = d.clone();
        d.start_recording();
        d.store(100, &[1, 2, 3]).unwrap();
        d.clwb(100).unwrap();
        d.nt_store(256, [4; 8]).unwrap();
        d.sfence();
        d.store(200, &[5]).unwrap();
        let trace = d.take_trace();
        assert_eq!(trace.len(), 5);
        let mut r = base;
        for op in &trace {
            r.apply(op).unwrap();
        }
        assert_eq!(r.visible_image(), d.visible_image());
        assert_eq!(r.durable_image(), d.durable_image());
        assert_eq!(r.crash(5).visible_image(), d.crash(5).visible_image());
    }

    #[test]
    fn stats_report_is_key_value() {
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(0, &[1, 2]).unwrap();
        d.sfence();
        let r = d.stats().report();
        assert!(r.contains("stores=1\n"));
        assert!(r.contains("sfences=1\n"));
        assert!(r.contains("bytes_written=2\n"));
    }

    #[test]
    fn save_load_roundtrip_keeps_durable_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        let mut d = dev(OrderingModel::PaperOrdered);
        d.store(0, &[1]).unwrap();
        d.store(64, &[2]).unwrap();
        d.clwb(64).unwrap();
        d.sfence();
        d.save(&path).unwrap();
        let l = PmDevice::load(&path, OrderingModel::PaperOrdered).unwrap();
        assert_eq!(l.read(0, 1).unwrap(), vec![0]);
        assert_eq!(l.read(64, 1).unwrap(), vec![2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        enum Op {
            Store(u16, u8, u8),
            Nt(u16, u64),
            Clwb(u16),
            Fence,
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (0u16..4000, 1u8..40, any::<u8>()).prop_map(|(a, l, v)| Op::Store(a, l, v)),
                (0u16..500, any::<u64>()).prop_map(|(a, v)| Op::Nt(a, v)),
                (0u16..4096).prop_map(Op::Clwb),
                Just(Op::Fence),
            ]
        }

        fn run(ops: &[Op]) -> PmDevice {
            let mut d = PmDevice::new(4096, OrderingModel::PaperOrdered).unwrap();
            for op in ops {
                match *op {
                    Op::Store(a, l, v) => d.store(a as u64, &vec![v; l as usize]).unwrap(),
                    Op::Nt(a, v) => d.nt_store(a as u64 * 8, v.to_le_bytes()).unwrap(),
                    Op::Clwb(a) => d.clwb(a as u64).unwrap(),
                    Op::Fence => d.sfence(),
                }
            }
            d
        }

        proptest! {
            #[test]
            fn fence_drains_everything_flushed(ops in proptest::collection::vec(op(), 0..60)) {
                let mut d = run(&ops);
                // flush all dirty lines then fence
                for line in 0..64u64 { d.clwb(line * 64).unwrap(); }
                d.sfence();
                prop_assert!(d.is_quiescent());
                prop_assert_eq!(d.durable_image(), d.visible_image());
            }

            #[test]
            fn crash_is_deterministic(ops in proptest::collection::vec(op(), 0..60), seed in any::<u64>()) {
                let d = run(&ops);
                let (a, b) = (d.crash(seed), d.crash(seed));
                prop_assert_eq!(a.visible_image(), b.visible_image());
            }

            #[test]
            fn durable_bytes_were_once_visible(ops in proptest::collection::vec(op(), 0..60), seed in any::<u64>()) {
                // every byte of a crash image equals some value written at that address (or zero)
                let mut d = PmDevice::new(4096, OrderingModel::PaperOrdered).unwrap();
                let mut written: Vec<BTreeSet<u8>> = vec![BTreeSet::from([0u8]); 4096];
                for op in &ops {
                    match *op {
                        Op::Store(a, l, v) => {
                            d.store(a as u64, &vec![v; l as usize]).unwrap();
                            for w in &mut written[a as usize..a as usize + l as usize] { w.insert(v); }
                        }
                        Op::Nt(a, v) => {
                            d.nt_store(a as u64 * 8, v.to_le_bytes()).unwrap();
                            for (i, b) in v.to_le_bytes().iter().enumerate() { written[a as usize * 8 + i].insert(*b); }
                        }
                        Op::Clwb(a) => d.clwb(a as u64).unwrap(),
                        Op::Fence => d.sfence(),
                    }
                }
                let c = d.crash(seed);
                for (i, b) in c.visible_image().iter().enumerate() {
                    prop_assert!(written[i].contains(b));
                }
            }
        }
    }
}

//! On-image format.
//!
//! ```text
//! byte 0..4   TS  total size in KiB (u32 LE)
//! byte 4      BS  block size in KiB (always 4)
//! byte 5      BB  blocks of free-block bitmap
//! byte 6      IB  blocks of free-inode bitmap
//! byte 7..    FB map   BS*1024*BB bytes
//!             FI map   BS*1024*IB bytes
//!             I table  BS*1024*IB*8 inodes of 32 bytes
//! (block aligned)
//!             log      K blocks, 32-byte header then 16-byte entries
//!             data blocks
//! ```

use crate::error::{FsError, Result};
use crate::pmsim::{PmDevice, LINE_SIZE};

pub const BLOCK_SIZE: u64 = 4096;
pub const INODE_SIZE: u64 = 32;
pub const SUPERBLOCK_LEN: u64 = 7;
pub const FB_MAP_OFFSET: u64 = 7;
pub const LOG_HEADER_SIZE: u64 = 32;
pub const LOG_ENTRY_SIZE: u64 = 16;
pub const ROOT_INODE: u32 = 0;
/// Inode numbers must fit the 16-bit log field.
pub const MAX_LOGGABLE_INODES: u64 = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Superblock {
    pub ts_kb: u32,
    pub bs_kb: u8,
    pub bb: u8,
    pub ib: u8,
}

impl Superblock {
    pub fn encode(&self) -> [u8; SUPERBLOCK_LEN as usize] {
        let mut b = [0u8; SUPERBLOCK_LEN as usize];
        b[0..4].copy_from_slice(&self.ts_kb.to_le_bytes());
        b[4] = self.bs_kb;
        b[5] = self.bb;
        b[6] = self.ib;
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        Superblock {
            ts_kb: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            bs_kb: b[4],
            bb: b[5],
            ib: b[6],
        }
    }
}

/// Byte extents of every region, derived from the superblock and log size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionMap {
    pub superblock: Superblock,
    pub capacity: u64,
    pub fb_map_off: u64,
    pub fb_map_len: u64,
    pub fi_map_off: u64,
    pub fi_map_len: u64,
    pub itable_off: u64,
    pub itable_len: u64,
    pub inode_count: u64,
    pub log_off: u64,
    pub log_blocks: u64,
    pub data_off: u64,
    pub total_blocks: u64,
}

impl RegionMap {
    pub fn compute(sb: Superblock, log_blocks: u64) -> Result<Self> {
        if sb.bs_kb != 4 {
            return Err(FsError::Format(format!("block size {} KiB unsupported (must be 4)", sb.bs_kb)));
        }
        if sb.bb == 0 || sb.ib == 0 {
            return Err(FsError::Format("bitmap block counts must be at least 1".into()));
        }
        if log_blocks == 0 {
            return Err(FsError::Format("log must have at least one block".into()));
        }
        let capacity = sb.ts_kb as u64 * 1024;
        if capacity == 0 || capacity % BLOCK_SIZE != 0 {
            return Err(FsError::Format(format!("total size {} KiB is not a whole number of blocks", sb.ts_kb)));
        }
        let unit = sb.bs_kb as u64 * 1024;
        let fb_map_len = unit * sb.bb as u64;
        let fi_map_off = FB_MAP_OFFSET + fb_map_len;
        let fi_map_len = unit * sb.ib as u64;
        let itable_off = fi_map_off + fi_map_len;
        let inode_count = fi_map_len * 8;
        let itable_len = inode_count * INODE_SIZE;
        let log_off = (itable_off + itable_len).div_ceil(BLOCK_SIZE) * BLOCK_SIZE;
        let data_off = log_off + log_blocks * BLOCK_SIZE;
        let total_blocks = capacity / BLOCK_SIZE;
        if fb_map_len * 8 < total_blocks {
            return Err(FsError::Format(format!(
                "{} bitmap block(s) cannot cover {total_blocks} blocks",
                sb.bb
            )));
        }
        if data_off + BLOCK_SIZE > capacity {
            return Err(FsError::Format(format!(
                "image of {capacity} bytes too small: metadata needs {data_off} bytes plus one data block"
            )));
        }
        if (log_blocks * BLOCK_SIZE - LOG_HEADER_SIZE) / LOG_ENTRY_SIZE < 8 {
            return Err(FsError::Format("log too small".into()));
        }
        Ok(RegionMap {
            superblock: sb,
            capacity,
            fb_map_off: FB_MAP_OFFSET,
            fb_map_len,
            fi_map_off,
            fi_map_len,
            itable_off,
            itable_len,
            inode_count,
            log_off,
            log_blocks,
            data_off,
            total_blocks,
        })
    }

    pub fn first_data_block(&self) -> u64 {
        self.data_off / BLOCK_SIZE
    }

    pub fn data_blocks(&self) -> u64 {
        self.total_blocks - self.first_data_block()
    }

    pub fn log_len(&self) -> u64 {
        self.log_blocks * BLOCK_SIZE
    }

    pub fn log_capacity(&self) -> u64 {
        (self.log_len() - LOG_HEADER_SIZE) / LOG_ENTRY_SIZE
    }

    /// Inodes the allocator may hand out.
    pub fn usable_inodes(&self) -> u64 {
        self.inode_count.min(MAX_LOGGABLE_INODES)
    }

    pub fn block_addr(&self, block: u32) -> u64 {
        block as u64 * BLOCK_SIZE
    }

    pub fn is_data_block(&self, block: u32) -> bool {
        (block as u64) >= self.first_data_block() && (block as u64) < self.total_blocks
    }

    pub fn inode_addr(&self, n: u32) -> u64 {
        self.itable_off + n as u64 * INODE_SIZE
    }

    /// Bytes holding the superblock through the end of the inode table.
    pub fn metadata_span(&self) -> std::ops::Range<u64> {
        0..self.itable_off + self.itable_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum InodeType {
    Free = 0,
    File = 1,
    Directory = 2,
    Symlink = 3,
}

impl InodeType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(InodeType::Free),
            1 => Some(InodeType::File),
            2 => Some(InodeType::Directory),
            3 => Some(InodeType::Symlink),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inode {
    /// Data (leaf) blocks in use.
    pub i_blocks: u32,
    /// Root of the block-reference tree, 0 when the file has no blocks.
    pub i_block: u32,
    pub i_size: u64,
    pub kind: InodeType,
    pub reserved: [u8; 15],
}

impl Inode {
    pub const FREE: Inode =
        Inode { i_blocks: 0, i_block: 0, i_size: 0, kind: InodeType::Free, reserved: [0; 15] };

    pub fn new(kind: InodeType) -> Self {
        Inode { kind, ..Inode::FREE }
    }

    pub fn encode(&self) -> [u8; INODE_SIZE as usize] {
        let mut b = [0u8; INODE_SIZE as usize];
        b[0..4].copy_from_slice(&self.i_blocks.to_le_bytes());
        b[4..8].copy_from_slice(&self.i_block.to_le_bytes());
        b[8..16].copy_from_slice(&self.i_size.to_le_bytes());
        b[16] = self.kind as u8;
        b[17..32].copy_from_slice(&self.reserved);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        let kind = InodeType::from_u8(b[16])
            .ok_or_else(|| FsError::Corrupt(format!("inode type byte {}", b[16])))?;
        Ok(Inode {
            i_blocks: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            i_block: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            i_size: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            kind,
            reserved: b[17..32].try_into().unwrap(),
        })
    }
}

pub fn inode_read(dev: &PmDevice, map: &RegionMap, n: u32) -> Result<Inode> {
    if n as u64 >= map.inode_count {
        return Err(FsError::Corrupt(format!("inode {n} out of range")));
    }
    Inode::decode(dev.view(map.inode_addr(n), INODE_SIZE)?)
}

pub fn inode_write(dev: &mut PmDevice, map: &RegionMap, n: u32, inode: &Inode) -> Result<()> {
    if n as u64 >= map.inode_count {
        return Err(FsError::Corrupt(format!("inode {n} out of range")));
    }
    dev.store(map.inode_addr(n), &inode.encode())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bitmap {
    Blocks,
    Inodes,
}

impl Bitmap {
    pub fn base(self, map: &RegionMap) -> u64 {
        match self {
            Bitmap::Blocks => map.fb_map_off,
            Bitmap::Inodes => map.fi_map_off,
        }
    }

    pub fn limit(self, map: &RegionMap) -> u64 {
        match self {
            Bitmap::Blocks => map.total_blocks,
            Bitmap::Inodes => map.inode_count,
        }
    }
}

pub fn bit_get(bytes: &[u8], i: u64) -> bool {
    bytes[(i / 8) as usize] & (1 << (i % 8)) != 0
}

pub fn bit_put(bytes: &mut [u8], i: u64, on: bool) {
    let mask = 1u8 << (i % 8);
    if on {
        bytes[(i / 8) as usize] |= mask;
    } else {
        bytes[(i / 8) as usize] &= !mask;
    }
}

/// Reads one bit of a PM bitmap.
pub fn pm_bit(dev: &PmDevice, map: &RegionMap, which: Bitmap, i: u64) -> Result<bool> {
    let byte = dev.view(which.base(map) + i / 8, 1)?[0];
    Ok(byte & (1 << (i % 8)) != 0)
}

/// Absolute read-modify-write of one PM bitmap bit. Returns the byte address written.
pub fn pm_set_bit(dev: &mut PmDevice, map: &RegionMap, which: Bitmap, i: u64, on: bool) -> Result<u64> {
    if i >= which.limit(map) {
        return Err(FsError::Corrupt(format!("{which:?} bit {i} out of range")));
    }
    let addr = which.base(map) + i / 8;
    let mut byte = [dev.view(addr, 1)?[0]];
    bit_put(&mut byte, i % 8, on);
    dev.store(addr, &byte)?;
    Ok(addr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MkfsOptions {
    pub log_blocks: u64,
    /// Free-block bitmap blocks; `None` picks the minimum that covers the image.
    pub bitmap_blocks: Option<u8>,
    pub inode_bitmap_blocks: u8,
}

impl Default for MkfsOptions {
    fn default() -> Self {
        MkfsOptions { log_blocks: 64, bitmap_blocks: None, inode_bitmap_blocks: 1 }
    }
}

impl MkfsOptions {
    pub fn superblock(&self, capacity: u64) -> Result<Superblock> {
        let ts_kb = u32::try_from(capacity / 1024)
            .map_err(|_| FsError::Format(format!("capacity {capacity} too large")))?;
        let blocks = capacity / BLOCK_SIZE;
        let needed = blocks.div_ceil(BLOCK_SIZE * 8).max(1);
        let bb = match self.bitmap_blocks {
            Some(bb) => bb,
            None => u8::try_from(needed)
                .map_err(|_| FsError::Format(format!("{needed} bitmap blocks exceed the 255-block cap")))?,
        };
        Ok(Superblock { ts_kb, bs_kb: 4, bb, ib: self.inode_bitmap_blocks })
    }
}

/// Flushes every line overlapping `range` and fences once.
pub fn flush_range(dev: &mut PmDevice, range: std::ops::Range<u64>) -> Result<u64> {
    let mut n = 0;
    let mut line = range.start / LINE_SIZE as u64 * LINE_SIZE as u64;
    while line < range.end {
        dev.clwb(line)?;
        line += LINE_SIZE as u64;
        n += 1;
    }
    Ok(n)
}

/// Formats `dev`: superblock, bitmaps with metadata blocks self-allocated,
/// zeroed inode table, empty log and the root directory (inode 0). Everything
/// is flushed and fenced before returning.
pub fn mkfs(dev: &mut PmDevice, opts: &MkfsOptions) -> Result<RegionMap> {
    let sb = opts.superblock(dev.capacity())?;
    let map = RegionMap::compute(sb, opts.log_blocks)?;
    if map.capacity != dev.capacity() {
        return Err(FsError::Format("superblock size disagrees with device capacity".into()));
    }

    let mut meta = vec![0u8; map.data_off as usize];
    meta[0..SUPERBLOCK_LEN as usize].copy_from_slice(&sb.encode());
    let fb = &mut meta[map.fb_map_off as usize..(map.fb_map_off + map.fb_map_len) as usize];
    for b in 0..map.first_data_block() {
        bit_put(fb, b, true);
    }
    let fi = &mut meta[map.fi_map_off as usize..(map.fi_map_off + map.fi_map_len) as usize];
    bit_put(fi, ROOT_INODE as u64, true);
    let root = map.inode_addr(ROOT_INODE) as usize;
    meta[root..root + INODE_SIZE as usize].copy_from_slice(&Inode::new(InodeType::Directory).encode());
    let log = map.log_off as usize;
    meta[log..log + 8].copy_from_slice(&map.log_blocks.to_le_bytes());

    dev.store(0, &meta)?;
    flush_range(dev, 0..map.data_off)?;
    dev.sfence();
    Ok(map)
}

/// Reads the superblock and log header to reconstruct the region map.
pub fn read_region_map(dev: &PmDevice) -> Result<RegionMap> {
    if dev.capacity() < BLOCK_SIZE {
        return Err(FsError::Corrupt("device smaller than one block".into()));
    }
    let sb = Superblock::decode(dev.view(0, SUPERBLOCK_LEN)?);
    // compute with a provisional log size to locate the log header
    let probe = RegionMap::compute(sb, 1).map_err(|e| FsError::Corrupt(format!("bad superblock: {e}")))?;
    if probe.capacity != dev.capacity() {
        return Err(FsError::Corrupt(format!(
            "superblock says {} bytes, device has {}",
            probe.capacity,
            dev.capacity()
        )));
    }
    let log_blocks = dev.read_u64(probe.log_off)?;
    RegionMap::compute(sb, log_blocks).map_err(|e| FsError::Corrupt(format!("bad log header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmsim::OrderingModel;
    use proptest::prelude::*;

    #[test]
    fn four_mib_example_extents() {
        // hand-computed: 7 + 4096 = 4103; 4103 + 4096 = 8199; 32768 inodes * 32 B = 1 MiB
        let sb = Superblock { ts_kb: 4096, bs_kb: 4, bb: 1, ib: 1 };
        let m = RegionMap::compute(sb, 8).unwrap();
        assert_eq!(m.fb_map_off, 7);
        assert_eq!(m.fi_map_off, 4103);
        assert_eq!(m.itable_off, 8199);
        assert_eq!(m.inode_count, 32768);
        assert_eq!(m.itable_len, 1_048_576);
        // 8199 + 1048576 = 1056775 -> next block boundary 259 * 4096
        assert_eq!(m.log_off, 1_060_864);
        assert_eq!(m.data_off, 1_093_632);
        assert_eq!(m.first_data_block(), 267);
        assert_eq!(m.data_blocks(), 1024 - 267);
    }

    #[test]
    fn mkfs_marks_metadata_allocated_and_root_dir() {
        let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).unwrap();
        let opts = MkfsOptions { log_blocks: 8, ..Default::default() };
        let map = mkfs(&mut dev, &opts).unwrap();
        assert!(dev.is_quiescent());
        for b in 0..map.first_data_block() {
            assert!(pm_bit(&dev, &map, Bitmap::Blocks, b).unwrap(), "block {b}");
        }
        assert!(!pm_bit(&dev, &map, Bitmap::Blocks, map.first_data_block()).unwrap());
        let root = inode_read(&dev, &map, ROOT_INODE).unwrap();
        assert_eq!(root.kind, InodeType::Directory);
        assert_eq!(read_region_map(&dev).unwrap(), map);
    }

    #[test]
    fn mkfs_rejects_tiny_image() {
        let mut dev = PmDevice::new(1 << 20, OrderingModel::PaperOrdered).unwrap();
        assert!(matches!(mkfs(&mut dev, &MkfsOptions::default()), Err(FsError::Format(_))));
    }

    #[test]
    fn mkfs_rejects_log_of_zero_blocks() {
        let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).unwrap();
        let opts = MkfsOptions { log_blocks: 0, ..Default::default() };
        assert!(mkfs(&mut dev, &opts).is_err());
    }

    #[test]
    fn mount_rejects_garbage_superblock() {
        let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).unwrap();
        dev.store(0, &[1, 2, 3, 4, 9, 9, 9]).unwrap();
        assert!(matches!(read_region_map(&dev), Err(FsError::Corrupt(_))));
    }

    #[test]
    fn inode_roundtrip_fields() {
        let i = Inode { i_blocks: 3, i_block: 999, i_size: 12000, kind: InodeType::File, reserved: [0; 15] };
        assert_eq!(Inode::decode(&i.encode()).unwrap(), i);
        let mut bad = i.encode();
        bad[16] = 7;
        assert!(Inode::decode(&bad).is_err());
    }

    #[test]
    fn inode_write_then_read() {
        let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).unwrap();
        let map = mkfs(&mut dev, &MkfsOptions::default()).unwrap();
        let i = Inode { i_blocks: 1, i_block: 300, i_size: 10, kind: InodeType::File, reserved: [0; 15] };
        inode_write(&mut dev, &map, 5, &i).unwrap();
        assert_eq!(inode_read(&dev, &map, 5).unwrap(), i);
        assert!(inode_read(&dev, &map, map.inode_count as u32).is_err());
    }

    proptest! {
        #[test]
        fn inode_encode_decode_identity(mut raw in proptest::array::uniform32(any::<u8>()), kind in 0u8..4) {
            raw[16] = kind;
            let decoded = Inode::decode(&raw).unwrap();
            prop_assert_eq!(decoded.encode(), raw);
        }

        #[test]
        fn region_arithmetic_sweep(ts_blocks in 300u32..20000, bb in 1u8..4, ib in 1u8..3, k in 1u64..40) {
            let sb = Superblock { ts_kb: ts_blocks * 4, bs_kb: 4, bb, ib };
            if let Ok(m) = RegionMap::compute(sb, k) {
                prop_assert_eq!(m.fb_map_off, 7);
                prop_assert_eq!(m.fi_map_off, 7 + 4096 * bb as u64);
                prop_assert_eq!(m.itable_off, m.fi_map_off + 4096 * ib as u64);
                prop_assert_eq!(m.inode_count, 4096 * ib as u64 * 8);
                prop_assert!(m.log_off >= m.itable_off + m.itable_len);
                prop_assert!(m.log_off - (m.itable_off + m.itable_len) < 4096);
                prop_assert_eq!(m.data_off % 4096, 0);
                prop_assert_eq!(m.data_off, m.log_off + k * 4096);
                prop_assert!(m.data_off < m.capacity);
            }
        }
    }
}

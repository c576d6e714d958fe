//! Block-reference tree behind `i_block`.
//!
//! Height 0: the root is the single data block. Height h > 0: the root is an
//! interior node of 1024 little-endian u32 child indices (0 = hole), and
//! leaves sit h levels below. Height is a function of `i_size`.

use crate::error::{FsError, Result};
use crate::layout::{RegionMap, BLOCK_SIZE};
use crate::pmsim::PmDevice;
use crate::txn::{Engine, FlushClass};
use crate::wal::TxnNo;

pub const FANOUT: u64 = BLOCK_SIZE / 4;

/// Minimal height whose tree can address every block of a file of `size` bytes.
pub fn height_for_size(size: u64) -> u32 {
    let blocks = size.div_ceil(BLOCK_SIZE);
    let mut height = 0;
    let mut reach = 1u64;
    while reach < blocks {
        reach = reach.saturating_mul(FANOUT);
        height += 1;
    }
    height
}

fn span(level: u32) -> u64 {
    FANOUT.pow(level - 1)
}

fn read_slot(dev: &PmDevice, map: &RegionMap, node: u32, idx: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    dev.read_into(map.block_addr(node) + idx * 4, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Block holding logical block `lblk`, or 0 for a hole.
pub fn lookup(dev: &PmDevice, map: &RegionMap, root: u32, height: u32, lblk: u64) -> Result<u32> {
    if height == 0 {
        return Ok(if lblk == 0 { root } else { 0 });
    }
    if lblk >= FANOUT.saturating_pow(height) {
        return Ok(0);
    }
    let mut node = root;
    for level in (1..=height).rev() {
        if node == 0 {
            return Ok(0);
        }
        if !map.is_data_block(node) {
            return Err(FsError::Corrupt(format!("tree node {node} outside the data region")));
        }
        node = read_slot(dev, map, node, (lblk / span(level)) % FANOUT)?;
    }
    Ok(node)
}

/// Every block reachable from a tree.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TreeBlocks {
    /// (logical block, block), in logical order.
    pub leaves: Vec<(u64, u32)>,
    pub interior: Vec<u32>,
}

pub fn walk(dev: &PmDevice, map: &RegionMap, root: u32, height: u32) -> Result<TreeBlocks> {
    let mut out = TreeBlocks::default();
    if root == 0 {
        return Ok(out);
    }
    if !map.is_data_block(root) {
        return Err(FsError::Corrupt(format!("tree root {root} outside the data region")));
    }
    if height == 0 {
        out.leaves.push((0, root));
        return Ok(out);
    }
    walk_node(dev, map, root, height, 0, &mut out)?;
    Ok(out)
}

fn walk_node(dev: &PmDevice, map: &RegionMap, node: u32, level: u32, base: u64, out: &mut TreeBlocks) -> Result<()> {
    out.interior.push(node);
    let raw = dev.view(map.block_addr(node), BLOCK_SIZE)?;
    let children: Vec<(u64, u32)> = raw
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| (i as u64, u32::from_le_bytes(c.try_into().unwrap())))
        .filter(|(_, c)| *c != 0)
        .collect();
    for (i, child) in children {
        if !map.is_data_block(child) {
            return Err(FsError::Corrupt(format!("tree node {node} slot {i} points at block {child}")));
        }
        let lblk = base + i * span(level);
        if level == 1 {
            out.leaves.push((lblk, child));
        } else {
            walk_node(dev, map, child, level - 1, lblk, out)?;
        }
    }
    Ok(())
}

/// Adds levels on top of a staged tree until it reaches `height`.
pub(crate) fn grow(eng: &mut Engine, no: TxnNo, inum: u32, height: u32) -> Result<()> {
    loop {
        let s = eng.staged(no, inum)?;
        if s.height >= height {
            return Ok(());
        }
        let old_root = s.inode.i_block;
        if old_root != 0 {
            let node = eng.claim_block(no)?;
            let mut content = vec![0u8; BLOCK_SIZE as usize];
            content[0..4].copy_from_slice(&old_root.to_le_bytes());
            eng.write_block(node, &content, FlushClass::Tree)?;
            eng.log_block_set(no, node)?;
            eng.mark_fresh_node(no, node)?;
            eng.staged_mut(no, inum)?.inode.i_block = node;
        }
        eng.staged_mut(no, inum)?.height += 1;
    }
}

/// Returns a node the transaction may modify in place: `node` itself if it
/// is fresh, otherwise a fresh copy of it (or a zeroed node for a hole). The
/// replaced committed node is freed.
fn own_node(eng: &mut Engine, no: TxnNo, node: u32) -> Result<u32> {
    if node != 0 && eng.is_fresh_node(no, node) {
        return Ok(node);
    }
    let content = if node == 0 {
        vec![0u8; BLOCK_SIZE as usize]
    } else {
        eng.dev.read(eng.map.block_addr(node), BLOCK_SIZE)?
    };
    let fresh = eng.claim_block(no)?;
    eng.write_block(fresh, &content, FlushClass::Tree)?;
    eng.log_block_set(no, fresh)?;
    eng.mark_fresh_node(no, fresh)?;
    if node != 0 {
        eng.free_block(no, node)?;
    }
    Ok(fresh)
}

/// Points logical block `lblk` of the staged tree at `block`, copying
/// committed interior nodes on the way down.
pub(crate) fn set_leaf(eng: &mut Engine, no: TxnNo, inum: u32, lblk: u64, block: u32) -> Result<()> {
    let (height, root) = {
        let s = eng.staged(no, inum)?;
        (s.height, s.inode.i_block)
    };
    if height == 0 {
        debug_assert_eq!(lblk, 0);
        eng.staged_mut(no, inum)?.inode.i_block = block;
        return Ok(());
    }
    let mut node = own_node(eng, no, root)?;
    if node != root {
        eng.staged_mut(no, inum)?.inode.i_block = node;
    }
    for level in (1..=height).rev() {
        let idx = (lblk / span(level)) % FANOUT;
        if level == 1 {
            eng.write_slot(node, idx, block)?;
            break;
        }
        let child = read_slot(&eng.dev, &eng.map, node, idx)?;
        let owned = own_node(eng, no, child)?;
        if owned != child {
            eng.write_slot(node, idx, owned)?;
        }
        node = owned;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heights() {
        assert_eq!(height_for_size(0), 0);
        assert_eq!(height_for_size(4096), 0);
        assert_eq!(height_for_size(4097), 1);
        assert_eq!(height_for_size(4096 * 1024), 1);
        assert_eq!(height_for_size(4096 * 1024 + 1), 2);
    }
}

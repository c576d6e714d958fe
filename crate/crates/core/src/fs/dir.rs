//! ext-style directory blocks: variable-length records that tile each 4 KiB
//! block exactly. An unused record has inode `EMPTY_INO`.

use crate::error::{FsError, Result};
use crate::layout::{InodeType, BLOCK_SIZE};

pub const DIRENT_HEADER: usize = 8;
pub const EMPTY_INO: u32 = u32::MAX;
pub const MAX_NAME: usize = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dirent {
    pub offset: usize,
    pub inode: u32,
    pub rec_len: u16,
    pub file_type: u8,
    pub name: Vec<u8>,
}

impl Dirent {
    pub fn is_live(&self) -> bool {
        self.inode != EMPTY_INO
    }
}

pub fn record_len(name_len: usize) -> usize {
    (DIRENT_HEADER + name_len).div_ceil(4) * 4
}

pub fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > MAX_NAME || name.contains('/') || name.contains('\0') || name == "." || name == ".." {
        return Err(FsError::InvalidPath(name.to_string()));
    }
    Ok(())
}

/// A block holding one unused record that spans it.
pub fn empty_block() -> Vec<u8> {
    let mut b = vec![0u8; BLOCK_SIZE as usize];
    write_header(&mut b, 0, EMPTY_INO, BLOCK_SIZE as u16, 0, 0);
    b
}

fn write_header(block: &mut [u8], off: usize, inode: u32, rec_len: u16, name_len: u8, file_type: u8) {
    block[off..off + 4].copy_from_slice(&inode.to_le_bytes());
    block[off + 4..off + 6].copy_from_slice(&rec_len.to_le_bytes());
    block[off + 6] = name_len;
    block[off + 7] = file_type;
}

/// Decodes every record, checking that they tile the block.
pub fn parse_block(block: &[u8]) -> Result<Vec<Dirent>> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < block.len() {
        if off + DIRENT_HEADER > block.len() {
            return Err(FsError::Corrupt(format!("dirent header at {off} crosses the block end")));
        }
        let inode = u32::from_le_bytes(block[off..off + 4].try_into().unwrap());
        let rec_len = u16::from_le_bytes(block[off + 4..off + 6].try_into().unwrap());
        let name_len = block[off + 6] as usize;
        let file_type = block[off + 7];
        if (rec_len as usize) < record_len(name_len) || rec_len % 4 != 0 || off + rec_len as usize > block.len() {
            return Err(FsError::Corrupt(format!("dirent at {off}: rec_len {rec_len}, name_len {name_len}")));
        }
        if inode != EMPTY_INO && name_len == 0 {
            return Err(FsError::Corrupt(format!("dirent at {off}: live entry with empty name")));
        }
        out.push(Dirent {
            offset: off,
            inode,
            rec_len,
            file_type,
            name: block[off + DIRENT_HEADER..off + DIRENT_HEADER + name_len].to_vec(),
        });
        off += rec_len as usize;
    }
    Ok(out)
}

/// Inserts a record if the block has room. Returns false when it does not.
pub fn insert(block: &mut [u8], name: &str, inode: u32, kind: InodeType) -> Result<bool> {
    let need = record_len(name.len());
    for d in parse_block(block)? {
        let (at, rec_len) = if !d.is_live() {
            if (d.rec_len as usize) < need {
                continue;
            }
            (d.offset, d.rec_len)
        } else {
            let used = record_len(d.name.len());
            let slack = d.rec_len as usize - used;
            if slack < need {
                continue;
            }
            write_header(block, d.offset, d.inode, used as u16, d.name.len() as u8, d.file_type);
            (d.offset + used, slack as u16)
        };
        write_header(block, at, inode, rec_len, name.len() as u8, kind as u8);
        block[at + DIRENT_HEADER..at + DIRENT_HEADER + name.len()].copy_from_slice(name.as_bytes());
        return Ok(true);
    }
    Ok(false)
}

/// Removes the live record called `name`. Returns false if absent.
pub fn remove(block: &mut [u8], name: &str) -> Result<bool> {
    let entries = parse_block(block)?;
    for (i, d) in entries.iter().enumerate() {
        if d.is_live() && d.name == name.as_bytes() {
            if i == 0 {
                write_header(block, d.offset, EMPTY_INO, d.rec_len, 0, 0);
                block[d.offset + DIRENT_HEADER..d.offset + d.rec_len as usize].fill(0);
            } else {
                let p = &entries[i - 1];
                let merged = p.rec_len + d.rec_len;
                block[p.offset + 4..p.offset + 6].copy_from_slice(&merged.to_le_bytes());
                block[d.offset..d.offset + d.rec_len as usize].fill(0);
            }
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn live_names(block: &[u8]) -> Vec<String> {
        parse_block(block)
            .unwrap()
            .into_iter()
            .filter(Dirent::is_live)
            .map(|d| String::from_utf8(d.name).unwrap())
            .collect()
    }

    #[test]
    fn insert_remove_keeps_tiling() {
        let mut b = empty_block();
        for name in ["a", "bb", "ccc", "a-much-longer-name"] {
            assert!(insert(&mut b, name, 7, InodeType::File).unwrap());
        }
        assert_eq!(live_names(&b), vec!["a", "bb", "ccc", "a-much-longer-name"]);
        let total: usize = parse_block(&b).unwrap().iter().map(|d| d.rec_len as usize).sum();
        assert_eq!(total, 4096);
        assert!(remove(&mut b, "bb").unwrap());
        assert!(remove(&mut b, "a").unwrap());
        assert!(!remove(&mut b, "zz").unwrap());
        assert_eq!(live_names(&b), vec!["ccc", "a-much-longer-name"]);
        assert!(insert(&mut b, "dd", 9, InodeType::Directory).unwrap());
        assert_eq!(live_names(&b), vec!["dd", "ccc", "a-much-longer-name"]);
    }

    #[test]
    fn block_fills_up() {
        let mut b = empty_block();
        let name = "x".repeat(200);
        let mut n = 0;
        while insert(&mut b, &format!("{n:03}{name}"), n, InodeType::File).unwrap() {
            n += 1;
        }
        // each record: 8 + 203 -> 212 bytes; 4096 / 212 = 19
        assert_eq!(n, 19);
    }

    #[test]
    fn bad_names() {
        assert!(validate_name("").is_err());
        assert!(validate_name("a/b").is_err());
        assert!(validate_name(&"n".repeat(256)).is_err());
        assert!(validate_name(&"n".repeat(255)).is_ok());
    }

    #[test]
    fn corrupt_rec_len_detected() {
        let mut b = empty_block();
        b[4..6].copy_from_slice(&3u16.to_le_bytes());
        assert!(parse_block(&b).is_err());
    }
}

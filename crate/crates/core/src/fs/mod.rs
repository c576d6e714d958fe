//! File and directory operations.
//!
//! Every write-mode open starts a transaction; `close` is the point of
//! atomicity and durability. Namespace operations (create, unlink, mkdir,
//! rmdir) are each their own transaction, committed before they return.

pub mod dir;
pub mod tree;

use std::borrow::Cow;
use std::collections::BTreeMap;

use parking_lot::Mutex;

use crate::error::{FsError, Result};
use crate::layout::{read_region_map, InodeType, RegionMap, BLOCK_SIZE, ROOT_INODE};
use crate::pmsim::{DeviceStats, PmDevice};
use crate::recovery::{recover, RecoveryReport};
use crate::txn::{Engine, FlushClass, FlushStats, FsConfig, InodeUpdate};
use crate::wal::{TxnNo, ROOT_SLOT};

use self::dir::Dirent;
use self::tree::height_for_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileHandle(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpenMode {
    Read,
    Write,
    /// Create the file if it does not exist, then open for writing.
    Create,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stat {
    pub inode: u32,
    pub kind: InodeType,
    pub size: u64,
    pub blocks: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub inode: u32,
    pub kind: InodeType,
}

#[derive(Debug)]
struct Handle {
    inum: u32,
    txn: Option<TxnNo>,
}

struct FsState {
    eng: Engine,
    handles: BTreeMap<u64, Handle>,
    next_handle: u64,
    recovery: RecoveryReport,
}

/// A mounted file system. All methods take `&self`; one internal lock
/// serializes access to the engine.
pub struct DurableFs {
    state: Mutex<FsState>,
}

#[derive(Clone, Copy, Debug)]
struct View {
    root: u32,
    height: u32,
    size: u64,
}

fn components(path: &str) -> Result<Vec<&str>> {
    if !path.starts_with('/') {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
    for c in &comps {
        dir::validate_name(c)?;
    }
    Ok(comps)
}

fn split_parent(path: &str) -> Result<(Vec<&str>, &str)> {
    let mut comps = components(path)?;
    let name = comps.pop().ok_or_else(|| FsError::InvalidPath(path.to_string()))?;
    Ok((comps, name))
}

fn committed_view(eng: &mut Engine, inum: u32) -> Result<View> {
    let i = eng.committed_inode(inum)?;
    Ok(View { root: i.i_block, height: height_for_size(i.i_size), size: i.i_size })
}

fn staged_view(eng: &Engine, no: TxnNo, inum: u32) -> Result<View> {
    let s = eng.staged(no, inum)?;
    Ok(View { root: s.inode.i_block, height: s.height, size: s.inode.i_size })
}

fn read_view(eng: &Engine, view: View, buf: &mut [u8], offset: u64) -> Result<usize> {
    if offset >= view.size {
        return Ok(0);
    }
    let n = (buf.len() as u64).min(view.size - offset) as usize;
    let mut done = 0usize;
    while done < n {
        let pos = offset + done as u64;
        let lblk = pos / BLOCK_SIZE;
        let in_off = pos % BLOCK_SIZE;
        let take = ((BLOCK_SIZE - in_off) as usize).min(n - done);
        let block = tree::lookup(&eng.dev, &eng.map, view.root, view.height, lblk)?;
        let out = &mut buf[done..done + take];
        if block == 0 {
            out.fill(0);
        } else {
            eng.dev.read_into(eng.map.block_addr(block) + in_off, out)?;
        }
        done += take;
    }
    Ok(n)
}

fn dir_blocks(eng: &Engine, view: View) -> Result<Vec<(u64, Vec<u8>)>> {
    let mut out = Vec::new();
    for lblk in 0..view.size.div_ceil(BLOCK_SIZE) {
        let mut b = vec![0u8; BLOCK_SIZE as usize];
        read_view(eng, view, &mut b, lblk * BLOCK_SIZE)?;
        out.push((lblk, b));
    }
    Ok(out)
}

fn dir_lookup(eng: &Engine, view: View, name: &str) -> Result<Option<Dirent>> {
    for (_, block) in dir_blocks(eng, view)? {
        if let Some(d) = dir::parse_block(&block)?.into_iter().find(|d| d.is_live() && d.name == name.as_bytes()) {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

fn resolve(eng: &mut Engine, comps: &[&str], path: &str) -> Result<u32> {
    let mut cur = ROOT_INODE;
    for c in comps {
        let inode = eng.committed_inode(cur)?;
        if inode.kind != InodeType::Directory {
            return Err(FsError::NotDir(path.to_string()));
        }
        let view = committed_view(eng, cur)?;
        cur = dir_lookup(eng, view, c)?.ok_or_else(|| FsError::NotFound(path.to_string()))?.inode;
    }
    Ok(cur)
}

fn resolve_dir(eng: &mut Engine, comps: &[&str], path: &str) -> Result<u32> {
    let n = resolve(eng, comps, path)?;
    if eng.committed_inode(n)?.kind != InodeType::Directory {
        return Err(FsError::NotDir(path.to_string()));
    }
    Ok(n)
}

/// The write path for one block: copy-on-write into a fresh block, make it
/// durable, then log the allocation, the release of the old block and the
/// inode changes.
fn write_one_block(eng: &mut Engine, no: TxnNo, inum: u32, lblk: u64, in_off: usize, chunk: &[u8]) -> Result<()> {
    let (root, height, size, blocks) = {
        let s = eng.staged(no, inum)?;
        (s.inode.i_block, s.height, s.inode.i_size, s.inode.i_blocks)
    };
    let old = tree::lookup(&eng.dev, &eng.map, root, height, lblk)?;
    let new = eng.claim_block(no)?;
    let content: Cow<[u8]> = if chunk.len() as u64 == BLOCK_SIZE {
        Cow::Borrowed(chunk)
    } else {
        let mut b = if old != 0 {
            eng.dev.read(eng.map.block_addr(old), BLOCK_SIZE)?
        } else {
            vec![0u8; BLOCK_SIZE as usize]
        };
        b[in_off..in_off + chunk.len()].copy_from_slice(chunk);
        Cow::Owned(b)
    };
    eng.write_block(new, &content, FlushClass::Data)?;
    eng.log_block_set(no, new)?;
    if old != 0 {
        eng.free_block(no, old)?;
    }
    tree::set_leaf(eng, no, inum, lblk, new)?;
    eng.stage_inode_update(no, inum, InodeUpdate::BlockAddr { logical: lblk, block: new })?;
    eng.sync_root(no, inum)?;
    let new_size = size.max(lblk * BLOCK_SIZE + in_off as u64 + chunk.len() as u64);
    eng.stage_inode_update(no, inum, InodeUpdate::Size(new_size))?;
    eng.stage_inode_update(no, inum, InodeUpdate::Blocks(blocks + (old == 0) as u32))?;
    Ok(())
}

/// Writes `data` at `offset` into the staged inode. Writing past the end of
/// the file first fills the gap with zeros so files never contain holes.
fn write_at(eng: &mut Engine, no: TxnNo, inum: u32, data: &[u8], offset: u64) -> Result<usize> {
    if data.is_empty() {
        return Ok(0);
    }
    let size = eng.staged(no, inum)?.inode.i_size;
    let (start, buf): (u64, Cow<[u8]>) = if offset > size {
        let mut v = vec![0u8; (offset - size) as usize];
        v.extend_from_slice(data);
        (size, Cow::Owned(v))
    } else {
        (offset, Cow::Borrowed(data))
    };
    let end = start + buf.len() as u64;
    if (end - 1) / BLOCK_SIZE >= ROOT_SLOT as u64 {
        return Err(FsError::FileTooLarge);
    }
    tree::grow(eng, no, inum, height_for_size(end.max(size)))?;
    eng.sync_root(no, inum)?;
    let mut pos = start;
    while pos < end {
        let lblk = pos / BLOCK_SIZE;
        let in_off = (pos % BLOCK_SIZE) as usize;
        let n = ((BLOCK_SIZE as usize) - in_off).min((end - pos) as usize);
        let from = (pos - start) as usize;
        write_one_block(eng, no, inum, lblk, in_off, &buf[from..from + n])?;
        pos += n as u64;
    }
    Ok(data.len())
}

fn dir_add(eng: &mut Engine, no: TxnNo, dir_inum: u32, name: &str, child: u32, kind: InodeType) -> Result<()> {
    let view = staged_view(eng, no, dir_inum)?;
    for (lblk, mut block) in dir_blocks(eng, view)? {
        if dir::insert(&mut block, name, child, kind)? {
            write_at(eng, no, dir_inum, &block, lblk * BLOCK_SIZE)?;
            return Ok(());
        }
    }
    let mut block = dir::empty_block();
    if !dir::insert(&mut block, name, child, kind)? {
        return Err(FsError::Logic("directory record does not fit an empty block".into()));
    }
    write_at(eng, no, dir_inum, &block, view.size)?;
    Ok(())
}

fn dir_remove(eng: &mut Engine, no: TxnNo, dir_inum: u32, name: &str) -> Result<()> {
    let view = staged_view(eng, no, dir_inum)?;
    for (lblk, mut block) in dir_blocks(eng, view)? {
        if dir::remove(&mut block, name)? {
            write_at(eng, no, dir_inum, &block, lblk * BLOCK_SIZE)?;
            return Ok(());
        }
    }
    Err(FsError::NotFound(name.to_string()))
}

/// Runs `f` as a transaction committed before returning.
fn single_op<R>(eng: &mut Engine, f: impl FnOnce(&mut Engine, TxnNo) -> Result<R>) -> Result<R> {
    let no = eng.begin()?;
    let out = match f(eng, no) {
        Ok(r) => r,
        Err(e) => {
            let _ = eng.abort(no);
            return Err(e);
        }
    };
    if let Err(e) = eng.commit(no) {
        let _ = eng.abort(no);
        return Err(e);
    }
    Ok(out)
}

impl FsState {
    fn handle(&self, h: FileHandle) -> Result<&Handle> {
        self.handles.get(&h.0).ok_or(FsError::BadHandle(h.0))
    }

    fn add_handle(&mut self, inum: u32, txn: Option<TxnNo>) -> FileHandle {
        let id = self.next_handle;
        self.next_handle += 1;
        self.handles.insert(id, Handle { inum, txn });
        FileHandle(id)
    }

    fn open_on(&self, inum: u32) -> bool {
        self.handles.values().any(|h| h.inum == inum)
    }

    fn group_of(&self, no: TxnNo) -> Vec<u64> {
        self.handles.iter().filter(|(_, h)| h.txn == Some(no)).map(|(id, _)| *id).collect()
    }

    fn create(&mut self, path: &str, kind: InodeType) -> Result<u32> {
        let (parent_comps, name) = split_parent(path)?;
        let eng = &mut self.eng;
        let parent = resolve_dir(eng, &parent_comps, path)?;
        let view = committed_view(eng, parent)?;
        if dir_lookup(eng, view, name)?.is_some() {
            return Err(FsError::Exists(path.to_string()));
        }
        single_op(eng, |eng, no| {
            eng.attach(no, parent)?;
            let n = eng.alloc_inode(no, kind)?;
            dir_add(eng, no, parent, name, n, kind)?;
            Ok(n)
        })
    }

    fn remove(&mut self, path: &str, want: InodeType) -> Result<()> {
        let (parent_comps, name) = split_parent(path)?;
        let parent = resolve_dir(&mut self.eng, &parent_comps, path)?;
        let target = {
            let view = committed_view(&mut self.eng, parent)?;
            dir_lookup(&self.eng, view, name)?.ok_or_else(|| FsError::NotFound(path.to_string()))?.inode
        };
        let eng = &mut self.eng;
        let inode = eng.committed_inode(target)?;
        match (want, inode.kind) {
            (InodeType::File, InodeType::Directory) => return Err(FsError::IsDir(path.to_string())),
            (InodeType::Directory, k) if k != InodeType::Directory => return Err(FsError::NotDir(path.to_string())),
            _ => {}
        }
        if eng.writer_of(target).is_some() || self.handles.values().any(|h| h.inum == target) {
            return Err(FsError::Busy(target));
        }
        let view = committed_view(eng, target)?;
        if want == InodeType::Directory {
            for (_, block) in dir_blocks(eng, view)? {
                if dir::parse_block(&block)?.iter().any(Dirent::is_live) {
                    return Err(FsError::NotEmpty(path.to_string()));
                }
            }
        }
        let blocks = tree::walk(&eng.dev, &eng.map, view.root, view.height)?;
        single_op(eng, |eng, no| {
            eng.attach(no, parent)?;
            for (_, b) in &blocks.leaves {
                eng.free_block(no, *b)?;
            }
            for b in &blocks.interior {
                eng.free_block(no, *b)?;
            }
            eng.free_inode(no, target)?;
            dir_remove(eng, no, parent, name)
        })
    }

    fn commit_group(&mut self, no: TxnNo, ids: &[u64]) -> Result<()> {
        for id in ids {
            self.handles.remove(id);
        }
        if let Err(e) = self.eng.commit(no) {
            if self.eng.txn(no).is_ok() {
                let _ = self.eng.abort(no);
            }
            return Err(e);
        }
        Ok(())
    }
}

impl DurableFs {
    /// Recovers the device and mounts it.
    pub fn mount(mut dev: PmDevice, config: FsConfig) -> Result<Self> {
        let recovery = recover(&mut dev)?;
        let map = read_region_map(&dev)?;
        let eng = Engine::new(dev, map, config)?;
        Ok(DurableFs { state: Mutex::new(FsState { eng, handles: BTreeMap::new(), next_handle: 1, recovery }) })
    }

    pub fn last_recovery(&self) -> RecoveryReport {
        self.state.lock().recovery.clone()
    }

    pub fn region_map(&self) -> RegionMap {
        *self.state.lock().eng.map()
    }

    pub fn device_stats(&self) -> DeviceStats {
        self.state.lock().eng.device().stats()
    }

    pub fn flush_stats(&self) -> FlushStats {
        self.state.lock().eng.flush_stats()
    }

    pub fn with_device<R>(&self, f: impl FnOnce(&PmDevice) -> R) -> R {
        f(self.state.lock().eng.device())
    }

    /// Active log length in entries.
    pub fn log_len(&self) -> u64 {
        self.state.lock().eng.log().len()
    }

    pub fn open_handles(&self) -> usize {
        self.state.lock().handles.len()
    }

    /// Unmounts without committing anything still open and returns the device.
    pub fn into_device(self) -> PmDevice {
        self.state.into_inner().eng.into_device()
    }

    pub fn create(&self, path: &str) -> Result<u32> {
        self.state.lock().create(path, InodeType::File)
    }

    pub fn mkdir(&self, path: &str) -> Result<u32> {
        self.state.lock().create(path, InodeType::Directory)
    }

    pub fn unlink(&self, path: &str) -> Result<()> {
        self.state.lock().remove(path, InodeType::File)
    }

    pub fn rmdir(&self, path: &str) -> Result<()> {
        if components(path)?.is_empty() {
            return Err(FsError::Busy(ROOT_INODE));
        }
        self.state.lock().remove(path, InodeType::Directory)
    }

    pub fn stat(&self, path: &str) -> Result<Stat> {
        let mut st = self.state.lock();
        let comps = components(path)?;
        let n = resolve(&mut st.eng, &comps, path)?;
        let i = st.eng.committed_inode(n)?;
        Ok(Stat { inode: n, kind: i.kind, size: i.i_size, blocks: i.i_blocks })
    }

    pub fn readdir(&self, path: &str) -> Result<Vec<DirEntry>> {
        let mut st = self.state.lock();
        let comps = components(path)?;
        let n = resolve_dir(&mut st.eng, &comps, path)?;
        let view = committed_view(&mut st.eng, n)?;
        let mut out = Vec::new();
        for (_, block) in dir_blocks(&st.eng, view)? {
            for d in dir::parse_block(&block)?.into_iter().filter(Dirent::is_live) {
                let kind = InodeType::from_u8(d.file_type)
                    .ok_or_else(|| FsError::Corrupt(format!("dirent file type {}", d.file_type)))?;
                let name = String::from_utf8(d.name).map_err(|_| FsError::Corrupt("non-utf8 name".into()))?;
                out.push(DirEntry { name, inode: d.inode, kind });
            }
        }
        Ok(out)
    }

    pub fn open(&self, path: &str, mode: OpenMode) -> Result<FileHandle> {
        let mut st = self.state.lock();
        let comps = components(path)?;
        let inum = match resolve(&mut st.eng, &comps, path) {
            Ok(n) => n,
            Err(FsError::NotFound(_)) if mode == OpenMode::Create => st.create(path, InodeType::File)?,
            Err(e) => return Err(e),
        };
        if st.eng.committed_inode(inum)?.kind != InodeType::File {
            return Err(FsError::IsDir(path.to_string()));
        }
        if mode == OpenMode::Read {
            return Ok(st.add_handle(inum, None));
        }
        if st.eng.writer_of(inum).is_some() {
            return Err(FsError::Busy(inum));
        }
        let no = st.eng.begin()?;
        if let Err(e) = st.eng.attach(no, inum) {
            let _ = st.eng.abort(no);
            return Err(e);
        }
        Ok(st.add_handle(inum, Some(no)))
    }

    /// Opens several files for writing under one shared transaction. The
    /// handles must be closed together with [`DurableFs::close_many`].
    pub fn open_many(&self, paths: &[&str]) -> Result<Vec<FileHandle>> {
        let mut st = self.state.lock();
        let mut inums = Vec::with_capacity(paths.len());
        for p in paths {
            let comps = components(p)?;
            let n = resolve(&mut st.eng, &comps, p)?;
            if st.eng.committed_inode(n)?.kind != InodeType::File {
                return Err(FsError::IsDir(p.to_string()));
            }
            if inums.contains(&n) || st.eng.writer_of(n).is_some() {
                return Err(FsError::Busy(n));
            }
            inums.push(n);
        }
        let no = st.eng.begin()?;
        for &n in &inums {
            if let Err(e) = st.eng.attach(no, n) {
                let _ = st.eng.abort(no);
                return Err(e);
            }
        }
        Ok(inums.into_iter().map(|n| st.add_handle(n, Some(no))).collect())
    }

    pub fn write(&self, h: FileHandle, buf: &[u8], offset: u64) -> Result<usize> {
        let mut st = self.state.lock();
        let handle = st.handle(h)?;
        let (inum, no) = (handle.inum, handle.txn.ok_or(FsError::ReadOnly(h.0))?);
        if st.eng.txn(no)?.poisoned {
            return Err(FsError::Aborted(no.0));
        }
        let r = write_at(&mut st.eng, no, inum, buf, offset);
        if r.is_err() {
            st.eng.poison(no);
        }
        r
    }

    /// Reads from the committed file, or from the handle's own pending state
    /// when it is a write handle. Returns 0 at or past end of file.
    pub fn read(&self, h: FileHandle, buf: &mut [u8], offset: u64) -> Result<usize> {
        let mut st = self.state.lock();
        let handle = st.handle(h)?;
        let (inum, txn) = (handle.inum, handle.txn);
        let view = match txn {
            Some(no) => staged_view(&st.eng, no, inum)?,
            None => committed_view(&mut st.eng, inum)?,
        };
        read_view(&st.eng, view, buf, offset)
    }

    /// Size as seen through the handle.
    pub fn handle_size(&self, h: FileHandle) -> Result<u64> {
        let mut st = self.state.lock();
        let handle = st.handle(h)?;
        let (inum, txn) = (handle.inum, handle.txn);
        Ok(match txn {
            Some(no) => staged_view(&st.eng, no, inum)?.size,
            None => committed_view(&mut st.eng, inum)?.size,
        })
    }

    /// Commits a write handle's transaction; on return its changes are durable.
    pub fn close(&self, h: FileHandle) -> Result<()> {
        let mut st = self.state.lock();
        let txn = st.handle(h)?.txn;
        match txn {
            None => {
                st.handles.remove(&h.0);
                Ok(())
            }
            Some(no) => {
                if st.group_of(no).len() > 1 {
                    return Err(FsError::GroupClose);
                }
                st.commit_group(no, &[h.0])
            }
        }
    }

    /// Commits the shared transaction of handles from [`DurableFs::open_many`]
    /// with a single Commit/End pair.
    pub fn close_many(&self, hs: &[FileHandle]) -> Result<()> {
        let mut st = self.state.lock();
        let mut txn = None;
        for h in hs {
            let t = st.handle(*h)?.txn.ok_or(FsError::ReadOnly(h.0))?;
            if txn.is_some_and(|x| x != t) {
                return Err(FsError::GroupClose);
            }
            txn = Some(t);
        }
        let Some(no) = txn else { return Ok(()) };
        let mut group = st.group_of(no);
        let mut given: Vec<u64> = hs.iter().map(|h| h.0).collect();
        group.sort_unstable();
        given.sort_unstable();
        given.dedup();
        if group != given {
            return Err(FsError::GroupClose);
        }
        st.commit_group(no, &given)
    }

    /// Discards a write handle's transaction (and every handle sharing it).
    pub fn abort(&self, h: FileHandle) -> Result<()> {
        let mut st = self.state.lock();
        let txn = st.handle(h)?.txn;
        match txn {
            None => {
                st.handles.remove(&h.0);
            }
            Some(no) => {
                for id in st.group_of(no) {
                    st.handles.remove(&id);
                }
                st.eng.abort(no)?;
            }
        }
        Ok(())
    }

    /// Whole committed contents of a file.
    pub fn read_file(&self, path: &str) -> Result<Vec<u8>> {
        let mut st = self.state.lock();
        let comps = components(path)?;
        let n = resolve(&mut st.eng, &comps, path)?;
        if st.eng.committed_inode(n)?.kind != InodeType::File {
            return Err(FsError::IsDir(path.to_string()));
        }
        let view = committed_view(&mut st.eng, n)?;
        let mut buf = vec![0u8; view.size as usize];
        read_view(&st.eng, view, &mut buf, 0)?;
        Ok(buf)
    }

    /// True if any handle refers to inode `inum`.
    pub fn is_open(&self, inum: u32) -> bool {
        self.state.lock().open_on(inum)
    }

    /// Writes `data` as the whole new content of `path` in one transaction.
    pub fn write_file(&self, path: &str, data: &[u8]) -> Result<()> {
        let h = self.open(path, OpenMode::Create)?;
        let r = self.write(h, data, 0);
        if let Err(e) = r {
            let _ = self.abort(h);
            return Err(e);
        }
        self.close(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{mkfs, MkfsOptions};
    use crate::pmsim::OrderingModel;
    use crate::recovery::fsck;
    use crate::wal::EntryType;

    fn fresh() -> DurableFs {
        let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).unwrap();
        mkfs(&mut dev, &MkfsOptions { log_blocks: 32, ..Default::default() }).unwrap();
        DurableFs::mount(dev, FsConfig::default()).unwrap()
    }

    fn log_kinds(fs: &DurableFs) -> Vec<EntryType> {
        let st = fs.state.lock();
        st.eng.log().scan(st.eng.device()).map(|r| r.unwrap().1.kind).collect()
    }

    fn assert_clean(fs: DurableFs) {
        let dev = fs.into_device();
        let v = fsck(&dev);
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn first_block_write_logs_fig2_sequence() {
        use EntryType::*;
        let fs = fresh();
        fs.create("/f").unwrap();
        let before = log_kinds(&fs).len();
        let h = fs.open("/f", OpenMode::Write).unwrap();
        fs.write(h, &[7u8; 4096], 0).unwrap();
        let kinds = log_kinds(&fs)[before..].to_vec();
        assert_eq!(kinds, vec![Begin, SetFbbBit, UpdBlockAddr, UpdBlockAddr, UpdISize, UpdIBlocks]);
        fs.close(h).unwrap();
        let st = fs.stat("/f").unwrap();
        assert_eq!((st.size, st.blocks), (4096, 1));
        assert_clean(fs);
    }

    #[test]
    fn partial_overwrite_copies_old_block() {
        let fs = fresh();
        let data: Vec<u8> = (0..4096).map(|i| (i % 251) as u8).collect();
        fs.write_file("/f", &data).unwrap();
        let h = fs.open("/f", OpenMode::Write).unwrap();
        fs.write(h, &[0xEE; 100], 1000).unwrap();
        fs.close(h).unwrap();
        let mut expect = data.clone();
        expect[1000..1100].fill(0xEE);
        assert_eq!(fs.read_file("/f").unwrap(), expect);
        assert_clean(fs);
    }

    #[test]
    fn full_block_write_skips_copy() {
        let fs = fresh();
        fs.write_file("/f", &[1u8; 4096]).unwrap();
        let h = fs.open("/f", OpenMode::Write).unwrap();
        let before = fs.device_stats();
        fs.write(h, &[2u8; 4096], 0).unwrap();
        let d = fs.device_stats().since(&before);
        // one data store, one slot-free root change: no read-modify-write copy of 4 KiB beyond the new data
        assert_eq!(d.bytes_written - d.nt_stores * 8, 4096);
        fs.close(h).unwrap();
        assert_eq!(fs.read_file("/f").unwrap(), vec![2u8; 4096]);
    }

    #[test]
    fn reader_sees_committed_writer_sees_pending() {
        let fs = fresh();
        fs.write_file("/f", b"old").unwrap();
        let w = fs.open("/f", OpenMode::Write).unwrap();
        let r = fs.open("/f", OpenMode::Read).unwrap();
        fs.write(w, b"new!", 0).unwrap();
        let mut buf = [0u8; 8];
        assert_eq!(fs.read(r, &mut buf, 0).unwrap(), 3);
        assert_eq!(&buf[..3], b"old");
        assert_eq!(fs.read(w, &mut buf, 0).unwrap(), 4);
        assert_eq!(&buf[..4], b"new!");
        assert_eq!(fs.read(r, &mut buf, 100).unwrap(), 0);
        fs.close(w).unwrap();
        fs.close(r).unwrap();
        assert_eq!(fs.read_file("/f").unwrap(), b"new!");
    }

    #[test]
    fn second_writer_busy_and_double_close() {
        let fs = fresh();
        fs.create("/f").unwrap();
        let w = fs.open("/f", OpenMode::Write).unwrap();
        assert!(matches!(fs.open("/f", OpenMode::Write), Err(FsError::Busy(_))));
        fs.close(w).unwrap();
        assert!(matches!(fs.close(w), Err(FsError::BadHandle(_))));
        assert!(matches!(fs.open("/nope", OpenMode::Read), Err(FsError::NotFound(_))));
    }

    #[test]
    fn read_handle_close_has_no_log_traffic() {
        let fs = fresh();
        fs.write_file("/f", b"abc").unwrap();
        let r = fs.open("/f", OpenMode::Read).unwrap();
        let ops = fs.device_stats().ops();
        fs.close(r).unwrap();
        assert_eq!(fs.device_stats().ops(), ops);
        assert!(matches!(fs.write(r, b"x", 0), Err(FsError::BadHandle(_))));
    }

    #[test]
    fn write_to_read_handle_rejected() {
        let fs = fresh();
        fs.create("/f").unwrap();
        let r = fs.open("/f", OpenMode::Read).unwrap();
        assert!(matches!(fs.write(r, b"x", 0), Err(FsError::ReadOnly(_))));
    }

    #[test]
    fn namespace_operations() {
        let fs = fresh();
        fs.mkdir("/d").unwrap();
        fs.create("/d/a").unwrap();
        fs.create("/d/b").unwrap();
        assert!(matches!(fs.create("/d/a"), Err(FsError::Exists(_))));
        assert!(matches!(fs.rmdir("/d"), Err(FsError::NotEmpty(_))));
        assert!(matches!(fs.unlink("/d"), Err(FsError::IsDir(_))));
        assert!(matches!(fs.rmdir("/d/a"), Err(FsError::NotDir(_))));
        assert!(matches!(fs.create("/x/y"), Err(FsError::NotFound(_))));
        assert!(matches!(fs.create("/d/a/z"), Err(FsError::NotDir(_))));
        let names: Vec<String> = fs.readdir("/d").unwrap().into_iter().map(|e| e.name).collect();
        assert_eq!(names, vec!["a", "b"]);
        fs.unlink("/d/a").unwrap();
        fs.unlink("/d/b").unwrap();
        assert!(fs.readdir("/d").unwrap().is_empty());
        fs.rmdir("/d").unwrap();
        assert!(fs.readdir("/").unwrap().is_empty());
        assert!(matches!(fs.rmdir("/"), Err(FsError::Busy(0))));
        assert_clean(fs);
    }

    #[test]
    fn unlink_open_file_is_busy() {
        let fs = fresh();
        fs.create("/f").unwrap();
        let r = fs.open("/f", OpenMode::Read).unwrap();
        assert!(matches!(fs.unlink("/f"), Err(FsError::Busy(_))));
        fs.close(r).unwrap();
        fs.unlink("/f").unwrap();
    }

    #[test]
    fn large_file_grows_tree_and_unlink_frees_everything() {
        let fs = fresh();
        fs.mkdir("/keep").unwrap();
        let free_before = fs.state.lock().eng.ram().fbb.iter().map(|b| b.count_ones()).sum::<u32>();
        let data: Vec<u8> = (0..40_000u32).map(|i| (i * 7 % 256) as u8).collect();
        fs.write_file("/big", &data).unwrap();
        let st = fs.stat("/big").unwrap();
        assert_eq!(st.size, 40_000);
        assert_eq!(st.blocks, 10);
        assert_eq!(fs.read_file("/big").unwrap(), data);
        // sparse-style write past EOF fills the gap
        let h = fs.open("/big", OpenMode::Write).unwrap();
        fs.write(h, b"tail", 50_000).unwrap();
        fs.close(h).unwrap();
        let got = fs.read_file("/big").unwrap();
        assert_eq!(got.len(), 50_004);
        assert!(got[40_000..50_000].iter().all(|b| *b == 0));
        assert_eq!(&got[50_000..], b"tail");
        fs.unlink("/big").unwrap();
        let free_after = fs.state.lock().eng.ram().fbb.iter().map(|b| b.count_ones()).sum::<u32>();
        assert_eq!(free_before, free_after);
        assert_clean(fs);
    }

    #[test]
    fn many_entries_spill_to_second_dir_block() {
        let fs = fresh();
        for i in 0..200 {
            fs.create(&format!("/file-with-a-longish-name-{i:04}")).unwrap();
        }
        assert!(fs.stat("/").unwrap().size >= 2 * 4096);
        assert_eq!(fs.readdir("/").unwrap().len(), 200);
        for i in (0..200).step_by(2) {
            fs.unlink(&format!("/file-with-a-longish-name-{i:04}")).unwrap();
        }
        assert_eq!(fs.readdir("/").unwrap().len(), 100);
        assert_clean(fs);
    }

    #[test]
    fn open_many_commits_together() {
        let fs = fresh();
        fs.create("/a").unwrap();
        fs.create("/b").unwrap();
        let hs = fs.open_many(&["/a", "/b"]).unwrap();
        fs.write(hs[0], b"AAAA", 0).unwrap();
        fs.write(hs[1], b"BB", 0).unwrap();
        assert!(matches!(fs.close(hs[0]), Err(FsError::GroupClose)));
        assert!(matches!(fs.close_many(&hs[..1]), Err(FsError::GroupClose)));
        let before = log_kinds(&fs);
        fs.close_many(&hs).unwrap();
        let after = log_kinds(&fs);
        let new = &after[before.len()..];
        assert_eq!(new.iter().filter(|k| **k == EntryType::Commit).count(), 1);
        assert_eq!(new.iter().filter(|k| **k == EntryType::End).count(), 1);
        assert_eq!(fs.read_file("/a").unwrap(), b"AAAA");
        assert_eq!(fs.read_file("/b").unwrap(), b"BB");
    }

    #[test]
    fn abort_discards_and_frees() {
        let fs = fresh();
        fs.write_file("/f", b"keep").unwrap();
        let h = fs.open("/f", OpenMode::Write).unwrap();
        fs.write(h, &[9u8; 10000], 0).unwrap();
        fs.abort(h).unwrap();
        assert_eq!(fs.read_file("/f").unwrap(), b"keep");
        assert_clean(fs);
    }

    #[test]
    fn invalid_paths() {
        let fs = fresh();
        assert!(matches!(fs.create("relative"), Err(FsError::InvalidPath(_))));
        assert!(matches!(fs.create("/"), Err(FsError::InvalidPath(_))));
        assert!(matches!(fs.open("/", OpenMode::Read), Err(FsError::IsDir(_))));
    }

    #[test]
    fn cow_never_touches_committed_blocks() {
        let fs = fresh();
        let data = vec![5u8; 20000];
        fs.write_file("/f", &data).unwrap();
        let committed: Vec<u32> = {
            let mut st = fs.state.lock();
            let v = committed_view(&mut st.eng, 1).unwrap();
            let t = tree::walk(st.eng.device(), st.eng.map(), v.root, v.height).unwrap();
            t.leaves.iter().map(|(_, b)| *b).chain(t.interior.iter().copied()).collect()
        };
        let snapshot: Vec<Vec<u8>> = fs.with_device(|d| {
            committed.iter().map(|b| d.read(*b as u64 * 4096, 4096).unwrap()).collect()
        });
        let h = fs.open("/f", OpenMode::Write).unwrap();
        fs.write(h, &[1u8; 9000], 3000).unwrap();
        fs.write(h, &[2u8; 10], 19990).unwrap();
        fs.close(h).unwrap();
        fs.with_device(|d| {
            for (b, old) in committed.iter().zip(&snapshot) {
                assert_eq!(&d.read(*b as u64 * 4096, 4096).unwrap(), old, "block {b} mutated in place");
            }
        });
    }
}

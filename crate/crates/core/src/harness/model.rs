//! An in-memory reference implementation of the file system API, used as the
//! oracle for crash and equivalence testing.

use std::collections::BTreeMap;

use crate::error::FsError;
use crate::fs::dir::validate_name;
use crate::fs::OpenMode;
use crate::layout::InodeType;

/// Coarse error class shared by the model and the real file system.
pub fn error_kind(e: &FsError) -> &'static str {
    match e {
        FsError::NotFound(_) => "NotFound",
        FsError::Exists(_) => "Exists",
        FsError::NotEmpty(_) => "NotEmpty",
        FsError::NotDir(_) => "NotDir",
        FsError::IsDir(_) => "IsDir",
        FsError::InvalidPath(_) => "InvalidPath",
        FsError::Busy(_) => "Busy",
        FsError::BadHandle(_) => "BadHandle",
        FsError::ReadOnly(_) => "ReadOnly",
        FsError::GroupClose => "GroupClose",
        FsError::NoSpace => "NoSpace",
        FsError::NoInodes => "NoInodes",
        FsError::FileTooLarge => "FileTooLarge",
        FsError::LogFull => "LogFull",
        FsError::Aborted(_) => "Aborted",
        FsError::Device(_) => "Device",
        FsError::Format(_) => "Format",
        FsError::Corrupt(_) => "Corrupt",
        FsError::FieldOverflow { .. } => "FieldOverflow",
        FsError::Logic(_) => "Logic",
        FsError::ReadBackMismatch(_) => "ReadBackMismatch",
        FsError::InvalidArgument(_) => "InvalidArgument",
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Dir,
    File(Vec<u8>),
}

/// Committed namespace: absolute path to node. The root is implicit.
pub type Tree = BTreeMap<String, Node>;

type MResult<T> = Result<T, &'static str>;

#[derive(Clone, Debug)]
struct MHandle {
    path: String,
    // group id and pending contents for write handles
    writer: Option<(u64, Vec<u8>)>,
}

#[derive(Clone, Debug, Default)]
pub struct ReferenceModel {
    tree: Tree,
    handles: BTreeMap<u64, MHandle>,
    next_handle: u64,
    next_group: u64,
}

fn components(path: &str) -> MResult<Vec<&str>> {
    if !path.starts_with('/') {
        return Err("InvalidPath");
    }
    let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
    for c in &comps {
        validate_name(c).map_err(|_| "InvalidPath")?;
    }
    Ok(comps)
}

fn join(comps: &[&str]) -> String {
    let mut s = String::new();
    for c in comps {
        s.push('/');
        s.push_str(c);
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

impl ReferenceModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn committed(&self) -> &Tree {
        &self.tree
    }

    fn node(&self, path: &str) -> Option<&Node> {
        if path == "/" {
            Some(&Node::Dir)
        } else {
            self.tree.get(path)
        }
    }

    /// Walks like the real resolver: missing component is NotFound, a file
    /// in the middle of a path is NotDir.
    fn resolve(&self, comps: &[&str]) -> MResult<String> {
        for i in 1..=comps.len() {
            if self.node(&join(&comps[..i - 1])) != Some(&Node::Dir) {
                return Err("NotDir");
            }
            if self.node(&join(&comps[..i])).is_none() {
                return Err("NotFound");
            }
        }
        Ok(join(comps))
    }

    fn resolve_dir(&self, comps: &[&str]) -> MResult<String> {
        let p = self.resolve(comps)?;
        match self.node(&p) {
            Some(Node::Dir) => Ok(p),
            _ => Err("NotDir"),
        }
    }

    fn is_open(&self, path: &str) -> bool {
        self.handles.values().any(|h| h.path == path)
    }

    fn create_node(&mut self, path: &str, node: Node) -> MResult<()> {
        let comps = components(path)?;
        let Some((_, parent)) = comps.split_last() else { return Err("InvalidPath") };
        self.resolve_dir(parent)?;
        let full = join(&comps);
        if self.tree.contains_key(&full) {
            return Err("Exists");
        }
        self.tree.insert(full, node);
        Ok(())
    }

    pub fn create(&mut self, path: &str) -> MResult<()> {
        self.create_node(path, Node::File(Vec::new()))
    }

    pub fn mkdir(&mut self, path: &str) -> MResult<()> {
        self.create_node(path, Node::Dir)
    }

    fn remove(&mut self, path: &str, dir: bool) -> MResult<()> {
        let comps = components(path)?;
        if dir && comps.is_empty() {
            return Err("Busy");
        }
        let Some((_, parent)) = comps.split_last() else { return Err("InvalidPath") };
        self.resolve_dir(parent)?;
        let full = join(&comps);
        match (self.tree.get(&full), dir) {
            (None, _) => return Err("NotFound"),
            (Some(Node::Dir), false) => return Err("IsDir"),
            (Some(Node::File(_)), true) => return Err("NotDir"),
            _ => {}
        }
        if self.is_open(&full) {
            return Err("Busy");
        }
        if dir {
            let prefix = format!("{full}/");
            if self.tree.keys().any(|k| k.starts_with(&prefix)) {
                return Err("NotEmpty");
            }
        }
        self.tree.remove(&full);
        Ok(())
    }

    pub fn unlink(&mut self, path: &str) -> MResult<()> {
        self.remove(path, false)
    }

    pub fn rmdir(&mut self, path: &str) -> MResult<()> {
        self.remove(path, true)
    }

    fn file(&self, path: &str) -> MResult<&Vec<u8>> {
        match self.node(path) {
            Some(Node::File(d)) => Ok(d),
            Some(Node::Dir) => Err("IsDir"),
            None => Err("NotFound"),
        }
    }

    fn has_writer(&self, path: &str) -> bool {
        self.handles.values().any(|h| h.path == path && h.writer.is_some())
    }

    fn add(&mut self, path: String, writer: Option<(u64, Vec<u8>)>) -> u64 {
        let id = self.next_handle;
        self.next_handle += 1;
        self.handles.insert(id, MHandle { path, writer });
        id
    }

    pub fn open(&mut self, path: &str, mode: OpenMode) -> MResult<u64> {
        let comps = components(path)?;
        let full = match self.resolve(&comps) {
            Ok(p) => p,
            Err("NotFound") if mode == OpenMode::Create => {
                self.create(path)?;
                join(&comps)
            }
            Err(e) => return Err(e),
        };
        let data = self.file(&full)?.clone();
        if mode == OpenMode::Read {
            return Ok(self.add(full, None));
        }
        if self.has_writer(&full) {
            return Err("Busy");
        }
        let g = self.next_group;
        self.next_group += 1;
        Ok(self.add(full, Some((g, data))))
    }

    pub fn open_many(&mut self, paths: &[&str]) -> MResult<Vec<u64>> {
        let mut fulls: Vec<String> = Vec::new();
        for p in paths {
            let full = self.resolve(&components(p)?)?;
            self.file(&full)?;
            if fulls.contains(&full) || self.has_writer(&full) {
                return Err("Busy");
            }
            fulls.push(full);
        }
        let g = self.next_group;
        self.next_group += 1;
        Ok(fulls
            .into_iter()
            .map(|f| {
                let data = self.file(&f).expect("checked above").clone();
                self.add(f, Some((g, data)))
            })
            .collect())
    }

    pub fn write(&mut self, h: u64, buf: &[u8], offset: u64) -> MResult<usize> {
        let handle = self.handles.get_mut(&h).ok_or("BadHandle")?;
        let (_, data) = handle.writer.as_mut().ok_or("ReadOnly")?;
        if buf.is_empty() {
            return Ok(0);
        }
        let end = offset as usize + buf.len();
        if data.len() < end {
            data.resize(end, 0);
        }
        data[offset as usize..end].copy_from_slice(buf);
        Ok(buf.len())
    }

    pub fn read(&self, h: u64, len: usize, offset: u64) -> MResult<Vec<u8>> {
        let handle = self.handles.get(&h).ok_or("BadHandle")?;
        let data = match &handle.writer {
            Some((_, d)) => d,
            None => self.file(&handle.path)?,
        };
        let start = (offset as usize).min(data.len());
        let end = (start + len).min(data.len());
        Ok(data[start..end].to_vec())
    }

    fn group(&self, g: u64) -> Vec<u64> {
        self.handles.iter().filter(|(_, h)| h.writer.as_ref().is_some_and(|w| w.0 == g)).map(|(id, _)| *id).collect()
    }

    fn commit(&mut self, ids: &[u64]) {
        for id in ids {
            let h = self.handles.remove(id).expect("group member");
            let (_, data) = h.writer.expect("write handle");
            self.tree.insert(h.path, Node::File(data));
        }
    }

    pub fn close(&mut self, h: u64) -> MResult<()> {
        let handle = self.handles.get(&h).ok_or("BadHandle")?;
        match &handle.writer {
            None => {
                self.handles.remove(&h);
                Ok(())
            }
            Some((g, _)) => {
                if self.group(*g).len() > 1 {
                    return Err("GroupClose");
                }
                self.commit(&[h]);
                Ok(())
            }
        }
    }

    pub fn close_many(&mut self, hs: &[u64]) -> MResult<()> {
        let mut group = None;
        for h in hs {
            let handle = self.handles.get(h).ok_or("BadHandle")?;
            let g = handle.writer.as_ref().ok_or("ReadOnly")?.0;
            if group.is_some_and(|x| x != g) {
                return Err("GroupClose");
            }
            group = Some(g);
        }
        let Some(g) = group else { return Ok(()) };
        let members = self.group(g);
        let mut given = hs.to_vec();
        given.sort_unstable();
        given.dedup();
        if members != given {
            return Err("GroupClose");
        }
        self.commit(&given);
        Ok(())
    }

    pub fn abort(&mut self, h: u64) -> MResult<()> {
        let handle = self.handles.get(&h).ok_or("BadHandle")?;
        match &handle.writer {
            None => {
                self.handles.remove(&h);
            }
            Some((g, _)) => {
                for id in self.group(*g) {
                    self.handles.remove(&id);
                }
            }
        }
        Ok(())
    }

    /// Sorted (name, kind) pairs of a directory.
    pub fn readdir(&self, path: &str) -> MResult<Vec<(String, InodeType)>> {
        let full = self.resolve_dir(&components(path)?)?;
        let prefix = if full == "/" { "/".to_string() } else { format!("{full}/") };
        Ok(self
            .tree
            .iter()
            .filter_map(|(k, n)| {
                let rest = k.strip_prefix(&prefix)?;
                (!rest.contains('/')).then(|| {
                    let kind = if *n == Node::Dir { InodeType::Directory } else { InodeType::File };
                    (rest.to_string(), kind)
                })
            })
            .collect())
    }

    /// (kind, size) of a path.
    pub fn stat(&self, path: &str) -> MResult<(InodeType, u64)> {
        let full = self.resolve(&components(path)?)?;
        Ok(match self.node(&full) {
            Some(Node::File(d)) => (InodeType::File, d.len() as u64),
            _ => (InodeType::Directory, 0),
        })
    }

    pub fn open_handles(&self) -> usize {
        self.handles.len()
    }
}

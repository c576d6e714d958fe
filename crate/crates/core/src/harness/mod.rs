//! Crash-consistency and equivalence testing against a reference model.

pub mod equivalence;
pub mod matrix;
pub mod model;
pub mod script;

use std::collections::HashMap;

use crate::error::{FsError, Result};
use crate::fs::{DurableFs, FileHandle};
use crate::layout::InodeType;

pub use equivalence::{run_equivalence, EquivalenceReport};
pub use matrix::{
    record, run_crash_matrix, run_recovery_idempotence, IdempotenceReport, MatrixConfig, MatrixReport, Points,
    Recording,
};
pub use model::{error_kind, Node, ReferenceModel, Tree};
pub use script::{pattern, Script, ScriptError, Step};

/// Reads the whole committed namespace of a mounted file system.
pub fn snapshot(fs: &DurableFs) -> Result<Tree> {
    let mut tree = Tree::new();
    let mut stack = vec!["/".to_string()];
    while let Some(dir) = stack.pop() {
        for e in fs.readdir(&dir)? {
            let path = if dir == "/" { format!("/{}", e.name) } else { format!("{dir}/{}", e.name) };
            match e.kind {
                InodeType::Directory => {
                    tree.insert(path.clone(), Node::Dir);
                    stack.push(path);
                }
                _ => {
                    let data = fs.read_file(&path)?;
                    tree.insert(path, Node::File(data));
                }
            }
        }
    }
    Ok(tree)
}

fn outcome<T>(r: &std::result::Result<T, &'static str>) -> &'static str {
    match r {
        Ok(_) => "ok",
        Err(e) => e,
    }
}

fn fs_outcome<T>(r: &Result<T>) -> &'static str {
    match r {
        Ok(_) => "ok",
        Err(e) => error_kind(e),
    }
}

/// Runs script steps against a file system and the reference model side by
/// side, resolving script handle names for both.
pub struct Driver<'a> {
    pub fs: &'a DurableFs,
    pub model: ReferenceModel,
    handles: HashMap<String, (FileHandle, u64)>,
}

impl<'a> Driver<'a> {
    pub fn new(fs: &'a DurableFs) -> Self {
        Driver { fs, model: ReferenceModel::new(), handles: HashMap::new() }
    }

    fn handle(&self, name: &str) -> (FileHandle, u64) {
        // unknown names map to handles neither side has issued
        self.handles.get(name).copied().unwrap_or((FileHandle(u64::MAX), u64::MAX))
    }

    /// Executes one step. Returns the outcome class ("ok" or an error kind),
    /// or an error describing how the file system and the model disagree.
    pub fn step(&mut self, step: &Step) -> std::result::Result<&'static str, String> {
        let (fs_r, model_r): (&'static str, &'static str) = match step {
            Step::Mkdir(p) => (fs_outcome(&self.fs.mkdir(p)), outcome(&self.model.mkdir(p))),
            Step::Rmdir(p) => (fs_outcome(&self.fs.rmdir(p)), outcome(&self.model.rmdir(p))),
            Step::Create(p) => (fs_outcome(&self.fs.create(p)), outcome(&self.model.create(p))),
            Step::Unlink(p) => (fs_outcome(&self.fs.unlink(p)), outcome(&self.model.unlink(p))),
            Step::Open { mode, path, name } => {
                let a = self.fs.open(path, *mode);
                let b = self.model.open(path, *mode);
                let r = (fs_outcome(&a), outcome(&b));
                if let (Ok(h), Ok(m)) = (a, b) {
                    self.handles.insert(name.clone(), (h, m));
                }
                r
            }
            Step::OpenMany { paths, names } => {
                let ps: Vec<&str> = paths.iter().map(String::as_str).collect();
                let a = self.fs.open_many(&ps);
                let b = self.model.open_many(&ps);
                let r = (fs_outcome(&a), outcome(&b));
                if let (Ok(hs), Ok(ms)) = (a, b) {
                    for ((n, h), m) in names.iter().zip(hs).zip(ms) {
                        self.handles.insert(n.clone(), (h, m));
                    }
                }
                r
            }
            Step::Write { handle, offset, len, seed } => {
                let (h, m) = self.handle(handle);
                let data = pattern(*seed, *offset, *len);
                (fs_outcome(&self.fs.write(h, &data, *offset)), outcome(&self.model.write(m, &data, *offset)))
            }
            Step::Read { handle, offset, len } => {
                let (h, m) = self.handle(handle);
                let mut buf = vec![0u8; *len];
                let a = self.fs.read(h, &mut buf, *offset);
                let b = self.model.read(m, *len, *offset);
                if let (Ok(n), Ok(expect)) = (&a, &b) {
                    if buf[..*n] != expect[..] {
                        return Err(format!("{step}: read returned different bytes"));
                    }
                }
                (fs_outcome(&a), outcome(&b))
            }
            Step::Close(name) => {
                let (h, m) = self.handle(name);
                (fs_outcome(&self.fs.close(h)), outcome(&self.model.close(m)))
            }
            Step::CloseMany(names) => {
                let (hs, ms): (Vec<FileHandle>, Vec<u64>) = names.iter().map(|n| self.handle(n)).unzip();
                (fs_outcome(&self.fs.close_many(&hs)), outcome(&self.model.close_many(&ms)))
            }
            Step::Abort(name) => {
                let (h, m) = self.handle(name);
                (fs_outcome(&self.fs.abort(h)), outcome(&self.model.abort(m)))
            }
        };
        if fs_r != model_r {
            return Err(format!("{step}: file system gave {fs_r}, model gave {model_r}"));
        }
        Ok(fs_r)
    }
}

/// Mounts a device and compares its namespace with `expect`.
pub fn check_tree(fs: &DurableFs, expect: &Tree) -> std::result::Result<(), String> {
    let got = snapshot(fs).map_err(|e| format!("snapshot failed: {e}"))?;
    if &got == expect {
        Ok(())
    } else {
        Err(describe_diff(&got, expect))
    }
}

pub(crate) fn describe_diff(got: &Tree, expect: &Tree) -> String {
    for (k, v) in expect {
        match got.get(k) {
            None => return format!("{k} missing"),
            Some(g) if g != v => {
                return match (g, v) {
                    (Node::File(a), Node::File(b)) => format!("{k}: {} bytes, expected {}", a.len(), b.len()),
                    _ => format!("{k}: wrong kind"),
                }
            }
            _ => {}
        }
    }
    match got.keys().find(|k| !expect.contains_key(*k)) {
        Some(k) => format!("{k} unexpected"),
        None => "trees differ".into(),
    }
}

impl From<ScriptError> for FsError {
    fn from(e: ScriptError) -> Self {
        FsError::Format(e.to_string())
    }
}

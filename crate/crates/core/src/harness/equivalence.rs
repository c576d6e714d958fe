//! Random operation traces run against the file system and the reference
//! model, comparing every result.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{error_kind, pattern, snapshot, describe_diff, ReferenceModel};
use crate::fs::{DurableFs, FileHandle, OpenMode};
use crate::layout::{mkfs, InodeType, MkfsOptions};
use crate::pmsim::{OrderingModel, PmDevice};
use crate::recovery::fsck;
use crate::txn::FsConfig;

#[derive(Clone, Debug, Default)]
pub struct EquivalenceReport {
    pub ops: usize,
    pub errors_matched: usize,
    pub commits: usize,
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ops={} matched_errors={} commits={}", self.ops, self.errors_matched, self.commits)
    }
}

const DIRS: &[&str] = &["/d0", "/d1", "/d0/e"];
const NAMES: &[&str] = &["a", "b", "c"];

fn random_path(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..10) {
        0 => "/".into(),
        1 => DIRS.choose(rng).unwrap().to_string(),
        2 => "/d0/a/x".into(),
        3 => "no-slash".into(),
        _ => {
            let parent = ["", "/d0", "/d1", "/d0/e", "/zz"][rng.gen_range(0..5)];
            format!("{parent}/{}", NAMES.choose(rng).unwrap())
        }
    }
}

/// Runs `ops` random operations from `seed`. Returns a description of the
/// first divergence on failure.
pub fn run_equivalence(seed: u64, ops: usize) -> Result<EquivalenceReport, String> {
    let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).map_err(|e| e.to_string())?;
    mkfs(&mut dev, &MkfsOptions { log_blocks: 64, ..Default::default() }).map_err(|e| e.to_string())?;
    let fs = DurableFs::mount(dev, FsConfig::default()).map_err(|e| e.to_string())?;
    let mut model = ReferenceModel::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (fs handle, model handle); stale entries stay to exercise BadHandle
    let mut handles: Vec<(FileHandle, u64)> = Vec::new();
    let mut report = EquivalenceReport::default();

    macro_rules! same {
        ($i:expr, $what:expr, $a:expr, $b:expr) => {{
            let a = $a;
            let b = $b;
            let ka = a.as_ref().map(|_| "ok").unwrap_or_else(|e| error_kind(e));
            let kb = b.as_ref().map(|_| "ok").unwrap_or_else(|e| *e);
            if ka != kb {
                return Err(format!("seed {seed} op {}: {}: file system {ka}, model {kb}", $i, $what));
            }
            if ka != "ok" {
                report.errors_matched += 1;
            }
            (a.ok(), b.ok())
        }};
    }

    let pick = |rng: &mut ChaCha8Rng, handles: &Vec<(FileHandle, u64)>| -> (FileHandle, u64) {
        if handles.is_empty() || rng.gen_ratio(1, 20) {
            (FileHandle(u64::MAX), u64::MAX)
        } else {
            *handles.choose(rng).unwrap()
        }
    };

    for i in 0..ops {
        report.ops += 1;
        match rng.gen_range(0..100) {
            0..=5 => {
                let p = random_path(&mut rng);
                same!(i, format!("mkdir {p}"), fs.mkdir(&p), model.mkdir(&p));
            }
            6..=11 => {
                let p = random_path(&mut rng);
                same!(i, format!("create {p}"), fs.create(&p), model.create(&p));
            }
            12..=15 => {
                let p = random_path(&mut rng);
                same!(i, format!("unlink {p}"), fs.unlink(&p), model.unlink(&p));
            }
            16..=18 => {
                let p = random_path(&mut rng);
                same!(i, format!("rmdir {p}"), fs.rmdir(&p), model.rmdir(&p));
            }
            19..=30 => {
                let p = random_path(&mut rng);
                let mode = [OpenMode::Read, OpenMode::Write, OpenMode::Create][rng.gen_range(0..3)];
                if let (Some(h), Some(m)) = same!(i, format!("open {p} {mode:?}"), fs.open(&p, mode), model.open(&p, mode)) {
                    handles.push((h, m));
                }
            }
            31..=33 => {
                let n = rng.gen_range(1..=3);
                let ps: Vec<String> = (0..n).map(|_| random_path(&mut rng)).collect();
                let refs: Vec<&str> = ps.iter().map(String::as_str).collect();
                if let (Some(hs), Some(ms)) =
                    same!(i, format!("open_many {ps:?}"), fs.open_many(&refs), model.open_many(&refs))
                {
                    handles.extend(hs.into_iter().zip(ms));
                }
            }
            34..=58 => {
                let (h, m) = pick(&mut rng, &handles);
                let off = rng.gen_range(0..12_000u64);
                let len = if rng.gen_ratio(1, 30) { 0 } else { rng.gen_range(1..5000usize) };
                let data = pattern(rng.gen(), off, len);
                same!(i, format!("write {off}+{len}"), fs.write(h, &data, off), model.write(m, &data, off));
            }
            59..=70 => {
                let (h, m) = pick(&mut rng, &handles);
                let off = rng.gen_range(0..14_000u64);
                let len = rng.gen_range(0..6000usize);
                let mut buf = vec![0u8; len];
                let (a, b) = same!(i, format!("read {off}+{len}"), fs.read(h, &mut buf, off), model.read(m, len, off));
                if let (Some(n), Some(expect)) = (a, b) {
                    if buf[..n] != expect[..] {
                        return Err(format!("seed {seed} op {i}: read {off}+{len} returned different bytes"));
                    }
                }
            }
            71..=82 => {
                let (h, m) = pick(&mut rng, &handles);
                if let (Some(()), _) = same!(i, "close", fs.close(h), model.close(m)) {
                    report.commits += 1;
                }
            }
            83..=86 => {
                let n = rng.gen_range(1..=3);
                let (hs, ms): (Vec<FileHandle>, Vec<u64>) = (0..n).map(|_| pick(&mut rng, &handles)).unzip();
                same!(i, "close_many", fs.close_many(&hs), model.close_many(&ms));
            }
            87..=89 => {
                let (h, m) = pick(&mut rng, &handles);
                same!(i, "abort", fs.abort(h), model.abort(m));
            }
            90..=94 => {
                let p = random_path(&mut rng);
                let (a, b) = same!(i, format!("readdir {p}"), fs.readdir(&p), model.readdir(&p));
                if let (Some(a), Some(b)) = (a, b) {
                    let mut got: Vec<(String, InodeType)> = a.into_iter().map(|e| (e.name, e.kind)).collect();
                    got.sort_by(|x, y| x.0.cmp(&y.0));
                    if got != b {
                        return Err(format!("seed {seed} op {i}: readdir {p}: {got:?} vs {b:?}"));
                    }
                }
            }
            _ => {
                let p = random_path(&mut rng);
                let (a, b) = same!(i, format!("stat {p}"), fs.stat(&p), model.stat(&p));
                if let (Some(st), Some((kind, size))) = (a, b) {
                    if st.kind != kind || (kind == InodeType::File && st.size != size) {
                        return Err(format!("seed {seed} op {i}: stat {p}: {st:?} vs {kind:?}/{size}"));
                    }
                }
            }
        }
        if handles.len() > 64 {
            handles.drain(..32);
        }
        if fs.open_handles() != model.open_handles() {
            return Err(format!("seed {seed} op {i}: {} open handles vs {}", fs.open_handles(), model.open_handles()));
        }
    }

    let got = snapshot(&fs).map_err(|e| e.to_string())?;
    if &got != model.committed() {
        return Err(format!("seed {seed}: final namespace differs: {}", describe_diff(&got, model.committed())));
    }
    // remount from the durable image alone: committed state must survive
    let image = fs.into_device().durable_image().to_vec();
    let dev = PmDevice::from_durable_image(image, OrderingModel::PaperOrdered).map_err(|e| e.to_string())?;
    let fs = DurableFs::mount(dev, FsConfig::default()).map_err(|e| e.to_string())?;
    let after = snapshot(&fs).map_err(|e| e.to_string())?;
    if &after != model.committed() {
        return Err(format!("seed {seed}: namespace after remount differs: {}", describe_diff(&after, model.committed())));
    }
    let v = fsck(&fs.into_device());
    if !v.is_empty() {
        return Err(format!("seed {seed}: fsck after remount: {}", v[0]));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_traces_agree() {
        for seed in 0..3 {
            run_equivalence(seed, 1500).unwrap();
        }
    }
}

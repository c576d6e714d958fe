//! Crash-point enumeration.
//!
//! A script is run once on a recording device. The recorded operation trace
//! is then replayed one operation at a time; at every selected boundary the
//! device is crashed, recovered and checked against the model.

use std::collections::HashSet;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_tree, Driver, Script, Step, Tree};
use crate::error::{FsError, Result};
use crate::fs::DurableFs;
use crate::layout::{mkfs, read_region_map, MkfsOptions, RegionMap, LOG_HEADER_SIZE};
use crate::pmsim::{CrashPolicy, DeviceOp, OrderingModel, PmDevice};
use crate::recovery::{fsck, recover};
use crate::txn::FsConfig;
use crate::wal::{torn_entries, RedoLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Points {
    /// Every operation boundary.
    All,
    /// This many boundaries, evenly spread.
    Sample(usize),
}

#[derive(Clone, Debug)]
pub struct MatrixConfig {
    pub capacity: u64,
    pub mkfs: MkfsOptions,
    pub model: OrderingModel,
    pub fs: FsConfig,
    pub seed: u64,
    pub points: Points,
    /// Seeded crash images per point, on top of persist-none and persist-all.
    pub seeded_images: usize,
    /// Enumerate every admissible image when there are at most this many.
    pub enumerate_limit: usize,
    /// Recover, fsck and compare each image. Off for torn-entry probing only.
    pub verify: bool,
    /// Keep one report line per point.
    pub keep_lines: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            capacity: 1536 * 1024,
            mkfs: MkfsOptions { log_blocks: 16, ..Default::default() },
            model: OrderingModel::PaperOrdered,
            fs: FsConfig::default(),
            seed: 0,
            points: Points::All,
            seeded_images: 2,
            enumerate_limit: 16,
            verify: true,
            keep_lines: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepSpan {
    pub step: Step,
    pub begin: usize,
    pub end: usize,
    pub outcome: &'static str,
}

/// One recorded script run.
#[derive(Clone, Debug)]
pub struct Recording {
    pub base: PmDevice,
    pub map: RegionMap,
    pub trace: Vec<DeviceOp>,
    pub steps: Vec<StepSpan>,
    /// `states[i]` is the committed namespace after the first `i` steps.
    pub states: Vec<Tree>,
}

impl Recording {
    /// Committed states a crash after `k` operations may legally recover to.
    pub fn allowed(&self, k: usize) -> (usize, Vec<&Tree>) {
        let done = self.steps.iter().take_while(|s| s.end <= k).count();
        let mut out = vec![&self.states[done]];
        if let Some(s) = self.steps.get(done) {
            if s.begin < k && &self.states[done + 1] != out[0] {
                out.push(&self.states[done + 1]);
            }
        }
        (done, out)
    }
}

pub fn record(script: &Script, cfg: &MatrixConfig) -> Result<Recording> {
    let mut dev = PmDevice::new(cfg.capacity, cfg.model)?;
    let map = mkfs(&mut dev, &cfg.mkfs)?;
    let base = dev.clone();
    dev.start_recording();
    let fs = DurableFs::mount(dev, cfg.fs)?;
    let mut driver = Driver::new(&fs);
    let mut steps = Vec::with_capacity(script.steps.len());
    let mut states = vec![driver.model.committed().clone()];
    for step in &script.steps {
        let begin = fs.with_device(PmDevice::trace_len);
        let outcome = driver.step(step).map_err(FsError::Logic)?;
        let end = fs.with_device(PmDevice::trace_len);
        steps.push(StepSpan { step: step.clone(), begin, end, outcome });
        states.push(driver.model.committed().clone());
    }
    drop(driver);
    let trace = fs.into_device().take_trace();
    Ok(Recording { base, map, trace, steps, states })
}

#[derive(Clone, Debug, Default)]
pub struct MatrixReport {
    pub points: usize,
    pub images: usize,
    pub distinct_images: usize,
    pub failures: Vec<String>,
    pub torn_entries: usize,
    pub images_with_torn: usize,
    pub header_errors: usize,
    pub lines: Vec<String>,
}

impl MatrixReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for MatrixReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "points={} images={} distinct={} failures={} torn_entries={} torn_images={} header_errors={}",
            self.points,
            self.images,
            self.distinct_images,
            self.failures.len(),
            self.torn_entries,
            self.images_with_torn,
            self.header_errors
        )
    }
}

fn selected(points: Points, total: usize) -> Vec<usize> {
    match points {
        Points::All => (0..=total).collect(),
        Points::Sample(0) => Vec::new(),
        Points::Sample(n) if n > total => (0..=total).collect(),
        Points::Sample(n) => {
            let mut v: Vec<usize> = (0..n).map(|i| i * total / (n - 1).max(1)).collect();
            v.dedup();
            v
        }
    }
}

fn images_at(dev: &PmDevice, k: usize, cfg: &MatrixConfig) -> Vec<PmDevice> {
    if let Ok(all) = dev.crash_images(cfg.enumerate_limit) {
        return all;
    }
    let mut out = vec![dev.crash_with(CrashPolicy::PersistNone), dev.crash_with(CrashPolicy::PersistAll)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
    for _ in 0..cfg.seeded_images {
        out.push(dev.crash(rng.gen()));
    }
    out
}

fn image_hash(dev: &PmDevice) -> u64 {
    let mut h = DefaultHasher::new();
    dev.durable_image().hash(&mut h);
    h.finish()
}

/// Recovers a crash image and checks it. `allowed` lists acceptable namespaces.
pub fn verify_image(mut img: PmDevice, allowed: &[&Tree], fs_cfg: FsConfig) -> std::result::Result<(), String> {
    recover(&mut img).map_err(|e| format!("recovery failed: {e}"))?;
    let v = fsck(&img);
    if !v.is_empty() {
        let list: Vec<String> = v.iter().take(3).map(ToString::to_string).collect();
        return Err(format!("fsck: {}", list.join("; ")));
    }
    let fs = DurableFs::mount(img, fs_cfg).map_err(|e| format!("mount failed: {e}"))?;
    let mut last = String::new();
    for t in allowed {
        match check_tree(&fs, t) {
            Ok(()) => return Ok(()),
            Err(e) => last = e,
        }
    }
    Err(format!("state matches no allowed version: {last}"))
}

pub fn run_crash_matrix(rec: &Recording, cfg: &MatrixConfig) -> Result<MatrixReport> {
    let mut report = MatrixReport::default();
    let total = rec.trace.len();
    let points = selected(cfg.points, total);
    let mut seen = HashSet::new();
    let mut dev = rec.base.clone();
    let mut applied = 0usize;
    for &k in &points {
        while applied < k {
            dev.apply(&rec.trace[applied])?;
            applied += 1;
        }
        let (done, allowed) = rec.allowed(k);
        let mut fails = 0usize;
        let mut torn_here = 0usize;
        let images = images_at(&dev, k, cfg);
        report.points += 1;
        for img in images {
            report.images += 1;
            match torn_entries(&img, &dev, &rec.map) {
                Ok(t) if !t.is_empty() => {
                    report.torn_entries += t.len();
                    report.images_with_torn += 1;
                    torn_here += t.len();
                }
                Ok(_) => {}
                Err(_) => report.header_errors += 1,
            }
            if !cfg.verify || !seen.insert((image_hash(&img), done, allowed.len())) {
                continue;
            }
            report.distinct_images += 1;
            if let Err(e) = verify_image(img, &allowed, cfg.fs) {
                fails += 1;
                let step = rec.steps.get(done).map_or("end".to_string(), |s| s.step.to_string());
                report.failures.push(format!("point {k} (during `{step}`): {e}"));
            }
        }
        if cfg.keep_lines {
            let step = rec.steps.get(done).map_or("after last step".to_string(), |s| format!("in `{}`", s.step));
            let verdict = if fails == 0 { "ok" } else { "FAIL" };
            report.lines.push(format!("point {k}/{total} {step}: {verdict} torn={torn_here}"));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct IdempotenceReport {
    pub crash_points: usize,
    pub nested_crashes: usize,
    pub failures: Vec<String>,
}

impl fmt::Display for IdempotenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "crash_points={} nested_crashes={} failures={}",
            self.crash_points,
            self.nested_crashes,
            self.failures.len()
        )
    }
}

fn recovered_metadata(dev: &PmDevice, map: &RegionMap) -> Vec<u8> {
    let span = map.metadata_span();
    let mut out = dev.durable_image()[span.start as usize..span.end as usize].to_vec();
    let log = map.log_off as usize;
    out.extend_from_slice(&dev.durable_image()[log..log + LOG_HEADER_SIZE as usize]);
    out
}

/// Crashes recovery itself at each of its operations and checks that
/// recovering again yields the same metadata as an uninterrupted recovery.
pub fn run_recovery_idempotence(
    rec: &Recording,
    cfg: &MatrixConfig,
    points: usize,
    per_recovery: usize,
) -> Result<IdempotenceReport> {
    let mut report = IdempotenceReport::default();
    let total = rec.trace.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1de4);
    let mut wanted: Vec<usize> = (0..points).map(|_| rng.gen_range(0..=total)).collect();
    wanted.sort_unstable();
    let mut dev = rec.base.clone();
    let mut applied = 0usize;
    for k in wanted {
        while applied < k {
            dev.apply(&rec.trace[applied])?;
            applied += 1;
        }
        let img = dev.crash(rng.gen());
        report.crash_points += 1;

        let mut reference = img.clone();
        reference.start_recording();
        if let Err(e) = recover(&mut reference) {
            report.failures.push(format!("point {k}: recovery failed: {e}"));
            continue;
        }
        let rtrace = reference.take_trace();
        let expect = recovered_metadata(&reference, &rec.map);
        let again = {
            let mut d = reference.clone();
            d.start_recording();
            recover(&mut d)?;
            d.take_trace().len()
        };
        if again != 0 {
            report.failures.push(format!("point {k}: second recovery wrote {again} operations"));
        }

        let n = rtrace.len();
        let cuts: Vec<usize> = if n <= per_recovery {
            (0..n).collect()
        } else {
            let mut v: Vec<usize> = (0..per_recovery).map(|i| i * (n - 1) / (per_recovery - 1).max(1)).collect();
            v.dedup();
            v
        };
        for j in cuts {
            let mut partial = img.clone();
            for op in &rtrace[..j] {
                partial.apply(op)?;
            }
            let mut crashed = partial.crash(rng.gen());
            report.nested_crashes += 1;
            if let Err(e) = recover(&mut crashed) {
                report.failures.push(format!("point {k} cut {j}: second recovery failed: {e}"));
                continue;
            }
            if recovered_metadata(&crashed, &rec.map) != expect {
                report.failures.push(format!("point {k} cut {j}: metadata differs from uninterrupted recovery"));
            }
            match read_region_map(&crashed).and_then(|m| RedoLog::open(&crashed, &m, 100)) {
                Ok(log) if log.is_empty() => {}
                Ok(log) => report.failures.push(format!("point {k} cut {j}: {} log entries remain", log.len())),
                Err(e) => report.failures.push(format!("point {k} cut {j}: {e}")),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowed_states_follow_step_spans() {
        let script = Script::parse("create /a\nopen w /a\nwrite h0 0 10 seed1\nclose h0\n").unwrap();
        let rec = record(&script, &MatrixConfig::default()).unwrap();
        assert_eq!(rec.states.len(), 5);
        let close = &rec.steps[3];
        let (_, mid) = rec.allowed(close.begin + 1);
        assert_eq!(mid.len(), 2);
        let (_, after) = rec.allowed(close.end);
        assert_eq!(after, vec![&rec.states[4]]);
        let (_, start) = rec.allowed(0);
        assert_eq!(start, vec![&rec.states[0]]);
    }

    #[test]
    fn sampled_points_cover_both_ends() {
        assert_eq!(selected(Points::Sample(3), 10), vec![0, 5, 10]);
        assert_eq!(selected(Points::All, 2), vec![0, 1, 2]);
    }
}

//! Synthetic benchmark workloads modelled on fio and filebench profiles.
//!
//! Threads become interleaved logical streams run round-robin. Each stream
//! owns a disjoint set of files and commits (close, reopen) every
//! [`OPS_PER_TXN`] operations.

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FsError, Result};
use crate::fs::{DurableFs, FileHandle, OpenMode};
use crate::harness::pattern;
use crate::layout::{mkfs, MkfsOptions, BLOCK_SIZE};
use crate::pmsim::{DeviceStats, OrderingModel, PmDevice};
use crate::txn::{FlushStats, FsConfig};

pub const OPS_PER_TXN: usize = 16;
/// Blocks written per transaction while populating files.
const POPULATE_CHUNK: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Workload {
    Fio,
    Fileserver,
    Webserver,
}

impl Workload {
    pub const ALL: [Workload; 3] = [Workload::Fio, Workload::Fileserver, Workload::Webserver];

    pub fn name(self) -> &'static str {
        match self {
            Workload::Fio => "fio",
            Workload::Fileserver => "fileserver",
            Workload::Webserver => "webserver",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fio" => Ok(Workload::Fio),
            "fileserver" => Ok(Workload::Fileserver),
            "webserver" => Ok(Workload::Webserver),
            _ => Err(format!("unknown workload {s:?} (expected fio, fileserver or webserver)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub workload: Workload,
    pub files: u64,
    pub file_size: u64,
    pub io_size: u64,
    pub streams: usize,
    /// Read:write ratio.
    pub reads: u32,
    pub writes: u32,
    /// Total I/O operations across all streams.
    pub ops: u64,
}

impl WorkloadSpec {
    /// Full-size profile.
    pub fn full(workload: Workload) -> Self {
        let (files, file_size, reads, writes) = match workload {
            Workload::Fio => (10, 256 << 20, 1, 1),
            Workload::Fileserver => (1000, 128 << 10, 1, 2),
            Workload::Webserver => (1000, 64 << 10, 10, 1),
        };
        let io_size = 4096;
        WorkloadSpec { workload, files, file_size, io_size, streams: 10, reads, writes, ops: files * file_size / io_size }
    }

    /// Shrinks the profile by `divisor`: file size for fio, file count for
    /// the filebench profiles. The op count is one pass over the data set.
    pub fn scaled(workload: Workload, divisor: u64) -> Result<Self> {
        if divisor == 0 {
            return Err(FsError::InvalidArgument("scale divisor must be positive".into()));
        }
        let mut s = Self::full(workload);
        match workload {
            Workload::Fio => s.file_size = (s.file_size / divisor).max(s.io_size),
            _ => s.files = (s.files / divisor).max(s.streams as u64),
        }
        s.ops = s.files * s.file_size / s.io_size;
        Ok(s)
    }

    fn data_bytes(&self) -> u64 {
        self.files * self.file_size
    }

    /// Image size with room for copy-on-write churn and tree blocks.
    pub fn image_size(&self) -> u64 {
        let data = self.data_bytes();
        let cow = self.streams as u64 * (OPS_PER_TXN as u64 + POPULATE_CHUNK) * BLOCK_SIZE;
        (data + data / 8 + cow + (8 << 20)).div_ceil(BLOCK_SIZE) * BLOCK_SIZE
    }
}

impl fmt::Display for WorkloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} files x {} KiB, {} B I/O, {} streams, R:W {}:{}, {} ops",
            self.workload,
            self.files,
            self.file_size / 1024,
            self.io_size,
            self.streams,
            self.reads,
            self.writes,
            self.ops
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlushMode {
    Durable,
    NoFlush,
}

impl FlushMode {
    pub fn config(self) -> FsConfig {
        FsConfig { flush_data: self == FlushMode::Durable, ..FsConfig::default() }
    }
}

impl fmt::Display for FlushMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlushMode::Durable => "durable",
            FlushMode::NoFlush => "noflush",
        })
    }
}

/// Measurements for the run phase only; populating files is excluded.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub spec: WorkloadSpec,
    pub mode: FlushMode,
    pub reads: u64,
    pub writes: u64,
    pub commits: u64,
    /// Full data blocks written.
    pub blocks_written: u64,
    pub bytes_written: u64,
    pub elapsed: Duration,
    pub device: DeviceStats,
    pub flush: FlushStats,
    /// Hash over every file's final contents.
    pub content_hash: u64,
}

impl BenchReport {
    pub fn ops(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn ops_per_sec(&self) -> f64 {
        self.ops() as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "workload {} mode {}", self.spec, self.mode)?;
        writeln!(
            f,
            "  ops={} reads={} writes={} commits={} elapsed={:.3}s ops/s={:.0}",
            self.ops(),
            self.reads,
            self.writes,
            self.commits,
            self.elapsed.as_secs_f64(),
            self.ops_per_sec()
        )?;
        writeln!(f, "  bytes_written={} blocks_written={}", self.bytes_written, self.blocks_written)?;
        writeln!(
            f,
            "  device: clwbs={} sfences={} stores={} nt_stores={} ops={}",
            self.device.clwbs,
            self.device.sfences,
            self.device.stores,
            self.device.nt_stores,
            self.device.ops()
        )?;
        write!(
            f,
            "  flushes: data_clwbs={} data_sfences={} tree_clwbs={} meta_clwbs={}",
            self.flush.data_clwbs, self.flush.data_sfences, self.flush.tree_clwbs, self.flush.meta_clwbs
        )
    }
}

/// Durable-versus-noflush cost, as percentages over the noflush run.
#[derive(Clone, Copy, Debug)]
pub struct Degradation {
    pub time_pct: f64,
    pub device_ops_pct: f64,
    pub clwb_pct: f64,
}

impl Degradation {
    pub fn between(durable: &BenchReport, noflush: &BenchReport) -> Self {
        let pct = |a: f64, b: f64| if b == 0.0 { 0.0 } else { (a - b) / b * 100.0 };
        Degradation {
            time_pct: pct(durable.elapsed.as_secs_f64(), noflush.elapsed.as_secs_f64()),
            device_ops_pct: pct(durable.device.ops() as f64, noflush.device.ops() as f64),
            clwb_pct: pct(durable.device.clwbs as f64, noflush.device.clwbs as f64),
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "degradation: wall time {:+.1}%, device ops {:+.1}%, clwbs {:+.1}%",
            self.time_pct, self.device_ops_pct, self.clwb_pct
        )
    }
}

fn file_path(i: u64) -> String {
    format!("/bench/f{i:05}")
}

/// Formats a fresh device sized for `spec`.
pub fn prepare_device(spec: &WorkloadSpec) -> Result<PmDevice> {
    let mut dev = PmDevice::new(spec.image_size(), OrderingModel::PaperOrdered)?;
    mkfs(&mut dev, &MkfsOptions { log_blocks: 256, ..Default::default() })?;
    Ok(dev)
}

fn populate(fs: &DurableFs, spec: &WorkloadSpec, seed: u64) -> Result<()> {
    fs.mkdir("/bench")?;
    let blocks = spec.file_size.div_ceil(BLOCK_SIZE);
    for i in 0..spec.files {
        let path = file_path(i);
        fs.create(&path)?;
        let mut b = 0;
        while b < blocks {
            let n = POPULATE_CHUNK.min(blocks - b);
            let off = b * BLOCK_SIZE;
            let len = (n * BLOCK_SIZE).min(spec.file_size - off) as usize;
            let h = fs.open(&path, OpenMode::Write)?;
            fs.write(h, &pattern(seed ^ i, off, len), off)?;
            fs.close(h)?;
            b += n;
        }
    }
    Ok(())
}

struct Stream {
    files: Vec<u64>,
    next_file: usize,
    open: Option<(FileHandle, u64)>,
    in_txn: usize,
}

/// Runs `spec` on a freshly formatted device.
pub fn run_workload(spec: &WorkloadSpec, mode: FlushMode, seed: u64) -> Result<BenchReport> {
    let fs = DurableFs::mount(prepare_device(spec)?, mode.config())?;
    run_on(&fs, spec, mode, seed)
}

/// Populates and runs `spec` on a mounted, empty file system.
pub fn run_on(fs: &DurableFs, spec: &WorkloadSpec, mode: FlushMode, seed: u64) -> Result<BenchReport> {
    if spec.io_size == 0 || spec.io_size > spec.file_size || spec.streams == 0 {
        return Err(FsError::InvalidArgument(format!("unusable workload: {spec}")));
    }
    populate(fs, spec, seed)?;
    let dev0 = fs.device_stats();
    let flush0 = fs.flush_stats();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut streams: Vec<Stream> = (0..spec.streams)
        .map(|s| Stream {
            files: (0..spec.files).filter(|f| f % spec.streams as u64 == s as u64).collect(),
            next_file: 0,
            open: None,
            in_txn: 0,
        })
        .collect();
    streams.retain(|s| !s.files.is_empty());
    let slots = spec.file_size / spec.io_size;
    let ratio = spec.reads + spec.writes;
    let mut buf = vec![0u8; spec.io_size as usize];
    let (mut reads, mut writes, mut commits, mut blocks, mut bytes) = (0u64, 0u64, 0u64, 0u64, 0u64);

    let start = Instant::now();
    let mut op = 0u64;
    'outer: loop {
        for st in streams.iter_mut() {
            if op == spec.ops {
                break 'outer;
            }
            op += 1;
            let (h, file) = match st.open {
                Some(o) => o,
                None => {
                    let f = st.files[st.next_file % st.files.len()];
                    st.next_file += 1;
                    let h = fs.open(&file_path(f), OpenMode::Write)?;
                    st.open = Some((h, f));
                    (h, f)
                }
            };
            let off = rng.gen_range(0..slots) * spec.io_size;
            if rng.gen_range(0..ratio) < spec.reads {
                fs.read(h, &mut buf, off)?;
                reads += 1;
            } else {
                let data = pattern(rng.gen::<u64>() ^ file, off, spec.io_size as usize);
                fs.write(h, &data, off)?;
                writes += 1;
                bytes += spec.io_size;
                if off % BLOCK_SIZE == 0 {
                    blocks += spec.io_size / BLOCK_SIZE;
                }
            }
            st.in_txn += 1;
            if st.in_txn == OPS_PER_TXN {
                fs.close(h)?;
                commits += 1;
                st.open = None;
                st.in_txn = 0;
            }
        }
    }
    for st in &mut streams {
        if let Some((h, _)) = st.open.take() {
            fs.close(h)?;
            commits += 1;
        }
    }
    let elapsed = start.elapsed();
    let device = fs.device_stats().since(&dev0);
    let flush = fs.flush_stats().since(&flush0);

    let mut hasher = DefaultHasher::new();
    for i in 0..spec.files {
        fs.read_file(&file_path(i))?.hash(&mut hasher);
    }
    Ok(BenchReport {
        spec: *spec,
        mode,
        reads,
        writes,
        commits,
        blocks_written: blocks,
        bytes_written: bytes,
        elapsed,
        device,
        flush,
        content_hash: hasher.finish(),
    })
}

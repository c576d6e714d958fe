//! Fixtures shared by the benchmarks.

use durablefs::harness::{record, MatrixConfig, Script};
use durablefs::{mkfs, CrashPolicy, DurableFs, FsConfig, MkfsOptions, OpenMode, OrderingModel, PmDevice};

pub fn formatted(mib: u64) -> PmDevice {
    let mut dev = PmDevice::new(mib << 20, OrderingModel::PaperOrdered).expect("device");
    mkfs(&mut dev, &MkfsOptions::default()).expect("mkfs");
    dev
}

pub fn mounted(mib: u64, config: FsConfig) -> DurableFs {
    DurableFs::mount(formatted(mib), config).expect("mount")
}

/// A file system holding `/f` with `blocks` full blocks.
pub fn with_file(mib: u64, blocks: u64, config: FsConfig) -> DurableFs {
    let fs = mounted(mib, config);
    fs.write_file("/f", &vec![0xA5; (blocks * 4096) as usize]).expect("populate");
    fs
}

/// One transaction that overwrites `len` bytes at `offset` of `/f`.
pub fn overwrite(fs: &DurableFs, data: &[u8], offset: u64) {
    let h = fs.open("/f", OpenMode::Write).expect("open");
    fs.write(h, data, offset).expect("write");
    fs.close(h).expect("close");
}

/// A crash image taken near the end of a commit of `blocks` full blocks,
/// where the log still holds the committed transaction and recovery must
/// replay it.
pub fn crashed_mid_commit(blocks: u64) -> PmDevice {
    let text = format!("create /f\nopen w /f as h\nwrite h 0 {} seed1\nclose h\n", blocks * 4096);
    let cfg = MatrixConfig { capacity: 8 << 20, ..MatrixConfig::default() };
    let rec = record(&Script::parse(&text).expect("script"), &cfg).expect("record");
    let close = rec.steps.last().expect("steps");
    let mut dev = rec.base.clone();
    // stop a few operations short of the end so the End record is missing
    for op in &rec.trace[..close.end - 3] {
        dev.apply(op).expect("apply");
    }
    dev.crash_with(CrashPolicy::PersistAll)
}

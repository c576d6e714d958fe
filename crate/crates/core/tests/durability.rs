use durablefs::harness::{record, run_crash_matrix, MatrixConfig, Points, Script};
use durablefs::{
    fsck, mkfs, recover, CrashPolicy, DurableFs, FsConfig, MkfsOptions, OpenMode, OrderingModel, PmDevice,
};

fn fresh() -> DurableFs {
    let mut dev = PmDevice::new(4 << 20, OrderingModel::PaperOrdered).unwrap();
    mkfs(&mut dev, &MkfsOptions::default()).unwrap();
    DurableFs::mount(dev, FsConfig::default()).unwrap()
}

fn remount(dev: PmDevice) -> DurableFs {
    DurableFs::mount(dev, FsConfig::default()).unwrap()
}

#[test]
fn closed_file_survives_losing_everything_unfenced() {
    let fs = fresh();
    fs.write_file("/a", b"committed").unwrap();
    let dev = fs.into_device().crash_with(CrashPolicy::PersistNone);
    assert_eq!(remount(dev).read_file("/a").unwrap(), b"committed");
}

#[test]
fn open_transaction_is_discarded_by_crash() {
    let fs = fresh();
    fs.write_file("/a", b"old").unwrap();
    let h = fs.open("/a", OpenMode::Write).unwrap();
    fs.write(h, b"new contents", 0).unwrap();
    for policy in [CrashPolicy::PersistNone, CrashPolicy::PersistAll] {
        let fs2 = remount(fs.with_device(|d| d.crash_with(policy)));
        assert_eq!(fs2.read_file("/a").unwrap(), b"old");
        assert!(fsck(&fs2.into_device()).is_empty());
    }
}

#[test]
fn recovery_runs_once_then_is_a_no_op() {
    let fs = fresh();
    fs.write_file("/a", &[7u8; 9000]).unwrap();
    let mut dev = fs.into_device().crash(3);
    recover(&mut dev).unwrap();
    let before = dev.durable_image().to_vec();
    let report = recover(&mut dev).unwrap();
    assert_eq!(report.replayed, 0);
    assert_eq!(dev.durable_image(), &before[..]);
}

#[test]
fn sampled_matrix_over_every_builtin_script() {
    for name in Script::builtin_names() {
        let cfg = MatrixConfig { points: Points::Sample(150), seed: 4, ..MatrixConfig::default() };
        let rec = record(&Script::builtin(name).unwrap(), &cfg).unwrap();
        let r = run_crash_matrix(&rec, &cfg).unwrap();
        assert!(r.passed(), "{name}: {r}: {:?}", r.failures.first());
        assert_eq!(r.torn_entries, 0);
    }
}

#[test]
fn one_committed_write_then_crash_after_close() {
    let script = Script::parse("create /a\nopen w /a as h\nwrite h 0 4096 seed1\nclose h\n").unwrap();
    let cfg = MatrixConfig::default();
    let rec = record(&script, &cfg).unwrap();
    let last = rec.trace.len();
    let (done, allowed) = rec.allowed(last);
    assert_eq!(done, 4);
    assert_eq!(allowed.len(), 1);
    assert!(run_crash_matrix(&rec, &cfg).unwrap().passed());
}

#[test]
fn group_commit_is_all_or_nothing() {
    let script = Script::parse(
        "create /a\ncreate /b\nopen_many /a /b as x y\nwrite x 0 5000 seed1\nwrite y 0 5000 seed2\nclose_many x y\n",
    )
    .unwrap();
    let cfg = MatrixConfig::default();
    let rec = record(&script, &cfg).unwrap();
    let r = run_crash_matrix(&rec, &cfg).unwrap();
    assert!(r.passed(), "{r}: {:?}", r.failures.first());
}

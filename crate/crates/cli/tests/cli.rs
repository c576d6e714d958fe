use std::path::Path;
use std::process::{Command, Output};

fn durablefs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_durablefs")).args(args).env_remove("DURABLEFS_SEED").output().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mkfs(img: &Path) {
    let o = durablefs(&["mkfs", img.to_str().unwrap(), "--size-kb", "4096", "--log-blocks", "32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn mkfs_then_fsck_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.img");
    mkfs(&img);
    assert_eq!(std::fs::metadata(&img).unwrap().len(), 4096 * 1024);
    let o = durablefs(&["fsck", img.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(text(&o).contains("clean"));
    // formatting over an existing image is allowed
    mkfs(&img);
}

#[test]
fn mkfs_rejects_tiny_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("tiny.img");
    let o = durablefs(&["mkfs", img.to_str().unwrap(), "--size-kb", "64"]);
    assert!(!o.status.success());
    assert!(!img.exists());
}

#[test]
fn shell_put_get_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("s.img");
    mkfs(&img);
    let local = dir.path().join("in.bin");
    let payload: Vec<u8> = (0..20_000u32).map(|i| (i * 7 % 251) as u8).collect();
    std::fs::write(&local, &payload).unwrap();
    let out = dir.path().join("out.bin");
    let cmds = format!("mkdir /d; put {} /d/f; get /d/f {}", local.display(), out.display());
    let o = durablefs(&["shell", img.to_str().unwrap(), "-c", &cmds]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), payload);

    // persisted in the image across invocations
    let o = durablefs(&["shell", img.to_str().unwrap(), "-c", "ls /; ls /d; stat /d/f"]);
    let t = text(&o);
    assert!(t.contains("d/"), "{t}");
    assert!(t.contains("size=20000"), "{t}");

    let o = durablefs(&["shell", img.to_str().unwrap(), "-c", "rm /d/f; ls /d"]);
    assert!(o.status.success());
    assert!(!text(&o).contains('f'));
    assert!(durablefs(&["fsck", img.to_str().unwrap()]).status.success());
}

#[test]
fn shell_reads_stdin_and_reports_failures() {
    use std::io::Write;
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("s.img");
    mkfs(&img);
    let mut child = Command::new(env!("CARGO_BIN_EXE_durablefs"))
        .args(["shell", img.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"mkdir /x\nrmdir /missing\nls /\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(!o.status.success());
    assert!(text(&o).contains("x/"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/missing"));
}

#[test]
fn crashtest_builtin_passes_under_ordered_stores() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("c.img");
    let o = durablefs(&["crashtest", img.to_str().unwrap(), "--script", "builtin:torn-probe", "--points", "200"]);
    assert!(o.status.success(), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("failures=0"), "{t}");
    assert!(t.lines().filter(|l| l.starts_with("point ")).count() > 100);
}

#[test]
fn crashtest_relaxed_reports_torn_entries() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("c.img");
    let o = durablefs(&[
        "crashtest",
        img.to_str().unwrap(),
        "--script",
        "builtin:torn-probe",
        "--model",
        "relaxed",
        "--images",
        "8",
        "--quiet",
    ]);
    assert!(!o.status.success());
    assert!(text(&o).contains("torn log entries observed"), "{}", text(&o));
}

#[test]
fn crashtest_bad_script_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.dfs");
    std::fs::write(&script, "create /a\nfly /a\n").unwrap();
    let img = dir.path().join("c.img");
    let o = durablefs(&["crashtest", img.to_str().unwrap(), "--script", script.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn bench_reports_both_modes() {
    let o = durablefs(&["bench", "--workload", "webserver", "--scale", "1/100", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = text(&o);
    assert!(t.contains("mode durable") && t.contains("mode noflush"), "{t}");
    assert!(t.contains("degradation:"));
    let noflush = t.split("mode noflush").nth(1).unwrap();
    assert!(noflush.contains("data_clwbs=0"));
}

#[test]
fn bench_is_deterministic_and_seed_env_wins() {
    let run = |env: Option<&str>, seed: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_durablefs"));
        c.args(["bench", "--workload", "fileserver", "--scale", "100", "--mode", "durable", "--seed", seed]);
        match env {
            Some(v) => c.env("DURABLEFS_SEED", v),
            None => c.env_remove("DURABLEFS_SEED"),
        };
        let out = text(&c.output().unwrap());
        // drop wall-clock figures
        out.lines().filter(|l| !l.contains("elapsed")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(run(None, "4"), run(None, "4"));
    assert_eq!(run(Some("4"), "9"), run(None, "4"));
    assert!(run(Some("4"), "9").starts_with("seed 4"));
}

#[test]
fn unknown_workload_is_usage_error() {
    let o = durablefs(&["bench", "--workload", "oltp"]);
    assert_eq!(o.status.code(), Some(2));
}

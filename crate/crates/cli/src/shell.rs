use std::io::{self, BufRead};
use std::path::Path;
use std::process::ExitCode;

use durablefs::{DurableFs, FsConfig, InodeType, OrderingModel, PmDevice};

const HELP: &str = "commands: ls [DIR] | cat PATH | put LOCAL PATH | get PATH LOCAL | rm PATH | mkdir PATH | \
                    rmdir PATH | stat PATH | help";

fn exec(fs: &DurableFs, line: &str) -> Result<(), String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let e = |e: durablefs::FsError| e.to_string();
    match words.as_slice() {
        [] => Ok(()),
        ["help"] => {
            println!("{HELP}");
            Ok(())
        }
        ["ls"] | ["ls", _] => {
            let dir = words.get(1).copied().unwrap_or("/");
            let mut entries = fs.readdir(dir).map_err(e)?;
            entries.sort_by(|a, b| a.name.cmp(&b.name));
            for ent in entries {
                let slash = if ent.kind == InodeType::Directory { "/" } else { "" };
                println!("{}{slash}", ent.name);
            }
            Ok(())
        }
        ["cat", path] => {
            let data = fs.read_file(path).map_err(e)?;
            print!("{}", String::from_utf8_lossy(&data));
            Ok(())
        }
        ["put", local, path] => {
            let data = std::fs::read(local).map_err(|err| format!("{local}: {err}"))?;
            fs.write_file(path, &data).map_err(e)?;
            Ok(())
        }
        ["get", path, local] => {
            let data = fs.read_file(path).map_err(e)?;
            std::fs::write(local, data).map_err(|err| format!("{local}: {err}"))?;
            Ok(())
        }
        ["rm", path] => fs.unlink(path).map(|_| ()).map_err(e),
        ["mkdir", path] => fs.mkdir(path).map(|_| ()).map_err(e),
        ["rmdir", path] => fs.rmdir(path).map(|_| ()).map_err(e),
        ["stat", path] => {
            let st = fs.stat(path).map_err(e)?;
            println!("inode={} kind={:?} size={} blocks={}", st.inode, st.kind, st.size, st.blocks);
            Ok(())
        }
        _ => Err(format!("cannot parse {line:?}; {HELP}")),
    }
}

pub fn run(image: &Path, command: Option<&str>) -> Result<ExitCode, String> {
    let dev = PmDevice::load(image, OrderingModel::PaperOrdered).map_err(|e| format!("{}: {e}", image.display()))?;
    let fs = DurableFs::mount(dev, FsConfig::default()).map_err(|e| format!("mount failed: {e}"))?;
    let lines: Vec<String> = match command {
        Some(c) => c.split(';').map(|s| s.trim().to_string()).collect(),
        None => io::stdin().lock().lines().collect::<Result<_, _>>().map_err(|e| e.to_string())?,
    };
    let mut failed = false;
    for line in &lines {
        let line = line.split('#').next().unwrap_or("").trim();
        if let Err(msg) = exec(&fs, line) {
            eprintln!("{line}: {msg}");
            failed = true;
        }
    }
    // mounting may have replayed or discarded log entries, so always save
    fs.into_device().save(image).map_err(|e| format!("{}: {e}", image.display()))?;
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

//! Line-oriented operation scripts.
//!
//! ```text
//! # comment
//! mkdir /d
//! create /d/f
//! open w /d/f as h        # r, w or c (create-or-open for writing)
//! write h 0 4096 seed7    # offset, length, pattern seed
//! read h 0 100
//! close h
//! open_many /a /b as x y
//! close_many x y
//! abort h
//! unlink /d/f
//! rmdir /d
//! ```
//! Without `as`, handles are named `h0`, `h1`, ... in opening order.

use std::fmt;

use crate::fs::OpenMode;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Mkdir(String),
    Rmdir(String),
    Create(String),
    Unlink(String),
    Open { mode: OpenMode, path: String, name: String },
    OpenMany { paths: Vec<String>, names: Vec<String> },
    Write { handle: String, offset: u64, len: usize, seed: u64 },
    Read { handle: String, offset: u64, len: usize },
    Close(String),
    CloseMany(Vec<String>),
    Abort(String),
}

impl Step {
    /// True for steps whose success makes changes durable.
    pub fn commits(&self) -> bool {
        matches!(
            self,
            Step::Mkdir(_) | Step::Rmdir(_) | Step::Create(_) | Step::Unlink(_) | Step::Close(_) | Step::CloseMany(_)
        )
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Mkdir(p) => write!(f, "mkdir {p}"),
            Step::Rmdir(p) => write!(f, "rmdir {p}"),
            Step::Create(p) => write!(f, "create {p}"),
            Step::Unlink(p) => write!(f, "unlink {p}"),
            Step::Open { mode, path, name } => {
                let m = match mode {
                    OpenMode::Read => "r",
                    OpenMode::Write => "w",
                    OpenMode::Create => "c",
                };
                write!(f, "open {m} {path} as {name}")
            }
            Step::OpenMany { paths, names } => write!(f, "open_many {} as {}", paths.join(" "), names.join(" ")),
            Step::Write { handle, offset, len, seed } => write!(f, "write {handle} {offset} {len} seed{seed}"),
            Step::Read { handle, offset, len } => write!(f, "read {handle} {offset} {len}"),
            Step::Close(h) => write!(f, "close {h}"),
            Step::CloseMany(hs) => write!(f, "close_many {}", hs.join(" ")),
            Step::Abort(h) => write!(f, "abort {h}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("script line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Script {
    pub steps: Vec<Step>,
}

const SMOKE: &str = include_str!("../../scripts/smoke.dfs");
const TORN_PROBE: &str = include_str!("../../scripts/torn-probe.dfs");
const HAZARD: &str = include_str!("../../scripts/hazard.dfs");

impl Script {
    pub fn builtin(name: &str) -> Option<Script> {
        let text = match name {
            "smoke" => SMOKE,
            "torn-probe" => TORN_PROBE,
            "hazard" => HAZARD,
            _ => return None,
        };
        Some(Script::parse(text).expect("builtin scripts parse"))
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["smoke", "torn-probe", "hazard"]
    }

    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut steps = Vec::new();
        let mut auto = 0usize;
        let mut next_name = || {
            let n = format!("h{auto}");
            auto += 1;
            n
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ScriptError { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let args = &words[1..];
            let one = |what: &str| -> Result<String, ScriptError> {
                match args {
                    [a] => Ok(a.to_string()),
                    _ => Err(err(format!("{what} takes exactly one argument"))),
                }
            };
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(format!("expected a number, got {s:?}")));
            let step = match words[0] {
                "mkdir" => Step::Mkdir(one("mkdir")?),
                "rmdir" => Step::Rmdir(one("rmdir")?),
                "create" => Step::Create(one("create")?),
                "unlink" => Step::Unlink(one("unlink")?),
                "close" => Step::Close(one("close")?),
                "abort" => Step::Abort(one("abort")?),
                "open" => {
                    let (mode, path, name) = match args {
                        [m, p] => (*m, p.to_string(), next_name()),
                        [m, p, "as", n] => (*m, p.to_string(), n.to_string()),
                        _ => return Err(err("usage: open r|w|c PATH [as NAME]".into())),
                    };
                    let mode = match mode {
                        "r" => OpenMode::Read,
                        "w" => OpenMode::Write,
                        "c" => OpenMode::Create,
                        m => return Err(err(format!("unknown open mode {m:?}"))),
                    };
                    Step::Open { mode, path, name }
                }
                "open_many" => {
                    let split = args.iter().position(|a| *a == "as");
                    let (paths, names): (Vec<String>, Vec<String>) = match split {
                        Some(k) => (
                            args[..k].iter().map(|s| s.to_string()).collect(),
                            args[k + 1..].iter().map(|s| s.to_string()).collect(),
                        ),
                        None => {
                            let paths: Vec<String> = args.iter().map(|s| s.to_string()).collect();
                            let names = paths.iter().map(|_| next_name()).collect();
                            (paths, names)
                        }
                    };
                    if paths.is_empty() || paths.len() != names.len() {
                        return Err(err("open_many needs paths and one name per path".into()));
                    }
                    Step::OpenMany { paths, names }
                }
                "close_many" => {
                    if args.is_empty() {
                        return Err(err("close_many needs handles".into()));
                    }
                    Step::CloseMany(args.iter().map(|s| s.to_string()).collect())
                }
                "write" => match args {
                    [h, off, len, seed] => {
                        let seed = seed.strip_prefix("seed").unwrap_or(seed);
                        Step::Write { handle: h.to_string(), offset: num(off)?, len: num(len)? as usize, seed: num(seed)? }
                    }
                    _ => return Err(err("usage: write HANDLE OFFSET LEN seedN".into())),
                },
                "read" => match args {
                    [h, off, len] => Step::Read { handle: h.to_string(), offset: num(off)?, len: num(len)? as usize },
                    _ => return Err(err("usage: read HANDLE OFFSET LEN".into())),
                },
                other => return Err(err(format!("unknown command {other:?}"))),
            };
            steps.push(step);
        }
        Ok(Script { steps })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic write payload. Each byte depends on the seed and its file
/// offset, so overlapping writes with different seeds are distinguishable.
pub fn pattern(seed: u64, offset: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut pos = offset;
    while out.len() < len {
        let word = splitmix(seed.wrapping_mul(0x1000_0000_01B3) ^ (pos / 8)).to_le_bytes();
        let skip = (pos % 8) as usize;
        let take = (8 - skip).min(len - out.len());
        out.extend_from_slice(&word[skip..skip + take]);
        pos += take as u64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_forms_and_autonames() {
        let s = Script::parse(
            "mkdir /d\ncreate /d/f # trailing comment\nopen w /d/f\nopen r /d/f as rd\nwrite h0 10 20 seed3\n\
             read rd 0 5\nclose h0\nopen_many /a /b\nclose_many h1 h2\nabort rd\nunlink /d/f\nrmdir /d\n",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 12);
        assert_eq!(s.steps[2], Step::Open { mode: OpenMode::Write, path: "/d/f".into(), name: "h0".into() });
        assert_eq!(s.steps[4], Step::Write { handle: "h0".into(), offset: 10, len: 20, seed: 3 });
        assert_eq!(
            s.steps[7],
            Step::OpenMany { paths: vec!["/a".into(), "/b".into()], names: vec!["h1".into(), "h2".into()] }
        );
    }

    #[test]
    fn display_round_trips() {
        for name in Script::builtin_names() {
            let s = Script::builtin(name).unwrap();
            let text: String = s.steps.iter().map(|st| format!("{st}\n")).collect();
            assert_eq!(Script::parse(&text).unwrap(), s);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Script::parse("mkdir /a\nfrobnicate\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(Script::parse("write h0 x 1 seed1").is_err());
        assert!(Script::parse("open q /a").is_err());
    }

    #[test]
    fn pattern_is_offset_consistent() {
        let whole = pattern(9, 0, 100);
        assert_eq!(&whole[13..57], &pattern(9, 13, 44)[..]);
        assert_ne!(pattern(1, 0, 32), pattern(2, 0, 32));
    }
}

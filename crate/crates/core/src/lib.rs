//! A transactional file system for byte-addressable persistent memory,
//! running over a simulated PM device with an explicit persistence model.

pub mod error;
pub mod fs;
pub mod harness;
pub mod layout;
pub mod pmsim;
pub mod recovery;
pub mod txn;
pub mod wal;
pub mod workload;

pub use error::{FsError, Result};
pub use fs::{DirEntry, DurableFs, FileHandle, OpenMode, Stat};
pub use layout::{mkfs, InodeType, MkfsOptions, RegionMap};
pub use pmsim::{CrashPolicy, DeviceStats, OrderingModel, PmDevice, PmError};
pub use recovery::{fsck, recover, RecoveryReport, Violation};
pub use txn::{FlushStats, FsConfig};

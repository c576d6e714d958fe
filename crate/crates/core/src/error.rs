use crate::pmsim::PmError;

pub type Result<T, E = FsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum FsError {
    #[error(transparent)]
    Device(#[from] PmError),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt image: {0}")]
    Corrupt(String),
    #[error("no such file or directory: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    Exists(String),
    #[error("directory not empty: {0}")]
    NotEmpty(String),
    #[error("not a directory: {0}")]
    NotDir(String),
    #[error("is a directory: {0}")]
    IsDir(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("inode {0} is busy")]
    Busy(u32),
    #[error("no free data blocks")]
    NoSpace,
    #[error("no free inodes")]
    NoInodes,
    #[error("file would exceed the maximum size")]
    FileTooLarge,
    #[error("redo log is full")]
    LogFull,
    #[error("value {value} does not fit the {width}-bit log field `{field}`")]
    FieldOverflow { field: &'static str, value: u64, width: u32 },
    #[error("invalid or closed file handle {0}")]
    BadHandle(u64),
    #[error("handle {0} is read-only")]
    ReadOnly(u64),
    #[error("handles of a multi-file transaction must be closed together with close_many")]
    GroupClose,
    #[error("{0}")]
    Logic(String),
    #[error("transaction {0} was aborted after a failed operation")]
    Aborted(u32),
    #[error("commit record read-back mismatch at log index {0}")]
    ReadBackMismatch(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

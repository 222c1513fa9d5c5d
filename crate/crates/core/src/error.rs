use crate::format::FormatError;
use crate::storage::StorageError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by dataset, version-control, view and loader operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("sample rejected by tensor `{tensor}`: {source}")]
    Validation {
        tensor: String,
        #[source]
        source: FormatError,
    },
    #[error("failed to write chunk for `{tensor}`: {reason}")]
    ChunkWriteFailure { tensor: String, reason: String },
    #[error("index {index} out of range for `{tensor}` of length {len}")]
    IndexOutOfRange { tensor: String, index: u64, len: u64 },
    #[error("region {region:?} exceeds sample shape {shape:?}")]
    RegionOutOfBounds { region: Vec<std::ops::Range<usize>>, shape: Vec<usize> },
    #[error("a dataset already exists at `{0}`")]
    AlreadyExists(String),
    #[error("no dataset at `{0}`")]
    NotADataset(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("unknown branch or commit `{0}`")]
    UnknownTarget(String),
    #[error("unknown commit `{0}`")]
    UnknownCommit(String),
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("invalid branch name `{0}`")]
    InvalidBranchName(String),
    #[error("branch `{0}` already exists")]
    BranchExists(String),
    #[error("branch `{branch}` has uncommitted changes")]
    DirtyState { branch: String },
    #[error("nothing to commit")]
    NothingToCommit,
    #[error("version `{0}` is read-only; create a branch to modify it")]
    ReadOnlyVersion(String),
    #[error("branch `{0}` is locked by another writer")]
    BranchLocked(String),
    #[error("chunk `{chunk}` of `{tensor}` is missing from the version tree")]
    ChunkNotFound { tensor: String, chunk: String },
    #[error("merge conflict on sample ids {ids:?}")]
    MergeConflict { ids: Vec<u64> },
    #[error("cannot merge branches with different schemas: {0}")]
    SchemaMismatch(String),
    #[error("row {row}: cannot resolve link `{url}`: {reason}")]
    LinkResolveFailure { row: u64, url: String, reason: String },
    #[error("duplicate index {0} in view")]
    DuplicateIndex(u64),
    #[error("destination `{0}` is not empty")]
    DestinationNotEmpty(String),
    #[error(transparent)]
    Query(#[from] crate::tql::TqlError),
    #[error("row {row}: transform failed: {reason}")]
    Transform { row: u64, reason: String },
    #[error("invalid loader configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt metadata in `{key}`: {reason}")]
    Metadata { key: String, reason: String },
}

impl Error {
    pub(crate) fn metadata(key: impl Into<String>, reason: impl ToString) -> Self {
        Error::Metadata {
            key: key.into(),
            reason: reason.to_string(),
        }
    }
}

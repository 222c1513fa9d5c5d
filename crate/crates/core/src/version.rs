//! Version tree metadata: commits, branches and diff/merge result types.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BRANCH: &str = "main";

/// One node of the version tree as persisted in `version_control_info.json`.
///
/// Working nodes (one per branch head) have no message and are not committed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitInfo {
    pub parent: Option<String>,
    pub branch: String,
    pub message: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub timestamp: Option<u64>,
    #[serde(default)]
    pub committed: bool,
}

/// A committed node, as reported by `log`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommitNode {
    pub commit_id: String,
    pub parent: Option<String>,
    pub branch: String,
    pub message: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionTree {
    /// Branch name to the id of its working node.
    pub branches: BTreeMap<String, String>,
    pub commits: BTreeMap<String, CommitInfo>,
}

impl VersionTree {
    pub fn node(&self, id: &str) -> Result<&CommitInfo> {
        self.commits
            .get(id)
            .ok_or_else(|| Error::UnknownCommit(id.to_string()))
    }

    /// `id` followed by its ancestors up to the root.
    pub fn ancestors(&self, id: &str) -> Result<Vec<String>> {
        let mut out = vec![id.to_string()];
        let mut seen = HashSet::from([id.to_string()]);
        let mut cur = self.node(id)?;
        while let Some(p) = &cur.parent {
            if !seen.insert(p.clone()) {
                return Err(Error::metadata("version_control_info.json", "cycle in parent chain"));
            }
            out.push(p.clone());
            cur = self.node(p)?;
        }
        Ok(out)
    }

    /// Lowest common ancestor (inclusive) of two nodes.
    pub fn common_ancestor(&self, a: &str, b: &str) -> Result<String> {
        let of_a: HashSet<String> = self.ancestors(a)?.into_iter().collect();
        self.ancestors(b)?
            .into_iter()
            .find(|n| of_a.contains(n))
            .ok_or_else(|| Error::UnknownCommit(format!("{a} and {b} share no ancestor")))
    }

    /// Working node id of `branch`.
    pub fn head(&self, branch: &str) -> Result<&str> {
        self.branches
            .get(branch)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownBranch(branch.to_string()))
    }

    /// Most recent committed node on `branch`.
    pub fn last_commit(&self, branch: &str) -> Result<String> {
        let head = self.head(branch)?;
        let info = self.node(head)?;
        if info.committed {
            return Ok(head.to_string());
        }
        info.parent
            .clone()
            .ok_or_else(|| Error::metadata("version_control_info.json", "working node without parent"))
    }

    /// Resolves a full id or a unique prefix of at least 4 characters.
    pub fn resolve_id(&self, text: &str) -> Option<String> {
        if self.commits.contains_key(text) {
            return Some(text.to_string());
        }
        if text.len() < 4 {
            return None;
        }
        let mut hits = self.commits.keys().filter(|k| k.starts_with(text));
        let first = hits.next()?;
        hits.next().is_none().then(|| first.clone())
    }

    /// Committed nodes reachable from `id`, newest first.
    pub fn log(&self, id: &str) -> Result<Vec<CommitNode>> {
        Ok(self
            .ancestors(id)?
            .into_iter()
            .filter_map(|n| {
                let info = &self.commits[&n];
                info.committed.then(|| CommitNode {
                    commit_id: n.clone(),
                    parent: info.parent.clone(),
                    branch: info.branch.clone(),
                    message: info.message.clone().unwrap_or_default(),
                    timestamp: info.timestamp.unwrap_or_default(),
                })
            })
            .collect())
    }
}

/// Changes of one tensor on both sides of a diff, relative to the common ancestor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TensorDiff {
    pub added_a: Vec<Range<u64>>,
    pub added_b: Vec<Range<u64>>,
    pub updated_a: BTreeSet<u64>,
    pub updated_b: BTreeSet<u64>,
}

impl TensorDiff {
    pub fn is_empty(&self) -> bool {
        self.added_a.is_empty()
            && self.added_b.is_empty()
            && self.updated_a.is_empty()
            && self.updated_b.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DiffReport {
    pub common_ancestor: String,
    pub tensors: BTreeMap<String, TensorDiff>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.tensors.values().all(TensorDiff::is_empty)
    }
}

/// Conflict policy for samples updated on both sides of a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    Ours,
    Theirs,
    FailOnConflict,
}

impl std::str::FromStr for MergePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ours" => Ok(MergePolicy::Ours),
            "theirs" => Ok(MergePolicy::Theirs),
            "fail" | "fail_on_conflict" => Ok(MergePolicy::FailOnConflict),
            _ => Err(format!("unknown merge policy `{s}`")),
        }
    }
}

/// Unions half-open ranges into sorted, disjoint, non-adjacent ranges.
pub(crate) fn merge_ranges(mut ranges: Vec<Range<u64>>) -> Vec<Range<u64>> {
    ranges.retain(|r| r.start < r.end);
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<u64>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match out.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

pub(crate) fn new_id() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

pub(crate) fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

//! Commit, checkout, diff and merge.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;

use super::link::SampleInput;
use super::snapshot::Snapshot;
use super::state::{CommitDiff, NodeState};
use super::store::{tensor_key, Store};
use super::write::Working;
use super::{valid_branch_name, Dataset, Head};
use crate::error::{Error, Result};
use crate::storage::StorageKey;
use crate::version::{
    merge_ranges, new_id, now_millis, CommitInfo, CommitNode, DiffReport, MergePolicy, TensorDiff,
    VersionTree,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckoutOptions {
    /// Create `target` as a new branch forked at the current commit.
    pub create: bool,
    /// Proceed even if the current branch has uncommitted changes. They stay
    /// on that branch's working node.
    pub force: bool,
}

/// Node id named by a branch (its working node), a commit id or a unique id prefix.
pub(crate) fn resolve_target(tree: &VersionTree, target: &str) -> Result<String> {
    if let Some(head) = tree.branches.get(target) {
        return Ok(head.clone());
    }
    tree.resolve_id(target)
        .ok_or_else(|| Error::UnknownTarget(target.to_string()))
}

type Changes = BTreeMap<String, (Vec<Range<u64>>, BTreeSet<u64>)>;

/// Commit diffs accumulated from `from` up to, but excluding, `stop`.
fn accumulate(store: &Store, tree: &VersionTree, from: &str, stop: &str) -> Result<Changes> {
    let mut out = Changes::new();
    for node in tree.ancestors(from)? {
        if node == stop {
            break;
        }
        for tensor in NodeState::tensor_names(store, &node)? {
            let d: CommitDiff = store.get_json(&tensor_key(&node, &tensor, "commit_diff.json"))?;
            let entry = out.entry(tensor).or_default();
            entry.0.extend(d.added);
            entry.1.extend(d.updated);
        }
    }
    for entry in out.values_mut() {
        entry.0 = merge_ranges(std::mem::take(&mut entry.0));
    }
    Ok(out)
}

impl Dataset {
    pub fn commit(&mut self, message: &str) -> Result<String> {
        self.commit_with(message, false)
    }

    /// Freezes the working node as a commit and starts a new working node on
    /// top of it. Returns the id of the new commit.
    pub fn commit_with(&mut self, message: &str, allow_empty: bool) -> Result<String> {
        let store = self.store.clone();
        let w = self.working()?;
        if !allow_empty && !w.is_dirty() {
            return Err(Error::NothingToCommit);
        }
        w.close_all(&store)?;
        w.unsaved = true;
        w.flush(&store)?;
        let committed = w.node.id.clone();
        let child = w.node.child(new_id());
        child.save(&store)?;
        let branch = w.branch.clone();
        store.update_tree(|t| {
            let node = t.commits.get_mut(&committed).ok_or_else(|| Error::UnknownCommit(committed.clone()))?;
            node.committed = true;
            node.message = Some(message.to_string());
            node.timestamp = Some(now_millis());
            t.commits.insert(
                child.id.clone(),
                CommitInfo {
                    parent: Some(committed.clone()),
                    branch: branch.clone(),
                    message: None,
                    timestamp: None,
                    committed: false,
                },
            );
            t.branches.insert(branch.clone(), child.id.clone());
            Ok(())
        })?;
        w.parent_tensors = child.tensors.keys().cloned().collect();
        w.node = child;
        Ok(committed)
    }

    pub fn checkout(&mut self, target: &str) -> Result<()> {
        self.checkout_with(target, CheckoutOptions::default())
    }

    /// Creates branch `name` at the current commit and switches to it.
    pub fn create_branch(&mut self, name: &str) -> Result<()> {
        self.checkout_with(
            name,
            CheckoutOptions {
                create: true,
                force: false,
            },
        )
    }

    /// Switches to a branch (writable) or a commit (read-only).
    pub fn checkout_with(&mut self, target: &str, opts: CheckoutOptions) -> Result<()> {
        let store = self.store.clone();
        let tree = store.load_tree()?;
        if let Head::Branch(w) = &self.head {
            let leaving = opts.create || w.branch != target;
            if leaving && w.is_dirty() && !opts.force {
                return Err(Error::DirtyState {
                    branch: w.branch.clone(),
                });
            }
        }
        if opts.create {
            if !valid_branch_name(target) {
                return Err(Error::InvalidBranchName(target.to_string()));
            }
            if tree.branches.contains_key(target) {
                return Err(Error::BranchExists(target.to_string()));
            }
            let fork = match &self.head {
                Head::Branch(w) => tree.last_commit(&w.branch)?,
                Head::Detached(n) => n.id.clone(),
            };
            self.flush()?;
            self.switch_lock(Some(target))?;
            let base = NodeState::load(&store, &fork, tree.ancestors(&fork)?)?;
            let node = base.child(new_id());
            node.save(&store)?;
            store.update_tree(|t| {
                t.commits.insert(
                    node.id.clone(),
                    CommitInfo {
                        parent: Some(fork.clone()),
                        branch: target.to_string(),
                        message: None,
                        timestamp: None,
                        committed: false,
                    },
                );
                t.branches.insert(target.to_string(), node.id.clone());
                Ok(())
            })?;
            self.head = Head::Branch(Working {
                branch: target.to_string(),
                parent_tensors: node.tensors.keys().cloned().collect(),
                node,
                pending: Default::default(),
                unsaved: false,
                dense: false,
            });
            return Ok(());
        }
        if tree.branches.contains_key(target) {
            if matches!(&self.head, Head::Branch(w) if w.branch == target) {
                return Ok(());
            }
            self.flush()?;
            self.switch_lock(Some(target))?;
            self.head = Head::Branch(Self::load_working(&store, &tree, target)?);
            return Ok(());
        }
        let id = tree
            .resolve_id(target)
            .ok_or_else(|| Error::UnknownTarget(target.to_string()))?;
        let info = tree.node(&id)?;
        if !info.committed {
            let branch = info.branch.clone();
            return self.checkout_with(&branch, opts);
        }
        self.flush()?;
        self.switch_lock(None)?;
        let node = NodeState::load(&store, &id, tree.ancestors(&id)?)?;
        self.head = Head::Detached(Arc::new(node));
        Ok(())
    }

    /// Branch checked out for writing, if any.
    pub fn current_branch(&self) -> Option<&str> {
        match &self.head {
            Head::Branch(w) => Some(&w.branch),
            Head::Detached(_) => None,
        }
    }

    /// Id of the node reads are served from: a branch's working node or a detached commit.
    pub fn current_node(&self) -> &str {
        &self.node().id
    }

    /// Most recent commit visible from the current position.
    pub fn head_commit(&self) -> Result<String> {
        match &self.head {
            Head::Branch(w) => self.store.load_tree()?.last_commit(&w.branch),
            Head::Detached(n) => Ok(n.id.clone()),
        }
    }

    pub fn is_dirty(&self) -> bool {
        match &self.head {
            Head::Branch(w) => w.is_dirty(),
            Head::Detached(_) => false,
        }
    }

    pub fn branches(&self) -> Result<Vec<String>> {
        Ok(self.store.load_tree()?.branches.keys().cloned().collect())
    }

    pub fn version_tree(&self) -> Result<VersionTree> {
        self.store.load_tree()
    }

    /// Commits reachable from the current node, newest first.
    pub fn log(&self) -> Result<Vec<CommitNode>> {
        self.store.load_tree()?.log(self.current_node())
    }

    /// Read handle on a branch head or commit. The current branch is flushed first.
    pub fn snapshot_at(&mut self, version: &str) -> Result<Snapshot> {
        let tree = self.store.load_tree()?;
        let id = resolve_target(&tree, version)?;
        if id == self.current_node() {
            return self.snapshot();
        }
        let node = NodeState::load(&self.store, &id, tree.ancestors(&id)?)?;
        Ok(Snapshot::new(self.store.clone(), Arc::new(node)))
    }

    /// Key of the copy of `chunk_name` visible at `version`.
    pub fn resolve_chunk(&mut self, tensor: &str, chunk_name: &str, version: &str) -> Result<StorageKey> {
        self.snapshot_at(version)?.resolve_chunk(tensor, chunk_name)
    }

    /// Changes on each side since the common ancestor of `a` and `b`,
    /// computed from commit-diff records only.
    pub fn diff(&mut self, a: &str, b: &str) -> Result<DiffReport> {
        self.flush()?;
        let tree = self.store.load_tree()?;
        let a = resolve_target(&tree, a).map_err(|_| Error::UnknownCommit(a.to_string()))?;
        let b = resolve_target(&tree, b).map_err(|_| Error::UnknownCommit(b.to_string()))?;
        let lca = tree.common_ancestor(&a, &b)?;
        let side_a = accumulate(&self.store, &tree, &a, &lca)?;
        let side_b = accumulate(&self.store, &tree, &b, &lca)?;
        let mut report = DiffReport {
            common_ancestor: lca,
            tensors: BTreeMap::new(),
        };
        for (name, (added, updated)) in side_a {
            let d = report.tensors.entry(name).or_default();
            d.added_a = added;
            d.updated_a = updated;
        }
        for (name, (added, updated)) in side_b {
            let d: &mut TensorDiff = report.tensors.entry(name).or_default();
            d.added_b = added;
            d.updated_b = updated;
        }
        report.tensors.retain(|_, d| !d.is_empty());
        Ok(report)
    }

    /// Brings the latest commit of `source` into the current branch and commits.
    ///
    /// Samples are matched by sample id. Samples added on `source` are
    /// appended; samples updated only on `source` are overwritten; samples
    /// updated on both sides are resolved by `policy`.
    pub fn merge(&mut self, source: &str, policy: MergePolicy) -> Result<String> {
        let store = self.store.clone();
        self.flush()?;
        let tree = store.load_tree()?;
        let ours_branch = self.working()?.branch.clone();
        if !tree.branches.contains_key(source) || source == ours_branch {
            return Err(Error::UnknownBranch(source.to_string()));
        }
        let theirs_id = tree.last_commit(source)?;
        let ours_id = self.current_node().to_string();
        let lca = tree.common_ancestor(&ours_id, &theirs_id)?;
        let theirs = Snapshot::new(
            store.clone(),
            Arc::new(NodeState::load(&store, &theirs_id, tree.ancestors(&theirs_id)?)?),
        );

        let ours_schemas = self.schemas();
        let mut theirs_schemas = theirs.schemas();
        let strip = |mut v: Vec<crate::format::HtypeSchema>| {
            v.sort_by(|a, b| a.name.cmp(&b.name));
            v
        };
        theirs_schemas = strip(theirs_schemas);
        if strip(ours_schemas) != theirs_schemas {
            return Err(Error::SchemaMismatch(format!("`{ours_branch}` and `{source}` differ")));
        }

        let their_changes = accumulate(&store, &tree, &theirs_id, &lca)?;
        let our_changes = accumulate(&store, &tree, &ours_id, &lca)?;

        struct Plan {
            tensor: String,
            updates: Vec<(u64, u64, u64)>,
            appends: Vec<(u64, u64)>,
        }
        let mut plans = Vec::new();
        let mut conflicts = BTreeSet::new();
        for tensor in theirs.tensor_names() {
            let our_ids = self.sample_ids(&tensor)?;
            let our_index: HashMap<u64, u64> =
                our_ids.iter().enumerate().map(|(i, &id)| (id, i as u64)).collect();
            let their_ids = theirs.sample_ids(&tensor)?;
            let our_updated: HashSet<u64> = our_changes
                .get(&tensor)
                .map(|(_, u)| u.iter().filter_map(|&i| our_ids.get(i as usize).copied()).collect())
                .unwrap_or_default();
            let (added, updated) = their_changes.get(&tensor).cloned().unwrap_or_default();
            let mut plan = Plan {
                tensor: tensor.clone(),
                updates: Vec::new(),
                appends: Vec::new(),
            };
            for r in added {
                for i in r {
                    let id = their_ids[i as usize];
                    if !our_index.contains_key(&id) {
                        plan.appends.push((i, id));
                    }
                }
            }
            for i in updated {
                let Some(&id) = their_ids.get(i as usize) else { continue };
                let Some(&ours) = our_index.get(&id) else { continue };
                if our_updated.contains(&id) {
                    conflicts.insert(id);
                }
                plan.updates.push((ours, i, id));
            }
            plans.push(plan);
        }
        if policy == MergePolicy::FailOnConflict && !conflicts.is_empty() {
            return Err(Error::MergeConflict {
                ids: conflicts.into_iter().collect(),
            });
        }

        let fetch = |tensor: &str, i: u64| -> Result<SampleInput> {
            if theirs.schema(tensor)?.is_link() && !theirs.shape(tensor, i)?.iter().all(|&d| d == 0) {
                Ok(SampleInput::Link(theirs.read_link(tensor, i)?))
            } else {
                Ok(SampleInput::Array(theirs.read(tensor, i)?))
            }
        };
        for plan in plans {
            for (ours, theirs_i, id) in plan.updates {
                if conflicts.contains(&id) && policy == MergePolicy::Ours {
                    continue;
                }
                let sample = fetch(&plan.tensor, theirs_i)?;
                self.update(&plan.tensor, ours, sample)?;
            }
            for (theirs_i, id) in plan.appends {
                let sample = fetch(&plan.tensor, theirs_i)?;
                self.append_with_id(&plan.tensor, sample, id)?;
            }
        }
        self.commit_with(&format!("merge {source} into {ours_branch}"), true)
    }
}

//! Query execution: computes the row order of a view.
//!
//! Only the WHERE, ORDER BY and ARRANGE BY expressions are evaluated here.
//! Projections are evaluated when rows of the resulting view are read.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::Range;

use indexmap::IndexMap;

use super::plan::{QueryPlan, RowSource};
use super::value::{self, GroupKey, Value};
use super::TqlError;
use crate::array::DynArray;
use crate::dataset::Snapshot;
use crate::error::{Error, Result};
use crate::view::DatasetView;

const BATCH: usize = 256;

/// Reads one row of a snapshot, caching whole samples.
pub struct SnapshotRow<'a> {
    snap: &'a Snapshot,
    row: u64,
    cache: RefCell<HashMap<String, DynArray>>,
}

impl<'a> SnapshotRow<'a> {
    pub fn new(snap: &'a Snapshot, row: u64) -> Self {
        SnapshotRow {
            snap,
            row,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl RowSource for SnapshotRow<'_> {
    fn sample(&self, tensor: &str) -> Result<DynArray> {
        if let Some(a) = self.cache.borrow().get(tensor) {
            return Ok(a.clone());
        }
        let a = self.snap.read(tensor, self.row)?;
        self.cache.borrow_mut().insert(tensor.to_string(), a.clone());
        Ok(a)
    }

    fn shape(&self, tensor: &str) -> Result<Vec<usize>> {
        match self.cache.borrow().get(tensor) {
            Some(a) => Ok(a.shape().to_vec()),
            None => self.snap.shape(tensor, self.row),
        }
    }

    fn region(&self, tensor: &str, region: &[Range<usize>]) -> Result<DynArray> {
        match self.cache.borrow().get(tensor) {
            Some(a) => Ok(a.slice_region(region)),
            None => self.snap.read_region(tensor, self.row, region),
        }
    }
}

/// Attaches the row number to expression errors.
pub(crate) fn at_row(row: u64, e: Error) -> Error {
    match e {
        Error::Query(TqlError::RuntimeEval { .. }) => e,
        Error::Query(q) => Error::Query(TqlError::RuntimeEval {
            row,
            message: q.to_string(),
        }),
        other => other,
    }
}

pub(crate) fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// Applies `f` to every row on up to `workers` threads, keeping input order.
/// The error reported is the one of the lowest failing row.
pub(crate) fn par_rows<T: Send>(
    rows: &[u64],
    workers: usize,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, rows.len().div_ceil(BATCH).max(1));
    if workers == 1 {
        return rows.iter().map(|&r| f(r)).collect();
    }
    let per = rows.len().div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(per)
            .map(|part| s.spawn(|| part.iter().map(|&r| f(r)).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("query worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(rows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

struct Keyed {
    row: u64,
    order: Option<Value>,
    group: Option<GroupKey>,
}

fn order_cmp(a: &Value, b: &Value, descending: bool) -> Ordering {
    match (a, b) {
        (Value::Null, Value::Null) => Ordering::Equal,
        (Value::Null, _) => Ordering::Greater,
        (_, Value::Null) => Ordering::Less,
        _ if descending => value::sort_cmp(b, a),
        _ => value::sort_cmp(a, b),
    }
}

/// Runs `plan` against `snap` using the default worker count.
pub fn execute(plan: &QueryPlan, snap: &Snapshot) -> Result<DatasetView> {
    execute_with(plan, snap, default_workers())
}

pub fn execute_with(plan: &QueryPlan, snap: &Snapshot, workers: usize) -> Result<DatasetView> {
    let all: Vec<u64> = (0..snap.num_rows()).collect();
    let keyed = par_rows(&all, workers, |row| {
        let src = SnapshotRow::new(snap, row);
        let eval = |n: &super::plan::Node| n.eval(&src).map_err(|e| at_row(row, e));
        if let Some(f) = &plan.filter {
            if !eval(f)?.truthy().map_err(|e| at_row(row, e.into()))? {
                return Ok(None);
            }
        }
        let order = match &plan.order {
            Some((n, _)) => Some(eval(n)?.to_scalar().map_err(|e| at_row(row, e.into()))?),
            None => None,
        };
        let group = match &plan.arrange {
            Some(n) => Some(value::group_key(&eval(n)?)),
            None => None,
        };
        Ok(Some(Keyed { row, order, group }))
    })?;
    let mut kept: Vec<Keyed> = keyed.into_iter().flatten().collect();
    if let Some((_, desc)) = &plan.order {
        kept.sort_by(|a, b| order_cmp(a.order.as_ref().unwrap(), b.order.as_ref().unwrap(), *desc));
    }
    let (mut rows, mut bounds) = if plan.arrange.is_some() {
        let mut groups: IndexMap<GroupKey, Vec<u64>> = IndexMap::new();
        for k in kept {
            groups.entry(k.group.unwrap()).or_default().push(k.row);
        }
        let mut rows = Vec::new();
        let mut bounds = Vec::new();
        for (_, g) in groups {
            bounds.push(rows.len());
            rows.extend(g);
        }
        (rows, Some(bounds))
    } else {
        (kept.into_iter().map(|k| k.row).collect::<Vec<_>>(), None)
    };
    if let Some(limit) = plan.limit {
        rows.truncate(limit.min(usize::MAX as u64) as usize);
        if let Some(b) = &mut bounds {
            b.retain(|&s| s < rows.len());
        }
    }
    Ok(DatasetView::from_parts(
        snap.clone(),
        Some(plan.query.to_string()),
        rows,
        plan.columns.clone(),
        bounds,
    ))
}

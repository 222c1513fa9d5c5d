//! Streaming loader: parallel fetch and decode, shuffling, collation and a
//! bound on the bytes held in flight.
//!
//! ```text
//! scheduler -> fetch pool -> decode pool (smallest first) -> reorder -> shuffle -> collate -> consumer
//! ```
//!
//! The scheduler reserves each unit's estimated bytes from a shared budget
//! before handing it to the fetch pool. Reservations are taken in schedule
//! order and released when the consumer receives the batch holding the data.

mod pipeline;
pub mod schedule;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::array::DynArray;
use crate::dataset::Snapshot;
use crate::error::{Error, Result};
use crate::view::DatasetView;

pub use pipeline::Stream;
pub use schedule::{coalesce, plan_fetch_order, FetchSchedule, FetchUnit, Item, UnitSource};

/// What to do with a sample whose transform fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorPolicy {
    #[default]
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    /// Capacity of the shuffle buffer.
    pub shuffle_buffer_bytes: u64,
    pub num_fetch_workers: usize,
    pub num_decode_workers: usize,
    /// Collated batches buffered ahead of the consumer.
    pub prefetch_batches: usize,
    pub drop_last: bool,
    /// `None` draws a random seed.
    pub seed: Option<u64>,
    /// Base tensors to stream. `None` streams the view's columns.
    pub tensors: Option<Vec<String>>,
    /// Deliver units in schedule order. Without shuffling this is the view order.
    pub ordered_delivery: bool,
    /// Stack equally shaped samples into one array per tensor.
    pub collate: bool,
    /// Bound on bytes held in flight. `None` derives it from the other settings.
    pub max_inflight_bytes: Option<u64>,
    pub on_transform_error: ErrorPolicy,
    /// Store an empty sample when a link cannot be fetched.
    pub skip_unresolved_links: bool,
    /// Attempts per storage request.
    pub max_attempts: u32,
    /// Delay before the first retry; doubled after each further failure.
    pub retry_backoff: Duration,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        LoaderConfig {
            batch_size: 1,
            shuffle: false,
            shuffle_buffer_bytes: 64 << 20,
            num_fetch_workers: 4,
            num_decode_workers: 2,
            prefetch_batches: 4,
            drop_last: false,
            seed: None,
            tensors: None,
            ordered_delivery: true,
            collate: true,
            max_inflight_bytes: None,
            on_transform_error: ErrorPolicy::Fail,
            skip_unresolved_links: false,
            max_attempts: 3,
            retry_backoff: Duration::from_millis(10),
        }
    }
}

impl LoaderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.num_fetch_workers == 0 || self.num_decode_workers == 0 {
            return bad("worker counts must be at least 1");
        }
        if self.prefetch_batches == 0 {
            return bad("prefetch_batches must be at least 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }
}

/// One row as it moves through the pipeline and into user transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position in the view.
    pub position: usize,
    /// Row of the underlying dataset.
    pub row: u64,
    pub sample_id: u64,
    pub tensors: BTreeMap<String, DynArray>,
}

impl Sample {
    pub fn nbytes(&self) -> u64 {
        self.tensors.values().map(|a| a.nbytes() as u64).sum()
    }
}

/// Per-sample function applied by the decode workers.
pub type Transform = Arc<dyn Fn(&mut Sample) -> std::result::Result<(), String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum BatchColumn {
    Stacked(DynArray),
    Ragged(Vec<DynArray>),
}

impl BatchColumn {
    pub fn len(&self) -> usize {
        match self {
            BatchColumn::Stacked(a) => a.shape()[0],
            BatchColumn::Ragged(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `k`-th sample of the batch.
    pub fn get(&self, k: usize) -> DynArray {
        match self {
            BatchColumn::Stacked(a) => a.index_axis(0, k),
            BatchColumn::Ragged(v) => v[k].clone(),
        }
    }

    pub fn nbytes(&self) -> u64 {
        match self {
            BatchColumn::Stacked(a) => a.nbytes() as u64,
            BatchColumn::Ragged(v) => v.iter().map(|a| a.nbytes() as u64).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub positions: Vec<usize>,
    pub rows: Vec<u64>,
    pub sample_ids: Vec<u64>,
    pub tensors: BTreeMap<String, BatchColumn>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn nbytes(&self) -> u64 {
        self.tensors.values().map(BatchColumn::nbytes).sum()
    }

    /// All tensors of the `k`-th sample.
    pub fn sample(&self, k: usize) -> BTreeMap<String, DynArray> {
        self.tensors.iter().map(|(n, c)| (n.clone(), c.get(k))).collect()
    }

    pub(crate) fn collate(samples: Vec<Sample>, stack: bool) -> Batch {
        let mut names: Vec<String> = Vec::new();
        if let Some(s) = samples.first() {
            names = s.tensors.keys().cloned().collect();
        }
        let positions = samples.iter().map(|s| s.position).collect();
        let rows = samples.iter().map(|s| s.row).collect();
        let sample_ids = samples.iter().map(|s| s.sample_id).collect();
        let mut columns: BTreeMap<String, Vec<DynArray>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
        for s in samples {
            for (n, a) in s.tensors {
                columns.entry(n).or_default().push(a);
            }
        }
        let tensors = columns
            .into_iter()
            .map(|(n, v)| {
                let col = if stack {
                    let refs: Vec<&DynArray> = v.iter().collect();
                    match DynArray::stack(&refs) {
                        Some(a) => BatchColumn::Stacked(a),
                        None => BatchColumn::Ragged(v),
                    }
                } else {
                    BatchColumn::Ragged(v)
                };
                (n, col)
            })
            .collect();
        Batch {
            positions,
            rows,
            sample_ids,
            tensors,
        }
    }
}

/// Counters of one stream.
#[derive(Debug, Default)]
pub struct LoaderStats {
    pub fetch_calls: AtomicU64,
    pub bytes_fetched: AtomicU64,
    pub retries: AtomicU64,
    pub skipped: AtomicU64,
    pub samples: AtomicU64,
    pub peak_inflight_bytes: AtomicU64,
    pub inflight_bound: AtomicU64,
}

/// Plain copy of [`LoaderStats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub fetch_calls: u64,
    pub bytes_fetched: u64,
    pub retries: u64,
    pub skipped: u64,
    pub samples: u64,
    pub peak_inflight_bytes: u64,
    pub inflight_bound: u64,
}

impl LoaderStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            fetch_calls: g(&self.fetch_calls),
            bytes_fetched: g(&self.bytes_fetched),
            retries: g(&self.retries),
            skipped: g(&self.skipped),
            samples: g(&self.samples),
            peak_inflight_bytes: g(&self.peak_inflight_bytes),
            inflight_bound: g(&self.inflight_bound),
        }
    }
}

/// Streams one epoch of `view`.
pub fn stream(view: &DatasetView, config: LoaderConfig, transform: Option<Transform>) -> Result<Stream> {
    pipeline::start(view.clone(), config, transform)
}

/// Streams every row of a snapshot.
pub fn stream_snapshot(snap: &Snapshot, config: LoaderConfig, transform: Option<Transform>) -> Result<Stream> {
    stream(&DatasetView::identity(snap), config, transform)
}

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use bytes::Bytes;
use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{self, FetchUnit, UnitSource};
use super::{Batch, ErrorPolicy, LoaderConfig, LoaderStats, Sample, StatsSnapshot, Transform};
use crate::array::DynArray;
use crate::dataset::Snapshot;
use crate::error::{Error, Result};
use crate::format::{decode_stored, ChunkHeader, ChunkView, HeaderRead};
use crate::scalar::Dtype;
use crate::storage::{ByteRange, StorageError, StorageKey};
use crate::tql::plan::Node;
use crate::tql::Column;
use crate::view::{DatasetView, MemRow};

/// Byte budget shared by every stage.
struct Budget {
    used: Mutex<(u64, bool)>,
    cv: Condvar,
    limit: u64,
    peak: AtomicU64,
}

impl Budget {
    fn new(limit: u64) -> Self {
        Budget {
            used: Mutex::new((0, false)),
            cv: Condvar::new(),
            limit,
            peak: AtomicU64::new(0),
        }
    }

    /// Waits until `n` bytes fit. A request larger than the whole budget is
    /// granted once nothing else is held. Returns false once closed.
    fn acquire(&self, n: u64) -> bool {
        let mut g = self.used.lock();
        while !g.1 && g.0 > 0 && g.0 + n > self.limit {
            self.cv.wait(&mut g);
        }
        if g.1 {
            return false;
        }
        g.0 += n;
        self.peak.fetch_max(g.0, Ordering::Relaxed);
        true
    }

    fn release(&self, n: u64) {
        let mut g = self.used.lock();
        g.0 = g.0.saturating_sub(n);
        self.cv.notify_all();
    }

    /// Replaces an estimate with the actual size.
    fn adjust(&self, from: u64, to: u64) {
        if to >= from {
            let mut g = self.used.lock();
            g.0 += to - from;
            self.peak.fetch_max(g.0, Ordering::Relaxed);
        } else {
            self.release(from - to);
        }
    }

    fn close(&self) {
        self.used.lock().1 = true;
        self.cv.notify_all();
    }
}

struct Ctx {
    snap: Snapshot,
    config: LoaderConfig,
    tensors: Vec<String>,
    primary: Option<String>,
    /// Columns evaluated per sample instead of passing base tensors through.
    project: Option<Vec<Column>>,
    transform: Option<Transform>,
    stats: Arc<LoaderStats>,
    budget: Budget,
    stop: AtomicBool,
    headers: Mutex<HashMap<String, Arc<ChunkHeader>>>,
}

struct Task {
    seq: usize,
    unit: FetchUnit,
    reserved: u64,
}

enum Primary {
    Whole(Arc<ChunkView>),
    Ranged {
        header: Arc<ChunkHeader>,
        /// Absolute start offset and bytes of each coalesced range.
        parts: Vec<(u64, Bytes)>,
    },
    None,
}

struct Fetched {
    task: Task,
    primary: Primary,
    /// Per item: tensors read outside the unit's chunk.
    rest: Vec<BTreeMap<String, DynArray>>,
}

struct Done {
    seq: usize,
    samples: Result<Vec<(Sample, u64)>>,
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::Storage(StorageError::Io { source, .. }) => source.kind() != std::io::ErrorKind::NotFound,
        _ => false,
    }
}

impl Ctx {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    fn retry<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.config.retry_backoff;
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if retryable(&e) && attempt < self.config.max_attempts && !self.stopped() => {
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        let provider = self.snap.provider();
        let bytes = self.retry(|| Ok(provider.get(key, range)?))?;
        self.stats.fetch_calls.fetch_add(1, Ordering::Relaxed);
        self.stats.bytes_fetched.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(bytes)
    }

    fn header(&self, key: &StorageKey, samples: u32) -> Result<Option<Arc<ChunkHeader>>> {
        if let Some(h) = self.headers.lock().get(key.as_str()) {
            return Ok(Some(h.clone()));
        }
        let mut want = 64 + 24 * samples as u64;
        loop {
            let prefix = match self.get(key, Some(ByteRange::new(0, want)?)) {
                Ok(b) => b,
                Err(Error::Storage(StorageError::RangeOutOfBounds { .. })) => return Ok(None),
                Err(e) => return Err(e),
            };
            match ChunkHeader::read(&prefix)? {
                HeaderRead::Complete(h) => {
                    let h = Arc::new(h);
                    self.headers.lock().insert(key.as_str().to_string(), h.clone());
                    return Ok(Some(h));
                }
                HeaderRead::NeedBytes(n) => want = (n as u64).max(want * 2),
            }
        }
    }

    fn read_other(&self, tensor: &str, row: u64) -> Result<DynArray> {
        let tv = self.snap.tensor_version(tensor)?;
        let schema = &tv.meta.schema;
        if schema.is_link() || tv.tiles.entries.contains_key(&row) {
            return match self.retry(|| self.snap.read(tensor, row)) {
                Err(Error::LinkResolveFailure { .. }) if self.config.skip_unresolved_links => {
                    Ok(DynArray::empty(Dtype::Uint8, 1))
                }
                other => other,
            };
        }
        let reader = self.snap.reader(tensor)?;
        let (id, local) = tv.chunks.lookup(row)?;
        let key = reader.chunk_key(id)?;
        let store = self.snap.store();
        let (view, fetched) = self.retry(|| store.chunk_traced(&key))?;
        if fetched {
            self.stats.fetch_calls.fetch_add(1, Ordering::Relaxed);
            self.stats.bytes_fetched.fetch_add(view.bytes().len() as u64, Ordering::Relaxed);
        }
        Ok(view.sample(local as usize, schema.dtype)?)
    }

    fn fetch(&self, task: Task) -> Result<Fetched> {
        let primary = match (&task.unit.source, &self.primary) {
            (
                UnitSource::Chunk {
                    key,
                    ranges,
                    whole,
                    samples,
                    ..
                },
                Some(p),
            ) if !self.snap.schema(p)?.is_link() => {
                let header = if *whole { None } else { self.header(key, *samples)? };
                match header {
                    None => Primary::Whole(Arc::new(ChunkView::new(self.get(key, None)?)?)),
                    Some(header) => {
                        let mut parts = Vec::with_capacity(ranges.len());
                        for r in ranges {
                            let start = header.sample_range(r.start as usize)?.0;
                            let end = header.sample_range(r.end as usize - 1)?.1;
                            let bytes = if end > start {
                                self.get(key, Some(ByteRange::new(start, end)?))?
                            } else {
                                Bytes::new()
                            };
                            parts.push((start, bytes));
                        }
                        Primary::Ranged { header, parts }
                    }
                }
            }
            _ => Primary::None,
        };
        let decode_here = |t: &String| match (&primary, &self.primary) {
            (Primary::None, _) => false,
            (_, Some(p)) => p == t,
            _ => false,
        };
        let mut rest = Vec::with_capacity(task.unit.items.len());
        for item in &task.unit.items {
            let mut m = BTreeMap::new();
            for t in &self.tensors {
                if !decode_here(t) {
                    m.insert(t.clone(), self.read_other(t, item.row)?);
                }
            }
            rest.push(m);
        }
        Ok(Fetched { task, primary, rest })
    }

    fn decode(&self, f: Fetched) -> Result<Vec<(Sample, u64)>> {
        let Fetched { task, primary, rest } = f;
        let dtype = match &self.primary {
            Some(p) => self.snap.schema(p)?.dtype,
            None => Dtype::Uint8,
        };
        let ranges: &[Range<u32>] = match &task.unit.source {
            UnitSource::Chunk { ranges, .. } => ranges,
            _ => &[],
        };
        let mut out = Vec::with_capacity(task.unit.items.len());
        let mut kept_bytes = 0;
        for (item, mut tensors) in task.unit.items.iter().zip(rest) {
            let local = item.local as usize;
            let decoded = match &primary {
                Primary::Whole(view) => Some(view.sample(local, dtype)?),
                Primary::Ranged { header, parts } => {
                    let k = ranges.partition_point(|r| r.end <= item.local);
                    let (base, bytes) = &parts[k];
                    let (s, e) = header.sample_range(local)?;
                    let stored = &bytes[(s - base) as usize..(e - base) as usize];
                    Some(decode_stored(header.compression, dtype, &header.shape(local)?, stored)?)
                }
                Primary::None => None,
            };
            if let (Some(a), Some(p)) = (decoded, &self.primary) {
                tensors.insert(p.clone(), a);
            }
            if let Some(cols) = &self.project {
                let src = MemRow(&tensors);
                let mut projected = BTreeMap::new();
                for c in cols {
                    let v = c.eval(&src).map_err(|e| crate::tql::exec::at_row(item.row, e))?;
                    let a = v.to_sample().unwrap_or_else(|| DynArray::empty(Dtype::Float64, 1));
                    projected.insert(c.name.clone(), a);
                }
                tensors = projected;
            }
            let sample_id = match &self.primary {
                Some(p) => self.snap.sample_id(p, item.row)?,
                None => item.row,
            };
            let mut sample = Sample {
                position: item.pos,
                row: item.row,
                sample_id,
                tensors,
            };
            if let Some(t) = &self.transform {
                if let Err(reason) = t(&mut sample) {
                    match self.config.on_transform_error {
                        ErrorPolicy::Fail => return Err(Error::Transform { row: item.row, reason }),
                        ErrorPolicy::Skip => {
                            self.stats.skipped.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    }
                }
            }
            let n = sample.nbytes();
            kept_bytes += n;
            out.push((sample, n));
        }
        self.budget.adjust(task.reserved, kept_bytes);
        Ok(out)
    }
}

/// Fetched units waiting for a decode worker, smallest first.
struct DecodeQueue {
    state: Mutex<DecodeState>,
    cv: Condvar,
}

#[derive(Default)]
struct DecodeState {
    heap: BinaryHeap<Reverse<(u64, usize)>>,
    items: HashMap<usize, Result<Fetched>>,
    fetchers_left: usize,
}

impl DecodeQueue {
    fn push(&self, seq: usize, size: u64, f: Result<Fetched>) {
        let mut g = self.state.lock();
        g.heap.push(Reverse((size, seq)));
        g.items.insert(seq, f);
        self.cv.notify_one();
    }

    fn fetcher_done(&self) {
        let mut g = self.state.lock();
        g.fetchers_left -= 1;
        self.cv.notify_all();
    }

    fn pop(&self, ctx: &Ctx) -> Option<(usize, Result<Fetched>)> {
        let mut g = self.state.lock();
        loop {
            if ctx.stopped() {
                return None;
            }
            if let Some(Reverse((_, seq))) = g.heap.pop() {
                let f = g.items.remove(&seq).expect("queued");
                return Some((seq, f));
            }
            if g.fetchers_left == 0 {
                return None;
            }
            self.cv.wait(&mut g);
        }
    }
}

/// Reservoir of samples emitted in seeded random order.
struct ShuffleBuffer {
    items: Vec<(Sample, u64)>,
    bytes: u64,
    cap: u64,
    rng: ChaCha8Rng,
}

impl ShuffleBuffer {
    fn push(&mut self, s: (Sample, u64), out: &mut impl FnMut((Sample, u64)) -> bool) -> bool {
        self.bytes += s.1;
        self.items.push(s);
        while self.bytes > self.cap && !self.items.is_empty() {
            if !out(self.pop()) {
                return false;
            }
        }
        true
    }

    fn pop(&mut self) -> (Sample, u64) {
        let k = self.rng.gen_range(0..self.items.len());
        let s = self.items.swap_remove(k);
        self.bytes -= s.1;
        s
    }

    fn drain(&mut self, out: &mut impl FnMut((Sample, u64)) -> bool) -> bool {
        while !self.items.is_empty() {
            if !out(self.pop()) {
                return false;
            }
        }
        true
    }
}

type Output = Result<(Batch, u64)>;

/// Iterator over the batches of one epoch.
pub struct Stream {
    rx: Option<Receiver<Output>>,
    ctx: Arc<Ctx>,
    threads: Vec<JoinHandle<()>>,
    finished: bool,
    units: usize,
}

impl Stream {
    pub fn stats(&self) -> StatsSnapshot {
        let mut s = self.ctx.stats.snapshot();
        s.peak_inflight_bytes = self.ctx.budget.peak.load(Ordering::Relaxed);
        s.inflight_bound = self.ctx.budget.limit;
        s
    }

    /// Number of fetch units scheduled for the epoch.
    pub fn units(&self) -> usize {
        self.units
    }

    /// Bound on bytes held in flight.
    pub fn inflight_bound(&self) -> u64 {
        self.ctx.budget.limit
    }
}

impl Iterator for Stream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        match self.rx.as_ref()?.recv() {
            Ok(Ok((batch, bytes))) => {
                self.ctx.budget.release(bytes);
                self.ctx.stats.samples.fetch_add(batch.len() as u64, Ordering::Relaxed);
                Some(Ok(batch))
            }
            Ok(Err(e)) => {
                self.finished = true;
                Some(Err(e))
            }
            Err(_) => {
                self.finished = true;
                None
            }
        }
    }
}

impl Drop for Stream {
    fn drop(&mut self) {
        self.ctx.stop.store(true, Ordering::Relaxed);
        self.ctx.budget.close();
        self.rx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn is_identity(cols: &[Column]) -> bool {
    cols.iter().all(|c| matches!(&c.node, Node::Tensor(t) if *t == c.name))
}

pub(super) fn start(view: DatasetView, config: LoaderConfig, transform: Option<Transform>) -> Result<Stream> {
    config.validate()?;
    let snap = view.snapshot().clone();
    let (tensors, project) = match &config.tensors {
        Some(ts) => {
            for t in ts {
                snap.schema(t)?;
            }
            (ts.clone(), None)
        }
        None => {
            let cols = view.columns().to_vec();
            let project = (!is_identity(&cols)).then_some(cols);
            (view.fetch_set().into_iter().collect::<Vec<_>>(), project)
        }
    };
    let seed = config.seed.unwrap_or_else(rand::random);
    let plan = schedule::plan_fetch_order(
        &view,
        &tensors,
        config.shuffle,
        seed,
        config.ordered_delivery,
    )?;
    let max_sample = plan
        .units
        .iter()
        .flat_map(|u| u.items.iter().map(|i| i.row_bytes))
        .max()
        .unwrap_or(0);
    let batch_bytes = max_sample * config.batch_size as u64;
    let shuffle_cap = if config.shuffle { config.shuffle_buffer_bytes } else { 0 };
    let workers = (config.num_fetch_workers + config.num_decode_workers) as u64;
    let (limit, units) = match config.max_inflight_bytes {
        Some(limit) => {
            let unit_cap = (limit / 4).max(2 * max_sample + 4096);
            let held = shuffle_cap + batch_bytes + max_sample;
            if held + unit_cap > limit {
                return Err(Error::InvalidConfig(format!(
                    "max_inflight_bytes {limit} cannot hold a batch ({batch_bytes} bytes), the shuffle buffer \
                     ({shuffle_cap} bytes) and a fetch unit; need at least {}",
                    (held + 2 * max_sample + 4096).max(held * 4 / 3 + 1)
                )));
            }
            (limit, schedule::split_units(plan.units, unit_cap))
        }
        None => {
            let max_unit = plan.units.iter().map(FetchUnit::estimate).max().unwrap_or(0);
            let limit = (config.prefetch_batches as u64 + 1) * batch_bytes + shuffle_cap + workers * max_unit;
            (limit.max(1), plan.units)
        }
    };
    let stats = Arc::new(LoaderStats::default());
    stats.inflight_bound.store(limit, Ordering::Relaxed);
    let ctx = Arc::new(Ctx {
        snap,
        tensors,
        primary: plan.primary,
        project,
        transform,
        stats,
        budget: Budget::new(limit),
        stop: AtomicBool::new(false),
        headers: Mutex::new(HashMap::new()),
        config,
    });
    let n_units = units.len();
    let mut threads = Vec::new();

    let (task_tx, task_rx) = unbounded::<Task>();
    threads.push({
        let ctx = ctx.clone();
        thread::spawn(move || {
            for (seq, unit) in units.into_iter().enumerate() {
                let reserved = unit.estimate();
                if !ctx.budget.acquire(reserved) || task_tx.send(Task { seq, unit, reserved }).is_err() {
                    return;
                }
            }
        })
    });

    let queue = Arc::new(DecodeQueue {
        state: Mutex::new(DecodeState {
            fetchers_left: ctx.config.num_fetch_workers,
            ..Default::default()
        }),
        cv: Condvar::new(),
    });
    for _ in 0..ctx.config.num_fetch_workers {
        let (ctx, rx, queue) = (ctx.clone(), task_rx.clone(), queue.clone());
        threads.push(thread::spawn(move || {
            while let Ok(task) = rx.recv() {
                if ctx.stopped() {
                    break;
                }
                let (seq, size) = (task.seq, task.unit.est_decoded());
                let reserved = task.reserved;
                let fetched = ctx.fetch(task);
                if fetched.is_err() {
                    ctx.budget.release(reserved);
                }
                queue.push(seq, size, fetched);
            }
            queue.fetcher_done();
        }));
    }
    drop(task_rx);

    let (done_tx, done_rx) = unbounded::<Done>();
    let live_decoders = Arc::new(AtomicUsize::new(ctx.config.num_decode_workers));
    for _ in 0..ctx.config.num_decode_workers {
        let (ctx, queue, tx, live) = (ctx.clone(), queue.clone(), done_tx.clone(), live_decoders.clone());
        threads.push(thread::spawn(move || {
            while let Some((seq, fetched)) = queue.pop(&ctx) {
                let samples = fetched.and_then(|f| {
                    let reserved = f.task.reserved;
                    ctx.decode(f).inspect_err(|_| ctx.budget.release(reserved))
                });
                if tx.send(Done { seq, samples }).is_err() {
                    break;
                }
            }
            live.fetch_sub(1, Ordering::Relaxed);
        }));
    }
    drop(done_tx);

    let (out_tx, out_rx) = bounded::<Output>(ctx.config.prefetch_batches);
    threads.push({
        let ctx = ctx.clone();
        thread::spawn(move || collect(&ctx, n_units, seed, done_rx, out_tx))
    });

    Ok(Stream {
        rx: Some(out_rx),
        ctx,
        threads,
        finished: false,
        units: n_units,
    })
}

fn collect(ctx: &Ctx, n_units: usize, seed: u64, rx: Receiver<Done>, tx: Sender<Output>) {
    let cfg = &ctx.config;
    let mut pending: Vec<(Sample, u64)> = Vec::with_capacity(cfg.batch_size);
    let mut emit = |s: (Sample, u64)| -> bool {
        pending.push(s);
        if pending.len() == cfg.batch_size {
            let bytes = pending.iter().map(|p| p.1).sum();
            let batch = Batch::collate(pending.drain(..).map(|p| p.0).collect(), cfg.collate);
            return tx.send(Ok((batch, bytes))).is_ok();
        }
        true
    };
    let mut shuffle = cfg.shuffle.then(|| ShuffleBuffer {
        items: Vec::new(),
        bytes: 0,
        cap: cfg.shuffle_buffer_bytes,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
    });
    let mut deliver = |samples: Vec<(Sample, u64)>, emit: &mut dyn FnMut((Sample, u64)) -> bool| -> bool {
        for s in samples {
            let ok = match &mut shuffle {
                Some(buf) => buf.push(s, &mut |x| emit(x)),
                None => emit(s),
            };
            if !ok {
                return false;
            }
        }
        true
    };
    let mut reorder: BTreeMap<usize, Vec<(Sample, u64)>> = BTreeMap::new();
    let mut next = 0;
    let mut received = 0;
    while received < n_units {
        let Ok(done) = rx.recv() else {
            return;
        };
        received += 1;
        let samples = match done.samples {
            Ok(s) => s,
            Err(e) => {
                let _ = tx.send(Err(e));
                ctx.stop.store(true, Ordering::Relaxed);
                ctx.budget.close();
                return;
            }
        };
        if cfg.ordered_delivery {
            reorder.insert(done.seq, samples);
            while let Some(s) = reorder.remove(&next) {
                next += 1;
                if !deliver(s, &mut emit) {
                    return;
                }
            }
        } else if !deliver(samples, &mut emit) {
            return;
        }
    }
    drop(deliver);
    if let Some(buf) = &mut shuffle {
        if !buf.drain(&mut emit) {
            return;
        }
    }
    drop(emit);
    if !pending.is_empty() {
        let bytes: u64 = pending.iter().map(|p| p.1).sum();
        if cfg.drop_last {
            ctx.budget.release(bytes);
        } else {
            let batch = Batch::collate(pending.into_iter().map(|p| p.0).collect(), cfg.collate);
            let _ = tx.send(Ok((batch, bytes)));
        }
    }
}

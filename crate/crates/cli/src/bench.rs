use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Args;
use tensorlake::dataset::Dataset;
use tensorlake::loader::{stream_snapshot, LoaderConfig};
use tensorlake::storage::{default_cache_capacity, CacheChain, LatencyModel, MemoryProvider, SharedProvider, SimulatedRemote};

use crate::{provider, CliResult};

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Fetch worker counts to compare, comma separated.
    #[arg(long, default_value = "4", value_delimiter = ',')]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long)]
    shuffle: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-request latency added to every storage read.
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    /// Tensors to stream. Defaults to all.
    #[arg(long, value_delimiter = ',')]
    tensors: Option<Vec<String>>,
}

pub fn run(version: &str, root: &Path, args: &BenchArgs) -> CliResult<()> {
    println!("config,epoch_seconds,samples_per_second,bytes_fetched,fetch_calls");
    for &workers in &args.workers {
        // A fresh cache per configuration so runs do not warm each other.
        let mut inner = provider(root)?;
        if args.latency_ms > 0 {
            inner = Arc::new(SimulatedRemote::new(
                inner,
                LatencyModel::fixed(Duration::from_millis(args.latency_ms)),
            ));
        }
        let chained: SharedProvider =
            Arc::new(CacheChain::new(Arc::new(MemoryProvider::new()), inner, default_cache_capacity()));
        let snap = Dataset::open_snapshot(chained, version, &root.display().to_string())?;
        for epoch in 0..args.epochs {
            let config = LoaderConfig {
                batch_size: args.batch_size,
                shuffle: args.shuffle,
                seed: Some(args.seed + epoch as u64),
                num_fetch_workers: workers,
                tensors: args.tensors.clone(),
                ..LoaderConfig::default()
            };
            let t = Instant::now();
            let mut stream = stream_snapshot(&snap, config, None)?;
            let mut samples = 0u64;
            for batch in stream.by_ref() {
                samples += batch?.len() as u64;
            }
            let secs = t.elapsed().as_secs_f64();
            let stats = stream.stats();
            println!(
                "workers={workers};batch={};shuffle={};latency_ms={};epoch={epoch},{secs:.4},{:.1},{},{}",
                args.batch_size,
                args.shuffle,
                args.latency_ms,
                samples as f64 / secs.max(1e-9),
                stats.bytes_fetched,
                stats.fetch_calls,
            );
        }
    }
    Ok(())
}

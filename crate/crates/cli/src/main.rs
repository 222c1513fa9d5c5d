//! `tensorlake` command-line tool.
//!
//! Every invocation is stateless: the branch to write to comes from `--branch`
//! and reads go through lock-free snapshots.

mod bench;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tensorlake::dataset::CreateOptions;
use tensorlake::format::{ChunkPolicy, Compression, Htype, HtypeSchema};
use tensorlake::storage::{FileSystemProvider, SharedProvider};
use tensorlake::version::MergePolicy;
use tensorlake::view::MaterializeOptions;
use tensorlake::{Dataset, DatasetView, Dtype, DynArray, Snapshot};

#[derive(Parser, Debug)]
#[command(name = "tensorlake", about = "Versioned tensor datasets on local storage")]
struct Cli {
    /// Dataset directory.
    #[arg(long, global = true, env = "TENSORLAKE_ROOT", default_value = ".")]
    root: PathBuf,
    /// Branch that write commands modify and reads default to.
    #[arg(long, global = true, env = "TENSORLAKE_BRANCH", default_value = "main")]
    branch: String,
    /// Read from this branch or commit instead of `--branch`.
    #[arg(long, global = true)]
    version: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Report timing on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create an empty dataset.
    Init {
        /// Comma-separated tensor specs `name:htype[:dtype][:lz][:raw=codec]`.
        #[arg(long, required = true, value_delimiter = ',')]
        tensors: Vec<String>,
        #[arg(long)]
        min_chunk_bytes: Option<u64>,
        #[arg(long)]
        max_chunk_bytes: Option<u64>,
    },
    /// Append rows.
    Ingest {
        /// Generate `--count` random images of this shape, e.g. `64x64x3`.
        #[arg(long, conflicts_with = "dir", requires = "count")]
        random: Option<String>,
        #[arg(long)]
        count: Option<u64>,
        /// Store every file of this directory unchanged into a passthrough image tensor.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// `file_name,label` lines for `--dir`.
        #[arg(long, requires = "dir")]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "images")]
        images_tensor: String,
        #[arg(long, default_value = "labels")]
        labels_tensor: String,
        #[arg(long, default_value_t = 10)]
        classes: i32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Commit afterwards with this message.
        #[arg(long)]
        commit: Option<String>,
    },
    /// Print one sample.
    Cat { tensor: String, index: u64 },
    /// Run a query and print or export the result.
    Query {
        text: String,
        /// Write each cell to a file in this directory with a manifest.
        #[arg(long)]
        export: Option<PathBuf>,
        /// Save the result as a view and print its id.
        #[arg(long)]
        save: bool,
    },
    /// Commit the branch.
    Commit {
        #[arg(short, long)]
        message: String,
        #[arg(long)]
        allow_empty: bool,
    },
    /// Resolve a branch or commit, or fork a new branch from `--branch` with `--create`.
    Checkout {
        target: String,
        #[arg(long)]
        create: bool,
    },
    /// List branches, or fork a new one from `--branch`.
    Branch { name: Option<String> },
    /// Commits reachable from the branch head or `--version`, newest first.
    Log,
    /// Changes of two versions relative to their common ancestor.
    Diff { a: String, b: String },
    /// Merge SOURCE into `--branch`.
    Merge {
        source: String,
        #[arg(long, default_value = "fail")]
        policy: String,
    },
    /// Per-tensor row, chunk and fragmentation summary.
    Stats,
    /// Rewrite chunks of fragmented tensors.
    Rechunk { tensor: Option<String> },
    /// Copy a query result, saved view or index list into a new dataset.
    Materialize {
        #[arg(long)]
        dest: PathBuf,
        #[arg(long, group = "source")]
        query: Option<String>,
        #[arg(long, group = "source")]
        view: Option<String>,
        /// Comma-separated row indices.
        #[arg(long, group = "source")]
        indices: Option<String>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Release a branch lock left by a crashed writer.
    Unlock,
    /// Time loader epochs and print CSV.
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = std::time::Instant::now();
    let result = run(&cli);
    if cli.verbose > 0 {
        eprintln!("{} in {:.3}s", cli.root.display(), started.elapsed().as_secs_f64());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind, "message": e.message } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: "Usage".into(),
            message: message.into(),
        }
    }
}

impl From<tensorlake::Error> for CliError {
    fn from(e: tensorlake::Error) -> Self {
        let debug = format!("{e:?}");
        let kind = debug.split(['(', ' ', '{']).next().unwrap_or("Error").to_string();
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<tensorlake::storage::StorageError> for CliError {
    fn from(e: tensorlake::storage::StorageError) -> Self {
        tensorlake::Error::from(e).into()
    }
}

impl From<tensorlake::format::FormatError> for CliError {
    fn from(e: tensorlake::format::FormatError) -> Self {
        tensorlake::Error::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            kind: "Io".into(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn provider(root: &Path) -> CliResult<SharedProvider> {
    Ok(Arc::new(FileSystemProvider::new(root)?))
}

fn existing(root: &Path) -> CliResult<SharedProvider> {
    if !root.is_dir() {
        return Err(tensorlake::Error::NotADataset(root.display().to_string()).into());
    }
    provider(root)
}

fn label(root: &Path) -> String {
    root.display().to_string()
}

impl Cli {
    fn read_version(&self) -> &str {
        self.version.as_deref().unwrap_or(&self.branch)
    }

    fn snapshot(&self) -> CliResult<Snapshot> {
        let p = existing(&self.root)?;
        Ok(Dataset::open_snapshot(p, self.read_version(), &label(&self.root))?)
    }

    fn writer(&self) -> CliResult<Dataset> {
        let p = existing(&self.root)?;
        Ok(Dataset::open_branch(p, &self.branch, &label(&self.root))?)
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let fmt = cli.format;
    match &cli.cmd {
        Command::Init {
            tensors,
            min_chunk_bytes,
            max_chunk_bytes,
        } => {
            let schemas = tensors.iter().map(|s| parse_tensor_spec(s)).collect::<CliResult<Vec<_>>>()?;
            let default = ChunkPolicy::default();
            let policy = ChunkPolicy::new(
                min_chunk_bytes.unwrap_or(default.min_bytes),
                max_chunk_bytes.unwrap_or(default.max_bytes),
            )?;
            std::fs::create_dir_all(&cli.root)?;
            let opts = CreateOptions {
                policy,
                label: label(&cli.root),
                ..CreateOptions::default()
            };
            let ds = Dataset::create_with(provider(&cli.root)?, schemas, opts)?;
            render::emit(fmt, &json!({ "root": label(&cli.root), "tensors": ds.tensor_names() }));
        }
        Command::Ingest {
            random,
            count,
            dir,
            labels,
            images_tensor,
            labels_tensor,
            classes,
            seed,
            commit,
        } => {
            let mut ds = cli.writer()?;
            let before = ds.num_rows();
            match (random, dir) {
                (Some(shape), None) => {
                    let shape = parse_shape(shape)?;
                    let n: usize = shape.iter().product();
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    for _ in 0..count.unwrap_or(0) {
                        let pixels: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
                        let label = rng.gen_range(0..(*classes).max(1));
                        ds.append_row([
                            (images_tensor.clone(), DynArray::from_vec(&shape, pixels)),
                            (labels_tensor.clone(), DynArray::from_vec(&[1], vec![label])),
                        ])?;
                    }
                }
                (None, Some(dir)) => ingest_dir(&mut ds, dir, labels.as_deref(), images_tensor, labels_tensor)?,
                _ => return Err(CliError::usage("pass either --random with --count, or --dir")),
            }
            let commit_id = match commit {
                Some(m) => Some(ds.commit(m)?),
                None => {
                    ds.flush()?;
                    None
                }
            };
            let rows = ds.num_rows();
            render::emit(fmt, &json!({ "appended": rows - before, "rows": rows, "commit": commit_id }));
        }
        Command::Cat { tensor, index } => {
            let snap = cli.snapshot()?;
            let a = snap.read(tensor, *index)?;
            let value = tensorlake::tql::Value::Array(a.clone());
            match fmt {
                Format::Json => render::emit(
                    fmt,
                    &json!({ "tensor": tensor, "index": index, "shape": a.shape(), "dtype": a.dtype().name(), "value": value }),
                ),
                Format::Table => println!("{} {:?}\n{}", a.dtype(), a.shape(), serde_json::to_string(&value).unwrap()),
            }
        }
        Command::Query { text, export, save } => {
            let snap = cli.snapshot()?;
            let view = snap.query(text)?;
            if *save {
                let id = view.save()?;
                eprintln!("saved view {id}");
            }
            match export {
                Some(dir) => {
                    let n = render::export(&view, dir)?;
                    render::emit(fmt, &json!({ "rows": view.len(), "files": n, "dir": dir.display().to_string() }));
                }
                None => render::print_view(fmt, &view)?,
            }
        }
        Command::Commit { message, allow_empty } => {
            let mut ds = cli.writer()?;
            let id = ds.commit_with(message, *allow_empty)?;
            render::emit(fmt, &json!({ "commit": id, "branch": cli.branch }));
        }
        Command::Checkout { target, create } => {
            if *create {
                let mut ds = cli.writer()?;
                ds.create_branch(target)?;
                render::emit(fmt, &json!({ "created": target, "from": cli.branch }));
            } else {
                let snap = Dataset::open_snapshot(existing(&cli.root)?, target, &label(&cli.root))?;
                let writable = snap.version_tree()?.branches.contains_key(target);
                render::emit(
                    fmt,
                    &json!({ "target": target, "node": snap.commit_id(), "rows": snap.num_rows(), "writable": writable }),
                );
            }
        }
        Command::Branch { name } => match name {
            Some(name) => {
                let mut ds = cli.writer()?;
                ds.create_branch(name)?;
                render::emit(fmt, &json!({ "created": name, "from": cli.branch }));
            }
            None => {
                let branches: Vec<String> = cli.snapshot()?.version_tree()?.branches.into_keys().collect();
                match fmt {
                    Format::Json => render::emit(fmt, &json!(branches)),
                    Format::Table => branches.iter().for_each(|b| println!("{b}")),
                }
            }
        },
        Command::Log => {
            let log = cli.snapshot()?.log()?;
            match fmt {
                Format::Json => render::emit(fmt, &json!(log)),
                Format::Table => {
                    for c in log {
                        println!("{} {:<12} {}", c.commit_id, c.branch, c.message);
                    }
                }
            }
        }
        Command::Diff { a, b } => {
            let mut ds = cli.writer()?;
            let report = ds.diff(a, b)?;
            render::emit(fmt, &serde_json::to_value(report).unwrap());
        }
        Command::Merge { source, policy } => {
            let policy: MergePolicy = policy.parse().map_err(CliError::usage)?;
            let mut ds = cli.writer()?;
            let id = ds.merge(source, policy)?;
            render::emit(fmt, &json!({ "merged": source, "into": cli.branch, "commit": id }));
        }
        Command::Stats => {
            let snap = cli.snapshot()?;
            render::print_stats(fmt, &snap)?;
        }
        Command::Rechunk { tensor } => {
            let mut ds = cli.writer()?;
            let names = match tensor {
                Some(t) => vec![t.clone()],
                None => ds.tensor_names(),
            };
            let mut out = serde_json::Map::new();
            for t in names {
                let stats = ds.rechunk(&t)?;
                out.insert(t, serde_json::to_value(stats).unwrap());
            }
            ds.flush()?;
            render::emit(fmt, &serde_json::Value::Object(out));
        }
        Command::Materialize {
            dest,
            query,
            view,
            indices,
            workers,
        } => {
            let snap = cli.snapshot()?;
            let v: DatasetView = match (query, view, indices) {
                (Some(q), None, None) => snap.query(q)?,
                (None, Some(id), None) => DatasetView::load(&snap, id)?,
                (None, None, Some(list)) => snap.view_from_indices(parse_indices(list)?)?,
                (None, None, None) => DatasetView::identity(&snap),
                _ => return Err(CliError::usage("pass at most one of --query, --view, --indices")),
            };
            std::fs::create_dir_all(dest)?;
            let opts = MaterializeOptions {
                label: label(dest),
                workers: *workers,
                ..MaterializeOptions::default()
            };
            let out = v.materialize(provider(dest)?, opts)?;
            render::emit(fmt, &json!({ "dest": label(dest), "rows": out.num_rows(), "tensors": out.tensor_names() }));
        }
        Command::Unlock => {
            Dataset::force_unlock(&existing(&cli.root)?, &cli.branch)?;
            render::emit(fmt, &json!({ "unlocked": cli.branch }));
        }
        Command::Bench(args) => bench::run(cli.read_version(), &cli.root, args)?,
    }
    Ok(())
}

/// Parses `name:htype[:dtype][:lz][:raw=codec]`.
fn parse_tensor_spec(spec: &str) -> CliResult<HtypeSchema> {
    let mut parts = spec.split(':');
    let name = parts.next().filter(|n| !n.is_empty());
    let htype = parts.next();
    let (Some(name), Some(htype)) = (name, htype) else {
        return Err(CliError::usage(format!("tensor spec `{spec}` must look like name:htype")));
    };
    let htype: Htype = htype.parse().map_err(CliError::usage)?;
    let mut schema = HtypeSchema::new(name, htype);
    for opt in parts {
        if opt == "lz" {
            schema = schema.with_compression(Compression::Lz);
        } else if let Some(codec) = opt.strip_prefix("raw=") {
            schema = schema.with_passthrough(codec);
        } else {
            let dtype: Dtype = opt.parse().map_err(CliError::usage)?;
            schema = schema.with_dtype(dtype);
        }
    }
    Ok(schema)
}

fn parse_shape(text: &str) -> CliResult<Vec<usize>> {
    text.split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| CliError::usage(format!("bad shape `{text}`"))))
        .collect()
}

fn parse_indices(text: &str) -> CliResult<Vec<u64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|_| CliError::usage(format!("bad index `{s}`"))))
        .collect()
}

fn ingest_dir(ds: &mut Dataset, dir: &Path, labels: Option<&Path>, images: &str, label_tensor: &str) -> CliResult<()> {
    let schema = ds.schema(images)?;
    if schema.passthrough_codec.is_none() {
        return Err(CliError::usage(format!(
            "tensor `{images}` must be declared with raw=<codec> to ingest files unchanged"
        )));
    }
    let mut label_of = std::collections::HashMap::new();
    if let Some(path) = labels {
        for (n, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (file, label) = line
                .rsplit_once(',')
                .and_then(|(f, l)| Some((f.trim().to_string(), l.trim().parse::<i32>().ok()?)))
                .ok_or_else(|| CliError::usage(format!("{}:{}: expected `name,label`", path.display(), n + 1)))?;
            label_of.insert(file, label);
        }
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    for path in files {
        let bytes = std::fs::read(&path)?;
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let mut row = vec![(images.to_string(), DynArray::from_vec(&[bytes.len()], bytes))];
        if labels.is_some() {
            let label = *label_of
                .get(&name)
                .ok_or_else(|| CliError::usage(format!("no label for `{name}`")))?;
            row.push((label_tensor.to_string(), DynArray::from_vec(&[1], vec![label])));
        }
        ds.append_row(row)?;
    }
    Ok(())
}

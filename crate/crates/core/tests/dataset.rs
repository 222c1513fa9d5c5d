use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorlake::dataset::{ChunkRole, CreateOptions, LinkedSample};
use tensorlake::format::{ChunkPolicy, Htype, HtypeSchema, MetaType};
use tensorlake::storage::{Instrumented, MemoryProvider, SharedProvider, StorageKey};
use tensorlake::{Dataset, DynArray, Dtype, Error};

fn mem() -> SharedProvider {
    Arc::new(MemoryProvider::new())
}

fn image(h: usize, w: usize, seed: u64) -> DynArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
    DynArray::from_vec(&[h, w, 3], data)
}

fn label(v: i32) -> DynArray {
    DynArray::from_vec(&[1], vec![v])
}

fn basic_schemas() -> Vec<HtypeSchema> {
    vec![
        HtypeSchema::new("images", Htype::Image),
        HtypeSchema::new("labels", Htype::ClassLabel),
    ]
}

fn small_policy() -> ChunkPolicy {
    ChunkPolicy::new(64 << 10, 128 << 10).unwrap()
}

#[test]
fn create_empty_dataset() {
    let ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    assert_eq!(ds.tensor_names(), vec!["images", "labels"]);
    assert_eq!(ds.len("images").unwrap(), 0);
    assert_eq!(ds.num_rows(), 0);
}

#[test]
fn create_over_non_empty_root_fails() {
    let p = mem();
    p.put(&StorageKey::new("junk").unwrap(), vec![1u8].into()).unwrap();
    let err = Dataset::create(p, basic_schemas(), ChunkPolicy::default()).unwrap_err();
    assert!(matches!(err, Error::AlreadyExists(_)));
}

#[test]
fn grouped_tensor_addressed_by_path() {
    let schemas = vec![
        HtypeSchema::new("training/boxes", Htype::Bbox),
        HtypeSchema::new("training/labels", Htype::ClassLabel),
    ];
    let mut ds = Dataset::create(mem(), schemas, ChunkPolicy::default()).unwrap();
    let b = DynArray::from_vec(&[1, 4], vec![1.0f32, 2.0, 3.0, 4.0]);
    ds.append("training/boxes", b.clone()).unwrap();
    assert_eq!(ds.read("training/boxes", 0).unwrap(), b);
    assert_eq!(ds.groups(), BTreeSet::from(["training".to_string()]));
}

#[test]
fn tensor_and_group_name_clash_is_rejected() {
    let schemas = vec![
        HtypeSchema::new("a", Htype::Generic),
        HtypeSchema::new("a/b", Htype::Generic),
    ];
    assert!(matches!(
        Dataset::create(mem(), schemas, ChunkPolicy::default()),
        Err(Error::InvalidSchema(_))
    ));
}

#[test]
fn chunk_sample_counts_follow_bounds() {
    // (250,250,3) uint8 = 187,500 bytes; 8/16 MiB bounds.
    let size = 250 * 250 * 3u64;
    let policy = ChunkPolicy::default();
    let lo = policy.min_bytes / size;
    let hi = policy.max_bytes / size;
    assert_eq!((lo, hi), (44, 89));

    let mut ds = Dataset::create(mem(), basic_schemas(), policy).unwrap();
    let img = image(250, 250, 1);
    for _ in 0..100 {
        ds.append("images", img.clone()).unwrap();
    }
    let layout = ds.chunk_layout("images").unwrap();
    assert!(layout.len() > 1);
    for (i, c) in layout.iter().enumerate() {
        assert!(c.payload_bytes <= policy.max_bytes);
        if i + 1 < layout.len() {
            assert!((lo..=hi).contains(&(c.samples as u64)), "chunk {i} holds {}", c.samples);
        }
    }
    assert_eq!(layout.iter().map(|c| c.samples as u64).sum::<u64>(), 100);
}

#[test]
fn wrong_dtype_is_rejected_and_length_unchanged() {
    let mut ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    ds.append("labels", label(1)).unwrap();
    let bad = DynArray::from_vec(&[1], vec![1.5f32]);
    assert!(matches!(ds.append("labels", bad), Err(Error::Validation { .. })));
    assert_eq!(ds.len("labels").unwrap(), 1);
}

#[test]
fn oversize_sample_is_tiled() {
    let policy = small_policy();
    let p: SharedProvider = mem();
    {
        let mut ds = Dataset::create(p.clone(), basic_schemas(), policy).unwrap();
        ds.append("images", image(20, 20, 0)).unwrap();
        ds.append("images", image(600, 600, 7)).unwrap();
        ds.append("images", image(20, 20, 1)).unwrap();
        let entry = ds.tile_entry("images", 1).unwrap().unwrap().clone();
        assert_eq!(entry.tile_shape, vec![128, 128, 3]);
        assert_eq!(entry.grid_shape, vec![5, 5, 1]);
        for c in ds.chunk_layout("images").unwrap() {
            assert!(c.payload_bytes <= policy.max_bytes);
        }
        assert_eq!(ds.read("images", 1).unwrap(), image(600, 600, 7));
        assert_eq!(ds.read("images", 2).unwrap(), image(20, 20, 1));
    }

    // A cold read touches exactly the tiles intersecting the region.
    let full = image(600, 600, 7);
    let cases: [(Vec<std::ops::Range<usize>>, u64); 3] = [
        (vec![0..100, 0..100, 0..3], 1),
        (vec![100..500, 100..500, 0..2], 16),
        (vec![120..140, 0..600, 0..3], 10),
    ];
    for (region, tiles) in cases {
        let inst = Arc::new(Instrumented::new(p.clone()));
        let stats = inst.stats();
        let snap = Dataset::open_snapshot(inst, "main", "ds").unwrap();
        stats.reset();
        let got = snap.read_region("images", 1, &region).unwrap();
        assert_eq!(got, full.slice_region(&region));
        assert_eq!(stats.snapshot().gets, tiles, "region {region:?}");
        snap.read_region("images", 1, &region).unwrap();
        assert_eq!(stats.snapshot().gets, tiles);
    }
}

#[test]
fn region_reads() {
    let mut ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    ds.append("images", image(600, 600, 3)).unwrap();
    let full = ds.read("images", 0).unwrap();
    let all = vec![0..600, 0..600, 0..3];
    assert_eq!(ds.read_region("images", 0, &all).unwrap(), full);
    let crop = ds.read_region("images", 0, &[100..500, 100..500, 0..2]).unwrap();
    assert_eq!(crop.shape(), &[400, 400, 2]);
    assert!(matches!(
        ds.read_region("images", 0, &[0..601, 0..10, 0..3]),
        Err(Error::RegionOutOfBounds { .. })
    ));
}

#[test]
fn update_replaces_and_keeps_ids() {
    let mut ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    for i in 0..10 {
        ds.append("labels", label(i)).unwrap();
    }
    let id = ds.sample_id("labels", 5).unwrap();
    ds.update("labels", 5, label(99)).unwrap();
    assert_eq!(ds.read("labels", 5).unwrap(), label(99));
    assert_eq!(ds.sample_id("labels", 5).unwrap(), id);
    for i in (0..10).filter(|&i| i != 5) {
        assert_eq!(ds.read("labels", i).unwrap(), label(i as i32));
    }
}

#[test]
fn sparse_update_pads_when_not_strict() {
    let mut ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    for i in 0..10 {
        ds.append("labels", label(i)).unwrap();
    }
    assert!(matches!(
        ds.update("labels", 14, label(1)),
        Err(Error::IndexOutOfRange { index: 14, len: 10, .. })
    ));
    ds.set_strict(false);
    ds.update("labels", 14, label(42)).unwrap();
    assert_eq!(ds.len("labels").unwrap(), 15);
    for i in 10..14 {
        let s = ds.read("labels", i).unwrap();
        assert!(s.shape().iter().all(|&d| d == 0));
        assert!(s.is_empty());
    }
    assert_eq!(ds.read("labels", 14).unwrap(), label(42));
}

#[test]
fn read_past_end_fails() {
    let mut ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    ds.append("labels", label(0)).unwrap();
    assert!(matches!(ds.read("labels", 1), Err(Error::IndexOutOfRange { .. })));
}

#[test]
fn append_row_keeps_tensors_aligned() {
    let mut ds = Dataset::create(mem(), basic_schemas(), small_policy()).unwrap();
    for i in 0..20 {
        ds.append_row([
            ("images".to_string(), image(8, 8, i)),
            ("labels".to_string(), label(i as i32)),
        ])
        .unwrap();
    }
    // a bad sample in a row leaves every tensor untouched
    let err = ds.append_row([
        ("images".to_string(), image(8, 8, 0)),
        ("labels".to_string(), DynArray::from_vec(&[1], vec![0.5f64])),
    ]);
    assert!(err.is_err());
    assert_eq!(ds.len("images").unwrap(), 20);
    assert_eq!(ds.len("labels").unwrap(), 20);
}

#[test]
fn rechunk_fixpoint_and_empty() {
    let mut ds = Dataset::create(mem(), basic_schemas(), small_policy()).unwrap();
    let s = ds.rechunk("labels").unwrap();
    assert_eq!((s.chunks_before, s.chunks_after, s.bytes_moved), (0, 0, 0));
    for i in 0..50 {
        ds.append("images", image(32, 32, i)).unwrap();
    }
    let s = ds.rechunk("images").unwrap();
    assert_eq!(s.chunks_before, s.chunks_after);
    assert_eq!(s.bytes_moved, 0);
}

#[test]
fn rechunk_after_sparse_updates() {
    let policy = small_policy();
    let mut ds = Dataset::create(mem(), basic_schemas(), policy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut oracle = Vec::new();
    for i in 0..200 {
        let s = image(rng.gen_range(4..40), rng.gen_range(4..40), i);
        ds.append("images", s.clone()).unwrap();
        oracle.push(s);
    }
    for k in 0..1000 {
        let i = rng.gen_range(0..200);
        let s = image(rng.gen_range(4..60), rng.gen_range(4..60), 10_000 + k);
        ds.update("images", i, s.clone()).unwrap();
        oracle[i as usize] = s;
    }
    let ids: Vec<u64> = ds.sample_ids("images").unwrap().to_vec();
    assert!(ds.fragmentation("images").unwrap() > 0.0);
    let stats = ds.rechunk("images").unwrap();
    assert!(stats.bytes_moved > 0);
    assert_eq!(ds.fragmentation("images").unwrap(), 0.0);
    for (i, s) in oracle.iter().enumerate() {
        assert_eq!(&ds.read("images", i as u64).unwrap(), s);
    }
    assert_eq!(ds.sample_ids("images").unwrap(), &ids[..]);
    let layout = ds.chunk_layout("images").unwrap();
    let small = layout.iter().filter(|c| c.payload_bytes < policy.min_bytes).count();
    assert!(small <= 1);
    for c in &layout {
        assert!(c.payload_bytes <= policy.max_bytes);
        if c.payload_bytes < policy.min_bytes {
            assert_eq!(c.role, ChunkRole::Tail);
        }
    }
}

#[test]
fn reopen_preserves_content() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds");
    {
        let mut ds = Dataset::create_local(&path, basic_schemas(), small_policy()).unwrap();
        for i in 0..30 {
            ds.append("images", image(16, 16, i)).unwrap();
            ds.append("labels", label(i as i32)).unwrap();
        }
    }
    let mut ds = Dataset::open_local(&path).unwrap();
    assert_eq!(ds.len("images").unwrap(), 30);
    ds.append("labels", label(30)).unwrap();
    for i in 0..31 {
        assert_eq!(ds.read("labels", i).unwrap(), label(i as i32));
    }
    assert_eq!(ds.read("images", 29).unwrap(), image(16, 16, 29));
}

#[test]
fn open_missing_is_not_a_dataset() {
    assert!(matches!(Dataset::open(mem()), Err(Error::NotADataset(_))));
}

#[test]
fn branch_lock_excludes_second_writer() {
    let p = mem();
    let ds = Dataset::create(p.clone(), basic_schemas(), ChunkPolicy::default()).unwrap();
    assert!(matches!(Dataset::open(p.clone()), Err(Error::BranchLocked(_))));
    // readers are never blocked
    Dataset::open_snapshot(p.clone(), "main", "ds").unwrap();
    drop(ds);
    Dataset::open(p).unwrap();
}

#[test]
fn linked_samples_resolve_through_registry() {
    let external = mem();
    external
        .put(&StorageKey::new("img/a.bin").unwrap(), vec![1u8, 2, 3].into())
        .unwrap();
    let schema = HtypeSchema::new("files", Htype::Generic)
        .with_dtype(Dtype::Uint8)
        .with_meta(MetaType::Link);
    let opts = CreateOptions::default();
    let mut ds = Dataset::create_with(mem(), vec![schema], opts).unwrap();
    ds.register_link_provider("ext", external);
    ds.append("files", LinkedSample::new("ext://img/a.bin")).unwrap();
    ds.append("files", LinkedSample::new("ext://img/missing.bin")).unwrap();
    assert_eq!(ds.read("files", 0).unwrap(), DynArray::from_vec(&[3], vec![1u8, 2, 3]));
    assert_eq!(ds.read_link("files", 0).unwrap().url, "ext://img/a.bin");
    match ds.read("files", 1) {
        Err(Error::LinkResolveFailure { row, url, .. }) => {
            assert_eq!(row, 1);
            assert_eq!(url, "ext://img/missing.bin");
        }
        other => panic!("expected link failure, got {other:?}"),
    }
}

#[test]
fn snapshot_is_isolated_from_later_writes() {
    let mut ds = Dataset::create(mem(), basic_schemas(), ChunkPolicy::default()).unwrap();
    ds.append("labels", label(1)).unwrap();
    let snap = ds.snapshot().unwrap();
    ds.append("labels", label(2)).unwrap();
    ds.update("labels", 0, label(9)).unwrap();
    assert_eq!(snap.len("labels").unwrap(), 1);
    assert_eq!(snap.read("labels", 0).unwrap(), label(1));
}

fn ragged(rng: &mut ChaCha8Rng) -> DynArray {
    let shape = [rng.gen_range(0..6), rng.gen_range(1..5)];
    let n = shape[0] * shape[1];
    let data: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
    DynArray::from_typed(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunk_bounds_hold_under_mixed_writes(seed in any::<u64>(), ops in 20usize..120) {
        let policy = ChunkPolicy::new(256, 1024).unwrap();
        let schema = HtypeSchema::new("x", Htype::Generic).with_ndim(Some(2));
        let mut ds = Dataset::create(mem(), vec![schema], policy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut oracle: Vec<DynArray> = Vec::new();
        for _ in 0..ops {
            let s = ragged(&mut rng);
            if oracle.is_empty() || rng.gen_bool(0.6) {
                ds.append("x", s.clone()).unwrap();
                oracle.push(s);
            } else {
                let i = rng.gen_range(0..oracle.len());
                ds.update("x", i as u64, s.clone()).unwrap();
                oracle[i] = s;
            }
        }
        for c in ds.chunk_layout("x").unwrap() {
            prop_assert!(c.payload_bytes <= policy.max_bytes);
        }
        ds.rechunk("x").unwrap();
        let layout = ds.chunk_layout("x").unwrap();
        for c in &layout {
            prop_assert!(c.payload_bytes <= policy.max_bytes);
            if c.role == ChunkRole::Body {
                prop_assert!(c.payload_bytes >= policy.min_bytes);
            }
        }
        for (i, s) in oracle.iter().enumerate() {
            prop_assert_eq!(&ds.read("x", i as u64).unwrap(), s);
        }
    }

    #[test]
    fn tiling_is_transparent(h in 40usize..200, w in 40usize..200, seed in any::<u64>(),
                             r0 in 0usize..40, r1 in 0usize..40) {
        let policy = ChunkPolicy::new(2048, 4096).unwrap();
        let mut ds = Dataset::create(mem(), basic_schemas(), policy).unwrap();
        let img = image(h, w, seed);
        ds.append("images", img.clone()).unwrap();
        prop_assert!(ds.tile_entry("images", 0).unwrap().is_some());
        prop_assert_eq!(&ds.read("images", 0).unwrap(), &img);
        let region = vec![r0 / 2..h - r1 / 2, r1 / 2..w - r0 / 2, 1..3];
        prop_assert_eq!(ds.read_region("images", 0, &region).unwrap(), img.slice_region(&region));
        for c in ds.chunk_layout("images").unwrap() {
            prop_assert!(c.payload_bytes <= policy.max_bytes);
        }
    }
}

//! Crop/normalize query over predicted and ground-truth boxes, with a
//! hand-computed oracle.

use ndarray::s;
use tensorlake::format::{ChunkPolicy, Htype, HtypeSchema};
use tensorlake::tql::Value;
use tensorlake::{Dataset, DynArray};

use super::{mem, random_image};

pub fn schemas() -> Vec<HtypeSchema> {
    vec![
        HtypeSchema::new("images", Htype::Image),
        HtypeSchema::new("boxes", Htype::Bbox),
        HtypeSchema::new("training/boxes", Htype::Bbox),
        HtypeSchema::new("labels", Htype::ClassLabel),
    ]
}

pub const QUERY: &str = "SELECT
  images[100:500, 100:500, 0:2] as crop,
  NORMALIZE(
    boxes,
    [100, 100, 400, 400]) as box
FROM
  dataset
WHERE IOU(boxes, \"training/boxes\") > 0.95
ORDER BY IOU(boxes, \"training/boxes\")
ARRANGE BY labels";

pub fn bx(v: [f32; 4]) -> DynArray {
    DynArray::from_vec(&[1, 4], v.to_vec())
}

/// Runs the crop query over eight hand-built rows and checks every output
/// value against hand-computed results.
pub fn check_against_hand_oracle() {
    // (predicted, ground truth, label) with hand-computed IOU.
    let rows: [([f32; 4], [f32; 4], i32, f64); 8] = [
        ([0., 0., 10., 10.], [0., 0., 10., 10.], 1, 1.0),
        ([0., 0., 10., 10.], [5., 5., 10., 10.], 0, 25.0 / 175.0),
        ([0., 0., 10., 10.], [0., 0., 10., 9.6], 0, 0.96),
        ([200., 200., 100., 100.], [200., 200., 100., 100.], 0, 1.0),
        ([0., 0., 100., 100.], [0., 0., 100., 97.], 1, 0.97),
        ([0., 0., 10., 10.], [20., 20., 5., 5.], 2, 0.0),
        ([0., 0., 100., 100.], [0., 0., 100., 98.], 2, 0.98),
        ([150., 150., 50., 50.], [150., 150., 50., 50.], 1, 1.0),
    ];
    let mut ds = Dataset::create(mem(), schemas(), ChunkPolicy::default()).unwrap();
    let mut images = Vec::new();
    for (i, (p, g, l, _)) in rows.iter().enumerate() {
        let img = random_image(512, 512, i as u64);
        images.push(img.clone());
        ds.append_row([
            ("images".to_string(), img),
            ("boxes".to_string(), bx(*p)),
            ("training/boxes".to_string(), bx(*g)),
            ("labels".to_string(), DynArray::from_vec(&[1], vec![*l])),
        ])
        .unwrap();
    }
    ds.commit("boxes data").unwrap();

    // IOU values themselves, before filtering.
    let all = ds.query("SELECT IOU(boxes, \"training/boxes\") AS iou FROM dataset").unwrap();
    for (i, (.., expect)) in rows.iter().enumerate() {
        let Value::Float(v) = all.get(i, "iou").unwrap() else { panic!() };
        assert!((v - expect).abs() < 1e-6, "row {i}: {v} vs {expect}");
    }
    let Value::Float(v) = all.get(1, "iou").unwrap() else { panic!() };
    assert!((v - 25.0 / 175.0).abs() < 1e-9);

    let view = ds.query(QUERY).unwrap();
    // Kept: IOU > 0.95 -> rows 0, 2, 3, 4, 6, 7. Ascending IOU, stable:
    // 2 (.96), 4 (.97), 6 (.98), 0, 3, 7 (1.0). Grouped by label in order of
    // first appearance: 0 -> [2, 3], 1 -> [4, 0, 7], 2 -> [6].
    assert_eq!(view.row_order(), &[2, 3, 4, 0, 7, 6]);
    assert_eq!(view.group_boundaries(), Some(&[0, 2, 5][..]));
    assert_eq!(view.column_names(), vec!["crop", "box"]);
    for (i, &row) in view.row_order().iter().enumerate() {
        let Value::Array(crop) = view.get(i, "crop").unwrap() else { panic!() };
        let src = images[row as usize].as_typed::<u8>().unwrap();
        let expect = src.slice(s![100..500, 100..500, 0..2]).to_owned().into_dyn();
        assert_eq!(crop.as_typed::<u8>().unwrap(), &expect);
        let Value::Array(b) = view.get(i, "box").unwrap() else { panic!() };
        let p = rows[row as usize].0;
        assert_eq!(b, bx([p[0] - 100.0, p[1] - 100.0, p[2], p[3]]));
    }
    // The worked translation example.
    let Value::Array(b) = view.get(4, "box").unwrap() else { panic!() };
    assert_eq!(b, bx([50.0, 50.0, 50.0, 50.0]));
}

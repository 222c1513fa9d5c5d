//! Tile geometry for samples larger than the chunk bound.

use std::ops::Range;

use crate::format::{Htype, HtypeSchema};

/// Axes that may be split. Image channels are never split.
pub fn spatial_axes(schema: &HtypeSchema, ndim: usize) -> Vec<usize> {
    match schema.htype {
        Htype::Image if ndim > 1 => (0..ndim - 1).collect(),
        _ => (0..ndim).collect(),
    }
}

/// Largest power-of-two extent along spatial axes whose byte size is at most
/// `budget`. Returns `None` when even a unit tile is too large.
pub fn tile_shape(shape: &[usize], spatial: &[usize], itemsize: usize, budget: u64) -> Option<Vec<usize>> {
    let mut tile = shape.to_vec();
    for &ax in spatial {
        if tile[ax] > 0 {
            tile[ax] = 1 << (usize::BITS - 1 - tile[ax].leading_zeros());
        }
    }
    let bytes = |t: &[usize]| t.iter().product::<usize>() as u64 * itemsize as u64;
    while bytes(&tile) > budget {
        let &ax = spatial
            .iter()
            .filter(|&&a| tile[a] > 1)
            .max_by_key(|&&a| (tile[a], std::cmp::Reverse(a)))?;
        tile[ax] /= 2;
    }
    Some(tile)
}

pub fn grid_shape(shape: &[usize], tile: &[usize]) -> Vec<usize> {
    shape.iter().zip(tile).map(|(&s, &t)| s.div_ceil(t)).collect()
}

/// Row-major grid coordinates.
pub fn grid_cells(grid: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = grid.iter().product();
    (0..total)
        .map(|mut flat| {
            let mut cell = vec![0; grid.len()];
            for ax in (0..grid.len()).rev() {
                cell[ax] = flat % grid[ax];
                flat /= grid[ax];
            }
            cell
        })
        .collect()
}

/// Region of the sample covered by one tile, clipped at the edges.
pub fn tile_region(cell: &[usize], tile: &[usize], shape: &[usize]) -> Vec<Range<usize>> {
    cell.iter()
        .zip(tile)
        .zip(shape)
        .map(|((&c, &t), &s)| c * t..((c + 1) * t).min(s))
        .collect()
}

/// Intersection of two regions, if non-empty.
pub fn intersect(a: &[Range<usize>], b: &[Range<usize>]) -> Option<Vec<Range<usize>>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let r = x.start.max(y.start)..x.end.min(y.end);
            (r.start < r.end).then_some(r)
        })
        .collect()
}

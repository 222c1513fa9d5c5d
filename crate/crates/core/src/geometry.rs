//! Axis-aligned boxes and the IOU / NORMALIZE kernels used by queries.

use num_traits::Float;

use crate::format::BboxFormat;

/// An axis-aligned box, stored as left/top/width/height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox<T> {
    pub left: T,
    pub top: T,
    pub width: T,
    pub height: T,
}

impl<T: Float> Bbox<T> {
    pub fn ltwh(left: T, top: T, width: T, height: T) -> Self {
        Bbox { left, top, width, height }
    }

    pub fn ltrb(left: T, top: T, right: T, bottom: T) -> Self {
        Bbox {
            left,
            top,
            width: right - left,
            height: bottom - top,
        }
    }

    /// Reads four coordinates in `format`. Returns `None` unless `v.len() == 4`.
    pub fn from_slice(v: &[T], format: BboxFormat) -> Option<Self> {
        let &[a, b, c, d] = v else { return None };
        Some(match format {
            BboxFormat::Ltwh => Self::ltwh(a, b, c, d),
            BboxFormat::Ltrb => Self::ltrb(a, b, c, d),
        })
    }

    pub fn to_array(&self, format: BboxFormat) -> [T; 4] {
        match format {
            BboxFormat::Ltwh => [self.left, self.top, self.width, self.height],
            BboxFormat::Ltrb => [self.left, self.top, self.right(), self.bottom()],
        }
    }

    pub fn right(&self) -> T {
        self.left + self.width
    }

    pub fn bottom(&self) -> T {
        self.top + self.height
    }

    /// Area, treating negative extents as empty.
    pub fn area(&self) -> T {
        self.width.max(T::zero()) * self.height.max(T::zero())
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.right().min(other.right()) - self.left.max(other.left);
        let h = self.bottom().min(other.bottom()) - self.top.max(other.top);
        w.max(T::zero()) * h.max(T::zero())
    }

    /// Intersection over union; a zero-area union yields 0.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Bbox {
            left: self.left + dx,
            top: self.top + dy,
            ..*self
        }
    }
}

/// Mean IOU over index-paired boxes, truncated to the shorter list. Empty input gives 0.
pub fn mean_iou<T: Float>(a: &[Bbox<T>], b: &[Bbox<T>]) -> T {
    let n = a.len().min(b.len());
    if n == 0 {
        return T::zero();
    }
    let total = a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + x.iou(y));
    total / T::from(n).unwrap()
}

/// Expresses boxes relative to the crop window at `(x, y)`. Sizes are unchanged and nothing is clipped.
pub fn normalize<T: Float>(boxes: &[Bbox<T>], crop_x: T, crop_y: T) -> Vec<Bbox<T>> {
    boxes.iter().map(|b| b.translate(-crop_x, -crop_y)).collect()
}

//! Dynamically typed n-dimensional samples.

use std::ops::Range;

use ndarray::{ArrayD, IxDyn, Slice};
use num_traits::ToPrimitive;

use crate::scalar::{Dtype, Element};

/// One sample of a tensor: an n-d array of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum DynArray {
    Int8(ArrayD<i8>),
    Uint8(ArrayD<u8>),
    Int32(ArrayD<i32>),
    Int64(ArrayD<i64>),
    Float32(ArrayD<f32>),
    Float64(ArrayD<f64>),
}

/// Runs `$body` with `$a` bound to the inner typed array.
#[macro_export]
#[doc(hidden)]
macro_rules! dispatch {
    ($value:expr, $a:ident => $body:expr) => {
        match $value {
            $crate::DynArray::Int8($a) => $body,
            $crate::DynArray::Uint8($a) => $body,
            $crate::DynArray::Int32($a) => $body,
            $crate::DynArray::Int64($a) => $body,
            $crate::DynArray::Float32($a) => $body,
            $crate::DynArray::Float64($a) => $body,
        }
    };
}

/// Same as [`dispatch!`] but also rewraps an array-valued result in the same variant.
macro_rules! map_same {
    ($value:expr, $a:ident => $body:expr) => {
        match $value {
            DynArray::Int8($a) => DynArray::Int8($body),
            DynArray::Uint8($a) => DynArray::Uint8($body),
            DynArray::Int32($a) => DynArray::Int32($body),
            DynArray::Int64($a) => DynArray::Int64($body),
            DynArray::Float32($a) => DynArray::Float32($body),
            DynArray::Float64($a) => DynArray::Float64($body),
        }
    };
}

/// Error raised when raw bytes do not describe an array of the requested shape.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{len} bytes cannot hold a {dtype} array of shape {shape:?}")]
pub struct LayoutError {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub len: usize,
}

impl DynArray {
    pub fn from_typed<T: Element>(array: ArrayD<T>) -> Self {
        T::into_dyn(array)
    }

    /// Builds an array from a flat row-major vector.
    pub fn from_vec<T: Element>(shape: &[usize], data: Vec<T>) -> Self {
        T::into_dyn(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data"))
    }

    pub fn zeros(dtype: Dtype, shape: &[usize]) -> Self {
        let shape = IxDyn(shape);
        match dtype {
            Dtype::Int8 => DynArray::Int8(ArrayD::zeros(shape)),
            Dtype::Uint8 => DynArray::Uint8(ArrayD::zeros(shape)),
            Dtype::Int32 => DynArray::Int32(ArrayD::zeros(shape)),
            Dtype::Int64 => DynArray::Int64(ArrayD::zeros(shape)),
            Dtype::Float32 => DynArray::Float32(ArrayD::zeros(shape)),
            Dtype::Float64 => DynArray::Float64(ArrayD::zeros(shape)),
        }
    }

    /// The gap filler used for sparse writes: all-zero shape of the given rank.
    pub fn empty(dtype: Dtype, ndim: usize) -> Self {
        Self::zeros(dtype, &vec![0; ndim.max(1)])
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            DynArray::Int8(_) => Dtype::Int8,
            DynArray::Uint8(_) => Dtype::Uint8,
            DynArray::Int32(_) => Dtype::Int32,
            DynArray::Int64(_) => Dtype::Int64,
            DynArray::Float32(_) => Dtype::Float32,
            DynArray::Float64(_) => Dtype::Float64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        dispatch!(self, a => a.shape())
    }

    pub fn ndim(&self) -> usize {
        self.shape().len()
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        dispatch!(self, a => a.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nbytes(&self) -> usize {
        self.len() * self.dtype().size()
    }

    /// Row-major little-endian bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.nbytes());
        self.write_le_bytes(&mut out);
        out
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        dispatch!(self, a => {
            match a.as_slice() {
                Some(s) => Element::encode_le(s, out),
                None => Element::encode_le(&a.iter().copied().collect::<Vec<_>>(), out),
            }
        })
    }

    pub fn from_le_bytes(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<Self, LayoutError> {
        let count: usize = shape.iter().product();
        if count * dtype.size() != bytes.len() {
            return Err(LayoutError {
                dtype,
                shape: shape.to_vec(),
                len: bytes.len(),
            });
        }
        Ok(match dtype {
            Dtype::Int8 => Self::from_vec(shape, i8::decode_le(bytes)),
            Dtype::Uint8 => Self::from_vec(shape, u8::decode_le(bytes)),
            Dtype::Int32 => Self::from_vec(shape, i32::decode_le(bytes)),
            Dtype::Int64 => Self::from_vec(shape, i64::decode_le(bytes)),
            Dtype::Float32 => Self::from_vec(shape, f32::decode_le(bytes)),
            Dtype::Float64 => Self::from_vec(shape, f64::decode_le(bytes)),
        })
    }

    /// Sub-array over per-dimension half-open ranges. Ranges must lie inside the shape.
    pub fn slice_region(&self, region: &[Range<usize>]) -> Self {
        assert_eq!(region.len(), self.ndim(), "region rank");
        map_same!(self, a => a
            .slice_each_axis(|ax| {
                let r = &region[ax.axis.index()];
                Slice::from(r.start..r.end)
            })
            .to_owned())
    }

    /// Copies `src` into `self` at `offset` (one offset per dimension).
    ///
    /// Panics if dtypes differ or `src` does not fit.
    pub fn assign_region(&mut self, offset: &[usize], src: &DynArray) {
        fn put<T: Element>(dst: &mut ArrayD<T>, offset: &[usize], src: &ArrayD<T>) {
            let shape = src.shape().to_vec();
            dst.slice_each_axis_mut(|ax| {
                let i = ax.axis.index();
                Slice::from(offset[i]..offset[i] + shape[i])
            })
            .assign(src);
        }
        match (self, src) {
            (DynArray::Int8(d), DynArray::Int8(s)) => put(d, offset, s),
            (DynArray::Uint8(d), DynArray::Uint8(s)) => put(d, offset, s),
            (DynArray::Int32(d), DynArray::Int32(s)) => put(d, offset, s),
            (DynArray::Int64(d), DynArray::Int64(s)) => put(d, offset, s),
            (DynArray::Float32(d), DynArray::Float32(s)) => put(d, offset, s),
            (DynArray::Float64(d), DynArray::Float64(s)) => put(d, offset, s),
            (d, s) => panic!("dtype mismatch: {} vs {}", d.dtype(), s.dtype()),
        }
    }

    /// Removes `axis` by selecting `index` along it.
    pub fn index_axis(&self, axis: usize, index: usize) -> Self {
        map_same!(self, a => a.index_axis(ndarray::Axis(axis), index).to_owned())
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        dispatch!(self, a => a.mapv(|v| v.to_f64().unwrap_or(f64::NAN)))
    }

    pub fn to_i64(&self) -> ArrayD<i64> {
        dispatch!(self, a => a.mapv(|v| v.to_i64().unwrap_or_default()))
    }

    /// Elements as f64 in row-major order.
    pub fn iter_f64(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        dispatch!(self, a => Box::new(a.iter().map(|v| v.to_f64().unwrap_or(f64::NAN))))
    }

    /// Numeric conversion to `dtype`. Out-of-range values become zero.
    pub fn cast(&self, dtype: Dtype) -> Self {
        fn to<T: Element>(a: &DynArray) -> DynArray {
            dispatch!(a, x => DynArray::from_typed(x.mapv(|v| num_traits::cast::<_, T>(v).unwrap_or_default())))
        }
        if self.dtype() == dtype {
            return self.clone();
        }
        match dtype {
            Dtype::Int8 => to::<i8>(self),
            Dtype::Uint8 => to::<u8>(self),
            Dtype::Int32 => to::<i32>(self),
            Dtype::Int64 => to::<i64>(self),
            Dtype::Float32 => to::<f32>(self),
            Dtype::Float64 => to::<f64>(self),
        }
    }

    pub fn as_typed<T: Element>(&self) -> Option<&ArrayD<T>> {
        T::from_dyn(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Option<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return None;
        }
        Some(map_same!(self, a => {
            let flat: Vec<_> = a.iter().copied().collect();
            ArrayD::from_shape_vec(IxDyn(shape), flat).expect("checked size")
        }))
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(items: &[&DynArray]) -> Option<Self> {
        let first = items.first()?;
        if items
            .iter()
            .any(|a| a.dtype() != first.dtype() || a.shape() != first.shape())
        {
            return None;
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut bytes = Vec::with_capacity(first.nbytes() * items.len());
        for a in items {
            a.write_le_bytes(&mut bytes);
        }
        Self::from_le_bytes(first.dtype(), &shape, &bytes).ok()
    }
}

impl<T: Element> From<ArrayD<T>> for DynArray {
    fn from(a: ArrayD<T>) -> Self {
        T::into_dyn(a)
    }
}

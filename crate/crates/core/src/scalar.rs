//! Element types that can be stored in a tensor.
//!
//! Every numeric routine in the crate that touches raw sample data is generic
//! over [`Element`]; the dynamically typed [`DynArray`](crate::DynArray) is a
//! thin enum over the six supported instantiations.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use num_traits::{Num, NumCast, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::array::DynArray;

/// Element type tag stored in tensor metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int8,
    Uint8,
    Int32,
    Int64,
    Float32,
    Float64,
}

impl Dtype {
    pub const ALL: [Dtype; 6] = [
        Dtype::Int8,
        Dtype::Uint8,
        Dtype::Int32,
        Dtype::Int64,
        Dtype::Float32,
        Dtype::Float64,
    ];

    /// Width of one element in bytes.
    pub fn size(self) -> usize {
        match self {
            Dtype::Int8 | Dtype::Uint8 => 1,
            Dtype::Int32 | Dtype::Float32 => 4,
            Dtype::Int64 | Dtype::Float64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !self.is_float()
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::Float32 | Dtype::Float64)
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::Int8 => "int8",
            Dtype::Uint8 => "uint8",
            Dtype::Int32 => "int32",
            Dtype::Int64 => "int64",
            Dtype::Float32 => "float32",
            Dtype::Float64 => "float64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dtype::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown dtype `{s}`"))
    }
}

/// A scalar that can live inside a tensor sample.
pub trait Element:
    Num + NumCast + ToPrimitive + Copy + PartialOrd + Default + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Appends the little-endian encoding of `values` to `out`.
    fn encode_le(values: &[Self], out: &mut Vec<u8>);

    /// Decodes a little-endian buffer. `bytes.len()` must be a multiple of the element size.
    fn decode_le(bytes: &[u8]) -> Vec<Self>;

    fn into_dyn(array: ArrayD<Self>) -> DynArray;

    fn from_dyn(array: &DynArray) -> Option<&ArrayD<Self>>;
}

macro_rules! impl_element {
    ($ty:ty, $tag:ident) => {
        impl Element for $ty {
            const DTYPE: Dtype = Dtype::$tag;

            fn encode_le(values: &[Self], out: &mut Vec<u8>) {
                out.reserve(values.len() * std::mem::size_of::<$ty>());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn decode_le(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact(std::mem::size_of::<$ty>())
                    .map(|c| <$ty>::from_le_bytes(c.try_into().expect("exact chunk")))
                    .collect()
            }

            fn into_dyn(array: ArrayD<Self>) -> DynArray {
                DynArray::$tag(array)
            }

            fn from_dyn(array: &DynArray) -> Option<&ArrayD<Self>> {
                match array {
                    DynArray::$tag(a) => Some(a),
                    _ => None,
                }
            }
        }
    };
}

impl_element!(i8, Int8);
impl_element!(u8, Uint8);
impl_element!(i32, Int32);
impl_element!(i64, Int64);
impl_element!(f32, Float32);
impl_element!(f64, Float64);

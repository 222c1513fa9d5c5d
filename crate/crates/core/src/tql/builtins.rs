//! Built-in query functions.

use ndarray::ArrayD;
use num_traits::Float;

use super::value::Value;
use super::TqlError;
use crate::array::DynArray;
use crate::format::BboxFormat;
use crate::geometry::{self, Bbox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Iou,
    Normalize,
    Mean,
    Sum,
    Min,
    Max,
    Shape,
    Any,
    All,
    Contains,
}

impl Func {
    pub const ALL: [Func; 10] = [
        Func::Iou,
        Func::Normalize,
        Func::Mean,
        Func::Sum,
        Func::Min,
        Func::Max,
        Func::Shape,
        Func::Any,
        Func::All,
        Func::Contains,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Iou => "IOU",
            Func::Normalize => "NORMALIZE",
            Func::Mean => "MEAN",
            Func::Sum => "SUM",
            Func::Min => "MIN",
            Func::Max => "MAX",
            Func::Shape => "SHAPE",
            Func::Any => "ANY",
            Func::All => "ALL",
            Func::Contains => "CONTAINS",
        }
    }

    /// Case-insensitive lookup.
    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name().eq_ignore_ascii_case(name))
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Iou | Func::Normalize | Func::Contains => 2,
            _ => 1,
        }
    }
}

fn shape_err(msg: String) -> TqlError {
    TqlError::ShapeMismatch(msg)
}

fn boxes_of<T: Float>(values: &[T], shape: &[usize], format: BboxFormat) -> Result<Vec<Bbox<T>>, TqlError> {
    if shape.last() != Some(&4) || shape.len() > 2 {
        return Err(shape_err(format!("boxes need shape [4] or [N, 4], got {shape:?}")));
    }
    Ok(values
        .chunks_exact(4)
        .map(|c| Bbox::from_slice(c, format).expect("four coordinates"))
        .collect())
}

fn box_operand(v: &Value) -> Result<Option<DynArray>, TqlError> {
    match v {
        Value::Null => Ok(None),
        Value::Array(a) if a.is_empty() => Ok(None),
        Value::Array(a) => Ok(Some(a.clone())),
        other => Err(TqlError::Type(format!("expected boxes, got {}", other.kind()))),
    }
}

/// Mean IOU over index-paired boxes. Null if either side is an empty sample.
pub fn iou(a: &Value, fa: BboxFormat, b: &Value, fb: BboxFormat) -> Result<Value, TqlError> {
    let (Some(a), Some(b)) = (box_operand(a)?, box_operand(b)?) else {
        return Ok(Value::Null);
    };
    let va: Vec<f64> = a.iter_f64().collect();
    let vb: Vec<f64> = b.iter_f64().collect();
    let ba = boxes_of(&va, a.shape(), fa)?;
    let bb = boxes_of(&vb, b.shape(), fb)?;
    Ok(Value::Float(geometry::mean_iou(&ba, &bb)))
}

fn normalize_typed<T: Float + crate::Element>(
    values: &[T],
    shape: &[usize],
    format: BboxFormat,
    crop: &[f64],
) -> Result<DynArray, TqlError> {
    let boxes = boxes_of(values, shape, format)?;
    let (x, y) = (T::from(crop[0]).unwrap(), T::from(crop[1]).unwrap());
    let out: Vec<T> = geometry::normalize(&boxes, x, y)
        .iter()
        .flat_map(|b| b.to_array(format))
        .collect();
    Ok(DynArray::from_vec(shape, out))
}

/// Expresses boxes relative to the crop window `[x, y, w, h]`. No clipping.
pub fn normalize(boxes: &Value, format: BboxFormat, crop: &Value) -> Result<Value, TqlError> {
    let crop: Vec<f64> = match crop {
        Value::Array(c) => c.iter_f64().collect(),
        other => return Err(TqlError::Type(format!("crop window must be an array, got {}", other.kind()))),
    };
    if crop.len() != 4 {
        return Err(shape_err(format!("crop window needs 4 values, got {}", crop.len())));
    }
    let Some(a) = box_operand(boxes)? else {
        return Ok(Value::Null);
    };
    let out = match &a {
        DynArray::Float32(t) => normalize_typed(&t.iter().copied().collect::<Vec<_>>(), a.shape(), format, &crop)?,
        other => normalize_typed(&other.iter_f64().collect::<Vec<_>>(), a.shape(), format, &crop)?,
    };
    Ok(Value::Array(out))
}

fn operand(func: Func, v: &Value) -> Result<Option<DynArray>, TqlError> {
    match v {
        Value::Null => Ok(None),
        Value::Str(_) => Err(TqlError::Type(format!("{} of a string", func.name()))),
        other => Ok(other.to_array()),
    }
}

/// MEAN, SUM, MIN, MAX, SHAPE, ANY and ALL over every element.
pub fn reduce(func: Func, v: &Value) -> Result<Value, TqlError> {
    if func == Func::Shape {
        if let Value::Str(s) = v {
            return Ok(Value::Array(DynArray::from_vec(&[1], vec![s.len() as i64])));
        }
    }
    let Some(a) = operand(func, v)? else {
        return Ok(Value::Null);
    };
    let int = a.dtype().is_integer();
    let n = a.len();
    Ok(match func {
        Func::Shape => {
            let dims: Vec<i64> = a.shape().iter().map(|&d| d as i64).collect();
            Value::Array(DynArray::from_vec(&[dims.len()], dims))
        }
        Func::Mean if n == 0 => Value::Null,
        Func::Mean => Value::Float(a.iter_f64().sum::<f64>() / n as f64),
        Func::Sum if int => Value::Int(a.to_i64().iter().fold(0i64, |s, &x| s.wrapping_add(x))),
        Func::Sum => Value::Float(a.iter_f64().sum()),
        Func::Min | Func::Max if n == 0 => Value::Null,
        Func::Min if int => Value::Int(*a.to_i64().iter().min().unwrap()),
        Func::Max if int => Value::Int(*a.to_i64().iter().max().unwrap()),
        Func::Min => Value::Float(a.iter_f64().fold(f64::INFINITY, f64::min)),
        Func::Max => Value::Float(a.iter_f64().fold(f64::NEG_INFINITY, f64::max)),
        Func::Any => Value::Bool(a.iter_f64().any(|x| x != 0.0)),
        Func::All => Value::Bool(a.iter_f64().all(|x| x != 0.0)),
        _ => unreachable!("not a reduction"),
    })
}

/// True iff `needle` equals any element, or, for a string needle, occurs in the text.
pub fn contains(haystack: &Value, needle: &Value) -> Result<Value, TqlError> {
    let a = match haystack {
        Value::Null => return Ok(Value::Null),
        Value::Str(s) => DynArray::from_vec(&[s.len()], s.as_bytes().to_vec()),
        Value::Array(a) => a.clone(),
        other => return Err(TqlError::Type(format!("CONTAINS over {}", other.kind()))),
    };
    Ok(Value::Bool(match needle.to_scalar()? {
        Value::Str(s) => {
            let text = a.to_i64().iter().map(|&b| b as u8).collect::<Vec<u8>>();
            let pat = s.as_bytes();
            pat.is_empty() || text.windows(pat.len()).any(|w| w == pat)
        }
        Value::Int(v) if a.dtype().is_integer() => a.to_i64().iter().any(|&x| x == v),
        Value::Int(v) => a.iter_f64().any(|x| x == v as f64),
        Value::Float(v) => a.iter_f64().any(|x| x == v),
        Value::Bool(b) => a.iter_f64().any(|x| (x != 0.0) == b),
        Value::Null => false,
        other => return Err(TqlError::Type(format!("CONTAINS needs a literal, got {}", other.kind()))),
    }))
}

/// Array literal: int64 when every item is an integer, else float64.
pub fn array_literal(items: &[Value]) -> Result<Value, TqlError> {
    if items.iter().all(|v| matches!(v, Value::Int(_))) {
        let v: Vec<i64> = items
            .iter()
            .map(|v| match v {
                Value::Int(i) => *i,
                _ => unreachable!(),
            })
            .collect();
        return Ok(Value::Array(DynArray::from_vec(&[v.len()], v)));
    }
    let mut out = Vec::with_capacity(items.len());
    for v in items {
        out.push(match v {
            Value::Int(i) => *i as f64,
            Value::Float(f) => *f,
            Value::Bool(b) => f64::from(u8::from(*b)),
            other => return Err(TqlError::Type(format!("array literal holding {}", other.kind()))),
        });
    }
    Ok(Value::Array(DynArray::from_typed(ArrayD::from_shape_vec(vec![out.len()], out).unwrap())))
}

//! Runtime values of query expressions.

use std::cmp::Ordering;

use ndarray::{ArrayD, IxDyn, Zip};
use serde::Serialize;

use super::ast::BinOp;
use super::TqlError;
use crate::array::DynArray;
use crate::scalar::Dtype;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    /// Result of an operation on an empty sample.
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Array(DynArray),
    /// Elementwise comparison result.
    Mask(ArrayD<bool>),
}

fn type_err(msg: String) -> TqlError {
    TqlError::Type(msg)
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::Array(_) => "array",
            Value::Mask(_) => "bool array",
        }
    }

    /// The single element of a one-element array, or the value itself.
    pub fn to_scalar(&self) -> Result<Value, TqlError> {
        match self {
            Value::Array(a) if a.len() == 1 => Ok(match a.dtype() {
                d if d.is_float() => Value::Float(a.iter_f64().next().unwrap()),
                _ => Value::Int(a.to_i64().iter().copied().next().unwrap()),
            }),
            Value::Array(a) if a.is_empty() => Ok(Value::Null),
            Value::Mask(m) if m.len() == 1 => Ok(Value::Bool(*m.iter().next().unwrap())),
            Value::Mask(m) if m.is_empty() => Ok(Value::Null),
            Value::Array(a) => Err(type_err(format!("array of shape {:?} used as a scalar", a.shape()))),
            Value::Mask(m) => Err(type_err(format!("bool array of shape {:?} used as a scalar", m.shape()))),
            v => Ok(v.clone()),
        }
    }

    /// Truth value in a WHERE or logical context. Null is false.
    pub fn truthy(&self) -> Result<bool, TqlError> {
        match self.to_scalar()? {
            Value::Null => Ok(false),
            Value::Bool(b) => Ok(b),
            Value::Int(v) => Ok(v != 0),
            Value::Float(v) => Ok(v != 0.0),
            Value::Str(s) => Ok(!s.is_empty()),
            _ => unreachable!("scalars only"),
        }
    }

    /// Array form of a numeric or boolean value.
    pub fn to_array(&self) -> Option<DynArray> {
        match self {
            Value::Array(a) => Some(a.clone()),
            Value::Int(v) => Some(DynArray::from_vec(&[], vec![*v])),
            Value::Float(v) => Some(DynArray::from_vec(&[], vec![*v])),
            Value::Bool(b) => Some(DynArray::from_vec(&[], vec![u8::from(*b)])),
            Value::Mask(m) => Some(DynArray::from_typed(m.mapv(u8::from))),
            _ => None,
        }
    }

    /// Value stored when materializing a projection.
    pub fn to_sample(&self) -> Option<DynArray> {
        match self {
            Value::Null => None,
            Value::Str(s) => Some(DynArray::from_vec(&[s.len()], s.as_bytes().to_vec())),
            Value::Int(v) => Some(DynArray::from_vec(&[1], vec![*v])),
            Value::Float(v) => Some(DynArray::from_vec(&[1], vec![*v])),
            Value::Bool(b) => Some(DynArray::from_vec(&[1], vec![u8::from(*b)])),
            other => other.to_array(),
        }
    }
}

/// JSON form used by the CLI and view files.
impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        fn nested(a: &ArrayD<f64>, dtype_int: bool) -> serde_json::Value {
            fn go(a: ndarray::ArrayViewD<f64>, int: bool) -> serde_json::Value {
                if a.ndim() == 0 {
                    let v = *a.iter().next().unwrap();
                    return if int {
                        serde_json::json!(v as i64)
                    } else {
                        serde_json::json!(v)
                    };
                }
                serde_json::Value::Array(a.outer_iter().map(|x| go(x, int)).collect())
            }
            go(a.view(), dtype_int)
        }
        match self {
            Value::Null => s.serialize_none(),
            Value::Bool(b) => s.serialize_bool(*b),
            Value::Int(v) => s.serialize_i64(*v),
            Value::Float(v) => s.serialize_f64(*v),
            Value::Str(v) => s.serialize_str(v),
            Value::Array(a) => nested(&a.to_f64(), a.dtype().is_integer()).serialize(s),
            Value::Mask(m) => nested(&m.mapv(|b| f64::from(u8::from(b))), true).serialize(s),
        }
    }
}

fn numeric_array(v: &Value) -> Option<DynArray> {
    match v {
        Value::Str(_) | Value::Null => None,
        other => other.to_array(),
    }
}

fn broadcast<A: Clone, B: Clone, C>(
    a: &ArrayD<A>,
    b: &ArrayD<B>,
    f: impl Fn(A, B) -> C,
) -> Result<ArrayD<C>, TqlError> {
    let shape: Vec<usize> = if a.ndim() == 0 {
        b.shape().to_vec()
    } else if b.ndim() == 0 || a.shape() == b.shape() {
        a.shape().to_vec()
    } else {
        return Err(TqlError::ShapeMismatch(format!(
            "operands of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    let a = a.broadcast(IxDyn(&shape)).unwrap();
    let b = b.broadcast(IxDyn(&shape)).unwrap();
    Ok(Zip::from(&a).and(&b).map_collect(|x, y| f(x.clone(), y.clone())))
}

fn int_op(op: BinOp, a: i64, b: i64) -> i64 {
    match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        _ => unreachable!(),
    }
}

fn float_op(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        _ => unreachable!(),
    }
}

fn cmp_holds(op: BinOp, ord: Option<Ordering>) -> bool {
    match (op, ord) {
        (BinOp::Ne, None) => true,
        (_, None) => false,
        (BinOp::Eq, Some(o)) => o == Ordering::Equal,
        (BinOp::Ne, Some(o)) => o != Ordering::Equal,
        (BinOp::Lt, Some(o)) => o == Ordering::Less,
        (BinOp::Le, Some(o)) => o != Ordering::Greater,
        (BinOp::Gt, Some(o)) => o == Ordering::Greater,
        (BinOp::Ge, Some(o)) => o != Ordering::Less,
        _ => unreachable!(),
    }
}

fn is_int(v: &Value) -> bool {
    match v {
        Value::Int(_) | Value::Bool(_) | Value::Mask(_) => true,
        Value::Array(a) => a.dtype().is_integer(),
        _ => false,
    }
}

/// Arithmetic and comparison. Integer operands stay int64 except under `/`,
/// which always yields float64.
pub fn binary(op: BinOp, lhs: &Value, rhs: &Value) -> Result<Value, TqlError> {
    if matches!(op, BinOp::And | BinOp::Or) {
        let (a, b) = (lhs.truthy()?, rhs.truthy()?);
        return Ok(Value::Bool(if op == BinOp::And { a && b } else { a || b }));
    }
    if matches!(lhs, Value::Null) || matches!(rhs, Value::Null) {
        return Ok(Value::Null);
    }
    if let (Value::Str(a), Value::Str(b)) = (lhs, rhs) {
        if op.is_comparison() {
            return Ok(Value::Bool(cmp_holds(op, Some(a.cmp(b)))));
        }
        return Err(type_err(format!("operator `{}` on strings", op.symbol())));
    }
    let scalar = |v: &Value| matches!(v, Value::Int(_) | Value::Float(_) | Value::Bool(_));
    if scalar(lhs) && scalar(rhs) {
        let ints = is_int(lhs) && is_int(rhs);
        let as_i = |v: &Value| match v {
            Value::Int(i) => *i,
            Value::Bool(b) => i64::from(*b),
            _ => unreachable!(),
        };
        let as_f = |v: &Value| match v {
            Value::Float(f) => *f,
            other => as_i(other) as f64,
        };
        if op.is_comparison() {
            let ord = if ints {
                Some(as_i(lhs).cmp(&as_i(rhs)))
            } else {
                as_f(lhs).partial_cmp(&as_f(rhs))
            };
            return Ok(Value::Bool(cmp_holds(op, ord)));
        }
        if ints && op != BinOp::Div {
            return Ok(Value::Int(int_op(op, as_i(lhs), as_i(rhs))));
        }
        return Ok(Value::Float(float_op(op, as_f(lhs), as_f(rhs))));
    }
    let (Some(a), Some(b)) = (numeric_array(lhs), numeric_array(rhs)) else {
        return Err(type_err(format!(
            "operator `{}` between {} and {}",
            op.symbol(),
            lhs.kind(),
            rhs.kind()
        )));
    };
    let ints = is_int(lhs) && is_int(rhs);
    if op.is_comparison() {
        let m = if ints {
            broadcast(&a.to_i64(), &b.to_i64(), |x, y| cmp_holds(op, Some(x.cmp(&y))))?
        } else {
            broadcast(&a.to_f64(), &b.to_f64(), |x, y| cmp_holds(op, x.partial_cmp(&y)))?
        };
        return Ok(Value::Mask(m));
    }
    if ints && op != BinOp::Div {
        let r = broadcast(&a.to_i64(), &b.to_i64(), |x, y| int_op(op, x, y))?;
        return Ok(Value::Array(DynArray::from_typed(r)));
    }
    let r = broadcast(&a.to_f64(), &b.to_f64(), |x, y| float_op(op, x, y))?;
    Ok(Value::Array(DynArray::from_typed(r)))
}

pub fn negate(v: &Value) -> Result<Value, TqlError> {
    Ok(match v {
        Value::Null => Value::Null,
        Value::Int(i) => Value::Int(i.wrapping_neg()),
        Value::Float(f) => Value::Float(-f),
        Value::Bool(b) => Value::Int(-i64::from(*b)),
        Value::Array(a) if a.dtype().is_integer() => Value::Array(DynArray::from_typed(a.to_i64().mapv(i64::wrapping_neg))),
        Value::Array(a) => Value::Array(DynArray::from_typed(a.to_f64().mapv(|x| -x))),
        other => return Err(type_err(format!("cannot negate {}", other.kind()))),
    })
}

/// Total order used by ORDER BY. Null sorts after every value.
pub fn sort_cmp(a: &Value, b: &Value) -> Ordering {
    fn rank(v: &Value) -> u8 {
        match v {
            Value::Bool(_) => 0,
            Value::Int(_) | Value::Float(_) => 1,
            Value::Str(_) => 2,
            _ => 3,
        }
    }
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => {
            let f = |v: &Value| match v {
                Value::Int(i) => *i as f64,
                Value::Float(f) => *f,
                _ => unreachable!(),
            };
            f(a).total_cmp(&f(b))
        }
        (Value::Bool(x), Value::Bool(y)) => x.cmp(y),
        (Value::Str(x), Value::Str(y)) => x.cmp(y),
        _ => rank(a).cmp(&rank(b)),
    }
}

/// Hashable identity of a value, used to form ARRANGE BY groups.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GroupKey {
    Null,
    Bool(bool),
    Int(i64),
    Float(u64),
    Str(String),
    Array(Dtype, Vec<usize>, Vec<u8>),
}

pub fn group_key(v: &Value) -> GroupKey {
    let v = v.to_scalar().unwrap_or_else(|_| v.clone());
    match v {
        Value::Null => GroupKey::Null,
        Value::Bool(b) => GroupKey::Bool(b),
        Value::Int(i) => GroupKey::Int(i),
        Value::Float(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => GroupKey::Int(f as i64),
        Value::Float(f) => GroupKey::Float(if f == 0.0 { 0 } else { f.to_bits() }),
        Value::Str(s) => GroupKey::Str(s),
        Value::Array(a) => GroupKey::Array(a.dtype(), a.shape().to_vec(), a.to_le_bytes()),
        Value::Mask(m) => GroupKey::Array(Dtype::Uint8, m.shape().to_vec(), m.iter().map(|&b| u8::from(b)).collect()),
    }
}

//! Random query generation and a naive row-by-row evaluator over the AST,
//! independent of the planner and executor.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tensorlake::format::{ChunkPolicy, Htype, HtypeSchema};
use tensorlake::tql::{BinOp, DimSlice, Expr, Func, OrderBy, Projection, Query, UnaryOp, Value};
use tensorlake::{Dataset, DynArray, Dtype, Snapshot};

use super::{mem, rng};

pub type Row = BTreeMap<String, DynArray>;

pub fn schemas() -> Vec<HtypeSchema> {
    vec![
        HtypeSchema::new("labels", Htype::ClassLabel),
        HtypeSchema::new("score", Htype::Generic),
        HtypeSchema::new("vals", Htype::Generic).with_dtype(Dtype::Int32),
        HtypeSchema::new("boxes", Htype::Bbox),
        HtypeSchema::new("gt", Htype::Bbox),
    ]
}

fn boxes(r: &mut ChaCha8Rng) -> DynArray {
    if r.gen_bool(0.08) {
        return DynArray::from_vec(&[0, 4], Vec::<f32>::new());
    }
    let n = r.gen_range(1..=2);
    let mut v = Vec::with_capacity(n * 4);
    for _ in 0..n {
        v.push(r.gen_range(0..40) as f32 * 0.5);
        v.push(r.gen_range(0..40) as f32 * 0.5);
        v.push(r.gen_range(0..30) as f32 * 0.5);
        v.push(r.gen_range(0..30) as f32 * 0.5);
    }
    DynArray::from_vec(&[n, 4], v)
}

pub fn random_row(r: &mut ChaCha8Rng) -> Row {
    let mut row = Row::new();
    row.insert("labels".into(), DynArray::from_vec(&[1], vec![r.gen_range(0..5i32)]));
    let score = r.gen_range(0..100) as f32 / 100.0;
    row.insert("score".into(), DynArray::from_vec(&[1], vec![score]));
    let k = r.gen_range(0..=5);
    let vals: Vec<i32> = (0..k).map(|_| r.gen_range(-5..=5)).collect();
    row.insert("vals".into(), DynArray::from_vec(&[k], vals));
    row.insert("boxes".into(), boxes(r));
    row.insert("gt".into(), boxes(r));
    row
}

/// Dataset of `n` random rows over [`schemas`], with the rows kept in memory.
pub fn build(seed: u64, n: usize) -> (Dataset, Vec<Row>) {
    let mut r = rng(seed);
    let policy = ChunkPolicy::new(2 << 10, 8 << 10).unwrap();
    let mut ds = Dataset::create(mem(), schemas(), policy).unwrap();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let row = random_row(&mut r);
        ds.append_row(row.clone()).unwrap();
        rows.push(row);
    }
    ds.flush().unwrap();
    (ds, rows)
}

// ---------------------------------------------------------------- generator

fn lit_int(r: &mut ChaCha8Rng) -> Expr {
    Expr::Int(r.gen_range(-6..=6))
}

fn lit_float(r: &mut ChaCha8Rng) -> Expr {
    Expr::Float(r.gen_range(-20..=20) as f64 / 4.0)
}

fn shape0() -> Expr {
    Expr::Index {
        target: Box::new(Expr::call(Func::Shape, vec![Expr::Tensor("vals".into())])),
        dims: vec![DimSlice::At(0)],
    }
}

fn iou(r: &mut ChaCha8Rng) -> Expr {
    let gt = if r.gen_bool(0.5) {
        Expr::Str("gt".into())
    } else {
        Expr::Tensor("gt".into())
    };
    Expr::call(Func::Iou, vec![Expr::Tensor("boxes".into()), gt])
}

/// Numeric expression that is scalar-like on every row.
pub fn num(r: &mut ChaCha8Rng, depth: u32) -> Expr {
    if depth == 0 || r.gen_bool(0.4) {
        let vals = || Expr::Tensor("vals".into());
        return match r.gen_range(0..11) {
            0 => Expr::Tensor("labels".into()),
            1 => Expr::Tensor("score".into()),
            2 => lit_int(r),
            3 => lit_float(r),
            4 => Expr::call(Func::Sum, vec![vals()]),
            5 => Expr::call(Func::Mean, vec![vals()]),
            6 => Expr::call(Func::Min, vec![vals()]),
            7 => Expr::call(Func::Max, vec![vals()]),
            8 => shape0(),
            _ => iou(r),
        };
    }
    if r.gen_bool(0.15) {
        // Negating a literal would fold into the literal when reparsed.
        let inner = match num(r, depth - 1) {
            e @ (Expr::Int(_) | Expr::Float(_)) => Expr::binary(BinOp::Add, e, Expr::Tensor("labels".into())),
            e => e,
        };
        return Expr::unary(UnaryOp::Neg, inner);
    }
    let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div].choose(r).unwrap();
    Expr::binary(op, num(r, depth - 1), num(r, depth - 1))
}

pub fn boolean(r: &mut ChaCha8Rng, depth: u32) -> Expr {
    let cmp = [BinOp::Lt, BinOp::Le, BinOp::Gt, BinOp::Ge, BinOp::Eq, BinOp::Ne];
    if depth == 0 || r.gen_bool(0.45) {
        let vals = || Expr::Tensor("vals".into());
        return match r.gen_range(0..6) {
            0..=2 => Expr::binary(*cmp.choose(r).unwrap(), num(r, 1), num(r, 1)),
            3 => Expr::call(Func::Contains, vec![vals(), lit_int(r)]),
            4 => Expr::call(Func::Any, vec![Expr::binary(BinOp::Gt, vals(), lit_int(r))]),
            _ => Expr::call(Func::All, vec![Expr::binary(BinOp::Ge, vals(), lit_int(r))]),
        };
    }
    match r.gen_range(0..3) {
        0 => Expr::binary(BinOp::And, boolean(r, depth - 1), boolean(r, depth - 1)),
        1 => Expr::binary(BinOp::Or, boolean(r, depth - 1), boolean(r, depth - 1)),
        _ => Expr::unary(UnaryOp::Not, boolean(r, depth - 1)),
    }
}

fn slice_bound(r: &mut ChaCha8Rng) -> Option<i64> {
    r.gen_bool(0.7).then(|| r.gen_range(-4..=6))
}

fn projection(r: &mut ChaCha8Rng) -> Expr {
    let t = |n: &str| Expr::Tensor(n.into());
    match r.gen_range(0..9) {
        0 => t(["labels", "score", "vals", "boxes"].choose(r).unwrap()),
        1 => Expr::Index {
            target: Box::new(t("vals")),
            dims: vec![DimSlice::Range {
                start: slice_bound(r),
                stop: slice_bound(r),
            }],
        },
        2 => Expr::call(
            Func::Normalize,
            vec![
                t("boxes"),
                Expr::Array((0..4).map(|_| Expr::Int(r.gen_range(0..20))).collect()),
            ],
        ),
        3 => Expr::call(Func::Shape, vec![t("vals")]),
        4 => Expr::binary(BinOp::Mul, t("vals"), lit_int(r)),
        5 => Expr::unary(UnaryOp::Neg, t("vals")),
        6 => boolean(r, 1),
        _ => num(r, 2),
    }
}

/// A random well-typed query over [`schemas`].
pub fn gen_query(r: &mut ChaCha8Rng, rows: usize) -> Query {
    let n = r.gen_range(1..=3);
    let projections = (0..n)
        .map(|i| Projection {
            expr: projection(r),
            alias: Some(format!("c{i}")),
        })
        .collect();
    let filter = r.gen_bool(0.7).then(|| boolean(r, 2));
    let order_by = r.gen_bool(0.6).then(|| OrderBy {
        expr: num(r, 2),
        descending: r.gen_bool(0.5),
    });
    let arrange_by = r.gen_bool(0.4).then(|| match r.gen_range(0..4) {
        0 => Expr::Tensor("labels".into()),
        1 => Expr::binary(BinOp::Gt, Expr::Tensor("score".into()), Expr::Float(0.5)),
        2 => Expr::call(Func::Min, vec![Expr::Tensor("vals".into())]),
        _ => shape0(),
    });
    let limit = r.gen_bool(0.3).then(|| r.gen_range(0..=rows as u64 + 5));
    Query {
        projections,
        source: "dataset".into(),
        version: None,
        filter,
        order_by,
        arrange_by,
        limit,
    }
}

// ---------------------------------------------------------------- evaluator

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum K {
    Bool,
    Int,
    Float,
}

/// Value model of the naive evaluator. Integers are carried as f64; test
/// data keeps them far below 2^53.
#[derive(Debug, Clone)]
pub enum O {
    Null,
    Str(String),
    S(K, f64),
    A(K, Vec<usize>, Vec<f64>),
}

type R<T> = Result<T, String>;

fn fix(k: K, v: f64) -> f64 {
    if k == K::Float {
        v
    } else {
        v + 0.0
    }
}

fn to_scalar(o: &O) -> R<O> {
    Ok(match o {
        O::A(k, _, d) if d.len() == 1 => O::S(if *k == K::Float { K::Float } else { *k }, d[0]),
        O::A(_, _, d) if d.is_empty() => O::Null,
        O::A(_, s, _) => return Err(format!("array of shape {s:?} as scalar")),
        other => other.clone(),
    })
}

fn truthy(o: &O) -> R<bool> {
    Ok(match to_scalar(o)? {
        O::Null => false,
        O::S(_, v) => v != 0.0,
        O::Str(s) => !s.is_empty(),
        O::A(..) => unreachable!(),
    })
}

fn is_int(o: &O) -> bool {
    matches!(o, O::S(K::Int | K::Bool, _) | O::A(K::Int | K::Bool, ..))
}

fn to_array(o: &O) -> Option<(K, Vec<usize>, Vec<f64>)> {
    match o {
        O::S(K::Bool, v) => Some((K::Int, vec![], vec![*v])),
        O::S(k, v) => Some((*k, vec![], vec![*v])),
        O::A(K::Bool, s, d) => Some((K::Int, s.clone(), d.clone())),
        O::A(k, s, d) => Some((*k, s.clone(), d.clone())),
        _ => None,
    }
}

fn holds(op: BinOp, a: f64, b: f64) -> bool {
    match op {
        BinOp::Eq => a == b,
        BinOp::Ne => a != b,
        BinOp::Lt => a < b,
        BinOp::Le => a <= b,
        BinOp::Gt => a > b,
        BinOp::Ge => a >= b,
        _ => unreachable!(),
    }
}

fn arith(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        _ => unreachable!(),
    }
}

fn is_cmp(op: BinOp) -> bool {
    matches!(op, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
}

fn binary(op: BinOp, l: &O, r: &O) -> R<O> {
    if matches!(op, BinOp::And | BinOp::Or) {
        let (a, b) = (truthy(l)?, truthy(r)?);
        let v = if op == BinOp::And { a && b } else { a || b };
        return Ok(O::S(K::Bool, f64::from(u8::from(v))));
    }
    if matches!(l, O::Null) || matches!(r, O::Null) {
        return Ok(O::Null);
    }
    if let (O::Str(a), O::Str(b)) = (l, r) {
        if is_cmp(op) {
            let ord = a.cmp(b) as i32 as f64;
            return Ok(O::S(K::Bool, f64::from(u8::from(holds(op, ord, 0.0)))));
        }
        return Err("string arithmetic".into());
    }
    let ints = is_int(l) && is_int(r);
    if let (O::S(_, a), O::S(_, b)) = (l, r) {
        if is_cmp(op) {
            return Ok(O::S(K::Bool, f64::from(u8::from(holds(op, *a, *b)))));
        }
        let k = if ints && op != BinOp::Div { K::Int } else { K::Float };
        return Ok(O::S(k, fix(k, arith(op, *a, *b))));
    }
    let (Some((_, sa, da)), Some((_, sb, db))) = (to_array(l), to_array(r)) else {
        return Err("operands are not numeric".into());
    };
    let shape = if sa.is_empty() {
        sb.clone()
    } else if sb.is_empty() || sa == sb {
        sa.clone()
    } else {
        return Err(format!("shapes {sa:?} and {sb:?}"));
    };
    let n: usize = shape.iter().product();
    let at = |d: &[f64], s: &[usize], i: usize| if s.is_empty() { d[0] } else { d[i] };
    if is_cmp(op) {
        let out = (0..n)
            .map(|i| f64::from(u8::from(holds(op, at(&da, &sa, i), at(&db, &sb, i)))))
            .collect();
        return Ok(O::A(K::Bool, shape, out));
    }
    let k = if ints && op != BinOp::Div { K::Int } else { K::Float };
    let out = (0..n).map(|i| fix(k, arith(op, at(&da, &sa, i), at(&db, &sb, i)))).collect();
    Ok(O::A(k, shape, out))
}

fn negate(o: &O) -> R<O> {
    Ok(match o {
        O::Null => O::Null,
        O::S(K::Bool, v) => O::S(K::Int, fix(K::Int, -v)),
        O::S(k, v) => O::S(*k, fix(*k, -v)),
        O::A(K::Bool, ..) => return Err("negating a mask".into()),
        O::A(k, s, d) => O::A(*k, s.clone(), d.iter().map(|v| fix(*k, -v)).collect()),
        O::Str(_) => return Err("negating a string".into()),
    })
}

fn index(o: &O, dims: &[DimSlice]) -> R<O> {
    let Some((k, shape, data)) = (match o {
        O::Null => return Ok(O::Null),
        O::A(k, s, d) => Some((*k, s.clone(), d.clone())),
        other => to_array(other),
    }) else {
        return Err("index of a string".into());
    };
    if data.is_empty() {
        return Ok(O::A(k, shape, data));
    }
    assert!(shape.len() <= 1, "naive index handles vectors only");
    if dims.len() > shape.len() {
        return Err("too many indices".into());
    }
    let n = shape[0] as i64;
    let wrap = |i: i64| if i < 0 { i + n } else { i };
    match dims[0] {
        DimSlice::At(i) => {
            let j = wrap(i);
            if j < 0 || j >= n {
                return Err(format!("index {i} out of bounds"));
            }
            Ok(O::A(k, vec![], vec![data[j as usize]]))
        }
        DimSlice::Range { start, stop } => {
            let clamp = |v: i64| wrap(v).clamp(0, n) as usize;
            let s = start.map_or(0, clamp);
            let e = stop.map_or(n as usize, clamp).max(s);
            Ok(O::A(k, vec![e - s], data[s..e].to_vec()))
        }
    }
}

fn ltwh_iou(a: &[f64], b: &[f64]) -> f64 {
    let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = w.max(0.0) * h.max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn box_list(o: &O) -> R<Option<(Vec<usize>, Vec<f64>)>> {
    match o {
        O::Null => Ok(None),
        O::A(_, _, d) if d.is_empty() => Ok(None),
        O::A(_, s, d) if s.last() == Some(&4) && s.len() <= 2 => Ok(Some((s.clone(), d.clone()))),
        other => Err(format!("not boxes: {other:?}")),
    }
}

fn call(func: Func, args: &[O]) -> R<O> {
    match func {
        Func::Iou => {
            let (Some((_, a)), Some((_, b))) = (box_list(&args[0])?, box_list(&args[1])?) else {
                return Ok(O::Null);
            };
            let n = (a.len() / 4).min(b.len() / 4);
            let mut total = 0.0;
            for i in 0..n {
                total += ltwh_iou(&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
            }
            Ok(O::S(K::Float, if n == 0 { 0.0 } else { total / n as f64 }))
        }
        Func::Normalize => {
            let Some((s, d)) = box_list(&args[0])? else {
                return Ok(O::Null);
            };
            let O::A(_, _, crop) = &args[1] else {
                return Err("crop".into());
            };
            let (x, y) = (crop[0] as f32, crop[1] as f32);
            let out = d
                .chunks(4)
                .flat_map(|b| [(b[0] as f32 - x) as f64, (b[1] as f32 - y) as f64, b[2], b[3]])
                .collect();
            Ok(O::A(K::Float, s, out))
        }
        Func::Contains => {
            let (k, _, d) = match &args[0] {
                O::Null => return Ok(O::Null),
                O::A(k, s, d) => (*k, s.clone(), d.clone()),
                _ => return Err("contains".into()),
            };
            let O::S(_, v) = to_scalar(&args[1])? else {
                return Err("needle".into());
            };
            let _ = k;
            Ok(O::S(K::Bool, f64::from(u8::from(d.contains(&v)))))
        }
        f => {
            let Some((k, shape, d)) = (match &args[0] {
                O::Null => return Ok(O::Null),
                other => to_array(other),
            }) else {
                return Err("reduction of a string".into());
            };
            let int = k != K::Float;
            let n = d.len();
            let b = |v: bool| O::S(K::Bool, f64::from(u8::from(v)));
            Ok(match f {
                Func::Shape => O::A(K::Int, vec![shape.len()], shape.iter().map(|&x| x as f64).collect()),
                Func::Mean if n == 0 => O::Null,
                Func::Mean => O::S(K::Float, d.iter().sum::<f64>() / n as f64),
                Func::Sum => O::S(if int { K::Int } else { K::Float }, d.iter().sum::<f64>() + 0.0),
                Func::Min | Func::Max if n == 0 => O::Null,
                Func::Min => O::S(if int { K::Int } else { K::Float }, d.iter().copied().fold(f64::INFINITY, f64::min)),
                Func::Max => O::S(
                    if int { K::Int } else { K::Float },
                    d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ),
                Func::Any => b(d.iter().any(|&x| x != 0.0)),
                Func::All => b(d.iter().all(|&x| x != 0.0)),
                _ => unreachable!(),
            })
        }
    }
}

fn tensor(row: &Row, name: &str) -> O {
    let a = &row[name];
    let k = if a.dtype().is_float() { K::Float } else { K::Int };
    O::A(k, a.shape().to_vec(), a.iter_f64().collect())
}

pub fn eval(e: &Expr, row: &Row) -> R<O> {
    Ok(match e {
        Expr::Tensor(t) => tensor(row, t),
        Expr::Str(s) if row.contains_key(s) => tensor(row, s),
        Expr::Str(s) => O::Str(s.clone()),
        Expr::Int(v) => O::S(K::Int, *v as f64),
        Expr::Float(v) => O::S(K::Float, *v),
        Expr::Bool(b) => O::S(K::Bool, f64::from(u8::from(*b))),
        Expr::Array(items) => {
            let vals = items.iter().map(|i| eval(i, row)).collect::<R<Vec<_>>>()?;
            let all_int = vals.iter().all(|v| matches!(v, O::S(K::Int, _)));
            let d: Vec<f64> = vals
                .iter()
                .map(|v| match v {
                    O::S(_, x) => *x,
                    _ => f64::NAN,
                })
                .collect();
            O::A(if all_int { K::Int } else { K::Float }, vec![d.len()], d)
        }
        Expr::Index { target, dims } => index(&eval(target, row)?, dims)?,
        Expr::Unary { op: UnaryOp::Neg, expr } => negate(&eval(expr, row)?)?,
        Expr::Unary { op: UnaryOp::Not, expr } => O::S(K::Bool, f64::from(u8::from(!truthy(&eval(expr, row)?)?))),
        Expr::Binary { op, lhs, rhs } => binary(*op, &eval(lhs, row)?, &eval(rhs, row)?)?,
        Expr::Call { func, args } => {
            let vals = args.iter().map(|a| eval(a, row)).collect::<R<Vec<_>>>()?;
            call(*func, &vals)?
        }
    })
}

fn rank(o: &O) -> u8 {
    match o {
        O::S(K::Bool, _) => 0,
        O::S(..) => 1,
        O::Str(_) => 2,
        _ => 3,
    }
}

fn sort_cmp(a: &O, b: &O) -> std::cmp::Ordering {
    match (a, b) {
        (O::S(K::Int, x), O::S(K::Int, y)) => x.partial_cmp(y).unwrap(),
        (O::S(K::Bool, x), O::S(K::Bool, y)) => x.partial_cmp(y).unwrap(),
        (O::S(ka, x), O::S(kb, y)) if *ka != K::Bool && *kb != K::Bool => x.total_cmp(y),
        (O::Str(x), O::Str(y)) => x.cmp(y),
        _ => rank(a).cmp(&rank(b)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum G {
    Null,
    Bool(bool),
    Int(i64),
    Float(u64),
    Str(String),
    Arr(Vec<usize>, Vec<u64>),
}

fn group(o: &O) -> G {
    match to_scalar(o).unwrap_or_else(|_| o.clone()) {
        O::Null => G::Null,
        O::S(K::Bool, v) => G::Bool(v != 0.0),
        O::S(K::Int, v) => G::Int(v as i64),
        O::S(K::Float, f) if f.fract() == 0.0 && f.abs() < 9.0e15 => G::Int(f as i64),
        O::S(K::Float, f) => G::Float(if f == 0.0 { 0 } else { f.to_bits() }),
        O::Str(s) => G::Str(s),
        O::A(_, s, d) => G::Arr(s, d.iter().map(|x| x.to_bits()).collect()),
    }
}

/// Result of evaluating a query naively.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub rows: Vec<u64>,
    pub bounds: Option<Vec<usize>>,
    pub values: Vec<Vec<O>>,
}

pub fn run(q: &Query, data: &[Row]) -> R<Outcome> {
    let mut kept: Vec<(u64, Option<O>, Option<G>)> = Vec::new();
    for (i, row) in data.iter().enumerate() {
        if let Some(f) = &q.filter {
            if !truthy(&eval(f, row)?)? {
                continue;
            }
        }
        let key = match &q.order_by {
            Some(o) => Some(to_scalar(&eval(&o.expr, row)?)?),
            None => None,
        };
        let g = match &q.arrange_by {
            Some(a) => Some(group(&eval(a, row)?)),
            None => None,
        };
        kept.push((i as u64, key, g));
    }
    if let Some(o) = &q.order_by {
        kept.sort_by(|a, b| {
            let (x, y) = (a.1.as_ref().unwrap(), b.1.as_ref().unwrap());
            match (x, y) {
                (O::Null, O::Null) => std::cmp::Ordering::Equal,
                (O::Null, _) => std::cmp::Ordering::Greater,
                (_, O::Null) => std::cmp::Ordering::Less,
                _ if o.descending => sort_cmp(y, x),
                _ => sort_cmp(x, y),
            }
        });
    }
    let (mut rows, mut bounds) = if q.arrange_by.is_some() {
        let mut order: Vec<G> = Vec::new();
        let mut groups: Vec<Vec<u64>> = Vec::new();
        for (r, _, g) in kept {
            let g = g.unwrap();
            match order.iter().position(|x| *x == g) {
                Some(k) => groups[k].push(r),
                None => {
                    order.push(g);
                    groups.push(vec![r]);
                }
            }
        }
        let mut rows = Vec::new();
        let mut bounds = Vec::new();
        for g in groups {
            bounds.push(rows.len());
            rows.extend(g);
        }
        (rows, Some(bounds))
    } else {
        (kept.into_iter().map(|k| k.0).collect(), None)
    };
    if let Some(l) = q.limit {
        rows.truncate(l as usize);
        if let Some(b) = &mut bounds {
            b.retain(|&s| s < rows.len());
        }
    }
    let mut values = Vec::with_capacity(rows.len());
    for &r in &rows {
        let row = &data[r as usize];
        values.push(q.projections.iter().map(|p| eval(&p.expr, row)).collect::<R<Vec<_>>>()?);
    }
    Ok(Outcome { rows, bounds, values })
}

pub fn canon(v: &Value) -> O {
    match v {
        Value::Null => O::Null,
        Value::Bool(b) => O::S(K::Bool, f64::from(u8::from(*b))),
        Value::Int(i) => O::S(K::Int, *i as f64),
        Value::Float(f) => O::S(K::Float, *f),
        Value::Str(s) => O::Str(s.clone()),
        Value::Array(a) => O::A(
            if a.dtype().is_float() { K::Float } else { K::Int },
            a.shape().to_vec(),
            a.iter_f64().collect(),
        ),
        Value::Mask(m) => O::A(K::Bool, m.shape().to_vec(), m.iter().map(|&b| f64::from(u8::from(b))).collect()),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b || (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

pub fn same(a: &O, b: &O) -> bool {
    match (a, b) {
        (O::Null, O::Null) => true,
        (O::Str(x), O::Str(y)) => x == y,
        (O::S(ka, x), O::S(kb, y)) => ka == kb && close(*x, *y),
        (O::A(ka, sa, x), O::A(kb, sb, y)) => {
            ka == kb && sa == sb && x.len() == y.len() && x.iter().zip(y).all(|(p, q)| close(*p, *q))
        }
        _ => false,
    }
}

/// Executes `q` through the engine and through the naive evaluator.
/// `Ok(true)` when both succeed and agree, `Ok(false)` when both fail.
pub fn compare(snap: &Snapshot, data: &[Row], q: &Query) -> Result<bool, String> {
    let text = q.to_string();
    let expected = run(q, data);
    let got = snap.query(&text).map_err(|e| e.to_string()).and_then(|view| {
        let names: Vec<String> = view.column_names().iter().map(|s| s.to_string()).collect();
        let mut values = Vec::with_capacity(view.len());
        for i in 0..view.len() {
            let mut row = Vec::with_capacity(names.len());
            for n in &names {
                row.push(canon(&view.get(i, n).map_err(|e| e.to_string())?));
            }
            values.push(row);
        }
        Ok(Outcome {
            rows: view.row_order().to_vec(),
            bounds: view.group_boundaries().map(<[usize]>::to_vec),
            values,
        })
    });
    match (expected, got) {
        (Err(_), Err(_)) => Ok(false),
        (Ok(e), Err(g)) => Err(format!("{text}: engine failed ({g}), oracle returned {} rows", e.rows.len())),
        (Err(e), Ok(_)) => Err(format!("{text}: oracle failed ({e}), engine succeeded")),
        (Ok(e), Ok(g)) => {
            if e.rows != g.rows {
                return Err(format!("{text}: row order {:?} vs {:?}", g.rows, e.rows));
            }
            if e.bounds != g.bounds {
                return Err(format!("{text}: groups {:?} vs {:?}", g.bounds, e.bounds));
            }
            for (i, (er, gr)) in e.values.iter().zip(&g.values).enumerate() {
                for (c, (ev, gv)) in er.iter().zip(gr).enumerate() {
                    if !same(ev, gv) {
                        return Err(format!("{text}: position {i} column {c}: {gv:?} vs {ev:?}"));
                    }
                }
            }
            Ok(true)
        }
    }
}

/// Runs `count` generated queries over fresh random datasets of at most
/// 1000 rows. Returns (agreements, queries where both sides failed).
pub fn equivalence(seed: u64, count: usize) -> Result<(usize, usize), String> {
    let mut r = rng(seed);
    let per_dataset = 50;
    let (mut ok, mut failed) = (0, 0);
    let mut done = 0;
    while done < count {
        let n = r.gen_range(1..=1000);
        let (mut ds, data) = build(r.gen(), n);
        let snap = ds.snapshot().map_err(|e| e.to_string())?;
        for _ in 0..per_dataset.min(count - done) {
            let q = gen_query(&mut r, n);
            if compare(&snap, &data, &q)? {
                ok += 1;
            } else {
                failed += 1;
            }
            done += 1;
        }
    }
    Ok((ok, failed))
}

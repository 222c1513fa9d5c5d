//! Type checking and compilation of a parsed query into an executable plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use super::ast::{BinOp, DimSlice, Expr, Query, UnaryOp};
use super::builtins::{self, Func};
use super::value::{self, Value};
use super::TqlError;
use crate::array::DynArray;
use crate::error::{Error, Result};
use crate::format::{BboxFormat, Htype, HtypeSchema};

/// Static type of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Bool,
    Int,
    Float,
    /// Numeric scalar whose int/float kind depends on the data.
    Num,
    Str,
    /// Numeric array of known or unknown rank.
    Array(Option<usize>),
    Mask(Option<usize>),
}

impl Ty {
    fn is_str(self) -> bool {
        self == Ty::Str
    }

    fn is_arrayish(self) -> bool {
        matches!(self, Ty::Array(_) | Ty::Mask(_))
    }

    fn ndim(self) -> Option<usize> {
        match self {
            Ty::Array(n) | Ty::Mask(n) => n,
            _ => Some(0),
        }
    }

    /// May evaluate to a scalar for every row.
    pub fn is_scalar_like(self) -> bool {
        !self.is_arrayish() || self.ndim().map_or(true, |n| n <= 1)
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ty::Array(Some(n)) => write!(f, "{n}-d array"),
            Ty::Array(None) => f.write_str("array"),
            Ty::Mask(_) => f.write_str("bool array"),
            other => write!(f, "{}", format!("{other:?}").to_lowercase()),
        }
    }
}

/// Compiled expression node.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Tensor(String),
    /// Index expression applied directly to a tensor; reads only the covered region.
    Region { tensor: String, dims: Vec<DimSlice> },
    Const(Value),
    ArrayLit(Vec<Node>),
    Index { target: Box<Node>, dims: Vec<DimSlice> },
    Neg(Box<Node>),
    Not(Box<Node>),
    Binary { op: BinOp, lhs: Box<Node>, rhs: Box<Node> },
    Call { func: Func, args: Vec<Node>, formats: Vec<BboxFormat> },
}

/// Sample access for one row.
pub trait RowSource {
    fn sample(&self, tensor: &str) -> Result<DynArray>;
    fn shape(&self, tensor: &str) -> Result<Vec<usize>>;
    fn region(&self, tensor: &str, region: &[Range<usize>]) -> Result<DynArray>;
}

fn resolve_dims(shape: &[usize], dims: &[DimSlice]) -> std::result::Result<(Vec<Range<usize>>, Vec<usize>), TqlError> {
    if dims.len() > shape.len() {
        return Err(TqlError::ShapeMismatch(format!(
            "{} indices into an array of shape {shape:?}",
            dims.len()
        )));
    }
    let mut ranges = Vec::with_capacity(shape.len());
    let mut keep = Vec::new();
    for (ax, &n) in shape.iter().enumerate() {
        let wrap = |i: i64| -> i64 {
            if i < 0 {
                i + n as i64
            } else {
                i
            }
        };
        match dims.get(ax) {
            None => {
                keep.push(n);
                ranges.push(0..n);
            }
            Some(DimSlice::At(i)) => {
                let j = wrap(*i);
                if j < 0 || j >= n as i64 {
                    return Err(TqlError::ShapeMismatch(format!(
                        "index {i} out of bounds for axis {ax} of length {n}"
                    )));
                }
                ranges.push(j as usize..j as usize + 1);
            }
            Some(DimSlice::Range { start, stop }) => {
                let clamp = |v: i64| wrap(v).clamp(0, n as i64) as usize;
                let s = start.map_or(0, clamp);
                let e = stop.map_or(n, clamp).max(s);
                keep.push(e - s);
                ranges.push(s..e);
            }
        }
    }
    Ok((ranges, keep))
}

fn apply_index(a: &DynArray, dims: &[DimSlice]) -> std::result::Result<Value, TqlError> {
    if a.is_empty() {
        return Ok(Value::Array(a.clone()));
    }
    let (ranges, keep) = resolve_dims(a.shape(), dims)?;
    let sliced = a.slice_region(&ranges);
    Ok(Value::Array(sliced.reshape(&keep).expect("same element count")))
}

fn query_err(e: TqlError) -> Error {
    Error::Query(e)
}

impl Node {
    pub fn eval(&self, row: &dyn RowSource) -> Result<Value> {
        Ok(match self {
            Node::Tensor(t) => Value::Array(row.sample(t)?),
            Node::Region { tensor, dims } => {
                let shape = row.shape(tensor)?;
                if shape.iter().product::<usize>() == 0 {
                    return Ok(Value::Array(row.sample(tensor)?));
                }
                let (ranges, keep) = resolve_dims(&shape, dims).map_err(query_err)?;
                let a = row.region(tensor, &ranges)?;
                Value::Array(a.reshape(&keep).expect("same element count"))
            }
            Node::Const(v) => v.clone(),
            Node::ArrayLit(items) => {
                let vals = items
                    .iter()
                    .map(|n| n.eval(row)?.to_scalar().map_err(query_err))
                    .collect::<Result<Vec<_>>>()?;
                builtins::array_literal(&vals).map_err(query_err)?
            }
            Node::Index { target, dims } => match target.eval(row)? {
                Value::Null => Value::Null,
                v => {
                    let a = v
                        .to_array()
                        .ok_or_else(|| query_err(TqlError::Type(format!("cannot index {}", v.kind()))))?;
                    apply_index(&a, dims).map_err(query_err)?
                }
            },
            Node::Neg(e) => value::negate(&e.eval(row)?).map_err(query_err)?,
            Node::Not(e) => Value::Bool(!e.eval(row)?.truthy().map_err(query_err)?),
            Node::Binary { op, lhs, rhs } => {
                value::binary(*op, &lhs.eval(row)?, &rhs.eval(row)?).map_err(query_err)?
            }
            Node::Call { func, args, formats } => {
                let vals = args.iter().map(|a| a.eval(row)).collect::<Result<Vec<_>>>()?;
                match func {
                    Func::Iou => builtins::iou(&vals[0], formats[0], &vals[1], formats[1]),
                    Func::Normalize => builtins::normalize(&vals[0], formats[0], &vals[1]),
                    Func::Contains => builtins::contains(&vals[0], &vals[1]),
                    f => builtins::reduce(*f, &vals[0]),
                }
                .map_err(query_err)?
            }
        })
    }

    /// Tensors read when evaluating this node.
    pub fn tensors(&self, out: &mut BTreeSet<String>) {
        match self {
            Node::Tensor(t) | Node::Region { tensor: t, .. } => {
                out.insert(t.clone());
            }
            Node::Const(_) => {}
            Node::ArrayLit(items) => items.iter().for_each(|n| n.tensors(out)),
            Node::Index { target, .. } | Node::Neg(target) | Node::Not(target) => target.tensors(out),
            Node::Binary { lhs, rhs, .. } => {
                lhs.tensors(out);
                rhs.tensors(out);
            }
            Node::Call { args, .. } => args.iter().for_each(|n| n.tensors(out)),
        }
    }
}

/// One output column of a view.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub ty: Ty,
    pub(crate) node: Node,
    /// Schema of the source tensor when the column is a plain or sliced tensor reference.
    pub(crate) source: Option<HtypeSchema>,
}

impl Column {
    pub fn eval(&self, row: &dyn RowSource) -> Result<Value> {
        self.node.eval(row)
    }

    pub fn tensors(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.node.tensors(&mut out);
        out
    }

    /// Identity projection of a tensor.
    pub fn identity(schema: &HtypeSchema) -> Column {
        Column {
            name: schema.name.clone(),
            ty: Ty::Array(schema.sample_ndim()),
            node: Node::Tensor(schema.name.clone()),
            source: Some(schema.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Scan,
    Filter,
    Sort,
    Arrange,
    Limit,
    Project,
}

#[derive(Debug, Clone)]
pub struct QueryPlan {
    pub query: Query,
    pub columns: Vec<Column>,
    pub filter: Option<Node>,
    pub order: Option<(Node, bool)>,
    pub arrange: Option<Node>,
    pub limit: Option<u64>,
    pub stages: Vec<Stage>,
}

impl QueryPlan {
    /// Every tensor the query reads, across all clauses.
    pub fn fetch_set(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &self.columns {
            c.node.tensors(&mut out);
        }
        for n in self.filter.iter().chain(self.order.as_ref().map(|o| &o.0)).chain(&self.arrange) {
            n.tensors(&mut out);
        }
        out
    }

    /// Tensors needed to compute the row order.
    pub fn order_fetch_set(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for n in self.filter.iter().chain(self.order.as_ref().map(|o| &o.0)).chain(&self.arrange) {
            n.tensors(&mut out);
        }
        out
    }
}

struct Checker<'a> {
    schemas: BTreeMap<&'a str, &'a HtypeSchema>,
}

fn type_err(msg: String) -> TqlError {
    TqlError::Type(msg)
}

impl Checker<'_> {
    fn tensor(&self, name: &str) -> Result<(Node, Ty), TqlError> {
        let s = self
            .schemas
            .get(name)
            .ok_or_else(|| TqlError::UnknownTensor(name.to_string()))?;
        Ok((Node::Tensor(name.to_string()), Ty::Array(s.sample_ndim())))
    }

    fn bbox_format(&self, node: &Node) -> BboxFormat {
        match node {
            Node::Tensor(t) | Node::Region { tensor: t, .. } => {
                self.schemas.get(t.as_str()).map(|s| s.bbox_format()).unwrap_or_default()
            }
            _ => BboxFormat::default(),
        }
    }

    fn check(&self, e: &Expr) -> Result<(Node, Ty), TqlError> {
        Ok(match e {
            Expr::Tensor(name) => self.tensor(name)?,
            Expr::Str(s) if self.schemas.contains_key(s.as_str()) => self.tensor(s)?,
            Expr::Str(s) => (Node::Const(Value::Str(s.clone())), Ty::Str),
            Expr::Int(v) => (Node::Const(Value::Int(*v)), Ty::Int),
            Expr::Float(v) => (Node::Const(Value::Float(*v)), Ty::Float),
            Expr::Bool(b) => (Node::Const(Value::Bool(*b)), Ty::Bool),
            Expr::Array(items) => {
                let mut nodes = Vec::with_capacity(items.len());
                for item in items {
                    let (n, t) = self.check(item)?;
                    if t.is_str() || t.is_arrayish() {
                        return Err(type_err(format!("array literals hold numbers, not {t}")));
                    }
                    nodes.push(n);
                }
                let consts: Option<Vec<Value>> = nodes
                    .iter()
                    .map(|n| match n {
                        Node::Const(v) => Some(v.clone()),
                        _ => None,
                    })
                    .collect();
                let node = match consts {
                    Some(vals) => Node::Const(builtins::array_literal(&vals)?),
                    None => Node::ArrayLit(nodes),
                };
                (node, Ty::Array(Some(1)))
            }
            Expr::Index { target, dims } => {
                let (n, t) = self.check(target)?;
                if !t.is_arrayish() {
                    return Err(type_err(format!("cannot index into {t}")));
                }
                if let Some(nd) = t.ndim() {
                    if dims.len() > nd {
                        return Err(TqlError::ShapeMismatch(format!("{} indices into a {nd}-d array", dims.len())));
                    }
                }
                let dropped = dims.iter().filter(|d| matches!(d, DimSlice::At(_))).count();
                let ty = Ty::Array(t.ndim().map(|nd| nd - dropped));
                let node = match n {
                    Node::Tensor(tensor) => Node::Region {
                        tensor,
                        dims: dims.clone(),
                    },
                    other => Node::Index {
                        target: Box::new(other),
                        dims: dims.clone(),
                    },
                };
                (node, ty)
            }
            Expr::Unary { op: UnaryOp::Neg, expr } => {
                let (n, t) = self.check(expr)?;
                if t.is_str() {
                    return Err(type_err("cannot negate a string".into()));
                }
                let ty = match t {
                    Ty::Bool => Ty::Int,
                    Ty::Mask(d) => Ty::Array(d),
                    other => other,
                };
                (Node::Neg(Box::new(n)), ty)
            }
            Expr::Unary { op: UnaryOp::Not, expr } => {
                let (n, _) = self.check(expr)?;
                (Node::Not(Box::new(n)), Ty::Bool)
            }
            Expr::Binary { op, lhs, rhs } => {
                let (ln, lt) = self.check(lhs)?;
                let (rn, rt) = self.check(rhs)?;
                let ty = if matches!(op, BinOp::And | BinOp::Or) {
                    Ty::Bool
                } else if op.is_comparison() {
                    if lt.is_str() != rt.is_str() {
                        return Err(type_err(format!("cannot compare {lt} with {rt}")));
                    }
                    if lt.is_arrayish() || rt.is_arrayish() {
                        Ty::Mask(lt.ndim().zip(rt.ndim()).map(|(a, b)| a.max(b)))
                    } else {
                        Ty::Bool
                    }
                } else {
                    if lt.is_str() || rt.is_str() {
                        return Err(type_err(format!("operator `{}` on a string", op.symbol())));
                    }
                    if lt.is_arrayish() || rt.is_arrayish() {
                        Ty::Array(lt.ndim().zip(rt.ndim()).map(|(a, b)| a.max(b)))
                    } else if *op == BinOp::Div || lt == Ty::Float || rt == Ty::Float {
                        Ty::Float
                    } else if lt == Ty::Num || rt == Ty::Num {
                        Ty::Num
                    } else {
                        Ty::Int
                    }
                };
                (
                    Node::Binary {
                        op: *op,
                        lhs: Box::new(ln),
                        rhs: Box::new(rn),
                    },
                    ty,
                )
            }
            Expr::Call { func, args } => self.call(*func, args)?,
        })
    }

    fn call(&self, func: Func, args: &[Expr]) -> Result<(Node, Ty), TqlError> {
        if args.len() != func.arity() {
            return Err(type_err(format!(
                "{} takes {} argument(s), got {}",
                func.name(),
                func.arity(),
                args.len()
            )));
        }
        let checked = args.iter().map(|a| self.check(a)).collect::<Result<Vec<_>, _>>()?;
        let tys: Vec<Ty> = checked.iter().map(|(_, t)| *t).collect();
        let ty = match func {
            Func::Iou => {
                if let Some(t) = tys.iter().find(|t| !matches!(t, Ty::Array(_))) {
                    return Err(type_err(format!("IOU expects boxes, got {t}")));
                }
                Ty::Float
            }
            Func::Normalize => {
                if !matches!(tys[0], Ty::Array(_)) {
                    return Err(type_err(format!("NORMALIZE expects boxes, got {}", tys[0])));
                }
                match &checked[1].0 {
                    Node::Const(Value::Array(c)) if c.len() != 4 => {
                        return Err(TqlError::ShapeMismatch(format!("crop window needs 4 values, got {}", c.len())))
                    }
                    _ if !matches!(tys[1], Ty::Array(Some(1)) | Ty::Array(None)) => {
                        return Err(type_err("NORMALIZE crop must be a [x, y, w, h] array".into()))
                    }
                    _ => {}
                }
                tys[0]
            }
            Func::Contains => {
                if !(tys[0].is_arrayish() || tys[0].is_str()) {
                    return Err(type_err(format!("CONTAINS searches an array, got {}", tys[0])));
                }
                if !matches!(checked[1].0, Node::Const(_)) || tys[1].is_arrayish() {
                    return Err(type_err("CONTAINS needs a literal to search for".into()));
                }
                Ty::Bool
            }
            Func::Shape => Ty::Array(Some(1)),
            f => {
                if tys[0].is_str() {
                    return Err(type_err(format!("{} of a string", f.name())));
                }
                match f {
                    Func::Mean => Ty::Float,
                    Func::Any | Func::All => Ty::Bool,
                    _ => Ty::Num,
                }
            }
        };
        let formats = checked.iter().map(|(n, _)| self.bbox_format(n)).collect();
        let args = checked.into_iter().map(|(n, _)| n).collect();
        Ok((Node::Call { func, args, formats }, ty))
    }
}

/// Checks `query` against the tensor schemas and compiles it.
pub fn plan(query: &Query, schemas: &[HtypeSchema]) -> Result<QueryPlan, TqlError> {
    let checker = Checker {
        schemas: schemas.iter().map(|s| (s.name.as_str(), s)).collect(),
    };
    let mut columns = Vec::new();
    let mut names = BTreeSet::new();
    for p in &query.projections {
        let (node, ty) = checker.check(&p.expr)?;
        let name = match (&p.alias, &node) {
            (Some(a), _) => a.clone(),
            (None, Node::Tensor(t)) => t.clone(),
            (None, _) => p.expr.to_string(),
        };
        if !names.insert(name.clone()) {
            return Err(TqlError::DuplicateAlias(name));
        }
        let source = match &node {
            Node::Tensor(t) => checker.schemas.get(t.as_str()).map(|s| (*s).clone()),
            Node::Region { tensor, dims } => checker
                .schemas
                .get(tensor.as_str())
                .filter(|_| dims.iter().all(|d| matches!(d, DimSlice::Range { .. })))
                .map(|s| (*s).clone()),
            Node::Call {
                func: Func::Normalize,
                args,
                ..
            } => match &args[0] {
                Node::Tensor(t) => checker
                    .schemas
                    .get(t.as_str())
                    .filter(|s| s.htype == Htype::Bbox)
                    .map(|s| (*s).clone()),
                _ => None,
            },
            _ => None,
        };
        columns.push(Column { name, ty, node, source });
    }
    let mut stages = vec![Stage::Scan];
    let filter = match &query.filter {
        Some(w) => {
            let (n, t) = checker.check(w)?;
            if !matches!(t, Ty::Bool | Ty::Mask(_)) {
                return Err(type_err(format!("WHERE needs a boolean condition, got {t}")));
            }
            stages.push(Stage::Filter);
            Some(n)
        }
        None => None,
    };
    let order = match &query.order_by {
        Some(o) => {
            let (n, t) = checker.check(&o.expr)?;
            if !t.is_scalar_like() {
                return Err(type_err(format!("ORDER BY needs a scalar key, got {t}")));
            }
            stages.push(Stage::Sort);
            Some((n, o.descending))
        }
        None => None,
    };
    let arrange = match &query.arrange_by {
        Some(a) => {
            stages.push(Stage::Arrange);
            Some(checker.check(a)?.0)
        }
        None => None,
    };
    if query.limit.is_some() {
        stages.push(Stage::Limit);
    }
    stages.push(Stage::Project);
    Ok(QueryPlan {
        query: query.clone(),
        columns,
        filter,
        order,
        arrange,
        limit: query.limit,
        stages,
    })
}

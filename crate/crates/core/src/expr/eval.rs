use std::collections::{BTreeMap, HashMap};

use super::{BandRef, BinOp, Expr, ExprError, ExprProgram, Func};
use crate::store::{Chunk, DType};

/// NODATA of every expression output chunk (f32).
pub const OUTPUT_NODATA: f64 = -3.4e38_f32 as f64;

/// Source of per-pixel band values for scalar evaluation.
pub trait Bindings {
    /// `None` when the band is NODATA at this pixel.
    fn value(&self, band: &BandRef) -> Option<f64>;
}

impl Bindings for BTreeMap<BandRef, Option<f64>> {
    fn value(&self, band: &BandRef) -> Option<f64> {
        self.get(band).copied().flatten()
    }
}

impl Bindings for HashMap<BandRef, Option<f64>> {
    fn value(&self, band: &BandRef) -> Option<f64> {
        self.get(band).copied().flatten()
    }
}

impl<F: Fn(&BandRef) -> Option<f64>> Bindings for F {
    fn value(&self, band: &BandRef) -> Option<f64> {
        self(band)
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn apply(op: BinOp, a: f64, b: f64) -> f64 {
    let t = |c: bool| if c { 1.0 } else { 0.0 };
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Lt => t(a < b),
        BinOp::Le => t(a <= b),
        BinOp::Gt => t(a > b),
        BinOp::Ge => t(a >= b),
        BinOp::Eq => t(a == b),
        BinOp::Ne => t(a != b),
    }
}

pub(super) fn eval_pixel(e: &Expr, env: &dyn Bindings) -> Option<f64> {
    match e {
        Expr::Num(v) => finite(*v),
        Expr::Band(b) => env.value(b).and_then(finite),
        Expr::Nodata => None,
        Expr::Neg(x) => Some(-eval_pixel(x, env)?),
        Expr::Bin { op, lhs, rhs } => {
            let a = eval_pixel(lhs, env)?;
            let b = eval_pixel(rhs, env)?;
            if *op == BinOp::Div && b == 0.0 {
                return None;
            }
            finite(apply(*op, a, b))
        }
        Expr::Call { func: Func::Ifelse, args } => {
            if eval_pixel(&args[0], env)? != 0.0 {
                eval_pixel(&args[1], env)
            } else {
                eval_pixel(&args[2], env)
            }
        }
        Expr::Call { func, args } => {
            let vals = args.iter().map(|a| eval_pixel(a, env)).collect::<Option<Vec<f64>>>()?;
            Some(match func {
                Func::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
                Func::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Func::Abs => vals[0].abs(),
                Func::Clamp => vals[0].max(vals[1]).min(vals[2]),
                Func::Ifelse => unreachable!(),
            })
        }
    }
}

/// Maps a scalar result to the stored f32 cell value.
pub fn output_cell(v: Option<f64>) -> f64 {
    match v.map(|x| x as f32) {
        Some(x) if x.is_finite() => x as f64,
        _ => OUTPUT_NODATA,
    }
}

// Vectorized evaluation uses NaN as the in-flight NODATA marker.
enum Val {
    Const(f64),
    Arr(Vec<f64>),
}

fn norm(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

fn map1(a: Val, f: impl Fn(f64) -> f64) -> Val {
    match a {
        Val::Const(x) => Val::Const(f(x)),
        Val::Arr(mut v) => {
            v.iter_mut().for_each(|x| *x = f(*x));
            Val::Arr(v)
        }
    }
}

fn map2(a: Val, b: Val, f: impl Fn(f64, f64) -> f64) -> Val {
    match (a, b) {
        (Val::Const(x), Val::Const(y)) => Val::Const(f(x, y)),
        (Val::Arr(mut v), Val::Const(y)) => {
            v.iter_mut().for_each(|x| *x = f(*x, y));
            Val::Arr(v)
        }
        (Val::Const(x), Val::Arr(mut v)) => {
            v.iter_mut().for_each(|y| *y = f(x, *y));
            Val::Arr(v)
        }
        (Val::Arr(mut v), Val::Arr(w)) => {
            v.iter_mut().zip(&w).for_each(|(x, y)| *x = f(*x, *y));
            Val::Arr(v)
        }
    }
}

fn get(v: &Val, i: usize) -> f64 {
    match v {
        Val::Const(x) => *x,
        Val::Arr(a) => a[i],
    }
}

fn binary(op: BinOp, a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() || (op == BinOp::Div && b == 0.0) {
        return f64::NAN;
    }
    norm(apply(op, a, b))
}

fn eval_vec(e: &Expr, inputs: &BTreeMap<&BandRef, Vec<f64>>, n: usize) -> Val {
    match e {
        Expr::Num(v) => Val::Const(norm(*v)),
        Expr::Nodata => Val::Const(f64::NAN),
        Expr::Band(b) => Val::Arr(inputs[b].clone()),
        Expr::Neg(x) => map1(eval_vec(x, inputs, n), |v| -v),
        Expr::Bin { op, lhs, rhs } => {
            let op = *op;
            map2(eval_vec(lhs, inputs, n), eval_vec(rhs, inputs, n), move |a, b| binary(op, a, b))
        }
        Expr::Call { func: Func::Ifelse, args } => {
            let c = eval_vec(&args[0], inputs, n);
            let a = eval_vec(&args[1], inputs, n);
            let b = eval_vec(&args[2], inputs, n);
            let pick = |c: f64, a: f64, b: f64| {
                if c.is_nan() {
                    f64::NAN
                } else if c != 0.0 {
                    a
                } else {
                    b
                }
            };
            match (&c, &a, &b) {
                (Val::Const(c), Val::Const(a), Val::Const(b)) => Val::Const(pick(*c, *a, *b)),
                _ => Val::Arr((0..n).map(|i| pick(get(&c, i), get(&a, i), get(&b, i))).collect()),
            }
        }
        Expr::Call { func, args } => {
            let mut vals = args.iter().map(|a| eval_vec(a, inputs, n));
            let first = vals.next().expect("arity checked at parse");
            match func {
                Func::Abs => map1(first, f64::abs),
                Func::Min | Func::Max => {
                    let pick = if *func == Func::Min { f64::min } else { f64::max };
                    vals.fold(first, |acc, v| {
                        map2(acc, v, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { pick(a, b) })
                    })
                }
                Func::Clamp => {
                    let lo = vals.next().expect("arity");
                    let hi = vals.next().expect("arity");
                    let x = map2(first, lo, |x, l| if x.is_nan() || l.is_nan() { f64::NAN } else { x.max(l) });
                    map2(x, hi, |x, h| if x.is_nan() || h.is_nan() { f64::NAN } else { x.min(h) })
                }
                Func::Ifelse => unreachable!(),
            }
        }
    }
}

/// Evaluates `prog` over aligned chunks, one per referenced band. Output is
/// f32 with [`OUTPUT_NODATA`]; cell `i` equals `output_cell(eval_pixel)` at `i`.
pub fn eval_chunk(prog: &ExprProgram, inputs: &BTreeMap<BandRef, &Chunk>) -> Result<Chunk, ExprError> {
    let bands = prog.bands();
    let mut dims = None;
    for c in inputs.values() {
        match dims {
            None => dims = Some((c.width, c.height)),
            Some(d) if d != (c.width, c.height) => return Err(ExprError::GeometryMismatch),
            _ => {}
        }
    }
    let mut arrays = BTreeMap::new();
    for b in &bands {
        let c = inputs.get(b).ok_or_else(|| ExprError::MissingBand(b.clone()))?;
        let v = c.values.iter().map(|&x| if c.is_nodata(x) { f64::NAN } else { norm(x) }).collect();
        arrays.insert(b, v);
    }
    let (w, h) = dims.unwrap_or((crate::geo::TILE_SIZE, crate::geo::TILE_SIZE));
    let n = (w * h) as usize;
    let values = match eval_vec(&prog.expr, &arrays, n) {
        Val::Const(x) => vec![output_cell(finite(x)); n],
        Val::Arr(v) => v.into_iter().map(|x| output_cell(finite(x))).collect(),
    };
    Ok(Chunk { dtype: DType::F32, width: w, height: h, nodata: Some(OUTPUT_NODATA), values })
}

//! Symbolic scalar expressions over named variables.
//!
//! This is the carrier type for everything downstream: metric entries,
//! potentials, input matrices, flat parameterizations and feedback laws are
//! all trees of [`Expr`]. The type supports parsing from a small infix
//! grammar, symbolic partial differentiation, simultaneous substitution,
//! conservative simplification and numeric evaluation. Expressions are
//! immutable and cheaply cloneable (`Arc`-backed), so derived expressions
//! share subtrees with their parents.

mod parse;
mod print;
mod program;
mod simplify;

pub use parse::parse;
pub use program::Program;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

/// Map from variable name to value used by [`Expr::eval`].
pub type VarBinding = HashMap<String, f64>;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("parse error at byte {position}: {message}")]
    Parse { message: String, position: usize },
    #[error("non-integer exponent at byte {position}")]
    NonIntegerExponent { position: usize },
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Constant(f64),
    Var(String),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    /// Integer exponents only; derivatives stay closed-form.
    Pow(Expr, i32),
    Sin(Expr),
    Cos(Expr),
    Tan(Expr),
    Sqrt(Expr),
    /// `Atan2(y, x)` follows the `f64::atan2` argument order.
    Atan2(Expr, Expr),
}

/// A symbolic expression. Clones share the underlying tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl Expr {
    pub fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn num(value: f64) -> Self {
        Expr::new(Node::Constant(value))
    }

    pub fn var(name: impl Into<String>) -> Self {
        Expr::new(Node::Var(name.into()))
    }

    pub fn zero() -> Self {
        Expr::num(0.0)
    }

    pub fn one() -> Self {
        Expr::num(1.0)
    }

    pub fn sin(&self) -> Self {
        Expr::new(Node::Sin(self.clone()))
    }

    pub fn cos(&self) -> Self {
        Expr::new(Node::Cos(self.clone()))
    }

    pub fn tan(&self) -> Self {
        Expr::new(Node::Tan(self.clone()))
    }

    pub fn sqrt(&self) -> Self {
        Expr::new(Node::Sqrt(self.clone()))
    }

    pub fn pow(&self, exponent: i32) -> Self {
        Expr::new(Node::Pow(self.clone(), exponent))
    }

    pub fn atan2(y: &Expr, x: &Expr) -> Self {
        Expr::new(Node::Atan2(y.clone(), x.clone()))
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.node() {
            Node::Constant(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.node(), Node::Constant(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self.node(), Node::Constant(c) if *c == 1.0)
    }

    /// Numeric value at a full binding. Errors on unbound variables and on
    /// the analytic singularities (division by zero, sqrt of a negative).
    /// Shared subtrees are evaluated once.
    pub fn eval(&self, binding: &VarBinding) -> Result<f64, ExprError> {
        let mut memo = HashMap::new();
        self.eval_memo(binding, &mut memo)
    }

    fn eval_memo(
        &self,
        binding: &VarBinding,
        memo: &mut HashMap<usize, f64>,
    ) -> Result<f64, ExprError> {
        if let Some(hit) = memo.get(&self.ptr_id()) {
            return Ok(*hit);
        }
        let value = match self.node() {
            Node::Constant(c) => *c,
            Node::Var(name) => binding
                .get(name)
                .copied()
                .ok_or_else(|| ExprError::UnboundVariable(name.clone()))?,
            Node::Neg(a) => -a.eval_memo(binding, memo)?,
            Node::Add(a, b) => a.eval_memo(binding, memo)? + b.eval_memo(binding, memo)?,
            Node::Sub(a, b) => a.eval_memo(binding, memo)? - b.eval_memo(binding, memo)?,
            Node::Mul(a, b) => a.eval_memo(binding, memo)? * b.eval_memo(binding, memo)?,
            Node::Div(a, b) => {
                let den = b.eval_memo(binding, memo)?;
                if den == 0.0 {
                    return Err(ExprError::DivisionByZero);
                }
                a.eval_memo(binding, memo)? / den
            }
            Node::Pow(a, n) => {
                let base = a.eval_memo(binding, memo)?;
                if base == 0.0 && *n < 0 {
                    return Err(ExprError::DivisionByZero);
                }
                base.powi(*n)
            }
            Node::Sin(a) => a.eval_memo(binding, memo)?.sin(),
            Node::Cos(a) => a.eval_memo(binding, memo)?.cos(),
            Node::Tan(a) => a.eval_memo(binding, memo)?.tan(),
            Node::Sqrt(a) => {
                let v = a.eval_memo(binding, memo)?;
                if v < 0.0 {
                    return Err(ExprError::NegativeSqrt(v));
                }
                v.sqrt()
            }
            Node::Atan2(y, x) => y
                .eval_memo(binding, memo)?
                .atan2(x.eval_memo(binding, memo)?),
        };
        memo.insert(self.ptr_id(), value);
        Ok(value)
    }

    /// Symbolic partial derivative with respect to `var`; every other
    /// variable is treated as a constant. Result is simplified. Shared
    /// subtrees are differentiated once (derived expressions are DAGs).
    pub fn diff(&self, var: &str) -> Expr {
        let mut memo = HashMap::new();
        self.diff_memo(var, &mut memo).simplify()
    }

    fn diff_memo(&self, var: &str, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(hit) = memo.get(&self.ptr_id()) {
            return hit.clone();
        }
        let result = match self.node() {
            Node::Constant(_) => Expr::zero(),
            Node::Var(name) => {
                if name == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Neg(a) => -a.diff_memo(var, memo),
            Node::Add(a, b) => a.diff_memo(var, memo) + b.diff_memo(var, memo),
            Node::Sub(a, b) => a.diff_memo(var, memo) - b.diff_memo(var, memo),
            Node::Mul(a, b) => {
                a.diff_memo(var, memo) * b.clone() + a.clone() * b.diff_memo(var, memo)
            }
            Node::Div(a, b) => {
                (a.diff_memo(var, memo) * b.clone() - a.clone() * b.diff_memo(var, memo))
                    / b.pow(2)
            }
            Node::Pow(a, n) => {
                if *n == 0 {
                    Expr::zero()
                } else {
                    Expr::num(*n as f64) * a.pow(n - 1) * a.diff_memo(var, memo)
                }
            }
            Node::Sin(a) => a.cos() * a.diff_memo(var, memo),
            Node::Cos(a) => -(a.sin() * a.diff_memo(var, memo)),
            Node::Tan(a) => (Expr::one() + a.tan().pow(2)) * a.diff_memo(var, memo),
            Node::Sqrt(a) => a.diff_memo(var, memo) / (Expr::num(2.0) * a.sqrt()),
            Node::Atan2(y, x) => {
                (x.clone() * y.diff_memo(var, memo) - y.clone() * x.diff_memo(var, memo))
                    / (x.pow(2) + y.pow(2))
            }
        };
        memo.insert(self.ptr_id(), result.clone());
        result
    }

    /// Simultaneous substitution: replacements are not re-substituted within
    /// the same call, so `substitute(a+b, {a->b, b->a})` swaps.
    pub fn substitute(&self, map: &HashMap<String, Expr>) -> Expr {
        let mut memo = HashMap::new();
        self.substitute_memo(map, &mut memo)
    }

    fn substitute_memo(
        &self,
        map: &HashMap<String, Expr>,
        memo: &mut HashMap<usize, Expr>,
    ) -> Expr {
        if let Some(hit) = memo.get(&self.ptr_id()) {
            return hit.clone();
        }
        let result = match self.node() {
            Node::Constant(_) => self.clone(),
            Node::Var(name) => map.get(name).cloned().unwrap_or_else(|| self.clone()),
            Node::Neg(a) => Expr::new(Node::Neg(a.substitute_memo(map, memo))),
            Node::Add(a, b) => Expr::new(Node::Add(
                a.substitute_memo(map, memo),
                b.substitute_memo(map, memo),
            )),
            Node::Sub(a, b) => Expr::new(Node::Sub(
                a.substitute_memo(map, memo),
                b.substitute_memo(map, memo),
            )),
            Node::Mul(a, b) => Expr::new(Node::Mul(
                a.substitute_memo(map, memo),
                b.substitute_memo(map, memo),
            )),
            Node::Div(a, b) => Expr::new(Node::Div(
                a.substitute_memo(map, memo),
                b.substitute_memo(map, memo),
            )),
            Node::Pow(a, n) => Expr::new(Node::Pow(a.substitute_memo(map, memo), *n)),
            Node::Sin(a) => Expr::new(Node::Sin(a.substitute_memo(map, memo))),
            Node::Cos(a) => Expr::new(Node::Cos(a.substitute_memo(map, memo))),
            Node::Tan(a) => Expr::new(Node::Tan(a.substitute_memo(map, memo))),
            Node::Sqrt(a) => Expr::new(Node::Sqrt(a.substitute_memo(map, memo))),
            Node::Atan2(y, x) => Expr::new(Node::Atan2(
                y.substitute_memo(map, memo),
                x.substitute_memo(map, memo),
            )),
        };
        memo.insert(self.ptr_id(), result.clone());
        result
    }

    /// Rename variables in place of building a full substitution map.
    pub fn rename_vars(&self, map: &HashMap<String, String>) -> Expr {
        let expr_map: HashMap<String, Expr> = map
            .iter()
            .map(|(from, to)| (from.clone(), Expr::var(to.clone())))
            .collect();
        self.substitute(&expr_map)
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut seen = std::collections::HashSet::new();
        self.collect_free_vars(&mut out, &mut seen);
        out
    }

    fn collect_free_vars(
        &self,
        out: &mut BTreeSet<String>,
        seen: &mut std::collections::HashSet<usize>,
    ) {
        if !seen.insert(self.ptr_id()) {
            return;
        }
        match self.node() {
            Node::Constant(_) => {}
            Node::Var(name) => {
                out.insert(name.clone());
            }
            Node::Neg(a) | Node::Pow(a, _) | Node::Sin(a) | Node::Cos(a) | Node::Tan(a)
            | Node::Sqrt(a) => a.collect_free_vars(out, seen),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b)
            | Node::Atan2(a, b) => {
                a.collect_free_vars(out, seen);
                b.collect_free_vars(out, seen);
            }
        }
    }

    pub fn contains_var(&self, var: &str) -> bool {
        self.free_vars().contains(var)
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $node:ident) => {
        impl std::ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::new(Node::$node(self, rhs))
            }
        }
        impl std::ops::$trait for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::new(Node::$node(self.clone(), rhs.clone()))
            }
        }
    };
}

impl_binop!(Add, add, Add);
impl_binop!(Sub, sub, Sub);
impl_binop!(Mul, mul, Mul);
impl_binop!(Div, div, Div);

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::new(Node::Neg(self))
    }
}

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::new(Node::Neg(self.clone()))
    }
}

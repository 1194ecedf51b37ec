//! Flattened evaluation programs for hot loops.
//!
//! Simulation and Newton iterations evaluate the same expression sets tens of
//! thousands of times. `Program::compile` turns a set of expressions into a
//! topologically ordered instruction tape with shared subexpressions
//! deduplicated (by subtree pointer identity, plus by value for leaves), so a
//! single pass over the tape evaluates all outputs.

use std::collections::HashMap;

use super::{Expr, ExprError, Node};

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(u32),
    Neg(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Pow(u32, i32),
    Sin(u32),
    Cos(u32),
    Tan(u32),
    Sqrt(u32),
    Atan2(u32, u32),
}

#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    outputs: Vec<u32>,
    var_names: Vec<String>,
}

impl Program {
    /// Compile `exprs` against a fixed variable layout. Every free variable
    /// must appear in `vars`; evaluation then takes a value slice in the same
    /// order.
    pub fn compile(exprs: &[Expr], vars: &[String]) -> Result<Program, ExprError> {
        let var_slots: HashMap<&str, u32> = vars
            .iter()
            .enumerate()
            .map(|(i, name)| (name.as_str(), i as u32))
            .collect();
        let mut builder = Builder {
            var_slots,
            ops: Vec::new(),
            by_ptr: HashMap::new(),
            const_slots: HashMap::new(),
            var_op_slots: HashMap::new(),
        };
        let mut outputs = Vec::with_capacity(exprs.len());
        for e in exprs {
            outputs.push(builder.emit(e)?);
        }
        Ok(Program {
            ops: builder.ops,
            outputs,
            var_names: vars.to_vec(),
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    /// Evaluate all outputs for one variable assignment. `scratch` is reused
    /// across calls to avoid reallocation.
    pub fn eval_into(
        &self,
        values: &[f64],
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), ExprError> {
        debug_assert_eq!(values.len(), self.var_names.len());
        debug_assert_eq!(out.len(), self.outputs.len());
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => c,
                Op::Var(slot) => values[slot as usize],
                Op::Neg(a) => -scratch[a as usize],
                Op::Add(a, b) => scratch[a as usize] + scratch[b as usize],
                Op::Sub(a, b) => scratch[a as usize] - scratch[b as usize],
                Op::Mul(a, b) => scratch[a as usize] * scratch[b as usize],
                Op::Div(a, b) => {
                    let den = scratch[b as usize];
                    if den == 0.0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    scratch[a as usize] / den
                }
                Op::Pow(a, n) => {
                    let base = scratch[a as usize];
                    if base == 0.0 && n < 0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    base.powi(n)
                }
                Op::Sin(a) => scratch[a as usize].sin(),
                Op::Cos(a) => scratch[a as usize].cos(),
                Op::Tan(a) => scratch[a as usize].tan(),
                Op::Sqrt(a) => {
                    let v = scratch[a as usize];
                    if v < 0.0 {
                        return Err(ExprError::NegativeSqrt(v));
                    }
                    v.sqrt()
                }
                Op::Atan2(y, x) => scratch[y as usize].atan2(scratch[x as usize]),
            };
            scratch.push(v);
        }
        for (slot, o) in self.outputs.iter().zip(out.iter_mut()) {
            *o = scratch[*slot as usize];
        }
        Ok(())
    }

    pub fn eval(&self, values: &[f64]) -> Result<Vec<f64>, ExprError> {
        let mut out = vec![0.0; self.outputs.len()];
        let mut scratch = Vec::new();
        self.eval_into(values, &mut out, &mut scratch)?;
        Ok(out)
    }

    /// Evaluate against a name-keyed binding (resolves the variable layout).
    pub fn eval_with(&self, binding: &super::VarBinding) -> Result<Vec<f64>, ExprError> {
        let values: Vec<f64> = self
            .var_names
            .iter()
            .map(|name| {
                binding
                    .get(name)
                    .copied()
                    .ok_or_else(|| ExprError::UnboundVariable(name.clone()))
            })
            .collect::<Result<_, _>>()?;
        self.eval(&values)
    }
}

struct Builder<'a> {
    var_slots: HashMap<&'a str, u32>,
    ops: Vec<Op>,
    by_ptr: HashMap<usize, u32>,
    const_slots: HashMap<u64, u32>,
    var_op_slots: HashMap<u32, u32>,
}

impl<'a> Builder<'a> {
    fn push(&mut self, op: Op) -> u32 {
        self.ops.push(op);
        (self.ops.len() - 1) as u32
    }

    fn emit(&mut self, e: &Expr) -> Result<u32, ExprError> {
        if let Some(slot) = self.by_ptr.get(&e.ptr_id()) {
            return Ok(*slot);
        }
        let slot = match e.node() {
            Node::Constant(c) => {
                let key = c.to_bits();
                match self.const_slots.get(&key) {
                    Some(s) => *s,
                    None => {
                        let s = self.push(Op::Const(*c));
                        self.const_slots.insert(key, s);
                        s
                    }
                }
            }
            Node::Var(name) => {
                let var = *self
                    .var_slots
                    .get(name.as_str())
                    .ok_or_else(|| ExprError::UnboundVariable(name.clone()))?;
                match self.var_op_slots.get(&var) {
                    Some(s) => *s,
                    None => {
                        let s = self.push(Op::Var(var));
                        self.var_op_slots.insert(var, s);
                        s
                    }
                }
            }
            Node::Neg(a) => {
                let a = self.emit(a)?;
                self.push(Op::Neg(a))
            }
            Node::Add(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Add(a, b))
            }
            Node::Sub(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Sub(a, b))
            }
            Node::Mul(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Mul(a, b))
            }
            Node::Div(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Div(a, b))
            }
            Node::Pow(a, n) => {
                let a = self.emit(a)?;
                self.push(Op::Pow(a, *n))
            }
            Node::Sin(a) => {
                let a = self.emit(a)?;
                self.push(Op::Sin(a))
            }
            Node::Cos(a) => {
                let a = self.emit(a)?;
                self.push(Op::Cos(a))
            }
            Node::Tan(a) => {
                let a = self.emit(a)?;
                self.push(Op::Tan(a))
            }
            Node::Sqrt(a) => {
                let a = self.emit(a)?;
                self.push(Op::Sqrt(a))
            }
            Node::Atan2(y, x) => {
                let (y, x) = (self.emit(y)?, self.emit(x)?);
                self.push(Op::Atan2(y, x))
            }
        };
        self.by_ptr.insert(e.ptr_id(), slot);
        Ok(slot)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse, VarBinding};
    use super::*;

    #[test]
    fn program_matches_tree_eval() {
        let exprs: Vec<Expr> = [
            "sin(x) * y + sqrt(x^2 + y^2)",
            "atan2(y, x) - x/(y^2 + 1)",
        ]
        .iter()
        .map(|s| parse(s).unwrap())
        .collect();
        let vars = vec!["x".to_string(), "y".to_string()];
        let prog = Program::compile(&exprs, &vars).unwrap();
        let values = [0.7, -1.3];
        let out = prog.eval(&values).unwrap();
        let binding: VarBinding = vars
            .iter()
            .cloned()
            .zip(values.iter().copied())
            .collect();
        for (o, e) in out.iter().zip(exprs.iter()) {
            assert!((o - e.eval(&binding).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_subtrees_are_emitted_once() {
        let shared = parse("sin(x) + cos(x)").unwrap();
        let a = shared.clone() * shared.clone();
        let b = shared.clone() + Expr::num(1.0);
        let prog = Program::compile(&[a, b], &["x".to_string()]).unwrap();
        // var + sin + cos + add + mul + const + add = 7 ops, not a full re-emit.
        assert!(prog.n_ops() <= 7, "got {} ops", prog.n_ops());
    }

    #[test]
    fn compile_rejects_unknown_variables() {
        let e = parse("x + q").unwrap();
        assert!(matches!(
            Program::compile(&[e], &["x".to_string()]),
            Err(ExprError::UnboundVariable(v)) if v == "q"
        ));
    }
}

//! Conservative simplification: constant folding, 0/1 identities, folding of
//! trig at constants, flattening of nested sums and products. No
//! trigonometric rewriting. Shared subtrees are simplified once per call.

use std::collections::HashMap;

use super::{Expr, Node};

impl Expr {
    pub fn simplify(&self) -> Expr {
        let mut memo = HashMap::new();
        simp(self, &mut memo)
    }
}

type Memo = HashMap<usize, Expr>;

fn simp(e: &Expr, memo: &mut Memo) -> Expr {
    if let Some(hit) = memo.get(&e.ptr_id()) {
        return hit.clone();
    }
    let result = match e.node() {
        Node::Constant(_) | Node::Var(_) => e.clone(),
        Node::Neg(a) => {
            let a = simp(a, memo);
            match a.node() {
                Node::Constant(c) => Expr::num(-c),
                Node::Neg(inner) => inner.clone(),
                _ => Expr::new(Node::Neg(a)),
            }
        }
        Node::Add(a, b) => {
            let mut terms = Vec::new();
            push_flat(simp(a, memo), &mut terms, is_add);
            push_flat(simp(b, memo), &mut terms, is_add);
            let mut constant = 0.0;
            let mut rest = Vec::new();
            for t in terms {
                match t.as_constant() {
                    Some(c) => constant += c,
                    None => rest.push(t),
                }
            }
            if constant != 0.0 {
                rest.push(Expr::num(constant));
            }
            rebuild(rest, Expr::zero(), |x, y| Expr::new(Node::Add(x, y)))
        }
        Node::Mul(a, b) => {
            let mut factors = Vec::new();
            push_flat(simp(a, memo), &mut factors, is_mul);
            push_flat(simp(b, memo), &mut factors, is_mul);
            let mut constant = 1.0;
            let mut rest = Vec::new();
            for f in factors {
                match f.as_constant() {
                    Some(c) => constant *= c,
                    None => rest.push(f),
                }
            }
            if constant == 0.0 {
                Expr::zero()
            } else {
                if constant != 1.0 {
                    rest.insert(0, Expr::num(constant));
                }
                rebuild(rest, Expr::one(), |x, y| Expr::new(Node::Mul(x, y)))
            }
        }
        Node::Sub(a, b) => {
            let a = simp(a, memo);
            let b = simp(b, memo);
            match (a.as_constant(), b.as_constant()) {
                (Some(x), Some(y)) => Expr::num(x - y),
                (_, Some(0.0)) => a,
                (Some(0.0), _) => match b.node() {
                    Node::Neg(inner) => inner.clone(),
                    _ => Expr::new(Node::Neg(b)),
                },
                _ => Expr::new(Node::Sub(a, b)),
            }
        }
        Node::Div(a, b) => {
            let a = simp(a, memo);
            let b = simp(b, memo);
            match (a.as_constant(), b.as_constant()) {
                (Some(x), Some(y)) if y != 0.0 => Expr::num(x / y),
                (_, Some(1.0)) => a,
                _ => Expr::new(Node::Div(a, b)),
            }
        }
        Node::Pow(a, n) => {
            let a = simp(a, memo);
            match (*n, a.as_constant()) {
                (0, _) => Expr::one(),
                (1, _) => a,
                (n, Some(c)) if !(c == 0.0 && n < 0) => Expr::num(c.powi(n)),
                _ => Expr::new(Node::Pow(a, *n)),
            }
        }
        Node::Sin(a) => fold_unary(simp(a, memo), Node::Sin, f64::sin),
        Node::Cos(a) => fold_unary(simp(a, memo), Node::Cos, f64::cos),
        Node::Tan(a) => fold_unary(simp(a, memo), Node::Tan, f64::tan),
        Node::Sqrt(a) => {
            let a = simp(a, memo);
            match a.as_constant() {
                Some(c) if c >= 0.0 => Expr::num(c.sqrt()),
                _ => Expr::new(Node::Sqrt(a)),
            }
        }
        Node::Atan2(y, x) => {
            let y = simp(y, memo);
            let x = simp(x, memo);
            match (y.as_constant(), x.as_constant()) {
                (Some(cy), Some(cx)) => Expr::num(cy.atan2(cx)),
                _ => Expr::new(Node::Atan2(y, x)),
            }
        }
    };
    memo.insert(e.ptr_id(), result.clone());
    result
}

fn is_add(node: &Node) -> Option<(&Expr, &Expr)> {
    match node {
        Node::Add(a, b) => Some((a, b)),
        _ => None,
    }
}

fn is_mul(node: &Node) -> Option<(&Expr, &Expr)> {
    match node {
        Node::Mul(a, b) => Some((a, b)),
        _ => None,
    }
}

fn push_flat(e: Expr, out: &mut Vec<Expr>, split: fn(&Node) -> Option<(&Expr, &Expr)>) {
    if let Some((a, b)) = split(e.node()) {
        push_flat(a.clone(), out, split);
        push_flat(b.clone(), out, split);
    } else {
        out.push(e);
    }
}

fn rebuild(parts: Vec<Expr>, empty: Expr, join: fn(Expr, Expr) -> Expr) -> Expr {
    parts.into_iter().reduce(join).unwrap_or(empty)
}

fn fold_unary(a: Expr, wrap: fn(Expr) -> Node, f: fn(f64) -> f64) -> Expr {
    match a.as_constant() {
        Some(c) => Expr::num(f(c)),
        None => Expr::new(wrap(a)),
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn identities() {
        assert_eq!(parse("x + 0").unwrap().simplify(), Expr::var("x"));
        assert_eq!(parse("0 + x").unwrap().simplify(), Expr::var("x"));
        assert_eq!(parse("x * 1").unwrap().simplify(), Expr::var("x"));
        assert!(parse("x * 0").unwrap().simplify().is_zero());
        assert_eq!(parse("x / 1").unwrap().simplify(), Expr::var("x"));
        assert_eq!(parse("x ^ 1").unwrap().simplify(), Expr::var("x"));
        assert!(parse("x ^ 0").unwrap().simplify().is_one());
    }

    #[test]
    fn constant_folding() {
        assert_eq!(parse("2 + 3*4").unwrap().simplify(), Expr::num(14.0));
        assert!(parse("sin(0)").unwrap().simplify().is_zero());
        assert!(parse("cos(0)").unwrap().simplify().is_one());
        assert_eq!(parse("sqrt(4)").unwrap().simplify(), Expr::num(2.0));
    }

    #[test]
    fn flattening_merges_constants_across_nesting() {
        assert_eq!(
            parse("2 * (3 * x)").unwrap().simplify(),
            Expr::num(6.0) * Expr::var("x")
        );
        assert_eq!(
            parse("(x + 1) + (y + 2)").unwrap().simplify(),
            parse("x + y + 3").unwrap().simplify()
        );
    }

    #[test]
    fn sqrt_of_negative_constant_is_left_alone() {
        let e = parse("sqrt(0 - 4)").unwrap().simplify();
        assert!(e.eval(&Default::default()).is_err());
    }

    #[test]
    fn double_negation() {
        assert_eq!(parse("-(-x)").unwrap().simplify(), Expr::var("x"));
    }

    #[test]
    fn shared_subtrees_simplify_consistently() {
        let shared = parse("x * 1 + 0").unwrap();
        let e = shared.clone() * shared.clone() + shared.clone();
        let s = e.simplify();
        assert_eq!(s, parse("x*x + x").unwrap().simplify());
    }
}

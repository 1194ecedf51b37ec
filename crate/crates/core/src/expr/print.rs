//! Canonical printer: fully parenthesized infix, so that parsing the output
//! reproduces the tree exactly. Used in reports and golden tests.

use std::fmt;

use super::{Expr, Node};

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Constant(c) => {
                if c.is_sign_negative() {
                    write!(f, "(-{})", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Node::Var(name) => write!(f, "{name}"),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "({a} * {b})"),
            Node::Div(a, b) => write!(f, "({a} / {b})"),
            Node::Pow(a, n) => {
                if *n < 0 {
                    write!(f, "{a}^({n})")
                } else {
                    write!(f, "{a}^{n}")
                }
            }
            Node::Sin(a) => write!(f, "sin({a})"),
            Node::Cos(a) => write!(f, "cos({a})"),
            Node::Tan(a) => write!(f, "tan({a})"),
            Node::Sqrt(a) => write!(f, "sqrt({a})"),
            Node::Atan2(y, x) => write!(f, "atan2({y}, {x})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn printer_is_fully_parenthesized() {
        let e = parse("a + b*c").unwrap();
        assert_eq!(e.to_string(), "(a + (b * c))");
    }

    #[test]
    fn pow_base_keeps_structure() {
        let e = parse("(a+b)^2").unwrap();
        assert_eq!(e.to_string(), "(a + b)^2");
        assert_eq!(parse(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn negative_constant_round_trips_to_stable_form() {
        let e = Expr::num(-1.5);
        let reparsed = parse(&e.to_string()).unwrap();
        assert_eq!(reparsed.to_string(), "(-1.5)");
    }
}

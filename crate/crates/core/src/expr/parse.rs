//! Recursive-descent parser for the expression grammar.
//!
//! Infix `+ - * / ^`, calls `sin cos tan sqrt atan2`, parentheses,
//! identifiers `[A-Za-z_][A-Za-z0-9_]*`, decimal literals. `^` binds tighter
//! than unary minus and accepts integer exponents only.

use super::{Expr, ExprError, Node};

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    let expr = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(expr)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: &str) -> ExprError {
        ExprError::Parse {
            message: message.to_string(),
            position: self.pos,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, byte: u8) -> bool {
        if self.peek() == Some(byte) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), ExprError> {
        if self.eat(byte) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", byte as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::new(Node::Add(lhs, self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::new(Node::Sub(lhs, self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::new(Node::Mul(lhs, self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::new(Node::Div(lhs, self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            // Fold a negated literal so printed constants re-parse to the
            // same tree.
            if let Node::Constant(c) = inner.node() {
                return Ok(Expr::num(-c));
            }
            Ok(Expr::new(Node::Neg(inner)))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let at = self.pos;
            let exponent = self.exponent_value(at)?;
            Ok(Expr::new(Node::Pow(base, exponent)))
        } else {
            Ok(base)
        }
    }

    /// The exponent may be a literal, a signed literal, or a parenthesized
    /// constant expression; anything that does not fold to an integer is
    /// rejected.
    fn exponent_value(&mut self, at: usize) -> Result<i32, ExprError> {
        let e = self.unary()?;
        match e.simplify().as_constant() {
            Some(c) if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 => Ok(c as i32),
            _ => Err(ExprError::NonIntegerExponent { position: at }),
        }
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident_or_call(),
            Some(c) => Err(self.error(&format!("unexpected character `{}`", c as char))),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // `1e` followed by a non-digit: the `e` belongs to an identifier.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ExprError::Parse {
            message: format!("invalid number literal `{text}`"),
            position: start,
        })?;
        self.skip_ws();
        Ok(Expr::num(value))
    }

    fn ident_or_call(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string();
        self.skip_ws();
        if self.peek() == Some(b'(') && is_function(&name) {
            self.pos += 1;
            self.skip_ws();
            let first = self.expr()?;
            let expr = if name == "atan2" {
                self.expect(b',')?;
                let second = self.expr()?;
                Expr::new(Node::Atan2(first, second))
            } else {
                match name.as_str() {
                    "sin" => Expr::new(Node::Sin(first)),
                    "cos" => Expr::new(Node::Cos(first)),
                    "tan" => Expr::new(Node::Tan(first)),
                    "sqrt" => Expr::new(Node::Sqrt(first)),
                    _ => unreachable!(),
                }
            };
            self.expect(b')')?;
            Ok(expr)
        } else {
            Ok(Expr::var(name))
        }
    }
}

fn is_function(name: &str) -> bool {
    matches!(name, "sin" | "cos" | "tan" | "sqrt" | "atan2")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_reading() {
        let e = parse("sin(q1)*v2").unwrap();
        assert_eq!(e, Expr::var("q1").sin() * Expr::var("v2"));
    }

    #[test]
    fn manipulator_flat_output_component() {
        let e = parse("x_e - r_e*cos(phi+theta)").unwrap();
        let expected = Expr::var("x_e")
            - Expr::var("r_e") * (Expr::var("phi") + Expr::var("theta")).cos();
        assert_eq!(e, expected);
    }

    #[test]
    fn non_integer_exponent_is_rejected() {
        assert!(matches!(
            parse("q1^(1/2)"),
            Err(ExprError::NonIntegerExponent { .. })
        ));
        assert!(matches!(
            parse("q1^x"),
            Err(ExprError::NonIntegerExponent { .. })
        ));
    }

    #[test]
    fn power_binds_tighter_than_unary_minus() {
        let e = parse("-x^2").unwrap();
        assert_eq!(e, -Expr::var("x").pow(2));
    }

    #[test]
    fn negated_literals_fold() {
        assert_eq!(parse("-1.5").unwrap(), Expr::num(-1.5));
        assert_eq!(parse("(-0.2)").unwrap(), Expr::num(-0.2));
        // Precedence still applies before folding.
        assert_eq!(parse("-2^2").unwrap(), -Expr::num(2.0).pow(2));
    }

    #[test]
    fn negative_exponents_parse() {
        assert_eq!(parse("x^-1").unwrap(), Expr::var("x").pow(-1));
        assert_eq!(parse("x^(-2)").unwrap(), Expr::var("x").pow(-2));
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse("x + * y") {
            Err(ExprError::Parse { position, .. }) => assert_eq!(position, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn function_names_need_parentheses_to_be_calls() {
        // A bare `sin` is an identifier, not a call.
        assert_eq!(parse("sin + 1").unwrap(), Expr::var("sin") + Expr::num(1.0));
    }

    #[test]
    fn scientific_literals() {
        assert_eq!(parse("1.5e-3").unwrap(), Expr::num(1.5e-3));
        assert_eq!(parse("2e4").unwrap(), Expr::num(2e4));
    }
}

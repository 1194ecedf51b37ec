//! Multi-index arithmetic and jet-space machinery.
//!
//! Flat-output time derivatives are plain named variables following the
//! naming contract `y{j}_d{alpha}` with order zero written `y{j}`. A
//! [`MultiIndex`] holds one derivative order per output component; ranges
//! built from multi-indices are empty whenever the lower bound exceeds the
//! upper bound, so a component with order zero simply drops out.

use std::collections::HashMap;

use thiserror::Error;

use crate::expr::{Expr, VarBinding};

#[derive(Debug, Error)]
pub enum JetsError {
    #[error("multi-index length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("total derivative would exceed order cap {cap} on variable `{var}`")]
    OrderOverflow { var: String, cap: usize },
    #[error("`{0}` is not a jet variable and has no successor")]
    NoSuccessor(String),
}

/// Per-output derivative orders. Components may go negative transiently
/// (e.g. `kappa - 1` where a chain length is zero); range constructors
/// interpret a negative upper bound as an empty range.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<i64>);

impl MultiIndex {
    pub fn new(orders: Vec<i64>) -> Self {
        MultiIndex(orders)
    }

    pub fn from_usize(orders: &[usize]) -> Self {
        MultiIndex(orders.iter().map(|&o| o as i64).collect())
    }

    pub fn zeros(len: usize) -> Self {
        MultiIndex(vec![0; len])
    }

    pub fn constant(len: usize, value: i64) -> Self {
        MultiIndex(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> i64 {
        self.0[j]
    }

    pub fn set(&mut self, j: usize, value: i64) {
        self.0[j] = value;
    }

    pub fn components(&self) -> &[i64] {
        &self.0
    }

    /// `#A`, the component sum.
    pub fn total(&self) -> i64 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &MultiIndex) -> Result<MultiIndex, JetsError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &MultiIndex) -> Result<MultiIndex, JetsError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn shift(&self, offset: i64) -> MultiIndex {
        MultiIndex(self.0.iter().map(|a| a + offset).collect())
    }

    /// Componentwise `<=`.
    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn all_non_negative(&self) -> bool {
        self.0.iter().all(|&a| a >= 0)
    }

    fn zip_with(
        &self,
        other: &MultiIndex,
        f: impl Fn(i64, i64) -> i64,
    ) -> Result<MultiIndex, JetsError> {
        if self.0.len() != other.0.len() {
            return Err(JetsError::LengthMismatch(self.0.len(), other.0.len()));
        }
        Ok(MultiIndex(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    /// Every multi-index `K` with `K <= bound` componentwise and `#K = total`.
    pub fn enumerate_with_total(bound: &MultiIndex, total: i64) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut current = vec![0i64; bound.len()];
        fn rec(
            bound: &MultiIndex,
            remaining: i64,
            j: usize,
            current: &mut Vec<i64>,
            out: &mut Vec<MultiIndex>,
        ) {
            if j == bound.len() {
                if remaining == 0 {
                    out.push(MultiIndex(current.clone()));
                }
                return;
            }
            let cap = bound.get(j).min(remaining).max(-1);
            for v in 0..=cap {
                current[j] = v;
                rec(bound, remaining - v, j + 1, current, out);
            }
        }
        rec(bound, total, 0, &mut current, &mut out);
        out
    }
}

impl std::fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

/// Canonical jet variable name: order 0 is `y3`, order 2 is `y3_d2`.
/// `j` is 1-based to match the text surface.
pub fn jet_var(j: usize, order: usize) -> String {
    derived_var("y", j, order)
}

/// Same convention for the new closed-loop input `w`.
pub fn w_var(j: usize, order: usize) -> String {
    derived_var("w", j, order)
}

pub fn derived_var(prefix: &str, j: usize, order: usize) -> String {
    if order == 0 {
        format!("{prefix}{j}")
    } else {
        format!("{prefix}{j}_d{order}")
    }
}

/// Derivative variable of a named (generalized) input: `phi`, `phi_d1`, ...
pub fn input_deriv_name(name: &str, order: usize) -> String {
    if order == 0 {
        name.to_string()
    } else {
        format!("{name}_d{order}")
    }
}

/// Inverse of [`jet_var`]-style names: `y2_d3` -> `(2, 3)`, `y2` -> `(2, 0)`.
pub fn parse_derived_var(prefix: &str, name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix(prefix)?;
    let (index_part, order) = match rest.split_once("_d") {
        Some((idx, ord)) => (idx, ord.parse::<usize>().ok()?),
        None => (rest, 0),
    };
    if index_part.is_empty() || !index_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((index_part.parse().ok()?, order))
}

pub fn parse_jet_var(name: &str) -> Option<(usize, usize)> {
    parse_derived_var("y", name)
}

/// Names `y{j}_d{a}` for `a` in `lo..=hi`; empty when `lo > hi` (convention
/// for negative upper bounds from multi-index arithmetic).
pub fn jet_range(j: usize, lo: i64, hi: i64) -> Vec<String> {
    if lo > hi {
        return Vec::new();
    }
    (lo.max(0)..=hi).map(|a| jet_var(j, a as usize)).collect()
}

/// Point in truncated jet space: values of `y{j}_d{alpha}` for `j = 1..=m`,
/// `alpha = 0..=max_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetPoint {
    m: usize,
    max_order: usize,
    values: Vec<Vec<f64>>,
}

impl JetPoint {
    pub fn zeros(m: usize, max_order: usize) -> Self {
        JetPoint {
            m,
            max_order,
            values: vec![vec![0.0; max_order + 1]; m],
        }
    }

    /// Equilibrium jet: constant flat output, all time derivatives zero.
    pub fn equilibrium(y0: &[f64], max_order: usize) -> Self {
        let mut jp = JetPoint::zeros(y0.len(), max_order);
        for (j, &v) in y0.iter().enumerate() {
            jp.values[j][0] = v;
        }
        jp
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// `j` is 1-based, matching the variable naming.
    pub fn get(&self, j: usize, order: usize) -> f64 {
        self.values[j - 1][order]
    }

    pub fn set(&mut self, j: usize, order: usize, value: f64) {
        self.values[j - 1][order] = value;
    }

    pub fn is_equilibrium(&self) -> bool {
        self.values
            .iter()
            .all(|row| row[1..].iter().all(|&v| v == 0.0))
    }

    pub fn output_values(&self) -> Vec<f64> {
        self.values.iter().map(|row| row[0]).collect()
    }

    pub fn to_binding(&self) -> VarBinding {
        let mut b = VarBinding::new();
        self.insert_into(&mut b);
        b
    }

    pub fn insert_into(&self, binding: &mut VarBinding) {
        for j in 1..=self.m {
            for order in 0..=self.max_order {
                binding.insert(jet_var(j, order), self.values[j - 1][order]);
            }
        }
    }
}

/// Total time derivative on expressions over jet variables: each occurrence
/// of `y{j}_d{a}` contributes `y{j}_d{a+1}` times the partial derivative.
/// Fails if the result would need an order beyond `order_cap`.
pub fn total_derivative(e: &Expr, order_cap: usize) -> Result<Expr, JetsError> {
    let mut succ = HashMap::new();
    for var in e.free_vars() {
        let (j, order) = parse_jet_var(&var).ok_or_else(|| JetsError::NoSuccessor(var.clone()))?;
        if order + 1 > order_cap {
            return Err(JetsError::OrderOverflow {
                var,
                cap: order_cap,
            });
        }
        succ.insert(var, Expr::var(jet_var(j, order + 1)));
    }
    total_derivative_with(e, &succ)
}

/// Total derivative with an explicit successor expression per variable. The
/// closed-loop pipeline substitutes chain successors here (the derivative of
/// the top retained jet of a chain is the new input `w`).
pub fn total_derivative_with(
    e: &Expr,
    successors: &HashMap<String, Expr>,
) -> Result<Expr, JetsError> {
    let mut sum = Expr::zero();
    for var in e.free_vars() {
        let succ = successors
            .get(&var)
            .ok_or_else(|| JetsError::NoSuccessor(var.clone()))?;
        let partial = e.diff(&var);
        if partial.is_zero() {
            continue;
        }
        sum = sum + succ.clone() * partial;
    }
    Ok(sum.simplify())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multi_index_arithmetic() {
        let a = MultiIndex::from_usize(&[2, 2, 2]);
        let b = MultiIndex::from_usize(&[0, 2, 4]);
        assert_eq!(a.add(&b).unwrap(), MultiIndex::from_usize(&[2, 4, 6]));
        assert_eq!(b.total(), 6);
        assert!(a
            .add(&MultiIndex::zeros(2))
            .is_err());
    }

    #[test]
    fn negative_components_are_transient_and_ranges_empty() {
        let kappa = MultiIndex::new(vec![0, 2, 4]);
        let upper = kappa.shift(-1);
        assert_eq!(upper.get(0), -1);
        assert!(jet_range(1, 0, upper.get(0)).is_empty());
        assert_eq!(jet_range(2, 0, upper.get(1)), vec!["y2", "y2_d1"]);
    }

    #[test]
    fn naming_contract_round_trips() {
        assert_eq!(jet_var(3, 0), "y3");
        assert_eq!(jet_var(1, 4), "y1_d4");
        assert_eq!(parse_jet_var("y3"), Some((3, 0)));
        assert_eq!(parse_jet_var("y12_d7"), Some((12, 7)));
        assert_eq!(parse_jet_var("w1_d2"), None);
        assert_eq!(parse_jet_var("y_d2"), None);
        for j in 1..6 {
            for a in 0..7 {
                assert_eq!(parse_jet_var(&jet_var(j, a)), Some((j, a)));
            }
        }
    }

    #[test]
    fn total_derivative_base_and_chain() {
        let td = total_derivative(&parse("y1").unwrap(), 6).unwrap();
        assert_eq!(td, Expr::var("y1_d1"));
        let td = total_derivative(&parse("y1_d1^2").unwrap(), 6).unwrap();
        let expected = parse("2*y1_d1*y1_d2").unwrap();
        let mut b = VarBinding::new();
        b.insert("y1_d1".into(), 0.7);
        b.insert("y1_d2".into(), -1.2);
        assert!((td.eval(&b).unwrap() - expected.eval(&b).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn total_derivative_order_cap() {
        let e = parse("y1_d6").unwrap();
        assert!(matches!(
            total_derivative(&e, 6),
            Err(JetsError::OrderOverflow { .. })
        ));
    }

    #[test]
    fn equilibrium_jets() {
        let jp = JetPoint::equilibrium(&[0.0, 0.0, 0.0], 4);
        assert!(jp.to_binding().values().all(|&v| v == 0.0));
        let jp = JetPoint::equilibrium(&[1.0, 2.0, 0.5], 4);
        assert_eq!(jp.get(2, 0), 2.0);
        assert!(jp.is_equilibrium());
        for j in 1..=3 {
            for a in 1..=4 {
                assert_eq!(jp.get(j, a), 0.0);
            }
        }
    }

    fn random_jet_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
        let vars = ["y1", "y1_d1", "y2", "y2_d1", "y2_d2"];
        if depth == 0 || rng.random_bool(0.3) {
            return if rng.random_bool(0.7) {
                Expr::var(vars[rng.random_range(0..vars.len())])
            } else {
                Expr::num(rng.random_range(-2.0..2.0))
            };
        }
        let a = random_jet_expr(rng, depth - 1);
        let b = random_jet_expr(rng, depth - 1);
        match rng.random_range(0..6) {
            0 => a + b,
            1 => a - b,
            2 => a * b,
            3 => a.sin(),
            4 => a.cos(),
            _ => a.pow(2),
        }
    }

    /// The operator is a derivation: it satisfies the product rule.
    #[test]
    fn leibniz_property_on_1000_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let e1 = random_jet_expr(&mut rng, 3);
            let e2 = random_jet_expr(&mut rng, 3);
            let lhs = total_derivative(&(e1.clone() * e2.clone()), 8).unwrap();
            let rhs = total_derivative(&e1, 8).unwrap() * e2.clone()
                + e1.clone() * total_derivative(&e2, 8).unwrap();
            let mut b = VarBinding::new();
            for j in 1..=2 {
                for a in 0..=4 {
                    b.insert(jet_var(j, a), rng.random_range(-1.5..1.5));
                }
            }
            let (l, r) = (lhs.eval(&b).unwrap(), rhs.eval(&b).unwrap());
            assert!(
                (l - r).abs() <= 1e-9 * (1.0 + r.abs()),
                "Leibniz failed on ({e1})*({e2}): {l} vs {r}"
            );
        }
    }

    /// Along a smooth curve whose jet coordinates are consistent time
    /// derivatives, the evaluated total derivative equals d/dt of the
    /// evaluated expression.
    #[test]
    fn total_derivative_matches_time_derivative_along_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // y_j(t) built from a few sinusoids so all orders are available.
        let curve = |t: f64, j: usize, order: usize| -> f64 {
            let (a, w): (f64, f64) = if j == 1 { (0.8, 1.3) } else { (-0.5, 2.1) };
            // d^order/dt^order of a*sin(w t)
            a * w.powi(order as i32) * (w * t + order as f64 * std::f64::consts::FRAC_PI_2).sin()
        };
        for _ in 0..50 {
            let e = random_jet_expr(&mut rng, 3);
            let td = total_derivative(&e, 8).unwrap();
            let t0 = rng.random_range(0.0..2.0);
            let binding_at = |t: f64| {
                let mut b = VarBinding::new();
                for j in 1..=2 {
                    for a in 0..=4 {
                        b.insert(jet_var(j, a), curve(t, j, a));
                    }
                }
                b
            };
            let h = 1e-6;
            let num = (e.eval(&binding_at(t0 + h)).unwrap()
                - e.eval(&binding_at(t0 - h)).unwrap())
                / (2.0 * h);
            let sym = td.eval(&binding_at(t0)).unwrap();
            assert!(
                (num - sym).abs() <= 1e-5 * (1.0 + sym.abs()),
                "curve check failed on {e}: {num} vs {sym}"
            );
        }
    }

    #[test]
    fn enumerate_with_total_respects_bounds() {
        let bound = MultiIndex::from_usize(&[4, 4, 4]);
        let all = MultiIndex::enumerate_with_total(&bound, 6);
        assert_eq!(all.len(), 19);
        assert!(all.iter().all(|k| k.total() == 6 && k.le(&bound)));
    }
}

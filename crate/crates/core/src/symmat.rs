//! Symbolic matrices of expressions and exact linear solves by cofactor
//! expansion. Sizes here are tiny (degrees of freedom of a mechanism), so
//! Cramer's rule with aggressive simplification is the right tool; structural
//! zeros in input matrices prune most cofactors.

use crate::expr::Expr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymMatError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch")]
    DimensionMismatch,
    #[error("matrix is structurally singular (zero determinant expression)")]
    StructurallySingular,
}

pub type ExprMatrix = Vec<Vec<Expr>>;

pub fn transpose(a: &ExprMatrix) -> ExprMatrix {
    let rows = a.len();
    let cols = a[0].len();
    (0..cols)
        .map(|j| (0..rows).map(|i| a[i][j].clone()).collect())
        .collect()
}

pub fn mat_mul(a: &ExprMatrix, b: &ExprMatrix) -> Result<ExprMatrix, SymMatError> {
    let inner = a[0].len();
    if b.len() != inner {
        return Err(SymMatError::DimensionMismatch);
    }
    let cols = b[0].len();
    Ok(a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut sum = Expr::zero();
                    for (k, entry) in row.iter().enumerate() {
                        sum = sum + entry.clone() * b[k][j].clone();
                    }
                    sum.simplify()
                })
                .collect()
        })
        .collect())
}

pub fn mat_vec(a: &ExprMatrix, x: &[Expr]) -> Result<Vec<Expr>, SymMatError> {
    if a.is_empty() {
        return Ok(Vec::new());
    }
    if a[0].len() != x.len() {
        return Err(SymMatError::DimensionMismatch);
    }
    Ok(a.iter()
        .map(|row| {
            let mut sum = Expr::zero();
            for (entry, xi) in row.iter().zip(x) {
                sum = sum + entry.clone() * xi.clone();
            }
            sum.simplify()
        })
        .collect())
}

/// Determinant by cofactor expansion along the column with the most
/// structural zeros.
pub fn determinant(a: &ExprMatrix) -> Result<Expr, SymMatError> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err(SymMatError::NotSquare {
            rows: n,
            cols: a.first().map_or(0, |r| r.len()),
        });
    }
    Ok(det_rec(a))
}

fn det_rec(a: &ExprMatrix) -> Expr {
    let n = a.len();
    match n {
        0 => Expr::one(),
        1 => a[0][0].clone(),
        2 => (a[0][0].clone() * a[1][1].clone() - a[0][1].clone() * a[1][0].clone()).simplify(),
        _ => {
            let pivot_col = (0..n)
                .max_by_key(|&j| (0..n).filter(|&i| a[i][j].is_zero()).count())
                .unwrap();
            let mut det = Expr::zero();
            for i in 0..n {
                if a[i][pivot_col].is_zero() {
                    continue;
                }
                let minor: ExprMatrix = (0..n)
                    .filter(|&r| r != i)
                    .map(|r| {
                        (0..n)
                            .filter(|&c| c != pivot_col)
                            .map(|c| a[r][c].clone())
                            .collect()
                    })
                    .collect();
                let cof = a[i][pivot_col].clone() * det_rec(&minor);
                det = if (i + pivot_col) % 2 == 0 {
                    det + cof
                } else {
                    det - cof
                };
            }
            det.simplify()
        }
    }
}

/// Exact solve of `A x = b` by Cramer's rule. The shared determinant keeps
/// the solution rows compact; the caller is responsible for `A` being
/// regular wherever the solution is evaluated.
pub fn solve_cramer(a: &ExprMatrix, b: &[Expr]) -> Result<Vec<Expr>, SymMatError> {
    let n = a.len();
    if b.len() != n {
        return Err(SymMatError::DimensionMismatch);
    }
    let det = determinant(a)?;
    if det.is_zero() {
        return Err(SymMatError::StructurallySingular);
    }
    let mut out = Vec::with_capacity(n);
    for col in 0..n {
        let mut replaced = a.clone();
        for (i, row) in replaced.iter_mut().enumerate() {
            row[col] = b[i].clone();
        }
        let num = determinant(&replaced)?;
        out.push((num / det.clone()).simplify());
    }
    Ok(out)
}

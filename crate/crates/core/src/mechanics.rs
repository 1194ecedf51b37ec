//! Lagrangian control systems: equations of motion from a kinetic-minus-
//! potential Lagrangian, the classical first-order form, promotion of
//! configuration variables to inputs (yielding a generalized system whose
//! right-hand side depends on input time derivatives), and equilibrium
//! solving.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{Expr, ExprError, Program, VarBinding};
use crate::jets::MultiIndex;
use crate::numeric::{self, NewtonOptions, NumericError};
use crate::symmat::{self, ExprMatrix, SymMatError};

#[derive(Debug, Error)]
pub enum MechanicsError {
    #[error("{0}")]
    Expr(#[from] ExprError),
    #[error("{0}")]
    SymMat(#[from] SymMatError),
    #[error("{0}")]
    Numeric(#[from] NumericError),
    #[error("metric entry ({0},{1}) is not symmetric")]
    NonSymmetricMetric(usize, usize),
    #[error("metric is not positive definite at the evaluated configuration")]
    MetricNotPositiveDefinite,
    #[error("singular mass matrix at the evaluated configuration")]
    SingularMassMatrix,
    #[error("{entry} may only depend on {allowed}, found `{var}`")]
    ForeignVariable {
        entry: String,
        allowed: String,
        var: String,
    },
    #[error("dimension mismatch in {0}")]
    Dimension(String),
    #[error("invalid promotion selection: {0}")]
    InvalidPromotion(String),
    #[error("equilibrium solve failed: {0}")]
    EquilibriumSolve(NumericError),
    #[error("unknown variable `{0}` in fixed set")]
    UnknownFixedVariable(String),
}

/// Mechanical system given by a Riemannian metric, a potential and an input
/// matrix, all expressions in the configuration variables.
#[derive(Debug, Clone)]
pub struct LagrangianSystem {
    pub coord_names: Vec<String>,
    pub vel_names: Vec<String>,
    pub input_names: Vec<String>,
    pub metric: ExprMatrix,
    pub potential: Expr,
    pub input_matrix: ExprMatrix,
}

impl LagrangianSystem {
    pub fn dof(&self) -> usize {
        self.coord_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        let p = self.dof();
        let m = self.input_dim();
        if self.vel_names.len() != p {
            return Err(MechanicsError::Dimension("velocity names".into()));
        }
        if self.metric.len() != p || self.metric.iter().any(|r| r.len() != p) {
            return Err(MechanicsError::Dimension("metric".into()));
        }
        if self.input_matrix.len() != p || self.input_matrix.iter().any(|r| r.len() != m) {
            return Err(MechanicsError::Dimension("input matrix".into()));
        }
        let allowed: Vec<&String> = self.coord_names.iter().collect();
        let check_coords_only = |entry: String, e: &Expr| -> Result<(), MechanicsError> {
            for var in e.free_vars() {
                if !allowed.iter().any(|a| **a == var) {
                    return Err(MechanicsError::ForeignVariable {
                        entry,
                        allowed: "configuration variables".into(),
                        var,
                    });
                }
            }
            Ok(())
        };
        for i in 0..p {
            for j in 0..p {
                check_coords_only(format!("metric entry ({},{})", i + 1, j + 1), &self.metric[i][j])?;
            }
            for l in 0..m {
                check_coords_only(
                    format!("input matrix entry ({},{})", i + 1, l + 1),
                    &self.input_matrix[i][l],
                )?;
            }
        }
        check_coords_only("potential".into(), &self.potential)?;
        self.check_metric_symmetry()?;
        Ok(())
    }

    fn check_metric_symmetry(&self) -> Result<(), MechanicsError> {
        let p = self.dof();
        for i in 0..p {
            for j in (i + 1)..p {
                let diff = (self.metric[i][j].clone() - self.metric[j][i].clone()).simplify();
                if diff.is_zero() {
                    continue;
                }
                // Not structurally identical: compare numerically on a grid.
                for trial in 0..16 {
                    let mut b = VarBinding::new();
                    for (idx, name) in self.coord_names.iter().enumerate() {
                        b.insert(name.clone(), ((trial * 7 + idx) as f64 * 0.37).sin() * 1.3);
                    }
                    match diff.eval(&b) {
                        Ok(v) if v.abs() <= 1e-9 => {}
                        _ => return Err(MechanicsError::NonSymmetricMetric(i + 1, j + 1)),
                    }
                }
            }
        }
        Ok(())
    }
}

/// The implicit form `M(q) qdd + c(q, v) = G(q) u` together with compiled
/// evaluators. `c` collects the Christoffel terms and the potential gradient.
#[derive(Debug, Clone)]
pub struct ClassicalStateForm {
    pub sys: LagrangianSystem,
    pub bias: Vec<Expr>,
    prog: Program,
}

/// Index layout of the compiled program outputs: metric (p*p), bias (p),
/// input matrix (p*m), potential (1).
impl ClassicalStateForm {
    pub fn p(&self) -> usize {
        self.sys.dof()
    }

    pub fn m(&self) -> usize {
        self.sys.input_dim()
    }

    pub fn eval_matrices(
        &self,
        q: &[f64],
        v: &[f64],
    ) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, f64), MechanicsError> {
        let p = self.p();
        let m = self.m();
        let mut values = Vec::with_capacity(2 * p);
        values.extend_from_slice(q);
        values.extend_from_slice(v);
        let out = self.prog.eval(&values)?;
        let mass = DMatrix::from_fn(p, p, |i, j| out[i * p + j]);
        let bias = DVector::from_fn(p, |i, _| out[p * p + i]);
        let input = DMatrix::from_fn(p, m, |i, l| out[p * p + p + i * m + l]);
        let potential = out[p * p + p + p * m];
        Ok((mass, bias, input, potential))
    }

    /// Numeric acceleration from the linear solve `M qdd = G u - c`.
    pub fn classical_rhs(
        &self,
        q: &[f64],
        v: &[f64],
        u: &[f64],
    ) -> Result<Vec<f64>, MechanicsError> {
        let (mass, bias, input, _) = self.eval_matrices(q, v)?;
        let rhs = input * DVector::from_column_slice(u) - bias;
        let lu = mass.lu();
        match lu.solve(&rhs) {
            Some(x) => Ok(x.as_slice().to_vec()),
            None => Err(MechanicsError::SingularMassMatrix),
        }
    }

    /// Residual of the implicit form at given accelerations.
    pub fn residual(
        &self,
        q: &[f64],
        v: &[f64],
        qdd: &[f64],
        u: &[f64],
    ) -> Result<DVector<f64>, MechanicsError> {
        let (mass, bias, input, _) = self.eval_matrices(q, v)?;
        Ok(mass * DVector::from_column_slice(qdd) + bias
            - input * DVector::from_column_slice(u))
    }

    /// Total energy `v' M v / 2 + V`; conserved under zero input.
    pub fn energy(&self, q: &[f64], v: &[f64]) -> Result<f64, MechanicsError> {
        let (mass, _, _, potential) = self.eval_matrices(q, v)?;
        let vel = DVector::from_column_slice(v);
        Ok(0.5 * vel.dot(&(&mass * &vel)) + potential)
    }

    /// Positive definiteness probe used before trusting a configuration.
    pub fn check_metric_pd(&self, q: &[f64]) -> Result<(), MechanicsError> {
        let (mass, _, _, _) = self.eval_matrices(q, &vec![0.0; self.p()])?;
        if mass.cholesky().is_none() {
            return Err(MechanicsError::MetricNotPositiveDefinite);
        }
        Ok(())
    }
}

/// Assemble the implicit equations of motion from the Lagrangian data:
/// `M = g(q)` and `c_i = (d_{q^k} g_ij - d_{q^i} g_jk / 2) v^j v^k + d_{q^i} V`.
pub fn euler_lagrange(sys: &LagrangianSystem) -> Result<ClassicalStateForm, MechanicsError> {
    sys.validate()?;
    let p = sys.dof();
    let mut bias = Vec::with_capacity(p);
    for i in 0..p {
        let mut c = sys.potential.diff(&sys.coord_names[i]);
        for j in 0..p {
            for k in 0..p {
                let dk_gij = sys.metric[i][j].diff(&sys.coord_names[k]);
                let di_gjk = sys.metric[j][k].diff(&sys.coord_names[i]);
                let coeff =
                    (dk_gij - Expr::num(0.5) * di_gjk).simplify();
                if coeff.is_zero() {
                    continue;
                }
                c = c + coeff
                    * Expr::var(sys.vel_names[j].clone())
                    * Expr::var(sys.vel_names[k].clone());
            }
        }
        bias.push(c.simplify());
    }

    let mut vars: Vec<String> = sys.coord_names.clone();
    vars.extend(sys.vel_names.iter().cloned());
    let mut outputs: Vec<Expr> = Vec::new();
    for row in &sys.metric {
        outputs.extend(row.iter().cloned());
    }
    outputs.extend(bias.iter().cloned());
    for row in &sys.input_matrix {
        outputs.extend(row.iter().cloned());
    }
    outputs.push(sys.potential.clone());
    let prog = Program::compile(&outputs, &vars)?;
    Ok(ClassicalStateForm {
        sys: sys.clone(),
        bias,
        prog,
    })
}

/// Rest point of the classical dynamics together with the holding input.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub coords: Vec<f64>,
    pub inputs: Vec<f64>,
    /// Flat-output representation, filled in once a flat output is known.
    pub flat_output: Option<Vec<f64>>,
}

/// Newton-refine `(q_s, u_s)` with `f(q_s, 0, u_s) = 0`. The system has `p`
/// equations in `p + m` unknowns; callers either pin variables by name
/// (values taken from the guess) or accept the least-norm correction.
pub fn find_equilibrium(
    csf: &ClassicalStateForm,
    q_guess: &[f64],
    u_guess: &[f64],
    fixed: &[&str],
) -> Result<Equilibrium, MechanicsError> {
    let p = csf.p();
    let m = csf.m();
    if q_guess.len() != p || u_guess.len() != m {
        return Err(MechanicsError::Dimension("equilibrium guess".into()));
    }
    let sys = &csf.sys;
    let all_names: Vec<String> = sys
        .coord_names
        .iter()
        .chain(sys.input_names.iter())
        .cloned()
        .collect();
    for f in fixed {
        if !all_names.iter().any(|n| n == f) {
            return Err(MechanicsError::UnknownFixedVariable(f.to_string()));
        }
    }
    let free: Vec<String> = all_names
        .iter()
        .filter(|n| !fixed.contains(&n.as_str()))
        .cloned()
        .collect();

    // Static residual G(q) u - c(q, 0); zero velocities drop the quadratic
    // Christoffel terms.
    let zero_vel: HashMap<String, Expr> = sys
        .vel_names
        .iter()
        .map(|v| (v.clone(), Expr::zero()))
        .collect();
    let mut residual_rows = Vec::with_capacity(p);
    for i in 0..p {
        let mut row = -csf.bias[i].substitute(&zero_vel).simplify();
        for l in 0..m {
            row = row
                + sys.input_matrix[i][l].clone() * Expr::var(sys.input_names[l].clone());
        }
        residual_rows.push(row.simplify());
    }
    let mut outputs = residual_rows.clone();
    for row in &residual_rows {
        for name in &free {
            outputs.push(row.diff(name));
        }
    }
    let prog = Program::compile(&outputs, &all_names)?;

    let full_guess: Vec<f64> = q_guess.iter().chain(u_guess.iter()).copied().collect();
    let free_idx: Vec<usize> = free
        .iter()
        .map(|n| all_names.iter().position(|a| a == n).unwrap())
        .collect();
    let assemble = |x: &DVector<f64>| -> Vec<f64> {
        let mut values = full_guess.clone();
        for (slot, &idx) in free_idx.iter().enumerate() {
            values[idx] = x[slot];
        }
        values
    };
    let n_free = free.len();
    let eval_all = |x: &DVector<f64>| -> Option<Vec<f64>> { prog.eval(&assemble(x)).ok() };

    let x0 = DVector::from_iterator(n_free, free_idx.iter().map(|&i| full_guess[i]));
    let solution = numeric::newton_least_squares(
        |x| eval_all(x).map(|o| DVector::from_column_slice(&o[..p])),
        |x| eval_all(x).map(|o| DMatrix::from_fn(p, n_free, |i, j| o[p + i * n_free + j])),
        x0,
        &NewtonOptions {
            tolerance: 1e-12,
            max_iterations: 50,
            max_halvings: 30,
        },
    )
    .map_err(MechanicsError::EquilibriumSolve)?;

    let values = assemble(&solution);
    let coords = values[..p].to_vec();
    let inputs = values[p..].to_vec();
    let accel = csf.classical_rhs(&coords, &vec![0.0; p], &inputs)?;
    let worst = accel.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    if worst > 1e-9 {
        return Err(MechanicsError::EquilibriumSolve(
            NumericError::NoConvergence {
                iterations: 50,
                residual: worst,
            },
        ));
    }
    Ok(Equilibrium {
        coords,
        inputs,
        flat_output: None,
    })
}

/// Classical system rewritten with `k` configuration variables as inputs.
/// The right-hand side depends on the promoted inputs up to their second
/// time derivative; derivative variables are named `{input}_d1`, `{input}_d2`.
#[derive(Debug, Clone)]
pub struct GeneralizedSystem {
    pub k: usize,
    pub state_coord_names: Vec<String>,
    pub state_vel_names: Vec<String>,
    /// Promoted coordinates first, then the remaining force inputs.
    pub input_names: Vec<String>,
    /// `(input index, coordinate index)` pairs into the classical system.
    pub promotion: Vec<(usize, usize)>,
    /// Acceleration expressions for the retained coordinates.
    pub rhs: Vec<Expr>,
    /// Highest input-derivative order per input component.
    pub input_orders: MultiIndex,
    /// Solved expressions for the replaced force inputs, for reconstruction.
    pub eliminated_inputs: Vec<(String, Expr)>,
    /// The mixed solve matrix, kept for conditioning diagnostics.
    pub mixed_matrix: ExprMatrix,
    rhs_prog: Program,
    mixed_prog: Program,
    rhs_var_names: Vec<String>,
}

impl GeneralizedSystem {
    pub fn state_dim(&self) -> usize {
        2 * self.state_coord_names.len()
    }

    /// Variable layout for `eval_rhs`: retained coordinates, retained
    /// velocities, then per input its value and derivatives up to its order.
    pub fn rhs_var_names(&self) -> &[String] {
        &self.rhs_var_names
    }

    pub fn input_jet_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, name) in self.input_names.iter().enumerate() {
            for order in 0..=self.input_orders.get(i) as usize {
                names.push(crate::jets::input_deriv_name(name, order));
            }
        }
        names
    }

    /// Acceleration of the retained coordinates given state and input jets,
    /// in the `rhs_var_names` layout.
    pub fn eval_rhs(&self, values: &[f64]) -> Result<DVector<f64>, MechanicsError> {
        let out = self.rhs_prog.eval(values)?;
        Ok(DVector::from_column_slice(&out))
    }

    /// Condition number of the mixed solve at a point, probing how far the
    /// promotion remains well defined.
    pub fn mixed_condition(&self, values: &[f64]) -> Result<f64, MechanicsError> {
        let n = self.mixed_matrix.len();
        let out = self.mixed_prog.eval(values)?;
        let a = DMatrix::from_fn(n, n, |i, j| out[i * n + j]);
        Ok(numeric::condition_number(&a))
    }
}

/// Solve the implicit dynamics for the selected inputs and the retained
/// accelerations, substituting promoted coordinates and their derivatives as
/// input jets. An empty selection returns the classical dynamics in solved
/// (explicit) form.
pub fn promote(
    csf: &ClassicalStateForm,
    selection: &[(usize, usize)],
) -> Result<GeneralizedSystem, MechanicsError> {
    let p = csf.p();
    let m = csf.m();
    let k = selection.len();
    if k > m {
        return Err(MechanicsError::InvalidPromotion(format!(
            "cannot promote {k} inputs out of {m}"
        )));
    }
    let mut seen_inputs = vec![false; m];
    let mut seen_coords = vec![false; p];
    for &(input, coord) in selection {
        if input >= m || coord >= p {
            return Err(MechanicsError::InvalidPromotion(
                "selection index out of range".into(),
            ));
        }
        if seen_inputs[input] || seen_coords[coord] {
            return Err(MechanicsError::InvalidPromotion(
                "selection reuses an input or coordinate".into(),
            ));
        }
        seen_inputs[input] = true;
        seen_coords[coord] = true;
    }
    let sys = &csf.sys;
    let sel_coords: Vec<usize> = selection.iter().map(|&(_, c)| c).collect();
    let retained_coords: Vec<usize> = (0..p).filter(|c| !sel_coords.contains(c)).collect();
    let remaining_inputs: Vec<usize> = (0..m).filter(|l| !seen_inputs[*l]).collect();

    // Unknowns: the selected force inputs, then the retained accelerations.
    let mut matrix: ExprMatrix = vec![Vec::with_capacity(p); p];
    for (i, row) in matrix.iter_mut().enumerate() {
        for &(input, _) in selection {
            row.push((-sys.input_matrix[i][input].clone()).simplify());
        }
        for &coord in &retained_coords {
            row.push(sys.metric[i][coord].clone());
        }
    }
    let mut rhs_rows: Vec<Expr> = Vec::with_capacity(p);
    for i in 0..p {
        let mut row = -csf.bias[i].clone();
        for &l in &remaining_inputs {
            row = row + sys.input_matrix[i][l].clone() * Expr::var(sys.input_names[l].clone());
        }
        for &(_, coord) in selection {
            let accel_var = Expr::var(crate::jets::input_deriv_name(&sys.coord_names[coord], 2));
            row = row - sys.metric[i][coord].clone() * accel_var;
        }
        rhs_rows.push(row.simplify());
    }
    let solution = symmat::solve_cramer(&matrix, &rhs_rows)?;

    // Promoted velocities become first derivatives of the new inputs.
    let rename: HashMap<String, String> = selection
        .iter()
        .map(|&(_, coord)| {
            (
                sys.vel_names[coord].clone(),
                crate::jets::input_deriv_name(&sys.coord_names[coord], 1),
            )
        })
        .collect();
    let renamed: Vec<Expr> = solution.iter().map(|e| e.rename_vars(&rename)).collect();
    let mixed_matrix: ExprMatrix = matrix
        .iter()
        .map(|row| row.iter().map(|e| e.rename_vars(&rename)).collect())
        .collect();

    let eliminated_inputs: Vec<(String, Expr)> = selection
        .iter()
        .enumerate()
        .map(|(slot, &(input, _))| (sys.input_names[input].clone(), renamed[slot].clone()))
        .collect();
    let rhs: Vec<Expr> = renamed[k..].to_vec();

    let input_names: Vec<String> = selection
        .iter()
        .map(|&(_, coord)| sys.coord_names[coord].clone())
        .chain(remaining_inputs.iter().map(|&l| sys.input_names[l].clone()))
        .collect();
    let m_tilde = input_names.len();

    // Scan the realized derivative orders of each new input.
    let mut free = std::collections::BTreeSet::new();
    for e in &rhs {
        free.extend(e.free_vars());
    }
    let mut orders = MultiIndex::zeros(m_tilde);
    for (i, name) in input_names.iter().enumerate() {
        for order in (0..=2).rev() {
            if free.contains(&crate::jets::input_deriv_name(name, order)) {
                orders.set(i, order as i64);
                break;
            }
        }
    }

    let state_coord_names: Vec<String> = retained_coords
        .iter()
        .map(|&c| sys.coord_names[c].clone())
        .collect();
    let state_vel_names: Vec<String> = retained_coords
        .iter()
        .map(|&c| sys.vel_names[c].clone())
        .collect();

    let mut rhs_var_names: Vec<String> = state_coord_names.clone();
    rhs_var_names.extend(state_vel_names.iter().cloned());
    for (i, name) in input_names.iter().enumerate() {
        for order in 0..=orders.get(i) as usize {
            rhs_var_names.push(crate::jets::input_deriv_name(name, order));
        }
    }
    let rhs_prog = Program::compile(&rhs, &rhs_var_names)?;
    let mixed_flat: Vec<Expr> = mixed_matrix.iter().flatten().cloned().collect();
    let mixed_prog = Program::compile(&mixed_flat, &rhs_var_names)?;

    Ok(GeneralizedSystem {
        k,
        state_coord_names,
        state_vel_names,
        input_names,
        promotion: selection.to_vec(),
        rhs,
        input_orders: orders,
        eliminated_inputs,
        mixed_matrix,
        rhs_prog,
        mixed_prog,
        rhs_var_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use approx::assert_abs_diff_eq;

    pub fn pendulum() -> LagrangianSystem {
        LagrangianSystem {
            coord_names: vec!["q1".into()],
            vel_names: vec!["v1".into()],
            input_names: vec!["u1".into()],
            metric: vec![vec![Expr::one()]],
            potential: parse("1 - cos(q1)").unwrap(),
            input_matrix: vec![vec![Expr::one()]],
        }
    }

    fn free_particle() -> LagrangianSystem {
        LagrangianSystem {
            coord_names: vec!["q1".into(), "q2".into()],
            vel_names: vec!["v1".into(), "v2".into()],
            input_names: vec!["u1".into(), "u2".into()],
            metric: vec![
                vec![Expr::one(), Expr::zero()],
                vec![Expr::zero(), Expr::one()],
            ],
            potential: Expr::zero(),
            input_matrix: vec![
                vec![Expr::one(), Expr::zero()],
                vec![Expr::zero(), Expr::one()],
            ],
        }
    }

    #[test]
    fn pendulum_equations_match_hand_derivation() {
        // L = v^2/2 - (1 - cos q), G = 1  =>  qdd + sin q = u.
        let csf = euler_lagrange(&pendulum()).unwrap();
        let mut b = VarBinding::new();
        b.insert("q1".into(), 0.83);
        b.insert("v1".into(), -0.4);
        assert_abs_diff_eq!(
            csf.bias[0].eval(&b).unwrap(),
            0.83_f64.sin(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn free_particle_has_no_bias() {
        let csf = euler_lagrange(&free_particle()).unwrap();
        for c in &csf.bias {
            assert!(c.is_zero(), "expected zero bias, got {c}");
        }
    }

    #[test]
    fn non_symmetric_metric_is_rejected() {
        let mut sys = free_particle();
        sys.metric[0][1] = parse("q1").unwrap();
        assert!(matches!(
            euler_lagrange(&sys),
            Err(MechanicsError::NonSymmetricMetric(1, 2))
        ));
    }

    #[test]
    fn classical_rhs_examples() {
        let csf = euler_lagrange(&pendulum()).unwrap();
        let qdd = csf.classical_rhs(&[0.0], &[0.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(qdd[0], 0.0, epsilon = 1e-14);
        let qdd = csf
            .classical_rhs(&[std::f64::consts::FRAC_PI_2], &[0.0], &[0.0])
            .unwrap();
        assert_abs_diff_eq!(qdd[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn equilibrium_hanging_pendulum() {
        let csf = euler_lagrange(&pendulum()).unwrap();
        let eq = find_equilibrium(&csf, &[0.3], &[0.1], &[]).unwrap();
        let r = csf.classical_rhs(&eq.coords, &[0.0], &eq.inputs).unwrap();
        assert!(r[0].abs() <= 1e-9);
    }

    #[test]
    fn equilibrium_with_fixed_input() {
        let csf = euler_lagrange(&pendulum()).unwrap();
        // sin(q) = 0.5 near the guess: q = pi/6.
        let eq = find_equilibrium(&csf, &[0.4], &[0.5], &["u1"]).unwrap();
        assert_abs_diff_eq!(eq.coords[0], std::f64::consts::PI / 6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(eq.inputs[0], 0.5, epsilon = 1e-15);
        // Infeasible holding torque: no equilibrium with |u| > 1.
        assert!(find_equilibrium(&csf, &[0.4], &[1.4], &["u1"]).is_err());
    }

    #[test]
    fn promote_with_empty_selection_is_the_classical_dynamics() {
        let csf = euler_lagrange(&pendulum()).unwrap();
        let gen = promote(&csf, &[]).unwrap();
        assert_eq!(gen.k, 0);
        assert_eq!(gen.state_dim(), 2);
        assert_eq!(gen.input_orders, MultiIndex::zeros(1));
        // f = u - sin q
        let values = [0.7, 0.0, 0.25];
        let rhs = gen.eval_rhs(&values).unwrap();
        assert_abs_diff_eq!(rhs[0], 0.25 - 0.7_f64.sin(), epsilon = 1e-14);
    }

    #[test]
    fn promoted_particle_coordinate_becomes_an_input() {
        let csf = euler_lagrange(&free_particle()).unwrap();
        let gen = promote(&csf, &[(0, 0)]).unwrap();
        assert_eq!(gen.state_coord_names, vec!["q2".to_string()]);
        assert_eq!(gen.input_names, vec!["q1".to_string(), "u2".to_string()]);
        // With a diagonal metric the q2 dynamics decouple: f = u2.
        assert_eq!(gen.input_orders.get(0), 0);
        // Layout: q2, v2, q1, u2.
        let rhs = gen.eval_rhs(&[0.3, -0.2, 0.1, 0.9]).unwrap();
        assert_abs_diff_eq!(rhs[0], 0.9, epsilon = 1e-14);
        // The eliminated force reconstructs as u1 = q1_dd.
        let (name, h) = &gen.eliminated_inputs[0];
        assert_eq!(name, "u1");
        let mut b = VarBinding::new();
        b.insert("q1_d2".into(), 1.7);
        assert_abs_diff_eq!(h.eval(&b).unwrap(), 1.7, epsilon = 1e-14);
    }

    #[test]
    fn energy_is_conserved_with_zero_input() {
        let csf = euler_lagrange(&pendulum()).unwrap();
        let mut state = DVector::from_vec(vec![1.1, 0.0]);
        let e0 = csf.energy(&[state[0]], &[state[1]]).unwrap();
        let mut f = |_t: f64, x: &DVector<f64>| -> Result<DVector<f64>, MechanicsError> {
            let qdd = csf.classical_rhs(&[x[0]], &[x[1]], &[0.0])?;
            Ok(DVector::from_vec(vec![x[1], qdd[0]]))
        };
        let dt = 1e-3;
        for i in 0..10_000 {
            state = numeric::rk4_step(&mut f, i as f64 * dt, &state, dt).unwrap();
        }
        let e1 = csf.energy(&[state[0]], &[state[1]]).unwrap();
        assert!((e1 - e0).abs() <= 1e-9, "energy drift {}", e1 - e0);
    }
}

//! Flat parameterizations and their equilibrium structure.
//!
//! A flat map carries the expressions parameterizing configuration,
//! velocity and input by the flat output's jet variables. Velocities and
//! accelerations are always derived from the configuration rows by the total
//! derivative, and the inputs by solving the implicit dynamics, so a user
//! only ever supplies the configuration rows. Certification is numeric: the
//! parameterized trajectories must satisfy the equations of motion at random
//! jet points.
//!
//! On top of the maps sit the equilibrium Jacobian analysis and the
//! enumeration of integrator-chain lengths achievable by quasi-static
//! feedback that stays regular at equilibria: either every retained chain
//! has length two, or exactly one chain has length four, one output is
//! direct feedthrough per promoted coordinate, and the certifying Jacobian
//! column comes from a second-derivative dependence.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{Expr, ExprError, VarBinding};
use crate::jets::{self, jet_var, JetPoint, JetsError, MultiIndex};
use crate::mechanics::{ClassicalStateForm, GeneralizedSystem, MechanicsError};
use crate::numeric::{self, RANK_REL_TOL};
use crate::symmat::{self, SymMatError};

#[derive(Debug, Error)]
pub enum FlatnessError {
    #[error("{0}")]
    Expr(#[from] ExprError),
    #[error("{0}")]
    Jets(#[from] JetsError),
    #[error("{0}")]
    Mechanics(#[from] MechanicsError),
    #[error("{0}")]
    SymMat(#[from] SymMatError),
    #[error("expected {expected} rows in {what}, got {got}")]
    WrongRowCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("flat output component {0} depends on `{1}`, not a configuration variable")]
    OutputNotConfiguration(usize, String),
    #[error(
        "supplied parameterization is inconsistent with the flat output \
         (max deviation {0:.3e})"
    )]
    InconsistentParameterization(f64),
    #[error("dynamics residual {0:.3e} exceeds tolerance; not a flat parameterization of this system")]
    ResidualFailure(f64),
    #[error("derivative order {order} of output {component} violates the expected bounds")]
    OrderBounds { component: usize, order: i64 },
    #[error("flat map is not defined at the requested point: {0}")]
    NotDefinedAt(String),
}

/// Flat output candidate: expressions over configuration variables (for a
/// generalized system the promoted coordinates count as configuration).
#[derive(Debug, Clone)]
pub struct FlatOutput {
    pub components: Vec<Expr>,
}

impl FlatOutput {
    pub fn new(components: Vec<Expr>) -> Self {
        FlatOutput { components }
    }

    pub fn m(&self) -> usize {
        self.components.len()
    }

    /// Syntactic configuration-flatness check: no velocities, no forces.
    pub fn validate_configuration(&self, coord_names: &[String]) -> Result<(), FlatnessError> {
        for (j, e) in self.components.iter().enumerate() {
            for var in e.free_vars() {
                if !coord_names.contains(&var) {
                    return Err(FlatnessError::OutputNotConfiguration(j + 1, var));
                }
            }
        }
        Ok(())
    }
}

/// The parameterizing map of a system (classical or generalized) by its flat
/// output: configuration, velocity, acceleration and input rows as
/// expressions in jet variables, plus the scanned derivative orders.
#[derive(Debug, Clone)]
pub struct FlatMap {
    pub m: usize,
    pub coord_rows: Vec<Expr>,
    pub vel_rows: Vec<Expr>,
    pub accel_rows: Vec<Expr>,
    pub input_rows: Vec<Expr>,
    /// Highest derivative orders in the state parameterization, per output.
    pub state_orders: MultiIndex,
    /// Highest derivative orders in the input parameterization, per output.
    pub input_orders: MultiIndex,
    pub max_order: usize,
}

impl FlatMap {
    pub fn state_rows(&self) -> usize {
        self.coord_rows.len()
    }

    pub fn eval_rows(rows: &[Expr], binding: &VarBinding) -> Result<Vec<f64>, FlatnessError> {
        rows.iter()
            .map(|e| e.eval(binding).map_err(FlatnessError::from))
            .collect()
    }

    /// All jet variable names the map can reference, in a fixed layout.
    pub fn jet_var_names(&self) -> Vec<String> {
        (1..=self.m)
            .flat_map(|j| (0..=self.max_order).map(move |a| jet_var(j, a)))
            .collect()
    }

    /// One program evaluating coord, vel, accel and input rows in order.
    pub fn compile_all_rows(&self) -> Result<crate::expr::Program, FlatnessError> {
        let mut rows: Vec<Expr> = self.coord_rows.clone();
        rows.extend(self.vel_rows.iter().cloned());
        rows.extend(self.accel_rows.iter().cloned());
        rows.extend(self.input_rows.iter().cloned());
        Ok(crate::expr::Program::compile(&rows, &self.jet_var_names())?)
    }

    /// Highest jet order per output across a row set, shifted by `offset`.
    fn scan_orders(rows: &[Expr], m: usize, offset: i64) -> MultiIndex {
        let mut orders = MultiIndex::zeros(m);
        for row in rows {
            for var in row.free_vars() {
                if let Some((j, alpha)) = jets::parse_jet_var(&var) {
                    if j >= 1 && j <= m {
                        let candidate = alpha as i64 + offset;
                        if candidate > orders.get(j - 1) {
                            orders.set(j - 1, candidate);
                        }
                    }
                }
            }
        }
        orders
    }
}

pub struct FlatMapOptions {
    pub max_order: usize,
    pub residual_samples: usize,
    pub residual_tolerance: f64,
    pub consistency_samples: usize,
    /// Check the order bounds of the minimally underactuated configuration
    /// flat case; `None` enables the check exactly when `m == p - 1`.
    pub enforce_order_bounds: Option<bool>,
    pub value_amplitude: f64,
    pub derivative_amplitude: f64,
    pub seed: u64,
}

impl Default for FlatMapOptions {
    fn default() -> Self {
        FlatMapOptions {
            max_order: 6,
            residual_samples: 50,
            residual_tolerance: 1e-8,
            consistency_samples: 20,
            enforce_order_bounds: None,
            value_amplitude: 1.0,
            derivative_amplitude: 0.4,
            seed: 0,
        }
    }
}

fn random_jet_binding(
    rng: &mut ChaCha8Rng,
    m: usize,
    max_order: usize,
    value_amplitude: f64,
    derivative_amplitude: f64,
) -> VarBinding {
    let mut b = VarBinding::new();
    for j in 1..=m {
        b.insert(jet_var(j, 0), rng.random_range(-value_amplitude..value_amplitude));
        for alpha in 1..=max_order {
            b.insert(
                jet_var(j, alpha),
                rng.random_range(-derivative_amplitude..derivative_amplitude),
            );
        }
    }
    b
}

/// Assemble and certify the flat parameterization of a classical system from
/// the user's configuration rows: velocities by prolongation, inputs by
/// solving the implicit dynamics on the parameterized trajectories, then a
/// numeric residual certificate.
pub fn build_flat_map(
    csf: &ClassicalStateForm,
    output: &FlatOutput,
    coord_map: &[Expr],
    opts: &FlatMapOptions,
) -> Result<FlatMap, FlatnessError> {
    let sys = &csf.sys;
    let p = csf.p();
    let m = csf.m();
    if output.m() != m {
        return Err(FlatnessError::WrongRowCount {
            what: "flat output",
            expected: m,
            got: output.m(),
        });
    }
    if coord_map.len() != p {
        return Err(FlatnessError::WrongRowCount {
            what: "configuration parameterization",
            expected: p,
            got: coord_map.len(),
        });
    }
    output.validate_configuration(&sys.coord_names)?;

    let coord_rows: Vec<Expr> = coord_map.iter().map(|e| e.simplify()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // The claimed parameterization must reproduce the claimed output.
    let into_coords: HashMap<String, Expr> = sys
        .coord_names
        .iter()
        .cloned()
        .zip(coord_rows.iter().cloned())
        .collect();
    let composed: Vec<Expr> = output
        .components
        .iter()
        .map(|phi| phi.substitute(&into_coords))
        .collect();
    let mut worst = 0.0_f64;
    for _ in 0..opts.consistency_samples {
        let b = random_jet_binding(
            &mut rng,
            m,
            opts.max_order,
            opts.value_amplitude,
            opts.derivative_amplitude,
        );
        for (j, through) in composed.iter().enumerate() {
            let direct = b[&jet_var(j + 1, 0)];
            worst = worst.max((through.eval(&b)? - direct).abs());
        }
    }
    if worst > 1e-9 {
        return Err(FlatnessError::InconsistentParameterization(worst));
    }

    let vel_rows: Vec<Expr> = coord_rows
        .iter()
        .map(|e| jets::total_derivative(e, opts.max_order))
        .collect::<Result<_, _>>()?;
    let accel_rows: Vec<Expr> = vel_rows
        .iter()
        .map(|e| jets::total_derivative(e, opts.max_order))
        .collect::<Result<_, _>>()?;

    // Force solution of the implicit dynamics, composed with the jet maps.
    // The system `G u = M qdd + c` is overdetermined but consistent on flat
    // trajectories; the normal equations give the smooth global solution.
    let accel_names: Vec<String> = sys.vel_names.iter().map(|v| format!("{v}_dot")).collect();
    let accel_vars: Vec<Expr> = accel_names.iter().map(Expr::var).collect();
    let g_t = symmat::transpose(&sys.input_matrix);
    let gram = symmat::mat_mul(&g_t, &sys.input_matrix)?;
    let mut force_rows = symmat::mat_vec(&sys.metric, &accel_vars)?;
    for (row, bias) in force_rows.iter_mut().zip(&csf.bias) {
        *row = (row.clone() + bias.clone()).simplify();
    }
    let rhs = symmat::mat_vec(&g_t, &force_rows)?;
    let u_solution = symmat::solve_cramer(&gram, &rhs)?;
    let mut substitution: HashMap<String, Expr> = into_coords;
    for (name, row) in sys.vel_names.iter().zip(&vel_rows) {
        substitution.insert(name.clone(), row.clone());
    }
    for (name, row) in accel_names.iter().zip(&accel_rows) {
        substitution.insert(name.clone(), row.clone());
    }
    let input_rows: Vec<Expr> = u_solution
        .iter()
        .map(|e| e.substitute(&substitution).simplify())
        .collect();

    let state_orders = {
        let from_coords = FlatMap::scan_orders(&coord_rows, m, 2);
        let from_vels = FlatMap::scan_orders(&vel_rows, m, 1);
        let mut orders = MultiIndex::zeros(m);
        for j in 0..m {
            orders.set(j, from_coords.get(j).max(from_vels.get(j)));
        }
        orders
    };
    let input_orders = FlatMap::scan_orders(&input_rows, m, 0);

    let fm = FlatMap {
        m,
        coord_rows,
        vel_rows,
        accel_rows,
        input_rows,
        state_orders,
        input_orders,
        max_order: opts.max_order,
    };

    // Residual certificate: the parameterized (q, v, qdd, u) must satisfy
    // the equations of motion.
    let check_prog = fm.compile_all_rows()?;
    let mut worst_residual = 0.0_f64;
    for _ in 0..opts.residual_samples {
        let b = random_jet_binding(
            &mut rng,
            m,
            opts.max_order,
            opts.value_amplitude,
            opts.derivative_amplitude,
        );
        let values = check_prog.eval_with(&b)?;
        let (q, rest) = values.split_at(p);
        let (v, rest) = rest.split_at(p);
        let (qdd, u) = rest.split_at(p);
        let r = csf.residual(q, v, qdd, u)?;
        worst_residual = worst_residual.max(r.amax());
    }
    if worst_residual > opts.residual_tolerance {
        return Err(FlatnessError::ResidualFailure(worst_residual));
    }

    let enforce = opts.enforce_order_bounds.unwrap_or(m == p.saturating_sub(1));
    if enforce {
        let mut saw_four = false;
        for j in 0..m {
            let r = fm.state_orders.get(j);
            if !(2..=4).contains(&r) {
                return Err(FlatnessError::OrderBounds {
                    component: j + 1,
                    order: r,
                });
            }
            saw_four |= r == 4;
        }
        if !saw_four {
            return Err(FlatnessError::OrderBounds {
                component: 0,
                order: fm.state_orders.components().iter().copied().max().unwrap_or(0),
            });
        }
    }
    Ok(fm)
}

/// Drop the promoted rows: the generalized map keeps the retained
/// coordinate/velocity rows, and its input rows are the promoted coordinate
/// parameterizations followed by the remaining force rows.
pub fn restrict_to_generalized(fm: &FlatMap, gen: &GeneralizedSystem) -> FlatMap {
    let promoted_coords: Vec<usize> = gen.promotion.iter().map(|&(_, c)| c).collect();
    let promoted_inputs: Vec<usize> = gen.promotion.iter().map(|&(i, _)| i).collect();
    let retained: Vec<usize> = (0..fm.coord_rows.len())
        .filter(|c| !promoted_coords.contains(c))
        .collect();
    let coord_rows: Vec<Expr> = retained.iter().map(|&c| fm.coord_rows[c].clone()).collect();
    let vel_rows: Vec<Expr> = retained.iter().map(|&c| fm.vel_rows[c].clone()).collect();
    let accel_rows: Vec<Expr> = retained.iter().map(|&c| fm.accel_rows[c].clone()).collect();
    let mut input_rows: Vec<Expr> = promoted_coords
        .iter()
        .map(|&c| fm.coord_rows[c].clone())
        .collect();
    for (l, row) in fm.input_rows.iter().enumerate() {
        if !promoted_inputs.contains(&l) {
            input_rows.push(row.clone());
        }
    }
    let m = fm.m;
    let state_orders = {
        let from_coords = FlatMap::scan_orders(&coord_rows, m, 2);
        let from_vels = FlatMap::scan_orders(&vel_rows, m, 1);
        let mut orders = MultiIndex::zeros(m);
        for j in 0..m {
            orders.set(j, from_coords.get(j).max(from_vels.get(j)));
        }
        orders
    };
    let input_orders = FlatMap::scan_orders(&input_rows, m, 0);
    FlatMap {
        m,
        coord_rows,
        vel_rows,
        accel_rows,
        input_rows,
        state_orders,
        input_orders,
        max_order: fm.max_order,
    }
}

/// Partial derivatives of `rows` with respect to every jet variable up to
/// `max_alpha`, as `[row][output j][order]`.
pub fn jet_partials(rows: &[Expr], m: usize, max_alpha: usize) -> Vec<Vec<Vec<Expr>>> {
    rows.iter()
        .map(|row| {
            (1..=m)
                .map(|j| {
                    (0..=max_alpha)
                        .map(|alpha| row.diff(&jet_var(j, alpha)))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn eval_block(
    partials: &[Vec<Vec<Expr>>],
    alpha: usize,
    binding: &VarBinding,
) -> Result<DMatrix<f64>, FlatnessError> {
    let rows = partials.len();
    let m = partials[0].len();
    let mut out = DMatrix::zeros(rows, m);
    for (i, row) in partials.iter().enumerate() {
        for j in 0..m {
            out[(i, j)] = row[j][alpha].eval(binding)?;
        }
    }
    Ok(out)
}

/// The four derivative blocks of the stacked state parameterization at an
/// equilibrium jet, with the rank data the structure theory runs on.
#[derive(Debug, Clone)]
pub struct EquilibriumJacobianReport {
    /// `d(coord rows)/d(y_[alpha])` for `alpha = 0..=3`.
    pub coord_blocks: Vec<DMatrix<f64>>,
    pub vel_blocks: Vec<DMatrix<f64>>,
    pub position_rank: usize,
    pub accel_rank: usize,
    pub position_sigma: f64,
    /// Largest entry of the blocks asserted to vanish at equilibria.
    pub zero_blocks_max: f64,
    /// Largest deviation in the velocity-block identities.
    pub velocity_identity_max: f64,
}

pub fn equilibrium_jacobian(
    fm: &FlatMap,
    y_s: &JetPoint,
) -> Result<EquilibriumJacobianReport, FlatnessError> {
    let binding = y_s.to_binding();
    let coord_partials = jet_partials(&fm.coord_rows, fm.m, 3);
    let vel_partials = jet_partials(&fm.vel_rows, fm.m, 3);
    let mut coord_blocks = Vec::with_capacity(4);
    let mut vel_blocks = Vec::with_capacity(4);
    for alpha in 0..=3 {
        coord_blocks.push(eval_block(&coord_partials, alpha, &binding)?);
        vel_blocks.push(eval_block(&vel_partials, alpha, &binding)?);
    }
    let position_rank = numeric::numeric_rank(&coord_blocks[0]);
    let accel_rank = numeric::numeric_rank(&coord_blocks[2]);
    let position_sigma = numeric::sigma_min(&coord_blocks[0]);
    let zero_blocks_max = [&coord_blocks[1], &coord_blocks[3], &vel_blocks[0], &vel_blocks[2]]
        .iter()
        .map(|b| b.amax())
        .fold(0.0_f64, f64::max);
    let velocity_identity_max = (&vel_blocks[1] - &coord_blocks[0])
        .amax()
        .max((&vel_blocks[3] - &coord_blocks[2]).amax());
    Ok(EquilibriumJacobianReport {
        coord_blocks,
        vel_blocks,
        position_rank,
        accel_rank,
        position_sigma,
        zero_blocks_max,
        velocity_identity_max,
    })
}

/// Verdict of the equilibrium structure checks on a classical map: the
/// position block has full column rank, the acceleration block has rank at
/// most one, the odd-order blocks vanish, and the velocity rows repeat the
/// position/acceleration blocks one order up.
#[derive(Debug, Clone)]
pub struct StructureVerdict {
    pub pass: bool,
    pub failures: Vec<String>,
}

pub const STRUCTURE_TOL: f64 = 1e-9;

pub fn verify_equilibrium_structure(report: &EquilibriumJacobianReport) -> StructureVerdict {
    let m = report.coord_blocks[0].ncols();
    let mut failures = Vec::new();
    if report.zero_blocks_max > STRUCTURE_TOL {
        failures.push(format!(
            "odd-order blocks are not zero (max entry {:.3e})",
            report.zero_blocks_max
        ));
    }
    if report.position_rank != m {
        failures.push(format!(
            "position block rank {} != {}",
            report.position_rank, m
        ));
    }
    if report.accel_rank > 1 {
        failures.push(format!(
            "acceleration block rank {} exceeds 1",
            report.accel_rank
        ));
    }
    if report.velocity_identity_max > STRUCTURE_TOL {
        failures.push(format!(
            "velocity-block identities violated (max deviation {:.3e})",
            report.velocity_identity_max
        ));
    }
    StructureVerdict {
        pass: failures.is_empty(),
        failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateCase {
    I,
    II,
}

impl std::fmt::Display for CandidateCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateCase::I => write!(f, "i"),
            CandidateCase::II => write!(f, "ii"),
        }
    }
}

/// An admissible chain-length multi-index with its witness: the output
/// subset whose position columns certify the rank condition, the
/// acceleration column for the length-four chain, and the smallest singular
/// value of the certifying square matrix at the equilibrium.
#[derive(Debug, Clone)]
pub struct ChainCandidate {
    pub kappa: MultiIndex,
    pub case: CandidateCase,
    /// 0-based flat-output indices forming the reordered front block.
    pub selected: Vec<usize>,
    /// For case ii, the output whose second-derivative column completes the
    /// rank (the chain of length four).
    pub accel_column: Option<usize>,
    pub margin: f64,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

fn columns(mat: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let rows = mat.nrows();
    DMatrix::from_fn(rows, cols.len(), |i, j| mat[(i, cols[j])])
}

/// Enumerate every chain-length multi-index admitting an equilibrium-regular
/// quasi-static feedback, with witnesses. An empty result means no feedback
/// of the admissible forms exists around this equilibrium.
pub fn enumerate_chain_candidates(
    fm: &FlatMap,
    y_s: &JetPoint,
) -> Result<Vec<ChainCandidate>, FlatnessError> {
    let n_rows = fm.state_rows();
    let m = fm.m;
    let binding = y_s.to_binding();
    let coord_partials = jet_partials(&fm.coord_rows, m, 2);
    let position = eval_block(&coord_partials, 0, &binding)?;
    let accel = eval_block(&coord_partials, 2, &binding)?;
    let mut out = Vec::new();

    // Every retained chain of length two: a subset of n_rows outputs whose
    // position columns are independent.
    if n_rows <= m {
        for subset in combinations(m, n_rows) {
            let sub = columns(&position, &subset);
            if numeric::numeric_rank(&sub) == n_rows {
                let mut kappa = MultiIndex::zeros(m);
                for &j in &subset {
                    kappa.set(j, 2);
                }
                if !kappa.le(&fm.state_orders) {
                    continue;
                }
                out.push(ChainCandidate {
                    kappa,
                    case: CandidateCase::I,
                    selected: subset.clone(),
                    accel_column: None,
                    margin: numeric::sigma_min(&sub),
                });
            }
        }
    }

    // One chain of length four: a smaller subset with independent position
    // columns, completed to full rank by the second-derivative column of the
    // length-four output.
    if n_rows >= 1 && n_rows - 1 <= m {
        for subset in combinations(m, n_rows - 1) {
            let sub = columns(&position, &subset);
            if numeric::numeric_rank(&sub) != n_rows - 1 {
                continue;
            }
            for &j in &subset {
                if fm.state_orders.get(j) < 4 {
                    continue;
                }
                let mut certifying = sub.clone();
                let accel_col = accel.column(j).into_owned();
                certifying = certifying.insert_column(n_rows - 1, 0.0);
                certifying.set_column(n_rows - 1, &accel_col);
                if numeric::numeric_rank(&certifying) == n_rows {
                    let mut kappa = MultiIndex::zeros(m);
                    for &s in &subset {
                        kappa.set(s, 2);
                    }
                    kappa.set(j, 4);
                    if !kappa.le(&fm.state_orders) {
                        continue;
                    }
                    debug_assert_eq!(kappa.total(), 2 * n_rows as i64);
                    out.push(ChainCandidate {
                        kappa,
                        case: CandidateCase::II,
                        selected: subset.clone(),
                        accel_column: Some(j),
                        margin: numeric::sigma_min(&certifying),
                    });
                }
            }
        }
    }

    out.sort_by(|a, b| {
        let case_key = |c: &ChainCandidate| matches!(c.case, CandidateCase::II) as u8;
        case_key(a)
            .cmp(&case_key(b))
            .then(b.margin.partial_cmp(&a.margin).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.kappa.cmp(&b.kappa))
    });
    Ok(out)
}

/// Selection Jacobian for a chain-length multi-index: derivatives of the
/// stacked (coord; vel) rows with respect to the retained jets
/// `y{j}_d{alpha}`, `alpha < kappa_j`. Regularity of this square matrix is
/// exactly solvability of the feedback's implicit equation. Built once per
/// multi-index, evaluated at many jet points.
pub struct SelectionJacobian {
    pub kappa: MultiIndex,
    nrows: usize,
    ncols: usize,
    prog: crate::expr::Program,
}

impl SelectionJacobian {
    pub fn build(fm: &FlatMap, kappa: &MultiIndex) -> Result<Self, FlatnessError> {
        let stacked: Vec<&Expr> = fm.coord_rows.iter().chain(fm.vel_rows.iter()).collect();
        let nrows = stacked.len();
        let mut entries = Vec::new();
        let mut ncols = 0;
        for j in 0..fm.m {
            for alpha in 0..kappa.get(j).max(0) {
                let var = jet_var(j + 1, alpha as usize);
                for row in &stacked {
                    entries.push(row.diff(&var));
                }
                ncols += 1;
            }
        }
        let prog = crate::expr::Program::compile(&entries, &fm.jet_var_names())?;
        Ok(SelectionJacobian {
            kappa: kappa.clone(),
            nrows,
            ncols,
            prog,
        })
    }

    pub fn eval(&self, binding: &VarBinding) -> Result<DMatrix<f64>, FlatnessError> {
        let values = self.prog.eval_with(binding)?;
        // Entries were emitted column-major.
        Ok(DMatrix::from_fn(self.nrows, self.ncols, |i, j| {
            values[j * self.nrows + i]
        }))
    }
}

#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub kappa: MultiIndex,
    pub sigma_at_point: f64,
    pub sigma_ball_min: f64,
    pub samples: usize,
}

/// Smallest singular value of the selection Jacobian at `y_s` and over a
/// sampled ball around it, probing how far the feedback stays regular.
pub fn check_regularity(
    fm: &FlatMap,
    kappa: &MultiIndex,
    y_s: &JetPoint,
    n_samples: usize,
    radius: f64,
    seed: u64,
) -> Result<RegularityReport, FlatnessError> {
    let jacobian = SelectionJacobian::build(fm, kappa)?;
    let binding = y_s.to_binding();
    let sigma_at_point = numeric::sigma_min(&jacobian.eval(&binding)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigma_ball_min = sigma_at_point;
    for _ in 0..n_samples {
        let mut b = binding.clone();
        for j in 1..=fm.m {
            for alpha in 0..=3usize {
                let var = jet_var(j, alpha);
                if let Some(v) = b.get_mut(&var) {
                    *v += rng.random_range(-radius..radius);
                }
            }
        }
        sigma_ball_min = sigma_ball_min.min(numeric::sigma_min(&jacobian.eval(&b)?));
    }
    Ok(RegularityReport {
        kappa: kappa.clone(),
        sigma_at_point,
        sigma_ball_min,
        samples: n_samples,
    })
}

/// Rank threshold shared with the enumeration: a selection Jacobian counts
/// as regular when its smallest singular value clears the relative floor.
pub fn is_regular(sigma_min: f64, scale: f64) -> bool {
    sigma_min > RANK_REL_TOL * scale.max(1.0)
}

//! Quasi-static feedback synthesis.
//!
//! Given an admissible chain-length multi-index, the retained jets (orders
//! below the chain length, per output) become unknowns and every deeper jet
//! is renamed to the new input `w{j}_d{beta}`. The state parameterization
//! rows then form an implicit square system for the retained jets; a damped
//! Newton solve inverts it pointwise (warm-started along trajectories, with
//! a branch guard), and the input parameterization evaluated on the solution
//! is the feedback. No integrator state anywhere: the law is a pure function
//! of the generalized state and the new-input jets.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{Expr, ExprError, Program};
use crate::flatness::{ChainCandidate, FlatMap, FlatnessError};
use crate::jets::{self, jet_var, w_var, JetsError, MultiIndex};
use crate::mechanics::GeneralizedSystem;
use crate::numeric;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("{0}")]
    Expr(#[from] ExprError),
    #[error("{0}")]
    Jets(#[from] JetsError),
    #[error("{0}")]
    Flatness(#[from] FlatnessError),
    #[error("chain lengths {kappa} do not sum to the state dimension {state_dim}")]
    WrongChainTotal { kappa: MultiIndex, state_dim: usize },
    #[error("chain lengths {kappa} exceed the parameterization orders {orders}")]
    ChainBeyondOrders { kappa: MultiIndex, orders: MultiIndex },
    #[error(
        "implicit solve did not converge: residual {residual:.3e}, smallest singular value \
         {sigma_min:.3e} (the point may be outside the regular neighborhood)"
    )]
    NoConvergence { residual: f64, sigma_min: f64 },
    #[error("singular Jacobian during the implicit solve")]
    SingularJacobian,
    #[error("solution jumped branches: step {step:.3e} exceeds bound {bound:.3e}")]
    BranchSwitch { step: f64, bound: f64 },
    #[error("new-input jets for component {component} need orders up to {needed}")]
    MissingWOrders { component: usize, needed: usize },
}

/// Values of the new input and its time derivatives, `w{j}_d{beta}` for
/// `beta = 0..=orders(j)`. The feedback law itself consumes orders up to
/// `S - kappa` componentwise; the closed-loop simulation asks for two more
/// when it evaluates the input's time derivatives.
#[derive(Debug, Clone)]
pub struct WJet {
    values: Vec<Vec<f64>>,
}

impl WJet {
    pub fn new(values: Vec<Vec<f64>>) -> Self {
        WJet { values }
    }

    pub fn m(&self) -> usize {
        self.values.len()
    }

    pub fn orders(&self, j: usize) -> usize {
        self.values[j - 1].len().saturating_sub(1)
    }

    /// `j` is 1-based.
    pub fn get(&self, j: usize, order: usize) -> f64 {
        self.values[j - 1][order]
    }
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Warm-started steps larger than `jump_factor` times the running step
    /// scale abort as branch switches.
    pub jump_factor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tolerance: 1e-10,
            max_iterations: 50,
            max_halvings: 30,
            jump_factor: 50.0,
        }
    }
}

/// Per-trajectory solver state: warm start and the step-scale estimate for
/// the branch guard. One workspace per concurrent trajectory.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    last_solution: Option<DVector<f64>>,
    typical_step: Option<f64>,
    guarded_steps: usize,
}

impl Workspace {
    pub fn reset(&mut self) {
        *self = Workspace::default();
    }

    pub fn last_solution(&self) -> Option<&DVector<f64>> {
        self.last_solution.as_ref()
    }
}

/// A synthesized quasi-static feedback law for one chain-length candidate.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub kappa: MultiIndex,
    pub m: usize,
    pub state_dim: usize,
    /// Retained jet variables solved by the implicit system, ordered by
    /// output then derivative order.
    pub unknown_names: Vec<String>,
    /// Highest new-input derivative order the law consumes, per component.
    pub w_orders: Vec<usize>,
    /// Input names in the order the law emits them.
    pub input_names: Vec<String>,
    /// Derivative order emitted per input by `input_with_derivatives`.
    pub input_derivative_orders: Vec<usize>,
    pub settings: SolverSettings,
    /// State rows and Jacobian entries over unknowns ++ law w-vars.
    residual_prog: Program,
    /// Input rows and their chain derivatives over unknowns ++ extended
    /// w-vars.
    input_prog: Program,
    n_unknowns: usize,
    law_w_names: Vec<String>,
    extended_w_names: Vec<String>,
    w_slots_per_component: Vec<(usize, usize)>,
}

/// Build the feedback law for a candidate: substitute chain-top jets by the
/// new input, derive the solve Jacobian symbolically, and prolong the input
/// rows along the closed-loop chain structure for the input derivatives the
/// generalized dynamics consume.
pub fn synthesize(
    fm: &FlatMap,
    gen: &GeneralizedSystem,
    candidate: &ChainCandidate,
    settings: SolverSettings,
) -> Result<FeedbackLaw, FeedbackError> {
    let kappa = candidate.kappa.clone();
    let m = fm.m;
    let state_dim = 2 * fm.state_rows();
    if kappa.total() != state_dim as i64 {
        return Err(FeedbackError::WrongChainTotal { kappa, state_dim });
    }
    if !kappa.le(&fm.state_orders) {
        return Err(FeedbackError::ChainBeyondOrders {
            kappa,
            orders: fm.state_orders.clone(),
        });
    }

    // Rename every jet at or above its chain length to a new-input variable.
    let mut substitution: HashMap<String, Expr> = HashMap::new();
    for j in 1..=m {
        let k = kappa.get(j - 1).max(0) as usize;
        for alpha in k..=fm.max_order {
            substitution.insert(jet_var(j, alpha), Expr::var(w_var(j, alpha - k)));
        }
    }
    let sub_coord_rows: Vec<Expr> = fm
        .coord_rows
        .iter()
        .map(|e| e.substitute(&substitution).simplify())
        .collect();
    let sub_vel_rows: Vec<Expr> = fm
        .vel_rows
        .iter()
        .map(|e| e.substitute(&substitution).simplify())
        .collect();
    let sub_input_rows: Vec<Expr> = fm
        .input_rows
        .iter()
        .map(|e| e.substitute(&substitution).simplify())
        .collect();

    let mut unknown_names = Vec::new();
    for j in 1..=m {
        for alpha in 0..kappa.get(j - 1).max(0) as usize {
            unknown_names.push(jet_var(j, alpha));
        }
    }
    let n_unknowns = unknown_names.len();
    debug_assert_eq!(n_unknowns, state_dim);

    // The law consumes w up to `input orders - kappa`; the chain derivative
    // rows need two more.
    let w_orders: Vec<usize> = (0..m)
        .map(|j| (fm.input_orders.get(j) - kappa.get(j)).max(0) as usize)
        .collect();
    let law_w_names: Vec<String> = (1..=m)
        .flat_map(|j| (0..=w_orders[j - 1]).map(move |b| w_var(j, b)))
        .collect();
    let extended_w_names: Vec<String> = (1..=m)
        .flat_map(|j| (0..=w_orders[j - 1] + 2).map(move |b| w_var(j, b)))
        .collect();

    // Residual program: state rows then the square Jacobian, row-major.
    let mut residual_outputs: Vec<Expr> = Vec::new();
    residual_outputs.extend(sub_coord_rows.iter().cloned());
    residual_outputs.extend(sub_vel_rows.iter().cloned());
    let stacked: Vec<Expr> = sub_coord_rows
        .iter()
        .chain(sub_vel_rows.iter())
        .cloned()
        .collect();
    for row in &stacked {
        for unknown in &unknown_names {
            residual_outputs.push(row.diff(unknown));
        }
    }
    let mut residual_vars = unknown_names.clone();
    residual_vars.extend(law_w_names.iter().cloned());
    let residual_prog = Program::compile(&residual_outputs, &residual_vars)?;

    // Along the closed loop each retained jet advances up its chain and the
    // top of the chain is the new input; the new input advances through its
    // own derivatives.
    let mut successors: HashMap<String, Expr> = HashMap::new();
    for j in 1..=m {
        let k = kappa.get(j - 1).max(0) as usize;
        for alpha in 0..k {
            let next = if alpha + 1 < k {
                Expr::var(jet_var(j, alpha + 1))
            } else {
                Expr::var(w_var(j, 0))
            };
            successors.insert(jet_var(j, alpha), next);
        }
        for beta in 0..=w_orders[j - 1] + 2 {
            successors.insert(w_var(j, beta), Expr::var(w_var(j, beta + 1)));
        }
    }
    let mut input_outputs: Vec<Expr> = sub_input_rows.clone();
    let mut input_derivative_orders = Vec::with_capacity(gen.input_names.len());
    for (i, row) in sub_input_rows.iter().enumerate() {
        let order = gen.input_orders.get(i).max(0) as usize;
        input_derivative_orders.push(order);
        let mut current = row.clone();
        for _ in 0..order {
            current = jets::total_derivative_with(&current, &successors)?;
            input_outputs.push(current.clone());
        }
    }
    let mut input_vars = unknown_names.clone();
    input_vars.extend(extended_w_names.iter().cloned());
    let input_prog = Program::compile(&input_outputs, &input_vars)?;

    let w_slots_per_component: Vec<(usize, usize)> = (0..m)
        .map(|j| (w_orders[j], w_orders[j] + 2))
        .collect();

    Ok(FeedbackLaw {
        kappa,
        m,
        state_dim,
        unknown_names,
        w_orders,
        input_names: gen.input_names.clone(),
        input_derivative_orders,
        settings,
        residual_prog,
        input_prog,
        n_unknowns,
        law_w_names,
        extended_w_names,
        w_slots_per_component,
    })
}

impl FeedbackLaw {
    fn law_w_values(&self, w: &WJet) -> Result<Vec<f64>, FeedbackError> {
        let mut out = Vec::with_capacity(self.law_w_names.len());
        for j in 1..=self.m {
            let needed = self.w_orders[j - 1];
            if w.orders(j) < needed {
                return Err(FeedbackError::MissingWOrders {
                    component: j,
                    needed,
                });
            }
            for b in 0..=needed {
                out.push(w.get(j, b));
            }
        }
        Ok(out)
    }

    fn extended_w_values(&self, w: &WJet) -> Result<Vec<f64>, FeedbackError> {
        let mut out = Vec::with_capacity(self.extended_w_names.len());
        for j in 1..=self.m {
            let needed = self.w_slots_per_component[j - 1].1;
            if w.orders(j) < needed {
                return Err(FeedbackError::MissingWOrders {
                    component: j,
                    needed,
                });
            }
            for b in 0..=needed {
                out.push(w.get(j, b));
            }
        }
        Ok(out)
    }

    /// Solve the implicit system for the retained jets at a state. Warm
    /// starts from the workspace; `guess` seeds the very first call.
    pub fn recover_jets(
        &self,
        state: &[f64],
        w: &WJet,
        guess: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> Result<DVector<f64>, FeedbackError> {
        debug_assert_eq!(state.len(), self.state_dim);
        let w_values = self.law_w_values(w)?;
        let n = self.n_unknowns;
        let mut x = match (&ws.last_solution, guess) {
            (Some(last), _) => last.clone(),
            (None, Some(g)) => DVector::from_column_slice(g),
            (None, None) => DVector::zeros(n),
        };
        let warm_started = ws.last_solution.is_some();

        let mut values = vec![0.0; n + w_values.len()];
        values[n..].copy_from_slice(&w_values);
        let mut out = vec![0.0; self.residual_prog.n_outputs()];
        let mut scratch = Vec::new();
        let eval = |x: &DVector<f64>,
                        out: &mut Vec<f64>,
                        scratch: &mut Vec<f64>,
                        values: &mut Vec<f64>|
         -> Result<(), FeedbackError> {
            values[..n].copy_from_slice(x.as_slice());
            self.residual_prog
                .eval_into(values, out, scratch)
                .map_err(FeedbackError::from)
        };

        eval(&x, &mut out, &mut scratch, &mut values)?;
        let residual_of = |out: &[f64], state: &[f64]| -> DVector<f64> {
            DVector::from_iterator(state.len(), out[..state.len()].iter().zip(state).map(|(a, b)| a - b))
        };
        let mut r = residual_of(&out, state);
        let mut last_sigma = f64::NAN;
        let mut converged = false;
        for _ in 0..self.settings.max_iterations {
            let norm = r.amax();
            if norm <= self.settings.tolerance {
                converged = true;
            }
            if norm <= 1e-14 {
                break;
            }
            let jac = DMatrix::from_fn(n, n, |i, jj| out[self.state_dim + i * n + jj]);
            let lu = jac.clone().lu();
            let step = match lu.solve(&r) {
                Some(s) => s,
                None => {
                    if converged {
                        break;
                    }
                    return Err(FeedbackError::SingularJacobian);
                }
            };
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=self.settings.max_halvings {
                let candidate = &x - &step * scale;
                values[..n].copy_from_slice(candidate.as_slice());
                if self
                    .residual_prog
                    .eval_into(&values, &mut out, &mut scratch)
                    .is_ok()
                {
                    let rc = residual_of(&out, state);
                    if rc.amax() < norm {
                        let improved = rc.amax() < 0.5 * norm;
                        x = candidate;
                        r = rc;
                        accepted = true;
                        if converged && !improved {
                            // Converged and polishing stalled.
                            eval(&x, &mut out, &mut scratch, &mut values)?;
                            break;
                        }
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                if converged {
                    break;
                }
                last_sigma = numeric::sigma_min(&jac);
                return Err(FeedbackError::NoConvergence {
                    residual: norm,
                    sigma_min: last_sigma,
                });
            }
            if converged && r.amax() > 0.5 * norm {
                break;
            }
        }
        if !converged && r.amax() > self.settings.tolerance {
            let jac = DMatrix::from_fn(n, n, |i, jj| out[self.state_dim + i * n + jj]);
            return Err(FeedbackError::NoConvergence {
                residual: r.amax(),
                sigma_min: if last_sigma.is_nan() {
                    numeric::sigma_min(&jac)
                } else {
                    last_sigma
                },
            });
        }

        if warm_started {
            let step = (&x - ws.last_solution.as_ref().unwrap()).amax();
            if let Some(typical) = ws.typical_step {
                if ws.guarded_steps >= 4 {
                    let bound = self.settings.jump_factor * typical.max(1e-9);
                    if step > bound {
                        return Err(FeedbackError::BranchSwitch { step, bound });
                    }
                }
                ws.typical_step = Some(0.9 * typical + 0.1 * step);
            } else {
                ws.typical_step = Some(step);
            }
            ws.guarded_steps += 1;
        }
        ws.last_solution = Some(x.clone());
        Ok(x)
    }

    /// The feedback value: input parameterization evaluated on the solved
    /// jets and the new-input jets.
    pub fn input(
        &self,
        state: &[f64],
        w: &WJet,
        guess: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> Result<Vec<f64>, FeedbackError> {
        let effective = self.with_padded(w);
        let jets = self.recover_jets(state, &effective, guess, ws)?;
        let values = self.assemble_input_values(&jets, &effective)?;
        let out = self.input_prog.eval(&values)?;
        Ok(out[..self.input_names.len()].to_vec())
    }

    /// Input values together with their chain time derivatives up to the
    /// order the generalized dynamics consume. `w` must supply two extra
    /// derivative orders per component.
    pub fn input_with_derivatives(
        &self,
        state: &[f64],
        w: &WJet,
        guess: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> Result<Vec<Vec<f64>>, FeedbackError> {
        let jets = self.recover_jets(state, w, guess, ws)?;
        let values = self.assemble_input_values(&jets, w)?;
        let out = self.input_prog.eval(&values)?;
        let mut result = Vec::with_capacity(self.input_names.len());
        let mut cursor = self.input_names.len();
        for (i, _) in self.input_names.iter().enumerate() {
            let order = self.input_derivative_orders[i];
            let mut jets_i = vec![out[i]];
            for _ in 0..order {
                jets_i.push(out[cursor]);
                cursor += 1;
            }
            result.push(jets_i);
        }
        Ok(result)
    }

    fn assemble_input_values(
        &self,
        jets: &DVector<f64>,
        w: &WJet,
    ) -> Result<Vec<f64>, FeedbackError> {
        let mut values = jets.as_slice().to_vec();
        values.extend(self.extended_w_values(w)?);
        Ok(values)
    }

    /// Re-substitution residual of a jet vector against a state: how well
    /// the parameterization evaluated on the jets reproduces the state.
    pub fn state_residual(
        &self,
        jets: &DVector<f64>,
        state: &[f64],
        w: &WJet,
    ) -> Result<f64, FeedbackError> {
        let w_values = self.law_w_values(w)?;
        let mut values = jets.as_slice().to_vec();
        values.extend_from_slice(&w_values);
        let out = self.residual_prog.eval(&values)?;
        Ok(out[..self.state_dim]
            .iter()
            .zip(state)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Pad a law-level jet set with zeros for the two extra derivative
    /// orders the input program expects; only `input` uses the padding, and
    /// the padded slots never influence the undifferentiated input rows.
    fn with_padded(&self, w: &WJet) -> WJet {
        let values: Vec<Vec<f64>> = (1..=self.m)
            .map(|j| {
                let needed = self.w_slots_per_component[j - 1].1;
                (0..=needed)
                    .map(|b| if w.orders(j) >= b { w.get(j, b) } else { 0.0 })
                    .collect()
            })
            .collect();
        WJet::new(values)
    }
}

/// Numeric dependence classification of a feedback law: finite differences
/// of the input with respect to each state component at consistent random
/// points. Entries below `1e-9` (relative) count as independent.
#[derive(Debug, Clone)]
pub struct DependenceReport {
    pub state_names: Vec<String>,
    pub sensitivity: Vec<f64>,
    /// New-input slots the law consumes per component (order count).
    pub w_slots: Vec<usize>,
}

pub fn dependence_report(
    law: &FeedbackLaw,
    fm: &FlatMap,
    gen: &GeneralizedSystem,
    y_s: &[f64],
    samples: usize,
    seed: u64,
) -> Result<DependenceReport, FeedbackError> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = fm.m;
    let mut state_names = gen.state_coord_names.clone();
    state_names.extend(gen.state_vel_names.iter().cloned());
    let mut sensitivity = vec![0.0_f64; law.state_dim];
    let h = 1e-3;
    for _ in 0..samples {
        // A consistent point: random jets near the equilibrium, state and
        // new input read off the same jets.
        let mut jp = crate::jets::JetPoint::equilibrium(y_s, fm.max_order);
        for j in 1..=m {
            for alpha in 1..=4usize {
                jp.set(j, alpha, rng.random_range(-0.2..0.2));
            }
        }
        let binding = jp.to_binding();
        let mut state = FlatMap::eval_rows(&fm.coord_rows, &binding)?;
        state.extend(FlatMap::eval_rows(&fm.vel_rows, &binding)?);
        let w_values: Vec<Vec<f64>> = (1..=m)
            .map(|j| {
                let k = law.kappa.get(j - 1).max(0) as usize;
                (0..=law.w_slots_per_component[j - 1].1)
                    .map(|b| {
                        let order = k + b;
                        if order <= jp.max_order() {
                            jp.get(j, order)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let w = WJet::new(w_values);
        let guess: Vec<f64> = law
            .unknown_names
            .iter()
            .map(|name| binding[name])
            .collect();
        let mut ws = Workspace::default();
        let base = law.input(&state, &w, Some(&guess), &mut ws)?;
        for i in 0..law.state_dim {
            let mut plus = state.clone();
            let mut minus = state.clone();
            plus[i] += h;
            minus[i] -= h;
            let mut ws_p = Workspace::default();
            let mut ws_m = Workspace::default();
            let up = law.input(&plus, &w, Some(&guess), &mut ws_p)?;
            let um = law.input(&minus, &w, Some(&guess), &mut ws_m)?;
            for l in 0..up.len() {
                let scale = 1.0 + base[l].abs();
                let s = (up[l] - um[l]).abs() / (2.0 * h) / scale;
                sensitivity[i] = sensitivity[i].max(s);
            }
        }
    }
    Ok(DependenceReport {
        state_names,
        sensitivity,
        w_slots: law.w_orders.iter().map(|o| o + 1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatness::{
        build_flat_map, enumerate_chain_candidates, restrict_to_generalized, FlatMapOptions,
        FlatOutput,
    };
    use crate::jets::JetPoint;
    use crate::mechanics::{euler_lagrange, promote};
    use crate::scenario::{fully_actuated_toy, ManipulatorScenario};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    struct ManipulatorRig {
        scenario: ManipulatorScenario,
        gen: GeneralizedSystem,
        gfm: FlatMap,
        candidates: Vec<ChainCandidate>,
    }

    fn manipulator_rig() -> ManipulatorRig {
        let scenario = ManipulatorScenario::new(Default::default());
        let csf = euler_lagrange(&scenario.system).unwrap();
        let fm = build_flat_map(
            &csf,
            &FlatOutput::new(scenario.flat_output.clone()),
            &scenario.flat_coord_map,
            &Default::default(),
        )
        .unwrap();
        let gen = promote(&csf, &scenario.promotion()).unwrap();
        let gfm = restrict_to_generalized(&fm, &gen);
        let jp = JetPoint::equilibrium(&[0.0, 0.0, 0.4], gfm.max_order);
        let candidates = enumerate_chain_candidates(&gfm, &jp).unwrap();
        ManipulatorRig {
            scenario,
            gen,
            gfm,
            candidates,
        }
    }

    fn equilibrium_w(law: &FeedbackLaw, y_s: &[f64]) -> WJet {
        // At rest the chain tops are zero except for direct-feedthrough
        // components, whose "input" is the output value itself.
        let values: Vec<Vec<f64>> = (1..=law.m)
            .map(|j| {
                let k = law.kappa.get(j - 1);
                let top = law.w_slots_per_component[j - 1].1;
                (0..=top)
                    .map(|b| {
                        if k == 0 && b == 0 {
                            y_s[j - 1]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        WJet::new(values)
    }

    fn jets_guess(law: &FeedbackLaw, jp: &JetPoint) -> Vec<f64> {
        let binding = jp.to_binding();
        law.unknown_names.iter().map(|n| binding[n]).collect()
    }

    #[test]
    fn kappa2_unknowns_skip_the_feedthrough_output() {
        let rig = manipulator_rig();
        let law = synthesize(&rig.gfm, &rig.gen, &rig.candidates[1], Default::default()).unwrap();
        assert_eq!(
            law.unknown_names,
            vec!["y2", "y2_d1", "y3", "y3_d1", "y3_d2", "y3_d3"]
        );
        assert_eq!(law.w_slots_per_component.len(), 3);
        assert_eq!(law.w_orders, vec![4, 2, 0]);
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_both_laws() {
        let rig = manipulator_rig();
        let y_s = [0.3, -0.2, 0.4];
        let jp = JetPoint::equilibrium(&y_s, rig.gfm.max_order);
        let (hover_q, hover_u) = rig.scenario.hover(&y_s);
        for candidate in &rig.candidates {
            let law =
                synthesize(&rig.gfm, &rig.gen, candidate, Default::default()).unwrap();
            let state = vec![hover_q[0], hover_q[1], hover_q[2], 0.0, 0.0, 0.0];
            let w = equilibrium_w(&law, &y_s);
            let guess = jets_guess(&law, &jp);
            let mut ws = Workspace::default();
            let jets = law
                .recover_jets(&state, &w, Some(&guess), &mut ws)
                .unwrap();
            // All derivative unknowns vanish at the equilibrium.
            for (name, value) in law.unknown_names.iter().zip(jets.iter()) {
                let expected = jp.to_binding()[name];
                assert!(
                    (value - expected).abs() <= 1e-9,
                    "{name}: {value} vs {expected}"
                );
            }
            // The feedback reproduces the hover inputs (phi, F1, F2).
            let u = law.input(&state, &w, Some(&guess), &mut ws).unwrap();
            assert!((u[0] - hover_q[3]).abs() <= 1e-9, "phi {}", u[0]);
            assert!((u[1] - hover_u[0]).abs() <= 1e-7);
            assert!((u[2] - hover_u[1]).abs() <= 1e-7);
        }
    }

    #[test]
    fn random_round_trip_recovers_the_generating_jets() {
        let rig = manipulator_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for candidate in &rig.candidates {
            let law =
                synthesize(&rig.gfm, &rig.gen, candidate, Default::default()).unwrap();
            for _ in 0..20 {
                let mut jp = JetPoint::equilibrium(&[0.1, -0.3, 0.5], rig.gfm.max_order);
                for j in 1..=3 {
                    for alpha in 1..=rig.gfm.max_order {
                        jp.set(j, alpha, rng.random_range(-0.15..0.15));
                    }
                    jp.set(j, 0, jp.get(j, 0) + rng.random_range(-0.2..0.2));
                }
                let binding = jp.to_binding();
                let mut state = FlatMap::eval_rows(&rig.gfm.coord_rows, &binding).unwrap();
                state.extend(FlatMap::eval_rows(&rig.gfm.vel_rows, &binding).unwrap());
                let w_values: Vec<Vec<f64>> = (1..=3usize)
                    .map(|j| {
                        let k = law.kappa.get(j - 1).max(0) as usize;
                        (0..=law.w_slots_per_component[j - 1].1)
                            .map(|b| {
                                if k + b <= jp.max_order() {
                                    jp.get(j, k + b)
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect();
                let w = WJet::new(w_values);
                // A deliberately rough guess: equilibrium-shaped jets.
                let guess = vec![0.0; law.state_dim];
                let mut ws = Workspace::default();
                let jets = law.recover_jets(&state, &w, Some(&guess), &mut ws).unwrap();
                for (name, value) in law.unknown_names.iter().zip(jets.iter()) {
                    let expected = binding[name];
                    assert!(
                        (value - expected).abs() <= 1e-8,
                        "{name}: {value} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn solution_is_locally_unique_under_guess_perturbation() {
        let rig = manipulator_rig();
        let law = synthesize(&rig.gfm, &rig.gen, &rig.candidates[0], Default::default()).unwrap();
        let y_s = [0.0, 0.0, 0.4];
        let jp = JetPoint::equilibrium(&y_s, rig.gfm.max_order);
        let (hover_q, _) = rig.scenario.hover(&y_s);
        let state = vec![hover_q[0], hover_q[1], hover_q[2], 0.0, 0.0, 0.0];
        let w = equilibrium_w(&law, &y_s);
        let base_guess = jets_guess(&law, &jp);
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut reference: Option<DVector<f64>> = None;
        for _ in 0..10 {
            let guess: Vec<f64> = base_guess
                .iter()
                .map(|g| g + rng.random_range(-0.05..0.05))
                .collect();
            let mut ws = Workspace::default();
            let jets = law.recover_jets(&state, &w, Some(&guess), &mut ws).unwrap();
            match &reference {
                None => reference = Some(jets),
                Some(r) => assert!((r - &jets).amax() <= 1e-9),
            }
        }
    }

    #[test]
    fn kappa2_feedback_ignores_height_and_vertical_speed() {
        let rig = manipulator_rig();
        let law = synthesize(&rig.gfm, &rig.gen, &rig.candidates[1], Default::default()).unwrap();
        let report =
            dependence_report(&law, &rig.gfm, &rig.gen, &[0.0, 0.0, 0.5], 5, 3).unwrap();
        assert_eq!(report.w_slots, vec![5, 3, 1]);
        let idx = |name: &str| {
            report
                .state_names
                .iter()
                .position(|n| n == name)
                .unwrap()
        };
        assert!(report.sensitivity[idx("z_e")] <= 1e-9, "{}", report.sensitivity[idx("z_e")]);
        assert!(report.sensitivity[idx("v_ze")] <= 1e-9);
        assert!(report.sensitivity[idx("x_e")] > 1e-4);
        assert!(report.sensitivity[idx("theta")] > 1e-4);
        assert!(report.sensitivity[idx("v_xe")] > 1e-4);
        assert!(report.sensitivity[idx("om_theta")] > 1e-4);
    }

    #[test]
    fn toy_law_is_computed_torque() {
        let (system, outputs, coord_map) = fully_actuated_toy();
        let csf = euler_lagrange(&system).unwrap();
        let fm = build_flat_map(
            &csf,
            &FlatOutput::new(outputs),
            &coord_map,
            &FlatMapOptions {
                enforce_order_bounds: Some(false),
                ..Default::default()
            },
        )
        .unwrap();
        let gen = promote(&csf, &[]).unwrap();
        let gfm = restrict_to_generalized(&fm, &gen);
        let jp = JetPoint::equilibrium(&[0.2, -0.1], gfm.max_order);
        let candidates = enumerate_chain_candidates(&gfm, &jp).unwrap();
        let law = synthesize(&gfm, &gen, &candidates[0], Default::default()).unwrap();
        // u = M(q) w + c(q, v): the computed-torque law, depending on the
        // whole state through the recovered jets.
        let state = [0.4, -0.2, 0.1, 0.3];
        let w = WJet::new(vec![vec![1.0, 0.0, 0.0], vec![-2.0, 0.0, 0.0]]);
        let mut ws = Workspace::default();
        let u = law.input(&state, &w, Some(&[0.0; 4]), &mut ws).unwrap();
        let residual = csf
            .residual(&state[..2], &state[2..], &[1.0, -2.0], &u)
            .unwrap();
        assert!(residual.amax() <= 1e-9, "{residual}");
        let report = dependence_report(&law, &gfm, &gen, &[0.2, -0.1], 3, 5).unwrap();
        assert!(
            report.sensitivity.iter().all(|&s| s > 1e-6),
            "{:?}",
            report.sensitivity
        );
    }
}

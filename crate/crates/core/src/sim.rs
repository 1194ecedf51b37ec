//! Closed-loop verification and rest-to-rest planning.
//!
//! References are polynomials in the flat output with vanishing boundary
//! derivatives, so every jet the feedback needs is available analytically.
//! Two trajectory generators cross-check each other: the flat-side rollout
//! maps the reference jets through the parameterization (exact by
//! construction), and the closed-loop simulation integrates the generalized
//! dynamics under the synthesized feedback with fixed-step RK4. If the
//! feedback is right, the two agree and the numerically differentiated flat
//! output reproduces the new input on every chain.

use nalgebra::DVector;
use thiserror::Error;

use crate::expr::{Expr, ExprError, Program, VarBinding};
use crate::feedback::{FeedbackError, FeedbackLaw, WJet, Workspace};
use crate::flatness::{FlatMap, FlatnessError};
use crate::jets::{self, jet_var, JetsError, MultiIndex};
use crate::mechanics::{ClassicalStateForm, GeneralizedSystem, MechanicsError};
use crate::numeric;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0}")]
    Expr(#[from] ExprError),
    #[error("{0}")]
    Jets(#[from] JetsError),
    #[error("{0}")]
    Mechanics(#[from] MechanicsError),
    #[error("{0}")]
    Flatness(#[from] FlatnessError),
    #[error("feedback solve failed at t = {time:.4}: {source}")]
    FeedbackAt {
        time: f64,
        #[source]
        source: FeedbackError,
    },
    #[error("endpoint is not an equilibrium (residual {0:.3e})")]
    NonEquilibriumEndpoint(f64),
    #[error("trajectory channels have inconsistent lengths")]
    ChannelMismatch,
    #[error("initial state has wrong dimension: expected {expected}, got {got}")]
    WrongStateDim { expected: usize, got: usize },
}

/// Shape polynomial in the scaled time `s = t / T`, applied as
/// `offset + amplitude * shape(s)`. Keeping the shape coefficients exact
/// integers (they are for smoothsteps) makes the boundary derivatives cancel
/// exactly in floating point.
#[derive(Debug, Clone)]
pub struct Polynomial {
    pub shape: Vec<f64>,
    pub amplitude: f64,
    pub offset: f64,
    pub time_scale: f64,
}

impl Polynomial {
    pub fn constant(value: f64) -> Self {
        Polynomial {
            shape: vec![0.0],
            amplitude: 0.0,
            offset: value,
            time_scale: 1.0,
        }
    }

    pub fn derivative_at(&self, t: f64, order: usize) -> f64 {
        let s = t / self.time_scale;
        let mut sum = 0.0;
        for (k, &c) in self.shape.iter().enumerate().skip(order) {
            let mut factor = c;
            for i in 0..order {
                factor *= (k - i) as f64;
            }
            sum += factor * s.powi((k - order) as i32);
        }
        let value = self.amplitude * sum / self.time_scale.powi(order as i32);
        if order == 0 {
            self.offset + value
        } else {
            value
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut out = 1.0;
    for i in 0..k {
        out = out * (n - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Smoothstep of order `n` expanded in the unit interval: the minimal-degree
/// polynomial rising 0 to 1 with derivatives `1..=n` vanishing at both ends.
fn smoothstep_coeffs(n: usize) -> Vec<f64> {
    let mut coeffs = vec![0.0; 2 * n + 2];
    for i in 0..=n {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        coeffs[n + 1 + i] = sign * binomial(n + i, i) * binomial(2 * n + 1, n - i);
    }
    coeffs
}

/// Per-component polynomial reference for the flat output over `[0, T]`.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub duration: f64,
    pub boundary_order: usize,
    pub components: Vec<Polynomial>,
}

impl ReferenceTrajectory {
    pub fn m(&self) -> usize {
        self.components.len()
    }

    /// `j` is 1-based, matching jet variable naming.
    pub fn jet(&self, t: f64, j: usize, order: usize) -> f64 {
        self.components[j - 1].derivative_at(t, order)
    }

    pub fn jet_binding(&self, t: f64, max_order: usize) -> VarBinding {
        let mut b = VarBinding::new();
        for j in 1..=self.m() {
            for order in 0..=max_order {
                b.insert(jet_var(j, order), self.jet(t, j, order));
            }
        }
        b
    }

    /// New-input jets at time `t` for the given chain lengths:
    /// `w{j}_d{beta} = y_j^(kappa_j + beta)(t)`, orders per `w_orders`.
    pub fn w_jet(&self, t: f64, kappa: &MultiIndex, w_orders: &[usize]) -> WJet {
        let values: Vec<Vec<f64>> = (1..=self.m())
            .map(|j| {
                let k = kappa.get(j - 1).max(0) as usize;
                (0..=w_orders[j - 1])
                    .map(|b| self.jet(t, j, k + b))
                    .collect()
            })
            .collect();
        WJet::new(values)
    }
}

/// Minimal-degree rest-to-rest polynomial between two equilibria of the flat
/// map: degree `2*boundary_order + 1`, derivatives `1..=boundary_order`
/// vanish at both ends. Endpoints are certified as equilibria through the
/// classical dynamics first.
pub fn plan_rest_to_rest(
    fm: &FlatMap,
    csf: &ClassicalStateForm,
    classical_fm: &FlatMap,
    y_start: &[f64],
    y_end: &[f64],
    duration: f64,
    boundary_order: usize,
) -> Result<ReferenceTrajectory, SimError> {
    for y in [y_start, y_end] {
        let jp = jets::JetPoint::equilibrium(y, classical_fm.max_order);
        let binding = jp.to_binding();
        let q = FlatMap::eval_rows(&classical_fm.coord_rows, &binding)?;
        let u = FlatMap::eval_rows(&classical_fm.input_rows, &binding)?;
        let qdd = csf.classical_rhs(&q, &vec![0.0; q.len()], &u)?;
        let worst = qdd.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
        if worst > 1e-8 {
            return Err(SimError::NonEquilibriumEndpoint(worst));
        }
    }
    let _ = fm;
    let base = smoothstep_coeffs(boundary_order);
    let components = y_start
        .iter()
        .zip(y_end)
        .map(|(&a, &b)| {
            if a == b {
                return Polynomial::constant(a);
            }
            Polynomial {
                shape: base.clone(),
                amplitude: b - a,
                offset: a,
                time_scale: duration,
            }
        })
        .collect();
    Ok(ReferenceTrajectory {
        duration,
        boundary_order,
        components,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    /// Rollout: generalized dynamics residual. Closed loop: implicit-solve
    /// re-substitution residual.
    pub residual: f64,
    /// Condition number of the promotion's mixed solve at this point.
    pub mixed_condition: f64,
}

/// Sampled trajectory of the generalized system.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub time: Vec<f64>,
    /// Per sample: retained coordinates then retained velocities.
    pub state: Vec<Vec<f64>>,
    /// Per sample: input values (undifferentiated).
    pub input: Vec<Vec<f64>>,
    /// Per sample: flat output reconstructed from state and input.
    pub flat_output: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.time.len();
        if self.state.len() != n
            || self.input.len() != n
            || self.flat_output.len() != n
            || self.diagnostics.len() != n
        {
            return Err(SimError::ChannelMismatch);
        }
        if self.time.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::ChannelMismatch);
        }
        Ok(())
    }

    pub fn max_residual(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.residual)
            .fold(0.0, f64::max)
    }

    pub fn final_state(&self) -> &[f64] {
        self.state.last().unwrap()
    }

    /// Largest componentwise state difference against another trajectory on
    /// the same grid.
    pub fn max_state_difference(&self, other: &Trajectory) -> f64 {
        self.state
            .iter()
            .zip(&other.state)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn time_grid(duration: f64, dt: f64) -> Vec<f64> {
    let steps = (duration / dt).round().max(1.0) as usize;
    (0..=steps).map(|i| i as f64 * dt).collect()
}

/// Evaluator for the flat output along generalized trajectories: the output
/// depends on the retained coordinates and the promoted inputs.
struct OutputReconstructor {
    prog: Program,
    n_coords: usize,
    k: usize,
}

impl OutputReconstructor {
    fn build(
        outputs: &[Expr],
        gen: &GeneralizedSystem,
    ) -> Result<OutputReconstructor, ExprError> {
        let mut vars: Vec<String> = gen.state_coord_names.clone();
        vars.extend(gen.input_names[..gen.k].iter().cloned());
        let prog = Program::compile(outputs, &vars)?;
        Ok(OutputReconstructor {
            prog,
            n_coords: gen.state_coord_names.len(),
            k: gen.k,
        })
    }

    fn eval(&self, state: &[f64], input: &[f64]) -> Result<Vec<f64>, ExprError> {
        let mut values = Vec::with_capacity(self.n_coords + self.k);
        values.extend_from_slice(&state[..self.n_coords]);
        values.extend_from_slice(&input[..self.k]);
        self.prog.eval(&values)
    }
}

/// Map the reference jets through the generalized flat map: the exact
/// trajectory the closed loop should reproduce, with the generalized
/// dynamics residual checked along the way.
pub fn flat_side_rollout(
    fm: &FlatMap,
    gen: &GeneralizedSystem,
    outputs: &[Expr],
    reference: &ReferenceTrajectory,
    dt: f64,
) -> Result<Trajectory, SimError> {
    let n_rows = fm.state_rows();
    let max_order = fm.max_order + 2;
    // Input jets for the dynamics: the promoted input rows prolonged.
    let mut input_jet_rows: Vec<Expr> = Vec::new();
    for (i, row) in fm.input_rows.iter().enumerate() {
        input_jet_rows.push(row.clone());
        let order = gen.input_orders.get(i).max(0) as usize;
        let mut current = row.clone();
        for _ in 0..order {
            current = jets::total_derivative(&current, max_order)?;
            input_jet_rows.push(current.clone());
        }
    }
    let mut rows: Vec<Expr> = fm.coord_rows.clone();
    rows.extend(fm.vel_rows.iter().cloned());
    rows.extend(fm.accel_rows.iter().cloned());
    rows.extend(input_jet_rows.iter().cloned());
    let all_vars: Vec<String> = (1..=fm.m)
        .flat_map(|j| (0..=max_order).map(move |a| jet_var(j, a)))
        .collect();
    let prog = Program::compile(&rows, &all_vars)?;
    let reconstructor = OutputReconstructor::build(outputs, gen)?;

    let grid = time_grid(reference.duration, dt);
    let mut trajectory = Trajectory {
        time: Vec::with_capacity(grid.len()),
        state: Vec::with_capacity(grid.len()),
        input: Vec::with_capacity(grid.len()),
        flat_output: Vec::with_capacity(grid.len()),
        diagnostics: Vec::with_capacity(grid.len()),
    };
    for &t in &grid {
        let binding = reference.jet_binding(t, max_order);
        let values = prog.eval_with(&binding)?;
        let (coords, rest) = values.split_at(n_rows);
        let (vels, rest) = rest.split_at(n_rows);
        let (accels, input_jets) = rest.split_at(n_rows);
        let mut state = coords.to_vec();
        state.extend_from_slice(vels);
        let mut rhs_values = state.clone();
        rhs_values.extend_from_slice(input_jets);
        let f = gen.eval_rhs(&rhs_values)?;
        let residual = accels
            .iter()
            .zip(f.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let mixed_condition = gen.mixed_condition(&rhs_values)?;
        // Undifferentiated inputs sit at the start of each input's jet run.
        let mut input = Vec::with_capacity(gen.input_names.len());
        let mut cursor = 0;
        for i in 0..gen.input_names.len() {
            input.push(input_jets[cursor]);
            cursor += 1 + gen.input_orders.get(i).max(0) as usize;
        }
        let y = reconstructor.eval(&state, &input)?;
        trajectory.time.push(t);
        trajectory.state.push(state);
        trajectory.input.push(input);
        trajectory.flat_output.push(y);
        trajectory.diagnostics.push(StepDiagnostics {
            residual,
            mixed_condition,
        });
    }
    trajectory.validate()?;
    Ok(trajectory)
}

/// How the closed loop supplies the input time derivatives the generalized
/// dynamics consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputDerivativeStrategy {
    /// Prolong the feedback along the chain structure (exact).
    ChainAnalytic,
    /// Backward finite differences of the realized input history
    /// (assumption-free cross-check; falls back to the analytic rows for
    /// the first few steps).
    History,
}

/// Integrate the generalized dynamics under the feedback law with fixed-step
/// RK4. The implicit solves warm-start step to step; a branch switch aborts.
pub fn simulate_closed_loop(
    gen: &GeneralizedSystem,
    law: &FeedbackLaw,
    outputs: &[Expr],
    reference: &ReferenceTrajectory,
    x0: &[f64],
    dt: f64,
    strategy: InputDerivativeStrategy,
) -> Result<Trajectory, SimError> {
    let state_dim = law.state_dim;
    if x0.len() != state_dim {
        return Err(SimError::WrongStateDim {
            expected: state_dim,
            got: x0.len(),
        });
    }
    let n_rows = state_dim / 2;
    let m = law.m;
    let w_orders_ext: Vec<usize> = law.w_orders.iter().map(|o| o + 2).collect();
    let reconstructor = OutputReconstructor::build(outputs, gen)?;

    let grid = time_grid(reference.duration, dt);
    let mut ws = Workspace::default();
    let initial_binding = reference.jet_binding(0.0, law.kappa.components().iter().map(|&k| k.max(0) as usize).max().unwrap_or(0));
    let initial_guess: Vec<f64> = law
        .unknown_names
        .iter()
        .map(|name| initial_binding[name])
        .collect();
    let mut guess = Some(initial_guess);

    let mut trajectory = Trajectory {
        time: Vec::with_capacity(grid.len()),
        state: Vec::with_capacity(grid.len()),
        input: Vec::with_capacity(grid.len()),
        flat_output: Vec::with_capacity(grid.len()),
        diagnostics: Vec::with_capacity(grid.len()),
    };
    let mut x = DVector::from_column_slice(x0);
    let mut input_history: Vec<Vec<f64>> = Vec::new();

    for (step, &t) in grid.iter().enumerate() {
        // Record the sample at the step boundary.
        let w = reference.w_jet(t, &law.kappa, &w_orders_ext);
        let input_jets = law
            .input_with_derivatives(x.as_slice(), &w, guess.as_deref(), &mut ws)
            .map_err(|source| SimError::FeedbackAt { time: t, source })?;
        guess = None;
        let jets = ws.last_solution().unwrap().clone();
        let residual = law_state_residual(law, &jets, x.as_slice(), &w)?;
        let input: Vec<f64> = input_jets.iter().map(|jets| jets[0]).collect();
        let mut rhs_values = x.as_slice().to_vec();
        for jets_i in &input_jets {
            rhs_values.extend_from_slice(jets_i);
        }
        let mixed_condition = gen.mixed_condition(&rhs_values)?;
        let y = reconstructor.eval(x.as_slice(), &input)?;
        trajectory.time.push(t);
        trajectory.state.push(x.as_slice().to_vec());
        trajectory.input.push(input.clone());
        trajectory.flat_output.push(y);
        trajectory.diagnostics.push(StepDiagnostics {
            residual,
            mixed_condition,
        });
        input_history.push(input);

        if step + 1 == grid.len() {
            break;
        }

        // History-based derivative estimates are frozen across the step and
        // low-pass filtered: the estimates feed back into the trajectory
        // that generates them, and unfiltered differentiation of a feedback
        // signal is unstable.
        if strategy == InputDerivativeStrategy::History {
            if let Some(raw) = history_derivatives(&input_history, dt, gen) {
                match &mut history_filter {
                    None => history_filter = Some(raw),
                    Some(filtered) => {
                        let alpha = 0.1;
                        for (f_row, r_row) in filtered.iter_mut().zip(&raw) {
                            for (f, r) in f_row.iter_mut().zip(r_row) {
                                *f = (1.0 - alpha) * *f + alpha * r;
                            }
                        }
                    }
                }
            }
        }
        let history_jets = history_filter.clone();

        let mut f = |t_stage: f64, xs: &DVector<f64>| -> Result<DVector<f64>, SimError> {
            let w = reference.w_jet(t_stage, &law.kappa, &w_orders_ext);
            let stage_jets = law
                .input_with_derivatives(xs.as_slice(), &w, None, &mut ws)
                .map_err(|source| SimError::FeedbackAt {
                    time: t_stage,
                    source,
                })?;
            let mut values = xs.as_slice().to_vec();
            match &history_jets {
                Some(h) => {
                    for (i, jets_i) in stage_jets.iter().enumerate() {
                        values.push(jets_i[0]);
                        for order in 1..jets_i.len() {
                            values.push(h[i][order]);
                        }
                    }
                }
                None => {
                    for jets_i in &stage_jets {
                        values.extend_from_slice(jets_i);
                    }
                }
            }
            let acc = gen.eval_rhs(&values)?;
            let mut dx = DVector::zeros(state_dim);
            for i in 0..n_rows {
                dx[i] = xs[n_rows + i];
                dx[n_rows + i] = acc[i];
            }
            Ok(dx)
        };
        x = numeric::rk4_step(&mut f, t, &x, dt)?;
        let _ = m;
    }
    trajectory.validate()?;
    Ok(trajectory)
}

fn law_state_residual(
    law: &FeedbackLaw,
    jets: &DVector<f64>,
    state: &[f64],
    w: &WJet,
) -> Result<f64, SimError> {
    // Re-substitution check of the implicit solve.
    law.state_residual(jets, state, w)
        .map_err(|source| SimError::FeedbackAt { time: f64::NAN, source })
}

/// Backward finite-difference estimates of the input derivatives from the
/// realized per-step history; `None` until enough samples exist. The
/// stencil is strided to an effective step of at least 10 ms: estimating
/// derivatives of a signal that feeds back into its own evolution amplifies
/// step-to-step noise by the inverse square of the stencil step, so the raw
/// integration step would be unstable.
fn history_derivatives(
    history: &[Vec<f64>],
    dt: f64,
    gen: &GeneralizedSystem,
) -> Option<Vec<Vec<f64>>> {
    let stride = (0.01 / dt).ceil().max(1.0) as usize;
    let window = 6;
    if history.len() < (window - 1) * stride + 1 {
        return None;
    }
    let last = history.len() - 1;
    let samples: Vec<&Vec<f64>> = (0..window)
        .map(|i| &history[last - (window - 1 - i) * stride])
        .collect();
    let offsets: Vec<f64> = (0..window)
        .map(|i| (i as f64 - (window as f64 - 1.0)) * stride as f64 * dt)
        .collect();
    let n_inputs = gen.input_names.len();
    let mut out = Vec::with_capacity(n_inputs);
    for i in 0..n_inputs {
        let max_order = gen.input_orders.get(i).max(0) as usize;
        let mut jets_i = vec![samples[window - 1][i]];
        for order in 1..=max_order {
            let weights = numeric::fd_weights(0.0, &offsets, order);
            let value: f64 = weights
                .iter()
                .zip(&samples)
                .map(|(w, s)| w * s[i])
                .sum();
            jets_i.push(value);
        }
        out.push(jets_i);
    }
    Some(out)
}

/// Per-component result of the exact-linearization check.
#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub chain_length: i64,
    pub max_abs_error: f64,
    pub max_relative_error: f64,
    pub reference_scale: f64,
}

#[derive(Debug, Clone)]
pub struct LinearizationReport {
    pub components: Vec<ComponentCheck>,
    pub max_relative_error: f64,
}

/// Differentiate the reconstructed flat output numerically chain-length
/// times per component and compare against the new input from the
/// reference. Central stencils on the trajectory grid; interior only.
/// Length-four chains use a strided stencil to keep roundoff amplification
/// under the truncation error.
pub fn verify_linearization(
    trajectory: &Trajectory,
    kappa: &MultiIndex,
    reference: &ReferenceTrajectory,
) -> Result<LinearizationReport, SimError> {
    trajectory.validate()?;
    let n = trajectory.time.len();
    let dt = if n >= 2 {
        trajectory.time[1] - trajectory.time[0]
    } else {
        1.0
    };
    let m = kappa.len();
    let mut components = Vec::with_capacity(m);
    let mut overall = 0.0_f64;
    for j in 0..m {
        let k = kappa.get(j).max(0) as usize;
        let reference_scale = trajectory
            .time
            .iter()
            .map(|&t| reference.jet(t, j + 1, k).abs())
            .fold(0.0_f64, f64::max)
            .max(1.0);
        let mut max_abs = 0.0_f64;
        if k == 0 {
            for (i, &t) in trajectory.time.iter().enumerate() {
                let diff = (trajectory.flat_output[i][j] - reference.jet(t, j + 1, 0)).abs();
                max_abs = max_abs.max(diff);
            }
        } else {
            let stride = if k <= 2 { 1 } else { 4 };
            let points = k + 3;
            let half = (points - 1) / 2;
            let offsets: Vec<f64> = (0..points)
                .map(|i| (i as f64 - half as f64) * stride as f64 * dt)
                .collect();
            let weights = numeric::fd_weights(0.0, &offsets, k);
            let clip = (half * stride).max(2 * k);
            if n > 2 * clip {
                for i in clip..n - clip {
                    let mut value = 0.0;
                    for (s, w) in weights.iter().enumerate() {
                        let idx = i + s * stride - half * stride;
                        value += w * trajectory.flat_output[idx][j];
                    }
                    let diff = (value - reference.jet(trajectory.time[i], j + 1, k)).abs();
                    max_abs = max_abs.max(diff);
                }
            }
        }
        let rel = max_abs / reference_scale;
        overall = overall.max(rel);
        components.push(ComponentCheck {
            chain_length: kappa.get(j),
            max_abs_error: max_abs,
            max_relative_error: rel,
            reference_scale,
        });
    }
    Ok(LinearizationReport {
        components,
        max_relative_error: overall,
    })
}

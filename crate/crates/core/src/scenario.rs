//! Built-in example systems.
//!
//! The main one is a planar aerial manipulator: a birotor body (mass `m_c`,
//! inertia `J`) whose two rotors sit `d` off the thrust axis, carrying an
//! actuated joint mounted on the thrust axis at distance `l_c` from the body
//! center, with a massless link of length `l_c` from the joint to a gripper
//! point mass `m_g` at `(x_e, z_e)`. Coordinates are the gripper position,
//! the link absolute angle `theta` and the joint angle `phi`; the body
//! attitude is `theta + phi` and the rotor forces act along it. Inputs are
//! the rotor forces `F1`, `F2` and the joint torque `tau`.
//!
//! The flat output is the gripper position displaced by
//! `r_e = l_c m_c / (m_g + m_c)` against the body axis, plus the link angle:
//! `y = (x_e - r_e cos(phi+theta), z_e - r_e sin(phi+theta), theta)`. The
//! displaced point moves like the system's center of mass shifted along the
//! link, which makes the body attitude recoverable pointwise from second
//! derivatives of `y` and yields the closed-form configuration
//! parameterization built below.

use crate::config::{
    FlatConfig, ProjectConfig, PromotionConfig, ScenarioConfig, SolverConfig, SystemConfig,
};
use crate::expr::Expr;
use crate::mechanics::LagrangianSystem;

#[derive(Debug, Clone, Copy)]
pub struct ManipulatorParams {
    pub gripper_mass: f64,
    pub body_mass: f64,
    pub link_length: f64,
    pub rotor_arm: f64,
    pub body_inertia: f64,
    pub gravity: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        ManipulatorParams {
            gripper_mass: 1.0,
            body_mass: 0.5,
            link_length: 0.4,
            rotor_arm: 0.2,
            body_inertia: 0.05,
            gravity: 9.81,
        }
    }
}

impl ManipulatorParams {
    pub fn total_mass(&self) -> f64 {
        self.gripper_mass + self.body_mass
    }

    /// Distance from the gripper to the flat-output point:
    /// `r_e = l_c m_c / (m_g + m_c)`.
    pub fn offset_ratio(&self) -> f64 {
        self.link_length * self.body_mass / self.total_mass()
    }
}

#[derive(Debug, Clone)]
pub struct ManipulatorScenario {
    pub params: ManipulatorParams,
    pub system: LagrangianSystem,
    pub flat_output: Vec<Expr>,
    /// Configuration parameterization rows in jet variables.
    pub flat_coord_map: Vec<Expr>,
}

impl ManipulatorScenario {
    pub fn new(params: ManipulatorParams) -> Self {
        let system = build_system(&params);
        let flat_output = build_flat_output(&params);
        let flat_coord_map = build_flat_coord_map(&params);
        ManipulatorScenario {
            params,
            system,
            flat_output,
            flat_coord_map,
        }
    }

    /// Replace the joint torque by the joint angle: `tau` (input index 2)
    /// promoted with `phi` (coordinate index 3).
    pub fn promotion(&self) -> Vec<(usize, usize)> {
        vec![(2, 3)]
    }

    /// Hover equilibrium over the flat output `(y1, y2, y3)`: body axis
    /// vertical, rotors carrying the total weight, joint torque holding the
    /// link at `theta = y3`.
    pub fn hover(&self, y: &[f64; 3]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let r_e = p.offset_ratio();
        let theta = y[2];
        let coords = vec![y[0], y[1] + r_e, theta, std::f64::consts::FRAC_PI_2 - theta];
        let weight = p.total_mass() * p.gravity;
        let couple = p.gripper_mass * p.gravity * p.link_length * theta.cos();
        let inputs = vec![
            0.5 * weight + 0.5 * couple / p.rotor_arm,
            0.5 * weight - 0.5 * couple / p.rotor_arm,
            -couple,
        ];
        (coords, inputs)
    }

    pub fn project_config(&self) -> ProjectConfig {
        let q: Vec<String> = self.system.coord_names.clone();
        let v: Vec<String> = self.system.vel_names.clone();
        let u: Vec<String> = self.system.input_names.clone();
        ProjectConfig {
            system: SystemConfig {
                coord_names: q,
                vel_names: v,
                input_names: u,
                metric: self.system.metric.clone(),
                potential: self.system.potential.clone(),
                input_matrix: self.system.input_matrix.clone(),
            },
            promotion: PromotionConfig {
                pairs: vec![("tau".into(), "phi".into())],
            },
            flat: FlatConfig {
                outputs: self.flat_output.clone(),
                coord_map: self.flat_coord_map.clone(),
                equilibrium_output: vec![0.0, 0.0, 0.4],
            },
            solver: SolverConfig::default(),
            scenario: ScenarioConfig {
                equilibria: [
                    ("start".to_string(), vec![0.0, 0.0, 0.4]),
                    ("end".to_string(), vec![1.2, 0.6, 0.9]),
                ]
                .into_iter()
                .collect(),
                start: "start".into(),
                end: "end".into(),
                duration: 5.0,
            },
        }
    }
}

fn build_system(p: &ManipulatorParams) -> LagrangianSystem {
    let m_c = Expr::num(p.body_mass);
    let m_t = Expr::num(p.total_mass());
    let l = Expr::num(p.link_length);
    let d = Expr::num(p.rotor_arm);
    let inertia = Expr::num(p.body_inertia);
    let gravity = Expr::num(p.gravity);

    let theta = Expr::var("theta");
    let phi = Expr::var("phi");
    let attitude = &theta + &phi;
    let (s_th, c_th) = (theta.sin(), theta.cos());
    let (s_at, c_at) = (attitude.sin(), attitude.cos());
    let c_phi = phi.cos();
    let s_phi = phi.sin();

    let zero = Expr::zero();
    let ml = &m_c * &l;
    // Joint offset and link length share the value l_c, which merges the
    // rotary coupling terms below.
    let metric = vec![
        vec![
            m_t.clone(),
            zero.clone(),
            (&ml * &(&s_th + &s_at)).simplify(),
            (&ml * &s_at).simplify(),
        ],
        vec![
            zero.clone(),
            m_t.clone(),
            (-(&ml * &(&c_th + &c_at))).simplify(),
            (-(&ml * &c_at)).simplify(),
        ],
        vec![
            (&ml * &(&s_th + &s_at)).simplify(),
            (-(&ml * &(&c_th + &c_at))).simplify(),
            (&(&ml * &l) * &(Expr::num(2.0) + Expr::num(2.0) * c_phi.clone()) + inertia.clone())
                .simplify(),
            (&(&ml * &l) * &(Expr::one() + c_phi.clone()) + inertia.clone()).simplify(),
        ],
        vec![
            (&ml * &s_at).simplify(),
            (-(&ml * &c_at)).simplify(),
            (&(&ml * &l) * &(Expr::one() + c_phi) + inertia.clone()).simplify(),
            (&ml * &l + inertia).simplify(),
        ],
    ];

    let potential = (&gravity
        * &(&m_t * &Expr::var("z_e") - &ml * &(&s_th + &s_at)))
        .simplify();

    let lsp = (&l * &s_phi).simplify();
    let input_matrix = vec![
        vec![c_at.clone(), c_at, zero.clone()],
        vec![s_at.clone(), s_at, zero.clone()],
        vec![
            (&d - &lsp).simplify(),
            (-(&d + &lsp)).simplify(),
            zero.clone(),
        ],
        vec![d.clone(), (-&d).simplify(), Expr::one()],
    ];

    LagrangianSystem {
        coord_names: vec!["x_e".into(), "z_e".into(), "theta".into(), "phi".into()],
        vel_names: vec!["v_xe".into(), "v_ze".into(), "om_theta".into(), "om_phi".into()],
        input_names: vec!["F1".into(), "F2".into(), "tau".into()],
        metric,
        potential,
        input_matrix,
    }
}

fn build_flat_output(p: &ManipulatorParams) -> Vec<Expr> {
    let r_e = Expr::num(p.offset_ratio());
    let attitude = Expr::var("phi") + Expr::var("theta");
    vec![
        (Expr::var("x_e") - r_e.clone() * attitude.cos()).simplify(),
        (Expr::var("z_e") - r_e * attitude.sin()).simplify(),
        Expr::var("theta"),
    ]
}

/// Closed-form configuration parameterization. The thrust must carry the
/// displaced point like a point mass, which pins the body axis direction:
/// `W` is the required specific force, the body axis is `W/|W|`, and the
/// gripper sits `r_e` along it from the flat-output point.
fn build_flat_coord_map(p: &ManipulatorParams) -> Vec<Expr> {
    let r_e = Expr::num(p.offset_ratio());
    let g = Expr::num(p.gravity);
    let y3 = Expr::var("y3");
    let (s3, c3) = (y3.sin(), y3.cos());
    let y3_d1 = Expr::var("y3_d1");
    let y3_d2 = Expr::var("y3_d2");
    let w_x = (Expr::var("y1_d2")
        + r_e.clone() * (y3_d2.clone() * s3.clone() + y3_d1.pow(2) * c3.clone()))
    .simplify();
    let w_z = (Expr::var("y2_d2") + g
        - r_e.clone() * (y3_d2 * c3 - Expr::var("y3_d1").pow(2) * s3))
    .simplify();
    let norm = (w_x.pow(2) + w_z.pow(2)).sqrt();
    vec![
        Expr::var("y1") + r_e.clone() * w_x.clone() / norm.clone(),
        Expr::var("y2") + r_e * w_z.clone() / norm,
        Expr::var("y3"),
        Expr::atan2(&w_z, &w_x) - Expr::var("y3"),
    ]
}

/// Fully actuated two-dimensional toy (`p = m`, flat output `y = q`): a
/// pendulum-like coordinate whose effective inertia varies with the second,
/// spring-loaded coordinate, so the computed-torque law picks up Coriolis
/// terms and depends on the full state.
pub fn fully_actuated_toy() -> (LagrangianSystem, Vec<Expr>, Vec<Expr>) {
    let system = LagrangianSystem {
        coord_names: vec!["q1".into(), "q2".into()],
        vel_names: vec!["v1".into(), "v2".into()],
        input_names: vec!["u1".into(), "u2".into()],
        metric: vec![
            vec![
                (Expr::one() + Expr::num(0.25) * Expr::var("q2").pow(2)).simplify(),
                Expr::zero(),
            ],
            vec![Expr::zero(), Expr::one()],
        ],
        potential: (Expr::one() - Expr::var("q1").cos()
            + Expr::num(0.5) * Expr::var("q2").pow(2))
        .simplify(),
        input_matrix: vec![
            vec![Expr::one(), Expr::zero()],
            vec![Expr::zero(), Expr::one()],
        ],
    };
    let flat_output = vec![Expr::var("q1"), Expr::var("q2")];
    let coord_map = vec![Expr::var("y1"), Expr::var("y2")];
    (system, flat_output, coord_map)
}

pub fn toy_project_config() -> ProjectConfig {
    let (system, flat_output, coord_map) = fully_actuated_toy();
    ProjectConfig {
        system: SystemConfig {
            coord_names: system.coord_names.clone(),
            vel_names: system.vel_names.clone(),
            input_names: system.input_names.clone(),
            metric: system.metric.clone(),
            potential: system.potential.clone(),
            input_matrix: system.input_matrix.clone(),
        },
        promotion: PromotionConfig { pairs: vec![] },
        flat: FlatConfig {
            outputs: flat_output,
            coord_map,
            equilibrium_output: vec![0.2, -0.1],
        },
        solver: SolverConfig::default(),
        scenario: ScenarioConfig {
            equilibria: [
                ("start".to_string(), vec![0.2, -0.1]),
                ("end".to_string(), vec![-0.3, 0.25]),
            ]
            .into_iter()
            .collect(),
            start: "start".into(),
            end: "end".into(),
            duration: 3.0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarBinding;
    use crate::mechanics::{euler_lagrange, find_equilibrium, promote};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let q = vec![
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
        ];
        let v = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        (q, v, u)
    }

    /// Independent numeric Euler-Lagrange via finite differences of the
    /// Lagrangian along a consistent trajectory direction.
    fn fd_euler_lagrange(
        sys: &LagrangianSystem,
        q: &[f64],
        v: &[f64],
        vdot: &[f64],
    ) -> Vec<f64> {
        let p = q.len();
        let lagrangian = |q: &[f64], v: &[f64]| -> f64 {
            let mut b = VarBinding::new();
            for (name, &val) in sys.coord_names.iter().zip(q) {
                b.insert(name.clone(), val);
            }
            let mut kinetic = 0.0;
            for i in 0..p {
                for j in 0..p {
                    kinetic += 0.5 * sys.metric[i][j].eval(&b).unwrap() * v[i] * v[j];
                }
            }
            kinetic - sys.potential.eval(&b).unwrap()
        };
        let h = 1e-5;
        let dl_dv = |q: &[f64], v: &[f64], i: usize| -> f64 {
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[i] += h;
            vm[i] -= h;
            (lagrangian(q, &vp) - lagrangian(q, &vm)) / (2.0 * h)
        };
        (0..p)
            .map(|i| {
                // d/dt of dL/dv_i along (q + t v, v + t vdot), then - dL/dq_i.
                let qp: Vec<f64> = q.iter().zip(v).map(|(a, b)| a + h * b).collect();
                let vp: Vec<f64> = v.iter().zip(vdot).map(|(a, b)| a + h * b).collect();
                let qm: Vec<f64> = q.iter().zip(v).map(|(a, b)| a - h * b).collect();
                let vm: Vec<f64> = v.iter().zip(vdot).map(|(a, b)| a - h * b).collect();
                let ddt = (dl_dv(&qp, &vp, i) - dl_dv(&qm, &vm, i)) / (2.0 * h);
                let mut qp2 = q.to_vec();
                let mut qm2 = q.to_vec();
                qp2[i] += h;
                qm2[i] -= h;
                let dl_dq = (lagrangian(&qp2, v) - lagrangian(&qm2, v)) / (2.0 * h);
                ddt - dl_dq
            })
            .collect()
    }

    #[test]
    fn implicit_form_matches_numeric_euler_lagrange_at_100_points() {
        let scenario = ManipulatorScenario::new(Default::default());
        let csf = euler_lagrange(&scenario.system).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let (q, v, u) = random_point(&mut rng);
            let vdot = csf.classical_rhs(&q, &v, &u).unwrap();
            // Symbolic residual is zero by construction of vdot; check the
            // symbolic left side against the independent finite-difference
            // oracle.
            let fd = fd_euler_lagrange(&scenario.system, &q, &v, &vdot);
            let residual = csf.residual(&q, &v, &vdot, &u).unwrap();
            let mut b = VarBinding::new();
            for (name, &val) in scenario.system.coord_names.iter().zip(&q) {
                b.insert(name.clone(), val);
            }
            for (i, fd_i) in fd.iter().enumerate() {
                // fd_i should equal (G u)_i since the EL equations hold.
                let gu: f64 = (0..3)
                    .map(|l| scenario.system.input_matrix[i][l].eval(&b).unwrap() * u[l])
                    .sum();
                assert!(
                    (fd_i - gu).abs() <= 2e-4 * (1.0 + gu.abs()),
                    "row {i}: fd {fd_i} vs Gu {gu}"
                );
                assert!(residual[i].abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let scenario = ManipulatorScenario::new(Default::default());
        let csf = euler_lagrange(&scenario.system).unwrap();
        let (coords, inputs) = scenario.hover(&[0.3, -0.2, 0.4]);
        let qdd = csf.classical_rhs(&coords, &[0.0; 4], &inputs).unwrap();
        for a in &qdd {
            assert!(a.abs() <= 1e-9, "hover acceleration {a}");
        }
        // Newton refinement from a guess perturbed in the free variables
        // lands on the same point.
        let mut guess_q = coords.clone();
        guess_q[3] += 0.05;
        let guess_u: Vec<f64> = inputs.iter().map(|c| c + 0.2).collect();
        let eq = find_equilibrium(&csf, &guess_q, &guess_u, &["x_e", "z_e", "theta"]).unwrap();
        assert!((eq.coords[3] - coords[3]).abs() <= 1e-8);
        assert!((eq.inputs[0] + eq.inputs[1] - scenario.params.total_mass() * 9.81).abs() <= 1e-7);
    }

    #[test]
    fn promoted_dynamics_have_the_expected_dependence_sets() {
        let scenario = ManipulatorScenario::new(Default::default());
        let csf = euler_lagrange(&scenario.system).unwrap();
        let gen = promote(&csf, &scenario.promotion()).unwrap();
        assert_eq!(gen.state_dim(), 6);
        assert_eq!(
            gen.input_names,
            vec!["phi".to_string(), "F1".to_string(), "F2".to_string()]
        );
        // Input derivative orders: the promoted joint angle enters up to its
        // second derivative, the rotor forces undifferentiated.
        assert_eq!(gen.input_orders.components(), &[2, 0, 0]);
        // No positional dependence at all.
        for row in &gen.rhs {
            let vars = row.free_vars();
            assert!(!vars.contains("x_e") && !vars.contains("z_e"), "{vars:?}");
        }
        // The link-angle acceleration row is additionally independent of
        // theta; the cancellation is trigonometric, so probe numerically.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let d_theta = gen.rhs[2].diff("theta");
        for _ in 0..50 {
            let mut b = VarBinding::new();
            for name in gen.rhs_var_names() {
                b.insert(name.clone(), rng.random_range(-1.0..1.0));
            }
            let sensitivity = d_theta.eval(&b).unwrap();
            assert!(
                sensitivity.abs() <= 1e-9,
                "om_theta row depends on theta: {sensitivity}"
            );
        }
        // The translational rows genuinely depend on theta and on the
        // promoted input's second derivative.
        let d_xrow = gen.rhs[0].diff("theta");
        let d_xrow_dphi2 = gen.rhs[0].diff("phi_d2");
        let mut b = VarBinding::new();
        for name in gen.rhs_var_names() {
            b.insert(name.clone(), 0.3);
        }
        assert!(d_xrow.eval(&b).unwrap().abs() > 1e-6);
        assert!(d_xrow_dphi2.eval(&b).unwrap().abs() > 1e-6);
    }

    #[test]
    fn generalized_and_classical_accelerations_agree() {
        let scenario = ManipulatorScenario::new(Default::default());
        let csf = euler_lagrange(&scenario.system).unwrap();
        let gen = promote(&csf, &scenario.promotion()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let (q, v, u) = random_point(&mut rng);
            // Classical acceleration at (q, v, u).
            let qdd = csf.classical_rhs(&q, &v, &u).unwrap();
            // Generalized evaluation at the matching point: state is the
            // first three coordinate/velocity pairs, the joint angle enters
            // as input with matching derivatives.
            let values = vec![
                q[0], q[1], q[2], v[0], v[1], v[2], // state
                q[3], v[3], qdd[3], // phi jets
                u[0], u[1], // rotor forces
            ];
            let rhs = gen.eval_rhs(&values).unwrap();
            for i in 0..3 {
                assert!(
                    (rhs[i] - qdd[i]).abs() <= 1e-8 * (1.0 + qdd[i].abs()),
                    "row {i}: {} vs {}",
                    rhs[i],
                    qdd[i]
                );
            }
            // And the eliminated torque reconstructs the classical input.
            let mut b = VarBinding::new();
            for (name, val) in gen.rhs_var_names().iter().zip(&values) {
                b.insert(name.clone(), *val);
            }
            let tau = gen.eliminated_inputs[0].1.eval(&b).unwrap();
            assert!((tau - u[2]).abs() <= 1e-7 * (1.0 + u[2].abs()));
        }
    }

    #[test]
    fn toy_is_fully_actuated_and_valid() {
        let (system, _, _) = fully_actuated_toy();
        let csf = euler_lagrange(&system).unwrap();
        // At rest the bias is the potential gradient; the q1 inertia is
        // scaled by the metric entry.
        let qdd = csf.classical_rhs(&[0.4, -0.3], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((qdd[0] + 0.4_f64.sin() / (1.0 + 0.25 * 0.09)).abs() < 1e-14);
        assert!((qdd[1] - 0.3).abs() < 1e-14);
    }
}

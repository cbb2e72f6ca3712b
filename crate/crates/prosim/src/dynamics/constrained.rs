//! Holonomic constraints, constrained accelerations, reaction wrenches,
//! plastic impacts, and static equilibrium.
//!
//! Each walking domain holds six constraint rows: the stance sole pose
//! (point x, point z, foot angle) and the socket interface (relative point
//! x, relative point z, relative angle between the prosthesis thigh frame
//! and the distal right thigh).  The reaction of the socket rows is the
//! socket wrench `F_s = (F_x, F_z, M_y)` acting on the prosthesis side.

use nalgebra::{DMatrix, DVector, Vector3};

use super::kinematics::Kin;
use super::lagrangian::{bias_forces, gravity_vector, mass_matrix};
use super::model::{Domain, RobotModel};
use crate::error::{Error, Result};

/// One scalar holonomic constraint.
#[derive(Debug, Clone)]
pub enum ConstraintRow {
    /// World x of a body point.
    PointX { body: usize, local: [f64; 2] },
    /// World z of a body point.
    PointZ { body: usize, local: [f64; 2] },
    /// Absolute angle of a body.
    BodyAngle { body: usize },
    /// x difference of two body points.
    RelPointX { body_a: usize, local_a: [f64; 2], body_b: usize, local_b: [f64; 2] },
    /// z difference of two body points.
    RelPointZ { body_a: usize, local_a: [f64; 2], body_b: usize, local_b: [f64; 2] },
    /// Angle difference of two bodies.
    RelBodyAngle { body_a: usize, body_b: usize },
}

impl ConstraintRow {
    pub fn value(&self, kin: &Kin) -> f64 {
        match *self {
            ConstraintRow::PointX { body, local } => kin.point_world(body, local).x,
            ConstraintRow::PointZ { body, local } => kin.point_world(body, local).y,
            ConstraintRow::BodyAngle { body } => kin.body_angle(body),
            ConstraintRow::RelPointX { body_a, local_a, body_b, local_b } => {
                kin.point_world(body_a, local_a).x - kin.point_world(body_b, local_b).x
            }
            ConstraintRow::RelPointZ { body_a, local_a, body_b, local_b } => {
                kin.point_world(body_a, local_a).y - kin.point_world(body_b, local_b).y
            }
            ConstraintRow::RelBodyAngle { body_a, body_b } => {
                kin.body_angle(body_a) - kin.body_angle(body_b)
            }
        }
    }

    pub fn jacobian(&self, kin: &Kin) -> DVector<f64> {
        let nq = kin.nq();
        match *self {
            ConstraintRow::PointX { body, local } => {
                kin.point_jacobian(body, local).row(0).transpose()
            }
            ConstraintRow::PointZ { body, local } => {
                kin.point_jacobian(body, local).row(1).transpose()
            }
            ConstraintRow::BodyAngle { body } => kin.body_angle_jac(body).clone(),
            ConstraintRow::RelPointX { body_a, local_a, body_b, local_b } => {
                (kin.point_jacobian(body_a, local_a).row(0)
                    - kin.point_jacobian(body_b, local_b).row(0))
                .transpose()
            }
            ConstraintRow::RelPointZ { body_a, local_a, body_b, local_b } => {
                (kin.point_jacobian(body_a, local_a).row(1)
                    - kin.point_jacobian(body_b, local_b).row(1))
                .transpose()
            }
            ConstraintRow::RelBodyAngle { body_a, body_b } => {
                let mut j = DVector::zeros(nq);
                j += kin.body_angle_jac(body_a);
                j -= kin.body_angle_jac(body_b);
                j
            }
        }
    }

    /// Row of `dJ/dt`; zero for angle rows because angle gradients are constant.
    pub fn jacobian_dot(&self, kin: &Kin, dq: &DVector<f64>) -> DVector<f64> {
        let nq = kin.nq();
        match *self {
            ConstraintRow::PointX { body, local } => {
                kin.point_jacobian_dot(body, local, dq).row(0).transpose()
            }
            ConstraintRow::PointZ { body, local } => {
                kin.point_jacobian_dot(body, local, dq).row(1).transpose()
            }
            ConstraintRow::RelPointX { body_a, local_a, body_b, local_b } => {
                (kin.point_jacobian_dot(body_a, local_a, dq).row(0)
                    - kin.point_jacobian_dot(body_b, local_b, dq).row(0))
                .transpose()
            }
            ConstraintRow::RelPointZ { body_a, local_a, body_b, local_b } => {
                (kin.point_jacobian_dot(body_a, local_a, dq).row(1)
                    - kin.point_jacobian_dot(body_b, local_b, dq).row(1))
                .transpose()
            }
            ConstraintRow::BodyAngle { .. } | ConstraintRow::RelBodyAngle { .. } => {
                DVector::zeros(nq)
            }
        }
    }
}

/// Constraint set, guard, and successor for one walking domain.
///
/// Row order is fixed: ground rows 0..3, then socket rows 3..6, so the
/// socket wrench is always the last three reaction components.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub domain: Domain,
    pub rows: Vec<ConstraintRow>,
    /// Swing-sole point whose height crossing zero downward ends the domain;
    /// `None` integrates to the time horizon (test submodels).
    pub guard: Option<(usize, [f64; 2])>,
}

impl DomainSpec {
    pub fn for_domain(model: &RobotModel, domain: Domain) -> Result<DomainSpec> {
        let a = model.anatomy()?;
        let stance = a.stance_foot(domain);
        let swing = a.swing_foot(domain);
        let sole = [0.0, -a.ankle_drop];
        let rows = vec![
            ConstraintRow::PointX { body: stance, local: sole },
            ConstraintRow::PointZ { body: stance, local: sole },
            ConstraintRow::BodyAngle { body: stance },
            ConstraintRow::RelPointX {
                body_a: a.p_thigh,
                local_a: [0.0, 0.0],
                body_b: a.r_thigh,
                local_b: [0.0, -a.r_thigh_len],
            },
            ConstraintRow::RelPointZ {
                body_a: a.p_thigh,
                local_a: [0.0, 0.0],
                body_b: a.r_thigh,
                local_b: [0.0, -a.r_thigh_len],
            },
            ConstraintRow::RelBodyAngle { body_a: a.p_thigh, body_b: a.r_thigh },
        ];
        Ok(DomainSpec {
            domain,
            rows,
            guard: Some((swing, sole)),
        })
    }

    /// Socket-only constraint rows (the interface shared by both domains).
    pub fn socket_rows(model: &RobotModel) -> Result<Vec<ConstraintRow>> {
        let a = model.anatomy()?;
        Ok(vec![
            ConstraintRow::RelPointX {
                body_a: a.p_thigh,
                local_a: [0.0, 0.0],
                body_b: a.r_thigh,
                local_b: [0.0, -a.r_thigh_len],
            },
            ConstraintRow::RelPointZ {
                body_a: a.p_thigh,
                local_a: [0.0, 0.0],
                body_b: a.r_thigh,
                local_b: [0.0, -a.r_thigh_len],
            },
            ConstraintRow::RelBodyAngle { body_a: a.p_thigh, body_b: a.r_thigh },
        ])
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn values(&self, kin: &Kin) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.value(kin)))
    }

    pub fn jacobian(&self, kin: &Kin) -> DMatrix<f64> {
        let nq = kin.nq();
        let mut j = DMatrix::zeros(self.rows.len(), nq);
        for (i, row) in self.rows.iter().enumerate() {
            j.set_row(i, &row.jacobian(kin).transpose());
        }
        j
    }

    pub fn jacobian_dot(&self, kin: &Kin, dq: &DVector<f64>) -> DMatrix<f64> {
        let nq = kin.nq();
        let mut j = DMatrix::zeros(self.rows.len(), nq);
        for (i, row) in self.rows.iter().enumerate() {
            j.set_row(i, &row.jacobian_dot(kin, dq).transpose());
        }
        j
    }

    /// Guard value: swing-sole height above the walking surface.
    pub fn guard_value(&self, kin: &Kin) -> Option<f64> {
        self.guard
            .map(|(body, local)| kin.point_world(body, local).y)
    }

    /// Guard rate: vertical swing-sole velocity.
    pub fn guard_rate(&self, kin: &Kin, dq: &DVector<f64>) -> Option<f64> {
        self.guard
            .map(|(body, local)| kin.point_velocity(body, local, dq).y)
    }
}

/// Accelerations and reactions of the constrained system under a generalized
/// force, from the KKT system
///
/// ```text
/// [ D  -J' ] [ddq]   [ tau - H  ]
/// [ J   0  ] [ F ] = [ -Jdot dq - stab ]
/// ```
///
/// `stab` is an optional constraint-stabilization term added by the
/// integrator; the pure index-reduced dynamics use zero.
pub fn constrained_dynamics_generalized(
    model: &RobotModel,
    spec: &DomainSpec,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    tau: &DVector<f64>,
    stab: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let nq = model.nq;
    let m = spec.n_rows();
    let kin = Kin::new(model, q);
    let d = mass_matrix(model, q);
    let h = bias_forces(model, q, dq);
    let j = spec.jacobian(&kin);
    let jdot = spec.jacobian_dot(&kin, dq);

    let mut kkt = DMatrix::zeros(nq + m, nq + m);
    kkt.view_mut((0, 0), (nq, nq)).copy_from(&d);
    kkt.view_mut((0, nq), (nq, m)).copy_from(&(-j.transpose()));
    kkt.view_mut((nq, 0), (m, nq)).copy_from(&j);

    let mut rhs = DVector::zeros(nq + m);
    rhs.rows_mut(0, nq).copy_from(&(tau - &h));
    let mut crhs = -(&jdot * dq);
    if let Some(s) = stab {
        crhs -= s;
    }
    rhs.rows_mut(nq, m).copy_from(&crhs);

    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularConstraint("constrained-dynamics KKT system".into()))?;
    Ok((sol.rows(0, nq).into_owned(), sol.rows(nq, m).into_owned()))
}

/// Constrained accelerations and reactions under motor torques `u`.
pub fn constrained_dynamics(
    model: &RobotModel,
    spec: &DomainSpec,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let tau = model.actuation_matrix() * u;
    constrained_dynamics_generalized(model, spec, q, dq, &tau, None)
}

/// Socket wrench `(F_x, F_z, M_y)` recovered from a state and motor input,
/// together with the implied accelerations and the full reaction vector.
pub fn socket_wrench_from_inputs(
    model: &RobotModel,
    spec: &DomainSpec,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, Vector3<f64>)> {
    let (ddq, f) = constrained_dynamics(model, spec, q, dq, u)?;
    let m = f.len();
    let fs = Vector3::new(f[m - 3], f[m - 2], f[m - 1]);
    Ok((ddq, f, fs))
}

/// Plastic impact: positions freeze, the post-impact velocity satisfies the
/// touchdown domain's constraints, and the generalized momentum change is
/// carried entirely by the constraint impulse:
///
/// ```text
/// [ D  -J_e' ] [dq+    ]   [ D dq- ]
/// [ J_e   0  ] [impulse] = [ 0     ]
/// ```
pub fn impact_map(
    model: &RobotModel,
    post_spec: &DomainSpec,
    q: &DVector<f64>,
    dq_minus: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let nq = model.nq;
    let m = post_spec.n_rows();
    let kin = Kin::new(model, q);
    let d = mass_matrix(model, q);
    let j = post_spec.jacobian(&kin);

    let mut kkt = DMatrix::zeros(nq + m, nq + m);
    kkt.view_mut((0, 0), (nq, nq)).copy_from(&d);
    kkt.view_mut((0, nq), (nq, m)).copy_from(&(-j.transpose()));
    kkt.view_mut((nq, 0), (m, nq)).copy_from(&j);

    let mut rhs = DVector::zeros(nq + m);
    rhs.rows_mut(0, nq).copy_from(&(&d * dq_minus));

    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularConstraint("impact KKT system".into()))?;
    Ok((sol.rows(0, nq).into_owned(), sol.rows(nq, m).into_owned()))
}

/// Motor torques and reactions that hold a configuration still:
/// `B u + J' F = G(q)` with `dq = ddq = 0`.
pub fn static_equilibrium(
    model: &RobotModel,
    spec: &DomainSpec,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let nq = model.nq;
    let na = model.actuated.len();
    let m = spec.n_rows();
    if na + m != nq {
        return Err(Error::SingularConstraint(format!(
            "static equilibrium needs {na} torques + {m} reactions = {nq} equations"
        )));
    }
    let kin = Kin::new(model, q);
    let b = model.actuation_matrix();
    let j = spec.jacobian(&kin);
    let g = gravity_vector(model, q);

    let mut sys = DMatrix::zeros(nq, nq);
    sys.view_mut((0, 0), (nq, na)).copy_from(&b);
    sys.view_mut((0, na), (nq, m)).copy_from(&j.transpose());
    let sol = sys
        .lu()
        .solve(&g)
        .ok_or_else(|| Error::SingularConstraint("static equilibrium system".into()))?;
    Ok((sol.rows(0, na).into_owned(), sol.rows(na, m).into_owned()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dynamics::model::default_model;
    use approx::assert_abs_diff_eq;

    /// A configuration with the prosthesis sole flat on the ground and the
    /// socket rows exactly satisfied; the left leg swings freely.
    pub(crate) fn ps_test_config(model: &RobotModel) -> DVector<f64> {
        let a = model.anatomy().unwrap();
        let mut q = DVector::zeros(model.nq);
        q[1] = 0.91;
        q[2] = 0.02;
        q[a.q_lh] = 0.32;
        q[a.q_lk] = -0.55;
        q[a.q_la] = 0.18;
        q[a.q_rh] = -0.12;
        q[a.q_pk] = -0.08;
        // Make the socket rows hold.
        let kin = Kin::new(model, &q);
        let distal = kin.point_world(a.r_thigh, [0.0, -a.r_thigh_len]);
        q[a.q_socket] = distal.x;
        q[a.q_socket + 1] = distal.y;
        q[a.q_socket + 2] = kin.body_angle(a.r_thigh);
        // Flatten the prosthesis foot: p_foot angle = phi_f + pk + pa = 0.
        let phi_f = q[a.q_socket + 2];
        q[a.q_pa] = -(phi_f + q[a.q_pk]);
        // Drop the whole figure so the prosthesis sole touches the ground.
        let kin = Kin::new(model, &q);
        let sole = kin.point_world(a.p_foot, [0.0, -a.ankle_drop]);
        q[1] -= sole.y;
        q[a.q_socket + 1] -= sole.y;
        q
    }

    /// Projects a raw velocity onto the constraint null space.
    pub(crate) fn consistent_velocity(
        model: &RobotModel,
        spec: &DomainSpec,
        q: &DVector<f64>,
        raw: &DVector<f64>,
    ) -> DVector<f64> {
        let kin = Kin::new(model, q);
        let j = spec.jacobian(&kin);
        let svd = j.svd(false, true);
        let vt = svd.v_t.unwrap();
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        let mut dq = raw.clone();
        for k in 0..rank {
            let row = vt.row(k).transpose();
            let c = row.dot(&dq);
            dq -= row * c;
        }
        dq
    }

    #[test]
    fn ps_config_satisfies_constraints() {
        let m = default_model();
        let spec = DomainSpec::for_domain(&m, Domain::Ps).unwrap();
        let q = ps_test_config(&m);
        let kin = Kin::new(&m, &q);
        let h = spec.values(&kin);
        // Ground z and angle rows are absolute; x rows and socket rows too
        // since the construction places the sole at a known x.
        assert_abs_diff_eq!(h[1], 0.0, epsilon = 1e-12); // sole height
        assert_abs_diff_eq!(h[2], 0.0, epsilon = 1e-12); // sole angle
        assert_abs_diff_eq!(h[3], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[4], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[5], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences() {
        let m = default_model();
        let spec = DomainSpec::for_domain(&m, Domain::Ps).unwrap();
        let q = ps_test_config(&m);
        let kin = Kin::new(&m, &q);
        let j = spec.jacobian(&kin);
        let h = 1e-7;
        for k in 0..m.nq {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let hp = spec.values(&Kin::new(&m, &qp));
            let hm = spec.values(&Kin::new(&m, &qm));
            for r in 0..spec.n_rows() {
                let fd = (hp[r] - hm[r]) / (2.0 * h);
                assert_abs_diff_eq!(j[(r, k)], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn constrained_dynamics_satisfies_both_equations() {
        let m = default_model();
        let spec = DomainSpec::for_domain(&m, Domain::Ps).unwrap();
        let q = ps_test_config(&m);
        let raw = DVector::from_vec(vec![
            0.3, -0.2, 0.4, -0.5, 0.7, -0.3, 0.2, 0.1, -0.2, 0.3, -0.6, 0.4,
        ]);
        let dq = consistent_velocity(&m, &spec, &q, &raw);
        let u = DVector::from_vec(vec![3.0, -7.0, 2.0, 11.0, -4.0, 6.0]);

        let (ddq, f) = constrained_dynamics(&m, &spec, &q, &dq, &u).unwrap();

        let kin = Kin::new(&m, &q);
        let d = mass_matrix(&m, &q);
        let h = bias_forces(&m, &q, &dq);
        let j = spec.jacobian(&kin);
        let jdot = spec.jacobian_dot(&kin, &dq);
        let b = m.actuation_matrix();

        let r1 = &d * &ddq + &h - &b * &u - j.transpose() * &f;
        assert!(r1.amax() < 1e-8, "force balance residual {}", r1.amax());
        let r2 = &j * &ddq + &jdot * &dq;
        assert!(r2.amax() < 1e-8, "acceleration constraint residual {}", r2.amax());
    }

    #[test]
    fn static_single_support_reactions() {
        let m = default_model();
        let spec = DomainSpec::for_domain(&m, Domain::Ps).unwrap();
        let q = ps_test_config(&m);
        let (_, f) = static_equilibrium(&m, &spec, &q).unwrap();
        let g = m.gravity;

        // Vertical ground reaction carries the entire weight.
        let total = m.total_mass();
        assert_abs_diff_eq!(f[1], total * g, epsilon = 1e-6 * total * g);

        // The socket transmits the weight of everything above it, pushing
        // down on the prosthesis.
        let a = m.anatomy().unwrap();
        let pros_mass: f64 = [a.p_thigh, a.p_shin, a.p_foot]
            .iter()
            .map(|&b| m.bodies[b].mass)
            .sum();
        let above = total - pros_mass;
        assert_abs_diff_eq!(f[4], -above * g, epsilon = 1e-6 * above * g);
    }

    #[test]
    fn static_equilibrium_holds_still() {
        let m = default_model();
        let spec = DomainSpec::for_domain(&m, Domain::Ps).unwrap();
        let q = ps_test_config(&m);
        let (u, _) = static_equilibrium(&m, &spec, &q).unwrap();
        let dq = DVector::zeros(12);
        let (ddq, _) = constrained_dynamics(&m, &spec, &q, &dq, &u).unwrap();
        assert!(ddq.amax() < 1e-7, "static accelerations {}", ddq.amax());
    }

    #[test]
    fn impact_preserves_null_space_momentum_and_dissipates() {
        let m = default_model();
        let post = DomainSpec::for_domain(&m, Domain::Pns).unwrap();
        let q = ps_test_config(&m);
        let raw = DVector::from_vec(vec![
            0.5, -0.3, 0.2, -0.7, 0.9, -0.4, 0.6, 0.5, -0.3, 0.2, -0.8, 0.3,
        ]);
        // Pre-impact velocity satisfies the old domain, not the new one.
        let pre_spec = DomainSpec::for_domain(&m, Domain::Ps).unwrap();
        let dq_minus = consistent_velocity(&m, &pre_spec, &q, &raw);

        let (dq_plus, impulse) = impact_map(&m, &post, &q, &dq_minus).unwrap();

        let kin = Kin::new(&m, &q);
        let j = post.jacobian(&kin);
        let d = mass_matrix(&m, &q);

        // New constraints hold.
        assert!((j.clone() * &dq_plus).amax() < 1e-8);
        // Momentum change equals the constraint impulse.
        let r = &d * (&dq_plus - &dq_minus) - j.transpose() * &impulse;
        assert!(r.amax() < 1e-8);
        // Null-space momentum is conserved.
        let svd = j.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        for k in rank..vt.nrows() {
            let w = vt.row(k).transpose();
            let before = w.dot(&(&d * &dq_minus));
            let after = w.dot(&(&d * &dq_plus));
            assert_abs_diff_eq!(before, after, epsilon = 1e-8 * before.abs().max(1.0));
        }
        // Kinetic energy cannot increase.
        let ke_minus = 0.5 * dq_minus.dot(&(&d * &dq_minus));
        let ke_plus = 0.5 * dq_plus.dot(&(&d * &dq_plus));
        assert!(ke_plus <= ke_minus + 1e-10);
    }
}

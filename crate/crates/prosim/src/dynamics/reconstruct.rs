//! Closed-form reconstruction of full states from joint-space data.
//!
//! On the constraint surface of either walking domain, the twelve
//! configuration coordinates are determined by the stance-sole pose and the
//! six joint angles: the stance chain resolves upward from the sole, the
//! socket welds the prosthesis thigh frame to the distal right thigh, and
//! the remaining branches hang off the torso.  Velocities follow from the
//! constraint Jacobian: with the six joint rates given, the six base rates
//! solve `J dq = 0` exactly.

use nalgebra::{DMatrix, DVector, Vector2};

use super::constrained::DomainSpec;
use super::kinematics::{rot, Kin};
use super::model::{Domain, RobotModel};
use crate::error::{Error, Result};

/// The six actuated joint angles `(lh, lk, la, rh, pk, pa)` of a
/// configuration-space vector, in canonical actuator order.
pub fn joint_angles_of(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let a = model.anatomy()?;
    let idx = a.actuated_joints();
    Ok(DVector::from_iterator(6, idx.iter().map(|&i| q[i])))
}

/// Builds the full configuration from the stance-sole pose
/// `(x, z, foot angle)` and the six joint angles `(lh, lk, la, rh, pk, pa)`.
///
/// The result satisfies the domain's ground and socket constraints exactly.
pub fn state_from_joints(
    model: &RobotModel,
    domain: Domain,
    sole: [f64; 3],
    joints: &DVector<f64>,
) -> Result<DVector<f64>> {
    if joints.len() != 6 {
        return Err(Error::InvalidData(format!(
            "expected 6 joint angles, got {}",
            joints.len()
        )));
    }
    let a = model.anatomy()?;
    let (th_lh, th_lk, th_la, th_rh, th_pk, th_pa) =
        (joints[0], joints[1], joints[2], joints[3], joints[4], joints[5]);
    let sole_pos = Vector2::new(sole[0], sole[1]);
    let sole_local = Vector2::new(0.0, -a.ankle_drop);

    let attach = |body: usize| -> Vector2<f64> {
        let at = model.bodies[body].attach;
        Vector2::new(at[0], at[1])
    };

    let mut q = DVector::zeros(model.nq);
    q[a.q_lh] = th_lh;
    q[a.q_lk] = th_lk;
    q[a.q_la] = th_la;
    q[a.q_rh] = th_rh;
    q[a.q_pk] = th_pk;
    q[a.q_pa] = th_pa;

    match domain {
        Domain::Ps => {
            // Up the prosthesis chain from the sole to the socket frame.
            let phi_pf = sole[2];
            let ankle = sole_pos - rot(phi_pf) * sole_local;
            let phi_psh = phi_pf - th_pa;
            let p_shin_o = ankle - rot(phi_psh) * attach(a.p_foot);
            let phi_f = phi_psh - th_pk;
            let p_thigh_o = p_shin_o - rot(phi_f) * attach(a.p_shin);
            q[a.q_socket] = p_thigh_o.x;
            q[a.q_socket + 1] = p_thigh_o.y;
            q[a.q_socket + 2] = phi_f;
            // The socket weld carries the pose across to the human side.
            let phi_rth = phi_f;
            let phi_b = phi_rth - th_rh;
            let hip = p_thigh_o - rot(phi_rth) * Vector2::new(0.0, -a.r_thigh_len);
            let base = hip - rot(phi_b) * attach(a.r_thigh);
            q[a.q_base] = base.x;
            q[a.q_base + 1] = base.y;
            q[a.q_base + 2] = phi_b;
        }
        Domain::Pns => {
            // Up the intact leg from the sole to the torso.
            let phi_lf = sole[2];
            let ankle = sole_pos - rot(phi_lf) * sole_local;
            let phi_lsh = phi_lf - th_la;
            let l_shin_o = ankle - rot(phi_lsh) * attach(a.l_foot);
            let phi_lth = phi_lsh - th_lk;
            let l_thigh_o = l_shin_o - rot(phi_lth) * attach(a.l_shin);
            let phi_b = phi_lth - th_lh;
            let base = l_thigh_o - rot(phi_b) * attach(a.l_thigh);
            q[a.q_base] = base.x;
            q[a.q_base + 1] = base.y;
            q[a.q_base + 2] = phi_b;
            // Down the right thigh and across the socket weld.
            let phi_rth = phi_b + th_rh;
            let hip = base + rot(phi_b) * attach(a.r_thigh);
            let distal = hip + rot(phi_rth) * Vector2::new(0.0, -a.r_thigh_len);
            q[a.q_socket] = distal.x;
            q[a.q_socket + 1] = distal.y;
            q[a.q_socket + 2] = phi_rth;
        }
    }
    Ok(q)
}

/// Completes a velocity from the six joint rates `(lh, lk, la, rh, pk, pa)`:
/// the base and socket-frame rates are solved from `J dq = 0` over the
/// domain's six constraint rows.
pub fn velocity_from_joint_rates(
    model: &RobotModel,
    domain: Domain,
    q: &DVector<f64>,
    rates: &DVector<f64>,
) -> Result<DVector<f64>> {
    if rates.len() != 6 {
        return Err(Error::InvalidData(format!(
            "expected 6 joint rates, got {}",
            rates.len()
        )));
    }
    let a = model.anatomy()?;
    let spec = DomainSpec::for_domain(model, domain)?;
    let kin = Kin::new(model, q);
    let j = spec.jacobian(&kin);

    let base_cols = [
        a.q_base,
        a.q_base + 1,
        a.q_base + 2,
        a.q_socket,
        a.q_socket + 1,
        a.q_socket + 2,
    ];
    let joint_cols = a.actuated_joints();

    let m = spec.n_rows();
    let mut jb = DMatrix::zeros(m, base_cols.len());
    for (c, &col) in base_cols.iter().enumerate() {
        jb.set_column(c, &j.column(col));
    }
    let mut rhs = DVector::zeros(m);
    for (c, &col) in joint_cols.iter().enumerate() {
        rhs -= j.column(col) * rates[c];
    }

    let base_rates = jb.lu().solve(&rhs).ok_or_else(|| {
        Error::SingularConstraint("base-rate completion from joint rates".into())
    })?;

    let mut dq = DVector::zeros(model.nq);
    for (c, &col) in base_cols.iter().enumerate() {
        dq[col] = base_rates[c];
    }
    for (c, &col) in joint_cols.iter().enumerate() {
        dq[col] = rates[c];
    }
    Ok(dq)
}

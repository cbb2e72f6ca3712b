//! Mass matrix, Coriolis matrix, gravity vector, and energies.

use nalgebra::{DMatrix, DVector};

use super::kinematics::Kin;
use super::model::RobotModel;

/// Joint-space inertia `D(q) = sum_b m_b Jv' Jv + I_b Jw' Jw`.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> DMatrix<f64> {
    let kin = Kin::new(model, q);
    let nq = model.nq;
    let mut d = DMatrix::zeros(nq, nq);
    for (b, body) in model.bodies.iter().enumerate() {
        let jv = kin.point_jacobian(b, body.com);
        d += jv.transpose() * &jv * body.mass;
        let jw = kin.body_angle_jac(b);
        // Rank-one angular term.
        for i in 0..nq {
            let wi = jw[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..nq {
                let wj = jw[j];
                if wj != 0.0 {
                    d[(i, j)] += body.inertia * wi * wj;
                }
            }
        }
    }
    d
}

/// All configuration partials `dD/dq_k`.  The angular terms drop out because
/// body-angle gradients are constant.
pub fn mass_matrix_partials(model: &RobotModel, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let kin = Kin::new(model, q);
    let nq = model.nq;
    let mut parts = vec![DMatrix::zeros(nq, nq); nq];
    for (b, body) in model.bodies.iter().enumerate() {
        let jv = kin.point_jacobian(b, body.com);
        for (k, part) in parts.iter_mut().enumerate() {
            let djv = kin.point_jacobian_partial(b, body.com, k);
            let cross = djv.transpose() * &jv;
            *part += (&cross + cross.transpose()) * body.mass;
        }
    }
    parts
}

/// Coriolis matrix from the Christoffel symbols of `D`:
/// `C_ij = 0.5 * sum_k (dD_ij/dq_k + dD_ik/dq_j - dD_jk/dq_i) dq_k`.
pub fn coriolis_matrix(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> DMatrix<f64> {
    let parts = mass_matrix_partials(model, q);
    let nq = model.nq;
    let mut c = DMatrix::zeros(nq, nq);
    for i in 0..nq {
        for j in 0..nq {
            let mut acc = 0.0;
            for k in 0..nq {
                acc += (parts[k][(i, j)] + parts[j][(i, k)] - parts[i][(j, k)]) * dq[k];
            }
            c[(i, j)] = 0.5 * acc;
        }
    }
    c
}

/// Gravity vector `G(q) = dV/dq` with `V = g * sum_b m_b z_com`.
pub fn gravity_vector(model: &RobotModel, q: &DVector<f64>) -> DVector<f64> {
    let kin = Kin::new(model, q);
    let nq = model.nq;
    let mut g = DVector::zeros(nq);
    for (b, body) in model.bodies.iter().enumerate() {
        let jv = kin.point_jacobian(b, body.com);
        for k in 0..nq {
            g[k] += model.gravity * body.mass * jv[(1, k)];
        }
    }
    g
}

/// Combined bias `H(q, dq) = C(q, dq) dq + G(q)`.
pub fn bias_forces(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> DVector<f64> {
    coriolis_matrix(model, q, dq) * dq + gravity_vector(model, q)
}

pub fn kinetic_energy(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> f64 {
    let d = mass_matrix(model, q);
    0.5 * dq.dot(&(d * dq))
}

pub fn potential_energy(model: &RobotModel, q: &DVector<f64>) -> f64 {
    let kin = Kin::new(model, q);
    model
        .bodies
        .iter()
        .enumerate()
        .map(|(b, body)| model.gravity * body.mass * kin.com_world(b).y)
        .sum()
}

//! The prosthesis-only subsystem: thigh socket frame, shin, and foot.
//!
//! During prosthesis stance the device dynamics separate from the human:
//! the mass matrix of the full model is block diagonal between human and
//! prosthesis coordinates, and the two blocks couple only through the
//! socket constraint rows.  Replacing those rows by an applied socket
//! wrench turns the device into a five-coordinate system
//!
//! ```text
//! qp = (x_f, z_f, phi_f, th_pk, th_pa)
//! ```
//!
//! driven by its two motors and the wrench, with the sole held flat on the
//! ground.  A controller that runs on the device alone sees exactly this
//! system, so its accelerations must (and do) match the corresponding rows
//! of the full model.

use nalgebra::{DMatrix, DVector, Vector3};

use super::constrained::{ConstraintRow, DomainSpec};
use super::kinematics::Kin;
use super::lagrangian::{bias_forces, mass_matrix};
use super::model::{Body, Domain, Joint, RobotModel};
use crate::error::{Error, Result};

/// The three-body prosthesis model with its stance-sole constraint.
#[derive(Debug, Clone)]
pub struct ProsthesisModel {
    /// Reindexed tree: body 0 = socket frame (floating, coords 0..3),
    /// body 1 = shin (coord 3), body 2 = foot (coord 4).
    pub model: RobotModel,
    /// Ground rows pinning the sole: point x, point z, foot angle.
    pub spec: DomainSpec,
    /// Sole point in the foot frame.
    pub sole: [f64; 2],
}

/// State of the prosthesis subsystem.
#[derive(Debug, Clone)]
pub struct ProsthesisState {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
}

impl ProsthesisState {
    /// Extracts the device coordinates from a full-model state.
    pub fn from_full(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> Result<Self> {
        let a = model.anatomy()?;
        let idx = [a.q_socket, a.q_socket + 1, a.q_socket + 2, a.q_pk, a.q_pa];
        Ok(ProsthesisState {
            q: DVector::from_iterator(5, idx.iter().map(|&i| q[i])),
            dq: DVector::from_iterator(5, idx.iter().map(|&i| dq[i])),
        })
    }
}

impl ProsthesisModel {
    /// Carves the device out of the full model, preserving masses,
    /// inertias, and attachment geometry.
    pub fn from_full(full: &RobotModel) -> Result<ProsthesisModel> {
        let a = full.anatomy()?;
        let src = [a.p_thigh, a.p_shin, a.p_foot];
        let joints = [
            Joint::Floating { coord: 0 },
            Joint::Revolute { coord: 3 },
            Joint::Revolute { coord: 4 },
        ];
        let parents = [None, Some(0), Some(1)];
        let bodies: Vec<Body> = src
            .iter()
            .zip(joints)
            .zip(parents)
            .map(|((&s, joint), parent)| {
                let b = &full.bodies[s];
                Body {
                    name: b.name.clone(),
                    parent,
                    attach: b.attach,
                    joint,
                    mass: b.mass,
                    inertia: b.inertia,
                    com: b.com,
                }
            })
            .collect();

        let model = RobotModel {
            bodies,
            nq: 5,
            gravity: full.gravity,
            actuated: vec![3, 4],
            gear: vec![1.0, 1.0],
            markers: vec![],
            anatomy: None,
        };
        model.validate()?;

        let sole = [0.0, -a.ankle_drop];
        let spec = DomainSpec {
            domain: Domain::Ps,
            rows: vec![
                ConstraintRow::PointX { body: 2, local: sole },
                ConstraintRow::PointZ { body: 2, local: sole },
                ConstraintRow::BodyAngle { body: 2 },
            ],
            guard: None,
        };
        Ok(ProsthesisModel { model, spec, sole })
    }

    /// Generalized-force map of the socket wrench: identity on the three
    /// floating coordinates of the socket frame.
    pub fn wrench_map(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(5, 3);
        s[(0, 0)] = 1.0;
        s[(1, 1)] = 1.0;
        s[(2, 2)] = 1.0;
        s
    }
}

/// Control-affine pieces of the constrained device acceleration:
/// `ddq = f + g_u u + g_s F_s`.
#[derive(Debug, Clone)]
pub struct ProsthesisAffine {
    pub f: DVector<f64>,
    pub g_u: DMatrix<f64>,
    pub g_s: DMatrix<f64>,
}

/// Builds the affine acceleration decomposition at one state, sharing a
/// single factorization of the contact KKT matrix across all columns.
pub fn prosthesis_affine(
    pm: &ProsthesisModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<ProsthesisAffine> {
    let model = &pm.model;
    let nq = model.nq;
    let m = pm.spec.n_rows();
    let kin = Kin::new(model, q);
    let d = mass_matrix(model, q);
    let h = bias_forces(model, q, dq);
    let j = pm.spec.jacobian(&kin);
    let jdot = pm.spec.jacobian_dot(&kin, dq);

    let mut kkt = DMatrix::zeros(nq + m, nq + m);
    kkt.view_mut((0, 0), (nq, nq)).copy_from(&d);
    kkt.view_mut((0, nq), (nq, m)).copy_from(&(-j.transpose()));
    kkt.view_mut((nq, 0), (m, nq)).copy_from(&j);
    let lu = kkt.lu();

    let solve = |tau: DVector<f64>, with_bias: bool| -> Result<DVector<f64>> {
        let mut rhs = DVector::zeros(nq + m);
        if with_bias {
            rhs.rows_mut(0, nq).copy_from(&(&tau - &h));
            rhs.rows_mut(nq, m).copy_from(&(-(&jdot * dq)));
        } else {
            rhs.rows_mut(0, nq).copy_from(&tau);
        }
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularConstraint("prosthesis contact KKT".into()))?;
        Ok(sol.rows(0, nq).into_owned())
    };

    let f = solve(DVector::zeros(nq), true)?;
    let b = model.actuation_matrix();
    let mut g_u = DMatrix::zeros(nq, b.ncols());
    for c in 0..b.ncols() {
        g_u.set_column(c, &solve(b.column(c).into_owned(), false)?);
    }
    let s = pm.wrench_map();
    let mut g_s = DMatrix::zeros(nq, 3);
    for c in 0..3 {
        g_s.set_column(c, &solve(s.column(c).into_owned(), false)?);
    }
    Ok(ProsthesisAffine { f, g_u, g_s })
}

/// Constrained device acceleration under motor torques and a socket wrench.
pub fn prosthesis_dynamics(
    pm: &ProsthesisModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    u: &DVector<f64>,
    fs: &Vector3<f64>,
) -> Result<DVector<f64>> {
    let aff = prosthesis_affine(pm, q, dq)?;
    Ok(aff.f + aff.g_u * u + aff.g_s * fs)
}

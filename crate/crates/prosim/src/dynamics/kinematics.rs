//! World poses, point Jacobians, and their exact derivatives.
//!
//! Every world point on the tree decomposes as a root translation plus a
//! chain of rotated offsets, `p = t_root + sum_a R(phi_a) r_a`, where each
//! absolute angle `phi_a` is a 0/1 combination of angle coordinates.  That
//! makes the point Jacobian a sum of rank-one terms `S R r (x) dphi/dq`
//! (`S` = quarter-turn rotation), and because `S^2 = -I`, both the Jacobian
//! time derivative and its configuration partials are sums of the same
//! rank-one structure.  Everything here is exact; no finite differencing.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::model::{Joint, RobotModel};

/// Quarter-turn: `S v` rotates `v` by +90 degrees.
fn quarter_turn(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Planar rotation by `a` radians, counterclockwise positive.
pub(crate) fn rot(a: f64) -> Matrix2<f64> {
    let (s, c) = a.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// One rotated-offset term of a point decomposition.
#[derive(Debug, Clone)]
struct ChainPiece {
    /// `R(phi_a) r_a`, already in world axes.
    vec: Vector2<f64>,
    /// Index of the body whose absolute angle rotates this piece.
    body: usize,
}

/// Kinematics of the whole tree at a fixed configuration.
pub struct Kin<'m> {
    pub model: &'m RobotModel,
    nq: usize,
    /// World position of each body origin (its proximal joint).
    origin: Vec<Vector2<f64>>,
    /// Absolute angle of each body.
    angle: Vec<f64>,
    rotation: Vec<Matrix2<f64>>,
    /// Gradient of each absolute angle: constant 0/1 rows.
    ang_jac: Vec<DVector<f64>>,
    /// Root translation coordinate pair for each body.
    root_trans: Vec<(usize, usize)>,
    /// Rotated-offset chain from the root translation to each body origin.
    chain: Vec<Vec<ChainPiece>>,
}

impl<'m> Kin<'m> {
    pub fn new(model: &'m RobotModel, q: &DVector<f64>) -> Kin<'m> {
        let n = model.bodies.len();
        let nq = model.nq;
        let mut origin = Vec::with_capacity(n);
        let mut angle = Vec::with_capacity(n);
        let mut rotation = Vec::with_capacity(n);
        let mut ang_jac: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut root_trans = Vec::with_capacity(n);
        let mut chain: Vec<Vec<ChainPiece>> = Vec::with_capacity(n);

        for (i, b) in model.bodies.iter().enumerate() {
            match b.joint {
                Joint::Floating { coord } => {
                    origin.push(Vector2::new(q[coord], q[coord + 1]));
                    angle.push(q[coord + 2]);
                    rotation.push(rot(q[coord + 2]));
                    let mut aj = DVector::zeros(nq);
                    aj[coord + 2] = 1.0;
                    ang_jac.push(aj);
                    root_trans.push((coord, coord + 1));
                    chain.push(Vec::new());
                }
                Joint::Revolute { coord } => {
                    let p = b.parent.expect("validated tree");
                    let attach = Vector2::new(b.attach[0], b.attach[1]);
                    let world_attach = rotation[p] * attach;
                    origin.push(origin[p] + world_attach);
                    let a = angle[p] + q[coord];
                    angle.push(a);
                    rotation.push(rot(a));
                    let mut aj = ang_jac[p].clone();
                    aj[coord] += 1.0;
                    ang_jac.push(aj);
                    root_trans.push(root_trans[p]);
                    let mut ch = chain[p].clone();
                    ch.push(ChainPiece { vec: world_attach, body: p });
                    chain.push(ch);
                }
            }
            let _ = i;
        }

        Kin { model, nq, origin, angle, rotation, ang_jac, root_trans, chain }
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    pub fn body_angle(&self, body: usize) -> f64 {
        self.angle[body]
    }

    /// Constant gradient of the absolute body angle.
    pub fn body_angle_jac(&self, body: usize) -> &DVector<f64> {
        &self.ang_jac[body]
    }

    /// World position of a point given in the body frame.
    pub fn point_world(&self, body: usize, local: [f64; 2]) -> Vector2<f64> {
        self.origin[body] + self.rotation[body] * Vector2::new(local[0], local[1])
    }

    /// Full decomposition pieces for a body point: the chain to the body
    /// origin plus the final rotated local offset.
    fn pieces_for(&self, body: usize, local: [f64; 2]) -> Vec<ChainPiece> {
        let mut pieces = self.chain[body].clone();
        let v = Vector2::new(local[0], local[1]);
        if v != Vector2::zeros() {
            pieces.push(ChainPiece { vec: self.rotation[body] * v, body });
        }
        pieces
    }

    /// `d p / d q` for a body point; `2 x nq`.
    pub fn point_jacobian(&self, body: usize, local: [f64; 2]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, self.nq);
        let (cx, cz) = self.root_trans[body];
        j[(0, cx)] = 1.0;
        j[(1, cz)] = 1.0;
        for piece in self.pieces_for(body, local) {
            let sv = quarter_turn(piece.vec);
            let aj = &self.ang_jac[piece.body];
            for k in 0..self.nq {
                let w = aj[k];
                if w != 0.0 {
                    j[(0, k)] += sv.x * w;
                    j[(1, k)] += sv.y * w;
                }
            }
        }
        j
    }

    /// Time derivative of the point Jacobian along `dq`; `2 x nq`.
    ///
    /// Each rank-one piece `S R r (x) a` differentiates to
    /// `-R r * (a . dq) (x) a` because the angle gradients are constant.
    pub fn point_jacobian_dot(&self, body: usize, local: [f64; 2], dq: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, self.nq);
        for piece in self.pieces_for(body, local) {
            let aj = &self.ang_jac[piece.body];
            let omega = aj.dot(dq);
            if omega == 0.0 {
                continue;
            }
            let dv = -piece.vec * omega;
            for k in 0..self.nq {
                let w = aj[k];
                if w != 0.0 {
                    j[(0, k)] += dv.x * w;
                    j[(1, k)] += dv.y * w;
                }
            }
        }
        j
    }

    /// `d (point Jacobian) / d q_k`; `2 x nq`.
    pub fn point_jacobian_partial(&self, body: usize, local: [f64; 2], k: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, self.nq);
        for piece in self.pieces_for(body, local) {
            let aj = &self.ang_jac[piece.body];
            let wk = aj[k];
            if wk == 0.0 {
                continue;
            }
            let dv = -piece.vec * wk;
            for col in 0..self.nq {
                let w = aj[col];
                if w != 0.0 {
                    j[(0, col)] += dv.x * w;
                    j[(1, col)] += dv.y * w;
                }
            }
        }
        j
    }

    /// World velocity of a body point.
    pub fn point_velocity(&self, body: usize, local: [f64; 2], dq: &DVector<f64>) -> Vector2<f64> {
        let j = self.point_jacobian(body, local);
        let v = j * dq;
        Vector2::new(v[0], v[1])
    }

    /// World center-of-mass position of a body.
    pub fn com_world(&self, body: usize) -> Vector2<f64> {
        self.point_world(body, self.model.bodies[body].com)
    }

    /// Whole-model center of mass.
    pub fn total_com(&self) -> Vector2<f64> {
        let mut acc = Vector2::zeros();
        let mut m = 0.0;
        for (i, b) in self.model.bodies.iter().enumerate() {
            acc += self.com_world(i) * b.mass;
            m += b.mass;
        }
        acc / m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::model::default_model;
    use approx::assert_abs_diff_eq;

    fn test_q() -> DVector<f64> {
        DVector::from_vec(vec![
            0.03, 0.88, 0.05, 0.21, -0.35, 0.11, -0.17, 0.0, 0.0, 0.0, -0.23, 0.31,
        ])
    }

    /// Make the socket coordinates consistent with the right thigh so the
    /// configuration is physically meaningful (not required by kinematics).
    fn consistent_q() -> DVector<f64> {
        let m = default_model();
        let mut q = test_q();
        let kin = Kin::new(&m, &q);
        let a = m.anatomy().unwrap();
        let distal = kin.point_world(a.r_thigh, [0.0, -a.r_thigh_len]);
        q[a.q_socket] = distal.x;
        q[a.q_socket + 1] = distal.y;
        q[a.q_socket + 2] = kin.body_angle(a.r_thigh);
        q
    }

    #[test]
    fn straight_hang_geometry() {
        let m = default_model();
        let mut q = DVector::zeros(12);
        q[1] = 0.91; // hip height with straight legs
        q[8] = 0.91 - 0.32; // socket below the hip
        let kin = Kin::new(&m, &q);
        let a = m.anatomy().unwrap();
        let sole = kin.point_world(a.l_foot, [0.0, -a.ankle_drop]);
        assert_abs_diff_eq!(sole.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sole.y, 0.0, epsilon = 1e-12);
        let psole = kin.point_world(a.p_foot, [0.0, -a.ankle_drop]);
        assert_abs_diff_eq!(psole.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn positive_hip_angle_moves_foot_forward() {
        let m = default_model();
        let mut q = DVector::zeros(12);
        q[1] = 0.91;
        q[3] = 0.3; // left hip forward
        let kin = Kin::new(&m, &q);
        let a = m.anatomy().unwrap();
        let ankle = kin.point_world(a.l_foot, [0.0, 0.0]);
        assert!(ankle.x > 0.2);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = default_model();
        let q = consistent_q();
        let kin = Kin::new(&m, &q);
        let a = m.anatomy().unwrap();
        let probes = [
            (a.l_foot, [0.0, -a.ankle_drop]),
            (a.p_foot, [0.02, -0.05]),
            (a.torso, [0.0, 0.6]),
            (a.p_shin, [0.0, -0.42]),
        ];
        let h = 1e-7;
        for &(body, local) in &probes {
            let j = kin.point_jacobian(body, local);
            for k in 0..12 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let pp = Kin::new(&m, &qp).point_world(body, local);
                let pm = Kin::new(&m, &qm).point_world(body, local);
                let fd = (pp - pm) / (2.0 * h);
                assert_abs_diff_eq!(j[(0, k)], fd.x, epsilon = 1e-6);
                assert_abs_diff_eq!(j[(1, k)], fd.y, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_dot_matches_finite_differences() {
        let m = default_model();
        let q = consistent_q();
        let dq = DVector::from_vec(vec![
            0.1, -0.2, 0.3, 0.5, -0.4, 0.2, 0.6, 0.1, -0.1, 0.2, -0.5, 0.4,
        ]);
        let kin = Kin::new(&m, &q);
        let a = m.anatomy().unwrap();
        let body = a.p_foot;
        let local = [0.0, -a.ankle_drop];
        let jdot = kin.point_jacobian_dot(body, local, &dq);

        let h = 1e-7;
        let qp = &q + &dq * h;
        let qm = &q - &dq * h;
        let jp = Kin::new(&m, &qp).point_jacobian(body, local);
        let jm = Kin::new(&m, &qm).point_jacobian(body, local);
        let fd = (jp - jm) / (2.0 * h);
        for r in 0..2 {
            for c in 0..12 {
                assert_abs_diff_eq!(jdot[(r, c)], fd[(r, c)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_partials_match_finite_differences_and_commute() {
        let m = default_model();
        let q = consistent_q();
        let kin = Kin::new(&m, &q);
        let a = m.anatomy().unwrap();
        let body = a.l_foot;
        let local = [0.05, -0.03];
        let h = 1e-6;
        for k in 0..12 {
            let dj = kin.point_jacobian_partial(body, local, k);
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let jp = Kin::new(&m, &qp).point_jacobian(body, local);
            let jm = Kin::new(&m, &qm).point_jacobian(body, local);
            let fd = (jp - jm) / (2.0 * h);
            for r in 0..2 {
                for c in 0..12 {
                    assert_abs_diff_eq!(dj[(r, c)], fd[(r, c)], epsilon = 1e-5);
                }
            }
        }
        // Mixed partials commute: d(dp/dq_j)/dq_k has symmetric (j,k) slices.
        for j in 0..12 {
            let dj = kin.point_jacobian_partial(body, local, j);
            for k in 0..12 {
                let dk = kin.point_jacobian_partial(body, local, k);
                for r in 0..2 {
                    assert_abs_diff_eq!(dj[(r, k)], dk[(r, j)], epsilon = 1e-12);
                }
            }
        }
    }
}

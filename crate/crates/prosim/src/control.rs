//! Joint-level walking controllers and the multi-step walking harness.
//!
//! Three layers build on each other:
//!
//! 1. **Full-model tracking** by input-output linearization: the six motor
//!    torques exactly impose first-order decay on the hip-rate output and
//!    second-order decay on the five tracked-joint outputs.
//! 2. **Device-side control** during prosthesis stance: the device sees only
//!    its own five coordinates and the socket wrench.  A control Lyapunov
//!    function over the transverse errors `(eta1, eta2, deta2)` yields a
//!    quadratic program whose force term is taken at the worst corner of a
//!    socket-force band, and a relaxed variant that trades constraint
//!    satisfaction against torque smoothness.
//! 3. **The walking harness**: strings stance phases together through
//!    touchdown impacts, running the device law at a fixed control rate and
//!    the human side continuously.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bezier::BezierCurve;
use crate::dynamics::constrained::{impact_map, socket_wrench_from_inputs, DomainSpec};
use crate::dynamics::integrate::{simulate_domain, ControlMode, OdeOptions, StopReason};
use crate::dynamics::kinematics::Kin;
use crate::dynamics::lagrangian::{bias_forces, mass_matrix};
use crate::dynamics::model::{Domain, HybridState, RobotModel};
use crate::dynamics::prosthesis::{prosthesis_affine, ProsthesisModel, ProsthesisState};
use crate::error::{Error, Result};
use crate::gait::{domain_index, outputs, surface_state, GaitParams, OutputSpec};
use crate::qp::{solve as solve_qp, QpProblem};

// ---------------------------------------------------------------------------
// Full-model output tracking
// ---------------------------------------------------------------------------

/// Gains of the full-model tracking law: the hip-rate output decays at
/// `k_v`, the tracked joints obey `ydd = -kp y - kd yd`.
#[derive(Debug, Clone, Copy)]
pub struct TrackingGains {
    pub k_v: f64,
    pub kp: f64,
    pub kd: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        // kp/kd give real closed-loop rates 10 and 30 on the joint outputs.
        TrackingGains { k_v: 30.0, kp: 300.0, kd: 40.0 }
    }
}

/// Torque-affine constrained acceleration `ddq = a0 + a1 u`, sharing one
/// factorization of the contact KKT system across all columns.
fn constrained_affine(
    model: &RobotModel,
    spec: &DomainSpec,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
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
    let lu = kkt.lu();

    let solve = |top: DVector<f64>, with_bias: bool| -> Result<DVector<f64>> {
        let mut rhs = DVector::zeros(nq + m);
        if with_bias {
            rhs.rows_mut(0, nq).copy_from(&(&top - &h));
            rhs.rows_mut(nq, m).copy_from(&(-(&jdot * dq)));
        } else {
            rhs.rows_mut(0, nq).copy_from(&top);
        }
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularConstraint("contact KKT factorization".into()))?;
        Ok(sol.rows(0, nq).into_owned())
    };

    let a0 = solve(DVector::zeros(nq), true)?;
    let b = model.actuation_matrix();
    let mut a1 = DMatrix::zeros(nq, b.ncols());
    for c in 0..b.ncols() {
        a1.set_column(c, &solve(b.column(c).into_owned(), false)?);
    }
    Ok((a0, a1))
}

/// Output-space dynamics: stacking the hip-rate output over the five
/// tracked-joint outputs, their highest derivatives are `drift + dec * u`.
struct OutputDynamics {
    drift: DVector<f64>,
    dec: DMatrix<f64>,
    y1: f64,
    y2: DVector<f64>,
    dy2: DVector<f64>,
}

fn output_dynamics(
    model: &RobotModel,
    ospec: &OutputSpec,
    dspec: &DomainSpec,
    gait: &GaitParams,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<OutputDynamics> {
    let a = model.anatomy()?;
    let domain = dspec.domain;
    let params = gait.domain(domain);
    let out = outputs(model, ospec, gait, domain, q, dq)?;
    let (a0, a1) = constrained_affine(model, dspec, q, dq)?;

    let nq = model.nq;
    let (lt, ls) = a.stance_lengths(domain);
    let (ck, ca) = a.stance_joints(domain);
    let mut lvec = DVector::zeros(nq);
    lvec[ck] = lt + ls;
    lvec[ca] = ls;
    let delta = params.delta();

    // Outside the phase window the references are frozen, so their
    // derivatives drop out and the law reduces to joint-space tracking.
    let raw = (out.progression - params.phase_min) / delta;
    let frozen = !(0.0..=1.0).contains(&raw);

    let act = a.actuated_joints();
    let tracked = ospec.tracked_of(domain);
    let mut drift = DVector::zeros(6);
    let mut dec = DMatrix::zeros(6, 6);
    drift[0] = lvec.dot(&a0);
    dec.row_mut(0).tr_copy_from(&(a1.transpose() * &lvec));
    for (i, &k) in tracked.iter().enumerate() {
        let curve = &params.curves[k];
        let (d1, d2) = if frozen {
            (0.0, 0.0)
        } else {
            let dc = curve.derivative();
            (dc.eval(out.tau)?, dc.derivative().eval(out.tau)?)
        };
        let mut w = DVector::zeros(nq);
        w[act[k]] = 1.0;
        w -= &lvec * (d1 / delta);
        drift[1 + i] = w.dot(&a0) - d2 * out.tau_rate * out.tau_rate;
        dec.row_mut(1 + i).tr_copy_from(&(a1.transpose() * &w));
    }
    Ok(OutputDynamics { drift, dec, y1: out.y1, y2: out.y2, dy2: out.dy2 })
}

/// Motor torques that exactly impose the designed output error dynamics on
/// the full model: `d/dt y1 = -k_v y1` and `ydd2 = -kp y2 - kd yd2`.
pub fn feedback_linearization(
    model: &RobotModel,
    ospec: &OutputSpec,
    dspec: &DomainSpec,
    gait: &GaitParams,
    gains: &TrackingGains,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<DVector<f64>> {
    let od = output_dynamics(model, ospec, dspec, gait, q, dq)?;
    let mut v = DVector::zeros(6);
    v[0] = -gains.k_v * od.y1;
    for i in 0..5 {
        v[1 + i] = -gains.kp * od.y2[i] - gains.kd * od.dy2[i];
    }
    od.dec
        .lu()
        .solve(&(v - od.drift))
        .ok_or_else(|| Error::SingularConstraint("output decoupling matrix".into()))
}

/// The four human-side torques during device stance.
///
/// The human plans with a full-body internal model — the same output
/// tracking law that drives nominal walking, evaluated on the curves the
/// human is following — and applies its own four torques from that plan.
/// The device's columns in the plan are only the human's expectation; the
/// torque the device actually applies is chosen elsewhere, and whatever
/// difference remains is felt through the socket.  Solving the full
/// six-channel system instead of the human block alone keeps the torques
/// well conditioned: the human-only block couples the light swing chain to
/// the heavy torso and its inverse turns small reference changes into
/// hundreds of newton-meters.
pub fn human_tracking_torques(
    model: &RobotModel,
    ospec: &OutputSpec,
    dspec: &DomainSpec,
    gait: &GaitParams,
    gains: &TrackingGains,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<DVector<f64>> {
    let full = feedback_linearization(model, ospec, dspec, gait, gains, q, dq)?;
    Ok(full.rows(0, 4).into_owned())
}

// ---------------------------------------------------------------------------
// Device-side transverse errors
// ---------------------------------------------------------------------------

/// Everything the device-side controller knows about the walking task,
/// extracted once from the stance-domain gait parameters.  At run time the
/// device works from its own joint measurements alone.
#[derive(Debug, Clone)]
pub struct ProsthesisTask {
    /// Stance-knee reference over the phase.
    pub knee: BezierCurve,
    /// Stance-ankle reference, used by the joint-space comparison law.
    pub ankle: BezierCurve,
    pub phase_min: f64,
    pub phase_max: f64,
    pub v_hip: f64,
    /// Hip-progression weights on (knee, ankle) joint angles.
    pub w_knee: f64,
    pub w_ankle: f64,
}

impl ProsthesisTask {
    pub fn from_gait(model: &RobotModel, gait: &GaitParams) -> Result<ProsthesisTask> {
        let a = model.anatomy()?;
        let ospec = OutputSpec::for_model(model)?;
        let (lt, ls) = a.stance_lengths(Domain::Ps);
        let (ck, ca) = ospec.stance_of(Domain::Ps);
        let p = &gait.ps;
        Ok(ProsthesisTask {
            knee: p.curves[ck].clone(),
            ankle: p.curves[ca].clone(),
            phase_min: p.phase_min,
            phase_max: p.phase_max,
            v_hip: p.v_hip,
            w_knee: lt + ls,
            w_ankle: ls,
        })
    }

    pub fn delta(&self) -> f64 {
        self.phase_max - self.phase_min
    }

    /// Hip progression from the two device joint values (or rates).
    pub fn progression(&self, knee: f64, ankle: f64) -> f64 {
        self.w_knee * knee + self.w_ankle * ankle
    }

    /// Clamped phase and whether the raw value was inside the window.
    pub fn phase(&self, progression: f64) -> (f64, bool) {
        let raw = (progression - self.phase_min) / self.delta();
        (raw.clamp(0.0, 1.0), (0.0..=1.0).contains(&raw))
    }
}

/// Transverse error state of the device outputs.
#[derive(Debug, Clone, Copy)]
pub struct EtaState {
    /// `(eta1, eta2, deta2)`: hip-rate error, knee tracking error, its rate.
    pub eta: Vector3<f64>,
    pub tau: f64,
    pub tau_rate: f64,
}

/// Evaluates the transverse errors from device-local measurements.
pub fn prosthesis_eta(task: &ProsthesisTask, x: &ProsthesisState) -> Result<EtaState> {
    let p = task.progression(x.q[3], x.q[4]);
    let dp = task.progression(x.dq[3], x.dq[4]);
    let (tau, in_window) = task.phase(p);
    let tau_rate = if in_window { dp / task.delta() } else { 0.0 };
    let eta1 = dp - task.v_hip;
    let eta2 = x.q[3] - task.knee.eval(tau)?;
    let deta2 = x.dq[3] - task.knee.derivative().eval(tau)? * tau_rate;
    Ok(EtaState { eta: Vector3::new(eta1, eta2, deta2), tau, tau_rate })
}

/// Linear structure of the transverse dynamics `eta' = A eta + B nu`:
/// `eta1` integrates `nu1` and `(eta2, deta2)` double-integrate `nu2`.
pub fn eta_matrices() -> (Matrix3<f64>, Matrix3x2<f64>) {
    let a = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
    let b = Matrix3x2::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    (a, b)
}

/// Affine decomposition of the transverse input `nu = lf + am u + a_s F`:
/// the first row is the hip-rate error derivative, the second the knee
/// error acceleration, as functions of motor torque and socket wrench.
#[derive(Debug, Clone)]
pub struct LieTerms {
    pub lf: Vector2<f64>,
    pub am: Matrix2<f64>,
    pub a_s: Matrix2x3<f64>,
}

pub fn lie_terms(
    pm: &ProsthesisModel,
    task: &ProsthesisTask,
    x: &ProsthesisState,
) -> Result<LieTerms> {
    let aff = prosthesis_affine(pm, &x.q, &x.dq)?;
    let p = task.progression(x.q[3], x.q[4]);
    let dp = task.progression(x.dq[3], x.dq[4]);
    let (tau, in_window) = task.phase(p);
    let tau_rate = if in_window { dp / task.delta() } else { 0.0 };
    let (d1, d2) = if in_window {
        let dc = task.knee.derivative();
        (dc.eval(tau)?, dc.derivative().eval(tau)?)
    } else {
        (0.0, 0.0)
    };

    let mut lsel = DVector::zeros(5);
    lsel[3] = task.w_knee;
    lsel[4] = task.w_ankle;
    let mut w = DVector::zeros(5);
    w[3] = 1.0;
    w -= &lsel * (d1 / task.delta());

    let row = |v: &DVector<f64>, m: &DMatrix<f64>| -> DVector<f64> { m.transpose() * v };
    let ru_l = row(&lsel, &aff.g_u);
    let ru_w = row(&w, &aff.g_u);
    let rs_l = row(&lsel, &aff.g_s);
    let rs_w = row(&w, &aff.g_s);
    Ok(LieTerms {
        lf: Vector2::new(lsel.dot(&aff.f), w.dot(&aff.f) - d2 * tau_rate * tau_rate),
        am: Matrix2::new(ru_l[0], ru_l[1], ru_w[0], ru_w[1]),
        a_s: Matrix2x3::new(rs_l[0], rs_l[1], rs_l[2], rs_w[0], rs_w[1], rs_w[2]),
    })
}

// ---------------------------------------------------------------------------
// Control Lyapunov function
// ---------------------------------------------------------------------------

/// Solves the continuous-time algebraic Riccati equation
/// `A'P + PA - P B R^-1 B' P + Q = 0` by Newton iteration on the gain,
/// starting from a stabilizing `k0`.  Each iterate solves a Lyapunov
/// equation through its Kronecker form.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let lyapunov = |a_cl: &DMatrix<f64>, c: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        // a_cl' P + P a_cl = -c, vectorized column-major.
        let m = n * n;
        let mut sys = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for j in 0..n {
            for i in 0..n {
                let eq = i + j * n;
                rhs[eq] = -c[(i, j)];
                for l in 0..n {
                    sys[(eq, l + j * n)] += a_cl[(l, i)];
                    sys[(eq, i + l * n)] += a_cl[(l, j)];
                }
            }
        }
        let sol = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularConstraint("Lyapunov system".into()))?;
        let p = DMatrix::from_fn(n, n, |i, j| sol[i + j * n]);
        Ok((&p + p.transpose()) * 0.5)
    };

    let r_lu = r.clone().lu();
    let mut k = k0.clone();
    let mut p = DMatrix::zeros(n, n);
    for _ in 0..60 {
        let a_cl = a - b * &k;
        let c = q + k.transpose() * r * &k;
        p = lyapunov(&a_cl, &c)?;
        let k_new = r_lu
            .solve(&(b.transpose() * &p))
            .ok_or_else(|| Error::SingularConstraint("input weight".into()))?;
        let step = (&k_new - &k).amax();
        k = k_new;
        if step < 1e-13 {
            break;
        }
    }
    let r_inv_bt = r_lu
        .solve(&b.transpose())
        .ok_or_else(|| Error::SingularConstraint("input weight".into()))?;
    let residual = a.transpose() * &p + &p * a - &p * b * &r_inv_bt * &p + q;
    let res = residual.amax();
    if res > 1e-10 {
        return Err(Error::NoConvergence {
            context: "Riccati iteration".into(),
            residual: res,
            iterations: 60,
        });
    }
    let eig = p.clone().symmetric_eigen().eigenvalues;
    if eig.min() <= 0.0 {
        return Err(Error::SingularConstraint(
            "Riccati solution not positive definite".into(),
        ));
    }
    Ok(p)
}

/// Riccati solution for the transverse pair [`eta_matrices`].
pub fn solve_clf_riccati(q: &Matrix3<f64>, r: &Matrix2<f64>) -> Result<Matrix3<f64>> {
    let (a, b) = eta_matrices();
    let ad = DMatrix::from_fn(3, 3, |i, j| a[(i, j)]);
    let bd = DMatrix::from_fn(3, 2, |i, j| b[(i, j)]);
    let qd = DMatrix::from_fn(3, 3, |i, j| q[(i, j)]);
    let rd = DMatrix::from_fn(2, 2, |i, j| r[(i, j)]);
    // Deadbeat-ish seed: closed-loop poles at -1, -1, -1.
    let k0 = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    let p = solve_care(&ad, &bd, &qd, &rd, &k0)?;
    Ok(Matrix3::from_fn(|i, j| p[(i, j)]))
}

/// Lyapunov design for the transverse errors.  The error coordinates are
/// rescaled by `1/epsilon` so the certified decay rate becomes
/// `gamma / epsilon`; smaller `epsilon` means faster convergence.
#[derive(Debug, Clone, Copy)]
pub struct ClfConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub q: Matrix3<f64>,
    pub r: Matrix2<f64>,
    /// Riccati solution for (`q`, `r`) on the transverse pair.
    pub p: Matrix3<f64>,
}

impl ClfConfig {
    pub fn new(epsilon: f64, gamma: f64, q: Matrix3<f64>, r: Matrix2<f64>) -> Result<ClfConfig> {
        if epsilon <= 0.0 || gamma <= 0.0 {
            return Err(Error::domain("CLF rates must be positive"));
        }
        let p = solve_clf_riccati(&q, &r)?;
        Ok(ClfConfig { epsilon, gamma, q, r, p })
    }

    /// The rescaled Lyapunov matrix: error values are weighted by
    /// `1/epsilon`, the error rate is left alone.
    pub fn p_eps(&self) -> Matrix3<f64> {
        let m = Matrix3::from_diagonal(&Vector3::new(
            1.0 / self.epsilon,
            1.0 / self.epsilon,
            1.0,
        ));
        m * self.p * m
    }
}

impl Default for ClfConfig {
    fn default() -> Self {
        ClfConfig::new(0.1, 1.0, Matrix3::identity(), Matrix2::identity())
            .expect("identity-weight Riccati solve")
    }
}

/// Lyapunov value and its derivative decomposition along the transverse
/// flow: `Vdot = l_av + l_bv . nu`.
pub fn clf_value(cfg: &ClfConfig, eta: &Vector3<f64>) -> (f64, f64, Vector2<f64>) {
    let p = cfg.p_eps();
    let (a, b) = eta_matrices();
    let v = eta.dot(&(p * eta));
    let l_av = eta.dot(&((p * a + a.transpose() * p) * eta));
    let l_bv = b.transpose() * p * eta * 2.0;
    (v, l_av, l_bv)
}

// ---------------------------------------------------------------------------
// Robust quadratic programs
// ---------------------------------------------------------------------------

/// Socket-force band the stance controller defends against: a nominal
/// wrench with elementwise envelopes, all at one phase point.
#[derive(Debug, Clone, Copy)]
pub struct ForceBand {
    pub nominal: Vector3<f64>,
    pub lower: Vector3<f64>,
    pub upper: Vector3<f64>,
}

impl ForceBand {
    /// A width-zero band: the force is trusted exactly.
    pub fn degenerate(nominal: Vector3<f64>) -> ForceBand {
        ForceBand { nominal, lower: nominal, upper: nominal }
    }

    pub fn contains(&self, f: &Vector3<f64>, slack: f64) -> bool {
        (0..3).all(|j| f[j] >= self.lower[j] - slack && f[j] <= self.upper[j] + slack)
    }
}

/// Worst-case growth of the Lyapunov derivative over the force band,
/// relative to the nominal force.  Each component decouples, so the
/// maximum over the box is reached at a corner and sums componentwise.
pub fn worst_case_force_term(
    l_bv: &Vector2<f64>,
    a_s: &Matrix2x3<f64>,
    band: &ForceBand,
) -> f64 {
    let c = a_s.transpose() * l_bv;
    (0..3)
        .map(|j| {
            let hi = c[j] * (band.upper[j] - band.nominal[j]);
            let lo = c[j] * (band.lower[j] - band.nominal[j]);
            hi.max(lo)
        })
        .sum()
}

/// Shared data of the stance QPs at one state.
struct ClfQpData {
    h2: Matrix2<f64>,
    b2: Vector2<f64>,
    row: Vector2<f64>,
    rhs_margin: f64,
}

fn clf_qp_data(
    cfg: &ClfConfig,
    lie: &LieTerms,
    eta: &Vector3<f64>,
    band: &ForceBand,
) -> ClfQpData {
    let (v, l_av, l_bv) = clf_value(cfg, eta);
    let k = lie.lf + lie.a_s * band.nominal;
    ClfQpData {
        h2: lie.am.transpose() * lie.am * 2.0,
        b2: lie.am.transpose() * k * 2.0,
        row: lie.am.transpose() * l_bv,
        rhs_margin: -(cfg.gamma / cfg.epsilon) * v
            - l_av
            - l_bv.dot(&k)
            - worst_case_force_term(&l_bv, &lie.a_s, band),
    }
}

/// Minimum-norm transverse input subject to the worst-case Lyapunov decay
/// condition over the force band.  The objective is the squared transverse
/// input at the nominal force; the constraint enforces
/// `Vdot <= -(gamma/epsilon) V` for every force in the band.
pub fn robust_clf_qp(
    cfg: &ClfConfig,
    lie: &LieTerms,
    eta: &Vector3<f64>,
    band: &ForceBand,
) -> Result<Vector2<f64>> {
    let data = clf_qp_data(cfg, lie, eta, band);
    let q = DMatrix::from_fn(2, 2, |i, j| data.h2[(i, j)]);
    let c = DVector::from_vec(vec![data.b2[0], data.b2[1]]);
    let a = DMatrix::from_row_slice(1, 2, &[data.row[0], data.row[1]]);
    let b = DVector::from_vec(vec![data.rhs_margin]);
    let sol = solve_qp(&QpProblem::new(q, c, a, b))?;
    Ok(Vector2::new(sol.x[0], sol.x[1]))
}

/// Smoothness and aggressiveness of the relaxed stance law.
#[derive(Debug, Clone, Copy)]
pub struct RobustQpConfig {
    pub clf: ClfConfig,
    /// Torque-rate box per control tick.
    pub delta_u: Vector2<f64>,
    /// Bound on the decay-condition relaxation.
    pub rho_max: f64,
    /// Price of relaxing the decay condition.
    pub c_rho: f64,
}

impl Default for RobustQpConfig {
    fn default() -> Self {
        RobustQpConfig {
            clf: ClfConfig::default(),
            delta_u: Vector2::new(25.0, 25.0),
            rho_max: 1e6,
            c_rho: 100.0,
        }
    }
}

/// Relaxed robust stance law: the decay condition may be violated by a
/// priced slack `rho`, and the torque may move at most `delta_u` from the
/// previous tick.  Returns the torque and the slack actually used.
///
/// When even the fully relaxed condition cannot be met inside the rate box
/// — far off the gait with the slack bound saturated — the decay row is
/// dropped: the law saturates the slack and keeps minimizing the transverse
/// input within the box, so it always returns a torque.
pub fn relaxed_robust_clf_qp(
    cfg: &RobustQpConfig,
    lie: &LieTerms,
    eta: &Vector3<f64>,
    band: &ForceBand,
    u_prev: &Vector2<f64>,
) -> Result<(Vector2<f64>, f64)> {
    let data = clf_qp_data(&cfg.clf, lie, eta, band);
    let rate = cfg.clf.gamma / cfg.clf.epsilon;
    let mut q = DMatrix::zeros(3, 3);
    q.view_mut((0, 0), (2, 2))
        .copy_from(&DMatrix::from_fn(2, 2, |i, j| data.h2[(i, j)]));
    let c = DVector::from_vec(vec![data.b2[0], data.b2[1], cfg.c_rho]);
    let a = DMatrix::from_row_slice(1, 3, &[data.row[0], data.row[1], -rate]);
    let b = DVector::from_vec(vec![data.rhs_margin]);
    let lower = DVector::from_vec(vec![
        u_prev[0] - cfg.delta_u[0],
        u_prev[1] - cfg.delta_u[1],
        0.0,
    ]);
    let upper = DVector::from_vec(vec![
        u_prev[0] + cfg.delta_u[0],
        u_prev[1] + cfg.delta_u[1],
        cfg.rho_max,
    ]);
    match solve_qp(&QpProblem::new(q, c, a, b).with_bounds(lower, upper)) {
        Ok(sol) => Ok((Vector2::new(sol.x[0], sol.x[1]), sol.x[2])),
        Err(Error::QpInfeasible { .. }) => {
            let q = DMatrix::from_fn(2, 2, |i, j| data.h2[(i, j)]);
            let c = DVector::from_vec(vec![data.b2[0], data.b2[1]]);
            let lo = DVector::from_vec(vec![u_prev[0] - cfg.delta_u[0], u_prev[1] - cfg.delta_u[1]]);
            let hi = DVector::from_vec(vec![u_prev[0] + cfg.delta_u[0], u_prev[1] + cfg.delta_u[1]]);
            let free = QpProblem::new(q, c, DMatrix::zeros(0, 2), DVector::zeros(0))
                .with_bounds(lo, hi);
            let sol = solve_qp(&free)?;
            Ok((Vector2::new(sol.x[0], sol.x[1]), cfg.rho_max))
        }
        Err(e) => Err(e),
    }
}

/// Proportional-derivative joint law `u = -kp e - kd ed`.
pub fn pd_controller(kp: f64, kd: f64, err: &Vector2<f64>, rate: &Vector2<f64>) -> Vector2<f64> {
    -err * kp - rate * kd
}

// ---------------------------------------------------------------------------
// Controller description on disk
// ---------------------------------------------------------------------------

/// Which law drives the device during its stance phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Device torques from the same full-model tracking law as the human.
    FullTracking,
    /// Hard worst-case Lyapunov decay condition.
    ClfQp,
    /// Priced relaxation with a torque-rate box.
    RelaxedClfQp,
    /// Joint-space proportional-derivative baseline.
    Pd,
}

/// On-disk controller description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub epsilon: f64,
    pub gamma: f64,
    pub q: [[f64; 3]; 3],
    pub r: [[f64; 2]; 2],
    pub c_rho: f64,
    pub rho_max: f64,
    pub delta_u: [f64; 2],
    pub kp: f64,
    pub kd: f64,
    pub rate_hz: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec {
            kind: ControllerKind::RelaxedClfQp,
            epsilon: 0.1,
            gamma: 1.0,
            q: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            r: [[1.0, 0.0], [0.0, 1.0]],
            c_rho: 100.0,
            rho_max: 1e6,
            delta_u: [25.0, 25.0],
            kp: 150.0,
            kd: 15.0,
            rate_hz: 1000.0,
        }
    }
}

impl ControllerSpec {
    pub fn clf_config(&self) -> Result<ClfConfig> {
        let q = Matrix3::from_fn(|i, j| self.q[i][j]);
        let r = Matrix2::from_fn(|i, j| self.r[i][j]);
        ClfConfig::new(self.epsilon, self.gamma, q, r)
    }

    pub fn robust_config(&self) -> Result<RobustQpConfig> {
        Ok(RobustQpConfig {
            clf: self.clf_config()?,
            delta_u: Vector2::new(self.delta_u[0], self.delta_u[1]),
            rho_max: self.rho_max,
            c_rho: self.c_rho,
        })
    }

    pub fn control_period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Builds the runtime law, wiring in a force-band lookup for the
    /// QP-based kinds.
    pub fn to_law<'a>(&self, tube: TubeLookup<'a>) -> Result<StanceLaw<'a>> {
        Ok(match self.kind {
            ControllerKind::FullTracking => StanceLaw::FullTracking,
            ControllerKind::ClfQp => StanceLaw::ClfQp { cfg: self.clf_config()?, tube },
            ControllerKind::RelaxedClfQp => {
                StanceLaw::RelaxedClfQp { cfg: self.robust_config()?, tube }
            }
            ControllerKind::Pd => StanceLaw::Pd { kp: self.kp, kd: self.kd },
        })
    }
}

pub fn save_controller(
    path: &Path,
    controller: &ControllerSpec,
    meta: &serde_json::Value,
) -> Result<()> {
    let doc = serde_json::json!({ "meta": meta, "controller": controller });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_controller(path: &Path) -> Result<(ControllerSpec, serde_json::Value)> {
    let text = std::fs::read_to_string(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let meta = doc.get("meta").cloned().unwrap_or(serde_json::Value::Null);
    let body = doc.get("controller").unwrap_or(&doc);
    let controller: ControllerSpec = serde_json::from_value(body.clone())?;
    Ok((controller, meta))
}

// ---------------------------------------------------------------------------
// Walking harness
// ---------------------------------------------------------------------------

/// Force-band lookup over the stance phase; implementations hold the band
/// at its endpoints outside `[0, 1]`.
pub type TubeLookup<'a> = &'a (dyn Fn(f64) -> ForceBand + Sync);

/// Runtime stance law for the device.
#[derive(Clone, Copy)]
pub enum StanceLaw<'a> {
    FullTracking,
    ClfQp { cfg: ClfConfig, tube: TubeLookup<'a> },
    RelaxedClfQp { cfg: RobustQpConfig, tube: TubeLookup<'a> },
    Pd { kp: f64, kd: f64 },
}

impl<'a> StanceLaw<'a> {
    fn is_full_tracking(&self) -> bool {
        matches!(self, StanceLaw::FullTracking)
    }

    /// The force tube the law defends, when it has one.
    fn tube_lookup(&self) -> Option<TubeLookup<'a>> {
        match self {
            StanceLaw::ClfQp { tube, .. } | StanceLaw::RelaxedClfQp { tube, .. } => Some(*tube),
            _ => None,
        }
    }

    /// The Lyapunov design used for telemetry.
    fn telemetry_clf(&self) -> ClfConfig {
        match self {
            StanceLaw::ClfQp { cfg, .. } => *cfg,
            StanceLaw::RelaxedClfQp { cfg, .. } => cfg.clf,
            _ => ClfConfig::default(),
        }
    }
}

/// Per-tick telemetry of the device controller.
#[derive(Debug, Clone)]
pub struct ControlSample {
    pub t: f64,
    pub tau: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub deta2: f64,
    /// Lyapunov value at the tick.
    pub v: f64,
    /// Relaxation slack (zero for laws without one).
    pub rho: f64,
    pub u_knee: f64,
    pub u_ankle: f64,
    /// Socket wrench realized at the tick state under the chosen torques.
    pub socket: Vector3<f64>,
}

/// One accepted integration sample, annotated with the applied torques and
/// the realized socket wrench.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub t: f64,
    pub domain: Domain,
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    pub u: DVector<f64>,
    pub socket: Vector3<f64>,
}

/// One completed step: the domain walked, its boundary states, and the
/// successor-domain output errors right after the impact.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub domain: Domain,
    pub t_start: f64,
    pub t_end: f64,
    pub pre: HybridState,
    pub post: HybridState,
    pub y2_post: DVector<f64>,
    pub dy2_post: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct WalkOptions<'a> {
    pub steps: usize,
    pub gains: TrackingGains,
    pub stance_law: StanceLaw<'a>,
    /// Sample period of the discrete device controller, s.
    pub control_period: f64,
    pub ode: OdeOptions,
    /// Whether to annotate every integration sample with torques and the
    /// socket wrench (costs one dynamics solve per sample).
    pub record_samples: bool,
}

impl std::fmt::Debug for StanceLaw<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StanceLaw::FullTracking => write!(f, "FullTracking"),
            StanceLaw::ClfQp { cfg, .. } => f.debug_struct("ClfQp").field("cfg", cfg).finish(),
            StanceLaw::RelaxedClfQp { cfg, .. } => {
                f.debug_struct("RelaxedClfQp").field("cfg", cfg).finish()
            }
            StanceLaw::Pd { kp, kd } => {
                f.debug_struct("Pd").field("kp", kp).field("kd", kd).finish()
            }
        }
    }
}

impl Default for WalkOptions<'static> {
    fn default() -> Self {
        WalkOptions {
            steps: 4,
            gains: TrackingGains::default(),
            stance_law: StanceLaw::FullTracking,
            control_period: 1e-3,
            ode: OdeOptions { t_max: 2.0, ..OdeOptions::default() },
            record_samples: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WalkResult {
    pub steps: Vec<StepRecord>,
    pub samples: Vec<TrajectorySample>,
    pub control_log: Vec<ControlSample>,
    pub end: HybridState,
}

/// The gait's entry state for a domain: the output-zeroing surface at phase
/// zero with the stance sole flat at the origin.
pub fn initial_state(model: &RobotModel, gait: &GaitParams, domain: Domain) -> Result<HybridState> {
    let ospec = OutputSpec::for_model(model)?;
    surface_state(model, &ospec, gait, domain, [0.0, 0.0, 0.0], 0.0)
}

/// Stance start with selected joints displaced from the reference posture.
///
/// Offsets are indexed in actuator order and are applied to the surface
/// reconstruction, so the stance sole and socket constraints stay satisfied
/// exactly while the posture and joint rates move off the gait curves.
pub fn offset_initial_state(
    model: &RobotModel,
    gait: &GaitParams,
    domain: Domain,
    s: f64,
    joint_offsets: &[f64; 6],
    rate_offsets: &[f64; 6],
) -> Result<HybridState> {
    let ospec = OutputSpec::for_model(model)?;
    let a = model.anatomy()?;
    let (mut joints, mut rates) = crate::gait::surface_joints(&ospec, a, gait, domain, s)?;
    for i in 0..6 {
        joints[i] += joint_offsets[i];
        rates[i] += rate_offsets[i];
    }
    let q = crate::dynamics::reconstruct::state_from_joints(model, domain, [0.0, 0.0, 0.0], &joints)?;
    let dq = crate::dynamics::reconstruct::velocity_from_joint_rates(model, domain, &q, &rates)?;
    Ok(HybridState { domain, t: 0.0, q, dq })
}

/// Device torque consistent with the transverse model at a state: the input
/// that zeroes the transverse forcing when the socket wrench sits at the band
/// nominal.  Rate-boxed laws enter stance from this value — the device
/// carries its load across the transition rather than ramping up from zero.
pub fn warm_start_torque(
    model: &RobotModel,
    pm: &ProsthesisModel,
    task: &ProsthesisTask,
    band: &ForceBand,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<Vector2<f64>> {
    let xp = ProsthesisState::from_full(model, q, dq)?;
    let lie = lie_terms(pm, task, &xp)?;
    let rhs = -(lie.lf + lie.a_s * band.nominal);
    lie.am
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularConstraint("transverse decoupling matrix is singular".into()))
}

/// Context shared by the stance-phase device ticks.
struct DeviceContext<'m> {
    model: &'m RobotModel,
    pm: &'m ProsthesisModel,
    ospec: &'m OutputSpec,
    task: &'m ProsthesisTask,
    gains: TrackingGains,
    telemetry: ClfConfig,
}

/// One device control tick: picks the two device torques by the stance
/// law, completes the human side by output tracking, and logs telemetry.
#[allow(clippy::too_many_arguments)]
fn device_tick(
    ctx: &DeviceContext,
    dspec: &DomainSpec,
    human_gait: &GaitParams,
    law: &StanceLaw,
    u_prev: &mut Vector2<f64>,
    log: &mut Vec<ControlSample>,
    t: f64,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<Vector2<f64>> {
    let xp = ProsthesisState::from_full(ctx.model, q, dq)?;
    let es = prosthesis_eta(ctx.task, &xp)?;
    let (u_p, rho) = match law {
        StanceLaw::ClfQp { cfg, tube } => {
            let lie = lie_terms(ctx.pm, ctx.task, &xp)?;
            (robust_clf_qp(cfg, &lie, &es.eta, &tube(es.tau))?, 0.0)
        }
        StanceLaw::RelaxedClfQp { cfg, tube } => {
            let lie = lie_terms(ctx.pm, ctx.task, &xp)?;
            relaxed_robust_clf_qp(cfg, &lie, &es.eta, &tube(es.tau), u_prev)?
        }
        StanceLaw::Pd { kp, kd } => {
            let knee_d = ctx.task.knee.derivative();
            let ankle_d = ctx.task.ankle.derivative();
            let err = Vector2::new(
                xp.q[3] - ctx.task.knee.eval(es.tau)?,
                xp.q[4] - ctx.task.ankle.eval(es.tau)?,
            );
            let rate = Vector2::new(
                xp.dq[3] - knee_d.eval(es.tau)? * es.tau_rate,
                xp.dq[4] - ankle_d.eval(es.tau)? * es.tau_rate,
            );
            (pd_controller(*kp, *kd, &err, &rate), 0.0)
        }
        StanceLaw::FullTracking => {
            return Err(Error::domain("full tracking has no device tick"))
        }
    };
    let u_h = human_tracking_torques(
        ctx.model, ctx.ospec, dspec, human_gait, &ctx.gains, q, dq,
    )?;
    let u = DVector::from_vec(vec![u_h[0], u_h[1], u_h[2], u_h[3], u_p[0], u_p[1]]);
    let (_, _, fs) = socket_wrench_from_inputs(ctx.model, dspec, q, dq, &u)?;
    let (v, _, _) = clf_value(&ctx.telemetry, &es.eta);
    log.push(ControlSample {
        t,
        tau: es.tau,
        eta1: es.eta[0],
        eta2: es.eta[1],
        deta2: es.eta[2],
        v,
        rho,
        u_knee: u_p[0],
        u_ankle: u_p[1],
        socket: fs,
    });
    *u_prev = u_p;
    Ok(u_p)
}

/// Completes the torque vector from a held device pair: the human joints are
/// closed continuously around whatever the device is applying.
#[allow(clippy::too_many_arguments)]
fn complete_torques(
    model: &RobotModel,
    ospec: &OutputSpec,
    dspec: &DomainSpec,
    human_gait: &GaitParams,
    gains: &TrackingGains,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    u_p: &Vector2<f64>,
) -> Result<DVector<f64>> {
    let u_h = human_tracking_torques(model, ospec, dspec, human_gait, gains, q, dq)?;
    Ok(DVector::from_vec(vec![u_h[0], u_h[1], u_h[2], u_h[3], u_p[0], u_p[1]]))
}

/// Annotates raw integration samples with torques and socket wrenches.
fn annotate_samples(
    model: &RobotModel,
    dspec: &DomainSpec,
    raw: &[(f64, DVector<f64>, DVector<f64>)],
    mut torque_of: impl FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
    out: &mut Vec<TrajectorySample>,
) -> Result<()> {
    for (t, q, dq) in raw {
        let u = torque_of(*t, q, dq)?;
        let (_, _, fs) = socket_wrench_from_inputs(model, dspec, q, dq, &u)?;
        out.push(TrajectorySample {
            t: *t,
            domain: dspec.domain,
            q: q.clone(),
            dq: dq.clone(),
            u,
            socket: fs,
        });
    }
    Ok(())
}

/// Torque held since the most recent tick at or before `t`.
fn held_torque(ticks: &[(f64, Vector2<f64>)], t: f64) -> Vector2<f64> {
    let pos = ticks.partition_point(|(tt, _)| *tt <= t + 1e-12);
    ticks[pos.saturating_sub(1)].1
}

/// Output errors at a domain entry, with the phase rate taken live.
///
/// The landed progression sits numerically on the phase-window edge, so the
/// frozen-reference convention of [`outputs`] may kick in on the wrong side
/// of a rounding error and report raw joint rates; here the reference rates
/// always use the realized progression rate.
fn entry_output_errors(
    model: &RobotModel,
    ospec: &OutputSpec,
    gait: &GaitParams,
    domain: Domain,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let params = gait.domain(domain);
    let out = outputs(model, ospec, gait, domain, q, dq)?;
    let mut dy2 = out.dy2;
    if out.tau_rate == 0.0 {
        let live_rate = out.progression_rate / params.delta();
        for (i, &k) in ospec.tracked_of(domain).iter().enumerate() {
            dy2[i] -= params.curves[k].derivative().eval(out.tau)? * live_rate;
        }
    }
    Ok((out.y2, dy2))
}

/// Walks `opts.steps` domains from `x0`, alternating stance sides through
/// plastic touchdown impacts.  During prosthesis stance the device runs the
/// configured stance law at the control rate; everywhere else all six
/// motors run the full-model tracking law continuously.
pub fn walk(
    model: &RobotModel,
    gait: &GaitParams,
    x0: &HybridState,
    opts: &WalkOptions,
) -> Result<WalkResult> {
    gait.validate()?;
    let ospec = OutputSpec::for_model(model)?;
    let pm = ProsthesisModel::from_full(model)?;
    let task = ProsthesisTask::from_gait(model, gait)?;
    let specs = [
        DomainSpec::for_domain(model, Domain::Ps)?,
        DomainSpec::for_domain(model, Domain::Pns)?,
    ];
    let ctx = DeviceContext {
        model,
        pm: &pm,
        ospec: &ospec,
        task: &task,
        gains: opts.gains,
        telemetry: opts.stance_law.telemetry_clf(),
    };

    let mut x = x0.clone();
    let mut steps = Vec::new();
    let mut samples = Vec::new();
    let mut control_log = Vec::new();
    let mut u_prev = Vector2::zeros();

    for step_i in 0..opts.steps {
        let dspec = &specs[domain_index(x.domain)];
        let device_law = x.domain == Domain::Ps && !opts.stance_law.is_full_tracking();

        let (outcome, ticks) = if device_law {
            if let Some(tube) = opts.stance_law.tube_lookup() {
                let xp = ProsthesisState::from_full(model, &x.q, &x.dq)?;
                let (tau, _) = task.phase(task.progression(xp.q[3], xp.q[4]));
                u_prev = warm_start_torque(model, &pm, &task, &tube(tau), &x.q, &x.dq)?;
            }
            let mut ticks: Vec<(f64, Vector2<f64>)> = Vec::new();
            let mut tick = |t: f64, q: &DVector<f64>, dq: &DVector<f64>| {
                let u_p = device_tick(
                    &ctx,
                    dspec,
                    gait,
                    &opts.stance_law,
                    &mut u_prev,
                    &mut control_log,
                    t,
                    q,
                    dq,
                )?;
                ticks.push((t, u_p));
                Ok(DVector::from_vec(vec![u_p[0], u_p[1]]))
            };
            let mut complete = |_t: f64, q: &DVector<f64>, dq: &DVector<f64>, held: &DVector<f64>| {
                let u_p = Vector2::new(held[0], held[1]);
                complete_torques(model, &ospec, dspec, gait, &opts.gains, q, dq, &u_p)
            };
            let mode = ControlMode::SampledActuator {
                period: opts.control_period,
                tick: &mut tick,
                complete: &mut complete,
            };
            (simulate_domain(model, dspec, &x, mode, &opts.ode)?, ticks)
        } else {
            let mut ctrl = |_t: f64, q: &DVector<f64>, dq: &DVector<f64>| {
                feedback_linearization(model, &ospec, dspec, gait, &opts.gains, q, dq)
            };
            let mode = ControlMode::Continuous(&mut ctrl);
            (simulate_domain(model, dspec, &x, mode, &opts.ode)?, Vec::new())
        };

        if outcome.reason != StopReason::GuardHit {
            return Err(Error::Simulation(format!(
                "step {step_i} ran out of time before touchdown"
            )));
        }
        if opts.record_samples {
            if device_law {
                annotate_samples(
                    model,
                    dspec,
                    &outcome.samples,
                    |t, q, dq| {
                        let u_p = held_torque(&ticks, t);
                        complete_torques(model, &ospec, dspec, gait, &opts.gains, q, dq, &u_p)
                    },
                    &mut samples,
                )?;
            } else {
                annotate_samples(
                    model,
                    dspec,
                    &outcome.samples,
                    |_t, q, dq| {
                        feedback_linearization(model, &ospec, dspec, gait, &opts.gains, q, dq)
                    },
                    &mut samples,
                )?;
            }
        }

        let pre = outcome.end;
        let next = pre.domain.next();
        let post_spec = &specs[domain_index(next)];
        let (dq_plus, _) = impact_map(model, post_spec, &pre.q, &pre.dq)?;
        let post = HybridState { domain: next, t: pre.t, q: pre.q.clone(), dq: dq_plus };
        let (y2_post, dy2_post) = entry_output_errors(model, &ospec, gait, next, &post.q, &post.dq)?;
        steps.push(StepRecord {
            domain: pre.domain,
            t_start: x.t,
            t_end: pre.t,
            pre,
            post: post.clone(),
            y2_post,
            dy2_post,
        });
        x = post;
    }

    Ok(WalkResult { steps, samples, control_log, end: x })
}

// ---------------------------------------------------------------------------
// Stance-phase trials and law comparison
// ---------------------------------------------------------------------------

/// One device-stance phase run in isolation.
#[derive(Debug, Clone)]
pub struct StanceTrial {
    pub log: Vec<ControlSample>,
    pub samples: Vec<TrajectorySample>,
    /// Full state at each controller tick, for evaluating other laws along
    /// the same trajectory.
    pub tick_states: Vec<(f64, DVector<f64>, DVector<f64>)>,
    pub reason: StopReason,
    pub end: HybridState,
    /// Root-mean-square knee tracking error over the ticks.
    pub knee_rms: f64,
    /// Last phase value the device saw.
    pub tau_end: f64,
}

/// Runs a single prosthesis-stance phase.  The human joints track
/// `human_gait` (possibly a perturbed variant), while the device law works
/// from the nominal `task`; the two meet only through the socket wrench.
pub fn stance_trial(
    model: &RobotModel,
    human_gait: &GaitParams,
    task: &ProsthesisTask,
    law: &StanceLaw,
    gains: &TrackingGains,
    control_period: f64,
    x0: &HybridState,
    ode: &OdeOptions,
) -> Result<StanceTrial> {
    let ospec = OutputSpec::for_model(model)?;
    let pm = ProsthesisModel::from_full(model)?;
    let dspec = DomainSpec::for_domain(model, Domain::Ps)?;
    let ctx = DeviceContext {
        model,
        pm: &pm,
        ospec: &ospec,
        task,
        gains: *gains,
        telemetry: law.telemetry_clf(),
    };

    let mut log = Vec::new();
    let mut u_prev = Vector2::zeros();
    if let Some(tube) = law.tube_lookup() {
        let xp = ProsthesisState::from_full(model, &x0.q, &x0.dq)?;
        let (tau, _) = task.phase(task.progression(xp.q[3], xp.q[4]));
        u_prev = warm_start_torque(model, &pm, task, &tube(tau), &x0.q, &x0.dq)?;
    }
    let mut ticks: Vec<(f64, Vector2<f64>)> = Vec::new();
    let mut tick_states: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::new();

    let outcome = if law.is_full_tracking() {
        let mut ctrl = |_t: f64, q: &DVector<f64>, dq: &DVector<f64>| {
            feedback_linearization(model, &ospec, &dspec, human_gait, gains, q, dq)
        };
        simulate_domain(model, &dspec, x0, ControlMode::Continuous(&mut ctrl), ode)?
    } else {
        // The device torque is sampled and held at the controller rate; the
        // human joints close their tracking loop continuously around it.
        let mut tick = |t: f64, q: &DVector<f64>, dq: &DVector<f64>| {
            let u_p = device_tick(&ctx, &dspec, human_gait, law, &mut u_prev, &mut log, t, q, dq)?;
            ticks.push((t, u_p));
            tick_states.push((t, q.clone(), dq.clone()));
            Ok(DVector::from_vec(vec![u_p[0], u_p[1]]))
        };
        let mut complete = |t: f64, q: &DVector<f64>, dq: &DVector<f64>, held: &DVector<f64>| {
            let _ = t;
            let u_p = Vector2::new(held[0], held[1]);
            complete_torques(model, &ospec, &dspec, human_gait, gains, q, dq, &u_p)
        };
        let mode = ControlMode::SampledActuator {
            period: control_period,
            tick: &mut tick,
            complete: &mut complete,
        };
        simulate_domain(model, &dspec, x0, mode, ode)?
    };

    let mut samples = Vec::new();
    if law.is_full_tracking() {
        annotate_samples(
            model,
            &dspec,
            &outcome.samples,
            |_t, q, dq| feedback_linearization(model, &ospec, &dspec, human_gait, gains, q, dq),
            &mut samples,
        )?;
    } else {
        annotate_samples(
            model,
            &dspec,
            &outcome.samples,
            |t, q, dq| {
                let u_p = held_torque(&ticks, t);
                complete_torques(model, &ospec, &dspec, human_gait, gains, q, dq, &u_p)
            },
            &mut samples,
        )?;
    }

    let knee_rms = if log.is_empty() {
        0.0
    } else {
        (log.iter().map(|s| s.eta2 * s.eta2).sum::<f64>() / log.len() as f64).sqrt()
    };
    let tau_end = {
        let xp = ProsthesisState::from_full(model, &outcome.end.q, &outcome.end.dq)?;
        let (tau, _) = task.phase(task.progression(xp.q[3], xp.q[4]));
        tau
    };
    Ok(StanceTrial {
        log,
        samples,
        tick_states,
        reason: outcome.reason,
        end: outcome.end,
        knee_rms,
        tau_end,
    })
}

/// A deterministic smooth perturbation of the human-side tracked curves in
/// the device-stance domain.  The added shape and its slope vanish at both
/// phase ends, so boundary states and impact invariance are untouched; the
/// human simply wanders mid-stance, dragging the socket wrench with it.
pub fn perturbed_gait(gait: &GaitParams, magnitude: f64, variant: usize) -> Result<GaitParams> {
    let mut g = gait.clone();
    let v = variant as f64;
    for j in 0..4usize {
        let curve = &g.ps.curves[j];
        let extra = 5usize.saturating_sub(curve.degree());
        let mut coeffs = curve.elevate(extra).coeffs().to_vec();
        coeffs[2] += magnitude * (1.7 * v + 0.9 * j as f64).sin();
        coeffs[3] -= magnitude * (1.3 * v + 0.7 * j as f64).cos();
        g.ps.curves[j] = BezierCurve::new(coeffs)?;
    }
    g.provenance = format!("perturbed-{variant}");
    Ok(g)
}

/// Outcome of running one perturbed stance under two laws.
#[derive(Debug, Clone)]
pub struct LawComparison {
    pub variant: usize,
    pub robust: StanceTrial,
    pub baseline: StanceTrial,
}

/// Runs each perturbation variant under the relaxed robust law and the
/// joint-space baseline, both against the same nominal device task.
#[allow(clippy::too_many_arguments)]
pub fn compare_stance_laws(
    model: &RobotModel,
    nominal: &GaitParams,
    robust_cfg: &RobustQpConfig,
    pd_gains: (f64, f64),
    tube: TubeLookup,
    gains: &TrackingGains,
    control_period: f64,
    magnitude: f64,
    variants: &[usize],
    ode: &OdeOptions,
) -> Result<Vec<LawComparison>> {
    let task = ProsthesisTask::from_gait(model, nominal)?;
    let ospec = OutputSpec::for_model(model)?;
    let anatomy = model.anatomy()?;
    let mut out = Vec::new();
    for &variant in variants {
        let human = perturbed_gait(nominal, magnitude, variant)?;
        // The human walks its own wandering trajectory smoothly, so its
        // joints start on the perturbed curves; the device starts displaced
        // from the nominal posture it keeps tracking.  The device offsets
        // cancel in the phase variable and lift the swing sole slightly, so
        // the trial sweeps the phase span cleanly from its start point.
        let s0 = 0.15;
        let device_offset = [-0.02, 0.04];
        let device_rate_offset = [0.1, 0.0];
        let (mut joints, mut rates) =
            crate::gait::surface_joints(&ospec, anatomy, &human, Domain::Ps, s0)?;
        let (nom_joints, nom_rates) =
            crate::gait::surface_joints(&ospec, anatomy, nominal, Domain::Ps, s0)?;
        for i in 0..2 {
            joints[4 + i] = nom_joints[4 + i] + device_offset[i];
            rates[4 + i] = nom_rates[4 + i] + device_rate_offset[i];
        }
        let q = crate::dynamics::reconstruct::state_from_joints(
            model,
            Domain::Ps,
            [0.0, 0.0, 0.0],
            &joints,
        )?;
        let dq =
            crate::dynamics::reconstruct::velocity_from_joint_rates(model, Domain::Ps, &q, &rates)?;
        let x0 = HybridState { domain: Domain::Ps, t: 0.0, q, dq };
        let robust_law = StanceLaw::RelaxedClfQp { cfg: *robust_cfg, tube };
        let pd_law = StanceLaw::Pd { kp: pd_gains.0, kd: pd_gains.1 };
        let robust =
            stance_trial(model, &human, &task, &robust_law, gains, control_period, &x0, ode)?;
        // A baseline that falls mid-stance is a legitimate outcome of the
        // comparison, reported as unbounded tracking error.
        let baseline = match stance_trial(model, &human, &task, &pd_law, gains, control_period, &x0, ode)
        {
            Ok(trial) => trial,
            Err(Error::Simulation(_)) => StanceTrial {
                log: Vec::new(),
                samples: Vec::new(),
                tick_states: Vec::new(),
                reason: StopReason::TimeExpired,
                end: x0.clone(),
                knee_rms: f64::INFINITY,
                tau_end: 0.0,
            },
            Err(e) => return Err(e),
        };
        out.push(LawComparison { variant, robust, baseline });
    }
    Ok(out)
}

/// Total variation of a torque sequence, summed over both device motors.
pub fn torque_variation(log: &[ControlSample]) -> f64 {
    log.windows(2)
        .map(|w| (w[1].u_knee - w[0].u_knee).abs() + (w[1].u_ankle - w[0].u_ankle).abs())
        .sum()
}

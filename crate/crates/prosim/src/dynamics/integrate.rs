//! Adaptive Runge-Kutta integration of one walking domain with guard
//! detection, constraint stabilization, and fall monitoring.
//!
//! The flow is the index-reduced constrained dynamics plus a second-order
//! stabilization term `2 w hdot + w^2 (h - h0)` on the constraint
//! accelerations, which keeps the position-level drift of long runs bounded
//! without perturbing trajectories that start on the constraint surface.
//! Guard crossings are located by bisecting the bracketing step with fresh
//! sub-integrations until the crossing time is known to 1e-9 s.

use nalgebra::{DMatrix, DVector};

use super::constrained::{constrained_dynamics_generalized, DomainSpec};
use super::kinematics::Kin;
use super::model::{HybridState, RobotModel};
use crate::error::{Error, Result};

/// Integrator and event options.
#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// Domain time horizon.
    pub t_max: f64,
    /// Constraint stabilization bandwidth, rad/s.
    pub baumgarte_omega: f64,
    /// Swing clearance that arms the touchdown guard.
    pub guard_arm: f64,
    /// Fall threshold as a fraction of standing leg length; 0 disables.
    pub fall_fraction: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            max_step: 5e-3,
            t_max: 3.0,
            baumgarte_omega: 20.0,
            guard_arm: 1e-3,
            fall_fraction: 0.4,
        }
    }
}

/// Why a domain simulation stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Swing sole touched down; the end state sits on the guard to 1e-9 s.
    GuardHit,
    /// The time horizon ran out with the guard still clear.
    TimeExpired,
}

/// Result of one domain run.
#[derive(Debug, Clone)]
pub struct DomainOutcome {
    /// Accepted integration samples `(t, q, dq)`, starting at the initial state.
    pub samples: Vec<(f64, DVector<f64>, DVector<f64>)>,
    pub end: HybridState,
    pub reason: StopReason,
}

/// How motor torques are produced during integration.
pub enum ControlMode<'a> {
    /// Torque recomputed at every derivative evaluation.
    Continuous(&'a mut dyn FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>),
    /// Torque sampled at a fixed rate and held between samples.
    ZeroOrderHold {
        period: f64,
        tick: &'a mut dyn FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
    },
}

const STAGES: usize = 7;
const C: [f64; STAGES] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; STAGES] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; STAGES] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; STAGES] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand-Prince 5(4) attempt; returns the fifth-order update and the
/// tolerance-scaled error norm (accept when it is at most 1).
fn dp45_step<F>(
    rhs: &mut F,
    t: f64,
    x: &DVector<f64>,
    h: f64,
    opts: &OdeOptions,
) -> Result<(DVector<f64>, f64)>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let mut xs = x.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = A[s][j];
            if a != 0.0 {
                xs += kj * (h * a);
            }
        }
        k.push(rhs(t + C[s] * h, &xs)?);
    }
    let mut x5 = x.clone();
    let mut diff = DVector::zeros(n);
    for s in 0..STAGES {
        if B5[s] != 0.0 {
            x5 += &k[s] * (h * B5[s]);
        }
        let db = B5[s] - B4[s];
        if db != 0.0 {
            diff += &k[s] * (h * db);
        }
    }
    let mut err = 0.0;
    for i in 0..n {
        let scale = opts.atol + opts.rtol * x[i].abs().max(x5[i].abs());
        let e = diff[i] / scale;
        err += e * e;
    }
    Ok((x5, (err / n as f64).sqrt()))
}

fn step_growth(err: f64) -> f64 {
    if err <= 0.0 {
        5.0
    } else if err.is_finite() {
        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
    } else {
        0.2
    }
}

/// Adaptive integration to an exact end time, no event handling.
pub(crate) fn integrate_to<F>(
    rhs: &mut F,
    t0: f64,
    x0: &DVector<f64>,
    t_end: f64,
    opts: &OdeOptions,
) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut t = t0;
    let mut x = x0.clone();
    if t_end <= t0 {
        return Ok(x);
    }
    let mut h = opts.max_step.min(t_end - t0).max(1e-13);
    let mut evals = 0usize;
    while t < t_end - 1e-15 {
        h = h.min(t_end - t);
        let (x_new, err) = dp45_step(rhs, t, &x, h, opts)?;
        if err <= 1.0 {
            t += h;
            x = x_new;
        }
        h = (h * step_growth(err)).min(opts.max_step);
        if h < 1e-14 {
            return Err(Error::NoConvergence {
                context: "integration step size collapsed".into(),
                residual: err,
                iterations: evals,
            });
        }
        evals += 1;
        if evals > 2_000_000 {
            return Err(Error::NoConvergence {
                context: "integration step budget exhausted".into(),
                residual: err,
                iterations: evals,
            });
        }
    }
    Ok(x)
}

/// Torque source for one integration segment.
enum SegTorque<'b> {
    Hold(DVector<f64>),
    Ctrl(&'b mut dyn FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>),
}

/// Constrained accelerations with stabilization, packed as a state
/// derivative.  `tau` is the generalized force, already mapped through
/// whatever actuation and external-load paths apply.
pub(crate) fn state_derivative(
    model: &RobotModel,
    spec: &DomainSpec,
    targets: &DVector<f64>,
    omega: f64,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    tau: &DVector<f64>,
) -> Result<DVector<f64>> {
    let nq = model.nq;
    let stab = if spec.n_rows() > 0 && omega > 0.0 {
        let kin = Kin::new(model, q);
        let h = spec.values(&kin) - targets;
        let j = spec.jacobian(&kin);
        Some(&j * dq * (2.0 * omega) + h * (omega * omega))
    } else {
        None
    };
    let (ddq, _) = constrained_dynamics_generalized(model, spec, q, dq, tau, stab.as_ref())?;
    let mut dx = DVector::zeros(2 * nq);
    dx.rows_mut(0, nq).copy_from(dq);
    dx.rows_mut(nq, nq).copy_from(&ddq);
    Ok(dx)
}

/// Simulates one domain until guard crossing or the time horizon.
///
/// The initial constraint values are captured as stabilization targets, so
/// the caller should supply a state that already satisfies the domain's
/// holonomic constraints.
pub fn simulate_domain(
    model: &RobotModel,
    spec: &DomainSpec,
    x0: &HybridState,
    mut mode: ControlMode,
    opts: &OdeOptions,
) -> Result<DomainOutcome> {
    let nq = model.nq;
    let targets = {
        let kin = Kin::new(model, &x0.q);
        spec.values(&kin)
    };
    let b_mat = model.actuation_matrix();
    let omega = opts.baumgarte_omega;

    let guard_of = |x: &DVector<f64>| -> Option<f64> {
        spec.guard.map(|(body, local)| {
            let q = x.rows(0, nq).into_owned();
            Kin::new(model, &q).point_world(body, local).y
        })
    };

    let mut t = x0.t;
    let t_end = x0.t + opts.t_max;
    let mut x = DVector::zeros(2 * nq);
    x.rows_mut(0, nq).copy_from(&x0.q);
    x.rows_mut(nq, nq).copy_from(&x0.dq);

    let mut samples = vec![(t, x0.q.clone(), x0.dq.clone())];
    let mut armed = guard_of(&x).is_some_and(|g| g > opts.guard_arm);

    while t < t_end - 1e-12 {
        // One control segment: the whole horizon for continuous control, one
        // sample period with frozen torque for zero-order hold.
        let (seg_end, mut seg_torque) = match &mut mode {
            ControlMode::Continuous(ctrl) => (t_end, SegTorque::Ctrl(&mut **ctrl)),
            ControlMode::ZeroOrderHold { period, tick } => {
                let q = x.rows(0, nq).into_owned();
                let dq = x.rows(nq, nq).into_owned();
                let u = tick(t, &q, &dq)?;
                ((t + *period).min(t_end), SegTorque::Hold(u))
            }
        };

        let mut rhs = |tt: f64, xx: &DVector<f64>| -> Result<DVector<f64>> {
            let q = xx.rows(0, nq).into_owned();
            let dq = xx.rows(nq, nq).into_owned();
            let u = match &mut seg_torque {
                SegTorque::Hold(u) => u.clone(),
                SegTorque::Ctrl(ctrl) => ctrl(tt, &q, &dq)?,
            };
            state_derivative(model, spec, &targets, omega, &q, &dq, &(&b_mat * &u))
        };

        let mut h = opts.max_step.min(seg_end - t).max(1e-13);
        let mut guard_prev = guard_of(&x);
        while t < seg_end - 1e-12 {
            h = h.min(seg_end - t);
            let (x_new, err) = dp45_step(&mut rhs, t, &x, h, opts)?;
            // A non-finite error estimate means the step left the region
            // where the dynamics evaluate cleanly; treat it as a hard reject.
            if !(err <= 1.0) {
                h *= step_growth(err);
                if h < 1e-14 {
                    return Err(Error::NoConvergence {
                        context: "domain integration step size collapsed".into(),
                        residual: err,
                        iterations: samples.len(),
                    });
                }
                continue;
            }

            let t_new = t + h;
            let guard_new = guard_of(&x_new);
            if let (Some(g0), Some(g1)) = (guard_prev, guard_new) {
                if !armed && g1 > opts.guard_arm {
                    armed = true;
                }
                if armed && g0 > 0.0 && g1 <= 0.0 {
                    let (tc, xc) = bisect_guard(&mut rhs, t, &x, t_new, opts, &guard_of)?;
                    let qc = xc.rows(0, nq).into_owned();
                    let dqc = xc.rows(nq, nq).into_owned();
                    samples.push((tc, qc.clone(), dqc.clone()));
                    return Ok(DomainOutcome {
                        samples,
                        end: HybridState { domain: spec.domain, t: tc, q: qc, dq: dqc },
                        reason: StopReason::GuardHit,
                    });
                }
            }

            t = t_new;
            x = x_new;
            guard_prev = guard_new;
            h = (h * step_growth(err)).min(opts.max_step);
            samples.push((t, x.rows(0, nq).into_owned(), x.rows(nq, nq).into_owned()));

            if opts.fall_fraction > 0.0 {
                if let Some(a) = &model.anatomy {
                    if x[1] < opts.fall_fraction * a.leg_length {
                        return Err(Error::Simulation(format!(
                            "fall detected at t = {t:.4}: base height {:.3}",
                            x[1]
                        )));
                    }
                }
            }
            if samples.len() > 3_000_000 {
                return Err(Error::NoConvergence {
                    context: "domain sample budget exhausted".into(),
                    residual: 0.0,
                    iterations: samples.len(),
                });
            }
        }
    }

    Ok(DomainOutcome {
        end: HybridState {
            domain: spec.domain,
            t,
            q: x.rows(0, nq).into_owned(),
            dq: x.rows(nq, nq).into_owned(),
        },
        samples,
        reason: StopReason::TimeExpired,
    })
}

/// Bisection of a guard crossing bracketed by `[t_lo, t_hi]`, to 1e-9 s.
fn bisect_guard<F, G>(
    rhs: &mut F,
    t_lo: f64,
    x_lo: &DVector<f64>,
    t_hi: f64,
    opts: &OdeOptions,
    guard_of: &G,
) -> Result<(f64, DVector<f64>)>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: Fn(&DVector<f64>) -> Option<f64>,
{
    let mut lo = t_lo;
    let mut hi = t_hi;
    let mut x_at_lo = x_lo.clone();
    for _ in 0..80 {
        if hi - lo <= 1e-9 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let x_mid = integrate_to(rhs, lo, &x_at_lo, mid, opts)?;
        match guard_of(&x_mid) {
            Some(g) if g > 0.0 => {
                lo = mid;
                x_at_lo = x_mid;
            }
            Some(_) => hi = mid,
            None => {
                return Err(Error::Simulation(
                    "guard vanished during crossing bisection".into(),
                ))
            }
        }
    }
    let x_end = integrate_to(rhs, lo, &x_at_lo, hi, opts)?;
    Ok((hi, x_end))
}

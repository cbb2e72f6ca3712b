//! State-based gait outputs, mocap curve fitting, and the hybrid-invariant
//! gait optimization.
//!
//! A gait is parameterized per single-support domain by degree-5 Bezier
//! curves of a normalized phase.  The phase comes from the linearized hip
//! position ahead of the stance ankle,
//! `dp = (l_thigh + l_shin) * knee + l_shin * ankle`, which grows
//! monotonically through a step; one velocity-modulating output drives its
//! rate to a constant, and five position outputs (every actuated joint
//! except the stance ankle) track the curves.  On the output-zeroing surface
//! the stance ankle is then determined by the phase identity, which is what
//! ties curve coefficients, phase bounds, and boundary velocities together
//! in the optimizer's constraint set.

use nalgebra::{DMatrix, DVector, Vector2};
use std::path::Path;

use crate::bezier::BezierCurve;
use crate::dynamics::constrained::{impact_map, DomainSpec};
use crate::dynamics::kinematics::Kin;
use crate::dynamics::model::{Anatomy, Domain, HybridState, RobotModel};
use crate::dynamics::reconstruct::{joint_angles_of, state_from_joints, velocity_from_joint_rates};
use crate::error::{Error, Result};
use crate::mocap::StepSegment;

/// Canonical actuator order used for joint vectors throughout.
pub const JOINT_NAMES: [&str; 6] = ["l_hip", "l_knee", "l_ankle", "r_hip", "p_knee", "p_ankle"];

/// Index of a domain into per-domain tables: ps first.
pub fn domain_index(domain: Domain) -> usize {
    match domain {
        Domain::Ps => 0,
        Domain::Pns => 1,
    }
}

/// Which joints each domain's outputs use, in canonical indices.
#[derive(Debug, Clone)]
pub struct OutputSpec {
    /// The five position-tracked joints per domain (all but the stance ankle).
    pub tracked: [[usize; 5]; 2],
    /// Stance knee and stance ankle per domain.
    pub stance: [(usize, usize); 2],
    /// Swing-side knee per domain (the leg that must clear the ground).
    pub swing_knee: [usize; 2],
    /// Swing-side ankle per domain.
    pub swing_ankle: [usize; 2],
}

impl OutputSpec {
    pub fn for_model(model: &RobotModel) -> Result<OutputSpec> {
        let a = model.anatomy()?;
        let act = a.actuated_joints();
        let canon = |coord: usize| -> Result<usize> {
            act.iter().position(|&c| c == coord).ok_or_else(|| {
                Error::InvalidData(format!("coordinate {coord} is not an actuated joint"))
            })
        };
        let mut tracked = [[0usize; 5]; 2];
        let mut stance = [(0usize, 0usize); 2];
        for d in [Domain::Ps, Domain::Pns] {
            let i = domain_index(d);
            for (j, &coord) in a.output_joints(d).iter().enumerate() {
                tracked[i][j] = canon(coord)?;
            }
            let (k, an) = a.stance_joints(d);
            stance[i] = (canon(k)?, canon(an)?);
        }
        // The swing knee and ankle are the other side's stance pair.
        let swing_knee = [stance[1].0, stance[0].0];
        let swing_ankle = [stance[1].1, stance[0].1];
        Ok(OutputSpec { tracked, stance, swing_knee, swing_ankle })
    }

    pub fn tracked_of(&self, domain: Domain) -> [usize; 5] {
        self.tracked[domain_index(domain)]
    }

    pub fn stance_of(&self, domain: Domain) -> (usize, usize) {
        self.stance[domain_index(domain)]
    }
}

/// Linearized hip position ahead of the stance ankle, from canonical joints.
pub fn hip_progression(spec: &OutputSpec, anatomy: &Anatomy, domain: Domain, joints: &[f64]) -> f64 {
    let (lt, ls) = anatomy.stance_lengths(domain);
    let (k, a) = spec.stance_of(domain);
    (lt + ls) * joints[k] + ls * joints[a]
}

/// Desired-motion parameters of one single-support domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    /// Desired joint curves in canonical order.  The stance-ankle entry is
    /// kept consistent with the phase identity for optimized gaits, and fit
    /// directly from data for mocap gaits, so playback can use all six.
    pub curves: Vec<BezierCurve>,
    /// Fit-cost offsets for the five tracked joints, radians.
    pub offsets: [f64; 5],
    /// Hip-progression value entering the domain, meters.
    pub phase_min: f64,
    /// Hip-progression value leaving the domain, meters.
    pub phase_max: f64,
    /// Hip-progression rate target, m/s.
    pub v_hip: f64,
}

impl DomainParams {
    pub fn delta(&self) -> f64 {
        self.phase_max - self.phase_min
    }

    /// Normalized phase for a progression value, clamped into `[0, 1]`.
    pub fn tau(&self, progression: f64) -> f64 {
        ((progression - self.phase_min) / self.delta()).clamp(0.0, 1.0)
    }

    /// Phase rate on the output-zeroing surface.
    pub fn tau_rate(&self) -> f64 {
        self.v_hip / self.delta()
    }

    pub fn validate(&self) -> Result<()> {
        if self.curves.len() != 6 {
            return Err(Error::InvalidData(format!(
                "expected six joint curves, got {}",
                self.curves.len()
            )));
        }
        if !(self.phase_max > self.phase_min) {
            return Err(Error::InvalidData(format!(
                "phase bounds not increasing: [{}, {}]",
                self.phase_min, self.phase_max
            )));
        }
        if !(self.v_hip > 0.0) {
            return Err(Error::InvalidData(format!(
                "hip progression rate must be positive, got {}",
                self.v_hip
            )));
        }
        Ok(())
    }
}

/// A full two-domain gait.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitParams {
    pub ps: DomainParams,
    pub pns: DomainParams,
    /// How the parameters were produced: "mocap-fit", "optimized", or
    /// "reference".
    pub provenance: String,
}

impl GaitParams {
    pub fn domain(&self, d: Domain) -> &DomainParams {
        match d {
            Domain::Ps => &self.ps,
            Domain::Pns => &self.pns,
        }
    }

    pub fn domain_mut(&mut self, d: Domain) -> &mut DomainParams {
        match d {
            Domain::Ps => &mut self.ps,
            Domain::Pns => &mut self.pns,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ps.validate()?;
        self.pns.validate()
    }
}

/// Rewrites the stance-ankle curve from the phase identity: with the stance
/// knee curve and the phase bounds fixed, the ankle curve is the unique one
/// keeping the hip progression affine in the phase.
pub fn sync_stance_ankle(
    spec: &OutputSpec,
    anatomy: &Anatomy,
    domain: Domain,
    params: &mut DomainParams,
) -> Result<()> {
    let (lt, ls) = anatomy.stance_lengths(domain);
    let (ck, ca) = spec.stance_of(domain);
    let knee = &params.curves[ck];
    let m = knee.degree().max(1);
    let knee = knee.elevate(m - knee.degree());
    let delta = params.delta();
    let coeffs = knee
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let p = params.phase_min + delta * i as f64 / m as f64;
            (p - (lt + ls) * k) / ls
        })
        .collect();
    params.curves[ca] = BezierCurve::new(coeffs)?;
    Ok(())
}

/// Output values at a full-model state.
#[derive(Debug, Clone)]
pub struct GaitOutputs {
    /// Velocity-modulating output: hip progression rate minus its target.
    pub y1: f64,
    /// Tracked-joint position errors, in the domain's tracked order.
    pub y2: DVector<f64>,
    /// Their rates.
    pub dy2: DVector<f64>,
    pub tau: f64,
    /// Realized phase rate (zero while the phase is clamped).
    pub tau_rate: f64,
    pub progression: f64,
    pub progression_rate: f64,
}

/// Evaluates the gait outputs on the full model.
pub fn outputs(
    model: &RobotModel,
    spec: &OutputSpec,
    gait: &GaitParams,
    domain: Domain,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> Result<GaitOutputs> {
    let a = model.anatomy()?;
    let params = gait.domain(domain);
    let joints = joint_angles_of(model, q)?;
    let act = a.actuated_joints();
    let rates = DVector::from_iterator(6, act.iter().map(|&c| dq[c]));

    let p = hip_progression(spec, a, domain, joints.as_slice());
    let dp = hip_progression(spec, a, domain, rates.as_slice());
    let raw = (p - params.phase_min) / params.delta();
    let tau = raw.clamp(0.0, 1.0);
    let tau_rate = if (0.0..=1.0).contains(&raw) { dp / params.delta() } else { 0.0 };

    let tracked = spec.tracked_of(domain);
    let mut y2 = DVector::zeros(5);
    let mut dy2 = DVector::zeros(5);
    for (j, &k) in tracked.iter().enumerate() {
        let curve = &params.curves[k];
        y2[j] = joints[k] - curve.eval(tau)?;
        dy2[j] = rates[k] - curve.derivative().eval(tau)? * tau_rate;
    }
    Ok(GaitOutputs {
        y1: dp - params.v_hip,
        y2,
        dy2,
        tau,
        tau_rate,
        progression: p,
        progression_rate: dp,
    })
}

/// Canonical joint values on the output-zeroing surface at phase `s`.
pub fn surface_joints(
    spec: &OutputSpec,
    anatomy: &Anatomy,
    gait: &GaitParams,
    domain: Domain,
    s: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let params = gait.domain(domain);
    let (lt, ls) = anatomy.stance_lengths(domain);
    let (ck, ca) = spec.stance_of(domain);
    let tau_rate = params.tau_rate();

    let mut joints = DVector::zeros(6);
    let mut rates = DVector::zeros(6);
    for &k in &spec.tracked_of(domain) {
        joints[k] = params.curves[k].eval(s)?;
        rates[k] = params.curves[k].derivative().eval(s)? * tau_rate;
    }
    let p = params.phase_min + s * params.delta();
    joints[ca] = (p - (lt + ls) * joints[ck]) / ls;
    rates[ca] = (params.v_hip - (lt + ls) * rates[ck]) / ls;
    Ok((joints, rates))
}

/// Full-model state on the output-zeroing surface at phase `s`, with the
/// stance sole placed at `sole` (x, z, angle).
pub fn surface_state(
    model: &RobotModel,
    spec: &OutputSpec,
    gait: &GaitParams,
    domain: Domain,
    sole: [f64; 3],
    s: f64,
) -> Result<HybridState> {
    let a = model.anatomy()?;
    let (joints, rates) = surface_joints(spec, a, gait, domain, s)?;
    let q = state_from_joints(model, domain, sole, &joints)?;
    let dq = velocity_from_joint_rates(model, domain, &q, &rates)?;
    Ok(HybridState { domain, t: 0.0, q, dq })
}

/// Post-impact invariance error of the position outputs across a guard.
///
/// Applies the plastic impact for the successor domain at the given
/// pre-impact state and evaluates the successor's position outputs and their
/// rates there; both vanish exactly on a hybrid-invariant gait.
pub fn phzd_residual(
    model: &RobotModel,
    spec: &OutputSpec,
    gait: &GaitParams,
    pre: &HybridState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let next = pre.domain.next();
    let post_spec = DomainSpec::for_domain(model, next)?;
    let (dq_plus, _) = impact_map(model, &post_spec, &pre.q, &pre.dq)?;
    let out = outputs(model, spec, gait, next, &pre.q, &dq_plus)?;
    Ok((out.y2, out.dy2))
}

// ---------------------------------------------------------------------------
// Mocap fitting
// ---------------------------------------------------------------------------

/// Fits per-domain joint curves, phase bounds, and the hip-rate target to
/// segmented steps.  All six joints are fit directly from the data; the
/// hip-rate target is the mean of the per-interval progression rates, and
/// the phase bounds average the per-segment extremes.
pub fn fit_mocap_params(
    model: &RobotModel,
    segments: &[StepSegment],
    degree: usize,
) -> Result<GaitParams> {
    let a = model.anatomy()?;
    let spec = OutputSpec::for_model(model)?;
    let mut per_domain = Vec::with_capacity(2);
    for d in [Domain::Ps, Domain::Pns] {
        let segs: Vec<&StepSegment> = segments.iter().filter(|s| s.domain == d).collect();
        if segs.is_empty() {
            return Err(Error::NoSteps(format!("no {} segments to fit", d.label())));
        }

        let mut curves = Vec::with_capacity(6);
        for k in 0..6 {
            let mut tau = Vec::new();
            let mut val = Vec::new();
            for s in &segs {
                tau.extend_from_slice(&s.tau);
                val.extend(s.joints.iter().map(|j| j[k]));
            }
            curves.push(BezierCurve::fit(&tau, &val, degree)?);
        }

        // Hip-rate samples: per-interval progression differences.
        let mut mid = Vec::new();
        let mut rate = Vec::new();
        for s in &segs {
            for i in 1..s.t.len() {
                let dt = s.t[i] - s.t[i - 1];
                if dt <= 0.0 {
                    continue;
                }
                let p1 = hip_progression(&spec, a, d, &s.joints[i]);
                let p0 = hip_progression(&spec, a, d, &s.joints[i - 1]);
                mid.push(0.5 * (s.tau[i] + s.tau[i - 1]));
                rate.push((p1 - p0) / dt);
            }
        }
        let v_hip = BezierCurve::fit(&mid, &rate, 0)?.coeffs()[0];

        let n = segs.len() as f64;
        let phase_min = segs.iter().map(|s| s.phase_min).sum::<f64>() / n;
        let phase_max = segs.iter().map(|s| s.phase_max).sum::<f64>() / n;

        per_domain.push(DomainParams {
            curves,
            offsets: [0.0; 5],
            phase_min,
            phase_max,
            v_hip,
        });
    }
    let pns = per_domain.pop().unwrap();
    let ps = per_domain.pop().unwrap();
    let gait = GaitParams { ps, pns, provenance: "mocap-fit".into() };
    gait.validate()?;
    Ok(gait)
}

/// Fit-closeness cost of a candidate gait against mocap curves:
/// per tracked joint the exact integral of the squared curve difference
/// shifted by the candidate's offset, plus a per-domain step-length term.
pub fn fit_cost(
    gait: &GaitParams,
    mocap: &GaitParams,
    weights: &[[f64; 5]; 2],
    w_delta: f64,
    spec: &OutputSpec,
) -> f64 {
    let mut total = 0.0;
    for d in [Domain::Ps, Domain::Pns] {
        let i = domain_index(d);
        let cand = gait.domain(d);
        let mc = mocap.domain(d);
        for (j, &k) in spec.tracked_of(d).iter().enumerate() {
            total += weights[i][j]
                * cand.curves[k].squared_diff_integral(&mc.curves[k], cand.offsets[j]);
        }
        let dd = mc.delta() - cand.delta();
        total += w_delta * dd * dd;
    }
    total
}

// ---------------------------------------------------------------------------
// Reference gait
// ---------------------------------------------------------------------------

/// Step length of the built-in reference gait, meters.
const REF_STEP: f64 = 0.5;
/// Hip height at the domain boundaries, meters.
const REF_HIP_Z: f64 = 0.82;
/// Hip advance past the stance sole at touchdown, as a fraction of the step.
const REF_HIP_FRAC: f64 = 0.65;
/// Hip-progression rate target, m/s.
const REF_V_HIP: f64 = 0.6;
/// Swing-sole vertical velocity at touchdown, m/s.
const REF_LAND_VZ: f64 = -0.15;
/// Required mid-swing sole clearance, meters.
const REF_CLEARANCE: f64 = 0.015;

/// Planar two-link inverse kinematics with the knee ahead of the hip-ankle
/// line: returns (thigh, shin) body angles for a hip-to-ankle offset `d`.
fn ik2(d: Vector2<f64>, l1: f64, l2: f64) -> Result<(f64, f64)> {
    let r = d.norm();
    if r >= l1 + l2 - 1e-9 || r <= (l1 - l2).abs() + 1e-9 {
        return Err(Error::Geometry(format!(
            "leg target at distance {r:.3} unreachable with segments {l1:.3}/{l2:.3}"
        )));
    }
    let phi_line = d.x.atan2(-d.y);
    let b1 = ((l1 * l1 + r * r - l2 * l2) / (2.0 * l1 * r)).clamp(-1.0, 1.0).acos();
    let b2 = ((l2 * l2 + r * r - l1 * l1) / (2.0 * l2 * r)).clamp(-1.0, 1.0).acos();
    Ok((phi_line + b1, phi_line - b2))
}

/// Canonical joints at the end of a domain: stance sole at the origin, the
/// swing sole flat on the ground one step ahead, torso upright.
fn boundary_joints(anatomy: &Anatomy, ending: Domain) -> Result<[f64; 6]> {
    let hip = Vector2::new(REF_HIP_FRAC * REF_STEP, REF_HIP_Z);
    let st_ankle = Vector2::new(0.0, anatomy.ankle_drop);
    let sw_ankle = Vector2::new(REF_STEP, anatomy.ankle_drop);
    let (lt_st, ls_st) = anatomy.stance_lengths(ending);
    let (lt_sw, ls_sw) = anatomy.stance_lengths(ending.next());
    let (st_th, st_sh) = ik2(st_ankle - hip, lt_st, ls_st)?;
    let (sw_th, sw_sh) = ik2(sw_ankle - hip, lt_sw, ls_sw)?;
    // Torso is vertical, so hip angles equal thigh body angles; flat soles
    // make each ankle the negated shin angle.
    let leg = |th: f64, sh: f64| [th, sh - th, -sh];
    let (stance, swing) = (leg(st_th, st_sh), leg(sw_th, sw_sh));
    Ok(match ending {
        Domain::Ps => [swing[0], swing[1], swing[2], stance[0], stance[1], stance[2]],
        Domain::Pns => [stance[0], stance[1], stance[2], swing[0], swing[1], swing[2]],
    })
}

/// Boundary velocities of the edge that ends domain `v`, solved from six
/// linear conditions on the canonical joint rates: the hip-progression rate
/// of `v` hits the target, the post-impact progression rate of the next
/// domain hits it too, the landing sole arrives flat with a fixed descent
/// rate and no slip, and the torso does not rotate.
struct EdgeRates {
    /// Pre-impact canonical joint rates, in the chart of the ending domain.
    pre: DVector<f64>,
    /// Post-impact canonical joint rates, in the successor's chart.
    post: DVector<f64>,
}

fn solve_edge_rates(
    model: &RobotModel,
    spec: &OutputSpec,
    v: Domain,
    q_minus: &DVector<f64>,
) -> Result<EdgeRates> {
    let a = model.anatomy()?;
    let w = v.next();
    let post_spec = DomainSpec::for_domain(model, w)?;
    let act = a.actuated_joints();

    // Joint-rate basis of the constrained velocity space, and its image
    // under the touchdown impact.
    let mut basis = DMatrix::zeros(model.nq, 6);
    let mut mapped = DMatrix::zeros(model.nq, 6);
    for k in 0..6 {
        let mut unit = DVector::zeros(6);
        unit[k] = 1.0;
        let col = velocity_from_joint_rates(model, v, q_minus, &unit)?;
        let (plus, _) = impact_map(model, &post_spec, q_minus, &col)?;
        basis.set_column(k, &col);
        mapped.set_column(k, &plus);
    }

    let progression_row = |d: Domain| -> DVector<f64> {
        let (lt, ls) = a.stance_lengths(d);
        let (ck, ca) = spec.stance_of(d);
        let mut r = DVector::zeros(6);
        r[ck] = lt + ls;
        r[ca] = ls;
        r
    };

    let kin = Kin::new(model, q_minus);
    let swing_foot = a.swing_foot(v);
    let sole = [0.0, -a.ankle_drop];
    let j_sole = kin.point_jacobian(swing_foot, sole);
    let j_ang = kin.body_angle_jac(swing_foot);

    let mut m = DMatrix::zeros(6, 6);
    m.row_mut(0).copy_from(&progression_row(v).transpose());
    for k in 0..6 {
        let plus = mapped.column(k);
        let rates_plus = DVector::from_iterator(6, act.iter().map(|&c| plus[c]));
        m[(1, k)] = progression_row(w).dot(&rates_plus);
    }
    m.row_mut(2).copy_from(&(j_sole.row(0) * &basis));
    m.row_mut(3).copy_from(&(j_sole.row(1) * &basis));
    m.row_mut(4).copy_from(&(j_ang.transpose() * &basis));
    m.row_mut(5).copy_from(&basis.row(2));

    let v_hip = REF_V_HIP;
    let rhs = DVector::from_vec(vec![v_hip, v_hip, 0.0, REF_LAND_VZ, 0.0, 0.0]);
    let pre = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Geometry("boundary velocity conditions are singular".into()))?;

    let dq_minus = &basis * &pre;
    let (dq_plus, _) = impact_map(model, &post_spec, q_minus, &dq_minus)?;
    let post = DVector::from_iterator(6, act.iter().map(|&c| dq_plus[c]));
    Ok(EdgeRates { pre, post })
}

/// Lowest point of the swing sole over the mid-swing phase range.
pub(crate) fn swing_clearance(
    model: &RobotModel,
    spec: &OutputSpec,
    gait: &GaitParams,
    domain: Domain,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<f64> {
    let a = model.anatomy()?;
    let swing_foot = a.swing_foot(domain);
    let corners = [[-0.05, -a.ankle_drop], [0.0, -a.ankle_drop], [0.13, -a.ankle_drop]];
    let mut min_z = f64::INFINITY;
    for i in 0..n {
        let s = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let (joints, _) = surface_joints(spec, a, gait, domain, s)?;
        let q = state_from_joints(model, domain, [0.0, 0.0, 0.0], &joints)?;
        let kin = Kin::new(model, &q);
        for c in corners {
            min_z = min_z.min(kin.point_world(swing_foot, c).y);
        }
    }
    Ok(min_z)
}

/// Builds a synthetic gait that is hybrid-invariant by construction: domain
/// boundary postures come from inverse kinematics of a chosen stride,
/// boundary velocities from the six-condition solve above, and each curve's
/// endpoint pair and adjacent coefficient are pinned to those values, making
/// every position output and its rate continuous through both impacts.  Mid
/// coefficients interpolate, with the swing knee flexed until the sole
/// clears the ground.
pub fn reference_gait(model: &RobotModel) -> Result<GaitParams> {
    let a = model.anatomy()?;
    let spec = OutputSpec::for_model(model)?;

    let end_ps = boundary_joints(a, Domain::Ps)?;
    let end_pns = boundary_joints(a, Domain::Pns)?;
    let entry = |d: Domain| match d {
        Domain::Ps => &end_pns,
        Domain::Pns => &end_ps,
    };
    let exit = |d: Domain| match d {
        Domain::Ps => &end_ps,
        Domain::Pns => &end_pns,
    };

    let q_end_ps = state_from_joints(model, Domain::Ps, [0.0, 0.0, 0.0], &DVector::from_row_slice(&end_ps))?;
    let q_end_pns =
        state_from_joints(model, Domain::Pns, [0.0, 0.0, 0.0], &DVector::from_row_slice(&end_pns))?;
    let edge_ps = solve_edge_rates(model, &spec, Domain::Ps, &q_end_ps)?;
    let edge_pns = solve_edge_rates(model, &spec, Domain::Pns, &q_end_pns)?;
    // Rates entering a domain come from the other domain's edge.
    let entry_rates = |d: Domain| match d {
        Domain::Ps => &edge_pns.post,
        Domain::Pns => &edge_ps.post,
    };
    let exit_rates = |d: Domain| match d {
        Domain::Ps => &edge_ps.pre,
        Domain::Pns => &edge_pns.pre,
    };

    let mut per_domain = Vec::with_capacity(2);
    for d in [Domain::Ps, Domain::Pns] {
        let p_min = hip_progression(&spec, a, d, entry(d));
        let p_max = hip_progression(&spec, a, d, exit(d));
        let delta = p_max - p_min;
        if delta <= 0.0 {
            return Err(Error::Geometry(format!(
                "reference stride does not progress in {}: [{p_min:.3}, {p_max:.3}]",
                d.label()
            )));
        }
        let tau_rate = REF_V_HIP / delta;

        let mut curves = vec![BezierCurve::constant(0.0); 6];
        for k in 0..6 {
            let a0 = entry(d)[k];
            let a5 = exit(d)[k];
            let a1 = a0 + entry_rates(d)[k] / (5.0 * tau_rate);
            let a4 = a5 - exit_rates(d)[k] / (5.0 * tau_rate);
            let a2 = a1 + (a4 - a1) / 3.0;
            let a3 = a1 + 2.0 * (a4 - a1) / 3.0;
            curves[k] = BezierCurve::new(vec![a0, a1, a2, a3, a4, a5])?;
        }

        per_domain.push(DomainParams {
            curves,
            offsets: [0.0; 5],
            phase_min: p_min,
            phase_max: p_max,
            v_hip: REF_V_HIP,
        });
    }
    let pns = per_domain.pop().unwrap();
    let ps = per_domain.pop().unwrap();
    let mut gait = GaitParams { ps, pns, provenance: "reference".into() };

    // Flex the swing knee until the sole clears the ground mid-swing,
    // counter-rotating the swing ankle so the foot pitch profile (and with
    // it the toe and heel height) is unchanged.  Only interior coefficients
    // move, so the boundary conditions above are untouched.
    for d in [Domain::Ps, Domain::Pns] {
        let i = domain_index(d);
        let (knee, ankle) = (spec.swing_knee[i], spec.swing_ankle[i]);
        let mut bump = 0.0;
        loop {
            let clear = swing_clearance(model, &spec, &gait, d, 0.1, 0.9, 41)?;
            if clear >= REF_CLEARANCE {
                break;
            }
            bump -= 0.05;
            if bump < -1.5 {
                return Err(Error::Geometry(
                    "could not achieve swing clearance with knee flexion alone".into(),
                ));
            }
            let params = gait.domain_mut(d);
            for (k, sign) in [(knee, 1.0), (ankle, -1.0)] {
                let mut c = params.curves[k].coeffs().to_vec();
                c[2] += sign * -0.05;
                c[3] += sign * -0.05 * 0.7;
                params.curves[k] = BezierCurve::new(c)?;
            }
        }
        sync_stance_ankle(&spec, a, d, gait.domain_mut(d))?;
    }
    gait.validate()?;
    Ok(gait)
}

// ---------------------------------------------------------------------------
// Gait optimization
// ---------------------------------------------------------------------------

/// Knobs of the gait optimization.
#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    /// Fit weights for the five tracked joints, per domain.
    pub weights: [[f64; 5]; 2],
    /// Weight of the step-length term.
    pub w_delta: f64,
    /// Maximum outer iterations.
    pub max_iters: usize,
    /// Accepted boundary-invariance residual.
    pub tol: f64,
    /// Required mid-swing sole clearance, meters.
    pub clearance: f64,
    /// Minimum hip-progression range, meters.
    pub min_delta: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            weights: [[1.0; 5]; 2],
            w_delta: 10.0,
            max_iters: 60,
            tol: 1e-6,
            clearance: 0.008,
            min_delta: 0.15,
        }
    }
}

/// Decision-vector layout: per domain 30 curve coefficients, 5 offsets, and
/// 2 phase bounds; then 6 boundary joint rates per edge.
const PER_DOMAIN: usize = 37;
const N_VARS: usize = 2 * PER_DOMAIN + 12;
const N_EQ: usize = 36;

struct OptWorkspace<'a> {
    model: &'a RobotModel,
    anatomy: &'a Anatomy,
    spec: OutputSpec,
    post_specs: [DomainSpec; 2],
    mocap: &'a GaitParams,
    opts: &'a OptimizeOptions,
    /// Clearance probe phases.
    probes: [f64; 3],
}

impl OptWorkspace<'_> {
    fn unpack(&self, z: &DVector<f64>) -> Result<(GaitParams, [DVector<f64>; 2])> {
        let mut gait = self.mocap.clone();
        for d in [Domain::Ps, Domain::Pns] {
            let i = domain_index(d);
            let base = i * PER_DOMAIN;
            let tracked = self.spec.tracked_of(d);
            let params = gait.domain_mut(d);
            for (j, &k) in tracked.iter().enumerate() {
                let c: Vec<f64> = (0..6).map(|t| z[base + 6 * j + t]).collect();
                params.curves[k] = BezierCurve::new(c)?;
            }
            for j in 0..5 {
                params.offsets[j] = z[base + 30 + j];
            }
            params.phase_min = z[base + 35];
            params.phase_max = z[base + 36];
        }
        let r0 = DVector::from_iterator(6, (0..6).map(|k| z[2 * PER_DOMAIN + k]));
        let r1 = DVector::from_iterator(6, (0..6).map(|k| z[2 * PER_DOMAIN + 6 + k]));
        Ok((gait, [r0, r1]))
    }

    fn pack(&self, gait: &GaitParams, rates: &[DVector<f64>; 2]) -> Result<DVector<f64>> {
        let mut z = DVector::zeros(N_VARS);
        for d in [Domain::Ps, Domain::Pns] {
            let i = domain_index(d);
            let base = i * PER_DOMAIN;
            let params = gait.domain(d);
            for (j, &k) in self.spec.tracked_of(d).iter().enumerate() {
                let c = &params.curves[k];
                let c = c.elevate(5usize.saturating_sub(c.degree()));
                if c.degree() != 5 {
                    return Err(Error::InvalidData(format!(
                        "tracked curves must have degree at most 5, got {}",
                        c.degree()
                    )));
                }
                for t in 0..6 {
                    z[base + 6 * j + t] = c.coeffs()[t];
                }
            }
            for j in 0..5 {
                z[base + 30 + j] = params.offsets[j];
            }
            z[base + 35] = params.phase_min;
            z[base + 36] = params.phase_max;
        }
        for e in 0..2 {
            for k in 0..6 {
                z[2 * PER_DOMAIN + 6 * e + k] = rates[e][k];
            }
        }
        Ok(z)
    }

    /// Exit joints of a domain: tracked curve endpoints plus the identity
    /// value of the stance ankle at the top of the phase range.
    fn exit_joints(&self, gait: &GaitParams, v: Domain) -> DVector<f64> {
        let params = gait.domain(v);
        let (lt, ls) = self.anatomy.stance_lengths(v);
        let (ck, ca) = self.spec.stance_of(v);
        let mut joints = DVector::zeros(6);
        for &k in &self.spec.tracked_of(v) {
            joints[k] = *params.curves[k].coeffs().last().unwrap();
        }
        joints[ca] = (params.phase_max - (lt + ls) * joints[ck]) / ls;
        joints
    }

    /// The 18 boundary conditions of the edge leaving domain `v`.
    fn edge_constraints(
        &self,
        gait: &GaitParams,
        rates: &DVector<f64>,
        v: Domain,
        out: &mut [f64],
    ) -> Result<()> {
        let a = self.anatomy;
        let w = v.next();
        let pv = gait.domain(v);
        let pw = gait.domain(w);
        let tau_rate_v = pv.tau_rate();

        let exit = self.exit_joints(gait, v);
        let q_minus = state_from_joints(self.model, v, [0.0, 0.0, 0.0], &exit)?;

        // Pre-impact surface conditions: tracked rates follow the curves,
        // and the hip-progression rate hits its target.
        for (j, &k) in self.spec.tracked_of(v).iter().enumerate() {
            let c = pv.curves[k].coeffs();
            out[j] = rates[k] - 5.0 * (c[5] - c[4]) * tau_rate_v;
        }
        out[5] = hip_progression(&self.spec, a, v, rates.as_slice()) - pv.v_hip;

        // Touchdown height.
        let kin = Kin::new(self.model, &q_minus);
        out[6] = kin.point_world(a.swing_foot(v), [0.0, -a.ankle_drop]).y;

        // Post-impact conditions in the successor domain.
        let dq_minus = velocity_from_joint_rates(self.model, v, &q_minus, rates)?;
        let (dq_plus, _) =
            impact_map(self.model, &self.post_specs[domain_index(w)], &q_minus, &dq_minus)?;
        let act = a.actuated_joints();
        let rates_plus = DVector::from_iterator(6, act.iter().map(|&c| dq_plus[c]));

        out[7] = hip_progression(&self.spec, a, w, exit.as_slice()) - pw.phase_min;
        let tau_rate_plus =
            hip_progression(&self.spec, a, w, rates_plus.as_slice()) / pw.delta();
        for (j, &k) in self.spec.tracked_of(w).iter().enumerate() {
            let c = pw.curves[k].coeffs();
            out[8 + j] = exit[k] - c[0];
            out[13 + j] = rates_plus[k] - 5.0 * (c[1] - c[0]) * tau_rate_plus;
        }
        Ok(())
    }

    fn constraints(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (gait, rates) = self.unpack(z)?;
        gait.validate()?;
        let mut c_eq = DVector::zeros(N_EQ);
        for (e, v) in [Domain::Ps, Domain::Pns].into_iter().enumerate() {
            let mut row = vec![0.0; 18];
            self.edge_constraints(&gait, &rates[e], v, &mut row)?;
            for (i, val) in row.into_iter().enumerate() {
                c_eq[18 * e + i] = val;
            }
        }

        // Inequalities g <= 0: progression range floor and sole clearance.
        let mut c_in = DVector::zeros(2 + 2 * self.probes.len());
        let mut at = 0;
        for d in [Domain::Ps, Domain::Pns] {
            c_in[at] = self.opts.min_delta - gait.domain(d).delta();
            at += 1;
        }
        for d in [Domain::Ps, Domain::Pns] {
            let a = self.anatomy;
            let swing_foot = a.swing_foot(d);
            for &s in &self.probes {
                let (joints, _) = surface_joints(&self.spec, a, &gait, d, s)?;
                let q = state_from_joints(self.model, d, [0.0, 0.0, 0.0], &joints)?;
                let kin = Kin::new(self.model, &q);
                let z_sole = kin.point_world(swing_foot, [0.0, -a.ankle_drop]).y;
                c_in[at] = self.opts.clearance - z_sole;
                at += 1;
            }
        }
        Ok((c_eq, c_in))
    }

    /// Exact objective, gradient, and (constant) Hessian of the fit cost.
    fn objective(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (gait, _) = self.unpack(z)?;
        let val = fit_cost(&gait, self.mocap, &self.opts.weights, self.opts.w_delta, &self.spec);

        let gram = bernstein_gram(5);
        let ones = DVector::from_element(6, 1.0);
        let mut grad = DVector::zeros(N_VARS);
        for d in [Domain::Ps, Domain::Pns] {
            let i = domain_index(d);
            let base = i * PER_DOMAIN;
            let cand = gait.domain(d);
            let mc = self.mocap.domain(d);
            for (j, &k) in self.spec.tracked_of(d).iter().enumerate() {
                let w = self.opts.weights[i][j];
                let mc_c = mc.curves[k].elevate(5 - mc.curves[k].degree());
                let diff = DVector::from_iterator(
                    6,
                    cand.curves[k]
                        .coeffs()
                        .iter()
                        .zip(mc_c.coeffs())
                        .map(|(a, b)| a - b - cand.offsets[j]),
                );
                let gd = &gram * &diff;
                for t in 0..6 {
                    grad[base + 6 * j + t] = 2.0 * w * gd[t];
                }
                grad[base + 30 + j] = -2.0 * w * ones.dot(&gd);
            }
            let dd = self.mocap.domain(d).delta() - cand.delta();
            grad[base + 35] = 2.0 * self.opts.w_delta * dd;
            grad[base + 36] = -2.0 * self.opts.w_delta * dd;
        }
        Ok((val, grad))
    }

    fn hessian(&self) -> DMatrix<f64> {
        let gram = bernstein_gram(5);
        let ones = DVector::from_element(6, 1.0);
        let g1 = &gram * &ones;
        let mut h = DMatrix::zeros(N_VARS, N_VARS);
        for d in [Domain::Ps, Domain::Pns] {
            let i = domain_index(d);
            let base = i * PER_DOMAIN;
            for j in 0..5 {
                let w = self.opts.weights[i][j];
                for s in 0..6 {
                    for t in 0..6 {
                        h[(base + 6 * j + s, base + 6 * j + t)] = 2.0 * w * gram[(s, t)];
                    }
                    h[(base + 6 * j + s, base + 30 + j)] = -2.0 * w * g1[s];
                    h[(base + 30 + j, base + 6 * j + s)] = -2.0 * w * g1[s];
                }
                h[(base + 30 + j, base + 30 + j)] = 2.0 * w * ones.dot(&g1);
            }
            let wd = 2.0 * self.opts.w_delta;
            h[(base + 35, base + 35)] = wd;
            h[(base + 36, base + 36)] = wd;
            h[(base + 35, base + 36)] = -wd;
            h[(base + 36, base + 35)] = -wd;
        }
        h
    }
}

/// Gram matrix of the Bernstein basis of the given degree.
fn bernstein_gram(degree: usize) -> DMatrix<f64> {
    let n = degree + 1;
    let basis: Vec<BezierCurve> = (0..n)
        .map(|i| {
            let mut c = vec![0.0; n];
            c[i] = 1.0;
            BezierCurve::new(c).unwrap()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| basis[i].product(&basis[j]).integral())
}

/// Boundary joint rates consistent with a gait's own curves: tracked rates
/// from the curve slopes at the top of the phase, the stance ankle from the
/// hip-rate target.
fn seed_edge_rates(spec: &OutputSpec, anatomy: &Anatomy, gait: &GaitParams, v: Domain) -> DVector<f64> {
    let params = gait.domain(v);
    let (lt, ls) = anatomy.stance_lengths(v);
    let (ck, ca) = spec.stance_of(v);
    let tau_rate = params.tau_rate();
    let mut rates = DVector::zeros(6);
    for &k in &spec.tracked_of(v) {
        let c = params.curves[k].elevate(5 - params.curves[k].degree());
        let cc = c.coeffs();
        rates[k] = 5.0 * (cc[5] - cc[4]) * tau_rate;
    }
    rates[ca] = (params.v_hip - (lt + ls) * rates[ck]) / ls;
    rates
}

/// Polishes a mocap-fit gait into a hybrid-invariant one: minimizes the
/// exact quadratic fit cost subject to the 36 boundary conditions that make
/// both impacts map the output-zeroing surface into itself, plus progression
/// and clearance floors.  Sequential quadratic programming with the analytic
/// cost Hessian and finite-difference constraint Jacobians.
pub fn optimize_gait(
    model: &RobotModel,
    mocap: &GaitParams,
    opts: &OptimizeOptions,
) -> Result<GaitParams> {
    let anatomy = model.anatomy()?;
    let spec = OutputSpec::for_model(model)?;
    let ws = OptWorkspace {
        model,
        anatomy,
        spec: spec.clone(),
        post_specs: [
            DomainSpec::for_domain(model, Domain::Ps)?,
            DomainSpec::for_domain(model, Domain::Pns)?,
        ],
        mocap,
        opts,
        probes: [0.3, 0.5, 0.7],
    };

    let rates0 = [
        seed_edge_rates(&spec, anatomy, mocap, Domain::Ps),
        seed_edge_rates(&spec, anatomy, mocap, Domain::Pns),
    ];
    let mut z = ws.pack(mocap, &rates0)?;
    let h0 = ws.hessian();

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut lambda = 1e-8_f64;
    let mut mu = 1e3_f64;
    let mut iterations = 0;
    let mut stalled = 0;
    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let (c_eq, c_in) = ws.constraints(&z)?;
        let res = c_eq.amax();
        if best.as_ref().map_or(true, |(r, _)| res < *r) {
            best = Some((res, z.clone()));
        }

        // Finite-difference Jacobians, central.
        let mut a_eq = DMatrix::zeros(N_EQ, N_VARS);
        let mut a_in = DMatrix::zeros(c_in.len(), N_VARS);
        for col in 0..N_VARS {
            let h = 1e-6 * (1.0 + z[col].abs());
            let mut zp = z.clone();
            zp[col] += h;
            let mut zm = z.clone();
            zm[col] -= h;
            let (ep, ip) = ws.constraints(&zp)?;
            let (em, im) = ws.constraints(&zm)?;
            a_eq.set_column(col, &((ep - em) / (2.0 * h)));
            a_in.set_column(col, &((ip - im) / (2.0 * h)));
        }

        let (_, grad) = ws.objective(&z)?;

        // Equality rows for the step: all boundary conditions, plus any
        // inequality whose linearization is violated or nearly active,
        // pushed just inside its boundary.
        let mut rows: Vec<(DVector<f64>, f64)> = (0..N_EQ)
            .map(|r| (a_eq.row(r).transpose(), -c_eq[r]))
            .collect();
        for r in 0..c_in.len() {
            if c_in[r] > -1e-3 {
                rows.push((a_in.row(r).transpose(), -(c_in[r] + 1e-3)));
            }
        }

        // One Newton step of the equality-constrained subproblem.  The
        // linearized conditions are enforced exactly; the damping weight
        // picks the step among their solutions and is raised until the
        // step fits the trust radius, so near-flat directions of the cost
        // (whole-curve shifts absorbed by an offset, the free boundary
        // rates) cannot balloon it.  The small negative dual block keeps
        // the system solvable when the finite-difference rows carry
        // noise-level near-dependencies.
        let me = rows.len();
        let dim = N_VARS + me;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for (r, (row, target)) in rows.iter().enumerate() {
            for c in 0..N_VARS {
                kkt[(N_VARS + r, c)] = row[c];
                kkt[(c, N_VARS + r)] = row[c];
            }
            kkt[(N_VARS + r, N_VARS + r)] = -1e-8;
            rhs[N_VARS + r] = *target;
        }
        let step = loop {
            kkt.view_mut((0, 0), (N_VARS, N_VARS)).copy_from(&h0);
            for i in 0..N_VARS {
                kkt[(i, i)] += lambda;
                rhs[i] = -grad[i];
            }
            let sol = kkt.clone().lu().solve(&rhs).ok_or_else(|| Error::NoConvergence {
                context: "gait optimization step system".into(),
                residual: res,
                iterations,
            })?;
            let step = sol.rows(0, N_VARS).into_owned();
            if step.amax() <= 0.5 || lambda >= 1e8 {
                break step;
            }
            lambda *= 10.0;
        };

        if res < opts.tol * 1e-3 && step.amax() < 1e-8 {
            break;
        }

        mu = mu.max(10.0 * (1.0 + grad.amax()));
        let merit = |zz: &DVector<f64>| -> Result<f64> {
            let (ce, ci) = ws.constraints(zz)?;
            let (j, _) = ws.objective(zz)?;
            let viol = ce.iter().map(|v| v.abs()).sum::<f64>()
                + ci.iter().map(|v| v.max(0.0)).sum::<f64>();
            Ok(j + mu * viol)
        };
        let phi0 = merit(&z)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand = &z + &step * t;
            match merit(&cand) {
                Ok(phi) if phi < phi0 - 1e-15 => {
                    z = cand;
                    accepted = true;
                    break;
                }
                _ => t *= 0.5,
            }
        }
        log::debug!(
            "gait optimization iter {iter}: residual {res:.3e}, step {:.3e}, accepted {accepted} at t {t:.1e}",
            step.amax()
        );
        // Past the residual target the remaining motion only polishes the
        // cost; stop once that polish stalls.
        if res < opts.tol && (!accepted || t * step.amax() < 1e-6) {
            stalled += 1;
            if stalled >= 3 {
                break;
            }
        } else {
            stalled = 0;
        }
        if !accepted {
            lambda *= 10.0;
            if lambda > 1e4 {
                break;
            }
        } else {
            lambda = (lambda * 0.3).max(1e-8);
        }
    }

    let (best_res, best_z) = best.unwrap();
    let (c_eq, _) = ws.constraints(&best_z)?;
    let final_res = c_eq.amax();
    if final_res > opts.tol {
        return Err(Error::NoConvergence {
            context: format!("gait optimization (best residual {best_res:.3e})"),
            residual: final_res,
            iterations,
        });
    }
    let (mut gait, _) = ws.unpack(&best_z)?;
    for d in [Domain::Ps, Domain::Pns] {
        sync_stance_ankle(&spec, anatomy, d, gait.domain_mut(d))?;
    }
    gait.provenance = "optimized".into();
    gait.validate()?;
    Ok(gait)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

fn domain_to_json(params: &DomainParams) -> serde_json::Value {
    let outputs: Vec<serde_json::Value> = JOINT_NAMES
        .iter()
        .zip(&params.curves)
        .map(|(name, c)| {
            serde_json::json!({
                "name": name,
                "degree": c.degree(),
                "coeffs": c.coeffs(),
            })
        })
        .collect();
    serde_json::json!({
        "outputs": outputs,
        "v_hip": params.v_hip,
        "phase": { "p_min": params.phase_min, "p_max": params.phase_max },
        "offsets": params.offsets,
    })
}

fn domain_from_json(v: &serde_json::Value) -> Result<DomainParams> {
    let outputs = v["outputs"]
        .as_array()
        .ok_or_else(|| Error::InvalidData("gait domain lacks an outputs array".into()))?;
    if outputs.len() != 6 {
        return Err(Error::InvalidData(format!(
            "expected six output curves, got {}",
            outputs.len()
        )));
    }
    let mut curves = Vec::with_capacity(6);
    for (name, o) in JOINT_NAMES.iter().zip(outputs) {
        if o["name"].as_str() != Some(name) {
            return Err(Error::InvalidData(format!(
                "gait outputs out of order: expected {name}, found {}",
                o["name"]
            )));
        }
        let coeffs: Vec<f64> = serde_json::from_value(o["coeffs"].clone())?;
        curves.push(BezierCurve::new(coeffs)?);
    }
    let offsets: Vec<f64> = serde_json::from_value(v["offsets"].clone())?;
    let offsets: [f64; 5] = offsets
        .try_into()
        .map_err(|_| Error::InvalidData("expected five offsets".into()))?;
    Ok(DomainParams {
        curves,
        offsets,
        phase_min: v["phase"]["p_min"]
            .as_f64()
            .ok_or_else(|| Error::InvalidData("missing phase.p_min".into()))?,
        phase_max: v["phase"]["p_max"]
            .as_f64()
            .ok_or_else(|| Error::InvalidData("missing phase.p_max".into()))?,
        v_hip: v["v_hip"]
            .as_f64()
            .ok_or_else(|| Error::InvalidData("missing v_hip".into()))?,
    })
}

/// Writes `gait.json`.
pub fn save_gait(path: &Path, gait: &GaitParams, meta: &serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({
        "meta": meta,
        "provenance": gait.provenance,
        "domains": {
            "ps": domain_to_json(&gait.ps),
            "pns": domain_to_json(&gait.pns),
        },
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Reads `gait.json`.
pub fn load_gait(path: &Path) -> Result<(GaitParams, serde_json::Value)> {
    let text = std::fs::read_to_string(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let gait = GaitParams {
        ps: domain_from_json(&doc["domains"]["ps"])?,
        pns: domain_from_json(&doc["domains"]["pns"])?,
        provenance: doc["provenance"]
            .as_str()
            .ok_or_else(|| Error::InvalidData("gait.json lacks provenance".into()))?
            .to_string(),
    };
    gait.validate()?;
    let meta = doc.get("meta").cloned().unwrap_or(serde_json::Value::Null);
    Ok((gait, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::model::default_model;

    fn setup() -> (RobotModel, OutputSpec, GaitParams) {
        let model = default_model();
        let spec = OutputSpec::for_model(&model).unwrap();
        let gait = reference_gait(&model).unwrap();
        (model, spec, gait)
    }

    #[test]
    fn outputs_vanish_on_surface() {
        let (model, spec, gait) = setup();
        for d in [Domain::Ps, Domain::Pns] {
            for s in [0.0, 0.2, 0.5, 0.8, 1.0] {
                let x = surface_state(&model, &spec, &gait, d, [0.0, 0.0, 0.0], s).unwrap();
                let out = outputs(&model, &spec, &gait, d, &x.q, &x.dq).unwrap();
                assert!(out.y1.abs() < 1e-9, "{} s={s}: y1={}", d.label(), out.y1);
                assert!(out.y2.amax() < 1e-9, "{} s={s}: y2={}", d.label(), out.y2.amax());
                assert!(out.dy2.amax() < 1e-9, "{} s={s}: dy2={}", d.label(), out.dy2.amax());
                assert!((out.tau - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn output_rates_match_finite_differences() {
        let (model, spec, gait) = setup();
        // Any straight path in configuration space: the position outputs
        // depend on q alone, so their rates must equal the directional
        // derivative along dq.
        let x = surface_state(&model, &spec, &gait, Domain::Ps, [0.0, 0.0, 0.0], 0.4).unwrap();
        let mut dq = x.dq.clone();
        dq[3] += 0.21;
        dq[10] -= 0.13;
        dq[0] += 0.05;
        let h = 1e-6;
        let qp = &x.q + &dq * h;
        let qm = &x.q - &dq * h;
        let op = outputs(&model, &spec, &gait, Domain::Ps, &qp, &dq).unwrap();
        let om = outputs(&model, &spec, &gait, Domain::Ps, &qm, &dq).unwrap();
        let o0 = outputs(&model, &spec, &gait, Domain::Ps, &x.q, &dq).unwrap();
        for j in 0..5 {
            let fd = (op.y2[j] - om.y2[j]) / (2.0 * h);
            assert!(
                (fd - o0.dy2[j]).abs() < 1e-5,
                "output {j}: fd {fd} vs chain rule {}",
                o0.dy2[j]
            );
        }
    }

    #[test]
    fn reference_gait_is_invariant_through_both_impacts() {
        let (model, spec, gait) = setup();
        for d in [Domain::Ps, Domain::Pns] {
            let pre = surface_state(&model, &spec, &gait, d, [0.0, 0.0, 0.0], 1.0).unwrap();
            let (r_pos, r_vel) = phzd_residual(&model, &spec, &gait, &pre).unwrap();
            assert!(r_pos.amax() < 1e-8, "{}: position residual {}", d.label(), r_pos.amax());
            assert!(r_vel.amax() < 1e-8, "{}: rate residual {}", d.label(), r_vel.amax());
        }
    }

    #[test]
    fn reference_gait_reaches_the_guard_descending() {
        let (model, spec, gait) = setup();
        for d in [Domain::Ps, Domain::Pns] {
            let x = surface_state(&model, &spec, &gait, d, [0.0, 0.0, 0.0], 1.0).unwrap();
            let dspec = DomainSpec::for_domain(&model, d).unwrap();
            let kin = Kin::new(&model, &x.q);
            let guard = dspec.guard_value(&kin).unwrap();
            let rate = dspec.guard_rate(&kin, &x.dq).unwrap();
            assert!(guard.abs() < 1e-9, "{}: guard height {guard}", d.label());
            assert!(rate < -0.05, "{}: touchdown rate {rate}", d.label());
            // The step travels one stride: swing sole lands ahead.
            let a = model.anatomy().unwrap();
            let sole = kin.point_world(a.swing_foot(d), [0.0, -a.ankle_drop]);
            assert!((sole.x - REF_STEP).abs() < 1e-9, "stride length {}", sole.x);
        }
    }

    #[test]
    fn reference_gait_clears_the_ground_mid_swing() {
        let (model, spec, gait) = setup();
        for d in [Domain::Ps, Domain::Pns] {
            let clear = swing_clearance(&model, &spec, &gait, d, 0.1, 0.9, 81).unwrap();
            assert!(clear >= REF_CLEARANCE - 1e-9, "{}: clearance {clear}", d.label());
        }
    }

    #[test]
    fn stance_ankle_curve_matches_identity_everywhere() {
        let (model, spec, gait) = setup();
        let a = model.anatomy().unwrap();
        for d in [Domain::Ps, Domain::Pns] {
            let params = gait.domain(d);
            let (_, ca) = spec.stance_of(d);
            for i in 0..=20 {
                let s = i as f64 / 20.0;
                let (joints, _) = surface_joints(&spec, a, &gait, d, s).unwrap();
                let stored = params.curves[ca].eval(s).unwrap();
                assert!(
                    (stored - joints[ca]).abs() < 1e-12,
                    "{} s={s}: stored {stored} vs identity {}",
                    d.label(),
                    joints[ca]
                );
            }
        }
    }

    #[test]
    fn mocap_fit_recovers_generating_curves() {
        let (model, spec, gait) = setup();
        let a = model.anatomy().unwrap();
        // Sample both domains' surface joints into synthetic segments.
        let mut segments = Vec::new();
        for d in [Domain::Ps, Domain::Pns] {
            let params = gait.domain(d);
            let dur = params.delta() / params.v_hip;
            let n = 120;
            let mut t = Vec::new();
            let mut tau = Vec::new();
            let mut joints = Vec::new();
            for i in 0..=n {
                let s = i as f64 / n as f64;
                let (j, _) = surface_joints(&spec, a, &gait, d, s).unwrap();
                t.push(s * dur);
                tau.push(s);
                joints.push([j[0], j[1], j[2], j[3], j[4], j[5]]);
            }
            segments.push(StepSegment {
                domain: d,
                t,
                tau,
                joints,
                phase_min: params.phase_min,
                phase_max: params.phase_max,
            });
        }
        let fitted = fit_mocap_params(&model, &segments, 5).unwrap();
        assert_eq!(fitted.provenance, "mocap-fit");
        for d in [Domain::Ps, Domain::Pns] {
            let f = fitted.domain(d);
            let g = gait.domain(d);
            for k in 0..6 {
                for (cf, cg) in f.curves[k].coeffs().iter().zip(g.curves[k].coeffs()) {
                    assert!((cf - cg).abs() < 1e-8, "joint {k}: {cf} vs {cg}");
                }
            }
            assert!((f.v_hip - g.v_hip).abs() < 1e-8, "v_hip {} vs {}", f.v_hip, g.v_hip);
            assert!((f.phase_min - g.phase_min).abs() < 1e-12);
            assert!((f.phase_max - g.phase_max).abs() < 1e-12);

            // Duplicating a segment must not move the fit.
            let mut doubled = segments.clone();
            doubled.push(segments[domain_index(d)].clone());
            let refit = fit_mocap_params(&model, &doubled, 5).unwrap();
            for k in 0..6 {
                for (a_, b_) in refit.domain(d).curves[k]
                    .coeffs()
                    .iter()
                    .zip(f.curves[k].coeffs())
                {
                    assert!((a_ - b_).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn boundary_residual_reacts_to_entry_coefficients() {
        let (model, spec, mut gait) = setup();
        let pre = surface_state(&model, &spec, &gait, Domain::Ps, [0.0, 0.0, 0.0], 1.0).unwrap();
        let (r0, _) = phzd_residual(&model, &spec, &gait, &pre).unwrap();
        // Shift the successor's first tracked curve by a constant.
        let k = spec.tracked_of(Domain::Pns)[0];
        let c: Vec<f64> =
            gait.pns.curves[k].coeffs().iter().map(|v| v + 0.1).collect();
        gait.pns.curves[k] = BezierCurve::new(c).unwrap();
        let (r1, _) = phzd_residual(&model, &spec, &gait, &pre).unwrap();
        assert!(((r1[0] - r0[0]).abs() - 0.1).abs() < 1e-9, "sensitivity {}", r1[0] - r0[0]);
    }

    #[test]
    fn fit_cost_is_exactly_quadratic_along_lines() {
        let (model, spec, gait) = setup();
        let mocap = {
            let mut m = gait.clone();
            m.provenance = "mocap-fit".into();
            m
        };
        let weights = [[1.0; 5]; 2];
        // Walk the candidate along a fixed direction in parameter space and
        // check that second differences of the cost are constant.
        let direction: Vec<f64> = (0..6).map(|i| 0.1 * (i as f64 - 2.3)).collect();
        let cost_at = |t: f64| -> f64 {
            let mut g = gait.clone();
            let k = spec.tracked_of(Domain::Ps)[1];
            let c: Vec<f64> = g.ps.curves[k]
                .coeffs()
                .iter()
                .zip(&direction)
                .map(|(a, d)| a + t * d)
                .collect();
            g.ps.curves[k] = BezierCurve::new(c).unwrap();
            g.ps.offsets[1] += 0.02 * t;
            g.ps.phase_max += 0.01 * t;
            fit_cost(&g, &mocap, &weights, 10.0, &spec)
        };
        let h = 0.25;
        let mut second = Vec::new();
        for i in 0..4 {
            let t = i as f64 * 0.5 - 1.0;
            second.push(cost_at(t + h) - 2.0 * cost_at(t) + cost_at(t - h));
        }
        for w in second.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-8, "second differences {:?}", second);
        }
        let _ = model;
    }

    #[test]
    fn optimizer_returns_a_feasible_start_unchanged() {
        let (model, _, gait) = setup();
        let mut mocap = gait.clone();
        mocap.provenance = "mocap-fit".into();
        let opts = OptimizeOptions::default();
        let out = optimize_gait(&model, &mocap, &opts).unwrap();
        assert_eq!(out.provenance, "optimized");
        let spec = OutputSpec::for_model(&model).unwrap();
        let cost = fit_cost(&out, &mocap, &opts.weights, opts.w_delta, &spec);
        assert!(cost < 1e-8, "feasible start moved: cost {cost:.3e}");
    }

    #[test]
    fn optimizer_repairs_a_perturbed_gait() {
        let (model, spec, gait) = setup();
        let mut mocap = gait.clone();
        mocap.provenance = "mocap-fit".into();
        // Break hybrid invariance: disturb entry/exit coefficients and the
        // phase bounds of both domains.
        for (i, d) in [Domain::Ps, Domain::Pns].into_iter().enumerate() {
            let params = mocap.domain_mut(d);
            for (j, &k) in spec.tracked_of(d).iter().enumerate() {
                let mut c = params.curves[k].coeffs().to_vec();
                for (t, cc) in c.iter_mut().enumerate() {
                    *cc += 0.01 * ((1 + i + j + t) as f64 * 0.37).sin();
                }
                params.curves[k] = BezierCurve::new(c).unwrap();
            }
            params.phase_min -= 0.01;
            params.phase_max += 0.005;
        }
        let opts = OptimizeOptions::default();
        let out = optimize_gait(&model, &mocap, &opts).unwrap();

        // The result is hybrid-invariant at tight tolerance.
        for d in [Domain::Ps, Domain::Pns] {
            let pre = surface_state(&model, &spec, &out, d, [0.0, 0.0, 0.0], 1.0).unwrap();
            let (r_pos, r_vel) = phzd_residual(&model, &spec, &out, &pre).unwrap();
            assert!(r_pos.amax() < 1e-6, "{}: {:.3e}", d.label(), r_pos.amax());
            assert!(r_vel.amax() < 1e-6, "{}: {:.3e}", d.label(), r_vel.amax());
        }
        // And it stays close to the perturbed target.
        let cost = fit_cost(&out, &mocap, &opts.weights, opts.w_delta, &spec);
        assert!(cost < 0.05, "fit cost {cost}");
    }

    #[test]
    fn gait_json_round_trip() {
        let (_, _, gait) = setup();
        let dir = std::env::temp_dir().join("prosim_gait_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gait.json");
        save_gait(&path, &gait, &serde_json::json!({"seed": 7})).unwrap();
        let (back, meta) = load_gait(&path).unwrap();
        assert_eq!(back, gait);
        assert_eq!(meta["seed"], 7);
    }
}

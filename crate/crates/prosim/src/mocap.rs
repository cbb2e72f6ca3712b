//! Marker-trajectory processing: limb pitch angles, joint-center
//! localization, joint-angle extraction, and step segmentation.
//!
//! A planar capture is a stream of `(time, body_id, marker_id, x, z)`
//! records.  Two markers on a limb determine its pitch — the angle of the
//! inter-marker segment measured from vertical toward the walking direction,
//! `atan2(dx, dz)` — which is the negated body angle whenever the pair is
//! aligned with the limb axis.  Joint angles follow from pitch differences
//! between adjacent limbs, the prosthesis thigh inherits the right-thigh
//! pitch through the rigid socket, and steps are segmented at extrema of the
//! smoothed prosthesis-side hip progression.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::dynamics::model::{Anatomy, Domain, RobotModel};
use crate::error::{Error, Result};

/// One capture record: a single marker observation at one instant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerFrame {
    pub time: f64,
    pub body_id: String,
    pub marker_id: String,
    /// Longitudinal world coordinate, meters.
    pub x: f64,
    /// Vertical world coordinate, meters.
    pub z: f64,
}

/// One rigid-body pose record from an optional `pose.csv` companion file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseFrame {
    pub time: f64,
    pub body_id: String,
    pub x: f64,
    pub z: f64,
    pub pitch: f64,
}

/// All observations of one rigid body on the capture's shared frame grid.
#[derive(Debug, Clone)]
pub struct BodyTrack {
    pub body_id: String,
    /// Marker labels, in first-seen order; positions below follow it.
    pub marker_ids: Vec<String>,
    /// World positions, `markers[frame][marker]`.
    pub markers: Vec<Vec<Vector2<f64>>>,
    /// Rigid-body pitch per frame when the capture system supplies one.
    pub pitch: Option<Vec<f64>>,
}

/// A capture grouped into aligned per-body tracks over a common time base.
///
/// Frames missing any marker stream seen elsewhere in the capture are
/// dropped (with a logged gap) so every track covers every retained frame.
#[derive(Debug, Clone)]
pub struct Capture {
    pub t: Vec<f64>,
    pub tracks: Vec<BodyTrack>,
}

impl Capture {
    pub fn track(&self, body_id: &str) -> Result<&BodyTrack> {
        self.tracks
            .iter()
            .find(|tr| tr.body_id == body_id)
            .ok_or_else(|| Error::InvalidData(format!("no capture track for body {body_id:?}")))
    }

    /// Groups long-format records into aligned tracks.
    pub fn assemble(rows: &[MarkerFrame]) -> Result<Capture> {
        if rows.is_empty() {
            return Err(Error::InvalidData("empty marker capture".into()));
        }
        // Streams and frame times in first-seen order.
        let mut stream_of: HashMap<(String, String), usize> = HashMap::new();
        let mut streams: Vec<(String, String)> = Vec::new();
        let mut frame_of: HashMap<u64, usize> = HashMap::new();
        let mut times: Vec<f64> = Vec::new();
        for r in rows {
            let key = (r.body_id.clone(), r.marker_id.clone());
            stream_of.entry(key.clone()).or_insert_with(|| {
                streams.push(key);
                streams.len() - 1
            });
            frame_of.entry(r.time.to_bits()).or_insert_with(|| {
                times.push(r.time);
                times.len() - 1
            });
        }
        let (nf, ns) = (times.len(), streams.len());
        let mut grid: Vec<Option<Vector2<f64>>> = vec![None; nf * ns];
        for r in rows {
            let f = frame_of[&r.time.to_bits()];
            let s = stream_of[&(r.body_id.clone(), r.marker_id.clone())];
            grid[f * ns + s] = Some(Vector2::new(r.x, r.z));
        }

        let mut keep = Vec::with_capacity(nf);
        for f in 0..nf {
            if grid[f * ns..(f + 1) * ns].iter().all(Option::is_some) {
                keep.push(f);
            } else {
                warn!("dropping capture frame at t={}: missing markers", times[f]);
            }
        }
        if keep.is_empty() {
            return Err(Error::InvalidData("no complete frames in capture".into()));
        }
        let t: Vec<f64> = keep.iter().map(|&f| times[f]).collect();
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidData("capture times are not strictly increasing".into()));
        }

        let mut tracks: Vec<BodyTrack> = Vec::new();
        for (s, (body_id, marker_id)) in streams.iter().enumerate() {
            let idx = match tracks.iter().position(|tr| &tr.body_id == body_id) {
                Some(i) => i,
                None => {
                    tracks.push(BodyTrack {
                        body_id: body_id.clone(),
                        marker_ids: Vec::new(),
                        markers: vec![Vec::new(); keep.len()],
                        pitch: None,
                    });
                    tracks.len() - 1
                }
            };
            tracks[idx].marker_ids.push(marker_id.clone());
            for (k, &f) in keep.iter().enumerate() {
                tracks[idx].markers[k].push(grid[f * ns + s].unwrap());
            }
        }
        Ok(Capture { t, tracks })
    }

    /// Attaches rigid-body pitch streams from pose records to matching
    /// tracks; frames absent from the pose stream leave the track marker-only.
    pub fn attach_pose(&mut self, poses: &[PoseFrame]) {
        for track in &mut self.tracks {
            let by_time: HashMap<u64, f64> = poses
                .iter()
                .filter(|p| p.body_id == track.body_id)
                .map(|p| (p.time.to_bits(), p.pitch))
                .collect();
            if by_time.is_empty() {
                continue;
            }
            let all: Option<Vec<f64>> =
                self.t.iter().map(|t| by_time.get(&t.to_bits()).copied()).collect();
            match all {
                Some(p) => track.pitch = Some(p),
                None => warn!("pose stream for {} incomplete; using markers", track.body_id),
            }
        }
    }
}

/// Joint-angle tracks extracted from a capture, canonical actuator order
/// `(lh, lk, la, rh, pk, pa)`.
#[derive(Debug, Clone)]
pub struct JointSeries {
    pub t: Vec<f64>,
    pub joints: Vec<[f64; 6]>,
}

/// One segmented step: frames between consecutive extrema of the smoothed
/// prosthesis hip progression, with the stance-side phase for each frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSegment {
    pub domain: Domain,
    pub t: Vec<f64>,
    /// Normalized stance phase in `[0, 1]` per frame.
    pub tau: Vec<f64>,
    /// Joint angles per frame, canonical order.
    pub joints: Vec<[f64; 6]>,
    /// Stance hip progression at touchdown and liftoff, meters.
    pub phase_min: f64,
    pub phase_max: f64,
}

impl StepSegment {
    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// Pitch of the segment from `m1` to `m2`: the angle measured from vertical
/// toward the walking direction, `atan2(x2 - x1, z2 - z1)`, in `(-pi, pi]`.
pub fn compute_pitch(m1: Vector2<f64>, m2: Vector2<f64>) -> Result<f64> {
    let d = m2 - m1;
    if d.norm() < 1e-9 {
        return Err(Error::Geometry(
            "coincident markers cannot define a segment direction".into(),
        ));
    }
    Ok(d.x.atan2(d.y))
}

/// Rotation taking pitch-frame coordinates to world coordinates: the frame's
/// second axis points along the limb at pitch `theta`.
pub(crate) fn pitch_rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

/// Wraps an angle into `(-pi, pi]`.
fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

/// Per-frame pitch of a body: the capture system's rigid-body pitch when
/// present, otherwise the two-marker formula on the first marker pair.
pub fn body_pitch(track: &BodyTrack) -> Result<Vec<f64>> {
    if let Some(p) = &track.pitch {
        return Ok(p.clone());
    }
    if track.marker_ids.len() < 2 {
        return Err(Error::InvalidData(format!(
            "body {} carries fewer than two markers and no pose stream",
            track.body_id
        )));
    }
    track.markers.iter().map(|ms| compute_pitch(ms[0], ms[1])).collect()
}

/// Joint-center offsets recovered between two adjacent limbs.
#[derive(Debug, Clone)]
pub struct JointGeometry {
    pub joint_id: String,
    /// First-marker-to-joint offset in the first body's pitch frame, meters.
    pub lambda1: Vector2<f64>,
    /// Same for the second body.
    pub lambda2: Vector2<f64>,
    /// Root-mean-square closure residual over the calibration frames.
    pub rms_residual: f64,
}

impl JointGeometry {
    /// World joint position per frame: the mean of the two marker-anchored
    /// expressions, which coincide exactly on noiseless rigid data.
    pub fn joint_positions(
        &self,
        track1: &BodyTrack,
        track2: &BodyTrack,
        pitch1: &[f64],
        pitch2: &[f64],
    ) -> Vec<Vector2<f64>> {
        (0..pitch1.len())
            .map(|i| {
                let a = track1.markers[i][0] + pitch_rot(pitch1[i]) * self.lambda1;
                let b = track2.markers[i][0] + pitch_rot(pitch2[i]) * self.lambda2;
                0.5 * (a + b)
            })
            .collect()
    }
}

/// Locates the shared joint between two limbs from their first markers and
/// pitch sequences.
///
/// The joint has constant offsets `lambda1`, `lambda2` in the two pitch
/// frames, so each frame contributes two closure equations
/// `m1 + R(pitch1) lambda1 = m2 + R(pitch2) lambda2`; the stacked system is
/// linear least squares in the four unknowns.  It is rank-deficient when the
/// limbs never rotate relative to each other, so a relative-pitch span of at
/// least 0.05 rad is required.
pub fn localize_joint(
    track1: &BodyTrack,
    track2: &BodyTrack,
    pitch1: &[f64],
    pitch2: &[f64],
) -> Result<JointGeometry> {
    let n = pitch1.len();
    if n != pitch2.len() || n != track1.markers.len() || n != track2.markers.len() {
        return Err(Error::InvalidData(
            "joint localization needs aligned tracks and pitch sequences".into(),
        ));
    }
    if n < 3 {
        return Err(Error::InvalidData(format!(
            "joint localization needs at least three frames, got {n}"
        )));
    }
    let rel: Vec<f64> = pitch1.iter().zip(pitch2).map(|(a, b)| a - b).collect();
    let span = rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - rel.iter().cloned().fold(f64::INFINITY, f64::min);
    if span < 0.05 {
        return Err(Error::Geometry(format!(
            "relative pitch span {span:.4} rad is too small to locate the joint"
        )));
    }

    let mut m = DMatrix::zeros(2 * n, 4);
    let mut rhs = DVector::zeros(2 * n);
    for i in 0..n {
        m.view_mut((2 * i, 0), (2, 2)).copy_from(&pitch_rot(pitch1[i]));
        m.view_mut((2 * i, 2), (2, 2)).copy_from(&(-pitch_rot(pitch2[i])));
        let d = track2.markers[i][0] - track1.markers[i][0];
        rhs[2 * i] = d.x;
        rhs[2 * i + 1] = d.y;
    }
    let svd = m.clone().svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::SingularConstraint(format!("joint localization: {e}")))?;
    let rms = ((&m * &sol - &rhs).norm_squared() / n as f64).sqrt();
    Ok(JointGeometry {
        joint_id: format!("{}-{}", track1.body_id, track2.body_id),
        lambda1: Vector2::new(sol[0], sol[1]),
        lambda2: Vector2::new(sol[2], sol[3]),
        rms_residual: rms,
    })
}

/// Joint angle between a parent and a child limb from aligned pitch
/// sequences.  Model joint angles grow counterclockwise while pitch grows
/// clockwise (vertical toward the walking direction), so the angle is parent
/// pitch minus child pitch, wrapped into `(-pi, pi]`.
pub fn joint_angles(pitch_parent: &[f64], pitch_child: &[f64]) -> Result<Vec<f64>> {
    if pitch_parent.len() != pitch_child.len() {
        return Err(Error::InvalidData(format!(
            "pitch sequences differ in length: {} vs {}",
            pitch_parent.len(),
            pitch_child.len()
        )));
    }
    Ok(pitch_parent
        .iter()
        .zip(pitch_child)
        .map(|(p, c)| wrap_angle(p - c))
        .collect())
}

/// Extracts the six joint-angle tracks from a capture.
///
/// Marker pairs need not be aligned with the limb axis: each body's raw
/// pitch is corrected by the constant pitch its pair has in the body frame
/// (recorded with the model's marker table), which reduces to no correction
/// for axis-aligned pairs.  The prosthesis thigh carries no markers and
/// inherits the right-thigh pitch through the rigid socket.
pub fn extract_joint_series(model: &RobotModel, cap: &Capture) -> Result<JointSeries> {
    let a = model.anatomy()?;
    let corrected = |body: usize| -> Result<Vec<f64>> {
        let name = &model.bodies[body].name;
        let track = cap.track(name)?;
        let raw = body_pitch(track)?;
        if track.pitch.is_some() {
            return Ok(raw);
        }
        let local_of = |id: &str| -> Result<Vector2<f64>> {
            model
                .markers
                .iter()
                .find(|p| p.body == body && p.marker_id == id)
                .map(|p| Vector2::new(p.local[0], p.local[1]))
                .ok_or_else(|| {
                    Error::InvalidData(format!("marker {id:?} not in the model table for {name}"))
                })
        };
        let psi = compute_pitch(local_of(&track.marker_ids[0])?, local_of(&track.marker_ids[1])?)?;
        Ok(raw.into_iter().map(|p| wrap_angle(p - psi)).collect())
    };

    let torso = corrected(a.torso)?;
    let l_thigh = corrected(a.l_thigh)?;
    let l_shin = corrected(a.l_shin)?;
    let l_foot = corrected(a.l_foot)?;
    let r_thigh = corrected(a.r_thigh)?;
    let p_shin = corrected(a.p_shin)?;
    let p_foot = corrected(a.p_foot)?;
    // The socket weld carries the right-thigh pitch to the device thigh.
    let p_thigh = r_thigh.clone();

    let lh = joint_angles(&torso, &l_thigh)?;
    let lk = joint_angles(&l_thigh, &l_shin)?;
    let la = joint_angles(&l_shin, &l_foot)?;
    let rh = joint_angles(&torso, &r_thigh)?;
    let pk = joint_angles(&p_thigh, &p_shin)?;
    let pa = joint_angles(&p_shin, &p_foot)?;

    let joints = (0..cap.t.len())
        .map(|i| [lh[i], lk[i], la[i], rh[i], pk[i], pa[i]])
        .collect();
    Ok(JointSeries { t: cap.t.clone(), joints })
}

/// Centered moving average with a five-sample window, edges clamped.
fn smooth5(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let sum: f64 = x[lo..=hi].iter().sum();
        out.push(sum / (hi - lo + 1) as f64);
    }
    out
}

/// Linearized hip progression of one side from a canonical joint vector.
fn progression(anatomy: &Anatomy, domain: Domain, joints: &[f64; 6]) -> f64 {
    let (lt, ls) = anatomy.stance_lengths(domain);
    let (k, a) = match domain {
        Domain::Ps => (4, 5),
        Domain::Pns => (1, 2),
    };
    (lt + ls) * joints[k] + ls * joints[a]
}

/// Splits a joint-angle series into steps at extrema of the smoothed
/// prosthesis hip progression.  Partial leading and trailing intervals are
/// dropped; each kept segment gets its stance-side phase bounds and the
/// normalized phase per frame, clamped into `[0, 1]`.
pub fn segment_steps(anatomy: &Anatomy, series: &JointSeries) -> Result<Vec<StepSegment>> {
    let n = series.t.len();
    if n < 7 {
        return Err(Error::NoSteps(format!("only {n} frames captured")));
    }
    let pros: Vec<f64> = series
        .joints
        .iter()
        .map(|j| progression(anatomy, Domain::Ps, j))
        .collect();
    let s = smooth5(&pros);

    let mut extrema = Vec::new();
    for i in 1..n - 1 {
        if (s[i] > s[i - 1] && s[i] > s[i + 1]) || (s[i] < s[i - 1] && s[i] < s[i + 1]) {
            extrema.push(i);
        }
    }
    if extrema.len() < 2 {
        return Err(Error::NoSteps(
            "no complete stride between progression extrema".into(),
        ));
    }

    let mut steps = Vec::new();
    for w in extrema.windows(2) {
        let (i0, i1) = (w[0], w[1]);
        if i1 - i0 < 3 {
            continue;
        }
        let domain = if s[i1] > s[i0] { Domain::Ps } else { Domain::Pns };
        let stance: Vec<f64> = series.joints[i0..=i1]
            .iter()
            .map(|j| progression(anatomy, domain, j))
            .collect();
        let p_min = stance[0];
        let p_max = stance[stance.len() - 1];
        if (p_max - p_min).abs() < 1e-9 {
            continue;
        }
        let tau: Vec<f64> = stance
            .iter()
            .map(|&p| ((p - p_min) / (p_max - p_min)).clamp(0.0, 1.0))
            .collect();
        steps.push(StepSegment {
            domain,
            t: series.t[i0..=i1].to_vec(),
            tau,
            joints: series.joints[i0..=i1].to_vec(),
            phase_min: p_min,
            phase_max: p_max,
        });
    }
    if steps.is_empty() {
        return Err(Error::NoSteps("all candidate segments were degenerate".into()));
    }
    Ok(steps)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Writes a capture as `markers.csv`: `#` comment lines with metadata, then
/// a header `time,body_id,marker_id,x,z` and one record per marker
/// observation at 17 significant digits.
pub fn save_markers_csv(path: &Path, rows: &[MarkerFrame], meta: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in meta {
        writeln!(f, "# {k}: {v}")?;
    }
    writeln!(f, "time,body_id,marker_id,x,z")?;
    for r in rows {
        writeln!(
            f,
            "{:.16e},{},{},{:.16e},{:.16e}",
            r.time, r.body_id, r.marker_id, r.x, r.z
        )?;
    }
    Ok(())
}

/// Reads `markers.csv`, skipping `#` comments.
pub fn load_markers_csv(path: &Path) -> Result<Vec<MarkerFrame>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Reads the optional `pose.csv` companion: `time,body_id,x,z,pitch`.
pub fn load_pose_csv(path: &Path) -> Result<Vec<PoseFrame>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Writes segmented steps as `steps.json`: the record array under `steps`,
/// run metadata under `meta`.
pub fn save_steps(path: &Path, steps: &[StepSegment], meta: &serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({ "meta": meta, "steps": steps });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Reads `steps.json`; accepts either the `{meta, steps}` layout or a bare
/// array of step records.
pub fn load_steps(path: &Path) -> Result<(Vec<StepSegment>, serde_json::Value)> {
    let text = std::fs::read_to_string(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    if doc.is_array() {
        return Ok((serde_json::from_value(doc)?, serde_json::Value::Null));
    }
    let steps = serde_json::from_value(
        doc.get("steps")
            .cloned()
            .ok_or_else(|| Error::InvalidData("steps.json lacks a steps array".into()))?,
    )?;
    let meta = doc.get("meta").cloned().unwrap_or(serde_json::Value::Null);
    Ok((steps, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::kinematics::{rot, Kin};
    use crate::dynamics::model::default_model;
    use crate::dynamics::reconstruct::state_from_joints;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pitch_of_cardinal_pairs() {
        let o = Vector2::new(0.0, 0.0);
        let p = compute_pitch(o, Vector2::new(0.0, 1.0)).unwrap();
        assert!(p.abs() < 1e-15, "vertical pair: {p}");
        let p = compute_pitch(o, Vector2::new(1.0, 1.0)).unwrap();
        assert!((p - std::f64::consts::FRAC_PI_4).abs() < 1e-15, "diagonal pair: {p}");
        let p = compute_pitch(o, Vector2::new(1.0, 0.0)).unwrap();
        assert!((p - std::f64::consts::FRAC_PI_2).abs() < 1e-15, "horizontal pair: {p}");
    }

    #[test]
    fn coincident_markers_rejected() {
        let w = Vector2::new(1.0, 2.0);
        assert!(compute_pitch(w, w).is_err());
    }

    #[test]
    fn pitch_shifts_by_applied_rotation() {
        let m1 = Vector2::new(0.3, 0.9);
        let m2 = Vector2::new(0.35, 0.5);
        let base = compute_pitch(m1, m2).unwrap();
        for &delta in &[-1.2, -0.4, 0.3, 0.9, 2.0] {
            let r = pitch_rot(delta);
            let shifted = compute_pitch(r * m1, r * m2).unwrap();
            let diff = wrap_angle(shifted - base - delta);
            assert!(diff.abs() < 1e-12, "delta {delta}: residual {diff}");
        }
    }

    #[test]
    fn pitch_negates_body_angle_for_axis_aligned_pair() {
        // A limb-axis pair: lower marker first, so the pitch vector points up
        // the limb and the local-axis pitch is zero.
        for &phi in &[-0.7, -0.2, 0.0, 0.35, 1.1] {
            let origin = Vector2::new(0.3, 0.9);
            let lo = origin + rot(phi) * Vector2::new(0.0, -0.34);
            let hi = origin + rot(phi) * Vector2::new(0.0, -0.08);
            let p = compute_pitch(lo, hi).unwrap();
            assert!((p + phi).abs() < 1e-12, "pitch {p} vs -phi {}", -phi);
        }
    }

    fn two_link_tracks(
        noise_std: f64,
        seed: u64,
        n: usize,
    ) -> (BodyTrack, BodyTrack, Vec<Vector2<f64>>) {
        // Two limbs hinged at a moving point, markers rigid on each; pitch
        // frames anchored at each track's first marker.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let lam1 = Vector2::new(0.03, -0.31);
        let lam2 = Vector2::new(-0.02, 0.12);
        let mut t1 = BodyTrack {
            body_id: "upper".into(),
            marker_ids: vec!["u1".into(), "u2".into()],
            markers: Vec::new(),
            pitch: None,
        };
        let mut t2 = BodyTrack {
            body_id: "lower".into(),
            marker_ids: vec!["l1".into(), "l2".into()],
            markers: Vec::new(),
            pitch: None,
        };
        let mut centers = Vec::new();
        for i in 0..n {
            let s = i as f64 / n as f64;
            let th1 = 0.4 * (2.0 * std::f64::consts::PI * s).sin();
            let th2 = th1 + 0.8 * (4.4 * s).sin() + 0.3;
            let c = Vector2::new(0.9 * s, 0.8 + 0.02 * (9.0 * s).cos());
            let m1 = c - pitch_rot(th1) * lam1;
            let m2 = c - pitch_rot(th2) * lam2;
            let up = |v: Vector2<f64>, rng: &mut ChaCha8Rng| {
                v + Vector2::new(noise_std * gauss(rng), noise_std * gauss(rng))
            };
            // Second markers fixed relative to the first in each pitch frame.
            t1.markers.push(vec![
                up(m1, &mut rng),
                up(m1 + pitch_rot(th1) * Vector2::new(0.0, 0.25), &mut rng),
            ]);
            t2.markers.push(vec![
                up(m2, &mut rng),
                up(m2 + pitch_rot(th2) * Vector2::new(0.05, -0.22), &mut rng),
            ]);
            centers.push(c);
        }
        (t1, t2, centers)
    }

    #[test]
    fn joint_center_exact_on_noiseless_capture() {
        let (t1, t2, centers) = two_link_tracks(0.0, 1, 200);
        let p1 = body_pitch(&t1).unwrap();
        let p2 = body_pitch(&t2).unwrap();
        let geo = localize_joint(&t1, &t2, &p1, &p2).unwrap();
        let pos = geo.joint_positions(&t1, &t2, &p1, &p2);
        for (w, c) in pos.iter().zip(&centers) {
            assert!((w - c).norm() < 1e-10, "center error {}", (w - c).norm());
        }
        assert!(geo.rms_residual < 1e-10);
    }

    #[test]
    fn joint_center_near_truth_under_millimeter_noise() {
        let (t1, t2, centers) = two_link_tracks(0.001, 42, 200);
        let p1 = body_pitch(&t1).unwrap();
        let p2 = body_pitch(&t2).unwrap();
        let geo = localize_joint(&t1, &t2, &p1, &p2).unwrap();
        let pos = geo.joint_positions(&t1, &t2, &p1, &p2);
        let mut sq = 0.0;
        for (w, c) in pos.iter().zip(&centers) {
            sq += (w - c).norm_squared();
        }
        let rms = (sq / centers.len() as f64).sqrt();
        assert!(rms < 2e-3, "joint-center rms {rms:.2e} m");

        // The fitted offsets cannot close the loop worse than the truth.
        let (c1, c2, _) = two_link_tracks(0.001, 42, 200);
        let lam1 = Vector2::new(0.03, -0.31);
        let lam2 = Vector2::new(-0.02, 0.12);
        let mut truth_sq = 0.0;
        for i in 0..200 {
            let a = c1.markers[i][0] + pitch_rot(p1[i]) * lam1;
            let b = c2.markers[i][0] + pitch_rot(p2[i]) * lam2;
            truth_sq += (a - b).norm_squared();
        }
        let truth_rms = (truth_sq / 200.0).sqrt();
        assert!(geo.rms_residual <= truth_rms + 1e-12);
    }

    #[test]
    fn fixed_relative_pose_is_unobservable() {
        let n = 50;
        let mk = |z: f64| -> BodyTrack {
            BodyTrack {
                body_id: format!("b{z}"),
                marker_ids: vec!["a".into(), "b".into()],
                markers: (0..n)
                    .map(|i| {
                        let c = Vector2::new(0.01 * i as f64, z);
                        vec![c, c + Vector2::new(0.2, 0.1)]
                    })
                    .collect(),
                pitch: None,
            }
        };
        let (t1, t2) = (mk(0.0), mk(-0.3));
        let p1 = body_pitch(&t1).unwrap();
        let p2 = body_pitch(&t2).unwrap();
        match localize_joint(&t1, &t2, &p1, &p2) {
            Err(Error::Geometry(_)) => {}
            other => panic!("expected geometry error, got {other:?}"),
        }
    }

    #[test]
    fn joint_angle_differences_and_sign() {
        let z = joint_angles(&[0.4, -0.2], &[0.4, -0.2]).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        let d = joint_angles(&[0.1], &[0.3]).unwrap();
        assert!((d[0] + 0.2).abs() < 1e-15, "sign map: {}", d[0]);
        assert!(joint_angles(&[0.0], &[0.0, 0.1]).is_err());
    }

    /// Builds the long-format rows a capture of the given state would yield.
    fn rows_for_state(m: &RobotModel, t: f64, q: &DVector<f64>) -> Vec<MarkerFrame> {
        let kin = Kin::new(m, q);
        m.markers
            .iter()
            .map(|p| {
                let w = kin.point_world(p.body, p.local);
                MarkerFrame {
                    time: t,
                    body_id: m.bodies[p.body].name.clone(),
                    marker_id: p.marker_id.clone(),
                    x: w.x,
                    z: w.y,
                }
            })
            .collect()
    }

    #[test]
    fn joint_angles_recovered_exactly_from_synthetic_markers() {
        let m = default_model();
        let joints_in = DVector::from_vec(vec![0.31, -0.62, 0.14, -0.22, -0.41, 0.27]);
        let q = state_from_joints(&m, Domain::Ps, [0.0, 0.0, 0.03], &joints_in).unwrap();
        let rows = rows_for_state(&m, 0.0, &q);
        let cap = Capture::assemble(&rows).unwrap();
        let series = extract_joint_series(&m, &cap).unwrap();
        for (k, &v) in series.joints[0].iter().enumerate() {
            assert!(
                (v - joints_in[k]).abs() < 1e-12,
                "joint {k}: {v} vs {}",
                joints_in[k]
            );
        }
    }

    #[test]
    fn incomplete_frames_are_dropped() {
        let m = default_model();
        let joints_in = DVector::from_vec(vec![0.3, -0.6, 0.1, -0.2, -0.4, 0.25]);
        let q = state_from_joints(&m, Domain::Ps, [0.0, 0.0, 0.0], &joints_in).unwrap();
        let mut rows = Vec::new();
        for i in 0..5 {
            let mut fr = rows_for_state(&m, 0.01 * i as f64, &q);
            if i == 2 {
                fr.remove(3);
            }
            rows.extend(fr);
        }
        let cap = Capture::assemble(&rows).unwrap();
        assert_eq!(cap.t.len(), 4, "one incomplete frame must be dropped");
        assert!(cap.t.iter().all(|&t| (t - 0.02).abs() > 1e-12));
    }

    #[test]
    fn pose_stream_overrides_marker_pitch() {
        let m = default_model();
        let joints_in = DVector::from_vec(vec![0.3, -0.6, 0.1, -0.2, -0.4, 0.25]);
        let q = state_from_joints(&m, Domain::Ps, [0.0, 0.0, 0.0], &joints_in).unwrap();
        let rows = rows_for_state(&m, 0.0, &q);
        let mut cap = Capture::assemble(&rows).unwrap();
        let poses = vec![PoseFrame {
            time: 0.0,
            body_id: "torso".into(),
            x: 0.0,
            z: 0.9,
            pitch: 0.125,
        }];
        cap.attach_pose(&poses);
        let torso = cap.track("torso").unwrap();
        assert_eq!(torso.pitch.as_deref(), Some(&[0.125][..]));
        assert!(cap.track("l_shin").unwrap().pitch.is_none());
    }

    #[test]
    fn steps_segment_at_progression_extrema() {
        let m = default_model();
        let a = m.anatomy().unwrap();
        // Triangle-wave prosthesis progression, antiphase left leg.
        let mut t = Vec::new();
        let mut joints = Vec::new();
        let period = 100;
        let n = 3 * period + period / 2;
        for i in 0..n {
            let phase = (i % period) as f64 / period as f64;
            let tri = if phase < 0.5 { 2.0 * phase } else { 2.0 - 2.0 * phase };
            let pk = -0.6 + 0.4 * tri;
            let lk = -0.6 + 0.4 * (1.0 - tri);
            t.push(i as f64 * 0.01);
            joints.push([0.1, lk, 0.05, -0.1, pk, 0.02]);
        }
        let series = JointSeries { t, joints };
        let steps = segment_steps(a, &series).unwrap();
        assert!(steps.len() >= 5, "found {} steps", steps.len());
        for (k, s) in steps.iter().enumerate() {
            if k > 0 {
                assert_ne!(s.domain, steps[k - 1].domain, "domains must alternate");
                // Partition: consecutive segments share their boundary frame.
                assert_eq!(s.t.first(), steps[k - 1].t.last());
            }
            assert!(s.tau.first().unwrap() < &0.05);
            assert!(s.tau.last().unwrap() > &0.95);
            for w in s.tau.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "phase must not regress");
            }
            assert!(s.phase_max > s.phase_min);
        }
    }

    #[test]
    fn marker_csv_round_trip() {
        let rows = vec![
            MarkerFrame {
                time: 0.0,
                body_id: "torso".into(),
                marker_id: "torso_lo".into(),
                x: 0.1,
                z: 0.2,
            },
            MarkerFrame {
                time: 0.01,
                body_id: "l_shin".into(),
                marker_id: "l_shin_hi".into(),
                x: -0.3,
                z: 1.0 / 3.0,
            },
        ];
        let dir = std::env::temp_dir().join("prosim_mocap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("markers.csv");
        save_markers_csv(&path, &rows, &[("seed".into(), "42".into())]).unwrap();
        let back = load_markers_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.time, b.time);
            assert_eq!(a.body_id, b.body_id);
            assert_eq!(a.marker_id, b.marker_id);
            assert_eq!(a.x, b.x);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn steps_json_round_trip() {
        let steps = vec![StepSegment {
            domain: Domain::Ps,
            t: vec![0.0, 0.01],
            tau: vec![0.0, 1.0],
            joints: vec![[0.1; 6], [0.2; 6]],
            phase_min: -0.3,
            phase_max: 0.25,
        }];
        let dir = std::env::temp_dir().join("prosim_mocap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("steps.json");
        save_steps(&path, &steps, &serde_json::json!({"seed": 1})).unwrap();
        let (back, meta) = load_steps(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].domain, Domain::Ps);
        assert_eq!(back[0].joints[1], [0.2; 6]);
        assert_eq!(meta["seed"], 1);

        // A bare array is also a valid steps file.
        let bare = dir.join("steps_bare.json");
        std::fs::write(&bare, serde_json::to_string(&steps).unwrap()).unwrap();
        let (back, meta) = load_steps(&bare).unwrap();
        assert_eq!(back.len(), 1);
        assert!(meta.is_null());
    }
}

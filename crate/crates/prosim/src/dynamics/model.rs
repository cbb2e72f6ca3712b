//! Planar link-tree model description and the default subject model.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// How a body connects to the tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Joint {
    /// Root body with free planar pose; consumes coordinates
    /// `(coord, coord+1, coord+2) = (x, z, angle)`.
    Floating { coord: usize },
    /// Hinge to the parent; consumes one angle coordinate, measured relative
    /// to the parent and counterclockwise positive.
    Revolute { coord: usize },
}

/// One rigid link.  Its frame sits at the proximal joint; limb frames point
/// down the limb (`-z` local) except the torso, which points up.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Body {
    pub name: String,
    /// Parent body index; `None` for floating roots.
    pub parent: Option<usize>,
    /// Attachment point in the parent frame.
    pub attach: [f64; 2],
    pub joint: Joint,
    pub mass: f64,
    /// Rotational inertia about the center of mass.
    pub inertia: f64,
    /// Center of mass in the body frame.
    pub com: [f64; 2],
}

/// A labelled marker glued to a body, for synthetic capture and processing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerPlacement {
    pub body: usize,
    pub marker_id: String,
    pub local: [f64; 2],
}

/// Indices and segment lengths that give the generic tree its
/// human-prosthesis meaning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Anatomy {
    // Body indices.
    pub torso: usize,
    pub l_thigh: usize,
    pub l_shin: usize,
    pub l_foot: usize,
    pub r_thigh: usize,
    pub p_thigh: usize,
    pub p_shin: usize,
    pub p_foot: usize,
    // Coordinate indices.
    pub q_base: usize,
    pub q_lh: usize,
    pub q_lk: usize,
    pub q_la: usize,
    pub q_rh: usize,
    pub q_socket: usize,
    pub q_pk: usize,
    pub q_pa: usize,
    /// Sole height below the ankle, both feet.
    pub ankle_drop: f64,
    /// Left thigh (hip to knee) and shin (knee to ankle) lengths.
    pub l_thigh_len: f64,
    pub l_shin_len: f64,
    /// Hip to socket, socket to prosthesis knee, knee to ankle.
    pub r_thigh_len: f64,
    pub p_thigh_len: f64,
    pub p_shin_len: f64,
    /// Standing hip height, used for fall detection.
    pub leg_length: f64,
    /// Per-coordinate angle limits for the actuated joints, radians.
    pub joint_limits: Vec<(String, f64, f64)>,
}

impl Anatomy {
    /// Effective thigh length above the stance knee for the forward-hip
    /// progression measure: knee-to-hip distance along the leg.
    pub fn stance_lengths(&self, domain: Domain) -> (f64, f64) {
        match domain {
            // Prosthesis stance: knee sits p_thigh below the socket.
            Domain::Ps => (self.r_thigh_len + self.p_thigh_len, self.p_shin_len),
            Domain::Pns => (self.l_thigh_len, self.l_shin_len),
        }
    }

    /// Stance knee and ankle coordinate indices.
    pub fn stance_joints(&self, domain: Domain) -> (usize, usize) {
        match domain {
            Domain::Ps => (self.q_pk, self.q_pa),
            Domain::Pns => (self.q_lk, self.q_la),
        }
    }

    /// The five position-output coordinates: every actuated joint except the
    /// stance ankle.
    pub fn output_joints(&self, domain: Domain) -> [usize; 5] {
        match domain {
            Domain::Ps => [self.q_lh, self.q_lk, self.q_la, self.q_rh, self.q_pk],
            Domain::Pns => [self.q_lh, self.q_lk, self.q_rh, self.q_pk, self.q_pa],
        }
    }

    /// All six actuated joints in canonical order.
    pub fn actuated_joints(&self) -> [usize; 6] {
        [self.q_lh, self.q_lk, self.q_la, self.q_rh, self.q_pk, self.q_pa]
    }

    pub fn stance_foot(&self, domain: Domain) -> usize {
        match domain {
            Domain::Ps => self.p_foot,
            Domain::Pns => self.l_foot,
        }
    }

    pub fn swing_foot(&self, domain: Domain) -> usize {
        match domain {
            Domain::Ps => self.l_foot,
            Domain::Pns => self.p_foot,
        }
    }

    /// Forward hip progression `(l_st + l_ss) * th_knee + l_ss * th_ankle`
    /// of the stance leg.
    pub fn hip_progression(&self, domain: Domain, q: &DVector<f64>) -> f64 {
        let (lt, ls) = self.stance_lengths(domain);
        let (k, a) = self.stance_joints(domain);
        (lt + ls) * q[k] + ls * q[a]
    }

    /// Rate of [`Anatomy::hip_progression`].
    pub fn hip_progression_rate(&self, domain: Domain, dq: &DVector<f64>) -> f64 {
        self.hip_progression(domain, dq)
    }
}

/// Walking domain: prosthesis stance or prosthesis non-stance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Ps,
    Pns,
}

impl Domain {
    pub fn next(self) -> Domain {
        match self {
            Domain::Ps => Domain::Pns,
            Domain::Pns => Domain::Ps,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Domain::Ps => "ps",
            Domain::Pns => "pns",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Domain> {
        match s {
            "ps" => Ok(Domain::Ps),
            "pns" => Ok(Domain::Pns),
            other => Err(Error::InvalidData(format!("unknown domain label {other:?}"))),
        }
    }
}

/// Full continuous state within one domain.
#[derive(Debug, Clone)]
pub struct HybridState {
    pub domain: Domain,
    pub t: f64,
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
}

/// A planar link tree with an actuation map and optional anatomy handles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotModel {
    pub bodies: Vec<Body>,
    pub nq: usize,
    /// Gravitational acceleration, m/s^2, acting along `-z`.
    pub gravity: f64,
    /// Actuated coordinate indices, in actuator order.
    pub actuated: Vec<usize>,
    /// Gear ratio per actuator: generalized torque = ratio * motor torque.
    pub gear: Vec<f64>,
    pub markers: Vec<MarkerPlacement>,
    pub anatomy: Option<Anatomy>,
}

impl RobotModel {
    /// Checks tree indices and coordinate coverage.
    pub fn validate(&self) -> Result<()> {
        let mut used = vec![false; self.nq];
        for (i, b) in self.bodies.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(Error::InvalidData(format!(
                        "body {i} has parent {p}; parents must precede children"
                    )));
                }
            }
            let coords: Vec<usize> = match b.joint {
                Joint::Floating { coord } => {
                    if b.parent.is_some() {
                        return Err(Error::InvalidData(format!(
                            "floating body {i} must be a root"
                        )));
                    }
                    vec![coord, coord + 1, coord + 2]
                }
                Joint::Revolute { coord } => {
                    if b.parent.is_none() {
                        return Err(Error::InvalidData(format!(
                            "revolute body {i} needs a parent"
                        )));
                    }
                    vec![coord]
                }
            };
            for &c in &coords {
                if c >= self.nq {
                    return Err(Error::InvalidData(format!(
                        "body {i} coordinate {c} out of range"
                    )));
                }
                if used[c] {
                    return Err(Error::InvalidData(format!("coordinate {c} used twice")));
                }
                used[c] = true;
            }
        }
        if used.iter().any(|u| !u) {
            return Err(Error::InvalidData("unused coordinates in model".into()));
        }
        if self.actuated.len() != self.gear.len() {
            return Err(Error::InvalidData("actuator/gear length mismatch".into()));
        }
        Ok(())
    }

    pub fn anatomy(&self) -> Result<&Anatomy> {
        self.anatomy
            .as_ref()
            .ok_or_else(|| Error::InvalidData("model carries no anatomy handles".into()))
    }

    /// Actuation map `B`: `nq x n_act`, generalized force = `B u`.
    pub fn actuation_matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut b = nalgebra::DMatrix::zeros(self.nq, self.actuated.len());
        for (col, (&c, &g)) in self.actuated.iter().zip(&self.gear).enumerate() {
            b[(c, col)] = g;
        }
        b
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    pub fn body_index(&self, name: &str) -> Result<usize> {
        self.bodies
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::InvalidData(format!("no body named {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RobotModel> {
        let text = std::fs::read_to_string(path)?;
        let model: RobotModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

/// The default subject: 70 kg, 1.70 m tall, left leg intact, right leg
/// walking on a knee-ankle prosthesis through a kneeling adapter.
///
/// Segment masses use published anthropometric mass fractions (thigh 10.5%,
/// shank 4.75%, foot 1.43% of body mass) and rotational inertias use
/// published radii of gyration; both are defaults meant to be replaced by
/// subject-specific values in `model.json` when available.  The right thigh
/// link lumps the residual thigh, the kneeling adapter frame (1.8 kg), and
/// the subject's bent calf and foot.  Prosthesis masses approximate a
/// two-motor powered knee-ankle device (5.5 kg).
pub fn default_model() -> RobotModel {
    let body_mass = 70.0;
    let m_thigh = 0.105 * body_mass; // 7.35
    let m_shank = 0.0475 * body_mass; // 3.325
    let m_foot = 0.0143 * body_mass; // 1.001
    let m_adapter = 1.8;
    let m_r_thigh = m_thigh + m_shank + m_foot + m_adapter;
    let m_torso = body_mass - (m_thigh + m_shank + m_foot) - (m_thigh + m_shank + m_foot);

    let l_thigh = 0.42_f64;
    let l_shin = 0.42_f64;
    let ankle_drop = 0.07;
    let r_thigh_len = 0.32;
    let p_thigh_len = 0.10;
    let torso_len = 0.75_f64;

    let i_thigh = m_thigh * (0.323 * l_thigh).powi(2);
    let i_shank = m_shank * (0.302 * l_shin).powi(2);
    let i_foot = m_foot * (0.475_f64 * 0.258).powi(2);
    let i_torso = m_torso * (0.372 * torso_len).powi(2);

    let bodies = vec![
        Body {
            name: "torso".into(),
            parent: None,
            attach: [0.0, 0.0],
            joint: Joint::Floating { coord: 0 },
            mass: m_torso,
            inertia: i_torso,
            com: [0.0, 0.35],
        },
        Body {
            name: "l_thigh".into(),
            parent: Some(0),
            attach: [0.0, 0.0],
            joint: Joint::Revolute { coord: 3 },
            mass: m_thigh,
            inertia: i_thigh,
            com: [0.0, -0.17],
        },
        Body {
            name: "l_shin".into(),
            parent: Some(1),
            attach: [0.0, -l_thigh],
            joint: Joint::Revolute { coord: 4 },
            mass: m_shank,
            inertia: i_shank,
            com: [0.0, -0.18],
        },
        Body {
            name: "l_foot".into(),
            parent: Some(2),
            attach: [0.0, -l_shin],
            joint: Joint::Revolute { coord: 5 },
            mass: m_foot,
            inertia: i_foot,
            com: [0.02, -0.05],
        },
        Body {
            name: "r_thigh".into(),
            parent: Some(0),
            attach: [0.0, 0.0],
            joint: Joint::Revolute { coord: 6 },
            mass: m_r_thigh,
            inertia: 0.25,
            com: [0.0, -0.18],
        },
        Body {
            name: "p_thigh".into(),
            parent: None,
            attach: [0.0, 0.0],
            joint: Joint::Floating { coord: 7 },
            mass: 2.2,
            inertia: 0.008,
            com: [0.0, -0.05],
        },
        Body {
            name: "p_shin".into(),
            parent: Some(5),
            attach: [0.0, -p_thigh_len],
            joint: Joint::Revolute { coord: 10 },
            mass: 2.5,
            inertia: 0.035,
            com: [0.0, -0.15],
        },
        Body {
            name: "p_foot".into(),
            parent: Some(6),
            attach: [0.0, -l_shin],
            joint: Joint::Revolute { coord: 11 },
            mass: 0.8,
            inertia: 0.006,
            com: [0.02, -0.05],
        },
    ];

    let markers = vec![
        MarkerPlacement { body: 0, marker_id: "torso_lo".into(), local: [0.0, 0.10] },
        MarkerPlacement { body: 0, marker_id: "torso_hi".into(), local: [0.0, 0.60] },
        MarkerPlacement { body: 1, marker_id: "l_thigh_hi".into(), local: [0.0, -0.08] },
        MarkerPlacement { body: 1, marker_id: "l_thigh_lo".into(), local: [0.0, -0.34] },
        MarkerPlacement { body: 2, marker_id: "l_shin_hi".into(), local: [0.0, -0.08] },
        MarkerPlacement { body: 2, marker_id: "l_shin_lo".into(), local: [0.0, -0.34] },
        MarkerPlacement { body: 3, marker_id: "l_heel".into(), local: [-0.04, -0.055] },
        MarkerPlacement { body: 3, marker_id: "l_toe".into(), local: [0.12, -0.055] },
        MarkerPlacement { body: 4, marker_id: "r_thigh_hi".into(), local: [0.0, -0.06] },
        MarkerPlacement { body: 4, marker_id: "r_thigh_lo".into(), local: [0.0, -0.26] },
        MarkerPlacement { body: 6, marker_id: "p_shin_hi".into(), local: [0.0, -0.08] },
        MarkerPlacement { body: 6, marker_id: "p_shin_lo".into(), local: [0.0, -0.34] },
        MarkerPlacement { body: 7, marker_id: "p_heel".into(), local: [-0.04, -0.055] },
        MarkerPlacement { body: 7, marker_id: "p_toe".into(), local: [0.12, -0.055] },
    ];

    let joint_limits = vec![
        ("l_hip".to_string(), -0.9, 1.3),
        ("l_knee".to_string(), -2.0, 0.05),
        ("l_ankle".to_string(), -0.9, 0.9),
        ("r_hip".to_string(), -0.9, 1.3),
        ("p_knee".to_string(), -2.0, 0.05),
        ("p_ankle".to_string(), -0.9, 0.9),
    ];

    let anatomy = Anatomy {
        torso: 0,
        l_thigh: 1,
        l_shin: 2,
        l_foot: 3,
        r_thigh: 4,
        p_thigh: 5,
        p_shin: 6,
        p_foot: 7,
        q_base: 0,
        q_lh: 3,
        q_lk: 4,
        q_la: 5,
        q_rh: 6,
        q_socket: 7,
        q_pk: 10,
        q_pa: 11,
        ankle_drop,
        l_thigh_len: l_thigh,
        l_shin_len: l_shin,
        r_thigh_len,
        p_thigh_len,
        p_shin_len: l_shin,
        leg_length: l_thigh + l_shin + ankle_drop,
        joint_limits,
    };

    let model = RobotModel {
        bodies,
        nq: 12,
        gravity: 9.81,
        actuated: vec![3, 4, 5, 6, 10, 11],
        gear: vec![1.0; 6],
        markers,
        anatomy: Some(anatomy),
    };
    model.validate().expect("default model is well formed");
    model
}

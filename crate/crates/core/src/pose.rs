//! Camera poses: translation plus unit quaternion, their canonical form,
//! the 7-vector network encoding, distances and interpolation.
//!
//! Quaternions are stored `(w, x, y, z)` and rotate camera coordinates into
//! world coordinates. The camera frame follows the usual pinhole convention:
//! `+x` right, `+y` down, `+z` forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Quat = [f64; 4];

/// Length of the network-side pose vector `(tx, ty, tz, qw, qx, qy, qz)`.
pub const POSE_DIM: usize = 7;

/// Quaternions whose norm is within this distance of 1 are not renormalized.
/// Keeps canonicalization idempotent bit-for-bit.
const UNIT_NORM_SLACK: f64 = 4.0 * f64::EPSILON;

/// A 6DoF camera pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose7 {
    /// Camera position in world coordinates (meters).
    pub t: Vec3,
    /// World-from-camera rotation `(w, x, y, z)`.
    pub q: Quat,
}

impl Pose7 {
    pub const IDENTITY: Pose7 = Pose7 {
        t: [0.0; 3],
        q: [1.0, 0.0, 0.0, 0.0],
    };

    /// Builds a canonical pose.
    pub fn new(t: Vec3, q: Quat) -> Result<Self> {
        canonicalize(&Pose7 { t, q })
    }

    /// Parses `[tx, ty, tz, qw, qx, qy, qz]` and canonicalizes it.
    pub fn from_array(v: [f64; POSE_DIM]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])
    }

    pub fn to_array(&self) -> [f64; POSE_DIM] {
        let [tx, ty, tz] = self.t;
        let [qw, qx, qy, qz] = self.q;
        [tx, ty, tz, qw, qx, qy, qz]
    }

    /// Parses a whitespace-separated `"tx ty tz qw qx qy qz"` string.
    pub fn parse(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| Error::InvalidPose(format!("bad number {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let arr: [f64; POSE_DIM] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::InvalidPose(format!("expected 7 values, got {}", v.len())))?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite component".into()));
        }
        Self::from_array(arr)
    }

    /// Row-major world-from-camera rotation matrix.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        quat_to_matrix(self.q)
    }

    /// Maps a camera-frame direction into the world frame.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = self.rotation_matrix();
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// Camera looking from `eye` at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let fwd = normalize3(sub3(target, eye))
            .ok_or_else(|| Error::InvalidPose("look-at target coincides with eye".into()))?;
        let down = [-up[0], -up[1], -up[2]];
        let right = normalize3(cross3(down, fwd))
            .ok_or_else(|| Error::InvalidPose("viewing direction parallel to up".into()))?;
        let cam_down = cross3(fwd, right);
        // Columns are the camera axes expressed in world coordinates.
        let m = [
            [right[0], cam_down[0], fwd[0]],
            [right[1], cam_down[1], fwd[1]],
            [right[2], cam_down[2], fwd[2]],
        ];
        Pose7::new(eye, matrix_to_quat(&m))
    }
}

/// Axis-aligned region used to normalize translations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub center: Vec3,
    /// Per-axis half ranges, each strictly positive.
    pub extent: Vec3,
}

impl SceneBounds {
    pub fn new(center: Vec3, extent: Vec3) -> Result<Self> {
        let b = SceneBounds { center, extent };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidBounds(format!(
                "extent must be positive, got {:?}",
                self.extent
            )));
        }
        Ok(())
    }

    /// Bounds enclosing `translations`, with each half range widened by
    /// `BOUNDS_PAD` and floored at `BOUNDS_MIN_EXTENT` meters.
    pub fn from_translations<'a>(translations: impl IntoIterator<Item = &'a Vec3>) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for t in translations {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(t[a]);
                hi[a] = hi[a].max(t[a]);
            }
        }
        if !any {
            return Err(Error::InvalidBounds("no poses to bound".into()));
        }
        let mut center = [0.0; 3];
        let mut extent = [0.0; 3];
        for a in 0..3 {
            center[a] = 0.5 * (lo[a] + hi[a]);
            extent[a] = (0.5 * (hi[a] - lo[a]) * BOUNDS_PAD).max(BOUNDS_MIN_EXTENT);
        }
        SceneBounds::new(center, extent)
    }

    pub fn contains(&self, t: &Vec3) -> bool {
        (0..3).all(|a| (t[a] - self.center[a]).abs() <= self.extent[a])
    }

    /// Largest per-axis offset from the center measured in extents.
    pub fn normalized_offset(&self, t: &Vec3) -> f64 {
        (0..3)
            .map(|a| (t[a] - self.center[a]).abs() / self.extent[a])
            .fold(0.0, f64::max)
    }
}

pub const BOUNDS_PAD: f64 = 1.2;
pub const BOUNDS_MIN_EXTENT: f64 = 0.1;

/// Translation and rotation error between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDistance {
    /// Meters.
    pub translation_err: f64,
    /// Degrees, in `[0, 180]`.
    pub rotation_err: f64,
}

/// Unit-norm quaternion with the double cover resolved (`w >= 0`; ties on
/// `w == 0` are broken by the first nonzero component).
pub fn canonicalize(pose: &Pose7) -> Result<Pose7> {
    let q = pose.q;
    if q.iter().any(|v| !v.is_finite()) || pose.t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPose("non-finite component".into()));
    }
    let n = norm4(q);
    if !(n > 0.0) {
        return Err(Error::InvalidPose("zero-norm quaternion".into()));
    }
    let mut q = if (n - 1.0).abs() <= UNIT_NORM_SLACK {
        q
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    };
    let lead = q.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
    if lead < 0.0 {
        for v in &mut q {
            *v = -*v;
        }
    }
    for v in &mut q {
        if *v == 0.0 {
            *v = 0.0; // drop negative zeros
        }
    }
    Ok(Pose7 { t: pose.t, q })
}

/// Network encoding: `[(t - center) / extent, q]`.
///
/// Translations outside the bounds are clamped to `[-1, 1]` and a warning
/// is logged.
pub fn encode_pose(pose: &Pose7, bounds: &SceneBounds) -> Result<[f64; POSE_DIM]> {
    bounds.validate()?;
    let mut out = [0.0; POSE_DIM];
    let mut clamped = false;
    for a in 0..3 {
        let v = (pose.t[a] - bounds.center[a]) / bounds.extent[a];
        if v.abs() > 1.0 {
            clamped = true;
        }
        out[a] = v.clamp(-1.0, 1.0);
    }
    out[3..].copy_from_slice(&pose.q);
    if clamped {
        log::warn!("pose translation {:?} outside scene bounds; clamped", pose.t);
    }
    Ok(out)
}

/// Inverse of the translation part of [`encode_pose`].
pub fn decode_translation(encoded: &[f64; POSE_DIM], bounds: &SceneBounds) -> Vec3 {
    let mut t = [0.0; 3];
    for a in 0..3 {
        t[a] = encoded[a] * bounds.extent[a] + bounds.center[a];
    }
    t
}

pub fn pose_distance(a: &Pose7, b: &Pose7) -> PoseDistance {
    let translation_err = norm3(sub3(a.t, b.t));
    // 4·atan2(|qa − qb|, |qa + qb|) with qb on qa's hemisphere: exact zero for
    // equal rotations, well conditioned near 0° and 180°.
    let sign = if dot4(a.q, b.q) < 0.0 { -1.0 } else { 1.0 };
    let mut diff = [0.0; 4];
    let mut sum = [0.0; 4];
    for i in 0..4 {
        diff[i] = a.q[i] - sign * b.q[i];
        sum[i] = a.q[i] + sign * b.q[i];
    }
    let rotation_err = (4.0 * norm4(diff).atan2(norm4(sum))).to_degrees().min(180.0);
    PoseDistance {
        translation_err,
        rotation_err,
    }
}

/// Linear interpolation of translation, shortest-arc slerp of rotation.
pub fn interpolate(a: &Pose7, b: &Pose7, s: f64) -> Result<Pose7> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Range(format!("interpolation parameter {s} not in [0, 1]")));
    }
    if s == 0.0 {
        return canonicalize(a);
    }
    if s == 1.0 {
        return canonicalize(b);
    }
    let t = [
        a.t[0] + (b.t[0] - a.t[0]) * s,
        a.t[1] + (b.t[1] - a.t[1]) * s,
        a.t[2] + (b.t[2] - a.t[2]) * s,
    ];
    Pose7::new(t, slerp(a.q, b.q, s))
}

fn slerp(qa: Quat, qb: Quat, s: f64) -> Quat {
    let mut qb = qb;
    let mut d = dot4(qa, qb);
    if d < 0.0 {
        qb = [-qb[0], -qb[1], -qb[2], -qb[3]];
        d = -d;
    }
    let d = d.min(1.0);
    let theta = d.acos();
    let (wa, wb) = if theta < 1e-9 {
        (1.0 - s, s)
    } else {
        let st = theta.sin();
        (((1.0 - s) * theta).sin() / st, (s * theta).sin() / st)
    };
    [
        wa * qa[0] + wb * qb[0],
        wa * qa[1] + wb * qb[1],
        wa * qa[2] + wb * qb[2],
        wa * qa[3] + wb * qb[3],
    ]
}

/// Quaternion for a rotation of `angle_deg` about `axis`.
pub fn axis_angle(axis: Vec3, angle_deg: f64) -> Quat {
    let a = normalize3(axis).unwrap_or([1.0, 0.0, 0.0]);
    let h = angle_deg.to_radians() / 2.0;
    let s = h.sin();
    [h.cos(), a[0] * s, a[1] * s, a[2] * s]
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_to_matrix(q: Quat) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation matrix to quaternion (Shepperd's method). Not canonicalized.
pub fn matrix_to_quat(m: &[[f64; 3]; 3]) -> Quat {
    let tr = m[0][0] + m[1][1] + m[2][2];
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    }
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize3(a: Vec3) -> Option<Vec3> {
    let n = norm3(a);
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

fn dot4(a: Quat, b: Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

fn norm4(a: Quat) -> f64 {
    dot4(a, a).sqrt()
}

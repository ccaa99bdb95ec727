//! Hand-state domain types, box geometry and the synthetic joint rig.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::XorShift64;

pub const NUM_JOINTS: usize = 21;
pub const DEFAULT_POSE_DIM: usize = 48;
/// Any trajectory coordinate beyond this many centimetres is rejected.
pub const TRAJ_LIMIT_CM: f64 = 10_000.0;
/// Seed of the rig basis (0xDEADBEEF).
pub const RIG_SEED: u64 = 3_735_928_559;
/// Bound on `‖B·θ‖∞` (cm) for `‖θ‖∞ ≤ π`.
pub const RIG_MAX_DISPLACEMENT_CM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HandError {
    #[error("invalid box: {0}")]
    Box(String),
    #[error("invalid pose: {0}")]
    Pose(String),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("background is not a hand type")]
    BackgroundHand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HandType {
    Left,
    Right,
    Background,
}

impl HandType {
    pub const HANDS: [HandType; 2] = [HandType::Left, HandType::Right];

    /// Class index used by the type head and the file format.
    pub fn code(self) -> u8 {
        match self {
            HandType::Left => 0,
            HandType::Right => 1,
            HandType::Background => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HandType::Left),
            1 => Some(HandType::Right),
            2 => Some(HandType::Background),
            _ => None,
        }
    }

    pub fn class(self) -> usize {
        self.code() as usize
    }
}

/// Axis-aligned box in normalised image coordinates, centre form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, HandError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), HandError> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(HandError::Box(format!("non-finite {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(HandError::Box(format!("centre outside [0,1]: {self:?}")));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(HandError::Box(format!("size outside (0,1]: {self:?}")));
        }
        Ok(())
    }

    /// `[x1, y1, x2, y2]`, unclamped.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    /// Corners clipped to the unit square.
    pub fn clamped_corners(&self) -> [f64; 4] {
        self.corners().map(|v| v.clamp(0.0, 1.0))
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        Self { cx: 0.5 * (c[0] + c[2]), cy: 0.5 * (c[1] + c[3]), w: c[2] - c[0], h: c[3] - c[1] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn corner_area(c: &[f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

/// IoU of corner-form boxes; 0 when either box has zero area.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (aa, ab) = (corner_area(&a), corner_area(&b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

/// Generalised IoU of corner-form boxes; 0 when either box has zero area.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (aa, ab) = (corner_area(&a), corner_area(&b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = aa + ab - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (enclose - union) / enclose
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(a.corners(), b.corners())
}

pub fn bbox_giou(a: &BBox, b: &BBox) -> f64 {
    giou_corners(a.corners(), b.corners())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPose(pub Vec<f64>);

impl HandPose {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self, dim: usize) -> Result<(), HandError> {
        if self.0.len() != dim {
            return Err(HandError::Pose(format!("expected {dim} values, got {}", self.0.len())));
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(HandError::Pose("non-finite value".into()));
        }
        Ok(())
    }
}

/// Wrist position in camera-metric centimetres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Trajectory3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Self) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn validate(&self) -> Result<(), HandError> {
        for v in self.as_array() {
            if !v.is_finite() || v.abs() > TRAJ_LIMIT_CM {
                return Err(HandError::Trajectory(format!("{self:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub hand_type: HandType,
    pub bbox: BBox,
    pub pose: HandPose,
    pub traj: Trajectory3D,
    pub visible: bool,
}

impl HandState {
    pub fn validate(&self, pose_dim: usize) -> Result<(), HandError> {
        if self.hand_type == HandType::Background {
            return Err(HandError::BackgroundHand);
        }
        self.bbox.validate()?;
        self.pose.validate(pose_dim)?;
        self.traj.validate()
    }
}

/// 21 joints in centimetres, joint 0 is the wrist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointSet {
    pub joints: [[f64; 3]; NUM_JOINTS],
}

impl JointSet {
    pub fn wrist(&self) -> [f64; 3] {
        self.joints[0]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Option<Self> {
        if values.len() != 3 * NUM_JOINTS {
            return None;
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, chunk) in values.chunks(3).enumerate() {
            joints[j] = [chunk[0], chunk[1], chunk[2]];
        }
        Some(Self { joints })
    }
}

/// Fixed linear joint model standing in for a licensed hand mesh:
/// `joints = rest + B·θ + traj`, with the wrist rows of `B` and the wrist
/// rest offset equal to zero.
#[derive(Clone, Debug)]
pub struct JointRig {
    pose_dim: usize,
    rest: [[f64; 3]; NUM_JOINTS],
    /// Row-major `63 × pose_dim`.
    basis: Vec<f64>,
}

fn rest_offsets() -> [[f64; 3]; NUM_JOINTS] {
    let mut rest = [[0.0; 3]; NUM_JOINTS];
    for finger in 0..5 {
        // thumb splays sideways, the other four fan out along +y
        let (base_x, dir_x, dir_y) = if finger == 0 {
            (-2.5, -0.8, 0.6)
        } else {
            (-1.5 + 1.0 * finger as f64, 0.15 * (finger as f64 - 2.5), 1.0)
        };
        for k in 1..=4 {
            let seg = k as f64;
            rest[1 + 4 * finger + (k - 1)] = [
                base_x + dir_x * 2.0 * seg,
                3.0 + dir_y * 2.2 * seg,
                -0.3 * seg,
            ];
        }
    }
    rest
}

impl JointRig {
    pub fn new(pose_dim: usize) -> Self {
        let mut rng = XorShift64::new(RIG_SEED);
        let rows = 3 * NUM_JOINTS;
        let mut basis = vec![0.0; rows * pose_dim];
        for r in 3..rows {
            for c in 0..pose_dim {
                basis[r * pose_dim + c] = rng.uniform(-1.0, 1.0);
            }
        }
        let max_l1 = (0..rows)
            .map(|r| basis[r * pose_dim..(r + 1) * pose_dim].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if max_l1 > 0.0 {
            let s = RIG_MAX_DISPLACEMENT_CM / (std::f64::consts::PI * max_l1);
            basis.iter_mut().for_each(|v| *v *= s);
        }
        Self { pose_dim, rest: rest_offsets(), basis }
    }

    /// Shared rig for the default pose dimension.
    pub fn standard() -> &'static JointRig {
        static RIG: OnceLock<JointRig> = OnceLock::new();
        RIG.get_or_init(|| JointRig::new(DEFAULT_POSE_DIM))
    }

    pub fn for_dim(pose_dim: usize) -> std::borrow::Cow<'static, JointRig> {
        if pose_dim == DEFAULT_POSE_DIM {
            std::borrow::Cow::Borrowed(Self::standard())
        } else {
            std::borrow::Cow::Owned(Self::new(pose_dim))
        }
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn rest(&self) -> &[[f64; 3]; NUM_JOINTS] {
        &self.rest
    }

    pub fn joints(&self, pose: &HandPose, traj: &Trajectory3D) -> JointSet {
        assert_eq!(pose.dim(), self.pose_dim, "pose dimension");
        let t = traj.as_array();
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, joint) in joints.iter_mut().enumerate() {
            for k in 0..3 {
                let row = &self.basis[(3 * j + k) * self.pose_dim..(3 * j + k + 1) * self.pose_dim];
                let disp: f64 = row.iter().zip(&pose.0).map(|(b, th)| b * th).sum();
                joint[k] = self.rest[j][k] + disp + t[k];
            }
        }
        JointSet { joints }
    }
}

/// Joints from the default-dimension rig (or a rig of the pose's dimension).
pub fn synthetic_joints(pose: &HandPose, traj: &Trajectory3D) -> JointSet {
    JointRig::for_dim(pose.dim()).joints(pose, traj)
}

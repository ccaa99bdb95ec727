//! Synthetic clip generator and the clip file format.
//!
//! A clip file is a JSON manifest plus a sibling binary blob (`.bin`).
//! Each clip occupies one contiguous blob range holding, little-endian:
//! `T` frames of `H×W×3` f32 pixels, then per frame a `u8` hand count
//! followed by fixed-layout hand records
//! `type u8, visible u8, bbox 4×f32, theta P×f32, traj 3×f32,
//! joints_present u8, joints 63×f32`. The manifest stores each range's
//! offset, length and CRC-32.
//!
//! Each generated clip draws from its own [`XorShift64::derive`] stream
//! keyed by `(seed, scenario, clip_index)`; the data path only uses `+ − × ÷` and comparisons,
//! so clips are bit-identical across platforms.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::handstate::{BBox, HandPose, HandState, HandType, JointRig, JointSet, Trajectory3D, DEFAULT_POSE_DIM, NUM_JOINTS};
use crate::numerics::Tensor;
use crate::rng::XorShift64;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const FORMAT_NAME: &str = "handcast-clips";
pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_RASTER: usize = 64;
/// Pinhole focal length in normalised image units.
pub const FOCAL: f64 = 0.8;
/// Physical hand extent used for the projected box, cm.
pub const HAND_SIZE_CM: f64 = 8.0;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("{path}: truncated, need {needed} bytes but only {available} present")]
    Truncated { path: PathBuf, needed: u64, available: u64 },
    #[error("clip {clip}: checksum mismatch (manifest {expected:08x}, data {found:08x})")]
    Checksum { clip: String, expected: u32, found: u32 },
    #[error("clip {clip}: bad blob range: {detail}")]
    Offset { clip: String, detail: String },
    #[error("malformed data: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Reach,
    PickAndReturn,
    TwoHands,
    Idle,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Reach, Scenario::PickAndReturn, Scenario::TwoHands, Scenario::Idle];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Reach => "reach",
            Scenario::PickAndReturn => "pick_and_return",
            Scenario::TwoHands => "two_hands",
            Scenario::Idle => "idle",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        match key.as_str() {
            "reach" => Ok(Scenario::Reach),
            "pickandreturn" => Ok(Scenario::PickAndReturn),
            "twohands" => Ok(Scenario::TwoHands),
            "idle" => Ok(Scenario::Idle),
            _ => Err(Error::Usage(format!("unknown scenario {s:?} (reach|pick_and_return|two_hands|idle)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtHand {
    pub state: HandState,
    pub joints: Option<JointSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: String,
    pub instruction: String,
    /// `H×W×3` rasters.
    pub frames: Vec<Tensor<f32>>,
    pub gt: Vec<Vec<GtHand>>,
    pub camera_note: String,
}

impl ClipSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn states(&self, t: usize) -> Vec<HandState> {
        self.gt[t].iter().map(|h| h.state.clone()).collect()
    }

    pub fn joints(&self, t: usize) -> Vec<Option<JointSet>> {
        self.gt[t].iter().map(|h| h.joints).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenOptions {
    pub frames: usize,
    pub raster: usize,
    pub pose_dim: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { frames: DEFAULT_FRAMES, raster: DEFAULT_RASTER, pose_dim: DEFAULT_POSE_DIM }
    }
}

pub fn generate_synthetic(seed: u64, scenario: Scenario, count: usize) -> Vec<ClipSample> {
    generate_with(seed, scenario, count, &GenOptions::default())
}

pub fn generate_with(seed: u64, scenario: Scenario, count: usize, opts: &GenOptions) -> Vec<ClipSample> {
    (0..count).map(|i| generate_clip(seed, scenario, i, opts)).collect()
}

/// Smoothstep `3s² − 2s³` on `[0, 1]`.
fn ease(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Rounds through f32 so files store the value exactly.
fn q(v: f64) -> f64 {
    v as f32 as f64
}

type Point = [f64; 3];

/// Position along `(frame, point)` waypoints with eased segments; held
/// constant after the last one.
fn along(waypoints: &[(usize, Point)], t: usize) -> Point {
    let mut cur = waypoints[0].1;
    for w in waypoints.windows(2) {
        let ((t0, a), (t1, b)) = (w[0], w[1]);
        if t <= t0 {
            break;
        }
        let s = if t >= t1 { 1.0 } else { ease((t - t0) as f64 / (t1 - t0) as f64) };
        cur = [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s];
    }
    cur
}

fn bucket(p: &Point) -> String {
    let side = if p[0] < -5.0 {
        "left"
    } else if p[0] > 5.0 {
        "right"
    } else {
        "centre"
    };
    let depth = if p[2] < 50.0 { "near" } else { "far" };
    format!("{depth} {side}")
}

fn hand_name(ty: HandType) -> &'static str {
    if ty == HandType::Left {
        "left"
    } else {
        "right"
    }
}

struct Track {
    ty: HandType,
    waypoints: Vec<(usize, Point)>,
    theta: (Vec<f64>, Vec<f64>),
}

fn random_point(rng: &mut XorShift64, x: (f64, f64)) -> Point {
    [rng.uniform(x.0, x.1), rng.uniform(-12.0, 12.0), rng.uniform(42.0, 58.0)]
}

fn generate_clip(seed: u64, scenario: Scenario, index: usize, opts: &GenOptions) -> ClipSample {
    let mut rng = XorShift64::derive(seed, ((scenario as u64) << 32) | index as u64);
    let t_len = opts.frames.max(2);
    let last = t_len - 1;
    let p = opts.pose_dim;
    let theta = |rng: &mut XorShift64| -> Vec<f64> { (0..p).map(|_| rng.uniform(-1.0, 1.0)).collect() };
    let single = if rng.chance(0.5) { HandType::Left } else { HandType::Right };
    // disjoint halves so two-hand blobs never overlap
    let side = |ty: HandType| if ty == HandType::Left { (-14.0, -5.0) } else { (5.0, 14.0) };

    let (tracks, instruction) = match scenario {
        Scenario::Reach => {
            let (a, b) = (random_point(&mut rng, side(single)), random_point(&mut rng, (-14.0, 14.0)));
            let th = (theta(&mut rng), theta(&mut rng));
            let text = format!("reach to the {} with the {} hand", bucket(&b), hand_name(single));
            (vec![Track { ty: single, waypoints: vec![(0, a), (last, b)], theta: th }], text)
        }
        Scenario::PickAndReturn => {
            let (a, b) = (random_point(&mut rng, side(single)), random_point(&mut rng, (-14.0, 14.0)));
            let th = (theta(&mut rng), theta(&mut rng));
            let (pick, back) = (t_len / 2 - 1, (3 * t_len) / 4 - 1);
            let text = format!("pick the object at the {} and return it to the start", bucket(&b));
            (vec![Track { ty: single, waypoints: vec![(0, a), (pick.max(1), b), (back.max(2), a)], theta: th }], text)
        }
        Scenario::TwoHands => {
            let mut tracks = Vec::new();
            for ty in HandType::HANDS {
                let (a, b) = (random_point(&mut rng, side(ty)), random_point(&mut rng, side(ty)));
                let th = (theta(&mut rng), theta(&mut rng));
                tracks.push(Track { ty, waypoints: vec![(0, a), (last, b)], theta: th });
            }
            (tracks, "reach forward with both hands".to_string())
        }
        Scenario::Idle => {
            let a = random_point(&mut rng, side(single));
            let th = theta(&mut rng);
            let text = format!("keep the {} hand still", hand_name(single));
            (vec![Track { ty: single, waypoints: vec![(0, a)], theta: (th.clone(), th) }], text)
        }
    };

    // static per-clip background texture
    let r = opts.raster;
    let background: Vec<f32> = (0..r * r * 3).map(|_| rng.uniform(0.0, 0.3) as f32).collect();
    let rig = JointRig::for_dim(p);
    let mut frames = Vec::with_capacity(t_len);
    let mut gt = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut px = background.clone();
        let mut hands = Vec::with_capacity(tracks.len());
        for tr in &tracks {
            let pos = along(&tr.waypoints, t).map(q);
            let s = ease(t as f64 / last as f64);
            let pose = HandPose(tr.theta.0.iter().zip(&tr.theta.1).map(|(a, b)| q(a + (b - a) * s)).collect());
            let bbox = project_box(&pos, r);
            paint(&mut px, r, &bbox, tr.ty);
            let traj = Trajectory3D::new(pos[0], pos[1], pos[2]);
            let j = rig.joints(&pose, &traj);
            let joints = JointSet { joints: j.joints.map(|v| v.map(q)) };
            hands.push(GtHand { state: HandState { hand_type: tr.ty, bbox, pose, traj, visible: true }, joints: Some(joints) });
        }
        frames.push(Tensor::new(vec![r, r, 3], px).expect("frame size"));
        gt.push(hands);
    }
    ClipSample {
        id: format!("{}-{seed}-{index:04}", scenario.name()),
        instruction,
        frames,
        gt,
        camera_note: format!("synthetic pinhole, focal {FOCAL}, raster {r}x{r}, scenario {}", scenario.name()),
    }
}

/// Pixel-snapped projection of a hand-sized square centred at `pos`.
fn project_box(pos: &Point, raster: usize) -> BBox {
    let rf = raster as f64;
    let (u, v) = (0.5 + FOCAL * pos[0] / pos[2], 0.5 + FOCAL * pos[1] / pos[2]);
    let half = 0.5 * FOCAL * HAND_SIZE_CM / pos[2];
    let snap = |x: f64| (x * rf).round().clamp(0.0, rf);
    let (mut x1, mut y1, mut x2, mut y2) = (snap(u - half), snap(v - half), snap(u + half), snap(v + half));
    if x2 <= x1 {
        (x1, x2) = if x1 >= rf { (rf - 1.0, rf) } else { (x1, x1 + 1.0) };
    }
    if y2 <= y1 {
        (y1, y2) = if y1 >= rf { (rf - 1.0, rf) } else { (y1, y1 + 1.0) };
    }
    BBox::from_corners([x1 / rf, y1 / rf, x2 / rf, y2 / rf])
}

fn blob_colour(ty: HandType) -> [f32; 3] {
    match ty {
        HandType::Left => [1.0, 0.75, 0.3],
        _ => [0.3, 0.8, 1.0],
    }
}

fn paint(px: &mut [f32], raster: usize, bbox: &BBox, ty: HandType) {
    let rf = raster as f64;
    let c = bbox.corners().map(|v| (v * rf).round() as usize);
    let colour = blob_colour(ty);
    for y in c[1]..c[3] {
        for x in c[0]..c[2] {
            px[(y * raster + x) * 3..(y * raster + x) * 3 + 3].copy_from_slice(&colour);
        }
    }
}

/// Pixel extent of the blob painted for `ty`, as a normalised box.
pub fn blob_extent(frame: &Tensor<f32>, ty: HandType) -> Option<BBox> {
    let r = frame.shape()[0];
    let colour = blob_colour(ty);
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..r {
        for x in 0..r {
            let p = &frame.data()[(y * r + x) * 3..(y * r + x) * 3 + 3];
            if p == colour {
                (x1, y1, x2, y2) = (x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1));
            }
        }
    }
    (x1 != usize::MAX).then(|| BBox::from_corners([x1, y1, x2, y2].map(|v| v as f64 / r as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClipRecord {
    id: String,
    instruction: String,
    camera_note: String,
    frames: usize,
    raster: [usize; 3],
    pose_dim: usize,
    offset: u64,
    length: u64,
    crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    blob_len: u64,
    clips: Vec<ClipRecord>,
    /// Free-form provenance such as the effective run config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn encode_clip(clip: &ClipSample) -> Result<(Vec<u8>, usize)> {
    let frames = clip.frames.len();
    if clip.gt.len() != frames {
        return Err(Error::Usage(format!("clip {}: {} frames but {} annotations", clip.id, frames, clip.gt.len())));
    }
    let shape = clip.frames.first().map(|f| f.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 3]);
    let pose_dim = clip.gt.iter().flatten().map(|h| h.state.pose.dim()).next().unwrap_or(0);
    let mut out = Vec::new();
    for f in &clip.frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::Usage(format!("clip {}: frame shapes differ", clip.id)));
        }
        for &v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for hands in &clip.gt {
        out.push(u8::try_from(hands.len()).map_err(|_| Error::Usage("too many hands in a frame".into()))?);
        for h in hands {
            let s = &h.state;
            if s.pose.dim() != pose_dim {
                return Err(Error::Usage(format!("clip {}: mixed pose dimensions", clip.id)));
            }
            out.push(s.hand_type.code());
            out.push(s.visible as u8);
            s.bbox.as_array().iter().for_each(|&v| put(&mut out, v));
            s.pose.0.iter().for_each(|&v| put(&mut out, v));
            s.traj.as_array().iter().for_each(|&v| put(&mut out, v));
            match &h.joints {
                Some(j) => {
                    out.push(1);
                    j.flat().iter().for_each(|&v| put(&mut out, v));
                }
                None => {
                    out.push(0);
                    out.resize(out.len() + 4 * 3 * NUM_JOINTS, 0);
                }
            }
        }
    }
    Ok((out, pose_dim))
}

/// Writes `path` (manifest) and its `.bin` blob.
pub fn write_clipfile(clips: &[ClipSample], path: &Path) -> Result<()> {
    write_clipfile_with_meta(clips, path, None)
}

pub fn write_clipfile_with_meta(clips: &[ClipSample], path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
    let blob_file = blob_path(path);
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(clips.len());
    for clip in clips {
        let (bytes, pose_dim) = encode_clip(clip)?;
        let shape = clip.frames.first().map(|f| f.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 3]);
        records.push(ClipRecord {
            id: clip.id.clone(),
            instruction: clip.instruction.clone(),
            camera_note: clip.camera_note.clone(),
            frames: clip.frames.len(),
            raster: [shape[0], shape[1], shape[2]],
            pose_dim,
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        blob: blob_file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_len: blob.len() as u64,
        clips: records,
        meta,
    };
    std::fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    clip: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Malformed(format!("clip {}: record runs past its range", self.clip)).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

fn decode_clip(rec: &ClipRecord, bytes: &[u8]) -> Result<ClipSample> {
    let malformed = |m: String| -> Error { FormatError::Malformed(format!("clip {}: {m}", rec.id)).into() };
    let [h, w, c] = rec.raster;
    let mut rd = Reader { bytes, pos: 0, clip: &rec.id };
    let mut frames = Vec::with_capacity(rec.frames);
    for _ in 0..rec.frames {
        let raw = rd.take(4 * h * w * c)?;
        let px: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        frames.push(Tensor::new(vec![h, w, c], px).map_err(|e| malformed(e.to_string()))?);
    }
    let mut gt = Vec::with_capacity(rec.frames);
    for _ in 0..rec.frames {
        let n = rd.u8()?;
        let mut hands = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let code = rd.u8()?;
            let hand_type = HandType::from_code(code).ok_or_else(|| malformed(format!("hand type code {code}")))?;
            let visible = match rd.u8()? {
                0 => false,
                1 => true,
                v => return Err(malformed(format!("visible flag {v}"))),
            };
            let b = rd.f32s(4)?;
            let pose = HandPose(rd.f32s(rec.pose_dim)?);
            let t = rd.f32s(3)?;
            let present = rd.u8()?;
            let jv = rd.f32s(3 * NUM_JOINTS)?;
            let joints = match present {
                0 => None,
                1 => Some(JointSet::from_flat(&jv).expect("63 values")),
                v => return Err(malformed(format!("joints flag {v}"))),
            };
            let state = HandState {
                hand_type,
                bbox: BBox { cx: b[0], cy: b[1], w: b[2], h: b[3] },
                pose,
                traj: Trajectory3D::new(t[0], t[1], t[2]),
                visible,
            };
            if visible {
                state.validate(rec.pose_dim).map_err(|e| malformed(e.to_string()))?;
            }
            hands.push(GtHand { state, joints });
        }
        gt.push(hands);
    }
    if rd.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(ClipSample { id: rec.id.clone(), instruction: rec.instruction.clone(), frames, gt, camera_note: rec.camera_note.clone() })
}

pub fn read_clipfile(path: &Path) -> Result<Vec<ClipSample>> {
    Ok(read_clipfile_with_meta(path)?.0)
}

/// Reads and validates a clip file, returning the clips and any stored
/// provenance record.
pub fn read_clipfile_with_meta(path: &Path) -> Result<(Vec<ClipSample>, Option<serde_json::Value>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))?;
    if probe.version != FORMAT_VERSION {
        return Err(FormatError::Version { found: probe.version, supported: FORMAT_VERSION }.into());
    }
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT_NAME {
        return Err(FormatError::Malformed(format!("unknown format tag {:?}", manifest.format)).into());
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if (blob.len() as u64) < manifest.blob_len {
        return Err(FormatError::Truncated { path: blob_file, needed: manifest.blob_len, available: blob.len() as u64 }.into());
    }
    if blob.len() as u64 > manifest.blob_len {
        return Err(FormatError::Malformed(format!("{}: {} bytes beyond the recorded length", blob_file.display(), blob.len() as u64 - manifest.blob_len)).into());
    }
    let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.clips.len());
    for rec in &manifest.clips {
        let end = rec.offset.checked_add(rec.length).ok_or_else(|| FormatError::Offset {
            clip: rec.id.clone(),
            detail: "offset + length overflows".into(),
        })?;
        if end > manifest.blob_len {
            return Err(FormatError::Offset {
                clip: rec.id.clone(),
                detail: format!("range {}..{end} exceeds blob length {}", rec.offset, manifest.blob_len),
            }
            .into());
        }
        ranges.push((rec.offset, end, &rec.id));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(FormatError::Offset { clip: w[1].2.to_string(), detail: format!("overlaps clip {}", w[0].2) }.into());
        }
    }
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for rec in &manifest.clips {
        let bytes = &blob[rec.offset as usize..(rec.offset + rec.length) as usize];
        let found = crc32fast::hash(bytes);
        if found != rec.crc32 {
            return Err(FormatError::Checksum { clip: rec.id.clone(), expected: rec.crc32, found }.into());
        }
        clips.push(decode_clip(rec, bytes)?);
    }
    Ok((clips, manifest.meta))
}

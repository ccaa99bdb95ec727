//! Forecast evaluation: ADE, FDE, wrist-aligned JPE, rigid-Procrustes
//! PA-JPE and box Recall@IoU. Distances are in centimetres.

use serde::{Deserialize, Serialize};

use crate::handstate::{bbox_iou, HandState, HandType, JointRig, JointSet, Trajectory3D};
use crate::matchloss::hungarian;
use crate::numerics::{det, mat_mul, svd3, transpose, Mat3, Tensor};
use crate::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Usage(format!("trajectory lengths differ: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Usage("empty trajectory".into()));
    }
    Ok(())
}

pub fn ade(pred: &[Trajectory3D], gt: &[Trajectory3D]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, g)| p.distance(g)).sum::<f64>() / pred.len() as f64)
}

pub fn fde(pred: &[Trajectory3D], gt: &[Trajectory3D]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    Ok(pred[pred.len() - 1].distance(&gt[gt.len() - 1]))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean_joint_error(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(p, g)| dist(*p, *g)).sum::<f64>() / a.len() as f64
}

/// Mean per-joint distance after moving both wrists to the origin.
pub fn jpe(pred: &JointSet, gt: &JointSet) -> f64 {
    let (pw, gw) = (pred.wrist(), gt.wrist());
    let p: Vec<[f64; 3]> = pred.joints.iter().map(|j| [j[0] - pw[0], j[1] - pw[1], j[2] - pw[2]]).collect();
    let g: Vec<[f64; 3]> = gt.joints.iter().map(|j| [j[0] - gw[0], j[1] - gw[1], j[2] - gw[2]]).collect();
    mean_joint_error(&p, &g)
}

fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / points.len() as f64)
}

/// Best rigid (optionally similarity) map of `pred` onto `gt`:
/// `s·R·(pred − c_pred) + c_gt`, `R` a proper rotation. Coincident point
/// sets fall back to matching centroids.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]], with_scale: bool) -> Result<Vec<[f64; 3]>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Usage(format!("procrustes needs equal non-empty point sets, got {} and {}", pred.len(), gt.len())));
    }
    let (cp, cg) = (centroid(pred), centroid(gt));
    let p: Vec<[f64; 3]> = pred.iter().map(|x| [x[0] - cp[0], x[1] - cp[1], x[2] - cp[2]]).collect();
    let g: Vec<[f64; 3]> = gt.iter().map(|x| [x[0] - cg[0], x[1] - cg[1], x[2] - cg[2]]).collect();
    let norm_p: f64 = p.iter().flatten().map(|v| v * v).sum();
    let norm_g: f64 = g.iter().flatten().map(|v| v * v).sum();
    let translate = || pred.iter().map(|x| [x[0] - cp[0] + cg[0], x[1] - cp[1] + cg[1], x[2] - cp[2] + cg[2]]).collect();
    if norm_p == 0.0 || norm_g == 0.0 {
        return Ok(translate());
    }
    // cross-covariance H = Σ p gᵀ
    let mut h: Mat3 = [[0.0; 3]; 3];
    for (a, b) in p.iter().zip(&g) {
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += a[i] * b[j];
            }
        }
    }
    let svd = svd3(&h)?;
    // R = V·diag(1, 1, d)·Uᵀ
    let vut = mat_mul(&svd.v, &transpose(&svd.u));
    let d = if det(&vut) < 0.0 { -1.0 } else { 1.0 };
    let mut vd = svd.v;
    for row in vd.iter_mut() {
        row[2] *= d;
    }
    let r = mat_mul(&vd, &transpose(&svd.u));
    let s = if with_scale { (svd.s[0] + svd.s[1] + d * svd.s[2]) / norm_p } else { 1.0 };
    Ok(p.iter()
        .map(|x| {
            let mut y = [0.0; 3];
            for i in 0..3 {
                y[i] = s * (r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2]) + cg[i];
            }
            y
        })
        .collect())
}

pub fn pa_jpe(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    let aligned = procrustes_align(&pred.joints, &gt.joints, false)?;
    Ok(mean_joint_error(&aligned, &gt.joints))
}

/// Recalled and total ground-truth boxes for one frame. Predictions are
/// matched to ground truths maximising total IoU; a match counts when its
/// IoU reaches `thresh` and the hand types agree.
pub fn recall_counts(pred: &[HandState], gt: &[HandState], thresh: f64) -> Result<(usize, usize)> {
    let pred: Vec<&HandState> = pred.iter().filter(|h| h.visible).collect();
    let gt: Vec<&HandState> = gt.iter().filter(|h| h.visible).collect();
    if pred.is_empty() || gt.is_empty() {
        return Ok((0, gt.len()));
    }
    let cost = Tensor::from_fn(pred.len(), gt.len(), |i, j| -bbox_iou(&pred[i].bbox, &gt[j].bbox));
    let a = hungarian(&cost)?;
    let hits = a
        .pairs
        .iter()
        .filter(|&&(i, j)| -cost.at(i, j) >= thresh && pred[i].hand_type == gt[j].hand_type)
        .count();
    Ok((hits, gt.len()))
}

/// Fraction of ground-truth boxes recalled over all frames; 1 when there
/// are none.
pub fn recall_at_iou(preds: &[Vec<HandState>], gts: &[Vec<HandState>], thresh: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Usage(format!("recall over {} predicted vs {} ground-truth frames", preds.len(), gts.len())));
    }
    let (mut hit, mut total) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let (h, t) = recall_counts(p, g, thresh)?;
        hit += h;
        total += t;
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade_cm: f64,
    pub fde_cm: f64,
    pub jpe_cm: f64,
    pub pa_jpe_cm: f64,
    pub recall_at_05: f64,
    pub frames: usize,
    /// (hand, frame) instances where prediction and ground truth coexist.
    pub hand_frames: usize,
    /// (clip, hand) tracks contributing a final-frame error.
    pub tracks: usize,
    pub gt_boxes: usize,
}

impl MetricReport {
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("ade_cm", format!("{:.6}", self.ade_cm)),
            ("fde_cm", format!("{:.6}", self.fde_cm)),
            ("jpe_cm", format!("{:.6}", self.jpe_cm)),
            ("pa_jpe_cm", format!("{:.6}", self.pa_jpe_cm)),
            ("recall_at_05", format!("{:.6}", self.recall_at_05)),
            ("frames", self.frames.to_string()),
            ("hand_frames", self.hand_frames.to_string()),
            ("tracks", self.tracks.to_string()),
            ("gt_boxes", self.gt_boxes.to_string()),
        ]
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kv: Vec<String> = self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&kv.join(" "))
    }
}

/// One forecast frame: predicted states, ground-truth states, and
/// optionally annotated ground-truth joints aligned with `gt`.
pub struct FrameEval<'a> {
    pub pred: &'a [HandState],
    pub gt: &'a [HandState],
    pub gt_joints: &'a [Option<JointSet>],
}

/// Pools errors over clips. Hands missing from either side of a frame are
/// skipped for the distance metrics and show up in recall instead.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    ade_sum: f64,
    fde_sum: f64,
    jpe_sum: f64,
    pa_sum: f64,
    hand_frames: usize,
    tracks: usize,
    frames: usize,
    recalled: usize,
    gt_boxes: usize,
}

fn find(states: &[HandState], ty: HandType) -> Option<usize> {
    states.iter().position(|h| h.visible && h.hand_type == ty)
}

impl MetricAccumulator {
    pub fn add_clip(&mut self, frames: &[FrameEval<'_>]) -> Result<()> {
        for ty in HandType::HANDS {
            let mut last = None;
            for f in frames {
                let (Some(pi), Some(gi)) = (find(f.pred, ty), find(f.gt, ty)) else { continue };
                let (p, g) = (&f.pred[pi], &f.gt[gi]);
                let d = p.traj.distance(&g.traj);
                self.ade_sum += d;
                last = Some(d);
                let pj = JointRig::for_dim(p.pose.dim()).joints(&p.pose, &p.traj);
                let gj = match f.gt_joints.get(gi).copied().flatten() {
                    Some(j) => j,
                    None => JointRig::for_dim(g.pose.dim()).joints(&g.pose, &g.traj),
                };
                self.jpe_sum += jpe(&pj, &gj);
                self.pa_sum += pa_jpe(&pj, &gj)?;
                self.hand_frames += 1;
            }
            if let Some(d) = last {
                self.fde_sum += d;
                self.tracks += 1;
            }
        }
        for f in frames {
            let (h, t) = recall_counts(f.pred, f.gt, 0.5)?;
            self.recalled += h;
            self.gt_boxes += t;
            self.frames += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.ade_sum += other.ade_sum;
        self.fde_sum += other.fde_sum;
        self.jpe_sum += other.jpe_sum;
        self.pa_sum += other.pa_sum;
        self.hand_frames += other.hand_frames;
        self.tracks += other.tracks;
        self.frames += other.frames;
        self.recalled += other.recalled;
        self.gt_boxes += other.gt_boxes;
    }

    pub fn report(&self) -> MetricReport {
        let per = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        MetricReport {
            ade_cm: per(self.ade_sum, self.hand_frames),
            fde_cm: per(self.fde_sum, self.tracks),
            jpe_cm: per(self.jpe_sum, self.hand_frames),
            pa_jpe_cm: per(self.pa_sum, self.hand_frames),
            recall_at_05: if self.gt_boxes == 0 { 1.0 } else { self.recalled as f64 / self.gt_boxes as f64 },
            frames: self.frames,
            hand_frames: self.hand_frames,
            tracks: self.tracks,
            gt_boxes: self.gt_boxes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handstate::{BBox, HandPose, NUM_JOINTS};
    use crate::rng::XorShift64;

    fn t(x: f64, y: f64, z: f64) -> Trajectory3D {
        Trajectory3D::new(x, y, z)
    }

    #[test]
    fn ade_fde_examples() {
        let gt = vec![t(0.0, 0.0, 0.0), t(1.0, 1.0, 1.0)];
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        let off: Vec<_> = gt.iter().map(|p| t(p.x + 3.0, p.y + 4.0, p.z)).collect();
        assert!((ade(&off, &gt).unwrap() - 5.0).abs() < 1e-12);
        let pred = vec![t(1.0, 0.0, 0.0), t(1.0, 1.0, 4.0)];
        assert!((ade(&pred, &gt).unwrap() - 2.0).abs() < 1e-12);
        assert!((fde(&pred, &gt).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(fde(&pred[..1], &gt[..1]).unwrap(), ade(&pred[..1], &gt[..1]).unwrap());
        assert!(ade(&pred, &gt[..1]).is_err());
    }

    fn random_joints(rng: &mut XorShift64) -> JointSet {
        let mut j = [[0.0; 3]; NUM_JOINTS];
        for p in j.iter_mut() {
            *p = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)];
        }
        JointSet { joints: j }
    }

    fn random_rotation(rng: &mut XorShift64) -> Mat3 {
        // unit quaternion
        let mut q = [0.0; 4];
        let mut n = 0.0;
        while n < 1e-3 {
            q = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            n = q.iter().map(|v| v * v).sum::<f64>();
        }
        let n = n.sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn apply(r: &Mat3, s: f64, tr: [f64; 3], j: &JointSet) -> JointSet {
        let mut out = *j;
        for p in out.joints.iter_mut() {
            let x = *p;
            for i in 0..3 {
                p[i] = s * (r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2]) + tr[i];
            }
        }
        out
    }

    #[test]
    fn jpe_examples() {
        let mut rng = XorShift64::new(3);
        let g = random_joints(&mut rng);
        assert_eq!(jpe(&g, &g), 0.0);
        let moved = apply(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0, [3.0, -2.0, 7.0], &g);
        assert!(jpe(&moved, &g) < 1e-12);
        let mut one = g;
        one.joints[5][1] += 2.1;
        assert!((jpe(&one, &g) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn procrustes_examples() {
        let mut rng = XorShift64::new(4);
        for _ in 0..50 {
            let g = random_joints(&mut rng);
            let r = random_rotation(&mut rng);
            let p = apply(&r, 1.0, [rng.uniform(-9.0, 9.0), 1.0, -4.0], &g);
            assert!(pa_jpe(&p, &g).unwrap() <= 1e-9);
            assert!(pa_jpe(&p, &g).unwrap() <= jpe(&p, &g) + 1e-12);
        }
        let g = random_joints(&mut rng);
        let double = apply(&[[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]], 1.0, [0.0; 3], &g);
        let scaled = procrustes_align(&double.joints, &g.joints, true).unwrap();
        assert!(mean_joint_error(&scaled, &g.joints) <= 1e-9);
        assert!(pa_jpe(&double, &g).unwrap() > 1e-3);
        // reflection is not a proper rotation
        let mirror = apply(&[[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0, [0.0; 3], &g);
        assert!(pa_jpe(&mirror, &g).unwrap() > 1e-3);
        // coincident points: translation only
        let point = JointSet { joints: [[1.0, 2.0, 3.0]; NUM_JOINTS] };
        let aligned = procrustes_align(&point.joints, &g.joints, false).unwrap();
        let c = centroid(&g.joints);
        assert!(aligned.iter().all(|a| dist(*a, c) < 1e-12));
    }

    fn hs(ty: HandType, bbox: BBox, traj: Trajectory3D) -> HandState {
        HandState { hand_type: ty, bbox, pose: HandPose::zeros(4), traj, visible: true }
    }

    #[test]
    fn recall_examples() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let far = BBox::new(0.1, 0.1, 0.05, 0.05).unwrap();
        let gt = vec![vec![hs(HandType::Left, b, t(0.0, 0.0, 0.0))]];
        assert_eq!(recall_at_iou(&gt, &gt, 0.5).unwrap(), 1.0);
        let miss = vec![vec![hs(HandType::Left, far, t(0.0, 0.0, 0.0))]];
        assert_eq!(recall_at_iou(&miss, &gt, 0.5).unwrap(), 0.0);
        let wrong = vec![vec![hs(HandType::Right, b, t(0.0, 0.0, 0.0))]];
        assert_eq!(recall_at_iou(&wrong, &gt, 0.5).unwrap(), 0.0);
        assert_eq!(recall_at_iou(&[vec![]], &[vec![]], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn static_style_accumulation() {
        // gt moves 1 cm/frame along x for 15 frames, prediction stays put
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let start = vec![hs(HandType::Right, b, t(0.0, 0.0, 50.0))];
        let gts: Vec<Vec<HandState>> = (1..=15).map(|k| vec![hs(HandType::Right, b, t(k as f64, 0.0, 50.0))]).collect();
        let frames: Vec<FrameEval> = gts.iter().map(|g| FrameEval { pred: &start, gt: g, gt_joints: &[] }).collect();
        let mut acc = MetricAccumulator::default();
        acc.add_clip(&frames).unwrap();
        let r = acc.report();
        assert!((r.ade_cm - 8.0).abs() < 1e-12);
        assert!((r.fde_cm - 15.0).abs() < 1e-12);
        assert!(r.jpe_cm < 1e-12);
        assert_eq!(r.recall_at_05, 1.0);
        assert_eq!((r.frames, r.hand_frames, r.tracks), (15, 15, 1));
        let mut merged = MetricAccumulator::default();
        merged.merge(&acc);
        merged.merge(&acc);
        assert_eq!(merged.report().ade_cm, r.ade_cm);
        assert!(r.to_string().starts_with("ade_cm=8.000000 "));
    }
}

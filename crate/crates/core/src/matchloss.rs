//! Bipartite matching between decoder queries and ground-truth hands, and
//! the four-term training loss.

use crate::config::Config;
use crate::decoder::{predictions, QueryOutputs, QueryPrediction};
use crate::handstate::{HandState, HandType};
use crate::numerics::{giou_with_grad, NumericsError, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Trajectory errors enter the loss and the matching cost in this unit.
pub const TRAJ_LOSS_UNIT_CM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(query, ground truth)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the matched costs, accumulated in pair order.
    pub total: f64,
}

impl Assignment {
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_type: f64,
    pub lambda_box: f64,
    pub lambda_pose: f64,
    pub lambda_traj: f64,
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_type: 5.0, lambda_box: 2.0, lambda_pose: 2.0, lambda_traj: 2.0, background_weight: 0.1 }
    }
}

impl From<&Config> for LossWeights {
    fn from(c: &Config) -> Self {
        Self {
            lambda_type: c.lambda_type,
            lambda_box: c.lambda_box,
            lambda_pose: c.lambda_pose,
            lambda_traj: c.lambda_traj,
            background_weight: c.background_weight,
        }
    }
}

/// Minimum total cost of a matching of `min(|rows|, |cols|)` pairs within
/// the given sub-matrix (shortest augmenting paths with potentials).
fn optimal_value(cost: &Tensor<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let (rows, cols, at): (&[usize], &[usize], Box<dyn Fn(usize, usize) -> f64>) = if rows.len() <= cols.len() {
        (rows, cols, Box::new(|i, j| cost.at(i, j)))
    } else {
        (cols, rows, Box::new(|i, j| cost.at(j, i)))
    };
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return 0.0;
    }
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            total += at(rows[p[j] - 1], cols[j - 1]);
        }
    }
    total
}

/// Optimal assignment of `min(n, m)` pairs. Among optimal assignments the
/// lexicographically smallest pair list (sorted by query) is returned.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Assignment> {
    if cost.shape().len() != 2 {
        return Err(Error::Numerics(NumericsError::Shape(format!("cost matrix shape {:?}", cost.shape()))));
    }
    if cost.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numerics(NumericsError::NonFinite("NaN in assignment cost".into())));
    }
    if cost.data().iter().any(|v| v.is_infinite()) {
        return Err(Error::Numerics(NumericsError::NonFinite("infinite assignment cost".into())));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let k = n.min(m);
    if k == 0 {
        return Ok(Assignment { pairs: Vec::new(), total: 0.0 });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimal_value(cost, &all_rows, &all_cols);
    let scale: f64 = 1.0 + cost.data().iter().map(|v| v.abs()).sum::<f64>();
    let tol = 1e-12 * scale;

    // Fix pairs one at a time, always taking the smallest (query, gt)
    // that still completes to an optimum.
    let mut pairs = Vec::with_capacity(k);
    let mut fixed = 0.0;
    let mut next_row = 0;
    let mut used_cols = vec![false; m];
    while pairs.len() < k {
        let remaining = k - pairs.len() - 1;
        let mut chosen = None;
        'search: for q in next_row..n {
            let rest_rows: Vec<usize> = (q + 1..n).collect();
            for g in 0..m {
                if used_cols[g] {
                    continue;
                }
                let rest_cols: Vec<usize> = (0..m).filter(|&j| j != g && !used_cols[j]).collect();
                if rest_rows.len().min(rest_cols.len()) != remaining {
                    continue;
                }
                let total = fixed + cost.at(q, g) + optimal_value(cost, &rest_rows, &rest_cols);
                if total <= best + tol {
                    chosen = Some((q, g));
                    break 'search;
                }
            }
        }
        let (q, g) = chosen.expect("an optimal completion always exists");
        fixed += cost.at(q, g);
        used_cols[g] = true;
        next_row = q + 1;
        pairs.push((q, g));
    }
    let total = pairs.iter().map(|&(q, g)| cost.at(q, g)).fold(0.0, |a, b| a + b);
    Ok(Assignment { pairs, total })
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Matching cost of every query against every ground truth, mirroring the
/// loss terms: `λ_type·(1 − p(type)) + λ_box·(L1 + 1 − GIoU)
/// + λ_pose·meanL1(θ) + λ_traj·L1(traj / TRAJ_LOSS_UNIT_CM)`.
pub fn match_cost(preds: &[QueryPrediction], gts: &[HandState], w: &LossWeights) -> Tensor<f64> {
    Tensor::from_fn(preds.len(), gts.len(), |q, g| {
        let (p, t) = (&preds[q], &gts[g]);
        let prob = p.probabilities()[t.hand_type.class()];
        let (pb, tb) = (p.bbox.as_array(), t.bbox.as_array());
        let giou = giou_with_grad(pb, tb).0;
        let pose = l1(&p.pose.0, &t.pose.0) / t.pose.dim().max(1) as f64;
        let traj = l1(&p.traj.as_array(), &t.traj.as_array()) / TRAJ_LOSS_UNIT_CM;
        w.lambda_type * (1.0 - prob) + w.lambda_box * (l1(&pb, &tb) + 1.0 - giou) + w.lambda_pose * pose + w.lambda_traj * traj
    })
}

/// Unweighted loss terms of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub type_ce: f64,
    /// `box_l1 + 1 − box_giou`, averaged over matches.
    pub box_term: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub pose: f64,
    pub traj: f64,
    pub matched: usize,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [("type", self.type_ce), ("box", self.box_term), ("pose", self.pose), ("traj", self.traj)]
    }
}

pub struct FrameLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

fn term_error(term: &str) -> impl Fn(NumericsError) -> Error + '_ {
    move |e| match e {
        NumericsError::NonFinite(_) => Error::NonFiniteLoss { term: term.to_string(), step: 0 },
        other => Error::Numerics(other),
    }
}

/// Matches, then builds the loss on the tape. The assignment is a constant
/// with respect to differentiation.
pub fn composite_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &QueryOutputs,
    gts: &[HandState],
    w: &LossWeights,
) -> Result<FrameLoss> {
    let preds = predictions(tape, out);
    let assignment = hungarian(&match_cost(&preds, gts, w))?;
    composite_loss_with(tape, out, gts, assignment, w)
}

/// Loss under a given assignment.
pub fn composite_loss_with<T: Real>(
    tape: &mut Tape<T>,
    out: &QueryOutputs,
    gts: &[HandState],
    assignment: Assignment,
    w: &LossWeights,
) -> Result<FrameLoss> {
    let queries = tape.shape(out.type_logits).0;
    let mut targets = vec![HandType::Background.class(); queries];
    let mut weights = vec![T::lit(w.background_weight); queries];
    for &(q, g) in &assignment.pairs {
        targets[q] = gts[g].hand_type.class();
        weights[q] = T::one();
    }
    let mut bd = LossBreakdown { matched: assignment.pairs.len(), ..Default::default() };
    let mut parts = Vec::with_capacity(4);

    if weights.iter().any(|&x| x > T::zero()) {
        let ce = tape.cross_entropy(out.type_logits, &targets, &weights).map_err(term_error("type"))?;
        bd.type_ce = tape.value(ce).item().to_f64().unwrap_or(f64::NAN);
        parts.push(tape.scale(ce, T::lit(w.lambda_type)).map_err(term_error("type"))?);
    }

    if !assignment.pairs.is_empty() {
        let inv = 1.0 / assignment.pairs.len() as f64;
        let mut l1s = Vec::new();
        let mut gious = Vec::new();
        let mut poses = Vec::new();
        let mut trajs = Vec::new();
        for &(q, g) in &assignment.pairs {
            let gt = &gts[g];
            let b = tape.slice_rows(out.boxes, q, 1).map_err(term_error("box"))?;
            let tb = gt.bbox.as_array().map(T::lit);
            l1s.push(tape.l1(b, &Tensor::row_vector(&tb)).map_err(term_error("box"))?);
            gious.push(tape.giou(b, tb).map_err(term_error("box"))?);

            let p = tape.slice_rows(out.pose, q, 1).map_err(term_error("pose"))?;
            if gt.pose.dim() != tape.shape(p).1 {
                return Err(Error::Usage(format!("ground-truth pose has {} values, model predicts {}", gt.pose.dim(), tape.shape(p).1)));
            }
            let tp: Vec<T> = gt.pose.0.iter().map(|&v| T::lit(v)).collect();
            let pl = tape.l1(p, &Tensor::row_vector(&tp)).map_err(term_error("pose"))?;
            poses.push(tape.scale(pl, T::lit(1.0 / gt.pose.dim() as f64)).map_err(term_error("pose"))?);

            let t = tape.slice_rows(out.traj, q, 1).map_err(term_error("traj"))?;
            let tt = gt.traj.as_array().map(T::lit);
            let tl = tape.l1(t, &Tensor::row_vector(&tt)).map_err(term_error("traj"))?;
            trajs.push(tape.scale(tl, T::lit(1.0 / TRAJ_LOSS_UNIT_CM)).map_err(term_error("traj"))?);
        }
        let mean = |tape: &mut Tape<T>, vs: &[Var], term: &str| -> Result<Var> {
            let s = if vs.len() == 1 { vs[0] } else { tape.concat_cols(vs).and_then(|c| tape.sum(c)).map_err(term_error(term))? };
            tape.scale(s, T::lit(inv)).map_err(term_error(term))
        };
        let box_l1 = mean(tape, &l1s, "box")?;
        let box_giou = mean(tape, &gious, "box")?;
        let pose = mean(tape, &poses, "pose")?;
        let traj = mean(tape, &trajs, "traj")?;
        let val = |tape: &Tape<T>, v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
        bd.box_l1 = val(tape, box_l1);
        bd.box_giou = val(tape, box_giou);
        bd.box_term = bd.box_l1 + 1.0 - bd.box_giou;
        bd.pose = val(tape, pose);
        bd.traj = val(tape, traj);

        // λ_box·(L1 − GIoU + 1)
        let neg = tape.scale(box_giou, T::lit(-1.0)).map_err(term_error("box"))?;
        let b = tape.add(box_l1, neg).map_err(term_error("box"))?;
        let one = tape.constant(Tensor::scalar(T::one()));
        let b = tape.add(b, one).map_err(term_error("box"))?;
        parts.push(tape.scale(b, T::lit(w.lambda_box)).map_err(term_error("box"))?);
        parts.push(tape.scale(pose, T::lit(w.lambda_pose)).map_err(term_error("pose"))?);
        parts.push(tape.scale(traj, T::lit(w.lambda_traj)).map_err(term_error("traj"))?);
    }

    let total = match parts.len() {
        0 => tape.constant(Tensor::scalar(T::zero())),
        1 => parts[0],
        _ => {
            let c = tape.concat_cols(&parts).map_err(term_error("total"))?;
            tape.sum(c).map_err(term_error("total"))?
        }
    };
    bd.total = tape.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok(FrameLoss { total, breakdown: bd, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handstate::{BBox, HandPose, Trajectory3D};
    use crate::rng::XorShift64;

    fn brute(cost: &Tensor<f64>) -> f64 {
        fn rec(cost: &Tensor<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.cols() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.at(row, j), best);
                    used[j] = false;
                }
            }
        }
        let c = if cost.rows() <= cost.cols() { cost.clone() } else { cost.transpose() };
        let mut best = f64::INFINITY;
        rec(&c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
        best
    }

    #[test]
    fn small_examples() {
        let a = hungarian(&Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 2.0);
        let z = hungarian(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(z.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let wide = hungarian(&Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(wide.pairs, vec![(0, 0), (1, 1)]);
        let tall = hungarian(&Tensor::zeros(&[5, 2])).unwrap();
        assert_eq!(tall.pairs, vec![(0, 0), (1, 1)]);
        let skip = hungarian(&Tensor::matrix(3, 1, vec![5.0, 1.0, 1.0])).unwrap();
        assert_eq!(skip.pairs, vec![(1, 0)]);
        assert!(hungarian(&Tensor::matrix(1, 2, vec![f64::NAN, 0.0])).is_err());
        assert!(hungarian(&Tensor::zeros(&[6, 0])).unwrap().pairs.is_empty());
    }

    #[test]
    fn matches_brute_force_on_tall_matrices() {
        let mut rng = XorShift64::new(5);
        for _ in 0..200 {
            let c = Tensor::from_fn(6, 2, |_, _| rng.uniform(0.0, 10.0));
            let a = hungarian(&c).unwrap();
            assert_eq!(a.pairs.len(), 2);
            assert!((a.total - brute(&c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn integer_ties_resolve_lexicographically() {
        let mut rng = XorShift64::new(8);
        for _ in 0..200 {
            let (n, m) = (1 + rng.below(5) as usize, 1 + rng.below(5) as usize);
            let c = Tensor::from_fn(n, m, |_, _| rng.below(3) as f64);
            let a = hungarian(&c).unwrap();
            assert_eq!(a.total, brute(&c));
            assert!(a.pairs.windows(2).all(|w| w[0].0 < w[1].0));
        }
    }

    fn gt(ty: HandType, seed: u64, p: usize) -> HandState {
        let mut rng = XorShift64::new(seed);
        HandState {
            hand_type: ty,
            bbox: BBox::new(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)).unwrap(),
            pose: HandPose((0..p).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            traj: Trajectory3D::new(rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0), rng.uniform(40.0, 60.0)),
            visible: true,
        }
    }

    fn perfect_outputs(tape: &mut Tape<f64>, gts: &[HandState], queries: usize, p: usize, sat: f64) -> QueryOutputs {
        let mut logits = vec![0.0; queries * 3];
        let mut boxes = vec![0.5; queries * 4];
        let mut pose = vec![0.0; queries * p];
        let mut traj = vec![0.0; queries * 3];
        for q in 0..queries {
            let cls = gts.get(q).map_or(HandType::Background.class(), |g| g.hand_type.class());
            logits[q * 3 + cls] = sat;
            if let Some(g) = gts.get(q) {
                boxes[q * 4..q * 4 + 4].copy_from_slice(&g.bbox.as_array());
                pose[q * p..q * p + p].copy_from_slice(&g.pose.0);
                traj[q * 3..q * 3 + 3].copy_from_slice(&g.traj.as_array());
            }
        }
        QueryOutputs {
            type_logits: tape.constant(Tensor::matrix(queries, 3, logits)),
            boxes: tape.constant(Tensor::matrix(queries, 4, boxes)),
            pose: tape.constant(Tensor::matrix(queries, p, pose)),
            traj: tape.constant(Tensor::matrix(queries, 3, traj)),
        }
    }

    #[test]
    fn match_cost_perfect_is_zero_and_formula() {
        let w = LossWeights::default();
        let g = gt(HandType::Left, 1, 4);
        let mut tape = Tape::new();
        let out = perfect_outputs(&mut tape, &[g.clone()], 1, 4, 60.0);
        let preds = predictions(&tape, &out);
        assert!(match_cost(&preds, &[g.clone()], &w).at(0, 0).abs() < 1e-12);

        let mut p = preds[0].clone();
        p.type_logits = [0.0, 1.0, 0.0];
        p.bbox.cx += 0.05;
        p.pose.0[0] += 0.4;
        p.traj.z += 3.0;
        let e1 = 1f64.exp();
        let prob = 1.0 / (2.0 + e1);
        let giou = crate::handstate::bbox_giou(&p.bbox, &g.bbox);
        let expected = 5.0 * (1.0 - prob) + 2.0 * (0.05 + 1.0 - giou) + 2.0 * 0.4 / 4.0 + 2.0 * 3.0 / TRAJ_LOSS_UNIT_CM;
        assert!((match_cost(&[p], &[g], &w).at(0, 0) - expected).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let w = LossWeights::default();
        let gts = [gt(HandType::Left, 1, 4), gt(HandType::Right, 2, 4)];
        let mut tape = Tape::new();
        let out = perfect_outputs(&mut tape, &gts, 6, 4, 40.0);
        let l = composite_loss(&mut tape, &out, &gts, &w).unwrap();
        assert!(l.breakdown.total < 1e-12, "{:?}", l.breakdown);
        assert_eq!(l.assignment.pairs, vec![(0, 0), (1, 1)]);

        // zero ground truth: only background type loss
        let out = perfect_outputs(&mut tape, &[], 6, 4, 0.0);
        let l = composite_loss(&mut tape, &out, &[], &w).unwrap();
        assert!((l.breakdown.total - 5.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(l.breakdown.matched, 0);
    }

    #[test]
    fn giou_drop_isolated_in_box_term() {
        let w = LossWeights::default();
        let gts = [gt(HandType::Left, 3, 4), gt(HandType::Right, 4, 4)];
        let mut tape = Tape::new();
        let out = perfect_outputs(&mut tape, &gts, 6, 4, 40.0);
        let base = composite_loss(&mut tape, &out, &gts, &w).unwrap();
        let mut boxes = tape.value(out.boxes).to_vec();
        boxes[0] += 0.02;
        let shifted = QueryOutputs { boxes: tape.constant(Tensor::matrix(6, 4, boxes.clone())), ..out };
        let l = composite_loss(&mut tape, &shifted, &gts, &w).unwrap();
        let moved = BBox { cx: boxes[0], cy: boxes[1], w: boxes[2], h: boxes[3] };
        let delta = 1.0 - crate::handstate::bbox_giou(&moved, &gts[0].bbox);
        let expected = 2.0 * (0.02 + delta) / 2.0;
        assert!((l.breakdown.total - base.breakdown.total - expected).abs() < 1e-9);
        assert!((1.0 - l.breakdown.box_giou - delta / 2.0).abs() < 1e-12);
    }

    /// Straight-line recomputation of the loss from plain values.
    fn reference_loss(preds: &[QueryPrediction], gts: &[HandState], a: &Assignment, w: &LossWeights) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (q, p) in preds.iter().enumerate() {
            let (cls, wt) = match a.pairs.iter().find(|x| x.0 == q) {
                Some(&(_, g)) => (gts[g].hand_type.class(), 1.0),
                None => (2, w.background_weight),
            };
            num += wt * -p.probabilities()[cls].ln();
            den += wt;
        }
        let mut total = w.lambda_type * num / den;
        let m = a.pairs.len() as f64;
        for &(q, g) in &a.pairs {
            let (p, t) = (&preds[q], &gts[g]);
            let giou = crate::handstate::bbox_giou(&p.bbox, &t.bbox);
            total += w.lambda_box * (l1(&p.bbox.as_array(), &t.bbox.as_array()) + 1.0 - giou) / m;
            total += w.lambda_pose * l1(&p.pose.0, &t.pose.0) / t.pose.dim() as f64 / m;
            total += w.lambda_traj * l1(&p.traj.as_array(), &t.traj.as_array()) / TRAJ_LOSS_UNIT_CM / m;
        }
        total
    }

    #[test]
    fn random_cases_match_reference() {
        let w = LossWeights::default();
        let mut rng = XorShift64::new(21);
        for case in 0..50 {
            let gts: Vec<_> = match case % 3 {
                0 => vec![],
                1 => vec![gt(HandType::Right, case, 5)],
                _ => vec![gt(HandType::Left, case, 5), gt(HandType::Right, case + 100, 5)],
            };
            let mut tape = Tape::new();
            let mut r = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.uniform(lo, hi)).collect::<Vec<_>>();
            let out = QueryOutputs {
                type_logits: tape.constant(Tensor::matrix(6, 3, r(18, -2.0, 2.0))),
                boxes: tape.constant(Tensor::matrix(6, 4, r(24, 0.1, 0.6))),
                pose: tape.constant(Tensor::matrix(6, 5, r(30, -1.0, 1.0))),
                traj: tape.constant(Tensor::matrix(6, 3, r(18, -30.0, 60.0))),
            };
            let l = composite_loss(&mut tape, &out, &gts, &w).unwrap();
            let preds = predictions(&tape, &out);
            let expected = reference_loss(&preds, &gts, &l.assignment, &w);
            assert!((l.breakdown.total - expected).abs() < 1e-6, "{} vs {expected}", l.breakdown.total);
            assert!(l.breakdown.total >= 0.0);

            // ground-truth order does not matter
            let rev: Vec<_> = gts.iter().rev().cloned().collect();
            let l2 = composite_loss(&mut tape, &out, &rev, &w).unwrap();
            assert!((l2.breakdown.total - l.breakdown.total).abs() < 1e-12);
        }
    }
}

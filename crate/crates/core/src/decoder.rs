//! Set-prediction decoder: learnable queries cross-attend into the fused
//! tokens and each query regresses one candidate hand.

use crate::config::Config;
use crate::encoders::{hand_slots, TokenRole, Tokens, TRAJ_INPUT_ORIGIN};
use crate::handstate::{BBox, HandPose, HandState, HandType, Trajectory3D};
use crate::nn::{self, Init, ParamSpec};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// The trajectory head regresses decimetre offsets from the query anchor;
/// predictions are reported in cm.
pub const TRAJ_OUTPUT_SCALE: f64 = 10.0;

/// Reference state of queries that no input hand anchors.
pub const DEFAULT_ANCHOR_BOX: [f64; 4] = [0.5, 0.5, 0.2, 0.2];
pub const DEFAULT_ANCHOR_TRAJ: [f64; 3] = TRAJ_INPUT_ORIGIN;
const BOX_LOGIT_CLAMP: f64 = 1e-4;

pub fn register_params(spec: &mut ParamSpec, cfg: &Config) {
    let d = cfg.d;
    spec.add("dec.query", cfg.queries, d, Init::Uniform(1.0));
    let slots = cfg.text_context + cfg.grid() * cfg.grid() + 2;
    spec.add("fme.pos", slots, d, Init::Uniform(0.1));
    for i in 0..cfg.decoder_layers {
        spec.decoder_block(&format!("dec.block{i}"), d, cfg.mlp_ratio);
    }
    spec.layer_norm("dec.ln", d);
    spec.linear("dec.type", d, 3);
    spec.linear("dec.box1", d, d);
    // regression heads start at their anchors
    spec.linear_zero("dec.box2", d, 4);
    spec.linear_zero("dec.pose", d, cfg.pose_dim);
    spec.linear_zero("dec.traj", d, 3);
}

/// Head outputs for all queries, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct QueryOutputs {
    /// `Q×3` logits over (Left, Right, Background).
    pub type_logits: Var,
    /// `Q×4` sigmoid-bounded `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `Q×P`.
    pub pose: Var,
    /// `Q×3` centimetres.
    pub traj: Var,
}

/// Per-query reference states the heads refine: box logits, pose and
/// trajectory (cm), one row per query.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors<T> {
    pub box_logits: Tensor<T>,
    pub pose: Tensor<T>,
    pub traj: Tensor<T>,
}

fn logit(v: f64) -> f64 {
    let v = v.clamp(BOX_LOGIT_CLAMP, 1.0 - BOX_LOGIT_CLAMP);
    (v / (1.0 - v)).ln()
}

impl<T: Real> Anchors<T> {
    /// Queries 0 and 1 start from the visible Left and Right input hands;
    /// every other query, and a query whose hand is absent, starts from the
    /// defaults. `None` anchors every query at the defaults.
    pub fn new(cfg: &Config, hands: Option<&[HandState]>) -> Result<Self> {
        let q = cfg.queries;
        let p = cfg.pose_dim;
        let mut b = Vec::with_capacity(q * 4);
        let mut pose = vec![T::zero(); q * p];
        let mut traj = Vec::with_capacity(q * 3);
        let slots = match hands {
            Some(h) => hand_slots(h)?,
            None => [None, None],
        };
        for k in 0..q {
            let hand = slots.get(k).copied().flatten().filter(|h| h.visible);
            match hand {
                Some(h) => {
                    if h.pose.dim() != p {
                        return Err(Error::Usage(format!("pose has {} values, model expects {p}", h.pose.dim())));
                    }
                    b.extend(h.bbox.as_array().map(|v| T::lit(logit(v))));
                    for (o, &v) in pose[k * p..(k + 1) * p].iter_mut().zip(&h.pose.0) {
                        *o = T::lit(v);
                    }
                    traj.extend(h.traj.as_array().map(T::lit));
                }
                None => {
                    b.extend(DEFAULT_ANCHOR_BOX.map(|v| T::lit(logit(v))));
                    traj.extend(DEFAULT_ANCHOR_TRAJ.map(T::lit));
                }
            }
        }
        Ok(Self { box_logits: Tensor::matrix(q, 4, b), pose: Tensor::matrix(q, p, pose), traj: Tensor::matrix(q, 3, traj) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    pub type_logits: [f64; 3],
    pub bbox: BBox,
    pub pose: HandPose,
    pub traj: Trajectory3D,
}

impl QueryPrediction {
    pub fn probabilities(&self) -> [f64; 3] {
        let m = self.type_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.type_logits.map(|v| (v - m).exp());
        let s: f64 = e.iter().sum();
        e.map(|v| v / s)
    }
}

/// Positional slot of every fused token: text positions first, then the
/// visual grid, then the two hand slots, independent of which modalities
/// are present.
fn fused_slots(cfg: &Config, meta: &[crate::encoders::TokenMeta]) -> Vec<usize> {
    let g = cfg.grid();
    let mut text = 0;
    let mut hand = 0;
    meta.iter()
        .map(|m| match m.role {
            TokenRole::Text => {
                text += 1;
                text - 1
            }
            TokenRole::Visual => {
                let (r, c) = m.patch.expect("visual tokens carry a patch");
                cfg.text_context + r * g + c
            }
            TokenRole::Hand => {
                hand += 1;
                cfg.text_context + g * g + hand - 1
            }
        })
        .collect()
}

pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamStore<T>,
    cfg: &Config,
    fused: &Tokens,
    anchors: &Anchors<T>,
) -> Result<QueryOutputs> {
    let (n, d) = tape.shape(fused.var);
    if d != cfg.d || n != fused.len() {
        return Err(Error::Numerics(crate::numerics::NumericsError::Shape(format!(
            "decoder input {n}x{d}, expected {}x{}",
            fused.len(),
            cfg.d
        ))));
    }
    let slots = fused_slots(cfg, &fused.meta);
    let table = nn::param(tape, ps, "fme.pos");
    let pos = tape.embedding(table, &slots)?;
    let mut q = nn::param(tape, ps, "dec.query");
    for i in 0..cfg.decoder_layers {
        q = nn::decoder_block(tape, ps, &format!("dec.block{i}"), q, fused.var, pos, cfg.heads)?;
    }
    let q = nn::layer_norm(tape, ps, "dec.ln", q)?;
    let type_logits = nn::linear(tape, ps, "dec.type", q)?;
    let b = nn::linear(tape, ps, "dec.box1", q)?;
    let b = tape.gelu(b)?;
    let b = nn::linear(tape, ps, "dec.box2", b)?;
    let ab = tape.constant(anchors.box_logits.clone());
    let b = tape.add(b, ab)?;
    let boxes = tape.sigmoid(b)?;
    let pose = nn::linear(tape, ps, "dec.pose", q)?;
    let ap = tape.constant(anchors.pose.clone());
    let pose = tape.add(pose, ap)?;
    let traj = nn::linear(tape, ps, "dec.traj", q)?;
    let traj = tape.scale(traj, T::lit(TRAJ_OUTPUT_SCALE))?;
    let at = tape.constant(anchors.traj.clone());
    let traj = tape.add(traj, at)?;
    Ok(QueryOutputs { type_logits, boxes, pose, traj })
}

pub fn predictions<T: Real>(tape: &Tape<T>, out: &QueryOutputs) -> Vec<QueryPrediction> {
    let logits = tape.value(out.type_logits);
    let boxes = tape.value(out.boxes);
    let pose = tape.value(out.pose);
    let traj = tape.value(out.traj);
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    (0..logits.rows())
        .map(|q| {
            let l = logits.row(q);
            let b = boxes.row(q);
            let t = traj.row(q);
            QueryPrediction {
                type_logits: [f(l[0]), f(l[1]), f(l[2])],
                bbox: BBox { cx: f(b[0]), cy: f(b[1]), w: f(b[2]), h: f(b[3]) },
                pose: HandPose(pose.row(q).iter().map(|&v| f(v)).collect()),
                traj: Trajectory3D::new(f(t[0]), f(t[1]), f(t[2])),
            }
        })
        .collect()
}

/// For Left and Right: the query with the highest probability of that
/// class (lowest index on ties) becomes a visible state when that
/// probability reaches `threshold`.
pub fn select_hands(preds: &[QueryPrediction], threshold: f64) -> Vec<HandState> {
    let mut out = Vec::with_capacity(2);
    for ty in HandType::HANDS {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in preds.iter().enumerate() {
            let prob = p.probabilities()[ty.class()];
            if best.is_none_or(|(_, b)| prob > b) {
                best = Some((i, prob));
            }
        }
        if let Some((i, prob)) = best {
            if prob >= threshold {
                let p = &preds[i];
                let mut bbox = p.bbox;
                bbox.w = bbox.w.max(1e-6);
                bbox.h = bbox.h.max(1e-6);
                out.push(HandState { hand_type: ty, bbox, pose: p.pose.clone(), traj: p.traj, visible: true });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TokenMeta;
    use crate::numerics::{grad_check, Tensor};
    use crate::rng::XorShift64;

    fn pred(logits: [f64; 3]) -> QueryPrediction {
        QueryPrediction {
            type_logits: logits,
            bbox: BBox { cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 },
            pose: HandPose::zeros(2),
            traj: Trajectory3D::default(),
        }
    }

    #[test]
    fn select_hands_threshold_and_ties() {
        let uniform: Vec<_> = (0..6).map(|_| pred([0.0, 0.0, 0.0])).collect();
        assert!(select_hands(&uniform, 0.5).is_empty());

        let mut one = uniform.clone();
        one[3] = pred([10.0, 0.0, 0.0]);
        let hands = select_hands(&one, 0.5);
        assert_eq!(hands.len(), 1);
        assert_eq!(hands[0].hand_type, HandType::Left);

        let mut two = uniform.clone();
        two[1] = pred([8.0, 0.0, 0.0]);
        two[4] = pred([9.0, 0.0, 0.0]);
        two[4].traj.x = 4.0;
        let hands = select_hands(&two, 0.5);
        assert_eq!(hands.len(), 1);
        assert_eq!(hands[0].traj.x, 4.0);

        let mut tie = uniform;
        tie[2] = pred([9.0, 0.0, 0.0]);
        tie[5] = pred([9.0, 0.0, 0.0]);
        tie[2].traj.x = 2.0;
        tie[5].traj.x = 5.0;
        tie[0] = pred([0.0, 7.0, 0.0]);
        let hands = select_hands(&tie, 0.5);
        assert_eq!(hands.len(), 2);
        assert_eq!(hands[0].traj.x, 2.0);
        assert_eq!(hands[1].hand_type, HandType::Right);
    }

    fn small() -> Config {
        Config { d: 8, heads: 2, mlp_ratio: 2, decoder_layers: 2, pose_dim: 3, queries: 3, raster: 16, patch: 8, text_context: 4, ..Config::default() }
    }

    fn fused_tokens<T: Real>(tape: &mut Tape<T>, cfg: &Config, seed: u64) -> Tokens {
        let mut rng = XorShift64::new(seed);
        let mut meta = vec![TokenMeta::text(); cfg.text_context];
        for k in 0..cfg.grid() * cfg.grid() {
            meta.push(TokenMeta::visual(k / cfg.grid(), k % cfg.grid()));
        }
        meta.extend([TokenMeta::hand(), TokenMeta::hand()]);
        let x = Tensor::from_fn(meta.len(), cfg.d, |_, _| T::lit(rng.uniform(-1.0, 1.0)));
        Tokens { var: tape.constant(x), meta }
    }

    fn params<T: Real>(cfg: &Config) -> ParamStore<T> {
        let mut spec = ParamSpec::default();
        register_params(&mut spec, cfg);
        spec.initialise(4)
    }

    #[test]
    fn output_count_and_determinism() {
        let cfg = small();
        let ps = params::<f32>(&cfg);
        let mut tape = Tape::new();
        let f = fused_tokens(&mut tape, &cfg, 1);
        let oa = decode(&mut tape, &ps, &cfg, &f, &Anchors::new(&cfg, None).unwrap()).unwrap();
        let ob = decode(&mut tape, &ps, &cfg, &f, &Anchors::new(&cfg, None).unwrap()).unwrap();
        let (a, b) = (predictions(&tape, &oa), predictions(&tape, &ob));
        assert_eq!(a.len(), cfg.queries);
        assert_eq!(a, b);
        for p in &a {
            for v in p.bbox.as_array() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn token_order_matters() {
        let cfg = small();
        let ps = params::<f64>(&cfg);
        let mut tape = Tape::new();
        let f = fused_tokens(&mut tape, &cfg, 2);
        let out = decode(&mut tape, &ps, &cfg, &f, &Anchors::new(&cfg, None).unwrap()).unwrap();
        let base = predictions(&tape, &out);
        // swap the contents of two visual tokens, keep their positional tags
        let x = tape.value(f.var).clone();
        let mut data = x.to_vec();
        let (i, j) = (cfg.text_context, cfg.text_context + 3);
        for c in 0..cfg.d {
            data.swap(i * cfg.d + c, j * cfg.d + c);
        }
        let swapped = Tokens { var: tape.constant(Tensor::matrix(x.rows(), x.cols(), data)), meta: f.meta.clone() };
        let out = decode(&mut tape, &ps, &cfg, &swapped, &Anchors::new(&cfg, None).unwrap()).unwrap();
        let other = predictions(&tape, &out);
        assert_ne!(base, other);
    }

    #[test]
    fn gradients_through_all_heads() {
        let cfg = small();
        let ps = params::<f64>(&cfg);
        let report = grad_check(
            |tape, p| -> Result<Var> {
                let f = fused_tokens(tape, &cfg, 3);
                let out = decode(tape, p, &cfg, &f, &Anchors::new(&cfg, None)?)?;
                let mut terms = Vec::new();
                for (k, v) in [out.type_logits, out.boxes, out.pose, out.traj].into_iter().enumerate() {
                    let (r, c) = tape.shape(v);
                    // traj is in cm; keep every term O(1) so roundoff stays below the floor
                    let s = if k == 3 { 0.1 } else { 1.0 };
                    let w = tape.constant(Tensor::from_fn(r, c, |i, j| s * (((i * 5 + j * 3 + k) % 7) as f64 - 3.0)));
                    let y = tape.mul(v, w)?;
                    terms.push(tape.mean(y)?);
                }
                let mut total = terms[0];
                for t in &terms[1..] {
                    total = tape.add(total, *t)?;
                }
                Ok(total)
            },
            &ps,
            1e-5,
            5,
            11,
        )
        .unwrap();
        for head in ["dec.type.w", "dec.box2.w", "dec.pose.w", "dec.traj.w"] {
            assert!(report.params.iter().any(|p| p.name == head));
        }
        assert!(report.passed(1e-4), "{:?}", report.worst());
    }
}

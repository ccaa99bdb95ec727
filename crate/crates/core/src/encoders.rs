//! Text, visual and hand encoders producing the token blocks the memory and
//! decoder consume.
//!
//! Scaled-down substitutes: byte-level ids instead of a learned BPE
//! vocabulary, and small transformers instead of large pretrained encoders.

use crate::config::Config;
use crate::handstate::{HandState, HandType};
use crate::nn::{self, Init, ParamSpec};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const VOCAB: usize = 258;

/// Byte-level ids: `[BOS, bytes…, PAD…]`, exactly `context` long.
pub fn tokenize_text(instruction: &str, context: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(context);
    if context == 0 {
        return ids;
    }
    ids.push(BOS);
    ids.extend(instruction.bytes().take(context - 1).map(usize::from));
    ids.resize(context, PAD);
    ids
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Text,
    Visual,
    Hand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub role: TokenRole,
    /// `(row, col)` of the patch for visual tokens.
    pub patch: Option<(usize, usize)>,
}

impl TokenMeta {
    pub fn text() -> Self {
        Self { role: TokenRole::Text, patch: None }
    }

    pub fn hand() -> Self {
        Self { role: TokenRole::Hand, patch: None }
    }

    pub fn visual(row: usize, col: usize) -> Self {
        Self { role: TokenRole::Visual, patch: Some((row, col)) }
    }
}

/// Token block living on a tape.
#[derive(Clone, Debug)]
pub struct Tokens {
    pub var: Var,
    pub meta: Vec<TokenMeta>,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn resolve<T: Real>(&self, tape: &Tape<T>) -> TokenSequence<T> {
        TokenSequence { embeddings: tape.value(self.var).clone(), meta: self.meta.clone() }
    }
}

/// Materialised tokens: `n × d` embeddings with per-token role tags.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub embeddings: Tensor<T>,
    pub meta: Vec<TokenMeta>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn to_tape(&self, tape: &mut Tape<T>) -> Tokens {
        Tokens { var: tape.constant(self.embeddings.clone()), meta: self.meta.clone() }
    }
}

/// Per-slot input width of the hand encoder: one-hot type (3), box (4),
/// pose (P), trajectory (3), visible flag (1).
pub fn hand_input_dim(pose_dim: usize) -> usize {
    3 + 4 + pose_dim + 3 + 1
}

pub fn register_params(spec: &mut ParamSpec, cfg: &Config) {
    let d = cfg.d;
    spec.add("text.embed", VOCAB, d, Init::Uniform(0.1));
    spec.add("text.pos", cfg.text_context, d, Init::Uniform(0.1));
    for i in 0..cfg.text_layers {
        spec.encoder_block(&format!("text.block{i}"), d, cfg.mlp_ratio);
    }
    spec.layer_norm("text.ln", d);

    let patch_len = cfg.patch * cfg.patch * 3;
    spec.linear("visual.proj", patch_len, d);
    spec.add("visual.pos", cfg.grid() * cfg.grid(), d, Init::Uniform(0.1));
    for i in 0..cfg.visual_layers {
        spec.encoder_block(&format!("visual.block{i}"), d, cfg.mlp_ratio);
    }
    spec.layer_norm("visual.ln", d);

    spec.linear("hand.proj", hand_input_dim(cfg.pose_dim), d);
    spec.add("hand.slot", 2, d, Init::Uniform(0.1));
    for i in 0..cfg.hand_layers {
        spec.encoder_block(&format!("hand.block{i}"), d, cfg.mlp_ratio);
    }
    spec.layer_norm("hand.ln", d);
}

/// Encodes tokenized instruction ids; PAD keys are masked in every block.
pub fn encode_text<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, cfg: &Config, ids: &[usize]) -> Result<Tokens> {
    if ids.len() != cfg.text_context {
        return Err(Error::Usage(format!("expected {} text ids, got {}", cfg.text_context, ids.len())));
    }
    if let Some(bad) = ids.iter().find(|&&id| id >= VOCAB) {
        return Err(Error::Usage(format!("text id {bad} outside vocabulary")));
    }
    let table = nn::param(tape, ps, "text.embed");
    let pos = nn::param(tape, ps, "text.pos");
    let x = tape.embedding(table, ids)?;
    let mut x = tape.add(x, pos)?;
    let attend: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    let bias = nn::key_bias_row(tape, &attend);
    for i in 0..cfg.text_layers {
        x = nn::encoder_block(tape, ps, &format!("text.block{i}"), x, Some(bias), cfg.heads)?;
    }
    let x = nn::layer_norm(tape, ps, "text.ln", x)?;
    Ok(Tokens { var: x, meta: vec![TokenMeta::text(); ids.len()] })
}

/// Splits an `H×W×3` frame into `(H/p)·(W/p)` rows of `p·p·3` pixels,
/// patch `(i, j)` covering rows `[p·i, p·i+p)` and columns `[p·j, p·j+p)`.
pub fn patchify<T: Real>(frame: &Tensor<f32>, cfg: &Config) -> Result<Tensor<T>> {
    let (r, p) = (cfg.raster, cfg.patch);
    if frame.shape() != [r, r, 3] {
        return Err(Error::Numerics(crate::numerics::NumericsError::Shape(format!(
            "frame {:?}, expected [{r}, {r}, 3]",
            frame.shape()
        ))));
    }
    let g = cfg.grid();
    let px = frame.data();
    let mut out = Vec::with_capacity(r * r * 3);
    for i in 0..g {
        for j in 0..g {
            for dy in 0..p {
                let y = i * p + dy;
                let start = (y * r + j * p) * 3;
                out.extend(px[start..start + 3 * p].iter().map(|&v| T::lit(v as f64)));
            }
        }
    }
    Ok(Tensor::matrix(g * g, p * p * 3, out))
}

/// Patch projection plus learned 2-D positions, then transformer blocks.
pub fn encode_frame<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, cfg: &Config, frame: &Tensor<f32>) -> Result<Tokens> {
    let patches = patchify::<T>(frame, cfg)?;
    let x = tape.constant(patches);
    let x = nn::linear(tape, ps, "visual.proj", x)?;
    let pos = nn::param(tape, ps, "visual.pos");
    let mut x = tape.add(x, pos)?;
    for i in 0..cfg.visual_layers {
        x = nn::encoder_block(tape, ps, &format!("visual.block{i}"), x, None, cfg.heads)?;
    }
    let x = nn::layer_norm(tape, ps, "visual.ln", x)?;
    let g = cfg.grid();
    let meta = (0..g * g).map(|k| TokenMeta::visual(k / g, k % g)).collect();
    Ok(Tokens { var: x, meta })
}

/// Places states into the (Left, Right) slots; rejects duplicates.
pub fn hand_slots(states: &[HandState]) -> Result<[Option<&HandState>; 2]> {
    let mut slots: [Option<&HandState>; 2] = [None, None];
    for s in states {
        let idx = match s.hand_type {
            HandType::Left => 0,
            HandType::Right => 1,
            HandType::Background => {
                return Err(Error::Usage("background is not a hand state".into()));
            }
        };
        if slots[idx].is_some() {
            return Err(Error::Usage(format!("duplicate {:?} hand state", s.hand_type)));
        }
        slots[idx] = Some(s);
    }
    Ok(slots)
}

// Box and trajectory inputs are centred and scaled to roughly unit spread
// so position is not drowned out by the pose angles.
pub const BOX_INPUT_CENTRE: f64 = 0.5;
pub const BOX_INPUT_GAIN: f64 = 4.0;
/// Workspace centre, cm.
pub const TRAJ_INPUT_ORIGIN: [f64; 3] = [0.0, 0.0, 50.0];
pub const TRAJ_INPUT_SCALE: f64 = 10.0;

/// Raw per-slot input rows and slot visibility.
pub fn hand_inputs<T: Real>(states: &[HandState], pose_dim: usize) -> Result<(Tensor<T>, [bool; 2])> {
    let slots = hand_slots(states)?;
    let width = hand_input_dim(pose_dim);
    let mut data = vec![T::zero(); 2 * width];
    let mut visible = [false; 2];
    for (k, slot) in slots.iter().enumerate() {
        let row = &mut data[k * width..(k + 1) * width];
        let ty = if k == 0 { HandType::Left } else { HandType::Right };
        row[ty.class()] = T::one();
        let Some(s) = slot else { continue };
        if !s.visible {
            continue;
        }
        if s.pose.dim() != pose_dim {
            return Err(Error::Usage(format!("pose has {} values, model expects {pose_dim}", s.pose.dim())));
        }
        visible[k] = true;
        for (i, v) in s.bbox.as_array().iter().enumerate() {
            row[3 + i] = T::lit((*v - BOX_INPUT_CENTRE) * BOX_INPUT_GAIN);
        }
        for (i, v) in s.pose.0.iter().enumerate() {
            row[7 + i] = T::lit(*v);
        }
        for (i, v) in s.traj.as_array().iter().enumerate() {
            row[7 + pose_dim + i] = T::lit((*v - TRAJ_INPUT_ORIGIN[i]) / TRAJ_INPUT_SCALE);
        }
        row[width - 1] = T::one();
    }
    Ok((Tensor::matrix(2, width, data), visible))
}

/// Two hand tokens (Left, Right). Invisible or absent slots are masked
/// out of attention and their output tokens are zero.
pub fn encode_hands<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, cfg: &Config, states: &[HandState]) -> Result<Tokens> {
    let (inputs, visible) = hand_inputs::<T>(states, cfg.pose_dim)?;
    let x = tape.constant(inputs);
    let x = nn::linear(tape, ps, "hand.proj", x)?;
    let slot = nn::param(tape, ps, "hand.slot");
    let mut x = tape.add(x, slot)?;
    let bias = nn::key_bias_row(tape, &visible);
    for i in 0..cfg.hand_layers {
        x = nn::encoder_block(tape, ps, &format!("hand.block{i}"), x, Some(bias), cfg.heads)?;
    }
    let x = nn::layer_norm(tape, ps, "hand.ln", x)?;
    let keep: Vec<T> = visible.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    let keep = tape.constant(Tensor::matrix(2, 1, keep));
    let x = tape.mul(x, keep)?;
    Ok(Tokens { var: x, meta: vec![TokenMeta::hand(); 2] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handstate::{BBox, HandPose, Trajectory3D};
    use crate::numerics::grad_check;

    fn cfg() -> Config {
        Config { d: 16, heads: 2, mlp_ratio: 2, pose_dim: 6, raster: 16, patch: 8, text_context: 8, ..Config::default() }
    }

    fn params<T: Real>(cfg: &Config) -> ParamStore<T> {
        let mut spec = ParamSpec::default();
        register_params(&mut spec, cfg);
        spec.initialise(9)
    }

    fn hand(ty: HandType, shift: f64, pose_dim: usize) -> HandState {
        HandState {
            hand_type: ty,
            bbox: BBox { cx: 0.3 + shift, cy: 0.4, w: 0.2, h: 0.25 },
            pose: HandPose((0..pose_dim).map(|i| 0.1 * i as f64 - shift).collect()),
            traj: Trajectory3D::new(5.0 + shift, -3.0, 45.0),
            visible: true,
        }
    }

    #[test]
    fn tokenizer_examples() {
        let empty = tokenize_text("", 16);
        assert_eq!(empty[0], BOS);
        assert!(empty[1..].iter().all(|&t| t == PAD));
        assert_eq!(&tokenize_text("ab", 16)[..4], &[BOS, 97, 98, PAD]);
        assert_eq!(tokenize_text("ab", 16).len(), 16);
        assert_eq!(tokenize_text("same", 16), tokenize_text("same", 16));
        let long = tokenize_text(&"x".repeat(40), 16);
        assert_eq!(long.len(), 16);
        assert!(long[1..].iter().all(|&t| t == b'x' as usize));
    }

    #[test]
    fn text_shape_and_pad_masking() {
        let cfg = cfg();
        let ps = params::<f64>(&cfg);
        let ids = tokenize_text("hi", cfg.text_context);
        let mut tape = Tape::new();
        let out = encode_text(&mut tape, &ps, &cfg, &ids).unwrap();
        assert_eq!(tape.shape(out.var), (cfg.text_context, cfg.d));
        let base = tape.value(out.var).clone();

        // PAD positions are masked as keys, so changing what a PAD token
        // embeds cannot move the non-PAD outputs.
        let mut ps2 = ps.clone();
        let table = ps.expect("text.embed");
        let mut data = table.to_vec();
        for c in 0..cfg.d {
            data[PAD * cfg.d + c] += 3.0;
        }
        ps2.insert("text.embed", Tensor::matrix(VOCAB, cfg.d, data));
        let mut tape2 = Tape::new();
        let out2 = encode_text(&mut tape2, &ps2, &cfg, &ids).unwrap();
        let other = tape2.value(out2.var);
        for r in 0..3 {
            assert_eq!(base.row(r), other.row(r));
        }
        assert_ne!(base.row(5), other.row(5));
    }

    #[test]
    fn frame_tokens() {
        let cfg = cfg();
        let ps = params::<f64>(&cfg);
        let frame = Tensor::<f32>::new(vec![16, 16, 3], vec![0.0; 16 * 16 * 3]).unwrap();
        let patches = patchify::<f64>(&frame, &cfg).unwrap();
        assert!(patches.data().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let out = encode_frame(&mut tape, &ps, &cfg, &frame).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.meta[3].patch, Some((1, 1)));
        let bad = Tensor::<f32>::new(vec![8, 8, 3], vec![0.0; 192]).unwrap();
        assert!(encode_frame(&mut tape, &ps, &cfg, &bad).is_err());
    }

    #[test]
    fn patch_reads_its_tile() {
        let cfg = Config { raster: 64, patch: 8, ..Config::default() };
        let data: Vec<f32> = (0..64 * 64 * 3).map(|i| i as f32).collect();
        let frame = Tensor::new(vec![64, 64, 3], data).unwrap();
        let patches = patchify::<f64>(&frame, &cfg).unwrap();
        assert_eq!(patches.rows(), 64);
        let (i, j) = (2, 5);
        let row = patches.row(i * 8 + j);
        let mut k = 0;
        for y in 8 * i..8 * i + 8 {
            for x in 8 * j..8 * j + 8 {
                for c in 0..3 {
                    assert_eq!(row[k], ((y * 64 + x) * 3 + c) as f64);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn hand_masking() {
        let cfg = cfg();
        let ps = params::<f64>(&cfg);
        let mut tape = Tape::new();
        let mut l = hand(HandType::Left, 0.0, 6);
        l.visible = false;
        let mut r = hand(HandType::Right, 0.1, 6);
        r.visible = false;
        let out = encode_hands(&mut tape, &ps, &cfg, &[l.clone(), r.clone()]).unwrap();
        assert!(tape.value(out.var).data().iter().all(|&v| v == 0.0));

        l.visible = true;
        let a = encode_hands(&mut tape, &ps, &cfg, &[l.clone(), r.clone()]).unwrap();
        let mut r2 = hand(HandType::Right, 0.3, 6);
        r2.visible = false;
        let b = encode_hands(&mut tape, &ps, &cfg, &[l.clone(), r2]).unwrap();
        let c = encode_hands(&mut tape, &ps, &cfg, std::slice::from_ref(&l)).unwrap();
        let (ta, tb, tc) = (tape.value(a.var), tape.value(b.var), tape.value(c.var));
        assert!(ta.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(ta.row(0), tb.row(0));
        assert_eq!(ta.row(0), tc.row(0));
        assert!(ta.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicate_hand_type_is_usage_error() {
        let cfg = cfg();
        let ps = params::<f64>(&cfg);
        let mut tape = Tape::new();
        let l = hand(HandType::Left, 0.0, 6);
        assert!(matches!(encode_hands(&mut tape, &ps, &cfg, &[l.clone(), l]), Err(Error::Usage(_))));
    }

    #[test]
    fn text_gradients() {
        let cfg = cfg();
        let ps = params::<f64>(&cfg);
        let ids = tokenize_text("pick", cfg.text_context);
        let report = grad_check(
            |tape, p| -> Result<Var> {
                let out = encode_text(tape, p, &cfg, &ids)?;
                let w = tape.constant(Tensor::from_fn(cfg.text_context, cfg.d, |r, c| ((r * 7 + c) % 5) as f64 - 2.0));
                let y = tape.mul(out.var, w)?;
                Ok(tape.mean(y)?)
            },
            &ps,
            1e-5,
            6,
            1,
        )
        .unwrap();
        let embed = report.params.iter().find(|p| p.name == "text.embed").unwrap();
        assert!(embed.max_rel_err <= 1e-4, "{embed:?}");
        assert!(report.passed(1e-4), "{:?}", report.worst());
    }

    #[test]
    fn hand_gradients_through_visible_slot() {
        let cfg = cfg();
        let ps = params::<f64>(&cfg);
        let mut r = hand(HandType::Right, 0.1, 6);
        r.visible = false;
        let states = [hand(HandType::Left, 0.0, 6), r];
        let report = grad_check(
            |tape, p| -> Result<Var> {
                let out = encode_hands(tape, p, &cfg, &states)?;
                let w = tape.constant(Tensor::from_fn(2, cfg.d, |r, c| ((r * 3 + c) % 4) as f64 - 1.5));
                let y = tape.mul(out.var, w)?;
                Ok(tape.sum(y)?)
            },
            &ps,
            1e-5,
            8,
            2,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{:?}", report.worst());
    }
}

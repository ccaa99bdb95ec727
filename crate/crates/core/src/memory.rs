//! ROI-enhanced FIFO memory.
//!
//! Each step's visual and hand tokens `e_t` query the tokens of the last
//! `N` steps: `out = e_t + softmax(e_t·Hᵀ/√d + bias)·H`. The bias comes from
//! binary masks marking tokens that overlap a visible hand, scaled by the
//! learnable scalar `memory.alpha`.

use std::collections::VecDeque;

use crate::config::RoiBias;
use crate::handstate::{BBox, HandState};
use crate::nn::{Init, ParamSpec};
use crate::numerics::{NumericsError, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const ALPHA: &str = "memory.alpha";

pub fn register_params(spec: &mut ParamSpec) {
    // starts at 1 so the key-side bias is active from the first update
    spec.add(ALPHA, 1, 1, Init::Ones);
}

/// Token layout of one memory entry: visual tokens then hand tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub grid: usize,
    pub visual: usize,
    pub hand: usize,
}

impl TokenLayout {
    pub fn new(grid: usize, video: bool, hand: bool) -> Self {
        Self { grid, visual: if video { grid * grid } else { 0 }, hand: if hand { 2 } else { 0 } }
    }

    pub fn tokens(&self) -> usize {
        self.visual + self.hand
    }
}

/// Binary ROI mask over an entry's tokens. Visual token `i` (patch row
/// `i / grid`, column `i % grid`) is set iff its patch rectangle overlaps a
/// visible hand's box with positive area; hand token `k` is set iff slot
/// `k` holds a visible hand.
pub fn roi_mask(hands: &[HandState], layout: &TokenLayout) -> Vec<bool> {
    let mut mask = vec![false; layout.tokens()];
    let boxes: Vec<&BBox> = hands.iter().filter(|h| h.visible).map(|h| &h.bbox).collect();
    if layout.visual > 0 {
        let cell = 1.0 / layout.grid as f64;
        for (i, m) in mask.iter_mut().take(layout.visual).enumerate() {
            let (r, c) = ((i / layout.grid) as f64, (i % layout.grid) as f64);
            let (px1, py1, px2, py2) = (c * cell, r * cell, (c + 1.0) * cell, (r + 1.0) * cell);
            *m = boxes.iter().any(|b| {
                let [x1, y1, x2, y2] = b.clamped_corners();
                let ow = px2.min(x2) - px1.max(x1);
                let oh = py2.min(y2) - py1.max(y1);
                ow > 0.0 && oh > 0.0
            });
        }
    }
    if layout.hand == 2 {
        for h in hands.iter().filter(|h| h.visible) {
            match h.hand_type {
                crate::HandType::Left => mask[layout.visual] = true,
                crate::HandType::Right => mask[layout.visual + 1] = true,
                crate::HandType::Background => {}
            }
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<T> {
    pub embedding: Tensor<T>,
    pub roi_mask: Vec<bool>,
    pub step_index: u64,
}

/// Fixed-capacity FIFO of past step embeddings, oldest first.
#[derive(Clone, Debug)]
pub struct MemoryQueue<T> {
    entries: VecDeque<MemoryEntry<T>>,
    capacity: usize,
    tokens: usize,
    dim: usize,
}

impl<T: Real> MemoryQueue<T> {
    pub fn new(capacity: usize, tokens: usize, dim: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        Self { entries: VecDeque::with_capacity(capacity + 1), capacity, tokens, dim }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter()
    }

    /// Appends `entry`, evicting the oldest one beyond capacity.
    pub fn enqueue(&mut self, entry: MemoryEntry<T>) -> Result<()> {
        if entry.embedding.rows() != self.tokens || entry.embedding.cols() != self.dim {
            return Err(NumericsError::Shape(format!(
                "memory entry {}x{}, queue layout {}x{}",
                entry.embedding.rows(),
                entry.embedding.cols(),
                self.tokens,
                self.dim
            ))
            .into());
        }
        if entry.roi_mask.len() != self.tokens {
            return Err(NumericsError::Shape(format!(
                "roi mask of {} entries for {} tokens",
                entry.roi_mask.len(),
                self.tokens
            ))
            .into());
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Places every entry on `tape` as a constant, oldest first.
    pub fn history_on<'a>(&'a self, tape: &mut Tape<T>) -> Vec<(Var, &'a [bool])> {
        self.entries
            .iter()
            .map(|e| (tape.constant(e.embedding.clone()), e.roi_mask.as_slice()))
            .collect()
    }

    /// Memory read without a caller-managed tape; returns the augmented
    /// tokens and, when the queue is non-empty, the attention matrix.
    pub fn forward(
        &self,
        e_t: &Tensor<T>,
        m_t: &[bool],
        alpha: T,
        bias: RoiBias,
        layout: &TokenLayout,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let e = tape.constant(e_t.clone());
        let a = tape.constant(Tensor::scalar(alpha));
        let history = self.history_on(&mut tape);
        let out = memory_forward(&mut tape, e, m_t, &history, a, bias, layout)?;
        Ok((tape.value(out.output).clone(), out.attention.map(|v| tape.value(v).clone())))
    }
}

pub struct MemoryOutput {
    pub output: Var,
    pub attention: Option<Var>,
}

/// Memory read on a tape. `history` holds `(tokens, roi mask)` per past
/// step; with an empty history the output is `e_t` itself.
pub fn memory_forward<T: Real>(
    tape: &mut Tape<T>,
    e_t: Var,
    m_t: &[bool],
    history: &[(Var, &[bool])],
    alpha: Var,
    bias: RoiBias,
    layout: &TokenLayout,
) -> Result<MemoryOutput> {
    let (rows, d) = tape.shape(e_t);
    if rows != layout.tokens() || m_t.len() != rows {
        return Err(Error::Numerics(NumericsError::Shape(format!(
            "memory query {rows} tokens, mask {}, layout {}",
            m_t.len(),
            layout.tokens()
        ))));
    }
    if history.is_empty() {
        return Ok(MemoryOutput { output: e_t, attention: None });
    }
    for (v, m) in history {
        if tape.shape(*v) != (rows, d) || m.len() != rows {
            return Err(Error::Numerics(NumericsError::Shape("memory entry does not match query layout".into())));
        }
    }
    let keys: Vec<Var> = history.iter().map(|(v, _)| *v).collect();
    let h = if keys.len() == 1 { keys[0] } else { tape.concat_rows(&keys)? };
    let s = tape.matmul_nt(e_t, h)?;
    let s = tape.scale(s, T::lit(1.0 / (d as f64).sqrt()))?;
    let a = match bias {
        RoiBias::Off => tape.softmax_rows(s)?,
        RoiBias::KeyBroadcast => {
            let mask: Vec<T> = history
                .iter()
                .flat_map(|(_, m)| m.iter())
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect();
            let mask = tape.constant(Tensor::row_vector(&mask));
            let b = tape.mul(mask, alpha)?;
            tape.softmax_rows_biased(s, b)?
        }
        RoiBias::QueryBroadcastLiteral => {
            // defined over visual tokens only
            let col: Vec<T> = m_t
                .iter()
                .enumerate()
                .map(|(i, &b)| if b && i < layout.visual { T::one() } else { T::zero() })
                .collect();
            let col = tape.constant(Tensor::matrix(rows, 1, col));
            let b = tape.mul(col, alpha)?;
            tape.softmax_rows_biased(s, b)?
        }
    };
    let read = tape.matmul(a, h)?;
    let output = tape.add(e_t, read)?;
    Ok(MemoryOutput { output, attention: Some(a) })
}

/// Parameter store lookup for α.
pub fn alpha_var<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>) -> Var {
    tape.param(ALPHA, ps.expect(ALPHA))
}

//! Transformer building blocks recorded on a tape, plus parameter
//! registration and initialisation.

use crate::numerics::{NumericsError, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::XorShift64;

/// Additive score bias for masked keys. Large enough that `exp` underflows
/// to exactly zero in both precisions.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Xavier-uniform for a `fan_in × fan_out` weight.
    Xavier,
    /// Uniform in `±scale`.
    Uniform(f64),
    Zeros,
    Ones,
}

/// Parameter names, shapes and initialisers, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSpec {
    pub entries: Vec<(String, [usize; 2], Init)>,
}

impl ParamSpec {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) {
        self.entries.push((name.into(), [rows, cols], init));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.w"), fan_in, fan_out, Init::Xavier);
        self.add(format!("{prefix}.b"), 1, fan_out, Init::Zeros);
    }

    /// Linear layer whose output starts at exactly zero.
    pub fn linear_zero(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.w"), fan_in, fan_out, Init::Zeros);
        self.add(format!("{prefix}.b"), 1, fan_out, Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.g"), 1, d, Init::Ones);
        self.add(format!("{prefix}.b"), 1, d, Init::Zeros);
    }

    pub fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d);
        }
    }

    pub fn mlp(&mut self, prefix: &str, d: usize, ratio: usize) {
        self.linear(&format!("{prefix}.fc1"), d, d * ratio);
        self.linear(&format!("{prefix}.fc2"), d * ratio, d);
    }

    pub fn encoder_block(&mut self, prefix: &str, d: usize, ratio: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.attn"), d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.mlp(&format!("{prefix}.mlp"), d, ratio);
    }

    pub fn decoder_block(&mut self, prefix: &str, d: usize, ratio: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.self"), d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.attention(&format!("{prefix}.cross"), d);
        self.layer_norm(&format!("{prefix}.ln3"), d);
        self.mlp(&format!("{prefix}.mlp"), d, ratio);
    }

    pub fn initialise<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = XorShift64::new(seed);
        let mut store = ParamStore::new();
        for (name, [r, c], init) in &self.entries {
            let t = match init {
                Init::Xavier => {
                    let bound = (6.0 / (*r + *c) as f64).sqrt();
                    Tensor::from_fn(*r, *c, |_, _| T::lit(rng.uniform(-bound, bound)))
                }
                Init::Uniform(s) => Tensor::from_fn(*r, *c, |_, _| T::lit(rng.uniform(-*s, *s))),
                Init::Zeros => Tensor::zeros(&[*r, *c]),
                Init::Ones => Tensor::full(&[*r, *c], T::one()),
            };
            store.insert(name.clone(), t);
        }
        store
    }
}

pub fn param<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, name: &str) -> Var {
    tape.param(name, ps.expect(name))
}

pub fn linear<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let w = param(tape, ps, &format!("{prefix}.w"));
    let b = param(tape, ps, &format!("{prefix}.b"));
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

pub fn layer_norm<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let g = param(tape, ps, &format!("{prefix}.g"));
    let b = param(tape, ps, &format!("{prefix}.b"));
    tape.layer_norm(x, g, b)
}

pub fn mlp<T: Real>(tape: &mut Tape<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let h = linear(tape, ps, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, ps, &format!("{prefix}.fc2"), h)
}

/// `1×n` row with 0 for attendable keys and [`MASK_BIAS`] for masked ones.
pub fn key_bias_row<T: Real>(tape: &mut Tape<T>, attend: &[bool]) -> Var {
    let row: Vec<T> = attend.iter().map(|&a| if a { T::zero() } else { T::lit(MASK_BIAS) }).collect();
    tape.constant(Tensor::row_vector(&row))
}

/// Multi-head attention from `queries` into `keys_values`.
/// `key_pos` (same shape as `keys_values`) is added to the keys only.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    key_pos: Option<Var>,
    key_bias: Option<Var>,
    heads: usize,
) -> Result<Var, NumericsError> {
    let d = tape.shape(queries).1;
    let dh = d / heads;
    let q = linear(tape, ps, &format!("{prefix}.q"), queries)?;
    let key_in = match key_pos {
        Some(p) => tape.add(keys_values, p)?,
        None => keys_values,
    };
    let k = linear(tape, ps, &format!("{prefix}.k"), key_in)?;
    let v = linear(tape, ps, &format!("{prefix}.v"), keys_values)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let s = match key_bias {
            Some(b) => tape.add(s, b)?,
            None => s,
        };
        let a = tape.softmax_rows(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, ps, &format!("{prefix}.o"), merged)
}

/// Pre-norm self-attention block.
pub fn encoder_block<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    x: Var,
    key_bias: Option<Var>,
    heads: usize,
) -> Result<Var, NumericsError> {
    let h = layer_norm(tape, ps, &format!("{prefix}.ln1"), x)?;
    let a = attention(tape, ps, &format!("{prefix}.attn"), h, h, None, key_bias, heads)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, ps, &format!("{prefix}.ln2"), x)?;
    let m = mlp(tape, ps, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}

/// Pre-norm decoder block: query self-attention, cross-attention into
/// `memory` (keys offset by `memory_pos`), MLP.
pub fn decoder_block<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    q: Var,
    memory: Var,
    memory_pos: Var,
    heads: usize,
) -> Result<Var, NumericsError> {
    let h = layer_norm(tape, ps, &format!("{prefix}.ln1"), q)?;
    let a = attention(tape, ps, &format!("{prefix}.self"), h, h, None, None, heads)?;
    let q = tape.add(q, a)?;
    let h = layer_norm(tape, ps, &format!("{prefix}.ln2"), q)?;
    let c = attention(tape, ps, &format!("{prefix}.cross"), h, memory, Some(memory_pos), None, heads)?;
    let q = tape.add(q, c)?;
    let h = layer_norm(tape, ps, &format!("{prefix}.ln3"), q)?;
    let m = mlp(tape, ps, &format!("{prefix}.mlp"), h)?;
    tape.add(q, m)
}

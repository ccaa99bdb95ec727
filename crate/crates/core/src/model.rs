//! The full forecaster: encoders, ROI memory and decoder wired together
//! for one streaming step.

use crate::config::Config;
use crate::decoder::{self, Anchors, QueryOutputs};
use crate::encoders::{self, Tokens};
use crate::handstate::HandState;
use crate::memory::{self, TokenLayout};
use crate::nn::ParamSpec;
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: Config,
    pub params: ParamStore<T>,
}

pub struct Encoded<T> {
    pub e_t: Var,
    pub meta: Vec<encoders::TokenMeta>,
    pub roi_mask: Vec<bool>,
    pub anchors: Anchors<T>,
}

/// Everything a step leaves on the tape.
pub struct StepOutput {
    pub queries: QueryOutputs,
    /// Visual and hand tokens of this step, before the memory read. This
    /// is what gets enqueued.
    pub e_t: Var,
    pub roi_mask: Vec<bool>,
    pub attention: Option<Var>,
}

pub fn param_spec(cfg: &Config) -> ParamSpec {
    let mut spec = ParamSpec::default();
    encoders::register_params(&mut spec, cfg);
    memory::register_params(&mut spec);
    decoder::register_params(&mut spec, cfg);
    spec
}

impl<T: Real> Model<T> {
    pub fn new(cfg: Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = param_spec(&cfg).initialise(seed);
        Ok(Self { cfg, params })
    }

    /// Wraps an existing store after checking every expected tensor is
    /// present with the right shape.
    pub fn from_params(cfg: Config, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let spec = param_spec(&cfg);
        for (name, [r, c], _) in &spec.entries {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != [*r, *c] => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, config expects [{r}, {c}]",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != spec.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                spec.entries.len()
            )));
        }
        Ok(Self { cfg, params })
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.cfg.grid(), self.cfg.modalities.video, self.cfg.modalities.hand)
    }

    /// Text tokens for an instruction, or `None` when text is disabled.
    pub fn encode_instruction(&self, tape: &mut Tape<T>, instruction: &str) -> Result<Option<Tokens>> {
        if !self.cfg.modalities.text {
            return Ok(None);
        }
        let ids = encoders::tokenize_text(instruction, self.cfg.text_context);
        encoders::encode_text(tape, &self.params, &self.cfg, &ids).map(Some)
    }

    /// Visual and hand tokens for one step, before the memory read, and
    /// the query anchors taken from `hands`.
    pub fn encode_step(&self, tape: &mut Tape<T>, frame: &Tensor<f32>, hands: &[HandState]) -> Result<Encoded<T>> {
        let cfg = &self.cfg;
        let layout = self.layout();
        let mut parts = Vec::with_capacity(2);
        let mut meta = Vec::with_capacity(cfg.step_tokens());
        if cfg.modalities.video {
            let v = encoders::encode_frame(tape, &self.params, cfg, frame)?;
            meta.extend(v.meta.iter().copied());
            parts.push(v.var);
        }
        let roi_mask = if cfg.modalities.hand {
            let h = encoders::encode_hands(tape, &self.params, cfg, hands)?;
            meta.extend(h.meta.iter().copied());
            parts.push(h.var);
            memory::roi_mask(hands, &layout)
        } else {
            vec![false; layout.tokens()]
        };
        let e_t = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let anchors = Anchors::new(cfg, cfg.modalities.hand.then_some(hands))?;
        Ok(Encoded { e_t, meta, roi_mask, anchors })
    }

    /// Memory read over `history` followed by the decoder.
    pub fn read_and_decode(
        &self,
        tape: &mut Tape<T>,
        text: Option<&Tokens>,
        step: Encoded<T>,
        history: &[(Var, &[bool])],
    ) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let Encoded { e_t, meta, roi_mask, anchors } = step;
        let (mem, attention) = if cfg.memory_enabled {
            let alpha = memory::alpha_var(tape, &self.params);
            let out = memory::memory_forward(tape, e_t, &roi_mask, history, alpha, cfg.roi_bias, &self.layout())?;
            (out.output, out.attention)
        } else {
            (e_t, None)
        };

        let fused = match text {
            Some(t) => {
                let var = tape.concat_rows(&[t.var, mem])?;
                let mut m = t.meta.clone();
                m.extend(meta);
                Tokens { var, meta: m }
            }
            None => Tokens { var: mem, meta },
        };
        let queries = decoder::decode(tape, &self.params, cfg, &fused, &anchors)?;
        Ok(StepOutput { queries, e_t, roi_mask, attention })
    }

    /// One step: encode the frame and the current hand states, read from
    /// `history`, decode.
    pub fn forward_step(
        &self,
        tape: &mut Tape<T>,
        text: Option<&Tokens>,
        frame: &Tensor<f32>,
        hands: &[HandState],
        history: &[(Var, &[bool])],
    ) -> Result<StepOutput> {
        let enc = self.encode_step(tape, frame, hands)?;
        self.read_and_decode(tape, text, enc, history)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }
}

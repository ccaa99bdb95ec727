//! Teacher-forced training over clips.
//!
//! Each clip is unrolled on one tape: at step `t` the model sees frame `t`
//! and the ground-truth states of frame `t` and is scored against frame
//! `t+1`. Memory entries stay on the tape, so gradients reach earlier
//! steps through the queue. A clip's loss is the mean over its frames; an
//! update averages the clip losses of a batch.

use rayon::prelude::*;

use crate::data::{ClipSample, FOCAL};
use crate::decoder::{predictions, select_hands};
use crate::handstate::HandState;
use crate::matchloss::{composite_loss, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::numerics::{NumericsError, Real, Tape, Var};
use crate::optim::{AdamW, GradAccumulator};
use crate::rng::XorShift64;
use crate::{Error, Result};

/// One row of the loss curve. Terms are λ-weighted so they sum to `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub type_term: f64,
    pub box_term: f64,
    pub pose_term: f64,
    pub traj_term: f64,
    pub grad_norm: f64,
}

impl LossRecord {
    pub const HEADER: &'static str = "step total type box pose traj grad_norm";

    pub fn to_line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.step, self.total, self.type_term, self.box_term, self.pose_term, self.traj_term, self.grad_norm
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return None;
        }
        let n = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            total: n(1)?,
            type_term: n(2)?,
            box_term: n(3)?,
            pose_term: n(4)?,
            traj_term: n(5)?,
            grad_norm: n(6)?,
        })
    }
}

fn visible(states: Vec<HandState>) -> Vec<HandState> {
    states.into_iter().filter(|h| h.visible).collect()
}

/// Weighted per-term sums of one clip, already divided by its frame count.
fn jitter(mut states: Vec<HandState>, half_width: f64, rng: &mut XorShift64) -> Vec<HandState> {
    if half_width > 0.0 {
        for s in &mut states {
            let d = [0; 3].map(|_| rng.uniform(-half_width, half_width));
            s.traj.x += d[0];
            s.traj.y += d[1];
            s.traj.z += d[2];
            // keep the box on the projection of the moved wrist
            let z = s.traj.z.max(1.0);
            s.bbox.cx = (s.bbox.cx + FOCAL * d[0] / z).clamp(0.0, 1.0);
            s.bbox.cy = (s.bbox.cy + FOCAL * d[1] / z).clamp(0.0, 1.0);
        }
    }
    states
}

#[derive(Clone, Copy, Debug, Default)]
struct ClipTerms {
    total: f64,
    terms: [f64; 4],
}

fn weighted(bd: &LossBreakdown, w: &LossWeights) -> [f64; 4] {
    [w.lambda_type * bd.type_ce, w.lambda_box * bd.box_term, w.lambda_pose * bd.pose, w.lambda_traj * bd.traj]
}

/// Unrolls `clip` on `tape` and returns the mean frame loss.
/// `feedback` is the probability of feeding the model's own forecast
/// instead of the ground truth at steps after the first.
pub fn clip_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    clip: &ClipSample,
    feedback: f64,
    rng: &mut XorShift64,
) -> Result<(Var, [f64; 4])> {
    let cfg = &model.cfg;
    if clip.len() < 2 {
        return Err(Error::Usage(format!("clip {} has fewer than 2 frames", clip.id)));
    }
    let w = LossWeights::from(cfg);
    let text = model.encode_instruction(tape, &clip.instruction)?;
    let mut history: std::collections::VecDeque<(Var, Vec<bool>)> = std::collections::VecDeque::new();
    let mut hands = visible(clip.states(0));
    let mut totals = Vec::with_capacity(clip.len() - 1);
    let mut terms = [0.0; 4];
    for t in 0..clip.len() - 1 {
        let hist: Vec<(Var, &[bool])> = history.iter().map(|(v, m)| (*v, m.as_slice())).collect();
        let out = model.forward_step(tape, text.as_ref(), &clip.frames[t], &hands, &hist)?;
        let target = visible(clip.states(t + 1));
        let fl = composite_loss(tape, &out.queries, &target, &w)?;
        totals.push(fl.total);
        for (acc, v) in terms.iter_mut().zip(weighted(&fl.breakdown, &w)) {
            *acc += v;
        }
        if cfg.memory_enabled {
            history.push_back((out.e_t, out.roi_mask));
            if history.len() > cfg.memory_capacity {
                history.pop_front();
            }
        }
        hands = if feedback > 0.0 && rng.chance(feedback) {
            select_hands(&predictions(tape, &out.queries), cfg.confidence_threshold)
        } else {
            jitter(target, cfg.input_jitter, rng)
        };
    }
    let n = totals.len() as f64;
    let joined = if totals.len() == 1 { totals[0] } else { tape.concat_cols(&totals)? };
    let loss = tape.mean(joined).map_err(|e| match e {
        NumericsError::NonFinite(_) => Error::NonFiniteLoss { term: "total".into(), step: 0 },
        e => Error::Numerics(e),
    })?;
    Ok((loss, terms.map(|v| v / n)))
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW,
    pub step: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: XorShift64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>) -> Self {
        let opt = AdamW::from_config(&model.cfg);
        let rng = XorShift64::new(model.cfg.seed ^ 0x5EED_0F_BA7C4);
        Self { model, opt, step: 0, order: Vec::new(), cursor: 0, rng }
    }

    /// Clip indices for the next update: successive slices of a shuffled
    /// order, reshuffled each epoch. Batches at least as large as the set
    /// use every clip.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.model.cfg.batch;
        if b >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                for i in (1..n).rev() {
                    let j = self.rng.below(i as u64 + 1) as usize;
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimiser update on a batch drawn from `clips`.
    pub fn train_step(&mut self, clips: &[ClipSample]) -> Result<LossRecord> {
        if clips.is_empty() {
            return Err(Error::Usage("no training clips".into()));
        }
        let batch = self.next_batch(clips.len());
        let step = self.step;
        let model = &self.model;
        let feedback = model.cfg.scheduled_sampling;
        let seed = model.cfg.seed;
        let results: Vec<Result<(GradAccumulator, ClipTerms)>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &ci)| {
                let mut rng = XorShift64::derive(seed ^ 0xC11B, ((step as u64) << 20) | k as u64);
                let mut tape = Tape::new();
                let (loss, terms) = clip_loss(model, &mut tape, &clips[ci], feedback, &mut rng)?;
                let total = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
                let grads = tape.backward(loss)?;
                let mut acc = GradAccumulator::default();
                acc.add(grads.iter(), 1.0);
                Ok((acc, ClipTerms { total, terms }))
            })
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut grads = GradAccumulator::default();
        let mut rec = LossRecord { step, total: 0.0, type_term: 0.0, box_term: 0.0, pose_term: 0.0, traj_term: 0.0, grad_norm: 0.0 };
        for r in results {
            let (g, t) = r.map_err(|e| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, step },
                e => e,
            })?;
            grads.merge(&g, inv);
            rec.total += inv * t.total;
            rec.type_term += inv * t.terms[0];
            rec.box_term += inv * t.terms[1];
            rec.pose_term += inv * t.terms[2];
            rec.traj_term += inv * t.terms[3];
        }
        for (name, v) in [("type", rec.type_term), ("box", rec.box_term), ("pose", rec.pose_term), ("traj", rec.traj_term)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: name.into(), step });
            }
        }
        if !rec.total.is_finite() {
            return Err(Error::NonFiniteLoss { term: "total".into(), step });
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { term: "gradient".into(), step });
        }
        self.opt.lr = self.model.cfg.learning_rate_at(step);
        rec.grad_norm = self.opt.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(rec)
    }

    /// Runs `steps` updates, handing each record to `on_record`.
    pub fn fit(&mut self, clips: &[ClipSample], steps: usize, mut on_record: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.train_step(clips)?;
            on_record(&r);
            out.push(r);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{generate_with, GenOptions, Scenario};

    fn tiny() -> (Config, Vec<ClipSample>) {
        let cfg = Config {
            d: 16,
            heads: 2,
            mlp_ratio: 2,
            pose_dim: 6,
            raster: 16,
            patch: 8,
            text_context: 8,
            queries: 3,
            memory_capacity: 4,
            batch: 2,
            ..Config::desk()
        };
        let clips = generate_with(1, Scenario::Idle, 3, &GenOptions { frames: 5, raster: 16, pose_dim: 6 });
        (cfg, clips)
    }

    #[test]
    fn deterministic_and_decreasing() {
        let (cfg, clips) = tiny();
        let run = || {
            let mut tr = Trainer::new(Model::<f32>::new(cfg.clone(), 3).unwrap());
            tr.fit(&clips, 30, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.last().unwrap().total < a[0].total);
        for r in &a {
            let sum = r.type_term + r.box_term + r.pose_term + r.traj_term;
            assert!((sum - r.total).abs() <= 1e-4 * r.total.max(1.0));
        }
    }

    #[test]
    fn zero_lambda_reports_zero_term() {
        let (mut cfg, clips) = tiny();
        cfg.lambda_traj = 0.0;
        let mut tr = Trainer::new(Model::<f32>::new(cfg, 3).unwrap());
        for r in tr.fit(&clips, 3, |_| {}).unwrap() {
            assert_eq!(r.traj_term, 0.0);
        }
    }

    #[test]
    fn jitter_moves_box_with_wrist() {
        let (_, clips) = tiny();
        let base = visible(clips[0].states(0));
        assert_eq!(jitter(base.clone(), 0.0, &mut XorShift64::new(1)), base);
        let moved = jitter(base.clone(), 2.0, &mut XorShift64::new(1));
        for (a, b) in base.iter().zip(&moved) {
            let (dx, dy, dz) = (b.traj.x - a.traj.x, b.traj.y - a.traj.y, b.traj.z - a.traj.z);
            assert!(dx.abs() <= 2.0 && dy.abs() <= 2.0 && dz.abs() <= 2.0);
            assert!((b.bbox.cx - a.bbox.cx - FOCAL * dx / b.traj.z).abs() < 1e-12);
            assert!((b.bbox.cy - a.bbox.cy - FOCAL * dy / b.traj.z).abs() < 1e-12);
            assert_eq!((a.bbox.w, a.bbox.h, &a.pose), (b.bbox.w, b.bbox.h, &b.pose));
        }
    }

    #[test]
    fn record_lines_parse_back() {
        let r = LossRecord { step: 4, total: 1.5, type_term: 0.5, box_term: 0.25, pose_term: 0.5, traj_term: 0.25, grad_norm: 3.0 };
        assert_eq!(LossRecord::parse_line(&r.to_line()), Some(r));
    }

    #[test]
    fn non_finite_input_names_a_term() {
        let (mut cfg, mut clips) = tiny();
        cfg.batch = 3;
        clips[0].gt[2][0].state.traj.x = f64::NAN;
        let mut tr = Trainer::new(Model::<f64>::new(cfg, 3).unwrap());
        let err = tr.train_step(&clips).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }
}

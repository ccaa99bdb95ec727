//! Streaming inference: sessions, rollouts, the static baseline, the
//! replay check for the FIFO memory and the latency benchmark.

use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{ClipSample, GtHand};
use crate::decoder::{predictions, select_hands, QueryPrediction};
use crate::encoders::TokenSequence;
use crate::handstate::HandState;
use crate::memory::{MemoryEntry, MemoryQueue};
use crate::metrics::{FrameEval, MetricAccumulator, MetricReport};
use crate::model::Model;
use crate::numerics::{Real, Tape};
use crate::{Error, Result};

/// Where the hand-state input of each step after the first comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedMode {
    /// The model's own previous forecast.
    SelfFeed,
    /// Ground truth supplied by the caller.
    Oracle,
}

/// Evaluation protocol for a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    SelfFeed,
    Oracle,
    Static,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::SelfFeed => "self",
            EvalMode::Oracle => "oracle",
            EvalMode::Static => "static",
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(EvalMode::SelfFeed),
            "oracle" => Ok(EvalMode::Oracle),
            "static" => Ok(EvalMode::Static),
            _ => Err(Error::Usage(format!("unknown mode {s:?} (expected self, oracle or static)"))),
        }
    }
}

/// Result of one streaming step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Hand states fed to the model at this step.
    pub input: Vec<HandState>,
    /// Selected forecast for the next frame.
    pub hands: Vec<HandState>,
    /// Raw per-query decoder outputs.
    pub queries: Vec<QueryPrediction>,
}

pub struct Session<'m, T> {
    model: &'m Model<T>,
    mode: FeedMode,
    text: Option<TokenSequence<T>>,
    queue: MemoryQueue<T>,
    last: Vec<HandState>,
    steps: u64,
}

fn visible(states: Vec<HandState>) -> Vec<HandState> {
    states.into_iter().filter(|h| h.visible).collect()
}

impl<'m, T: Real> Session<'m, T> {
    /// Starts a stream for `instruction` whose present hand state is
    /// `initial`. The instruction is encoded once here.
    pub fn new(model: &'m Model<T>, mode: FeedMode, instruction: &str, initial: Vec<HandState>) -> Result<Self> {
        let cfg = &model.cfg;
        let mut tape = Tape::new();
        let text = model.encode_instruction(&mut tape, instruction)?.map(|t| t.resolve(&tape));
        let queue = MemoryQueue::new(cfg.memory_capacity, cfg.step_tokens(), cfg.d);
        Ok(Self { model, mode, text, queue, last: visible(initial), steps: 0 })
    }

    pub fn mode(&self) -> FeedMode {
        self.mode
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queue(&self) -> &MemoryQueue<T> {
        &self.queue
    }

    pub fn last_forecast(&self) -> &[HandState] {
        &self.last
    }

    /// Clears memory and restarts from `initial` under a new instruction.
    pub fn reset(&mut self, instruction: &str, initial: Vec<HandState>) -> Result<()> {
        let mut tape = Tape::new();
        self.text = self.model.encode_instruction(&mut tape, instruction)?.map(|t| t.resolve(&tape));
        self.queue.reset();
        self.last = visible(initial);
        self.steps = 0;
        Ok(())
    }

    /// Consumes `frame` and forecasts the next hand states. The first step
    /// always uses the initial state; later oracle steps require `gt`.
    pub fn step(&mut self, frame: &crate::numerics::Tensor<f32>, gt: Option<&[HandState]>) -> Result<StepOutcome> {
        if self.mode == FeedMode::Oracle && gt.is_none() {
            return Err(Error::Usage("oracle mode needs ground-truth hand states at every step".into()));
        }
        let input = match (self.steps, self.mode, gt) {
            (0, _, _) | (_, FeedMode::SelfFeed, _) => self.last.clone(),
            (_, FeedMode::Oracle, Some(g)) => g.iter().filter(|h| h.visible).cloned().collect(),
            (_, FeedMode::Oracle, None) => unreachable!(),
        };
        let model = self.model;
        let mut tape = Tape::new();
        let text = self.text.as_ref().map(|t| t.to_tape(&mut tape));
        let history = self.queue.history_on(&mut tape);
        let out = model.forward_step(&mut tape, text.as_ref(), frame, &input, &history)?;
        let queries = predictions(&tape, &out.queries);
        let hands = select_hands(&queries, model.cfg.confidence_threshold);
        if model.cfg.memory_enabled {
            let embedding = tape.value(out.e_t).clone();
            drop(history);
            self.queue.enqueue(MemoryEntry { embedding, roi_mask: out.roi_mask, step_index: self.steps })?;
        }
        self.last = hands.clone();
        self.steps += 1;
        Ok(StepOutcome { input, hands, queries })
    }
}

/// Forecasts for frames `1..T` of a clip and their metrics.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// `forecasts[t]` is the forecast for frame `t + 1`.
    pub forecasts: Vec<Vec<HandState>>,
    pub report: MetricReport,
}

fn check_len(clip: &ClipSample) -> Result<()> {
    if clip.len() < 2 || clip.gt.len() != clip.len() {
        return Err(Error::Usage(format!("clip {} needs at least 2 annotated frames", clip.id)));
    }
    Ok(())
}

fn accumulate(clip: &ClipSample, forecasts: &[Vec<HandState>], targets: Range<usize>) -> Result<MetricAccumulator> {
    let gts: Vec<(Vec<HandState>, Vec<_>)> = targets.clone().map(|t| (clip.states(t), clip.joints(t))).collect();
    let frames: Vec<FrameEval<'_>> = targets
        .zip(&gts)
        .map(|(t, (gt, joints))| FrameEval { pred: &forecasts[t - 1], gt, gt_joints: joints })
        .collect();
    let mut acc = MetricAccumulator::default();
    acc.add_clip(&frames)?;
    Ok(acc)
}

/// Metrics of `forecasts` against the ground truth of the target frames in
/// `targets` (indices into the clip, each ≥ 1).
pub fn report_frames(clip: &ClipSample, forecasts: &[Vec<HandState>], targets: Range<usize>) -> Result<MetricReport> {
    if targets.start == 0 || targets.end > clip.len() || targets.end > forecasts.len() + 1 {
        return Err(Error::Usage(format!("target frames {targets:?} out of range for clip {}", clip.id)));
    }
    Ok(accumulate(clip, forecasts, targets)?.report())
}

/// Streams the clip through a fresh session. Oracle mode feeds the
/// ground truth of each consumed frame.
pub fn rollout<T: Real>(model: &Model<T>, mode: FeedMode, clip: &ClipSample) -> Result<Rollout> {
    let (forecasts, acc) = rollout_acc(model, mode, clip)?;
    Ok(Rollout { forecasts, report: acc.report() })
}

fn rollout_acc<T: Real>(model: &Model<T>, mode: FeedMode, clip: &ClipSample) -> Result<(Vec<Vec<HandState>>, MetricAccumulator)> {
    check_len(clip)?;
    let mut session = Session::new(model, mode, &clip.instruction, clip.states(0))?;
    let mut forecasts = Vec::with_capacity(clip.len() - 1);
    for t in 0..clip.len() - 1 {
        let gt = clip.states(t);
        let out = session.step(&clip.frames[t], (mode == FeedMode::Oracle).then_some(gt.as_slice()))?;
        forecasts.push(out.hands);
    }
    let acc = accumulate(clip, &forecasts, 1..clip.len())?;
    Ok((forecasts, acc))
}

/// Every forecast repeats the first frame's hand states.
pub fn static_baseline(clip: &ClipSample) -> Result<Rollout> {
    let (forecasts, acc) = static_acc(clip)?;
    Ok(Rollout { forecasts, report: acc.report() })
}

fn static_acc(clip: &ClipSample) -> Result<(Vec<Vec<HandState>>, MetricAccumulator)> {
    check_len(clip)?;
    let first = visible(clip.states(0));
    let forecasts = vec![first; clip.len() - 1];
    let acc = accumulate(clip, &forecasts, 1..clip.len())?;
    Ok((forecasts, acc))
}

/// Dataset-level evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_clip: Vec<MetricReport>,
}

/// Worker cap from `SFHAND_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("SFHAND_THREADS").ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

fn fan_out<F>(clips: &[ClipSample], f: F) -> Result<Evaluation>
where
    F: Fn(&ClipSample) -> Result<MetricAccumulator> + Sync,
{
    let run = || -> Vec<Result<MetricAccumulator>> { clips.par_iter().map(&f).collect() };
    let results = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut total = MetricAccumulator::default();
    let mut per_clip = Vec::with_capacity(clips.len());
    for r in results {
        let acc = r?;
        total.merge(&acc);
        per_clip.push(acc.report());
    }
    Ok(Evaluation { report: total.report(), per_clip })
}

/// Evaluates every clip in parallel and pools the errors in clip order.
pub fn evaluate<T: Real>(model: &Model<T>, clips: &[ClipSample], mode: EvalMode) -> Result<Evaluation> {
    match mode {
        EvalMode::Static => evaluate_static(clips),
        EvalMode::SelfFeed => fan_out(clips, |c| rollout_acc(model, FeedMode::SelfFeed, c).map(|r| r.1)),
        EvalMode::Oracle => fan_out(clips, |c| rollout_acc(model, FeedMode::Oracle, c).map(|r| r.1)),
    }
}

pub fn evaluate_static(clips: &[ClipSample]) -> Result<Evaluation> {
    fan_out(clips, |c| static_acc(c).map(|r| r.1))
}

fn max_abs_diff(a: &[QueryPrediction], b: &[QueryPrediction]) -> f64 {
    let flat = |q: &QueryPrediction| {
        let mut v = q.type_logits.to_vec();
        v.extend(q.bbox.as_array());
        v.extend(q.pose.0.iter().copied());
        v.extend(q.traj.as_array());
        v
    };
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| flat(x).into_iter().zip(flat(y)).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Streams `clip` incrementally, then recomputes every step from scratch:
/// the instruction, the frames of the last `N` steps and the current one
/// are re-encoded with the same hand inputs and the memory is rebuilt from
/// those embeddings. Returns the largest absolute difference between the
/// two sets of decoder outputs.
pub fn batch_replay_check<T: Real>(model: &Model<T>, mode: FeedMode, clip: &ClipSample) -> Result<f64> {
    check_len(clip)?;
    let mut session = Session::new(model, mode, &clip.instruction, clip.states(0))?;
    let mut streamed = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let gt = clip.states(t);
        streamed.push(session.step(&clip.frames[t], Some(&gt))?);
    }
    let n = model.cfg.memory_capacity;
    let mut worst = 0.0f64;
    for (t, outcome) in streamed.iter().enumerate() {
        let mut tape = Tape::new();
        let text = model.encode_instruction(&mut tape, &clip.instruction)?;
        let window = if model.cfg.memory_enabled { t.saturating_sub(n)..t } else { t..t };
        let mut past = Vec::with_capacity(window.len());
        for j in window {
            let enc = model.encode_step(&mut tape, &clip.frames[j], &streamed[j].input)?;
            past.push((enc.e_t, enc.roi_mask));
        }
        let history: Vec<_> = past.iter().map(|(v, m)| (*v, m.as_slice())).collect();
        let enc = model.encode_step(&mut tape, &clip.frames[t], &outcome.input)?;
        let out = model.read_and_decode(&mut tape, text.as_ref(), enc, &history)?;
        worst = worst.max(max_abs_diff(&predictions(&tape, &out.queries), &outcome.queries));
    }
    Ok(worst)
}

/// Throughput and constant-cost evidence for a long stream.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BenchReport {
    pub steps: usize,
    pub warmup: usize,
    pub seconds: f64,
    pub steps_per_sec: f64,
    pub capacity: usize,
    pub max_queue: usize,
    /// Largest memory footprint of the queued embeddings.
    pub peak_queue_bytes: usize,
    pub mean_latency_us: f64,
    /// Least-squares slope of block-median latency against step index.
    pub slope_us_per_step: f64,
    pub slope_t: f64,
    /// `|slope| × steps / mean latency`: the fitted change over the whole
    /// run relative to a typical step.
    pub drift_fraction: f64,
    /// Slope is not significant (`|t| ≤ 3`) or its total drift is below
    /// 5% of a step.
    pub flat: bool,
}

impl BenchReport {
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("steps_per_sec", format!("{:.3}", self.steps_per_sec)),
            ("capacity", self.capacity.to_string()),
            ("max_queue", self.max_queue.to_string()),
            ("peak_queue_bytes", self.peak_queue_bytes.to_string()),
            ("mean_latency_us", format!("{:.3}", self.mean_latency_us)),
            ("slope_us_per_step", format!("{:.3e}", self.slope_us_per_step)),
            ("slope_t", format!("{:.3}", self.slope_t)),
            ("drift_fraction", format!("{:.4}", self.drift_fraction)),
            ("flat", self.flat.to_string()),
        ]
    }
}

/// Ordinary least squares `y = a + b·x`; returns `(b, standard error of b)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 || x.len() < 3 {
        return (0.0, f64::INFINITY);
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    (b, (sse / (n - 2.0) / sxx).sqrt())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs one self-feeding session for `warmup + steps` frames, cycling
/// through the frames of `source` without resetting, and times each step
/// after the warm-up. Single-threaded.
pub fn bench<T: Real>(model: &Model<T>, source: &ClipSample, steps: usize, warmup: usize) -> Result<BenchReport> {
    if source.is_empty() || steps == 0 {
        return Err(Error::Usage("bench needs a non-empty source clip and at least one step".into()));
    }
    let cfg = &model.cfg;
    let mut session = Session::new(model, FeedMode::SelfFeed, &source.instruction, source.states(0))?;
    let entry_bytes = cfg.step_tokens() * cfg.d * T::DTYPE.size();
    let mut max_queue = 0usize;
    let mut latencies = Vec::with_capacity(steps);
    let start = Instant::now();
    for i in 0..warmup + steps {
        let frame = &source.frames[i % source.len()];
        let t0 = Instant::now();
        session.step(frame, None)?;
        let dt = t0.elapsed().as_secs_f64() * 1e6;
        if session.queue_len() > cfg.memory_capacity {
            return Err(Error::Usage(format!("queue grew to {} past capacity {}", session.queue_len(), cfg.memory_capacity)));
        }
        max_queue = max_queue.max(session.queue_len());
        if i >= warmup {
            latencies.push(dt);
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let measured: f64 = latencies.iter().sum::<f64>() / 1e6;

    // block medians damp scheduler outliers
    let block = (steps / 100).max(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, chunk) in latencies.chunks(block).enumerate() {
        if chunk.len() < block {
            break;
        }
        let mut c = chunk.to_vec();
        xs.push((k * block) as f64 + 0.5 * block as f64);
        ys.push(median(&mut c));
    }
    let (slope, se) = ols_slope(&xs, &ys);
    let mean_latency_us = latencies.iter().sum::<f64>() / steps as f64;
    let slope_t = if se.is_finite() && se > 0.0 { slope / se } else { 0.0 };
    let drift_fraction = if mean_latency_us > 0.0 { slope.abs() * steps as f64 / mean_latency_us } else { 0.0 };
    Ok(BenchReport {
        steps,
        warmup,
        seconds,
        steps_per_sec: if measured > 0.0 { steps as f64 / measured } else { f64::INFINITY },
        capacity: cfg.memory_capacity,
        max_queue,
        peak_queue_bytes: max_queue * entry_bytes,
        mean_latency_us,
        slope_us_per_step: slope,
        slope_t,
        drift_fraction,
        flat: slope_t.abs() <= 3.0 || drift_fraction <= 0.05,
    })
}

fn quantise(h: &HandState) -> HandState {
    let q = |v: f64| v as f32 as f64;
    let mut s = h.clone();
    s.bbox.cx = q(s.bbox.cx);
    s.bbox.cy = q(s.bbox.cy);
    s.bbox.w = q(s.bbox.w).max(f32::MIN_POSITIVE as f64);
    s.bbox.h = q(s.bbox.h).max(f32::MIN_POSITIVE as f64);
    s.pose.0.iter_mut().for_each(|v| *v = q(*v));
    s.traj.x = q(s.traj.x);
    s.traj.y = q(s.traj.y);
    s.traj.z = q(s.traj.z);
    s
}

/// The clip with its annotations replaced by forecasts: frame 0 keeps the
/// observed state, frame `t` holds the forecast made at `t − 1`. Values
/// are rounded to the file's 32-bit storage.
pub fn trace_clip(clip: &ClipSample, forecasts: &[Vec<HandState>], tag: &str) -> ClipSample {
    let mut gt = Vec::with_capacity(clip.len());
    gt.push(clip.gt[0].clone());
    for f in forecasts.iter().take(clip.len().saturating_sub(1)) {
        gt.push(f.iter().map(|h| GtHand { state: quantise(h), joints: None }).collect());
    }
    ClipSample {
        id: format!("{}.{tag}", clip.id),
        instruction: clip.instruction.clone(),
        frames: clip.frames.clone(),
        gt,
        camera_note: clip.camera_note.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{generate_with, GenOptions, Scenario};
    use crate::handstate::{BBox, HandPose, HandType, Trajectory3D};
    use crate::numerics::Tensor;

    fn cfg(n: usize) -> Config {
        Config {
            d: 16,
            heads: 2,
            mlp_ratio: 2,
            pose_dim: 6,
            raster: 16,
            patch: 8,
            text_context: 8,
            queries: 4,
            memory_capacity: n,
            confidence_threshold: 0.0,
            ..Config::desk()
        }
    }

    fn clips(scenario: Scenario, frames: usize) -> Vec<ClipSample> {
        generate_with(7, scenario, 2, &GenOptions { frames, raster: 16, pose_dim: 6 })
    }

    #[test]
    fn sessions_are_deterministic_and_fifo() {
        let m = Model::<f32>::new(cfg(3), 1).unwrap();
        let clip = &clips(Scenario::Reach, 8)[0];
        let mut a = Session::new(&m, FeedMode::SelfFeed, &clip.instruction, clip.states(0)).unwrap();
        let mut b = Session::new(&m, FeedMode::SelfFeed, &clip.instruction, clip.states(0)).unwrap();
        for (k, f) in clip.frames.iter().enumerate() {
            let x = a.step(f, None).unwrap();
            let y = b.step(f, None).unwrap();
            assert_eq!(x.queries, y.queries);
            assert_eq!(a.queue_len(), (k + 1).min(3));
            assert_eq!(a.steps(), k as u64 + 1);
        }
    }

    #[test]
    fn oracle_needs_ground_truth_and_agrees_on_first_step() {
        let m = Model::<f32>::new(cfg(3), 2).unwrap();
        let clip = &clips(Scenario::Reach, 4)[0];
        let mut o = Session::new(&m, FeedMode::Oracle, &clip.instruction, clip.states(0)).unwrap();
        assert_eq!(o.step(&clip.frames[0], None).unwrap_err().exit_code(), 1);
        let mut s = Session::new(&m, FeedMode::SelfFeed, &clip.instruction, clip.states(0)).unwrap();
        let a = o.step(&clip.frames[0], Some(&clip.states(1))).unwrap();
        let b = s.step(&clip.frames[0], None).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.input, clip.states(0));
    }

    #[test]
    fn self_feed_equals_oracle_when_fed_its_own_forecasts() {
        let m = Model::<f64>::new(cfg(4), 3).unwrap();
        let clip = &clips(Scenario::TwoHands, 6)[0];
        let mut s = Session::new(&m, FeedMode::SelfFeed, &clip.instruction, clip.states(0)).unwrap();
        let mut o = Session::new(&m, FeedMode::Oracle, &clip.instruction, clip.states(0)).unwrap();
        let mut fed = clip.states(0);
        for f in &clip.frames {
            let a = s.step(f, None).unwrap();
            let b = o.step(f, Some(&fed)).unwrap();
            assert_eq!(a.queries, b.queries);
            fed = b.hands;
        }
    }

    #[test]
    fn replay_matches_streaming() {
        for n in [1, 4, 20] {
            let m = Model::<f32>::new(cfg(n), 4).unwrap();
            for clip in &clips(Scenario::PickAndReturn, 10) {
                assert!(batch_replay_check(&m, FeedMode::SelfFeed, clip).unwrap() <= 1e-6);
                assert!(batch_replay_check(&m, FeedMode::Oracle, clip).unwrap() <= 1e-6);
            }
        }
        let m = Model::<f64>::new(cfg(2), 4).unwrap();
        assert!(batch_replay_check(&m, FeedMode::SelfFeed, &clips(Scenario::Reach, 8)[1]).unwrap() <= 1e-10);
    }

    #[test]
    fn replay_detects_a_broken_queue() {
        // a queue that keeps one entry too many diverges from the window
        let m = Model::<f64>::new(cfg(2), 5).unwrap();
        let clip = &clips(Scenario::Reach, 6)[0];
        let mut s = Session::new(&m, FeedMode::SelfFeed, &clip.instruction, clip.states(0)).unwrap();
        s.queue = MemoryQueue::new(3, m.cfg.step_tokens(), m.cfg.d);
        let mut outs = Vec::new();
        for f in &clip.frames {
            outs.push(s.step(f, None).unwrap());
        }
        let mut tape = Tape::new();
        let text = m.encode_instruction(&mut tape, &clip.instruction).unwrap();
        let t = 4;
        let past: Vec<_> = (t - 2..t).map(|j| m.encode_step(&mut tape, &clip.frames[j], &outs[j].input).unwrap()).collect();
        let history: Vec<_> = past.iter().map(|e| (e.e_t, e.roi_mask.as_slice())).collect();
        let enc = m.encode_step(&mut tape, &clip.frames[t], &outs[t].input).unwrap();
        let out = m.read_and_decode(&mut tape, text.as_ref(), enc, &history).unwrap();
        assert!(max_abs_diff(&predictions(&tape, &out.queries), &outs[t].queries) > 1e-9);
    }

    fn hs(x: f64) -> HandState {
        HandState {
            hand_type: HandType::Right,
            bbox: BBox::new(0.5, 0.5, 0.2, 0.2).unwrap(),
            pose: HandPose::zeros(6),
            traj: Trajectory3D::new(x, 0.0, 50.0),
            visible: true,
        }
    }

    #[test]
    fn static_baseline_examples() {
        let frames = vec![Tensor::full(&[16, 16, 3], 0.0f32); 16];
        let moving = ClipSample {
            id: "m".into(),
            instruction: "move".into(),
            frames: frames.clone(),
            gt: (0..16).map(|k| vec![GtHand { state: hs(k as f64), joints: None }]).collect(),
            camera_note: String::new(),
        };
        let r = static_baseline(&moving).unwrap();
        assert_eq!(r.forecasts.len(), 15);
        assert!((r.report.ade_cm - 8.0).abs() < 1e-12);
        assert!((r.report.fde_cm - 15.0).abs() < 1e-12);
        assert!(r.report.jpe_cm < 1e-12);
        let idle = clips(Scenario::Idle, 6);
        assert_eq!(static_baseline(&idle[0]).unwrap().report.ade_cm, 0.0);
        let e = evaluate(&Model::<f32>::new(cfg(2), 1).unwrap(), &idle, EvalMode::Static).unwrap();
        assert_eq!((e.report.ade_cm, e.report.fde_cm, e.per_clip.len()), (0.0, 0.0, 2));
    }

    #[test]
    fn rollout_counts_and_eval_modes() {
        let m = Model::<f32>::new(cfg(3), 6).unwrap();
        let set = clips(Scenario::Reach, 5);
        let r = rollout(&m, FeedMode::Oracle, &set[0]).unwrap();
        assert_eq!(r.forecasts.len(), 4);
        assert_eq!(r.report.frames, 4);
        let e = evaluate(&m, &set, EvalMode::Oracle).unwrap();
        assert_eq!(e.per_clip[0], r.report);
        assert_eq!(e.report.frames, 8);
        assert!("bogus".parse::<EvalMode>().is_err());
        let q = report_frames(&set[0], &r.forecasts, 3..5).unwrap();
        assert_eq!(q.frames, 2);
    }

    #[test]
    fn ols_recovers_a_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let (b, se) = ols_slope(&x, &y);
        assert!((b - 0.5).abs() < 1e-12 && se < 1e-9);
    }

    #[test]
    fn bench_respects_capacity() {
        let m = Model::<f32>::new(cfg(3), 7).unwrap();
        let r = bench(&m, &clips(Scenario::Reach, 4)[0], 50, 5).unwrap();
        assert_eq!(r.max_queue, 3);
        assert!(r.steps_per_sec > 0.0);
        assert_eq!(r.peak_queue_bytes, 3 * m.cfg.step_tokens() * 16 * 4);
    }

    #[test]
    fn trace_round_trips() {
        let m = Model::<f64>::new(cfg(3), 8).unwrap();
        let clip = &clips(Scenario::TwoHands, 5)[0];
        let r = rollout(&m, FeedMode::SelfFeed, clip).unwrap();
        let trace = trace_clip(clip, &r.forecasts, "self");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        crate::data::write_clipfile(std::slice::from_ref(&trace), &path).unwrap();
        assert_eq!(crate::data::read_clipfile(&path).unwrap(), vec![trace]);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use handcast::checkpoint::{self, Checkpoint};
use handcast::data::{self, ClipSample, GenOptions, Scenario};
use handcast::numerics::{DType, Real};
use handcast::stream::{self, EvalMode, FeedMode};
use handcast::train::{LossRecord, Trainer};
use handcast::{Config, Error, Model, Result};
use serde_json::json;

mod overrides;

#[derive(Parser)]
#[command(name = "handcast", version, about = "Streaming 3D hand forecasting on synthetic egocentric clips")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clip file.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the static baseline) on a clip file.
    Eval(EvalArgs),
    /// Stream clips through a checkpoint and optionally write forecast traces.
    Stream(StreamArgs),
    /// Time a long self-feeding stream.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// reach, pick_and_return, two_hands or idle
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Manifest path; the blob is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    raster: usize,
    #[arg(long, default_value_t = 48)]
    pose_dim: usize,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale model instead of the defaults.
    #[arg(long)]
    desk: bool,
    /// Override any config field, e.g. `--set d=32 --set modalities.text=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training clip manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Loss curve path [default: <checkpoint>.loss.txt]
    #[arg(long)]
    loss_file: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Print a progress line every N steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Required for self and oracle modes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated: self, oracle, static.
    #[arg(long, default_value = "self")]
    mode: String,
    /// Ablation rows, comma-separated; join several switches with `+`.
    /// Switches: text, video, hand, memory. `none` is the full model.
    #[arg(long, default_value = "none")]
    ablate: String,
    /// Machine-readable report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip manifest to stream.
    #[arg(long)]
    clip: PathBuf,
    /// self or oracle
    #[arg(long, default_value = "self")]
    mode: String,
    /// Write forecasts in clip-file format.
    #[arg(long)]
    emit_trace: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    length: usize,
    #[arg(long, default_value_t = 32)]
    warmup: usize,
    /// Exit with status 3 when the latency slope is not flat.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage_error(sub: &str, msg: String) -> Error {
    let mut cmd = Cli::command();
    let usage = cmd.find_subcommand_mut(sub).map(|c| c.render_usage().to_string()).unwrap_or_default();
    Error::Usage(format!("{msg}\n\n{usage}"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse().map_err(|e: Error| usage_error("gen", e.to_string()))?;
    if a.frames < 2 || a.raster == 0 || a.pose_dim == 0 {
        return Err(usage_error("gen", "frames must be at least 2; raster and pose-dim positive".into()));
    }
    let opts = GenOptions { frames: a.frames, raster: a.raster, pose_dim: a.pose_dim };
    let clips = data::generate_with(a.seed, scenario, a.count, &opts);
    let meta = json!({"generator": {
        "seed": a.seed, "scenario": scenario.name(), "count": a.count,
        "frames": a.frames, "raster": a.raster, "pose_dim": a.pose_dim,
    }});
    data::write_clipfile_with_meta(&clips, &a.out, Some(meta))?;
    let hands: usize = clips.iter().flat_map(|c| &c.gt).map(|f| f.len()).sum();
    println!("clips={} frames={} hand_annotations={} manifest={} blob={}", clips.len(), clips.len() * a.frames, hands, a.out.display(), data::blob_path(&a.out).display());
    Ok(())
}

fn resolve_config(a: &ConfigArgs) -> Result<Config> {
    let base = match &a.config {
        Some(p) => Config::load(p)?,
        None if a.desk => Config::desk(),
        None => Config::default(),
    };
    let cfg = overrides::apply(&base, &a.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Clips must match the model's raster and pose width.
fn check_clips(clips: &[ClipSample], cfg: &Config) -> Result<()> {
    for c in clips {
        if let Some(f) = c.frames.first() {
            if f.shape() != [cfg.raster, cfg.raster, 3] {
                return Err(Error::Config(format!("clip {} has {:?} frames, config raster is {}", c.id, f.shape(), cfg.raster)));
            }
        }
        if let Some(h) = c.gt.iter().flatten().next() {
            if h.state.pose.dim() != cfg.pose_dim {
                return Err(Error::Config(format!("clip {} has pose width {}, config expects {}", c.id, h.state.pose.dim(), cfg.pose_dim)));
            }
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let clips = data::read_clipfile(&a.data)?;
    if clips.is_empty() {
        return Err(Error::Usage(format!("{}: no clips to train on", a.data.display())));
    }
    check_clips(&clips, &cfg)?;
    let loss_path = a.loss_file.clone().unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".loss.txt");
        PathBuf::from(p)
    });
    match cfg.precision {
        DType::F32 => train_with::<f32>(cfg, &clips, &a, &loss_path),
        DType::F64 => train_with::<f64>(cfg, &clips, &a, &loss_path),
    }
}

fn train_with<T: Real>(cfg: Config, clips: &[ClipSample], a: &TrainArgs, loss_path: &Path) -> Result<()> {
    let mut trainer = Trainer::new(Model::<T>::new(cfg.clone(), cfg.seed)?);
    let mut lines = vec![format!("# config {}", serde_json::to_string(&cfg).expect("config serialises")), LossRecord::HEADER.to_string()];
    let log_every = a.log_every;
    let outcome = trainer.fit(clips, cfg.steps, |r| {
        lines.push(r.to_line());
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!("step {} total {:.5} type {:.4} box {:.4} pose {:.4} traj {:.4}", r.step, r.total, r.type_term, r.box_term, r.pose_term, r.traj_term);
        }
    });
    // the curve up to a failure is still useful
    lines.push(String::new());
    write_file(loss_path, &lines.join("\n"))?;
    let records = outcome?;
    checkpoint::save(&a.out_checkpoint, &trainer.model.cfg, &trainer.model.params, trainer.step as u64)?;
    let (first, last) = (records.first().map_or(0.0, |r| r.total), records.last().map_or(0.0, |r| r.total));
    println!("steps={} initial_loss={first:.6} final_loss={last:.6} checkpoint={} loss_file={}", records.len(), a.out_checkpoint.display(), loss_path.display());
    Ok(())
}

fn parse_modes(s: &str) -> Result<Vec<EvalMode>> {
    s.split(',').map(|m| m.trim().parse::<EvalMode>().map_err(|e| usage_error("eval", e.to_string()))).collect()
}

fn ablated(cfg: &Config, spec: &str) -> Result<Config> {
    let mut c = cfg.clone();
    for part in spec.split('+').map(str::trim) {
        match part {
            "none" | "" => {}
            "text" => c.modalities.text = false,
            "video" => c.modalities.video = false,
            "hand" => c.modalities.hand = false,
            "memory" => c.memory_enabled = false,
            other => return Err(usage_error("eval", format!("unknown ablation {other:?} (text, video, hand, memory, none)"))),
        }
    }
    c.validate()?;
    Ok(c)
}

fn eval_row<T: Real>(ck: &Checkpoint, cfg: Config, clips: &[ClipSample], mode: EvalMode) -> Result<stream::Evaluation> {
    let model: Model<T> = ck.model_with(cfg)?;
    stream::evaluate(&model, clips, mode)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let modes = parse_modes(&a.mode)?;
    let ablations: Vec<&str> = a.ablate.split(',').map(str::trim).collect();
    let clips = data::read_clipfile(&a.data)?;
    let ck = match &a.checkpoint {
        Some(p) => Some(checkpoint::load(p)?),
        None if modes.iter().any(|m| *m != EvalMode::Static) => {
            return Err(usage_error("eval", "--checkpoint is required for self and oracle modes".into()))
        }
        None => None,
    };
    if let Some(ck) = &ck {
        check_clips(&clips, &ck.config)?;
    }
    let mut rows = Vec::new();
    for &mode in &modes {
        for &ab in &ablations {
            let eval = match (&ck, mode) {
                (_, EvalMode::Static) => stream::evaluate_static(&clips)?,
                (Some(ck), _) => {
                    let cfg = ablated(&ck.config, ab)?;
                    match ck.params.dtype() {
                        DType::F32 => eval_row::<f32>(ck, cfg, &clips, mode)?,
                        DType::F64 => eval_row::<f64>(ck, cfg, &clips, mode)?,
                    }
                }
                (None, _) => unreachable!(),
            };
            let kv: Vec<String> = eval.report.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("mode={} ablate={ab} clips={} {}", mode.name(), clips.len(), kv.join(" "));
            rows.push(json!({"mode": mode.name(), "ablate": ab, "clips": clips.len(), "report": eval.report}));
            if mode == EvalMode::Static {
                break;
            }
        }
    }
    if let Some(out) = &a.out {
        let record = json!({
            "data": a.data.display().to_string(),
            "checkpoint": a.checkpoint.as_ref().map(|p| p.display().to_string()),
            "config": ck.as_ref().map(|c| serde_json::to_value(&c.config).expect("config serialises")),
            "rows": rows,
        });
        write_file(out, &serde_json::to_string_pretty(&record).expect("json"))?;
    }
    Ok(())
}

fn stream_with<T: Real>(ck: &Checkpoint, clips: &[ClipSample], mode: FeedMode) -> Result<Vec<(ClipSample, stream::Rollout)>> {
    let model: Model<T> = ck.model()?;
    clips.iter().map(|c| stream::rollout(&model, mode, c).map(|r| (c.clone(), r))).collect()
}

fn cmd_stream(a: StreamArgs) -> Result<()> {
    let mode = match a.mode.as_str() {
        "self" => FeedMode::SelfFeed,
        "oracle" => FeedMode::Oracle,
        m => return Err(usage_error("stream", format!("unknown mode {m:?} (self or oracle)"))),
    };
    let ck = checkpoint::load(&a.checkpoint)?;
    let clips = data::read_clipfile(&a.clip)?;
    check_clips(&clips, &ck.config)?;
    let runs = match ck.params.dtype() {
        DType::F32 => stream_with::<f32>(&ck, &clips, mode)?,
        DType::F64 => stream_with::<f64>(&ck, &clips, mode)?,
    };
    let mut traces = Vec::with_capacity(runs.len());
    for (clip, r) in &runs {
        println!("clip={} forecasts={} {}", clip.id, r.forecasts.len(), r.report);
        traces.push(stream::trace_clip(clip, &r.forecasts, if mode == FeedMode::Oracle { "oracle" } else { "self" }));
    }
    if let Some(path) = &a.emit_trace {
        let meta = json!({
            "trace": {"mode": a.mode, "checkpoint": a.checkpoint.display().to_string(), "source": a.clip.display().to_string()},
            "config": serde_json::to_value(&ck.config).expect("config serialises"),
        });
        data::write_clipfile_with_meta(&traces, path, Some(meta))?;
        println!("trace={} clips={}", path.display(), traces.len());
    }
    Ok(())
}

fn bench_with<T: Real>(ck: &Checkpoint, a: &BenchArgs) -> Result<stream::BenchReport> {
    let model: Model<T> = ck.model()?;
    let cfg = &model.cfg;
    let opts = GenOptions { raster: cfg.raster, pose_dim: cfg.pose_dim, ..GenOptions::default() };
    let source = data::generate_with(cfg.seed, Scenario::PickAndReturn, 1, &opts).remove(0);
    stream::bench(&model, &source, a.length, a.warmup)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.length == 0 {
        return Err(usage_error("bench", "--length must be positive".into()));
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let r = match ck.params.dtype() {
        DType::F32 => bench_with::<f32>(&ck, &a)?,
        DType::F64 => bench_with::<f64>(&ck, &a)?,
    };
    let kv: Vec<String> = r.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", kv.join(" "));
    if let Some(out) = &a.out {
        let record = json!({"bench": r, "config": serde_json::to_value(&ck.config).expect("config serialises")});
        write_file(out, &serde_json::to_string_pretty(&record).expect("json"))?;
    }
    if a.strict && !r.flat {
        return Err(Error::Numerics(handcast::numerics::NumericsError::NoConvergence(format!(
            "latency grows with stream position: slope {:.3e} us/step, t = {:.2}",
            r.slope_us_per_step, r.slope_t
        ))));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Stream(a) => cmd_stream(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use handcast::train::LossRecord;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handcast")).args(args).env("SFHAND_THREADS", "1").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 14] = [
    "--desk", "--set", "d=16", "--set", "heads=2", "--set", "raster=16", "--set", "pose_dim=6", "--set", "queries=4", "--set", "text_context=8",
    "--set=batch=2",
];

fn gen(dir: &Path, name: &str, scenario: &str, count: &str) -> PathBuf {
    let out = dir.join(name);
    let o = run(&["gen", "--seed", "3", "--scenario", scenario, "--count", count, "--frames", "5", "--raster", "16", "--pose-dim", "6", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn train(data: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out-checkpoint", p(ckpt), "--steps", "3", "--log-every", "0"];
    args.extend(SMALL);
    args.extend(extra);
    run(&args)
}

fn records(path: &Path) -> Vec<LossRecord> {
    std::fs::read_to_string(path).unwrap().lines().filter_map(LossRecord::parse_line).collect()
}

#[test]
fn gen_writes_files_and_rejects_bad_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(dir.path(), "reach.json", "reach", "3");
    assert!(m.exists() && handcast::data::blob_path(&m).exists());
    assert_eq!(handcast::data::read_clipfile(&m).unwrap().len(), 3);

    let bad = run(&["gen", "--scenario", "juggle", "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("Usage"), "{}", stderr(&bad));

    let empty = gen(dir.path(), "empty.json", "idle", "0");
    assert!(handcast::data::read_clipfile(&empty).unwrap().is_empty());

    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", "reach", "2");
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    assert!(train(&data, &a, &[]).status.success());
    assert!(train(&data, &b, &[]).status.success());
    let la = std::fs::read_to_string(dir.path().join("a.ckpt.loss.txt")).unwrap();
    let lb = std::fs::read_to_string(dir.path().join("b.ckpt.loss.txt")).unwrap();
    assert_eq!(la, lb);
    assert!(la.starts_with("# config {"));
    assert_eq!(records(&dir.path().join("a.ckpt.loss.txt")).len(), 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ck = handcast::checkpoint::load(&a).unwrap();
    assert_eq!((ck.step, ck.config.d, ck.config.steps), (3, 16, 3));

    let c = dir.path().join("c.ckpt");
    assert!(train(&data, &c, &["--set", "lambda_traj=0"]).status.success());
    assert!(records(&dir.path().join("c.ckpt.loss.txt")).iter().all(|r| r.traj_term == 0.0));
}

#[test]
fn train_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", "reach", "2");
    let ck = dir.path().join("x.ckpt");
    let o = train(&data, &ck, &["--set", "learning_rate=1e30", "--set", "lr_schedule=constant", "--set", "grad_clip=0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!ck.exists());
    assert_eq!(train(&data, &ck, &["--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(train(&dir.path().join("missing.json"), &ck, &[]).status.code(), Some(2));
}

#[test]
fn eval_stream_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let idle = gen(dir.path(), "idle.json", "idle", "2");
    let o = run(&["eval", "--data", p(&idle), "--mode", "static"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ade_cm=0.000000 fde_cm=0.000000"), "{}", stdout(&o));

    let data = gen(dir.path(), "d.json", "two_hands", "2");
    let ckpt = dir.path().join("m.ckpt");
    assert!(train(&data, &ckpt, &[]).status.success());
    let report = dir.path().join("report.json");
    let o = run(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--mode", "self,oracle", "--ablate", "none,hand,memory", "--out", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 6);
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rec["rows"].as_array().unwrap().len(), 6);
    assert_eq!(rec["config"]["d"], 16);
    assert_eq!(run(&["eval", "--data", p(&data), "--mode", "self"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--ablate", "nose"]).status.code(), Some(1));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let broken = dir.path().join("broken.ckpt");
    std::fs::write(&broken, bytes).unwrap();
    assert_eq!(run(&["eval", "--data", p(&data), "--checkpoint", p(&broken)]).status.code(), Some(2));

    let trace = dir.path().join("trace.json");
    let o = run(&["stream", "--checkpoint", p(&ckpt), "--clip", p(&data), "--emit-trace", p(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (clips, meta) = handcast::data::read_clipfile_with_meta(&trace).unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips[0].len(), 5);
    assert_eq!(meta.unwrap()["config"]["pose_dim"], 6);
    let again = dir.path().join("again.json");
    handcast::data::write_clipfile(&clips, &again).unwrap();
    assert_eq!(handcast::data::read_clipfile(&again).unwrap(), clips);

    let o = run(&["bench", "--checkpoint", p(&ckpt), "--length", "40", "--warmup", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let field = |k: &str| out.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{k}="))).unwrap().to_string();
    assert_eq!(field("max_queue"), "15");
    assert!(field("steps_per_sec").parse::<f64>().unwrap() > 0.0);
}

use std::path::Path;
use std::process::{Command, Output};

use provnet_core::artifacts::{CheckpointMeta, ModelSpec};
use provnet_core::models::{StreamConfig, StreamNet};
use provnet_core::preprocess::{Patch, PatchKind, PatchOrigin};
use provnet_core::store::{patch_file_name, write_patch};
use provnet_core::train::TrainConfig;
use provnet_engine::Checkpoint;

const CONFIG: &str = r#"
seed = 1

[paths]
data = "data"
store = "store"
checkpoints = "runs"

[gen]
videos_per_class = 6
gops_per_video = 2
p_frames_per_gop = 3
width = 64
height = 64

[ingest]
patch_size = 64

[arch]
profile = "reduced"

[train]
max_epochs = 2
patience = 2
batch_size = 16
lr = 0.001
"#;

fn provnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_provnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = provnet(dir, args);
    assert!(o.status.success(), "{args:?} failed:\n{}", text(&o));
    text(&o)
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for cmd in ["gen", "ingest", "train", "eval", "infer", "report"] {
        assert!(top.contains(cmd), "{cmd} missing from help");
    }
    let ingest = ok(dir.path(), &["ingest", "--help"]);
    for flag in ["--config", "--seed", "--split-by", "--triplet-stride", "--devices", "--out"] {
        assert!(ingest.contains(flag), "{flag} missing:\n{ingest}");
    }
    let train = ok(dir.path(), &["train", "--help"]);
    assert!(train.contains("--stream") && train.contains("ind") && train.contains("multi"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(provnet(dir.path(), &["gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(provnet(dir.path(), &["train", "--stream", "both"]).status.code(), Some(1));
    assert_eq!(provnet(dir.path(), &["frobnicate"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "sede = 3\n").unwrap();
    assert_eq!(provnet(dir.path(), &["gen", "--config", "bad.toml"]).status.code(), Some(1));
}

#[test]
fn missing_artifacts_exit_2_with_a_hint() {
    let dir = setup(CONFIG);
    let o = provnet(dir.path(), &["ingest", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("provnet gen"), "{}", text(&o));
    ok(dir.path(), &["gen", "--config", "run.toml"]);
    ok(dir.path(), &["ingest", "--config", "run.toml"]);
    let o = provnet(dir.path(), &["eval", "--config", "run.toml", "--stream", "ind"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("provnet train --stream ind"), "{}", text(&o));
}

#[test]
fn end_to_end_run_is_reproducible() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(d, &["gen", "--config", "run.toml"]);
    let first = ok(d, &["ingest", "--config", "run.toml"]);
    assert!(first.contains("single=") && first.contains("double="), "{first}");
    let manifest = std::fs::read(d.join("store/manifest.jsonl")).unwrap();
    let again = ok(d, &["ingest", "--config", "run.toml"]);
    assert_eq!(manifest, std::fs::read(d.join("store/manifest.jsonl")).unwrap());
    assert_eq!(first, again);

    ok(d, &["train", "--config", "run.toml", "--stream", "ind"]);
    let ck = std::fs::read(d.join("runs/ind.ckpt")).unwrap();
    ok(d, &["train", "--config", "run.toml", "--stream", "ind"]);
    assert_eq!(ck, std::fs::read(d.join("runs/ind.ckpt")).unwrap());
    let history = std::fs::read_to_string(d.join("runs/ind.history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(history.lines().all(|l| l.contains("\"train_loss\"") && l.contains("\"val_acc\"")));

    ok(d, &["train", "--config", "run.toml", "--stream", "pred"]);
    ok(d, &["train", "--config", "run.toml", "--stream", "multi"]);
    for s in ["ind", "pred", "multi"] {
        let out = ok(d, &["eval", "--config", "run.toml", "--stream", s]);
        assert!(out.contains("accuracy:") && out.contains("true\\pred"), "{out}");
    }
    let eval = std::fs::read_to_string(d.join("runs/multi.eval.json")).unwrap();
    assert!(eval.contains("\"seed\": 1"));
    let report = ok(d, &["report", "--config", "run.toml"]);
    assert!(report.contains("## ind") && report.contains("## multi"));
    assert!(d.join("runs/report.md").is_file());
}

#[test]
fn eval_with_other_classes_is_a_config_error() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(d, &["gen", "--config", "run.toml"]);
    ok(d, &["ingest", "--config", "run.toml"]);
    std::fs::create_dir_all(d.join("runs")).unwrap();
    write_constant_model(&d.join("runs/ind.ckpt"), &["x".into(), "y".into()], 0);
    let o = provnet(d, &["eval", "--config", "run.toml", "--stream", "ind"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("configuration error"), "{}", text(&o));
}

/// A reduced Ind-Net whose output layer always favours class `winner`.
fn write_constant_model(path: &Path, classes: &[String], winner: usize) {
    let mut net = StreamNet::new(StreamConfig::indnet_reduced(classes), 0).unwrap();
    let last = net.head.params_mut().into_iter().filter(|p| p.name.starts_with("head.out")).collect::<Vec<_>>();
    for p in last {
        let is_bias = p.name.ends_with("bias");
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v = if is_bias && i == winner { 50.0 } else { 0.0 };
        }
    }
    let meta = CheckpointMeta::new(
        ModelSpec::Stream {
            config: net.config.clone(),
        },
        TrainConfig::default(),
        1,
        1.0,
    );
    Checkpoint {
        metadata: meta.to_json(),
        tensors: net.export_state(),
        adam: None,
        seed: 0,
        epoch: 1,
    }
    .save(path)
    .unwrap();
}

#[test]
fn infer_with_a_perfect_model_is_certain() {
    let dir = setup(CONFIG);
    let d = dir.path();
    let classes: Vec<String> = vec!["single".into(), "double".into()];
    std::fs::create_dir_all(d.join("runs")).unwrap();
    write_constant_model(&d.join("runs/ind.ckpt"), &classes, 1);
    let patches = d.join("video");
    std::fs::create_dir_all(&patches).unwrap();
    for k in 0..5u32 {
        let p = Patch {
            kind: PatchKind::I,
            label: 1,
            origin: PatchOrigin {
                video_id: "double_000".into(),
                frame_index: k as u64,
                row: 0,
                col: 0,
            },
            size: 64,
            data: (0..64 * 64).map(|i| ((i as u32 * 7 + k) % 13) as f32 - 6.0).collect(),
        };
        write_patch(&patches.join(patch_file_name(&p)), &p).unwrap();
    }
    let out = ok(d, &["infer", "--config", "run.toml", "--stream", "ind", "video"]);
    assert!(out.contains("verdict: double (confidence 1.0000)"), "{out}");
}

#[test]
fn divergent_training_exits_3() {
    let config = CONFIG.replace("lr = 0.001", "lr = 1e30").replace("max_epochs = 2", "max_epochs = 3");
    let dir = setup(&config);
    let d = dir.path();
    ok(d, &["gen", "--config", "run.toml"]);
    ok(d, &["ingest", "--config", "run.toml"]);
    let o = provnet(d, &["train", "--config", "run.toml", "--stream", "ind"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("aborted"), "{}", text(&o));
}

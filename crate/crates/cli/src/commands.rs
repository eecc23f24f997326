use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use provnet_core::artifacts::{load_model_file, write_history, CheckpointMeta, LoadedModel, ModelSpec};
use provnet_core::ingest::Manifest;
use provnet_core::metrics::{argmax, majority_vote, EvalReport};
use provnet_core::models::{MultiFrameNet, StreamConfig, StreamKind, StreamNet};
use provnet_core::pipeline::{load_split_data, run_ingest, MANIFEST_FILE};
use provnet_core::preprocess::{Patch, PatchKind};
use provnet_core::store::read_patch;
use provnet_core::synth::generate_dataset;
use provnet_core::train::{
    evaluate, pair_patches, paired_examples, predict, train_multiframe, train_stream, transfer_retrain, FitOutcome,
    SplitData,
};
use provnet_core::Error;
use provnet_engine::{Checkpoint, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CliError, StreamArg};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn missing(what: &str, path: &Path, hint: &str) -> CliError {
    CliError::Core(Error::Input(format!("{what} {} not found; {hint}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn gen(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.data.clone());
    let s = generate_dataset(&cfg.gen, &out)?;
    println!("wrote {} frames to {} (seed {})", s.frames, out.display(), cfg.gen.seed);
    println!("sidecar: {}", s.sidecar.display());
    println!("labels: {}", s.labels.display());
    Ok(())
}

pub fn ingest(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let (sidecar, labels) = (cfg.paths.sidecar(), cfg.paths.labels());
    for (what, p) in [("sidecar", &sidecar), ("labels file", &labels)] {
        if !p.is_file() {
            return Err(missing(what, p, "run `provnet gen` or set [paths] in the config"));
        }
    }
    let out = out.unwrap_or_else(|| cfg.paths.store.clone());
    let s = run_ingest(&sidecar, &labels, &out, &cfg.ingest)?;
    for d in &s.diagnostics {
        eprintln!("warning: {d}");
    }
    println!("classes: {}", s.manifest.class_names().join(", "));
    for line in s.count_lines() {
        println!("{line}");
    }
    println!("patches written: {}", s.patches_written);
    println!("manifest: {} (seed {})", s.manifest_path.display(), s.manifest.header.seed);
    println!("sha256: {}", s.manifest.sha256());
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.paths.store.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(missing("manifest", &path, "run `provnet ingest` first"));
    }
    Ok(Manifest::load(&path)?)
}

fn kind_of(stream: StreamArg) -> StreamKind {
    match stream {
        StreamArg::Ind => StreamKind::Ind,
        _ => StreamKind::Pred,
    }
}

fn check_input_size(config: &StreamConfig, data: &SplitData) -> Result<()> {
    let expected = config.input_dims(1);
    if let Some((x, _)) = data.train.examples.first().or(data.test.examples.first()) {
        if x.dims() != expected {
            return Err(CliError::Core(Error::Config(format!(
                "patches are {:?} but the {:?} model expects {:?}; match [ingest] patch_size to [arch] profile",
                x.dims(),
                config.kind,
                expected
            ))));
        }
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, stream: StreamArg) -> PathBuf {
    dir.join(format!("{}.ckpt", stream.name()))
}

fn save_run(dir: &Path, stream: StreamArg, meta: &CheckpointMeta, state: Checkpoint, fit: &FitOutcome) -> Result<()> {
    let ck = Checkpoint {
        metadata: meta.to_json(),
        ..state
    };
    let path = checkpoint_path(dir, stream);
    ck.save(&path)?;
    write_history(&dir.join(format!("{}.history.jsonl", stream.name())), &fit.history)?;
    println!(
        "best epoch {} of {} (val acc {:.4}); checkpoint {}",
        fit.best_epoch,
        fit.history.len(),
        fit.best_val_acc,
        path.display()
    );
    Ok(())
}

/// On an aborted run, writes the last good weights next to where the
/// checkpoint would have gone, then passes the error on.
fn save_last_good(
    dir: &Path,
    stream: StreamArg,
    spec: ModelSpec,
    cfg: &RunConfig,
    mut full_state: impl FnMut(&[provnet_engine::NamedTensor]) -> Result<Vec<provnet_engine::NamedTensor>>,
    err: Error,
) -> CliError {
    if let Error::Aborted {
        last_good: Some(ck), ..
    } = &err
    {
        let path = dir.join(format!("{}.last_good.ckpt", stream.name()));
        match full_state(&ck.tensors) {
            Ok(tensors) => {
                let meta = CheckpointMeta::new(spec, cfg.train, ck.epoch as usize, f64::NAN);
                let saved = Checkpoint {
                    metadata: meta.to_json(),
                    tensors,
                    ..(**ck).clone()
                };
                match saved.save(&path) {
                    Ok(()) => eprintln!("last good weights (epoch {}) saved to {}", ck.epoch, path.display()),
                    Err(e) => eprintln!("could not save last good weights: {e}"),
                }
            }
            Err(e) => eprintln!("could not rebuild last good weights: {e}"),
        }
    }
    CliError::Core(err)
}

fn stream_state(ck: &Checkpoint) -> Checkpoint {
    Checkpoint {
        metadata: String::new(),
        tensors: Vec::new(),
        adam: ck.adam.clone(),
        seed: ck.seed,
        epoch: ck.epoch,
    }
}

pub fn train(cfg: &RunConfig, stream: StreamArg, out: Option<PathBuf>) -> Result<()> {
    cfg.train.validate()?;
    let dir = out.unwrap_or_else(|| cfg.paths.checkpoints.clone());
    let manifest = load_manifest(cfg)?;
    let classes = manifest.class_names().to_vec();
    create_dir(&dir)?;

    if stream == StreamArg::Multi {
        let mut streams = Vec::new();
        for s in [StreamArg::Ind, StreamArg::Pred] {
            let path = checkpoint_path(&dir, s);
            if !path.is_file() {
                return Err(missing(
                    "stream checkpoint",
                    &path,
                    &format!("run `provnet train --stream {}` first", s.name()),
                ));
            }
            match load_model_file(&path)?.1 {
                LoadedModel::Stream(n) if n.kind() == kind_of(s) => streams.push(n),
                _ => {
                    return Err(CliError::Core(Error::Config(format!(
                        "{} does not hold a {} stream",
                        path.display(),
                        s.name()
                    ))))
                }
            }
        }
        let pred = streams.pop().expect("two streams");
        let ind = streams.pop().expect("two streams");
        if ind.config.class_names != classes {
            return Err(CliError::Core(Error::Config(format!(
                "stream checkpoints were trained on {:?}, manifest has {:?}",
                ind.config.class_names, classes
            ))));
        }
        let mut net = MultiFrameNet::new(ind, pred, &cfg.arch.multi_hidden(), cfg.seed)?;
        let spec = ModelSpec::Multi {
            ind: net.ind.config.clone(),
            pred: net.pred.config.clone(),
            hidden: net.hidden.clone(),
        };
        let store = &cfg.paths.store;
        let i_data = load_split_data(&manifest, store, PatchKind::I)?;
        let p_data = load_split_data(&manifest, store, PatchKind::P)?;
        check_input_size(&net.ind.config, &i_data)?;
        check_input_size(&net.pred.config, &p_data)?;
        let out = match train_multiframe(&mut net, &i_data, &p_data, &cfg.train) {
            Ok(o) => o,
            Err(e) => {
                let base = net.clone();
                return Err(save_last_good(&dir, stream, spec, cfg, |head| {
                    let mut n = base.clone();
                    n.head.import_state(head)?;
                    Ok(n.export_state())
                }, e));
            }
        };
        let meta = CheckpointMeta::new(spec, cfg.train, out.fit.best_epoch, out.fit.best_val_acc);
        let mut state = stream_state(&out.fit.checkpoint(String::new(), cfg.seed));
        state.tensors = net.export_state();
        save_run(&dir, stream, &meta, state, &out.fit)?;
        println!("test accuracy {:.4}", out.report.accuracy);
        return Ok(());
    }

    let kind = kind_of(stream);
    let data = load_split_data(&manifest, &cfg.paths.store, kind.patch_kind())?;
    let (mut net, transfer) = match &cfg.transfer.from {
        Some(from) => {
            if !from.is_file() {
                return Err(missing("transfer checkpoint", from, "fix [transfer] from"));
            }
            match load_model_file(from)?.1 {
                LoadedModel::Stream(n) if n.kind() == kind => (n, Some(cfg.transfer.scope()?)),
                _ => {
                    return Err(CliError::Core(Error::Config(format!(
                        "{} does not hold a {} stream",
                        from.display(),
                        stream.name()
                    ))))
                }
            }
        }
        None => (
            StreamNet::new(StreamConfig::for_profile(kind, cfg.arch.profile, &classes), cfg.seed)?,
            None,
        ),
    };
    check_input_size(&net.config, &data)?;
    let result = match transfer {
        Some(scope) => transfer_retrain(&mut net, scope, &classes, &data, &cfg.train).map(|t| {
            println!(
                "transfer ({}): backbone hash {} -> {}",
                cfg.transfer.freeze,
                &t.backbone_hash_before[..12],
                &t.backbone_hash_after[..12]
            );
            (t.fit, t.report)
        }),
        None => train_stream(&mut net, &data, &cfg.train),
    };
    let (fit, report) = match result {
        Ok(r) => r,
        Err(e) => {
            let mut base = net.clone();
            if base.config.class_names != classes {
                base.reset_head(&classes, cfg.seed)?;
            }
            let spec = ModelSpec::Stream {
                config: base.config.clone(),
            };
            return Err(save_last_good(&dir, stream, spec, cfg, |t| {
                let mut n = base.clone();
                if t.iter().all(|t| t.name.starts_with("head.")) {
                    n.head.import_state(t)?;
                } else {
                    n.import_state(t)?;
                }
                Ok(n.export_state())
            }, e));
        }
    };
    let meta = CheckpointMeta::new(
        ModelSpec::Stream {
            config: net.config.clone(),
        },
        cfg.train,
        fit.best_epoch,
        fit.best_val_acc,
    );
    let mut state = stream_state(&fit.checkpoint(String::new(), cfg.seed));
    state.tensors = net.export_state();
    save_run(&dir, stream, &meta, state, &fit)?;
    println!("test accuracy {:.4}", report.accuracy);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalFile {
    stream: String,
    seed: u64,
    checkpoint: String,
    report: EvalReport,
}

fn load_checked(cfg: &RunConfig, stream: StreamArg, classes: &[String]) -> Result<(CheckpointMeta, LoadedModel, PathBuf)> {
    let path = checkpoint_path(&cfg.paths.checkpoints, stream);
    if !path.is_file() {
        return Err(missing(
            "checkpoint",
            &path,
            &format!("run `provnet train --stream {}` first", stream.name()),
        ));
    }
    let (meta, model) = load_model_file(&path)?;
    if meta.spec.class_names() != classes {
        return Err(CliError::Core(Error::Config(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            meta.spec.class_names(),
            classes
        ))));
    }
    let matches = match (&model, stream) {
        (LoadedModel::Multi(_), StreamArg::Multi) => true,
        (LoadedModel::Stream(n), s) if s != StreamArg::Multi => n.kind() == kind_of(s),
        _ => false,
    };
    if !matches {
        return Err(CliError::Core(Error::Config(format!(
            "{} does not hold a {} model",
            path.display(),
            stream.name()
        ))));
    }
    Ok((meta, model, path))
}

pub fn eval(cfg: &RunConfig, stream: StreamArg, out: Option<PathBuf>) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let classes = manifest.class_names().to_vec();
    let (meta, model, path) = load_checked(cfg, stream, &classes)?;
    let batch = meta.train.batch_size;
    let store = &cfg.paths.store;
    let report = match model {
        LoadedModel::Stream(mut net) => {
            let data = load_split_data(&manifest, store, net.kind().patch_kind())?;
            check_input_size(&net.config, &data)?;
            let videos = data.test.videos();
            evaluate(&mut net, &classes, &data.test.examples, Some(&videos), batch)?
        }
        LoadedModel::Multi(mut net) => {
            let i = load_split_data(&manifest, store, PatchKind::I)?;
            let p = load_split_data(&manifest, store, PatchKind::P)?;
            check_input_size(&net.ind.config, &i)?;
            check_input_size(&net.pred.config, &p)?;
            let (examples, videos) = paired_examples(&i.test, &p.test, cfg.seed);
            evaluate(&mut net, &classes, &examples, Some(&videos), batch)?
        }
    };
    let dir = out.unwrap_or_else(|| cfg.paths.checkpoints.clone());
    create_dir(&dir)?;
    let file = EvalFile {
        stream: stream.name().into(),
        seed: cfg.seed,
        checkpoint: path.display().to_string(),
        report,
    };
    let out_path = dir.join(format!("{}.eval.json", stream.name()));
    write(&out_path, &(serde_json::to_string_pretty(&file).expect("report serializes") + "\n"))?;
    println!("{}", file.report.render());
    println!("report: {}", out_path.display());
    Ok(())
}

fn read_patch_dir(dir: &Path) -> Result<Vec<Patch>> {
    if !dir.is_dir() {
        return Err(missing("patch folder", dir, "pass a folder of .patch files"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "patch"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_patch(p)?)).collect()
}

pub fn infer(cfg: &RunConfig, stream: StreamArg, patches: Option<PathBuf>) -> Result<()> {
    let dir = patches
        .or_else(|| cfg.infer.patches.clone())
        .ok_or_else(|| CliError::Usage("give a patch folder or set [infer] patches".into()))?;
    let all = read_patch_dir(&dir)?;
    let videos: std::collections::BTreeSet<&str> = all.iter().map(|p| p.origin.video_id.as_str()).collect();
    if videos.len() > 1 {
        return Err(CliError::Core(Error::Input(format!(
            "{} holds patches of {} videos; infer takes one video",
            dir.display(),
            videos.len()
        ))));
    }
    let path = checkpoint_path(&cfg.paths.checkpoints, stream);
    if !path.is_file() {
        return Err(missing(
            "checkpoint",
            &path,
            &format!("run `provnet train --stream {}` first", stream.name()),
        ));
    }
    let (meta, model) = load_model_file(&path)?;
    let classes = meta.spec.class_names().to_vec();
    let batch = meta.train.batch_size;
    let of_kind = |k: PatchKind| -> Vec<&Patch> { all.iter().filter(|p| p.kind == k).collect() };
    let size_check = |config: &StreamConfig, ps: &[&Patch]| -> Result<()> {
        match ps.first() {
            None => Err(CliError::Core(Error::Input(format!(
                "no {:?} patches in {}",
                config.kind.patch_kind(),
                dir.display()
            )))),
            Some(p) if p.dims() != config.input_dims(1) => Err(CliError::Core(Error::Config(format!(
                "patches are {:?}, model expects {:?}",
                p.dims(),
                config.input_dims(1)
            )))),
            Some(_) => Ok(()),
        }
    };
    let probs = match model {
        LoadedModel::Stream(mut net) => {
            if stream == StreamArg::Multi || net.kind() != kind_of(stream) {
                return Err(CliError::Core(Error::Config(format!(
                    "{} does not hold a {} model",
                    path.display(),
                    stream.name()
                ))));
            }
            let ps = of_kind(net.kind().patch_kind());
            size_check(&net.config, &ps)?;
            let tensors: Vec<Tensor<f32>> = ps.iter().map(|p| p.to_tensor()).collect();
            predict(&mut net, &tensors.iter().collect::<Vec<_>>(), batch)?
        }
        LoadedModel::Multi(mut net) => {
            if stream != StreamArg::Multi {
                return Err(CliError::Core(Error::Config(format!("{} holds a fused model", path.display()))));
            }
            let (is, ps) = (of_kind(PatchKind::I), of_kind(PatchKind::P));
            size_check(&net.ind.config, &is)?;
            size_check(&net.pred.config, &ps)?;
            let io: Vec<_> = is.iter().map(|p| p.origin.clone()).collect();
            let po: Vec<_> = ps.iter().map(|p| p.origin.clone()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = pair_patches(&io, &po, &mut rng)
                .into_iter()
                .map(|(a, b)| (is[a].to_tensor(), ps[b].to_tensor()))
                .collect();
            predict(&mut net, &pairs.iter().collect::<Vec<_>>(), batch)?
        }
    };
    let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    let verdict = majority_vote(&rows);
    let mut votes = vec![0usize; classes.len()];
    for r in &rows {
        votes[argmax(r)] += 1;
    }
    let n = rows.len() as f64;
    println!("patches: {}", rows.len());
    for (c, name) in classes.iter().enumerate() {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        println!("{name}: mean probability {mean:.4}, votes {}", votes[c]);
    }
    println!("verdict: {} (confidence {:.4})", classes[verdict], votes[verdict] as f64 / n);
    Ok(())
}

pub fn report(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = &cfg.paths.checkpoints;
    let mut text = String::from("# Evaluation report\n");
    let mut found = 0;
    for stream in [StreamArg::Ind, StreamArg::Pred, StreamArg::Multi] {
        let path = dir.join(format!("{}.eval.json", stream.name()));
        if !path.is_file() {
            continue;
        }
        let raw = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let file: EvalFile = serde_json::from_str(&raw).map_err(|e| CliError::Core(e.into()))?;
        found += 1;
        let _ = write!(
            text,
            "\n## {} (seed {})\n\ncheckpoint: {}\n\n```\n{}```\n",
            stream.name(),
            file.seed,
            file.checkpoint,
            file.report.render()
        );
        let hist = dir.join(format!("{}.history.jsonl", stream.name()));
        if let Ok(h) = std::fs::read_to_string(&hist) {
            let _ = writeln!(text, "\ntraining history: {} epochs\n", h.lines().count());
        }
    }
    if found == 0 {
        return Err(missing("evaluation reports in", dir, "run `provnet eval` first"));
    }
    let out_dir = out.unwrap_or_else(|| dir.clone());
    create_dir(&out_dir)?;
    let path = out_dir.join("report.md");
    write(&path, &text)?;
    print!("{text}");
    println!("\nwritten to {}", path.display());
    Ok(())
}

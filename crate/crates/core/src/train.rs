//! Training loop, early stopping, evaluation, stream pairing, transfer
//! retraining and the two-stream fusion protocol.

use std::collections::BTreeMap;

use provnet_engine::{
    softmax, softmax_cross_entropy, Adam, AdamConfig, AdamSnapshot, Checkpoint, EngineError, Mode, NamedTensor,
    Param, Sequential, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::{mlp_specs, FreezeScope, MultiFrameNet, StreamNet};
use crate::preprocess::PatchOrigin;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-5,
            batch_size: 32,
            max_epochs: 80,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, epochs and patience must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Patience rule on validation accuracy. Only a strict improvement resets
/// the counter, so ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch result; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, val_accuracy: f64) -> bool {
        match self.best {
            Some((_, best)) if val_accuracy <= best => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, val_accuracy));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Anything `fit` can train: batched forward to logits, backward from logit
/// gradients, and named state for best-epoch snapshots.
pub trait Network {
    type Input;

    fn forward(&mut self, batch: &[&Self::Input], mode: Mode) -> Result<Tensor<f32>>;
    fn backward(&mut self, dlogits: &Tensor<f32>) -> Result<()>;
    fn params_mut(&mut self) -> Vec<&mut Param<f32>>;
    fn export_state(&self) -> Vec<NamedTensor>;
    fn import_state(&mut self, state: &[NamedTensor]) -> Result<()>;
    fn num_classes(&self) -> usize;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn stack(batch: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(batch)?)
}

impl Network for StreamNet {
    type Input = Tensor<f32>;

    fn forward(&mut self, batch: &[&Tensor<f32>], mode: Mode) -> Result<Tensor<f32>> {
        StreamNet::forward(self, &stack(batch)?, mode)
    }

    fn backward(&mut self, dlogits: &Tensor<f32>) -> Result<()> {
        StreamNet::backward(self, dlogits)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        StreamNet::params_mut(self)
    }

    fn export_state(&self) -> Vec<NamedTensor> {
        StreamNet::export_state(self)
    }

    fn import_state(&mut self, state: &[NamedTensor]) -> Result<()> {
        StreamNet::import_state(self, state)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes()
    }
}

impl Network for MultiFrameNet {
    type Input = (Tensor<f32>, Tensor<f32>);

    fn forward(&mut self, batch: &[&Self::Input], mode: Mode) -> Result<Tensor<f32>> {
        let i: Vec<&Tensor<f32>> = batch.iter().map(|p| &p.0).collect();
        let p: Vec<&Tensor<f32>> = batch.iter().map(|p| &p.1).collect();
        MultiFrameNet::forward(self, &stack(&i)?, &stack(&p)?, mode)
    }

    fn backward(&mut self, dlogits: &Tensor<f32>) -> Result<()> {
        MultiFrameNet::backward(self, dlogits)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.head.params_mut()
    }

    fn export_state(&self) -> Vec<NamedTensor> {
        MultiFrameNet::export_state(self)
    }

    fn import_state(&mut self, state: &[NamedTensor]) -> Result<()> {
        MultiFrameNet::import_state(self, state)
    }

    fn num_classes(&self) -> usize {
        self.class_names().len()
    }
}

/// A classifier head trained on precomputed backbone features. Because a
/// frozen backbone runs batchnorm on stored statistics, its features do not
/// depend on batch composition, so this trains exactly the same head as a
/// full frozen-backbone pass would.
#[derive(Clone, Debug)]
pub struct HeadNet {
    pub head: Sequential<f32>,
    classes: usize,
}

impl HeadNet {
    pub fn new(head: Sequential<f32>, classes: usize) -> Self {
        Self { head, classes }
    }

    pub fn fresh(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Sequential::from_specs(&mlp_specs(input, hidden, classes), &mut rng), classes)
    }
}

impl Network for HeadNet {
    type Input = Tensor<f32>;

    fn forward(&mut self, batch: &[&Tensor<f32>], mode: Mode) -> Result<Tensor<f32>> {
        Ok(self.head.forward(&stack(batch)?, mode)?)
    }

    fn backward(&mut self, dlogits: &Tensor<f32>) -> Result<()> {
        self.head.backward(dlogits)?;
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.head.params_mut()
    }

    fn export_state(&self) -> Vec<NamedTensor> {
        self.head.export_state()
    }

    fn import_state(&mut self, state: &[NamedTensor]) -> Result<()> {
        Ok(self.head.import_state(state)?)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Training examples for one epoch: either one fixed set or a fresh set per
/// epoch (used when stream pairs are redrawn).
pub enum TrainSet<'a, I> {
    Fixed(&'a [(I, usize)]),
    PerEpoch(Box<dyn FnMut(usize) -> Result<Vec<(I, usize)>> + 'a>),
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights are loaded in the network.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_state: Vec<NamedTensor>,
    pub best_adam: AdamSnapshot,
    pub stopped_early: bool,
}

impl FitOutcome {
    pub fn checkpoint(&self, metadata: String, seed: u64) -> Checkpoint {
        Checkpoint {
            metadata,
            tensors: self.best_state.clone(),
            adam: Some(self.best_adam.clone()),
            seed,
            epoch: self.best_epoch as u32,
        }
    }
}

/// Softmax probabilities for every input, computed in eval mode.
pub fn predict<N: Network>(net: &mut N, inputs: &[&N::Input], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let probs = softmax(&net.forward(chunk, Mode::Eval)?);
        for row in probs.data().chunks(probs.item_len()) {
            out.push(row.iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

pub fn accuracy<N: Network>(net: &mut N, data: &[(N::Input, usize)], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<&N::Input> = data.iter().map(|d| &d.0).collect();
    let probs = predict(net, &inputs, batch_size)?;
    let correct = probs
        .iter()
        .zip(data)
        .filter(|(p, d)| crate::metrics::argmax(p) == d.1)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub fn evaluate<N: Network>(
    net: &mut N,
    class_names: &[String],
    data: &[(N::Input, usize)],
    videos: Option<&[String]>,
    batch_size: usize,
) -> Result<EvalReport> {
    if net.num_classes() != class_names.len() {
        return Err(Error::Config(format!(
            "model has {} classes, evaluation set has {}",
            net.num_classes(),
            class_names.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let inputs: Vec<&N::Input> = data.iter().map(|d| &d.0).collect();
    let probs = predict(net, &inputs, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
    EvalReport::from_scores(class_names, &probs, &labels, videos)
}

/// Mini-batch Adam training with per-epoch seeded shuffling and early
/// stopping on validation accuracy. On return the network holds the weights
/// of the best epoch.
pub fn fit<N: Network>(
    net: &mut N,
    mut train: TrainSet<'_, N::Input>,
    val: &[(N::Input, usize)],
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<(Vec<NamedTensor>, AdamSnapshot)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let owned;
        let data: &[(N::Input, usize)] = match &mut train {
            TrainSet::Fixed(d) => d,
            TrainSet::PerEpoch(f) => {
                owned = f(epoch)?;
                &owned
            }
        };
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&N::Input> = idx.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
            net.zero_grad();
            let logits = net.forward(&batch, Mode::Train)?;
            let ce = softmax_cross_entropy(&logits, &labels);
            let ce = match ce {
                Ok(ce) if ce.loss.is_finite() => ce,
                Ok(ce) => return Err(abort(epoch, format!("non-finite loss {}", ce.loss), &best, cfg, &stopper)),
                Err(EngineError::Input(msg)) if msg.contains("finite") => {
                    return Err(abort(epoch, msg, &best, cfg, &stopper))
                }
                Err(e) => return Err(e.into()),
            };
            loss_sum += ce.loss as f64 * labels.len() as f64;
            net.backward(&ce.grad())?;
            match adam.step(&mut net.params_mut()) {
                Ok(()) => {}
                Err(e @ EngineError::NonFiniteGradient { .. }) => {
                    return Err(abort(epoch, e.to_string(), &best, cfg, &stopper))
                }
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = loss_sum / data.len() as f64;
        let val_acc = accuracy(net, val, cfg.batch_size)?;
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val_acc {val_acc:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        if stopper.observe(epoch, val_acc) {
            best = Some((net.export_state(), AdamSnapshot::capture(&adam)));
        }
        if stopper.should_stop() {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_epoch, best_val_acc) = stopper.best().expect("at least one epoch ran");
    let (best_state, best_adam) = best.expect("best state recorded with the best epoch");
    net.import_state(&best_state)?;
    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_acc,
        best_state,
        best_adam,
        stopped_early,
    })
}

fn abort(
    epoch: usize,
    reason: String,
    best: &Option<(Vec<NamedTensor>, AdamSnapshot)>,
    cfg: &TrainConfig,
    stopper: &EarlyStopping,
) -> Error {
    log::error!("training aborted at epoch {epoch}: {reason}");
    let last_good = best.as_ref().map(|(state, adam)| {
        Box::new(Checkpoint {
            metadata: String::new(),
            tensors: state.clone(),
            adam: Some(adam.clone()),
            seed: cfg.seed,
            epoch: stopper.best().map_or(0, |b| b.0) as u32,
        })
    });
    Error::Aborted {
        epoch,
        reason,
        last_good,
    }
}

/// Backbone features of every input, in eval mode, one row tensor each.
pub fn extract_features(net: &mut StreamNet, inputs: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let f = net.features(&stack(chunk)?, Mode::Eval)?;
        let w = f.item_len();
        for n in 0..f.batch() {
            out.push(Tensor::new([1, w, 1, 1], f.item(n).to_vec())?);
        }
    }
    Ok(out)
}

/// Pairs each I-patch with a P-patch of the same video: nearest triplet
/// center to the I-frame index, then the same tile position, then a random
/// pick among what is left. I-patches of videos without P-patches are
/// skipped. Returns `(i_index, p_index)` in I order.
pub fn pair_patches(i: &[PatchOrigin], p: &[PatchOrigin], rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, o) in p.iter().enumerate() {
        by_video.entry(&o.video_id).or_default().push(k);
    }
    let mut out = Vec::with_capacity(i.len());
    for (k, o) in i.iter().enumerate() {
        let Some(cands) = by_video.get(o.video_id.as_str()) else {
            continue;
        };
        let key = |c: &usize| {
            let q = &p[*c];
            (q.frame_index.abs_diff(o.frame_index), (q.row, q.col) != (o.row, o.col))
        };
        let best = cands.iter().map(key).min().expect("video has candidates");
        let tied: Vec<usize> = cands.iter().copied().filter(|c| key(c) == best).collect();
        let pick = if tied.len() == 1 { tied[0] } else { tied[rng.gen_range(0..tied.len())] };
        out.push((k, pick));
    }
    out
}

/// Labelled stream inputs together with their origins.
#[derive(Clone, Debug, Default)]
pub struct StreamData {
    pub examples: Vec<(Tensor<f32>, usize)>,
    pub origins: Vec<PatchOrigin>,
}

impl StreamData {
    pub fn videos(&self) -> Vec<String> {
        self.origins.iter().map(|o| o.video_id.clone()).collect()
    }

    pub fn inputs(&self) -> Vec<&Tensor<f32>> {
        self.examples.iter().map(|e| &e.0).collect()
    }
}

/// Train/val/test data for one stream kind.
#[derive(Clone, Debug, Default)]
pub struct SplitData {
    pub train: StreamData,
    pub val: StreamData,
    pub test: StreamData,
}

fn feature_set(net: &mut StreamNet, data: &StreamData, batch: usize) -> Result<Vec<(Tensor<f32>, usize)>> {
    let f = extract_features(net, &data.inputs(), batch)?;
    Ok(f.into_iter().zip(data.examples.iter().map(|e| e.1)).collect())
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub fit: FitOutcome,
    pub report: EvalReport,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Freezes `scope`, retrains what is left on `data` and evaluates on its test
/// split. A class list different from the model's re-initializes the head.
pub fn transfer_retrain(
    net: &mut StreamNet,
    scope: FreezeScope,
    class_names: &[String],
    data: &SplitData,
    cfg: &TrainConfig,
) -> Result<TransferOutcome> {
    if net.config.class_names != class_names {
        net.reset_head(class_names, cfg.seed)?;
    }
    net.freeze(scope);
    let before = net.backbone_hash();
    let fit_out = match scope {
        FreezeScope::None => fit(net, TrainSet::Fixed(&data.train.examples), &data.val.examples, cfg)?,
        FreezeScope::ConvBlocks => {
            let train = feature_set(net, &data.train, cfg.batch_size)?;
            let val = feature_set(net, &data.val, cfg.batch_size)?;
            let mut head = HeadNet::new(net.head.clone(), class_names.len());
            let out = fit(&mut head, TrainSet::Fixed(&train), &val, cfg)?;
            net.head = head.head;
            out
        }
    };
    let after = net.backbone_hash();
    let videos = data.test.videos();
    let report = evaluate(net, class_names, &data.test.examples, Some(&videos), cfg.batch_size)?;
    Ok(TransferOutcome {
        fit: fit_out,
        report,
        backbone_hash_before: before,
        backbone_hash_after: after,
    })
}

/// Concatenated `[I features, P features]` rows for the given pairs.
fn fused(
    fi: &[(Tensor<f32>, usize)],
    fp: &[(Tensor<f32>, usize)],
    pairs: &[(usize, usize)],
) -> Result<Vec<(Tensor<f32>, usize)>> {
    pairs
        .iter()
        .map(|&(a, b)| Ok((Tensor::concat_features(&fi[a].0, &fp[b].0)?, fi[a].1)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct MultiOutcome {
    pub fit: FitOutcome,
    pub report: EvalReport,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Paired examples of one split for the fused network, with the video of
/// each pair.
pub fn paired_examples(
    i: &StreamData,
    p: &StreamData,
    seed: u64,
) -> (Vec<((Tensor<f32>, Tensor<f32>), usize)>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pair_patches(&i.origins, &p.origins, &mut rng)
        .into_iter()
        .map(|(a, b)| {
            (
                ((i.examples[a].0.clone(), p.examples[b].0.clone()), i.examples[a].1),
                i.origins[a].video_id.clone(),
            )
        })
        .unzip()
}

/// Trains the fused head of `net` (backbones frozen) on I/P pairs redrawn
/// every epoch; validation and test pairs are drawn once.
pub fn train_multiframe(
    net: &mut MultiFrameNet,
    i_data: &SplitData,
    p_data: &SplitData,
    cfg: &TrainConfig,
) -> Result<MultiOutcome> {
    let before = net.backbone_hash();
    let b = cfg.batch_size;
    let fi_train = feature_set(&mut net.ind, &i_data.train, b)?;
    let fp_train = feature_set(&mut net.pred, &p_data.train, b)?;
    let fi_val = feature_set(&mut net.ind, &i_data.val, b)?;
    let fp_val = feature_set(&mut net.pred, &p_data.val, b)?;
    let fi_test = feature_set(&mut net.ind, &i_data.test, b)?;
    let fp_test = feature_set(&mut net.pred, &p_data.test, b)?;

    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5041_4952);
    let val_pairs = pair_patches(&i_data.val.origins, &p_data.val.origins, &mut pair_rng);
    let test_pairs = pair_patches(&i_data.test.origins, &p_data.test.origins, &mut pair_rng);
    let val = fused(&fi_val, &fp_val, &val_pairs)?;
    let test = fused(&fi_test, &fp_test, &test_pairs)?;
    if val.is_empty() || test.is_empty() {
        return Err(Error::Config("no I/P pairs in the validation or test split".into()));
    }

    let mut head = HeadNet::new(net.head.clone(), net.class_names().len());
    let train_set = TrainSet::PerEpoch(Box::new(|_epoch| {
        let pairs = pair_patches(&i_data.train.origins, &p_data.train.origins, &mut pair_rng);
        fused(&fi_train, &fp_train, &pairs)
    }));
    let fit_out = fit(&mut head, train_set, &val, cfg)?;
    net.head = head.head;

    let videos: Vec<String> = test_pairs
        .iter()
        .map(|&(a, _)| i_data.test.origins[a].video_id.clone())
        .collect();
    let mut scorer = HeadNet::new(net.head.clone(), net.class_names().len());
    let report = evaluate(&mut scorer, &net.class_names().to_vec(), &test, Some(&videos), b)?;
    Ok(MultiOutcome {
        fit: fit_out,
        report,
        backbone_hash_before: before,
        backbone_hash_after: net.backbone_hash(),
    })
}

/// Trains a stream network end to end and evaluates it on the test split.
pub fn train_stream(net: &mut StreamNet, data: &SplitData, cfg: &TrainConfig) -> Result<(FitOutcome, EvalReport)> {
    let fit_out = fit(net, TrainSet::Fixed(&data.train.examples), &data.val.examples, cfg)?;
    let videos = data.test.videos();
    let class_names = net.config.class_names.clone();
    let report = evaluate(net, &class_names, &data.test.examples, Some(&videos), cfg.batch_size)?;
    Ok((fit_out, report))
}

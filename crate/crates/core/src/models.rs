//! Ind-Net, Pred-Net and MultiFrame-Net built from engine layers.

use provnet_engine::{LayerSpec, Mode, NamedTensor, Param, PoolKind, Sequential, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::PatchKind;

pub const IND_FEATURE_WIDTH: usize = 4096;
pub const PRED_FEATURE_WIDTH: usize = 256;
pub const MULTI_FEATURE_WIDTH: usize = IND_FEATURE_WIDTH + PRED_FEATURE_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    /// I-frame stream: 1-channel input, max pooling, flattened features.
    Ind,
    /// P-frame stream: 3-channel input, average pooling, global pooled features.
    Pred,
}

impl StreamKind {
    pub fn input_channels(self) -> usize {
        match self {
            StreamKind::Ind => 1,
            StreamKind::Pred => 3,
        }
    }

    pub fn patch_kind(self) -> PatchKind {
        match self {
            StreamKind::Ind => PatchKind::I,
            StreamKind::Pred => PatchKind::P,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub channels: usize,
    /// Kernel size of each Conv-BN-ReLU unit in the block.
    pub kernels: Vec<usize>,
}

impl BlockPlan {
    pub fn new(channels: usize, kernels: &[usize]) -> Self {
        Self {
            channels,
            kernels: kernels.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchProfile {
    /// Full-size networks on 256×256 patches.
    #[default]
    Full,
    /// Narrower, shallower networks on 64×64 patches for CPU runs.
    Reduced,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub class_names: Vec<String>,
    pub input_size: usize,
    pub blocks: Vec<BlockPlan>,
    /// Hidden fully connected widths before the `|C|` output layer.
    pub head: Vec<usize>,
    /// Required backbone feature width; building fails on a mismatch.
    pub feature_width: usize,
}

impl StreamConfig {
    pub fn indnet(class_names: &[String]) -> Self {
        let mut blocks: Vec<BlockPlan> = [32, 64, 128].iter().map(|&c| BlockPlan::new(c, &[3, 3])).collect();
        blocks[0].kernels[0] = 5;
        blocks.extend([256, 256, 256].iter().map(|&c| BlockPlan::new(c, &[3, 3, 3])));
        Self {
            kind: StreamKind::Ind,
            class_names: class_names.to_vec(),
            input_size: 256,
            blocks,
            head: vec![512, 512],
            feature_width: IND_FEATURE_WIDTH,
        }
    }

    pub fn prednet(class_names: &[String]) -> Self {
        let blocks = [(32, 5), (64, 5), (128, 3), (256, 3), (256, 3)]
            .iter()
            .map(|&(c, k)| BlockPlan::new(c, &[k, k]))
            .collect();
        Self {
            kind: StreamKind::Pred,
            class_names: class_names.to_vec(),
            input_size: 256,
            blocks,
            head: Vec::new(),
            feature_width: PRED_FEATURE_WIDTH,
        }
    }

    pub fn indnet_reduced(class_names: &[String]) -> Self {
        Self {
            kind: StreamKind::Ind,
            class_names: class_names.to_vec(),
            input_size: 64,
            blocks: vec![
                BlockPlan::new(8, &[5, 3]),
                BlockPlan::new(16, &[3, 3]),
                BlockPlan::new(32, &[3, 3]),
                BlockPlan::new(32, &[3, 3, 3]),
            ],
            head: vec![64, 64],
            feature_width: 32 * 4 * 4,
        }
    }

    pub fn prednet_reduced(class_names: &[String]) -> Self {
        Self {
            kind: StreamKind::Pred,
            class_names: class_names.to_vec(),
            input_size: 64,
            blocks: vec![
                BlockPlan::new(8, &[5, 5]),
                BlockPlan::new(16, &[5, 5]),
                BlockPlan::new(16, &[3, 3]),
                BlockPlan::new(32, &[3, 3]),
                BlockPlan::new(32, &[3, 3]),
            ],
            head: Vec::new(),
            feature_width: 32,
        }
    }

    pub fn for_profile(kind: StreamKind, profile: ArchProfile, class_names: &[String]) -> Self {
        match (kind, profile) {
            (StreamKind::Ind, ArchProfile::Full) => Self::indnet(class_names),
            (StreamKind::Pred, ArchProfile::Full) => Self::prednet(class_names),
            (StreamKind::Ind, ArchProfile::Reduced) => Self::indnet_reduced(class_names),
            (StreamKind::Pred, ArchProfile::Reduced) => Self::prednet_reduced(class_names),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dims(&self, batch: usize) -> [usize; 4] {
        [batch, self.kind.input_channels(), self.input_size, self.input_size]
    }

    pub fn backbone_specs(&self) -> Result<Vec<(String, LayerSpec)>> {
        if self.blocks.is_empty() {
            return Err(Error::Config("a stream needs at least one block".into()));
        }
        let pool = match self.kind {
            StreamKind::Ind => PoolKind::Max,
            StreamKind::Pred => PoolKind::Avg,
        };
        let mut specs = Vec::new();
        let mut c_in = self.kind.input_channels();
        for (b, block) in self.blocks.iter().enumerate() {
            let b = b + 1;
            if block.kernels.is_empty() || block.channels == 0 {
                return Err(Error::Config(format!("block {b} is empty")));
            }
            for (j, &k) in block.kernels.iter().enumerate() {
                if k != 3 && k != 5 {
                    return Err(Error::Config(format!("block {b}: kernel {k} is not 3 or 5")));
                }
                let j = j + 1;
                specs.push((format!("block{b}.conv{j}"), LayerSpec::conv_same(c_in, block.channels, k)));
                specs.push((
                    format!("block{b}.bn{j}"),
                    LayerSpec::BatchNorm2d {
                        channels: block.channels,
                    },
                ));
                specs.push((format!("block{b}.relu{j}"), LayerSpec::Relu));
                c_in = block.channels;
            }
            specs.push((format!("block{b}.pool"), LayerSpec::Pool { kind: pool, window: 2 }));
        }
        match self.kind {
            StreamKind::Ind => specs.push(("flatten".into(), LayerSpec::Flatten)),
            StreamKind::Pred => specs.push(("gap".into(), LayerSpec::GlobalAvgPool)),
        }
        Ok(specs)
    }

    pub fn head_specs(&self) -> Result<Vec<(String, LayerSpec)>> {
        if self.num_classes() < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(mlp_specs(self.feature_width, &self.head, self.num_classes()))
    }

    /// Backbone output width from the symbolic shape pass.
    pub fn computed_feature_width(&self) -> Result<usize> {
        let mut dims = self.input_dims(1);
        for (name, spec) in self.backbone_specs()? {
            dims = spec
                .output_dims(dims)
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(dims[1])
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.computed_feature_width()?;
        if width != self.feature_width {
            return Err(Error::Config(format!(
                "{:?} plan yields feature width {width}, expected {}",
                self.kind, self.feature_width
            )));
        }
        self.head_specs()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// `FC → ReLU` for each hidden width, then a final `FC` to `classes`.
pub fn mlp_specs(input: usize, hidden: &[usize], classes: usize) -> Vec<(String, LayerSpec)> {
    let mut specs = Vec::new();
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        let i = i + 1;
        specs.push((
            format!("head.fc{i}"),
            LayerSpec::Linear {
                in_features: width,
                out_features: h,
            },
        ));
        specs.push((format!("head.relu{i}"), LayerSpec::Relu));
        width = h;
    }
    specs.push((
        "head.out".into(),
        LayerSpec::Linear {
            in_features: width,
            out_features: classes,
        },
    ));
    specs
}

/// Closed-form parameter count of a layer list.
pub fn param_count(specs: &[(String, LayerSpec)]) -> usize {
    specs.iter().map(|(_, s)| s.param_count()).sum()
}

/// Hex SHA-256 over parameter names, dims and little-endian values.
pub fn params_hash<'a>(params: impl IntoIterator<Item = &'a Param<f32>>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for d in p.value.dims() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeScope {
    /// Nothing frozen.
    None,
    /// Every convolutional block, batchnorm included.
    ConvBlocks,
}

impl std::str::FromStr for FreezeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezeScope::None),
            "conv_blocks" => Ok(FreezeScope::ConvBlocks),
            other => Err(Error::Config(format!("unknown freeze scope `{other}`"))),
        }
    }
}

/// A single-stream network: convolutional backbone plus classifier head.
#[derive(Clone, Debug)]
pub struct StreamNet {
    pub config: StreamConfig,
    pub backbone: Sequential<f32>,
    pub head: Sequential<f32>,
    frozen: bool,
}

impl StreamNet {
    pub fn new(config: StreamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Sequential::from_specs(&config.backbone_specs()?, &mut rng);
        let head = Sequential::from_specs(&config.head_specs()?, &mut rng);
        Ok(Self {
            config,
            backbone,
            head,
            frozen: false,
        })
    }

    pub fn kind(&self) -> StreamKind {
        self.config.kind
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self, scope: FreezeScope) {
        self.frozen = scope == FreezeScope::ConvBlocks;
        self.backbone.set_frozen(self.frozen);
    }

    /// Re-initializes the head for a new class list.
    pub fn reset_head(&mut self, class_names: &[String], seed: u64) -> Result<()> {
        self.config.class_names = class_names.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Sequential::from_specs(&self.config.head_specs()?, &mut rng);
        Ok(())
    }

    pub fn features(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        Ok(self.backbone.forward(x, mode)?)
    }

    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let f = self.features(x, mode)?;
        Ok(self.head.forward(&f, mode)?)
    }

    /// Backpropagates logit gradients; a frozen backbone receives none.
    pub fn backward(&mut self, dlogits: &Tensor<f32>) -> Result<()> {
        let df = self.head.backward(dlogits)?;
        if !self.frozen {
            self.backbone.backward(&df)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<f32>> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn backbone_hash(&self) -> String {
        params_hash(self.backbone.params())
    }

    pub fn head_hash(&self) -> String {
        params_hash(self.head.params())
    }

    /// Symbolic shapes of every backbone and head layer.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<(String, [usize; 4])>> {
        let mut trace = self.backbone.shape_trace(self.config.input_dims(batch))?;
        let last = trace.last().map(|t| t.1).unwrap_or(self.config.input_dims(batch));
        trace.extend(self.head.shape_trace(last)?);
        Ok(trace)
    }

    /// Real forward pass recording every layer's output dims.
    pub fn forward_trace(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<(Tensor<f32>, Vec<(String, [usize; 4])>)> {
        let (f, mut trace) = self.backbone.forward_trace(x, mode)?;
        let (y, head_trace) = self.head.forward_trace(&f, mode)?;
        trace.extend(head_trace);
        Ok((y, trace))
    }

    pub fn export_state(&self) -> Vec<NamedTensor> {
        let mut s = self.backbone.export_state();
        s.extend(self.head.export_state());
        s
    }

    pub fn import_state(&mut self, state: &[NamedTensor]) -> Result<()> {
        self.backbone.import_state(state)?;
        self.head.import_state(state)?;
        Ok(())
    }
}

/// Two frozen stream backbones feeding a shared classifier head.
#[derive(Clone, Debug)]
pub struct MultiFrameNet {
    pub ind: StreamNet,
    pub pred: StreamNet,
    pub hidden: Vec<usize>,
    pub head: Sequential<f32>,
}

pub const IND_PREFIX: &str = "ind.";
pub const PRED_PREFIX: &str = "pred.";
pub const MULTI_PREFIX: &str = "multi.";

impl MultiFrameNet {
    /// Takes ownership of both streams, freezes their backbones and builds a
    /// fresh head on the concatenated features.
    pub fn new(mut ind: StreamNet, mut pred: StreamNet, hidden: &[usize], seed: u64) -> Result<Self> {
        if ind.kind() != StreamKind::Ind || pred.kind() != StreamKind::Pred {
            return Err(Error::Config("MultiFrame-Net needs an Ind-Net and a Pred-Net".into()));
        }
        if ind.config.class_names != pred.config.class_names {
            return Err(Error::Config(format!(
                "stream classes differ: {:?} vs {:?}",
                ind.config.class_names, pred.config.class_names
            )));
        }
        let width = ind.config.computed_feature_width()? + pred.config.computed_feature_width()?;
        let declared = ind.config.feature_width + pred.config.feature_width;
        if width != declared {
            return Err(Error::Config(format!("concat width {width}, expected {declared}")));
        }
        ind.freeze(FreezeScope::ConvBlocks);
        pred.freeze(FreezeScope::ConvBlocks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Sequential::from_specs(&mlp_specs(width, hidden, ind.config.num_classes()), &mut rng);
        Ok(Self {
            ind,
            pred,
            hidden: hidden.to_vec(),
            head,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.ind.config.class_names
    }

    pub fn concat_width(&self) -> usize {
        self.ind.config.feature_width + self.pred.config.feature_width
    }

    pub fn features(&mut self, i: &Tensor<f32>, p: &Tensor<f32>) -> Result<Tensor<f32>> {
        let fi = self.ind.features(i, Mode::Eval)?;
        let fp = self.pred.features(p, Mode::Eval)?;
        Ok(Tensor::concat_features(&fi, &fp)?)
    }

    pub fn forward(&mut self, i: &Tensor<f32>, p: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let f = self.features(i, p)?;
        Ok(self.head.forward(&f, mode)?)
    }

    /// Head-only backward; the stream backbones are frozen.
    pub fn backward(&mut self, dlogits: &Tensor<f32>) -> Result<()> {
        self.head.backward(dlogits)?;
        Ok(())
    }

    pub fn backbone_hash(&self) -> String {
        params_hash(self.ind.backbone.params().into_iter().chain(self.pred.backbone.params()))
    }

    pub fn head_hash(&self) -> String {
        params_hash(self.head.params())
    }

    pub fn export_state(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (prefix, tensors) in [
            (IND_PREFIX, self.ind.backbone.export_state()),
            (PRED_PREFIX, self.pred.backbone.export_state()),
            (MULTI_PREFIX, self.head.export_state()),
        ] {
            out.extend(tensors.into_iter().map(|mut t| {
                t.name = format!("{prefix}{}", t.name);
                t
            }));
        }
        out
    }

    pub fn import_state(&mut self, state: &[NamedTensor]) -> Result<()> {
        let strip = |prefix: &str| -> Vec<NamedTensor> {
            state
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|n| NamedTensor {
                        name: n.to_owned(),
                        ..t.clone()
                    })
                })
                .collect()
        };
        self.ind.backbone.import_state(&strip(IND_PREFIX))?;
        self.pred.backbone.import_state(&strip(PRED_PREFIX))?;
        self.head.import_state(&strip(MULTI_PREFIX))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn full_plans_hit_declared_widths() {
        let ind = StreamConfig::indnet(&classes(3));
        let pred = StreamConfig::prednet(&classes(3));
        assert_eq!(ind.computed_feature_width().unwrap(), 4096);
        assert_eq!(pred.computed_feature_width().unwrap(), 256);
        assert_eq!(ind.blocks.iter().map(|b| b.kernels.len()).collect::<Vec<_>>(), vec![2, 2, 2, 3, 3, 3]);
        assert_eq!(ind.blocks[0].kernels, vec![5, 3]);
        assert!(ind.blocks.iter().flat_map(|b| &b.kernels).skip(1).all(|&k| k == 3));
        let pk: Vec<usize> = pred.blocks.iter().map(|b| b.kernels[0]).collect();
        assert_eq!(pk, vec![5, 5, 3, 3, 3]);
    }

    #[test]
    fn reduced_plans_validate() {
        StreamConfig::indnet_reduced(&classes(2)).validate().unwrap();
        StreamConfig::prednet_reduced(&classes(2)).validate().unwrap();
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut cfg = StreamConfig::indnet(&classes(3));
        cfg.blocks[5].channels = 128;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = StreamConfig::prednet(&classes(3));
        cfg.blocks[4].channels = 128;
        assert!(matches!(StreamNet::new(cfg, 0), Err(Error::Config(_))));
        let mut cfg = StreamConfig::prednet(&classes(3));
        cfg.blocks[0].kernels[0] = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = StreamConfig::indnet(&classes(3));
        let net = StreamNet::new(cfg.clone(), 0).unwrap();
        // conv: out·in·k² + out, bn: 2·out, fc: in·out + out
        let mut expected = 0;
        let mut c_in = 1;
        for b in &cfg.blocks {
            for &k in &b.kernels {
                expected += b.channels * c_in * k * k + b.channels + 2 * b.channels;
                c_in = b.channels;
            }
        }
        expected += 4096 * 512 + 512 + 512 * 512 + 512 + 512 * 3 + 3;
        assert_eq!(net.params().iter().map(|p| p.value.len()).sum::<usize>(), expected);
    }

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let a = StreamConfig::indnet(&classes(3));
        assert_eq!(a.fingerprint(), StreamConfig::indnet(&classes(3)).fingerprint());
        assert_ne!(a.fingerprint(), StreamConfig::indnet(&classes(2)).fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn layer_names() {
        let specs = StreamConfig::prednet_reduced(&classes(2)).backbone_specs().unwrap();
        let names: Vec<&str> = specs.iter().take(7).map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["block1.conv1", "block1.bn1", "block1.relu1", "block1.conv2", "block1.bn2", "block1.relu2", "block1.pool"]
        );
        assert_eq!(specs.last().unwrap().0, "gap");
    }

    #[test]
    fn freeze_scope_parsing() {
        assert_eq!("conv_blocks".parse::<FreezeScope>().unwrap(), FreezeScope::ConvBlocks);
        assert!(matches!("heads".parse::<FreezeScope>(), Err(Error::Config(_))));
    }

    #[test]
    fn multiframe_rejects_class_mismatch() {
        let ind = StreamNet::new(StreamConfig::indnet_reduced(&classes(2)), 0).unwrap();
        let pred = StreamNet::new(StreamConfig::prednet_reduced(&classes(3)), 0).unwrap();
        assert!(matches!(MultiFrameNet::new(ind, pred, &[16], 0), Err(Error::Config(_))));
    }

    #[test]
    fn multiframe_state_round_trip() {
        let ind = StreamNet::new(StreamConfig::indnet_reduced(&classes(2)), 1).unwrap();
        let pred = StreamNet::new(StreamConfig::prednet_reduced(&classes(2)), 2).unwrap();
        let net = MultiFrameNet::new(ind, pred, &[16], 3).unwrap();
        assert_eq!(net.concat_width(), 512 + 32);
        let state = net.export_state();
        let ind = StreamNet::new(StreamConfig::indnet_reduced(&classes(2)), 4).unwrap();
        let pred = StreamNet::new(StreamConfig::prednet_reduced(&classes(2)), 5).unwrap();
        let mut other = MultiFrameNet::new(ind, pred, &[16], 6).unwrap();
        assert_ne!(other.head_hash(), net.head_hash());
        other.import_state(&state).unwrap();
        assert_eq!(other.head_hash(), net.head_hash());
        assert_eq!(other.backbone_hash(), net.backbone_hash());
    }
}

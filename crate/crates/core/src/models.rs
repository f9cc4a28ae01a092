//! Classifier zoo and the image generator.

use std::fmt;
use std::path::{Path, PathBuf};

use fedsyn_nn::{
    BatchNorm, BnStats, Conv2d, ForwardOptions, Init, Linear, Mode, Network, Node, ParamBuilder, ParamStore,
    Residual, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, FedSynError, Result};

/// Batch-norm statistics seen at every batch-norm layer during one pass.
pub type BatchStatsCapture = Vec<BnStats>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "resnet18")]
    Resnet18,
    #[serde(rename = "cnn1")]
    Cnn1,
    #[serde(rename = "cnn2")]
    Cnn2,
    #[serde(rename = "wrn16_1")]
    Wrn16_1,
    #[serde(rename = "wrn40_1")]
    Wrn40_1,
    /// A network assembled by hand with [`ClientModel::custom`].
    #[serde(rename = "custom")]
    Custom,
}

impl ArchId {
    pub const ZOO: [ArchId; 5] = [ArchId::Resnet18, ArchId::Cnn1, ArchId::Cnn2, ArchId::Wrn16_1, ArchId::Wrn40_1];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Resnet18 => "resnet18",
            ArchId::Cnn1 => "cnn1",
            ArchId::Cnn2 => "cnn2",
            ArchId::Wrn16_1 => "wrn16_1",
            ArchId::Wrn40_1 => "wrn40_1",
            ArchId::Custom => "custom",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ArchId {
    type Err = FedSynError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "resnet18" => Ok(ArchId::Resnet18),
            "cnn1" => Ok(ArchId::Cnn1),
            "cnn2" => Ok(ArchId::Cnn2),
            "wrn16_1" => Ok(ArchId::Wrn16_1),
            "wrn40_1" => Ok(ArchId::Wrn40_1),
            _ => Err(FedSynError::UnknownArch(s.to_string())),
        }
    }
}

/// Everything needed to rebuild a classifier from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchId,
    pub num_classes: usize,
    /// `[h, w, c]` of one input image.
    pub input_shape: [usize; 3],
    /// Channel widths are divided by this (1 = reference widths).
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn new(arch: ArchId, num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self { arch, num_classes, input_shape, width_divisor: 1 }
    }

    pub fn with_width_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d.max(1);
        self
    }

    fn width(&self, base: usize) -> usize {
        (base / self.width_divisor).max(4)
    }
}

/// A classifier `x -> logits` with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct ClientModel {
    spec: ModelSpec,
    seed: u64,
    net: Network,
    store: ParamStore,
}

/// Anything that maps an image batch to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> [usize; 3];
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for ClientModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_logits(batch, false)?.0)
    }
}

/// Builds a freshly initialised classifier. Identical arguments give
/// bit-identical parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ClientModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { pb: ParamBuilder::new(&mut rng) };
    let [h, w, c] = spec.input_shape;
    let k = spec.num_classes;
    let nodes = match spec.arch {
        ArchId::Cnn1 => {
            let widths = [spec.width(32), spec.width(64), spec.width(128)];
            let mut nodes = Vec::new();
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for (i, &wd) in widths.iter().enumerate() {
                nodes.push(b.conv(&format!("block{i}.conv"), ch, wd, 3, 1, false));
                nodes.push(b.bn(&format!("block{i}.bn"), wd, true));
                nodes.push(Node::Relu);
                nodes.push(Node::MaxPool2);
                ch = wd;
                hh /= 2;
                ww /= 2;
            }
            nodes.push(Node::Flatten);
            nodes.push(b.linear("head", ch * hh * ww, k));
            nodes
        }
        ArchId::Cnn2 => {
            let widths = [spec.width(16), spec.width(32)];
            let mut nodes = Vec::new();
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for (i, &wd) in widths.iter().enumerate() {
                nodes.push(b.conv(&format!("block{i}.conv"), ch, wd, 3, 1, false));
                nodes.push(b.bn(&format!("block{i}.bn"), wd, true));
                nodes.push(Node::Relu);
                nodes.push(Node::MaxPool2);
                ch = wd;
                hh /= 2;
                ww /= 2;
            }
            nodes.push(Node::Flatten);
            nodes.push(b.linear("fc1", ch * hh * ww, 128));
            nodes.push(Node::Relu);
            nodes.push(b.linear("fc2", 128, k));
            nodes
        }
        ArchId::Resnet18 => {
            let base = spec.width(64);
            let mut nodes = vec![b.conv("stem.conv", c, base, 3, 1, false), b.bn("stem.bn", base, true), Node::Relu];
            let mut ch = base;
            for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
                let out = base * mult;
                for blk in 0..2 {
                    let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                    nodes.push(b.basic_block(&format!("layer{stage}.{blk}"), ch, out, stride));
                    ch = out;
                }
            }
            nodes.push(Node::GlobalAvgPool);
            nodes.push(b.linear("fc", ch, k));
            nodes
        }
        ArchId::Wrn16_1 | ArchId::Wrn40_1 => {
            let depth = if spec.arch == ArchId::Wrn16_1 { 16 } else { 40 };
            let per_group = (depth - 4) / 6;
            let widths = [spec.width(16), spec.width(16), spec.width(32), spec.width(64)];
            let mut nodes = vec![b.conv("stem", c, widths[0], 3, 1, false)];
            let mut ch = widths[0];
            for g in 0..3 {
                for blk in 0..per_group {
                    let stride = if g > 0 && blk == 0 { 2 } else { 1 };
                    nodes.push(b.wide_block(&format!("group{g}.{blk}"), ch, widths[g + 1], stride));
                    ch = widths[g + 1];
                }
            }
            nodes.push(b.bn("final.bn", ch, true));
            nodes.push(Node::Relu);
            nodes.push(Node::GlobalAvgPool);
            nodes.push(b.linear("fc", ch, k));
            nodes
        }
        ArchId::Custom => {
            return Err(FedSynError::InvalidArgument("custom networks are built with ClientModel::custom".into()))
        }
    };
    let store = b.pb.finish();
    Ok(ClientModel { spec: spec.clone(), seed, net: Network::new(nodes, vec![h, w, c]), store })
}

impl ClientModel {
    /// Wraps a hand-built network. Its output must be `[b, num_classes]`.
    pub fn custom(net: Network, store: ParamStore, num_classes: usize) -> Result<Self> {
        let s = net.input_shape();
        if s.len() != 3 {
            return Err(FedSynError::InvalidArgument(format!("custom input shape must be [h, w, c], got {s:?}")));
        }
        let spec = ModelSpec::new(ArchId::Custom, num_classes, [s[0], s[1], s[2]]);
        Ok(Self { spec, seed: 0, net, store })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> ArchId {
        self.spec.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Stored `(running_mean, running_var)` of every batch-norm layer, in forward order.
    pub fn bn_layers(&self) -> Vec<(&[f32], &[f32])> {
        self.net
            .batch_norms()
            .into_iter()
            .map(|bn| (self.store.buffer(bn.running_mean).data(), self.store.buffer(bn.running_var).data()))
            .collect()
    }

    /// Inference-mode logits; optionally also the batch statistics observed at
    /// every batch-norm input.
    pub fn forward_logits(&self, batch: &Tensor, capture_stats: bool) -> Result<(Tensor, Option<BatchStatsCapture>)> {
        let out = self
            .net
            .forward(&self.store, batch.clone(), ForwardOptions { mode: Mode::Eval, record: false, capture_stats })?;
        Ok((out.output, out.captures))
    }

    /// Parameters followed by batch-norm buffers.
    pub fn flatten(&self) -> Vec<f32> {
        self.store.flatten()
    }

    pub fn unflatten(&mut self, flat: &[f32]) -> Result<()> {
        Ok(self.store.unflatten(flat)?)
    }

    /// Whether `other` has the same architecture and tensor layout.
    pub fn same_layout(&self, other: &ClientModel) -> bool {
        self.spec == other.spec && self.store.same_layout(&other.store)
    }

    /// Writes the flat parameter blob to `path` and a manifest next to it
    /// (`path` with a `.json` extension).
    pub fn save(&self, path: &Path, dataset: &str) -> Result<()> {
        if self.spec.arch == ArchId::Custom {
            return Err(FedSynError::Unsupported("custom networks cannot be checkpointed".into()));
        }
        let manifest = CheckpointManifest {
            arch_id: self.spec.arch,
            num_classes: self.spec.num_classes,
            seed: self.seed,
            dataset: dataset.to_string(),
            input_shape: self.spec.input_shape,
            width_divisor: self.spec.width_divisor,
            bn_layer_shapes: self.net.batch_norms().iter().map(|bn| bn.channels).collect(),
            num_values: self.store.num_params() + self.store.num_buffer_values(),
        };
        let blob: Vec<u8> = self.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, blob).map_err(io_err(path))?;
        let mpath = manifest_path(path);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, json).map_err(io_err(mpath))
    }

    /// Reads a checkpoint written by [`ClientModel::save`]; returns the model and
    /// the dataset name recorded in its manifest.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let m: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| FedSynError::Format { what: format!("manifest {}", mpath.display()), reason: e.to_string() })?;
        let spec = ModelSpec {
            arch: m.arch_id,
            num_classes: m.num_classes,
            input_shape: m.input_shape,
            width_divisor: m.width_divisor,
        };
        let mut model = build_model(&spec, m.seed)?;
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        if bytes.len() % 4 != 0 {
            return Err(FedSynError::Format { what: path.display().to_string(), reason: "truncated blob".into() });
        }
        let flat: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        model.unflatten(&flat)?;
        Ok((model, m.dataset))
    }
}

/// Manifest stored next to a checkpoint blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch_id: ArchId,
    pub num_classes: usize,
    pub seed: u64,
    pub dataset: String,
    pub input_shape: [usize; 3],
    pub width_divisor: usize,
    pub bn_layer_shapes: Vec<usize>,
    pub num_values: usize,
}

fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Generator hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    /// `[h, w, c]` of the images to produce; `h` and `w` must be divisible by 4.
    pub output_shape: [usize; 3],
    /// Channels of the two upsampling blocks.
    pub widths: [usize; 2],
}

impl GeneratorSpec {
    pub fn new(output_shape: [usize; 3]) -> Self {
        Self { noise_dim: 100, output_shape, widths: [128, 64] }
    }
}

/// `z -> x̂`: a linear projection to a quarter-resolution map followed by two
/// upsample-conv-BN-LeakyReLU blocks, a `tanh` and a final affine-free
/// batch norm that puts every output channel on the normalised data scale.
///
/// Its batch norms always normalise with the statistics of the current batch,
/// so a generated sample depends on the rest of its batch only through those
/// statistics.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    spec: GeneratorSpec,
    net: Network,
    store: ParamStore,
}

impl GeneratorModel {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let [h, w, c] = spec.output_shape;
        if h % 4 != 0 || w % 4 != 0 || spec.noise_dim == 0 {
            return Err(FedSynError::InvalidArgument(format!("unsupported generator spec {spec:?}")));
        }
        let (h0, w0) = (h / 4, w / 4);
        let [c1, c2] = spec.widths;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { pb: ParamBuilder::new(&mut rng) };
        let nodes = vec![
            b.linear("project", spec.noise_dim, c1 * h0 * w0),
            Node::Reshape(vec![h0, w0, c1]),
            b.bn("bn0", c1, true),
            Node::Upsample2,
            b.conv("up1.conv", c1, c1, 3, 1, true),
            b.bn("up1.bn", c1, true),
            Node::LeakyRelu(0.2),
            Node::Upsample2,
            b.conv("up2.conv", c1, c2, 3, 1, true),
            b.bn("up2.bn", c2, true),
            Node::LeakyRelu(0.2),
            b.conv("out.conv", c2, c, 3, 1, true),
            Node::Tanh,
            b.bn("out.bn", c, false),
        ];
        let store = b.pb.finish();
        Ok(Self { net: Network::new(nodes, vec![spec.noise_dim]), spec, store })
    }

    /// Wraps a hand-built network taking `[b, noise_dim]` noise. Its output
    /// must be `[b, h, w, c]` as given by `output_shape`.
    pub fn custom(net: Network, store: ParamStore, output_shape: [usize; 3]) -> Result<Self> {
        let s = net.input_shape();
        if s.len() != 1 {
            return Err(FedSynError::InvalidArgument(format!("generator input must be [noise_dim], got {s:?}")));
        }
        let spec = GeneratorSpec { noise_dim: s[0], output_shape, widths: [0, 0] };
        Ok(Self { spec, net, store })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn noise_dim(&self) -> usize {
        self.spec.noise_dim
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.spec.output_shape
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn check_noise(&self, z: &Tensor) -> Result<()> {
        if z.shape().len() != 2 || z.shape()[1] != self.spec.noise_dim {
            return Err(FedSynError::InvalidArgument(format!(
                "noise must be [b, {}], got {:?}",
                self.spec.noise_dim,
                z.shape()
            )));
        }
        if !z.all_finite() {
            return Err(FedSynError::NonFinite("generator noise".into()));
        }
        Ok(())
    }
}

/// `x̂ = G(z)`, shape `[b, h, w, c]`.
pub fn generate(gen: &GeneratorModel, z: &Tensor) -> Result<Tensor> {
    gen.check_noise(z)?;
    let [h, w, c] = gen.spec.output_shape;
    if z.batch() == 0 {
        return Ok(Tensor::zeros([0, h, w, c]));
    }
    let opts = ForwardOptions { mode: Mode::Train, record: false, capture_stats: false };
    Ok(gen.net.forward(&gen.store, z.clone(), opts)?.output)
}

struct Builder<'r> {
    pb: ParamBuilder<'r, ChaCha8Rng>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Node {
        self.pb.push_scope(name);
        let fan_in = k * k * c_in;
        let weight = self.pb.param("weight", &[c_out, k, k, c_in], Init::HeNormal { fan_in });
        let bias = bias.then(|| self.pb.param("bias", &[c_out], Init::FanInUniform { fan_in }));
        self.pb.pop_scope();
        Node::Conv(Conv2d { c_in, c_out, kernel: k, stride, pad: k / 2, weight, bias })
    }

    fn bn(&mut self, name: &str, c: usize, affine: bool) -> Node {
        self.pb.push_scope(name);
        let gamma = affine.then(|| self.pb.param("gamma", &[c], Init::Ones));
        let beta = affine.then(|| self.pb.param("beta", &[c], Init::Zeros));
        let running_mean = self.pb.buffer("running_mean", &[c], 0.0);
        let running_var = self.pb.buffer("running_var", &[c], 1.0);
        self.pb.pop_scope();
        Node::BatchNorm(BatchNorm { channels: c, gamma, beta, running_mean, running_var, eps: 1e-5, momentum: 0.1 })
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Node {
        self.pb.push_scope(name);
        let weight = self.pb.param("weight", &[o, i], Init::FanInUniform { fan_in: i });
        let bias = Some(self.pb.param("bias", &[o], Init::FanInUniform { fan_in: i }));
        self.pb.pop_scope();
        Node::Linear(Linear { in_features: i, out_features: o, weight, bias })
    }

    /// Post-activation residual block (conv-bn-relu-conv-bn, add, relu).
    fn basic_block(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> Node {
        let body = vec![
            self.conv(&format!("{name}.conv1"), c_in, c_out, 3, stride, false),
            self.bn(&format!("{name}.bn1"), c_out, true),
            Node::Relu,
            self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, false),
            self.bn(&format!("{name}.bn2"), c_out, true),
        ];
        let shortcut = if stride != 1 || c_in != c_out {
            vec![
                self.conv(&format!("{name}.down.conv"), c_in, c_out, 1, stride, false),
                self.bn(&format!("{name}.down.bn"), c_out, true),
            ]
        } else {
            Vec::new()
        };
        Node::Residual(Box::new(Residual { pre: Vec::new(), body, shortcut, shortcut_from_pre: false, post: vec![Node::Relu] }))
    }

    /// Pre-activation wide block.
    fn wide_block(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> Node {
        if c_in == c_out && stride == 1 {
            let body = vec![
                self.bn(&format!("{name}.bn1"), c_in, true),
                Node::Relu,
                self.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1, false),
                self.bn(&format!("{name}.bn2"), c_out, true),
                Node::Relu,
                self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, false),
            ];
            Node::Residual(Box::new(Residual { pre: Vec::new(), body, shortcut: Vec::new(), shortcut_from_pre: false, post: Vec::new() }))
        } else {
            let pre = vec![self.bn(&format!("{name}.bn1"), c_in, true), Node::Relu];
            let body = vec![
                self.conv(&format!("{name}.conv1"), c_in, c_out, 3, stride, false),
                self.bn(&format!("{name}.bn2"), c_out, true),
                Node::Relu,
                self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, false),
            ];
            let shortcut = vec![self.conv(&format!("{name}.shortcut"), c_in, c_out, 1, stride, false)];
            Node::Residual(Box::new(Residual { pre, body, shortcut, shortcut_from_pre: true, post: Vec::new() }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(b: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([b, d], (0..b * d).map(|_| rng.random_range(-2.0f32..2.0)).collect())
    }

    fn images(b: usize, shape: [usize; 3], seed: u64) -> Tensor {
        let [h, w, c] = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([b, h, w, c], (0..b * h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn every_arch_produces_class_logits_and_round_trips() {
        for arch in ArchId::ZOO {
            for shape in [[28, 28, 1], [32, 32, 3]] {
                let spec = ModelSpec::new(arch, 10, shape).with_width_divisor(4);
                let mut m = build_model(&spec, 3).unwrap();
                let (logits, caps) = m.forward_logits(&images(2, shape, 1), true).unwrap();
                assert_eq!(logits.shape(), &[2, 10], "{arch}");
                assert_eq!(caps.unwrap().len(), m.bn_layers().len());
                let flat = m.flatten();
                m.unflatten(&flat).unwrap();
                assert_eq!(m.flatten(), flat);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::new(ArchId::Cnn1, 10, [28, 28, 1]);
        assert_eq!(build_model(&spec, 5).unwrap().flatten(), build_model(&spec, 5).unwrap().flatten());
        assert_ne!(build_model(&spec, 5).unwrap().flatten(), build_model(&spec, 6).unwrap().flatten());
    }

    #[test]
    fn arch_names_parse() {
        assert_eq!("WRN16_1".parse::<ArchId>().unwrap(), ArchId::Wrn16_1);
        assert!(matches!("vgg".parse::<ArchId>(), Err(FedSynError::UnknownArch(_))));
    }

    #[test]
    fn wide_resnet_bn_layer_counts() {
        // 16: 2 blocks x 3 groups x 2 + final; 40: 6 x 3 x 2 + final.
        for (arch, n) in [(ArchId::Wrn16_1, 13), (ArchId::Wrn40_1, 37), (ArchId::Resnet18, 20), (ArchId::Cnn1, 3)] {
            let m = build_model(&ModelSpec::new(arch, 10, [32, 32, 3]).with_width_divisor(4), 0).unwrap();
            assert_eq!(m.bn_layers().len(), n, "{arch}");
        }
    }

    #[test]
    fn inference_is_per_sample() {
        let shape = [28, 28, 1];
        let m = build_model(&ModelSpec::new(ArchId::Cnn2, 10, shape), 1).unwrap();
        let x = images(1, shape, 2);
        let (one, _) = m.forward_logits(&x, false).unwrap();
        let (two, _) = m.forward_logits(&Tensor::concat_rows(&[&x, &x]), false).unwrap();
        assert_eq!(two.row(0), one.row(0));
        assert_eq!(two.row(1), one.row(0));
    }

    #[test]
    fn captured_statistics_match_instrumented_recomputation() {
        let shape = [28, 28, 1];
        let m = build_model(&ModelSpec::new(ArchId::Cnn1, 10, shape).with_width_divisor(4), 4).unwrap();
        let x = images(5, shape, 8);
        let (_, caps) = m.forward_logits(&x, true).unwrap();
        let caps = caps.unwrap();
        // Replay the layer list by hand, stopping at each batch norm.
        let nodes = m.network().nodes();
        let mut bn_seen = 0;
        for (i, node) in nodes.iter().enumerate() {
            if let Node::BatchNorm(bn) = node {
                let prefix = Network::new(nodes[..i].to_vec(), vec![28, 28, 1]);
                let act = prefix.forward(m.store(), x.clone(), ForwardOptions::eval()).unwrap().output;
                let c = bn.channels;
                let count = act.len() / c;
                for ch in 0..c {
                    let vals: Vec<f64> = act.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
                    let mean = vals.iter().sum::<f64>() / count as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
                    assert!((caps[bn_seen].mean[ch] as f64 - mean).abs() < 1e-5);
                    assert!((caps[bn_seen].var[ch] as f64 - var).abs() < 1e-5 * var.max(1.0));
                }
                bn_seen += 1;
            }
        }
        assert_eq!(bn_seen, caps.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let spec = ModelSpec::new(ArchId::Wrn16_1, 10, [32, 32, 3]).with_width_divisor(2);
        let mut m = build_model(&spec, 9).unwrap();
        let mut flat = m.flatten();
        flat[3] = 42.0;
        m.unflatten(&flat).unwrap();
        m.save(&path, "cifar10").unwrap();
        let (back, ds) = ClientModel::load(&path).unwrap();
        assert_eq!(ds, "cifar10");
        assert_eq!(back.flatten(), flat);
        assert_eq!(back.spec(), &spec);
    }

    #[test]
    fn generator_shapes_and_permutation() {
        let gen = GeneratorModel::new(GeneratorSpec { noise_dim: 12, output_shape: [28, 28, 1], widths: [8, 4] }, 0).unwrap();
        let z = noise(4, 12, 1);
        let x = generate(&gen, &z).unwrap();
        assert_eq!(x.shape(), &[4, 28, 28, 1]);
        assert_eq!(generate(&gen, &z).unwrap(), x);
        let perm = [2, 0, 3, 1];
        let xp = generate(&gen, &z.gather_rows(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in xp.row(i).iter().zip(x.row(p)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert_eq!(generate(&gen, &noise(0, 12, 0)).unwrap().shape(), &[0, 28, 28, 1]);
        assert!(generate(&gen, &noise(2, 11, 0)).is_err());
    }
}

//! The fully-convolutional segmentation network: a truncated ResNet18 encoder
//! (stem + a configurable number of residual stages) and an atrous spatial
//! pyramid pooling decoder with a 1x1 classifier, bilinearly upsampled back
//! to the input resolution.
//!
//! Encoder tensors use the standard ResNet18 names (`conv1.weight`,
//! `layer1.0.conv1.weight`, ...) under an `encoder.` prefix, so ImageNet
//! weights exported to safetensors with those keys load directly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, max_pool_3x3_s2_p1, BatchNorm2d, Conv2d, ParamGroup, ParamStore};

pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Residual stages kept after the stem (1..=4); 3 keeps 256 channels at
    /// output stride 16.
    pub encoder_stages: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub include_image_pooling_branch: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            in_channels: 3,
            num_classes: 2,
            encoder_stages: 3,
            aspp_rates: vec![6, 12, 18],
            aspp_channels: 128,
            include_image_pooling_branch: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.encoder_stages) {
            return Err(Error::InvalidSpec(format!(
                "encoder_stages must be 1..=4, got {}",
                self.encoder_stages
            )));
        }
        if self.aspp_rates.is_empty() {
            return Err(Error::InvalidSpec("aspp_rates must be nonempty".into()));
        }
        if !self.aspp_rates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSpec(format!(
                "aspp_rates must be strictly increasing, got {:?}",
                self.aspp_rates
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidSpec("in_channels must be positive".into()));
        }
        if self.aspp_channels == 0 {
            return Err(Error::InvalidSpec("aspp_channels must be positive".into()));
        }
        Ok(())
    }

    /// Input-to-feature downsampling factor: the stem contributes 4, each
    /// stage after the first another 2.
    pub fn output_stride(&self) -> usize {
        4 << (self.encoder_stages - 1)
    }

    pub fn encoder_out_channels(&self) -> usize {
        64 << (self.encoder_stages - 1)
    }
}

/// How model weights are set before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitStrategy {
    /// Every parameter from the default scheme, seeded.
    Random { seed: u64 },
    /// Encoder copied verbatim from a weight file, decoder seeded-random.
    PretrainedEncoder { source: PathBuf, seed: u64 },
}

impl InitStrategy {
    pub fn kind_name(&self) -> &'static str {
        match self {
            InitStrategy::Random { .. } => "random",
            InitStrategy::PretrainedEncoder { .. } => "pretrained",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            InitStrategy::Random { seed } => *seed,
            InitStrategy::PretrainedEncoder { seed, .. } => *seed,
        }
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            stride,
            1,
            1,
            false,
            ParamGroup::Encoder,
        )?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch, ParamGroup::Encoder)?;
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            3,
            1,
            1,
            1,
            false,
            ParamGroup::Encoder,
        )?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch, ParamGroup::Encoder)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let conv = Conv2d::new(
                store,
                &format!("{name}.downsample.0"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                1,
                false,
                ParamGroup::Encoder,
            )?;
            let bn = BatchNorm2d::new(
                store,
                &format!("{name}.downsample.1"),
                out_ch,
                ParamGroup::Encoder,
            )?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x, train)?, train)?,
            None => x.clone(),
        };
        let y = self
            .bn1
            .forward(&self.conv1.forward(x, train)?, train)?
            .relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y, train)?, train)?;
        Ok((y + identity)?.relu()?)
    }
}

struct AsppBranch {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl AsppBranch {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self
            .bn
            .forward(&self.conv.forward(x, train)?, train)?
            .relu()?)
    }
}

/// The instantiated network. Mutable only through its parameter store;
/// evaluation-mode forwards are read-only and deterministic.
pub struct IceNet {
    spec: ModelSpec,
    store: ParamStore,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<[BasicBlock; 2]>,
    aspp_branches: Vec<AsppBranch>,
    aspp_pool: Option<AsppBranch>,
    project: AsppBranch,
    classifier: Conv2d,
}

impl IceNet {
    /// CPU-device convenience constructor.
    pub fn build_cpu(spec: ModelSpec) -> Result<IceNet> {
        IceNet::build(spec, Device::Cpu)
    }

    /// Construct the network with zeroed tensors; call [`IceNet::initialize`]
    /// before use.
    pub fn build(spec: ModelSpec, device: Device) -> Result<IceNet> {
        spec.validate()?;
        let mut store = ParamStore::new(device);
        let stem_conv = Conv2d::new(
            &mut store,
            "encoder.conv1",
            spec.in_channels,
            64,
            7,
            2,
            3,
            1,
            false,
            ParamGroup::Encoder,
        )?;
        let stem_bn = BatchNorm2d::new(&mut store, "encoder.bn1", 64, ParamGroup::Encoder)?;
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for stage in 1..=spec.encoder_stages {
            let out_ch = 64 << (stage - 1);
            let stride = if stage == 1 { 1 } else { 2 };
            let name = format!("encoder.layer{stage}");
            let b0 = BasicBlock::new(&mut store, &format!("{name}.0"), in_ch, out_ch, stride)?;
            let b1 = BasicBlock::new(&mut store, &format!("{name}.1"), out_ch, out_ch, 1)?;
            stages.push([b0, b1]);
            in_ch = out_ch;
        }
        let enc_out = spec.encoder_out_channels();
        let c = spec.aspp_channels;

        let mut aspp_branches = Vec::new();
        let one_by_one = AsppBranch {
            conv: Conv2d::new(
                &mut store,
                "decoder.aspp.0.conv",
                enc_out,
                c,
                1,
                1,
                0,
                1,
                false,
                ParamGroup::Decoder,
            )?,
            bn: BatchNorm2d::new(&mut store, "decoder.aspp.0.bn", c, ParamGroup::Decoder)?,
        };
        aspp_branches.push(one_by_one);
        for (i, &rate) in spec.aspp_rates.iter().enumerate() {
            aspp_branches.push(AsppBranch {
                conv: Conv2d::new(
                    &mut store,
                    &format!("decoder.aspp.{}.conv", i + 1),
                    enc_out,
                    c,
                    3,
                    1,
                    rate,
                    rate,
                    false,
                    ParamGroup::Decoder,
                )?,
                bn: BatchNorm2d::new(
                    &mut store,
                    &format!("decoder.aspp.{}.bn", i + 1),
                    c,
                    ParamGroup::Decoder,
                )?,
            });
        }
        let aspp_pool = if spec.include_image_pooling_branch {
            Some(AsppBranch {
                conv: Conv2d::new(
                    &mut store,
                    "decoder.aspp.pool.conv",
                    enc_out,
                    c,
                    1,
                    1,
                    0,
                    1,
                    false,
                    ParamGroup::Decoder,
                )?,
                bn: BatchNorm2d::new(&mut store, "decoder.aspp.pool.bn", c, ParamGroup::Decoder)?,
            })
        } else {
            None
        };
        let n_branches = aspp_branches.len() + usize::from(aspp_pool.is_some());
        let project = AsppBranch {
            conv: Conv2d::new(
                &mut store,
                "decoder.project.conv",
                n_branches * c,
                c,
                1,
                1,
                0,
                1,
                false,
                ParamGroup::Decoder,
            )?,
            bn: BatchNorm2d::new(&mut store, "decoder.project.bn", c, ParamGroup::Decoder)?,
        };
        let classifier = Conv2d::new(
            &mut store,
            "decoder.classifier",
            c,
            spec.num_classes,
            1,
            1,
            0,
            1,
            true,
            ParamGroup::Decoder,
        )?;
        Ok(IceNet {
            spec,
            store,
            stem_conv,
            stem_bn,
            stages,
            aspp_branches,
            aspp_pool,
            project,
            classifier,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Apply an initialization strategy. Random seeds every tensor from the
    /// default scheme; pretrained copies each encoder tensor verbatim from
    /// the weight file (keys without the `encoder.` prefix) and seeds the
    /// decoder. All parameters stay trainable either way.
    pub fn initialize(&mut self, strategy: &InitStrategy) -> Result<()> {
        match strategy {
            InitStrategy::Random { seed } => self
                .store
                .init_random(*seed, &[ParamGroup::Encoder, ParamGroup::Decoder]),
            InitStrategy::PretrainedEncoder { source, seed } => {
                let tensors = candle_core::safetensors::load(source, self.store.device())?;
                self.load_encoder_tensors(&tensors, source)?;
                self.store.init_random(*seed, &[ParamGroup::Decoder])
            }
        }
    }

    fn load_encoder_tensors(&self, tensors: &HashMap<String, Tensor>, source: &Path) -> Result<()> {
        for entry in self.store.entries() {
            if entry.group != ParamGroup::Encoder {
                continue;
            }
            let key = entry
                .name
                .strip_prefix("encoder.")
                .unwrap_or(&entry.name)
                .to_string();
            let tensor = tensors.get(&key).ok_or_else(|| Error::MissingTensor {
                file: source.to_path_buf(),
                name: key.clone(),
            })?;
            if tensor.dims() != entry.var.as_tensor().dims() {
                return Err(Error::TensorShapeMismatch {
                    name: key,
                    expected: entry.var.as_tensor().dims().to_vec(),
                    got: tensor.dims().to_vec(),
                });
            }
            if tensor.dtype() != candle_core::DType::F32 {
                return Err(Error::TensorShapeMismatch {
                    name: format!("{key} (dtype {:?}, expected F32)", tensor.dtype()),
                    expected: entry.var.as_tensor().dims().to_vec(),
                    got: tensor.dims().to_vec(),
                });
            }
            entry.var.set(tensor)?;
        }
        Ok(())
    }

    fn encoder_forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.stem_conv.forward(x, train)?;
        let y = self.stem_bn.forward(&y, train)?.relu()?;
        let mut y = max_pool_3x3_s2_p1(&y)?;
        for stage in &self.stages {
            y = stage[0].forward(&y, train)?;
            y = stage[1].forward(&y, train)?;
        }
        Ok(y)
    }

    fn decoder_forward(
        &self,
        feat: &Tensor,
        out_h: usize,
        out_w: usize,
        train: bool,
    ) -> Result<Tensor> {
        let mut branches: Vec<Tensor> = Vec::with_capacity(self.aspp_branches.len() + 1);
        for branch in &self.aspp_branches {
            branches.push(branch.forward(feat, train)?);
        }
        if let Some(pool) = &self.aspp_pool {
            let (b, c, h, w) = feat.dims4()?;
            let pooled = feat.mean_keepdim((2, 3))?;
            let y = pool.forward(&pooled, train)?;
            let _ = (b, c);
            branches.push(y.broadcast_as(branches[0].dims4()?)?.contiguous()?);
            let _ = (h, w);
        }
        let cat = Tensor::cat(&branches, 1)?;
        let projected = self.project.forward(&cat, train)?;
        let logits = self.classifier.forward(&projected, train)?;
        bilinear_resize(&logits, out_h, out_w)
    }

    /// Forward pass producing per-pixel class logits at the input resolution.
    pub fn forward_t(&self, inputs: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = inputs.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::InvalidSpec(format!(
                "input has {c} channels, model expects {}",
                self.spec.in_channels
            )));
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::InvalidSpec(format!(
                "input {h}x{w} is below the minimum side of {MIN_INPUT_SIDE}"
            )));
        }
        let feat = self.encoder_forward(inputs, train)?;
        self.decoder_forward(&feat, h, w, train)
    }

    /// Evaluation-mode forward: deterministic, no graph retained, running
    /// batch-norm statistics used and left untouched.
    pub fn forward_eval(&self, inputs: &Tensor) -> Result<Tensor> {
        self.forward_t(inputs, false)
    }

    pub fn count_trainable_params(&self) -> usize {
        self.store.count_trainable()
    }

    pub fn count_encoder_params(&self) -> usize {
        self.store.count_trainable_in(ParamGroup::Encoder)
    }

    pub fn count_decoder_params(&self) -> usize {
        self.store.count_trainable_in(ParamGroup::Decoder)
    }
}

/// JSON sidecar stored next to checkpoint tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub strategy: String,
    pub seed: u64,
    pub epoch: u32,
    pub val_loss: f64,
}

/// Write `<stem>.safetensors` (all tensors, parameters and running stats)
/// plus the `<stem>.json` sidecar.
pub fn save_checkpoint(model: &IceNet, meta: &CheckpointMeta, stem: &Path) -> Result<()> {
    let mut tensors = HashMap::new();
    for entry in model.params().entries() {
        tensors.insert(entry.name.clone(), entry.var.as_tensor().copy()?);
    }
    candle_core::safetensors::save(&tensors, stem.with_extension("safetensors"))?;
    let sidecar = serde_json::to_string_pretty(meta)?;
    std::fs::write(stem.with_extension("json"), sidecar + "\n")
        .map_err(|e| Error::file_io(stem.with_extension("json"), e))?;
    Ok(())
}

/// CPU-device convenience wrapper around [`load_checkpoint`].
pub fn load_checkpoint_cpu(stem: &Path) -> Result<(IceNet, CheckpointMeta)> {
    load_checkpoint(stem, Device::Cpu)
}

/// Rebuild a model from a checkpoint stem, verifying that every stored
/// tensor matches the sidecar spec's shapes.
pub fn load_checkpoint(stem: &Path, device: Device) -> Result<(IceNet, CheckpointMeta)> {
    let sidecar_path = stem.with_extension("json");
    let text =
        std::fs::read_to_string(&sidecar_path).map_err(|e| Error::file_io(&sidecar_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let model = IceNet::build(meta.spec.clone(), device.clone())?;
    let tensors = candle_core::safetensors::load(stem.with_extension("safetensors"), &device)?;
    for entry in model.params().entries() {
        let tensor = tensors
            .get(&entry.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {}", entry.name)))?;
        if tensor.dims() != entry.var.as_tensor().dims() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {}: checkpoint shape {:?}, spec shape {:?}",
                entry.name,
                tensor.dims(),
                entry.var.as_tensor().dims()
            )));
        }
        entry.var.set(tensor)?;
    }
    Ok((model, meta))
}

//! The segmentation network: a VGG11-style encoder with batch norm, a
//! pyramid-pooling bottleneck, and a transposed-convolution decoder whose
//! two deepest skip connections also pass through pyramid pooling. The head
//! is a 1×1 convolution with a sigmoid, so the output is a per-pixel
//! foreground probability map at input resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    adaptive_avg_pool2d, batch_norm2d, concat_channels, conv2d, conv_transpose2d, max_pool2d,
    relu, sigmoid, upsample_bilinear, BatchNormParams, Conv2dParams,
};
use crate::rng::{streams, Rng};
use crate::tensor::{Shape, Tensor};

/// Pyramid pooling settings. Each bin size b adds a branch that pools the
/// input to (b,b), projects it to `branch_channels` with a 1×1 conv + BN +
/// ReLU, and upsamples back. With `fused` the concatenation is projected
/// back to the input channel count; otherwise it is returned raw.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct PPMConfig {
    pub bins: Vec<usize>,
    pub branch_channels: usize,
    pub fused: bool,
}

impl Default for PPMConfig {
    fn default() -> Self {
        PPMConfig {
            bins: vec![1, 2, 3, 6],
            branch_channels: 128,
            fused: true,
        }
    }
}

impl PPMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(Error::Config("ppm.bins must not be empty".into()));
        }
        if self.bins[0] < 1 || self.bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ppm.bins must be strictly increasing and >= 1, got {:?}",
                self.bins
            )));
        }
        if self.branch_channels < 1 {
            return Err(Error::Config("ppm.branch_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Network topology and initialization seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// (height, width); both divisible by 16 (four pooling stages).
    pub input_size: (usize, usize),
    pub encoder_stage_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub ppm: PPMConfig,
    pub decoder_dilation: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            input_size: (192, 256),
            encoder_stage_channels: vec![64, 128, 256, 512, 512],
            decoder_channels: vec![256, 128, 64, 32],
            ppm: PPMConfig::default(),
            decoder_dilation: 2,
            seed: 0,
        }
    }
}

/// Number of convolutions per encoder stage (VGG11 layout).
const STAGE_CONVS: [usize; 5] = [1, 1, 2, 2, 2];
/// Spatial reduction after the four pooling steps.
const POOL_FACTOR: usize = 16;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        let (h, w) = self.input_size;
        if h % POOL_FACTOR != 0 || w % POOL_FACTOR != 0 {
            return Err(Error::Config(format!(
                "input_size ({h},{w}) must be divisible by {POOL_FACTOR}"
            )));
        }
        if self.encoder_stage_channels.len() != STAGE_CONVS.len() {
            return Err(Error::Config(format!(
                "encoder_stage_channels must list {} stages, got {}",
                STAGE_CONVS.len(),
                self.encoder_stage_channels.len()
            )));
        }
        if self.decoder_channels.len() != 4 {
            return Err(Error::Config(format!(
                "decoder_channels must list 4 stages, got {}",
                self.decoder_channels.len()
            )));
        }
        if self
            .encoder_stage_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c < 1)
        {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.decoder_dilation < 1 {
            return Err(Error::Config("decoder_dilation must be >= 1".into()));
        }
        self.ppm.validate()?;
        let deep = (h / POOL_FACTOR, w / POOL_FACTOR);
        let max_bin = *self.ppm.bins.last().expect("bins checked non-empty");
        if max_bin > deep.0.min(deep.1) {
            return Err(Error::Config(format!(
                "largest ppm bin {max_bin} exceeds deepest map {}x{}",
                deep.0, deep.1
            )));
        }
        Ok(())
    }
}

/// Running state: training mode updates batch-norm statistics, inference
/// mode consumes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

struct ConvBnRelu {
    conv: Conv2dParams,
    bn: BatchNormParams,
}

impl ConvBnRelu {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu(&batch_norm2d(&conv2d(x, &self.conv)?, &self.bn)?))
    }
}

/// One pyramid pooling site with its own branch and fusion parameters.
struct Ppm {
    bins: Vec<usize>,
    branches: Vec<ConvBnRelu>,
    fuse: Option<ConvBnRelu>,
}

impl Ppm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let max_bin = *self.bins.last().expect("bins validated non-empty");
        if max_bin > s.h.min(s.w) {
            return Err(Error::Shape(format!(
                "ppm bin {max_bin} exceeds input {}x{}",
                s.h, s.w
            )));
        }
        let mut parts = vec![x.clone()];
        for (bin, branch) in self.bins.iter().zip(&self.branches) {
            let pooled = adaptive_avg_pool2d(x, (*bin, *bin))?;
            let projected = branch.forward(&pooled)?;
            parts.push(upsample_bilinear(&projected, (s.h, s.w))?);
        }
        let cat = concat_channels(&parts)?;
        match &self.fuse {
            Some(f) => f.forward(&cat),
            None => Ok(cat),
        }
    }

    fn out_channels(&self, c_in: usize, branch_channels: usize) -> usize {
        if self.fuse.is_some() {
            c_in
        } else {
            c_in + self.bins.len() * branch_channels
        }
    }
}

struct DecoderStage {
    up_weight: Tensor,
    up_bias: Tensor,
    conv: ConvBnRelu,
}

/// The complete network with named parameters and a mode flag.
pub struct Model {
    config: ModelConfig,
    mode: Mode,
    encoder: Vec<Vec<ConvBnRelu>>,
    ppm_deep: Ppm,
    ppm_skip4: Ppm,
    ppm_skip3: Ppm,
    decoder: Vec<DecoderStage>,
    head: Conv2dParams,
}

/// Kaiming-uniform bound for a weight tensor: sqrt(6 / fan_in) with fan_in
/// taken from dimension 1 times the kernel area.
fn kaiming_weight(rng: &mut Rng, shape: Shape) -> Tensor {
    let fan_in = shape.c * shape.h * shape.w;
    let bound = (6.0 / fan_in as f32).sqrt();
    let vals: Vec<f32> = (0..shape.numel()).map(|_| rng.range_f32(-bound, bound)).collect();
    Tensor::leaf_unchecked(shape, vals)
}

fn new_conv(
    rng: &mut Rng,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Conv2dParams {
    Conv2dParams {
        weight: kaiming_weight(rng, Shape::new(c_out, c_in, k, k)),
        bias: Tensor::zeros(Shape::new(1, c_out, 1, 1)),
        stride,
        padding,
        dilation,
    }
}

fn new_conv_bn_relu(rng: &mut Rng, c_in: usize, c_out: usize, k: usize, dilation: usize) -> ConvBnRelu {
    let padding = dilation * (k - 1) / 2;
    ConvBnRelu {
        conv: new_conv(rng, c_in, c_out, k, 1, padding, dilation),
        bn: BatchNormParams::new(c_out),
    }
}

fn new_ppm(rng: &mut Rng, c_in: usize, cfg: &PPMConfig) -> Ppm {
    let branches = cfg
        .bins
        .iter()
        .map(|_| new_conv_bn_relu(rng, c_in, cfg.branch_channels, 1, 1))
        .collect();
    let fuse = cfg.fused.then(|| {
        new_conv_bn_relu(rng, c_in + cfg.bins.len() * cfg.branch_channels, c_in, 1, 1)
    });
    Ppm {
        bins: cfg.bins.clone(),
        branches,
        fuse,
    }
}

/// Construct and initialize the network. Deterministic: the same config
/// (including seed) always yields identical parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = Rng::for_stream(cfg.seed, streams::INIT);
    let enc = &cfg.encoder_stage_channels;

    let mut encoder = Vec::with_capacity(STAGE_CONVS.len());
    let mut c_prev = cfg.in_channels;
    for (stage, &n_convs) in STAGE_CONVS.iter().enumerate() {
        let c_out = enc[stage];
        let mut convs = Vec::with_capacity(n_convs);
        for _ in 0..n_convs {
            convs.push(new_conv_bn_relu(&mut rng, c_prev, c_out, 3, 1));
            c_prev = c_out;
        }
        encoder.push(convs);
    }

    let ppm_deep = new_ppm(&mut rng, enc[4], &cfg.ppm);
    let ppm_skip4 = new_ppm(&mut rng, enc[3], &cfg.ppm);
    let ppm_skip3 = new_ppm(&mut rng, enc[2], &cfg.ppm);

    let bottleneck_ch = ppm_deep.out_channels(enc[4], cfg.ppm.branch_channels);
    let skip_ch = [
        ppm_skip4.out_channels(enc[3], cfg.ppm.branch_channels),
        ppm_skip3.out_channels(enc[2], cfg.ppm.branch_channels),
        enc[1],
        enc[0],
    ];
    let mut decoder = Vec::with_capacity(4);
    let mut c_in = bottleneck_ch;
    for (i, &c_up) in cfg.decoder_channels.iter().enumerate() {
        let up_weight = kaiming_weight(&mut rng, Shape::new(c_in, c_up, 2, 2));
        let up_bias = Tensor::zeros(Shape::new(1, c_up, 1, 1));
        let conv = new_conv_bn_relu(&mut rng, c_up + skip_ch[i], c_up, 3, cfg.decoder_dilation);
        decoder.push(DecoderStage {
            up_weight,
            up_bias,
            conv,
        });
        c_in = c_up;
    }

    let head = new_conv(&mut rng, cfg.decoder_channels[3], 1, 1, 1, 0, 1);

    Ok(Model {
        config: cfg.clone(),
        mode: Mode::Training,
        encoder,
        ppm_deep,
        ppm_skip4,
        ppm_skip3,
        decoder,
        head,
    })
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switch between training and inference; toggles every batch-norm
    /// layer between batch and running statistics.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        let training = mode == Mode::Training;
        for stage in &mut self.encoder {
            for block in stage {
                block.bn.training = training;
            }
        }
        for ppm in [&mut self.ppm_deep, &mut self.ppm_skip4, &mut self.ppm_skip3] {
            for b in &mut ppm.branches {
                b.bn.training = training;
            }
            if let Some(f) = &mut ppm.fuse {
                f.bn.training = training;
            }
        }
        for stage in &mut self.decoder {
            stage.conv.bn.training = training;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, s.c
            )));
        }
        if s.h % POOL_FACTOR != 0 || s.w % POOL_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} must be divisible by {POOL_FACTOR}",
                s.h, s.w
            )));
        }
        let max_bin = *self.config.ppm.bins.last().expect("validated non-empty");
        if max_bin > (s.h / POOL_FACTOR).min(s.w / POOL_FACTOR) {
            return Err(Error::Shape(format!(
                "input {}x{} too small for ppm bin {max_bin}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Encoder activations: the four skip features (pre-pool) and the
    /// deepest map, at 1/1, 1/2, 1/4, 1/8, and 1/16 resolution.
    pub fn encoder_forward(&self, x: &Tensor) -> Result<[Tensor; 5]> {
        self.check_input(x)?;
        let mut feats = Vec::with_capacity(5);
        let mut cur = x.clone();
        for (stage, convs) in self.encoder.iter().enumerate() {
            if stage > 0 {
                cur = max_pool2d(&cur)?;
            }
            for block in convs {
                cur = block.forward(&cur)?;
            }
            feats.push(cur.clone());
        }
        feats
            .try_into()
            .map_err(|_| Error::Shape("encoder stage count".into()))
    }

    /// Full forward pass to a (n,1,h,w) probability map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [feat1, feat2, feat3, feat4, deep] = self.encoder_forward(x)?;
        let mut cur = self.ppm_deep.forward(&deep)?;
        let skips = [
            self.ppm_skip4.forward(&feat4)?,
            self.ppm_skip3.forward(&feat3)?,
            feat2,
            feat1,
        ];
        for (stage, skip) in self.decoder.iter().zip(skips) {
            let up = conv_transpose2d(&cur, &stage.up_weight, &stage.up_bias, 2)?;
            let cat = concat_channels(&[up, skip])?;
            cur = stage.conv.forward(&cat)?;
        }
        Ok(sigmoid(&conv2d(&cur, &self.head)?))
    }

    fn visit(&self, mut f: impl FnMut(String, &Tensor, bool)) {
        let bn = |prefix: &str, p: &BatchNormParams, f: &mut dyn FnMut(String, &Tensor, bool)| {
            f(format!("{prefix}.bn.gamma"), &p.gamma, true);
            f(format!("{prefix}.bn.beta"), &p.beta, true);
            f(format!("{prefix}.bn.running_mean"), &p.running_mean, false);
            f(format!("{prefix}.bn.running_var"), &p.running_var, false);
        };
        let block = |prefix: &str, b: &ConvBnRelu, f: &mut dyn FnMut(String, &Tensor, bool)| {
            f(format!("{prefix}.conv.weight"), &b.conv.weight, true);
            f(format!("{prefix}.conv.bias"), &b.conv.bias, true);
            bn(prefix, &b.bn, f);
        };
        for (si, stage) in self.encoder.iter().enumerate() {
            for (ci, cbr) in stage.iter().enumerate() {
                block(&format!("enc.s{}.c{}", si + 1, ci), cbr, &mut f);
            }
        }
        for (name, ppm) in [
            ("deep", &self.ppm_deep),
            ("skip4", &self.ppm_skip4),
            ("skip3", &self.ppm_skip3),
        ] {
            for (bi, b) in ppm.branches.iter().enumerate() {
                block(&format!("ppm.{name}.branch{bi}"), b, &mut f);
            }
            if let Some(fu) = &ppm.fuse {
                block(&format!("ppm.{name}.fuse"), fu, &mut f);
            }
        }
        for (di, stage) in self.decoder.iter().enumerate() {
            f(format!("dec.{di}.up.weight"), &stage.up_weight, true);
            f(format!("dec.{di}.up.bias"), &stage.up_bias, true);
            block(&format!("dec.{di}"), &stage.conv, &mut f);
        }
        f("head.conv.weight".into(), &self.head.weight, true);
        f("head.conv.bias".into(), &self.head.bias, true);
    }

    /// Learnable tensors, by unique name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(|name, t, learnable| {
            if learnable {
                out.push((name, t.clone()));
            }
        });
        out
    }

    /// Non-learnable state (batch-norm running statistics), by unique name.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(|name, t, learnable| {
            if !learnable {
                out.push((name, t.clone()));
            }
        });
        out
    }

    /// Enable or disable gradient tracking on every learnable parameter.
    pub fn set_requires_grad(&self, on: bool) {
        for (_, t) in self.named_parameters() {
            t.set_requires_grad(on);
        }
    }

    /// Clear accumulated gradients on every learnable parameter.
    pub fn zero_grad(&self) {
        for (_, t) in self.named_parameters() {
            t.zero_grad();
        }
    }

    /// Replace the head 1×1 convolution weight tensor. The new tensor must
    /// match the existing shape; used by verification harnesses that probe
    /// the model as a function of specific parameters.
    pub fn swap_head_weight(&mut self, weight: Tensor) -> Result<Tensor> {
        if weight.shape() != self.head.weight.shape() {
            return Err(Error::Shape(format!(
                "head weight must be {}, got {}",
                self.head.weight.shape(),
                weight.shape()
            )));
        }
        Ok(std::mem::replace(&mut self.head.weight, weight))
    }
}

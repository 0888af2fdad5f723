//! Shared encoder with three cooperating decoders.
//!
//! G-Net predicts horizontal and vertical gradients of the normalized depth,
//! N-Net the normalized depth, and M-Net the inverted metric depth. Encoder
//! skips reach every decoder through a per-decoder 1x1 projection followed by
//! channel attention. Intermediate decoder features flow one way, G to N to
//! M, by weighted addition before upsampling blocks 2 through 5. M-Net holds
//! the mean-depth-residual (MDR) block between its fourth and fifth blocks;
//! its mean estimate is added back before the output activation.

mod checkpoint;
mod decoder;
mod encoder;
mod layers;
mod mdr;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::{DepthSpace, GradientPair, MetricDepthMap, NormalizedDepthMap};
use crate::graph::{Graph, ParamStore, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::GateMode;

use decoder::Decoder;
use encoder::Encoder;
use layers::Builder;
use mdr::Mdr;

/// Gain of the bounded output activation `sigmoid(gain * (x - 1/2))`, which has
/// unit slope at the center of the inverted-depth range.
pub const OUTPUT_GAIN: f64 = 4.0;

/// Lower clamp of the output activation, keeping predictions strictly positive.
pub const OUTPUT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown decoder {0:?} (expected g, n or m)")]
    UnknownDecoder(String),
    #[error("decoder {0} is not part of this architecture")]
    MissingDecoder(DecoderId),
    #[error("feature map {height}x{width} is not divisible by patch size {patch}")]
    PatchMismatch {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the model config")]
    ConfigMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderId {
    G,
    N,
    M,
}

impl DecoderId {
    pub fn prefix(self) -> &'static str {
        match self {
            DecoderId::G => "g_net",
            DecoderId::N => "n_net",
            DecoderId::M => "m_net",
        }
    }
}

impl fmt::Display for DecoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for DecoderId {
    type Err = NetworkError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "g" | "g_net" | "g-net" => Ok(DecoderId::G),
            "n" | "n_net" | "n-net" => Ok(DecoderId::N),
            "m" | "m_net" | "m-net" => Ok(DecoderId::M),
            _ => Err(NetworkError::UnknownDecoder(s.to_string())),
        }
    }
}

/// How the MDR block participates in M-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdrMode {
    /// No MDR block; M-Net block 5 consumes block 4 features directly.
    Off,
    /// Patchwise attention only; no mean regression or re-addition.
    AttentionOnly,
    /// Patchwise attention plus mean regression re-added at the output.
    Full,
}

/// Which decoders and blocks a model contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub g_net: bool,
    pub n_net: bool,
    pub mdr: MdrMode,
}

impl Architecture {
    pub const PROPOSED: Architecture = Architecture {
        g_net: true,
        n_net: true,
        mdr: MdrMode::Full,
    };
    pub const BASELINE: Architecture = Architecture {
        g_net: false,
        n_net: false,
        mdr: MdrMode::Off,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdrConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub num_transformer_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Width of the two hidden layers of the mean regressor.
    pub regression_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    /// Widths of encoder stages 1..5 (strides 2..32).
    pub encoder_channels: Vec<usize>,
    /// Widths of upsampling blocks 1..5, shared by all decoders.
    pub decoder_channels: Vec<usize>,
    /// `(upstream, own)` weights of the feature fusion.
    pub fusion_weights: (f64, f64),
    pub mdr: MdrConfig,
    /// Squeeze-excitation reduction ratio of the skip attention.
    pub attention_reduction: usize,
    pub architecture: Architecture,
    pub seed: u64,
}

impl ModelConfig {
    /// Toy-scale model for 64x48 inputs.
    pub fn toy() -> Self {
        Self {
            input_size: (48, 64),
            encoder_channels: vec![8, 12, 16, 24, 32],
            decoder_channels: vec![32, 24, 16, 16, 16],
            fusion_weights: (1.0, 1.0),
            mdr: MdrConfig {
                patch_size: 8,
                token_dim: 16,
                num_transformer_layers: 2,
                num_heads: 2,
                mlp_ratio: 4,
                regression_hidden: 16,
            },
            attention_reduction: 4,
            architecture: Architecture::PROPOSED,
            seed: 0,
        }
    }

    /// Smallest useful model (16x16 input) for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_size: (16, 16),
            encoder_channels: vec![3, 3, 3, 4, 4],
            decoder_channels: vec![4, 3, 3, 3, 2],
            fusion_weights: (1.0, 1.0),
            mdr: MdrConfig {
                patch_size: 4,
                token_dim: 4,
                num_transformer_layers: 1,
                num_heads: 2,
                mlp_ratio: 2,
                regression_hidden: 4,
            },
            attention_reduction: 2,
            architecture: Architecture::PROPOSED,
            seed: 0,
        }
    }

    /// Full-size geometry: 512x384 input, a 2048-channel 16x12 bottleneck
    /// and 192 MDR tokens of width 128.
    pub fn full() -> Self {
        Self {
            input_size: (384, 512),
            encoder_channels: vec![24, 40, 64, 176, 2048],
            decoder_channels: vec![1024, 512, 256, 128, 64],
            fusion_weights: (1.0, 1.0),
            mdr: MdrConfig {
                patch_size: 16,
                token_dim: 128,
                num_transformer_layers: 4,
                num_heads: 4,
                mlp_ratio: 4,
                regression_hidden: 256,
            },
            attention_reduction: 16,
            architecture: Architecture::PROPOSED,
            seed: 0,
        }
    }

    pub fn with_architecture(mut self, architecture: Architecture) -> Self {
        self.architecture = architecture;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Spatial size `(height, width)` of the MDR input (M-Net block 4 output).
    pub fn mdr_input_size(&self) -> (usize, usize) {
        (self.input_size.0 / 2, self.input_size.1 / 2)
    }

    /// Number of MDR tokens, one of which regresses the mean.
    pub fn mdr_tokens(&self) -> usize {
        let (h, w) = self.mdr_input_size();
        (h / self.mdr.patch_size) * (w / self.mdr.patch_size)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return bad(format!("input size {h}x{w} must be a nonzero multiple of 16"));
        }
        if self.encoder_channels.len() != 5 || self.decoder_channels.len() != 5 {
            return bad("encoder and decoder need exactly 5 widths each".into());
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        let (wu, wo) = self.fusion_weights;
        if !wu.is_finite() || !wo.is_finite() {
            return bad("fusion weights must be finite".into());
        }
        if self.attention_reduction == 0 {
            return bad("attention reduction must be positive".into());
        }
        if self.architecture.g_net && !self.architecture.n_net {
            return bad("G-Net features are only consumed through N-Net".into());
        }
        if self.architecture.mdr != MdrMode::Off {
            let m = &self.mdr;
            let (mh, mw) = self.mdr_input_size();
            if m.patch_size == 0 || mh % m.patch_size != 0 || mw % m.patch_size != 0 {
                return Err(NetworkError::PatchMismatch {
                    height: mh,
                    width: mw,
                    patch: m.patch_size,
                });
            }
            if self.mdr_tokens() < 2 {
                return bad("MDR needs at least 2 tokens".into());
            }
            if m.num_heads == 0 || m.token_dim % m.num_heads != 0 {
                return bad(format!(
                    "token dim {} not divisible by {} heads",
                    m.token_dim, m.num_heads
                ));
            }
            if m.num_transformer_layers == 0 || m.mlp_ratio == 0 || m.regression_hidden == 0 {
                return bad("MDR layer counts and widths must be positive".into());
            }
        }
        Ok(())
    }
}

/// CHW activations tagged with the pyramid stage they come from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stage: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stage: usize) -> Result<Self, NetworkError> {
        if data.shape.len() != 3 {
            return Err(NetworkError::ShapeMismatch(format!(
                "feature map must be CHW, got {:?}",
                data.shape
            )));
        }
        Ok(Self { data, stage })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.chw()
    }
}

/// Encoder outputs: the stride-32 bottleneck and skips at strides 16, 8, 4, 2.
///
/// Inputs need only be multiples of 16; the bottleneck rounds up, so a 48-row
/// input gives a 2-row bottleneck and the first decoder block resizes it to
/// the 3-row skip.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPyramid {
    pub bottleneck: FeatureMap,
    pub skips: Vec<FeatureMap>,
}

/// Value-level predictions of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub g_hat: Option<GradientPair>,
    pub n_hat: Option<NormalizedDepthMap>,
    /// Inverted-space metric depth in `(0, 1]`.
    pub m_hat: Option<MetricDepthMap>,
    /// Pre-activation M-Net output, `head + mu_hat`.
    pub m_pre: Option<Array2<f64>>,
    /// Mean regressed by MDR; zero when the regression is disabled.
    pub mu_hat: f64,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[2, H, W]`: horizontal then vertical gradient.
    pub g: Option<Var>,
    /// `[1, H, W]`.
    pub n: Option<Var>,
    /// `[1, H, W]`, after the output activation.
    pub m: Option<Var>,
    pub m_pre: Option<Var>,
    pub mu: Option<Var>,
}

/// Which decoders a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardScope {
    Full,
    /// Encoder, G-Net and N-Net only.
    WithoutMNet,
}

/// RGB image `(height, width, 3)` with values in `[0, 1]`.
pub type RgbImage = Array3<f64>;

pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (h, w, c) = image.dim();
    let mut data = vec![0.0; c * h * w];
    for ((i, j, ch), &v) in image.indexed_iter() {
        data[ch * h * w + i * w + j] = v;
    }
    Tensor::new(vec![c, h, w], data)
}

fn plane_to_array(t: &Tensor, c: usize) -> Array2<f64> {
    let (_, h, w) = t.chw();
    Array2::from_shape_vec((h, w), t.channel(c).to_vec()).expect("plane shape")
}

/// `(upstream, own)`-weighted elementwise sum of two feature maps.
pub fn fuse(a: &FeatureMap, b: &FeatureMap, cfg: &ModelConfig) -> Result<FeatureMap, NetworkError> {
    if a.data.shape != b.data.shape {
        return Err(NetworkError::ShapeMismatch(format!(
            "fuse {:?} with {:?}",
            a.data.shape, b.data.shape
        )));
    }
    let (wa, wb) = cfg.fusion_weights;
    let data = a
        .data
        .data
        .iter()
        .zip(&b.data.data)
        .map(|(x, y)| wa * x + wb * y)
        .collect();
    FeatureMap::new(Tensor::new(a.data.shape.clone(), data), b.stage)
}

/// Complete network: configuration, parameters and layer layout.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    g_net: Option<Decoder>,
    n_net: Option<Decoder>,
    m_net: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            seed: cfg.seed,
        };
        let encoder = Encoder::new(&mut b, &cfg);
        let arch = cfg.architecture;
        let g_net = arch.g_net.then(|| Decoder::new(&mut b, &cfg, DecoderId::G));
        let n_net = arch.n_net.then(|| Decoder::new(&mut b, &cfg, DecoderId::N));
        let m_net = Decoder::new(&mut b, &cfg, DecoderId::M);
        Ok(Self {
            cfg,
            params,
            encoder,
            g_net,
            n_net,
            m_net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Sorted parameter names; the architecture audit used by variants.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.iter().map(|(_, n, _)| n.to_string()).collect();
        names.sort();
        names
    }

    /// True for parameters only M-Net (including MDR) reads.
    pub fn is_m_exclusive(name: &str) -> bool {
        name.starts_with("m_net.")
    }

    fn check_image(&self, image: &Tensor) -> Result<(), NetworkError> {
        let (h, w) = self.cfg.input_size;
        if image.shape != [3, h, w] {
            return Err(NetworkError::ShapeMismatch(format!(
                "image {:?}, model expects [3, {h}, {w}]",
                image.shape
            )));
        }
        Ok(())
    }

    fn decoder(&self, id: DecoderId) -> Result<&Decoder, NetworkError> {
        match id {
            DecoderId::G => self.g_net.as_ref(),
            DecoderId::N => self.n_net.as_ref(),
            DecoderId::M => Some(&self.m_net),
        }
        .ok_or(NetworkError::MissingDecoder(id))
    }

    /// Records a forward pass on `g` (whose parameters must be this model's).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        image: &Tensor,
        scope: ForwardScope,
    ) -> Result<ForwardVars, NetworkError> {
        self.check_image(image)?;
        let x = g.input(image.clone());
        let (bottleneck, skips) = self.encoder.forward(g, x);
        let fw = self.cfg.fusion_weights;
        let g_out = match &self.g_net {
            Some(d) => Some(d.forward(g, bottleneck, &skips, None, fw, GateMode::Learned)),
            None => None,
        };
        let n_out = match &self.n_net {
            Some(d) => {
                let fused = g_out.as_ref().map(|o| o.intermediates.as_slice());
                Some(d.forward(g, bottleneck, &skips, fused, fw, GateMode::Learned))
            }
            None => None,
        };
        let mut vars = ForwardVars {
            g: g_out.map(|o| o.out),
            n: n_out.as_ref().map(|o| o.out),
            m: None,
            m_pre: None,
            mu: None,
        };
        if scope == ForwardScope::Full {
            let fused = n_out.as_ref().map(|o| o.intermediates.as_slice());
            let m_out = self
                .m_net
                .forward(g, bottleneck, &skips, fused, fw, GateMode::Learned);
            let pre = match m_out.mu {
                Some(mu) => g.add_scalar(m_out.out, mu),
                None => m_out.out,
            };
            vars.m_pre = Some(pre);
            vars.mu = m_out.mu;
            vars.m = Some(output_activation(g, pre));
        }
        Ok(vars)
    }

    /// Full forward pass returning value-level outputs.
    pub fn forward_full(&self, image: &RgbImage) -> Result<NetworkOutput, NetworkError> {
        self.forward_tensor(&image_to_tensor(image), ForwardScope::Full)
    }

    pub fn forward_tensor(
        &self,
        image: &Tensor,
        scope: ForwardScope,
    ) -> Result<NetworkOutput, NetworkError> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward_graph(&mut g, image, scope)?;
        Ok(collect_output(&g, &vars))
    }

    /// Shared encoder on its own.
    pub fn encode(&self, image: &RgbImage) -> Result<EncoderPyramid, NetworkError> {
        let t = image_to_tensor(image);
        self.check_image(&t)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(t);
        let (bottleneck, skips) = self.encoder.forward(&mut g, x);
        Ok(EncoderPyramid {
            bottleneck: FeatureMap::new(g.value(bottleneck).clone(), 5)?,
            skips: skips
                .iter()
                .enumerate()
                .map(|(i, &s)| FeatureMap::new(g.value(s).clone(), 4 - i))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Per-decoder projection and channel attention of encoder skip `index`
    /// (0 = stride 16, ..., 3 = stride 2).
    pub fn adapt_skip(
        &self,
        f: &FeatureMap,
        decoder: DecoderId,
        index: usize,
        mode: GateMode,
    ) -> Result<FeatureMap, NetworkError> {
        let d = self.decoder(decoder)?;
        let adapter = d.skips.get(index).ok_or_else(|| {
            NetworkError::ShapeMismatch(format!("skip index {index} out of range"))
        })?;
        let mut g = Graph::new(&self.params);
        let x = g.input(f.data.clone());
        let (c, _, _) = f.shape();
        if c != adapter.in_channels {
            return Err(NetworkError::ShapeMismatch(format!(
                "skip {index} expects {} channels, got {c}",
                adapter.in_channels
            )));
        }
        let y = adapter.forward(&mut g, x, mode);
        FeatureMap::new(g.value(y).clone(), f.stage)
    }

    /// Channel attention gates of one skip adapter, each in `(0, 1)`.
    pub fn skip_gates(
        &self,
        f: &FeatureMap,
        decoder: DecoderId,
        index: usize,
    ) -> Result<Vec<f64>, NetworkError> {
        let d = self.decoder(decoder)?;
        let adapter = &d.skips[index];
        let mut g = Graph::new(&self.params);
        let x = g.input(f.data.clone());
        let p = adapter.project(&mut g, x);
        let gate = adapter.gates(&mut g, p);
        Ok(g.value(gate).data.clone())
    }

    /// Runs one decoder over a pyramid. `fused_inputs` holds the upstream
    /// decoder's four intermediate features, or is empty. Returns the head
    /// output (before mean re-addition for M-Net) and this decoder's own four
    /// intermediate features after fusion.
    pub fn decoder_forward(
        &self,
        pyramid: &EncoderPyramid,
        fused_inputs: &[FeatureMap],
        decoder: DecoderId,
    ) -> Result<(FeatureMap, Vec<FeatureMap>), NetworkError> {
        let d = self.decoder(decoder)?;
        if !fused_inputs.is_empty() && fused_inputs.len() != 4 {
            return Err(NetworkError::ShapeMismatch(format!(
                "expected 0 or 4 fused inputs, got {}",
                fused_inputs.len()
            )));
        }
        if pyramid.skips.len() != 4 {
            return Err(NetworkError::ShapeMismatch("pyramid needs 4 skips".into()));
        }
        let mut g = Graph::new(&self.params);
        let bottleneck = g.input(pyramid.bottleneck.data.clone());
        let skips: Vec<Var> = pyramid.skips.iter().map(|s| g.input(s.data.clone())).collect();
        let fused: Vec<Var> = fused_inputs.iter().map(|f| g.input(f.data.clone())).collect();
        let expected = d.intermediate_shapes(&self.cfg);
        for (f, shape) in fused_inputs.iter().zip(&expected) {
            if f.data.shape != *shape {
                return Err(NetworkError::ShapeMismatch(format!(
                    "fused input {:?}, expected {shape:?}",
                    f.data.shape
                )));
            }
        }
        let out = d.forward(
            &mut g,
            bottleneck,
            &skips,
            (!fused.is_empty()).then_some(fused.as_slice()),
            self.cfg.fusion_weights,
            GateMode::Learned,
        );
        let head = FeatureMap::new(g.value(out.out).clone(), 0)?;
        let inter = out
            .intermediates
            .iter()
            .enumerate()
            .map(|(i, &v)| FeatureMap::new(g.value(v).clone(), 4 - i))
            .collect::<Result<_, _>>()?;
        Ok((head, inter))
    }

    /// The MDR block on its own: attended features and the mean estimate.
    pub fn mdr_forward(&self, f: &FeatureMap) -> Result<(FeatureMap, f64), NetworkError> {
        let mdr = self.m_net.mdr.as_ref().ok_or(NetworkError::InvalidConfig(
            "architecture has no MDR block".into(),
        ))?;
        mdr_apply(mdr, &self.params, f)
    }
}

fn mdr_apply(mdr: &Mdr, params: &ParamStore, f: &FeatureMap) -> Result<(FeatureMap, f64), NetworkError> {
    let (c, h, w) = f.shape();
    if h % mdr.patch != 0 || w % mdr.patch != 0 {
        return Err(NetworkError::PatchMismatch {
            height: h,
            width: w,
            patch: mdr.patch,
        });
    }
    if c != mdr.in_channels {
        return Err(NetworkError::ShapeMismatch(format!(
            "MDR expects {} channels, got {c}",
            mdr.in_channels
        )));
    }
    let mut g = Graph::new(params);
    let x = g.input(f.data.clone());
    let (out, mu) = mdr.forward(&mut g, x);
    let mu = mu.map(|m| g.value(m).data[0]).unwrap_or(0.0);
    Ok((FeatureMap::new(g.value(out).clone(), f.stage)?, mu))
}

/// Builds a standalone MDR block, for geometries whose full network is too
/// large to instantiate (e.g. the full-size configuration).
pub fn standalone_mdr(
    cfg: &ModelConfig,
    in_channels: usize,
) -> Result<(ParamStore, impl Fn(&ParamStore, &FeatureMap) -> Result<(FeatureMap, f64), NetworkError>), NetworkError>
{
    let mut params = ParamStore::new();
    let mut b = Builder {
        store: &mut params,
        seed: cfg.seed,
    };
    let mdr = Mdr::new(&mut b, "mdr", cfg, in_channels, cfg.architecture.mdr == MdrMode::Full);
    Ok((params, move |ps: &ParamStore, f: &FeatureMap| mdr_apply(&mdr, ps, f)))
}

/// `max(sigmoid(gain * (x - 1/2)), floor)`: a bounded map into `(0, 1]`
/// with unit slope at `x = 1/2`.
fn output_activation(g: &mut Graph, pre: Var) -> Var {
    let shifted = g.affine(pre, OUTPUT_GAIN, -0.5 * OUTPUT_GAIN);
    let s = g.sigmoid(shifted);
    g.clamp(s, OUTPUT_FLOOR, 1.0)
}

/// Converts graph values into the value-level output types.
pub fn collect_output(g: &Graph, vars: &ForwardVars) -> NetworkOutput {
    let g_hat = vars.g.map(|v| {
        let t = g.value(v);
        let gx = plane_to_array(t, 0);
        let gy = plane_to_array(t, 1);
        let mask = Array2::from_elem(gx.dim(), true);
        GradientPair::from_parts(gx, gy, mask).expect("aligned planes")
    });
    let n_hat = vars
        .n
        .map(|v| NormalizedDepthMap::dense(plane_to_array(g.value(v), 0)));
    let m_hat = vars
        .m
        .map(|v| MetricDepthMap::dense(plane_to_array(g.value(v), 0), DepthSpace::Inverted));
    NetworkOutput {
        g_hat,
        n_hat,
        m_hat,
        m_pre: vars.m_pre.map(|v| plane_to_array(g.value(v), 0)),
        mu_hat: vars.mu.map(|v| g.value(v).data[0]).unwrap_or(0.0),
    }
}

use super::layers::{Builder, Conv, Linear};
use super::mdr::Mdr;
use super::{DecoderId, MdrMode, ModelConfig};
use crate::graph::{Graph, Var};

/// Channel attention behaviour of the skip adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    /// Every gate fixed to 1, leaving the plain projection.
    Unit,
}

/// 1x1 projection followed by squeeze-excitation gating.
#[derive(Debug, Clone)]
pub(crate) struct SkipAdapter {
    pub in_channels: usize,
    proj: Conv,
    fc1: Linear,
    fc2: Linear,
}

impl SkipAdapter {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, reduction: usize) -> Self {
        let hidden = (cout / reduction).max(1);
        Self {
            in_channels: cin,
            proj: Conv::new(b, &format!("{name}.proj"), cin, cout, 1, 1, 0, 1.0),
            fc1: Linear::new(b, &format!("{name}.se.fc1"), cout, hidden, std::f64::consts::SQRT_2),
            fc2: Linear::new(b, &format!("{name}.se.fc2"), hidden, cout, 1.0),
        }
    }

    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        self.proj.forward(g, x)
    }

    /// Per-channel gates of a projected feature, shape `[C]`.
    pub fn gates(&self, g: &mut Graph, p: Var) -> Var {
        let c = g.value(p).chw().0;
        let s = g.channel_mean(p);
        let s = g.reshape(s, &[1, c]);
        let h = self.fc1.forward(g, s);
        let h = g.relu(h);
        let z = self.fc2.forward(g, h);
        let z = g.sigmoid(z);
        g.reshape(z, &[c])
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: GateMode) -> Var {
        let p = self.project(g, x);
        match mode {
            GateMode::Unit => p,
            GateMode::Learned => {
                let gate = self.gates(g, p);
                g.channel_scale(p, gate)
            }
        }
    }
}

/// `upsample -> relu(conv1) -> (+ skip) -> relu(conv2)`, each block landing
/// on the resolution of the next shallower skip.
#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    blocks: Vec<Block>,
    pub skips: Vec<SkipAdapter>,
    head: Conv,
    pub mdr: Option<Mdr>,
    input_size: (usize, usize),
}

pub(crate) struct DecoderOutput {
    pub out: Var,
    /// Outputs of blocks 1..4, before fusion.
    pub intermediates: Vec<Var>,
    pub mu: Option<Var>,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, id: DecoderId) -> Self {
        let prefix = id.prefix();
        let dc = &cfg.decoder_channels;
        let mdr_mode = if id == DecoderId::M {
            cfg.architecture.mdr
        } else {
            MdrMode::Off
        };
        let mut blocks = Vec::with_capacity(5);
        let mut cin = cfg.encoder_channels[4];
        let mut mdr = None;
        for (k, &c) in dc.iter().enumerate() {
            if k == 4 && mdr_mode != MdrMode::Off {
                let m = Mdr::new(b, &format!("{prefix}.mdr"), cfg, cin, mdr_mode == MdrMode::Full);
                cin = m.out_channels;
                mdr = Some(m);
            }
            let name = format!("{prefix}.block{}", k + 1);
            blocks.push(Block {
                conv1: Conv::same3(b, &format!("{name}.conv1"), cin, c),
                conv2: Conv::same3(b, &format!("{name}.conv2"), c, c),
            });
            cin = c;
        }
        let skips = (0..4)
            .map(|j| {
                SkipAdapter::new(
                    b,
                    &format!("{prefix}.skip{}", j + 1),
                    cfg.encoder_channels[3 - j],
                    dc[j],
                    cfg.attention_reduction,
                )
            })
            .collect();
        let out_channels = if id == DecoderId::G { 2 } else { 1 };
        let head = Conv::new(b, &format!("{prefix}.head"), dc[4], out_channels, 3, 1, 1, 1.0);
        Self {
            blocks,
            skips,
            head,
            mdr,
            input_size: cfg.input_size,
        }
    }

    /// Shapes of the four intermediate features for a given config.
    pub fn intermediate_shapes(&self, cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let (h, w) = cfg.input_size;
        (0..4)
            .map(|k| {
                let s = 16 >> k;
                vec![cfg.decoder_channels[k], h / s, w / s]
            })
            .collect()
    }

    /// `fused` holds the upstream decoder's four block outputs, if any.
    pub fn forward(
        &self,
        g: &mut Graph,
        bottleneck: Var,
        skips: &[Var],
        fused: Option<&[Var]>,
        weights: (f64, f64),
        mode: GateMode,
    ) -> DecoderOutput {
        let mut x = bottleneck;
        let mut intermediates = Vec::with_capacity(4);
        let mut mu = None;
        for (k, block) in self.blocks.iter().enumerate() {
            if k > 0 {
                let own = intermediates[k - 1];
                x = match fused {
                    Some(up) => {
                        let a = g.scale(up[k - 1], weights.0);
                        let b = g.scale(own, weights.1);
                        g.add(a, b)
                    }
                    None => own,
                };
            }
            if k == 4 {
                if let Some(mdr) = &self.mdr {
                    let (y, m) = mdr.forward(g, x);
                    x = y;
                    mu = m;
                }
            }
            let s = 16 >> k;
            let up = g.resize(x, self.input_size.0 / s, self.input_size.1 / s);
            let y = block.conv1.forward(g, up);
            let mut y = g.relu(y);
            if k < 4 {
                let s = self.skips[k].forward(g, skips[k], mode);
                y = g.add(y, s);
            }
            let y = block.conv2.forward(g, y);
            let y = g.relu(y);
            if k < 4 {
                intermediates.push(y);
            }
            x = y;
        }
        let out = self.head.forward(g, x);
        DecoderOutput {
            out,
            intermediates,
            mu,
        }
    }
}

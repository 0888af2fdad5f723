use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, ParamId, ParamStore, Tensor, Var};

/// Parameter initialization. Every tensor draws from its own stream, keyed by
/// the model seed and the parameter name, so shared sub-networks initialize
/// identically across architectures built from the same seed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Normal with std `gain * sqrt(1 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Uniform(f64),
    Constant(f64),
}

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let data: Vec<f64> = match init {
            Init::FanIn { fan_in, gain } => {
                let std = gain * (1.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(a) => {
                let dist = Uniform::new_inclusive(-a, a).expect("valid range");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Constant(c) => vec![c; n],
        };
        self.store.add(name, Tensor::new(shape.to_vec(), data))
    }
}

/// Square 2-D convolution with bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let weight = b.param(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::FanIn {
                fan_in: cin * k * k,
                gain,
            },
        );
        let bias = b.param(&format!("{name}.bias"), &[cout], Init::Constant(0.0));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, same padding, He gain.
    pub fn same3(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(b, name, cin, cout, 3, 1, 1, std::f64::consts::SQRT_2)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let bias = g.param(self.bias);
        g.conv2d(x, w, Some(bias), self.stride, self.pad)
    }
}

/// Fully connected layer over rows: `[N, in] -> [N, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fin: usize, fout: usize, gain: f64) -> Self {
        let weight = b.param(
            &format!("{name}.weight"),
            &[fout, fin],
            Init::FanIn { fan_in: fin, gain },
        );
        let bias = b.param(&format!("{name}.bias"), &[fout], Init::Constant(0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let bias = g.param(self.bias);
        let y = g.matmul(x, w, false, true);
        g.add_row_bias(y, bias)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.param(&format!("{name}.gamma"), &[dim], Init::Constant(1.0)),
            beta: b.param(&format!("{name}.beta"), &[dim], Init::Constant(0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

use super::layers::{Builder, Conv, Init, LayerNorm, Linear};
use super::ModelConfig;
use crate::graph::{Graph, ParamId, Var};

const LEAKY_SLOPE: f64 = 0.01;

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
struct TransformerLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerLayer {
    fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let lin = |b: &mut Builder, n: &str, i, o| Linear::new(b, &format!("{name}.{n}"), i, o, 1.0);
        Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            q: lin(b, "attn.q", dim, dim),
            k: lin(b, "attn.k", dim, dim),
            v: lin(b, "attn.v", dim, dim),
            proj: lin(b, "attn.proj", dim, dim),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            fc1: lin(b, "mlp.fc1", dim, dim * mlp_ratio),
            fc2: lin(b, "mlp.fc2", dim * mlp_ratio, dim),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let dim = g.value(x).rc().1;
        let dh = dim / self.heads;
        let h = self.ln1.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let heads: Vec<Var> = (0..self.heads)
            .map(|i| {
                let qi = g.slice_cols(q, i * dh, dh);
                let ki = g.slice_cols(k, i * dh, dh);
                let vi = g.slice_cols(v, i * dh, dh);
                let s = g.matmul(qi, ki, false, true);
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let a = g.softmax_rows(s);
                g.matmul(a, vi, false, false)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        let att = self.proj.forward(g, cat);
        let x = g.add(x, att);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// Patchwise attention with a separate mean regression from the first token.
#[derive(Debug, Clone)]
pub(crate) struct Mdr {
    pub patch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    embed: Conv,
    pos: ParamId,
    layers: Vec<TransformerLayer>,
    branch: Conv,
    regressor: Option<[Linear; 3]>,
}

impl Mdr {
    pub fn new(b: &mut Builder, name: &str, cfg: &ModelConfig, cin: usize, regress: bool) -> Self {
        let m = &cfg.mdr;
        let tokens = cfg.mdr_tokens();
        let d = m.token_dim;
        let p = m.patch_size;
        let embed = Conv::new(b, &format!("{name}.embed"), cin, d, p, p, 0, 1.0);
        let pos = b.param(&format!("{name}.pos"), &[tokens, d], Init::Uniform(0.02));
        let layers = (0..m.num_transformer_layers)
            .map(|i| TransformerLayer::new(b, &format!("{name}.layer{}", i + 1), d, m.num_heads, m.mlp_ratio))
            .collect();
        let branch = Conv::new(b, &format!("{name}.branch"), cin, d, 3, 1, 1, 1.0);
        let hid = m.regression_hidden;
        let gain = std::f64::consts::SQRT_2;
        let regressor = regress.then(|| {
            [
                Linear::new(b, &format!("{name}.reg.fc1"), d, hid, gain),
                Linear::new(b, &format!("{name}.reg.fc2"), hid, hid, gain),
                Linear::new(b, &format!("{name}.reg.fc3"), hid, 1, 1.0),
            ]
        });
        Self {
            patch: p,
            in_channels: cin,
            out_channels: tokens - 1,
            embed,
            pos,
            layers,
            branch,
            regressor,
        }
    }

    /// `[C, H, W] -> ([T - 1, H, W], mean estimate)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Option<Var>) {
        let (_, h, w) = g.value(x).chw();
        let e = self.embed.forward(g, x);
        let (d, th, tw) = g.value(e).chw();
        let t = th * tw;
        let e = g.reshape(e, &[d, t]);
        let tokens = g.transpose(e);
        let pos = g.param(self.pos);
        let mut z = g.add(tokens, pos);
        for layer in &self.layers {
            z = layer.forward(g, z);
        }
        let mu = self.regressor.as_ref().map(|[f1, f2, f3]| {
            let head = g.slice_rows(z, 0, 1);
            let r = f1.forward(g, head);
            let r = g.leaky_relu(r, LEAKY_SLOPE);
            let r = f2.forward(g, r);
            let r = g.leaky_relu(r, LEAKY_SLOPE);
            let r = f3.forward(g, r);
            g.reshape(r, &[1])
        });
        let rest = g.slice_rows(z, 1, t - 1);
        let br = self.branch.forward(g, x);
        let br = g.reshape(br, &[d, h * w]);
        let out = g.matmul(rest, br, false, false);
        let out = g.scale(out, 1.0 / (d as f64).sqrt());
        (g.reshape(out, &[t - 1, h, w]), mu)
    }
}

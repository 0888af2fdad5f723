use super::layers::{Builder, Conv};
use super::ModelConfig;
use crate::graph::{Graph, Var};

/// Five stages of `conv3x3/2 -> ReLU -> conv3x3 -> ReLU`.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    stages: Vec<(Conv, Conv)>,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut cin = 3;
        let stages = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("encoder.stage{}", i + 1);
                let down = Conv::new(b, &format!("{name}.conv1"), cin, c, 3, 2, 1, std::f64::consts::SQRT_2);
                let same = Conv::same3(b, &format!("{name}.conv2"), c, c);
                cin = c;
                (down, same)
            })
            .collect();
        Self { stages }
    }

    /// Returns the bottleneck and the skips ordered from stride 16 to stride 2.
    pub fn forward(&self, g: &mut Graph, image: Var) -> (Var, Vec<Var>) {
        let mut x = g.affine(image, 1.0, -0.5);
        let mut outs = Vec::with_capacity(5);
        for (down, same) in &self.stages {
            let y = down.forward(g, x);
            let y = g.relu(y);
            let y = same.forward(g, y);
            x = g.relu(y);
            outs.push(x);
        }
        let bottleneck = outs.pop().expect("five stages");
        outs.reverse();
        (bottleneck, outs)
    }
}

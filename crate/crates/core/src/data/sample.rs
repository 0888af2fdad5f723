use ndarray::Array3;

use super::DataError;
use crate::decomposition::{
    invert_depth, spatial_gradients, znormalize, GradientPair, MetricDepthMap, NormalizedDepthMap,
    ScaleStats,
};
use crate::losses::LossTargets;

/// One training or evaluation example with all derived targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(h, w, 3)` RGB in `[0, 1]`.
    pub image: Array3<f64>,
    /// Inverted-space metric depth, absent for relative-only samples.
    pub metric: Option<MetricDepthMap>,
    pub normalized: NormalizedDepthMap,
    pub gradients: GradientPair,
    pub has_metric_label: bool,
    pub source_id: String,
}

impl Sample {
    pub fn targets(&self) -> LossTargets {
        LossTargets {
            g: self.gradients.clone(),
            n: self.normalized.clone(),
            m: self.metric.clone(),
        }
    }

    pub fn stats(&self) -> Option<ScaleStats> {
        self.normalized.origin_stats
    }

    /// The same sample with its metric label removed.
    pub fn into_relative(mut self) -> Self {
        self.metric = None;
        self.normalized.origin_stats = None;
        self.has_metric_label = false;
        self
    }
}

/// Builds targets from an original-space depth map: invert, z-normalize, and
/// take gradients of the normalized map.
pub fn make_sample(
    metric: &MetricDepthMap,
    image: Array3<f64>,
    relative_only: bool,
    source_id: impl Into<String>,
) -> Result<Sample, DataError> {
    let (h, w) = metric.data.dim();
    if image.dim() != (h, w, 3) {
        return Err(DataError::ShapeMismatch(format!(
            "image {:?} vs depth {h}x{w}",
            image.dim()
        )));
    }
    let inverted = invert_depth(metric)?;
    let (normalized, _) = znormalize(&inverted)?;
    let gradients = spatial_gradients(&normalized)?;
    let sample = Sample {
        image,
        metric: Some(inverted),
        normalized,
        gradients,
        has_metric_label: true,
        source_id: source_id.into(),
    };
    Ok(if relative_only { sample.into_relative() } else { sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{reconstruct_direct, spatial_gradients_raw, DecompError, DepthSpace};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(seed: u64) -> MetricDepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MetricDepthMap::dense(
            Array2::from_shape_fn((6, 8), |_| rng.random_range(0.5..10.0)),
            DepthSpace::Original,
        );
        m.valid[[1, 1]] = false;
        m.data[[1, 1]] = 0.0;
        m
    }

    #[test]
    fn targets_are_consistent() {
        let m = map(1);
        let s = make_sample(&m, Array3::zeros((6, 8, 3)), false, "a").unwrap();
        assert!(s.has_metric_label && s.metric.is_some());
        let vals: Vec<f64> = s.normalized.data.iter().zip(s.normalized.valid.iter()).filter(|p| *p.1).map(|p| *p.0).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);
        let g = spatial_gradients_raw(&s.normalized.data, &s.normalized.valid).unwrap();
        assert_eq!(g, s.gradients);
        let back = reconstruct_direct(&s.normalized, &s.stats().unwrap()).unwrap();
        let inv = s.metric.as_ref().unwrap();
        for ((a, b), &ok) in back.data.iter().zip(inv.data.iter()).zip(inv.valid.iter()) {
            if ok {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relative_samples_drop_the_label() {
        let s = make_sample(&map(2), Array3::zeros((6, 8, 3)), true, "r").unwrap();
        assert!(!s.has_metric_label && s.metric.is_none() && s.stats().is_none());
        assert!(s.targets().m.is_none());
    }

    #[test]
    fn constant_depth_is_degenerate() {
        let m = MetricDepthMap::dense(Array2::from_elem((4, 4), 2.0), DepthSpace::Original);
        assert!(matches!(
            make_sample(&m, Array3::zeros((4, 4, 3)), false, "c"),
            Err(DataError::Decomposition(DecompError::DegenerateMap { .. }))
        ));
    }
}

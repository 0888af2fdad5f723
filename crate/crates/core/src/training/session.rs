use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::variants::{Schedule, Variant};
use super::{LogRecord, Phase, TrainConfig, TrainError};
use crate::data::{splitmix64, Sample, SplitSamples};
use crate::decomposition::{uninvert_depth, MetricDepthMap};
use crate::graph::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::losses::{
    total_loss_with_grads, LossBreakdown, LossConfig, LossInputs, LossTerm, TermWeights,
};
use crate::metrics::{evaluate_map, CorpusReport, EvalProtocol, MetricReport};
use crate::network::{collect_output, image_to_tensor, ForwardScope, Model, RgbImage};

/// Loss breakdown and parameter gradients of one sample.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    loss: &LossConfig,
    scope: ForwardScope,
) -> Result<(LossBreakdown, Gradients), TrainError> {
    let mut g = Graph::new(model.params());
    let vars = model.forward_graph(&mut g, &image_to_tensor(&sample.image), scope)?;
    let out = collect_output(&g, &vars);
    let (breakdown, og) = total_loss_with_grads(
        LossInputs::from_output(&out),
        &sample.targets(),
        loss,
        sample.has_metric_label,
    )?;
    let mut roots: Vec<(Var, f64)> = Vec::new();
    if let (Some(v), Some((dx, dy))) = (vars.g, og.g) {
        let grad: Vec<f64> = dx.iter().chain(dy.iter()).copied().collect();
        roots.push((g.external(v, 0.0, grad), 1.0));
    }
    if let (Some(v), Some(d)) = (vars.n, og.n) {
        roots.push((g.external(v, 0.0, d.iter().copied().collect()), 1.0));
    }
    if let (Some(v), Some(d)) = (vars.m, og.m) {
        roots.push((g.external(v, 0.0, d.iter().copied().collect()), 1.0));
    }
    let grads = if roots.is_empty() {
        Gradients::empty(model.params().len())
    } else {
        let root = g.weighted_sum(&roots);
        g.backward(root)
    };
    Ok((breakdown, grads))
}

/// Original-space metric prediction, clamped to `range`.
pub fn predict_original(
    model: &Model,
    image: &RgbImage,
    range: (f64, f64),
) -> Result<MetricDepthMap, TrainError> {
    let out = model.forward_full(image)?;
    let m_hat = out
        .m_hat
        .ok_or(TrainError::InvalidConfig("model has no metric output".into()))?;
    let mut d = uninvert_depth(&m_hat)?;
    d.data.mapv_inplace(|x| x.clamp(range.0, range.1));
    Ok(d)
}

/// Scores every metric-labeled sample, keyed by source id.
pub fn evaluate_samples(
    model: &Model,
    samples: &[Sample],
    protocol: &EvalProtocol,
    range: (f64, f64),
) -> Result<CorpusReport, TrainError> {
    let scored: Vec<(String, MetricReport)> = samples
        .par_iter()
        .filter(|s| s.has_metric_label)
        .map(|s| {
            let gt = uninvert_depth(s.metric.as_ref().expect("labeled sample has metric depth"))?;
            let pred = predict_original(model, &s.image, range)?;
            Ok((s.source_id.clone(), evaluate_map(&pred, &gt, protocol)?))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(CorpusReport::from_reports(&protocol.name, scored.into_iter().collect())?)
}

/// Completed epochs per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase1: usize,
    pub phase2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Best {
    pub rmse: f64,
    pub phase: Phase,
    pub epoch: usize,
    pub params: ParamStore,
}

#[derive(Default)]
struct LossStats {
    total: f64,
    count: usize,
    terms: BTreeMap<String, (f64, usize)>,
}

impl LossStats {
    fn add(&mut self, b: &LossBreakdown) {
        self.total += b.total;
        self.count += 1;
        for (k, v) in &b.terms {
            let e = self.terms.entry(k.clone()).or_insert((0.0, 0));
            if let Some(v) = v {
                e.0 += v;
                e.1 += 1;
            }
        }
    }

    fn mean(&self) -> f64 {
        self.total / self.count.max(1) as f64
    }

    fn term_means(&self) -> BTreeMap<String, Option<f64>> {
        self.terms
            .iter()
            .map(|(k, &(s, n))| (k.clone(), (n > 0).then(|| s / n as f64)))
            .collect()
    }
}

fn round_to_f32(store: &ParamStore) -> ParamStore {
    let mut out = store.clone();
    let ids: Vec<ParamId> = out.ids().collect();
    for id in ids {
        out.get_mut(id).data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    out
}

/// Owns a model and its optimizer through the phase schedule of a variant.
pub struct Trainer<'v> {
    pub(crate) variant: &'v dyn Variant,
    pub(crate) cfg: TrainConfig,
    pub(crate) model: Model,
    pub(crate) optimizer: Option<(Phase, Adam)>,
    pub(crate) progress: Progress,
    pub(crate) best: Option<Best>,
    pub(crate) log: Vec<LogRecord>,
    pub(crate) protocol: EvalProtocol,
}

impl<'v> Trainer<'v> {
    /// `model` must already have the variant's architecture.
    pub fn new(
        variant: &'v dyn Variant,
        model: Model,
        cfg: TrainConfig,
        protocol: EvalProtocol,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if model.config().architecture != variant.architecture() {
            return Err(TrainError::InvalidConfig(format!(
                "model architecture does not match variant {}",
                variant.name()
            )));
        }
        Ok(Self {
            variant,
            cfg,
            model,
            optimizer: None,
            progress: Progress::default(),
            best: None,
            log: Vec::new(),
            protocol,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn variant(&self) -> &dyn Variant {
        self.variant
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn optimizer(&self) -> Option<&Adam> {
        self.optimizer.as_ref().map(|(_, a)| a)
    }

    /// The best-by-validation-RMSE weights, rounded to checkpoint precision,
    /// or the current weights when no validation score exists yet.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        *m.params_mut() = match &self.best {
            Some(b) => b.params.clone(),
            None => round_to_f32(self.model.params()),
        };
        m
    }

    pub fn best_score(&self) -> Option<(f64, Phase, usize)> {
        self.best.as_ref().map(|b| (b.rmse, b.phase, b.epoch))
    }

    /// The (phase, epoch) sequence still to run.
    pub fn remaining(&self) -> Vec<(Phase, usize)> {
        let mut out = Vec::new();
        if self.variant.schedule() == Schedule::TwoPhase {
            out.extend((self.progress.phase1 + 1..=self.cfg.phase1.epochs).map(|e| (Phase::One, e)));
        }
        out.extend((self.progress.phase2 + 1..=self.cfg.phase2.epochs).map(|e| (Phase::Two, e)));
        out
    }

    pub fn is_complete(&self) -> bool {
        self.remaining().is_empty()
    }

    /// Term weights in effect during `phase`.
    pub fn loss_config(&self, phase: Phase) -> LossConfig {
        let mut w = self.variant.loss_weights(&self.cfg.loss.term_weights);
        if phase == Phase::One {
            let keep = [LossTerm::G, LossTerm::N, LossTerm::Nx, LossTerm::Ny];
            let mut only = TermWeights::uniform(0.0);
            for t in keep {
                only.set(t, w.get(t));
            }
            w = only;
        }
        LossConfig { term_weights: w, ..self.cfg.loss.clone() }
    }

    /// Parameters the optimizer updates during `phase`.
    pub fn trainable(&self, phase: Phase) -> Vec<ParamId> {
        let ps = self.model.params();
        ps.ids()
            .filter(|&id| phase == Phase::Two || !Model::is_m_exclusive(ps.name(id)))
            .collect()
    }

    fn scope(phase: Phase) -> ForwardScope {
        match phase {
            Phase::One => ForwardScope::WithoutMNet,
            Phase::Two => ForwardScope::Full,
        }
    }

    /// Training order for one epoch: shuffled metric samples with the
    /// relative-only ones spread evenly among them.
    pub fn epoch_order(&self, train: &[Sample], phase: Phase, epoch: usize) -> Vec<usize> {
        let seed = splitmix64(self.cfg.seed ^ ((phase.number() as u64) << 40) ^ epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut metric, mut relative): (Vec<usize>, Vec<usize>) =
            (0..train.len()).partition(|&i| train[i].has_metric_label);
        if !self.variant.uses_relative() {
            relative.clear();
        }
        metric.shuffle(&mut rng);
        relative.shuffle(&mut rng);
        if let (Some(r), false) = (self.cfg.relative_ratio, relative.is_empty()) {
            let k = (r * metric.len() as f64).round() as usize;
            relative = relative.iter().cycle().take(k).copied().collect();
        }
        let (n, k) = (metric.len() + relative.len(), relative.len());
        let mut is_rel = vec![false; n];
        for j in 0..k {
            is_rel[(2 * j + 1) * n / (2 * k)] = true;
        }
        let (mut mi, mut ri) = (metric.into_iter(), relative.into_iter());
        is_rel
            .into_iter()
            .map(|r| if r { ri.next() } else { mi.next() }.expect("counts match"))
            .collect()
    }

    /// Runs the remaining phase-1 epochs.
    pub fn train_phase1(&mut self, data: &SplitSamples) -> Result<(), TrainError> {
        self.run_until(data, |p, _| p == Phase::One, &mut |_, _| Ok(()))
    }

    /// Runs the remaining phase-2 epochs. Two-phase variants must have
    /// finished phase 1.
    pub fn train_phase2(&mut self, data: &SplitSamples) -> Result<(), TrainError> {
        if self.variant.schedule() == Schedule::TwoPhase && self.progress.phase1 < self.cfg.phase1.epochs {
            return Err(TrainError::MissingPhase1);
        }
        self.run_until(data, |p, _| p == Phase::Two, &mut |_, _| Ok(()))
    }

    /// Runs the whole remaining schedule, calling `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        data: &SplitSamples,
        on_epoch: &mut dyn FnMut(&Trainer, &LogRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        self.run_until(data, |_, _| true, on_epoch)
    }

    /// Runs remaining epochs while `keep(phase, epoch)` holds.
    pub fn run_until(
        &mut self,
        data: &SplitSamples,
        keep: impl Fn(Phase, usize) -> bool,
        on_epoch: &mut dyn FnMut(&Trainer, &LogRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        for (phase, epoch) in self.remaining() {
            if !keep(phase, epoch) {
                break;
            }
            let rec = self.run_epoch(data, phase, epoch)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    fn run_epoch(&mut self, data: &SplitSamples, phase: Phase, epoch: usize) -> Result<LogRecord, TrainError> {
        let order = self.epoch_order(&data.train, phase, epoch);
        if order.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if self.optimizer.as_ref().is_none_or(|(p, _)| *p != phase) {
            let ids = self.trainable(phase);
            self.optimizer = Some((phase, Adam::new(self.cfg.optimizer, self.model.params(), ids)));
        }
        let lr = self.cfg.phase(phase).lr_at(epoch);
        let loss = self.loss_config(phase);
        let scope = Self::scope(phase);
        let mut stats = LossStats::default();
        for batch in order.chunks(self.cfg.batch_size) {
            let model = &self.model;
            let results = batch
                .par_iter()
                .map(|&i| sample_gradients(model, &data.train[i], &loss, scope))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = Gradients::empty(model.params().len());
            let scale = 1.0 / batch.len() as f64;
            for (b, g) in &results {
                if !b.total.is_finite() {
                    return Err(TrainError::NonFinite { phase: phase.number(), epoch });
                }
                stats.add(b);
                grads.accumulate(g, scale);
            }
            let (_, opt) = self.optimizer.as_mut().expect("optimizer initialized");
            opt.step(self.model.params_mut(), &grads, lr);
        }
        match phase {
            Phase::One => self.progress.phase1 = epoch,
            Phase::Two => self.progress.phase2 = epoch,
        }

        let val_loss = self.validation_loss(&data.val, &loss, scope)?;
        let val = if phase == Phase::Two && data.val.iter().any(|s| s.has_metric_label) {
            let report = evaluate_samples(&self.model, &data.val, &self.protocol, self.cfg.depth_range)?;
            if self.best.as_ref().is_none_or(|b| report.mean.rmse < b.rmse) {
                self.best = Some(Best {
                    rmse: report.mean.rmse,
                    phase,
                    epoch,
                    params: round_to_f32(self.model.params()),
                });
            }
            Some(report.mean)
        } else {
            None
        };
        let rec = LogRecord {
            phase,
            epoch,
            lr,
            train_loss: stats.mean(),
            losses: stats.term_means(),
            val_loss,
            val,
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    fn validation_loss(
        &self,
        val: &[Sample],
        loss: &LossConfig,
        scope: ForwardScope,
    ) -> Result<Option<f64>, TrainError> {
        if val.is_empty() {
            return Ok(None);
        }
        let totals = val
            .par_iter()
            .map(|s| {
                let out = self.model.forward_tensor(&image_to_tensor(&s.image), scope)?;
                let b = crate::losses::total_loss(
                    LossInputs::from_output(&out),
                    &s.targets(),
                    loss,
                    s.has_metric_label,
                )?;
                Ok(b.total)
            })
            .collect::<Result<Vec<f64>, TrainError>>()?;
        Ok(Some(totals.iter().sum::<f64>() / totals.len() as f64))
    }
}

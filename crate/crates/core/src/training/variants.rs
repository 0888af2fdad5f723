//! Training variants, registered by name.
//!
//! A variant fixes which sub-networks exist, which loss terms are active,
//! whether relative-only samples are used and how the phases are scheduled.

use std::collections::BTreeMap;

use super::TrainError;
use crate::losses::{LossTerm, TermWeights};
use crate::network::{Architecture, MdrMode, Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Phase 1 without M-Net, then everything jointly.
    TwoPhase,
    /// Everything jointly for the phase-2 epoch budget.
    SinglePhase,
}

pub trait Variant: Send + Sync {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    fn architecture(&self) -> Architecture;
    fn schedule(&self) -> Schedule;
    /// Active loss terms; weights of the others are zeroed.
    fn terms(&self) -> Vec<LossTerm>;
    fn uses_relative(&self) -> bool;

    fn loss_weights(&self, base: &TermWeights) -> TermWeights {
        let mut w = TermWeights::uniform(0.0);
        for t in self.terms() {
            w.set(t, base.get(t));
        }
        w
    }
}

/// A variant described entirely by data.
#[derive(Debug, Clone)]
pub struct VariantSpec {
    pub name: String,
    pub description: String,
    pub architecture: Architecture,
    pub schedule: Schedule,
    pub terms: Vec<LossTerm>,
    pub uses_relative: bool,
}

impl Variant for VariantSpec {
    fn name(&self) -> &str {
        &self.name
    }
    fn description(&self) -> &str {
        &self.description
    }
    fn architecture(&self) -> Architecture {
        self.architecture
    }
    fn schedule(&self) -> Schedule {
        self.schedule
    }
    fn terms(&self) -> Vec<LossTerm> {
        self.terms.clone()
    }
    fn uses_relative(&self) -> bool {
        self.uses_relative
    }
}

fn terms_for(arch: Architecture) -> Vec<LossTerm> {
    use LossTerm::*;
    let mut t = Vec::new();
    if arch.g_net {
        t.push(G);
    }
    if arch.n_net {
        t.extend([N, Nx, Ny]);
    }
    t.extend([M, Mx, My, LogM]);
    if arch.mdr == MdrMode::Full {
        t.push(Mu);
    }
    t
}

fn spec(name: &str, description: &str, architecture: Architecture, schedule: Schedule, uses_relative: bool) -> VariantSpec {
    VariantSpec {
        name: name.into(),
        description: description.into(),
        architecture,
        schedule,
        terms: terms_for(architecture),
        uses_relative,
    }
}

/// Name-keyed collection of variants.
pub struct VariantRegistry {
    variants: BTreeMap<String, Box<dyn Variant>>,
}

impl Default for VariantRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl VariantRegistry {
    pub fn empty() -> Self {
        Self { variants: BTreeMap::new() }
    }

    /// Baseline, proposed and the ablation rows.
    pub fn builtin() -> Self {
        use Schedule::*;
        let arch = |g_net, n_net, mdr| Architecture { g_net, n_net, mdr };
        let mut r = Self::empty();
        r.register(VariantSpec {
            terms: vec![LossTerm::M, LossTerm::Mx, LossTerm::My],
            ..spec("baseline", "encoder and M-Net only, three M loss terms", Architecture::BASELINE, SinglePhase, false)
        });
        r.register(spec("ablation_n", "baseline plus N-Net", arch(false, true, MdrMode::Off), TwoPhase, false));
        r.register(spec("ablation_ng", "baseline plus N-Net and G-Net", arch(true, true, MdrMode::Off), TwoPhase, false));
        r.register(spec(
            "ablation_ng_mdr_star",
            "G-Net, N-Net and MDR without the mean estimate",
            arch(true, true, MdrMode::AttentionOnly),
            TwoPhase,
            false,
        ));
        r.register(spec("proposed", "all decoders and the full MDR block", Architecture::PROPOSED, TwoPhase, false));
        r.register(spec(
            "proposed_plus_relative",
            "proposed, also trained on relative-only samples",
            Architecture::PROPOSED,
            TwoPhase,
            true,
        ));
        r.register(spec(
            "single_phase",
            "proposed architecture trained jointly from the start",
            Architecture::PROPOSED,
            SinglePhase,
            false,
        ));
        r.register(spec(
            "single_phase_plus_relative",
            "single-phase schedule with relative-only samples",
            Architecture::PROPOSED,
            SinglePhase,
            true,
        ));
        r
    }

    /// Adds or replaces a variant under its own name.
    pub fn register(&mut self, v: impl Variant + 'static) {
        self.variants.insert(v.name().to_string(), Box::new(v));
    }

    pub fn get(&self, name: &str) -> Result<&dyn Variant, TrainError> {
        self.variants
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| TrainError::UnknownVariant(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.variants.keys().map(String::as_str).collect()
    }
}

/// Instantiates the model a variant trains.
pub fn build_variant(v: &dyn Variant, cfg: &ModelConfig) -> Result<Model, TrainError> {
    Ok(Model::new(cfg.clone().with_architecture(v.architecture()))?)
}

//! Run configuration: one TOML document describing the corpus, models,
//! training schedules, methods and protocol. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::ClMethodConfig;
use crate::detector::{CapacityPreset, ClassWeighting, DetectorArch, TrainConfig};
use crate::e3::{quota, EkfnArch, EkfnTrainConfig};
use crate::error::{E3Error, Result};
use crate::synthgen::CorpusConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    E3,
    Finetune,
    Er,
    Lwf,
    Majority,
    /// The baseline detector, never updated.
    Baseline,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::E3,
        Method::Finetune,
        Method::Er,
        Method::Lwf,
        Method::Majority,
        Method::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::E3 => "e3",
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::Lwf => "lwf",
            Method::Majority => "majority",
            Method::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| E3Error::config("methods", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each emerging generator absorbed independently from the baseline.
    Single,
    /// Generators absorbed one after another.
    Sequential,
    /// Sequential E3 runs over several new-generator budgets.
    Sweep,
    /// Sequential runs for each detector capacity preset.
    Arch,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Single => "single",
            Protocol::Sequential => "sequential",
            Protocol::Sweep => "sweep",
            Protocol::Arch => "arch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Protocol::Single, Protocol::Sequential, Protocol::Sweep, Protocol::Arch]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| E3Error::config("protocol", format!("unknown protocol `{s}`")))
    }
}

fn desk_train(epochs: usize, weighting: ClassWeighting) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        epochs,
        batch_size: 32,
        seed: 0,
        class_weighting: weighting,
        patch_size: 32,
        lr_decay: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub protocol: Protocol,
    pub methods: Vec<Method>,
    /// Memory buffer capacity `M`.
    pub buffer_capacity: usize,
    /// Images available from each new generator, `N`.
    pub budget: usize,
    /// Emerging generator ids in arrival order; empty means roster order.
    pub sequence: Vec<String>,
    pub sweep_budgets: Vec<usize>,
    pub arch_presets: Vec<CapacityPreset>,
    pub corpus: CorpusConfig,
    pub detector: DetectorArch,
    pub baseline_train: TrainConfig,
    pub expert_train: TrainConfig,
    pub cl: ClMethodConfig,
    pub ekfn: EkfnArch,
    pub ekfn_train: EkfnTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            protocol: Protocol::Sequential,
            methods: vec![Method::E3, Method::Finetune, Method::Er, Method::Lwf, Method::Majority],
            buffer_capacity: 200,
            budget: 100,
            sequence: Vec::new(),
            sweep_budgets: vec![20, 50, 100, 200],
            arch_presets: vec![CapacityPreset::Tiny, CapacityPreset::Small, CapacityPreset::Medium],
            corpus: CorpusConfig::default(),
            detector: DetectorArch::default(),
            baseline_train: desk_train(20, ClassWeighting::None),
            expert_train: desk_train(40, ClassWeighting::Proportional),
            cl: ClMethodConfig {
                train: desk_train(20, ClassWeighting::Proportional),
                ..ClMethodConfig::default()
            },
            ekfn: EkfnArch::default(),
            ekfn_train: EkfnTrainConfig::default(),
        }
    }
}

/// Capacity used for a budget `n`: the configured `M`, shrunk to `4n` when
/// the first slot quota `⌊M/4⌋` would exceed `n`.
pub fn effective_capacity(capacity: usize, budget: usize) -> usize {
    capacity.min(4 * budget)
}

impl RunConfig {
    /// Emerging generator ids in arrival order.
    pub fn generator_sequence(&self) -> Vec<String> {
        if self.sequence.is_empty() {
            self.corpus.emerging_generators.iter().map(|g| g.id.clone()).collect()
        } else {
            self.sequence.clone()
        }
    }

    fn check_budget(&self, key: &str, budget: usize, capacity: usize) -> Result<()> {
        let p1 = quota(capacity, 1);
        if budget < p1 {
            return Err(E3Error::config(
                key,
                format!("N = {budget} is below the first slot quota ⌊M/4⌋ = {p1}"),
            ));
        }
        if budget > self.corpus.emerging.train {
            return Err(E3Error::config(
                key,
                format!("N = {budget} exceeds the emerging train pool ({})", self.corpus.emerging.train),
            ));
        }
        if budget == 0 {
            return Err(E3Error::config(key, "must be ≥ 1"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.master_seed).is_err() {
            return Err(E3Error::config("master_seed", "must fit in a signed 64-bit integer"));
        }
        self.corpus.validate()?;
        let m = self.buffer_capacity;
        if m < 4 || !m.is_multiple_of(2) {
            return Err(E3Error::config("buffer_capacity", format!("must be even and ≥ 4, got {m}")));
        }
        if m / 2 > self.corpus.real.train {
            return Err(E3Error::config(
                "buffer_capacity",
                format!("M/2 = {} exceeds the real train pool ({})", m / 2, self.corpus.real.train),
            ));
        }
        let n_base = self.corpus.baseline_generators.len();
        for slot in 0..n_base {
            let share = m / 2 / n_base + usize::from(slot < (m / 2) % n_base);
            if share > self.corpus.baseline_counts(slot).train {
                return Err(E3Error::config("buffer_capacity", "baseline slot exceeds the baseline train pool"));
            }
        }
        self.check_budget("budget", self.budget, m)?;
        if self.methods.is_empty() {
            return Err(E3Error::config("methods", "must list at least one method"));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(E3Error::config("methods", "duplicate method"));
        }
        let roster: BTreeSet<&str> = self.corpus.emerging_generators.iter().map(|g| g.id.as_str()).collect();
        let seq = self.generator_sequence();
        if seq.is_empty() {
            return Err(E3Error::config("sequence", "no emerging generators"));
        }
        for id in &seq {
            if !roster.contains(id.as_str()) {
                return Err(E3Error::config("sequence", format!("`{id}` is not an emerging generator")));
            }
        }
        if seq.iter().collect::<BTreeSet<_>>().len() != seq.len() {
            return Err(E3Error::config("sequence", "duplicate generator"));
        }
        if self.sweep_budgets.is_empty() {
            return Err(E3Error::config("sweep_budgets", "must list at least one budget"));
        }
        for &b in &self.sweep_budgets {
            self.check_budget("sweep_budgets", b, effective_capacity(m, b))?;
        }
        if self.arch_presets.is_empty() {
            return Err(E3Error::config("arch_presets", "must list at least one preset"));
        }
        if self.detector.embed_dim < 4 {
            return Err(E3Error::config("detector.embed_dim", "must be ≥ 4"));
        }
        for (key, t) in [
            ("baseline_train", &self.baseline_train),
            ("expert_train", &self.expert_train),
            ("cl.train", &self.cl.train),
        ] {
            t.validate(key)?;
            if t.patch_size != self.corpus.patch_size {
                return Err(E3Error::config(
                    format!("{key}.patch_size"),
                    format!("must equal corpus.patch_size ({})", self.corpus.patch_size),
                ));
            }
        }
        self.cl.validate("cl")?;
        self.ekfn.validate("ekfn", self.detector.embed_dim)?;
        self.ekfn_train.validate("ekfn_train")?;
        Ok(())
    }

    /// Parses and validates a TOML document. `master_seed` is required; every
    /// other key falls back to its documented default.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| E3Error::config(error_key(&e), e.message()))?;
        if !table.contains_key("master_seed") {
            return Err(E3Error::config("master_seed", "missing required key"));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| E3Error::config(error_key(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| E3Error::config("config", e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(crate::synthgen::hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "config".to_string()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| E3Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    RunConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml("master_seed = 42").unwrap();
        assert_eq!(
            cfg,
            RunConfig {
                master_seed: 42,
                ..RunConfig::default()
            }
        );
    }

    #[test]
    fn missing_seed_and_unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("budget = 100").unwrap_err();
        assert!(matches!(e, E3Error::Config { ref key, .. } if key == "master_seed"), "{e}");
        let e = RunConfig::from_toml("master_seed = 1\nbuget = 3").unwrap_err();
        assert!(matches!(e, E3Error::Config { ref key, .. } if key == "buget"), "{e}");
        let e = RunConfig::from_toml("master_seed = 1\n[ekfn]\nlayers = 3").unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn odd_capacity_is_rejected() {
        let e = RunConfig::from_toml("master_seed = 1\nbuffer_capacity = 999").unwrap_err();
        assert!(matches!(e, E3Error::Config { ref key, .. } if key == "buffer_capacity"), "{e}");
    }

    #[test]
    fn budget_below_quota_is_rejected() {
        let e = RunConfig::from_toml("master_seed = 1\nbudget = 49").unwrap_err();
        assert!(matches!(e, E3Error::Config { ref key, .. } if key == "budget"), "{e}");
    }

    #[test]
    fn roundtrip_is_a_fixed_point() {
        let text = "master_seed = 9\nmethods = [\"e3\", \"er\"]\n[ekfn]\nvariant = \"mlp_only\"\n";
        let a = RunConfig::from_toml(text).unwrap();
        let s = a.to_toml().unwrap();
        let b = RunConfig::from_toml(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, b.to_toml().unwrap());
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn sequence_must_name_emerging_generators() {
        let e = RunConfig::from_toml("master_seed = 1\nsequence = [\"b_peak\"]").unwrap_err();
        assert!(e.is_config());
        assert_eq!(effective_capacity(200, 20), 80);
        assert_eq!(effective_capacity(200, 100), 200);
    }
}

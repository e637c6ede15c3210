//! Competing continual-learning updaters: naive fine-tuning, experience
//! replay, learning without forgetting, and majority voting over experts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{sigmoid, train_detector, train_detector_with, DetectorModel, TrainConfig};
use crate::e3::MemoryBuffer;
use crate::error::{E3Error, Result};
use crate::synthgen::LabeledImage;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClMethodConfig {
    pub lambda_distill: f32,
    pub temperature: f32,
    pub train: TrainConfig,
}

impl Default for ClMethodConfig {
    fn default() -> Self {
        Self {
            lambda_distill: 1.0,
            temperature: 2.0,
            train: TrainConfig::default(),
        }
    }
}

impl ClMethodConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.lambda_distill >= 0.0) || !self.lambda_distill.is_finite() {
            return Err(E3Error::config(format!("{key}.lambda_distill"), "must be finite and ≥ 0"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(E3Error::config(format!("{key}.temperature"), "must be finite and > 0"));
        }
        self.train.validate(&format!("{key}.train"))
    }
}

fn union(d_k: &[LabeledImage], reals: &[LabeledImage]) -> Result<Vec<LabeledImage>> {
    if d_k.is_empty() || reals.is_empty() {
        return Err(E3Error::Data(format!(
            "update needs new synthetic and real images ({} and {})",
            d_k.len(),
            reals.len()
        )));
    }
    let mut data = d_k.to_vec();
    data.extend_from_slice(reals);
    Ok(data)
}

/// Fine-tunes the running model on `D_k ∪ R` with no replay of older synthetics.
pub fn finetune_step(model: &DetectorModel, d_k: &[LabeledImage], reals: &[LabeledImage], cfg: &TrainConfig) -> Result<DetectorModel> {
    Ok(train_detector(model, &union(d_k, reals)?, cfg)?.model)
}

/// Fine-tunes on `M_k ∪ D_k`: the new data, every buffered synthetic image
/// not already in `D_k`, and the buffered reals, in that order.
pub fn er_step(model: &DetectorModel, buf: &MemoryBuffer, d_k: &[LabeledImage], cfg: &TrainConfig) -> Result<DetectorModel> {
    if buf.is_empty() {
        return Err(E3Error::Data("experience replay needs a non-empty buffer".into()));
    }
    if d_k.is_empty() {
        return Err(E3Error::Data("experience replay needs new-generator images".into()));
    }
    let seen: BTreeSet<(&str, u64)> = d_k.iter().map(|i| (i.source_id.as_str(), i.index)).collect();
    let mut data = d_k.to_vec();
    for (_, slot) in buf.slots() {
        data.extend(slot.iter().filter(|i| !seen.contains(&(i.source_id.as_str(), i.index))).cloned());
    }
    data.extend_from_slice(buf.reals());
    Ok(train_detector(model, &data, cfg)?.model)
}

/// Fine-tunes on `D_k ∪ R` with an added distillation term
/// `λ·T²·BCE(σ(z/T), σ(z_prev/T))` computed on the same patches by the
/// frozen `prev_model`.
pub fn lwf_step(
    model: &DetectorModel,
    prev_model: &DetectorModel,
    d_k: &[LabeledImage],
    reals: &[LabeledImage],
    cfg: &ClMethodConfig,
) -> Result<DetectorModel> {
    cfg.validate("lwf")?;
    let data = union(d_k, reals)?;
    if cfg.lambda_distill == 0.0 {
        return Ok(train_detector(model, &data, &cfg.train)?.model);
    }
    let (lambda, t) = (cfg.lambda_distill, cfg.temperature);
    let distill = |tape: &Tape, z: Var, x: Var, _idx: &[usize]| -> Result<Option<Var>> {
        let prev_tape = Tape::new();
        let vars = prev_model.bind(&prev_tape);
        let px = prev_tape.constant(&tape.shape(x), tape.value(x))?;
        let pz = prev_model.forward(&prev_tape, &vars, px)?;
        let soft: Vec<f32> = prev_tape.value(pz).into_iter().map(|v| sigmoid(v / t)).collect();
        let zt = tape.scale(z, 1.0 / t);
        let term = tape.bce_with_logits(zt, &soft, None)?;
        Ok(Some(tape.scale(term, lambda * t * t)))
    };
    Ok(train_detector_with(model, &data, &cfg.train, Some(&distill))?.model)
}

/// `sigmoid(Σ_ℓ logit_ℓ(I))` over experts that keep their classifier heads.
pub fn majority_vote_predict(experts: &[DetectorModel], images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
    if experts.is_empty() {
        return Err(E3Error::Contract("majority vote needs at least one expert".into()));
    }
    let mut total = vec![0.0f32; images.len()];
    for e in experts {
        for (acc, z) in total.iter_mut().zip(e.logits(images, patch)?) {
            *acc += z;
        }
    }
    Ok(total.into_iter().map(sigmoid).collect())
}

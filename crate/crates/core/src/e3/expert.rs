use crate::detector::{train_detector, DetectorModel, Embedder, TrainConfig};
use crate::error::{E3Error, Result};
use crate::synthgen::LabeledImage;
use crate::tensor::{Tape, Var};

use super::buffer::MemoryBuffer;
use super::ekfn::{train_fusion, EkfnTrainConfig, FusionNetwork};

fn expert_training_set(d_k: &[LabeledImage], reals: &[LabeledImage]) -> Result<Vec<LabeledImage>> {
    if d_k.is_empty() {
        return Err(E3Error::Data("expert training needs new-generator images".into()));
    }
    if reals.is_empty() {
        return Err(E3Error::Data("expert training needs real images".into()));
    }
    if d_k.iter().any(|i| !i.label.is_synthetic()) || reals.iter().any(|i| i.label.is_synthetic()) {
        return Err(E3Error::Data("D_k must be synthetic and R must be real".into()));
    }
    let mut t = d_k.to_vec();
    t.extend_from_slice(reals);
    Ok(t)
}

/// Fine-tunes a copy of `f0` on `T_k = D_k ∪ R` and keeps the whole
/// intermediate detector `f̂_k` (embedder and head).
pub fn train_expert_detector(f0: &DetectorModel, d_k: &[LabeledImage], reals: &[LabeledImage], cfg: &TrainConfig) -> Result<DetectorModel> {
    let t = expert_training_set(d_k, reals)?;
    Ok(train_detector(f0, &t, cfg)?.model)
}

/// Fine-tunes a copy of `f0` on `T_k = D_k ∪ R` and returns the frozen
/// embedder `φ_k`; the classifier head is discarded.
pub fn train_expert(f0: &DetectorModel, d_k: &[LabeledImage], reals: &[LabeledImage], cfg: &TrainConfig) -> Result<Embedder> {
    let mut e = train_expert_detector(f0, d_k, reals, cfg)?.embedder;
    e.freeze();
    Ok(e)
}

/// Ordered, frozen expert embedders `Φ = {φ_0, …, φ_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    experts: Vec<Embedder>,
}

impl ExpertEnsemble {
    /// `Φ_0 = {φ_0}` from the baseline detector's embedder.
    pub fn new(mut baseline: Embedder) -> Self {
        baseline.freeze();
        Self { experts: vec![baseline] }
    }

    pub fn push(&mut self, mut expert: Embedder) -> Result<()> {
        if expert.embed_dim() != self.embed_dim() {
            return Err(E3Error::Contract(format!(
                "expert width {} differs from ensemble width {}",
                expert.embed_dim(),
                self.embed_dim()
            )));
        }
        expert.freeze();
        self.experts.push(expert);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.experts[0].embed_dim()
    }

    pub fn experts(&self) -> &[Embedder] {
        &self.experts
    }

    /// Every expert parameter in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        self.experts.iter_mut().flat_map(|e| e.params_mut()).collect()
    }

    pub fn baseline(&self) -> &Embedder {
        &self.experts[0]
    }

    /// Center-patch embeddings of every image under every expert, laid out
    /// as one `[K, d]` block per image.
    pub fn features(&self, images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
        let (k, d) = (self.len(), self.embed_dim());
        let per_expert: Vec<Vec<Vec<f32>>> = self.experts.iter().map(|e| e.embed(images, patch)).collect::<Result<_>>()?;
        let mut out = vec![0.0; images.len() * k * d];
        for (l, embs) in per_expert.iter().enumerate() {
            for (i, e) in embs.iter().enumerate() {
                out[(i * k + l) * d..(i * k + l + 1) * d].copy_from_slice(e);
            }
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &Tape) -> Vec<Vec<Var>> {
        self.experts.iter().map(|e| e.bind(tape)).collect()
    }

    /// Token matrix `[B·K, d]` for an input `[B, 1, P, P]` on the tape.
    pub fn forward(&self, tape: &Tape, vars: &[Vec<Var>], x: Var) -> Result<Var> {
        let parts: Vec<Var> = self
            .experts
            .iter()
            .zip(vars)
            .map(|(e, v)| e.forward(tape, v, x))
            .collect::<Result<_>>()?;
        Ok(tape.stack_tokens(&parts)?)
    }
}

/// Trains `ekfn` on the buffer `M_k`: embeddings are computed once per image
/// with the frozen experts, then BCE is minimized for `cfg.steps` steps.
pub fn train_ekfn(
    ekfn: &FusionNetwork,
    ensemble: &ExpertEnsemble,
    buf: &MemoryBuffer,
    patch: usize,
    cfg: &EkfnTrainConfig,
) -> Result<FusionNetwork> {
    if ekfn.num_experts != ensemble.len() || ekfn.embed_dim != ensemble.embed_dim() {
        return Err(E3Error::Contract(format!(
            "fusion network expects {} experts of width {}, ensemble has {} of width {}",
            ekfn.num_experts,
            ekfn.embed_dim,
            ensemble.len(),
            ensemble.embed_dim()
        )));
    }
    let images = buf.images();
    if images.is_empty() {
        return Err(E3Error::Data("memory buffer is empty".into()));
    }
    let feats = ensemble.features(&images, patch)?;
    let targets: Vec<f32> = images.iter().map(|i| i.label.target()).collect();
    train_fusion(ekfn, &feats, &targets, cfg)
}

/// `ψ(φ_0(I), …, φ_k(I))` on center patches.
pub fn e3_predict(ensemble: &ExpertEnsemble, ekfn: &FusionNetwork, images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
    if ekfn.num_experts != ensemble.len() {
        return Err(E3Error::Contract(format!(
            "fusion network expects {} experts, ensemble has {}",
            ekfn.num_experts,
            ensemble.len()
        )));
    }
    ekfn.predict(&ensemble.features(images, patch)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_detector, CapacityPreset};
    use crate::e3::ekfn::{build_ekfn, EkfnArch};
    use crate::synthgen::{Label, REAL_SOURCE};

    fn img(v: f32, label: Label, index: u64) -> LabeledImage {
        LabeledImage {
            height: 16,
            width: 16,
            pixels: (0..256)
                .map(|i| (v + 0.03 * ((i * (index as usize + 3)) % 5) as f32).min(1.0))
                .collect(),
            label,
            source_id: if label.is_synthetic() { "g".into() } else { REAL_SOURCE.into() },
            index,
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            patch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_baseline_embedder() {
        let f0 = build_detector(CapacityPreset::Tiny, 8, 0).unwrap();
        let d = vec![img(0.5, Label::Synthetic, 0)];
        let r = vec![img(0.2, Label::Real, 1)];
        let e = train_expert(&f0, &d, &r, &cfg(0)).unwrap();
        for (a, b) in e.params().iter().zip(f0.embedder.params()) {
            assert_eq!(a.data(), b.data());
            assert!(!a.requires_grad());
        }
        assert!(matches!(train_expert(&f0, &[], &r, &cfg(1)), Err(E3Error::Data(_))));
        assert!(matches!(train_expert(&f0, &d, &[], &cfg(1)), Err(E3Error::Data(_))));
    }

    #[test]
    fn training_leaves_f0_untouched() {
        let f0 = build_detector(CapacityPreset::Tiny, 8, 0).unwrap();
        let before = f0.checksum();
        let d: Vec<_> = (0..4).map(|i| img(0.6, Label::Synthetic, i)).collect();
        let r: Vec<_> = (0..4).map(|i| img(0.2, Label::Real, i)).collect();
        let e = train_expert(&f0, &d, &r, &cfg(2)).unwrap();
        assert_eq!(f0.checksum(), before);
        assert_ne!(
            crate::detector::param_checksum(e.params()),
            crate::detector::param_checksum(f0.embedder.params())
        );
    }

    #[test]
    fn features_interleave_experts() {
        let a = build_detector(CapacityPreset::Tiny, 4, 1).unwrap().embedder;
        let b = build_detector(CapacityPreset::Tiny, 4, 2).unwrap().embedder;
        let mut ens = ExpertEnsemble::new(a.clone());
        ens.push(b.clone()).unwrap();
        let images: Vec<_> = (0..3).map(|i| img(0.3, Label::Real, i)).collect();
        let f = ens.features(&images, 16).unwrap();
        let (ea, eb) = (a.embed(&images, 16).unwrap(), b.embed(&images, 16).unwrap());
        for i in 0..3 {
            assert_eq!(&f[i * 8..i * 8 + 4], &ea[i][..]);
            assert_eq!(&f[i * 8 + 4..i * 8 + 8], &eb[i][..]);
        }
        let wrong = build_detector(CapacityPreset::Tiny, 6, 2).unwrap().embedder;
        assert!(ens.push(wrong).is_err());
    }

    #[test]
    fn ekfn_training_keeps_experts_frozen() {
        let f0 = build_detector(CapacityPreset::Tiny, 4, 1).unwrap();
        let ens = ExpertEnsemble::new(f0.embedder.clone());
        let before = ens.clone();
        let reals: Vec<_> = (0..4).map(|i| img(0.2, Label::Real, i)).collect();
        let syn: Vec<_> = (0..4).map(|i| img(0.6, Label::Synthetic, i)).collect();
        let buf = MemoryBuffer::initial(8, reals, &[&syn], 0).unwrap();
        let net = build_ekfn(1, 4, EkfnArch::default(), 0).unwrap();
        let c = EkfnTrainConfig {
            steps: 5,
            batch_size: 4,
            ..EkfnTrainConfig::default()
        };
        let trained = train_ekfn(&net, &ens, &buf, 16, &c).unwrap();
        assert_eq!(ens, before);
        assert_ne!(trained.checksum(), net.checksum());
        let two = build_ekfn(2, 4, EkfnArch::default(), 0).unwrap();
        assert!(matches!(train_ekfn(&two, &ens, &buf, 16, &c), Err(E3Error::Contract(_))));
        let s = e3_predict(&ens, &trained, &buf.images(), 16).unwrap();
        assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

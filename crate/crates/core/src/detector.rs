//! Baseline detector `f = h ∘ φ`: a compact CNN embedder followed by an
//! affine classifier head.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{E3Error, Result};
use crate::rng::stream;
use crate::synthgen::{patch_origin, LabeledImage, PatchMode};
use crate::tensor::{Adam, Tape, Tensor, Var};

/// Fixed residual filter applied before the trainable layers.
const HIGHPASS: [f32; 9] = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];
const HIGHPASS_GAIN: f32 = 2.0;
const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityPreset {
    Tiny,
    Small,
    Medium,
}

impl CapacityPreset {
    /// Output channels of the first two conv blocks; the third emits `embed_dim`.
    fn widths(self) -> [usize; 2] {
        match self {
            CapacityPreset::Tiny => [4, 8],
            CapacityPreset::Small => [8, 16],
            CapacityPreset::Medium => [16, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorArch {
    pub preset: CapacityPreset,
    pub embed_dim: usize,
    pub highpass: bool,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            preset: CapacityPreset::Small,
            embed_dim: 32,
            highpass: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Image → `embed_dim` vector: [high-pass] → 3 × (conv3×3, ReLU, avg-pool) → global average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub arch: DetectorArch,
    pub convs: Vec<ConvLayer>,
}

/// Affine map `d → 1` logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub embedder: Embedder,
    pub head: ClassifierHead,
}

fn normal_tensor(shape: &[usize], std: f32, seed: u64, label: &str, idx: u64) -> Tensor {
    let mut rng = stream(seed, label, idx);
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        .expect("init shape")
        .with_grad()
}

impl Embedder {
    pub fn new(arch: DetectorArch, seed: u64) -> Result<Self> {
        if arch.embed_dim < 4 {
            return Err(E3Error::config("detector.embed_dim", "must be ≥ 4"));
        }
        let [c1, c2] = arch.preset.widths();
        let chans = [1, c1, c2, arch.embed_dim];
        let convs = (0..3)
            .map(|i| {
                let (cin, cout) = (chans[i], chans[i + 1]);
                let std = (2.0 / (cin * 9) as f32).sqrt();
                ConvLayer {
                    weight: normal_tensor(&[cout, cin, 3, 3], std, seed, "detector/conv", i as u64),
                    bias: Tensor::zeros(&[cout]).with_grad(),
                }
            })
            .collect();
        Ok(Self { arch, convs })
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| [(format!("conv{i}.weight"), &c.weight), (format!("conv{i}.bias"), &c.bias)])
            .collect()
    }

    /// Drops gradient tracking on every parameter.
    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(false));
    }

    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p)).collect()
    }

    /// `x: [B, 1, P, P]` → `[B, embed_dim]`.
    pub fn forward(&self, tape: &Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        if self.arch.highpass {
            let k = tape.constant(&[1, 1, 3, 3], HIGHPASS.iter().map(|v| v * HIGHPASS_GAIN).collect())?;
            h = tape.conv2d(h, k, 1, 1)?;
        }
        for pair in vars.chunks_exact(2) {
            h = tape.conv2d(h, pair[0], 1, 1)?;
            h = tape.channel_bias(h, pair[1])?;
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        Ok(tape.global_avg_pool(h)?)
    }

    /// Embeddings of the center patches of `images`.
    pub fn embed(&self, images: &[LabeledImage], patch: usize) -> Result<Vec<Vec<f32>>> {
        let d = self.embed_dim();
        let chunks: Result<Vec<Vec<f32>>> = images
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let tape = Tape::new();
                let vars = self.bind(&tape);
                let x = tape.constant(&[chunk.len(), 1, patch, patch], center_batch(chunk, patch)?)?;
                let e = self.forward(&tape, &vars, x)?;
                Ok(tape.value(e))
            })
            .collect();
        Ok(chunks?
            .into_iter()
            .flat_map(|c| c.chunks_exact(d).map(<[f32]>::to_vec).collect::<Vec<_>>())
            .collect())
    }
}

impl ClassifierHead {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        Self {
            weight: normal_tensor(&[embed_dim, 1], (1.0 / embed_dim as f32).sqrt(), seed, "detector/head", 0),
            bias: Tensor::zeros(&[1]).with_grad(),
        }
    }

    pub fn bind(&self, tape: &Tape) -> [Var; 2] {
        [tape.leaf(&self.weight), tape.leaf(&self.bias)]
    }

    /// `[B, d]` → `[B, 1]` logits.
    pub fn forward(&self, tape: &Tape, vars: &[Var; 2], emb: Var) -> Result<Var> {
        let z = tape.matmul(emb, vars[0])?;
        Ok(tape.add_tiled(z, vars[1])?)
    }

    /// Logit for a single embedding, computed directly.
    pub fn logit(&self, emb: &[f32]) -> f32 {
        let w = self.weight.data();
        emb.iter().zip(w).map(|(a, b)| a * b).sum::<f32>() + self.bias.data()[0]
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Deterministic initialization; see [`DetectorModel::with_arch`] for the
/// high-pass switch.
pub fn build_detector(preset: CapacityPreset, embed_dim: usize, seed: u64) -> Result<DetectorModel> {
    DetectorModel::with_arch(
        DetectorArch {
            preset,
            embed_dim,
            ..DetectorArch::default()
        },
        seed,
    )
}

impl DetectorModel {
    pub fn with_arch(arch: DetectorArch, seed: u64) -> Result<Self> {
        Ok(Self {
            embedder: Embedder::new(arch, seed)?,
            head: ClassifierHead::new(arch.embed_dim, seed),
        })
    }

    pub fn arch(&self) -> DetectorArch {
        self.embedder.arch
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embedder.params();
        p.extend([&self.head.weight, &self.head.bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embedder.params_mut();
        p.extend([&mut self.head.weight, &mut self.head.bias]);
        p
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p: Vec<_> = self
            .embedder
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("embedder.{n}"), t))
            .collect();
        p.push(("head.weight".into(), &self.head.weight));
        p.push(("head.bias".into(), &self.head.bias));
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// SHA-256 over all parameter bytes, in parameter order.
    pub fn checksum(&self) -> String {
        param_checksum(self.params())
    }

    /// Logits `[B, 1]` for a `[B, 1, P, P]` input already on the tape.
    pub fn forward(&self, tape: &Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        let e = self.embedder.forward(tape, &vars.embedder, x)?;
        self.head.forward(tape, &vars.head, e)
    }

    pub fn bind(&self, tape: &Tape) -> ModelVars {
        ModelVars {
            embedder: self.embedder.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Raw logits on center patches.
    pub fn logits(&self, images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
        let chunks: Result<Vec<Vec<f32>>> = images
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let tape = Tape::new();
                let vars = self.bind(&tape);
                let x = tape.constant(&[chunk.len(), 1, patch, patch], center_batch(chunk, patch)?)?;
                let z = self.forward(&tape, &vars, x)?;
                Ok(tape.value(z))
            })
            .collect();
        Ok(chunks?.concat())
    }
}

pub struct ModelVars {
    pub embedder: Vec<Var>,
    pub head: [Var; 2],
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.embedder.clone();
        v.extend(self.head);
        v
    }
}

pub(crate) fn param_checksum(params: Vec<&Tensor>) -> String {
    let mut h = Sha256::new();
    for p in params {
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    crate::synthgen::hex(&h.finalize())
}

/// Stacks center patches into a `[B·P·P]` buffer.
pub(crate) fn center_batch(images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(images.len() * patch * patch);
    for img in images {
        if patch > img.height || patch > img.width {
            return Err(E3Error::Tensor(crate::tensor::TensorError::Dimension {
                op: "center_batch",
                msg: format!("patch {patch} exceeds image {}x{}", img.height, img.width),
            }));
        }
        let (oy, ox) = patch_origin(img.height, img.width, patch, PatchMode::Center);
        for y in oy..oy + patch {
            out.extend_from_slice(&img.pixels[y * img.width + ox..y * img.width + ox + patch]);
        }
    }
    Ok(out)
}

pub(crate) fn random_patch_into<R: Rng>(img: &LabeledImage, patch: usize, rng: &mut R, out: &mut Vec<f32>) {
    let oy = rng.random_range(0..=img.height - patch);
    let ox = rng.random_range(0..=img.width - patch);
    for y in oy..oy + patch {
        out.extend_from_slice(&img.pixels[y * img.width + ox..y * img.width + ox + patch]);
    }
}

/// `score = sigmoid(h(φ(center patch)))` for every image, order preserved.
pub fn predict_scores(model: &DetectorModel, images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
    Ok(model.logits(images, patch)?.into_iter().map(sigmoid).collect())
}

/// `φ` outputs on center patches.
pub fn embed(model: &DetectorModel, images: &[LabeledImage], patch: usize) -> Result<Vec<Vec<f32>>> {
    model.embedder.embed(images, patch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Synthetic term weighted by `|synthetic|/|T|`, real term by `|real|/|T|`.
    Proportional,
    /// The swapped weights (conventional class balancing).
    Inverse,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub factor: f32,
    pub every_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
    pub patch_size: usize,
    pub lr_decay: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5.0e-5,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            class_weighting: ClassWeighting::None,
            patch_size: 32,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(E3Error::config(format!("{key}.batch_size"), "must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(E3Error::config(format!("{key}.learning_rate"), "must be finite and ≥ 0"));
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || !(d.factor > 0.0) {
                return Err(E3Error::config(format!("{key}.lr_decay"), "needs factor > 0 and every_epochs ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }
}

/// Per-sample loss weights for `data` under the given scheme.
pub fn class_weights(data: &[LabeledImage], scheme: ClassWeighting) -> Vec<f32> {
    let n = data.len() as f32;
    let syn = data.iter().filter(|i| i.label.is_synthetic()).count() as f32;
    let real = n - syn;
    let (w_syn, w_real) = match scheme {
        ClassWeighting::Proportional => (syn / n, real / n),
        ClassWeighting::Inverse => (real / n, syn / n),
        ClassWeighting::None => (1.0, 1.0),
    };
    data.iter().map(|i| if i.label.is_synthetic() { w_syn } else { w_real }).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f32>,
}

/// Extra loss term added per batch: receives the tape, the logits var and the
/// batch input var, returns a scalar var to add (or `None`).
pub(crate) type ExtraLoss<'a> = dyn Fn(&Tape, Var, Var, &[usize]) -> Result<Option<Var>> + 'a;

pub(crate) fn check_two_classes(data: &[LabeledImage]) -> Result<()> {
    let syn = data.iter().filter(|i| i.label.is_synthetic()).count();
    if syn == 0 || syn == data.len() {
        return Err(E3Error::Data(format!(
            "training data needs both classes ({syn} synthetic of {})",
            data.len()
        )));
    }
    Ok(())
}

/// Minimizes (optionally class-weighted) binary cross-entropy with a fresh
/// random patch per image per epoch. The input model is not modified.
pub fn train_detector(model: &DetectorModel, data: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_detector_with(model, data, cfg, None)
}

pub(crate) fn train_detector_with(
    model: &DetectorModel,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    extra: Option<&ExtraLoss<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate("train")?;
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            epoch_losses: Vec::new(),
        });
    }
    check_two_classes(data)?;
    let patch = cfg.patch_size;
    let weights = class_weights(data, cfg.class_weighting);
    let mut opt = Adam::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.config.lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, "detector/shuffle", epoch as u64));
        let mut patch_rng = stream(cfg.seed, "detector/patch", epoch as u64);
        let mut total = 0.0f32;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(idx.len() * patch * patch);
            for &i in idx {
                random_patch_into(&data[i], patch, &mut patch_rng, &mut xs);
            }
            let targets: Vec<f32> = idx.iter().map(|&i| data[i].label.target()).collect();
            let w: Vec<f32> = idx.iter().map(|&i| weights[i]).collect();
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let x = tape.constant(&[idx.len(), 1, patch, patch], xs)?;
            let z = model.forward(&tape, &vars, x)?;
            let mut loss = tape.bce_with_logits(z, &targets, Some(&w))?;
            if let Some(f) = extra {
                if let Some(term) = f(&tape, z, x, idx)? {
                    loss = tape.add(loss, term)?;
                }
            }
            total += tape.value(loss)[0];
            batches += 1;
            let grads = tape.backward(loss)?;
            let all = vars.all();
            let mut params = model.params_mut();
            for (v, p) in all.iter().zip(params.iter_mut()) {
                grads.accumulate_into(*v, p)?;
            }
            opt.step(&mut params);
        }
        epoch_losses.push(total / batches as f32);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

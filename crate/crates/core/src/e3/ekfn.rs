//! Expert Knowledge Fusion Network: a pre-norm transformer encoder over the
//! sequence of expert embeddings, element-wise re-weighting of the inputs,
//! and a two-layer MLP head.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{param_checksum, sigmoid};
use crate::error::{E3Error, Result};
use crate::rng::stream;
use crate::tensor::{Adam, Tape, Tensor, Var};

const LN_EPS: f32 = 1e-5;
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Transformer weights `z`, tokens re-weighted `z ⊙ x`, concatenated, MLP.
    Full,
    /// Raw embeddings concatenated straight into the MLP.
    MlpOnly,
    /// Transformer outputs concatenated into the MLP without re-weighting.
    NoWeighting,
}

impl FusionVariant {
    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Full => "full",
            FusionVariant::MlpOnly => "mlp_only",
            FusionVariant::NoWeighting => "no_weighting",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfnArch {
    pub variant: FusionVariant,
    pub n_layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of the embedding width.
    pub ff_mult: usize,
    pub mlp_hidden: usize,
    /// Learned per-expert vectors added to the input tokens.
    pub identity_embeddings: bool,
}

impl Default for EkfnArch {
    fn default() -> Self {
        Self {
            variant: FusionVariant::Full,
            n_layers: 2,
            heads: 2,
            ff_mult: 2,
            mlp_hidden: 64,
            identity_embeddings: true,
        }
    }
}

impl EkfnArch {
    pub fn validate(&self, key: &str, d: usize) -> Result<()> {
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(E3Error::config(format!("{key}.heads"), format!("must divide embed_dim {d}")));
        }
        if self.ff_mult == 0 {
            return Err(E3Error::config(format!("{key}.ff_mult"), "must be ≥ 1"));
        }
        if self.mlp_hidden == 0 {
            return Err(E3Error::config(format!("{key}.mlp_hidden"), "must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfnTrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EkfnTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl EkfnTrainConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(E3Error::config(format!("{key}.batch_size"), "must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(E3Error::config(format!("{key}.learning_rate"), "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn new(fan_in: usize, fan_out: usize, seed: u64, label: &str, idx: u64) -> Self {
        let mut rng = stream(seed, label, idx);
        let dist = Normal::new(0.0, (1.0 / fan_in as f32).sqrt()).expect("finite std");
        let w = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        Self {
            weight: Tensor::new(&[fan_in, fan_out], w).expect("linear shape").with_grad(),
            bias: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    fn forward(tape: &Tape, w: Var, b: Var, x: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        Ok(tape.add_tiled(y, b)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: (Tensor, Tensor),
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: (Tensor, Tensor),
    pub ff1: Linear,
    pub ff2: Linear,
}

fn norm_pair(d: usize) -> (Tensor, Tensor) {
    (Tensor::full(&[d], 1.0).with_grad(), Tensor::zeros(&[d]).with_grad())
}

impl EncoderLayer {
    fn new(d: usize, ff: usize, seed: u64, layer: usize) -> Self {
        let l = layer as u64 * 8;
        Self {
            norm1: norm_pair(d),
            query: Linear::new(d, d, seed, "ekfn/attn", l),
            key: Linear::new(d, d, seed, "ekfn/attn", l + 1),
            value: Linear::new(d, d, seed, "ekfn/attn", l + 2),
            out: Linear::new(d, d, seed, "ekfn/attn", l + 3),
            norm2: norm_pair(d),
            ff1: Linear::new(d, ff, seed, "ekfn/ff", l),
            ff2: Linear::new(ff, d, seed, "ekfn/ff", l + 1),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm1.gamma", &self.norm1.0),
            ("norm1.beta", &self.norm1.1),
            ("query.weight", &self.query.weight),
            ("query.bias", &self.query.bias),
            ("key.weight", &self.key.weight),
            ("key.bias", &self.key.bias),
            ("value.weight", &self.value.weight),
            ("value.bias", &self.value.bias),
            ("out.weight", &self.out.weight),
            ("out.bias", &self.out.bias),
            ("norm2.gamma", &self.norm2.0),
            ("norm2.beta", &self.norm2.1),
            ("ff1.weight", &self.ff1.weight),
            ("ff1.bias", &self.ff1.bias),
            ("ff2.weight", &self.ff2.weight),
            ("ff2.bias", &self.ff2.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.norm1.0,
            &mut self.norm1.1,
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.out.weight,
            &mut self.out.bias,
            &mut self.norm2.0,
            &mut self.norm2.1,
            &mut self.ff1.weight,
            &mut self.ff1.bias,
            &mut self.ff2.weight,
            &mut self.ff2.bias,
        ]
    }

    /// `h + Attn(LN(h))`, then `h + FF(LN(h))`.
    fn forward(tape: &Tape, v: &[Var], h: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let a = tape.layer_norm(h, v[0], v[1], LN_EPS)?;
        let q = Linear::forward(tape, v[2], v[3], a)?;
        let k = Linear::forward(tape, v[4], v[5], a)?;
        let val = Linear::forward(tape, v[6], v[7], a)?;
        let att = tape.attention(q, k, val, seq_len, heads)?;
        let o = Linear::forward(tape, v[8], v[9], att)?;
        let h = tape.add(h, o)?;
        let f = tape.layer_norm(h, v[10], v[11], LN_EPS)?;
        let f = tape.relu(Linear::forward(tape, v[12], v[13], f)?);
        let f = Linear::forward(tape, v[14], v[15], f)?;
        Ok(tape.add(h, f)?)
    }
}

const LAYER_TENSORS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    /// `[num_experts, d]`, present when identity embeddings are enabled.
    pub identity: Option<Tensor>,
    pub layers: Vec<EncoderLayer>,
    /// Final normalization producing the weights `z`.
    pub norm: (Tensor, Tensor),
}

/// The fusion network `ψ` for a fixed number of experts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNetwork {
    pub arch: EkfnArch,
    pub num_experts: usize,
    pub embed_dim: usize,
    pub transformer: Option<Transformer>,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

/// Randomly initialized fusion network for `num_experts` tokens of width `d`.
pub fn build_ekfn(num_experts: usize, d: usize, arch: EkfnArch, seed: u64) -> Result<FusionNetwork> {
    if num_experts == 0 {
        return Err(E3Error::Contract("fusion network needs at least one expert".into()));
    }
    if d == 0 {
        return Err(E3Error::config("detector.embed_dim", "must be ≥ 1"));
    }
    arch.validate("ekfn", d)?;
    let transformer = (arch.variant != FusionVariant::MlpOnly).then(|| {
        let identity = arch.identity_embeddings.then(|| {
            let mut rng = stream(seed, "ekfn/identity", 0);
            let dist = Normal::new(0.0, 0.02).expect("finite std");
            Tensor::new(&[num_experts, d], (0..num_experts * d).map(|_| dist.sample(&mut rng)).collect())
                .expect("identity shape")
                .with_grad()
        });
        Transformer {
            identity,
            layers: (0..arch.n_layers)
                .map(|l| EncoderLayer::new(d, arch.ff_mult * d, seed, l))
                .collect(),
            norm: norm_pair(d),
        }
    });
    Ok(FusionNetwork {
        arch,
        num_experts,
        embed_dim: d,
        transformer,
        mlp1: Linear::new(num_experts * d, arch.mlp_hidden, seed, "ekfn/mlp", 0),
        mlp2: Linear::new(arch.mlp_hidden, 1, seed, "ekfn/mlp", 1),
    })
}

impl FusionNetwork {
    pub fn variant(&self) -> FusionVariant {
        self.arch.variant
    }

    /// Input width of the MLP head: `num_experts · d`.
    pub fn mlp_input_width(&self) -> usize {
        self.mlp1.weight.shape()[0]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.transformer {
            if let Some(id) = &t.identity {
                out.push(("identity".to_string(), id));
            }
            for (i, layer) in t.layers.iter().enumerate() {
                out.extend(layer.tensors().into_iter().map(|(n, p)| (format!("layer{i}.{n}"), p)));
            }
            out.push(("norm.gamma".into(), &t.norm.0));
            out.push(("norm.beta".into(), &t.norm.1));
        }
        out.push(("mlp1.weight".into(), &self.mlp1.weight));
        out.push(("mlp1.bias".into(), &self.mlp1.bias));
        out.push(("mlp2.weight".into(), &self.mlp2.weight));
        out.push(("mlp2.bias".into(), &self.mlp2.bias));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.transformer {
            if let Some(id) = &mut t.identity {
                out.push(id);
            }
            for layer in &mut t.layers {
                out.extend(layer.tensors_mut());
            }
            out.push(&mut t.norm.0);
            out.push(&mut t.norm.1);
        }
        out.extend([
            &mut self.mlp1.weight,
            &mut self.mlp1.bias,
            &mut self.mlp2.weight,
            &mut self.mlp2.bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn checksum(&self) -> String {
        param_checksum(self.params())
    }

    /// Sets the final normalization to `γ = 0, β = 1`, so every weight vector
    /// `z_ℓ` is all ones regardless of the input.
    pub fn force_unit_weights(&mut self) {
        if let Some(t) = &mut self.transformer {
            t.norm.0.data_mut().fill(0.0);
            t.norm.1.data_mut().fill(1.0);
        }
    }

    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p)).collect()
    }

    /// Per-token weights `z` for `tokens: [B·K, d]`; `None` for the MLP-only variant.
    pub fn weights(&self, tape: &Tape, vars: &[Var], tokens: Var) -> Result<Option<Var>> {
        let Some(t) = &self.transformer else {
            return Ok(None);
        };
        let mut cursor = 0;
        let mut h = tokens;
        if t.identity.is_some() {
            h = tape.add_tiled(h, vars[0])?;
            cursor = 1;
        }
        for _ in &t.layers {
            h = EncoderLayer::forward(tape, &vars[cursor..cursor + LAYER_TENSORS], h, self.num_experts, self.arch.heads)?;
            cursor += LAYER_TENSORS;
        }
        Ok(Some(tape.layer_norm(h, vars[cursor], vars[cursor + 1], LN_EPS)?))
    }

    /// Logits `[B, 1]` for `tokens: [B·K, d]` (row `b·K + ℓ` is expert `ℓ`'s embedding of image `b`).
    pub fn forward(&self, tape: &Tape, vars: &[Var], tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens);
        let k = self.num_experts;
        if shape.len() != 2 || shape[1] != self.embed_dim || !shape[0].is_multiple_of(k) {
            return Err(E3Error::Contract(format!(
                "fusion network expects [B·{k}, {}] tokens, got {shape:?}",
                self.embed_dim
            )));
        }
        let batch = shape[0] / k;
        let z = self.weights(tape, vars, tokens)?;
        let u = match (self.arch.variant, z) {
            (FusionVariant::Full, Some(z)) => tape.hadamard(z, tokens)?,
            (FusionVariant::NoWeighting, Some(z)) => z,
            _ => tokens,
        };
        let flat = tape.reshape(u, &[batch, k * self.embed_dim])?;
        let m = vars.len() - 4;
        let hdn = tape.relu(Linear::forward(tape, vars[m], vars[m + 1], flat)?);
        Linear::forward(tape, vars[m + 2], vars[m + 3], hdn)
    }

    /// Logits for precomputed features laid out as `n` consecutive `[K, d]` blocks.
    pub fn logits(&self, features: &[f32]) -> Result<Vec<f32>> {
        let width = self.num_experts * self.embed_dim;
        if !features.len().is_multiple_of(width) {
            return Err(E3Error::Contract(format!(
                "feature buffer of length {} is not a multiple of {width}",
                features.len()
            )));
        }
        let chunks: Result<Vec<Vec<f32>>> = features
            .par_chunks(INFER_CHUNK * width)
            .map(|chunk| {
                let tape = Tape::new();
                let vars = self.bind(&tape);
                let x = tape.constant(&[chunk.len() / self.embed_dim, self.embed_dim], chunk.to_vec())?;
                let z = self.forward(&tape, &vars, x)?;
                Ok(tape.value(z))
            })
            .collect();
        Ok(chunks?.concat())
    }

    pub fn predict(&self, features: &[f32]) -> Result<Vec<f32>> {
        Ok(self.logits(features)?.into_iter().map(sigmoid).collect())
    }
}

/// Minimizes unweighted BCE over precomputed features with ADAM for
/// `cfg.steps` mini-batch steps, reshuffling the samples each pass.
pub fn train_fusion(net: &FusionNetwork, features: &[f32], targets: &[f32], cfg: &EkfnTrainConfig) -> Result<FusionNetwork> {
    cfg.validate("ekfn_train")?;
    let width = net.num_experts * net.embed_dim;
    if features.len() != targets.len() * width {
        return Err(E3Error::Contract(format!(
            "{} targets need {} feature values, got {}",
            targets.len(),
            targets.len() * width,
            features.len()
        )));
    }
    let mut net = net.clone();
    if cfg.steps == 0 {
        return Ok(net);
    }
    if targets.is_empty() {
        return Err(E3Error::Data("fusion training set is empty".into()));
    }
    let mut opt = Adam::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut pass = 0u64;
    let mut pos = order.len();
    for _ in 0..cfg.steps {
        if pos >= order.len() {
            order.sort_unstable();
            order.shuffle(&mut stream(cfg.seed, "ekfn/shuffle", pass));
            pass += 1;
            pos = 0;
        }
        let idx = &order[pos..(pos + cfg.batch_size).min(order.len())];
        pos += idx.len();
        let mut xs = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            xs.extend_from_slice(&features[i * width..(i + 1) * width]);
        }
        let t: Vec<f32> = idx.iter().map(|&i| targets[i]).collect();
        let tape = Tape::new();
        let vars = net.bind(&tape);
        let x = tape.constant(&[idx.len() * net.num_experts, net.embed_dim], xs)?;
        let z = net.forward(&tape, &vars, x)?;
        let loss = tape.bce_with_logits(z, &t, None)?;
        let grads = tape.backward(loss)?;
        let mut params = net.params_mut();
        for (v, p) in vars.iter().zip(params.iter_mut()) {
            grads.accumulate_into(*v, p)?;
        }
        opt.step(&mut params);
    }
    Ok(net)
}

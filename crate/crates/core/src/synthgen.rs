//! Procedural "real" images and simulated generators that stamp forensic
//! traces on top of them.
//!
//! Real images are 1/f^α Gaussian fields with a few soft blobs. Each
//! simulated generator renders its own content the same way and then adds a
//! family-specific trace (upsampling checkerboard, spectral peak, block
//! quantization, fixed sensor-like pattern, or shaped high-pass noise).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{E3Error, Result};
use crate::rng::{stream, stream_seed};

pub const REAL_SOURCE: &str = "real";
pub const CORPUS_FORMAT_VERSION: u32 = 1;
const MIN_IMAGE_SIZE: usize = 16;
const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Synthetic,
}

impl Label {
    pub fn target(self) -> f32 {
        match self {
            Label::Real => 0.0,
            Label::Synthetic => 1.0,
        }
    }

    pub fn is_synthetic(self) -> bool {
        self == Label::Synthetic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub label: Label,
    pub source_id: String,
    pub index: u64,
}

/// Trace family plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceFamily {
    /// `a·(−1)^(⌊x/p⌋+⌊y/p⌋)`.
    Checkerboard { period: usize, amplitude: f32 },
    /// `a·sin(2π(fx·x + fy·y) + φ₀)` with a per-image phase.
    SpectralPeak { fx: f32, fy: f32, amplitude: f32 },
    /// Rounds every 8×8 block mean to a multiple of `step`.
    BlockQuant { step: f32 },
    /// A `period×period` tile fixed by the fingerprint seed, repeated.
    FixedPattern { period: usize, amplitude: f32 },
    /// Laplacian-filtered white noise with standard deviation `amplitude`.
    NoiseShaping { amplitude: f32 },
}

impl TraceFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TraceFamily::Checkerboard { .. } => "checkerboard",
            TraceFamily::SpectralPeak { .. } => "spectral_peak",
            TraceFamily::BlockQuant { .. } => "block_quant",
            TraceFamily::FixedPattern { .. } => "fixed_pattern",
            TraceFamily::NoiseShaping { .. } => "noise_shaping",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub id: String,
    pub trace: TraceFamily,
    #[serde(default)]
    pub fingerprint_seed: u64,
}

impl GeneratorSpec {
    pub fn new(id: &str, trace: TraceFamily, fingerprint_seed: u64) -> Self {
        Self {
            id: id.to_string(),
            trace,
            fingerprint_seed,
        }
    }

    /// Checks parameter ranges; `key` prefixes error locations.
    pub fn validate(&self, key: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(E3Error::config(format!("{key}.{field}"), msg));
        if self.id.is_empty() || self.id == REAL_SOURCE || self.id == crate::BASELINE_SOURCE {
            return bad("id", "must be non-empty and not a reserved source name");
        }
        if !self.id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) {
            return bad("id", "may only contain ASCII letters, digits, `_`, `-` and `.`");
        }
        match self.trace {
            TraceFamily::Checkerboard { period, amplitude } => {
                if period == 0 {
                    return bad("trace.period", "must be ≥ 1");
                }
                if !(amplitude > 0.0) {
                    return bad("trace.amplitude", "must be > 0");
                }
            }
            TraceFamily::SpectralPeak { fx, fy, amplitude } => {
                if !(amplitude > 0.0) {
                    return bad("trace.amplitude", "must be > 0");
                }
                if !fx.is_finite() || !fy.is_finite() {
                    return bad("trace.fx", "frequencies must be finite");
                }
            }
            TraceFamily::BlockQuant { step } => {
                if !(step > 0.0) {
                    return bad("trace.step", "must be > 0");
                }
            }
            TraceFamily::FixedPattern { period, amplitude } => {
                if period < 2 {
                    return bad("trace.period", "must be ≥ 2");
                }
                if !(amplitude > 0.0) {
                    return bad("trace.amplitude", "must be > 0");
                }
            }
            TraceFamily::NoiseShaping { amplitude } => {
                if !(amplitude > 0.0) {
                    return bad("trace.amplitude", "must be > 0");
                }
            }
        }
        Ok(())
    }
}

fn fft2(buf: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
}

/// Deterministic "real" image for `(seed, index)`.
pub fn generate_real(seed: u64, index: u64, size: usize) -> Result<LabeledImage> {
    if size < MIN_IMAGE_SIZE {
        return Err(E3Error::config("image_size", format!("must be ≥ {MIN_IMAGE_SIZE}, got {size}")));
    }
    let mut rng = stream(seed, "real", index);
    let alpha: f64 = rng.random_range(0.8..1.4);
    let n = size;
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    fft2(&mut buf, n, false);
    for v in 0..n {
        let fv = v.min(n - v) as f64 / n as f64;
        for u in 0..n {
            let fu = u.min(n - u) as f64 / n as f64;
            let f = (fu * fu + fv * fv).sqrt();
            buf[v * n + u] *= if f == 0.0 { 0.0 } else { f.powf(-alpha) };
        }
    }
    fft2(&mut buf, n, true);
    let mut field: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64)
        .sqrt()
        .max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);

    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        let cx: f64 = rng.random_range(0.0..n as f64);
        let cy: f64 = rng.random_range(0.0..n as f64);
        let sigma: f64 = rng.random_range(n as f64 / 10.0..n as f64 / 4.0);
        let amp: f64 = rng.random_range(-1.5..1.5);
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                field[y * n + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let pixels = field.iter().map(|v| (0.1 + 0.8 * (v - lo) / span) as f32).collect();
    Ok(LabeledImage {
        height: n,
        width: n,
        pixels,
        label: Label::Real,
        source_id: REAL_SOURCE.to_string(),
        index,
    })
}

/// Additive trace of `spec` for an image of the given size, before clipping.
/// Block quantization depends on the base pixels, so they are passed in.
fn trace_delta(base: &LabeledImage, spec: &GeneratorSpec, noise_seed: u64) -> Vec<f32> {
    let (h, w) = (base.height, base.width);
    let mut delta = vec![0.0f32; h * w];
    match spec.trace {
        TraceFamily::Checkerboard { period, amplitude } => {
            let p = period.max(1);
            for y in 0..h {
                for x in 0..w {
                    let s = if (x / p + y / p) % 2 == 0 { 1.0 } else { -1.0 };
                    delta[y * w + x] = amplitude * s;
                }
            }
        }
        TraceFamily::SpectralPeak { fx, fy, amplitude } => {
            let phase: f64 = stream(noise_seed, "phase", 0).random_range(0.0..2.0 * PI);
            for y in 0..h {
                for x in 0..w {
                    let arg = 2.0 * PI * (f64::from(fx) * x as f64 + f64::from(fy) * y as f64) + phase;
                    delta[y * w + x] = amplitude * arg.sin() as f32;
                }
            }
        }
        TraceFamily::BlockQuant { step } => {
            if step > 0.0 {
                for by in (0..h).step_by(BLOCK) {
                    for bx in (0..w).step_by(BLOCK) {
                        let (ye, xe) = ((by + BLOCK).min(h), (bx + BLOCK).min(w));
                        let mut sum = 0.0f64;
                        for y in by..ye {
                            for x in bx..xe {
                                sum += f64::from(base.pixels[y * w + x]);
                            }
                        }
                        let mean = sum / ((ye - by) * (xe - bx)) as f64;
                        let target = (mean / f64::from(step)).round() * f64::from(step);
                        let shift = (target - mean) as f32;
                        for y in by..ye {
                            for x in bx..xe {
                                delta[y * w + x] = shift;
                            }
                        }
                    }
                }
            }
        }
        TraceFamily::FixedPattern { period, amplitude } => {
            let tile = fixed_tile(spec.fingerprint_seed, period.max(2));
            let p = period.max(2);
            for y in 0..h {
                for x in 0..w {
                    delta[y * w + x] = amplitude * tile[(y % p) * p + x % p];
                }
            }
        }
        TraceFamily::NoiseShaping { amplitude } => {
            let mut rng = stream(noise_seed, "shaping", 0);
            let noise: Vec<f32> = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm = 1.0 / 20f32.sqrt();
            for y in 0..h {
                for x in 0..w {
                    let at = |yy: usize, xx: usize| noise[(yy % h) * w + xx % w];
                    let hp = 4.0 * at(y, x) - at(y + h - 1, x) - at(y + 1, x) - at(y, x + w - 1) - at(y, x + 1);
                    delta[y * w + x] = amplitude * hp * norm;
                }
            }
        }
    }
    delta
}

/// Zero-mean, unit-variance tile derived only from the fingerprint seed.
fn fixed_tile(fingerprint_seed: u64, period: usize) -> Vec<f32> {
    let mut rng = stream(fingerprint_seed, "fixed_pattern", period as u64);
    let mut tile: Vec<f32> = (0..period * period).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let mean = tile.iter().sum::<f32>() / tile.len() as f32;
    let std = (tile.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / tile.len() as f32)
        .sqrt()
        .max(1e-6);
    tile.iter_mut().for_each(|v| *v = (*v - mean) / std);
    tile
}

/// Stamps the trace of `spec` onto a real image.
pub fn apply_trace(base: &LabeledImage, spec: &GeneratorSpec, noise_seed: u64) -> Result<LabeledImage> {
    if base.label != Label::Real {
        return Err(E3Error::Contract(format!(
            "apply_trace expects a real base image, got one from `{}`",
            base.source_id
        )));
    }
    let delta = trace_delta(base, spec, noise_seed);
    let pixels = base.pixels.iter().zip(&delta).map(|(p, d)| (p + d).clamp(0.0, 1.0)).collect();
    Ok(LabeledImage {
        height: base.height,
        width: base.width,
        pixels,
        label: Label::Synthetic,
        source_id: spec.id.clone(),
        index: base.index,
    })
}

/// Synthetic image `index` of generator `spec` under `master_seed`.
pub fn generate_synthetic(master_seed: u64, spec: &GeneratorSpec, index: u64, size: usize) -> Result<LabeledImage> {
    let content_seed = stream_seed(master_seed, &format!("content/{}", spec.id), 0);
    let base = generate_real(content_seed, index, size)?;
    let noise_seed = stream_seed(master_seed, &format!("trace/{}", spec.id), index);
    apply_trace(&base, spec, noise_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    Center,
    Random(u64),
}

/// Square sub-window of side `size`.
pub fn extract_patch(img: &LabeledImage, size: usize, mode: PatchMode) -> Result<LabeledImage> {
    if size == 0 || size > img.height || size > img.width {
        return Err(E3Error::Tensor(crate::tensor::TensorError::Dimension {
            op: "extract_patch",
            msg: format!("patch {size} does not fit image {}x{}", img.height, img.width),
        }));
    }
    let (oy, ox) = patch_origin(img.height, img.width, size, mode);
    let mut pixels = Vec::with_capacity(size * size);
    for y in oy..oy + size {
        pixels.extend_from_slice(&img.pixels[y * img.width + ox..y * img.width + ox + size]);
    }
    Ok(LabeledImage {
        height: size,
        width: size,
        pixels,
        label: img.label,
        source_id: img.source_id.clone(),
        index: img.index,
    })
}

/// Top-left corner `(row, col)` of the patch window.
pub fn patch_origin(height: usize, width: usize, size: usize, mode: PatchMode) -> (usize, usize) {
    match mode {
        PatchMode::Center => ((height - size) / 2, (width - size) / 2),
        PatchMode::Random(seed) => {
            let mut rng = stream(seed, "patch", 0);
            (rng.random_range(0..=height - size), rng.random_range(0..=width - size))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Counts for the real source.
    pub real: SplitCounts,
    /// Totals for the baseline group, split equally across its generators.
    pub baseline: SplitCounts,
    /// Counts for every emerging generator.
    pub emerging: SplitCounts,
    pub baseline_generators: Vec<GeneratorSpec>,
    pub emerging_generators: Vec<GeneratorSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch_size: 32,
            real: SplitCounts {
                train: 400,
                val: 0,
                test: 100,
            },
            baseline: SplitCounts {
                train: 300,
                val: 0,
                test: 99,
            },
            emerging: SplitCounts {
                train: 200,
                val: 0,
                test: 100,
            },
            baseline_generators: default_baseline_roster(),
            emerging_generators: default_emerging_roster(),
        }
    }
}

/// The three trace specs the baseline detector is trained on.
pub fn default_baseline_roster() -> Vec<GeneratorSpec> {
    vec![
        GeneratorSpec::new(
            "b_checker",
            TraceFamily::Checkerboard {
                period: 1,
                amplitude: 0.06,
            },
            11,
        ),
        GeneratorSpec::new(
            "b_peak",
            TraceFamily::SpectralPeak {
                fx: 0.25,
                fy: 0.0,
                amplitude: 0.06,
            },
            12,
        ),
        GeneratorSpec::new("b_quant", TraceFamily::BlockQuant { step: 0.3 }, 13),
    ]
}

/// Held-out generators that emerge after the baseline is deployed.
pub fn default_emerging_roster() -> Vec<GeneratorSpec> {
    vec![
        GeneratorSpec::new(
            "g_pattern",
            TraceFamily::FixedPattern {
                period: 4,
                amplitude: 0.06,
            },
            101,
        ),
        GeneratorSpec::new("g_shaping", TraceFamily::NoiseShaping { amplitude: 0.025 }, 102),
        GeneratorSpec::new(
            "g_peak_diag",
            TraceFamily::SpectralPeak {
                fx: 0.125,
                fy: 0.375,
                amplitude: 0.06,
            },
            103,
        ),
        GeneratorSpec::new(
            "g_checker4",
            TraceFamily::Checkerboard {
                period: 4,
                amplitude: 0.06,
            },
            104,
        ),
        GeneratorSpec::new(
            "g_pattern5",
            TraceFamily::FixedPattern {
                period: 5,
                amplitude: 0.06,
            },
            105,
        ),
    ]
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(E3Error::config("corpus.image_size", format!("must be ≥ {MIN_IMAGE_SIZE}")));
        }
        if self.patch_size == 0 || self.patch_size > self.image_size || !self.patch_size.is_multiple_of(8) {
            return Err(E3Error::config(
                "corpus.patch_size",
                "must be a positive multiple of 8 no larger than image_size",
            ));
        }
        if self.baseline_generators.is_empty() {
            return Err(E3Error::config("corpus.baseline_generators", "must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for (group, specs) in [
            ("baseline_generators", &self.baseline_generators),
            ("emerging_generators", &self.emerging_generators),
        ] {
            for (i, spec) in specs.iter().enumerate() {
                let key = format!("corpus.{group}[{i}]");
                spec.validate(&key)?;
                if !seen.insert(spec.id.clone()) {
                    return Err(E3Error::config(
                        format!("{key}.id"),
                        format!("duplicate generator id `{}`", spec.id),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-spec counts for the baseline group (remainders go to the first specs).
    pub fn baseline_counts(&self, slot: usize) -> SplitCounts {
        let n = self.baseline_generators.len();
        let share = |total: usize| total / n + usize::from(slot < total % n);
        SplitCounts {
            train: share(self.baseline.train),
            val: share(self.baseline.val),
            test: share(self.baseline.test),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourcePools {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl SourcePools {
    pub fn get(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<LabeledImage> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub label: Label,
    pub role: String,
    pub family: Option<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub image_size: usize,
    pub sources: Vec<SourceEntry>,
    /// Storage order of each split file: `(source_id, label, index)` per record.
    pub layout: BTreeMap<String, Vec<(String, Label, u64)>>,
    /// SHA-256 of each split file's payload.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub master_seed: u64,
    pub image_size: usize,
    pub baseline_ids: Vec<String>,
    pub emerging_ids: Vec<String>,
    pools: BTreeMap<String, SourcePools>,
    manifest: CorpusManifest,
}

fn render_pool(master_seed: u64, spec: Option<&GeneratorSpec>, counts: SplitCounts, size: usize) -> Result<SourcePools> {
    let mut pools = SourcePools::default();
    let mut offset = 0u64;
    for split in Split::ALL {
        let n = counts.get(split) as u64;
        let images: Result<Vec<_>> = (offset..offset + n)
            .into_par_iter()
            .map(|i| match spec {
                None => generate_real(stream_seed(master_seed, REAL_SOURCE, 0), i, size),
                Some(s) => generate_synthetic(master_seed, s, i, size),
            })
            .collect();
        *pools.get_mut(split) = images?;
        offset += n;
    }
    Ok(pools)
}

fn split_bytes(images: &[&LabeledImage]) -> Vec<u8> {
    images
        .iter()
        .flat_map(|img| img.pixels.iter().flat_map(|p| p.to_le_bytes()))
        .collect()
}

/// Builds the corpus deterministically from `(config, master_seed)`.
pub fn build_corpus(config: &CorpusConfig, master_seed: u64) -> Result<Corpus> {
    config.validate()?;
    let size = config.image_size;
    let mut pools = BTreeMap::new();
    let mut sources = Vec::new();
    pools.insert(REAL_SOURCE.to_string(), render_pool(master_seed, None, config.real, size)?);
    sources.push(SourceEntry {
        id: REAL_SOURCE.into(),
        label: Label::Real,
        role: "real".into(),
        family: None,
        train: config.real.train,
        val: config.real.val,
        test: config.real.test,
    });
    for (slot, spec) in config.baseline_generators.iter().enumerate() {
        let counts = config.baseline_counts(slot);
        pools.insert(spec.id.clone(), render_pool(master_seed, Some(spec), counts, size)?);
        sources.push(SourceEntry {
            id: spec.id.clone(),
            label: Label::Synthetic,
            role: "baseline".into(),
            family: Some(spec.trace.name().into()),
            train: counts.train,
            val: counts.val,
            test: counts.test,
        });
    }
    for spec in &config.emerging_generators {
        pools.insert(spec.id.clone(), render_pool(master_seed, Some(spec), config.emerging, size)?);
        sources.push(SourceEntry {
            id: spec.id.clone(),
            label: Label::Synthetic,
            role: "emerging".into(),
            family: Some(spec.trace.name().into()),
            train: config.emerging.train,
            val: config.emerging.val,
            test: config.emerging.test,
        });
    }
    let mut corpus = Corpus {
        master_seed,
        image_size: size,
        baseline_ids: config.baseline_generators.iter().map(|s| s.id.clone()).collect(),
        emerging_ids: config.emerging_generators.iter().map(|s| s.id.clone()).collect(),
        pools,
        manifest: CorpusManifest {
            format_version: CORPUS_FORMAT_VERSION,
            master_seed,
            image_size: size,
            sources,
            layout: BTreeMap::new(),
            checksums: BTreeMap::new(),
        },
    };
    corpus.refresh_layout();
    Ok(corpus)
}

/// Samples of `source_id` in `split`, exactly as declared in the manifest.
pub fn split_corpus<'a>(corpus: &'a Corpus, source_id: &str, split: Split) -> Result<&'a [LabeledImage]> {
    corpus
        .pools
        .get(source_id)
        .map(|p| p.get(split))
        .ok_or_else(|| E3Error::Lookup(source_id.to_string()))
}

impl Corpus {
    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.sources.iter().map(|s| s.id.as_str())
    }

    pub fn split(&self, source_id: &str, split: Split) -> Result<&[LabeledImage]> {
        split_corpus(self, source_id, split)
    }

    /// Images of all baseline generators in `split`, interleaved round-robin.
    pub fn baseline_split(&self, split: Split) -> Result<Vec<LabeledImage>> {
        let pools: Vec<&[LabeledImage]> = self.baseline_ids.iter().map(|id| self.split(id, split)).collect::<Result<_>>()?;
        let longest = pools.iter().map(|p| p.len()).max().unwrap_or(0);
        let mut out = Vec::new();
        for i in 0..longest {
            for pool in &pools {
                if let Some(img) = pool.get(i) {
                    out.push(img.clone());
                }
            }
        }
        Ok(out)
    }

    fn ordered(&self, split: Split) -> Vec<&LabeledImage> {
        self.manifest
            .sources
            .iter()
            .flat_map(|s| self.pools[&s.id].get(split).iter())
            .collect()
    }

    fn refresh_layout(&mut self) {
        let mut layout = BTreeMap::new();
        let mut checksums = BTreeMap::new();
        for split in Split::ALL {
            let imgs = self.ordered(split);
            layout.insert(
                split.name().to_string(),
                imgs.iter().map(|i| (i.source_id.clone(), i.label, i.index)).collect(),
            );
            checksums.insert(split.name().to_string(), hex(&Sha256::digest(split_bytes(&imgs))));
        }
        self.manifest.layout = layout;
        self.manifest.checksums = checksums;
    }

    /// Combined SHA-256 over every split's pixels.
    pub fn pixel_checksum(&self) -> String {
        let mut h = Sha256::new();
        for split in Split::ALL {
            h.update(self.manifest.checksums[split.name()].as_bytes());
        }
        hex(&h.finalize())
    }

    /// Writes `manifest.json` plus `<split>.f32` files holding
    /// `[count × H × W]` little-endian f32 pixels in manifest layout order.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let mut f = fs::File::create(dir.join(format!("{}.f32", split.name())))?;
            f.write_all(&split_bytes(&self.ordered(split)))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| E3Error::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Reads a corpus written by [`Corpus::export`].
    pub fn import(dir: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| E3Error::Format(format!("manifest.json: {e}")))?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(E3Error::Format(format!(
                "corpus format {} unsupported (expected {CORPUS_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let size = manifest.image_size;
        let mut pools: BTreeMap<String, SourcePools> = manifest.sources.iter().map(|s| (s.id.clone(), SourcePools::default())).collect();
        for split in Split::ALL {
            let bytes = fs::read(dir.join(format!("{}.f32", split.name())))?;
            let records = manifest.layout.get(split.name()).cloned().unwrap_or_default();
            let want = records.len() * size * size * 4;
            if bytes.len() != want {
                return Err(E3Error::Format(format!(
                    "{}.f32 holds {} bytes, manifest implies {want}",
                    split.name(),
                    bytes.len()
                )));
            }
            if manifest.checksums.get(split.name()) != Some(&hex(&Sha256::digest(&bytes))) {
                return Err(E3Error::Format(format!("{}.f32 checksum mismatch", split.name())));
            }
            for (r, (source_id, label, index)) in records.into_iter().enumerate() {
                let chunk = &bytes[r * size * size * 4..(r + 1) * size * size * 4];
                let pixels = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let pool = pools
                    .get_mut(&source_id)
                    .ok_or_else(|| E3Error::Format(format!("layout names unknown source `{source_id}`")))?;
                pool.get_mut(split).push(LabeledImage {
                    height: size,
                    width: size,
                    pixels,
                    label,
                    source_id,
                    index,
                });
            }
        }
        let role = |r: &str| -> Vec<String> { manifest.sources.iter().filter(|s| s.role == r).map(|s| s.id.clone()).collect() };
        Ok(Corpus {
            master_seed: manifest.master_seed,
            image_size: size,
            baseline_ids: role("baseline"),
            emerging_ids: role("emerging"),
            pools,
            manifest,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32, n: usize) -> LabeledImage {
        LabeledImage {
            height: n,
            width: n,
            pixels: vec![v; n * n],
            label: Label::Real,
            source_id: REAL_SOURCE.into(),
            index: 0,
        }
    }

    #[test]
    fn real_images_are_deterministic_and_in_range() {
        let a = generate_real(9, 3, 48).unwrap();
        let b = generate_real(9, 3, 48).unwrap();
        assert_eq!(a, b);
        for i in 0..1000 {
            let img = generate_real(17, i, 16).unwrap();
            assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(generate_real(1, 0, 15).unwrap_err().is_config());
    }

    #[test]
    fn neighbouring_indices_differ() {
        for seed in 0..100 {
            let a = generate_real(seed, 0, 32).unwrap();
            let b = generate_real(seed, 1, 32).unwrap();
            let differ = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| x != y).count();
            assert!(differ * 100 >= a.pixels.len(), "seed {seed}: only {differ} pixels differ");
        }
    }

    #[test]
    fn zero_amplitude_stamp_is_identity() {
        let base = generate_real(4, 0, 32).unwrap();
        let specs = [
            TraceFamily::Checkerboard { period: 1, amplitude: 0.0 },
            TraceFamily::SpectralPeak {
                fx: 0.2,
                fy: 0.1,
                amplitude: 0.0,
            },
            TraceFamily::FixedPattern { period: 4, amplitude: 0.0 },
            TraceFamily::NoiseShaping { amplitude: 0.0 },
            TraceFamily::BlockQuant { step: 0.0 },
        ];
        for trace in specs {
            let out = apply_trace(&base, &GeneratorSpec::new("g", trace, 1), 5).unwrap();
            assert_eq!(out.pixels, base.pixels);
            assert_eq!(out.label, Label::Synthetic);
            assert_eq!(out.source_id, "g");
        }
    }

    #[test]
    fn checkerboard_closed_form() {
        let spec = GeneratorSpec::new("c", TraceFamily::Checkerboard { period: 1, amplitude: 0.1 }, 0);
        let out = apply_trace(&flat(0.5, 8), &spec, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if (x + y) % 2 == 0 { 0.6 } else { 0.4 };
                assert!((out.pixels[y * 8 + x] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fixed_pattern_ignores_base_and_noise_seed() {
        let spec = GeneratorSpec::new(
            "f",
            TraceFamily::FixedPattern {
                period: 4,
                amplitude: 0.05,
            },
            77,
        );
        let a = flat(0.5, 16);
        let b = flat(0.3, 16);
        let da = trace_delta(&a, &spec, 1);
        let db = trace_delta(&b, &spec, 999);
        assert_eq!(da, db);
        let oa = apply_trace(&a, &spec, 1).unwrap();
        let diff: Vec<f32> = oa.pixels.iter().map(|p| p - 0.5).collect();
        for (x, y) in diff.iter().zip(&da) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn block_quant_rounds_block_means() {
        let base = generate_real(2, 5, 32).unwrap();
        let step = 0.1;
        let out = apply_trace(&base, &GeneratorSpec::new("q", TraceFamily::BlockQuant { step }, 0), 0).unwrap();
        for by in (0..32).step_by(8) {
            for bx in (0..32).step_by(8) {
                let mut m = 0.0f64;
                for y in by..by + 8 {
                    for x in bx..bx + 8 {
                        m += f64::from(out.pixels[y * 32 + x]);
                    }
                }
                m /= 64.0;
                let r = (m / step as f64).round() * step as f64;
                assert!((m - r).abs() < 1e-4, "block mean {m}");
            }
        }
    }

    #[test]
    fn stamps_keep_pixels_in_unit_range() {
        let base = generate_real(3, 1, 32).unwrap();
        for trace in [
            TraceFamily::Checkerboard { period: 2, amplitude: 5.0 },
            TraceFamily::SpectralPeak {
                fx: 0.3,
                fy: 0.1,
                amplitude: 3.0,
            },
            TraceFamily::NoiseShaping { amplitude: 2.0 },
            TraceFamily::FixedPattern { period: 3, amplitude: 4.0 },
            TraceFamily::BlockQuant { step: 0.7 },
        ] {
            let out = apply_trace(&base, &GeneratorSpec::new("x", trace, 3), 8).unwrap();
            assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn apply_trace_rejects_synthetic_base() {
        let spec = GeneratorSpec::new("n", TraceFamily::NoiseShaping { amplitude: 0.1 }, 0);
        let s = apply_trace(&flat(0.5, 16), &spec, 0).unwrap();
        assert!(apply_trace(&s, &spec, 0).is_err());
    }

    #[test]
    fn patches() {
        let img = generate_real(1, 1, 48).unwrap();
        assert_eq!(extract_patch(&img, 48, PatchMode::Center).unwrap().pixels, img.pixels);
        assert_eq!(patch_origin(48, 48, 32, PatchMode::Center), (8, 8));
        let p = extract_patch(&img, 32, PatchMode::Center).unwrap();
        assert_eq!(p.pixels[0], img.pixels[8 * 48 + 8]);
        let r1 = extract_patch(&img, 32, PatchMode::Random(5)).unwrap();
        let r2 = extract_patch(&img, 32, PatchMode::Random(5)).unwrap();
        assert_eq!(r1, r2);
        assert!(extract_patch(&img, 49, PatchMode::Center).is_err());
    }

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            image_size: 16,
            patch_size: 16,
            real: SplitCounts {
                train: 10,
                val: 2,
                test: 4,
            },
            baseline: SplitCounts { train: 9, val: 3, test: 6 },
            emerging: SplitCounts { train: 5, val: 0, test: 3 },
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_bookkeeping_and_determinism() {
        let cfg = small_config();
        let c = build_corpus(&cfg, 42).unwrap();
        assert_eq!(split_corpus(&c, REAL_SOURCE, Split::Test).unwrap().len(), 4);
        for id in &c.baseline_ids {
            assert_eq!(c.split(id, Split::Train).unwrap().len(), 3);
        }
        for entry in &c.manifest().sources {
            let mut idx = BTreeSet::new();
            for split in Split::ALL {
                let imgs = c.split(&entry.id, split).unwrap();
                assert_eq!(
                    imgs.len(),
                    match split {
                        Split::Train => entry.train,
                        Split::Val => entry.val,
                        Split::Test => entry.test,
                    }
                );
                for img in imgs {
                    assert!(idx.insert(img.index), "duplicate index in {}", entry.id);
                }
            }
        }
        assert!(matches!(split_corpus(&c, "nope", Split::Train), Err(E3Error::Lookup(_))));
        let again = build_corpus(&cfg, 42).unwrap();
        assert_eq!(c.manifest(), again.manifest());
        assert_eq!(c.pixel_checksum(), again.pixel_checksum());
    }

    #[test]
    fn baseline_group_is_split_equally() {
        let cfg = CorpusConfig {
            baseline: SplitCounts {
                train: 300,
                val: 0,
                test: 0,
            },
            ..small_config()
        };
        for slot in 0..3 {
            assert_eq!(cfg.baseline_counts(slot).train, 100);
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut cfg = small_config();
        cfg.emerging_generators[1].id = cfg.baseline_generators[0].id.clone();
        assert!(build_corpus(&cfg, 1).unwrap_err().is_config());
    }

    #[test]
    fn export_import_round_trip() {
        let c = build_corpus(&small_config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.export(dir.path()).unwrap();
        let back = Corpus::import(dir.path()).unwrap();
        assert_eq!(back, c);

        let path = dir.path().join("test.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Corpus::import(dir.path()), Err(E3Error::Format(_))));
    }
}

//! Whole-run orchestration behind the command line: build or load the inputs,
//! run a protocol for one or more master seeds, and write results and
//! checkpoints into a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{Method, Protocol, RunConfig};
use crate::detector::DetectorModel;
use crate::e3::FusionVariant;
use crate::error::{E3Error, Result};
use crate::protocol::{audit_disjoint, run_protocol, run_protocol_with, run_sequential, Lab, MethodState, ProtocolResult, SequentialRun};
use crate::report::{write_run, RunManifest};
use crate::synthgen::{build_corpus, Corpus};

pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Pre-built inputs that replace the ones derived from the config.
#[derive(Default)]
pub struct Inputs {
    pub corpus: Option<Corpus>,
    pub baseline: Option<DetectorModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    /// The protocol named in the config.
    Protocol,
    /// Sequential E3 with the configured fusion variant.
    Ablate,
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub command: String,
    pub cfg: RunConfig,
    pub seeds: Vec<u64>,
    pub kind: RunKind,
    pub checkpoints: bool,
}

impl RunRequest {
    pub fn new(command: &str, cfg: RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seeds: vec![cfg.master_seed],
            cfg,
            kind: RunKind::Protocol,
            checkpoints: true,
        }
    }
}

pub fn variant_name(v: FusionVariant) -> &'static str {
    match v {
        FusionVariant::Full => "full",
        FusionVariant::MlpOnly => "mlp_only",
        FusionVariant::NoWeighting => "no_weighting",
    }
}

pub fn parse_variant(s: &str) -> Result<FusionVariant> {
    [FusionVariant::Full, FusionVariant::MlpOnly, FusionVariant::NoWeighting]
        .into_iter()
        .find(|v| variant_name(*v) == s)
        .ok_or_else(|| E3Error::config("ekfn.variant", format!("unknown variant `{s}`")))
}

/// Writes every final method state of `run` below `dir/<label>/<method>`.
/// E3 is one ensemble checkpoint, majority voting one detector per expert
/// (`expert0` is the baseline), and the other methods one detector each.
pub fn save_states(dir: &Path, run: &SequentialRun) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (method, state) in &run.finals {
        let base = dir.join(&run.result.label).join(method.name());
        match state {
            MethodState::E3 { ensemble, ekfn, .. } => {
                let ckpt = Checkpoint::Ensemble {
                    ensemble: ensemble.clone(),
                    ekfn: ekfn.clone(),
                };
                save_checkpoint(&ckpt, &base)?;
                written.push(base);
            }
            MethodState::Majority { experts, .. } => {
                for (i, e) in experts.iter().enumerate() {
                    let p = base.join(format!("expert{i}"));
                    save_checkpoint(&Checkpoint::Detector(e.clone()), &p)?;
                    written.push(p);
                }
            }
            MethodState::Model { model, .. } => {
                save_checkpoint(&Checkpoint::Detector(model.clone()), &base)?;
                written.push(base);
            }
        }
    }
    Ok(written)
}

fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        master_seed: seed,
        ..cfg.clone()
    }
}

fn lab_for(cfg: &RunConfig, inputs: &mut Inputs) -> Result<Lab> {
    let corpus = match inputs.corpus.take() {
        Some(c) => c,
        None => build_corpus(&cfg.corpus, cfg.master_seed)?,
    };
    let lab = match inputs.baseline.take() {
        Some(f0) => Lab::from_parts(cfg, corpus, f0)?,
        None => Lab::with_corpus(cfg, corpus)?,
    };
    audit_disjoint(&lab)?;
    Ok(lab)
}

fn runs_for(req: &RunRequest, cfg: &RunConfig, inputs: &mut Inputs) -> Result<(Vec<SequentialRun>, Option<(String, DetectorModel)>)> {
    match (req.kind, cfg.protocol) {
        (RunKind::Protocol, Protocol::Arch) => {
            if inputs.corpus.is_some() || inputs.baseline.is_some() {
                return Err(E3Error::config("protocol", "the arch protocol builds its own corpus and baselines"));
            }
            Ok((run_protocol(cfg)?, None))
        }
        (RunKind::Protocol, _) => {
            let lab = lab_for(cfg, inputs)?;
            let runs = run_protocol_with(&lab)?;
            Ok((runs, Some((lab.corpus.pixel_checksum(), lab.f0))))
        }
        (RunKind::Ablate, _) => {
            let lab = lab_for(cfg, inputs)?;
            let label = format!("ablate_{}_l{}", variant_name(cfg.ekfn.variant), cfg.ekfn.n_layers);
            let run = run_sequential(&lab, &[Method::E3], cfg.budget, cfg.buffer_capacity, &label)?;
            Ok((vec![run], Some((lab.corpus.pixel_checksum(), lab.f0))))
        }
    }
}

/// Runs `req` for each of its seeds and writes the run directory `out`.
pub fn execute(req: &RunRequest, mut inputs: Inputs, out: &Path) -> Result<Vec<ProtocolResult>> {
    req.cfg.validate()?;
    if req.seeds.is_empty() {
        return Err(E3Error::config("seeds", "at least one master seed is required"));
    }
    if req.seeds.len() > 1 && (inputs.corpus.is_some() || inputs.baseline.is_some()) {
        return Err(E3Error::config("seeds", "a supplied corpus or baseline fixes the master seed"));
    }
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(&req.command, &req.cfg)?;
    let mut results = Vec::new();
    for &seed in &req.seeds {
        let cfg = seeded(&req.cfg, seed);
        let (runs, lab_parts) = runs_for(req, &cfg, &mut inputs)?;
        let ckpt_root = out.join(CHECKPOINT_DIR).join(format!("seed{seed}"));
        if let Some((checksum, f0)) = lab_parts {
            manifest.corpus_checksums.insert(seed, checksum);
            if req.checkpoints {
                let p = ckpt_root.join("f0");
                save_checkpoint(&Checkpoint::Detector(f0), &p)?;
                manifest.files.push(relative(out, &p));
            }
        }
        for run in &runs {
            if req.checkpoints {
                for p in save_states(&ckpt_root, run)? {
                    manifest.files.push(relative(out, &p));
                }
            }
        }
        results.extend(runs.into_iter().map(|r| r.result));
    }
    fs::write(out.join(CONFIG_ECHO_FILE), req.cfg.to_toml()?)?;
    manifest.files.push(CONFIG_ECHO_FILE.to_string());
    write_run(&results, manifest, out)?;
    Ok(results)
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

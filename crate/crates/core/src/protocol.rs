//! Episode execution and the experiment protocols: single-generator
//! adaptation, sequential absorption, budget sweep, and capacity sweep.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{er_step, finetune_step, lwf_step, majority_vote_predict, ClMethodConfig};
use crate::config::{effective_capacity, Method, Protocol, RunConfig};
use crate::detector::{predict_scores, train_detector, DetectorModel, TrainConfig};
use crate::e3::{build_ekfn, e3_predict, train_ekfn, train_expert_detector, EkfnTrainConfig, ExpertEnsemble, FusionNetwork, MemoryBuffer};
use crate::error::{E3Error, Result};
use crate::metrics::{accuracy, roc_auc};
use crate::rng::{stream, stream_seed};
use crate::synthgen::{build_corpus, Corpus, LabeledImage, Split, REAL_SOURCE};
use crate::BASELINE_SOURCE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub auc: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub method: Method,
    pub episode: usize,
    /// Generator absorbed in this episode (`None` for the initial state).
    pub generator: Option<String>,
    /// Per-source metrics in the order the sources were seen.
    pub sources: Vec<(String, SourceMetrics)>,
    pub average_auc: f64,
    pub average_accuracy: f64,
    /// Mixed test of the single-generator protocol: half baseline, half new synthetic vs reals.
    pub mixed: Option<SourceMetrics>,
    pub wall_time_s: f64,
}

impl EpisodeReport {
    pub fn auc(&self, source: &str) -> Option<f64> {
        self.sources.iter().find(|(s, _)| s == source).map(|(_, m)| m.auc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    /// Run label, e.g. `sequential`, `sweep_n20`, `arch_tiny`.
    pub label: String,
    pub protocol: Protocol,
    pub master_seed: u64,
    pub config_fingerprint: String,
    pub budget: usize,
    pub capacity: usize,
    /// State before any emerging generator, one report per method.
    pub initial: Vec<EpisodeReport>,
    /// Episode reports grouped by method, episodes increasing from 1.
    pub episodes: Vec<EpisodeReport>,
}

impl ProtocolResult {
    pub fn method_episodes(&self, method: Method) -> Vec<&EpisodeReport> {
        self.episodes.iter().filter(|e| e.method == method).collect()
    }

    pub fn final_report(&self, method: Method) -> Option<&EpisodeReport> {
        self.method_episodes(method).into_iter().last()
    }
}

/// Everything a method carries from one episode to the next.
#[derive(Debug, Clone)]
pub enum MethodState {
    E3 {
        ensemble: ExpertEnsemble,
        buffer: MemoryBuffer,
        ekfn: FusionNetwork,
    },
    Majority {
        experts: Vec<DetectorModel>,
        capacity: usize,
    },
    Model {
        model: DetectorModel,
        buffer: MemoryBuffer,
    },
}

impl MethodState {
    pub fn scores(&self, images: &[LabeledImage], patch: usize) -> Result<Vec<f32>> {
        match self {
            MethodState::E3 { ensemble, ekfn, .. } => e3_predict(ensemble, ekfn, images, patch),
            MethodState::Majority { experts, .. } => majority_vote_predict(experts, images, patch),
            MethodState::Model { model, .. } => predict_scores(model, images, patch),
        }
    }
}

type ExpertKey = (String, usize, usize);

/// Shared inputs of a protocol run: config, corpus, baseline detector and a
/// cache of expert detectors keyed by `(generator, N, M)`.
pub struct Lab {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub f0: DetectorModel,
    fingerprint: String,
    experts: Mutex<HashMap<ExpertKey, DetectorModel>>,
}

fn with_seed(cfg: &TrainConfig, derived: u64) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed ^ derived,
        ..*cfg
    }
}

/// Baseline training set: every baseline generator's train pool plus the real train pool.
pub fn baseline_training_set(corpus: &Corpus) -> Result<Vec<LabeledImage>> {
    let mut data = corpus.baseline_split(Split::Train)?;
    data.extend_from_slice(corpus.split(REAL_SOURCE, Split::Train)?);
    Ok(data)
}

/// Builds `f₀` from `(cfg, corpus)`.
pub fn train_baseline(cfg: &RunConfig, corpus: &Corpus) -> Result<DetectorModel> {
    let init = DetectorModel::with_arch(cfg.detector, stream_seed(cfg.master_seed, "init/f0", 0))?;
    let tc = with_seed(&cfg.baseline_train, stream_seed(cfg.master_seed, "train/f0", 0));
    Ok(train_detector(&init, &baseline_training_set(corpus)?, &tc)?.model)
}

impl Lab {
    /// Validates `cfg`, builds the corpus and trains the baseline detector.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = build_corpus(&cfg.corpus, cfg.master_seed)?;
        Self::with_corpus(cfg, corpus)
    }

    pub fn with_corpus(cfg: &RunConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        let f0 = train_baseline(cfg, &corpus)?;
        Self::from_parts(cfg, corpus, f0)
    }

    pub fn from_parts(cfg: &RunConfig, corpus: Corpus, f0: DetectorModel) -> Result<Self> {
        cfg.validate()?;
        if f0.arch() != cfg.detector {
            return Err(E3Error::Contract("baseline detector architecture differs from the config".into()));
        }
        for id in cfg.generator_sequence() {
            corpus.split(&id, Split::Train)?;
        }
        Ok(Self {
            fingerprint: cfg.fingerprint()?,
            cfg: cfg.clone(),
            corpus,
            f0,
            experts: Mutex::new(HashMap::new()),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn seed(&self, label: &str, idx: u64) -> u64 {
        stream_seed(self.cfg.master_seed, label, idx)
    }

    fn patch(&self) -> usize {
        self.cfg.corpus.patch_size
    }

    fn roster_index(&self, generator: &str) -> u64 {
        self.corpus.emerging_ids.iter().position(|g| g == generator).unwrap_or(usize::MAX) as u64
    }

    /// The `M/2` buffered reals `R`, drawn uniformly from the real train pool.
    pub fn reals(&self, capacity: usize) -> Result<Vec<LabeledImage>> {
        let pool = self.corpus.split(REAL_SOURCE, Split::Train)?;
        let half = capacity / 2;
        if pool.len() < half {
            return Err(E3Error::Data(format!("need {half} reals, pool has {}", pool.len())));
        }
        let mut idx = sample(
            &mut stream(self.cfg.master_seed, "protocol/reals", capacity as u64),
            pool.len(),
            half,
        )
        .into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
    }

    /// `M_0`: the reals plus one baseline slot drawn equally from the baseline generators.
    pub fn initial_buffer(&self, capacity: usize) -> Result<MemoryBuffer> {
        let pools: Vec<&[LabeledImage]> = self
            .corpus
            .baseline_ids
            .iter()
            .map(|id| self.corpus.split(id, Split::Train))
            .collect::<Result<_>>()?;
        MemoryBuffer::initial(capacity, self.reals(capacity)?, &pools, self.seed("buffer", 0))
    }

    /// `D_k`: the first `budget` train images of `generator`.
    pub fn new_data(&self, generator: &str, budget: usize) -> Result<&[LabeledImage]> {
        let pool = self.corpus.split(generator, Split::Train)?;
        pool.get(..budget)
            .ok_or_else(|| E3Error::Data(format!("`{generator}` has {} train images, need {budget}", pool.len())))
    }

    /// The intermediate detector `f̂_k` for `generator`, trained once per `(N, M)`.
    pub fn expert(&self, generator: &str, budget: usize, capacity: usize) -> Result<DetectorModel> {
        let key = (generator.to_string(), budget, capacity);
        if let Some(m) = self.experts.lock().expect("expert cache").get(&key) {
            return Ok(m.clone());
        }
        let tc = with_seed(&self.cfg.expert_train, self.seed("train/expert", self.roster_index(generator)));
        let model = train_expert_detector(&self.f0, self.new_data(generator, budget)?, &self.reals(capacity)?, &tc)?;
        self.experts.lock().expect("expert cache").insert(key, model.clone());
        Ok(model)
    }

    fn prefetch_experts(&self, generators: &[String], budget: usize, capacity: usize) -> Result<()> {
        generators
            .par_iter()
            .map(|g| self.expert(g, budget, capacity).map(|_| ()))
            .collect()
    }

    fn cl_train(&self, k: usize) -> TrainConfig {
        with_seed(&self.cfg.cl.train, self.seed("train/cl", k as u64))
    }

    fn ekfn_for(&self, ensemble: &ExpertEnsemble, buffer: &MemoryBuffer, k: usize) -> Result<FusionNetwork> {
        let net = build_ekfn(
            ensemble.len(),
            ensemble.embed_dim(),
            self.cfg.ekfn,
            self.seed("init/ekfn", k as u64),
        )?;
        let tc = EkfnTrainConfig {
            seed: self.cfg.ekfn_train.seed ^ self.seed("train/ekfn", k as u64),
            ..self.cfg.ekfn_train
        };
        train_ekfn(&net, ensemble, buffer, self.patch(), &tc)
    }

    /// State of `method` before any emerging generator.
    pub fn initial_state(&self, method: Method, capacity: usize) -> Result<MethodState> {
        let buffer = self.initial_buffer(capacity)?;
        Ok(match method {
            Method::E3 => {
                let ensemble = ExpertEnsemble::new(self.f0.embedder.clone());
                let ekfn = self.ekfn_for(&ensemble, &buffer, 0)?;
                MethodState::E3 { ensemble, buffer, ekfn }
            }
            Method::Majority => MethodState::Majority {
                experts: vec![self.f0.clone()],
                capacity,
            },
            _ => MethodState::Model {
                model: self.f0.clone(),
                buffer,
            },
        })
    }

    /// Applies `method`'s update for generator `g_k` (the `k`-th absorbed).
    pub fn update(&self, state: MethodState, method: Method, k: usize, generator: &str, budget: usize) -> Result<MethodState> {
        let d_k = self.new_data(generator, budget)?;
        let buffer_seed = self.seed("buffer", k as u64);
        Ok(match state {
            MethodState::E3 { mut ensemble, buffer, .. } => {
                let expert = self.expert(generator, budget, buffer.capacity())?;
                ensemble.push(expert.embedder)?;
                let buffer = buffer.update(d_k, generator, buffer_seed)?;
                let ekfn = self.ekfn_for(&ensemble, &buffer, k)?;
                MethodState::E3 { ensemble, buffer, ekfn }
            }
            MethodState::Majority { mut experts, capacity } => {
                experts.push(self.expert(generator, budget, capacity)?);
                MethodState::Majority { experts, capacity }
            }
            MethodState::Model { model, buffer } => {
                let reals = buffer.reals().to_vec();
                let buffer = buffer.update(d_k, generator, buffer_seed)?;
                let tc = self.cl_train(k);
                let model = match method {
                    Method::Finetune => finetune_step(&model, d_k, &reals, &tc)?,
                    Method::Er => er_step(&model, &buffer, d_k, &tc)?,
                    Method::Lwf => {
                        let cl = ClMethodConfig { train: tc, ..self.cfg.cl };
                        lwf_step(&model, &model.clone(), d_k, &reals, &cl)?
                    }
                    _ => model,
                };
                MethodState::Model { model, buffer }
            }
        })
    }

    fn test_pool(&self, source: &str) -> Result<Vec<LabeledImage>> {
        if source == BASELINE_SOURCE {
            self.corpus.baseline_split(Split::Test)
        } else {
            Ok(self.corpus.split(source, Split::Test)?.to_vec())
        }
    }

    /// Per-source AUC/accuracy of `state`: each source's synthetic test pool
    /// against the real test pool.
    pub fn evaluate(&self, state: &MethodState, sources: &[String]) -> Result<Vec<(String, SourceMetrics)>> {
        let patch = self.patch();
        let real = state.scores(self.corpus.split(REAL_SOURCE, Split::Test)?, patch)?;
        sources
            .iter()
            .map(|s| {
                let pos = state.scores(&self.test_pool(s)?, patch)?;
                Ok((s.clone(), metrics(&pos, &real)?))
            })
            .collect()
    }

    /// Half baseline and half `generator` test synthetics against the real test pool.
    pub fn mixed_test(&self, generator: &str) -> Result<Vec<LabeledImage>> {
        let new = self.corpus.split(generator, Split::Test)?;
        let base = self.corpus.baseline_split(Split::Test)?;
        let half = new.len().min(base.len()) / 2;
        let mut out = base[..half].to_vec();
        out.extend_from_slice(&new[..half]);
        Ok(out)
    }
}

fn metrics(pos: &[f32], neg: &[f32]) -> Result<SourceMetrics> {
    let scores: Vec<f32> = pos.iter().chain(neg).copied().collect();
    let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
    Ok(SourceMetrics {
        auc: roc_auc(pos, neg)?,
        accuracy: accuracy(&scores, &labels, 0.5)?,
    })
}

fn report(
    method: Method,
    episode: usize,
    generator: Option<&str>,
    sources: Vec<(String, SourceMetrics)>,
    started: Instant,
) -> EpisodeReport {
    let n = sources.len() as f64;
    EpisodeReport {
        method,
        episode,
        generator: generator.map(str::to_string),
        average_auc: sources.iter().map(|(_, m)| m.auc).sum::<f64>() / n,
        average_accuracy: sources.iter().map(|(_, m)| m.accuracy).sum::<f64>() / n,
        sources,
        mixed: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

/// One sequential episode: absorb `generator` as the `k`-th generator, then
/// evaluate on the baseline and every generator in `seen` (which must end with it).
pub fn run_episode(
    lab: &Lab,
    state: MethodState,
    method: Method,
    k: usize,
    generator: &str,
    budget: usize,
    seen: &[String],
) -> Result<(MethodState, EpisodeReport)> {
    let started = Instant::now();
    let state = lab.update(state, method, k, generator, budget)?;
    let mut sources = vec![BASELINE_SOURCE.to_string()];
    sources.extend_from_slice(seen);
    let metrics = lab.evaluate(&state, &sources)?;
    Ok((state, report(method, k, Some(generator), metrics, started)))
}

/// Report for a method's initial state: only the baseline source.
pub fn initial_report(lab: &Lab, method: Method, capacity: usize) -> Result<(MethodState, EpisodeReport)> {
    let started = Instant::now();
    let state = lab.initial_state(method, capacity)?;
    let metrics = lab.evaluate(&state, &[BASELINE_SOURCE.to_string()])?;
    Ok((state, report(method, 0, None, metrics, started)))
}

/// Outcome of a sequential run, including each method's final state.
pub struct SequentialRun {
    pub result: ProtocolResult,
    pub finals: Vec<(Method, MethodState)>,
}

/// Absorbs the configured generator sequence one by one for every method.
pub fn run_sequential(lab: &Lab, methods: &[Method], budget: usize, capacity: usize, label: &str) -> Result<SequentialRun> {
    let seq = lab.cfg.generator_sequence();
    if methods.iter().any(|m| matches!(m, Method::E3 | Method::Majority)) {
        lab.prefetch_experts(&seq, budget, capacity)?;
    }
    let runs: Vec<(EpisodeReport, Vec<EpisodeReport>, MethodState)> = methods
        .par_iter()
        .map(|&method| {
            let (mut state, init) = initial_report(lab, method, capacity)?;
            let mut eps = Vec::with_capacity(seq.len());
            for (i, g) in seq.iter().enumerate() {
                let (next, rep) = run_episode(lab, state, method, i + 1, g, budget, &seq[..=i])?;
                state = next;
                eps.push(rep);
            }
            Ok((init, eps, state))
        })
        .collect::<Result<_>>()?;
    let mut result = ProtocolResult {
        label: label.to_string(),
        protocol: Protocol::Sequential,
        master_seed: lab.cfg.master_seed,
        config_fingerprint: lab.fingerprint.clone(),
        budget,
        capacity,
        initial: Vec::new(),
        episodes: Vec::new(),
    };
    let mut finals = Vec::new();
    for (&method, (init, eps, state)) in methods.iter().zip(runs) {
        result.initial.push(init);
        result.episodes.extend(eps);
        finals.push((method, state));
    }
    Ok(SequentialRun { result, finals })
}

/// Adapts the baseline to each generator independently; episode `i` is the
/// `i`-th generator of the sequence. Reports include the mixed test.
pub fn run_single(lab: &Lab, methods: &[Method], label: &str) -> Result<ProtocolResult> {
    let seq = lab.cfg.generator_sequence();
    let (budget, capacity) = (lab.cfg.budget, lab.cfg.buffer_capacity);
    if methods.iter().any(|m| matches!(m, Method::E3 | Method::Majority)) {
        lab.prefetch_experts(&seq, budget, capacity)?;
    }
    let per_method: Vec<Vec<EpisodeReport>> = methods
        .par_iter()
        .map(|&method| {
            seq.iter()
                .enumerate()
                .map(|(i, g)| {
                    let started = Instant::now();
                    let state = lab.initial_state(method, capacity)?;
                    let state = lab.update(state, method, 1, g, budget)?;
                    let metrics = lab.evaluate(&state, &[BASELINE_SOURCE.to_string(), g.clone()])?;
                    let mixed_pos = state.scores(&lab.mixed_test(g)?, lab.patch())?;
                    let real = state.scores(lab.corpus.split(REAL_SOURCE, Split::Test)?, lab.patch())?;
                    let mut rep = report(method, i + 1, Some(g), metrics, started);
                    rep.mixed = Some(self::metrics(&mixed_pos, &real)?);
                    rep.wall_time_s = started.elapsed().as_secs_f64();
                    Ok(rep)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ProtocolResult {
        label: label.to_string(),
        protocol: Protocol::Single,
        master_seed: lab.cfg.master_seed,
        config_fingerprint: lab.fingerprint.clone(),
        budget,
        capacity,
        initial: Vec::new(),
        episodes: per_method.into_iter().flatten().collect(),
    })
}

/// Sequential E3 runs, one per budget in `cfg.sweep_budgets`.
pub fn run_sweep(lab: &Lab) -> Result<Vec<SequentialRun>> {
    lab.cfg
        .sweep_budgets
        .iter()
        .map(|&n| {
            let m = effective_capacity(lab.cfg.buffer_capacity, n);
            run_sequential(lab, &[Method::E3], n, m, &format!("sweep_n{n}"))
        })
        .collect()
}

/// Checks that no evaluation image was used for training or buffering.
pub fn audit_disjoint(lab: &Lab) -> Result<()> {
    let key = |i: &LabeledImage| (i.source_id.clone(), i.index);
    let mut train: BTreeSet<(String, u64)> = BTreeSet::new();
    for id in lab.corpus.source_ids() {
        train.extend(lab.corpus.split(id, Split::Train)?.iter().map(key));
        train.extend(lab.corpus.split(id, Split::Val)?.iter().map(key));
    }
    for id in lab.corpus.source_ids() {
        if let Some(img) = lab.corpus.split(id, Split::Test)?.iter().find(|i| train.contains(&key(i))) {
            return Err(E3Error::Contract(format!(
                "test image {}#{} also appears in training data",
                img.source_id, img.index
            )));
        }
    }
    Ok(())
}

/// Runs the protocol named in `cfg` for its configured methods.
pub fn run_protocol(cfg: &RunConfig) -> Result<Vec<SequentialRun>> {
    cfg.validate()?;
    match cfg.protocol {
        Protocol::Arch => cfg
            .arch_presets
            .iter()
            .map(|&preset| {
                let mut c = cfg.clone();
                c.detector.preset = preset;
                let lab = Lab::new(&c)?;
                audit_disjoint(&lab)?;
                let name = serde_json::to_value(preset)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                let mut run = run_sequential(&lab, &c.methods, c.budget, c.buffer_capacity, &format!("arch_{name}"))?;
                run.result.protocol = Protocol::Arch;
                Ok(run)
            })
            .collect(),
        _ => {
            let lab = Lab::new(cfg)?;
            audit_disjoint(&lab)?;
            run_protocol_with(&lab)
        }
    }
}

/// Like [`run_protocol`] for the single, sequential and sweep protocols, reusing an existing lab.
pub fn run_protocol_with(lab: &Lab) -> Result<Vec<SequentialRun>> {
    let cfg = &lab.cfg;
    match cfg.protocol {
        Protocol::Single => Ok(vec![SequentialRun {
            result: run_single(lab, &cfg.methods, "single")?,
            finals: Vec::new(),
        }]),
        Protocol::Sequential => Ok(vec![run_sequential(
            lab,
            &cfg.methods,
            cfg.budget,
            cfg.buffer_capacity,
            "sequential",
        )?]),
        Protocol::Sweep => {
            let mut runs = run_sweep(lab)?;
            runs.iter_mut().for_each(|r| r.result.protocol = Protocol::Sweep);
            Ok(runs)
        }
        Protocol::Arch => Err(E3Error::Contract(
            "the arch protocol trains one baseline per preset; use run_protocol".into(),
        )),
    }
}

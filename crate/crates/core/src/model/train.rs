//! SGD training loops: full-model (pretraining and model tuning), prompt
//! tuning, factorized sub-prompts and downstream task halves.

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Payload};
use super::forward::{full_loss_grad, prompt_loss_grad, prompts_loss_grad};
use super::params::{compose_prompt, Backbone, FactorizedPrompt, Prompt, FACTOR_HALF_LEN};
use crate::error::{Error, Result};
use crate::tasks::{ExampleSource, ExampleStream, TaskExample, TaskKind};
use crate::util::{derive_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// 0 disables checkpoints
    pub checkpoint_every: u64,
    /// global gradient-norm clip; `None` disables
    pub clip_norm: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-slot optimizer moments; empty for SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptState {
    pub fn apply(&mut self, opt: &Optimizer, params: &mut [f64], grad: &[f64], lr: f64) {
        match *opt {
            Optimizer::Sgd => sgd(params, grad, lr),
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.1,
            batch_size: 8,
            checkpoint_every: 100,
            clip_norm: Some(1.0),
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    fn is_checkpoint(&self, step: u64) -> bool {
        self.checkpoint_every > 0 && step.is_multiple_of(self.checkpoint_every)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// mean batch loss per step, in step order
    pub losses: Vec<f64>,
    pub final_payload: Payload,
}

/// Scales `grads` in place so their joint L2 norm is at most `max`.
pub fn clip_grads(grads: &mut [&mut [f64]], max: Option<f64>) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if let Some(m) = max {
        if norm > m {
            let s = m / norm;
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

fn sgd(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn next_batch(source: &mut dyn ExampleSource, n: usize) -> Result<Vec<TaskExample>> {
    (0..n).map(|_| source.next_example()).collect()
}

fn non_finite(step: u64, loss: f64, batch: &[TaskExample]) -> Error {
    let tasks: Vec<String> = batch.iter().map(|e| format!("{}/{}", e.language, e.task)).collect();
    Error::NonFinite(format!("loss {loss} at step {step}; batch: {}", tasks.join(", ")))
}

/// Hash identifying the data a run started from.
fn data_hash(batch: &[TaskExample]) -> String {
    crate::util::sha256_hex(serde_json::to_string(batch).expect("examples serialize").as_bytes())
}

fn opt_slots<'a>(cfg: &TrainConfig, states: impl IntoIterator<Item = &'a OptState>) -> Vec<OptState> {
    match cfg.optimizer {
        Optimizer::Sgd => Vec::new(),
        Optimizer::Adam { .. } => states.into_iter().cloned().collect(),
    }
}

/// Where a training loop starts: step count, optimizer moments and the
/// hash of the run's first batch.
#[derive(Debug, Clone, Default)]
struct Start {
    step: u64,
    opt: OptState,
    data_hash: String,
}

impl Start {
    fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            step: ck.step,
            opt: ck.optimizer.first().cloned().unwrap_or_default(),
            data_hash: ck.data_hash.clone(),
        }
    }
}

/// Trains every backbone parameter. Used for pretraining and model tuning.
fn train_model_from(
    bb: &mut Backbone,
    start: Start,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if bb.frozen {
        return Err(Error::Contract("model tuning needs an unfrozen backbone".into()));
    }
    let mut run = TrainRun {
        checkpoints: Vec::new(),
        losses: Vec::new(),
        final_payload: Payload::Backbone(Vec::new()),
    };
    let Start {
        step: start_step,
        mut opt,
        data_hash: mut first_hash,
    } = start;
    for step in start_step + 1..=cfg.steps {
        let batch = next_batch(source, cfg.batch_size)?;
        if first_hash.is_empty() {
            first_hash = data_hash(&batch);
        }
        let (loss, mut g) = full_loss_grad(bb, &batch)?;
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(non_finite(step, loss, &batch));
        }
        clip_grads(&mut [&mut g], cfg.clip_norm);
        opt.apply(&cfg.optimizer, &mut bb.params, &g, cfg.lr);
        run.losses.push(loss);
        if cfg.is_checkpoint(step) {
            run.checkpoints.push(Checkpoint {
                step,
                payload: Payload::Backbone(bb.params.clone()),
                config: bb.config,
                backbone_fingerprint: bb.fingerprint(),
                source_state: source.save_state()?,
                loss,
                data_hash: first_hash.clone(),
                optimizer: opt_slots(cfg, [&opt]),
            });
        }
    }
    run.final_payload = Payload::Backbone(bb.params.clone());
    Ok(run)
}

/// Pretraining; the backbone comes back frozen.
pub fn pretrain_backbone(bb: &mut Backbone, source: &mut dyn ExampleSource, cfg: &TrainConfig) -> Result<TrainRun> {
    let run = train_model_from(bb, Start::default(), source, cfg)?;
    bb.freeze();
    Ok(run)
}

pub fn train_model(bb: &mut Backbone, source: &mut dyn ExampleSource, cfg: &TrainConfig) -> Result<TrainRun> {
    train_model_from(bb, Start::default(), source, cfg)
}

/// Rebuilds the backbone from a checkpoint and continues to `cfg.steps`.
pub fn resume_model(
    config: super::params::BackboneConfig,
    ck: &Checkpoint,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<(Backbone, TrainRun)> {
    let mut bb = Backbone::from_params(config, ck.payload.as_backbone()?.to_vec(), false)?;
    source.restore_state(&ck.source_state)?;
    let run = train_model_from(&mut bb, Start::from_checkpoint(ck), source, cfg)?;
    Ok((bb, run))
}

#[derive(Debug, Clone)]
pub enum PromptInit {
    /// rows copied from randomly sampled vocabulary embeddings
    SampleVocab(usize),
    /// uniform in `[-scale, scale]`
    Random { len: usize, scale: f64 },
    Given(Prompt),
}

impl PromptInit {
    pub fn build(&self, bb: &Backbone, seed: u64) -> Result<Prompt> {
        let p = match self {
            PromptInit::SampleVocab(len) => Prompt::sample_vocab(bb, *len, seed),
            PromptInit::Random { len, scale } => Prompt::random(*len, bb.config.d_model, *scale, seed),
            PromptInit::Given(p) => p.clone(),
        };
        if p.len == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        if p.d_model != bb.config.d_model {
            return Err(Error::Config("prompt width does not match the backbone".into()));
        }
        Ok(p)
    }
}

fn check_fingerprint(bb: &Backbone, expected: &str) -> Result<()> {
    if bb.fingerprint() != expected {
        return Err(Error::Invariant("backbone fingerprint changed during prompt tuning".into()));
    }
    Ok(())
}

/// Prompt tuning with an optional frozen prefix (the language half of a
/// factorized prompt). Only the trainable rows move.
fn prompt_loop(
    bb: &Backbone,
    frozen_prefix: Option<&Prompt>,
    mut prompt: Prompt,
    start: Start,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if !bb.frozen {
        return Err(Error::Contract("prompt tuning needs a frozen backbone".into()));
    }
    let fp = bb.fingerprint();
    let prefix_fp = frozen_prefix.map(Prompt::fingerprint);
    let mut run = TrainRun {
        checkpoints: Vec::new(),
        losses: Vec::new(),
        final_payload: Payload::Prompt(prompt.clone()),
    };
    let Start {
        step: start_step,
        mut opt,
        data_hash: mut first_hash,
    } = start;
    for step in start_step + 1..=cfg.steps {
        let batch = next_batch(source, cfg.batch_size)?;
        if first_hash.is_empty() {
            first_hash = data_hash(&batch);
        }
        let (loss, mut g) = match frozen_prefix {
            None => prompt_loss_grad(bb, &prompt, &batch)?,
            Some(prefix) => {
                let full = compose_prompt(&FactorizedPrompt::new(prefix.clone(), prompt.clone())?)?;
                let (loss, g) = prompt_loss_grad(bb, &full, &batch)?;
                (loss, g[prefix.data.len()..].to_vec())
            }
        };
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(non_finite(step, loss, &batch));
        }
        clip_grads(&mut [&mut g], cfg.clip_norm);
        opt.apply(&cfg.optimizer, &mut prompt.data, &g, cfg.lr);
        run.losses.push(loss);
        if cfg.is_checkpoint(step) {
            check_fingerprint(bb, &fp)?;
            run.checkpoints.push(Checkpoint {
                step,
                payload: Payload::Prompt(prompt.clone()),
                config: bb.config,
                backbone_fingerprint: fp.clone(),
                source_state: source.save_state()?,
                loss,
                data_hash: first_hash.clone(),
                optimizer: opt_slots(cfg, [&opt]),
            });
        }
    }
    check_fingerprint(bb, &fp)?;
    if let (Some(prefix), Some(before)) = (frozen_prefix, prefix_fp) {
        if prefix.fingerprint() != before {
            return Err(Error::Invariant("language half drifted during task-half training".into()));
        }
    }
    run.final_payload = Payload::Prompt(prompt);
    Ok(run)
}

pub fn train_prompt(bb: &Backbone, init: &PromptInit, source: &mut dyn ExampleSource, cfg: &TrainConfig) -> Result<TrainRun> {
    let prompt = init.build(bb, cfg.seed)?;
    prompt_loop(bb, None, prompt, Start::default(), source, cfg)
}

pub fn resume_prompt(bb: &Backbone, ck: &Checkpoint, source: &mut dyn ExampleSource, cfg: &TrainConfig) -> Result<TrainRun> {
    if ck.backbone_fingerprint != bb.fingerprint() {
        return Err(Error::Input("checkpoint was trained against a different backbone".into()));
    }
    source.restore_state(&ck.source_state)?;
    prompt_loop(bb, None, ck.payload.as_prompt()?.clone(), Start::from_checkpoint(ck), source, cfg)
}

/// Trains a new task half behind a frozen language half.
pub fn train_downstream_task_half(
    bb: &Backbone,
    language_half: &Prompt,
    task_init: &Prompt,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    if language_half.d_model != task_init.d_model {
        return Err(Error::Input("sub-prompt widths differ".into()));
    }
    prompt_loop(bb, Some(language_half), task_init.clone(), Start::default(), source, cfg)
}

/// One stream per (language, task) pair.
pub struct FactorizedData {
    pub languages: Vec<String>,
    pub tasks: Vec<TaskKind>,
    streams: BTreeMap<(usize, usize), ExampleStream>,
}

impl FactorizedData {
    pub fn new(languages: Vec<String>, tasks: Vec<TaskKind>, streams: Vec<ExampleStream>) -> Result<Self> {
        if languages.len() < 2 {
            return Err(Error::Config("factorized training needs at least two languages".into()));
        }
        if tasks.is_empty() {
            return Err(Error::Config("factorized training needs at least one task".into()));
        }
        let mut by_name: BTreeMap<String, ExampleStream> = streams.into_iter().map(|s| (s.name.clone(), s)).collect();
        let mut map = BTreeMap::new();
        for (li, l) in languages.iter().enumerate() {
            for (ti, t) in tasks.iter().enumerate() {
                let key = pair_stream_name(l, *t);
                let s = by_name
                    .remove(&key)
                    .ok_or_else(|| Error::Config(format!("missing stream {key}")))?;
                map.insert((li, ti), s);
            }
        }
        Ok(Self {
            languages,
            tasks,
            streams: map,
        })
    }
}

pub fn pair_stream_name(language: &str, task: TaskKind) -> String {
    format!("{language}:{}", task.name())
}

#[derive(Debug, Clone)]
pub struct FactorizedRun {
    pub languages: BTreeMap<String, Prompt>,
    pub tasks: BTreeMap<String, Prompt>,
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

impl FactorizedRun {
    pub fn trainable_parameters(&self) -> usize {
        self.languages.values().chain(self.tasks.values()).map(|p| p.data.len()).sum()
    }

    pub fn prompt_for(&self, language: &str, task: &str) -> Result<FactorizedPrompt> {
        let l = self
            .languages
            .get(language)
            .ok_or_else(|| Error::Input(format!("no language sub-prompt for {language}")))?;
        let t = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Input(format!("no task sub-prompt for {task}")))?;
        FactorizedPrompt::new(l.clone(), t.clone())
    }
}

/// Joint training of language and task sub-prompts. Each example draws a
/// (language, task) pair uniformly; its gradient reaches only those halves.
pub fn train_factorized(
    bb: &Backbone,
    data: &mut FactorizedData,
    half_len: usize,
    init_scale: f64,
    cfg: &TrainConfig,
) -> Result<FactorizedRun> {
    cfg.validate()?;
    if !bb.frozen {
        return Err(Error::Contract("factorized training needs a frozen backbone".into()));
    }
    if half_len == 0 {
        return Err(Error::Config("sub-prompt length must be positive".into()));
    }
    let d = bb.config.d_model;
    let fp = bb.fingerprint();
    let mut langs: Vec<Prompt> = (0..data.languages.len())
        .map(|i| Prompt::random(half_len, d, init_scale, derive_rng(cfg.seed, "lang-init", i as u64).gen()))
        .collect();
    let mut tasks: Vec<Prompt> = (0..data.tasks.len())
        .map(|i| Prompt::random(half_len, d, init_scale, derive_rng(cfg.seed, "task-init", i as u64).gen()))
        .collect();
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut opt_l = vec![OptState::default(); langs.len()];
    let mut opt_t = vec![OptState::default(); tasks.len()];
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let mut pairs = Vec::with_capacity(cfg.batch_size);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let li = rng.gen_range(0..langs.len());
            let ti = rng.gen_range(0..tasks.len());
            let ex = data
                .streams
                .get_mut(&(li, ti))
                .expect("every pair has a stream")
                .next_example()?;
            pairs.push((li, ti));
            batch.push(ex);
        }
        let composed: Vec<Prompt> = pairs
            .iter()
            .map(|&(li, ti)| compose_prompt(&FactorizedPrompt::new(langs[li].clone(), tasks[ti].clone())?))
            .collect::<Result<_>>()?;
        let items: Vec<(&Prompt, &TaskExample)> = composed.iter().zip(&batch).collect();
        let (loss, grads) = prompts_loss_grad(bb, &items)?;
        if !loss.is_finite() {
            return Err(non_finite(step, loss, &batch));
        }
        let mut gl = vec![vec![0.0; half_len * d]; langs.len()];
        let mut gt = vec![vec![0.0; half_len * d]; tasks.len()];
        for (&(li, ti), g) in pairs.iter().zip(&grads) {
            crate::model::linalg::add_into(&mut gl[li], &g[..half_len * d]);
            crate::model::linalg::add_into(&mut gt[ti], &g[half_len * d..]);
        }
        {
            let mut all: Vec<&mut [f64]> = gl.iter_mut().chain(gt.iter_mut()).map(|v| &mut v[..]).collect();
            clip_grads(&mut all, cfg.clip_norm);
        }
        let before_l: Vec<Vec<f64>> = langs.iter().map(|p| p.data.clone()).collect();
        let before_t: Vec<Vec<f64>> = tasks.iter().map(|p| p.data.clone()).collect();
        let used_l: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let used_t: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        for &li in &used_l {
            opt_l[li].apply(&cfg.optimizer, &mut langs[li].data, &gl[li], cfg.lr);
        }
        for &ti in &used_t {
            opt_t[ti].apply(&cfg.optimizer, &mut tasks[ti].data, &gt[ti], cfg.lr);
        }
        for (i, (p, b)) in langs.iter().zip(&before_l).enumerate() {
            if &p.data != b && !used_l.contains(&i) {
                return Err(Error::Invariant(format!("language sub-prompt {i} moved without being sampled")));
            }
        }
        for (i, (p, b)) in tasks.iter().zip(&before_t).enumerate() {
            if &p.data != b && !used_t.contains(&i) {
                return Err(Error::Invariant(format!("task sub-prompt {i} moved without being sampled")));
            }
        }
        losses.push(loss);
        if cfg.is_checkpoint(step) {
            check_fingerprint(bb, &fp)?;
            checkpoints.push(Checkpoint {
                step,
                payload: Payload::Factorized {
                    languages: named(&data.languages, &langs),
                    tasks: named(&data.tasks.iter().map(|t| t.name().to_string()).collect::<Vec<_>>(), &tasks),
                },
                config: bb.config,
                backbone_fingerprint: fp.clone(),
                source_state: serde_json::Value::Null,
                loss,
                data_hash: String::new(),
                optimizer: opt_slots(cfg, opt_l.iter().chain(&opt_t)),
            });
        }
    }
    check_fingerprint(bb, &fp)?;
    let task_names: Vec<String> = data.tasks.iter().map(|t| t.name().to_string()).collect();
    Ok(FactorizedRun {
        languages: named(&data.languages, &langs),
        tasks: named(&task_names, &tasks),
        losses,
        checkpoints,
    })
}

fn named(names: &[String], prompts: &[Prompt]) -> BTreeMap<String, Prompt> {
    names.iter().cloned().zip(prompts.iter().cloned()).collect()
}

/// Default sub-prompt length at full scale.
pub const DEFAULT_HALF_LEN: usize = FACTOR_HALF_LEN;

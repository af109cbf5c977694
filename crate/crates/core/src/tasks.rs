//! The seven unsupervised task builders, the denoising splice oracle and
//! κ-rate mixtures.
//!
//! Builders are pure functions of (tokens, rng state, parameters). A builder
//! returns `None` when the record is too short for the task (skip signal).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::SubwordModel;
use crate::util::{derive_rng, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub task: String,
    pub language: String,
}

/// Sentinel ids in `S_0, S_1, ...` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentinels {
    ids: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl Sentinels {
    pub fn new(ids: Vec<u32>) -> Self {
        let index = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        Self { ids, index }
    }

    pub fn from_model(model: &SubwordModel) -> Self {
        Self::new((0..model.num_sentinels()).filter_map(|k| model.sentinel(k)).collect())
    }

    pub fn get(&self, k: usize) -> u32 {
        self.ids[k]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PrefixLm,
    SpanCorruption,
    IidDenoising,
    Lm,
    MissingPrefix,
    NTokenPrefix,
    MissingNTokenPrefix,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::PrefixLm,
        TaskKind::SpanCorruption,
        TaskKind::IidDenoising,
        TaskKind::Lm,
        TaskKind::MissingPrefix,
        TaskKind::NTokenPrefix,
        TaskKind::MissingNTokenPrefix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PrefixLm => "prefix_lm",
            TaskKind::SpanCorruption => "span_corruption",
            TaskKind::IidDenoising => "iid_denoising",
            TaskKind::Lm => "lm",
            TaskKind::MissingPrefix => "missing_prefix",
            TaskKind::NTokenPrefix => "n_token_prefix",
            TaskKind::MissingNTokenPrefix => "missing_n_token_prefix",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub span_rate: f64,
    pub mean_span: f64,
    pub iid_rate: f64,
    /// `n` of the two n-token tasks
    pub n_prefix: usize,
    /// missing-prefix length is drawn from `[1, floor(L * frac)]`
    pub missing_prefix_frac: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            span_rate: 0.15,
            mean_span: 3.0,
            iid_rate: 0.15,
            n_prefix: 64,
            missing_prefix_frac: 0.5,
        }
    }
}

fn example(inputs: Vec<u32>, targets: Vec<u32>, kind: TaskKind) -> TaskExample {
    TaskExample {
        inputs,
        targets,
        task: kind.name().into(),
        language: String::new(),
    }
}

pub fn prefix_lm(tokens: &[u32], rng: &mut Rng) -> Option<TaskExample> {
    if tokens.len() < 2 {
        return None;
    }
    let p = rng.gen_range(1..tokens.len());
    Some(example(tokens[..p].to_vec(), tokens[p..].to_vec(), TaskKind::PrefixLm))
}

/// Uniform random composition of `total` into `parts` positive parts.
fn composition(total: usize, parts: usize, rng: &mut Rng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// T5-style span corruption.
///
/// `ceil(rate * L)` tokens are corrupted in `max(1, round(rate * L / mean_span))`
/// non-adjacent spans; span `k` becomes `S_k` in the inputs and the targets
/// read `S_0 span_0 S_1 span_1 ... S_m`.
pub fn span_corruption(
    tokens: &[u32],
    rng: &mut Rng,
    rate: f64,
    mean_span: f64,
    sentinels: &Sentinels,
) -> Option<TaskExample> {
    let len = tokens.len();
    if len < 2 || sentinels.is_empty() {
        return None;
    }
    let noise = ((rate * len as f64).ceil() as usize).min(len);
    if noise == 0 {
        return Some(example(tokens.to_vec(), vec![sentinels.get(0)], TaskKind::SpanCorruption));
    }
    let keep = len - noise;
    let wanted = ((rate * len as f64 / mean_span).round() as usize).max(1);
    // interior gaps need one kept token each; the terminal needs a sentinel
    let spans = wanted.min(noise).min(keep + 1).min(sentinels.len() - 1).max(1);
    let span_lens = composition(noise, spans, rng);
    // spans + 1 gaps, interior ones >= 1
    let free = keep - (spans - 1);
    let mut gaps: Vec<usize> = composition(free + spans + 1, spans + 1, rng).into_iter().map(|g| g - 1).collect();
    for g in gaps.iter_mut().take(spans).skip(1) {
        *g += 1;
    }
    let mut inputs = Vec::with_capacity(keep + spans);
    let mut targets = Vec::with_capacity(noise + spans + 1);
    let mut pos = 0;
    for k in 0..spans {
        inputs.extend_from_slice(&tokens[pos..pos + gaps[k]]);
        pos += gaps[k];
        inputs.push(sentinels.get(k));
        targets.push(sentinels.get(k));
        targets.extend_from_slice(&tokens[pos..pos + span_lens[k]]);
        pos += span_lens[k];
    }
    inputs.extend_from_slice(&tokens[pos..]);
    targets.push(sentinels.get(spans));
    Some(example(inputs, targets, TaskKind::SpanCorruption))
}

/// Each token dropped independently; a run of drops shares one sentinel.
pub fn iid_denoising(tokens: &[u32], rng: &mut Rng, rate: f64, sentinels: &Sentinels) -> Option<TaskExample> {
    if tokens.is_empty() || sentinels.is_empty() {
        return None;
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut next = 0usize;
    let mut in_run = false;
    for &t in tokens {
        let drop = rng.gen::<f64>() < rate && (in_run || next + 1 < sentinels.len());
        if drop {
            if !in_run {
                inputs.push(sentinels.get(next));
                targets.push(sentinels.get(next));
                next += 1;
                in_run = true;
            }
            targets.push(t);
        } else {
            inputs.push(t);
            in_run = false;
        }
    }
    targets.push(sentinels.get(next));
    Some(example(inputs, targets, TaskKind::IidDenoising))
}

pub fn lm_task(tokens: &[u32]) -> Option<TaskExample> {
    if tokens.is_empty() {
        return None;
    }
    Some(example(Vec::new(), tokens.to_vec(), TaskKind::Lm))
}

pub fn missing_prefix(tokens: &[u32], rng: &mut Rng, max_frac: f64, sentinels: &Sentinels) -> Option<TaskExample> {
    if tokens.len() < 2 || sentinels.is_empty() {
        return None;
    }
    let hi = ((tokens.len() as f64 * max_frac).floor() as usize).clamp(1, tokens.len() - 1);
    let p = rng.gen_range(1..=hi);
    let s0 = sentinels.get(0);
    let mut inputs = vec![s0];
    inputs.extend_from_slice(&tokens[p..]);
    let mut targets = vec![s0];
    targets.extend_from_slice(&tokens[..p]);
    Some(example(inputs, targets, TaskKind::MissingPrefix))
}

pub fn n_token_prefix(tokens: &[u32], n: usize) -> Option<TaskExample> {
    if tokens.is_empty() {
        return None;
    }
    let k = n.min(tokens.len());
    Some(example(tokens.to_vec(), tokens[..k].to_vec(), TaskKind::NTokenPrefix))
}

pub fn missing_n_token_prefix(tokens: &[u32], n: usize, sentinels: &Sentinels) -> Option<TaskExample> {
    if tokens.len() <= n || sentinels.is_empty() {
        return None;
    }
    let s0 = sentinels.get(0);
    let mut inputs = vec![s0];
    inputs.extend_from_slice(&tokens[n..]);
    let mut targets = vec![s0];
    targets.extend_from_slice(&tokens[..n]);
    Some(example(inputs, targets, TaskKind::MissingNTokenPrefix))
}

pub fn build_task(
    kind: TaskKind,
    tokens: &[u32],
    rng: &mut Rng,
    params: &TaskParams,
    sentinels: &Sentinels,
) -> Option<TaskExample> {
    match kind {
        TaskKind::PrefixLm => prefix_lm(tokens, rng),
        TaskKind::SpanCorruption => span_corruption(tokens, rng, params.span_rate, params.mean_span, sentinels),
        TaskKind::IidDenoising => iid_denoising(tokens, rng, params.iid_rate, sentinels),
        TaskKind::Lm => lm_task(tokens),
        TaskKind::MissingPrefix => missing_prefix(tokens, rng, params.missing_prefix_frac, sentinels),
        TaskKind::NTokenPrefix => n_token_prefix(tokens, params.n_prefix),
        TaskKind::MissingNTokenPrefix => missing_n_token_prefix(tokens, params.n_prefix, sentinels),
    }
}

/// Splices target spans back into the input at their sentinels.
pub fn reconstruct(ex: &TaskExample, sentinels: &Sentinels) -> Result<Vec<u32>> {
    let mut spans: Vec<Vec<u32>> = Vec::new();
    let mut it = ex.targets.iter().peekable();
    match it.next().and_then(|&t| sentinels.index_of(t)) {
        Some(0) => spans.push(Vec::new()),
        _ => return Err(Error::Corruption("targets must start with S_0".into())),
    }
    for &t in it {
        match sentinels.index_of(t) {
            Some(k) if k == spans.len() => spans.push(Vec::new()),
            Some(k) => {
                return Err(Error::Corruption(format!(
                    "target sentinel S_{k} out of order (expected S_{})",
                    spans.len()
                )))
            }
            None => spans.last_mut().expect("non-empty").push(t),
        }
    }
    let terminal = spans.pop().expect("non-empty");
    if !terminal.is_empty() {
        return Err(Error::Corruption("tokens after the terminal sentinel".into()));
    }
    let mut out = Vec::with_capacity(ex.inputs.len() + spans.iter().map(Vec::len).sum::<usize>());
    let mut expected = 0usize;
    for &t in &ex.inputs {
        match sentinels.index_of(t) {
            Some(k) if k == expected && k < spans.len() => {
                out.extend_from_slice(&spans[k]);
                expected += 1;
            }
            Some(k) => return Err(Error::Corruption(format!("input sentinel S_{k} does not match targets"))),
            None => out.push(t),
        }
    }
    if expected != spans.len() {
        return Err(Error::Corruption(format!(
            "{} spans in targets but {expected} sentinels in inputs",
            spans.len()
        )));
    }
    Ok(out)
}

/// Anything the training loop can pull examples from.
pub trait ExampleSource {
    fn next_example(&mut self) -> Result<TaskExample>;
    fn save_state(&self) -> Result<serde_json::Value>;
    fn restore_state(&mut self, state: &serde_json::Value) -> Result<()>;
}

#[derive(Debug, Clone)]
pub enum StreamSource {
    /// ready-made examples (e.g. tokenized summarization pairs)
    Examples(Vec<TaskExample>),
    /// token documents turned into `kind` examples on the fly
    Documents {
        docs: Vec<Vec<u32>>,
        kind: TaskKind,
        language: String,
        params: TaskParams,
        sentinels: Sentinels,
    },
}

impl StreamSource {
    fn len(&self) -> usize {
        match self {
            StreamSource::Examples(v) => v.len(),
            StreamSource::Documents { docs, .. } => docs.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Cycles over its items, reshuffling every epoch.
#[derive(Debug, Clone)]
pub struct ExampleStream {
    pub name: String,
    source: StreamSource,
    seed: u64,
    state: StreamState,
    order: Vec<usize>,
}

impl ExampleStream {
    pub fn new(name: impl Into<String>, source: StreamSource, seed: u64) -> Result<Self> {
        let name = name.into();
        if source.len() == 0 {
            return Err(Error::Config(format!("stream {name} is empty")));
        }
        let mut s = Self {
            name,
            source,
            seed,
            state: StreamState::default(),
            order: Vec::new(),
        };
        s.reorder();
        Ok(s)
    }

    fn reorder(&mut self) {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        let mut rng = derive_rng(self.seed, &format!("order:{}", self.name), self.state.epoch);
        order.shuffle(&mut rng);
        self.order = order;
    }

    fn advance(&mut self) {
        self.state.cursor += 1;
        if self.state.cursor == self.order.len() {
            self.state.cursor = 0;
            self.state.epoch += 1;
            self.reorder();
        }
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn set_state(&mut self, state: StreamState) -> Result<()> {
        if state.cursor >= self.source.len() {
            return Err(Error::Format(format!("stream {} cursor out of range", self.name)));
        }
        self.state = state;
        self.reorder();
        Ok(())
    }
}

impl ExampleSource for ExampleStream {
    fn next_example(&mut self) -> Result<TaskExample> {
        // a full epoch of skips means no item can ever produce an example
        for _ in 0..self.order.len() {
            let idx = self.order[self.state.cursor];
            let tag = format!("build:{}:{}", self.name, self.state.epoch);
            let built = match &self.source {
                StreamSource::Examples(v) => Some(v[idx].clone()),
                StreamSource::Documents {
                    docs,
                    kind,
                    language,
                    params,
                    sentinels,
                } => {
                    let mut rng = derive_rng(self.seed, &tag, self.state.cursor as u64);
                    build_task(*kind, &docs[idx], &mut rng, params, sentinels).map(|mut ex| {
                        ex.language = language.clone();
                        ex
                    })
                }
            };
            self.advance();
            if let Some(ex) = built {
                return Ok(ex);
            }
        }
        Err(Error::Input(format!("stream {} has no usable records", self.name)))
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.state)?)
    }

    fn restore_state(&mut self, state: &serde_json::Value) -> Result<()> {
        self.set_state(serde_json::from_value(state.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// percentage of draws taken from the unsupervised streams
    pub kappa: f64,
    pub main: String,
    pub unsup: Vec<String>,
    pub seed: u64,
}

pub const DEFAULT_KAPPA: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Mixture {
    spec: MixtureSpec,
    main: ExampleStream,
    unsup: Vec<ExampleStream>,
    rng: Rng,
    pub draws: u64,
    pub unsup_draws: u64,
}

#[derive(Serialize, Deserialize)]
struct MixtureState {
    rng: Rng,
    main: StreamState,
    unsup: Vec<StreamState>,
    draws: u64,
    unsup_draws: u64,
}

/// Wires registered streams into a κ-mixture.
pub fn build_mixture(spec: &MixtureSpec, streams: Vec<ExampleStream>) -> Result<Mixture> {
    if !(0.0..=100.0).contains(&spec.kappa) {
        return Err(Error::Config(format!("kappa {} outside [0, 100]", spec.kappa)));
    }
    let mut by_name: HashMap<String, ExampleStream> = HashMap::new();
    for s in streams {
        by_name.insert(s.name.clone(), s);
    }
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Config(format!("unknown stream {name:?}")))
    };
    let main = take(&spec.main)?;
    let unsup = spec.unsup.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
    if unsup.is_empty() && spec.kappa > 0.0 {
        return Err(Error::Config("kappa > 0 needs at least one unsupervised stream".into()));
    }
    Ok(Mixture {
        spec: spec.clone(),
        main,
        unsup,
        rng: Rng::seed_from_u64(spec.seed),
        draws: 0,
        unsup_draws: 0,
    })
}

impl Mixture {
    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }
}

impl ExampleSource for Mixture {
    fn next_example(&mut self) -> Result<TaskExample> {
        let u: f64 = self.rng.gen();
        self.draws += 1;
        if u < self.spec.kappa / 100.0 {
            self.unsup_draws += 1;
            let i = self.rng.gen_range(0..self.unsup.len());
            self.unsup[i].next_example()
        } else {
            self.main.next_example()
        }
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(MixtureState {
            rng: self.rng.clone(),
            main: self.main.state(),
            unsup: self.unsup.iter().map(|s| s.state()).collect(),
            draws: self.draws,
            unsup_draws: self.unsup_draws,
        })?)
    }

    fn restore_state(&mut self, state: &serde_json::Value) -> Result<()> {
        let st: MixtureState = serde_json::from_value(state.clone())?;
        if st.unsup.len() != self.unsup.len() {
            return Err(Error::Format("mixture state does not match stream count".into()));
        }
        self.rng = st.rng;
        self.main.set_state(st.main)?;
        for (s, ss) in self.unsup.iter_mut().zip(st.unsup) {
            s.set_state(ss)?;
        }
        self.draws = st.draws;
        self.unsup_draws = st.unsup_draws;
        Ok(())
    }
}

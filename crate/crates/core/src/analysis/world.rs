//! Lab configuration and the prerequisite artifacts every recipe needs:
//! languages, tokenizer, corpora, LID model and a pretrained backbone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{gen_synthetic_multilingual, gen_toy_summarization, standard_languages, Document, SummExample, SynthLangSpec};
use crate::error::{Error, Result};
use crate::langid::{train_lid, LidModel};
use crate::model::{init_backbone, pretrain_backbone, Backbone, BackboneConfig, Checkpoint, DecodeConfig, Optimizer, TrainConfig, TrainRun};
use crate::tasks::{ExampleStream, Mixture, MixtureSpec, Sentinels, StreamSource, TaskKind, TaskParams};
use crate::tokenizer::{train_with, SubwordModel, TrainerConfig};

/// Flat experiment configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// seeds prompt init, tuning data order and mixtures
    pub seed: u64,
    /// seeds languages, corpora, tokenizer and backbone
    pub world_seed: u64,
    pub per_family: usize,
    /// languages the backbone is pretrained on; empty means all
    pub pretrain_languages: Vec<String>,
    pub source_language: String,
    /// languages evaluated by recipes; empty means all but the source
    pub target_languages: Vec<String>,
    pub docs_per_lang: usize,
    pub summ_train: usize,
    pub summ_valid: usize,
    pub summ_test: usize,

    pub vocab_size: usize,
    pub num_sentinels: usize,
    pub lid_max_ngrams: usize,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,

    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub pretrain_tasks: Vec<TaskKind>,
    pub optimizer: Optimizer,

    pub tune_steps: u64,
    pub tune_lr: f64,
    pub model_tune_lr: f64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub clip_norm: Option<f64>,
    pub prompt_len: usize,

    pub half_len: usize,
    pub factorized_steps: u64,
    pub factorized_lr: f64,
    pub factorized_init_scale: f64,

    pub intermediate_steps: u64,
    /// LM-task steps for each single-row language prompt
    pub cluster_steps: u64,
    pub kappa: f64,

    pub span_rate: f64,
    pub mean_span: f64,
    pub iid_rate: f64,
    pub n_prefix: usize,
    pub missing_prefix_frac: f64,

    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    pub max_decode_len: usize,
    pub lead_n: usize,
    pub trim: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 0,
            per_family: 2,
            pretrain_languages: Vec::new(),
            source_language: "la0".into(),
            target_languages: Vec::new(),
            docs_per_lang: 400,
            summ_train: 400,
            summ_valid: 20,
            summ_test: 40,
            vocab_size: 512,
            num_sentinels: 16,
            lid_max_ngrams: crate::langid::DEFAULT_MAX_NGRAMS,
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 64,
            max_len: 96,
            pretrain_steps: 3000,
            pretrain_lr: 0.003,
            pretrain_tasks: vec![TaskKind::SpanCorruption, TaskKind::PrefixLm],
            optimizer: Optimizer::adam(),
            tune_steps: 1000,
            tune_lr: 0.03,
            model_tune_lr: 0.001,
            batch_size: 8,
            checkpoint_every: 200,
            clip_norm: Some(1.0),
            prompt_len: 16,
            half_len: 8,
            factorized_steps: 1000,
            factorized_lr: 0.03,
            factorized_init_scale: 0.5,
            intermediate_steps: 200,
            cluster_steps: 300,
            kappa: crate::tasks::DEFAULT_KAPPA,
            span_rate: 0.15,
            mean_span: 3.0,
            iid_rate: 0.15,
            n_prefix: 16,
            missing_prefix_frac: 0.5,
            beam_size: 4,
            length_penalty_alpha: 0.6,
            max_decode_len: 16,
            lead_n: crate::textops::DEFAULT_LEAD_N,
            trim: true,
        }
    }
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len: self.max_len,
        }
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            span_rate: self.span_rate,
            mean_span: self.mean_span,
            iid_rate: self.iid_rate,
            n_prefix: self.n_prefix,
            missing_prefix_frac: self.missing_prefix_frac,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            length_penalty_alpha: self.length_penalty_alpha,
            max_decode_len: self.max_decode_len,
        }
    }

    pub fn tune_config(&self, steps: u64, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            lr,
            batch_size: self.batch_size,
            checkpoint_every: self.checkpoint_every,
            clip_norm: self.clip_norm,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            checkpoint_every: 0,
            seed: self.world_seed,
            ..self.tune_config(self.pretrain_steps, self.pretrain_lr)
        }
    }

    /// The config with every field that does not affect [`World`] reset.
    pub fn world_key(&self) -> String {
        let c = LabConfig {
            seed: 0,
            target_languages: Vec::new(),
            source_language: String::new(),
            tune_steps: 0,
            tune_lr: 0.0,
            model_tune_lr: 0.0,
            checkpoint_every: 0,
            prompt_len: 0,
            half_len: 0,
            factorized_steps: 0,
            factorized_lr: 0.0,
            factorized_init_scale: 0.0,
            intermediate_steps: 0,
            cluster_steps: 0,
            kappa: 0.0,
            beam_size: 0,
            length_penalty_alpha: 0.0,
            max_decode_len: 0,
            lead_n: 0,
            trim: false,
            ..self.clone()
        };
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// Everything a recipe consumes.
#[derive(Debug, Clone)]
pub struct World {
    pub specs: Vec<SynthLangSpec>,
    pub tokenizer: SubwordModel,
    pub corpora: BTreeMap<String, Vec<Document>>,
    pub lid: LidModel,
    pub backbone: Backbone,
    pub pretrain: Option<TrainRun>,
    /// per language: train / validation / test splits
    pub summ: BTreeMap<String, SummSplits>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummSplits {
    pub train: Vec<SummExample>,
    pub valid: Vec<SummExample>,
    pub test: Vec<SummExample>,
}

impl World {
    pub fn spec(&self, name: &str) -> Result<&SynthLangSpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("unknown language {name}")))
    }

    pub fn splits(&self, name: &str) -> Result<&SummSplits> {
        self.summ
            .get(name)
            .ok_or_else(|| Error::Config(format!("no summarization data for {name}")))
    }

    pub fn sentinels(&self) -> Sentinels {
        Sentinels::from_model(&self.tokenizer)
    }

    pub fn tokens(&self, language: &str) -> Result<Vec<Vec<u32>>> {
        let docs = self
            .corpora
            .get(language)
            .ok_or_else(|| Error::Config(format!("no corpus for {language}")))?;
        Ok(docs.iter().map(|d| self.tokenizer.encode(&d.text)).collect())
    }

    /// One document stream turning `language` text into `kind` examples.
    pub fn task_stream(&self, cfg: &LabConfig, language: &str, kind: TaskKind, seed: u64) -> Result<ExampleStream> {
        ExampleStream::new(
            crate::model::train::pair_stream_name(language, kind),
            StreamSource::Documents {
                docs: self.tokens(language)?,
                kind,
                language: language.into(),
                params: cfg.task_params(),
                sentinels: self.sentinels(),
            },
            seed,
        )
    }

    pub fn summ_stream(&self, name: &str, examples: &[SummExample], seed: u64) -> Result<ExampleStream> {
        let items = examples
            .iter()
            .map(|e| crate::model::summ_to_task(&self.tokenizer, e))
            .collect();
        ExampleStream::new(name, StreamSource::Examples(items), seed)
    }
}

pub fn pretrain_language_list(cfg: &LabConfig, specs: &[SynthLangSpec]) -> Vec<String> {
    if cfg.pretrain_languages.is_empty() {
        specs.iter().map(|s| s.name.clone()).collect()
    } else {
        cfg.pretrain_languages.clone()
    }
}

/// Uniform mixture over (language, task) streams used for pretraining.
pub fn pretrain_mixture(world: &World, cfg: &LabConfig) -> Result<Mixture> {
    let mut streams = Vec::new();
    for l in &pretrain_language_list(cfg, &world.specs) {
        for &k in &cfg.pretrain_tasks {
            streams.push(world.task_stream(cfg, l, k, cfg.world_seed)?);
        }
    }
    let first = streams.first().ok_or_else(|| Error::Config("no pretraining streams".into()))?;
    // κ = 100: every draw is a uniform pick among the task streams and the
    // main slot is never read
    let mut main = first.clone();
    main.name = "pretrain#main".into();
    let spec = MixtureSpec {
        kappa: 100.0,
        main: main.name.clone(),
        unsup: streams.iter().map(|s| s.name.clone()).collect(),
        seed: cfg.world_seed,
    };
    streams.push(main);
    crate::tasks::build_mixture(&spec, streams)
}

/// Unlabeled documents per language.
pub type Corpora = BTreeMap<String, Vec<Document>>;

/// Languages and their unlabeled corpora.
pub fn world_corpora(cfg: &LabConfig) -> Result<(Vec<SynthLangSpec>, Corpora)> {
    let specs = standard_languages(cfg.per_family, cfg.world_seed)?;
    let corpora = gen_synthetic_multilingual(&specs, cfg.docs_per_lang, cfg.world_seed)?;
    Ok((specs, corpora))
}

/// Summarization splits per language, generated in file order:
/// validation, test, train.
pub fn world_summ(cfg: &LabConfig, specs: &[SynthLangSpec]) -> Result<BTreeMap<String, SummSplits>> {
    let mut summ = BTreeMap::new();
    for s in specs {
        let n = cfg.summ_train + cfg.summ_valid + cfg.summ_test;
        let all = gen_toy_summarization(s, n.max(1), cfg.world_seed)?;
        summ.insert(s.name.clone(), split_summ(cfg, all));
    }
    Ok(summ)
}

fn split_summ(cfg: &LabConfig, all: Vec<SummExample>) -> SummSplits {
    let nv = cfg.summ_valid.min(all.len());
    let nt = cfg.summ_test.min(all.len() - nv);
    SummSplits {
        valid: all[..nv].to_vec(),
        test: all[nv..nv + nt].to_vec(),
        train: all[nv + nt..].to_vec(),
    }
}

/// Tokenizer over the corpora plus the summarization training documents.
pub fn world_tokenizer(
    cfg: &LabConfig,
    corpora: &BTreeMap<String, Vec<Document>>,
    summ: &BTreeMap<String, SummSplits>,
) -> Result<SubwordModel> {
    let mut texts: Vec<&str> = corpora.values().flatten().map(|d| d.text.as_str()).collect();
    texts.extend(summ.values().flat_map(|s| s.train.iter().map(|e| e.document.as_str())));
    train_with(
        texts,
        TrainerConfig::new(cfg.vocab_size, cfg.world_seed).with_sentinels(cfg.num_sentinels),
    )
}

pub fn world_lid(cfg: &LabConfig, corpora: &BTreeMap<String, Vec<Document>>) -> Result<LidModel> {
    let lid_train: Vec<(String, Vec<Document>)> = corpora.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    train_lid(&lid_train, cfg.lid_max_ngrams, cfg.world_seed)
}

/// Builds languages, corpora, tokenizer and LID without a trained backbone.
pub fn build_world_untrained(cfg: &LabConfig) -> Result<World> {
    let (specs, corpora) = world_corpora(cfg)?;
    let summ = world_summ(cfg, &specs)?;
    let tokenizer = world_tokenizer(cfg, &corpora, &summ)?;
    let lid = world_lid(cfg, &corpora)?;
    let backbone = init_backbone(cfg.backbone_config(tokenizer.vocab_size()), cfg.world_seed)?;
    Ok(World {
        specs,
        tokenizer,
        corpora,
        lid,
        backbone,
        pretrain: None,
        summ,
    })
}

/// Full prerequisite build including backbone pretraining.
pub fn build_world(cfg: &LabConfig) -> Result<World> {
    let mut w = build_world_untrained(cfg)?;
    let mut mix = pretrain_mixture(&w, cfg)?;
    let run = pretrain_backbone(&mut w.backbone, &mut mix, &cfg.pretrain_config())?;
    w.pretrain = Some(run);
    Ok(w)
}

/// File names of the persisted prerequisites inside a world directory.
pub struct WorldPaths {
    pub root: PathBuf,
}

impl WorldPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn languages(&self) -> PathBuf {
        self.root.join("languages.json")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.model")
    }
    pub fn lid(&self) -> PathBuf {
        self.root.join("lid.json")
    }
    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone.ckpt")
    }
    pub fn corpus(&self, lang: &str) -> PathBuf {
        self.root.join(format!("corpus.{lang}.jsonl"))
    }
    pub fn summ(&self, lang: &str) -> PathBuf {
        self.root.join(format!("summ.{lang}.jsonl"))
    }
}

pub fn save_corpora(specs: &[SynthLangSpec], corpora: &BTreeMap<String, Vec<Document>>, paths: &WorldPaths) -> Result<()> {
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(paths.root.display().to_string(), e))?;
    let text = serde_json::to_string_pretty(specs)?;
    std::fs::write(paths.languages(), text).map_err(|e| Error::io(paths.languages().display().to_string(), e))?;
    for (lang, docs) in corpora {
        crate::corpus::write_jsonl(&paths.corpus(lang), docs)?;
    }
    Ok(())
}

pub fn save_summ(summ: &BTreeMap<String, SummSplits>, paths: &WorldPaths) -> Result<()> {
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(paths.root.display().to_string(), e))?;
    for (lang, s) in summ {
        let all: Vec<SummExample> = s.valid.iter().chain(&s.test).chain(&s.train).cloned().collect();
        crate::corpus::write_jsonl(&paths.summ(lang), &all)?;
    }
    Ok(())
}

pub fn save_world(world: &World, paths: &WorldPaths) -> Result<()> {
    save_corpora(&world.specs, &world.corpora, paths)?;
    save_summ(&world.summ, paths)?;
    world.tokenizer.save(&paths.tokenizer())?;
    world.lid.save(&paths.lid())?;
    backbone_checkpoint(&world.backbone).save(&paths.backbone())
}

pub fn backbone_checkpoint(bb: &Backbone) -> Checkpoint {
    Checkpoint {
        step: 0,
        payload: crate::model::Payload::Backbone(bb.params.clone()),
        config: bb.config,
        backbone_fingerprint: bb.fingerprint(),
        source_state: serde_json::Value::Null,
        loss: 0.0,
        data_hash: String::new(),
        optimizer: Vec::new(),
    }
}

fn need(path: &Path, what: &str, how: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing prerequisite {what}: {} not found (create it with `xgkit {how}`)",
            path.display()
        )))
    }
}

/// Language specs and corpora from a world directory.
pub fn load_corpora(paths: &WorldPaths) -> Result<(Vec<SynthLangSpec>, Corpora)> {
    need(&paths.languages(), "language specs", "gen-corpus")?;
    let specs = crate::corpus::load_lang_specs(&paths.languages())?;
    let mut corpora = BTreeMap::new();
    for s in &specs {
        need(&paths.corpus(&s.name), &format!("corpus for {}", s.name), "gen-corpus")?;
        let docs: Vec<Document> = crate::corpus::load_documents(&paths.corpus(&s.name), crate::corpus::Schema::Plain)?
            .documents()
            .cloned()
            .collect();
        corpora.insert(s.name.clone(), docs);
    }
    Ok((specs, corpora))
}

pub fn load_summ(cfg: &LabConfig, specs: &[SynthLangSpec], paths: &WorldPaths) -> Result<BTreeMap<String, SummSplits>> {
    let mut summ = BTreeMap::new();
    for s in specs {
        need(&paths.summ(&s.name), &format!("summarization data for {}", s.name), "gen-summ")?;
        let all: Vec<SummExample> = crate::corpus::load_documents(&paths.summ(&s.name), crate::corpus::Schema::Summ)?
            .summ_examples()
            .cloned()
            .collect();
        summ.insert(s.name.clone(), split_summ(cfg, all));
    }
    Ok(summ)
}

pub fn load_tokenizer(paths: &WorldPaths) -> Result<SubwordModel> {
    need(&paths.tokenizer(), "tokenizer", "tokenizer-train")?;
    SubwordModel::load(&paths.tokenizer())
}

pub fn load_lid(paths: &WorldPaths) -> Result<LidModel> {
    need(&paths.lid(), "LID model", "lid-train")?;
    LidModel::load(&paths.lid())
}

/// Loads the prerequisites of pretraining; the backbone is freshly
/// initialized from the config.
pub fn load_world_untrained(cfg: &LabConfig, paths: &WorldPaths) -> Result<World> {
    let (specs, corpora) = load_corpora(paths)?;
    let tokenizer = load_tokenizer(paths)?;
    let lid = load_lid(paths)?;
    let summ = load_summ(cfg, &specs, paths)?;
    let backbone = init_backbone(cfg.backbone_config(tokenizer.vocab_size()), cfg.world_seed)?;
    Ok(World {
        specs,
        tokenizer,
        corpora,
        lid,
        backbone,
        pretrain: None,
        summ,
    })
}

/// Loads persisted prerequisites, naming the first missing artifact.
pub fn load_world(cfg: &LabConfig, paths: &WorldPaths) -> Result<World> {
    let (specs, corpora) = load_corpora(paths)?;
    let tokenizer = load_tokenizer(paths)?;
    let lid = load_lid(paths)?;
    need(&paths.backbone(), "backbone", "pretrain")?;
    let ck = Checkpoint::load(&paths.backbone())?;
    let backbone = Backbone::from_params(ck.config, ck.payload.as_backbone()?.to_vec(), true)?;
    if backbone.config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config("backbone vocabulary does not match the tokenizer".into()));
    }
    let summ = load_summ(cfg, &specs, paths)?;
    Ok(World {
        specs,
        tokenizer,
        corpora,
        lid,
        backbone,
        pretrain: None,
        summ,
    })
}

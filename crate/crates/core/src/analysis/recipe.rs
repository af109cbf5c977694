//! End-to-end experiment recipes. Each recipe tunes on source-language
//! summarization (plus whatever the recipe adds), selects a checkpoint on
//! source-language validation and evaluates every target language.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::curves::{learning_curves, write_curves, CurvePoint};
use super::world::{pretrain_language_list, LabConfig, World};
use crate::corpus::{gen_toy_summarization, SummExample};
use crate::error::{Error, Result};
use crate::metrics::{corpus_eval, EvalContext, EvalReport};
use crate::model::{
    compose_prompt, select_checkpoint, train_downstream_task_half, train_factorized, train_model, train_prompt,
    Backbone, Checkpoint, FactorizedData, FactorizedPrompt, Predictor, Prompt, PromptInit, TrainRun,
};
use crate::tasks::{build_mixture, ExampleSource, MixtureSpec, TaskKind};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    #[serde(rename = "vanilla-PT")]
    VanillaPt,
    #[serde(rename = "vanilla-MT")]
    VanillaMt,
    MixUnsup,
    MixUnsupAll,
    Fp,
    FpEn,
    ItLm,
    ItMainTask,
}

impl Recipe {
    pub const ALL: [Recipe; 8] = [
        Recipe::VanillaPt,
        Recipe::VanillaMt,
        Recipe::MixUnsup,
        Recipe::MixUnsupAll,
        Recipe::Fp,
        Recipe::FpEn,
        Recipe::ItLm,
        Recipe::ItMainTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::VanillaPt => "vanilla-PT",
            Recipe::VanillaMt => "vanilla-MT",
            Recipe::MixUnsup => "mix-unsup",
            Recipe::MixUnsupAll => "mix-unsup-all",
            Recipe::Fp => "fp",
            Recipe::FpEn => "fp-en",
            Recipe::ItLm => "it-lm",
            Recipe::ItMainTask => "it-main-task",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Recipe::ALL.iter().map(|r| r.name()).collect();
                Error::Config(format!("unknown recipe {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// What the recipe writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub recipe: Recipe,
    pub source_language: String,
    pub target_languages: Vec<String>,
    /// per evaluated language: the step picked on source validation
    pub selected_steps: BTreeMap<String, u64>,
    /// test scores at the selected checkpoints
    pub eval: EvalReport,
    /// Lead-n baseline on the same test sets
    pub lead: EvalReport,
}

/// Everything a recipe produced, before it is written out.
#[derive(Debug, Clone)]
pub struct RecipeOutcome {
    pub report: RecipeReport,
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    /// checkpoints by file stem
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

/// A tuned model for one checkpoint and one language.
enum Tuned {
    Prompt(Prompt),
    Model(Backbone),
}

impl Tuned {
    fn predictor<'a>(&'a self, frozen: &'a Backbone) -> Predictor<'a> {
        match self {
            Tuned::Prompt(p) => Predictor {
                backbone: frozen,
                prompt: Some(p),
            },
            Tuned::Model(b) => Predictor {
                backbone: b,
                prompt: None,
            },
        }
    }
}

type Realize<'a> = Box<dyn Fn(&Checkpoint, &str) -> Result<Tuned> + 'a>;

/// One tuning run and the languages evaluated with it.
struct EvalRun<'a> {
    label: String,
    checkpoints: Vec<Checkpoint>,
    languages: Vec<String>,
    realize: Realize<'a>,
}

fn prompt_of(ck: &Checkpoint) -> Result<Tuned> {
    Ok(Tuned::Prompt(ck.payload.as_prompt()?.clone()))
}

fn model_of(ck: &Checkpoint) -> Result<Tuned> {
    Ok(Tuned::Model(Backbone::from_params(ck.config, ck.payload.as_backbone()?.to_vec(), true)?))
}

pub fn target_languages(cfg: &LabConfig, world: &World) -> Result<Vec<String>> {
    world.spec(&cfg.source_language)?;
    let out: Vec<String> = if cfg.target_languages.is_empty() {
        world
            .specs
            .iter()
            .map(|s| s.name.clone())
            .filter(|n| *n != cfg.source_language)
            .collect()
    } else {
        cfg.target_languages.clone()
    };
    for l in &out {
        world.spec(l)?;
        if *l == cfg.source_language {
            return Err(Error::Config(format!("target language {l} is the source language")));
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no target languages".into()));
    }
    Ok(out)
}

fn with_checkpoints(run: TrainRun) -> Result<Vec<Checkpoint>> {
    if run.checkpoints.is_empty() {
        return Err(Error::Config(
            "tuning produced no checkpoints; checkpoint_every must divide into tune_steps".into(),
        ));
    }
    Ok(run.checkpoints)
}

fn main_stream(world: &World, cfg: &LabConfig) -> Result<crate::tasks::ExampleStream> {
    world.summ_stream("main", &world.splits(&cfg.source_language)?.train, cfg.seed)
}

fn mixed(world: &World, cfg: &LabConfig, languages: &[String]) -> Result<crate::tasks::Mixture> {
    let mut streams = vec![main_stream(world, cfg)?];
    for l in languages {
        streams.push(world.task_stream(cfg, l, TaskKind::SpanCorruption, cfg.seed)?);
    }
    let spec = MixtureSpec {
        kappa: cfg.kappa,
        main: "main".into(),
        unsup: streams[1..].iter().map(|s| s.name.clone()).collect(),
        seed: cfg.seed,
    };
    build_mixture(&spec, streams)
}

fn tune_prompt(world: &World, cfg: &LabConfig, init: PromptInit, source: &mut dyn ExampleSource) -> Result<TrainRun> {
    train_prompt(&world.backbone, &init, source, &cfg.tune_config(cfg.tune_steps, cfg.tune_lr))
}

/// Prompt tuning on `intermediate` first, then on the main task.
fn intermediate_then_main(world: &World, cfg: &LabConfig, intermediate: &mut dyn ExampleSource) -> Result<TrainRun> {
    let mut tc = cfg.tune_config(cfg.intermediate_steps, cfg.tune_lr);
    tc.checkpoint_every = 0;
    let first = train_prompt(&world.backbone, &PromptInit::SampleVocab(cfg.prompt_len), intermediate, &tc)?;
    let init = first.final_payload.as_prompt()?.clone();
    tune_prompt(world, cfg, PromptInit::Given(init), &mut main_stream(world, cfg)?)
}

fn build_runs<'a>(recipe: Recipe, world: &'a World, cfg: &LabConfig, targets: &[String]) -> Result<Vec<EvalRun<'a>>> {
    let source = cfg.source_language.clone();
    let all_langs: Vec<String> = std::iter::once(source.clone()).chain(targets.iter().cloned()).collect();
    let mut runs = Vec::new();
    match recipe {
        Recipe::VanillaPt => {
            let run = tune_prompt(world, cfg, PromptInit::SampleVocab(cfg.prompt_len), &mut main_stream(world, cfg)?)?;
            runs.push(EvalRun {
                label: "prompt".into(),
                checkpoints: with_checkpoints(run)?,
                languages: all_langs,
                realize: Box::new(|ck, _| prompt_of(ck)),
            });
        }
        Recipe::VanillaMt => {
            let mut bb = world.backbone.clone();
            bb.unfreeze();
            let run = train_model(&mut bb, &mut main_stream(world, cfg)?, &cfg.tune_config(cfg.tune_steps, cfg.model_tune_lr))?;
            runs.push(EvalRun {
                label: "model".into(),
                checkpoints: with_checkpoints(run)?,
                languages: all_langs,
                realize: Box::new(|ck, _| model_of(ck)),
            });
        }
        Recipe::MixUnsup => {
            for t in targets {
                let mut mix = mixed(world, cfg, std::slice::from_ref(t))?;
                let run = tune_prompt(world, cfg, PromptInit::SampleVocab(cfg.prompt_len), &mut mix)?;
                runs.push(EvalRun {
                    label: format!("prompt-{t}"),
                    checkpoints: with_checkpoints(run)?,
                    languages: vec![t.clone()],
                    realize: Box::new(|ck, _| prompt_of(ck)),
                });
            }
        }
        Recipe::MixUnsupAll => {
            let langs: Vec<String> = world.specs.iter().map(|s| s.name.clone()).collect();
            let mut mix = mixed(world, cfg, &langs)?;
            let run = tune_prompt(world, cfg, PromptInit::SampleVocab(cfg.prompt_len), &mut mix)?;
            runs.push(EvalRun {
                label: "prompt".into(),
                checkpoints: with_checkpoints(run)?,
                languages: all_langs,
                realize: Box::new(|ck, _| prompt_of(ck)),
            });
        }
        Recipe::ItLm => {
            for t in targets {
                let mut lm = world.task_stream(cfg, t, TaskKind::Lm, cfg.seed)?;
                let run = intermediate_then_main(world, cfg, &mut lm)?;
                runs.push(EvalRun {
                    label: format!("prompt-{t}"),
                    checkpoints: with_checkpoints(run)?,
                    languages: vec![t.clone()],
                    realize: Box::new(|ck, _| prompt_of(ck)),
                });
            }
        }
        Recipe::ItMainTask => {
            let spec = world.spec(&source)?;
            let used = cfg.summ_train + cfg.summ_valid + cfg.summ_test;
            // indices past the main splits: same generator, disjoint examples
            let extra: Vec<SummExample> = gen_toy_summarization(spec, used + cfg.summ_train.max(1), cfg.world_seed)?
                .split_off(used);
            let mut inter = world.summ_stream("intermediate", &extra, cfg.seed)?;
            let run = intermediate_then_main(world, cfg, &mut inter)?;
            runs.push(EvalRun {
                label: "prompt".into(),
                checkpoints: with_checkpoints(run)?,
                languages: all_langs,
                realize: Box::new(|ck, _| prompt_of(ck)),
            });
        }
        Recipe::Fp | Recipe::FpEn => {
            let langs = pretrain_language_list(cfg, &world.specs);
            for l in &all_langs {
                if !langs.contains(l) {
                    return Err(Error::Config(format!("{l} has no language sub-prompt; add it to pretrain_languages")));
                }
            }
            let mut streams = Vec::new();
            for l in &langs {
                for &k in &TaskKind::ALL {
                    streams.push(world.task_stream(cfg, l, k, cfg.seed)?);
                }
            }
            let mut data = FactorizedData::new(langs, TaskKind::ALL.to_vec(), streams)?;
            let mut tc = cfg.tune_config(cfg.factorized_steps, cfg.factorized_lr);
            tc.checkpoint_every = 0;
            let fact = train_factorized(&world.backbone, &mut data, cfg.half_len, cfg.factorized_init_scale, &tc)?;
            let src_half = fact.languages[&source].clone();
            let init = &fact.tasks[TaskKind::SpanCorruption.name()];
            let run = train_downstream_task_half(
                &world.backbone,
                &src_half,
                init,
                &mut main_stream(world, cfg)?,
                &cfg.tune_config(cfg.tune_steps, cfg.tune_lr),
            )?;
            let swap = recipe == Recipe::Fp;
            let halves = fact.languages;
            runs.push(EvalRun {
                label: "task".into(),
                checkpoints: with_checkpoints(run)?,
                languages: all_langs,
                realize: Box::new(move |ck, lang| {
                    let half = if swap { &halves[lang] } else { &src_half };
                    let task = ck.payload.as_prompt()?.clone();
                    Ok(Tuned::Prompt(compose_prompt(&FactorizedPrompt::new(half.clone(), task)?)?))
                }),
            });
        }
    }
    Ok(runs)
}

fn lead_report(world: &World, cfg: &LabConfig, langs: &[String], ctx: &EvalContext<'_>) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for l in langs {
        for ex in &world.splits(l)?.test {
            preds.push((crate::textops::lead_n_text(&ex.document, &world.tokenizer, cfg.lead_n)?, l.clone()));
            refs.push(ex.summary.clone());
        }
    }
    corpus_eval(&preds, &refs, ctx)
}

/// Runs `recipe` on a prepared world and evaluates it.
pub fn run_recipe(recipe: Recipe, world: &World, cfg: &LabConfig) -> Result<RecipeOutcome> {
    let targets = target_languages(cfg, world)?;
    let ctx = EvalContext {
        tokenizer: &world.tokenizer,
        lid: &world.lid,
        en_language: &cfg.source_language,
        trim: cfg.trim,
    };
    let dc = cfg.decode_config();
    let valid = &world.splits(&cfg.source_language)?.valid;
    let runs = build_runs(recipe, world, cfg, &targets)?;

    let mut selected_steps = BTreeMap::new();
    let mut curves = BTreeMap::new();
    let mut checkpoints = BTreeMap::new();
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    let mut evaluated = Vec::new();
    for run in &runs {
        let best = select_checkpoint(&run.checkpoints, valid, &cfg.source_language, &ctx, &dc, |ck, score| {
            let tuned = (run.realize)(ck, &cfg.source_language)?;
            score(tuned.predictor(&world.backbone))
        })?;
        for lang in &run.languages {
            if selected_steps.insert(lang.clone(), run.checkpoints[best].step).is_some() {
                return Err(Error::Invariant(format!("{lang} evaluated by two runs")));
            }
            let test = &world.splits(lang)?.test;
            let tuned = (run.realize)(&run.checkpoints[best], lang)?;
            for (p, _) in tuned.predictor(&world.backbone).predict_all(&world.tokenizer, test, &dc)? {
                preds.push((p, lang.clone()));
            }
            refs.extend(test.iter().map(|e| e.summary.clone()));
            let per_ck: Vec<(u64, Tuned)> = run
                .checkpoints
                .iter()
                .map(|ck| Ok((ck.step, (run.realize)(ck, lang)?)))
                .collect::<Result<_>>()?;
            let predictors: Vec<(u64, Predictor<'_>)> =
                per_ck.iter().map(|(s, t)| (*s, t.predictor(&world.backbone))).collect();
            let sets = BTreeMap::from([(lang.clone(), test.clone())]);
            curves.extend(learning_curves(&predictors, &sets, &ctx, &dc)?);
            evaluated.push(lang.clone());
        }
        for ck in &run.checkpoints {
            checkpoints.insert(format!("{}-step{:06}", run.label, ck.step), ck.clone());
        }
    }
    let mut eval = corpus_eval(&preds, &refs, &ctx)?;
    eval.metadata.checkpoint_step = selected_steps.get(&cfg.source_language).copied();
    let lead = lead_report(world, cfg, &evaluated, &ctx)?;
    Ok(RecipeOutcome {
        report: RecipeReport {
            recipe,
            source_language: cfg.source_language.clone(),
            target_languages: targets,
            selected_steps,
            eval,
            lead,
        },
        curves,
        checkpoints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub recipe: Recipe,
    pub config_sha256: String,
    pub tokenizer: String,
    pub backbone: String,
    pub lid_sha256: String,
    /// per language: hash of the summarization splits
    pub data_sha256: BTreeMap<String, String>,
    /// per output file: hash of its bytes
    pub files: BTreeMap<String, String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(bytes))
}

/// Writes config.json, checkpoints/, curves.csv, report.json and
/// manifest.json into `out`.
pub fn write_outcome(outcome: &RecipeOutcome, world: &World, cfg: &LabConfig, out: &Path) -> Result<Manifest> {
    let ckdir = out.join("checkpoints");
    std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(ckdir.display().to_string(), e))?;
    let mut files = BTreeMap::new();
    let config = serde_json::to_string_pretty(cfg)?;
    let config_sha256 = write(&out.join("config.json"), config.as_bytes())?;
    for (stem, ck) in &outcome.checkpoints {
        let name = format!("checkpoints/{stem}.ckpt");
        files.insert(name.clone(), write(&out.join(&name), &ck.to_bytes()?)?);
    }
    write_curves(&outcome.curves, &out.join("curves.csv"))?;
    let curves = std::fs::read(out.join("curves.csv")).map_err(|e| Error::io("curves.csv", e))?;
    files.insert("curves.csv".into(), sha256_hex(&curves));
    let report = serde_json::to_string_pretty(&outcome.report)?;
    files.insert("report.json".into(), write(&out.join("report.json"), report.as_bytes())?);
    let mut data_sha256 = BTreeMap::new();
    for (lang, s) in &world.summ {
        let all: Vec<&SummExample> = s.train.iter().chain(&s.valid).chain(&s.test).collect();
        data_sha256.insert(lang.clone(), sha256_hex(serde_json::to_string(&all)?.as_bytes()));
    }
    let manifest = Manifest {
        recipe: outcome.report.recipe,
        config_sha256,
        tokenizer: world.tokenizer.fingerprint(),
        backbone: world.backbone.fingerprint(),
        lid_sha256: sha256_hex(world.lid.to_json()?.as_bytes()),
        data_sha256,
        files,
    };
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Final-checkpoint point of a curve.
pub fn last_point<'a>(curves: &'a BTreeMap<String, Vec<CurvePoint>>, lang: &str) -> Option<&'a CurvePoint> {
    curves.get(lang).and_then(|c| c.last())
}

/// First-checkpoint point of a curve.
pub fn first_point<'a>(curves: &'a BTreeMap<String, Vec<CurvePoint>>, lang: &str) -> Option<&'a CurvePoint> {
    curves.get(lang).and_then(|c| c.first())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.name()));
        }
        assert!("vanilla".parse::<Recipe>().is_err());
    }
}

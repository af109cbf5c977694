use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use xgkit::analysis::cluster::{
    agglomerative_cluster, export_heatmap, leaf_order, prompt_similarity_matrix, train_language_prompts,
    within_between,
};
use xgkit::analysis::curves::{learning_curves, write_curves};
use xgkit::analysis::recipe::{run_recipe, write_outcome, Recipe};
use xgkit::analysis::world::{
    backbone_checkpoint, load_corpora, load_summ, load_world, load_world_untrained,
    pretrain_mixture, save_corpora, save_summ, world_corpora, world_lid, world_summ, world_tokenizer, LabConfig,
    World, WorldPaths,
};
use xgkit::corpus::{load_documents, write_jsonl, Schema, SummExample};
use xgkit::metrics::{corpus_eval, pearson, sp_rouge, EvalContext};
use xgkit::model::{
    compose_prompt, pretrain_backbone, train_downstream_task_half, train_factorized, train_model, train_prompt,
    Backbone, Checkpoint, FactorizedData, FactorizedPrompt, Payload, Predictor, Prompt, PromptInit, TrainRun,
};
use xgkit::tasks::{build_task, ExampleStream, Sentinels, TaskKind};
use xgkit::textops::{lead_n_text, trim_trailing_repeats};
use xgkit::util::{derive_rng, sha256_hex};
use xgkit::{Error, Result};

/// Desk-scale toolkit for zero-shot cross-lingual summarization experiments.
#[derive(Parser, Debug)]
#[command(name = "xgkit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// JSON config with flat keys; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override any config key (value parsed as JSON, else taken as a string)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// global seed (falls back to XGKIT_SEED)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// training steps of the stage this command runs
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// learning rate of the stage this command runs
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// κ: percentage of unsupervised examples mixed in
    #[arg(long, global = true)]
    kappa: Option<f64>,
    /// ℓ: prompt length
    #[arg(long = "prompt-len", global = true)]
    prompt_len: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// length-penalty α
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the subword tokenizer on a world's corpora
    TokenizerTrain(WorldArg),
    /// Generate synthetic languages and unlabeled corpora
    GenCorpus(WorldArg),
    /// Generate toy summarization splits for every language
    GenSumm(WorldArg),
    /// Write self-supervised task examples as JSONL
    BuildTasks(BuildTasks),
    /// Train the n-gram language identifier
    LidTrain(WorldArg),
    /// Detection accuracy of a LID model on labeled documents
    LidEval(LidEval),
    /// SP-Rouge between reference and prediction lines
    Rouge(RougeArgs),
    /// Pearson correlation between two columns of numbers
    Correlate(Correlate),
    /// Trim trailing repeated substrings from each line
    Trim(TrimArgs),
    /// First n tokens of each document
    Lead(LeadArgs),
    /// Pretrain the backbone on the self-supervised mixture
    Pretrain(WorldArg),
    /// Tune a soft prompt with the backbone frozen
    PromptTune(TuneArgs),
    /// Tune every backbone parameter
    ModelTune(TuneArgs),
    /// Jointly train language and task sub-prompts
    FactorizedTrain(OutArgs),
    /// Train a task sub-prompt behind a frozen language sub-prompt
    DownstreamTrain(Downstream),
    /// Generate summaries with a checkpoint
    Decode(DecodeArgs),
    /// Evaluate a checkpoint on a language's test split
    Eval(EvalArgs),
    /// Learning curves over a directory of checkpoints
    Curves(CurvesArgs),
    /// Cluster single-row LM prompts of each language
    Cluster(ClusterArgs),
    /// Run an experiment recipe end to end
    Recipe(RecipeArgs),
}

#[derive(Args, Debug, Serialize)]
struct WorldArg {
    /// world directory holding the prerequisites
    #[arg(long)]
    world: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct OutArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BuildTasks {
    #[arg(long)]
    task: TaskKind,
    /// language code recorded on every example
    #[arg(long)]
    lang: String,
    /// JSONL documents, one example built per document
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// JSONL output; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct LidEval {
    #[arg(long)]
    lid: PathBuf,
    /// JSONL documents with `text` and `language`
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RougeArgs {
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct Correlate {
    /// CSV with `system_score` and `human_score` columns
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrimArgs {
    /// text file, one prediction per line; standard input when absent
    #[arg(long)]
    input: Option<PathBuf>,
    /// TSV with one row per line describing what was removed
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct LeadArgs {
    /// summarization JSONL
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TuneArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// training language (defaults to the source language)
    #[arg(long)]
    language: Option<String>,
    /// `summarization` or a self-supervised task name
    #[arg(long, default_value = "summarization")]
    task: String,
}

#[derive(Args, Debug, Serialize)]
struct Downstream {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// factorized checkpoint from `factorized-train`
    #[arg(long)]
    factorized: PathBuf,
    /// task sub-prompt used as the starting point
    #[arg(long, default_value = "span_corruption")]
    init_task: String,
}

#[derive(Args, Debug, Serialize)]
struct Tuned {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// factorized checkpoint whose language sub-prompt goes in front of a
    /// task-half checkpoint
    #[arg(long)]
    factorized: Option<PathBuf>,
    /// language sub-prompt to use with `--factorized` or a factorized checkpoint
    #[arg(long)]
    half: Option<String>,
    /// task sub-prompt to use with a factorized checkpoint
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct DecodeArgs {
    #[command(flatten)]
    tuned: Tuned,
    /// summarization JSONL to summarize
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    tuned: Tuned,
    #[arg(long)]
    language: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CurvesArgs {
    #[arg(long)]
    world: PathBuf,
    /// directory of prompt or backbone checkpoints
    #[arg(long)]
    checkpoints: PathBuf,
    /// comma-separated languages (defaults to all)
    #[arg(long)]
    languages: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ClusterArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
}

#[derive(Args, Debug, Serialize)]
struct RecipeArgs {
    /// vanilla-PT, vanilla-MT, mix-unsup, mix-unsup-all, fp, fp-en, it-lm or it-main-task
    name: Recipe,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xgkit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Config keys that `--steps` and `--lr` address for each command.
fn stage_keys(cmd: &Cmd) -> (Option<&'static str>, Option<&'static str>) {
    match cmd {
        Cmd::Pretrain(_) => (Some("pretrain_steps"), Some("pretrain_lr")),
        Cmd::PromptTune(_) | Cmd::DownstreamTrain(_) | Cmd::Recipe(_) => (Some("tune_steps"), Some("tune_lr")),
        Cmd::ModelTune(_) => (Some("tune_steps"), Some("model_tune_lr")),
        Cmd::FactorizedTrain(_) => (Some("factorized_steps"), Some("factorized_lr")),
        Cmd::Cluster(_) => (Some("cluster_steps"), Some("tune_lr")),
        _ => (None, None),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Defaults, then the config file, then flags; `XGKIT_SEED` fills the seed
/// when neither the file nor a flag sets it.
fn resolve_config(g: &Global, cmd: &Cmd) -> Result<LabConfig> {
    let mut map = match serde_json::to_value(LabConfig::default())? {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut seed_set = false;
    let put = |map: &mut serde_json::Map<String, Value>, k: &str, v: Value| -> Result<()> {
        if !map.contains_key(k) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        map.insert(k.to_string(), v);
        Ok(())
    };
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
        };
        for (k, v) in file {
            seed_set |= k == "seed";
            put(&mut map, &k, v)?;
        }
    }
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        seed_set |= k == "seed";
        put(&mut map, k, parse_value(v))?;
    }
    let (steps_key, lr_key) = stage_keys(cmd);
    let flags: [(Option<&str>, Option<Value>); 7] = [
        (Some("seed"), g.seed.map(Value::from)),
        (steps_key, g.steps.map(Value::from)),
        (lr_key, g.lr.map(Value::from)),
        (Some("kappa"), g.kappa.map(Value::from)),
        (Some("prompt_len"), g.prompt_len.map(Value::from)),
        (Some("beam_size"), g.beam.map(Value::from)),
        (Some("length_penalty_alpha"), g.alpha.map(Value::from)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            let k = k.ok_or_else(|| Error::Config("--steps/--lr do not apply to this command".into()))?;
            seed_set |= k == "seed";
            put(&mut map, k, v)?;
        }
    }
    if !seed_set {
        if let Ok(s) = std::env::var("XGKIT_SEED") {
            let s: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("XGKIT_SEED={s:?} is not an unsigned integer")))?;
            map.insert("seed".into(), Value::from(s));
        }
    }
    LabConfig::from_json(&Value::Object(map).to_string())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(String::from).collect())
}

/// The fully-resolved config and arguments of one run.
fn manifest(command: &str, cfg: &LabConfig, args: &impl Serialize, outputs: &[&Path]) -> Result<String> {
    let mut files = BTreeMap::new();
    for p in outputs {
        if p.is_file() {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            files.insert(p.display().to_string(), sha256_hex(&bytes));
        }
    }
    Ok(serde_json::to_string_pretty(&json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "args": args,
        "outputs": files,
    }))?)
}

/// Writes the manifest into `dir`, named after the command.
fn manifest_in(dir: &Path, command: &str, cfg: &LabConfig, args: &impl Serialize, outputs: &[&Path]) -> Result<()> {
    write_file(&dir.join(format!("manifest.{command}.json")), manifest(command, cfg, args, outputs)?)
}

/// For commands whose result goes to standard output.
fn manifest_stderr(command: &str, cfg: &LabConfig, args: &impl Serialize) -> Result<()> {
    let m: Value = serde_json::from_str(&manifest(command, cfg, args, &[])?)?;
    eprintln!("manifest: {m}");
    Ok(())
}

fn print_json(v: &impl Serialize) -> Result<()> {
    emit(&serde_json::to_string_pretty(v)?)
}

/// One line to standard output; a closed pipe ends the process quietly.
fn emit(line: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        r => r.map_err(|e| Error::io("stdout", e)),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global, &cli.cmd)?;
    match &cli.cmd {
        Cmd::GenCorpus(a) => {
            let paths = WorldPaths::new(&a.world);
            let (specs, corpora) = world_corpora(&cfg)?;
            save_corpora(&specs, &corpora, &paths)?;
            manifest_in(&a.world, "gen-corpus", &cfg, a, &[&paths.languages()])
        }
        Cmd::GenSumm(a) => {
            let paths = WorldPaths::new(&a.world);
            let (specs, _) = load_corpora(&paths)?;
            save_summ(&world_summ(&cfg, &specs)?, &paths)?;
            manifest_in(&a.world, "gen-summ", &cfg, a, &[])
        }
        Cmd::TokenizerTrain(a) => {
            let paths = WorldPaths::new(&a.world);
            let (specs, corpora) = load_corpora(&paths)?;
            let summ = load_summ(&cfg, &specs, &paths)?;
            world_tokenizer(&cfg, &corpora, &summ)?.save(&paths.tokenizer())?;
            manifest_in(&a.world, "tokenizer-train", &cfg, a, &[&paths.tokenizer()])
        }
        Cmd::LidTrain(a) => {
            let paths = WorldPaths::new(&a.world);
            let (_, corpora) = load_corpora(&paths)?;
            world_lid(&cfg, &corpora)?.save(&paths.lid())?;
            manifest_in(&a.world, "lid-train", &cfg, a, &[&paths.lid()])
        }
        Cmd::BuildTasks(a) => build_tasks(&cfg, a),
        Cmd::LidEval(a) => lid_eval(&cfg, a),
        Cmd::Rouge(a) => rouge(&cfg, a),
        Cmd::Correlate(a) => correlate(&cfg, a),
        Cmd::Trim(a) => trim(&cfg, a),
        Cmd::Lead(a) => lead(&cfg, a),
        Cmd::Pretrain(a) => pretrain(&cfg, a),
        Cmd::PromptTune(a) => tune(&cfg, a, false),
        Cmd::ModelTune(a) => tune(&cfg, a, true),
        Cmd::FactorizedTrain(a) => factorized(&cfg, a),
        Cmd::DownstreamTrain(a) => downstream(&cfg, a),
        Cmd::Decode(a) => decode(&cfg, a),
        Cmd::Eval(a) => eval(&cfg, a),
        Cmd::Curves(a) => curves(&cfg, a),
        Cmd::Cluster(a) => cluster(&cfg, a),
        Cmd::Recipe(a) => {
            let world = load_world(&cfg, &WorldPaths::new(&a.world))?;
            let outcome = run_recipe(a.name, &world, &cfg)?;
            write_outcome(&outcome, &world, &cfg, &a.out)?;
            print_json(&outcome.report.eval.languages)
        }
    }
}

fn build_tasks(cfg: &LabConfig, a: &BuildTasks) -> Result<()> {
    let tok = xgkit::tokenizer::SubwordModel::load(&a.tokenizer)?;
    let sentinels = Sentinels::from_model(&tok);
    let params = cfg.task_params();
    let mut examples = Vec::new();
    for (i, d) in load_documents(&a.input, Schema::Plain)?.documents().enumerate() {
        let mut rng = derive_rng(cfg.seed, "build-tasks", i as u64);
        if let Some(mut ex) = build_task(a.task, &tok.encode(&d.text), &mut rng, &params, &sentinels) {
            ex.language = a.lang.clone();
            examples.push(ex);
        }
    }
    match &a.out {
        Some(out) => {
            write_jsonl(out, &examples)?;
            write_file(&manifest_path(out), manifest("build-tasks", cfg, a, &[out])?)
        }
        None => {
            for ex in &examples {
                emit(&serde_json::to_string(ex)?)?;
            }
            manifest_stderr("build-tasks", cfg, a)
        }
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn lid_eval(cfg: &LabConfig, a: &LidEval) -> Result<()> {
    let lid = xgkit::langid::LidModel::load(&a.lid)?;
    let docs: Vec<_> = load_documents(&a.input, Schema::Plain)?.documents().cloned().collect();
    if docs.is_empty() {
        return Err(Error::Input(format!("{}: no documents", a.input.display())));
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for d in &docs {
        let e = per.entry(d.language.clone()).or_default();
        e.1 += 1;
        if lid.detect(&d.text).language == d.language {
            e.0 += 1;
        }
    }
    let correct: usize = per.values().map(|v| v.0).sum();
    let by_language: BTreeMap<&String, f64> = per.iter().map(|(k, v)| (k, 100.0 * v.0 as f64 / v.1 as f64)).collect();
    print_json(&json!({
        "accuracy": 100.0 * correct as f64 / docs.len() as f64,
        "n": docs.len(),
        "by_language": by_language,
    }))?;
    manifest_stderr("lid-eval", cfg, a)
}

fn rouge(cfg: &LabConfig, a: &RougeArgs) -> Result<()> {
    let tok = xgkit::tokenizer::SubwordModel::load(&a.tokenizer)?;
    let refs = read_lines(&a.refs)?;
    let preds = read_lines(&a.preds)?;
    if refs.len() != preds.len() {
        return Err(Error::Input(format!("{} references but {} predictions", refs.len(), preds.len())));
    }
    if refs.is_empty() {
        return Err(Error::Input("no lines to score".into()));
    }
    let (mut l, mut r1, mut r2) = (0.0, 0.0, 0.0);
    for (r, p) in refs.iter().zip(&preds) {
        let s = sp_rouge(&tok, &r.replace("\\n", "\n"), &p.replace("\\n", "\n"));
        l += s.lsum.f1;
        r1 += s.r1.f1;
        r2 += s.r2.f1;
    }
    let n = refs.len() as f64;
    print_json(&json!({
        "lsum": 100.0 * l / n,
        "rouge1": 100.0 * r1 / n,
        "rouge2": 100.0 * r2 / n,
        "n": refs.len(),
    }))?;
    manifest_stderr("rouge", cfg, a)
}

#[derive(serde::Deserialize)]
struct ScoreRow {
    system_score: f64,
    human_score: f64,
}

fn correlate(cfg: &LabConfig, a: &Correlate) -> Result<()> {
    let mut reader = csv::Reader::from_path(&a.scores).map_err(|e| Error::Input(format!("{}: {e}", a.scores.display())))?;
    let rows = reader
        .deserialize::<ScoreRow>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", a.scores.display())))?;
    let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.system_score, r.human_score)).unzip();
    print_json(&json!({ "pearson": pearson(&x, &y)?, "n": rows.len() }))?;
    manifest_stderr("correlate", cfg, a)
}

fn tsv_field(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn trim(cfg: &LabConfig, a: &TrimArgs) -> Result<()> {
    let text = match &a.input {
        Some(p) => read_text(p)?,
        None => {
            let mut s = String::new();
            std::io::stdin().lock().read_to_string(&mut s).map_err(|e| Error::io("stdin", e))?;
            s
        }
    };
    let mut report = String::from("line\toriginal_len\ttrimmed_len\trepetitions_removed\tremoved_unit\n");
    for (i, line) in text.lines().enumerate() {
        let (trimmed, r) = trim_trailing_repeats(line);
        emit(&trimmed)?;
        report.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            i + 1,
            r.original_len,
            r.trimmed_len,
            r.repetitions_removed,
            tsv_field(&r.removed_unit)
        ));
    }
    if let Some(p) = &a.report {
        write_file(p, report)?;
    }
    manifest_stderr("trim", cfg, a)
}

fn lead(cfg: &LabConfig, a: &LeadArgs) -> Result<()> {
    let tok = xgkit::tokenizer::SubwordModel::load(&a.tokenizer)?;
    let n = a.n.unwrap_or(cfg.lead_n);
    for ex in load_documents(&a.input, Schema::Summ)?.summ_examples() {
        emit(&lead_n_text(&ex.document, &tok, n)?)?;
    }
    manifest_stderr("lead", cfg, a)
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

fn pretrain(cfg: &LabConfig, a: &WorldArg) -> Result<()> {
    let paths = WorldPaths::new(&a.world);
    let mut world = load_world_untrained(cfg, &paths)?;
    let mut mix = pretrain_mixture(&world, cfg)?;
    let run = pretrain_backbone(&mut world.backbone, &mut mix, &cfg.pretrain_config())?;
    backbone_checkpoint(&world.backbone).save(&paths.backbone())?;
    let losses = a.world.join("pretrain_losses.csv");
    write_file(&losses, losses_csv(&run.losses))?;
    manifest_in(&a.world, "pretrain", cfg, a, &[&paths.backbone(), &losses])
}

/// Checkpoints as `checkpoints/step000100.ckpt`, plus losses and manifest.
fn write_run(out: &Path, command: &str, cfg: &LabConfig, args: &impl Serialize, run: &TrainRun) -> Result<()> {
    let dir = out.join("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut outputs = Vec::new();
    for ck in &run.checkpoints {
        let p = dir.join(format!("step{:06}.ckpt", ck.step));
        ck.save(&p)?;
        outputs.push(p);
    }
    let losses = out.join("losses.csv");
    write_file(&losses, losses_csv(&run.losses))?;
    outputs.push(losses);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_file(&out.join("manifest.json"), manifest(command, cfg, args, &refs)?)
}

fn training_stream(world: &World, cfg: &LabConfig, language: &str, task: &str) -> Result<ExampleStream> {
    if task == "summarization" {
        world.summ_stream("main", &world.splits(language)?.train, cfg.seed)
    } else {
        world.task_stream(cfg, language, task.parse()?, cfg.seed)
    }
}

fn tune(cfg: &LabConfig, a: &TuneArgs, model: bool) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.world))?;
    let lang = a.language.clone().unwrap_or_else(|| cfg.source_language.clone());
    let mut stream = training_stream(&world, cfg, &lang, &a.task)?;
    let run = if model {
        let mut bb = world.backbone.clone();
        bb.unfreeze();
        train_model(&mut bb, &mut stream, &cfg.tune_config(cfg.tune_steps, cfg.model_tune_lr))?
    } else {
        train_prompt(
            &world.backbone,
            &PromptInit::SampleVocab(cfg.prompt_len),
            &mut stream,
            &cfg.tune_config(cfg.tune_steps, cfg.tune_lr),
        )?
    };
    write_run(&a.out, if model { "model-tune" } else { "prompt-tune" }, cfg, a, &run)
}

fn factorized(cfg: &LabConfig, a: &OutArgs) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.world))?;
    let langs = xgkit::analysis::world::pretrain_language_list(cfg, &world.specs);
    let mut streams = Vec::new();
    for l in &langs {
        for &k in &TaskKind::ALL {
            streams.push(world.task_stream(cfg, l, k, cfg.seed)?);
        }
    }
    let mut data = FactorizedData::new(langs, TaskKind::ALL.to_vec(), streams)?;
    let mut tc = cfg.tune_config(cfg.factorized_steps, cfg.factorized_lr);
    tc.checkpoint_every = 0;
    let run = train_factorized(&world.backbone, &mut data, cfg.half_len, cfg.factorized_init_scale, &tc)?;
    let ck = Checkpoint {
        step: cfg.factorized_steps,
        payload: Payload::Factorized {
            languages: run.languages,
            tasks: run.tasks,
        },
        config: world.backbone.config,
        backbone_fingerprint: world.backbone.fingerprint(),
        source_state: Value::Null,
        loss: run.losses.last().copied().unwrap_or(f64::NAN),
        data_hash: String::new(),
        optimizer: Vec::new(),
    };
    let path = a.out.join("factorized.ckpt");
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    ck.save(&path)?;
    let losses = a.out.join("losses.csv");
    write_file(&losses, losses_csv(&run.losses))?;
    write_file(&a.out.join("manifest.json"), manifest("factorized-train", cfg, a, &[&path, &losses])?)
}

fn factorized_halves(path: &Path) -> Result<(BTreeMap<String, Prompt>, BTreeMap<String, Prompt>)> {
    match Checkpoint::load(path)?.payload {
        Payload::Factorized { languages, tasks } => Ok((languages, tasks)),
        other => Err(Error::Input(format!(
            "{}: expected a factorized checkpoint, found {}",
            path.display(),
            other.kind()
        ))),
    }
}

fn pick<'a>(map: &'a BTreeMap<String, Prompt>, key: &str, what: &str) -> Result<&'a Prompt> {
    map.get(key)
        .ok_or_else(|| Error::Input(format!("no {what} sub-prompt {key:?}")))
}

fn downstream(cfg: &LabConfig, a: &Downstream) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.world))?;
    let (languages, tasks) = factorized_halves(&a.factorized)?;
    let half = pick(&languages, &cfg.source_language, "language")?;
    let init = pick(&tasks, &a.init_task, "task")?;
    let mut stream = training_stream(&world, cfg, &cfg.source_language, "summarization")?;
    let run = train_downstream_task_half(
        &world.backbone,
        half,
        init,
        &mut stream,
        &cfg.tune_config(cfg.tune_steps, cfg.tune_lr),
    )?;
    write_run(&a.out, "downstream-train", cfg, a, &run)
}

enum Model {
    Prompt(Prompt),
    Backbone(Backbone),
}

/// Turns a checkpoint (plus optional factorized halves) into something
/// that can generate.
fn load_tuned(t: &Tuned) -> Result<Model> {
    let ck = Checkpoint::load(&t.checkpoint)?;
    match ck.payload {
        Payload::Backbone(params) => Ok(Model::Backbone(Backbone::from_params(ck.config, params, true)?)),
        Payload::Prompt(p) => match &t.factorized {
            None => Ok(Model::Prompt(p)),
            Some(f) => {
                let (languages, _) = factorized_halves(f)?;
                let lang = t
                    .half
                    .as_deref()
                    .ok_or_else(|| Error::Config("--factorized needs --half".into()))?;
                let half = pick(&languages, lang, "language")?.clone();
                Ok(Model::Prompt(compose_prompt(&FactorizedPrompt::new(half, p)?)?))
            }
        },
        Payload::Factorized { languages, tasks } => {
            let (Some(l), Some(k)) = (&t.half, &t.task) else {
                return Err(Error::Config("a factorized checkpoint needs --half and --task".into()));
            };
            let f = FactorizedPrompt::new(pick(&languages, l, "language")?.clone(), pick(&tasks, k, "task")?.clone())?;
            Ok(Model::Prompt(compose_prompt(&f)?))
        }
    }
}

impl Model {
    fn predictor<'a>(&'a self, world: &'a World) -> Predictor<'a> {
        match self {
            Model::Prompt(p) => Predictor {
                backbone: &world.backbone,
                prompt: Some(p),
            },
            Model::Backbone(b) => Predictor {
                backbone: b,
                prompt: None,
            },
        }
    }
}

fn decode(cfg: &LabConfig, a: &DecodeArgs) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.tuned.world))?;
    let model = load_tuned(&a.tuned)?;
    let p = model.predictor(&world);
    let dc = cfg.decode_config();
    for ex in load_documents(&a.input, Schema::Summ)?.summ_examples() {
        emit(&p.predict(&world.tokenizer, &ex.document, &dc)?.replace('\n', "\\n"))?;
    }
    manifest_stderr("decode", cfg, a)
}

fn eval(cfg: &LabConfig, a: &EvalArgs) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.tuned.world))?;
    let model = load_tuned(&a.tuned)?;
    let test: &[SummExample] = &world.splits(&a.language)?.test;
    let ctx = EvalContext {
        tokenizer: &world.tokenizer,
        lid: &world.lid,
        en_language: &cfg.source_language,
        trim: cfg.trim,
    };
    let preds: Vec<(String, String)> = model
        .predictor(&world)
        .predict_all(&world.tokenizer, test, &cfg.decode_config())?
        .into_iter()
        .map(|(p, _)| (p, a.language.clone()))
        .collect();
    let refs: Vec<String> = test.iter().map(|e| e.summary.clone()).collect();
    let mut report = corpus_eval(&preds, &refs, &ctx)?;
    report.metadata.checkpoint_step = Some(Checkpoint::load(&a.tuned.checkpoint)?.step);
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(out) => {
            write_file(out, &text)?;
            write_file(&manifest_path(out), manifest("eval", cfg, a, &[out])?)
        }
        None => {
            emit(&text)?;
            manifest_stderr("eval", cfg, a)
        }
    }
}

fn curves(cfg: &LabConfig, a: &CurvesArgs) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.world))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.checkpoints)
        .map_err(|e| Error::io(a.checkpoints.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no .ckpt files in {}", a.checkpoints.display())));
    }
    let mut models = Vec::new();
    for f in &files {
        let ck = Checkpoint::load(f)?;
        let m = match ck.payload {
            Payload::Prompt(p) => Model::Prompt(p),
            Payload::Backbone(params) => Model::Backbone(Backbone::from_params(ck.config, params, true)?),
            Payload::Factorized { .. } => {
                return Err(Error::Input(format!("{}: factorized checkpoints have no single prompt", f.display())))
            }
        };
        models.push((ck.step, m));
    }
    let langs: Vec<String> = match &a.languages {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).collect(),
        None => world.specs.iter().map(|s| s.name.clone()).collect(),
    };
    let sets = langs
        .iter()
        .map(|l| Ok((l.clone(), world.splits(l)?.test.clone())))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let predictors: Vec<(u64, Predictor<'_>)> = models.iter().map(|(s, m)| (*s, m.predictor(&world))).collect();
    let ctx = EvalContext {
        tokenizer: &world.tokenizer,
        lid: &world.lid,
        en_language: &cfg.source_language,
        trim: cfg.trim,
    };
    let curves = learning_curves(&predictors, &sets, &ctx, &cfg.decode_config())?;
    write_curves(&curves, &a.out)?;
    write_file(&manifest_path(&a.out), manifest("curves", cfg, a, &[&a.out])?)
}

fn cluster(cfg: &LabConfig, a: &ClusterArgs) -> Result<()> {
    let world = load_world(cfg, &WorldPaths::new(&a.world))?;
    let langs: Vec<String> = world.specs.iter().map(|s| s.name.clone()).collect();
    let prompts = train_language_prompts(&world, cfg, &langs)?;
    let m = prompt_similarity_matrix(&prompts)?;
    let clusters = agglomerative_cluster(&m, a.k)?;
    let order = leaf_order(&m)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let (svg, csv) = (a.out.join("heatmap.svg"), a.out.join("matrix.csv"));
    export_heatmap(&m, &order, &svg, &csv)?;
    let families: BTreeMap<String, String> = world.specs.iter().map(|s| (s.name.clone(), s.family.clone())).collect();
    let (within, between) = within_between(&m, &|l| families.get(l).cloned().unwrap_or_default());
    let summary = json!({
        "clusters": clusters,
        "leaf_order": order,
        "within_family_mean": within,
        "cross_family_mean": between,
    });
    let sp = a.out.join("clusters.json");
    write_file(&sp, serde_json::to_string_pretty(&summary)?)?;
    write_file(&a.out.join("manifest.json"), manifest("cluster", cfg, a, &[&svg, &csv, &sp])?)?;
    print_json(&summary)
}

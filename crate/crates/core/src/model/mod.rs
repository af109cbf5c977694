//! Micro encoder-decoder transformer: soft prompts, training loops,
//! decoding and checkpoint selection.
//!
//! The network is pre-LN with learned absolute positions, GELU feed-forward
//! blocks and an untied output projection. Prompt rows are prepended to the
//! embedded encoder input and carry no positional vector; text positions
//! start at zero whether or not a prompt is present.

pub mod checkpoint;
pub mod decode;
pub mod forward;
pub mod linalg;
pub mod params;
pub mod train;

pub use checkpoint::{Checkpoint, Payload};
pub use decode::{decode, decode_beam, decode_greedy, length_penalty, DecodeConfig, StepScorer, TableScorer};
pub use forward::{batch_loss, forward_loss, full_loss_grad, prompt_grad, prompt_loss_grad};
pub use params::{
    compose_prompt, init_backbone, swap_language, Backbone, BackboneConfig, FactorizedPrompt, Prompt,
    FACTOR_HALF_LEN,
};
pub use train::{
    pretrain_backbone, resume_model, resume_prompt, train_downstream_task_half, train_factorized, train_model,
    train_prompt, FactorizedData, FactorizedRun, OptState, Optimizer, PromptInit, TrainConfig, TrainRun,
};

use crate::corpus::SummExample;
use crate::error::{Error, Result};
use crate::metrics::{corpus_eval, EvalContext};
use crate::tasks::TaskExample;
use crate::tokenizer::SubwordModel;

/// Tokenized summarization pair.
pub fn summ_to_task(tok: &SubwordModel, ex: &SummExample) -> TaskExample {
    TaskExample {
        inputs: tok.encode(&ex.document),
        targets: tok.encode(&ex.summary),
        task: "summarization".into(),
        language: ex.language.clone(),
    }
}

/// A backbone with an optional prompt, ready to generate text.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub backbone: &'a Backbone,
    pub prompt: Option<&'a Prompt>,
}

impl Predictor<'_> {
    pub fn predict(&self, tok: &SubwordModel, document: &str, cfg: &DecodeConfig) -> Result<String> {
        let ids = decode(self.backbone, self.prompt, &tok.encode(document), cfg)?;
        tok.decode_output(&ids)
    }

    pub fn predict_all(&self, tok: &SubwordModel, examples: &[SummExample], cfg: &DecodeConfig) -> Result<Vec<(String, String)>> {
        examples
            .iter()
            .map(|ex| Ok((self.predict(tok, &ex.document, cfg)?, ex.language.clone())))
            .collect()
    }
}

/// SP-RG-Lsum (×100) of a predictor on `validation`, scored for `language`.
pub fn validation_lsum(
    predictor: Predictor<'_>,
    validation: &[SummExample],
    language: &str,
    ctx: &EvalContext<'_>,
    cfg: &DecodeConfig,
) -> Result<f64> {
    let mut preds = predictor.predict_all(ctx.tokenizer, validation, cfg)?;
    for p in &mut preds {
        p.1 = language.to_string();
    }
    let refs: Vec<String> = validation.iter().map(|e| e.summary.clone()).collect();
    let report = corpus_eval(&preds, &refs, ctx)?;
    Ok(report.languages.get(language).map_or(0.0, |s| s.sp_rg_lsum))
}

/// Index of the checkpoint with the best validation SP-RG-Lsum for
/// `language`; ties go to the earliest step. `predictor_for` turns a
/// checkpoint into something that can generate.
pub fn select_checkpoint<F>(
    checkpoints: &[Checkpoint],
    validation: &[SummExample],
    language: &str,
    ctx: &EvalContext<'_>,
    cfg: &DecodeConfig,
    mut predictor_for: F,
) -> Result<usize>
where
    F: FnMut(&Checkpoint, &mut dyn FnMut(Predictor<'_>) -> Result<f64>) -> Result<f64>,
{
    if checkpoints.is_empty() {
        return Err(Error::Input("no checkpoints to select from".into()));
    }
    if validation.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let validation = &validation[..validation.len().min(crate::corpus::VALIDATION_SIZE)];
    if checkpoints.len() == 1 {
        return Ok(0);
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&i| checkpoints[i].step);
    let mut best: Option<(usize, f64)> = None;
    for i in order {
        let score = predictor_for(&checkpoints[i], &mut |p| validation_lsum(p, validation, language, ctx, cfg))?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    Ok(best.expect("non-empty").0)
}

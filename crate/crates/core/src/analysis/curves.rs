//! Per-checkpoint learning curves.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SummExample;
use crate::error::{Error, Result};
use crate::metrics::{corpus_eval, EvalContext};
use crate::model::{DecodeConfig, Predictor};

/// One evaluation of one checkpoint on one language; scores are ×100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub language: String,
    pub sp_rg_lsum: f64,
    pub lid_target: f64,
    pub lid_en: f64,
    pub ascii: f64,
}

/// Decodes every eval set with every checkpoint. Returns one curve per
/// language, sorted by step.
pub fn learning_curves(
    checkpoints: &[(u64, Predictor<'_>)],
    eval_sets: &BTreeMap<String, Vec<SummExample>>,
    ctx: &EvalContext<'_>,
    cfg: &DecodeConfig,
) -> Result<BTreeMap<String, Vec<CurvePoint>>> {
    if checkpoints.is_empty() {
        return Err(Error::Input("no checkpoints to evaluate".into()));
    }
    for (lang, set) in eval_sets {
        if set.is_empty() {
            return Err(Error::Input(format!("empty eval set for {lang}")));
        }
        if ctx.lid.language_index(lang).is_none() {
            return Err(Error::Config(format!("LID model has no language {lang}")));
        }
    }
    let mut order: Vec<&(u64, Predictor<'_>)> = checkpoints.iter().collect();
    order.sort_by_key(|(s, _)| *s);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Input("duplicate checkpoint step".into()));
    }
    let mut out: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for (step, predictor) in order {
        for (lang, set) in eval_sets {
            let preds: Vec<(String, String)> = predictor
                .predict_all(ctx.tokenizer, set, cfg)?
                .into_iter()
                .map(|(p, _)| (p, lang.clone()))
                .collect();
            let refs: Vec<String> = set.iter().map(|e| e.summary.clone()).collect();
            let report = corpus_eval(&preds, &refs, ctx)?;
            let s = &report.languages[lang];
            out.entry(lang.clone()).or_default().push(CurvePoint {
                step: *step,
                language: lang.clone(),
                sp_rg_lsum: s.sp_rg_lsum,
                lid_target: s.lid_target,
                lid_en: s.lid_en,
                ascii: s.ascii,
            });
        }
    }
    Ok(out)
}

/// All curves as CSV rows, languages in order, steps ascending.
pub fn curves_csv(curves: &BTreeMap<String, Vec<CurvePoint>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curves.values().flatten() {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_curves(curves: &BTreeMap<String, Vec<CurvePoint>>, path: &Path) -> Result<()> {
    std::fs::write(path, curves_csv(curves)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

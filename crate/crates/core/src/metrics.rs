//! SP-Rouge (ROUGE over subword ids), Pearson correlation and the
//! per-language evaluation report.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langid::{ascii_fraction, LidModel};
use crate::textops::trim_trailing_repeats;
use crate::tokenizer::SubwordModel;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }

    fn from_counts(hits: usize, cand: usize, reference: usize) -> Self {
        Self::new(hits as f64 / cand.max(1) as f64, hits as f64 / reference.max(1) as f64)
    }
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap.
pub fn rouge_n(reference: &[u32], candidate: &[u32], n: usize) -> Prf {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let r = ngram_counts(reference, n);
    let c = ngram_counts(candidate, n);
    let hits: usize = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    let total = |t: &[u32]| (t.len() + 1).saturating_sub(n);
    Prf::from_counts(hits, total(candidate), total(reference))
}

/// Positions in `a` of one longest common subsequence with `b`.
///
/// Backtrace from the end preferring a diagonal match, then moving up in
/// `a` when that keeps a strictly longer prefix LCS, else left in `b`.
pub fn lcs_positions(a: &[u32], b: &[u32]) -> Vec<usize> {
    let (m, n) = (a.len(), b.len());
    let mut t = vec![0u32; (m + 1) * (n + 1)];
    let at = |i: usize, j: usize| i * (n + 1) + j;
    for i in 1..=m {
        for j in 1..=n {
            t[at(i, j)] = if a[i - 1] == b[j - 1] {
                t[at(i - 1, j - 1)] + 1
            } else {
                t[at(i - 1, j)].max(t[at(i, j - 1)])
            };
        }
    }
    let mut out = Vec::with_capacity(t[at(m, n)] as usize);
    let (mut i, mut j) = (m, n);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[at(i - 1, j)] > t[at(i, j - 1)] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Summary-level ROUGE-L with union LCS.
///
/// For each reference sentence the LCS positions against every candidate
/// sentence are unioned; each matched token is credited only while both a
/// reference and a candidate occurrence of it remain unclaimed.
pub fn rouge_lsum(reference: &[Vec<u32>], candidate: &[Vec<u32>]) -> Prf {
    let ref_total: usize = reference.iter().map(Vec::len).sum();
    let cand_total: usize = candidate.iter().map(Vec::len).sum();
    if ref_total == 0 || cand_total == 0 {
        return Prf::default();
    }
    let mut ref_pool: HashMap<u32, usize> = HashMap::new();
    let mut cand_pool: HashMap<u32, usize> = HashMap::new();
    for t in reference.iter().flatten() {
        *ref_pool.entry(*t).or_insert(0) += 1;
    }
    for t in candidate.iter().flatten() {
        *cand_pool.entry(*t).or_insert(0) += 1;
    }
    let mut hits = 0usize;
    for r in reference {
        let mut union: Vec<usize> = candidate.iter().flat_map(|c| lcs_positions(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for pos in union {
            let tok = r[pos];
            let (rc, cc) = (ref_pool.get_mut(&tok), cand_pool.get_mut(&tok));
            if let (Some(rc), Some(cc)) = (rc, cc) {
                if *rc > 0 && *cc > 0 {
                    *rc -= 1;
                    *cc -= 1;
                    hits += 1;
                }
            }
        }
    }
    Prf::from_counts(hits, cand_total, ref_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpRouge {
    pub r1: Prf,
    pub r2: Prf,
    pub lsum: Prf,
}

/// Newline-separated sentences, trailing whitespace ignored.
pub fn sentences(model: &SubwordModel, text: &str) -> Vec<Vec<u32>> {
    text.trim_end()
        .split('\n')
        .map(|s| s.trim_end())
        .filter(|s| !s.is_empty())
        .map(|s| model.encode(s))
        .collect()
}

pub fn sp_rouge(model: &SubwordModel, reference: &str, candidate: &str) -> SpRouge {
    let rs = sentences(model, reference);
    let cs = sentences(model, candidate);
    let rf: Vec<u32> = rs.concat();
    let cf: Vec<u32> = cs.concat();
    SpRouge {
        r1: rouge_n(&rf, &cf, 1),
        r2: rouge_n(&rf, &cf, 2),
        lsum: rouge_lsum(&rs, &cs),
    }
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Input("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LangScores {
    pub sp_rg_lsum: f64,
    pub sp_rg_1: f64,
    pub sp_rg_2: f64,
    pub lid_target: f64,
    pub lid_en: f64,
    pub ascii: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub trim_applied: bool,
    pub tokenizer_id: String,
    pub checkpoint_step: Option<u64>,
    pub sentence_split: String,
    pub en_language: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: BTreeMap<String, LangScores>,
    pub metadata: ReportMeta,
}

/// Per-example scores before aggregation (all in [0, 1]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleScores {
    pub sp: SpRouge,
    pub lid_target: f64,
    pub lid_en: f64,
    pub ascii: f64,
}

pub struct EvalContext<'a> {
    pub tokenizer: &'a SubwordModel,
    pub lid: &'a LidModel,
    /// language whose LID probability is reported as `lid_en`
    pub en_language: &'a str,
    pub trim: bool,
}

impl EvalContext<'_> {
    pub fn score(&self, prediction: &str, language: &str, reference: &str) -> Result<ExampleScores> {
        let pred = if self.trim {
            trim_trailing_repeats(prediction).0
        } else {
            prediction.to_string()
        };
        Ok(ExampleScores {
            sp: sp_rouge(self.tokenizer, reference, &pred),
            lid_target: self.lid.probability(&pred, language)?,
            lid_en: self.lid.probability(&pred, self.en_language)?,
            ascii: ascii_fraction(&pred),
        })
    }
}

/// Scores every (prediction, language) against its reference and averages
/// per language. All reported values are ×100.
pub fn corpus_eval(
    predictions: &[(String, String)],
    references: &[String],
    ctx: &EvalContext<'_>,
) -> Result<EvalReport> {
    if predictions.len() != references.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} references",
            predictions.len(),
            references.len()
        )));
    }
    let mut acc: BTreeMap<String, Vec<ExampleScores>> = BTreeMap::new();
    for ((pred, lang), reference) in predictions.iter().zip(references) {
        acc.entry(lang.clone()).or_default().push(ctx.score(pred, lang, reference)?);
    }
    let languages = acc
        .into_iter()
        .map(|(lang, xs)| {
            let n = xs.len() as f64;
            let avg = |f: &dyn Fn(&ExampleScores) -> f64| 100.0 * xs.iter().map(f).sum::<f64>() / n;
            let scores = LangScores {
                sp_rg_lsum: avg(&|s| s.sp.lsum.f1),
                sp_rg_1: avg(&|s| s.sp.r1.f1),
                sp_rg_2: avg(&|s| s.sp.r2.f1),
                lid_target: avg(&|s| s.lid_target),
                lid_en: avg(&|s| s.lid_en),
                ascii: avg(&|s| s.ascii),
                n: xs.len(),
            };
            (lang, scores)
        })
        .collect();
    Ok(EvalReport {
        languages,
        metadata: ReportMeta {
            trim_applied: ctx.trim,
            tokenizer_id: ctx.tokenizer.fingerprint(),
            checkpoint_step: None,
            sentence_split: "newline".into(),
            en_language: ctx.en_language.to_string(),
        },
    })
}

//! Character n-gram language identification and the ASCII diagnostic.
//!
//! A multinomial classifier over character 1-, 2- and 3-grams of the
//! space-padded text, add-one smoothed, with one shared out-of-vocabulary
//! bucket per language. Confidence is the posterior of the top language.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const UNDETERMINED: &str = "und";
pub const DEFAULT_MAX_NGRAMS: usize = 20_000;
const ORDERS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidModel {
    pub languages: Vec<String>,
    pub log_priors: Vec<f64>,
    /// n-gram vocabulary; index `ngrams.len()` is the OOV bucket
    pub ngrams: Vec<String>,
    /// `tables[lang][ngram]` = log p(ngram | lang), rows sum to one
    pub tables: Vec<Vec<f64>>,
    pub seed: u64,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub language: String,
    pub confidence: f64,
    /// aligned with [`LidModel::languages`]
    pub posterior: Vec<f64>,
    /// set when the text carried no evidence at all
    pub flagged: bool,
}

fn ngram_counts(text: &str) -> BTreeMap<String, usize> {
    let padded: Vec<char> = std::iter::once(' ').chain(text.chars()).chain(std::iter::once(' ')).collect();
    let mut out = BTreeMap::new();
    for n in ORDERS {
        for w in padded.windows(n) {
            let g: String = w.iter().collect();
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

pub fn train_lid(corpora: &[(String, Vec<Document>)], max_ngrams: usize, seed: u64) -> Result<LidModel> {
    let names: BTreeSet<&str> = corpora.iter().map(|(l, _)| l.as_str()).collect();
    if names.len() != corpora.len() {
        return Err(Error::Config("duplicate language in LID training data".into()));
    }
    if corpora.len() < 2 {
        return Err(Error::Config("LID needs at least two languages".into()));
    }
    let mut per_lang: Vec<BTreeMap<String, usize>> = Vec::with_capacity(corpora.len());
    let mut total: BTreeMap<String, usize> = BTreeMap::new();
    for (lang, docs) in corpora {
        if docs.is_empty() {
            return Err(Error::Config(format!("no LID training documents for {lang}")));
        }
        let mut counts = BTreeMap::new();
        for d in docs {
            for (g, c) in ngram_counts(&d.text) {
                *counts.entry(g.clone()).or_insert(0) += c;
                *total.entry(g).or_insert(0) += c;
            }
        }
        per_lang.push(counts);
    }
    // most frequent n-grams, ties by string
    let mut ranked: Vec<(String, usize)> = total.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_ngrams);
    let mut ngrams: Vec<String> = ranked.into_iter().map(|(g, _)| g).collect();
    ngrams.sort();
    let index: HashMap<String, usize> = ngrams.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();

    let v = ngrams.len() + 1;
    let tables = per_lang
        .iter()
        .map(|counts| {
            let mut row = vec![0usize; v];
            for (g, &c) in counts {
                row[*index.get(g).unwrap_or(&ngrams.len())] += c;
            }
            let denom = (row.iter().sum::<usize>() + v) as f64;
            row.iter().map(|&c| ((c + 1) as f64 / denom).ln()).collect()
        })
        .collect();
    let k = corpora.len() as f64;
    Ok(LidModel {
        languages: corpora.iter().map(|(l, _)| l.clone()).collect(),
        log_priors: vec![-(k.ln()); corpora.len()],
        ngrams,
        tables,
        seed,
        index,
    })
}

impl LidModel {
    fn rebuild_index(&mut self) {
        self.index = self.ngrams.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
    }

    pub fn language_index(&self, lang: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == lang)
    }

    pub fn detect(&self, text: &str) -> Detection {
        let k = self.languages.len();
        if text.trim().is_empty() {
            return Detection {
                language: UNDETERMINED.into(),
                confidence: 0.0,
                posterior: vec![1.0 / k as f64; k],
                flagged: true,
            };
        }
        let oov = self.ngrams.len();
        let feats: Vec<(usize, f64)> = ngram_counts(text)
            .into_iter()
            .map(|(g, c)| (*self.index.get(&g).unwrap_or(&oov), c as f64))
            .collect();
        let scores: Vec<f64> = (0..k)
            .map(|l| self.log_priors[l] + feats.iter().map(|&(i, c)| c * self.tables[l][i]).sum::<f64>())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let posterior: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
        // first maximum wins
        let top = posterior
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > posterior[best] { i } else { best });
        Detection {
            language: self.languages[top].clone(),
            confidence: posterior[top],
            posterior,
            flagged: false,
        }
    }

    /// Posterior probability that `text` is in `lang`; 0 for empty text.
    pub fn probability(&self, text: &str, lang: &str) -> Result<f64> {
        let i = self
            .language_index(lang)
            .ok_or_else(|| Error::Input(format!("language {lang} unknown to the LID model")))?;
        let d = self.detect(text);
        Ok(if d.flagged { 0.0 } else { d.posterior[i] })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut m: LidModel = serde_json::from_str(s)?;
        if m.tables.len() != m.languages.len() || m.log_priors.len() != m.languages.len() {
            return Err(Error::Format("LID model tables do not match language list".into()));
        }
        if m.tables.iter().any(|t| t.len() != m.ngrams.len() + 1) {
            return Err(Error::Format("LID table width does not match n-gram vocabulary".into()));
        }
        m.rebuild_index();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&s)
    }
}

/// Share of Unicode scalar values below 128.
pub fn ascii_fraction(text: &str) -> f64 {
    let (mut ascii, mut total) = (0usize, 0usize);
    for c in text.chars() {
        total += 1;
        if (c as u32) < 128 {
            ascii += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        ascii as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic_multilingual, standard_languages};

    fn docs(lang: &str, texts: &[&str]) -> (String, Vec<Document>) {
        (
            lang.to_string(),
            texts
                .iter()
                .map(|t| Document {
                    text: t.to_string(),
                    language: lang.into(),
                })
                .collect(),
        )
    }

    #[test]
    fn ascii_fraction_fixture() {
        assert_eq!(ascii_fraction("abc"), 1.0);
        assert_eq!(ascii_fraction("aб"), 0.5);
        assert_eq!(ascii_fraction(""), 0.0);
        assert_eq!(ascii_fraction("日本"), 0.0);
    }

    #[test]
    fn tables_are_normalized() {
        let m = train_lid(&[docs("a", &["abc abd"]), docs("b", &["xyz xy"])], 100, 0).unwrap();
        for row in &m.tables {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-9);
        }
    }

    #[test]
    fn config_errors() {
        assert!(matches!(train_lid(&[docs("a", &["x"])], 10, 0), Err(Error::Config(_))));
        assert!(matches!(
            train_lid(&[docs("a", &["x"]), docs("a", &["y"])], 10, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_text_is_undetermined() {
        let m = train_lid(&[docs("a", &["abc"]), docs("b", &["xyz"])], 100, 0).unwrap();
        let d = m.detect("");
        assert_eq!(d.language, UNDETERMINED);
        assert_eq!(d.confidence, 0.0);
        assert!(d.flagged);
        assert_eq!(d.posterior, vec![0.5, 0.5]);
    }

    #[test]
    fn unique_script_dominates_and_mixed_text_is_uncertain() {
        let specs = standard_languages(1, 4).unwrap();
        let corpora = gen_synthetic_multilingual(&specs, 60, 1).unwrap();
        let train: Vec<(String, Vec<Document>)> = corpora.into_iter().collect();
        let m = train_lid(&train, DEFAULT_MAX_NGRAMS, 0).unwrap();
        let (la, cy) = (&specs[0], &specs[1]);
        let base = "ka mi gal fen bok no.";
        let d = m.detect(&cy.encipher(base));
        assert_eq!(d.language, cy.name);
        assert!(d.confidence > 0.99);

        // corpora are ciphers of one grammar, so the two models mirror each
        // other and a text carrying both halves has balanced evidence
        let sym = [
            docs("p", &["abc ab ca ba cab"]),
            docs("q", &["xyz xy zx yx zxy"]),
        ];
        let m = train_lid(&sym, DEFAULT_MAX_NGRAMS, 0).unwrap();
        let d = m.detect("abc ca xyz zx");
        assert!(d.confidence < 0.9, "{d:?}");
        let _ = la;
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = train_lid(&[docs("a", &["abc abd"]), docs("b", &["xyz"])], 100, 3).unwrap();
        let s = m.to_json().unwrap();
        let back = LidModel::from_json(&s).unwrap();
        assert_eq!(back.to_json().unwrap(), s);
        assert_eq!(back.detect("ab").posterior, m.detect("ab").posterior);
    }
}

//! Prediction post-processing and the Lead-n extractive baseline.

use serde::{Deserialize, Serialize};

use crate::corpus::SummExample;
use crate::error::Result;
use crate::tokenizer::SubwordModel;

pub const DEFAULT_LEAD_N: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimReport {
    pub original_len: usize,
    pub trimmed_len: usize,
    /// Unit removed by the first pass; empty when nothing was trimmed.
    pub removed_unit: String,
    pub repetitions_removed: usize,
}

/// Number of back-to-back copies of the length-`m` suffix at the end of `c`.
fn suffix_copies(c: &[char], m: usize) -> usize {
    let n = c.len();
    let unit = &c[n - m..];
    let mut k = 1;
    while (k + 1) * m <= n && &c[n - (k + 1) * m..n - k * m] == unit {
        k += 1;
    }
    k
}

/// Keeps one copy of any prediction-final repeated substring.
///
/// Each pass picks the suffix `u^k` (k >= 2) that removes the most
/// characters, longer `u` on ties, and drops `k - 1` copies; passes repeat
/// until no suffix repeats.
pub fn trim_trailing_repeats(text: &str) -> (String, TrimReport) {
    let mut chars: Vec<char> = text.chars().collect();
    let original_len = chars.len();
    let mut removed_unit = String::new();
    let mut reps = 0;
    loop {
        let n = chars.len();
        let mut best: Option<(usize, usize)> = None; // (removed chars, unit len)
        for m in 1..=n / 2 {
            let k = suffix_copies(&chars, m);
            if k < 2 {
                continue;
            }
            let removed = (k - 1) * m;
            if best.is_none_or(|(r, bm)| removed > r || (removed == r && m > bm)) {
                best = Some((removed, m));
            }
        }
        let Some((removed, m)) = best else { break };
        if reps == 0 {
            removed_unit = chars[n - m..].iter().collect();
        }
        reps += removed / m;
        chars.truncate(n - removed);
    }
    let trimmed: String = chars.iter().collect();
    let report = TrimReport {
        original_len,
        trimmed_len: chars.len(),
        removed_unit,
        repetitions_removed: reps,
    };
    (trimmed, report)
}

/// Decoded first `n` subword tokens of the document.
pub fn lead_n(ex: &SummExample, model: &SubwordModel, n: usize) -> Result<String> {
    lead_n_text(&ex.document, model, n)
}

pub fn lead_n_text(document: &str, model: &SubwordModel, n: usize) -> Result<String> {
    let ids = model.encode(document);
    let mut k = ids.len().min(n);
    // never cut inside a multi-byte character
    loop {
        let (text, clean) = model.decode_checked(&ids[..k])?;
        if clean || k == 0 {
            return Ok(text);
        }
        k -= 1;
    }
}

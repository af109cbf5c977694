//! Corpus ingestion and the synthetic multilingual world.
//!
//! Every synthetic language is a character substitution cipher of one base
//! grammar. Languages in the same family draw their cipher alphabet from the
//! same Unicode block; spaces and punctuation pass through unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskExample;
use crate::util::derive_rng;

pub const DEFAULT_MAX_INPUT: usize = 1024;
pub const DEFAULT_MAX_TARGET: usize = 512;
/// Validation examples per language used for checkpoint selection.
pub const VALIDATION_SIZE: usize = 250;

pub const BASE_ALPHABET: &str = "abcdefghijklmnop";
/// Word that opens every step of a toy how-to document.
pub const STEP_MARKER: &str = "hap";
/// Content words, most frequent first.
pub const BASE_LEXICON: [&str; 24] = [
    "ka", "mi", "no", "be", "lo", "da", "pe", "gi", "gal", "fen", "bok", "mel", "jop", "nid", "cag", "lef",
    "pim", "hob", "dena", "kalo", "mipe", "bagi", "fole", "jeni",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummExample {
    pub document: String,
    pub summary: String,
    pub language: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Plain,
    Summ,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Doc(Document),
    Summ(SummExample),
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub records: Vec<Record>,
    pub skipped: usize,
}

impl Loaded {
    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.records.iter().filter_map(|r| match r {
            Record::Doc(d) => Some(d),
            Record::Summ(_) => None,
        })
    }

    pub fn summ_examples(&self) -> impl Iterator<Item = &SummExample> {
        self.records.iter().filter_map(|r| match r {
            Record::Summ(s) => Some(s),
            Record::Doc(_) => None,
        })
    }
}

fn parse_record(line: &str, schema: Schema) -> Option<Record> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let field = |k: &str| -> Option<String> {
        let s = v.get(k)?.as_str()?;
        (!s.trim().is_empty()).then(|| s.to_string())
    };
    let language = field("language")?;
    match schema {
        Schema::Plain => Some(Record::Doc(Document {
            text: field("text")?,
            language,
        })),
        Schema::Summ => Some(Record::Summ(SummExample {
            document: field("document")?,
            summary: field("summary")?,
            language,
        })),
    }
}

/// Reads one JSON object per line. Blank lines are ignored; malformed ones
/// are skipped and counted. More than 10% malformed is a format error.
pub fn load_documents(path: &Path, schema: Schema) -> Result<Loaded> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Loaded::default();
    let mut seen = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        match parse_record(&line, schema) {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    if seen > 0 && out.skipped * 10 > seen {
        return Err(Error::Format(format!(
            "{}: {} of {} lines malformed",
            path.display(),
            out.skipped,
            seen
        )));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One synthetic language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLangSpec {
    pub name: String,
    pub family: String,
    /// base letter -> surface letter
    pub cipher: BTreeMap<char, char>,
    /// inclusive code point range the cipher output lives in
    pub script_block: (u32, u32),
}

impl SynthLangSpec {
    pub fn identity(name: &str, family: &str) -> Self {
        Self {
            name: name.into(),
            family: family.into(),
            cipher: BASE_ALPHABET.chars().map(|c| (c, c)).collect(),
            script_block: ('a' as u32, 'z' as u32),
        }
    }

    /// Random bijection from the base alphabet into `block`, seeded.
    pub fn generate(name: &str, family: &str, block: (u32, u32), seed: u64) -> Result<Self> {
        let mut targets: Vec<char> = (block.0..=block.1).filter_map(char::from_u32).collect();
        let base: Vec<char> = BASE_ALPHABET.chars().collect();
        if targets.len() < base.len() {
            return Err(Error::Config(format!("script block for {name} has fewer than {} letters", base.len())));
        }
        let mut rng = derive_rng(seed, &format!("cipher:{name}"), 0);
        targets.shuffle(&mut rng);
        let spec = Self {
            name: name.into(),
            family: family.into(),
            cipher: base.into_iter().zip(targets).collect(),
            script_block: block,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("language name is empty".into()));
        }
        let outs: BTreeSet<char> = self.cipher.values().copied().collect();
        if outs.len() != self.cipher.len() {
            return Err(Error::Config(format!("cipher of {} is not a bijection", self.name)));
        }
        for c in BASE_ALPHABET.chars() {
            if !self.cipher.contains_key(&c) {
                return Err(Error::Config(format!("cipher of {} misses base letter {c:?}", self.name)));
            }
        }
        Ok(())
    }

    pub fn encipher(&self, base_text: &str) -> String {
        base_text.chars().map(|c| *self.cipher.get(&c).unwrap_or(&c)).collect()
    }

    pub fn decipher(&self, text: &str) -> String {
        let inv: BTreeMap<char, char> = self.cipher.iter().map(|(&a, &b)| (b, a)).collect();
        text.chars().map(|c| *inv.get(&c).unwrap_or(&c)).collect()
    }

    pub fn marker(&self) -> String {
        self.encipher(STEP_MARKER)
    }
}

pub const ASCII_BLOCK: (u32, u32) = (0x61, 0x7A);
pub const CYRILLIC_BLOCK: (u32, u32) = (0x430, 0x44F);

/// The stock desk-scale world: `per_family` ASCII languages (`la0`, ...)
/// and `per_family` Cyrillic-block languages (`cy0`, ...). `la0` is the
/// source-language stand-in.
pub fn standard_languages(per_family: usize, seed: u64) -> Result<Vec<SynthLangSpec>> {
    let mut out = Vec::new();
    for (prefix, family, block) in [("la", "latin", ASCII_BLOCK), ("cy", "cyrillic", CYRILLIC_BLOCK)] {
        for i in 0..per_family {
            out.push(SynthLangSpec::generate(&format!("{prefix}{i}"), family, block, seed)?);
        }
    }
    Ok(out)
}

pub fn load_lang_specs(path: &Path) -> Result<Vec<SynthLangSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let specs: Vec<SynthLangSpec> = serde_json::from_str(&text)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn zipf_word(rng: &mut impl rand::Rng) -> &'static str {
    // weights 1/(r+1)
    let total: f64 = (0..BASE_LEXICON.len()).map(|r| 1.0 / (r + 1) as f64).sum();
    let mut x = rng.gen::<f64>() * total;
    for (r, w) in BASE_LEXICON.iter().enumerate() {
        x -= 1.0 / (r + 1) as f64;
        if x <= 0.0 {
            return w;
        }
    }
    BASE_LEXICON[BASE_LEXICON.len() - 1]
}

/// Words per document drawn as recurring topic words.
pub const TOPIC_WORDS: usize = 3;
/// Chance that a word slot repeats one of the document's topic words.
pub const TOPIC_RATE: f64 = 0.5;

/// Base-grammar text: 2-4 sentences of 4-10 lexicon words. Each document
/// has a few topic words that recur, so parts of a text are predictable
/// from the rest.
pub fn base_document(rng: &mut impl rand::Rng) -> String {
    let topics: Vec<&str> = (0..TOPIC_WORDS).map(|_| BASE_LEXICON[rng.gen_range(0..BASE_LEXICON.len())]).collect();
    let n_sent = rng.gen_range(2..=4);
    let mut sents = Vec::with_capacity(n_sent);
    for _ in 0..n_sent {
        let n = rng.gen_range(4..=10);
        let words: Vec<&str> = (0..n)
            .map(|_| {
                if rng.gen_bool(TOPIC_RATE) {
                    topics[rng.gen_range(0..topics.len())]
                } else {
                    zipf_word(rng)
                }
            })
            .collect();
        sents.push(format!("{}.", words.join(" ")));
    }
    sents.join(" ")
}

pub fn gen_synthetic_multilingual(
    specs: &[SynthLangSpec],
    docs_per_lang: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Document>>> {
    if specs.len() < 2 {
        return Err(Error::Config("need at least two language specs".into()));
    }
    let families: BTreeSet<&str> = specs.iter().map(|s| s.family.as_str()).collect();
    if families.len() < 2 {
        return Err(Error::Config("need at least two language families".into()));
    }
    let mut out = BTreeMap::new();
    for spec in specs {
        spec.validate()?;
        let docs = (0..docs_per_lang)
            .map(|i| {
                let mut rng = derive_rng(seed, &format!("doc:{}", spec.name), i as u64);
                Document {
                    text: spec.encipher(&base_document(&mut rng)),
                    language: spec.name.clone(),
                }
            })
            .collect();
        if out.insert(spec.name.clone(), docs).is_some() {
            return Err(Error::Config(format!("duplicate language {}", spec.name)));
        }
    }
    Ok(out)
}

/// Base-grammar how-to document and its summary.
pub fn base_howto(rng: &mut impl rand::Rng) -> (String, String) {
    let steps = rng.gen_range(3..=8);
    let mut doc = Vec::new();
    let mut summary = Vec::new();
    for _ in 0..steps {
        let n = rng.gen_range(4..=10);
        doc.push(STEP_MARKER);
        for j in 0..n {
            let w = zipf_word(rng);
            if j == 0 {
                summary.push(w);
            }
            doc.push(w);
        }
    }
    (doc.join(" "), summary.join(" "))
}

pub fn gen_toy_summarization(spec: &SynthLangSpec, n_examples: usize, seed: u64) -> Result<Vec<SummExample>> {
    spec.validate()?;
    Ok((0..n_examples)
        .map(|i| {
            let mut rng = derive_rng(seed, &format!("summ:{}", spec.name), i as u64);
            let (doc, summary) = base_howto(&mut rng);
            SummExample {
                document: spec.encipher(&doc),
                summary: spec.encipher(&summary),
                language: spec.name.clone(),
            }
        })
        .collect())
}

/// The first word after each occurrence of `marker`.
pub fn oracle_summary(document: &str, marker: &str) -> String {
    let words: Vec<&str> = document.split_whitespace().collect();
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if *w == marker {
            if let Some(next) = words.get(i + 1) {
                if *next != marker {
                    out.push(*next);
                }
            }
        }
    }
    out.join(" ")
}

/// Truncates inputs and targets to their first `max_in` / `max_out` ids.
pub fn clip_example(ex: &TaskExample, max_in: usize, max_out: usize) -> TaskExample {
    let mut out = ex.clone();
    out.inputs.truncate(max_in);
    out.targets.truncate(max_out);
    out
}

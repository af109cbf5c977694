//! Byte-level pair-merge subword tokenizer.
//!
//! Text is turned into a byte stream in which every ASCII space becomes the
//! visible word marker `▁` (U+2581) and a non-empty text gets one leading
//! marker. A literal `▁` in the input is escaped to byte `0xFF`, which never
//! occurs in UTF-8, so `decode(encode(s)) == s` holds for every string.
//! Merges never cross word boundaries.
//!
//! Id layout: `PAD=0, EOS=1, UNK=2`, the 256 byte pieces at `3..259`, learned
//! merges after that, unused filler pieces when the corpus runs out of pairs,
//! and the sentinels at the very top (`S_k = |vocab| - 1 - k`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const NUM_SPECIALS: usize = 3;
pub const BYTE_OFFSET: u32 = NUM_SPECIALS as u32;
pub const FIRST_MERGE_ID: u32 = BYTE_OFFSET + 256;
pub const DEFAULT_SENTINELS: usize = 100;
pub const WORD_MARKER: char = '\u{2581}';
const MAGIC: &str = "SPKIT1";
const MARKER_BYTES: [u8; 3] = [0xE2, 0x96, 0x81];
const ESCAPED_MARKER: u8 = 0xFF;
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Special(u32),
    Byte(u8),
    Merged { bytes: Vec<u8>, left: u32, right: u32 },
    Unused(u32),
    Sentinel(u32),
}

/// Trainer knobs. `num_sentinels` is part of the mandatory id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainerConfig {
    pub vocab_size: usize,
    pub num_sentinels: usize,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            num_sentinels: DEFAULT_SENTINELS,
            seed,
        }
    }

    pub fn with_sentinels(mut self, n: usize) -> Self {
        self.num_sentinels = n;
        self
    }

    fn mandatory(&self) -> usize {
        NUM_SPECIALS + 256 + self.num_sentinels
    }
}

/// A trained (immutable) subword vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    pieces: Vec<Piece>,
    merge_ranks: HashMap<(u32, u32), (u32, u32)>,
    num_merges: usize,
    num_sentinels: usize,
    seed: u64,
}

/// Splits text into per-word byte sequences, already marker-encoded.
fn words_of(text: &str) -> Vec<Vec<u8>> {
    let mut words = Vec::new();
    if text.is_empty() {
        return words;
    }
    let mut cur: Vec<u8> = MARKER_BYTES.to_vec();
    let mut buf = [0u8; 4];
    for ch in text.chars() {
        match ch {
            ' ' => {
                words.push(std::mem::take(&mut cur));
                cur.extend_from_slice(&MARKER_BYTES);
            }
            WORD_MARKER => cur.push(ESCAPED_MARKER),
            c => cur.extend_from_slice(c.encode_utf8(&mut buf).as_bytes()),
        }
    }
    words.push(cur);
    words
}

/// Inverse of the byte-stream mapping used by [`words_of`].
fn bytes_to_text(bytes: &[u8]) -> (String, bool) {
    let body = bytes.strip_prefix(&MARKER_BYTES[..]).unwrap_or(bytes);
    let mut out = Vec::with_capacity(body.len());
    let mut i = 0;
    while i < body.len() {
        if body[i..].starts_with(&MARKER_BYTES) {
            out.push(b' ');
            i += 3;
        } else if body[i] == ESCAPED_MARKER {
            out.extend_from_slice(&MARKER_BYTES);
            i += 1;
        } else {
            out.push(body[i]);
            i += 1;
        }
    }
    match String::from_utf8(out) {
        Ok(s) => (s, true),
        Err(e) => (String::from_utf8_lossy(e.as_bytes()).into_owned(), false),
    }
}

pub fn sentinel_text(k: u32) -> String {
    format!("\u{27E8}extra_id_{k}\u{27E9}")
}

/// Trains with the default sentinel count.
pub fn train_subword<S: AsRef<str>>(corpus: &[S], vocab_size: usize, seed: u64) -> Result<SubwordModel> {
    train_with(corpus.iter().map(|s| s.as_ref()), TrainerConfig::new(vocab_size, seed))
}

pub fn train_with<'a, I>(corpus: I, cfg: TrainerConfig) -> Result<SubwordModel>
where
    I: IntoIterator<Item = &'a str>,
{
    if cfg.vocab_size < cfg.mandatory() {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than the {} mandatory pieces",
            cfg.vocab_size,
            cfg.mandatory()
        )));
    }
    let mut freq: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut docs = 0usize;
    for text in corpus {
        docs += 1;
        for w in words_of(text) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    if docs == 0 {
        return Err(Error::Input("training corpus is empty".into()));
    }

    let mut pieces: Vec<Piece> = (0..NUM_SPECIALS as u32).map(Piece::Special).collect();
    pieces.extend((0..=255u8).map(Piece::Byte));

    let mut words: Vec<(Vec<u32>, u64)> = freq
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| BYTE_OFFSET + b as u32).collect(), c))
        .collect();

    let budget = cfg.vocab_size - cfg.mandatory();
    let mut merges = 0usize;
    // a pair whose concatenation is already a piece would break the id/piece bijection
    let mut known: HashSet<Vec<u8>> = HashSet::new();
    while merges < budget {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, c) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0], pair[1])).or_insert(0) += c;
            }
        }
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &c) in &counts {
            if c < 2 || known.contains(&concat(&pieces, pair)) {
                continue;
            }
            best = match best {
                None => Some((pair, c)),
                Some((bp, bc)) => {
                    let better = c > bc
                        || (c == bc && pair_key(&pieces, pair) < pair_key(&pieces, bp));
                    if better {
                        Some((pair, c))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        let Some(((l, r), _)) = best else { break };
        let new_id = pieces.len() as u32;
        let bytes = concat(&pieces, (l, r));
        known.insert(bytes.clone());
        pieces.push(Piece::Merged { bytes, left: l, right: r });
        for (syms, _) in words.iter_mut() {
            apply_merge(syms, l, r, new_id);
        }
        merges += 1;
    }

    let fill = budget - merges;
    pieces.extend((0..fill as u32).map(Piece::Unused));
    pieces.extend((0..cfg.num_sentinels as u32).rev().map(Piece::Sentinel));
    SubwordModel::from_pieces(pieces, cfg.num_sentinels, cfg.seed)
}

fn concat(pieces: &[Piece], (l, r): (u32, u32)) -> Vec<u8> {
    let mut bytes = piece_bytes(pieces, l).to_vec();
    bytes.extend_from_slice(piece_bytes(pieces, r));
    bytes
}

fn pair_key(pieces: &[Piece], pair: (u32, u32)) -> (&[u8], &[u8]) {
    (piece_bytes(pieces, pair.0), piece_bytes(pieces, pair.1))
}

fn piece_bytes(pieces: &[Piece], id: u32) -> &[u8] {
    match &pieces[id as usize] {
        Piece::Byte(b) => std::slice::from_ref(b),
        Piece::Merged { bytes, .. } => bytes,
        _ => &[],
    }
}

fn apply_merge(syms: &mut Vec<u32>, l: u32, r: u32, new_id: u32) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

impl SubwordModel {
    fn from_pieces(pieces: Vec<Piece>, num_sentinels: usize, seed: u64) -> Result<Self> {
        let mut merge_ranks = HashMap::new();
        let mut num_merges = 0;
        for (id, p) in pieces.iter().enumerate() {
            if let Piece::Merged { left, right, .. } = p {
                if *left as usize >= id || *right as usize >= id {
                    return Err(Error::Format(format!("merge {id} refers to a later piece")));
                }
                merge_ranks.insert((*left, *right), (num_merges as u32, id as u32));
                num_merges += 1;
            }
        }
        Ok(Self {
            pieces,
            merge_ranks,
            num_merges,
            num_sentinels,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn num_merges(&self) -> usize {
        self.num_merges
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    /// Id of sentinel `S_k`.
    pub fn sentinel(&self, k: usize) -> Option<u32> {
        (k < self.num_sentinels).then(|| (self.pieces.len() - 1 - k) as u32)
    }

    /// Inverse of [`SubwordModel::sentinel`].
    pub fn sentinel_index(&self, id: u32) -> Option<usize> {
        match self.pieces.get(id as usize) {
            Some(Piece::Sentinel(k)) => Some(*k as usize),
            _ => None,
        }
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        self.sentinel_index(id).is_some()
    }

    /// Id of a learned or byte piece with exactly these bytes.
    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<u32> {
        if bytes.len() == 1 {
            return Some(BYTE_OFFSET + bytes[0] as u32);
        }
        self.pieces.iter().position(|p| matches!(p, Piece::Merged { bytes: b, .. } if b == bytes)).map(|i| i as u32)
    }

    /// Id of a piece whose text (after marker mapping) equals `text`, e.g. `"▁ab"`.
    pub fn id_of_text(&self, text: &str) -> Option<u32> {
        let bytes: Vec<u8> = text
            .chars()
            .flat_map(|c| {
                let mut buf = [0u8; 4];
                c.encode_utf8(&mut buf).as_bytes().to_vec()
            })
            .collect();
        self.id_of_bytes(&bytes)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in words_of(text) {
            self.encode_word(&w, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
        loop {
            let mut best: Option<(u32, usize, u32)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(&(rank, id)) = self.merge_ranks.get(&(syms[i], syms[i + 1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, id));
                    }
                }
            }
            let Some((_, _, id)) = best else { break };
            let (l, r) = match &self.pieces[id as usize] {
                Piece::Merged { left, right, .. } => (*left, *right),
                _ => unreachable!("merge table points at a non-merge piece"),
            };
            apply_merge(&mut syms, l, r, id);
        }
        out.extend_from_slice(&syms);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(self.decode_checked(ids)?.0)
    }

    /// Like [`SubwordModel::decode`]; the flag is false when the ids cut a
    /// multi-byte character and the text needed lossy repair.
    pub fn decode_checked(&self, ids: &[u32]) -> Result<(String, bool)> {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.pieces.get(id as usize) {
                None => {
                    return Err(Error::Input(format!(
                        "token id {id} out of range for vocabulary of {}",
                        self.pieces.len()
                    )))
                }
                Some(Piece::Byte(b)) => bytes.push(*b),
                Some(Piece::Merged { bytes: b, .. }) => bytes.extend_from_slice(b),
                Some(Piece::Sentinel(k)) => bytes.extend_from_slice(sentinel_text(*k).as_bytes()),
                Some(Piece::Special(s)) if *s == UNK_ID => bytes.extend_from_slice("\u{2047}".as_bytes()),
                Some(Piece::Special(_)) | Some(Piece::Unused(_)) => {}
            }
        }
        Ok(bytes_to_text(&bytes))
    }

    /// Decodes up to the first EOS, skipping PAD.
    pub fn decode_output(&self, ids: &[u32]) -> Result<String> {
        let end = ids.iter().position(|&t| t == EOS_ID).unwrap_or(ids.len());
        self.decode(&ids[..end])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}\t{}\t{}\t{}", self.pieces.len(), self.seed, self.num_sentinels);
        let mut rank = 0i64;
        for p in &self.pieces {
            match p {
                Piece::Special(i) => {
                    let _ = writeln!(s, "{}\t-1", SPECIAL_NAMES[*i as usize]);
                }
                Piece::Byte(b) => {
                    let _ = writeln!(s, "{}\t-1", escape_bytes(&[*b]));
                }
                Piece::Merged { bytes, left, right } => {
                    let _ = writeln!(s, "{}\t{rank}\t{left} {right}", escape_bytes(bytes));
                    rank += 1;
                }
                Piece::Unused(k) => {
                    let _ = writeln!(s, "<unused_{k}>\t-1");
                }
                Piece::Sentinel(k) => {
                    let _ = writeln!(s, "<extra_id_{k}>\t-1");
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty tokenizer file".into()))?;
        let h: Vec<&str> = header.split('\t').collect();
        if h.first() != Some(&MAGIC) || h.len() < 3 {
            return Err(Error::Format("missing SPKIT1 header".into()));
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Format(format!("bad {what} in header: {s:?}")))
        };
        let vocab_size = parse(h[1], "vocab_size")? as usize;
        let seed = parse(h[2], "seed")?;
        let num_sentinels = match h.get(3) {
            Some(s) => parse(s, "sentinel count")? as usize,
            None => DEFAULT_SENTINELS.min(vocab_size.saturating_sub(NUM_SPECIALS + 256)),
        };
        if vocab_size < NUM_SPECIALS + 256 + num_sentinels {
            return Err(Error::Format("vocab_size below mandatory piece count".into()));
        }
        let body: Vec<&str> = lines.collect();
        if body.len() != vocab_size {
            return Err(Error::Format(format!(
                "header declares {vocab_size} pieces, file has {}",
                body.len()
            )));
        }
        let sentinel_start = vocab_size - num_sentinels;
        let mut pieces: Vec<Piece> = Vec::with_capacity(vocab_size);
        let mut unused = 0u32;
        for (id, line) in body.iter().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 {
                return Err(Error::Format(format!("line for id {id} has no rank column")));
            }
            let rank: i64 = cols[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad merge rank at id {id}")))?;
            let piece = if id < NUM_SPECIALS {
                Piece::Special(id as u32)
            } else if id < FIRST_MERGE_ID as usize {
                Piece::Byte((id - NUM_SPECIALS) as u8)
            } else if id >= sentinel_start {
                Piece::Sentinel((vocab_size - 1 - id) as u32)
            } else if rank < 0 {
                unused += 1;
                Piece::Unused(unused - 1)
            } else {
                let bytes = unescape_bytes(cols[0])?;
                let (left, right) = match cols.get(2) {
                    Some(pair) => {
                        let mut it = pair.split(' ').map(|x| x.parse::<u32>());
                        match (it.next(), it.next()) {
                            (Some(Ok(l)), Some(Ok(r))) => (l, r),
                            _ => return Err(Error::Format(format!("bad merge pair at id {id}"))),
                        }
                    }
                    None => infer_split(&pieces, &bytes)
                        .ok_or_else(|| Error::Format(format!("cannot split merged piece at id {id}")))?,
                };
                Piece::Merged { bytes, left, right }
            };
            pieces.push(piece);
        }
        Self::from_pieces(pieces, num_sentinels, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    /// Short content hash used in reports and manifests.
    pub fn fingerprint(&self) -> String {
        crate::util::sha256_hex(self.to_text().as_bytes())[..16].to_string()
    }
}

/// For imported vocabularies without explicit pairs: longest left prefix
/// such that both halves are earlier pieces.
fn infer_split(pieces: &[Piece], bytes: &[u8]) -> Option<(u32, u32)> {
    let find = |b: &[u8]| -> Option<u32> {
        if b.len() == 1 {
            return Some(BYTE_OFFSET + b[0] as u32);
        }
        pieces
            .iter()
            .position(|p| matches!(p, Piece::Merged { bytes: x, .. } if x == b))
            .map(|i| i as u32)
    };
    (1..bytes.len()).rev().find_map(|cut| Some((find(&bytes[..cut])?, find(&bytes[cut..])?)))
}

/// Valid printable UTF-8 is written verbatim; everything else as `\xHH`.
fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (valid, bad) = match std::str::from_utf8(rest) {
            Ok(s) => (s, 0),
            Err(e) => {
                let v = e.valid_up_to();
                (std::str::from_utf8(&rest[..v]).unwrap(), e.error_len().unwrap_or(rest.len() - v))
            }
        };
        for ch in valid.chars() {
            match ch {
                '\\' => out.push_str("\\\\"),
                c if c.is_control() => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        let _ = write!(out, "\\x{b:02X}");
                    }
                }
                c => out.push(c),
            }
        }
        let consumed = valid.len();
        for b in &rest[consumed..consumed + bad] {
            let _ = write!(out, "\\x{b:02X}");
        }
        rest = &rest[consumed + bad..];
    }
    out
}

fn unescape_bytes(s: &str) -> Result<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            match raw.get(i + 1) {
                Some(b'\\') => {
                    out.push(b'\\');
                    i += 2;
                }
                Some(b'x') if i + 4 <= raw.len() => {
                    let hex = std::str::from_utf8(&raw[i + 2..i + 4]).map_err(|_| Error::Format("bad escape".into()))?;
                    out.push(u8::from_str_radix(hex, 16).map_err(|_| Error::Format(format!("bad escape \\x{hex}")))?);
                    i += 4;
                }
                _ => return Err(Error::Format(format!("bad escape in piece {s:?}"))),
            }
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    Ok(out)
}

//! Byte-level BPE tokenizer and byte/token bookkeeping.
//!
//! Ids `0..3` are the specials (pad, begin, end); ids `3..259` are the raw
//! bytes; learned merges follow. The configured `vocab_size` counts bytes
//! plus merges, so the id space is `vocab_size + 3`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BEGIN: u32 = 1;
pub const END: u32 = 2;
pub const NUM_SPECIAL: u32 = 3;
pub const BYTE_BASE: u32 = NUM_SPECIAL;
const FORMAT_HEADER: &str = "entroscope-tokenizer v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
    /// Byte expansion of every id; specials map to empty.
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Other
    }
}

/// Splits text into runs of one character class; a single space is
/// attached to the run that follows it.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut cur: Option<Class> = None;
    let mut it = text.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        let next = it.peek().map(|&(_, n)| class(n));
        let lead = c == ' ' && next.is_some_and(|n| n != Class::Space);
        let eff = if lead { next.expect("peeked") } else { class(c) };
        if (lead || cur != Some(eff)) && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        cur = Some(eff);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Tokenizer {
    /// Pure byte tokenizer.
    pub fn bytes() -> Self {
        Self::from_merges(256, Vec::new()).expect("byte vocabulary")
    }

    fn from_merges(vocab_size: usize, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIAL as usize];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let n = pieces.len() as u32;
            if a >= n || b >= n || a < BYTE_BASE || b < BYTE_BASE {
                return Err(Error::format("tokenizer", format!("merge {r} references unknown id")));
            }
            let mut p = pieces[a as usize].clone();
            p.extend_from_slice(&pieces[b as usize]);
            pieces.push(p);
            ranks.insert((a, b), (r, n));
        }
        if 256 + merges.len() > vocab_size {
            return Err(Error::format("tokenizer", "more merges than the vocabulary allows"));
        }
        Ok(Self {
            vocab_size,
            pieces,
            merges,
            ranks,
        })
    }

    /// Learns merges from newline-free documents until `vocab_size` entries exist
    /// or no pair occurs twice.
    pub fn train<S: AsRef<str>>(docs: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < 256 {
            return Err(Error::Config(format!("vocab_size {vocab_size} is below the 256-byte base alphabet")));
        }
        if docs.iter().all(|d| d.as_ref().is_empty()) {
            return Err(Error::Empty("tokenizer training corpus"));
        }
        let mut freq: HashMap<&str, i64> = HashMap::new();
        for d in docs {
            for w in pre_tokenize(d.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut uniq: Vec<(&str, i64)> = freq.into_iter().collect();
        uniq.sort_unstable();
        let mut words: Vec<Vec<u32>> = uniq.iter().map(|(w, _)| w.bytes().map(|b| b as u32 + BYTE_BASE).collect()).collect();
        let counts: Vec<i64> = uniq.iter().map(|&(_, c)| c).collect();

        let mut pair_count: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in w.windows(2) {
                let key = (p[0], p[1]);
                *pair_count.entry(key).or_default() += counts[wi];
                where_.entry(key).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> = pair_count.iter().map(|(&k, &c)| (c, Reverse(k))).collect();

        let mut merges = Vec::new();
        let mut next_id = BYTE_BASE + 256;
        while 256 + merges.len() < vocab_size {
            let Some((c, Reverse(pair))) = heap.pop() else { break };
            if pair_count.get(&pair).copied().unwrap_or(0) != c {
                continue;
            }
            if c < 2 {
                break;
            }
            merges.push(pair);
            let new_id = next_id;
            next_id += 1;
            let mut touched: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            touched.sort_unstable();
            let mut changed: HashSet<(u32, u32)> = HashSet::new();
            for wi in touched {
                let w = &words[wi];
                let cnt = counts[wi];
                for p in w.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_count.get_mut(&key).expect("counted pair") -= cnt;
                    changed.insert(key);
                }
                let mut merged = Vec::with_capacity(w.len());
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                        merged.push(new_id);
                        i += 2;
                    } else {
                        merged.push(w[i]);
                        i += 1;
                    }
                }
                for p in merged.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_count.entry(key).or_default() += cnt;
                    where_.entry(key).or_default().insert(wi);
                    changed.insert(key);
                }
                words[wi] = merged;
            }
            pair_count.remove(&pair);
            let mut changed: Vec<_> = changed.into_iter().collect();
            changed.sort_unstable();
            for key in changed {
                match pair_count.get(&key) {
                    Some(&c) if c > 0 => heap.push((c, Reverse(key))),
                    Some(_) => {
                        pair_count.remove(&key);
                    }
                    None => {}
                }
            }
        }
        Self::from_merges(vocab_size, merges)
    }

    /// Configured size: bytes plus merges, specials excluded.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Size of the id space, specials included.
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    fn encode_word(&self, w: &str, out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = w.bytes().map(|b| b as u32 + BYTE_BASE).collect();
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&(r, id)| (r, i, id)))
                .min();
            let Some((rank, _, id)) = best else { break };
            let pair = self.merges[rank];
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        if self.merges.is_empty() {
            out.extend(text.bytes().map(|b| b as u32 + BYTE_BASE));
            return out;
        }
        for w in pre_tokenize(text) {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Concatenated bytes of the ids; specials contribute nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let p = self.pieces.get(id as usize).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                extent: self.pieces.len(),
            })?;
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|e| Error::format("decoded text", e.to_string()))
    }

    /// Printable form of a single token for reports.
    pub fn token_text(&self, id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            BEGIN => "<s>".into(),
            END => "</s>".into(),
            _ => String::from_utf8_lossy(self.piece(id).unwrap_or_default()).into_owned(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FORMAT_HEADER}").unwrap();
        writeln!(s, "vocab_size {}", self.vocab_size).unwrap();
        writeln!(s, "[specials]\npad {PAD}\nbegin {BEGIN}\nend {END}").unwrap();
        writeln!(s, "[vocab]").unwrap();
        for (id, p) in self.pieces.iter().enumerate().skip(NUM_SPECIAL as usize) {
            let hex: String = p.iter().map(|b| format!("{b:02x}")).collect();
            writeln!(s, "{id} {hex}").unwrap();
        }
        writeln!(s, "[merges]").unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: &str| Error::format("tokenizer file", d.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(bad("missing or unsupported version header"));
        }
        let vocab_size = lines
            .next()
            .and_then(|l| l.strip_prefix("vocab_size "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing vocab_size"))?;
        let mut section = "";
        let mut merges = Vec::new();
        let mut vocab: Vec<Vec<u8>> = Vec::new();
        for line in lines {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            let mut it = line.split_whitespace();
            match section {
                "[specials]" => {
                    let (name, id) = (it.next(), it.next().and_then(|v| v.parse::<u32>().ok()));
                    let want = match name {
                        Some("pad") => PAD,
                        Some("begin") => BEGIN,
                        Some("end") => END,
                        _ => return Err(bad(&format!("unknown special line {line:?}"))),
                    };
                    if id != Some(want) {
                        return Err(bad("special ids differ from this build"));
                    }
                }
                "[vocab]" => {
                    let hex = it.nth(1).unwrap_or("");
                    let bytes = (0..hex.len())
                        .step_by(2)
                        .map(|i| u8::from_str_radix(hex.get(i..i + 2).unwrap_or("zz"), 16))
                        .collect::<std::result::Result<Vec<u8>, _>>()
                        .map_err(|_| bad(&format!("bad hex in {line:?}")))?;
                    vocab.push(bytes);
                }
                "[merges]" => {
                    let a = it.next().and_then(|v| v.parse().ok());
                    let b = it.next().and_then(|v| v.parse().ok());
                    match (a, b) {
                        (Some(a), Some(b)) => merges.push((a, b)),
                        _ => return Err(bad(&format!("bad merge line {line:?}"))),
                    }
                }
                _ => return Err(bad(&format!("line outside a section: {line:?}"))),
            }
        }
        let tok = Self::from_merges(vocab_size, merges)?;
        if vocab.len() + NUM_SPECIAL as usize != tok.pieces.len() || vocab.iter().zip(&tok.pieces[NUM_SPECIAL as usize..]).any(|(a, b)| a != b) {
            return Err(bad("vocabulary does not match merges"));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// First 8 bytes of the SHA-256 of the serialized form.
    pub fn checksum(&self) -> u64 {
        checksum64(self.to_text().as_bytes())
    }
}

pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Token and byte totals of an encoded corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub tokens: u64,
    pub bytes: u64,
}

impl CorpusStats {
    pub fn new(tokens: u64, bytes: u64) -> Result<Self> {
        if tokens == 0 || bytes == 0 {
            return Err(Error::Empty("corpus"));
        }
        Ok(Self { tokens, bytes })
    }

    pub fn bytes_per_token(&self) -> f64 {
        self.bytes as f64 / self.tokens as f64
    }
}

pub fn corpus_stats<S: AsRef<str>>(tok: &Tokenizer, docs: &[S]) -> Result<CorpusStats> {
    let (mut t, mut b) = (0u64, 0u64);
    for d in docs {
        t += tok.encode(d.as_ref()).len() as u64;
        b += d.as_ref().len() as u64;
    }
    CorpusStats::new(t, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_tokenizer_examples() {
        let t = Tokenizer::train(&["hello"], 256).unwrap();
        assert_eq!(t.encode("abc").len(), 3);
        let s = corpus_stats(&t, &["plain ascii text"]).unwrap();
        assert_eq!(s.bytes_per_token(), 1.0);
    }

    #[test]
    fn too_small_vocab() {
        assert!(matches!(Tokenizer::train(&["x"], 255), Err(Error::Config(_))));
        assert!(matches!(Tokenizer::train::<&str>(&[], 300), Err(Error::Empty(_))));
    }

    #[test]
    fn first_merge_is_ab() {
        let t = Tokenizer::train(&["abababababab"], 257).unwrap();
        assert_eq!(t.merges().len(), 1);
        let (a, b) = t.merges()[0];
        assert_eq!((t.piece(a).unwrap(), t.piece(b).unwrap()), (&b"a"[..], &b"b"[..]));
    }

    #[test]
    fn repeated_word_is_one_token() {
        let docs = vec!["wxyz"; 50];
        let t = Tokenizer::train(&docs, 259).unwrap();
        assert_eq!(corpus_stats(&t, &docs).unwrap().bytes_per_token(), 4.0);
    }

    #[test]
    fn pre_tokenize_is_lossless_and_attaches_space() {
        let text = "Hello  world, 42 times\tover é!";
        let parts = pre_tokenize(text);
        assert_eq!(parts.concat(), text);
        assert!(parts.contains(&" world"));
        assert!(parts.contains(&" 42"));
    }

    #[test]
    fn text_round_trip() {
        let t = Tokenizer::train(&["the cat sat on the mat", "the dog sat"], 270).unwrap();
        let back = Tokenizer::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.checksum(), t.checksum());
        assert!(Tokenizer::from_text("garbage").is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC{0,80}") {
            let t = Tokenizer::train(&["the quick brown fox jumps over the lazy dog", "über straße ünd 東京 tokyo"], 300).unwrap();
            prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
        }
    }
}

//! Corpus files and a seeded generator of mixed-language text.
//!
//! A corpus file holds documents separated by blank lines; documents never
//! contain a blank line themselves.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if !cur.is_empty() {
            cur.push('\n');
        }
        cur.push_str(line);
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

pub fn join_documents<S: AsRef<str>>(docs: &[S]) -> String {
    let mut s = String::new();
    for d in docs {
        s.push_str(d.as_ref());
        s.push_str("\n\n");
    }
    s
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let docs = split_documents(&std::fs::read_to_string(path)?);
    if docs.is_empty() {
        return Err(Error::Empty("corpus documents"));
    }
    Ok(docs)
}

pub fn write_corpus<S: AsRef<str>>(path: &Path, docs: &[S]) -> Result<()> {
    std::fs::write(path, join_documents(docs))?;
    Ok(())
}

const EN: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on", "not", "he", "this", "are", "or", "his", "from", "at",
    "which", "but", "have", "an", "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when", "will",
    "would", "who", "so", "no", "river", "market", "signal", "village", "winter", "engine", "library", "garden", "letter", "measure", "harbor", "season",
    "question", "pattern", "window", "history", "number", "station", "forest", "council", "bridge", "model", "entropy", "weather", "morning", "people",
    "ancient", "quiet", "small", "northern", "careful", "bright", "heavy", "open", "early", "strange", "common", "rapid", "local", "final", "simple",
    "walked", "measured", "opened", "carried", "noticed", "built", "returned", "wrote", "followed", "changed", "counted", "crossed", "found", "kept",
];

const DE: &[&str] = &[
    "der", "die", "das", "und", "ist", "nicht", "ein", "eine", "mit", "auf", "für", "über", "größer", "Straße", "Brücke", "Mädchen", "schön", "früh", "Wetter",
    "Fluss", "Stadt", "gehen", "sehen", "wir", "sie", "haben", "wurde", "Bäume", "Käse", "müssen", "zwischen", "Zeitung", "Wald",
];

const FR: &[&str] = &[
    "le", "la", "les", "de", "des", "et", "est", "une", "un", "dans", "pour", "été", "très", "déjà", "où", "ça", "forêt", "château", "fenêtre", "leçon",
    "rivière", "marché", "hiver", "élève", "pièce", "garçon", "nous", "avons", "après", "français", "première",
];

const RU: &[&str] = &[
    "и", "в", "не", "на", "что", "он", "с", "как", "это", "по", "но", "река", "город", "зима", "окно", "книга", "время", "человек", "дорога", "море", "лес",
    "письмо", "утром", "тихо", "большой", "новый", "читать", "писать", "видеть", "работа",
];

const EL: &[&str] = &[
    "και", "το", "η", "ο", "να", "είναι", "θάλασσα", "ποτάμι", "πόλη", "χειμώνας", "παράθυρο", "βιβλίο", "χρόνος", "άνθρωπος", "δρόμος", "φως", "νερό",
];

const ZH: &[&str] = &[
    "我们", "今天", "天气", "城市", "河流", "学生", "老师", "时间", "问题", "世界", "信息", "数据", "模型", "熵", "压缩", "语言", "文字", "早上", "市场", "图书馆",
];

const JA: &[&str] = &["私", "は", "の", "が", "を", "に", "です", "ます", "日本語", "東京", "川", "雨", "本", "学校", "先生", "時間", "毎日", "新しい", "静か"];

const IDENTS: &[&str] = &["count", "total", "buffer", "index", "value", "state", "node", "window", "tokens", "bits", "rate", "scale", "offset", "len", "item"];

fn zipf<'a, R: Rng + ?Sized>(rng: &mut R, words: &[&'a str]) -> &'a str {
    // Heavier weight on early entries: index ~ n * u^2.
    let u: f64 = rng.random();
    words[((u * u) * words.len() as f64) as usize]
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence<R: Rng + ?Sized>(rng: &mut R, words: &[&str], sep: &str, end: &str) -> String {
    let n = rng.random_range(5..16);
    let mut parts: Vec<String> = (0..n).map(|_| zipf(rng, words).to_string()).collect();
    if sep == " " {
        parts[0] = capitalize(&parts[0]);
        if rng.random_bool(0.2) {
            let k = rng.random_range(1..n);
            parts[k] = format!("{},", parts[k]);
        }
    }
    format!("{}{end}", parts.join(sep))
}

fn prose<R: Rng + ?Sized>(rng: &mut R, words: &[&str], sep: &str, end: &str) -> String {
    let paragraphs = rng.random_range(1..4);
    (0..paragraphs)
        .map(|_| {
            let n = rng.random_range(2..7);
            (0..n).map(|_| sentence(rng, words, sep, end)).collect::<Vec<_>>().join(if sep.is_empty() { "" } else { " " })
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn code<R: Rng + ?Sized>(rng: &mut R) -> String {
    let name = format!("{}_{}", IDENTS.choose(rng).unwrap(), IDENTS.choose(rng).unwrap());
    let mut s = format!("fn {name}(xs: &[u32]) -> u64 {{\n    let mut total = 0u64;\n");
    for _ in 0..rng.random_range(1..6) {
        let a = IDENTS.choose(rng).unwrap();
        let k: u32 = rng.random_range(1..100);
        match rng.random_range(0..3) {
            0 => s.push_str(&format!("    let {a} = xs.len() as u64 * {k};\n    total += {a};\n")),
            1 => s.push_str(&format!("    for x in xs {{\n        total += (*x as u64) % {k};\n    }}\n")),
            _ => s.push_str(&format!("    if total > {k} {{\n        total -= {k};\n    }}\n")),
        }
    }
    s.push_str("    total\n}");
    s
}

fn table<R: Rng + ?Sized>(rng: &mut R) -> String {
    let cols = rng.random_range(2..5);
    let rows = rng.random_range(3..12);
    let mut s = (0..cols).map(|c| format!("col{c}")).collect::<Vec<_>>().join(",");
    for r in 0..rows {
        s.push('\n');
        let cells: Vec<String> = (0..cols)
            .map(|c| if c == 0 { format!("{}", 2000 + r) } else { format!("{:.2}", rng.random_range(0.0..1000.0)) })
            .collect();
        s.push_str(&cells.join(","));
    }
    s
}

/// One document of the kind drawn by [`synthetic_corpus`].
pub fn synthetic_document<R: Rng + ?Sized>(rng: &mut R) -> String {
    match rng.random_range(0..100) {
        0..=39 => prose(rng, EN, " ", "."),
        40..=49 => prose(rng, DE, " ", "."),
        50..=59 => prose(rng, FR, " ", "."),
        60..=67 => prose(rng, RU, " ", "."),
        68..=72 => prose(rng, EL, " ", "."),
        73..=79 => prose(rng, ZH, "", "。"),
        80..=84 => prose(rng, JA, "", "。"),
        85..=93 => code(rng),
        _ => table(rng),
    }
}

/// `n` seeded documents mixing English, German, French, Russian, Greek,
/// Chinese and Japanese prose with source code and numeric tables.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_document(&mut rng)).collect()
}

/// Seeded documents until their total size reaches `bytes`.
pub fn synthetic_corpus_bytes(bytes: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut total = 0;
    while total < bytes {
        let d = synthetic_document(&mut rng);
        total += d.len();
        out.push(d);
    }
    out
}

//! Per-token entropy records and their TSV form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const TSV_HEADER: &str = "document_id\ttoken_index\ttoken_text\tmethod\tentropy_nats\tconfidence_flag";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Causal,
    TwoModel,
    SingleModel,
    OcclusionL1,
    OcclusionCos,
    SecondOrder,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Causal, Method::TwoModel, Method::SingleModel, Method::OcclusionL1, Method::OcclusionCos, Method::SecondOrder];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Causal => "causal",
            Method::TwoModel => "two_model",
            Method::SingleModel => "single_model",
            Method::OcclusionL1 => "occlusion_l1",
            Method::OcclusionCos => "occlusion_cos",
            Method::SecondOrder => "second_order",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown entropy method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyRecord {
    pub document: usize,
    pub index: usize,
    pub token_text: String,
    pub method: Method,
    /// Nats. Difference-based methods may go slightly negative.
    pub entropy: f64,
    /// Set for the first tokens of a document, whose estimates see little context.
    pub low_confidence: bool,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => out.push(o),
            None => out.push('\\'),
        }
    }
    out
}

impl EntropyRecord {
    /// Builds records for one document, flagging the first `low_conf` tokens.
    pub fn for_document(document: usize, texts: &[String], entropies: &[f64], method: Method, low_conf: usize) -> Vec<Self> {
        texts
            .iter()
            .zip(entropies)
            .enumerate()
            .map(|(index, (t, &entropy))| Self {
                document,
                index,
                token_text: t.clone(),
                method,
                entropy,
                low_confidence: index < low_conf,
            })
            .collect()
    }

    pub fn to_tsv(records: &[Self]) -> String {
        let mut s = String::from(TSV_HEADER);
        s.push('\n');
        for r in records {
            let flag = if r.low_confidence { "low" } else { "ok" };
            writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.document, r.index, escape(&r.token_text), r.method, r.entropy, flag).unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Vec<Self>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == TSV_HEADER => {}
            _ => return Err(Error::format("entropy tsv", "missing header")),
        }
        let mut out = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::format("entropy tsv", format!("line {}: {what}", n + 2));
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            out.push(Self {
                document: f[0].parse().map_err(|_| bad("document id"))?,
                index: f[1].parse().map_err(|_| bad("token index"))?,
                token_text: unescape(f[2]),
                method: f[3].parse()?,
                entropy: f[4].parse().map_err(|_| bad("entropy"))?,
                low_confidence: match f[5] {
                    "low" => true,
                    "ok" => false,
                    _ => return Err(bad("confidence flag")),
                },
            });
        }
        Ok(out)
    }

    /// Per-document target vectors (NaN where a token has no record), for
    /// documents of the given lengths.
    pub fn to_targets(records: &[Self], doc_lengths: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = doc_lengths.iter().map(|&n| vec![f64::NAN; n]).collect();
        for r in records {
            let slot = out
                .get_mut(r.document)
                .and_then(|d| d.get_mut(r.index))
                .ok_or_else(|| Error::format("entropy tsv", format!("record {}:{} outside the corpus", r.document, r.index)))?;
            *slot = r.entropy;
        }
        Ok(out)
    }

    /// Count and largest magnitude of negative estimates.
    pub fn negative_summary(records: &[Self]) -> (usize, f64) {
        records.iter().filter(|r| r.entropy < 0.0).fold((0, 0.0), |(n, m), r| (n + 1, f64::max(m, -r.entropy)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let texts: Vec<String> = ["a\tb", "\n", "x\\y", "é"].iter().map(|s| s.to_string()).collect();
        let recs = EntropyRecord::for_document(3, &texts, &[0.1, -0.02, 2.0 / 3.0, 5.5], Method::SingleModel, 2);
        let back = EntropyRecord::from_tsv(&EntropyRecord::to_tsv(&recs)).unwrap();
        assert_eq!(back, recs);
        assert!(back[1].low_confidence && !back[2].low_confidence);
        assert_eq!(EntropyRecord::negative_summary(&back), (1, 0.02));
    }

    #[test]
    fn targets_line_up() {
        let texts = vec!["a".to_string(), "b".to_string()];
        let recs = EntropyRecord::for_document(1, &texts, &[0.5, 0.25], Method::Causal, 0);
        let t = EntropyRecord::to_targets(&recs, &[1, 2]).unwrap();
        assert!(t[0][0].is_nan());
        assert_eq!(t[1], vec![0.5, 0.25]);
        assert!(EntropyRecord::to_targets(&recs, &[1, 1]).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(EntropyRecord::from_tsv("nope\n").is_err());
        let bad = format!("{TSV_HEADER}\n0\t1\tx\tmystery\t0.1\tok\n");
        assert!(EntropyRecord::from_tsv(&bad).is_err());
    }
}

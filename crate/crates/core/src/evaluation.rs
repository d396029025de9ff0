//! Corpus BLEU, alignment error rate and length-bucketed scoring.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{NmtError, Result};

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// BLEU on the 0–100 scale.
    pub score: f64,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, hyp_len={}, ref_len={})",
            self.score,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level, case-sensitive 4-gram BLEU with clipped counts and a single
/// reference per hypothesis.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(NmtError::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(NmtError::InvalidArgument("empty corpus".into()));
    }
    let mut matched = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=BLEU_ORDER {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Err(NmtError::InvalidArgument("all hypotheses are empty".into()));
    }
    let mut precisions = [0.0; BLEU_ORDER];
    for n in 0..BLEU_ORDER {
        precisions[n] = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Position-wise token accuracy: the share of reference tokens matched by the
/// hypothesis token at the same index.
pub fn token_accuracy(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(NmtError::InvalidArgument("hypothesis and reference counts differ".into()));
    }
    let total: usize = references.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(NmtError::InvalidArgument("no reference tokens".into()));
    }
    let correct: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(correct as f64 / total as f64)
}

pub type Links = BTreeSet<(usize, usize)>;

/// Gold links for one sentence. Sure links are a subset of possible links.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldAlignment {
    pub sure: Links,
    pub possible: Links,
}

fn parse_pair(item: &str, sep: char) -> Option<(usize, usize)> {
    let (t, s) = item.split_once(sep)?;
    Some((t.parse().ok()?, s.parse().ok()?))
}

/// Parses `t-s` links separated by whitespace.
pub fn parse_links(line: &str) -> std::result::Result<Links, String> {
    line.split_whitespace()
        .map(|item| parse_pair(item, '-').ok_or_else(|| format!("bad link {item:?}")))
        .collect()
}

/// Parses gold links: `t-s` is sure, `t?s` is possible.
pub fn parse_gold(line: &str) -> std::result::Result<GoldAlignment, String> {
    let mut gold = GoldAlignment::default();
    for item in line.split_whitespace() {
        if let Some(link) = parse_pair(item, '-') {
            gold.sure.insert(link);
            gold.possible.insert(link);
        } else if let Some(link) = parse_pair(item, '?') {
            gold.possible.insert(link);
        } else {
            return Err(format!("bad gold link {item:?}"));
        }
    }
    Ok(gold)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn read_links(path: &Path) -> Result<Vec<Links>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            parse_links(l).map_err(|msg| NmtError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldAlignment>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            parse_gold(l).map_err(|msg| NmtError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Corpus alignment error rate,
/// `1 − (|A∩S| + |A∩P|) / (|A| + |S|)` with `P` including `S`.
pub fn aer(predicted: &[Links], gold: &[GoldAlignment]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(NmtError::InvalidArgument(format!(
            "{} predicted sentences but {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut a_s, mut a_p, mut a, mut s) = (0usize, 0usize, 0usize, 0usize);
    for (pred, g) in predicted.iter().zip(gold) {
        a += pred.len();
        s += g.sure.len();
        for link in pred {
            if g.sure.contains(link) {
                a_s += 1;
            }
            if g.possible.contains(link) || g.sure.contains(link) {
                a_p += 1;
            }
        }
    }
    if a + s == 0 {
        return Err(NmtError::InvalidArgument("no predicted or sure links".into()));
    }
    Ok(1.0 - (a_s + a_p) as f64 / (a + s) as f64)
}

/// Source-length buckets `[edges[i], edges[i+1])`; the last bucket is open.
pub const DEFAULT_BUCKET_EDGES: [usize; 7] = [0, 10, 20, 30, 40, 50, 60];

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub lower: usize,
    pub upper: Option<usize>,
    pub sentences: usize,
    /// `None` when the bucket is empty or all its hypotheses are empty.
    pub bleu: Option<BleuReport>,
}

impl Bucket {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("{}-{}", self.lower, u - 1),
            None => format!("{}+", self.lower),
        }
    }
}

pub fn length_buckets(
    sources: &[Vec<String>],
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    edges: &[usize],
) -> Result<Vec<Bucket>> {
    if sources.len() != hypotheses.len() || hypotheses.len() != references.len() {
        return Err(NmtError::InvalidArgument("source, hypothesis and reference counts differ".into()));
    }
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NmtError::InvalidArgument("bucket edges must be strictly increasing".into()));
    }
    let mut buckets = Vec::with_capacity(edges.len());
    for (i, &lower) in edges.iter().enumerate() {
        let upper = edges.get(i + 1).copied();
        let members: Vec<usize> = (0..sources.len())
            .filter(|&k| {
                let len = sources[k].len();
                len >= lower && upper.is_none_or(|u| len < u)
            })
            .collect();
        let bleu = if members.is_empty() {
            None
        } else {
            let hyp: Vec<Vec<String>> = members.iter().map(|&k| hypotheses[k].clone()).collect();
            let refs: Vec<Vec<String>> = members.iter().map(|&k| references[k].clone()).collect();
            bleu(&hyp, &refs).ok()
        };
        buckets.push(Bucket {
            lower,
            upper,
            sentences: members.len(),
            bleu,
        });
    }
    Ok(buckets)
}

/// Tab-separated table with one row per bucket; absent values print as `-`.
pub fn format_buckets(buckets: &[Bucket]) -> String {
    let mut out = String::from("length\tsentences\tbleu\n");
    for b in buckets {
        let score = b.bleu.as_ref().map_or_else(|| "-".to_string(), |r| format!("{:.2}", r.score));
        out.push_str(&format!("{}\t{}\t{}\n", b.label(), b.sentences, score));
    }
    out
}

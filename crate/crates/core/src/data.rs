//! Corpus ingestion, vocabularies, and mini-batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{NmtError, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Token ↔ id bijection; id 0 is the unknown token, id 1 end-of-sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from `tokens` in order, after the reserved pair.
    /// Duplicates and reserved strings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [UNK.to_string(), EOS.to_string()]
            .into_iter()
            .chain(tokens.into_iter().map(Into::into))
        {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// The `max_size − 2` most frequent tokens of `sentences`, ties broken
    /// by first occurrence.
    pub fn from_sentences<'a, I>(sentences: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < 3 {
            return Err(NmtError::InvalidArgument(format!(
                "vocabulary size must be at least 3, got {max_size}"
            )));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0;
        for sent in sentences {
            for tok in sent {
                let e = counts.entry(tok.as_str()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                e.0 += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        Ok(Self::from_tokens(
            ranked
                .into_iter()
                .filter(|(t, _, _)| *t != UNK && *t != EOS)
                .take(max_size - 2)
                .map(|(t, _, _)| t.to_string()),
        ))
    }

    /// One token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < 2 || tokens[0] != UNK || tokens[1] != EOS {
            return Err(NmtError::Parse {
                path: path.into(),
                line: 1,
                msg: format!("first two lines must be {UNK} and {EOS}"),
            });
        }
        let v = Self::from_tokens(tokens[2..].iter().copied());
        if v.len() != tokens.len() {
            return Err(NmtError::Parse {
                path: path.into(),
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| NmtError::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| NmtError::io(path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or [`UNK_ID`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Reads a tokenized corpus: one sentence per line, tokens separated by spaces.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn write_corpus(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| NmtError::io(path, e))
}

/// Reads two line-aligned corpora as sentence pairs.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let s = read_corpus(src)?;
    let t = read_corpus(tgt)?;
    if s.len() != t.len() {
        return Err(NmtError::Parse {
            path: tgt.into(),
            line: t.len().min(s.len()) + 1,
            msg: format!("{} source lines but {} target lines", s.len(), t.len()),
        });
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn build_vocab(corpus: &Path, max_size: usize) -> Result<Vocabulary> {
    let sents = read_corpus(corpus)?;
    Vocabulary::from_sentences(sents.iter().map(Vec::as_slice), max_size)
}

/// An encoded training pair. Both id sequences end with [`EOS_ID`].
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Source tokens in original order, before reversal and id mapping.
    pub source_tokens: Vec<String>,
}

impl SentencePair {
    /// Source length without the terminator.
    pub fn source_len(&self) -> usize {
        self.source.len() - 1
    }

    pub fn target_len(&self) -> usize {
        self.target.len() - 1
    }
}

pub fn encode_pair(
    src: &[String],
    tgt: &[String],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    reverse_source: bool,
) -> SentencePair {
    SentencePair {
        source: encode_source(src, src_vocab, reverse_source),
        target: tgt_vocab.encode(tgt).into_iter().chain([EOS_ID]).collect(),
        source_tokens: src.to_vec(),
    }
}

/// Source ids, reversed when requested, followed by the terminator.
pub fn encode_source(src: &[String], vocab: &Vocabulary, reverse: bool) -> Vec<usize> {
    let mut ids = vocab.encode(src);
    if reverse {
        ids.reverse();
    }
    ids.push(EOS_ID);
    ids
}

/// Padded mini-batch. Matrices are row-major `[batch × max_len]`; padded
/// cells hold [`UNK_ID`] and are false in the masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<SentencePair>,
    pub src_ids: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub src_width: usize,
    pub tgt_ids: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    pub tgt_width: usize,
}

fn pad(seqs: &[&[usize]]) -> (Vec<usize>, Vec<bool>, usize) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = vec![UNK_ID; seqs.len() * width];
    let mut mask = vec![false; seqs.len() * width];
    for (b, s) in seqs.iter().enumerate() {
        ids[b * width..b * width + s.len()].copy_from_slice(s);
        mask[b * width..b * width + s.len()].iter_mut().for_each(|m| *m = true);
    }
    (ids, mask, width)
}

impl Batch {
    pub fn new(pairs: Vec<SentencePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(NmtError::InvalidArgument("empty batch".into()));
        }
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        let (src_ids, src_mask, src_width) = pad(&src);
        let (tgt_ids, tgt_mask, tgt_width) = pad(&tgt);
        Ok(Batch {
            pairs,
            src_ids,
            src_mask,
            src_width,
            tgt_ids,
            tgt_mask,
            tgt_width,
        })
    }

    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    /// Source lengths including the terminator.
    pub fn src_lens(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.source.len()).collect()
    }

    /// Target tokens that contribute to the loss (terminators included).
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|m| **m).count()
    }

    /// Column `t` of the source id matrix.
    pub fn src_column(&self, t: usize) -> (Vec<usize>, Vec<bool>) {
        column(&self.src_ids, &self.src_mask, self.src_width, t)
    }

    pub fn tgt_column(&self, t: usize) -> (Vec<usize>, Vec<bool>) {
        column(&self.tgt_ids, &self.tgt_mask, self.tgt_width, t)
    }
}

fn column(ids: &[usize], mask: &[bool], width: usize, t: usize) -> (Vec<usize>, Vec<bool>) {
    let rows = ids.len() / width;
    (
        (0..rows).map(|b| ids[b * width + t]).collect(),
        (0..rows).map(|b| mask[b * width + t]).collect(),
    )
}

/// Drops pairs with either side longer than `max_len` tokens (terminator
/// excluded).
pub fn filter_by_length(pairs: &[SentencePair], max_len: usize) -> Vec<SentencePair> {
    pairs
        .iter()
        .filter(|p| p.source_len() <= max_len && p.target_len() <= max_len)
        .cloned()
        .collect()
}

/// Length-filters, shuffles with `rng`, and chunks into batches of up to
/// `batch_size` pairs.
pub fn make_batches<R: Rng + ?Sized>(
    pairs: &[SentencePair],
    batch_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(NmtError::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut kept = filter_by_length(pairs, max_len);
    kept.shuffle(rng);
    batches_in_order(kept, batch_size)
}

/// Chunks pairs into batches without filtering or shuffling.
pub fn batches_in_order(pairs: Vec<SentencePair>, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(NmtError::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut it = pairs.into_iter().peekable();
    while it.peek().is_some() {
        out.push(Batch::new(it.by_ref().take(batch_size).collect())?);
    }
    Ok(out)
}

/// Synthetic reverse-copy task: random symbol strings whose translation is
/// the same string reversed. Symbols are `w0 .. w{symbols-1}`.
pub fn reverse_copy_corpus<R: Rng + ?Sized>(
    count: usize,
    symbols: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut R,
) -> Vec<(Vec<String>, Vec<String>)> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..symbols))).collect();
            let tgt = src.iter().rev().cloned().collect();
            (src, tgt)
        })
        .collect()
}

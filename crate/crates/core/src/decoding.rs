//! Greedy translation, forced decoding, alignment extraction and unknown-word
//! replacement.
//!
//! Alignment attribution: at decoder step `t` the model reads `y_{t−1}` and
//! predicts `y_t`. For the location score the step's weights are attributed to
//! the predicted word `y_t`; for content scores they are attributed to the
//! input word `y_{t−1}`, so the first step's row (whose input is the
//! end-of-sentence marker) is dropped and every row shifts up by one.

use crate::attention::ScoreKind;
use crate::data::{encode_source, Batch, SentencePair, Vocabulary, EOS_ID, UNK, UNK_ID};
use crate::error::{NmtError, Result};
use crate::model::{decode_step, encode, forward_batch, Mode, NmtModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Attention captured when the decoder emitted (or was forced through) one token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub token: usize,
    /// Weights over source positions in encoder order, terminator last.
    pub weights: Vec<f64>,
    pub position: Option<f64>,
    /// Position of the largest weight (first on ties).
    pub argmax: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// One record per emitted id, the terminator included; empty for models
    /// without attention.
    pub records: Vec<DecodeRecord>,
    /// True when `max_len` was reached before the terminator.
    pub truncated: bool,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn record(token: usize, weights: Vec<f64>, position: Option<f64>) -> DecodeRecord {
    DecodeRecord {
        token,
        argmax: argmax(&weights),
        weights,
        position,
    }
}

/// Greedy decoding from already-encoded source ids (terminator included).
/// Output ids exclude the terminator.
pub fn greedy_decode(model: &NmtModel, source: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<DecodeRecord>, bool)> {
    if max_len == 0 {
        return Err(NmtError::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let width = source.len();
    let enc = encode(&mut tape, model, &vars, source, &vec![true; width], width, &mut Mode::Eval)?;
    let mut state = enc.final_state.clone();
    let mut feed = tape.constant(Tensor::zeros(&[1, model.config.cells]));
    let mut prev = EOS_ID;
    let mut ids = Vec::new();
    let mut records = Vec::new();
    let mut finished = false;
    for t in 0..max_len {
        let out = decode_step(&mut tape, model, &vars, &state, &[prev], feed, enc.memory.as_ref(), t, &mut Mode::Eval)?;
        let id = argmax(tape.value(out.log_probs).data());
        if let Some(att) = &out.attention {
            records.push(record(
                id,
                tape.value(att.weights).data().to_vec(),
                att.position.map(|p| tape.value(p).data()[0]),
            ));
        }
        if id == EOS_ID {
            finished = true;
            break;
        }
        ids.push(id);
        prev = id;
        state = out.state;
        feed = out.feed;
    }
    Ok((ids, records, !finished))
}

pub fn greedy_translate(
    model: &NmtModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    source: &[String],
    max_len: usize,
) -> Result<Translation> {
    let src = encode_source(source, src_vocab, model.config.reverse_source);
    let (ids, records, truncated) = greedy_decode(model, &src, max_len)?;
    Ok(Translation {
        tokens: tgt_vocab.decode(&ids),
        ids,
        records,
        truncated,
    })
}

/// Teacher-forced pass over `pair.target`, recording attention at every step.
pub fn force_decode_pair(model: &NmtModel, pair: &SentencePair) -> Result<Vec<DecodeRecord>> {
    if model.attention.is_none() {
        return Err(NmtError::Config("force decoding needs an attentional model".into()));
    }
    if pair.target.is_empty() || pair.source.is_empty() {
        return Err(NmtError::InvalidArgument("force decoding needs a source and a reference".into()));
    }
    let batch = Batch::new(vec![pair.clone()])?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = forward_batch(&mut tape, model, &vars, &batch, &mut Mode::Eval, true)?;
    Ok(fwd.records[0]
        .iter()
        .zip(&pair.target)
        .map(|(r, &tok)| record(tok, r.weights.clone(), r.position))
        .collect())
}

pub fn force_decode(
    model: &NmtModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    source: &[String],
    reference: &[String],
) -> Result<Vec<DecodeRecord>> {
    if reference.is_empty() {
        return Err(NmtError::InvalidArgument("empty reference".into()));
    }
    let pair = crate::data::encode_pair(source, reference, src_vocab, tgt_vocab, model.config.reverse_source);
    force_decode_pair(model, &pair)
}

/// Alignment weights re-indexed to target words × source positions in
/// original order. Column `source_len` is the source terminator.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Target word id each row is attributed to.
    pub row_tokens: Vec<usize>,
    /// Source length without the terminator.
    pub source_len: usize,
    /// One `(target, source)` link per non-terminator row, by argmax over
    /// real source words.
    pub links: Vec<(usize, usize)>,
}

impl AlignmentMatrix {
    /// Number of nonzero cells in each row.
    pub fn support(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter().filter(|&&w| w > 0.0).count()).collect()
    }
}

/// Maps an encoder position to the original source index (terminator stays last).
pub fn restore_source_index(j: usize, source_len: usize, reversed: bool) -> usize {
    if reversed && j < source_len {
        source_len - 1 - j
    } else {
        j
    }
}

pub fn attribute_alignments(
    records: &[DecodeRecord],
    kind: ScoreKind,
    source_len: usize,
    reversed: bool,
) -> Result<AlignmentMatrix> {
    let cols = source_len + 1;
    if let Some(r) = records.iter().find(|r| r.weights.len() != cols) {
        return Err(NmtError::shape("attribute_alignments", &[cols], &[r.weights.len()]));
    }
    // Content scores: row t describes the input word y_{t-1}.
    let (rows_from, tokens_from) = if kind.is_content() {
        (records.get(1..).unwrap_or(&[]), records)
    } else {
        (records, records)
    };
    let mut rows = Vec::with_capacity(rows_from.len());
    let mut row_tokens = Vec::with_capacity(rows_from.len());
    for (r, word) in rows_from.iter().zip(tokens_from) {
        let mut row = vec![0.0; cols];
        for (j, &w) in r.weights.iter().enumerate() {
            row[restore_source_index(j, source_len, reversed)] = w;
        }
        rows.push(row);
        row_tokens.push(word.token);
    }
    let links = if source_len == 0 {
        Vec::new()
    } else {
        rows.iter()
            .zip(&row_tokens)
            .enumerate()
            .filter(|(_, (_, &tok))| tok != EOS_ID)
            .map(|(t, (row, _))| (t, argmax(&row[..source_len])))
            .collect()
    };
    Ok(AlignmentMatrix {
        rows,
        row_tokens,
        source_len,
        links,
    })
}

/// Replaces every unknown token that has an alignment link with the linked
/// source word.
pub fn unk_replace(target: &[String], alignment: &AlignmentMatrix, source: &[String]) -> Vec<String> {
    target
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            if tok != UNK {
                return tok.clone();
            }
            alignment
                .links
                .iter()
                .find(|(t, _)| *t == i)
                .and_then(|&(_, s)| source.get(s))
                .cloned()
                .unwrap_or_else(|| tok.clone())
        })
        .collect()
}

/// Pharaoh-style `t-s` pairs separated by spaces.
pub fn format_links(links: &[(usize, usize)]) -> String {
    links.iter().map(|(t, s)| format!("{t}-{s}")).collect::<Vec<_>>().join(" ")
}

/// Convenience: is `id` the unknown-token id.
pub fn is_unk(id: usize) -> bool {
    id == UNK_ID
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, Mechanism};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(token: usize, weights: Vec<f64>) -> DecodeRecord {
        record(token, weights, None)
    }

    fn identity_records(n: usize) -> Vec<DecodeRecord> {
        // n words + terminator; step t attends to source position t.
        (0..=n)
            .map(|t| {
                let mut w = vec![0.0; n + 1];
                w[t] = 1.0;
                rec(if t == n { EOS_ID } else { 2 + t }, w)
            })
            .collect()
    }

    #[test]
    fn location_rows_unshifted() {
        let m = attribute_alignments(&identity_records(3), ScoreKind::Location, 3, false).unwrap();
        assert_eq!(m.rows.len(), 4);
        assert_eq!(m.links, vec![(0, 0), (1, 1), (2, 2)]);
        for (t, row) in m.rows.iter().enumerate() {
            assert_eq!(row[t], 1.0);
        }
    }

    #[test]
    fn content_rows_shift_by_one() {
        let recs = identity_records(3);
        let m = attribute_alignments(&recs, ScoreKind::Dot, 3, false).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.row_tokens, vec![2, 3, 4]);
        assert_eq!(m.rows[0], recs[1].weights);
        assert_eq!(m.links, vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn reversal_restored_and_values_preserved() {
        let recs = vec![rec(5, vec![0.1, 0.2, 0.3, 0.4]), rec(EOS_ID, vec![0.7, 0.1, 0.1, 0.1])];
        let m = attribute_alignments(&recs, ScoreKind::Location, 3, true).unwrap();
        assert_eq!(m.rows[0], vec![0.3, 0.2, 0.1, 0.4]);
        assert_eq!(m.links, vec![(0, 0)]);
        for (r, row) in recs.iter().zip(&m.rows) {
            let mut a = r.weights.clone();
            let mut b = row.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn restore_is_involution() {
        for j in 0..6 {
            let once = restore_source_index(j, 5, true);
            assert_eq!(restore_source_index(once, 5, true), j);
        }
    }

    #[test]
    fn unk_replacement() {
        let src: Vec<String> = ["Mr", "Kerr", "said"].iter().map(|s| s.to_string()).collect();
        let m = AlignmentMatrix {
            rows: vec![vec![0.0; 4]; 3],
            row_tokens: vec![2, 0, 3],
            source_len: 3,
            links: vec![(0, 0), (1, 1), (2, 2)],
        };
        let out = unk_replace(&["Herr".into(), UNK.into(), "sagte".into()], &m, &src);
        assert_eq!(out, vec!["Herr", "Kerr", "sagte"]);
        let none = unk_replace(&["a".into(), "b".into()], &m, &src);
        assert_eq!(none, vec!["a", "b"]);
        let all = unk_replace(&[UNK.into(), UNK.into(), UNK.into()], &m, &src);
        assert_eq!(all, src);
    }

    #[test]
    fn pharaoh_format() {
        assert_eq!(format_links(&[(0, 2), (1, 0)]), "0-2 1-0");
        assert_eq!(format_links(&[]), "");
    }

    fn model(seed: u64) -> NmtModel {
        let cfg = ModelConfig {
            layers: 2,
            cells: 8,
            src_vocab: 11,
            tgt_vocab: 11,
            attention: Some(AttentionConfig::new(Mechanism::Global, ScoreKind::General)),
            input_feeding: true,
            reverse_source: true,
        };
        NmtModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn max_len_one_truncates() {
        let m = model(1);
        let (ids, recs, truncated) = greedy_decode(&m, &[3, 4, EOS_ID], 1).unwrap();
        assert!(ids.len() <= 1);
        assert_eq!(recs.len(), 1);
        assert_eq!(truncated, ids.len() == 1);
        assert!(greedy_decode(&m, &[3, EOS_ID], 0).is_err());
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model(2);
        let a = greedy_decode(&m, &[3, 4, 5, EOS_ID], 10).unwrap();
        let b = greedy_decode(&m, &[3, 4, 5, EOS_ID], 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn force_decode_record_count() {
        let m = model(3);
        let pair = SentencePair {
            source: vec![3, 4, EOS_ID],
            target: vec![5, 6, 7, EOS_ID],
            source_tokens: vec![],
        };
        let recs = force_decode_pair(&m, &pair).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs.iter().map(|r| r.token).collect::<Vec<_>>(), pair.target);
    }

    #[test]
    fn force_decode_needs_attention() {
        let mut m = model(3);
        m.attention = None;
        m.config.attention = None;
        let pair = SentencePair {
            source: vec![3, EOS_ID],
            target: vec![EOS_ID],
            source_tokens: vec![],
        };
        assert!(force_decode_pair(&m, &pair).is_err());
    }
}

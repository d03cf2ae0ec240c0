use super::trace::ApiTrace;
use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// A single encoded sequence, padded to a fixed width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub length: usize,
}

/// `BOS + ids(calls) (+ EOS when it fits)`, truncated from the right and
/// right-padded with PAD to `max_len`.
pub fn encode(calls: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Encoded> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut ids = token_ids(calls, vocab, max_len);
    let length = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| u8::from(i < length)).collect();
    Ok(Encoded { ids, mask, length })
}

/// Unpadded `BOS + ids (+ EOS)` capped at `max_len` tokens.
pub fn token_ids(calls: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(max_len.min(calls.len() + 2));
    ids.push(BOS);
    ids.extend(calls.iter().map(|c| vocab.id_of(c)));
    ids.push(EOS);
    ids.truncate(max_len);
    ids
}

/// Unpadded `BOS + ids` with no terminator; the input a generator extends.
pub fn prefix_ids(calls: &[String], vocab: &Vocabulary) -> Vec<u32> {
    std::iter::once(BOS).chain(calls.iter().map(|c| vocab.id_of(c))).collect()
}

/// Maps ids back to names, dropping reserved ids.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .filter(|&&id| !Vocabulary::is_reserved(id))
        .map(|&id| {
            vocab
                .name_of(id)
                .map(str::to_string)
                .ok_or(Error::IdOutOfRange { id, size: vocab.size() })
        })
        .collect()
}

/// Row-major `B×L` batch, padded to its longest row.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<f32>,
    pub labels: Vec<f32>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl EncodedBatch {
    /// Builds a batch from unpadded id rows. `pad_to` widens the batch beyond
    /// its longest row.
    pub fn from_rows(rows: &[Vec<u32>], labels: Vec<f32>, pad_to: Option<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        if labels.len() != rows.len() {
            return Err(Error::shape("batch labels", &[rows.len()], &[labels.len()]));
        }
        let longest = rows.iter().map(Vec::len).max().unwrap_or(0);
        let len = pad_to.unwrap_or(longest).max(longest).max(1);
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut mask = Vec::with_capacity(rows.len() * len);
        for row in rows {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat(PAD).take(len - row.len()));
            mask.extend((0..len).map(|i| if i < row.len() { 1.0 } else { 0.0 }));
        }
        Ok(EncodedBatch {
            ids,
            mask,
            labels,
            lengths: rows.iter().map(Vec::len).collect(),
            batch: rows.len(),
            len,
        })
    }

    pub fn from_traces(traces: &[&ApiTrace], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let rows: Vec<Vec<u32>> = traces.iter().map(|t| token_ids(&t.calls, vocab, max_len)).collect();
        let labels = traces.iter().map(|t| t.label.as_f32()).collect();
        Self::from_rows(&rows, labels, None)
    }

    pub fn row_ids(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }
}

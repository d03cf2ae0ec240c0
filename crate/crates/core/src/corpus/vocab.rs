use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trace::ApiTrace;
use crate::artifact::{check_json_format, sha256_hex, VOCAB_FORMAT};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Dense bijection between API-call names and ids, with PAD/UNK/BOS/EOS at 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    reserved: BTreeMap<String, u32>,
    id_of: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary of at most `max_size` ids (reserved included).
    /// Ties are broken lexicographically.
    pub fn build(traces: &[ApiTrace], max_size: usize) -> Result<Self> {
        if max_size <= NUM_RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least {}, got {max_size}",
                NUM_RESERVED + 1
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in traces {
            for c in &t.calls {
                *counts.entry(c.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        Self::from_names(ranked.into_iter().map(|(n, _)| n.to_string()).collect())
    }

    /// Vocabulary whose non-reserved ids follow `names` in order.
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(names);
        let mut ids = HashMap::with_capacity(all.len());
        for (i, n) in all.iter().enumerate() {
            if ids.insert(n.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{n}`")));
            }
        }
        Ok(Vocabulary { names: all, ids })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    /// Id of `name`, or UNK.
    pub fn id_of(&self, name: &str) -> u32 {
        match self.ids.get(name) {
            Some(&id) if id as usize >= NUM_RESERVED => id,
            _ => UNK,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.id_of(name) != UNK
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Content hash binding models to the vocabulary they were trained with.
    pub fn hash(&self) -> String {
        let mut buf = String::from(VOCAB_FORMAT);
        for n in &self.names {
            buf.push('\n');
            buf.push_str(n);
        }
        sha256_hex(buf.as_bytes())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            format: VOCAB_FORMAT.to_string(),
            reserved: RESERVED_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as u32))
                .collect(),
            id_of: self
                .names
                .iter()
                .enumerate()
                .skip(NUM_RESERVED)
                .map(|(i, n)| (n.clone(), i as u32))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let compact: serde_json::Value = serde_json::from_str(text)?;
        check_json_format(serde_json::to_string(&compact)?.as_bytes(), VOCAB_FORMAT)?;
        let file: VocabFile = serde_json::from_value(compact)?;
        for (i, n) in RESERVED_NAMES.iter().enumerate() {
            if file.reserved.get(*n) != Some(&(i as u32)) {
                return Err(Error::Corrupt(format!("reserved id block must map {n} to {i}")));
            }
        }
        let size = file.id_of.len() + NUM_RESERVED;
        let mut names = vec![None; size];
        for (n, &id) in &file.id_of {
            let slot = names
                .get_mut(id as usize)
                .filter(|_| id as usize >= NUM_RESERVED)
                .ok_or_else(|| Error::Corrupt(format!("id {id} for `{n}` is not dense")))?;
            if slot.replace(n.clone()).is_some() {
                return Err(Error::Corrupt(format!("id {id} assigned twice")));
            }
        }
        let names: Vec<String> = names.into_iter().skip(NUM_RESERVED).map(Option::unwrap).collect();
        Self::from_names(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    fn trace(calls: &[&str]) -> ApiTrace {
        ApiTrace::new("t", Label::Benign, calls.iter().map(|s| s.to_string()).collect(), "").unwrap()
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build(&[trace(&["B", "A", "B", "B"])], 10).unwrap();
        assert_eq!(v.id_of("B"), 4);
        assert_eq!(v.id_of("A"), 5);
        assert_eq!(v.id_of("Z"), UNK);
    }

    #[test]
    fn lexicographic_tie_break() {
        let v = Vocabulary::build(&[trace(&["B", "A", "B", "A"])], 10).unwrap();
        assert!(v.id_of("A") < v.id_of("B"));
    }

    #[test]
    fn max_size_caps_and_validates() {
        let v = Vocabulary::build(&[trace(&["A", "A", "B", "C"])], 5).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id_of("B"), UNK);
        assert!(Vocabulary::build(&[], 4).is_err());
    }

    #[test]
    fn json_round_trip_and_guard() {
        let v = Vocabulary::build(&[trace(&["x", "y", "y", "z"])], 50).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let tampered = v.to_json().unwrap().replace("emd-vocab-v1", "emd-vocab-v0");
        assert!(Vocabulary::from_json(&tampered).unwrap_err().is_compatibility());
    }
}

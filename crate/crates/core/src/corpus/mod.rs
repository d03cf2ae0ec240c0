//! Traces, ingestion, vocabulary, encoding, splitting and synthetic corpora.

mod encode;
mod ingest;
mod split;
mod synth;
mod trace;
mod vocab;

pub use encode::{decode, encode, prefix_ids, token_ids, Encoded, EncodedBatch};
pub use ingest::{ingest, read_csv, read_jsonl, write_traces, TraceFormat};
pub use split::split;
pub use synth::{find_motif, generate_synthetic, SynthConfig};
pub use trace::{ApiTrace, Label};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, UNK};

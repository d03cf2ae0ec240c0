use emd_core::corpus::{BOS, EOS, PAD};
use emd_core::encoder::*;
use emd_core::genlm::{GenerativeLm, LmConfig};
use emd_core::numerics::AdamConfig;
use emd_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(vocab: usize, seed: u64) -> ContextualEncoder {
    let cfg = EncoderConfig {
        vocab_size: vocab,
        max_len: 32,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 32,
        dropout: 0.1,
        attention_dropout: 0.1,
        seed,
    };
    ContextualEncoder::new(cfg, "enc-test").unwrap()
}

fn padded_batch(rng: &mut ChaCha8Rng, batch: usize, len: usize, vocab: u32) -> (Vec<u32>, Vec<f32>) {
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..batch {
        let n = rng.gen_range(1..=len);
        for t in 0..len {
            if t < n {
                ids.push(rng.gen_range(1..vocab));
                mask.push(1.0);
            } else {
                ids.push(PAD);
                mask.push(0.0);
            }
        }
    }
    (ids, mask)
}

#[test]
fn extra_pad_columns_leave_real_positions_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = tiny(25, 1);
    for _ in 0..10 {
        let (b, l, extra) = (4, 12, rng.gen_range(1..10));
        let (ids, mask) = padded_batch(&mut rng, b, l, 25);
        let base = encode_contextual(&enc, &ids, &mask, b, l).unwrap();
        let wide_l = l + extra;
        let mut wide_ids = Vec::new();
        let mut wide_mask = Vec::new();
        for r in 0..b {
            wide_ids.extend_from_slice(&ids[r * l..(r + 1) * l]);
            wide_ids.extend(std::iter::repeat(PAD).take(extra));
            wide_mask.extend_from_slice(&mask[r * l..(r + 1) * l]);
            wide_mask.extend(std::iter::repeat(0.0).take(extra));
        }
        let wide = encode_contextual(&enc, &wide_ids, &wide_mask, b, wide_l).unwrap();
        let d = 16;
        for r in 0..b {
            for t in 0..l {
                if mask[r * l + t] == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let x = base.data()[(r * l + t) * d + k];
                    let y = wide.data()[(r * wide_l + t) * d + k];
                    assert!((x - y).abs() <= 1e-5);
                }
            }
        }
    }
}

#[test]
fn identical_rows_embed_identically() {
    let enc = tiny(25, 2);
    let row = [BOS, 5, 9, 13, 7, EOS];
    let ids: Vec<u32> = row.iter().chain(row.iter()).copied().collect();
    let out = encode_contextual(&enc, &ids, &[1.0; 12], 2, 6).unwrap();
    let (a, b) = out.data().split_at(6 * 16);
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-6);
    }
}

fn row_states(enc: &ContextualEncoder, ids: &[u32]) -> Vec<f32> {
    encode_contextual(enc, ids, &vec![1.0; ids.len()], 1, ids.len()).unwrap().into_data()
}

fn position(v: &[f32], t: usize) -> &[f32] {
    &v[t * 16..(t + 1) * 16]
}

#[test]
fn swapping_tokens_changes_both_positions() {
    let enc = tiny(25, 3);
    let ids = vec![BOS, 5, 9, 13, 7, EOS];
    let mut swapped = ids.clone();
    swapped.swap(2, 4);
    let a = row_states(&enc, &ids);
    let b = row_states(&enc, &swapped);
    assert_ne!(position(&a, 2), position(&b, 2));
    assert_ne!(position(&a, 4), position(&b, 4));
}

#[test]
fn later_tokens_influence_earlier_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = tiny(25, 4);
    for _ in 0..20 {
        let len = rng.gen_range(3..20);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(4..25)).collect();
        let t = rng.gen_range(1..len);
        let mut changed = ids.clone();
        changed[t] = if ids[t] == 4 { 5 } else { 4 };
        let a = row_states(&enc, &ids);
        let b = row_states(&enc, &changed);
        let moved = (0..t).any(|u| position(&a, u) != position(&b, u));
        assert!(moved, "no earlier position reacted to a change at {t}");
    }
}

#[test]
fn rejects_overlong_input() {
    let enc = tiny(10, 1);
    let err = encode_contextual(&enc, &[4; 33], &[1.0; 33], 1, 33).unwrap_err();
    assert!(matches!(err, Error::CapacityExceeded { .. }));
}

#[test]
fn mask_selection_is_seeded() {
    let row: Vec<u32> = std::iter::once(BOS).chain(4..44).chain([EOS, PAD, PAD]).collect();
    let pick = |seed| choose_mask_positions(&row, 0.15, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(pick(3), pick(3));
    assert_ne!(pick(3), pick(4));
    let p = pick(3);
    assert_eq!(p.len(), 6);
    assert!(p.iter().all(|&i| (1..=40).contains(&i)));
    assert_eq!(choose_mask_positions(&[BOS, EOS], 0.15, &mut ChaCha8Rng::seed_from_u64(1)), Vec::<usize>::new());
}

fn memorize() -> (ContextualEncoder, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut row = vec![BOS];
    row.extend((0..20).map(|_| rng.gen_range(4u32..20)));
    row.push(EOS);
    let rows = vec![row; 64];
    let mut enc = tiny(20, 6);
    let cfg = MlmConfig {
        mask_rate: 0.15,
        epochs: 40,
        batch_size: 16,
        adam: AdamConfig { lr: 3e-3, ..Default::default() },
    };
    let curve = mlm_pretrain(&mut enc, &rows, &cfg).unwrap();
    (enc, curve)
}

#[test]
fn pretraining_memorizes_a_repeated_trace() {
    let (enc, curve) = memorize();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut row = vec![BOS];
    row.extend((0..20).map(|_| rng.gen_range(4u32..20)));
    row.push(EOS);
    let acc = mlm_accuracy(&enc, &vec![row; 32], 0.15, 77).unwrap();
    assert!(acc > 0.95, "reconstruction accuracy {acc}");
    assert!(curve[curve.len() - 1] < curve[0] / 5.0, "{curve:?}");
}

#[test]
fn pretraining_validates_inputs() {
    let mut enc = tiny(20, 1);
    let bad_rate = MlmConfig {
        mask_rate: 0.6,
        ..Default::default()
    };
    assert!(mlm_pretrain(&mut enc, &[vec![BOS, 5, EOS]], &bad_rate).is_err());
    let err = mlm_pretrain(&mut enc, &[], &MlmConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyInput(_)));
}

#[test]
fn checkpoint_round_trip() {
    let (enc, _) = memorize();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    enc.save(&path).unwrap();
    let back = ContextualEncoder::load(&path).unwrap();
    assert_eq!(back.config(), enc.config());
    assert_eq!(back.vocab_hash(), "enc-test");
    let ids = vec![BOS, 4, 8, 15, 16, EOS];
    let a = row_states(&enc, &ids);
    let b = row_states(&back, &ids);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6);
    }

    let lm = GenerativeLm::new(LmConfig::desk(20), "x").unwrap();
    let err = ContextualEncoder::from_bytes(&lm.to_bytes().unwrap()).unwrap_err();
    assert!(matches!(err, Error::FormatVersion { .. }));
}

#[test]
fn presets() {
    let full = EncoderConfig::full_scale();
    assert_eq!(
        (full.embed_dim, full.n_layers, full.n_heads, full.ff_dim, full.max_len, full.vocab_size),
        (768, 6, 12, 3072, 512, 30522)
    );
    assert!(full.validate().is_ok());
    let desk = EncoderConfig::desk(100);
    assert_eq!((desk.embed_dim, desk.n_layers, desk.n_heads, desk.ff_dim, desk.max_len), (64, 2, 4, 128, 128));
}

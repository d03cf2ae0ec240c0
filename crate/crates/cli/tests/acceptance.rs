//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use emd_core::corpus::{
    find_motif, ingest, prefix_ids, token_ids, ApiTrace, Label, SynthConfig, TraceFormat, Vocabulary,
    NUM_RESERVED,
};
use emd_core::detector::DetectorModel;
use emd_core::eval::{auc_roc, confusion, read_report, EvaluationReport, MetricsReport};
use emd_core::genlm::{generate_suffix, lm_forward, predict_next, GenRequest, GenerativeLm};
use emd_core::head::{
    attention_pool, bigru_forward, dense_forward, head_forward, ClassifierHead, DenseStack, GruCell, HeadConfig,
    HeadVariant, LstmCell,
};
use emd_core::layers::{attention_bias, embed_tokens, BlockDims, Mode, NormPlacement, TransformerBlock};
use emd_core::numerics::{grad_check, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SEED: &str = "42";

fn emd(args: &[&str]) -> (i32, String) {
    let argv: Vec<OsString> = std::iter::once("emd").chain(args.iter().copied()).map(OsString::from).collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = emd_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&err).into_owned())
}

fn emd_ok(args: &[&str]) {
    let (code, err) = emd(args);
    assert_eq!(code, 0, "emd {args:?} exited {code}: {err}");
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn load(path: &Path) -> Vec<ApiTrace> {
    ingest(path, TraceFormat::from_path(path)).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ------------------------------------------------------------------ gradients

const STEP: f32 = 1e-3;

fn project(tape: &mut Tape, y: Var, seed: u64) -> emd_core::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f32) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Worst relative error over the input (when given) and sampled parameter
/// coordinates of a scalar map.
fn layer_error<F>(store: &mut ParamStore, input: Option<&Tensor>, rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore, Var) -> emd_core::Result<Var>,
{
    let dummy = Tensor::zeros(&[1]);
    let mut worst = match input {
        Some(x) => {
            let st: &ParamStore = store;
            grad_check(|tape, v| f(tape, st, v), x, STEP).unwrap()
        }
        None => 0.0,
    };
    let x = input.unwrap_or(&dummy).clone();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, store, xv).unwrap();
    let grads = tape.backward(out).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| match grads.param(store, id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.get(id).numel()],
        })
        .collect();
    let eval = |st: &ParamStore| {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let out = f(&mut tape, st, xv).unwrap();
        tape.value(out).item() as f64
    };
    for (&id, a) in ids.iter().zip(&analytic) {
        let n = a.len();
        let coords: Vec<usize> = if n <= 64 {
            (0..n).collect()
        } else {
            (0..24).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let hi = store.get(id).data()[i];
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let lo = store.get(id).data()[i];
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (hi as f64 - lo as f64);
            let a = a[i] as f64;
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

fn mask_with_pad(batch: usize, len: usize) -> Vec<f32> {
    // The last row loses its final position.
    (0..batch * len).map(|i| if i == batch * len - 1 { 0.0 } else { 1.0 }).collect()
}

/// Smallest |pre-activation| over the two hidden ReLU layers.
fn relu_margin(stack: &DenseStack, store: &ParamStore, x: &Tensor) -> f32 {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let z1 = stack.layers[0].forward(&mut tape, store, xv).unwrap();
    let a1 = tape.relu(z1);
    let z2 = stack.layers[1].forward(&mut tape, store, a1).unwrap();
    [z1, z2]
        .iter()
        .flat_map(|&z| tape.value(z).data().to_vec())
        .fold(f32::MAX, |m, v| m.min(v.abs()))
}

fn check_layer(name: &str, worst: &mut Vec<(String, f64)>, mut point: impl FnMut(u64) -> f64) {
    let e = (0..10u64).map(&mut point).fold(0.0f64, f64::max);
    worst.push((name.to_string(), e));
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();

    check_layer("embedding", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + p);
        let mut store = ParamStore::new();
        let tok = store.add("tok", random(&mut rng, &[12, 8]));
        let pos = store.add("pos", random(&mut rng, &[6, 8]));
        let ids: Vec<u32> = (0..12).map(|_| rng.gen_range(0..12)).collect();
        layer_error(&mut store, None, &mut rng, |tape, st, _| {
            let y = embed_tokens(tape, st, tok, pos, &ids, 2, 6)?;
            project(tape, y, p)
        })
    });

    for (name, placement, causal) in [
        ("encoder block", NormPlacement::Post, false),
        ("causal block", NormPlacement::Pre, true),
    ] {
        check_layer(name, &mut worst, |p| {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + p);
            let mut store = ParamStore::new();
            let dims = BlockDims { dim: 8, heads: 2, ff_dim: 16 };
            let block = TransformerBlock::new(&mut store, "b", &dims, placement, &mut rng);
            randomize(&mut store, &mut rng, 0.5);
            let mask = mask_with_pad(2, 4);
            let bias = attention_bias(&mask, 2, 4, 2, causal);
            let x = random(&mut rng, &[2, 4, 8]);
            layer_error(&mut store, Some(&x), &mut rng, |tape, st, xv| {
                let b = tape.constant(bias.clone());
                let y = block.forward(tape, st, xv, b, 0.0, 0.0, &mut Mode::Eval)?;
                project(tape, y, p)
            })
        });
    }

    check_layer("gru cell", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + p);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 4, 3, &mut rng);
        randomize(&mut store, &mut rng, 0.8);
        let xh = random(&mut rng, &[2, 7]);
        layer_error(&mut store, Some(&xh), &mut rng, |tape, st, v| {
            let x = tape.slice(v, 1, 0, 4)?;
            let h = tape.slice(v, 1, 4, 3)?;
            let y = cell.forward(tape, st, x, h)?;
            project(tape, y, p)
        })
    });

    check_layer("lstm cell", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + p);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 4, 3, &mut rng);
        randomize(&mut store, &mut rng, 0.8);
        let xhc = random(&mut rng, &[2, 10]);
        layer_error(&mut store, Some(&xhc), &mut rng, |tape, st, v| {
            let x = tape.slice(v, 1, 0, 4)?;
            let h = tape.slice(v, 1, 4, 3)?;
            let c = tape.slice(v, 1, 7, 3)?;
            let (h, c) = cell.forward(tape, st, x, h, c)?;
            let y = tape.concat(&[h, c], 1)?;
            project(tape, y, p)
        })
    });

    check_layer("bigru", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + p);
        let mut store = ParamStore::new();
        let fwd = GruCell::new(&mut store, "f", 3, 4, &mut rng);
        let bwd = GruCell::new(&mut store, "b", 3, 4, &mut rng);
        randomize(&mut store, &mut rng, 0.8);
        let mask = mask_with_pad(2, 4);
        let x = random(&mut rng, &[2, 4, 3]);
        layer_error(&mut store, Some(&x), &mut rng, |tape, st, v| {
            let y = bigru_forward(tape, st, &fwd, &bwd, v, &mask)?;
            project(tape, y, p)
        })
    });

    check_layer("attention pool", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + p);
        let mut store = ParamStore::new();
        let mask = mask_with_pad(2, 5);
        let x = random(&mut rng, &[2, 5, 6]);
        layer_error(&mut store, Some(&x), &mut rng, |tape, _, v| {
            let (ctx, _) = attention_pool(tape, v, &mask)?;
            project(tape, ctx, p)
        })
    });

    check_layer("dense stack", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + p);
        let mut store = ParamStore::new();
        let stack = DenseStack::new(&mut store, "d", 6, [5, 4], &mut rng);
        // Redraw until every ReLU input clears the kink by far more than the step.
        let x = loop {
            randomize(&mut store, &mut rng, 0.8);
            let x = random(&mut rng, &[3, 6]);
            if relu_margin(&stack, &store, &x) > 0.05 {
                break x;
            }
        };
        layer_error(&mut store, Some(&x), &mut rng, |tape, st, v| {
            let y = dense_forward(tape, st, &stack, v)?;
            project(tape, y, p)
        })
    });

    check_layer("bce", &mut worst, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + p);
        let mut store = ParamStore::new();
        let probs = Tensor::from_fn(&[6], |_| rng.gen_range(0.05..0.95));
        let y: Vec<f32> = (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        layer_error(&mut store, Some(&probs), &mut rng, |tape, _, v| tape.bce(v, &y))
    });

    let elapsed = start.elapsed();
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!("{detail}; {:.1}s", elapsed.as_secs_f64());
    if worst.iter().all(|(_, e)| *e < 1e-3) && elapsed < Duration::from_secs(120) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------------- metrics

fn trapezoid_auc(scores: &[f32], labels: &[Label]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == Label::Malware).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut x0, mut y0) = (0.0, 0.0);
    let mut area = 0.0;
    for th in thresholds {
        for (s, l) in scores.iter().zip(labels) {
            if *s == th {
                if *l == Label::Malware {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let (x, y) = (fp / neg, tp / pos);
        area += (x - x0) * (y + y0) / 2.0;
        x0 = x;
        y0 = y;
    }
    area
}

/// Every rate recomputed from per-instance predictions, zero denominators
/// giving 0.
fn brute_force_metrics(scores: &[f32], labels: &[Label], threshold: f32) -> [f64; 17] {
    let n = scores.len() as f64;
    let pred: Vec<Label> = scores
        .iter()
        .map(|&s| if s >= threshold { Label::Malware } else { Label::Benign })
        .collect();
    let count = |f: &dyn Fn(Label, Label) -> bool| pred.iter().zip(labels).filter(|(p, y)| f(**p, **y)).count() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let prf = |c: Label| {
        let hit = count(&|p, y| p == c && y == c);
        let precision = div(hit, count(&|p, _| p == c));
        let recall = div(hit, count(&|_, y| y == c));
        let f1 = div(2.0 * precision * recall, precision + recall);
        (precision, recall, f1, count(&|_, y| y == c))
    };
    let (mp, mr, mf, ms) = prf(Label::Malware);
    let (bp, br, bf, bs) = prf(Label::Benign);
    let correct = count(&|p, y| p == y);
    let pos = count(&|_, y| y == Label::Malware);
    let neg = n - pos;
    [
        correct / n,
        div(count(&|p, y| p == Label::Malware && y == Label::Malware), pos),
        div(count(&|p, y| p == Label::Benign && y == Label::Benign), neg),
        div(count(&|p, y| p == Label::Malware && y == Label::Benign), neg),
        div(count(&|p, y| p == Label::Benign && y == Label::Malware), pos),
        mp,
        mr,
        mf,
        bp,
        br,
        bf,
        (mp + bp) / 2.0,
        (mr + br) / 2.0,
        (mf + bf) / 2.0,
        (mp * ms + bp * bs) / n,
        (mr * ms + br * bs) / n,
        (mf * ms + bf * bs) / n,
    ]
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_auc = 0.0f64;
    let mut worst_rate = 0.0f64;
    for case in 0..1000 {
        let n = rng.gen_range(2..80);
        let levels = rng.gen_range(2..30);
        let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..=levels) as f32 / levels as f32).collect();
        let mut labels: Vec<Label> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { Label::Malware } else { Label::Benign })
            .collect();
        labels[0] = Label::Malware;
        labels[1] = Label::Benign;
        let threshold = rng.gen_range(0..=levels) as f32 / levels as f32;
        let c = confusion(&scores, &labels, threshold).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (s, l) in scores.iter().zip(&labels) {
            match (*s >= threshold, *l == Label::Malware) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        if (c.tp, c.fp, c.tn, c.fn_) != (tp, fp, tn, fn_) {
            return Err(format!("case {case}: counts {c:?} vs ({tp}, {fp}, {tn}, {fn_})"));
        }
        let d = (auc_roc(&scores, &labels).unwrap() - trapezoid_auc(&scores, &labels)).abs();
        worst_auc = worst_auc.max(d);
        let report = MetricsReport::from_scores(&scores, &labels, threshold).unwrap();
        let got = [
            report.accuracy,
            report.tpr,
            report.tnr,
            report.fpr,
            report.fnr,
            report.malware.precision,
            report.malware.recall,
            report.malware.f1,
            report.benign.precision,
            report.benign.recall,
            report.benign.f1,
            report.macro_avg.precision,
            report.macro_avg.recall,
            report.macro_avg.f1,
            report.weighted_avg.precision,
            report.weighted_avg.recall,
            report.weighted_avg.f1,
        ];
        let want = brute_force_metrics(&scores, &labels, threshold);
        for (g, w) in got.iter().zip(&want) {
            worst_rate = worst_rate.max((g - w).abs());
        }
    }
    let detail = format!("1000 instances, counts exact, worst rate gap {worst_rate:.1e}, worst AUC gap {worst_auc:.1e}");
    if worst_auc <= 1e-9 && worst_rate <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------------ pipeline

struct Pipeline {
    root: PathBuf,
    train_secs: f64,
}

impl Pipeline {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn ps(&self, name: &str) -> String {
        s(&self.p(name))
    }

    fn build(root: &Path) -> Pipeline {
        let pl = Pipeline {
            root: root.to_path_buf(),
            train_secs: 0.0,
        };
        let (data, train, test, vocab) = (pl.ps("data"), pl.ps("data/train.jsonl"), pl.ps("data/test.jsonl"), pl.ps("vocab.json"));
        let (lm, det) = (pl.ps("lm.bin"), pl.ps("det_bigru_attention.bin"));
        emd_ok(&["gen-corpus", "--out-dir", &data, "--seed", SEED]);
        emd_ok(&["build-vocab", "--corpus", &train, "--out", &vocab]);
        let start = Instant::now();
        eprintln!("training the generative model ...");
        emd_ok(&[
            "train-lm", "--corpus", &train, "--vocab", &vocab, "--out", &lm, "--dev", &test, "--seed", SEED, "--report",
            &pl.ps("lm.json"),
        ]);
        eprintln!("training the detector ...");
        emd_ok(&[
            "train-detector", "--corpus", &train, "--vocab", &vocab, "--out", &det, "--epochs", "3", "--seed", SEED,
            "--report", &pl.ps("det.json"),
        ]);
        eprintln!("sweeping horizons ...");
        emd_ok(&[
            "sweep", "--lm", &lm, "--detector", &det, "--vocab", &vocab, "--corpus", &test, "--out",
            &pl.ps("sweep.json"), "--prefix-len", "20", "--horizons", "10,20,30",
        ]);
        let train_secs = start.elapsed().as_secs_f64();
        for (mode, out) in [("full", "full.json"), ("prefix", "bare.json")] {
            emd_ok(&[
                "evaluate", "--detector", &det, "--vocab", &vocab, "--corpus", &test, "--out", &pl.ps(out), "--mode",
                mode, "--prefix-len", "20",
            ]);
        }
        Pipeline { train_secs, ..pl }
    }

    fn vocab(&self) -> Vocabulary {
        Vocabulary::load(&self.p("vocab.json")).unwrap()
    }

    fn lm(&self) -> GenerativeLm {
        GenerativeLm::load(&self.p("lm.bin")).unwrap()
    }

    fn test(&self) -> Vec<ApiTrace> {
        load(&self.p("data/test.jsonl"))
    }

    fn evaluation(&self, name: &str) -> EvaluationReport {
        EvaluationReport::from_json(&std::fs::read(self.p(name)).unwrap()).unwrap()
    }
}

fn criterion_2(pl: &Pipeline) -> Outcome {
    let lm = pl.lm();
    let v = lm.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let len = rng.gen_range(2..=64);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(NUM_RESERVED as u32..v as u32)).collect();
        let t = rng.gen_range(0..len - 1);
        let mut other = ids.clone();
        for id in &mut other[t + 1..] {
            *id = rng.gen_range(NUM_RESERVED as u32..v as u32);
        }
        let mask = vec![1.0; len];
        let a = lm_forward(&lm, &ids, &mask, 1, len).unwrap();
        let b = lm_forward(&lm, &other, &mask, 1, len).unwrap();
        for i in 0..(t + 1) * v {
            worst = worst.max((a.data()[i] - b.data()[i]).abs());
        }
    }
    let detail = format!("100 cases, worst shift {worst:.1e}");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4(pl: &Pipeline) -> Outcome {
    let auc = pl.evaluation("full.json").metrics.auc_roc;
    let detail = format!("full-trace AUC {auc:.4}, train-lm + train-detector + sweep {:.0}s", pl.train_secs);
    if auc >= 0.95 && pl.train_secs < 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5(pl: &Pipeline) -> Outcome {
    let sweep = read_report(&pl.p("sweep.json")).unwrap();
    let bare = pl.evaluation("bare.json").metrics;
    let rows: Vec<_> = [10, 20, 30].iter().map(|&h| &sweep.row(h).unwrap().metrics).collect();
    let mut ok = true;
    for w in rows.windows(2) {
        ok &= w[1].accuracy >= w[0].accuracy - 0.01;
        ok &= w[1].auc_roc >= w[0].auc_roc - 0.01;
    }
    ok &= rows[2].auc_roc > bare.auc_roc;
    let detail = format!(
        "acc {:.4}/{:.4}/{:.4}, AUC {:.4}/{:.4}/{:.4}, bare-prefix AUC {:.4}",
        rows[0].accuracy, rows[1].accuracy, rows[2].accuracy, rows[0].auc_roc, rows[1].auc_roc, rows[2].auc_roc,
        bare.auc_roc
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(pl: &Pipeline) -> Outcome {
    let manifest = read_json(&pl.p("data/corpus.json"));
    let synth: SynthConfig = serde_json::from_value(manifest["result"]["synth"].clone()).unwrap();
    let (lm, vocab) = (pl.lm(), pl.vocab());
    let mut tried = 0;
    let mut whole = 0;
    let mut token_rate = 0.0;
    for t in pl.test().iter().filter(|t| t.label == Label::Malware) {
        if tried == 50 {
            break;
        }
        let Some((pos, motif)) = synth
            .malicious_motifs
            .iter()
            .filter_map(|m| find_motif(&t.calls, m).map(|p| (p, m)))
            .min_by_key(|(p, _)| *p)
        else {
            continue;
        };
        tried += 1;
        let prefix = prefix_ids(&t.calls[..=pos], &vocab);
        let suffix = generate_suffix(&lm, &GenRequest::greedy(prefix, motif.len() - 1)).unwrap();
        let tail = &motif[1..];
        let predicted: Vec<Option<&str>> = suffix.iter().map(|&id| vocab.name_of(id)).collect();
        let hits = tail.iter().zip(&predicted).filter(|(m, p)| Some(m.as_str()) == **p).count();
        token_rate += hits as f64 / tail.len() as f64;
        whole += usize::from(hits == tail.len());
    }
    let rate = token_rate / tried.max(1) as f64;
    let detail = format!("{:.1}% of tail tokens over {tried} traces, {whole} tails exact", 100.0 * rate);
    if tried == 50 && rate >= 0.8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(pl: &Pipeline) -> Outcome {
    let report = read_json(&pl.p("lm.json"));
    let before = report["result"]["dev_perplexity_untrained"].as_f64().unwrap();
    let after = report["result"]["dev_perplexity"].as_f64().unwrap();
    let ratio = after / before;
    let detail = format!("held-out perplexity {before:.2} -> {after:.3} (ratio {ratio:.4})");
    if ratio <= 0.7 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(pl: &Pipeline) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f32;
    for variant in HeadVariant::ALL {
        let mut cfg = HeadConfig::new(variant);
        cfg.seed = 8;
        let head = ClassifierHead::new(cfg, 16).unwrap();
        for _ in 0..20 {
            let len = rng.gen_range(1..=12);
            let extra = rng.gen_range(1..=8);
            let x = random(&mut rng, &[1, len, 16]);
            let garbage = random(&mut rng, &[1, extra, 16]);
            let padded = Tensor::new(vec![1, len + extra, 16], [x.data(), garbage.data()].concat()).unwrap();
            let mask: Vec<f32> = (0..len + extra).map(|i| if i < len { 1.0 } else { 0.0 }).collect();
            let a = head_forward(&head, &x, &vec![1.0; len]).unwrap()[0];
            let b = head_forward(&head, &padded, &mask).unwrap()[0];
            worst = worst.max((a - b).abs());
        }
    }
    let vocab = pl.vocab();
    let test = pl.test();
    let long = test.iter().max_by_key(|t| t.len()).unwrap();
    let mut trained = 0.0f32;
    for variant in HeadVariant::ALL {
        let model = DetectorModel::load(&pl.p(&format!("det_{variant}.bin"))).unwrap();
        let long_row = token_ids(&long.calls, &vocab, model.max_len());
        for t in test.iter().take(20) {
            let row = token_ids(&t.calls, &vocab, model.max_len());
            let alone = model.score_rows(std::slice::from_ref(&row)).unwrap()[0];
            let with_long = model.score_rows(&[row, long_row.clone()]).unwrap()[0];
            trained = trained.max((alone - with_long).abs());
        }
    }
    let detail = format!("5 heads, worst shift {worst:.1e}; trained detectors {trained:.1e}");
    if worst < 1e-5 && trained < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn train_variants(pl: &Pipeline) {
    let (train, test, vocab) = (pl.ps("data/train.jsonl"), pl.ps("data/test.jsonl"), pl.ps("vocab.json"));
    for variant in HeadVariant::ALL {
        let det = pl.ps(&format!("det_{variant}.bin"));
        let v = variant.to_string();
        if variant != HeadVariant::BigruAttention {
            eprintln!("training the {variant} detector ...");
            emd_ok(&[
                "train-detector", "--corpus", &train, "--vocab", &vocab, "--out", &det, "--variant", &v, "--epochs",
                "2", "--seed", SEED,
            ]);
        }
        emd_ok(&[
            "evaluate", "--detector", &det, "--vocab", &vocab, "--corpus", &test, "--out",
            &pl.ps(&format!("eval_{variant}.json")),
        ]);
    }
}

fn criterion_10(pl: &Pipeline) -> Outcome {
    let n = pl.test().len() as u64;
    let mut parts = Vec::new();
    let mut ok = true;
    for variant in HeadVariant::ALL {
        let report = pl.evaluation(&format!("eval_{variant}.json"));
        let m = &report.metrics;
        let in_unit = [m.accuracy, m.tpr, m.tnr, m.fpr, m.fnr, m.auc_roc].iter().all(|v| (0.0..=1.0).contains(v));
        let complementary = (m.tpr + m.fnr - 1.0).abs() < 1e-12 && (m.tnr + m.fpr - 1.0).abs() < 1e-12;
        ok &= in_unit && complementary && m.confusion.total() == n && report.meta.failed_traces.is_empty();
        parts.push(format!("{variant} acc {:.3} AUC {:.3}", m.accuracy, m.auc_roc));
    }
    let detail = parts.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------- reproducibility

struct SmallRun {
    files: BTreeMap<String, Vec<u8>>,
    lm_probe: Vec<f32>,
    det_probe: Vec<f32>,
}

fn small_run(dir: &Path) -> SmallRun {
    let p = |n: &str| s(&dir.join(n));
    let (train, test, vocab, lm, det) = (p("data/train.jsonl"), p("data/test.jsonl"), p("vocab.json"), p("lm.bin"), p("det.bin"));
    let seed = "9";
    emd_ok(&["gen-corpus", "--out-dir", &p("data"), "--traces", "200", "--seed", seed]);
    emd_ok(&["build-vocab", "--corpus", &train, "--out", &vocab]);
    emd_ok(&[
        "train-lm", "--corpus", &train, "--vocab", &vocab, "--out", &lm, "--dev", &test, "--epochs", "1", "--seed",
        seed, "--report", &p("lm.json"),
    ]);
    emd_ok(&[
        "train-detector", "--corpus", &train, "--vocab", &vocab, "--out", &det, "--dev", &test, "--epochs", "1",
        "--seed", seed, "--report", &p("det.json"),
    ]);
    for (fmt, out) in [("json", "sweep.json"), ("csv", "sweep.csv")] {
        emd_ok(&[
            "sweep", "--lm", &lm, "--detector", &det, "--vocab", &vocab, "--corpus", &test, "--out", &p(out),
            "--format", fmt, "--strategy", "topk", "--seed", seed,
        ]);
    }
    emd_ok(&["evaluate", "--detector", &det, "--vocab", &vocab, "--corpus", &test, "--out", &p("eval.json")]);
    let names = ["data/corpus.json", "lm.json", "det.json", "sweep.json", "sweep.csv", "eval.json", "lm.bin", "det.bin"];
    let files = names
        .iter()
        .map(|n| (n.to_string(), std::fs::read(dir.join(n)).unwrap()))
        .collect();

    let voc = Vocabulary::load(Path::new(&vocab)).unwrap();
    let traces = load(Path::new(&test));
    let model = GenerativeLm::load(Path::new(&lm)).unwrap();
    let lm_probe = traces
        .iter()
        .take(16)
        .flat_map(|t| predict_next(&model, &prefix_ids(&t.calls[..t.len().min(10)], &voc)).unwrap())
        .collect();
    let detector = DetectorModel::load(Path::new(&det)).unwrap();
    let rows: Vec<Vec<u32>> = traces
        .iter()
        .take(16)
        .map(|t| token_ids(&t.calls, &voc, detector.max_len()))
        .collect();
    let det_probe = detector.score_rows(&rows).unwrap();
    SmallRun { files, lm_probe, det_probe }
}

fn max_gap(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn criterion_9(root: &Path) -> Outcome {
    let dir = root.join("repro");
    let first = small_run(&dir);
    std::fs::remove_dir_all(&dir).unwrap();
    let second = small_run(&dir);
    let differing: Vec<&String> = first
        .files
        .iter()
        .filter(|(k, v)| second.files.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let lm_gap = max_gap(&first.lm_probe, &second.lm_probe);
    let det_gap = max_gap(&first.det_probe, &second.det_probe);
    let detail = format!(
        "{} reports and checkpoints compared, differing {differing:?}, probe gaps lm {lm_gap:.1e} detector {det_gap:.1e}",
        first.files.len()
    );
    if differing.is_empty() && lm_gap <= 1e-6 && det_gap <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------------------- run

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        }
    }
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results: BTreeMap<u32, (&str, Outcome)> = BTreeMap::new();

    eprintln!("checking layer gradients ...");
    results.insert(1, ("layer gradients", guarded(criterion_1)));
    results.insert(3, ("metric oracles", guarded(criterion_3)));

    let pipeline = catch_unwind(AssertUnwindSafe(|| {
        let pl = Pipeline::build(root);
        train_variants(&pl);
        pl
    }));
    match &pipeline {
        Ok(pl) => {
            results.insert(2, ("causality", guarded(|| criterion_2(pl))));
            results.insert(4, ("full-trace detection", guarded(|| criterion_4(pl))));
            results.insert(5, ("horizon sweep", guarded(|| criterion_5(pl))));
            results.insert(6, ("motif-tail recovery", guarded(|| criterion_6(pl))));
            results.insert(7, ("perplexity", guarded(|| criterion_7(pl))));
            results.insert(8, ("padding invariance", guarded(|| criterion_8(pl))));
            results.insert(10, ("head variants", guarded(|| criterion_10(pl))));
        }
        Err(_) => {
            for (n, name) in [
                (2, "causality"),
                (4, "full-trace detection"),
                (5, "horizon sweep"),
                (6, "motif-tail recovery"),
                (7, "perplexity"),
                (8, "padding invariance"),
                (10, "head variants"),
            ] {
                results.insert(n, (name, Err("pipeline failed".into())));
            }
        }
    }
    eprintln!("repeating a small run ...");
    results.insert(9, ("reproducibility", guarded(|| criterion_9(root))));

    let mut failed = 0;
    for (n, (name, outcome)) in &results {
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trace::{ApiTrace, Label};
use crate::error::{Error, Result};

/// Seeded train/test split, stratified by label.
///
/// When the corpus carries more than one distinct `source`, whole sources are
/// assigned to one side so no source appears in both; per-class test counts
/// then track their targets as closely as whole sources allow.
pub fn split(traces: &[ApiTrace], test_fraction: f64, seed: u64) -> Result<(Vec<ApiTrace>, Vec<ApiTrace>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let class_count = |l: Label| traces.iter().filter(|t| t.label == l).count();
    for label in [Label::Benign, Label::Malware] {
        let count = class_count(label);
        if count < 2 {
            return Err(Error::InsufficientClass {
                label: label.as_str(),
                count,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = |l: Label| {
        let n = class_count(l);
        ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1)
    };
    let targets = [target(Label::Benign), target(Label::Malware)];

    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        by_source.entry(t.source.as_str()).or_default().push(i);
    }

    let mut in_test = vec![false; traces.len()];
    if by_source.len() <= 1 {
        for (label, &k) in [Label::Benign, Label::Malware].iter().zip(&targets) {
            let mut idx: Vec<usize> = (0..traces.len()).filter(|&i| traces[i].label == *label).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..k] {
                in_test[i] = true;
            }
        }
    } else {
        let mut groups: Vec<Vec<usize>> = by_source.into_values().collect();
        groups.shuffle(&mut rng);
        let mut counts = [0usize; 2];
        let deviation = |c: &[usize; 2]| {
            (c[0] as i64 - targets[0] as i64).abs() + (c[1] as i64 - targets[1] as i64).abs()
        };
        for group in &groups {
            let mut with = counts;
            for &i in group {
                with[traces[i].label as usize] += 1;
            }
            if deviation(&with) < deviation(&counts) {
                counts = with;
                for &i in group {
                    in_test[i] = true;
                }
            }
        }
        if counts == [0, 0] || in_test.iter().all(|&b| b) {
            return Err(Error::InvalidArgument(
                "sources cannot be partitioned into non-empty train and test sets".into(),
            ));
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (t, flag) in traces.iter().zip(in_test) {
        if flag {
            test.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, sources: &[&str]) -> Vec<ApiTrace> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Malware } else { Label::Benign };
                ApiTrace::new(format!("t{i}"), label, vec!["A".into()], sources[i % sources.len()]).unwrap()
            })
            .collect()
    }

    #[test]
    fn stratified_counts() {
        let (train, test) = split(&corpus(100, &["s"]), 0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(test.iter().filter(|t| t.label == Label::Malware).count(), 10);
    }

    #[test]
    fn deterministic() {
        let c = corpus(60, &["s"]);
        assert_eq!(split(&c, 0.3, 7).unwrap(), split(&c, 0.3, 7).unwrap());
    }

    #[test]
    fn rejects_tiny_class() {
        let mut c = corpus(10, &["s"]);
        c.retain(|t| t.label == Label::Benign || t.id == "t0");
        assert!(matches!(split(&c, 0.2, 0), Err(Error::InsufficientClass { .. })));
        assert!(split(&corpus(10, &["s"]), 1.0, 0).is_err());
    }
}

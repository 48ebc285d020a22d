use rand::seq::SliceRandom;

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Train/validation/test partition of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Integer counts summing to `n` that differ from `n·ratio` by less than one
/// each (largest remainder; ties go to the earlier split).
pub fn proportional_counts(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class seeded shuffle followed by proportional assignment. Within each
/// split, entries keep their manifest order.
pub fn stratified_split(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x > 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    // assignment[i] = split index of manifest entry i
    let mut assignment = vec![0usize; manifest.len()];
    for class in 0..manifest.class_count() {
        let mut members: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < r.len() {
            log::warn!(
                "class {} ({:?}) has {} item(s), fewer than 3 splits; all go to train",
                class,
                manifest.class_names[class],
                members.len()
            );
            continue;
        }
        let mut rng = keyed_rng(seed, "split", b"", class as u64);
        members.shuffle(&mut rng);
        let counts = proportional_counts(members.len(), &r);
        let mut it = members.into_iter();
        for (split, &c) in counts.iter().enumerate() {
            for idx in it.by_ref().take(c) {
                assignment[idx] = split;
            }
        }
    }
    let pick = |s: usize| -> Vec<ManifestEntry> {
        manifest
            .entries
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == s)
            .map(|(e, _)| e.clone())
            .collect()
    };
    Ok(Splits {
        train: manifest.subset(pick(0)),
        val: manifest.subset(pick(1)),
        test: manifest.subset(pick(2)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{class_counts, reference_fixture_manifest};
    use std::collections::HashSet;

    fn one_class(n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                image_id: format!("i{i}"),
                path: String::new(),
                label: 0,
            })
            .collect();
        DatasetManifest::new(entries, vec!["only".into()]).unwrap()
    }

    #[test]
    fn exact_proportions() {
        let s = stratified_split(&one_class(10), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn deterministic_per_seed() {
        let m = reference_fixture_manifest();
        let a = stratified_split(&m, (0.7, 0.15, 0.15), 9).unwrap();
        let b = stratified_split(&m, (0.7, 0.15, 0.15), 9).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&m, (0.7, 0.15, 0.15), 10).unwrap();
        assert_ne!(a.train.entries, c.train.entries);
    }

    #[test]
    fn reference_profile_within_one_item_per_class() {
        let m = reference_fixture_manifest();
        let s = stratified_split(&m, (0.7, 0.15, 0.15), 3).unwrap();
        let totals = class_counts(&m);
        for (split, ratio) in [(&s.train, 0.7), (&s.val, 0.15), (&s.test, 0.15)] {
            // independent counting oracle
            let mut counted = vec![0usize; totals.len()];
            for e in &split.entries {
                counted[e.label] += 1;
            }
            for (c, &n) in counted.iter().zip(&totals) {
                assert!((*c as f64 - ratio * n as f64).abs() <= 1.0, "{c} vs {ratio}·{n}");
            }
        }
        let ids: HashSet<_> = s
            .train
            .entries
            .iter()
            .chain(&s.val.entries)
            .chain(&s.test.entries)
            .map(|e| e.image_id.clone())
            .collect();
        assert_eq!(ids.len(), m.len());
    }

    #[test]
    fn tiny_classes_go_to_train() {
        let s = stratified_split(&one_class(2), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 0, 0));
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(stratified_split(&one_class(5), (0.5, 0.5, 0.1), 1).is_err());
        assert!(stratified_split(&one_class(5), (1.0, 0.0, 0.0), 1).is_err());
    }

    #[test]
    fn proportional_counts_sum_and_bound() {
        for n in 0..60 {
            let r = [0.55, 0.3, 0.15];
            let c = proportional_counts(n, &r);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (ci, ri) in c.iter().zip(r) {
                assert!((*ci as f64 - ri * n as f64).abs() < 1.0);
            }
        }
    }
}

use std::collections::HashMap;

use fairpipe::fairness::{group_recall, proportions_and_ratio, shortlist};
use proptest::prelude::*;

fn brute_force(scores: &[f64], ids: &[u64], k: usize) -> Vec<u64> {
    // Selection by repeated maximum: highest score, then smallest id.
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while out.len() < k {
        let (pos, _) = left
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| scores[a].total_cmp(&scores[b]).then(ids[b].cmp(&ids[a])))
            .unwrap();
        out.push(ids[left.remove(pos)]);
    }
    out
}

fn population() -> impl Strategy<Value = (Vec<f64>, Vec<u64>, Vec<u8>, usize)> {
    (2usize..60).prop_flat_map(|n| {
        (
            // Coarse scores force ties.
            prop::collection::vec((0u8..8).prop_map(|v| f64::from(v) / 8.0), n),
            Just((0..n as u64).map(|i| i * 7 + 3).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::vec(0u8..2, n),
            1..=n,
        )
    })
}

proptest! {
    #[test]
    fn shortlist_matches_brute_force((scores, ids, _g, k) in population()) {
        prop_assert_eq!(shortlist(&scores, &ids, k).unwrap(), brute_force(&scores, &ids, k));
    }

    #[test]
    fn proportions_are_complementary((scores, ids, genders, k) in population()) {
        let lookup: HashMap<u64, u8> = ids.iter().copied().zip(genders.iter().copied()).collect();
        let top = shortlist(&scores, &ids, k).unwrap();
        let p = proportions_and_ratio(&top, &lookup).unwrap();
        prop_assert!((p.prop_m + p.prop_f - 100.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&p.ratio));
        let males = top.iter().filter(|id| lookup[id] == 0).count();
        prop_assert!((p.prop_m - 100.0 * males as f64 / k as f64).abs() < 1e-9);
    }

    #[test]
    fn recall_of_the_truth_against_itself_is_full((scores, ids, genders, k) in population()) {
        let lookup: HashMap<u64, u8> = ids.iter().copied().zip(genders.iter().copied()).collect();
        let top = shortlist(&scores, &ids, k).unwrap();
        let both = top.iter().any(|id| lookup[id] == 0) && top.iter().any(|id| lookup[id] == 1);
        prop_assume!(both);
        let r = group_recall(&top, &top, &lookup).unwrap();
        prop_assert_eq!((r.recall_m, r.recall_f, r.recall_overall), (100.0, 100.0, 100.0));
    }
}

//! Collaboration checked against a straight-line reference script plus
//! property tests of the consensus ratio.

use ktopt_core::collaboration::{
    collaborate_sequence, compute_gamma, optimize_subgoal, partition_clusters,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference script: the full procedure written as plain loops. Entries are
/// (state, difficulty, position); returns the new state per entry.
fn reference(entries: &[(u8, f64, usize)], beta: f64) -> Vec<u8> {
    // Greedy left-to-right clustering with a pairwise bound.
    let mut clusters: Vec<Vec<(u8, f64)>> = Vec::new();
    let mut open: Vec<(u8, f64)> = Vec::new();
    for &(state, diff, _) in entries {
        let mut fits = !open.is_empty();
        for &(_, other) in &open {
            if (other - diff).abs() >= beta {
                fits = false;
            }
        }
        if !open.is_empty() && !fits {
            clusters.push(open.clone());
            open.clear();
        }
        open.push((state, diff));
    }
    if !open.is_empty() {
        clusters.push(open);
    }

    let mut result = Vec::new();
    for cluster in clusters {
        let mut states: Vec<u8> = cluster.iter().map(|&(s, _)| s).collect();
        let diffs: Vec<f64> = cluster.iter().map(|&(_, d)| d.max(1e-6)).collect();
        let m = states.len();
        // Grow the objective by one member per round; decide every member of
        // the round against the round's committed states, then commit.
        for round in 2..=m {
            let committed = states.clone();
            for target in 0..round {
                let mut numerator = 0.5 * diffs[target] * f64::from(committed[target]);
                let mut denominator = 0.5 * diffs[target];
                for j in 0..round {
                    if j == target {
                        continue;
                    }
                    // 1-based distance: later members verify directly.
                    let distance = if target < j { 1.0 } else { (target - j) as f64 };
                    numerator += 0.5 * (1.0 / distance) * diffs[j] * f64::from(committed[j]);
                    denominator += 0.5 * (1.0 / distance) * diffs[j];
                }
                states[target] = u8::from(numerator / denominator >= 0.5);
            }
        }
        result.extend(states);
    }
    result
}

fn random_entries(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<(u8, f64, usize)>, f64) {
    let len = rng.gen_range(1..=max_len);
    let entries: Vec<(u8, f64, usize)> = (0..len)
        .map(|pos| {
            let state = rng.gen_range(0..=1u8);
            let diff = (rng.gen_range(0..=100) as f64) / 100.0;
            (state, diff, pos)
        })
        .collect();
    let beta = (rng.gen_range(1..=30) as f64) / 100.0;
    (entries, beta)
}

#[test]
fn matches_reference_script() {
    let mut rng = ChaCha8Rng::seed_from_u64(9001);
    for case in 0..300 {
        let (entries, beta) = random_entries(&mut rng, 6);
        let got = collaborate_sequence(&entries, beta);
        let want = reference(&entries, beta);
        assert_eq!(got.final_states, want, "case {case}: {entries:?} beta {beta}");
    }
}

#[test]
fn hand_worked_cluster() {
    let entries = [(1u8, 0.5, 0), (1, 0.5, 1), (0, 0.5, 2)];
    assert_eq!(reference(&entries, 0.05), vec![1, 1, 1]);
    assert_eq!(collaborate_sequence(&entries, 0.05).final_states, vec![1, 1, 1]);
}

proptest! {
    #[test]
    fn unanimous_clusters_are_fixed_points(
        value in 0u8..=1,
        diffs in proptest::collection::vec(0.01f64..1.0, 1..8),
        beta in 0.01f64..0.5,
    ) {
        let entries: Vec<(u8, f64, usize)> =
            diffs.iter().enumerate().map(|(i, &d)| (value, d, i)).collect();
        let result = collaborate_sequence(&entries, beta);
        prop_assert_eq!(result.final_states, vec![value; entries.len()]);
        prop_assert!(result.flips.is_empty());
    }

    #[test]
    fn consensus_states_survive_difficulty_scaling(
        states in proptest::collection::vec(0u8..=1, 2..7),
        raw_diffs in proptest::collection::vec(0.05f64..1.0, 6),
        scale in 0.01f64..10.0,
    ) {
        let members: Vec<(u8, f64)> = states
            .iter()
            .zip(&raw_diffs)
            .map(|(&s, &d)| (s, d))
            .collect();
        let scaled: Vec<(u8, f64)> =
            members.iter().map(|&(s, d)| (s, d * scale)).collect();
        for target in 0..members.len() {
            prop_assert_eq!(
                optimize_subgoal(&members, target).unwrap(),
                optimize_subgoal(&scaled, target).unwrap()
            );
        }
    }

    #[test]
    fn gamma_is_bounded(
        states in proptest::collection::vec(0u8..=1, 1..8),
        raw_diffs in proptest::collection::vec(0.0f64..1.0, 8),
        target_seed in 0usize..8,
    ) {
        let members: Vec<(u8, f64)> = states
            .iter()
            .zip(&raw_diffs)
            .map(|(&s, &d)| (s, d))
            .collect();
        let target = target_seed % members.len();
        let g = compute_gamma(&members, target).unwrap();
        prop_assert!(g.gamma >= 0.0 && g.gamma <= 1.0);
        prop_assert!(g.gamma2 > 0.0);
        prop_assert!((g.gamma - g.gamma1 / g.gamma2).abs() < 1e-15);
        for n in &g.neighbors {
            prop_assert!(n.weight <= 1.0 && n.weight > 0.0);
        }
    }

    #[test]
    fn raising_a_neighbor_never_drops_the_target(
        states in proptest::collection::vec(0u8..=1, 2..7),
        raw_diffs in proptest::collection::vec(0.05f64..1.0, 6),
        target_seed in 0usize..8,
        neighbor_seed in 0usize..8,
    ) {
        let mut members: Vec<(u8, f64)> = states
            .iter()
            .zip(&raw_diffs)
            .map(|(&s, &d)| (s, d))
            .collect();
        let target = target_seed % members.len();
        let neighbor = neighbor_seed % members.len();
        prop_assume!(neighbor != target && members[neighbor].0 == 0);
        let before_gamma = compute_gamma(&members, target).unwrap();
        let before_state = optimize_subgoal(&members, target).unwrap();
        members[neighbor].0 = 1;
        let after_gamma = compute_gamma(&members, target).unwrap();
        let after_state = optimize_subgoal(&members, target).unwrap();
        prop_assert!(after_gamma.gamma1 >= before_gamma.gamma1);
        prop_assert_eq!(after_gamma.gamma2, before_gamma.gamma2);
        if before_state == 1 {
            prop_assert_eq!(after_state, 1);
        }
    }

    #[test]
    fn emitted_clusters_satisfy_the_pairwise_bound(
        states in proptest::collection::vec(0u8..=1, 1..12),
        raw_diffs in proptest::collection::vec(0.0f64..1.0, 12),
        beta in 0.01f64..0.4,
    ) {
        let entries: Vec<(u8, f64, usize)> = states
            .iter()
            .zip(&raw_diffs)
            .enumerate()
            .map(|(i, (&s, &d))| (s, d, i))
            .collect();
        let clusters = partition_clusters(&entries, beta);
        let mut covered = 0;
        for cluster in &clusters {
            covered += cluster.members.len();
            for a in &cluster.members {
                for b in &cluster.members {
                    prop_assert!((a.difficulty - b.difficulty).abs() < beta || a.index == b.index);
                }
            }
        }
        prop_assert_eq!(covered, entries.len());
    }
}

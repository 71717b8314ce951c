//! Shared input builders for the benchmarks.

use ktopt_core::coordination::StateDifficultySeq;
use ktopt_core::graph_embed::BipartiteGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_state_difficulty_seq(len: usize, seed: u64) -> StateDifficultySeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
    let diffs: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    StateDifficultySeq::from_states_difficulties(&states, &diffs).unwrap()
}

pub fn random_cluster_entries(len: usize, seed: u64) -> Vec<(u8, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|pos| (rng.gen_range(0..=1), rng.gen_range(0.01..1.0), pos))
        .collect()
}

pub fn random_labeled_scores(n: usize, seed: u64) -> (Vec<u8>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    let scores = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    (labels, scores)
}

pub fn random_bipartite_graph(questions: usize, skills: usize, seed: u64) -> BipartiteGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for q in 0..questions {
        // Every question gets at least one skill.
        edges.push((q, rng.gen_range(0..skills)));
        if rng.gen_range(0..100) < 20 {
            edges.push((q, rng.gen_range(0..skills)));
        }
    }
    let attributes = (0..questions).map(|_| rng.gen_range(0.0..1.0)).collect();
    BipartiteGraph::from_edges(
        (0..questions).map(|q| format!("q{q}")).collect(),
        (0..skills).map(|s| format!("s{s}")).collect(),
        &edges,
        attributes,
    )
}

//! Consensus repair of same-skill, similar-difficulty exercises.
//!
//! Same-skill entries are partitioned into clusters whose pairwise normalized
//! difficulty difference stays below `beta` (greedy, left to right). Within a
//! cluster each member's state is re-decided by the ratio of two
//! difficulty- and distance-weighted sums: the numerator weights the members
//! answered correctly, the denominator weights all members. A member flips to
//! 1 when the ratio reaches 0.5. The cluster is processed by sequential
//! growth: the first two members form the initial objective, every member of
//! the objective is re-decided once against the objective's committed states,
//! the results are committed, the next member is appended, and so on until
//! the cluster is exhausted.
//!
//! Distance weighting is asymmetric: a later member verifies an earlier one
//! directly (distance 1), while an earlier member's influence decays with the
//! index gap.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CollaborationError {
    #[error("propagation distance undefined for i = j")]
    SelfDistance,
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("target index {0} out of bounds for cluster of size {1}")]
    TargetOutOfBounds(usize, usize),
}

/// Smallest difficulty used inside this module; zero difficulties are
/// remapped so the consensus denominator stays positive.
pub const MIN_DIFFICULTY: f64 = 1e-6;

/// One cluster member: 1-based index within the cluster, binary state,
/// positive difficulty, and the position in the student's full sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterMember {
    pub index: usize,
    pub state: u8,
    pub difficulty: f64,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<ClusterMember>,
}

/// Propagation distance between cluster indices (1-based): 1 when the
/// neighbor comes later (it verifies the target directly), |i - j| when it
/// comes earlier.
pub fn propagation_distance(i: usize, j: usize) -> Result<u32, CollaborationError> {
    if i == j {
        return Err(CollaborationError::SelfDistance);
    }
    Ok(if i < j { 1 } else { (i - j) as u32 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTerm {
    /// 1-based cluster index of the neighbor.
    pub index: usize,
    pub distance: u32,
    /// 1 / distance.
    pub weight: f64,
    /// weight * difficulty * state contribution to the numerator.
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaBreakdown {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma: f64,
    pub neighbors: Vec<NeighborTerm>,
}

/// Consensus ratio for the member at 0-based `target` of `(state, difficulty)`
/// pairs ordered as in the cluster.
///
/// numerator   = d_t * s_t / 2 + sum over neighbors of (d_j * s_j) / (2 L)
/// denominator = the same with every state replaced by 1
pub fn compute_gamma(
    members: &[(u8, f64)],
    target: usize,
) -> Result<GammaBreakdown, CollaborationError> {
    if members.is_empty() {
        return Err(CollaborationError::EmptyCluster);
    }
    if target >= members.len() {
        return Err(CollaborationError::TargetOutOfBounds(target, members.len()));
    }
    let d = |raw: f64| raw.max(MIN_DIFFICULTY);
    let (t_state, t_diff) = members[target];
    let mut gamma1 = 0.5 * d(t_diff) * f64::from(t_state);
    let mut gamma2 = 0.5 * d(t_diff);
    let mut neighbors = Vec::with_capacity(members.len() - 1);
    for (j, &(state, diff)) in members.iter().enumerate() {
        if j == target {
            continue;
        }
        let distance = propagation_distance(target + 1, j + 1).expect("distinct indices");
        let weight = 1.0 / f64::from(distance);
        let term = 0.5 * weight * d(diff) * f64::from(state);
        gamma1 += term;
        gamma2 += 0.5 * weight * d(diff);
        neighbors.push(NeighborTerm { index: j + 1, distance, weight, term });
    }
    Ok(GammaBreakdown { gamma1, gamma2, gamma: gamma1 / gamma2, neighbors })
}

/// New state for one member: 1 when the consensus ratio reaches 0.5.
pub fn optimize_subgoal(
    members: &[(u8, f64)],
    target: usize,
) -> Result<u8, CollaborationError> {
    Ok(u8::from(compute_gamma(members, target)?.gamma >= 0.5))
}

/// Greedy left-to-right clustering: a member joins the open cluster only if
/// its difficulty stays within `beta` of *every* current member, otherwise it
/// starts a new cluster. Input entries are (state, difficulty, position).
pub fn partition_clusters(entries: &[(u8, f64, usize)], beta: f64) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut open: Vec<ClusterMember> = Vec::new();
    for &(state, difficulty, position) in entries {
        let fits = !open.is_empty()
            && open.iter().all(|m| (m.difficulty - difficulty).abs() < beta);
        if !open.is_empty() && !fits {
            clusters.push(Cluster { members: std::mem::take(&mut open) });
        }
        open.push(ClusterMember { index: open.len() + 1, state, difficulty, position });
    }
    if !open.is_empty() {
        clusters.push(Cluster { members: open });
    }
    clusters
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollaborationFlip {
    /// Position in the student's full sequence.
    pub position: usize,
    pub before: u8,
    pub after: u8,
    /// Position of the first member of the cluster that decided the flip.
    pub cluster_anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollaborationResult {
    /// New state per input entry, in input order.
    pub final_states: Vec<u8>,
    pub flips: Vec<CollaborationFlip>,
}

/// Runs the sequential-growth consensus over every cluster of a same-skill
/// subsequence. Clusters of size 1 pass through unchanged.
pub fn collaborate_sequence(entries: &[(u8, f64, usize)], beta: f64) -> CollaborationResult {
    let clusters = partition_clusters(entries, beta);
    let mut final_states = Vec::with_capacity(entries.len());
    let mut flips = Vec::new();
    for cluster in &clusters {
        let states = optimize_cluster(cluster);
        let anchor = cluster.members[0].position;
        for (member, &after) in cluster.members.iter().zip(&states) {
            if after != member.state {
                flips.push(CollaborationFlip {
                    position: member.position,
                    before: member.state,
                    after,
                    cluster_anchor: anchor,
                });
            }
            final_states.push(after);
        }
    }
    CollaborationResult { final_states, flips }
}

/// Sequential growth over one cluster; states are committed between rounds,
/// so every sub-goal in a round is decided against the same snapshot.
fn optimize_cluster(cluster: &Cluster) -> Vec<u8> {
    let mut states: Vec<u8> = cluster.members.iter().map(|m| m.state).collect();
    let difficulties: Vec<f64> = cluster.members.iter().map(|m| m.difficulty).collect();
    let m = states.len();
    for round in 2..=m {
        let snapshot: Vec<(u8, f64)> = states[..round]
            .iter()
            .zip(&difficulties[..round])
            .map(|(&s, &d)| (s, d))
            .collect();
        for (target, state) in states[..round].iter_mut().enumerate() {
            *state = optimize_subgoal(&snapshot, target).expect("valid bounds");
        }
    }
    states
}

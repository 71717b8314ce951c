//! Repair of uncoordinated records within a same-skill subsequence.
//!
//! A record pair is uncoordinated when a much harder later question was
//! answered correctly while an earlier easier one was not (or the converse:
//! a much easier later question answered incorrectly after a harder correct
//! one). Each entry is repaired by a forward scan over the entries after it:
//! at every step a closed-form control in {-1, 0, +1} is derived from the
//! current state, the later entry's *initial* state, and the normalized
//! difficulty gap against the threshold `alpha`; the control is added to the
//! state. Because every triggering later entry forces the state to its own
//! direction, the last triggering entry determines the final state, and the
//! output states are a fixed point of the scan.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoordinationError {
    #[error("state must be 0 or 1, got {0}")]
    InvalidState(u8),
    #[error("difficulty must lie in [0, 1], got {0}")]
    InvalidDifficulty(String),
    #[error("positions must be strictly increasing")]
    NonMonotonicPositions,
    #[error("empty sequence")]
    Empty,
    #[error("discount must lie in (0, 1], got {0}")]
    InvalidDiscount(String),
}

/// One same-skill entry: binary answer state, normalized difficulty, and the
/// position in the student's full sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDifficulty {
    pub state: u8,
    pub difficulty: f64,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDifficultySeq {
    entries: Vec<StateDifficulty>,
}

impl StateDifficultySeq {
    pub fn new(entries: Vec<StateDifficulty>) -> Result<Self, CoordinationError> {
        for e in &entries {
            if e.state > 1 {
                return Err(CoordinationError::InvalidState(e.state));
            }
            if !(0.0..=1.0).contains(&e.difficulty) {
                return Err(CoordinationError::InvalidDifficulty(e.difficulty.to_string()));
            }
        }
        if entries.windows(2).any(|w| w[0].position >= w[1].position) {
            return Err(CoordinationError::NonMonotonicPositions);
        }
        Ok(StateDifficultySeq { entries })
    }

    /// Positions default to 0..n.
    pub fn from_states_difficulties(
        states: &[u8],
        difficulties: &[f64],
    ) -> Result<Self, CoordinationError> {
        assert_eq!(states.len(), difficulties.len());
        Self::new(
            states
                .iter()
                .zip(difficulties)
                .enumerate()
                .map(|(i, (&s, &d))| StateDifficulty { state: s, difficulty: d, position: i })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[StateDifficulty] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Closed-form control for one comparison step.
///
/// Returns +1 when the current state is 0, the later entry's initial state is
/// 1, the later entry is harder, and the gap reaches `alpha`; -1 in the
/// mirrored case; 0 otherwise.
pub fn control_value(
    s_cur: u8,
    s_later_initial: u8,
    df_cur: f64,
    df_later: f64,
    alpha: f64,
) -> i8 {
    let gap = (df_cur - df_later).abs();
    if s_cur < s_later_initial && df_cur < df_later && gap >= alpha {
        1
    } else if s_cur > s_later_initial && df_cur > df_later && gap >= alpha {
        -1
    } else {
        0
    }
}

/// Outcome of repairing a single entry: its final state and the control
/// trace as (scan step, control) pairs, nonzero controls only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryOutcome {
    pub final_state: u8,
    pub controls: Vec<(usize, i8)>,
}

/// Forward scan for the entry at `index`: compare against every later
/// entry's initial state in order, applying the control at each step.
pub fn optimize_entry(seq: &StateDifficultySeq, index: usize, alpha: f64) -> EntryOutcome {
    let entries = seq.entries();
    let cur = entries[index];
    let mut state = cur.state;
    let mut controls = Vec::new();
    for (step, later) in entries[index + 1..].iter().enumerate() {
        let u = control_value(state, later.state, cur.difficulty, later.difficulty, alpha);
        if u != 0 {
            let next = state as i8 + u;
            // The strict inequalities in the control law keep states binary;
            // anything else is a bug.
            assert!(next == 0 || next == 1, "state left {{0,1}}: {state} + {u}");
            state = next as u8;
            controls.push((step, u));
        }
    }
    EntryOutcome { final_state: state, controls }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipEntry {
    /// Index within the same-skill subsequence.
    pub index: usize,
    /// Position in the student's full sequence.
    pub position: usize,
    pub before: u8,
    pub after: u8,
    /// Full-sequence position of the last later entry whose control fired.
    pub trigger_position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationResult {
    pub final_states: Vec<u8>,
    /// Per entry, the (scan step, control) trace.
    pub controls: Vec<Vec<(usize, i8)>>,
    pub flips: Vec<FlipEntry>,
    /// Discounted control-effort cost per entry, sum of discount^step over
    /// the nonzero controls.
    pub entry_costs: Vec<f64>,
    pub total_cost: f64,
}

/// Repairs every entry of a same-skill subsequence independently. Each
/// entry's scan reads only the *initial* states of the entries after it, so
/// entries may be processed in any order; the result is deterministic.
pub fn coordinate_sequence(
    seq: &StateDifficultySeq,
    alpha: f64,
    discount: f64,
) -> Result<CoordinationResult, CoordinationError> {
    if seq.is_empty() {
        return Err(CoordinationError::Empty);
    }
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(CoordinationError::InvalidDiscount(discount.to_string()));
    }
    let entries = seq.entries();
    let mut final_states = Vec::with_capacity(entries.len());
    let mut controls = Vec::with_capacity(entries.len());
    let mut flips = Vec::new();
    let mut entry_costs = Vec::with_capacity(entries.len());
    for index in 0..entries.len() {
        let outcome = optimize_entry(seq, index, alpha);
        let cost: f64 =
            outcome.controls.iter().map(|(k, _)| discount.powi(*k as i32)).sum();
        if outcome.final_state != entries[index].state {
            let (last_step, _) = *outcome.controls.last().expect("flip implies a control");
            flips.push(FlipEntry {
                index,
                position: entries[index].position,
                before: entries[index].state,
                after: outcome.final_state,
                trigger_position: entries[index + 1 + last_step].position,
            });
        }
        final_states.push(outcome.final_state);
        controls.push(outcome.controls);
        entry_costs.push(cost);
    }
    let total_cost = entry_costs.iter().sum();
    Ok(CoordinationResult { final_states, controls, flips, entry_costs, total_cost })
}

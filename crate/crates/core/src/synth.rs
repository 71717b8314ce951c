//! Synthetic interaction logs with known latent mastery.
//!
//! Each skill draws a difficulty level; each student draws an ability level;
//! a student has mastered a skill when their ability reaches the skill's
//! difficulty. Every interaction's latent correctness is the mastery bit of
//! its question's skill, and the observed response distorts it: mastered
//! students slip with probability `slip`, unmastered students guess
//! correctly with probability `guess`. The generator emits a corpus valid
//! for the full pipeline plus the ground truth needed to score how close a
//! set of (possibly rewritten) response states is to true cognition.

use std::collections::BTreeMap;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::corpus::{Corpus, Interaction, SkillId, StudentId, StudentSequence};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("states for student {0} have length {1}, truth has {2}")]
    LengthMismatch(String, usize, usize),
    #[error("student {0} missing from states")]
    MissingStudent(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_skills: usize,
    /// Probability a mastered student answers incorrectly.
    pub slip: f64,
    /// Probability an unmastered student answers correctly.
    pub guess: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Beta distribution shaping skill difficulty levels.
    pub difficulty_alpha: f64,
    pub difficulty_beta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_students: 100,
            n_questions: 50,
            n_skills: 8,
            slip: 0.2,
            guess: 0.2,
            seq_len_min: 20,
            seq_len_max: 40,
            difficulty_alpha: 2.0,
            difficulty_beta: 3.0,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_students == 0 || self.n_questions == 0 || self.n_skills == 0 {
            return Err(SynthError::InvalidConfig("counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) || !(0.0..=1.0).contains(&self.guess) {
            return Err(SynthError::InvalidConfig("slip/guess must lie in [0, 1]".into()));
        }
        if self.slip + self.guess >= 1.0 {
            return Err(SynthError::InvalidConfig(
                "slip + guess must be < 1 for identifiability".into(),
            ));
        }
        if self.seq_len_min < 3 || self.seq_len_min > self.seq_len_max {
            return Err(SynthError::InvalidConfig(
                "need 3 <= seq_len_min <= seq_len_max".into(),
            ));
        }
        if self.difficulty_alpha <= 0.0 || self.difficulty_beta <= 0.0 {
            return Err(SynthError::InvalidConfig("beta shape parameters must be > 0".into()));
        }
        Ok(())
    }
}

/// Ground truth: the mastery bit per (student, skill) and the latent (pre
/// distortion) correctness of every interaction, aligned with the corpus
/// sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTruth {
    pub mastery: BTreeMap<(StudentId, SkillId), u8>,
    pub latent: BTreeMap<StudentId, Vec<u8>>,
}

/// Observed response from a latent correctness bit and the two distortion
/// probabilities.
pub fn distort<R: Rng>(latent: u8, slip: f64, guess: f64, rng: &mut R) -> u8 {
    let roll: f64 = rng.gen_range(0.0..1.0);
    if latent == 1 {
        u8::from(roll >= slip)
    } else {
        u8::from(roll < guess)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn generate(config: &SynthConfig) -> Result<(Corpus, SynthTruth), SynthError> {
    config.validate()?;
    let mut root_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let skill_ids: Vec<SkillId> =
        (0..config.n_skills).map(|k| format!("k{k:03}")).collect();
    let question_ids: Vec<String> =
        (0..config.n_questions).map(|q| format!("q{q:05}")).collect();

    let beta = Beta::new(config.difficulty_alpha, config.difficulty_beta)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let skill_levels: Vec<f64> = (0..config.n_skills).map(|_| beta.sample(&mut root_rng)).collect();
    let question_skill: Vec<usize> =
        (0..config.n_questions).map(|_| root_rng.gen_range(0..config.n_skills)).collect();

    let mut sequences = BTreeMap::new();
    let mut mastery = BTreeMap::new();
    let mut latent_map = BTreeMap::new();
    for s in 0..config.n_students {
        // Independent stream per student, derived from the root seed.
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ (s as u64 + 1)));
        let student_id = format!("s{s:05}");
        let ability: f64 = rng.gen_range(0.0..1.0);
        let mastered: Vec<u8> =
            skill_levels.iter().map(|&level| u8::from(ability >= level)).collect();
        for (k, &bit) in mastered.iter().enumerate() {
            mastery.insert((student_id.clone(), skill_ids[k].clone()), bit);
        }
        let len = rng.gen_range(config.seq_len_min..=config.seq_len_max);
        let mut interactions = Vec::with_capacity(len);
        let mut latent_states = Vec::with_capacity(len);
        for t in 0..len {
            let q = rng.gen_range(0..config.n_questions);
            let skill = question_skill[q];
            let latent = mastered[skill];
            let observed = distort(latent, config.slip, config.guess, &mut rng);
            latent_states.push(latent);
            interactions.push(Interaction {
                question_id: question_ids[q].clone(),
                skill_ids: std::iter::once(skill_ids[skill].clone()).collect(),
                response: observed,
                order_index: t as u32,
            });
        }
        latent_map.insert(student_id.clone(), latent_states);
        sequences.insert(student_id.clone(), StudentSequence { student_id, interactions });
    }
    Ok((Corpus::from_sequences(sequences), SynthTruth { mastery, latent: latent_map }))
}

/// Fraction of interactions whose state matches the latent mastery-implied
/// correctness. `states` maps each student to one state per interaction.
pub fn agreement(
    states: &BTreeMap<StudentId, Vec<u8>>,
    truth: &SynthTruth,
) -> Result<f64, SynthError> {
    let mut matches = 0u64;
    let mut total = 0u64;
    for (student, latent) in &truth.latent {
        let observed = states
            .get(student)
            .ok_or_else(|| SynthError::MissingStudent(student.clone()))?;
        if observed.len() != latent.len() {
            return Err(SynthError::LengthMismatch(
                student.clone(),
                observed.len(),
                latent.len(),
            ));
        }
        total += latent.len() as u64;
        matches += observed.iter().zip(latent).filter(|(a, b)| a == b).count() as u64;
    }
    Ok(matches as f64 / total as f64)
}

pub fn write_truth_csv<W: io::Write>(truth: &SynthTruth, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["student_id", "skill_id", "mastery"])?;
    for ((student, skill), bit) in &truth.mastery {
        w.write_record([student.as_str(), skill.as_str(), &bit.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_states(corpus: &Corpus) -> BTreeMap<StudentId, Vec<u8>> {
        corpus
            .sequences
            .iter()
            .map(|(id, seq)| (id.clone(), seq.interactions.iter().map(|it| it.response).collect()))
            .collect()
    }

    #[test]
    fn no_distortion_reproduces_latent() {
        let config = SynthConfig { slip: 0.0, guess: 0.0, ..SynthConfig::default() };
        let (corpus, truth) = generate(&config).unwrap();
        assert_eq!(agreement(&raw_states(&corpus), &truth).unwrap(), 1.0);
    }

    #[test]
    fn full_distortion_inverts_latent() {
        // slip = guess = 1 fails config validation (identifiability), so the
        // inversion boundary is checked on the distortion rule itself.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for latent in [0u8, 1u8] {
            for _ in 0..32 {
                assert_eq!(distort(latent, 1.0, 1.0, &mut rng), 1 - latent);
            }
        }
    }

    #[test]
    fn flip_rate_concentrates() {
        let config = SynthConfig {
            n_students: 250,
            seq_len_min: 40,
            seq_len_max: 40,
            slip: 0.2,
            guess: 0.2,
            seed: 11,
            ..SynthConfig::default()
        };
        let (corpus, truth) = generate(&config).unwrap();
        assert!(corpus.counts.records >= 10_000);
        let agree = agreement(&raw_states(&corpus), &truth).unwrap();
        let flip_rate = 1.0 - agree;
        assert!((flip_rate - 0.2).abs() <= 0.02, "flip rate {flip_rate}");
    }

    #[test]
    fn deterministic_per_seed() {
        let config = SynthConfig::default();
        let (c1, t1) = generate(&config).unwrap();
        let (c2, t2) = generate(&config).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn agreement_boundaries() {
        let config = SynthConfig { n_students: 5, ..SynthConfig::default() };
        let (_, truth) = generate(&config).unwrap();
        let exact = truth.latent.clone();
        assert_eq!(agreement(&exact, &truth).unwrap(), 1.0);
        let inverted: BTreeMap<_, _> = truth
            .latent
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|b| 1 - b).collect()))
            .collect();
        assert_eq!(agreement(&inverted, &truth).unwrap(), 0.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SynthConfig { slip: 0.6, guess: 0.5, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthConfig { n_skills: 0, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthConfig { seq_len_min: 2, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn corpus_is_pipeline_valid() {
        let (corpus, _) = generate(&SynthConfig::default()).unwrap();
        for seq in corpus.sequences.values() {
            assert!(seq.interactions.len() >= 3);
            for it in &seq.interactions {
                assert!(!it.skill_ids.is_empty());
                assert!(it.response <= 1);
            }
        }
        assert_eq!(corpus.counts.students, 100);
    }
}

//! Ingestion invariants: canonical round-trips, row accounting, subsequence
//! coverage, and an independent group-by on a generated raw-format file.

use std::collections::{BTreeMap, BTreeSet};

use ktopt_core::corpus::{
    ingest_reader, same_skill_subsequence, Corpus, CsvSchema, IngestOptions, Interaction,
    StudentSequence,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arbitrary_corpus() -> impl Strategy<Value = Corpus> {
    // 1..5 students, 3..8 interactions each, small id pools.
    let interaction = (0u8..=1, 0usize..12, proptest::collection::btree_set(0usize..6, 1..3));
    let sequence = proptest::collection::vec(interaction, 3..8);
    proptest::collection::vec(sequence, 1..5).prop_map(|students| {
        let mut sequences = BTreeMap::new();
        for (s, rows) in students.into_iter().enumerate() {
            let student_id = format!("stu{s}");
            let interactions = rows
                .into_iter()
                .enumerate()
                .map(|(t, (response, question, skills))| Interaction {
                    question_id: format!("q{question}"),
                    skill_ids: skills.into_iter().map(|k| format!("k{k}")).collect(),
                    response,
                    order_index: t as u32,
                })
                .collect();
            sequences.insert(
                student_id.clone(),
                StudentSequence { student_id, interactions },
            );
        }
        Corpus::from_sequences(sequences)
    })
}

proptest! {
    #[test]
    fn ingest_of_emitted_canonical_form_is_identity(corpus in arbitrary_corpus()) {
        let mut buf = Vec::new();
        corpus.write_canonical_csv(&mut buf).unwrap();
        let (reread, report) =
            ingest_reader(buf.as_slice(), &CsvSchema::canonical(), &IngestOptions::default())
                .unwrap();
        prop_assert_eq!(&reread, &corpus);
        prop_assert_eq!(report.kept as usize, corpus.counts.records);
        prop_assert_eq!(report.rejections.total(), 0);
    }

    #[test]
    fn skill_subsequences_cover_every_interaction(corpus in arbitrary_corpus()) {
        for seq in corpus.sequences.values() {
            let mut covered: BTreeSet<usize> = BTreeSet::new();
            let skills: BTreeSet<&String> =
                seq.interactions.iter().flat_map(|it| it.skill_ids.iter()).collect();
            for skill in skills {
                for (pos, _) in same_skill_subsequence(seq, skill) {
                    covered.insert(pos);
                }
            }
            prop_assert_eq!(covered.len(), seq.interactions.len());
        }
    }
}

/// Raw-format sample in the shape of a tutoring-platform export; counts
/// checked against a from-scratch group-by over the same rows.
#[test]
fn thousand_row_sample_matches_independent_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let mut lines = vec!["order_id,user_id,problem_id,correct,skill_id".to_string()];
    let mut raw_rows: Vec<(String, String, String, String)> = Vec::new();
    for order in 0..1000 {
        let user = format!("u{}", rng.gen_range(0..80));
        let problem = format!("p{}", rng.gen_range(0..120));
        let correct = rng.gen_range(0..=1u8).to_string();
        // ~5% of rows lack a skill tag.
        let skill = if rng.gen_range(0..100) < 5 {
            String::new()
        } else {
            format!("sk{}", rng.gen_range(0..15))
        };
        lines.push(format!("{order},{user},{problem},{correct},{skill}"));
        raw_rows.push((user, problem, correct, skill));
    }
    let data = lines.join("\n") + "\n";

    let schema = CsvSchema {
        student: "user_id".into(),
        question: "problem_id".into(),
        skills: "skill_id".into(),
        response: "correct".into(),
        order: Some("order_id".into()),
        skill_separator: ';',
    };
    let (corpus, report) =
        ingest_reader(data.as_bytes(), &schema, &IngestOptions::default()).unwrap();

    // Independent tally straight off the raw rows.
    let mut skillless = 0u64;
    let mut per_user: BTreeMap<&str, u64> = BTreeMap::new();
    for (user, _, _, skill) in &raw_rows {
        if skill.is_empty() {
            skillless += 1;
        } else {
            *per_user.entry(user).or_default() += 1;
        }
    }
    let mut expected_students = 0usize;
    let mut expected_records = 0u64;
    let mut short_rows = 0u64;
    for n in per_user.values() {
        if *n >= 3 {
            expected_students += 1;
            expected_records += n;
        } else {
            short_rows += n;
        }
    }
    let mut expected_questions: BTreeSet<&str> = BTreeSet::new();
    let mut expected_skills: BTreeSet<&str> = BTreeSet::new();
    for (user, problem, _, skill) in &raw_rows {
        if !skill.is_empty() && per_user.get(user.as_str()).copied().unwrap_or(0) >= 3 {
            expected_questions.insert(problem);
            expected_skills.insert(skill);
        }
    }

    assert_eq!(report.input_rows, 1000);
    assert_eq!(report.rejections.skillless, skillless);
    assert_eq!(report.rejections.short_user, short_rows);
    assert_eq!(report.kept, expected_records);
    assert_eq!(corpus.counts.students, expected_students);
    assert_eq!(corpus.counts.records as u64, expected_records);
    assert_eq!(corpus.counts.questions, expected_questions.len());
    assert_eq!(corpus.counts.skills, expected_skills.len());
    assert_eq!(report.kept + report.rejections.total(), report.input_rows);
}

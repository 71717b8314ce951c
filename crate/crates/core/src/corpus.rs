//! Interaction-log ingestion and the in-memory corpus.
//!
//! A corpus holds one time-ordered interaction sequence per student plus the
//! question-to-skill mapping. Ingestion applies two filtering rules: rows
//! without any skill tag are dropped, and students left with fewer than
//! `min_seq_len` records are dropped entirely. Rows with a non-binary
//! correctness value are rejected and counted. All drops are reported so that
//! kept + dropped always equals the number of input rows.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use thiserror::Error;

pub type StudentId = String;
pub type QuestionId = String;
pub type SkillId = String;

/// One answer event: which question, which skills it exercises, whether the
/// recorded response was correct, and its position in the student's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub question_id: QuestionId,
    /// Non-empty; multi-skill questions carry every tag.
    pub skill_ids: BTreeSet<SkillId>,
    /// 0 = incorrect, 1 = correct.
    pub response: u8,
    /// Position within the student's sequence, strictly increasing.
    pub order_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentSequence {
    pub student_id: StudentId,
    pub interactions: Vec<Interaction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusCounts {
    pub students: usize,
    pub questions: usize,
    pub skills: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: BTreeMap<StudentId, StudentSequence>,
    pub question_skills: BTreeMap<QuestionId, BTreeSet<SkillId>>,
    pub counts: CorpusCounts,
}

/// Per-rule row rejection tallies from one ingest run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RejectionCounts {
    /// Rows whose skill field was empty.
    pub skillless: u64,
    /// Rows whose correctness value was not 0 or 1.
    pub nonbinary: u64,
    /// Rows dropped because their student fell below the minimum length.
    pub short_user: u64,
    /// Rows removed by the caller-supplied row predicate.
    pub filtered: u64,
}

impl RejectionCounts {
    pub fn total(&self) -> u64 {
        self.skillless + self.nonbinary + self.short_user + self.filtered
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub rejections: RejectionCounts,
    pub kept: u64,
    pub input_rows: u64,
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub student: String,
    pub question: String,
    pub skills: String,
    pub response: String,
    /// Optional ordering column (timestamp or sequence number). When absent,
    /// file order is used.
    pub order: Option<String>,
    /// Separator for multi-valued skill cells.
    pub skill_separator: char,
}

impl CsvSchema {
    /// Schema of the canonical interchange format emitted by
    /// [`Corpus::write_canonical_csv`].
    pub fn canonical() -> Self {
        CsvSchema {
            student: "student_id".into(),
            question: "question_id".into(),
            skills: "skill_ids".into(),
            response: "response".into(),
            order: Some("order_index".into()),
            skill_separator: ';',
        }
    }
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Row predicate: gets (headers, record); return false to drop the row.
pub type RowFilter<'a> = &'a dyn Fn(&csv::StringRecord, &csv::StringRecord) -> bool;

pub struct IngestOptions<'a> {
    pub min_seq_len: usize,
    pub row_filter: Option<RowFilter<'a>>,
}

impl Default for IngestOptions<'_> {
    fn default() -> Self {
        IngestOptions { min_seq_len: 3, row_filter: None }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read input: {0}")]
    Io(#[from] io::Error),
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),
}

struct RawRow {
    file_pos: usize,
    order_raw: Option<String>,
    question: QuestionId,
    skills: BTreeSet<SkillId>,
    response: u8,
}

impl Corpus {
    /// Rebuilds the question-skill map and counts from per-student sequences.
    pub fn from_sequences(sequences: BTreeMap<StudentId, StudentSequence>) -> Self {
        let mut question_skills: BTreeMap<QuestionId, BTreeSet<SkillId>> = BTreeMap::new();
        let mut skills: BTreeSet<&SkillId> = BTreeSet::new();
        let mut records = 0usize;
        for seq in sequences.values() {
            for it in &seq.interactions {
                records += 1;
                question_skills
                    .entry(it.question_id.clone())
                    .or_default()
                    .extend(it.skill_ids.iter().cloned());
            }
        }
        for set in question_skills.values() {
            skills.extend(set.iter());
        }
        let counts = CorpusCounts {
            students: sequences.len(),
            questions: question_skills.len(),
            skills: skills.len(),
            records,
        };
        drop(skills);
        Corpus { sequences, question_skills, counts }
    }

    pub fn write_canonical_csv<W: io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["student_id", "question_id", "skill_ids", "response", "order_index"])?;
        for seq in self.sequences.values() {
            for it in &seq.interactions {
                let skills: Vec<&str> = it.skill_ids.iter().map(String::as_str).collect();
                w.write_record([
                    seq.student_id.as_str(),
                    it.question_id.as_str(),
                    &skills.join(";"),
                    if it.response == 1 { "1" } else { "0" },
                    &it.order_index.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_canonical_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<(), IngestError> {
        let file = std::fs::File::create(path)?;
        self.write_canonical_csv(io::BufWriter::new(file)).map_err(IngestError::from)
    }
}

pub fn ingest_csv<P: AsRef<Path>>(
    path: P,
    schema: &CsvSchema,
) -> Result<(Corpus, IngestReport), IngestError> {
    ingest_csv_with(path, schema, &IngestOptions::default())
}

pub fn ingest_csv_with<P: AsRef<Path>>(
    path: P,
    schema: &CsvSchema,
    options: &IngestOptions,
) -> Result<(Corpus, IngestReport), IngestError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(io::BufReader::new(file), schema, options)
}

/// Core of ingestion; see the module docs for the filtering rules.
///
/// Ordering: when the schema names an order column and every kept row parses
/// as a number, rows sort numerically; otherwise lexicographically by the raw
/// cell. Ties keep file order (stable sort), so ingestion is deterministic
/// for a fixed input.
pub fn ingest_reader<R: io::Read>(
    reader: R,
    schema: &CsvSchema,
    options: &IngestOptions,
) -> Result<(Corpus, IngestReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let student_col = col(&schema.student)?;
    let question_col = col(&schema.question)?;
    let skills_col = col(&schema.skills)?;
    let response_col = col(&schema.response)?;
    let order_col = match &schema.order {
        Some(name) => Some(col(name)?),
        None => None,
    };

    let mut rejections = RejectionCounts::default();
    let mut by_student: BTreeMap<StudentId, Vec<RawRow>> = BTreeMap::new();
    let mut input_rows = 0u64;

    for (file_pos, record) in rdr.records().enumerate() {
        let record = record?;
        input_rows += 1;
        if let Some(filter) = options.row_filter {
            if !filter(&headers, &record) {
                rejections.filtered += 1;
                continue;
            }
        }
        let response = match record.get(response_col).map(str::trim) {
            Some("0") => 0u8,
            Some("1") => 1u8,
            _ => {
                rejections.nonbinary += 1;
                continue;
            }
        };
        let skills: BTreeSet<SkillId> = record
            .get(skills_col)
            .unwrap_or("")
            .split(schema.skill_separator)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if skills.is_empty() {
            rejections.skillless += 1;
            continue;
        }
        let student = record.get(student_col).unwrap_or("").trim().to_string();
        let question = record.get(question_col).unwrap_or("").trim().to_string();
        let order_raw = order_col.map(|c| record.get(c).unwrap_or("").trim().to_string());
        by_student.entry(student).or_default().push(RawRow {
            file_pos,
            order_raw,
            question,
            skills,
            response,
        });
    }

    // One ordering rule for the whole file: numeric only if every order cell
    // parses as a number.
    let all_numeric = order_col.is_some()
        && by_student
            .values()
            .flatten()
            .all(|r| r.order_raw.as_deref().is_some_and(|s| s.parse::<f64>().is_ok()));

    let mut sequences: BTreeMap<StudentId, StudentSequence> = BTreeMap::new();
    let mut kept = 0u64;
    for (student_id, mut rows) in by_student {
        if order_col.is_some() {
            if all_numeric {
                rows.sort_by(|a, b| {
                    let ka: f64 = a.order_raw.as_deref().unwrap().parse().unwrap();
                    let kb: f64 = b.order_raw.as_deref().unwrap().parse().unwrap();
                    ka.partial_cmp(&kb).unwrap()
                });
            } else {
                rows.sort_by(|a, b| a.order_raw.cmp(&b.order_raw));
            }
        } else {
            rows.sort_by_key(|r| r.file_pos);
        }
        if rows.len() < options.min_seq_len {
            rejections.short_user += rows.len() as u64;
            continue;
        }
        kept += rows.len() as u64;
        let interactions = rows
            .into_iter()
            .enumerate()
            .map(|(idx, r)| Interaction {
                question_id: r.question,
                skill_ids: r.skills,
                response: r.response,
                order_index: idx as u32,
            })
            .collect();
        sequences.insert(student_id.clone(), StudentSequence { student_id, interactions });
    }

    let corpus = Corpus::from_sequences(sequences);
    Ok((corpus, IngestReport { rejections, kept, input_rows }))
}

/// Same-skill subsequence of one student, in sequence order, with the
/// original positions preserved. Multi-skill questions appear in the
/// subsequence of each of their skills.
pub fn same_skill_subsequence<'a>(
    seq: &'a StudentSequence,
    skill: &str,
) -> Vec<(usize, &'a Interaction)> {
    seq.interactions
        .iter()
        .enumerate()
        .filter(|(_, it)| it.skill_ids.contains(skill))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest_str(data: &str, schema: &CsvSchema, options: &IngestOptions) -> (Corpus, IngestReport) {
        ingest_reader(data.as_bytes(), schema, options).unwrap()
    }

    #[test]
    fn filters_skillless_rows_and_short_students() {
        // 5 rows: one skillless row, one student left with a single row.
        let data = "\
student_id,question_id,skill_ids,response,order_index
a,q1,s1,1,0
a,q2,s1,0,1
a,q3,s2,1,2
b,q1,,1,0
b,q2,s1,0,1
";
        let (corpus, report) = ingest_str(data, &CsvSchema::canonical(), &IngestOptions::default());
        assert_eq!(report.rejections.skillless, 1);
        assert_eq!(report.rejections.short_user, 1);
        assert_eq!(report.kept, 3);
        assert_eq!(report.kept + report.rejections.total(), report.input_rows);
        assert_eq!(corpus.counts.students, 1);
        assert_eq!(corpus.counts.records, 3);
        assert!(corpus.sequences.contains_key("a"));
    }

    #[test]
    fn nonbinary_responses_rejected_and_counted() {
        let data = "\
student_id,question_id,skill_ids,response,order_index
a,q1,s1,1,0
a,q2,s1,2,1
a,q3,s1,0.5,2
a,q4,s1,0,3
a,q5,s1,1,4
";
        let (corpus, report) = ingest_str(data, &CsvSchema::canonical(), &IngestOptions::default());
        assert_eq!(report.rejections.nonbinary, 2);
        assert_eq!(corpus.counts.records, 3);
    }

    #[test]
    fn rows_sorted_by_order_column() {
        let data = "\
student_id,question_id,skill_ids,response,order_index
a,q3,s1,1,12
a,q1,s1,0,3
a,q2,s1,1,7
";
        let (corpus, _) = ingest_str(data, &CsvSchema::canonical(), &IngestOptions::default());
        let seq = &corpus.sequences["a"];
        let ids: Vec<&str> = seq.interactions.iter().map(|it| it.question_id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
        let orders: Vec<u32> = seq.interactions.iter().map(|it| it.order_index).collect();
        assert_eq!(orders, [0, 1, 2]);
    }

    #[test]
    fn equal_order_keys_keep_file_order() {
        let data = "\
student_id,question_id,skill_ids,response,order_index
a,q1,s1,1,5
a,q2,s1,0,5
a,q3,s1,1,5
";
        let (corpus, _) = ingest_str(data, &CsvSchema::canonical(), &IngestOptions::default());
        let ids: Vec<&str> =
            corpus.sequences["a"].interactions.iter().map(|it| it.question_id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
    }

    #[test]
    fn missing_column_is_an_error() {
        let data = "user,question_id,skill_ids,response\na,q1,s1,1\n";
        let err = ingest_reader(data.as_bytes(), &CsvSchema::canonical(), &IngestOptions::default())
            .unwrap_err();
        assert!(matches!(err, IngestError::MissingColumn(ref c) if c == "student_id"));
    }

    #[test]
    fn row_filter_drops_and_counts() {
        let data = "\
student_id,question_id,skill_ids,response,order_index,kind
a,q1,s1,1,0,main
a,q2,s1,0,1,scaffold
a,q3,s1,1,2,main
a,q4,s1,1,3,main
";
        let filter = |headers: &csv::StringRecord, record: &csv::StringRecord| {
            let idx = headers.iter().position(|h| h == "kind").unwrap();
            record.get(idx) != Some("scaffold")
        };
        let options = IngestOptions { min_seq_len: 3, row_filter: Some(&filter) };
        let (corpus, report) = ingest_str(data, &CsvSchema::canonical(), &options);
        assert_eq!(report.rejections.filtered, 1);
        assert_eq!(corpus.counts.records, 3);
    }

    #[test]
    fn same_skill_positions() {
        let mk = |q: &str, skills: &[&str], pos: u32| Interaction {
            question_id: q.into(),
            skill_ids: skills.iter().map(|s| s.to_string()).collect(),
            response: 1,
            order_index: pos,
        };
        let seq = StudentSequence {
            student_id: "a".into(),
            interactions: vec![
                mk("q1", &["A"], 0),
                mk("q2", &["B"], 1),
                mk("q3", &["A"], 2),
                mk("q4", &["A"], 3),
            ],
        };
        let positions: Vec<usize> =
            same_skill_subsequence(&seq, "A").iter().map(|(p, _)| *p).collect();
        assert_eq!(positions, [0, 2, 3]);
        assert!(same_skill_subsequence(&seq, "Z").is_empty());
    }

    #[test]
    fn multi_skill_question_in_both_subsequences() {
        let seq = StudentSequence {
            student_id: "a".into(),
            interactions: vec![Interaction {
                question_id: "q1".into(),
                skill_ids: ["A", "B"].iter().map(|s| s.to_string()).collect(),
                response: 0,
                order_index: 0,
            }],
        };
        assert_eq!(same_skill_subsequence(&seq, "A").len(), 1);
        assert_eq!(same_skill_subsequence(&seq, "B").len(), 1);
    }

    #[test]
    fn canonical_roundtrip_exact() {
        let data = "\
student_id,question_id,skill_ids,response,order_index
a,q1,s1;s2,1,0
a,q2,s1,0,1
a,q3,s3,1,2
b,q1,s1;s2,0,0
b,q4,s2,1,1
b,q2,s1,1,2
";
        let (corpus, _) = ingest_str(data, &CsvSchema::canonical(), &IngestOptions::default());
        let mut buf = Vec::new();
        corpus.write_canonical_csv(&mut buf).unwrap();
        let (reread, _) = ingest_reader(
            buf.as_slice(),
            &CsvSchema::canonical(),
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(corpus, reread);
    }
}

//! Survey answer encoding and per-answer activation summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{mean_se, MeanSe};
use super::users::UserStats;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SurveyError {
    #[error("question {question}: unknown answer label `{label}`")]
    UnknownLabel { question: String, label: String },
    #[error("survey file: {0}")]
    Read(String),
}

pub const LIKERT5: [(&str, i8); 5] = [
    ("Strongly Disagree", -2),
    ("Disagree", -1),
    ("Neither agree nor disagree", 0),
    ("Agree", 1),
    ("Strongly Agree", 2),
];

pub const CHANGE3: [(&str, i8); 3] = [("Decreased", -1), ("No Change", 0), ("Increased", 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    Likert5,
    /// Decreased / No Change / Increased.
    Change3,
}

/// Q11 asks about change in desire to interact with others; every other
/// question is a five-point agreement item.
pub fn question_kind(question_id: &str) -> QuestionKind {
    if question_id.eq_ignore_ascii_case("Q11") {
        QuestionKind::Change3
    } else {
        QuestionKind::Likert5
    }
}

fn labels(kind: QuestionKind) -> &'static [(&'static str, i8)] {
    match kind {
        QuestionKind::Likert5 => &LIKERT5,
        QuestionKind::Change3 => &CHANGE3,
    }
}

/// Canonical label and integer code for an answer. Labels match
/// case-insensitively.
pub fn encode_answer(question_id: &str, label: &str) -> Result<(&'static str, i8), SurveyError> {
    labels(question_kind(question_id))
        .iter()
        .find(|(l, _)| l.eq_ignore_ascii_case(label.trim()))
        .copied()
        .ok_or_else(|| SurveyError::UnknownLabel {
            question: question_id.to_string(),
            label: label.to_string(),
        })
}

pub fn encode_survey(question_id: &str, label: &str) -> Result<i8, SurveyError> {
    encode_answer(question_id, label).map(|(_, v)| v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub user_id: String,
    pub question_id: String,
    pub answer: String,
    pub encoded: i8,
}

impl SurveyResponse {
    pub fn new(user_id: &str, question_id: &str, answer: &str) -> Result<Self, SurveyError> {
        let (label, encoded) = encode_answer(question_id, answer)?;
        Ok(SurveyResponse {
            user_id: user_id.into(),
            question_id: question_id.into(),
            answer: label.into(),
            encoded,
        })
    }
}

#[derive(Deserialize)]
struct SurveyRow {
    user_id: String,
    question_id: String,
    answer: String,
}

/// Reads `user_id,question_id,answer` rows.
pub fn read_survey(path: &Path) -> Result<Vec<SurveyResponse>, SurveyError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| SurveyError::Read(e.to_string()))?;
    rdr.deserialize::<SurveyRow>()
        .map(|row| {
            let row = row.map_err(|e| SurveyError::Read(e.to_string()))?;
            SurveyResponse::new(&row.user_id, &row.question_id, &row.answer)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyBucket {
    pub answer: String,
    pub encoded: i8,
    pub activation: BTreeMap<String, MeanSe>,
}

/// Splits users by their answer to one question and averages their
/// activation fractions per bucket. Users without an answer are left out;
/// answers nobody gave produce no bucket. Buckets come out ordered by code.
pub fn survey_bucket_summary(
    stats: &BTreeMap<String, UserStats>,
    responses: &[SurveyResponse],
    question_id: &str,
) -> Vec<SurveyBucket> {
    let mut buckets: BTreeMap<i8, (String, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for r in responses.iter().filter(|r| r.question_id == question_id) {
        let Some(s) = stats.get(&r.user_id) else {
            continue;
        };
        let (_, per) = buckets
            .entry(r.encoded)
            .or_insert_with(|| (r.answer.clone(), BTreeMap::new()));
        for (c, f) in &s.fractions {
            per.entry(c.clone()).or_default().push(*f);
        }
    }
    buckets
        .into_iter()
        .map(|(encoded, (answer, per))| SurveyBucket {
            answer,
            encoded,
            activation: per
                .into_iter()
                .filter_map(|(c, xs)| mean_se(&xs).map(|m| (c, m)))
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn likert_codes() {
        assert_eq!(encode_survey("Q9", "Strongly Agree"), Ok(2));
        assert_eq!(encode_survey("Q9", "strongly disagree"), Ok(-2));
        assert_eq!(encode_survey("Q1", "Neither agree nor disagree"), Ok(0));
        assert_eq!(encode_survey("Q11", "Increased"), Ok(1));
        assert_eq!(encode_survey("Q11", "No Change"), Ok(0));
        assert!(encode_survey("Q11", "Agree").is_err());
        assert!(encode_survey("Q2", "Meh").is_err());
        let codes: Vec<i8> = LIKERT5.iter().map(|(l, _)| encode_survey("Q1", l).unwrap()).collect();
        assert_eq!(codes, [-2, -1, 0, 1, 2]);
    }

    fn user(id: &str, f: f64) -> (String, UserStats) {
        (
            id.to_string(),
            UserStats {
                user_id: id.into(),
                cohort: Default::default(),
                fractions: [("c".to_string(), f)].into(),
                adjusted: Default::default(),
                conversation_count: 1,
                active_day_count: 1,
                total_duration_s: 0.0,
            },
        )
    }

    #[test]
    fn bucket_means() {
        let stats: BTreeMap<_, _> = [user("a", 0.4), user("b", 0.6), user("c", 0.1), user("d", 0.9)].into();
        let rs = vec![
            SurveyResponse::new("a", "Q9", "Agree").unwrap(),
            SurveyResponse::new("b", "Q9", "agree").unwrap(),
            SurveyResponse::new("c", "Q9", "Disagree").unwrap(),
            SurveyResponse::new("zz", "Q9", "Strongly Agree").unwrap(),
            SurveyResponse::new("d", "Q1", "Agree").unwrap(),
        ];
        let b = survey_bucket_summary(&stats, &rs, "Q9");
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].answer.as_str(), b[0].activation["c"].mean), ("Disagree", 0.1));
        assert_eq!(b[1].answer, "Agree");
        assert!((b[1].activation["c"].mean - 0.5).abs() < 1e-12);
    }
}

//! Per-user activation fractions, cohort summaries, and sorted curves.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::stats::{mean_se, MeanSe};
use crate::cascade::ConversationResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Power,
    Control,
    #[default]
    None,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Power => "power",
            Cohort::Control => "control",
            Cohort::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Cohort> {
        match s.trim().to_ascii_lowercase().as_str() {
            "power" => Some(Cohort::Power),
            "control" => Some(Cohort::Control),
            "none" | "" => Some(Cohort::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserStats {
    pub user_id: String,
    pub cohort: Cohort,
    /// Activated conversations / all conversations, per classifier.
    pub fractions: BTreeMap<String, f64>,
    /// Mean adjusted score over the user's conversations, per classifier.
    pub adjusted: BTreeMap<String, f64>,
    pub conversation_count: usize,
    pub active_day_count: usize,
    pub total_duration_s: f64,
}

/// Groups results by user. Skipped classifiers count as not activated.
pub fn user_activation_fractions<'a, I>(
    results: I,
    cohorts: &BTreeMap<String, Cohort>,
) -> BTreeMap<String, UserStats>
where
    I: IntoIterator<Item = &'a ConversationResult>,
{
    #[derive(Default)]
    struct Acc {
        n: usize,
        active: BTreeMap<String, usize>,
        adjusted: BTreeMap<String, f64>,
        days: BTreeSet<String>,
        duration: f64,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    for r in results {
        let a = acc.entry(r.user_id.clone()).or_default();
        a.n += 1;
        a.days.insert(r.day_key.clone());
        a.duration += r.duration_s;
        for (id, rec) in &r.classifiers {
            *a.active.entry(id.clone()).or_default() += usize::from(rec.activated);
            *a.adjusted.entry(id.clone()).or_default() += rec.adjusted_score;
        }
    }
    acc.into_iter()
        .map(|(user, a)| {
            let n = a.n as f64;
            let stats = UserStats {
                cohort: cohorts.get(&user).copied().unwrap_or_default(),
                fractions: a.active.into_iter().map(|(k, v)| (k, v as f64 / n)).collect(),
                adjusted: a.adjusted.into_iter().map(|(k, v)| (k, v / n)).collect(),
                conversation_count: a.n,
                active_day_count: a.days.len(),
                total_duration_s: a.duration,
                user_id: user.clone(),
            };
            (user, stats)
        })
        .collect()
}

/// Mean and standard error of user fractions per (cohort, classifier).
/// Cohorts with no users do not appear.
pub fn cohort_summary<'a, I>(stats: I) -> BTreeMap<(Cohort, String), MeanSe>
where
    I: IntoIterator<Item = &'a UserStats>,
{
    let mut groups: BTreeMap<(Cohort, String), Vec<f64>> = BTreeMap::new();
    for s in stats {
        for (id, f) in &s.fractions {
            groups.entry((s.cohort, id.clone())).or_default().push(*f);
        }
    }
    groups
        .into_iter()
        .filter_map(|(k, xs)| mean_se(&xs).map(|m| (k, m)))
        .collect()
}

/// Users' fractions for one classifier in ascending order, ranked from 1.
/// Ties keep user-id order.
pub fn sorted_activation_curve<'a, I>(stats: I, classifier_id: &str) -> Vec<(usize, f64)>
where
    I: IntoIterator<Item = &'a UserStats>,
{
    let mut fr: Vec<f64> = stats
        .into_iter()
        .map(|s| s.fractions.get(classifier_id).copied().unwrap_or(0.0))
        .collect();
    fr.sort_by(f64::total_cmp);
    fr.into_iter().enumerate().map(|(i, f)| (i + 1, f)).collect()
}

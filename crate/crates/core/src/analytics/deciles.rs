//! Rank-based usage quantiles.

use std::collections::BTreeMap;

use serde::Serialize;

use super::stats::{mean_se, MeanSe};
use super::users::UserStats;

pub const DEFAULT_DECILES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileSummary {
    /// 1-based, lowest usage first.
    pub index: usize,
    pub members: Vec<String>,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub total_duration_s: f64,
    /// Share of all users' duration held by this group.
    pub duration_share: f64,
    pub activation: BTreeMap<String, MeanSe>,
    /// Mean post-minus-pre change per outcome scale.
    pub outcome_change: BTreeMap<String, MeanSe>,
}

/// Number of groups actually used for `users` users when `requested` are
/// asked for: the request when there are enough users, else the largest of
/// 5, 4, 2, 1 that fits.
pub fn effective_groups(users: usize, requested: usize) -> usize {
    if users >= requested {
        return requested.max(1);
    }
    [5, 4, 2, 1]
        .into_iter()
        .find(|&g| g <= users && g < requested)
        .unwrap_or(1)
}

/// Partitions users into equal-size groups (sizes differ by at most one)
/// ordered by total duration, ties broken by user id. Returns the group
/// index (1-based) per user in rank order.
pub fn assign_groups(stats: &[&UserStats], groups: usize) -> Vec<(String, usize)> {
    let mut ranked: Vec<&&UserStats> = stats.iter().collect();
    ranked.sort_by(|a, b| {
        a.total_duration_s
            .total_cmp(&b.total_duration_s)
            .then_with(|| a.user_id.cmp(&b.user_id))
    });
    let n = ranked.len();
    ranked
        .into_iter()
        .enumerate()
        .map(|(rank, s)| (s.user_id.clone(), rank * groups / n + 1))
        .collect()
}

/// Builds per-group summaries. `changes` maps scale -> user -> delta.
pub fn assign_deciles(
    stats: &[&UserStats],
    requested: usize,
    changes: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Vec<DecileSummary> {
    if stats.is_empty() {
        return Vec::new();
    }
    let groups = effective_groups(stats.len(), requested);
    if groups != requested {
        log::warn!(
            "{} users cannot fill {requested} usage groups; using {groups}",
            stats.len()
        );
    }
    let by_id: BTreeMap<&str, &UserStats> = stats.iter().map(|s| (s.user_id.as_str(), *s)).collect();
    let grand_total: f64 = stats.iter().map(|s| s.total_duration_s).sum();
    let mut members: Vec<Vec<String>> = vec![Vec::new(); groups];
    for (user, g) in assign_groups(stats, groups) {
        members[g - 1].push(user);
    }
    members
        .into_iter()
        .enumerate()
        .map(|(i, ids)| {
            let us: Vec<&UserStats> = ids.iter().map(|id| by_id[id.as_str()]).collect();
            let durations: Vec<f64> = us.iter().map(|s| s.total_duration_s).collect();
            let total: f64 = durations.iter().sum();
            let mut per_classifier: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for s in &us {
                for (c, f) in &s.fractions {
                    per_classifier.entry(c.clone()).or_default().push(*f);
                }
            }
            let outcome_change = changes
                .iter()
                .filter_map(|(scale, deltas)| {
                    let xs: Vec<f64> = ids.iter().filter_map(|id| deltas.get(id).copied()).collect();
                    mean_se(&xs).map(|m| (scale.clone(), m))
                })
                .collect();
            DecileSummary {
                index: i + 1,
                min_duration_s: durations.iter().cloned().fold(f64::INFINITY, f64::min),
                max_duration_s: durations.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                total_duration_s: total,
                duration_share: if grand_total > 0.0 { total / grand_total } else { 0.0 },
                activation: per_classifier
                    .into_iter()
                    .filter_map(|(c, xs)| mean_se(&xs).map(|m| (c, m)))
                    .collect(),
                outcome_change,
                members: ids,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user(id: usize, duration: f64) -> UserStats {
        UserStats {
            user_id: format!("u{id:03}"),
            cohort: Default::default(),
            fractions: [("c".to_string(), id as f64 / 100.0)].into(),
            adjusted: Default::default(),
            conversation_count: 1,
            active_day_count: 1,
            total_duration_s: duration,
        }
    }

    fn sizes(n: usize) -> Vec<usize> {
        let us: Vec<_> = (0..n).map(|i| user(i, (i * 37 % 11) as f64)).collect();
        let refs: Vec<&UserStats> = us.iter().collect();
        assign_deciles(&refs, 10, &Default::default())
            .iter()
            .map(|d| d.members.len())
            .collect()
    }

    #[test]
    fn twenty_and_twenty_one_users() {
        assert_eq!(sizes(20), vec![2; 10]);
        let s = sizes(21);
        assert_eq!(s.iter().filter(|&&x| x == 3).count(), 1);
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn fewer_than_ten_users_fall_back() {
        assert_eq!(sizes(7).len(), 5);
        assert_eq!(sizes(4).len(), 4);
        assert_eq!(sizes(3).len(), 2);
        assert_eq!(sizes(1).len(), 1);
        assert!(sizes(0).is_empty());
    }

    #[test]
    fn ties_break_by_user_id() {
        let us: Vec<_> = (0..10).map(|i| user(9 - i, 5.0)).collect();
        let refs: Vec<&UserStats> = us.iter().collect();
        let d = assign_deciles(&refs, 10, &Default::default());
        assert_eq!(d[0].members, ["u000"]);
        assert_eq!(d[9].members, ["u009"]);
    }

    proptest! {
        #[test]
        fn groups_partition_users(durations in prop::collection::vec(0.0f64..1e4, 10..200)) {
            let us: Vec<_> = durations.iter().enumerate().map(|(i, d)| user(i, *d)).collect();
            let refs: Vec<&UserStats> = us.iter().collect();
            let d = assign_deciles(&refs, 10, &Default::default());
            let sizes: Vec<usize> = d.iter().map(|g| g.members.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<&String> = d.iter().flat_map(|g| &g.members).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), us.len());
            for w in d.windows(2) {
                prop_assert!(w[0].max_duration_s <= w[1].min_duration_s);
            }
        }
    }
}

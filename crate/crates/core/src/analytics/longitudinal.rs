//! Per-day activation series and their linear trends.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::Serialize;

use super::stats::ols;
use crate::cascade::ConversationResult;

pub const DEFAULT_MIN_DAYS: usize = 14;

/// One calendar day of a user's activity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayPoint {
    pub day: NaiveDate,
    /// Calendar days since the user's first active day.
    pub day_index: i64,
    pub conversations: usize,
    pub fractions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeRecord {
    pub user_id: String,
    pub classifier_id: String,
    /// Change in daily activation fraction per day.
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: Option<f64>,
    pub day_count: usize,
}

/// Activation fraction per active day. Days without conversations are
/// omitted, not zero-filled. Results with an unparseable `day_key` are
/// ignored.
pub fn daily_series<'a, I>(results: I) -> Vec<DayPoint>
where
    I: IntoIterator<Item = &'a ConversationResult>,
{
    let mut by_day: BTreeMap<NaiveDate, (usize, BTreeMap<String, usize>)> = BTreeMap::new();
    for r in results {
        let Ok(day) = r.day_key.parse::<NaiveDate>() else {
            continue;
        };
        let (n, active) = by_day.entry(day).or_default();
        *n += 1;
        for (id, rec) in &r.classifiers {
            *active.entry(id.clone()).or_default() += usize::from(rec.activated);
        }
    }
    let first = by_day.keys().next().copied();
    by_day
        .into_iter()
        .map(|(day, (n, active))| DayPoint {
            day,
            day_index: (day - first.expect("nonempty")).num_days(),
            conversations: n,
            fractions: active
                .into_iter()
                .map(|(k, v)| (k, v as f64 / n as f64))
                .collect(),
        })
        .collect()
}

/// OLS slope of daily fraction on day index, or `None` when fewer than
/// `min_days` days are present.
pub fn longitudinal_slope(
    series: &[(f64, f64)],
    min_days: usize,
) -> Option<(f64, f64, Option<f64>)> {
    if series.len() < min_days.max(2) {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = series.iter().copied().unzip();
    ols(&x, &y).map(|f| (f.slope, f.intercept, f.slope_se))
}

/// Slope records for every user with at least `min_days` active days and
/// every classifier seen in their results.
pub fn user_slopes(results: &[ConversationResult], min_days: usize) -> Vec<SlopeRecord> {
    let mut by_user: BTreeMap<&str, Vec<&ConversationResult>> = BTreeMap::new();
    for r in results {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (user, rs) in by_user {
        let series = daily_series(rs.iter().copied());
        if series.len() < min_days {
            continue;
        }
        let classifiers: std::collections::BTreeSet<&String> =
            series.iter().flat_map(|d| d.fractions.keys()).collect();
        for id in classifiers {
            let pts: Vec<(f64, f64)> = series
                .iter()
                .map(|d| (d.day_index as f64, d.fractions.get(id).copied().unwrap_or(0.0)))
                .collect();
            if let Some((slope, intercept, slope_se)) = longitudinal_slope(&pts, min_days) {
                out.push(SlopeRecord {
                    user_id: user.to_string(),
                    classifier_id: id.clone(),
                    slope,
                    intercept,
                    slope_se,
                    day_count: pts.len(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::users::tests::result;

    #[test]
    fn constant_series_has_zero_slope() {
        let pts: Vec<_> = (0..20).map(|d| (d as f64, 0.3)).collect();
        let (slope, intercept, _) = longitudinal_slope(&pts, 14).unwrap();
        assert!(slope.abs() < 1e-12);
        assert!((intercept - 0.3).abs() < 1e-12);
    }

    #[test]
    fn three_point_slope() {
        let pts = [(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)];
        let (slope, _, _) = longitudinal_slope(&pts, 3).unwrap();
        assert!((slope - 0.5).abs() < 1e-9);
    }

    #[test]
    fn thirteen_days_is_too_few() {
        let pts: Vec<_> = (0..13).map(|d| (d as f64, 0.1 * d as f64)).collect();
        assert!(longitudinal_slope(&pts, 14).is_none());
        let pts: Vec<_> = (0..14).map(|d| (d as f64, 0.1 * d as f64)).collect();
        assert!(longitudinal_slope(&pts, 14).is_some());
    }

    #[test]
    fn day_buckets_match_hand_count() {
        let rs = vec![
            result("a", "u", "2024-03-01", &[("c", true)]),
            result("b", "u", "2024-03-01", &[("c", false)]),
            result("c", "u", "2024-03-01", &[("c", false)]),
            result("d", "u", "2024-03-04", &[("c", true)]),
            result("e", "u", "2024-03-04", &[("c", true)]),
        ];
        let s = daily_series(&rs);
        assert_eq!(s.len(), 2);
        assert!((s[0].fractions["c"] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[1].day_index, 3);
        assert_eq!(s[1].fractions["c"], 1.0);
    }

    #[test]
    fn user_slopes_respects_min_days() {
        let mut rs = Vec::new();
        for d in 0..14 {
            let day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(d);
            rs.push(result(&format!("a{d}"), "long", &day.to_string(), &[("c", d % 2 == 0)]));
            if d < 13 {
                rs.push(result(&format!("b{d}"), "short", &day.to_string(), &[("c", true)]));
            }
        }
        let slopes = user_slopes(&rs, 14);
        assert_eq!(slopes.len(), 1);
        assert_eq!(slopes[0].user_id, "long");
        assert_eq!(slopes[0].day_count, 14);
    }
}

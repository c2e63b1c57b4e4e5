//! Psychosocial outcome scales: item scoring with reverse keying, and
//! pre/post change scores.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{mean_se, pearson, Correlation, MeanSe};

pub const BUNDLED_SCALES: &str = include_str!("../../data/scales.toml");

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScaleError {
    #[error("cannot read scales: {0}")]
    Read(String),
    #[error("unknown scale `{0}`")]
    UnknownScale(String),
    #[error("scale {scale}: item `{item}` value {value} outside [{min}, {max}]")]
    OutOfRange {
        scale: String,
        item: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid phase `{0}`")]
    Phase(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleItem {
    pub id: String,
    #[serde(default)]
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDefinition {
    pub id: String,
    pub min: f64,
    pub max: f64,
    pub items: Vec<ScaleItem>,
}

#[derive(Debug, Deserialize)]
struct ScaleFile {
    scale: Vec<ScaleDefinition>,
}

pub fn parse_scales(text: &str) -> Result<Vec<ScaleDefinition>, ScaleError> {
    toml::from_str::<ScaleFile>(text)
        .map(|f| f.scale)
        .map_err(|e| ScaleError::Read(e.to_string()))
}

pub fn bundled_scales() -> Vec<ScaleDefinition> {
    parse_scales(BUNDLED_SCALES).expect("bundled scales are valid")
}

pub fn load_scales(path: &Path) -> Result<Vec<ScaleDefinition>, ScaleError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScaleError::Read(e.to_string()))?;
    parse_scales(&text)
}

/// Maps a reverse-keyed answer onto the forward direction.
pub fn reflect(x: f64, min: f64, max: f64) -> f64 {
    min + max - x
}

/// Mean of the (sign-adjusted) item answers. `None` if any item is missing;
/// no imputation.
pub fn score_scale(
    def: &ScaleDefinition,
    answers: &BTreeMap<String, f64>,
) -> Result<Option<f64>, ScaleError> {
    let mut sum = 0.0;
    for item in &def.items {
        let Some(&x) = answers.get(&item.id) else {
            return Ok(None);
        };
        if !(def.min..=def.max).contains(&x) {
            return Err(ScaleError::OutOfRange {
                scale: def.id.clone(),
                item: item.id.clone(),
                value: x,
                min: def.min,
                max: def.max,
            });
        }
        sum += if item.reverse { reflect(x, def.min, def.max) } else { x };
    }
    if def.items.is_empty() {
        return Ok(None);
    }
    Ok(Some(sum / def.items.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Post,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Phase, ScaleError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" => Ok(Phase::Pre),
            "post" => Ok(Phase::Post),
            _ => Err(ScaleError::Phase(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleScore {
    pub user_id: String,
    pub scale: String,
    pub phase: Phase,
    pub value: f64,
}

#[derive(Debug, Deserialize)]
struct ItemRow {
    user_id: String,
    scale: String,
    phase: String,
    item_id: String,
    value: f64,
}

/// Item answers grouped as (user, scale, phase) -> item -> value.
pub type ItemAnswers = BTreeMap<(String, String, Phase), BTreeMap<String, f64>>;

/// Reads `user_id,scale,phase,item_id,value` rows.
pub fn read_scale_responses(path: &Path) -> Result<ItemAnswers, ScaleError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ScaleError::Read(e.to_string()))?;
    let mut out: ItemAnswers = BTreeMap::new();
    for row in rdr.deserialize::<ItemRow>() {
        let row = row.map_err(|e| ScaleError::Read(e.to_string()))?;
        let phase = Phase::parse(&row.phase)?;
        out.entry((row.user_id, row.scale, phase))
            .or_default()
            .insert(row.item_id, row.value);
    }
    Ok(out)
}

/// Scores every complete (user, scale, phase) block.
pub fn score_all(defs: &[ScaleDefinition], answers: &ItemAnswers) -> Result<Vec<ScaleScore>, ScaleError> {
    let by_id: BTreeMap<&str, &ScaleDefinition> = defs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::new();
    for ((user, scale, phase), items) in answers {
        let def = by_id
            .get(scale.as_str())
            .ok_or_else(|| ScaleError::UnknownScale(scale.clone()))?;
        if let Some(value) = score_scale(def, items)? {
            out.push(ScaleScore {
                user_id: user.clone(),
                scale: scale.clone(),
                phase: *phase,
                value,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Change {
    pub pre: f64,
    pub post: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ChangeScores {
    /// scale -> user -> change; users missing a phase are left out.
    pub per_user: BTreeMap<String, BTreeMap<String, Change>>,
    /// Correlation of starting value with change, per scale. Absent when
    /// undefined (fewer than three users or no variance).
    pub init_vs_delta: BTreeMap<String, Option<Correlation>>,
}

impl ChangeScores {
    pub fn deltas(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        self.per_user
            .iter()
            .map(|(s, us)| (s.clone(), us.iter().map(|(u, c)| (u.clone(), c.delta)).collect()))
            .collect()
    }

    /// Mean change per (group, scale) for a user -> group assignment.
    pub fn by_group(&self, group_of: &BTreeMap<String, String>) -> BTreeMap<(String, String), MeanSe> {
        let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for (scale, users) in &self.per_user {
            for (user, c) in users {
                if let Some(g) = group_of.get(user) {
                    acc.entry((g.clone(), scale.clone())).or_default().push(c.delta);
                }
            }
        }
        acc.into_iter()
            .filter_map(|(k, xs)| mean_se(&xs).map(|m| (k, m)))
            .collect()
    }
}

pub fn change_scores(scores: &[ScaleScore]) -> ChangeScores {
    let mut phases: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for s in scores {
        let e = phases.entry((s.scale.clone(), s.user_id.clone())).or_default();
        match s.phase {
            Phase::Pre => e.0 = Some(s.value),
            Phase::Post => e.1 = Some(s.value),
        }
    }
    let mut out = ChangeScores::default();
    for ((scale, user), p) in phases {
        if let (Some(pre), Some(post)) = p {
            out.per_user.entry(scale).or_default().insert(
                user,
                Change {
                    pre,
                    post,
                    delta: post - pre,
                },
            );
        }
    }
    for (scale, users) in &out.per_user {
        let (pre, delta): (Vec<f64>, Vec<f64>) = users.values().map(|c| (c.pre, c.delta)).unzip();
        out.init_vs_delta.insert(scale.clone(), pearson(&pre, &delta));
    }
    out
}

/// Summary of all groups' change, for tables that also want the pooled
/// mean.
pub fn pooled_change(changes: &ChangeScores, scale: &str) -> Option<MeanSe> {
    let xs: Vec<f64> = changes.per_user.get(scale)?.values().map(|c| c.delta).collect();
    mean_se(&xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn def(reverse: &[usize], n: usize, min: f64, max: f64) -> ScaleDefinition {
        ScaleDefinition {
            id: "s".into(),
            min,
            max,
            items: (0..n)
                .map(|i| ScaleItem {
                    id: format!("i{i}"),
                    reverse: reverse.contains(&i),
                })
                .collect(),
        }
    }

    fn answers(vals: &[f64]) -> BTreeMap<String, f64> {
        vals.iter().enumerate().map(|(i, v)| (format!("i{i}"), *v)).collect()
    }

    #[test]
    fn constant_answers_without_reverse_items() {
        let d = def(&[], 8, 1.0, 4.0);
        assert_eq!(score_scale(&d, &answers(&[4.0; 8])), Ok(Some(4.0)));
    }

    #[test]
    fn reverse_item_at_minimum_contributes_maximum() {
        let d = def(&[0], 1, 1.0, 4.0);
        assert_eq!(score_scale(&d, &answers(&[1.0])), Ok(Some(4.0)));
    }

    #[test]
    fn mixed_fixture() {
        // items 2, 3, 1(rev -> 4), 4 on 1..4: (2+3+4+4)/4 = 3.25
        let d = def(&[2], 4, 1.0, 4.0);
        assert_eq!(score_scale(&d, &answers(&[2.0, 3.0, 1.0, 4.0])), Ok(Some(3.25)));
    }

    #[test]
    fn missing_item_is_absent_and_out_of_range_is_error() {
        let d = def(&[], 3, 0.0, 5.0);
        assert_eq!(score_scale(&d, &answers(&[1.0, 2.0])), Ok(None));
        assert!(matches!(
            score_scale(&d, &answers(&[1.0, 2.0, 6.0])),
            Err(ScaleError::OutOfRange { .. })
        ));
    }

    #[test]
    fn bundled_ranges() {
        let s = bundled_scales();
        let r: Vec<_> = s.iter().map(|d| (d.id.as_str(), d.min, d.max)).collect();
        assert_eq!(
            r,
            [
                ("loneliness_ULS8", 1.0, 4.0),
                ("socialization_LSNS6", 0.0, 5.0),
                ("emotional_dependence_ADS9", 1.0, 5.0),
                ("problematic_use_PCUS", 1.0, 5.0),
            ]
        );
    }

    fn score(user: &str, phase: Phase, v: f64) -> ScaleScore {
        ScaleScore {
            user_id: user.into(),
            scale: "s".into(),
            phase,
            value: v,
        }
    }

    #[test]
    fn deltas_and_missing_phase() {
        let c = change_scores(&[
            score("a", Phase::Pre, 2.0),
            score("a", Phase::Post, 3.0),
            score("b", Phase::Pre, 2.0),
        ]);
        assert_eq!(c.per_user["s"]["a"].delta, 1.0);
        assert!(!c.per_user["s"].contains_key("b"));
    }

    #[test]
    fn identical_phases_have_undefined_correlation() {
        let mut ss = Vec::new();
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            ss.push(score(&format!("u{i}"), Phase::Pre, *v));
            ss.push(score(&format!("u{i}"), Phase::Post, *v));
        }
        let c = change_scores(&ss);
        assert!(c.per_user["s"].values().all(|c| c.delta == 0.0));
        assert_eq!(c.init_vs_delta["s"], None);
    }

    proptest! {
        #[test]
        fn reflection_is_an_involution(x in 0.0f64..5.0, lo in -3.0f64..0.0, hi in 5.0f64..9.0) {
            prop_assert!((reflect(reflect(x, lo, hi), lo, hi) - x).abs() < 1e-12);
        }

        #[test]
        fn scores_stay_in_range(
            which in 0usize..4,
            seed in prop::collection::vec(0.0f64..1.0, 15),
        ) {
            let d = &bundled_scales()[which];
            let vals: Vec<f64> = seed.iter().take(d.items.len())
                .map(|u| (d.min + u * (d.max - d.min)).round())
                .collect();
            let ans: BTreeMap<String, f64> = d.items.iter().zip(&vals).map(|(i, v)| (i.id.clone(), *v)).collect();
            let s = score_scale(d, &ans).unwrap().unwrap();
            prop_assert!(s >= d.min && s <= d.max);
        }
    }
}

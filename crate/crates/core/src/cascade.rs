//! Hierarchical classification of a conversation: top-level gating,
//! per-unit sub-classifier runs, any-activation aggregation, and the
//! length-adjusted score.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::duration::estimate_duration;
use crate::corpus::{extract_units, Conversation, Modality, Target, Unit, DEFAULT_CONTEXT_WINDOW};
use crate::judge::{fingerprint, Judge, JudgeError, JudgeRequest, RephrasingVote, VerdictValue};
use crate::taxonomy::{ClassifierSpec, PromptTemplate, Taxonomy, TaxonomyError};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("positive count {m} exceeds observation count {n}")]
    TooManyPositives { n: usize, m: usize },
    #[error("K must be at least 1")]
    ZeroK,
}

/// Probability that a uniformly random `k`-subset of `n` observations, `m`
/// of them positive, contains at least one positive. When `k > n` the score
/// collapses to plain any-activation.
pub fn adjusted_score(n: usize, m: usize, k: usize) -> Result<f64, ScoreError> {
    if m > n {
        return Err(ScoreError::TooManyPositives { n, m });
    }
    if k == 0 {
        return Err(ScoreError::ZeroK);
    }
    if k > n {
        return Ok(if m > 0 { 1.0 } else { 0.0 });
    }
    if m == 0 {
        return Ok(0.0);
    }
    if k > n - m {
        return Ok(1.0);
    }
    // C(n-m, k) / C(n, k) = prod_{i<k} (n-m-i)/(n-i)
    let none = (0..k).fold(1.0f64, |acc, i| acc * (n - m - i) as f64 / (n - i) as f64);
    Ok((1.0 - none).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRecord {
    pub activated: bool,
    /// Units judged.
    pub n: usize,
    /// Units judged `yes`.
    pub m: usize,
    pub adjusted_score: f64,
    pub skipped: bool,
}

impl ClassifierRecord {
    fn skipped() -> Self {
        ClassifierRecord {
            activated: false,
            n: 0,
            m: 0,
            adjusted_score: 0.0,
            skipped: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationResult {
    pub conversation_id: String,
    pub user_id: String,
    pub day_key: String,
    pub modality: Modality,
    pub duration_s: f64,
    pub message_count: usize,
    pub classifiers: BTreeMap<String, ClassifierRecord>,
    /// Units whose judgment failed and were counted as unsure.
    pub unit_errors: usize,
}

impl ConversationResult {
    pub fn activated(&self, classifier_id: &str) -> bool {
        self.classifiers
            .get(classifier_id)
            .is_some_and(|r| r.activated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeOptions {
    /// Subset size for the adjusted score.
    pub k: usize,
    /// Judge every classifier once on the whole conversation.
    pub whole_conversation_mode: bool,
    /// Preceding messages shown as snippet context.
    pub context_window: usize,
    /// When false every sub-classifier runs regardless of its parents.
    pub gating: bool,
}

impl Default for CascadeOptions {
    fn default() -> Self {
        CascadeOptions {
            k: DEFAULT_K,
            whole_conversation_mode: false,
            context_window: DEFAULT_CONTEXT_WINDOW,
            gating: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTally {
    pub conversations: usize,
    pub units: usize,
    pub unit_errors: usize,
}

impl RunTally {
    pub fn failure_rate(&self) -> f64 {
        if self.units == 0 {
            0.0
        } else {
            self.unit_errors as f64 / self.units as f64
        }
    }
}

struct UnitOutcome {
    value: VerdictValue,
    failed: bool,
}

fn judge_unit(
    judge: &Judge,
    template: &PromptTemplate,
    spec: &ClassifierSpec,
    unit: &Unit<'_>,
) -> Result<UnitOutcome, TaxonomyError> {
    let mut renderings = vec![template.render(spec, unit)?];
    if judge.vote == RephrasingVote::Majority {
        for alt in &spec.rephrasings {
            renderings.push(template.render_with_prompt(spec, alt, unit)?);
        }
    }
    let unit_text = unit.text();
    let fp = fingerprint(&crate::taxonomy::render_snippet(unit));
    let verdict: Result<_, JudgeError> = if renderings.len() == 1 {
        judge.classify(&JudgeRequest {
            classifier_id: &spec.id,
            prompt: &renderings[0],
            unit_text: &unit_text,
            fingerprint: &fp,
        })
    } else {
        judge.classify_voted(&renderings, &spec.id, &unit_text, &fp)
    };
    Ok(match verdict {
        Ok(v) => UnitOutcome {
            value: v.value,
            failed: false,
        },
        Err(e) => {
            log::warn!("classifier {} failed on a unit: {e}", spec.id);
            UnitOutcome {
                value: VerdictValue::Unsure,
                failed: true,
            }
        }
    })
}

fn judge_units(
    judge: &Judge,
    template: &PromptTemplate,
    spec: &ClassifierSpec,
    units: &[Unit<'_>],
    k: usize,
    errors: &mut usize,
) -> Result<ClassifierRecord, TaxonomyError> {
    let mut m = 0;
    for unit in units {
        let out = judge_unit(judge, template, spec, unit)?;
        if out.failed {
            *errors += 1;
        }
        if out.value == VerdictValue::Yes {
            m += 1;
        }
    }
    let n = units.len();
    Ok(ClassifierRecord {
        activated: m > 0,
        n,
        m,
        adjusted_score: adjusted_score(n, m, k).expect("m <= n and k >= 1"),
        skipped: false,
    })
}

/// Runs the two-tier cascade on one conversation.
pub fn run_cascade(
    conversation: &Conversation,
    taxonomy: &Taxonomy,
    template: &PromptTemplate,
    judge: &Judge,
    options: &CascadeOptions,
) -> Result<ConversationResult, TaxonomyError> {
    assert!(options.k >= 1, "K must be at least 1");
    let mut records = BTreeMap::new();
    let mut errors = 0;
    let mut units_total = 0;
    let whole = extract_units(conversation, Target::WholeConversation, 0);

    let mut fired = BTreeMap::new();
    for spec in taxonomy.top_level() {
        let rec = judge_units(judge, template, spec, &whole, options.k, &mut errors)?;
        units_total += rec.n;
        fired.insert(spec.id.as_str(), rec.activated);
        records.insert(spec.id.clone(), rec);
    }
    for spec in taxonomy.subs() {
        let open = !options.gating || spec.parents.iter().any(|p| fired.get(p.as_str()) == Some(&true));
        if !open {
            records.insert(spec.id.clone(), ClassifierRecord::skipped());
            continue;
        }
        let rec = if options.whole_conversation_mode {
            let unit = Unit {
                target: spec.target,
                ..whole[0].clone()
            };
            judge_units(judge, template, spec, &[unit], options.k, &mut errors)?
        } else {
            let units = extract_units(conversation, spec.target, options.context_window);
            judge_units(judge, template, spec, &units, options.k, &mut errors)?
        };
        units_total += rec.n;
        records.insert(spec.id.clone(), rec);
    }
    log::trace!("{}: {units_total} units judged", conversation.id);
    Ok(ConversationResult {
        conversation_id: conversation.id.clone(),
        user_id: conversation.user_id.clone(),
        day_key: conversation
            .day_key()
            .map(|d| d.to_string())
            .unwrap_or_default(),
        modality: conversation.modality,
        duration_s: estimate_duration(&conversation.timestamps()),
        message_count: conversation.messages.len(),
        classifiers: records,
        unit_errors: errors,
    })
}

/// Classifies many conversations on a pool of `max_concurrency` workers.
/// Output order follows input order.
pub fn classify_all(
    conversations: &[Conversation],
    taxonomy: &Taxonomy,
    template: &PromptTemplate,
    judge: &Judge,
    options: &CascadeOptions,
    max_concurrency: usize,
) -> Result<(Vec<ConversationResult>, RunTally), TaxonomyError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrency.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<ConversationResult> = pool.install(|| {
        conversations
            .par_iter()
            .map(|c| run_cascade(c, taxonomy, template, judge, options))
            .collect::<Result<_, _>>()
    })?;
    let tally = RunTally {
        conversations: results.len(),
        units: results
            .iter()
            .flat_map(|r| r.classifiers.values())
            .map(|c| c.n)
            .sum(),
        unit_errors: results.iter().map(|r| r.unit_errors).sum(),
    };
    Ok((results, tally))
}

pub fn write_results<W: Write>(mut w: W, results: &[ConversationResult]) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results<R: BufRead>(r: R) -> Result<Vec<ConversationResult>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Message, Role};
    use crate::judge::{Predicate, Rule, ScriptedBackend};

    /// Counts k-subsets of n items (first m positive) that contain a positive.
    fn enumerate(n: usize, m: usize, k: usize) -> (u64, u64) {
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize == k {
                total += 1;
                if mask & ((1u32 << m) - 1) != 0 {
                    hit += 1;
                }
            }
        }
        (hit, total)
    }

    #[test]
    fn documented_values() {
        assert_eq!(adjusted_score(3, 1, 5).unwrap(), 1.0);
        assert_eq!(adjusted_score(3, 0, 5).unwrap(), 0.0);
        assert_eq!(adjusted_score(10, 0, 5).unwrap(), 0.0);
        assert!((adjusted_score(10, 1, 5).unwrap() - 0.5).abs() < 1e-12);
        assert!((adjusted_score(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(enumerate(10, 1, 5), (126, 252));
        assert_eq!(enumerate(4, 2, 2), (5, 6));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(adjusted_score(2, 3, 1), Err(ScoreError::TooManyPositives { n: 2, m: 3 }));
        assert_eq!(adjusted_score(2, 1, 0), Err(ScoreError::ZeroK));
    }

    #[test]
    fn matches_enumeration_small_grid() {
        for n in 1..=10 {
            for m in 0..=n {
                for k in 1..=n {
                    let (hit, total) = enumerate(n, m, k);
                    let got = adjusted_score(n, m, k).unwrap();
                    assert!((got - hit as f64 / total as f64).abs() < 1e-12, "{n} {m} {k}");
                }
            }
        }
    }

    fn fixture() -> Conversation {
        Conversation::new(
            "c",
            "u",
            Modality::Text,
            vec![
                Message::new(Role::User, "I feel so alone lately", 0.0),
                Message::new(Role::Assistant, "I'm here for you, sweetie", 10.0),
                Message::new(Role::User, "thanks", 20.0),
                Message::new(Role::Assistant, "anytime", 30.0),
            ],
        )
    }

    #[test]
    fn all_top_level_no_skips_every_sub() {
        let t = Taxonomy::bundled_v1();
        let judge = Judge::scripted(ScriptedBackend::default());
        let r = run_cascade(&fixture(), &t, &PromptTemplate::default(), &judge, &Default::default())
            .unwrap();
        assert_eq!(judge.backend_calls(), 5);
        assert_eq!(r.classifiers.values().filter(|c| c.skipped).count(), 20);
        assert!(r.classifiers.values().all(|c| !c.activated));
    }

    #[test]
    fn gated_child_activates_on_one_unit() {
        let t = Taxonomy::bundled_v1();
        let judge = Judge::scripted(ScriptedBackend::new(vec![
            Rule::new("loneliness", Predicate::Contains("alone".into()), "yes"),
            Rule::new("alleviating_loneliness", Predicate::Contains("alone".into()), "yes"),
        ]));
        let r = run_cascade(&fixture(), &t, &PromptTemplate::default(), &judge, &Default::default())
            .unwrap();
        let rec = &r.classifiers["alleviating_loneliness"];
        assert!(rec.activated);
        assert_eq!((rec.n, rec.m), (2, 1));
        assert!(!r.classifiers["fear_of_addiction"].activated);
        assert!(r.classifiers["fear_of_addiction"].skipped);
        // 5 top-level + one call per unit of every child of loneliness
        let expected: usize = 5 + t
            .subs()
            .filter(|s| s.parents.contains("loneliness"))
            .map(|s| extract_units(&fixture(), s.target, 4).len())
            .sum::<usize>();
        assert_eq!(judge.backend_calls() as usize, expected);
        assert_eq!(r.duration_s, 10.0 + 10.0 + 10.0 + 15.0);
    }

    #[test]
    fn unsure_counts_toward_n_only() {
        let t = Taxonomy::bundled_v1();
        let judge = Judge::scripted(ScriptedBackend::new(vec![
            Rule::new("loneliness", Predicate::Always, "yes"),
            Rule::new("pet_name", Predicate::Always, "unsure"),
        ]));
        let r = run_cascade(&fixture(), &t, &PromptTemplate::default(), &judge, &Default::default())
            .unwrap();
        let rec = &r.classifiers["pet_name"];
        assert_eq!((rec.n, rec.m, rec.activated), (2, 0, false));
    }

    #[test]
    fn whole_conversation_mode_sets_n_to_one() {
        let t = Taxonomy::bundled_v1();
        let judge = Judge::scripted(ScriptedBackend::new(vec![
            Rule::new("loneliness", Predicate::Always, "yes"),
            Rule::new("pet_name", Predicate::Contains("sweetie".into()), "yes"),
        ]));
        let opts = CascadeOptions {
            whole_conversation_mode: true,
            ..Default::default()
        };
        let r = run_cascade(&fixture(), &t, &PromptTemplate::default(), &judge, &opts).unwrap();
        let rec = &r.classifiers["pet_name"];
        assert_eq!((rec.n, rec.m, rec.activated), (1, 1, true));
        assert_eq!(rec.adjusted_score, 1.0);
    }

    #[test]
    fn results_round_trip() {
        let t = Taxonomy::bundled_v1();
        let judge = Judge::scripted(ScriptedBackend::default());
        let r = run_cascade(&fixture(), &t, &PromptTemplate::default(), &judge, &Default::default())
            .unwrap();
        let mut buf = Vec::new();
        write_results(&mut buf, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_results(buf.as_slice()).unwrap(), vec![r]);
    }
}

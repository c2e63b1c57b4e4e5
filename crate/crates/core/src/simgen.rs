//! Seeded synthetic corpora with planted ground truth.
//!
//! Every planted activation is carried by an invisible marker (a run of
//! zero-width characters) appended to a message of the right role, and the
//! emitted scripted-judge rules fire exactly on those markers. Running the
//! cascade with those rules therefore recovers the planted activations
//! exactly; statistical properties (rates, drifts, usage tails, survey
//! links) follow the laws in [`SimSpec`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::analytics::duration::estimate_duration;
use crate::analytics::scales::{bundled_scales, reflect, ScaleDefinition};
use crate::analytics::survey::{CHANGE3, LIKERT5};
use crate::corpus::{write_corpus, Conversation, Message, Modality, Role, Target};
use crate::judge::RuleFile;
use crate::taxonomy::{Taxonomy, Tier};
use crate::topics::{TopicCatalog, CATEGORY_STAGE, SUMMARY_STAGE};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid spec: {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("cannot parse spec: {0}")]
    Parse(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, message: impl Into<String>) -> SimError {
    SimError::Invalid {
        field,
        message: message.into(),
    }
}

/// How many conversations each user has and on which days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Heavy-tailed per-user counts (discrete Pareto with exponent `alpha`
    /// and minimum `min`), spread uniformly over `days`. With `total` set,
    /// counts are apportioned to hit that total exactly.
    Pareto {
        alpha: f64,
        min: usize,
        #[serde(default)]
        total: Option<usize>,
    },
    /// Exactly `per_day` conversations on each of `days` days.
    Daily { per_day: usize },
}

/// Per-user, per-classifier base activation rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateLaw {
    Fixed { value: f64 },
    /// With probability `tail_prob` a rate uniform in `[tail_min, tail_max]`,
    /// otherwise uniform in `[0, low_max]`.
    Mixture {
        tail_prob: f64,
        low_max: f64,
        tail_min: f64,
        tail_max: f64,
    },
}

/// Per-user, per-classifier daily drift of the activation rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftLaw {
    Fixed { value: f64 },
    /// Zero with probability `zero_prob`, otherwise uniform in
    /// `[-max_abs, max_abs]`.
    Mixture { zero_prob: f64, max_abs: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    /// Zero-based user index.
    pub user: usize,
    pub classifier: String,
    pub rate: f64,
    #[serde(default)]
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub seed: u64,
    pub user_count: usize,
    /// Unix seconds of day 0.
    pub start_timestamp: i64,
    pub days: u32,
    pub schedule: Schedule,
    pub base_rate: RateLaw,
    pub drift: DriftLaw,
    /// Rate at which a top-level classifier fires with no planted child.
    pub top_level_rate: f64,
    /// Sub-classifiers that get planted rates; empty means all.
    pub planted: Vec<String>,
    /// Draw one base rate and drift per user, shared by all planted
    /// sub-classifiers.
    pub shared_base_rate: bool,
    pub overrides: Vec<Override>,
    pub min_exchanges: usize,
    pub max_exchanges: usize,
    /// Probability that a reply gap exceeds one minute.
    pub long_gap_prob: f64,
    pub long_gap_max_s: u32,
    pub power_fraction: f64,
    pub survey_noise: f64,
    pub scale_item_noise: f64,
    pub topics: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            seed: 0,
            user_count: 100,
            start_timestamp: 1_727_740_800, // 2024-10-01T00:00:00Z
            days: 28,
            schedule: Schedule::Pareto {
                alpha: 1.5,
                min: 1,
                total: None,
            },
            base_rate: RateLaw::Mixture {
                tail_prob: 0.15,
                low_max: 0.02,
                tail_min: 0.3,
                tail_max: 0.8,
            },
            drift: DriftLaw::Mixture {
                zero_prob: 0.6,
                max_abs: 0.01,
            },
            top_level_rate: 0.05,
            planted: Vec::new(),
            shared_base_rate: false,
            overrides: Vec::new(),
            min_exchanges: 1,
            max_exchanges: 4,
            long_gap_prob: 0.2,
            long_gap_max_s: 900,
            power_fraction: 0.1,
            survey_noise: 0.6,
            scale_item_noise: 0.7,
            topics: true,
        }
    }
}

fn prob(field: &'static str, p: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(field, format!("{p} is not a probability")))
    }
}

impl SimSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), SimError> {
        if self.user_count == 0 {
            return Err(invalid("user_count", "must be positive"));
        }
        if self.days == 0 {
            return Err(invalid("days", "must be positive"));
        }
        match &self.schedule {
            Schedule::Pareto { alpha, min, total } => {
                if !(*alpha > 1.0) {
                    return Err(invalid("schedule.alpha", "must exceed 1"));
                }
                if *min == 0 {
                    return Err(invalid("schedule.min", "must be positive"));
                }
                if let Some(t) = total {
                    if *t < min * self.user_count {
                        return Err(invalid("schedule.total", "smaller than min * user_count"));
                    }
                }
            }
            Schedule::Daily { per_day } => {
                if *per_day == 0 {
                    return Err(invalid("schedule.per_day", "must be positive"));
                }
            }
        }
        match &self.base_rate {
            RateLaw::Fixed { value } => prob("base_rate.value", *value)?,
            RateLaw::Mixture {
                tail_prob,
                low_max,
                tail_min,
                tail_max,
            } => {
                prob("base_rate.tail_prob", *tail_prob)?;
                prob("base_rate.low_max", *low_max)?;
                prob("base_rate.tail_min", *tail_min)?;
                prob("base_rate.tail_max", *tail_max)?;
                if tail_min > tail_max {
                    return Err(invalid("base_rate.tail_min", "exceeds tail_max"));
                }
            }
        }
        if let DriftLaw::Mixture { zero_prob, max_abs } = &self.drift {
            prob("drift.zero_prob", *zero_prob)?;
            if *max_abs < 0.0 {
                return Err(invalid("drift.max_abs", "must be nonnegative"));
            }
        }
        prob("top_level_rate", self.top_level_rate)?;
        prob("long_gap_prob", self.long_gap_prob)?;
        prob("power_fraction", self.power_fraction)?;
        if self.min_exchanges == 0 || self.min_exchanges > self.max_exchanges {
            return Err(invalid("min_exchanges", "need 1 <= min_exchanges <= max_exchanges"));
        }
        if self.long_gap_max_s <= 61 {
            return Err(invalid("long_gap_max_s", "must exceed 61"));
        }
        if self.survey_noise < 0.0 || self.scale_item_noise < 0.0 {
            return Err(invalid("survey_noise", "noise must be nonnegative"));
        }
        for id in &self.planted {
            match taxonomy.get(id) {
                Some(c) if c.tier == Tier::Sub => {}
                _ => return Err(invalid("planted", format!("`{id}` is not a sub-classifier"))),
            }
        }
        for o in &self.overrides {
            if o.user >= self.user_count {
                return Err(invalid("overrides.user", format!("{} out of range", o.user)));
            }
            if taxonomy.get(&o.classifier).is_none_or(|c| c.tier != Tier::Sub) {
                return Err(invalid("overrides.classifier", format!("`{}` is not a sub-classifier", o.classifier)));
            }
            prob("overrides.rate", o.rate)?;
        }
        Ok(())
    }
}

const WORD_JOINER: char = '\u{2060}';
const ZERO: char = '\u{200B}';
const ONE: char = '\u{200C}';

/// Invisible marker for a tag value: word joiner, 16 zero-width bits, word
/// joiner.
pub fn marker(tag: u16) -> String {
    let mut s = String::with_capacity(18 * 3);
    s.push(WORD_JOINER);
    for bit in (0..16).rev() {
        s.push(if tag >> bit & 1 == 1 { ONE } else { ZERO });
    }
    s.push(WORD_JOINER);
    s
}

pub fn classifier_marker(index: usize) -> String {
    marker(0x1000 | index as u16)
}

pub fn topic_marker(index: usize) -> String {
    marker(0x2000 | index as u16)
}

const USER_LINES: &[&str] = &[
    "Can you help me plan my week?",
    "I have a question about the recipe you gave me.",
    "What do you think about this idea for my project?",
    "I was wondering how the weather is going to be this weekend.",
    "Could you explain that part again in a simpler way?",
    "My day was long and I just want to talk for a bit.",
    "Is there a better way to write this email to my boss?",
    "Tell me something interesting about the ocean.",
    "I need a few ideas for a birthday gift for my sister.",
    "How do I keep my plants alive in the winter?",
    "What is the difference between these two options?",
    "I am trying to learn a new language and need some practice.",
];

const ASSISTANT_LINES: &[&str] = &[
    "Sure, here is a simple plan you can follow.",
    "That is a great question, and I am happy to help with it.",
    "Here are a few ideas that might work for you.",
    "Let me explain it step by step so it is easier to follow.",
    "It sounds like you have a lot on your plate right now.",
    "You could try a shorter version of the message with a clear ask.",
    "The ocean covers most of the planet and is still largely unexplored.",
    "Gifts that match a hobby are usually a safe choice.",
    "Most plants need less water and more light in the winter.",
    "The main difference is how much time each option takes.",
    "Practicing a little every day is the best way to improve.",
    "I hope this helps, and let me know if you want more detail.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub conversation_count: usize,
    pub cohort: String,
    /// Planted base rate per sub-classifier.
    pub base_rates: BTreeMap<String, f64>,
    /// Planted daily drift per sub-classifier.
    pub slopes: BTreeMap<String, f64>,
    /// Expected activation fraction per classifier (top-level included),
    /// averaged over the user's conversations.
    pub expected_fraction: BTreeMap<String, f64>,
    /// Standard deviation of the observed fraction under the planted rates.
    pub fraction_sd: BTreeMap<String, f64>,
    pub total_duration_s: f64,
    /// Mean planted base rate over sub-classifiers, the survey driver.
    pub affect: f64,
    pub active_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTruth {
    pub conversation_id: String,
    pub user_id: String,
    pub day_index: u32,
    pub activated: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub users: BTreeMap<String, UserTruth>,
    pub conversations: Vec<ConversationTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleItemRow {
    pub user_id: String,
    pub scale: String,
    pub phase: String,
    pub item_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub user_id: String,
    pub question_id: String,
    pub answer: String,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub conversations: Vec<Conversation>,
    pub rules: Vec<RuleFile>,
    pub truth: GroundTruth,
    pub survey: Vec<SurveyRow>,
    pub scale_items: Vec<ScaleItemRow>,
    pub cohorts: BTreeMap<String, String>,
}

fn sample_rate(law: &RateLaw, rng: &mut ChaCha8Rng) -> f64 {
    match law {
        RateLaw::Fixed { value } => *value,
        RateLaw::Mixture {
            tail_prob,
            low_max,
            tail_min,
            tail_max,
        } => {
            if rng.random::<f64>() < *tail_prob {
                tail_min + rng.random::<f64>() * (tail_max - tail_min)
            } else {
                rng.random::<f64>() * low_max
            }
        }
    }
}

fn sample_drift(law: &DriftLaw, rng: &mut ChaCha8Rng) -> f64 {
    match law {
        DriftLaw::Fixed { value } => *value,
        DriftLaw::Mixture { zero_prob, max_abs } => {
            if rng.random::<f64>() < *zero_prob {
                0.0
            } else {
                (rng.random::<f64>() * 2.0 - 1.0) * max_abs
            }
        }
    }
}

/// Largest-remainder apportionment of `total` over `weights`, on top of a
/// floor of `min` each.
fn apportion(weights: &[f64], min: usize, total: usize) -> Vec<usize> {
    let spare = total - min * weights.len();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.into_iter().map(|c| c + min).collect()
}

const MAX_PARETO_COUNT: usize = 5_000;

struct Planned {
    day: u32,
    second_of_day: u32,
}

/// Generates a corpus, scripted-judge rules, and ground truth for `spec`
/// over `taxonomy`.
pub fn generate(spec: &SimSpec, taxonomy: &Taxonomy) -> Result<SimOutput, SimError> {
    spec.validate(taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let catalog = TopicCatalog::bundled();
    let scales = bundled_scales();

    let classifiers = taxonomy.classifiers();
    let index_of: BTreeMap<&str, usize> = classifiers
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let subs: Vec<usize> = classifiers
        .iter()
        .enumerate()
        .filter(|(_, c)| c.tier == Tier::Sub)
        .map(|(i, _)| i)
        .collect();
    let tops: Vec<usize> = classifiers
        .iter()
        .enumerate()
        .filter(|(_, c)| c.tier == Tier::TopLevel)
        .map(|(i, _)| i)
        .collect();
    // each planted child lights up its first parent
    let carrier: BTreeMap<usize, usize> = subs
        .iter()
        .map(|&s| {
            let parent = classifiers[s].parents.iter().next().expect("validated");
            (s, index_of[parent.as_str()])
        })
        .collect();
    let planted: BTreeSet<usize> = if spec.planted.is_empty() {
        subs.iter().copied().collect()
    } else {
        spec.planted.iter().map(|id| index_of[id.as_str()]).collect()
    };

    // conversation counts and days
    let users = spec.user_count;
    let plans: Vec<Vec<Planned>> = match &spec.schedule {
        Schedule::Pareto { alpha, min, total } => {
            let pareto = Pareto::new(1.0, *alpha).expect("validated");
            let weights: Vec<f64> = (0..users).map(|_| pareto.sample(&mut rng)).collect();
            let counts: Vec<usize> = match total {
                Some(t) => apportion(&weights, *min, *t),
                None => weights
                    .iter()
                    .map(|w| ((*min as f64) * w).floor().min(MAX_PARETO_COUNT as f64) as usize)
                    .collect(),
            };
            counts
                .into_iter()
                .map(|n| {
                    let mut p: Vec<Planned> = (0..n)
                        .map(|_| Planned {
                            day: rng.random_range(0..spec.days),
                            second_of_day: rng.random_range(8 * 3600..22 * 3600),
                        })
                        .collect();
                    p.sort_by_key(|x| (x.day, x.second_of_day));
                    p
                })
                .collect()
        }
        Schedule::Daily { per_day } => (0..users)
            .map(|_| {
                let mut p = Vec::with_capacity(*per_day * spec.days as usize);
                for day in 0..spec.days {
                    let slot = (14 * 3600) / *per_day as u32;
                    for k in 0..*per_day as u32 {
                        p.push(Planned {
                            day,
                            second_of_day: 8 * 3600 + k * slot + rng.random_range(0..slot.max(1) / 2 + 1),
                        });
                    }
                }
                p
            })
            .collect(),
    };

    let mut conversations = Vec::new();
    let mut truth_convs = Vec::new();
    let mut user_truth = BTreeMap::new();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    for (u, plan) in plans.iter().enumerate() {
        let user_id = format!("u{u:04}");
        let mut base = BTreeMap::new();
        let mut slope = BTreeMap::new();
        let shared = (sample_rate(&spec.base_rate, &mut rng), sample_drift(&spec.drift, &mut rng));
        for &s in &subs {
            let (r, d) = if planted.contains(&s) {
                if spec.shared_base_rate {
                    shared
                } else {
                    (sample_rate(&spec.base_rate, &mut rng), sample_drift(&spec.drift, &mut rng))
                }
            } else {
                (0.0, 0.0)
            };
            base.insert(s, r);
            slope.insert(s, d);
        }
        for o in spec.overrides.iter().filter(|o| o.user == u) {
            let s = index_of[o.classifier.as_str()];
            base.insert(s, o.rate);
            slope.insert(s, o.slope);
        }
        let favourite = rng.random_range(0..catalog.names().len());
        let first_day = plan.first().map_or(0, |p| p.day);
        let mut exp_sum: BTreeMap<usize, f64> = BTreeMap::new();
        let mut var_sum: BTreeMap<usize, f64> = BTreeMap::new();
        let mut duration = 0.0;
        let mut days = BTreeSet::new();

        for (k, p) in plan.iter().enumerate() {
            let t = (p.day - first_day) as f64;
            let rate = |s: usize| (base[&s] + slope[&s] * t).clamp(0.0, 1.0);
            let mut active: BTreeSet<usize> = BTreeSet::new();
            for &s in &subs {
                let r = rate(s);
                *exp_sum.entry(s).or_default() += r;
                *var_sum.entry(s).or_default() += r * (1.0 - r);
                if rng.random::<f64>() < r {
                    active.insert(s);
                }
            }
            for &top in &tops {
                let mut none = 1.0 - spec.top_level_rate;
                for &s in &subs {
                    if carrier[&s] == top {
                        none *= 1.0 - rate(s);
                    }
                }
                let r = 1.0 - none;
                *exp_sum.entry(top).or_default() += r;
                *var_sum.entry(top).or_default() += r * (1.0 - r);
                if rng.random::<f64>() < spec.top_level_rate {
                    active.insert(top);
                }
            }
            let children: Vec<usize> = active.iter().copied().filter(|s| carrier.contains_key(s)).collect();
            for s in children {
                active.insert(carrier[&s]);
            }

            // build messages
            let exchanges = rng.random_range(spec.min_exchanges..=spec.max_exchanges);
            let mut texts: Vec<(Role, String)> = Vec::with_capacity(exchanges * 2);
            for _ in 0..exchanges {
                texts.push((Role::User, USER_LINES.choose(&mut rng).unwrap().to_string()));
                texts.push((Role::Assistant, ASSISTANT_LINES.choose(&mut rng).unwrap().to_string()));
            }
            let user_slots: Vec<usize> = (0..texts.len()).step_by(2).collect();
            let assistant_slots: Vec<usize> = (1..texts.len()).step_by(2).collect();
            for &c in &active {
                let slot = match classifiers[c].target {
                    Target::WholeConversation => 0,
                    Target::UserMsg => *user_slots.choose(&mut rng).unwrap(),
                    Target::AssistantMsg | Target::Exchange => *assistant_slots.choose(&mut rng).unwrap(),
                };
                texts[slot].1.push(' ');
                texts[slot].1.push_str(&classifier_marker(c));
            }
            let topic = spec.topics.then(|| {
                let idx = if rng.random::<f64>() < 0.6 {
                    favourite
                } else {
                    rng.random_range(0..catalog.names().len())
                };
                texts[0].1.push(' ');
                texts[0].1.push_str(&topic_marker(idx));
                catalog.names()[idx].clone()
            });

            let mut ts = spec.start_timestamp as f64 + p.day as f64 * 86_400.0 + p.second_of_day as f64;
            let mut messages = Vec::with_capacity(texts.len());
            for (i, (role, text)) in texts.into_iter().enumerate() {
                if i > 0 {
                    let gap = if rng.random::<f64>() < spec.long_gap_prob {
                        rng.random_range(61..=spec.long_gap_max_s)
                    } else {
                        rng.random_range(3..=60)
                    };
                    ts += gap as f64;
                }
                messages.push(Message::new(role, text, ts));
            }
            let conv_id = format!("{user_id}-c{k:05}");
            let conv = Conversation::new(conv_id.clone(), user_id.clone(), Modality::Text, messages);
            duration += estimate_duration(&conv.timestamps());
            days.insert(p.day);
            truth_convs.push(ConversationTruth {
                conversation_id: conv_id,
                user_id: user_id.clone(),
                day_index: p.day,
                activated: active.iter().map(|&c| classifiers[c].id.clone()).collect(),
                topic,
            });
            conversations.push(conv);
        }

        let n = plan.len().max(1) as f64;
        let affect = if subs.is_empty() {
            0.0
        } else {
            subs.iter().map(|s| base[s]).sum::<f64>() / subs.len() as f64
        };
        user_truth.insert(
            user_id,
            UserTruth {
                conversation_count: plan.len(),
                cohort: String::new(),
                base_rates: subs.iter().map(|&s| (classifiers[s].id.clone(), base[&s])).collect(),
                slopes: subs.iter().map(|&s| (classifiers[s].id.clone(), slope[&s])).collect(),
                expected_fraction: exp_sum
                    .iter()
                    .map(|(&c, v)| (classifiers[c].id.clone(), v / n))
                    .collect(),
                fraction_sd: var_sum
                    .iter()
                    .map(|(&c, v)| (classifiers[c].id.clone(), v.sqrt() / n))
                    .collect(),
                total_duration_s: duration,
                affect,
                active_days: days.len(),
            },
        );
    }

    // cohorts: heaviest users by conversation count are "power"
    let mut by_count: Vec<(&String, usize)> = user_truth
        .iter()
        .map(|(u, t)| (u, t.conversation_count))
        .collect();
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let power_n = (spec.power_fraction * users as f64).round() as usize;
    let cohorts: BTreeMap<String, String> = by_count
        .iter()
        .enumerate()
        .map(|(i, (u, _))| {
            ((*u).clone(), if i < power_n { "power" } else { "control" }.to_string())
        })
        .collect();
    for (u, c) in &cohorts {
        user_truth.get_mut(u).unwrap().cohort = c.clone();
    }

    // affect rank drives survey answers and scale traits
    let mut ranked: Vec<(&String, f64)> = user_truth.iter().map(|(u, t)| (u, t.affect)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let rank_of: BTreeMap<String, f64> = ranked
        .iter()
        .enumerate()
        .map(|(i, (u, _))| {
            let q = if users > 1 { i as f64 / (users - 1) as f64 } else { 0.5 };
            ((*u).clone(), q)
        })
        .collect();

    let mut survey = Vec::new();
    for (u, q) in &rank_of {
        for question in 1..=11 {
            let qid = format!("Q{question}");
            let latent = q + spec.survey_noise * 0.25 * noise.sample(&mut rng);
            let answer = if question == 11 {
                let level = (latent * 3.0).floor().clamp(0.0, 2.0) as usize;
                CHANGE3[2 - level].0
            } else {
                let level = (latent * 5.0).floor().clamp(0.0, 4.0) as usize;
                LIKERT5[level].0
            };
            survey.push(SurveyRow {
                user_id: u.clone(),
                question_id: qid,
                answer: answer.to_string(),
            });
        }
    }

    let mut scale_items = Vec::new();
    for (u, q) in &rank_of {
        for def in &scales {
            let trait_value = scale_trait(def, *q);
            for phase in ["pre", "post"] {
                for item in &def.items {
                    let raw = (trait_value + spec.scale_item_noise * noise.sample(&mut rng))
                        .round()
                        .clamp(def.min, def.max);
                    let value = if item.reverse { reflect(raw, def.min, def.max) } else { raw };
                    scale_items.push(ScaleItemRow {
                        user_id: u.clone(),
                        scale: def.id.clone(),
                        phase: phase.to_string(),
                        item_id: item.id.clone(),
                        value,
                    });
                }
            }
        }
    }

    let mut rules: Vec<RuleFile> = classifiers
        .iter()
        .enumerate()
        .map(|(i, c)| RuleFile {
            classifier_id: c.id.clone(),
            contains: Some(classifier_marker(i)),
            fingerprint: None,
            reply: "yes".into(),
        })
        .collect();
    if spec.topics {
        for (i, name) in catalog.names().iter().enumerate() {
            let m = topic_marker(i);
            rules.push(RuleFile {
                classifier_id: SUMMARY_STAGE.into(),
                contains: Some(m.clone()),
                fingerprint: None,
                reply: format!("The user and the assistant talk about {}.{m}", name.to_lowercase()),
            });
            rules.push(RuleFile {
                classifier_id: CATEGORY_STAGE.into(),
                contains: Some(m),
                fingerprint: None,
                reply: name.clone(),
            });
        }
    }

    Ok(SimOutput {
        conversations,
        rules,
        truth: GroundTruth {
            seed: spec.seed,
            users: user_truth,
            conversations: truth_convs,
        },
        survey,
        scale_items,
        cohorts,
    })
}

/// Latent trait on a scale for an affect quantile. Socialization runs
/// opposite to the others.
fn scale_trait(def: &ScaleDefinition, q: f64) -> f64 {
    let span = def.max - def.min;
    let q = if def.id.starts_with("socialization") { 1.0 - q } else { q };
    def.min + span * (0.25 + 0.5 * q)
}

impl SimOutput {
    /// Writes `corpus.jsonl`, `rules.json`, `groundtruth.json`,
    /// `survey.csv`, `scales.csv`, and `cohorts.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, SimError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();

        let p = dir.join("corpus.jsonl");
        let mut w = BufWriter::new(File::create(&p)?);
        write_corpus(&mut w, &self.conversations).map_err(|e| std::io::Error::other(e.to_string()))?;
        w.flush()?;
        written.push(p);

        let p = dir.join("rules.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.rules).expect("rules serialize") + "\n")?;
        written.push(p);

        let p = dir.join("groundtruth.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.truth).expect("truth serialize") + "\n")?;
        written.push(p);

        let p = dir.join("survey.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| std::io::Error::other(e.to_string()))?;
        for row in &self.survey {
            w.serialize(row).map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        w.flush()?;
        written.push(p);

        let p = dir.join("scales.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| std::io::Error::other(e.to_string()))?;
        for row in &self.scale_items {
            w.serialize(row).map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        w.flush()?;
        written.push(p);

        let p = dir.join("cohorts.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| std::io::Error::other(e.to_string()))?;
        w.write_record(["user_id", "cohort"]).map_err(|e| std::io::Error::other(e.to_string()))?;
        for (u, c) in &self.cohorts {
            w.write_record([u, c]).map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        w.flush()?;
        written.push(p);

        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimSpec {
        SimSpec {
            seed: 7,
            user_count: 12,
            schedule: Schedule::Pareto {
                alpha: 1.5,
                min: 2,
                total: Some(60),
            },
            ..Default::default()
        }
    }

    #[test]
    fn markers_are_invisible_and_distinct() {
        let a = classifier_marker(3);
        let b = topic_marker(3);
        assert_ne!(a, b);
        assert!(a.chars().all(|c| [WORD_JOINER, ZERO, ONE].contains(&c)));
        assert_eq!(a.chars().count(), 18);
        assert!(!classifier_marker(1).contains(&classifier_marker(11)));
    }

    #[test]
    fn apportion_hits_total() {
        let c = apportion(&[1.0, 2.0, 7.5, 0.1], 1, 40);
        assert_eq!(c.iter().sum::<usize>(), 40);
        assert!(c.iter().all(|&x| x >= 1));
    }

    #[test]
    fn same_seed_same_output() {
        let t = Taxonomy::bundled_v1();
        let a = generate(&small(), &t).unwrap();
        let b = generate(&small(), &t).unwrap();
        assert_eq!(a.conversations, b.conversations);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.conversations.len(), 60);
        let c = generate(&SimSpec { seed: 8, ..small() }, &t).unwrap();
        assert_ne!(a.conversations, c.conversations);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let t = Taxonomy::bundled_v1();
        let bad = SimSpec {
            schedule: Schedule::Pareto {
                alpha: 0.9,
                min: 1,
                total: None,
            },
            ..small()
        };
        let err = generate(&bad, &t).unwrap_err().to_string();
        assert!(err.contains("schedule.alpha"), "{err}");
        let bad = SimSpec {
            base_rate: RateLaw::Fixed { value: 1.5 },
            ..small()
        };
        assert!(generate(&bad, &t).unwrap_err().to_string().contains("base_rate.value"));
        let bad = SimSpec {
            planted: vec!["loneliness".into()],
            ..small()
        };
        assert!(generate(&bad, &t).is_err());
    }

    #[test]
    fn planted_children_carry_a_parent() {
        let t = Taxonomy::bundled_v1();
        let out = generate(&small(), &t).unwrap();
        for c in &out.truth.conversations {
            for id in &c.activated {
                let spec = t.get(id).unwrap();
                if spec.tier == Tier::Sub {
                    assert!(spec.parents.iter().any(|p| c.activated.contains(p)));
                }
            }
        }
    }

    #[test]
    fn spec_parses_from_toml() {
        let text = r#"
            seed = 3
            user_count = 5
            days = 30
            [schedule]
            kind = "daily"
            per_day = 2
            [base_rate]
            kind = "fixed"
            value = 0.2
            [drift]
            kind = "fixed"
            value = 0.01
        "#;
        let s = SimSpec::from_toml(text).unwrap();
        assert_eq!(s.schedule, Schedule::Daily { per_day: 2 });
        assert!(SimSpec::from_toml("seed = 1\nbogus = 2").is_err());
    }

    fn classify_sim(out: &SimOutput, t: &Taxonomy) -> BTreeMap<String, crate::analytics::users::UserStats> {
        use crate::cascade::{classify_all, CascadeOptions};
        use crate::judge::{Judge, Rule, ScriptedBackend};
        use crate::taxonomy::PromptTemplate;
        let rules: Vec<Rule> = out.rules.iter().cloned().map(|r| Rule::try_from(r).unwrap()).collect();
        let judge = Judge::scripted(ScriptedBackend::new(rules));
        let (results, _) = classify_all(
            &out.conversations,
            t,
            &PromptTemplate::default(),
            &judge,
            &CascadeOptions::default(),
            4,
        )
        .unwrap();
        crate::analytics::users::user_activation_fractions(&results, &BTreeMap::new())
    }

    #[test]
    fn null_plant_yields_zero_fractions() {
        let t = Taxonomy::bundled_v1();
        let spec = SimSpec {
            base_rate: RateLaw::Fixed { value: 0.0 },
            drift: DriftLaw::Fixed { value: 0.0 },
            top_level_rate: 0.0,
            ..small()
        };
        let out = generate(&spec, &t).unwrap();
        let stats = classify_sim(&out, &t);
        assert_eq!(stats.len(), 12);
        for s in stats.values() {
            assert!(s.fractions.values().all(|&f| f == 0.0), "{:?}", s.fractions);
        }
    }

    #[test]
    fn rate_one_override_is_recovered() {
        let t = Taxonomy::bundled_v1();
        let spec = SimSpec {
            base_rate: RateLaw::Fixed { value: 0.0 },
            drift: DriftLaw::Fixed { value: 0.0 },
            top_level_rate: 0.0,
            overrides: vec![Override {
                user: 3,
                classifier: "pet_name".into(),
                rate: 1.0,
                slope: 0.0,
            }],
            ..small()
        };
        let out = generate(&spec, &t).unwrap();
        let stats = classify_sim(&out, &t);
        for (u, s) in &stats {
            let f = s.fractions["pet_name"];
            if u == "u0003" {
                assert_eq!(f, 1.0);
                assert_eq!(s.fractions["loneliness"], 1.0);
            } else {
                assert_eq!(f, 0.0);
            }
        }
    }

    #[test]
    fn survey_buckets_rise_with_shared_rates() {
        use crate::analytics::survey::{survey_bucket_summary, SurveyResponse};
        let t = Taxonomy::bundled_v1();
        let spec = SimSpec {
            seed: 1,
            user_count: 200,
            shared_base_rate: true,
            schedule: Schedule::Daily { per_day: 1 },
            ..Default::default()
        };
        let out = generate(&spec, &t).unwrap();
        let stats = classify_sim(&out, &t);
        let responses: Vec<SurveyResponse> = out
            .survey
            .iter()
            .map(|r| SurveyResponse::new(&r.user_id, &r.question_id, &r.answer).unwrap())
            .collect();
        let buckets = survey_bucket_summary(&stats, &responses, "Q1");
        let ms: Vec<_> = buckets.iter().map(|b| b.activation["pet_name"].clone()).collect();
        assert!(ms.len() >= 3, "{ms:?}");
        // adjacent low buckets sit within sampling noise of each other
        for w in ms.windows(2) {
            assert!(w[1].mean >= w[0].mean - 2.0 * w[0].se.unwrap_or(0.0).hypot(w[1].se.unwrap_or(0.0)), "{ms:?}");
        }
        assert!(ms[ms.len() - 1].mean > ms[0].mean, "{ms:?}");
    }

    #[test]
    fn heavy_tail_concentrates_duration() {
        let out = generate(
            &SimSpec {
                seed: 5,
                user_count: 1000,
                ..Default::default()
            },
            &Taxonomy::bundled_v1(),
        )
        .unwrap();
        let mut d: Vec<f64> = out.truth.users.values().map(|u| u.total_duration_s).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = d[..100].iter().sum();
        let share = top / d.iter().sum::<f64>();
        assert!(share > 0.40, "top decile share {share}");
    }
}

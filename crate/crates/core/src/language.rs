//! Conversation-level language detection and the per-user English-share
//! filter.

use std::collections::BTreeMap;

use crate::corpus::Conversation;

/// Code returned when no known stop word is present.
pub const UNDETERMINED: &str = "und";

pub trait LanguageDetector: Send + Sync {
    /// ISO 639-1 code for the conversation, or [`UNDETERMINED`].
    fn detect(&self, conversation: &Conversation) -> String;
}

/// Picks the language whose stop-word list covers the most tokens of the
/// conversation. Ties go to the earlier language in the table.
#[derive(Debug, Default, Clone, Copy)]
pub struct StopwordDetector;

const STOPWORDS: &[(&str, &[&str])] = &[
    (
        "en",
        &[
            "the", "and", "is", "are", "you", "i", "to", "of", "a", "in", "that", "it", "for",
            "was", "with", "my", "me", "what", "this", "be", "have", "do", "not", "can", "your",
            "how", "about", "just", "so", "at",
        ],
    ),
    (
        "es",
        &[
            "el", "la", "los", "las", "que", "y", "es", "en", "un", "una", "por", "para", "con",
            "no", "mi", "pero", "como", "estoy", "del", "lo",
        ],
    ),
    (
        "fr",
        &[
            "le", "la", "les", "et", "est", "un", "une", "je", "tu", "vous", "que", "pas", "pour",
            "avec", "des", "du", "mais", "suis", "ce", "mon",
        ],
    ),
    (
        "de",
        &[
            "der", "die", "das", "und", "ist", "ich", "du", "nicht", "ein", "eine", "mit", "zu",
            "den", "auf", "für", "aber", "bin", "wie", "mein", "sie",
        ],
    ),
    (
        "pt",
        &[
            "o", "os", "as", "que", "e", "é", "um", "uma", "não", "com", "para", "por", "eu",
            "você", "mas", "meu", "do", "da", "em", "isso",
        ],
    ),
    (
        "it",
        &[
            "il", "lo", "gli", "che", "e", "è", "un", "una", "non", "con", "per", "sono", "io",
            "mi", "ma", "del", "della", "questo", "ciao", "anche",
        ],
    ),
];

impl LanguageDetector for StopwordDetector {
    fn detect(&self, conversation: &Conversation) -> String {
        let mut counts = [0usize; STOPWORDS.len()];
        for m in &conversation.messages {
            for token in m
                .text
                .split(|c: char| !c.is_alphabetic() && c != '\'')
                .filter(|t| !t.is_empty())
            {
                let token = token.to_lowercase();
                for (i, (_, words)) in STOPWORDS.iter().enumerate() {
                    if words.contains(&token.as_str()) {
                        counts[i] += 1;
                    }
                }
            }
        }
        let mut best: Option<(usize, usize)> = None;
        for (i, &n) in counts.iter().enumerate() {
            if n > 0 && best.is_none_or(|(_, b)| n > b) {
                best = Some((i, n));
            }
        }
        best.map_or_else(|| UNDETERMINED.to_string(), |(i, _)| STOPWORDS[i].0.to_string())
    }
}

/// Per-user conversation counts by detected language.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserLanguages {
    pub total: usize,
    pub by_language: BTreeMap<String, usize>,
}

impl UserLanguages {
    pub fn english_share(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        *self.by_language.get("en").unwrap_or(&0) as f64 / self.total as f64
    }
}

pub fn user_language_counts<'a, I>(
    conversations: I,
    detector: &dyn LanguageDetector,
) -> BTreeMap<String, UserLanguages>
where
    I: IntoIterator<Item = &'a Conversation>,
{
    let mut out: BTreeMap<String, UserLanguages> = BTreeMap::new();
    for c in conversations {
        let lang = detector.detect(c);
        let entry = out.entry(c.user_id.clone()).or_default();
        entry.total += 1;
        *entry.by_language.entry(lang).or_default() += 1;
    }
    out
}

/// Fraction of each user's conversations detected as English. Users without
/// conversations do not appear.
pub fn user_language_share<'a, I>(
    conversations: I,
    detector: &dyn LanguageDetector,
) -> BTreeMap<String, f64>
where
    I: IntoIterator<Item = &'a Conversation>,
{
    user_language_counts(conversations, detector)
        .into_iter()
        .map(|(u, l)| (u, l.english_share()))
        .collect()
}

/// Strict filter: a user passes only when the share is above `threshold`.
pub fn passes_english_filter(share: f64, threshold: f64) -> bool {
    share > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Message, Modality, Role};

    fn conv(id: &str, user: &str, text: &str) -> Conversation {
        Conversation::new(
            id,
            user,
            Modality::Text,
            vec![Message::new(Role::User, text, 0.0)],
        )
    }

    struct Fixed(Vec<(&'static str, &'static str)>);
    impl LanguageDetector for Fixed {
        fn detect(&self, c: &Conversation) -> String {
            self.0.iter().find(|(id, _)| *id == c.id).unwrap().1.to_string()
        }
    }

    #[test]
    fn detects_common_languages() {
        let d = StopwordDetector;
        assert_eq!(d.detect(&conv("a", "u", "I think that you are right about the plan")), "en");
        assert_eq!(d.detect(&conv("a", "u", "Estoy cansado y no quiero ir a la fiesta")), "es");
        assert_eq!(d.detect(&conv("a", "u", "Ich bin müde und das ist nicht gut")), "de");
        assert_eq!(d.detect(&conv("a", "u", "12345 ???")), UNDETERMINED);
    }

    #[test]
    fn four_of_five_is_exactly_point_eight_and_fails_strict_filter() {
        let convs: Vec<_> = (0..5).map(|i| conv(&format!("c{i}"), "u", "")).collect();
        let det = Fixed(vec![("c0", "en"), ("c1", "en"), ("c2", "en"), ("c3", "en"), ("c4", "fr")]);
        let shares = user_language_share(&convs, &det);
        assert_eq!(shares["u"], 0.8);
        assert!(!passes_english_filter(shares["u"], 0.8));
    }

    #[test]
    fn all_english_and_absent_users() {
        let convs = vec![conv("a", "u1", "the cat"), conv("b", "u1", "you and me")];
        let shares = user_language_share(&convs, &StopwordDetector);
        assert_eq!(shares["u1"], 1.0);
        assert!(!shares.contains_key("u2"));
        assert!(passes_english_filter(1.0, 0.8));
    }

    #[test]
    fn language_counts_sum_to_total() {
        let convs = vec![
            conv("a", "u", "the cat"),
            conv("b", "u", "el gato y la casa"),
            conv("c", "u", "..."),
        ];
        let counts = user_language_counts(&convs, &StopwordDetector);
        let u = &counts["u"];
        assert_eq!(u.by_language.values().sum::<usize>(), u.total);
        assert!((0.0..=1.0).contains(&u.english_share()));
    }
}

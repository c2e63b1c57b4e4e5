//! Usage-time estimate for a conversation from message timestamps.

/// A message followed by another within this many seconds lasts until the
/// next message.
pub const CONTINUATION_GAP_S: f64 = 60.0;
/// Duration assigned to a message with no prompt follow-up, including the
/// last message.
pub const LONE_MESSAGE_S: f64 = 15.0;

/// Study requirement used to annotate usage deciles: 28 days of 5 minutes.
pub const DESIGNATED_DAYS: u32 = 28;
pub const DESIGNATED_MINUTES_PER_DAY: u32 = 5;
pub const DESIGNATED_MINUTES: u32 = DESIGNATED_DAYS * DESIGNATED_MINUTES_PER_DAY;

/// Sum of per-message durations. Timestamps must be sorted ascending; a gap
/// of exactly 60 s still counts as a continuation.
pub fn estimate_duration(timestamps: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, t) in timestamps.iter().enumerate() {
        total += match timestamps.get(i + 1) {
            Some(next) if next - t <= CONTINUATION_GAP_S => next - t,
            _ => LONE_MESSAGE_S,
        };
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(estimate_duration(&[0.0, 30.0, 50.0, 200.0]), 80.0);
        assert_eq!(estimate_duration(&[1234.0]), 15.0);
        assert_eq!(estimate_duration(&[0.0, 60.0]), 75.0);
        assert_eq!(estimate_duration(&[0.0, 60.5]), 30.0);
        assert_eq!(estimate_duration(&[]), 0.0);
        assert_eq!(DESIGNATED_MINUTES, 140);
    }

    proptest! {
        #[test]
        fn lower_bound_from_lone_messages(mut ts in prop::collection::vec(0.0f64..10_000.0, 1..40)) {
            ts.sort_by(f64::total_cmp);
            let lone = (0..ts.len())
                .filter(|&i| i + 1 == ts.len() || ts[i + 1] - ts[i] > CONTINUATION_GAP_S)
                .count();
            let d = estimate_duration(&ts);
            prop_assert!(d >= LONE_MESSAGE_S * lone as f64 - 1e-9);
            prop_assert!(d >= 0.0);
        }
    }
}

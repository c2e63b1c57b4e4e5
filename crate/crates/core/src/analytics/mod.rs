//! Aggregation of classification results into user-, cohort-, and
//! group-level statistics.

pub mod deciles;
pub mod duration;
pub mod longitudinal;
pub mod scales;
pub mod stats;
pub mod survey;
pub mod users;

pub use deciles::{assign_deciles, DecileSummary};
pub use duration::estimate_duration;
pub use longitudinal::{daily_series, longitudinal_slope, user_slopes, SlopeRecord};
pub use scales::{change_scores, score_scale, ChangeScores, Phase, ScaleDefinition, ScaleScore};
pub use stats::{mean_se, ols, pearson, permutation_p, Correlation, MeanSe};
pub use survey::{encode_survey, survey_bucket_summary, SurveyResponse};
pub use users::{cohort_summary, sorted_activation_curve, user_activation_fractions, Cohort, UserStats};

//! Overlap scores, cohort summaries and agreement statistics.

mod overlap;
mod report;
pub mod special;
mod stats;

pub use overlap::{dice_labels, dice_per_lobe, dice_to_jaccard, jaccard_labels, jaccard_to_dice, LobeDice, N_LOBES};
pub use report::{robustness_buckets, structure_volumes_ml, Bucket, BucketReport, CaseScores, Grouping, MetricsReport, STRUCTURES};
pub use stats::{bland_altman, one_way_anova, pearson, quantile_sorted, summarize, Anova, BlandAltman, Pearson, Summary, AGREEMENT_Z};

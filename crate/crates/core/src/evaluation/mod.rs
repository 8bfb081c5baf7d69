//! Agreement statistics and the comparison of automated metrics with the
//! human baseline.

mod compare;
mod krippendorff;
mod stats;

pub use compare::{
    compare_levels, entropy_metric, AgreementSummary, ComparisonInputs, ComparisonReport, Discrepancy, Level, Point,
    ReportRow, ALL, LOGIT_PREFIX,
};
pub use krippendorff::{alpha_from_units, krippendorff_alpha, krippendorff_alpha_untrimmed, AlphaLevel};
pub use stats::{average_ranks, mse, spearman};

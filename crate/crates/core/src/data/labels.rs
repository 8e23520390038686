//! Soft labels from annotator votes and the consistency rule.

use crate::error::{Error, Result};
use crate::types::SoftLabel;

/// Minimum share of votes the top class needs for a record to count as
/// consistent.
pub const CONSISTENCY_THRESHOLD: f64 = 0.6;

/// Normalizes per-class vote counts into a distribution. Unsure votes are
/// not part of `votes` and never enter the denominator.
pub fn build_soft_label(votes: &[u32]) -> Result<SoftLabel> {
    let total: u64 = votes.iter().map(|&v| u64::from(v)).sum();
    if total == 0 {
        return Err(Error::EmptyVotes);
    }
    let probs = votes.iter().map(|&v| f64::from(v) / total as f64).collect();
    Ok(SoftLabel::from_probs(probs))
}

/// `(true, Some(argmax))` when the top class holds at least 60% of the label
/// mass, otherwise `(false, None)`.
pub fn classify_consistency(label: &SoftLabel) -> (bool, Option<usize>) {
    // k/n is correctly rounded, so an exact 3/5 ratio compares equal to 0.6
    if label.max() >= CONSISTENCY_THRESHOLD {
        (true, Some(label.argmax()))
    } else {
        (false, None)
    }
}

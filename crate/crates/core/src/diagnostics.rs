//! Non-fatal conditions recorded during compute.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// Every pairwise distance in a batch was zero, so the median bandwidth
    /// fell back to 1.
    MedianBandwidthFallback,
    /// A centered Gram matrix was zero; the dependence estimate is reported as 0.
    DegenerateBatch,
    /// Fewer clients could afford the stage than the selection fraction asked for.
    SmallEligiblePool {
        stage: usize,
        eligible: usize,
        requested: usize,
    },
    /// The block count is meaningless for end-to-end training.
    BlocksIgnored,
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::MedianBandwidthFallback => {
                write!(f, "all pairwise distances are zero; median bandwidth set to 1")
            }
            Warning::DegenerateBatch => {
                write!(f, "degenerate batch: centered Gram matrix is zero, nHSIC reported as 0")
            }
            Warning::SmallEligiblePool {
                stage,
                eligible,
                requested,
            } => write!(
                f,
                "stage {stage}: only {eligible} clients eligible, {requested} requested"
            ),
            Warning::BlocksIgnored => write!(f, "mode e2e ignores the configured block count"),
        }
    }
}

//! Verification suites run by the `gradcheck` and `oracle` commands and by
//! the test targets.

mod gradcheck;
pub mod micro;
mod oracle;

pub use gradcheck::{gradcheck_suite, model_checks, op_checks, relative_error, GradCheck, STEP, TOLERANCE};
pub use oracle::naive_logits;

use serde::Serialize;

use crate::aggregation::{interactive_forward, AggregationStrategy};
use crate::tensor::{Result, Tape};

pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct OracleCheck {
    pub strategy: AggregationStrategy,
    pub seed: u64,
    pub depth: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

/// Tape forward against the naive-loop forward for every strategy.
pub fn oracle_suite(seeds: &[u64]) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (k, j) in [(2, 1), (3, 2), (3, 3)] {
            for strategy in AggregationStrategy::ALL {
                let (bb, mut learner, images, captions) = micro::setup(strategy, seed, k, j)?;
                micro::randomize_gates(&mut learner, seed);
                let refs: Vec<_> = images.iter().collect();
                let mut tape = Tape::new();
                let trace = interactive_forward(&mut tape, &bb, &learner, &refs, &captions)?;
                let fast = tape.value(trace.logits);
                let slow = naive_logits(&bb, &learner, &refs, &captions);
                let mut max_abs_diff: f64 = 0.0;
                for (i, row) in slow.iter().enumerate() {
                    for (n, v) in row.iter().enumerate() {
                        max_abs_diff = max_abs_diff.max((fast.at2(i, n) - v).abs());
                    }
                }
                out.push(OracleCheck {
                    strategy,
                    seed,
                    depth: j,
                    max_abs_diff,
                    passed: max_abs_diff <= ORACLE_TOLERANCE,
                });
            }
        }
    }
    Ok(out)
}

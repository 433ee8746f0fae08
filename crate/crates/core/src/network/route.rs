use crate::error::{Error, Result};

use super::NetworkSpec;

/// One block application: `block` is a 0-based block index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub block: usize,
    /// Multiplier on the residual branch output. Ignored for transitions.
    pub branch_scale: f64,
}

/// Ordered list of block applications through a network.
///
/// Each stage must start with its transition block, followed by any subset
/// of the stage's residual blocks in any order, each at most once. Stages
/// appear in order and none may be skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    steps: Vec<Step>,
}

impl Route {
    pub fn new(steps: Vec<Step>) -> Self {
        Route { steps }
    }

    /// Every block, in order, unscaled.
    pub fn full(spec: &NetworkSpec) -> Self {
        Route::from_blocks((0..spec.total_blocks()).collect())
    }

    pub fn from_blocks(blocks: Vec<usize>) -> Self {
        Route {
            steps: blocks
                .into_iter()
                .map(|block| Step {
                    block,
                    branch_scale: 1.0,
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.block).collect()
    }

    /// Replaces every branch scale by `f(block)`.
    pub fn with_branch_scale(mut self, f: impl Fn(usize) -> f64) -> Self {
        for s in &mut self.steps {
            s.branch_scale = f(s.block);
        }
        self
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let total = spec.total_blocks();
        let starts = spec.stage_starts();
        let mut seen = vec![false; total];
        let mut stage = None::<usize>;
        for (pos, step) in self.steps.iter().enumerate() {
            if step.block >= total {
                return Err(Error::Validation(format!(
                    "route step {pos} names block {} of {total}",
                    step.block
                )));
            }
            if seen[step.block] {
                return Err(Error::Validation(format!(
                    "route applies block {} twice",
                    step.block
                )));
            }
            seen[step.block] = true;
            if !step.branch_scale.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite branch scale on block {}",
                    step.block
                )));
            }
            let s = spec.stage_of(step.block);
            if spec.is_transition(step.block) {
                let expected = stage.map_or(0, |p| p + 1);
                if s != expected {
                    return Err(Error::Validation(format!(
                        "stage {s} entered out of order (expected stage {expected})"
                    )));
                }
                stage = Some(s);
            } else if stage != Some(s) {
                return Err(Error::Validation(format!(
                    "block {} applied outside its stage {s}",
                    step.block
                )));
            }
        }
        if stage != Some(starts.len() - 1) {
            return Err(Error::Validation(
                "route does not pass through every stage".into(),
            ));
        }
        Ok(())
    }
}

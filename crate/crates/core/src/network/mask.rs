use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{NetworkSpec, Route};

/// Default upper bound on the number of masks [`enumerate_ordered`] returns.
pub const DEFAULT_ENUMERATION_CAP: usize = 10_000;

/// Ordered sub-network: stage `s` keeps its first `kept[s]` blocks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubnetMask {
    kept: Vec<usize>,
}

impl SubnetMask {
    pub fn new(kept: Vec<usize>) -> Self {
        SubnetMask { kept }
    }

    /// The main network.
    pub fn full(spec: &NetworkSpec) -> Self {
        SubnetMask::new(spec.blocks_per_stage())
    }

    /// Transition blocks only.
    pub fn smallest(spec: &NetworkSpec) -> Self {
        SubnetMask::new(vec![1; spec.stages.len()])
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn depth(&self) -> usize {
        self.kept.iter().sum()
    }

    pub fn is_main(&self, spec: &NetworkSpec) -> bool {
        self.kept == spec.blocks_per_stage()
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.kept.len() != spec.stages.len() {
            return Err(Error::Validation(format!(
                "mask has {} stages, network has {}",
                self.kept.len(),
                spec.stages.len()
            )));
        }
        for (s, (&k, st)) in self.kept.iter().zip(&spec.stages).enumerate() {
            if k == 0 || k > st.num_blocks {
                return Err(Error::Validation(format!(
                    "mask keeps {k} blocks in stage {s}, allowed 1..={}",
                    st.num_blocks
                )));
            }
        }
        Ok(())
    }

    pub fn route(&self, spec: &NetworkSpec) -> Result<Route> {
        self.validate(spec)?;
        let starts = spec.stage_starts();
        let blocks = self
            .kept
            .iter()
            .zip(starts)
            .flat_map(|(&k, start)| start..start + k)
            .collect();
        Ok(Route::from_blocks(blocks))
    }
}

impl std::fmt::Display for SubnetMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.kept.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Arbitrary subset of residual blocks; transitions are always kept.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlockSubset {
    keep: Vec<bool>,
}

impl BlockSubset {
    pub fn new(spec: &NetworkSpec, mut keep: Vec<bool>) -> Result<Self> {
        if keep.len() != spec.total_blocks() {
            return Err(Error::Validation(format!(
                "subset over {} blocks, network has {}",
                keep.len(),
                spec.total_blocks()
            )));
        }
        for b in spec.stage_starts() {
            keep[b] = true;
        }
        Ok(BlockSubset { keep })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_main(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    pub fn route(&self) -> Route {
        Route::from_blocks(
            self.keep
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(b, _)| b)
                .collect(),
        )
    }
}

/// Draws each `kept[s]` uniformly from `1..=n_s`.
pub fn sample_ordered<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> SubnetMask {
    SubnetMask::new(
        spec.stages
            .iter()
            .map(|st| rng.random_range(1..=st.num_blocks))
            .collect(),
    )
}

/// Keeps each residual block independently with probability `keep_prob`.
pub fn sample_stochastic<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    rng: &mut R,
    keep_prob: f64,
) -> Result<BlockSubset> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Validation(format!(
            "keep probability {keep_prob} outside (0, 1]"
        )));
    }
    let keep = (0..spec.total_blocks())
        .map(|b| spec.is_transition(b) || rng.random::<f64>() < keep_prob)
        .collect();
    BlockSubset::new(spec, keep)
}

/// Every ordered mask, lexicographic in `kept`.
pub fn enumerate_ordered(spec: &NetworkSpec, cap: usize) -> Result<Vec<SubnetMask>> {
    let size = ordered_space_size(spec);
    if size.is_none_or(|n| n > cap as u128) {
        return Err(Error::Capacity(format!(
            "ordered space of {} masks exceeds the cap of {cap}",
            size.map_or_else(|| "overflowing".to_string(), |n| n.to_string())
        )));
    }
    let dims = spec.blocks_per_stage();
    let mut out = Vec::with_capacity(size.unwrap_or(0) as usize);
    let mut cur = vec![1usize; dims.len()];
    loop {
        out.push(SubnetMask::new(cur.clone()));
        // odometer with the last stage fastest
        let mut s = dims.len();
        loop {
            if s == 0 {
                return Ok(out);
            }
            s -= 1;
            if cur[s] < dims[s] {
                cur[s] += 1;
                break;
            }
            cur[s] = 1;
        }
    }
}

fn product(mut factors: impl Iterator<Item = Option<u128>>) -> Option<u128> {
    factors.try_fold(1u128, |acc, f| acc.checked_mul(f?))
}

/// `prod n_s`.
pub fn ordered_space_size(spec: &NetworkSpec) -> Option<u128> {
    product(spec.stages.iter().map(|s| Some(s.num_blocks as u128)))
}

/// `prod 2^(n_s - 1)`: residual-preserving arbitrary subsets.
pub fn stochastic_space_size(spec: &NetworkSpec) -> Option<u128> {
    product(
        spec.stages
            .iter()
            .map(|s| 1u128.checked_shl((s.num_blocks - 1) as u32)),
    )
}

/// `prod 2^n_s`: every block optional, as in the raw unraveled view.
pub fn raw_space_size(spec: &NetworkSpec) -> Option<u128> {
    product(
        spec.stages
            .iter()
            .map(|s| 1u128.checked_shl(s.num_blocks as u32)),
    )
}

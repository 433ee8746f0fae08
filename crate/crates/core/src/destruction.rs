//! Test-time destruction: deleting residual blocks and permuting blocks
//! within stages, then measuring the accuracy drop.
//!
//! Layers are named by 1-based global index in stage order. The first
//! layer of each stage is its transition and is never touched.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_route, EvalOptions, Summary};
use crate::network::{NetworkSpec, ResidualNet, Route};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    DeleteOne,
    DeleteK,
    Permute,
}

/// One destruction of a network.
///
/// For deletions `targets` lists the removed layers in increasing order and
/// `complexity` is their count. For permutations `targets` is the full
/// application order of all layers and `complexity` is the minimal number
/// of transpositions producing it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DestructionPlan {
    pub kind: PlanKind,
    pub targets: Vec<usize>,
    pub complexity: usize,
}

impl DestructionPlan {
    /// The plan that changes nothing.
    pub fn identity() -> Self {
        DestructionPlan {
            kind: PlanKind::DeleteK,
            targets: Vec::new(),
            complexity: 0,
        }
    }

    pub fn delete(mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        DestructionPlan {
            kind: if layers.len() == 1 {
                PlanKind::DeleteOne
            } else {
                PlanKind::DeleteK
            },
            complexity: layers.len(),
            targets: layers,
        }
    }

    /// A permutation plan from a full 1-based application order.
    pub fn permute(spec: &NetworkSpec, order: Vec<usize>) -> Result<Self> {
        let complexity = permutation_complexity(spec, &order)?;
        Ok(DestructionPlan {
            kind: PlanKind::Permute,
            targets: order,
            complexity,
        })
    }

    /// Checks the plan against `spec`.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let total = spec.total_blocks();
        match self.kind {
            PlanKind::DeleteOne | PlanKind::DeleteK => {
                if self.kind == PlanKind::DeleteOne && self.targets.len() != 1 {
                    return Err(Error::Validation(format!(
                        "delete_one plan names {} layers",
                        self.targets.len()
                    )));
                }
                if !self.targets.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::Validation(
                        "deleted layers must be distinct and increasing".into(),
                    ));
                }
                for &l in &self.targets {
                    if l == 0 || l > total {
                        return Err(Error::Validation(format!("layer {l} outside 1..={total}")));
                    }
                    if spec.is_transition(l - 1) {
                        return Err(Error::Validation(format!(
                            "layer {l} is a stage transition and cannot be deleted"
                        )));
                    }
                }
                if self.complexity != self.targets.len() {
                    return Err(Error::Validation(format!(
                        "deletion complexity {} does not match {} targets",
                        self.complexity,
                        self.targets.len()
                    )));
                }
            }
            PlanKind::Permute => {
                let c = permutation_complexity(spec, &self.targets)?;
                if c != self.complexity {
                    return Err(Error::Validation(format!(
                        "permutation has complexity {c}, plan states {}",
                        self.complexity
                    )));
                }
            }
        }
        Ok(())
    }

    /// The route realising this plan on `spec`.
    pub fn route(&self, spec: &NetworkSpec) -> Result<Route> {
        self.validate(spec)?;
        let blocks = match self.kind {
            PlanKind::Permute => self.targets.iter().map(|l| l - 1).collect(),
            _ => (0..spec.total_blocks())
                .filter(|b| self.targets.binary_search(&(b + 1)).is_err())
                .collect(),
        };
        Ok(Route::from_blocks(blocks))
    }

    /// For permutations, the inverse plan (restores the original order when
    /// composed with this one).
    pub fn inverse(&self, spec: &NetworkSpec) -> Result<Self> {
        if self.kind != PlanKind::Permute {
            return Err(Error::Validation("only permutations have inverses".into()));
        }
        let mut inv = vec![0; self.targets.len()];
        for (pos, &l) in self.targets.iter().enumerate() {
            inv[l - 1] = pos + 1;
        }
        DestructionPlan::permute(spec, inv)
    }

    /// Applies `other` after `self` (both permutations): layer at position
    /// `i` of the result is `self.targets[other.targets[i] - 1]`.
    pub fn compose(&self, other: &Self, spec: &NetworkSpec) -> Result<Self> {
        if self.kind != PlanKind::Permute || other.kind != PlanKind::Permute {
            return Err(Error::Validation("only permutations compose".into()));
        }
        let order = other.targets.iter().map(|&p| self.targets[p - 1]).collect();
        DestructionPlan::permute(spec, order)
    }
}

impl fmt::Display for DestructionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            PlanKind::DeleteOne => "delete_one",
            PlanKind::DeleteK => "delete_k",
            PlanKind::Permute => "permute",
        };
        write!(
            f,
            "{kind} c={} [{}]",
            self.complexity,
            self.targets.iter().join(",")
        )
    }
}

/// The 1-based indices of layers that may be deleted or permuted.
pub fn destructible_layers(spec: &NetworkSpec) -> Vec<usize> {
    (0..spec.total_blocks())
        .filter(|&b| !spec.is_transition(b))
        .map(|b| b + 1)
        .collect()
}

/// Minimal transpositions turning `perm` into the identity: `n - cycles`.
pub fn cayley_distance(perm: &[usize]) -> usize {
    let mut seen = vec![false; perm.len()];
    let mut cycles = 0;
    for start in 0..perm.len() {
        if !seen[start] {
            cycles += 1;
            let mut i = start;
            while !seen[i] {
                seen[i] = true;
                i = perm[i];
            }
        }
    }
    perm.len() - cycles
}

/// Sum over stages of the Cayley distance of the within-stage reordering.
/// Errors unless `order` is a permutation of `1..=L` that fixes every
/// stage's transition and keeps each layer within its stage.
pub fn permutation_complexity(spec: &NetworkSpec, order: &[usize]) -> Result<usize> {
    let total = spec.total_blocks();
    if order.len() != total {
        return Err(Error::Validation(format!(
            "permutation has {} entries for {total} layers",
            order.len()
        )));
    }
    let mut seen = vec![false; total];
    let mut complexity = 0;
    for (s, start) in spec.stage_starts().into_iter().enumerate() {
        let n = spec.stages[s].num_blocks;
        let local: Vec<usize> = order[start..start + n]
            .iter()
            .map(|&l| {
                if l == 0 || l > total || seen[l - 1] {
                    return Err(Error::Validation(format!(
                        "permutation entry {l} is out of range or repeated"
                    )));
                }
                seen[l - 1] = true;
                let b = l - 1;
                if b < start || b >= start + n {
                    return Err(Error::Validation(format!(
                        "layer {l} moved out of stage {}",
                        s + 1
                    )));
                }
                Ok(b - start)
            })
            .collect::<Result<_>>()?;
        if local[0] != 0 {
            return Err(Error::Validation(format!(
                "stage {} must start with its transition layer {}",
                s + 1,
                start + 1
            )));
        }
        complexity += cayley_distance(&local);
    }
    Ok(complexity)
}

/// All `k`-subsets of destructible layers, lexicographic. Empty when `k`
/// exceeds the number of destructible layers.
pub fn enumerate_deletions(spec: &NetworkSpec, k: usize) -> Result<Vec<DestructionPlan>> {
    if k == 0 {
        return Err(Error::Validation(
            "deletion count must be at least 1".into(),
        ));
    }
    Ok(destructible_layers(spec)
        .into_iter()
        .combinations(k)
        .map(DestructionPlan::delete)
        .collect())
}

/// All within-stage permutations whose total complexity equals `c`, in
/// lexicographic order of the application order.
pub fn enumerate_permutations(spec: &NetworkSpec, c: usize) -> Result<Vec<DestructionPlan>> {
    if c == 0 {
        return Err(Error::Validation(
            "permutation complexity must be at least 1".into(),
        ));
    }
    // per stage: every local reordering of the residual positions with its distance
    let per_stage: Vec<Vec<(Vec<usize>, usize)>> = spec
        .stages
        .iter()
        .map(|st| {
            let m = st.num_blocks - 1;
            (1..=m)
                .permutations(m)
                .map(|tail| {
                    let mut local = Vec::with_capacity(m + 1);
                    local.push(0);
                    local.extend(tail);
                    let d = cayley_distance(&local);
                    (local, d)
                })
                .filter(|(_, d)| *d <= c)
                .collect()
        })
        .collect();
    let starts = spec.stage_starts();
    let mut plans = Vec::new();
    for combo in per_stage.iter().map(|v| v.iter()).multi_cartesian_product() {
        if combo.iter().map(|(_, d)| d).sum::<usize>() != c {
            continue;
        }
        let order = combo
            .iter()
            .zip(&starts)
            .flat_map(|((local, _), &start)| local.iter().map(move |&p| start + p + 1))
            .collect();
        plans.push(DestructionPlan {
            kind: PlanKind::Permute,
            targets: order,
            complexity: c,
        });
    }
    Ok(plans)
}

/// Recalibrated accuracy of the undestroyed network.
pub fn baseline_accuracy(
    net: &ResidualNet,
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<f64> {
    evaluate_route(net, &Route::full(net.spec()), eval, calib, opts)
}

/// Accuracy drop in percentage points caused by `plan`.
pub fn apply_and_eval(
    net: &ResidualNet,
    plan: &DestructionPlan,
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<f64> {
    let base = baseline_accuracy(net, eval, calib, opts)?;
    drop_from(net, plan, base, eval, calib, opts)
}

fn drop_from(
    net: &ResidualNet,
    plan: &DestructionPlan,
    baseline: f64,
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<f64> {
    let route = plan.route(net.spec())?;
    let acc = evaluate_route(net, &route, eval, calib, opts)?;
    Ok(100.0 * (baseline - acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub plan: DestructionPlan,
    /// Percentage points below the baseline.
    pub drop: f64,
}

/// Drops of every plan against one shared baseline, in input order.
pub fn evaluate_plans(
    net: &ResidualNet,
    plans: &[DestructionPlan],
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<Vec<PlanResult>> {
    let base = baseline_accuracy(net, eval, calib, opts)?;
    plans
        .par_iter()
        .map(|plan| {
            Ok(PlanResult {
                plan: plan.clone(),
                drop: drop_from(net, plan, base, eval, calib, opts)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Delete,
    Permute,
}

/// Drop statistics of both networks at one deletion count or complexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub family: Family,
    /// `k` for deletions, `c` for permutations.
    pub level: usize,
    pub plans: usize,
    pub common: Summary,
    pub stimulative: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestructionReport {
    pub rows: Vec<ReportRow>,
}

/// Drop summaries for deletions `k = 1..=max_k` and permutations
/// `c = 1..=max_c` on a common-trained and a stimulative-trained network.
/// Levels without any plan are omitted.
pub fn destruction_report(
    net_ct: &ResidualNet,
    net_st: &ResidualNet,
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
    max_k: usize,
    max_c: usize,
) -> Result<DestructionReport> {
    if net_ct.spec() != net_st.spec() {
        return Err(Error::Incompatible {
            expected: net_ct.spec().to_string(),
            found: net_st.spec().to_string(),
        });
    }
    let spec = net_ct.spec();
    let mut levels = Vec::new();
    for k in 1..=max_k {
        levels.push((Family::Delete, k, enumerate_deletions(spec, k)?));
    }
    for c in 1..=max_c {
        levels.push((Family::Permute, c, enumerate_permutations(spec, c)?));
    }
    let mut rows = Vec::new();
    for (family, level, plans) in levels {
        if plans.is_empty() {
            continue;
        }
        let drops = |net| -> Result<Summary> {
            let r = evaluate_plans(net, &plans, eval, calib, opts)?;
            let d: Vec<f64> = r.iter().map(|r| r.drop).collect();
            Ok(Summary::of(&d).expect("non-empty"))
        };
        rows.push(ReportRow {
            family,
            level,
            plans: plans.len(),
            common: drops(net_ct)?,
            stimulative: drops(net_st)?,
        });
    }
    Ok(DestructionReport { rows })
}

/// One JSON object per line.
pub fn plans_to_jsonl(plans: &[DestructionPlan]) -> String {
    plans
        .iter()
        .map(|p| serde_json::to_string(p).expect("plans serialize") + "\n")
        .collect()
}

/// Reads a plan file, skipping blank lines and `#` comments, and validates
/// each plan against `spec`.
pub fn read_plans(path: &Path, spec: &NetworkSpec) -> Result<Vec<DestructionPlan>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut plans = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let plan: DestructionPlan = serde_json::from_str(t).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        plan.validate(spec).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        plans.push(plan);
    }
    Ok(plans)
}

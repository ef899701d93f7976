//! Match-action stage budget of the scheduling data plane.

use thiserror::Error;

use super::SchedulingPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MinLayout {
    /// Pairwise reduction tree, several comparisons per stage.
    Tree,
    /// One comparison per stage.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineBudget {
    pub max_stages: usize,
    pub comparisons_per_stage: usize,
    pub reads_per_stage: usize,
    pub layout: MinLayout,
}

impl Default for PipelineBudget {
    fn default() -> Self {
        PipelineBudget { max_stages: 12, comparisons_per_stage: 8, reads_per_stage: 4, layout: MinLayout::Tree }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("policy needs {required} pipeline stages but only {max} are available")]
    ExceedsBudget { required: usize, max: usize },
    #[error("pipeline must allow at least one comparison and one read per stage")]
    EmptyStage,
}

/// Stages to reduce `candidates` values to their minimum with a pairwise tree.
pub fn tree_stages(candidates: usize, comparisons_per_stage: usize) -> usize {
    let mut cur = candidates;
    let mut stages = 0;
    while cur > 1 {
        let comparisons = cur / 2;
        stages += comparisons.div_ceil(comparisons_per_stage);
        cur = cur.div_ceil(2);
    }
    stages
}

fn min_stages(candidates: usize, budget: &PipelineBudget) -> usize {
    match budget.layout {
        MinLayout::Tree => tree_stages(candidates, budget.comparisons_per_stage),
        MinLayout::Linear => candidates,
    }
}

/// Pipeline stages `policy` needs over `servers` servers; rejects policies
/// that exceed the stage budget.
pub fn stage_cost(policy: &SchedulingPolicy, servers: usize, budget: &PipelineBudget) -> Result<usize, PipelineError> {
    if budget.comparisons_per_stage == 0 || budget.reads_per_stage == 0 {
        return Err(PipelineError::EmptyStage);
    }
    let required = match *policy {
        SchedulingPolicy::HashRandom | SchedulingPolicy::Random | SchedulingPolicy::RoundRobin => 1,
        SchedulingPolicy::Shortest | SchedulingPolicy::Jbsq { .. } => min_stages(servers, budget),
        SchedulingPolicy::Sampling { k } => k.div_ceil(budget.reads_per_stage) + min_stages(k, budget),
    };
    if required > budget.max_stages {
        return Err(PipelineError::ExceedsBudget { required, max: budget.max_stages });
    }
    Ok(required)
}

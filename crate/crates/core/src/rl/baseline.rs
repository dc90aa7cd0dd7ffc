//! Random pruning baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::env::{pruned_summary, TreeBuilder};
use crate::error::RlError;
use crate::indicators::compute_indicators;
use crate::pruning::{ActionId, FilteringTree, MIN_TREE_NODES, NUM_ACTIONS};
use crate::trace::IncidentCase;

/// Grows a tree from uniformly drawn legal actions until the pruned graph
/// has at most `node_budget` nodes, the tree is complete, or the length cap
/// is reached.
pub fn random_pruning_baseline(case: &IncidentCase, node_budget: usize, seed: u64) -> Result<FilteringTree, RlError> {
    if node_budget == 0 {
        return Err(RlError::BadBudget);
    }
    let inds = compute_indicators(&case.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = TreeBuilder::new();
    while !builder.is_done() {
        let mask = builder.structural_mask();
        let legal: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| mask[a]).collect();
        builder.place(ActionId(legal[rng.random_range(0..legal.len())] as u8))?;
        if builder.len() >= MIN_TREE_NODES {
            let (summary, _) = pruned_summary(&builder.tree(), &case.graph, &inds)?;
            if summary.nodes <= node_budget {
                break;
            }
        }
    }
    let tree = builder.tree();
    tree.validate()?;
    Ok(tree)
}

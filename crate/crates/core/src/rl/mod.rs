//! Learning filtering trees: environment, cascade policy, training loop and
//! the random baseline.

mod baseline;
mod env;
mod policy;
mod ppo;

pub use baseline::random_pruning_baseline;
pub use env::{
    complexity_reward, constrained_mask, evaluate_policy, force_probability, legal_action_mask, pruned_summary,
    rca_reward, ActionMask, Environment, EpisodeState, RewardConfig, Slot, SlotSide, StepOutcome, SummaryFeatures,
    TreeBuilder, PAD_TOKEN, SEQ_LEN,
};
pub use policy::{cascade_log_probs, cascade_sample, FilterOutMode, PolicyConfig, PolicyModel, StateFeatures, StoredTensor, N_EXPAND};
pub use ppo::{
    greedy_tree, train_ppo, train_ppo_from, EpisodeLog, PolicyFile, TrainConfig, TrainOutcome, POLICY_FILE_VERSION,
};

//! Actor-critic training with a KL-penalised importance-weighted objective.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{constrained_mask, legal_action_mask, ActionMask, Environment, RewardConfig};
use super::policy::{sample_from_log_probs, FilterOutMode, PolicyConfig, PolicyModel, StateFeatures, StoredTensor, N_EXPAND};
use crate::causal::{RcaConfig, ShapleyConfig};
use crate::error::RlError;
use crate::pruning::{ActionId, FilteringTree, NUM_ACTIONS};
use crate::trace::IncidentCase;

pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kl_weight: f64,
    pub discount: f64,
    pub episodes: usize,
    pub batch_episodes: usize,
    pub update_epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Base of the FilterOut forcing probability `base^(episode + 1)`.
    pub force_base: f64,
    /// Leading episodes that pick uniformly among legal actions.
    pub uniform_episodes: usize,
    pub rca: RcaConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            beta: 1.0,
            kl_weight: 0.5,
            discount: 1.0,
            episodes: 120,
            batch_episodes: 8,
            update_epochs: 4,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            force_base: 0.8,
            uniform_episodes: 5,
            rca: RcaConfig {
                shapley: ShapleyConfig { n_samples: 500, permutations: 32, ..ShapleyConfig::default() },
                ..RcaConfig::default()
            },
            policy: PolicyConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn reward(&self) -> RewardConfig {
        RewardConfig { alpha: self.alpha, beta: self.beta, rca: self.rca }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must be in (0, 1]");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be finite and non-negative");
        }
        if self.batch_episodes == 0 || self.update_epochs == 0 {
            return bad("batch_episodes and update_epochs must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.force_base) {
            return bad("force_base must be in [0, 1]");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("reward weights must be finite");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    /// `alpha · Σ_t r_com`, averaged over cases.
    pub r_com: f64,
    pub r_rca: f64,
    pub tree_size: usize,
}

struct Transition {
    feats: StateFeatures,
    mask: ActionMask,
    action: ActionId,
    lp_old: [f64; NUM_ACTIONS],
    reward: f64,
    value: f64,
    done: bool,
}

/// Serialized policy with enough state to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub version: u32,
    pub train_config: TrainConfig,
    pub tensors: BTreeMap<String, StoredTensor>,
    pub reward_scale: Option<f64>,
    pub episodes_done: usize,
    pub best_tree: Option<FilteringTree>,
    pub best_reward: Option<f64>,
}

impl PolicyFile {
    pub fn check(&self) -> Result<(), RlError> {
        if self.version != POLICY_FILE_VERSION {
            return Err(RlError::PolicyFile(format!("unsupported version {}", self.version)));
        }
        if let Some(t) = &self.best_tree {
            t.validate()?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<PolicyModel, RlError> {
        self.check()?;
        PolicyModel::import(self.train_config.policy, &self.tensors)
    }
}

pub struct TrainOutcome {
    pub policy: PolicyModel,
    pub best_tree: FilteringTree,
    pub best_reward: f64,
    pub history: Vec<EpisodeLog>,
    pub reward_scale: f64,
    pub episodes_done: usize,
}

impl TrainOutcome {
    pub fn to_file(&self, cfg: &TrainConfig) -> Result<PolicyFile, RlError> {
        Ok(PolicyFile {
            version: POLICY_FILE_VERSION,
            train_config: *cfg,
            tensors: self.policy.export()?,
            reward_scale: Some(self.reward_scale),
            episodes_done: self.episodes_done,
            best_tree: Some(self.best_tree.clone()),
            best_reward: Some(self.best_reward),
        })
    }
}

fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?
}

fn finite(t: &Tensor, what: &str, episode: usize) -> Result<f32, RlError> {
    let v = t.to_dtype(DType::F32)?.to_vec0::<f32>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(RlError::Divergence { episode, detail: format!("{what} = {v}") })
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    policy: PolicyModel,
    actor_opt: AdamW,
    critic_opt: AdamW,
    reward_scale: Option<f64>,
}

impl Trainer<'_> {
    fn run_episode<R: Rng>(
        &self,
        env: &mut Environment,
        episode: usize,
        rng: &mut R,
    ) -> Result<(Vec<Transition>, FilteringTree, EpisodeLog), RlError> {
        let mut state = env.reset(episode);
        let mut out = Vec::new();
        let mut r_com = 0.0;
        while !state.done() {
            let mask = constrained_mask(&state, self.cfg.force_base, rng);
            let lp = self.policy.log_probs(&state, &mask)?;
            let action = if episode < self.cfg.uniform_episodes {
                let legal: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| mask[a]).collect();
                ActionId(legal[rng.random_range(0..legal.len())] as u8)
            } else {
                sample_from_log_probs(&lp, &mask, rng)?
            };
            let value = self.policy.value(&state)?;
            let feats = StateFeatures::from_state(&state);
            let step = env.step(&state, action)?;
            let reward = self.cfg.alpha * step.r_com;
            r_com += reward;
            out.push(Transition { feats, mask, action, lp_old: lp, reward, value, done: step.done });
            state = step.state;
        }
        let tree = state.builder.tree();
        tree.validate()?;
        let r_rca = env.rca_reward(&tree)?;
        out.last_mut().expect("an episode places at least one node").reward += self.cfg.beta * r_rca;
        let log = EpisodeLog {
            episode,
            reward: r_com + self.cfg.beta * r_rca,
            r_com,
            r_rca,
            tree_size: tree.len(),
        };
        Ok((out, tree, log))
    }

    fn update(&mut self, episodes: &[Vec<Transition>], episode: usize) -> Result<(), RlError> {
        let returns: Vec<f64> = episodes.iter().map(|e| e.iter().map(|t| t.reward).sum()).collect();
        let scale = *self.reward_scale.get_or_insert_with(|| {
            let m = returns.iter().sum::<f64>() / returns.len() as f64;
            let sd = (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / returns.len() as f64).sqrt();
            sd.max(m.abs()).max(1.0)
        });

        let mut targets = Vec::new();
        let mut advs = Vec::new();
        for ep in episodes {
            for (i, t) in ep.iter().enumerate() {
                let next = if t.done { 0.0 } else { ep.get(i + 1).map_or(0.0, |n| n.value) };
                let target = t.reward / scale + self.cfg.discount * next;
                targets.push(target as f32);
                advs.push(target - t.value);
            }
        }
        let n = advs.len();
        let mean = advs.iter().sum::<f64>() / n as f64;
        let sd = (advs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let advs: Vec<f32> = advs.iter().map(|a| ((a - mean) / sd.max(1e-8)) as f32).collect();

        let flat: Vec<&Transition> = episodes.iter().flatten().collect();
        let feats: Vec<StateFeatures> = flat.iter().map(|t| t.feats.clone()).collect();
        let mut expand_mask = Vec::with_capacity(n * N_EXPAND);
        let mut free = Vec::with_capacity(n);
        let mut onehot = vec![0f32; n * NUM_ACTIONS];
        let mut logp_old = Vec::with_capacity(n);
        let mut p_old = Vec::with_capacity(n * NUM_ACTIONS);
        let mut neg_entropy = Vec::with_capacity(n);
        for (i, t) in flat.iter().enumerate() {
            expand_mask.extend(t.mask[..N_EXPAND].iter().map(|m| if *m { 0f32 } else { -1e9 }));
            free.push(if FilterOutMode::from_mask(&t.mask)? == FilterOutMode::Free { 1f32 } else { 0.0 });
            onehot[i * NUM_ACTIONS + t.action.index()] = 1.0;
            logp_old.push(t.lp_old[t.action.index()] as f32);
            let mut h = 0.0;
            for &lp in &t.lp_old {
                let p = if lp.is_finite() { lp.exp() } else { 0.0 };
                p_old.push(p as f32);
                if p > 0.0 {
                    h += p * lp;
                }
            }
            neg_entropy.push(h as f32);
        }
        let dev = candle_core::Device::Cpu;
        let expand_mask = Tensor::from_vec(expand_mask, (n, N_EXPAND), &dev)?;
        let free = Tensor::from_vec(free, n, &dev)?;
        let onehot = Tensor::from_vec(onehot, (n, NUM_ACTIONS), &dev)?;
        let logp_old = Tensor::from_vec(logp_old, n, &dev)?;
        let p_old = Tensor::from_vec(p_old, (n, NUM_ACTIONS), &dev)?;
        let neg_entropy = Tensor::from_vec(neg_entropy, n, &dev)?;
        let advs = Tensor::from_vec(advs, n, &dev)?;
        let targets = Tensor::from_vec(targets, n, &dev)?;

        for _ in 0..self.cfg.update_epochs {
            let out = self.policy.actor(&feats)?;
            let lsm = candle_nn::ops::log_softmax(&(out.action_logits + &expand_mask)?, D::Minus1)?;
            let log_fo = softplus(&out.fo_logit.neg()?)?.neg()?;
            let log_rest = softplus(&out.fo_logit)?.neg()?;
            let expand = lsm.broadcast_add(&(&free * log_rest)?.unsqueeze(1)?)?;
            let all = Tensor::cat(&[expand, (&free * log_fo)?.unsqueeze(1)?], 1)?;
            let logp = (&all * &onehot)?.sum(1)?;
            let ratio = (logp - &logp_old)?.exp()?;
            let kl = (&neg_entropy - (&p_old * &all)?.sum(1)?)?;
            let surrogate = (ratio * &advs)?.mean_all()?;
            let loss = ((kl.mean_all()? * self.cfg.kl_weight)? - surrogate)?;
            finite(&loss, "actor loss", episode)?;
            self.actor_opt.backward_step(&loss)?;

            let v = self.policy.critic(&feats)?;
            let closs = (v - &targets)?.sqr()?.mean_all()?;
            finite(&closs, "critic loss", episode)?;
            self.critic_opt.backward_step(&closs)?;
        }
        Ok(())
    }
}

/// Greedy rollout: most probable legal action at each slot, no forcing.
pub fn greedy_tree(policy: &PolicyModel, env: &Environment) -> Result<FilteringTree, RlError> {
    let mut state = env.reset(usize::MAX / 2);
    while !state.done() {
        let mask = legal_action_mask(&state);
        let a = policy.greedy(&state, &mask)?;
        state = env.step(&state, a)?.state;
    }
    Ok(state.builder.tree())
}

pub fn train_ppo(cases: &[IncidentCase], cfg: &TrainConfig) -> Result<TrainOutcome, RlError> {
    train_ppo_from(cases, cfg, None)
}

/// Trains for `cfg.episodes` further episodes, optionally continuing from a
/// saved policy.
pub fn train_ppo_from(cases: &[IncidentCase], cfg: &TrainConfig, resume: Option<&PolicyFile>) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    let mut env = Environment::new(cases, cfg.reward())?;
    let (policy, start, reward_scale, mut best) = match resume {
        Some(f) => (
            f.model()?,
            f.episodes_done,
            f.reward_scale,
            f.best_tree.clone().zip(f.best_reward),
        ),
        None => (PolicyModel::new(cfg.policy, cfg.seed)?, 0, None, None),
    };
    let adam = |lr| ParamsAdamW { lr, weight_decay: 0.0, ..ParamsAdamW::default() };
    let mut trainer = Trainer {
        cfg,
        actor_opt: AdamW::new(policy.actor_vars(), adam(cfg.actor_lr))?,
        critic_opt: AdamW::new(policy.critic_vars(), adam(cfg.critic_lr))?,
        policy,
        reward_scale,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (start as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let end = start + cfg.episodes;
    let mut history = Vec::with_capacity(cfg.episodes);
    let mut episode = start;
    while episode < end {
        let mut batch = Vec::new();
        while batch.len() < cfg.batch_episodes && episode < end {
            let (transitions, tree, log) = trainer.run_episode(&mut env, episode, &mut rng)?;
            if best.as_ref().is_none_or(|(_, r)| log.reward > *r) {
                best = Some((tree, log.reward));
            }
            log::debug!(
                "episode {}: reward {:.4} (complexity {:.4}, rca {:.4}), {} nodes",
                log.episode,
                log.reward,
                log.r_com,
                log.r_rca,
                log.tree_size
            );
            history.push(log);
            batch.push(transitions);
            episode += 1;
        }
        trainer.update(&batch, episode)?;
    }

    let greedy = greedy_tree(&trainer.policy, &env)?;
    if greedy.validate().is_ok() {
        let reward = env.evaluate(&greedy)?;
        if best.as_ref().is_none_or(|(_, r)| reward > *r) {
            best = Some((greedy, reward));
        }
    }
    let (best_tree, best_reward) = best.ok_or(RlError::NoCases)?;
    Ok(TrainOutcome {
        policy: trainer.policy,
        best_tree,
        best_reward,
        history,
        reward_scale: trainer.reward_scale.unwrap_or(1.0),
        episodes_done: end,
    })
}

//! Cascade actor and critic: small pre-norm self-attention encoders over the
//! placed actions plus a query token describing the slot to fill.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::{ActionMask, EpisodeState, SlotSide, PAD_TOKEN, SEQ_LEN};
use crate::error::RlError;
use crate::pruning::{ActionId, FILTER_OUT, NUM_ACTIONS};

/// Number of non-FilterOut actions scored by the action head.
pub const N_EXPAND: usize = NUM_ACTIONS - 1;
const N_SCALARS: usize = 4;
const NO_PARENT: u32 = NUM_ACTIONS as u32;
const MASKED: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { width: 64, layers: 2, heads: 4, ff_width: 128 }
    }
}

/// Encoder inputs for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures {
    pub tokens: [u32; SEQ_LEN],
    pub parent: u32,
    pub side: u32,
    pub scalars: [f32; N_SCALARS],
}

impl StateFeatures {
    pub fn from_state(state: &EpisodeState) -> Self {
        let mut tokens = [PAD_TOKEN as u32; SEQ_LEN];
        for (t, s) in tokens.iter_mut().zip(state.tree_seq.iter()) {
            *t = u32::from(*s);
        }
        let slot = state.builder.next_slot();
        let parent = state.builder.parent_action().map_or(NO_PARENT, |a| u32::from(a.0));
        let side = match slot.map(|s| s.side) {
            None | Some(SlotSide::Root) => 0,
            Some(SlotSide::Left) => 1,
            Some(SlotSide::Right) => 2,
        };
        let g = state.graph_summary;
        let scalars = [
            ((1.0 + g.nodes).ln() / 7.0) as f32,
            ((1.0 + g.edges).ln() / 7.0) as f32,
            g.sparsity.sqrt().min(1.0) as f32,
            state.step as f32 / (SEQ_LEN - 1) as f32,
        ];
        StateFeatures { tokens, parent, side, scalars }
    }
}

/// How the FilterOut head enters the cascade for a given mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOutMode {
    /// Both FilterOut and some other action are legal.
    Free,
    /// FilterOut is the only legal action.
    Forced,
    /// FilterOut is illegal.
    Barred,
}

impl FilterOutMode {
    pub fn from_mask(mask: &ActionMask) -> Result<Self, RlError> {
        let fo = mask[FILTER_OUT.index()];
        let others = mask[..N_EXPAND].iter().any(|m| *m);
        match (fo, others) {
            (true, true) => Ok(FilterOutMode::Free),
            (true, false) => Ok(FilterOutMode::Forced),
            (false, true) => Ok(FilterOutMode::Barred),
            (false, false) => Err(RlError::AllMasked),
        }
    }
}

fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Exact masked log-probabilities of the cascade: FilterOut with
/// probability `σ(z)`, otherwise `(1 − σ(z))` times the renormalised action
/// head. Illegal actions get `-inf`.
pub fn cascade_log_probs(fo_logit: f64, action_logits: &[f32], mask: &ActionMask) -> Result<[f64; NUM_ACTIONS], RlError> {
    let mode = FilterOutMode::from_mask(mask)?;
    let mut out = [f64::NEG_INFINITY; NUM_ACTIONS];
    let (lp_fo, lp_rest) = match mode {
        FilterOutMode::Free => (log_sigmoid(fo_logit), log_sigmoid(-fo_logit)),
        FilterOutMode::Forced => (0.0, f64::NEG_INFINITY),
        FilterOutMode::Barred => (f64::NEG_INFINITY, 0.0),
    };
    out[FILTER_OUT.index()] = lp_fo;
    if mode != FilterOutMode::Forced {
        let max = (0..N_EXPAND)
            .filter(|&a| mask[a])
            .map(|a| f64::from(action_logits[a]))
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..N_EXPAND)
                .filter(|&a| mask[a])
                .map(|a| (f64::from(action_logits[a]) - max).exp())
                .sum::<f64>()
                .ln();
        for a in (0..N_EXPAND).filter(|&a| mask[a]) {
            out[a] = lp_rest + f64::from(action_logits[a]) - lse;
        }
    }
    Ok(out)
}

/// Actor and critic parameters.
pub struct PolicyModel {
    cfg: PolicyConfig,
    device: Device,
    params: BTreeMap<String, Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Actor outputs for a batch.
pub struct ActorOutput {
    /// `[B]`
    pub fo_logit: Tensor,
    /// `[B, N_EXPAND]`
    pub action_logits: Tensor,
}

struct Batch {
    tokens: Tensor,
    key_mask: Tensor,
    parent: Tensor,
    side: Tensor,
    scalars: Tensor,
    b: usize,
}

impl PolicyModel {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self, RlError> {
        if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 || cfg.layers == 0 {
            return Err(RlError::Config(format!("bad encoder shape {cfg:?}")));
        }
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let d = cfg.width;
        let mut add = |name: String, shape: &[usize], std: f64, fill: f32, rng: &mut ChaCha8Rng| -> Result<(), RlError> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(rng) as f32).collect()
            } else {
                vec![fill; n]
            };
            let t = Tensor::from_vec(data, shape, &device)?;
            params.insert(name, Var::from_tensor(&t)?);
            Ok(())
        };
        for net in ["actor", "critic"] {
            add(format!("{net}.tok_emb"), &[NUM_ACTIONS + 1, d], 0.1, 0.0, &mut rng)?;
            add(format!("{net}.pos_emb"), &[SEQ_LEN, d], 0.1, 0.0, &mut rng)?;
            add(format!("{net}.parent_emb"), &[NUM_ACTIONS + 1, d], 0.1, 0.0, &mut rng)?;
            add(format!("{net}.side_emb"), &[3, d], 0.1, 0.0, &mut rng)?;
            add(format!("{net}.scalar_w"), &[N_SCALARS, d], 1.0 / (N_SCALARS as f64).sqrt(), 0.0, &mut rng)?;
            add(format!("{net}.scalar_w_b"), &[d], 0.0, 0.0, &mut rng)?;
            for l in 0..cfg.layers {
                let p = format!("{net}.layer{l}");
                for ln in ["ln1", "ln2"] {
                    add(format!("{p}.{ln}.g"), &[d], 0.0, 1.0, &mut rng)?;
                    add(format!("{p}.{ln}.b"), &[d], 0.0, 0.0, &mut rng)?;
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    add(format!("{p}.{w}"), &[d, d], 1.0 / (d as f64).sqrt(), 0.0, &mut rng)?;
                    add(format!("{p}.{w}_b"), &[d], 0.0, 0.0, &mut rng)?;
                }
                add(format!("{p}.ff1"), &[d, cfg.ff_width], 1.0 / (d as f64).sqrt(), 0.0, &mut rng)?;
                add(format!("{p}.ff1_b"), &[cfg.ff_width], 0.0, 0.0, &mut rng)?;
                add(format!("{p}.ff2"), &[cfg.ff_width, d], 1.0 / (cfg.ff_width as f64).sqrt(), 0.0, &mut rng)?;
                add(format!("{p}.ff2_b"), &[d], 0.0, 0.0, &mut rng)?;
            }
            add(format!("{net}.ln_f.g"), &[d], 0.0, 1.0, &mut rng)?;
            add(format!("{net}.ln_f.b"), &[d], 0.0, 0.0, &mut rng)?;
        }
        // Zero heads: a fresh actor is uniform over the action head with
        // P(FilterOut) = 0.5, and a fresh critic predicts 0.
        add("actor.fo_head".into(), &[d, 1], 0.0, 0.0, &mut rng)?;
        add("actor.fo_head_b".into(), &[1], 0.0, 0.0, &mut rng)?;
        add("actor.act_head".into(), &[d, N_EXPAND], 0.0, 0.0, &mut rng)?;
        add("actor.act_head_b".into(), &[N_EXPAND], 0.0, 0.0, &mut rng)?;
        add("critic.v_head".into(), &[d, 1], 0.0, 0.0, &mut rng)?;
        add("critic.v_head_b".into(), &[1], 0.0, 0.0, &mut rng)?;
        Ok(PolicyModel { cfg, device, params })
    }

    pub fn config(&self) -> PolicyConfig {
        self.cfg
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is created in new()"))
            .as_tensor()
    }

    pub fn actor_vars(&self) -> Vec<Var> {
        self.params.iter().filter(|(k, _)| k.starts_with("actor.")).map(|(_, v)| v.clone()).collect()
    }

    pub fn critic_vars(&self) -> Vec<Var> {
        self.params.iter().filter(|(k, _)| k.starts_with("critic.")).map(|(_, v)| v.clone()).collect()
    }

    pub fn export(&self) -> Result<BTreeMap<String, StoredTensor>, RlError> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            let t = v.as_tensor();
            out.insert(
                k.clone(),
                StoredTensor { shape: t.dims().to_vec(), data: t.flatten_all()?.to_vec1::<f32>()? },
            );
        }
        Ok(out)
    }

    pub fn import(cfg: PolicyConfig, stored: &BTreeMap<String, StoredTensor>) -> Result<Self, RlError> {
        let model = PolicyModel::new(cfg, 0)?;
        if stored.len() != model.params.len() {
            return Err(RlError::PolicyFile(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (k, var) in &model.params {
            let s = stored.get(k).ok_or_else(|| RlError::PolicyFile(format!("missing tensor {k}")))?;
            if s.shape != var.dims() || s.data.len() != s.shape.iter().product::<usize>() {
                return Err(RlError::PolicyFile(format!("tensor {k} has shape {:?}", s.shape)));
            }
            if s.data.iter().any(|x| !x.is_finite()) {
                return Err(RlError::PolicyFile(format!("tensor {k} has non-finite values")));
            }
            var.set(&Tensor::from_vec(s.data.clone(), s.shape.as_slice(), &model.device)?)?;
        }
        Ok(model)
    }

    fn batch(&self, feats: &[StateFeatures]) -> Result<Batch, RlError> {
        let b = feats.len();
        let mut tokens = Vec::with_capacity(b * SEQ_LEN);
        let mut key_mask = Vec::with_capacity(b * (SEQ_LEN + 1));
        for f in feats {
            tokens.extend_from_slice(&f.tokens);
            key_mask.push(0.0f32);
            key_mask.extend(f.tokens.iter().map(|&t| if t == PAD_TOKEN as u32 { MASKED } else { 0.0 }));
        }
        let dev = &self.device;
        Ok(Batch {
            tokens: Tensor::from_vec(tokens, b * SEQ_LEN, dev)?,
            key_mask: Tensor::from_vec(key_mask, (b, 1, 1, SEQ_LEN + 1), dev)?,
            parent: Tensor::from_vec(feats.iter().map(|f| f.parent).collect::<Vec<_>>(), b, dev)?,
            side: Tensor::from_vec(feats.iter().map(|f| f.side).collect::<Vec<_>>(), b, dev)?,
            scalars: Tensor::from_vec(feats.iter().flat_map(|f| f.scalars).collect::<Vec<_>>(), (b, N_SCALARS), dev)?,
            b,
        })
    }

    fn linear(&self, x: &Tensor, w: &str) -> Result<Tensor, RlError> {
        Ok(x.broadcast_matmul(self.p(w))?.broadcast_add(self.p(&format!("{w}_b")))?)
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor, RlError> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(self.p(&format!("{prefix}.g")))?.broadcast_add(self.p(&format!("{prefix}.b")))?)
    }

    /// Pooled query-token representation `[B, width]`.
    fn encode(&self, net: &str, batch: &Batch) -> Result<Tensor, RlError> {
        let (b, d, h) = (batch.b, self.cfg.width, self.cfg.heads);
        let dh = d / h;
        let t = SEQ_LEN + 1;
        let tok = self
            .p(&format!("{net}.tok_emb"))
            .index_select(&batch.tokens, 0)?
            .reshape((b, SEQ_LEN, d))?
            .broadcast_add(self.p(&format!("{net}.pos_emb")))?;
        let query = (self.p(&format!("{net}.parent_emb")).index_select(&batch.parent, 0)?
            + self.p(&format!("{net}.side_emb")).index_select(&batch.side, 0)?)?;
        let query = (query + self.linear(&batch.scalars, &format!("{net}.scalar_w"))?)?;
        let mut x = Tensor::cat(&[query.unsqueeze(1)?, tok], 1)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.cfg.layers {
            let p = format!("{net}.layer{l}");
            let hn = self.layer_norm(&x, &format!("{p}.ln1"))?;
            let split = |y: Tensor| -> Result<Tensor, RlError> {
                Ok(y.reshape((b, t, h, dh))?.transpose(1, 2)?.contiguous()?)
            };
            let q = split(self.linear(&hn, &format!("{p}.wq"))?)?;
            let k = split(self.linear(&hn, &format!("{p}.wk"))?)?;
            let v = split(self.linear(&hn, &format!("{p}.wv"))?)?;
            let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&batch.key_mask)?;
            let att = candle_nn::ops::softmax(&att, D::Minus1)?;
            let o = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
            x = (x + self.linear(&o, &format!("{p}.wo"))?)?;
            let hn = self.layer_norm(&x, &format!("{p}.ln2"))?;
            let f = self.linear(&self.linear(&hn, &format!("{p}.ff1"))?.relu()?, &format!("{p}.ff2"))?;
            x = (x + f)?;
        }
        let pooled = x.narrow(1, 0, 1)?.squeeze(1)?;
        self.layer_norm(&pooled, &format!("{net}.ln_f"))
    }

    pub fn actor(&self, feats: &[StateFeatures]) -> Result<ActorOutput, RlError> {
        let batch = self.batch(feats)?;
        let hn = self.encode("actor", &batch)?;
        Ok(ActorOutput {
            fo_logit: self.linear(&hn, "actor.fo_head")?.squeeze(1)?,
            action_logits: self.linear(&hn, "actor.act_head")?,
        })
    }

    /// `[B]`
    pub fn critic(&self, feats: &[StateFeatures]) -> Result<Tensor, RlError> {
        let batch = self.batch(feats)?;
        let hn = self.encode("critic", &batch)?;
        Ok(self.linear(&hn, "critic.v_head")?.squeeze(1)?)
    }

    /// Masked cascade log-probabilities for a single state.
    pub fn log_probs(&self, state: &EpisodeState, mask: &ActionMask) -> Result<[f64; NUM_ACTIONS], RlError> {
        let out = self.actor(&[StateFeatures::from_state(state)])?;
        let z = out.fo_logit.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        let logits = out.action_logits.squeeze(0)?.to_vec1::<f32>()?;
        let lp = cascade_log_probs(z, &logits, mask)?;
        if lp.iter().any(|x| x.is_nan()) {
            return Err(RlError::Divergence { episode: state.episode, detail: "NaN action probability".into() });
        }
        Ok(lp)
    }

    pub fn value(&self, state: &EpisodeState) -> Result<f64, RlError> {
        let v = self.critic(&[StateFeatures::from_state(state)])?;
        Ok(v.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Most probable legal action.
    pub fn greedy(&self, state: &EpisodeState, mask: &ActionMask) -> Result<ActionId, RlError> {
        let lp = self.log_probs(state, mask)?;
        let best = (0..NUM_ACTIONS)
            .filter(|&a| mask[a])
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .ok_or(RlError::AllMasked)?;
        Ok(ActionId(best as u8))
    }
}

/// Samples the FilterOut head first and, if it declines, the renormalised
/// action head. Returns the action and its exact log-probability.
pub fn cascade_sample<R: Rng + ?Sized>(
    policy: &PolicyModel,
    state: &EpisodeState,
    mask: &ActionMask,
    rng: &mut R,
) -> Result<(ActionId, f64), RlError> {
    let lp = policy.log_probs(state, mask)?;
    let action = sample_from_log_probs(&lp, mask, rng)?;
    Ok((action, lp[action.index()]))
}

pub(crate) fn sample_from_log_probs<R: Rng + ?Sized>(
    lp: &[f64; NUM_ACTIONS],
    mask: &ActionMask,
    rng: &mut R,
) -> Result<ActionId, RlError> {
    let fo = FILTER_OUT.index();
    match FilterOutMode::from_mask(mask)? {
        FilterOutMode::Forced => return Ok(FILTER_OUT),
        FilterOutMode::Free => {
            if rng.random::<f64>() < lp[fo].exp() {
                return Ok(FILTER_OUT);
            }
        }
        FilterOutMode::Barred => {}
    }
    let legal: Vec<usize> = (0..N_EXPAND).filter(|&a| mask[a]).collect();
    let max = legal.iter().map(|&a| lp[a]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = legal.iter().map(|&a| (lp[a] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&a, w) in legal.iter().zip(&weights) {
        if u < *w {
            return Ok(ActionId(a as u8));
        }
        u -= w;
    }
    Ok(ActionId(*legal.last().expect("mask has a legal expansion") as u8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::env::{SummaryFeatures, TreeBuilder};

    fn fresh_state() -> EpisodeState {
        EpisodeState {
            tree_seq: [PAD_TOKEN; SEQ_LEN],
            graph_summary: SummaryFeatures { nodes: 100.0, edges: 150.0, sparsity: 0.015 },
            step: 0,
            episode: 0,
            builder: TreeBuilder::new(),
        }
    }

    #[test]
    fn log_probs_normalise_over_legal_set() {
        let logits: Vec<f32> = (0..N_EXPAND).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let masks = {
            let mut free = [true; NUM_ACTIONS];
            free[4] = false;
            let mut barred = [true; NUM_ACTIONS];
            barred[FILTER_OUT.index()] = false;
            let mut forced = [false; NUM_ACTIONS];
            forced[FILTER_OUT.index()] = true;
            [free, barred, forced]
        };
        for mask in masks {
            for z in [-3.0, 0.0, 2.5] {
                let lp = cascade_log_probs(z, &logits, &mask).unwrap();
                let total: f64 = lp.iter().map(|x| x.exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for a in 0..NUM_ACTIONS {
                    assert_eq!(mask[a], lp[a] > f64::NEG_INFINITY);
                }
            }
        }
        assert!(matches!(cascade_log_probs(0.0, &logits, &[false; NUM_ACTIONS]), Err(RlError::AllMasked)));
    }

    #[test]
    fn barred_filter_out_keeps_no_mass() {
        let logits = vec![0.0f32; N_EXPAND];
        let mut mask = [true; NUM_ACTIONS];
        mask[FILTER_OUT.index()] = false;
        let lp = cascade_log_probs(1.0, &logits, &mask).unwrap();
        assert!((lp[0] - (1.0 / 35.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn fresh_policy_is_uniform() {
        let policy = PolicyModel::new(PolicyConfig::default(), 1).unwrap();
        let mut s = fresh_state();
        s.builder.place(ActionId(3)).unwrap();
        s.tree_seq[0] = 3;
        s.step = 1;
        let mask = [true; NUM_ACTIONS];
        let lp = policy.log_probs(&s, &mask).unwrap();
        assert!((lp[FILTER_OUT.index()].exp() - 0.5).abs() < 1e-6);
        for p in lp.iter().take(N_EXPAND).map(|x| x.exp()) {
            assert!((p - 0.5 / 35.0).abs() < 1e-6);
        }
        assert_eq!(policy.value(&s).unwrap(), 0.0);
    }

    #[test]
    fn export_import_round_trip() {
        let a = PolicyModel::new(PolicyConfig::default(), 7).unwrap();
        let stored = a.export().unwrap();
        let b = PolicyModel::import(PolicyConfig::default(), &stored).unwrap();
        assert_eq!(b.export().unwrap(), stored);
        let mut broken = stored.clone();
        broken.remove("actor.fo_head");
        assert!(PolicyModel::import(PolicyConfig::default(), &broken).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let policy = PolicyModel::new(PolicyConfig::default(), 3).unwrap();
        let s = fresh_state();
        let mut mask = [true; NUM_ACTIONS];
        mask[FILTER_OUT.index()] = false;
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| cascade_sample(&policy, &s, &mask, &mut rng).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }
}

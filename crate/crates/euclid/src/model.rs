//! Latent world model: encoder, multi-headed dynamics, reward predictor and
//! critic, trained jointly on short sub-trajectories, plus the deterministic
//! tanh-squashed actor.
//!
//! The joint loss composes three squared-error terms over an open-loop
//! latent rollout: reward prediction, latent consistency against a target
//! encoder, and TD value regression against a target critic. Targets enter
//! the tape as constants, so the stop-gradient discipline is structural.
//! Dynamics heads share one backbone; a training step routes gradients into
//! exactly one head.

use rand::Rng;
use thiserror::Error;

use crate::nn::{
    Activation, DenseNet, GradMap, NnError, NodeId, ParamStore, Tape, TargetTracker, Tensor,
};
use crate::replay::Transition;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("head {head} out of range, model has {num_heads} heads")]
    HeadOutOfRange { head: usize, num_heads: usize },

    #[error("malformed batch: {0}")]
    MalformedBatch(String),

    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Shape configuration for the model nets.
#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub num_heads: usize,
    /// When true, encoder and dynamics are single affine layers, which makes
    /// linear systems exactly representable.
    pub linear_dynamics: bool,
}

/// Coefficients of the joint model loss.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Reward-prediction term.
    pub c1: f64,
    /// Latent-consistency term.
    pub c2: f64,
    /// Value-prediction term.
    pub c3: f64,
    pub gamma: f64,
    pub rollout_horizon: usize,
    /// Per-step geometric weight on the loss sum; 1.0 reproduces the plain
    /// unweighted sum.
    pub step_weight_decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            c1: 0.5,
            c2: 2.0,
            c3: 0.1,
            gamma: 0.99,
            rollout_horizon: 5,
            step_weight_decay: 1.0,
        }
    }
}

/// Scalar values of the loss terms, before coefficient weighting.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub total: f64,
    pub reward: f64,
    pub consistency: f64,
    pub value: f64,
}

/// Batch of aligned sub-trajectories in tensor form: per rollout step one
/// row per window.
pub struct TrajBatch {
    pub states: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub next_states: Vec<Tensor>,
    /// Optional per-step skill one-hots for skill-conditioned actors.
    pub skills: Option<Vec<Tensor>>,
}

impl TrajBatch {
    /// Build from sampled windows. `rewards[w][i]` supplies the reward for
    /// window `w` at step `i` (intrinsic during pre-training); pass `None`
    /// to take stored extrinsic rewards, which must then be present.
    pub fn from_windows(
        windows: &[&[Transition]],
        rewards: Option<&[Vec<f64>]>,
        skill_dim: Option<usize>,
    ) -> ModelResult<Self> {
        if windows.is_empty() {
            return Err(ModelError::MalformedBatch("empty window list".into()));
        }
        let steps = windows[0].len();
        if steps == 0 {
            return Err(ModelError::MalformedBatch("zero-length windows".into()));
        }
        if windows.iter().any(|w| w.len() != steps) {
            return Err(ModelError::MalformedBatch("ragged window lengths".into()));
        }
        if let Some(r) = rewards {
            if r.len() != windows.len() || r.iter().any(|row| row.len() != steps) {
                return Err(ModelError::MalformedBatch("reward table shape mismatch".into()));
            }
        }
        let batch = windows.len();
        let sdim = windows[0][0].state.len();
        let adim = windows[0][0].action.len();

        let mut out = TrajBatch {
            states: Vec::with_capacity(steps),
            actions: Vec::with_capacity(steps),
            rewards: Vec::with_capacity(steps),
            next_states: Vec::with_capacity(steps),
            skills: skill_dim.map(|_| Vec::with_capacity(steps)),
        };
        for i in 0..steps {
            let mut s = Tensor::zeros(batch, sdim);
            let mut a = Tensor::zeros(batch, adim);
            let mut r = Tensor::zeros(batch, 1);
            let mut ns = Tensor::zeros(batch, sdim);
            let mut sk = skill_dim.map(|d| Tensor::zeros(batch, d));
            for (w, window) in windows.iter().enumerate() {
                let t = &window[i];
                if t.state.len() != sdim || t.action.len() != adim {
                    return Err(ModelError::MalformedBatch(format!(
                        "inconsistent dims in window {w}"
                    )));
                }
                s.row_mut(w).copy_from_slice(&t.state);
                a.row_mut(w).copy_from_slice(&t.action);
                ns.row_mut(w).copy_from_slice(&t.next_state);
                let reward = match rewards {
                    Some(table) => table[w][i],
                    None => t.reward.ok_or_else(|| {
                        ModelError::MalformedBatch(format!(
                            "window {w} step {i} has no stored reward"
                        ))
                    })?,
                };
                r.set(w, 0, reward);
                if let Some(sk) = sk.as_mut() {
                    let skill = t.skill_id.unwrap_or(0);
                    if skill >= sk.cols() {
                        return Err(ModelError::MalformedBatch(format!(
                            "skill {skill} out of range in window {w}"
                        )));
                    }
                    sk.set(w, skill, 1.0);
                }
            }
            out.states.push(s);
            out.actions.push(a);
            out.rewards.push(r);
            out.next_states.push(ns);
            if let (Some(list), Some(sk)) = (out.skills.as_mut(), sk) {
                list.push(sk);
            }
        }
        Ok(out)
    }

    pub fn steps(&self) -> usize {
        self.states.len()
    }

    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }
}

/// Deterministic tanh-squashed policy. `extra_dims` widens the input for
/// skill conditioning; zero for plain latent-only policies.
pub struct Actor {
    net: DenseNet,
    pub store: ParamStore,
    latent_dim: usize,
    extra_dims: usize,
}

impl Actor {
    pub fn new(
        latent_dim: usize,
        extra_dims: usize,
        hidden: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let net = DenseNet::new(
            "actor",
            &[latent_dim + extra_dims, hidden, action_dim],
            Activation::Tanh,
        );
        let mut store = ParamStore::new();
        net.init(&mut store, rng);
        Actor { net, store, latent_dim, extra_dims }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn extra_dims(&self) -> usize {
        self.extra_dims
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// Action for one latent (with any skill suffix already appended).
    pub fn act(&self, input: &[f64]) -> ModelResult<Vec<f64>> {
        Ok(self.net.forward_vec(&self.store, input)?)
    }

    pub fn act_batch(&self, inputs: &Tensor) -> ModelResult<Tensor> {
        Ok(self.net.forward_batch(&self.store, inputs)?)
    }

    /// Deep copy with independent parameters, used for snapshots.
    pub fn clone_frozen(&self) -> Actor {
        Actor {
            net: self.net.clone(),
            store: self.store.clone(),
            latent_dim: self.latent_dim,
            extra_dims: self.extra_dims,
        }
    }
}

/// Diversity regularizer context for the actor loss: the ensemble's mean
/// action at each batch latent, with the surrogate's coefficient and width.
pub struct DiversityContext {
    pub mean_actions: Tensor,
    pub alpha: f64,
    pub sigma: f64,
}

pub struct WorldModel {
    dims: ModelDims,
    encoder: DenseNet,
    backbone: Option<DenseNet>,
    heads: Vec<DenseNet>,
    reward: DenseNet,
    critic: DenseNet,
    pub store: ParamStore,
    pub enc_target: TargetTracker,
    pub crit_target: TargetTracker,
}

impl WorldModel {
    pub fn new(
        dims: ModelDims,
        target_period: u64,
        target_blend: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.num_heads >= 1, "need at least one dynamics head");
        let za = dims.latent_dim + dims.action_dim;
        let (encoder, backbone, heads) = if dims.linear_dynamics {
            let encoder =
                DenseNet::new("enc", &[dims.state_dim, dims.latent_dim], Activation::Identity);
            let heads: Vec<DenseNet> = (0..dims.num_heads)
                .map(|h| {
                    DenseNet::new(&format!("head{h}"), &[za, dims.latent_dim], Activation::Identity)
                })
                .collect();
            (encoder, None, heads)
        } else {
            let encoder = DenseNet::new(
                "enc",
                &[dims.state_dim, dims.hidden, dims.latent_dim],
                Activation::Identity,
            );
            let backbone = DenseNet::new("dyn", &[za, dims.hidden], Activation::Identity);
            let heads = (0..dims.num_heads)
                .map(|h| {
                    DenseNet::new(
                        &format!("head{h}"),
                        &[dims.hidden, dims.latent_dim],
                        Activation::Identity,
                    )
                })
                .collect();
            (encoder, Some(backbone), heads)
        };
        let reward = DenseNet::new("rew", &[za, dims.hidden, 1], Activation::Identity);
        let critic = DenseNet::new("crit", &[za, dims.hidden, 1], Activation::Identity);

        let mut store = ParamStore::new();
        encoder.init(&mut store, rng);
        if let Some(b) = &backbone {
            b.init(&mut store, rng);
        }
        for h in &heads {
            h.init(&mut store, rng);
        }
        reward.init(&mut store, rng);
        critic.init(&mut store, rng);

        let enc_target = TargetTracker::new(&store, &["enc."], target_period, target_blend);
        let crit_target = TargetTracker::new(&store, &["crit."], target_period, target_blend);

        WorldModel { dims, encoder, backbone, heads, reward, critic, store, enc_target, crit_target }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn check_head(&self, head: usize) -> ModelResult<()> {
        if head >= self.heads.len() {
            return Err(ModelError::HeadOutOfRange { head, num_heads: self.heads.len() });
        }
        Ok(())
    }

    pub fn encode(&self, state: &[f64]) -> ModelResult<Vec<f64>> {
        Ok(self.encoder.forward_vec(&self.store, state)?)
    }

    pub fn encode_batch(&self, states: &Tensor) -> ModelResult<Tensor> {
        Ok(self.encoder.forward_batch(&self.store, states)?)
    }

    /// Latent one-step prediction through the selected head.
    pub fn predict_next(&self, z: &[f64], a: &[f64], head: usize) -> ModelResult<Vec<f64>> {
        let za = Tensor::row_vector(&[z, a].concat());
        Ok(self.predict_next_batch(&za, head)?.data().to_vec())
    }

    /// Batched latent prediction; rows are (z | a) pairs.
    pub fn predict_next_batch(&self, za: &Tensor, head: usize) -> ModelResult<Tensor> {
        self.check_head(head)?;
        let h = match &self.backbone {
            Some(backbone) => {
                let mut pre = backbone.forward_batch(&self.store, za)?;
                for v in pre.data_mut() {
                    if *v <= 0.0 {
                        *v = v.exp() - 1.0;
                    }
                }
                pre
            }
            None => za.clone(),
        };
        Ok(self.heads[head].forward_batch(&self.store, &h)?)
    }

    pub fn predict_reward(&self, z: &[f64], a: &[f64]) -> ModelResult<f64> {
        let za = [z, a].concat();
        Ok(self.reward.forward_vec(&self.store, &za)?[0])
    }

    pub fn predict_reward_batch(&self, za: &Tensor) -> ModelResult<Tensor> {
        Ok(self.reward.forward_batch(&self.store, za)?)
    }

    pub fn q_value(&self, z: &[f64], a: &[f64]) -> ModelResult<f64> {
        let za = [z, a].concat();
        Ok(self.critic.forward_vec(&self.store, &za)?[0])
    }

    pub fn q_batch(&self, za: &Tensor) -> ModelResult<Tensor> {
        Ok(self.critic.forward_batch(&self.store, za)?)
    }

    /// Tape version of the dynamics composition.
    fn dynamics_tape(&self, tape: &mut Tape, za: NodeId, head: usize) -> ModelResult<NodeId> {
        let h = match &self.backbone {
            Some(backbone) => {
                let pre = backbone.forward_tape(tape, &self.store, za)?;
                tape.elu(pre)
            }
            None => za,
        };
        Ok(self.heads[head].forward_tape(tape, &self.store, h)?)
    }

    /// Joint loss over a batch of sub-trajectories, routed through one head.
    /// Returns the unweighted term values and the gradients of the weighted
    /// sum. Latents beyond the first step come from the model's own
    /// open-loop rollout; consistency and TD targets are constants built
    /// from the target trackers.
    pub fn model_loss(
        &self,
        weights: &LossWeights,
        batch: &TrajBatch,
        actor: &Actor,
        head: usize,
    ) -> ModelResult<(LossTerms, GradMap)> {
        self.check_head(head)?;
        if batch.steps() == 0 {
            return Err(ModelError::MalformedBatch("batch has zero steps".into()));
        }
        let mut tape = Tape::new();
        let s0 = tape.constant(batch.states[0].clone());
        let mut z = self.encoder.forward_tape(&mut tape, &self.store, s0)?;

        let mut reward_terms: Vec<(NodeId, f64)> = Vec::new();
        let mut consistency_terms: Vec<(NodeId, f64)> = Vec::new();
        let mut value_terms: Vec<(NodeId, f64)> = Vec::new();
        let mut step_weight = 1.0;

        for i in 0..batch.steps() {
            let a = tape.constant(batch.actions[i].clone());
            let za = tape.concat_cols(z, a)?;

            let r_hat = self.reward.forward_tape(&mut tape, &self.store, za)?;
            let r_target = tape.constant(batch.rewards[i].clone());
            reward_terms.push((tape.mse(r_hat, r_target)?, step_weight));

            let q_hat = self.critic.forward_tape(&mut tape, &self.store, za)?;

            let z_next = self.dynamics_tape(&mut tape, za, head)?;
            let enc_next = self.encoder.forward_batch(&self.enc_target, &batch.next_states[i])?;
            let enc_next = tape.constant(enc_next);
            consistency_terms.push((tape.mse(z_next, enc_next)?, step_weight));

            // TD target from detached values: r + gamma * Q_target(z', pi(z')).
            let z_next_value = tape.value(z_next).clone();
            let actor_input = match batch.skills.as_ref() {
                Some(skills) => concat_tensors(&z_next_value, &skills[i]),
                None => z_next_value.clone(),
            };
            let next_action = actor.act_batch(&actor_input)?;
            let za_next = concat_tensors(&z_next_value, &next_action);
            let q_next = self.critic.forward_batch(&self.crit_target, &za_next)?;
            let mut td = batch.rewards[i].clone();
            for (t, q) in td.data_mut().iter_mut().zip(q_next.data().iter()) {
                *t += weights.gamma * q;
            }
            let td = tape.constant(td);
            value_terms.push((tape.mse(q_hat, td)?, step_weight));

            z = z_next;
            step_weight *= weights.step_weight_decay;
        }

        let reward_sum = weighted_sum(&mut tape, &reward_terms)?;
        let consistency_sum = weighted_sum(&mut tape, &consistency_terms)?;
        let value_sum = weighted_sum(&mut tape, &value_terms)?;

        let terms = LossTerms {
            total: 0.0,
            reward: tape.value(reward_sum).item()?,
            consistency: tape.value(consistency_sum).item()?,
            value: tape.value(value_sum).item()?,
        };

        let wr = tape.scale(reward_sum, weights.c1);
        let wc = tape.scale(consistency_sum, weights.c2);
        let wv = tape.scale(value_sum, weights.c3);
        let partial = tape.add(wr, wc)?;
        let total = tape.add(partial, wv)?;
        let terms = LossTerms { total: tape.value(total).item()?, ..terms };

        let grads = tape.backward(total)?;
        Ok((terms, grads))
    }

    /// Deterministic-policy loss: minimize -Q(z, pi(z)) plus, when a
    /// diversity context with alpha > 0 is given, the Gaussian-surrogate
    /// divergence pulling the policy away from the ensemble mean action.
    /// Critic parameters enter frozen; only actor parameters get gradients.
    pub fn actor_loss(
        &self,
        actor: &Actor,
        latents: &Tensor,
        extra: Option<&Tensor>,
        diversity: Option<&DiversityContext>,
    ) -> ModelResult<(f64, GradMap)> {
        let mut tape = Tape::new();
        let z = tape.constant(latents.clone());
        let actor_in = match extra {
            Some(e) => {
                let en = tape.constant(e.clone());
                tape.concat_cols(z, en)?
            }
            None => z,
        };
        let action = actor.net.forward_tape(&mut tape, &actor.store, actor_in)?;
        let za = tape.concat_cols(z, action)?;
        let q = self.critic.forward_tape_frozen(&mut tape, &self.store, za)?;
        let q_mean = tape.mean_all(q);
        let mut loss = tape.scale(q_mean, -1.0);

        if let Some(ctx) = diversity {
            if ctx.alpha > 0.0 {
                let mean_ref = tape.constant(ctx.mean_actions.clone());
                let diff = tape.sub(mean_ref, action)?;
                let sq = tape.row_sum_sq(diff);
                let mean_div = tape.mean_all(sq);
                let scaled = tape.scale(mean_div, ctx.alpha / (2.0 * ctx.sigma * ctx.sigma));
                loss = tape.add(loss, scaled)?;
            }
        }

        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// One optimizer step on the model parameters plus target-tracker ticks.
    pub fn apply_gradients(&mut self, grads: &GradMap, lr: f64) -> ModelResult<()> {
        self.store.adam_step(grads, lr)?;
        self.enc_target.tick(&self.store)?;
        self.crit_target.tick(&self.store)?;
        Ok(())
    }

    /// Flatten everything (params, moments, target shadows, tick counters)
    /// into a named-tensor map under `prefix`.
    pub fn export_named(&self, prefix: &str, out: &mut std::collections::BTreeMap<String, Tensor>) {
        self.store.export_named(&format!("{prefix}model/"), out);
        for (name, value) in self.enc_target.iter() {
            out.insert(format!("{prefix}target/{name}"), value.clone());
        }
        for (name, value) in self.crit_target.iter() {
            out.insert(format!("{prefix}target/{name}"), value.clone());
        }
        out.insert(
            format!("{prefix}target/ticks"),
            Tensor::row_vector(&[self.enc_target.ticks() as f64, self.crit_target.ticks() as f64]),
        );
    }

    /// Restore from a map produced by [`WorldModel::export_named`]. Shapes
    /// must match the constructed model.
    pub fn import_named(
        &mut self,
        prefix: &str,
        named: &std::collections::BTreeMap<String, Tensor>,
    ) -> ModelResult<()> {
        let store = ParamStore::import_named(&format!("{prefix}model/"), named)?;
        for (name, value) in store.iter() {
            self.store.get(name)?.require_same_shape(value, name)?;
        }
        self.store = store;
        let target_prefix = format!("{prefix}target/");
        for (name, value) in named {
            let Some(rest) = name.strip_prefix(&target_prefix) else { continue };
            if rest == "ticks" {
                self.enc_target.set_ticks(value.get(0, 0) as u64);
                self.crit_target.set_ticks(value.get(0, 1) as u64);
            } else if rest.starts_with("enc.") {
                self.enc_target.set(rest, value.clone());
            } else if rest.starts_with("crit.") {
                self.crit_target.set(rest, value.clone());
            }
        }
        Ok(())
    }
}

fn concat_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows(), b.rows());
    let mut out = Tensor::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

/// Sum of scalar nodes with per-node weights (used for the step-discount).
fn weighted_sum(tape: &mut Tape, terms: &[(NodeId, f64)]) -> ModelResult<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(node, w) in terms {
        let node = if w == 1.0 { node } else { tape.scale(node, w) };
        acc = Some(match acc {
            None => node,
            Some(prev) => tape.add(prev, node)?,
        });
    }
    Ok(acc.expect("at least one term"))
}

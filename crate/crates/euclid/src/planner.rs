//! Sampling-based planner: iterative refinement of a Gaussian over action
//! sequences, scored by short-horizon model rewards plus a critic bootstrap
//! at the tail, with a fraction of candidates generated by the policy.
//!
//! Scoring is abstracted behind [`PlanModel`] so the refinement loop can be
//! exercised against closed-form score functions; [`ModelPlanContext`] is
//! the real implementation over a world model, actor and fixed head.

use rand::Rng;
use rand::RngCore;
use thiserror::Error;

use crate::model::{Actor, ModelError, WorldModel};
use crate::nn::Tensor;

#[derive(Error, Debug)]
pub enum PlannerError {
    #[error("bad planner config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type PlannerResult<T> = Result<T, PlannerError>;

/// Refinement hyper-parameters. Defaults are desk-scale; the reference
/// configuration uses population 512 with 12 elites, which makes the
/// policy fraction 0.05 round to 26 policy rollouts.
#[derive(Clone, Copy, Debug)]
pub struct PlannerConfig {
    pub iterations: usize,
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub policy_fraction: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub sigma_min: f64,
    pub init_sigma: f64,
    /// Std of the Gaussian jitter added to policy-rollout actions; 0 gives
    /// exact policy trajectories.
    pub policy_jitter: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            iterations: 6,
            horizon: 5,
            population: 128,
            elites: 8,
            policy_fraction: 0.05,
            temperature: 0.5,
            gamma: 0.99,
            sigma_min: 0.05,
            init_sigma: 0.5,
            policy_jitter: 0.05,
        }
    }
}

impl PlannerConfig {
    /// Number of policy-generated candidates per iteration, rounded half up.
    pub fn policy_count(&self) -> usize {
        (self.policy_fraction * self.population as f64).round() as usize
    }

    fn validate(&self) -> PlannerResult<()> {
        if self.population == 0 {
            return Err(PlannerError::BadConfig("population must be positive".into()));
        }
        if self.elites == 0 || self.elites > self.population + self.policy_count() {
            return Err(PlannerError::BadConfig(format!(
                "elites {} out of range for {} candidates",
                self.elites,
                self.population + self.policy_count()
            )));
        }
        if self.horizon == 0 {
            return Err(PlannerError::BadConfig("horizon must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(PlannerError::BadConfig("need at least one iteration".into()));
        }
        Ok(())
    }
}

/// Gaussian over action sequences: both fields are horizon x action_dim.
#[derive(Clone, Debug)]
pub struct PlanDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl PlanDistribution {
    pub fn initial(horizon: usize, action_dim: usize, init_sigma: f64) -> Self {
        PlanDistribution {
            mu: Tensor::zeros(horizon, action_dim),
            sigma: Tensor::full(horizon, action_dim, init_sigma),
        }
    }
}

/// Per-call diagnostics: best elite score and candidate count per
/// iteration, plus the unshifted final mean.
pub struct PlanTrace {
    pub iteration_best: Vec<f64>,
    pub scored: Vec<usize>,
    pub final_mu: Tensor,
}

/// What the refinement loop needs from the model side.
pub trait PlanModel {
    fn action_dim(&self) -> usize;

    /// Score each candidate action sequence (horizon x action_dim).
    fn score(&self, candidates: &[Tensor]) -> PlannerResult<Vec<f64>>;

    /// Candidate sequences generated by rolling the policy through the
    /// model, with `jitter`-std Gaussian noise folded into each action.
    fn policy_rollouts(
        &self,
        count: usize,
        horizon: usize,
        jitter: f64,
        rng: &mut dyn RngCore,
    ) -> PlannerResult<Vec<Tensor>>;

    /// Policy action at the latent reached by following `actions`; fills
    /// the tail of the warm-start mean.
    fn tail_action(&self, actions: &Tensor) -> PlannerResult<Vec<f64>>;
}

/// Importance-weighted elite update: weights exp(tau * (score - max)),
/// mean and std both weighted, std floored at `sigma_min`.
pub fn mppi_update(
    elites: &[&Tensor],
    scores: &[f64],
    tau: f64,
    sigma_min: f64,
) -> (Tensor, Tensor) {
    assert!(!elites.is_empty() && elites.len() == scores.len());
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (tau * (s - best)).exp()).collect();
    let total: f64 = weights.iter().sum();

    let rows = elites[0].rows();
    let cols = elites[0].cols();
    let mut mu = Tensor::zeros(rows, cols);
    for (e, w) in elites.iter().zip(weights.iter()) {
        for (m, a) in mu.data_mut().iter_mut().zip(e.data().iter()) {
            *m += w * a;
        }
    }
    for m in mu.data_mut() {
        *m /= total;
    }

    let mut sigma = Tensor::zeros(rows, cols);
    for (e, w) in elites.iter().zip(weights.iter()) {
        for ((s, a), m) in sigma.data_mut().iter_mut().zip(e.data().iter()).zip(mu.data().iter())
        {
            *s += w * (a - m) * (a - m);
        }
    }
    for s in sigma.data_mut() {
        *s = (*s / total).sqrt().max(sigma_min);
    }
    (mu, sigma)
}

/// One planning decision: refine the action distribution for `iterations`
/// rounds and return the first action of the final mean together with the
/// distribution to warm-start the next step (mean shifted by one, tail
/// filled with the policy action at the predicted terminal latent, std
/// reset to `init_sigma`).
pub fn plan(
    ctx: &impl PlanModel,
    config: &PlannerConfig,
    warm: Option<&PlanDistribution>,
    rng: &mut impl Rng,
) -> PlannerResult<(Vec<f64>, PlanDistribution)> {
    let (action, dist, _) = plan_traced(ctx, config, warm, rng)?;
    Ok((action, dist))
}

pub fn plan_traced(
    ctx: &impl PlanModel,
    config: &PlannerConfig,
    warm: Option<&PlanDistribution>,
    rng: &mut impl Rng,
) -> PlannerResult<(Vec<f64>, PlanDistribution, PlanTrace)> {
    config.validate()?;
    let adim = ctx.action_dim();
    let horizon = config.horizon;
    let mut dist = match warm {
        Some(w) => {
            if w.mu.shape() != (horizon, adim) {
                return Err(PlannerError::BadConfig(format!(
                    "warm start shape {:?} does not match plan shape {:?}",
                    w.mu.shape(),
                    (horizon, adim)
                )));
            }
            w.clone()
        }
        None => PlanDistribution::initial(horizon, adim, config.init_sigma),
    };

    let n_pi = config.policy_count();
    let mut trace = PlanTrace {
        iteration_best: Vec::with_capacity(config.iterations),
        scored: Vec::with_capacity(config.iterations),
        final_mu: Tensor::zeros(horizon, adim),
    };

    for _ in 0..config.iterations {
        let mut candidates: Vec<Tensor> = Vec::with_capacity(config.population + n_pi);
        for _ in 0..config.population {
            let mut c = Tensor::zeros(horizon, adim);
            for (v, (m, s)) in c
                .data_mut()
                .iter_mut()
                .zip(dist.mu.data().iter().zip(dist.sigma.data().iter()))
            {
                let eps: f64 = rand_distr::StandardNormal.sample(rng);
                *v = (m + s * eps).clamp(-1.0, 1.0);
            }
            candidates.push(c);
        }
        candidates.extend(ctx.policy_rollouts(n_pi, horizon, config.policy_jitter, rng)?);

        let scores = ctx.score(&candidates)?;
        trace.scored.push(candidates.len());

        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
        order.truncate(config.elites);
        trace
            .iteration_best
            .push(scores[order[0]]);

        let elite_refs: Vec<&Tensor> = order.iter().map(|&i| &candidates[i]).collect();
        let elite_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let (mu, sigma) =
            mppi_update(&elite_refs, &elite_scores, config.temperature, config.sigma_min);
        dist = PlanDistribution { mu, sigma };
    }

    let action = dist.mu.row(0).to_vec();
    trace.final_mu = dist.mu.clone();

    // Shift the mean one step for the next decision and refill the tail
    // with the policy's action at the predicted end of the plan.
    let tail = ctx.tail_action(&dist.mu)?;
    let mut next_mu = Tensor::zeros(horizon, adim);
    for t in 1..horizon {
        next_mu.row_mut(t - 1).copy_from_slice(dist.mu.row(t));
    }
    next_mu.row_mut(horizon - 1).copy_from_slice(&tail);
    let next = PlanDistribution {
        mu: next_mu,
        sigma: Tensor::full(horizon, adim, config.init_sigma),
    };
    Ok((action, next, trace))
}

/// Planning context over a world model: rewards for the first `horizon`
/// steps, critic bootstrap at the tail, rollout through one fixed head.
pub struct ModelPlanContext<'a> {
    pub model: &'a WorldModel,
    pub actor: &'a Actor,
    pub head: usize,
    pub gamma: f64,
    pub z0: Vec<f64>,
    /// Appended to every latent before the actor is consulted, for
    /// skill-conditioned policies.
    pub extra: Option<Vec<f64>>,
}

impl<'a> ModelPlanContext<'a> {
    fn actor_input(&self, latents: &Tensor) -> Tensor {
        match &self.extra {
            None => latents.clone(),
            Some(extra) => {
                let mut out = Tensor::zeros(latents.rows(), latents.cols() + extra.len());
                for r in 0..latents.rows() {
                    let row = out.row_mut(r);
                    row[..latents.cols()].copy_from_slice(latents.row(r));
                    row[latents.cols()..].copy_from_slice(extra);
                }
                out
            }
        }
    }

    fn tile_z0(&self, count: usize) -> Tensor {
        let mut z = Tensor::zeros(count, self.z0.len());
        for r in 0..count {
            z.row_mut(r).copy_from_slice(&self.z0);
        }
        z
    }
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

impl<'a> PlanModel for ModelPlanContext<'a> {
    fn action_dim(&self) -> usize {
        self.actor.action_dim()
    }

    fn score(&self, candidates: &[Tensor]) -> PlannerResult<Vec<f64>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let count = candidates.len();
        let horizon = candidates[0].rows();
        let adim = candidates[0].cols();
        let mut z = self.tile_z0(count);
        let mut scores = vec![0.0; count];
        let mut discount = 1.0;
        for t in 0..horizon {
            let mut a = Tensor::zeros(count, adim);
            for (r, c) in candidates.iter().enumerate() {
                a.row_mut(r).copy_from_slice(c.row(t));
            }
            let za = hcat(&z, &a);
            let r = self.model.predict_reward_batch(&za)?;
            for (s, rv) in scores.iter_mut().zip(r.data().iter()) {
                *s += discount * rv;
            }
            z = self.model.predict_next_batch(&za, self.head)?;
            discount *= self.gamma;
        }
        let tail_actions = self.actor.act_batch(&self.actor_input(&z))?;
        let q = self.model.q_batch(&hcat(&z, &tail_actions))?;
        for (s, qv) in scores.iter_mut().zip(q.data().iter()) {
            *s += discount * qv;
        }
        Ok(scores)
    }

    fn policy_rollouts(
        &self,
        count: usize,
        horizon: usize,
        jitter: f64,
        rng: &mut dyn RngCore,
    ) -> PlannerResult<Vec<Tensor>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let adim = self.action_dim();
        let mut z = self.tile_z0(count);
        let mut actions: Vec<Tensor> = vec![Tensor::zeros(horizon, adim); count];
        for t in 0..horizon {
            let mut a = self.actor.act_batch(&self.actor_input(&z))?;
            if jitter > 0.0 {
                for v in a.data_mut() {
                    let eps: f64 = rand_distr::StandardNormal.sample(rng);
                    *v = (*v + jitter * eps).clamp(-1.0, 1.0);
                }
            }
            for (r, c) in actions.iter_mut().enumerate() {
                c.row_mut(t).copy_from_slice(a.row(r));
            }
            z = self.model.predict_next_batch(&hcat(&z, &a), self.head)?;
        }
        Ok(actions)
    }

    fn tail_action(&self, actions: &Tensor) -> PlannerResult<Vec<f64>> {
        let mut z = self.z0.clone();
        for t in 0..actions.rows() {
            z = self.model.predict_next(&z, actions.row(t), self.head)?;
        }
        let mut input = z;
        if let Some(extra) = &self.extra {
            input.extend_from_slice(extra);
        }
        Ok(self.actor.act(&input)?)
    }
}

/// Score of one action sequence under the model: the reference arithmetic
/// for [`ModelPlanContext::score`], kept single-sample for auditability.
pub fn score_trajectory(
    model: &WorldModel,
    actor: &Actor,
    z0: &[f64],
    actions: &Tensor,
    head: usize,
    gamma: f64,
    extra: Option<&[f64]>,
) -> PlannerResult<f64> {
    let mut z = z0.to_vec();
    let mut score = 0.0;
    let mut discount = 1.0;
    for t in 0..actions.rows() {
        let a = actions.row(t);
        score += discount * model.predict_reward(&z, a)?;
        z = model.predict_next(&z, a, head)?;
        discount *= gamma;
    }
    let mut input = z.clone();
    if let Some(extra) = extra {
        input.extend_from_slice(extra);
    }
    let tail = actor.act(&input)?;
    score += discount * model.q_value(&z, &tail)?;
    Ok(score)
}

use rand_distr::Distribution;

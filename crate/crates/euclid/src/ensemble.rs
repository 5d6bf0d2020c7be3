//! Snapshot policy ensemble: periodic frozen copies of the live actor, the
//! average-policy divergence that regularizes actor updates, and zero-shot
//! head selection at fine-tuning start.
//!
//! Snapshots pair one-to-one with dynamics heads: the segment id stamped on
//! collected transitions is the index of the most recent snapshot, and each
//! head trains only on its own segment.

use rand::Rng;
use thiserror::Error;

use crate::env::{Env, EnvError};
use crate::model::{Actor, DiversityContext, ModelError, WorldModel};
use crate::nn::Tensor;

#[derive(Error, Debug)]
pub enum EnsembleError {
    #[error("ensemble has no snapshots yet")]
    Empty,

    #[error("snapshot {index} out of range, ensemble has {count}")]
    SnapshotOutOfRange { index: usize, count: usize },

    #[error(transparent)]
    Env(#[from] EnvError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type EnsembleResult<T> = Result<T, EnsembleError>;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_SIGMA_EXPLORE: f64 = 0.2;

/// Squared-distance Gaussian surrogate for the divergence between two
/// deterministic policies: the KL between equal-covariance Gaussians
/// centered at the two mean actions.
pub fn gaussian_divergence(mean_a: &[f64], mean_b: &[f64], sigma: f64) -> f64 {
    let gap: f64 = mean_a
        .iter()
        .zip(mean_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    gap / (2.0 * sigma * sigma)
}

/// Index of the largest return, ties broken by the lowest index. Invariant
/// under any positive rescaling of all entries.
pub fn argmax_return(returns: &[f64]) -> usize {
    let mut best = 0;
    for (i, r) in returns.iter().enumerate().skip(1) {
        if *r > returns[best] {
            best = i;
        }
    }
    best
}

pub struct PolicyEnsemble {
    snapshots: Vec<Actor>,
    num_heads: usize,
    snapshot_interval: u64,
    sigma_explore: f64,
}

impl PolicyEnsemble {
    pub fn new(num_heads: usize, snapshot_interval: u64, sigma_explore: f64) -> Self {
        assert!(num_heads >= 1, "need at least one head");
        assert!(snapshot_interval >= 1, "snapshot interval must be positive");
        PolicyEnsemble {
            snapshots: Vec::with_capacity(num_heads),
            num_heads,
            snapshot_interval,
            sigma_explore,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn sigma_explore(&self) -> f64 {
        self.sigma_explore
    }

    pub fn snapshot_interval(&self) -> u64 {
        self.snapshot_interval
    }

    /// Segment id for data collected right now: the index of the most
    /// recently added snapshot (0 before any snapshot exists, which only
    /// happens if the caller skips the t=0 snapshot).
    pub fn segment_id(&self) -> usize {
        self.snapshots.len().saturating_sub(1)
    }

    pub fn snapshot(&self, index: usize) -> EnsembleResult<&Actor> {
        self.snapshots.get(index).ok_or(EnsembleError::SnapshotOutOfRange {
            index,
            count: self.snapshots.len(),
        })
    }

    /// Freeze a copy of the live actor when the step counter crosses the
    /// schedule point t = T * h. Returns true when a snapshot was taken.
    pub fn maybe_snapshot(&mut self, t: u64, live: &Actor) -> bool {
        if self.snapshots.len() >= self.num_heads {
            return false;
        }
        if t == self.snapshot_interval * self.snapshots.len() as u64 {
            self.snapshots.push(live.clone_frozen());
            return true;
        }
        false
    }

    /// Arithmetic mean of snapshot actions at one input.
    pub fn average_action(&self, input: &[f64]) -> EnsembleResult<Vec<f64>> {
        if self.snapshots.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let mut mean = self.snapshots[0].act(input)?;
        for snap in &self.snapshots[1..] {
            for (m, a) in mean.iter_mut().zip(snap.act(input)?.iter()) {
                *m += a;
            }
        }
        let inv = 1.0 / self.snapshots.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        Ok(mean)
    }

    /// Batched mean action, one row per input row.
    pub fn average_action_batch(&self, inputs: &Tensor) -> EnsembleResult<Tensor> {
        if self.snapshots.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let mut mean = self.snapshots[0].act_batch(inputs)?;
        for snap in &self.snapshots[1..] {
            let a = snap.act_batch(inputs)?;
            mean.add_assign(&a);
        }
        let inv = 1.0 / self.snapshots.len() as f64;
        for m in mean.data_mut() {
            *m *= inv;
        }
        Ok(mean)
    }

    /// Divergence between the ensemble average and the live actor at one
    /// input, under the Gaussian surrogate.
    pub fn diversity_divergence(&self, actor: &Actor, input: &[f64]) -> EnsembleResult<f64> {
        let avg = self.average_action(input)?;
        let live = actor.act(input)?;
        Ok(gaussian_divergence(&avg, &live, self.sigma_explore))
    }

    /// Regularizer context for the actor loss on a batch of actor inputs.
    pub fn diversity_context(
        &self,
        inputs: &Tensor,
        alpha: f64,
    ) -> EnsembleResult<DiversityContext> {
        Ok(DiversityContext {
            mean_actions: self.average_action_batch(inputs)?,
            alpha,
            sigma: self.sigma_explore,
        })
    }
}

/// Zero-shot head selection: one full episode per snapshot policy acting
/// greedily through the encoder (no planning, no exploration noise), all
/// from the same initial seed; returns the argmax head and the per-head
/// episode returns. `extra` is appended to every latent for
/// skill-conditioned actors.
pub fn select_head(
    model: &WorldModel,
    ensemble: &PolicyEnsemble,
    env: &Env,
    extra: Option<&[f64]>,
    seed: u64,
) -> EnsembleResult<(usize, Vec<f64>)> {
    if ensemble.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let mut returns = Vec::with_capacity(ensemble.len());
    for h in 0..ensemble.len() {
        let policy = ensemble.snapshot(h)?;
        let mut e = env.clone();
        let mut state = e.reset(seed);
        let mut ep_return = 0.0;
        loop {
            let mut z = model.encode(&state)?;
            if let Some(extra) = extra {
                z.extend_from_slice(extra);
            }
            let action = policy.act(&z)?;
            let step = e.step(&action)?;
            ep_return += step.reward.unwrap_or(0.0);
            state = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(ep_return);
    }
    Ok((argmax_return(&returns), returns))
}

/// Zero-mean Gaussian exploration noise added to PT actions, clamped back
/// into the action box.
pub fn explore_noise(action: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for a in action.iter_mut() {
        *a = (*a + normal.sample(rng)).clamp(-1.0, 1.0);
    }
}

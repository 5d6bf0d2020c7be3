//! Task-agnostic exploration rewards over encoder latents.
//!
//! Three interchangeable backbones: ensemble disagreement (epistemic
//! novelty), APT (particle-based entropy over a reference batch), and DIAYN
//! (skill discrimination). Each consumes latents produced by the world-model
//! encoder; none of them propagates gradients back into it.

use rand::Rng;
use thiserror::Error;

use crate::nn::{Activation, DenseNet, GradMap, NnError, ParamStore, Tape, Tensor};

#[derive(Error, Debug)]
pub enum IntrinsicError {
    #[error("APT needs at least {k} reference latents, got {got}")]
    InsufficientReferences { k: usize, got: usize },

    #[error("unknown explorer `{0}`")]
    UnknownExplorer(String),

    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type IntrinsicResult<T> = Result<T, IntrinsicError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplorerKind {
    Disagreement,
    Apt,
    Diayn,
}

impl ExplorerKind {
    pub fn parse(name: &str) -> IntrinsicResult<Self> {
        match name {
            "disagreement" => Ok(ExplorerKind::Disagreement),
            "apt" => Ok(ExplorerKind::Apt),
            "diayn" => Ok(ExplorerKind::Diayn),
            other => Err(IntrinsicError::UnknownExplorer(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExplorerKind::Disagreement => "disagreement",
            ExplorerKind::Apt => "apt",
            ExplorerKind::Diayn => "diayn",
        }
    }
}

/// Ensemble of independent forward models g_i(z, a) -> z'. Novelty is the
/// spread of their predictions.
pub struct DisagreementEnsemble {
    nets: Vec<DenseNet>,
    stores: Vec<ParamStore>,
}

impl DisagreementEnsemble {
    pub const DEFAULT_MEMBERS: usize = 5;

    pub fn new(
        members: usize,
        latent_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(members >= 2, "variance needs at least two members");
        let mut nets = Vec::new();
        let mut stores = Vec::new();
        for i in 0..members {
            let net = DenseNet::new(
                &format!("g{i}"),
                &[latent_dim + action_dim, hidden, latent_dim],
                Activation::Identity,
            );
            let mut store = ParamStore::new();
            net.init(&mut store, rng);
            nets.push(net);
            stores.push(store);
        }
        DisagreementEnsemble { nets, stores }
    }

    pub fn members(&self) -> usize {
        self.nets.len()
    }

    pub fn store(&self, member: usize) -> &ParamStore {
        &self.stores[member]
    }

    pub fn store_mut(&mut self, member: usize) -> &mut ParamStore {
        &mut self.stores[member]
    }

    /// Per-dimension population variance of the member predictions, averaged
    /// over latent dimensions.
    pub fn reward(&self, z: &[f64], a: &[f64]) -> IntrinsicResult<f64> {
        let input: Vec<f64> = z.iter().chain(a.iter()).copied().collect();
        let preds: Vec<Vec<f64>> = self
            .nets
            .iter()
            .zip(&self.stores)
            .map(|(net, store)| net.forward_vec(store, &input))
            .collect::<Result<_, _>>()?;
        let n = preds.len() as f64;
        let dims = preds[0].len();
        let mut total = 0.0;
        for d in 0..dims {
            let mean = preds.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = preds.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
            total += var;
        }
        Ok(total / dims as f64)
    }

    /// One member's prediction loss and parameter gradients on a batch of
    /// (z | a) -> z_next rows, exactly as consumed by `update`.
    pub fn loss_and_grads(
        &self,
        member: usize,
        inputs: &Tensor,
        targets: &Tensor,
    ) -> IntrinsicResult<(f64, GradMap)> {
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let pred = self.nets[member].forward_tape(&mut tape, &self.stores[member], x)?;
        let target = tape.constant(targets.clone());
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// Train each member on its own batch of (z | a) -> z_next rows; `None`
    /// leaves that member untouched. Returns each member's loss.
    pub fn update(
        &mut self,
        batches: &[Option<(Tensor, Tensor)>],
        lr: f64,
    ) -> IntrinsicResult<Vec<Option<f64>>> {
        assert_eq!(batches.len(), self.nets.len(), "one batch slot per member");
        let mut losses = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let Some((inputs, targets)) = batch else {
                losses.push(None);
                continue;
            };
            let (value, grads) = self.loss_and_grads(i, inputs, targets)?;
            self.stores[i].adam_step(&grads, lr)?;
            losses.push(Some(value));
        }
        Ok(losses)
    }
}

/// Particle-based entropy bonus: mean log squared distance to the k nearest
/// reference latents, squashed through log(1 + max(raw, 0)).
#[derive(Clone, Copy, Debug)]
pub struct Apt {
    pub k: usize,
}

pub const APT_EPS: f64 = 1e-6;

impl Apt {
    pub const DEFAULT_K: usize = 12;

    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "k must be at least 1");
        Apt { k }
    }

    pub fn reward(&self, z: &[f64], references: &[&[f64]]) -> IntrinsicResult<f64> {
        if references.len() < self.k {
            return Err(IntrinsicError::InsufficientReferences {
                k: self.k,
                got: references.len(),
            });
        }
        let mut sq_dists: Vec<f64> = references
            .iter()
            .map(|r| z.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        sq_dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let raw = sq_dists[..self.k]
            .iter()
            .map(|d| (d + APT_EPS).ln())
            .sum::<f64>()
            / self.k as f64;
        Ok((raw.max(0.0) + 1.0).ln())
    }
}

/// Skill discriminator: reward is how confidently the active skill can be
/// recovered from the latent, shifted so a uniform discriminator scores 0.
pub struct Diayn {
    pub skill_dim: usize,
    pub resample_period: usize,
    net: DenseNet,
    store: ParamStore,
    current_skill: usize,
    steps_since_resample: usize,
}

impl Diayn {
    pub const DEFAULT_SKILL_DIM: usize = 16;
    pub const DEFAULT_RESAMPLE_PERIOD: usize = 50;

    pub fn new(
        skill_dim: usize,
        resample_period: usize,
        latent_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(skill_dim >= 2 && resample_period >= 1);
        let net = DenseNet::new("disc", &[latent_dim, hidden, skill_dim], Activation::Identity);
        let mut store = ParamStore::new();
        net.init(&mut store, rng);
        let current_skill = rng.gen_range(0..skill_dim);
        Diayn { skill_dim, resample_period, net, store, current_skill, steps_since_resample: 0 }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn current_skill(&self) -> usize {
        self.current_skill
    }

    pub fn force_skill(&mut self, skill: usize) {
        assert!(skill < self.skill_dim);
        self.current_skill = skill;
        self.steps_since_resample = 0;
    }

    /// Advance the skill clock by one env step, drawing a fresh skill every
    /// `resample_period` steps. Returns the skill active for this step.
    pub fn step_skill(&mut self, rng: &mut impl Rng) -> usize {
        if self.steps_since_resample >= self.resample_period {
            self.current_skill = rng.gen_range(0..self.skill_dim);
            self.steps_since_resample = 0;
        }
        self.steps_since_resample += 1;
        self.current_skill
    }

    pub fn one_hot(&self, skill: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.skill_dim];
        v[skill] = 1.0;
        v
    }

    /// log q(w | z) + log(skill_dim).
    pub fn reward(&self, z: &[f64], skill: usize) -> IntrinsicResult<f64> {
        assert!(skill < self.skill_dim);
        let logits = self.net.forward_vec(&self.store, z)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let log_q = logits[skill] - log_sum;
        Ok(log_q + (self.skill_dim as f64).ln())
    }

    /// Discriminator cross-entropy and its parameter gradients on (latent,
    /// skill) pairs, exactly as consumed by `update`.
    pub fn loss_and_grads(
        &self,
        latents: &Tensor,
        skills: &[usize],
    ) -> IntrinsicResult<(f64, GradMap)> {
        let mut tape = Tape::new();
        let z = tape.constant(latents.clone());
        let logits = self.net.forward_tape(&mut tape, &self.store, z)?;
        let log_probs = tape.log_softmax(logits);
        let picked = tape.gather_cols(log_probs, skills.to_vec())?;
        let neg = tape.scale(picked, -1.0);
        let loss = tape.mean_all(neg);
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// Cross-entropy minimization on (latent, skill) pairs. Returns the loss.
    pub fn update(&mut self, latents: &Tensor, skills: &[usize], lr: f64) -> IntrinsicResult<f64> {
        let (value, grads) = self.loss_and_grads(latents, skills)?;
        self.store.adam_step(&grads, lr)?;
        Ok(value)
    }
}

/// The configured exploration backbone.
pub enum Explorer {
    Disagreement(DisagreementEnsemble),
    Apt(Apt),
    Diayn(Diayn),
}

impl Explorer {
    pub fn kind(&self) -> ExplorerKind {
        match self {
            Explorer::Disagreement(_) => ExplorerKind::Disagreement,
            Explorer::Apt(_) => ExplorerKind::Apt,
            Explorer::Diayn(_) => ExplorerKind::Diayn,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, DEFAULT_FD_STEP};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn identical_members_have_zero_disagreement() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut ens = DisagreementEnsemble::new(3, 4, 2, 8, &mut rng);
        // Overwrite members 1 and 2 with member 0's parameters.
        let reference = ens.store(0).clone();
        for m in 1..3 {
            let names: Vec<String> =
                ens.store(m).names().map(str::to_string).collect();
            for name in names {
                let donor = name.replacen(&format!("g{m}"), "g0", 1);
                let value = reference.get(&donor).unwrap().clone();
                *ens.store_mut(m).get_mut(&name).unwrap() = value;
            }
        }
        let r = ens.reward(&[0.3, -0.2, 0.5, 0.0], &[0.1, -0.9]).unwrap();
        // Zero up to the rounding of mean subtraction (v - (3v)/3).
        assert!(r < 1e-30, "disagreement of identical members: {r}");
    }

    #[test]
    fn two_point_population_variance_is_one() {
        // Members predicting scalars 0 and 2: variance ((0-1)^2 + (2-1)^2)/2 = 1.
        let mut rng = StdRng::seed_from_u64(1);
        let mut ens = DisagreementEnsemble::new(2, 1, 1, 4, &mut rng);
        for (m, constant) in [(0usize, 0.0f64), (1, 2.0)] {
            let store = ens.store_mut(m);
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for name in &names {
                let t = store.get_mut(name).unwrap();
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            // With zero weights the net outputs its final bias.
            store.get_mut(&format!("g{m}.b1")).unwrap().data_mut()[0] = constant;
        }
        let r = ens.reward(&[0.7], &[-0.3]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disagreement_matches_explicit_variance_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let ens = DisagreementEnsemble::new(5, 3, 1, 8, &mut rng);
        let (z, a) = ([0.4, -0.1, 0.9], [0.5]);
        let got = ens.reward(&z, &a).unwrap();

        // Straight-line oracle: collect member outputs, do the variance
        // arithmetic longhand.
        let input = [z[0], z[1], z[2], a[0]];
        let mut preds = Vec::new();
        for m in 0..5 {
            preds.push(ens.nets[m].forward_vec(ens.store(m), &input).unwrap());
        }
        let mut expected = 0.0;
        for d in 0..3 {
            let mut mean = 0.0;
            for p in &preds {
                mean += p[d];
            }
            mean /= 5.0;
            let mut var = 0.0;
            for p in &preds {
                var += (p[d] - mean) * (p[d] - mean);
            }
            expected += var / 5.0;
        }
        expected /= 3.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn disagreement_is_member_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = DisagreementEnsemble::new(3, 2, 1, 6, &mut rng);
        // Build a permuted ensemble by renaming stores in a rotated order.
        let mut b = DisagreementEnsemble::new(3, 2, 1, 6, &mut StdRng::seed_from_u64(999));
        for (dst, src) in [(0usize, 1usize), (1, 2), (2, 0)] {
            let names: Vec<String> = b.store(dst).names().map(str::to_string).collect();
            for name in names {
                let donor = name.replacen(&format!("g{dst}"), &format!("g{src}"), 1);
                let value = a.store(src).get(&donor).unwrap().clone();
                *b.store_mut(dst).get_mut(&name).unwrap() = value;
            }
        }
        let (z, act) = ([0.2, -0.6], [0.9]);
        let ra = a.reward(&z, &act).unwrap();
        let rb = b.reward(&z, &act).unwrap();
        assert!((ra - rb).abs() < 1e-12);
    }

    #[test]
    fn member_overfits_a_single_repeated_sample() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut ens = DisagreementEnsemble::new(2, 2, 1, 16, &mut rng);
        let input = Tensor::row_vector(&[0.3, -0.4, 0.8]);
        let target = Tensor::row_vector(&[1.0, -1.0]);
        let before = ens.store(1).clone();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let losses = ens
                .update(&[Some((input.clone(), target.clone())), None], 1e-2)
                .unwrap();
            last = losses[0].unwrap();
            assert!(losses[1].is_none());
        }
        assert!(last < 1e-3, "loss after 200 steps: {last}");
        // The member with an empty batch is bitwise untouched.
        for (name, value) in before.iter() {
            assert_eq!(ens.store(1).get(name).unwrap().data(), value.data());
        }
    }

    #[test]
    fn disagreement_update_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let ens = DisagreementEnsemble::new(2, 2, 1, 6, &mut rng);
        let net = ens.nets[0].clone();
        let mut store = ens.store(0).clone();
        let inputs =
            Tensor::from_rows(&[vec![0.1, 0.2, -0.5], vec![-0.7, 0.4, 0.9]]).unwrap();
        let targets = Tensor::from_rows(&[vec![0.5, -0.5], vec![0.0, 1.0]]).unwrap();
        let report = gradcheck(
            &mut store,
            |store, tape| {
                let x = tape.constant(inputs.clone());
                let pred = net.forward_tape(tape, store, x)?;
                let t = tape.constant(targets.clone());
                tape.mse(pred, t)
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn apt_zero_distance_saturates_to_zero() {
        let apt = Apt::new(2);
        let refs: Vec<Vec<f64>> = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![3.0, 3.0]];
        let slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let r = apt.reward(&[0.5, 0.5], &slices).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn apt_matches_exhaustive_sort_oracle() {
        // 1-d latents: z = 0, references {1, 3, 5}, k = 2.
        let apt = Apt::new(2);
        let refs: Vec<Vec<f64>> = vec![vec![1.0], vec![3.0], vec![5.0]];
        let slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let got = apt.reward(&[0.0], &slices).unwrap();

        // Independent arithmetic, including the epsilon regularizer.
        let mut d2: Vec<f64> = vec![1.0, 9.0, 25.0];
        d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let raw = ((d2[0] + 1e-6).ln() + (d2[1] + 1e-6).ln()) / 2.0;
        let expected = (raw.max(0.0) + 1.0).ln();
        assert!((got - expected).abs() < 1e-12);

        // And the published four-decimal anchors.
        assert!((raw - 1.0986).abs() < 1e-4);
        assert!((got - 0.7413).abs() < 1e-4);
    }

    #[test]
    fn apt_is_reference_order_invariant() {
        let apt = Apt::new(3);
        let refs: Vec<Vec<f64>> =
            vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.5, 0.5], vec![4.0, 4.0]];
        let fwd: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let rev: Vec<&[f64]> = refs.iter().rev().map(Vec::as_slice).collect();
        let z = [0.2, 0.1];
        assert_eq!(apt.reward(&z, &fwd).unwrap(), apt.reward(&z, &rev).unwrap());
    }

    #[test]
    fn apt_rejects_small_reference_sets() {
        let apt = Apt::new(4);
        let refs: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![3.0]];
        let slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        assert!(matches!(
            apt.reward(&[0.0], &slices),
            Err(IntrinsicError::InsufficientReferences { k: 4, got: 3 })
        ));
    }

    #[test]
    fn apt_monotone_in_kth_neighbor_distance() {
        let apt = Apt::new(2);
        let z = [0.0];
        let mut previous = f64::NEG_INFINITY;
        for far in [2.0, 3.0, 6.0, 10.0] {
            let refs: Vec<Vec<f64>> = vec![vec![1.5], vec![far], vec![100.0]];
            let slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
            let r = apt.reward(&z, &slices).unwrap();
            assert!(r >= previous, "reward decreased when k-th neighbor moved away");
            previous = r;
        }
    }

    #[test]
    fn diayn_uniform_discriminator_scores_exactly_zero() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut d = Diayn::new(16, 50, 3, 8, &mut rng);
        // Zero every parameter: logits become uniformly zero.
        let names: Vec<String> = d.store().names().map(str::to_string).collect();
        for name in names {
            for v in d.store_mut().get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        for skill in 0..16 {
            assert_eq!(d.reward(&[0.4, -0.2, 0.0], skill).unwrap(), 0.0);
        }
    }

    #[test]
    fn diayn_certain_discriminator_attains_log_sixteen() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut d = Diayn::new(16, 50, 2, 4, &mut rng);
        // Zero everything, then drive skill 3's output bias sky-high.
        let names: Vec<String> = d.store().names().map(str::to_string).collect();
        for name in names {
            for v in d.store_mut().get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        d.store_mut().get_mut("disc.b1").unwrap().data_mut()[3] = 1000.0;
        let r = d.reward(&[0.1, 0.1], 3).unwrap();
        let bound = 16f64.ln();
        assert!((r - bound).abs() < 1e-12, "reward {r} vs log16 {bound}");
        assert!((bound - 2.7726).abs() < 1e-4);
        // Any other skill scores far below the bound.
        assert!(d.reward(&[0.1, 0.1], 2).unwrap() < 0.0);
    }

    #[test]
    fn diayn_reward_is_bounded_by_log_sixteen() {
        let mut rng = StdRng::seed_from_u64(8);
        let d = Diayn::new(16, 50, 2, 8, &mut rng);
        for i in 0..50 {
            let z = [(i as f64 * 0.37).sin() * 2.0, (i as f64 * 0.71).cos() * 2.0];
            let r = d.reward(&z, i % 16).unwrap();
            assert!(r <= 16f64.ln() + 1e-12);
            assert!(r.is_finite());
        }
    }

    #[test]
    fn diayn_update_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let d = Diayn::new(4, 50, 2, 6, &mut rng);
        let net = d.net.clone();
        let mut store = d.store().clone();
        let latents = Tensor::from_rows(&[vec![0.3, -0.9], vec![1.2, 0.4]]).unwrap();
        let skills = vec![2usize, 0];
        let report = gradcheck(
            &mut store,
            |store, tape| {
                let z = tape.constant(latents.clone());
                let logits = net.forward_tape(tape, store, z)?;
                let lp = tape.log_softmax(logits);
                let picked = tape.gather_cols(lp, skills.clone())?;
                let neg = tape.scale(picked, -1.0);
                Ok(tape.mean_all(neg))
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn diayn_training_improves_skill_recovery() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut d = Diayn::new(4, 50, 2, 16, &mut rng);
        // Four well-separated latent clusters, one per skill.
        let centers = [[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]];
        let mut latents = Vec::new();
        let mut skills = Vec::new();
        for (skill, c) in centers.iter().enumerate() {
            for j in 0..8 {
                let jitter = 0.05 * j as f64;
                latents.push(vec![c[0] + jitter, c[1] - jitter]);
                skills.push(skill);
            }
        }
        let batch = Tensor::from_rows(&latents).unwrap();
        let first = d.update(&batch, &skills, 1e-2).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = d.update(&batch, &skills, 1e-2).unwrap();
        }
        assert!(last < first * 0.1, "cross-entropy {first} -> {last}");
        // A trained discriminator now rewards matching skills positively.
        let r = d.reward(&[2.0, 0.0], 0).unwrap();
        assert!(r > 1.0, "reward for a well-classified latent: {r}");
    }

    #[test]
    fn skill_resampling_follows_the_period() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut d = Diayn::new(16, 50, 2, 4, &mut rng);
        d.force_skill(5);
        let mut changes = 0;
        let mut previous = 5;
        for _ in 0..200 {
            let s = d.step_skill(&mut rng);
            if s != previous {
                changes += 1;
                previous = s;
            }
        }
        // 200 steps at period 50: exactly 3 resample opportunities after the
        // forced skill, each changing with probability 15/16.
        assert!(changes <= 3, "skill changed {changes} times");
        assert!(changes >= 2, "resampling seems inert ({changes} changes)");
    }

    #[test]
    fn explorer_kind_parsing() {
        assert_eq!(ExplorerKind::parse("apt").unwrap(), ExplorerKind::Apt);
        assert!(ExplorerKind::parse("rnd").is_err());
    }

    proptest::proptest! {
        #[test]
        fn apt_reward_ignores_reference_order(
            flat in proptest::collection::vec(-3.0_f64..3.0, 12..=12),
            query in proptest::collection::vec(-3.0_f64..3.0, 2..=2),
            k in 1_usize..6,
        ) {
            let refs: Vec<Vec<f64>> = flat.chunks(2).map(|c| c.to_vec()).collect();
            let forward: Vec<&[f64]> = refs.iter().map(|r| r.as_slice()).collect();
            let reversed: Vec<&[f64]> = refs.iter().rev().map(|r| r.as_slice()).collect();
            let apt = Apt::new(k);
            let a = apt.reward(&query, &forward).unwrap();
            let b = apt.reward(&query, &reversed).unwrap();
            // The k nearest squared distances are the same multiset either
            // way, so the reward must agree bit for bit.
            proptest::prop_assert!(a.is_finite() && a >= 0.0);
            proptest::prop_assert_eq!(a, b);
        }
    }
}

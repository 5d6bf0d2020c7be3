//! End-to-end run loops: reward-free pre-training with intrinsic rewards
//! and the snapshot schedule, fine-tuning with weight reuse, zero-shot head
//! selection and planning-based acting, plus planning-only evaluation.
//!
//! Every source of randomness derives from the run seed through fixed
//! ChaCha streams, so a (config, seed) pair fully determines parameter
//! trajectories, checkpoints and metrics bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Config;
use crate::ensemble::{explore_noise, select_head, EnsembleError, PolicyEnsemble};
use crate::env::{Env, EnvError, EnvKind, RewardMode};
use crate::intrinsic::{
    Apt, Diayn, DisagreementEnsemble, Explorer, ExplorerKind, IntrinsicError,
};
use crate::model::{Actor, LossTerms, ModelDims, ModelError, TrajBatch, WorldModel};
use crate::nn::{read_tensors, write_tensors, NnError, ParamStore, Tensor};
use crate::planner::{plan, ModelPlanContext, PlanDistribution, PlannerError};
use crate::replay::{ReplayBuffer, ReplayError, Transition};

#[derive(Error, Debug)]
pub enum OrchError {
    #[error("checkpoint does not match the run config: {0}")]
    CheckpointMismatch(String),

    #[error("bad run config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Env(#[from] EnvError),

    #[error(transparent)]
    Replay(#[from] ReplayError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Ensemble(#[from] EnsembleError),

    #[error(transparent)]
    Planner(#[from] PlannerError),

    #[error(transparent)]
    Intrinsic(#[from] IntrinsicError),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type OrchResult<T> = Result<T, OrchError>;

// One ChaCha stream per randomness consumer, all keyed by the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_PT_RESET: u64 = 1;
const STREAM_PT_NOISE: u64 = 2;
const STREAM_PT_BATCH: u64 = 3;
const STREAM_PT_SKILL: u64 = 4;
const STREAM_FT_INIT: u64 = 5;
const STREAM_FT_RESET: u64 = 6;
const STREAM_FT_NOISE: u64 = 7;
const STREAM_FT_BATCH: u64 = 8;
const STREAM_FT_PLAN: u64 = 9;
const STREAM_SELECT: u64 = 10;
const STREAM_EVAL: u64 = 11;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const METRICS_HEADER: &str =
    "phase,step,task,return,loss_reward,loss_consistency,loss_value,loss_actor,intrinsic_mean,selected_head,wall_ms";

/// In-memory metrics accumulator, flushed once at the end of a run so a
/// crashed run never leaves a half-written file.
struct Metrics {
    rows: Vec<String>,
    log_wall: bool,
    started: Instant,
}

impl Metrics {
    fn new(log_wall: bool) -> Self {
        Metrics { rows: Vec::new(), log_wall, started: Instant::now() }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        phase: &str,
        step: u64,
        task: &str,
        ep_return: f64,
        losses: &LossTerms,
        loss_actor: f64,
        intrinsic_mean: f64,
        selected_head: i64,
    ) {
        let wall_ms = if self.log_wall { self.started.elapsed().as_millis() } else { 0 };
        self.rows.push(format!(
            "{phase},{step},{task},{ep_return},{},{},{},{loss_actor},{intrinsic_mean},{selected_head},{wall_ms}",
            losses.reward, losses.consistency, losses.value
        ));
    }

    fn write_to(&self, path: &Path) -> OrchResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        for row in &self.rows {
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

fn env_kind(config: &Config) -> OrchResult<EnvKind> {
    Ok(EnvKind::parse(&config.env)?)
}

fn kind_index(kind: EnvKind) -> u64 {
    match kind {
        EnvKind::PointMass => 0,
        EnvKind::Pendulum => 1,
        EnvKind::TwoModeLinear => 2,
    }
}


const META_VERSION: f64 = 1.0;
const PHASE_PT: u64 = 0;
const PHASE_FT: u64 = 1;

/// Shape and provenance information embedded in every checkpoint.
#[derive(Clone, Copy, Debug)]
struct CheckpointMeta {
    phase: u64,
    env: u64,
    action_repeat: u64,
    state_dim: u64,
    action_dim: u64,
    latent_dim: u64,
    hidden: u64,
    num_heads: u64,
    snapshot_count: u64,
    skill_dim: u64,
    selected_head: i64,
    linear_dynamics: bool,
}

impl CheckpointMeta {
    fn to_tensor(self) -> Tensor {
        Tensor::row_vector(&[
            META_VERSION,
            self.phase as f64,
            self.env as f64,
            self.action_repeat as f64,
            self.state_dim as f64,
            self.action_dim as f64,
            self.latent_dim as f64,
            self.hidden as f64,
            self.num_heads as f64,
            self.snapshot_count as f64,
            self.skill_dim as f64,
            self.selected_head as f64,
            if self.linear_dynamics { 1.0 } else { 0.0 },
        ])
    }

    fn from_tensor(t: &Tensor) -> OrchResult<Self> {
        if t.rows() != 1 || t.cols() != 13 {
            return Err(OrchError::CheckpointMismatch(format!(
                "meta tensor has shape {:?}, expected 1x13",
                t.shape()
            )));
        }
        if t.get(0, 0) != META_VERSION {
            return Err(OrchError::CheckpointMismatch(format!(
                "meta version {} unsupported",
                t.get(0, 0)
            )));
        }
        Ok(CheckpointMeta {
            phase: t.get(0, 1) as u64,
            env: t.get(0, 2) as u64,
            action_repeat: t.get(0, 3) as u64,
            state_dim: t.get(0, 4) as u64,
            action_dim: t.get(0, 5) as u64,
            latent_dim: t.get(0, 6) as u64,
            hidden: t.get(0, 7) as u64,
            num_heads: t.get(0, 8) as u64,
            snapshot_count: t.get(0, 9) as u64,
            skill_dim: t.get(0, 10) as u64,
            selected_head: t.get(0, 11) as i64,
            linear_dynamics: t.get(0, 12) != 0.0,
        })
    }
}

fn model_dims(config: &Config, env: &Env) -> ModelDims {
    ModelDims {
        state_dim: env.spec().state_dim,
        action_dim: env.spec().action_dim,
        latent_dim: config.latent_dim,
        hidden: config.hidden,
        num_heads: config.effective_num_heads(),
        linear_dynamics: config.linear_dynamics,
    }
}

fn actor_extra_dims(config: &Config) -> usize {
    match ExplorerKind::parse(&config.explorer) {
        Ok(ExplorerKind::Diayn) => config.skill_dim,
        _ => 0,
    }
}

fn build_explorer(config: &Config, dims: &ModelDims, rng: &mut impl Rng) -> OrchResult<Explorer> {
    Ok(match ExplorerKind::parse(&config.explorer)? {
        ExplorerKind::Disagreement => Explorer::Disagreement(DisagreementEnsemble::new(
            config.disagreement_members,
            dims.latent_dim,
            dims.action_dim,
            dims.hidden,
            rng,
        )),
        ExplorerKind::Apt => Explorer::Apt(Apt::new(config.apt_k)),
        ExplorerKind::Diayn => Explorer::Diayn(Diayn::new(
            config.skill_dim,
            config.skill_resample as usize,
            dims.latent_dim,
            dims.hidden,
            rng,
        )),
    })
}

/// Flatten model, actor, snapshots, explorer state and meta into one
/// named-tensor map.
fn compose_checkpoint(
    model: &WorldModel,
    actor: &Actor,
    ensemble: &PolicyEnsemble,
    explorer: Option<&Explorer>,
    meta: CheckpointMeta,
) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    model.export_named("", &mut map);
    actor.store.export_named("actor/", &mut map);
    for i in 0..ensemble.len() {
        let snap = ensemble.snapshot(i).expect("index in range");
        for (name, value) in snap.store.iter() {
            map.insert(format!("snap{i}/{name}"), value.clone());
        }
    }
    match explorer {
        Some(Explorer::Disagreement(d)) => {
            for m in 0..d.members() {
                d.store(m).export_named(&format!("explorer/m{m}/"), &mut map);
            }
        }
        Some(Explorer::Diayn(d)) => {
            d.store().export_named("explorer/disc/", &mut map);
            map.insert(
                "explorer/skill".into(),
                Tensor::row_vector(&[d.current_skill() as f64]),
            );
        }
        Some(Explorer::Apt(_)) | None => {}
    }
    map.insert("meta".into(), meta.to_tensor());
    map
}

fn write_checkpoint(path: &Path, map: &BTreeMap<String, Tensor>) -> OrchResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, map)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> OrchResult<(BTreeMap<String, Tensor>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let map = read_tensors(&mut r)?;
    let meta_tensor = map
        .get("meta")
        .ok_or_else(|| OrchError::CheckpointMismatch("missing meta tensor".into()))?;
    let meta = CheckpointMeta::from_tensor(meta_tensor)?;
    Ok((map, meta))
}

/// Rebuild an actor from checkpoint entries under `prefix`; shapes must
/// match the given architecture.
fn actor_from_map(
    latent_dim: usize,
    extra_dims: usize,
    hidden: usize,
    action_dim: usize,
    map: &BTreeMap<String, Tensor>,
    prefix: &str,
) -> OrchResult<Actor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut actor = Actor::new(latent_dim, extra_dims, hidden, action_dim, &mut rng);
    let loaded = ParamStore::import_named(prefix, map)?;
    for name in actor.store.names().map(str::to_string).collect::<Vec<_>>() {
        let found = loaded.get(&name).map_err(|_| {
            OrchError::CheckpointMismatch(format!("checkpoint lacks {prefix}{name}"))
        })?;
        actor.store.get(&name)?.require_same_shape(found, &name).map_err(|_| {
            OrchError::CheckpointMismatch(format!("shape mismatch for {prefix}{name}"))
        })?;
    }
    actor.store = loaded;
    Ok(actor)
}

fn one_hot(dim: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}


/// Intrinsic rewards for every (window, step) in a sampled batch, computed
/// fresh against the current encoder and explorer.
fn intrinsic_rewards(
    model: &WorldModel,
    explorer: &Explorer,
    windows: &[&[Transition]],
) -> OrchResult<Vec<Vec<f64>>> {
    match explorer {
        Explorer::Disagreement(d) => {
            let mut out = Vec::with_capacity(windows.len());
            for w in windows {
                let mut row = Vec::with_capacity(w.len());
                for t in w.iter() {
                    let z = model.encode(&t.state)?;
                    row.push(d.reward(&z, &t.action)?);
                }
                out.push(row);
            }
            Ok(out)
        }
        Explorer::Apt(apt) => {
            let steps = windows[0].len();
            let mut latents: Vec<Vec<f64>> = Vec::with_capacity(windows.len() * steps);
            for w in windows {
                for t in w.iter() {
                    latents.push(model.encode(&t.state)?);
                }
            }
            let mut out = vec![vec![0.0; steps]; windows.len()];
            for (q, latent) in latents.iter().enumerate() {
                let refs: Vec<&[f64]> = latents
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != q)
                    .map(|(_, l)| l.as_slice())
                    .collect();
                out[q / steps][q % steps] = apt.reward(latent, &refs)?;
            }
            Ok(out)
        }
        Explorer::Diayn(d) => {
            let mut out = Vec::with_capacity(windows.len());
            for w in windows {
                let mut row = Vec::with_capacity(w.len());
                for t in w.iter() {
                    let z = model.encode(&t.state)?;
                    row.push(d.reward(&z, t.skill_id.unwrap_or(0))?);
                }
                out.push(row);
            }
            Ok(out)
        }
    }
}

/// Train the explorer on the freshly sampled batch.
fn update_explorer(
    model: &WorldModel,
    explorer: &mut Explorer,
    windows: &[&[Transition]],
    lr: f64,
) -> OrchResult<()> {
    match explorer {
        Explorer::Disagreement(d) => {
            let total: usize = windows.iter().map(|w| w.len()).sum();
            let in_dim = model.dims().latent_dim + model.dims().action_dim;
            let mut inputs = Tensor::zeros(total, in_dim);
            let mut targets = Tensor::zeros(total, model.dims().latent_dim);
            let mut r = 0;
            for w in windows {
                for t in w.iter() {
                    let z = model.encode(&t.state)?;
                    let row = inputs.row_mut(r);
                    row[..z.len()].copy_from_slice(&z);
                    row[z.len()..].copy_from_slice(&t.action);
                    targets.row_mut(r).copy_from_slice(&model.encode(&t.next_state)?);
                    r += 1;
                }
            }
            let batches: Vec<Option<(Tensor, Tensor)>> =
                (0..d.members()).map(|_| Some((inputs.clone(), targets.clone()))).collect();
            d.update(&batches, lr)?;
        }
        Explorer::Apt(_) => {}
        Explorer::Diayn(d) => {
            let total: usize = windows.iter().map(|w| w.len()).sum();
            let mut latents = Tensor::zeros(total, model.dims().latent_dim);
            let mut skills = Vec::with_capacity(total);
            let mut r = 0;
            for w in windows {
                for t in w.iter() {
                    latents.row_mut(r).copy_from_slice(&model.encode(&t.state)?);
                    skills.push(t.skill_id.unwrap_or(0));
                    r += 1;
                }
            }
            d.update(&latents, &skills, lr)?;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub env_steps: u64,
}

/// Reward-free pre-training: intrinsic rewards, the snapshot schedule, and
/// per-segment head routing. The final checkpoint carries the world model,
/// actor, snapshots and explorer state.
pub fn pretrain(config: &Config, out_dir: &Path) -> OrchResult<PretrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let kind = env_kind(config)?;
    let mut env = Env::new(kind, RewardMode::Free, config.action_repeat)?;
    let dims = model_dims(config, &env);
    let extra_dims = actor_extra_dims(config);

    let mut init_rng = stream_rng(config.seed, STREAM_INIT);
    let mut model = WorldModel::new(dims, config.target_period, config.target_blend, &mut init_rng);
    let mut actor = Actor::new(
        dims.latent_dim,
        extra_dims,
        dims.hidden,
        dims.action_dim,
        &mut init_rng,
    );
    let mut explorer = build_explorer(config, &dims, &mut init_rng)?;

    let mut ensemble = PolicyEnsemble::new(
        config.effective_num_heads(),
        config.effective_snapshot_interval(),
        config.sigma_explore,
    );
    let mut replay = ReplayBuffer::new(config.buffer_capacity);
    replay.set_ensemble_size(config.effective_num_heads());

    let mut reset_rng = stream_rng(config.seed, STREAM_PT_RESET);
    let mut noise_rng = stream_rng(config.seed, STREAM_PT_NOISE);
    let mut batch_rng = stream_rng(config.seed, STREAM_PT_BATCH);
    let mut skill_rng = stream_rng(config.seed, STREAM_PT_SKILL);

    let weights = config.loss_weights();
    let skill_dim_opt = (extra_dims > 0).then_some(config.skill_dim);
    let mut metrics = Metrics::new(config.log_wall_time);
    let mut last_losses = LossTerms::default();
    let mut last_actor_loss = 0.0;
    let mut last_intrinsic = 0.0;

    // The t = 0 snapshot exists even for an empty loop.
    ensemble.maybe_snapshot(0, &actor);

    let mut state = env.reset(reset_rng.gen());
    let mut episode_id: u64 = 0;
    let mut step_index: usize = 0;

    for t in 0..config.pt_steps {
        ensemble.maybe_snapshot(t, &actor);

        let skill = match &mut explorer {
            Explorer::Diayn(d) => Some(d.step_skill(&mut skill_rng)),
            _ => None,
        };
        let mut z = model.encode(&state)?;
        if let Some(s) = skill {
            z.extend_from_slice(&one_hot(config.skill_dim, s));
        }
        let mut action = actor.act(&z)?;
        explore_noise(&mut action, config.sigma_explore, &mut noise_rng);

        let step = env.step(&action)?;
        replay.push(Transition {
            state: state.clone(),
            action,
            reward: None,
            next_state: step.next_state.clone(),
            segment_id: ensemble.segment_id(),
            episode_id,
            step_index,
            skill_id: skill,
        })?;
        state = step.next_state;
        step_index += 1;
        if step.done {
            state = env.reset(reset_rng.gen());
            episode_id += 1;
            step_index = 0;
        }

        for _ in 0..config.updates_per_step {
            let segment = batch_rng.gen_range(0..=ensemble.segment_id());
            let windows = match replay.sample_sequences(
                config.batch_size,
                config.rollout_horizon,
                Some(segment),
                &mut batch_rng,
            ) {
                Ok(w) => w,
                Err(ReplayError::NotEnoughData { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let rewards = intrinsic_rewards(&model, &explorer, &windows)?;
            last_intrinsic = rewards.iter().flatten().sum::<f64>()
                / rewards.iter().map(Vec::len).sum::<usize>() as f64;

            let batch = TrajBatch::from_windows(&windows, Some(&rewards), skill_dim_opt)?;
            let (terms, grads) = model.model_loss(&weights, &batch, &actor, segment)?;
            model.apply_gradients(&grads, config.pt_lr)?;
            last_losses = terms;

            // Actor update on the window-head latents.
            let latents = model.encode_batch(&batch.states[0])?;
            let extra = batch.skills.as_ref().map(|s| s[0].clone());
            let diversity = if config.effective_alpha() > 0.0 && !ensemble.is_empty() {
                let inputs = match &extra {
                    Some(e) => {
                        let mut joined = Tensor::zeros(latents.rows(), latents.cols() + e.cols());
                        for r in 0..latents.rows() {
                            let row = joined.row_mut(r);
                            row[..latents.cols()].copy_from_slice(latents.row(r));
                            row[latents.cols()..].copy_from_slice(e.row(r));
                        }
                        joined
                    }
                    None => latents.clone(),
                };
                Some(ensemble.diversity_context(&inputs, config.effective_alpha())?)
            } else {
                None
            };
            let (actor_loss, actor_grads) =
                model.actor_loss(&actor, &latents, extra.as_ref(), diversity.as_ref())?;
            actor.store.adam_step(&actor_grads, config.pt_lr)?;
            last_actor_loss = actor_loss;

            update_explorer(&model, &mut explorer, &windows, config.intrinsic_lr)?;
        }

        if t % config.metrics_every == 0 {
            metrics.push("pt", t, "none", 0.0, &last_losses, last_actor_loss, last_intrinsic, -1);
        }
    }
    metrics.push(
        "pt",
        config.pt_steps,
        "none",
        0.0,
        &last_losses,
        last_actor_loss,
        last_intrinsic,
        -1,
    );

    let meta = CheckpointMeta {
        phase: PHASE_PT,
        env: kind_index(kind),
        action_repeat: config.action_repeat as u64,
        state_dim: dims.state_dim as u64,
        action_dim: dims.action_dim as u64,
        latent_dim: dims.latent_dim as u64,
        hidden: dims.hidden as u64,
        num_heads: dims.num_heads as u64,
        snapshot_count: ensemble.len() as u64,
        skill_dim: extra_dims as u64,
        selected_head: -1,
        linear_dynamics: dims.linear_dynamics,
    };
    let map = compose_checkpoint(&model, &actor, &ensemble, Some(&explorer), meta);
    let checkpoint = out_dir.join("pt.ckpt");
    write_checkpoint(&checkpoint, &map)?;
    let metrics_path = out_dir.join("metrics.csv");
    metrics.write_to(&metrics_path)?;
    Ok(PretrainOutcome { checkpoint, metrics: metrics_path, env_steps: config.pt_steps })
}

/// Everything fine-tuning needs from a PT checkpoint: the model with reuse
/// flags applied, the snapshot ensemble, and the skill width.
struct LoadedPretrain {
    model: WorldModel,
    ensemble: PolicyEnsemble,
    extra_dims: usize,
}

fn load_for_finetune(
    config: &Config,
    map: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
    env: &Env,
) -> OrchResult<LoadedPretrain> {
    if meta.phase != PHASE_PT {
        return Err(OrchError::CheckpointMismatch(
            "fine-tuning requires a pre-training checkpoint".into(),
        ));
    }
    let kind = env_kind(config)?;
    if meta.env != kind_index(kind) || meta.action_repeat != config.action_repeat as u64 {
        return Err(OrchError::CheckpointMismatch(format!(
            "checkpoint env {} / repeat {} vs config {} / {}",
            meta.env,
            meta.action_repeat,
            kind_index(kind),
            config.action_repeat
        )));
    }
    let dims = model_dims(config, env);
    let same_shape = meta.state_dim == dims.state_dim as u64
        && meta.action_dim == dims.action_dim as u64
        && meta.latent_dim == dims.latent_dim as u64
        && meta.hidden == dims.hidden as u64
        && meta.num_heads == dims.num_heads as u64
        && meta.linear_dynamics == dims.linear_dynamics;
    if !same_shape {
        return Err(OrchError::CheckpointMismatch(format!(
            "model shape mismatch: checkpoint latent {} hidden {} heads {} vs config {} {} {}",
            meta.latent_dim, meta.hidden, meta.num_heads, dims.latent_dim, dims.hidden, dims.num_heads
        )));
    }

    // Fresh init, then overwrite reused components with PT weights.
    let mut init_rng = stream_rng(config.seed, STREAM_FT_INIT);
    let mut model = WorldModel::new(dims, config.target_period, config.target_blend, &mut init_rng);
    let mut pt_model =
        WorldModel::new(dims, config.target_period, config.target_blend, &mut ChaCha8Rng::seed_from_u64(0));
    pt_model.import_named("", map)?;

    if config.reuse_encoder {
        model.store.copy_params_from(&pt_model.store, "enc.")?;
    }
    if config.reuse_dynamics {
        model.store.copy_params_from(&pt_model.store, "dyn.")?;
        model.store.copy_params_from(&pt_model.store, "head")?;
    }
    if config.reuse_reward {
        model.store.copy_params_from(&pt_model.store, "rew.")?;
    }
    if config.reuse_critic {
        model.store.copy_params_from(&pt_model.store, "crit.")?;
    }
    // Target trackers restart from the assembled online parameters.
    model.enc_target = crate::nn::TargetTracker::new(
        &model.store,
        &["enc."],
        config.target_period,
        config.target_blend,
    );
    model.crit_target = crate::nn::TargetTracker::new(
        &model.store,
        &["crit."],
        config.target_period,
        config.target_blend,
    );

    let ensemble = ensemble_from_map(config, map, meta)?;
    Ok(LoadedPretrain { model, ensemble, extra_dims: meta.skill_dim as usize })
}

/// Rebuild the snapshot ensemble stored in a checkpoint.
fn ensemble_from_map(
    config: &Config,
    map: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
) -> OrchResult<PolicyEnsemble> {
    let mut ensemble = PolicyEnsemble::new(
        meta.num_heads as usize,
        config.effective_snapshot_interval(),
        config.sigma_explore,
    );
    for i in 0..meta.snapshot_count as usize {
        let snap = actor_from_map(
            meta.latent_dim as usize,
            meta.skill_dim as usize,
            meta.hidden as usize,
            meta.action_dim as usize,
            map,
            &format!("snap{i}/"),
        )?;
        let taken = ensemble.maybe_snapshot(i as u64 * ensemble.snapshot_interval(), &snap);
        debug_assert!(taken);
    }
    Ok(ensemble)
}

/// Rebuild a world model with shapes taken from checkpoint metadata.
fn model_from_meta(
    config: &Config,
    map: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
) -> OrchResult<WorldModel> {
    let dims = ModelDims {
        state_dim: meta.state_dim as usize,
        action_dim: meta.action_dim as usize,
        latent_dim: meta.latent_dim as usize,
        hidden: meta.hidden as usize,
        num_heads: meta.num_heads as usize,
        linear_dynamics: meta.linear_dynamics,
    };
    let mut model = WorldModel::new(
        dims,
        config.target_period,
        config.target_blend,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    model.import_named("", map)?;
    Ok(model)
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub selected_head: usize,
    pub zero_shot_returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    /// Mean return over the last up-to-5 completed episodes.
    pub final_return: f64,
}

/// Fine-tuning: weight reuse per flags, zero-shot head selection, seed
/// collection with the warm-started actor, then planning-based acting with
/// extrinsic-reward training on the selected head only.
pub fn finetune(
    config: &Config,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> OrchResult<FinetuneOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let kind = env_kind(config)?;
    let mut env = Env::new(kind, RewardMode::Task(config.task.clone()), config.action_repeat)?;
    let (map, meta) = read_checkpoint(checkpoint_path)?;
    let LoadedPretrain { mut model, ensemble, extra_dims } =
        load_for_finetune(config, &map, &meta, &env)?;
    let dims = *model.dims();

    let fixed_extra = (extra_dims > 0).then(|| one_hot(extra_dims, 0));
    let skill_dim_opt = (extra_dims > 0).then_some(extra_dims);

    let mut metrics = Metrics::new(config.log_wall_time);
    let mut t: u64 = 0;

    // Zero-shot head selection, one episode per snapshot.
    let (selected, zero_shot) = if config.ft_steps > 0 {
        let mut select_seed_rng = stream_rng(config.seed, STREAM_SELECT);
        let (h, returns) = select_head(
            &model,
            &ensemble,
            &env,
            fixed_extra.as_deref(),
            select_seed_rng.gen(),
        )?;
        t += (returns.len() * env.spec().episode_length) as u64;
        (h, returns)
    } else {
        (0, Vec::new())
    };

    // The fine-tuning actor starts from the selected snapshot.
    let mut actor = if config.reuse_actor && !ensemble.is_empty() {
        ensemble.snapshot(selected)?.clone_frozen()
    } else {
        let mut rng = stream_rng(config.seed, STREAM_FT_INIT);
        rng.set_word_pos(1u128 << 40); // clear of the model-init draws on this stream
        Actor::new(dims.latent_dim, extra_dims, dims.hidden, dims.action_dim, &mut rng)
    };

    let mut replay = ReplayBuffer::new(config.buffer_capacity);
    replay.set_ensemble_size(dims.num_heads);
    let mut reset_rng = stream_rng(config.seed, STREAM_FT_RESET);
    let mut noise_rng = stream_rng(config.seed, STREAM_FT_NOISE);
    let mut batch_rng = stream_rng(config.seed, STREAM_FT_BATCH);
    let mut plan_rng = stream_rng(config.seed, STREAM_FT_PLAN);

    let weights = config.loss_weights();
    let planner_config = config.planner();
    let mut last_losses = LossTerms::default();
    let mut last_actor_loss = 0.0;
    let mut episode_returns: Vec<f64> = Vec::new();
    let mut current_return = 0.0;
    let mut last_return = 0.0;

    let mut state = env.reset(reset_rng.gen());
    let mut episode_id: u64 = 0;
    let mut step_index: usize = 0;
    let mut warm: Option<PlanDistribution> = None;

    while t < config.ft_steps {
        let action = if t < config.seed_steps {
            let mut z = model.encode(&state)?;
            if let Some(extra) = &fixed_extra {
                z.extend_from_slice(extra);
            }
            let mut a = actor.act(&z)?;
            explore_noise(&mut a, config.sigma_explore, &mut noise_rng);
            a
        } else {
            let ctx = ModelPlanContext {
                model: &model,
                actor: &actor,
                head: selected,
                gamma: config.gamma,
                z0: model.encode(&state)?,
                extra: fixed_extra.clone(),
            };
            let (a, next_warm) = plan(&ctx, &planner_config, warm.as_ref(), &mut plan_rng)?;
            warm = Some(next_warm);
            a
        };

        let step = env.step(&action)?;
        let reward = step.reward.expect("task mode yields rewards");
        current_return += reward;
        replay.push(Transition {
            state: state.clone(),
            action,
            reward: Some(reward),
            next_state: step.next_state.clone(),
            segment_id: selected,
            episode_id,
            step_index,
            skill_id: None,
        })?;
        state = step.next_state;
        step_index += 1;
        if step.done {
            episode_returns.push(current_return);
            last_return = current_return;
            current_return = 0.0;
            state = env.reset(reset_rng.gen());
            episode_id += 1;
            step_index = 0;
            warm = None;
        }

        if t >= config.seed_steps {
            for _ in 0..config.updates_per_step {
                let windows = match replay.sample_sequences(
                    config.batch_size,
                    config.rollout_horizon,
                    Some(selected),
                    &mut batch_rng,
                ) {
                    Ok(w) => w,
                    Err(ReplayError::NotEnoughData { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                let batch = TrajBatch::from_windows(&windows, None, skill_dim_opt)?;
                let (terms, grads) = model.model_loss(&weights, &batch, &actor, selected)?;
                model.apply_gradients(&grads, config.ft_lr)?;
                last_losses = terms;

                let latents = model.encode_batch(&batch.states[0])?;
                let extra = batch.skills.as_ref().map(|s| s[0].clone());
                let (actor_loss, actor_grads) =
                    model.actor_loss(&actor, &latents, extra.as_ref(), None)?;
                actor.store.adam_step(&actor_grads, config.ft_lr)?;
                last_actor_loss = actor_loss;
            }
        }

        if t % config.metrics_every == 0 {
            metrics.push(
                "ft",
                t,
                &config.task,
                last_return,
                &last_losses,
                last_actor_loss,
                0.0,
                selected as i64,
            );
        }
        t += 1;
    }
    metrics.push(
        "ft",
        config.ft_steps,
        &config.task,
        last_return,
        &last_losses,
        last_actor_loss,
        0.0,
        selected as i64,
    );

    let meta = CheckpointMeta {
        phase: PHASE_FT,
        selected_head: selected as i64,
        snapshot_count: ensemble.len() as u64,
        ..meta
    };
    let map = compose_checkpoint(&model, &actor, &ensemble, None, meta);
    let checkpoint = out_dir.join("ft.ckpt");
    write_checkpoint(&checkpoint, &map)?;
    let metrics_path = out_dir.join("metrics.csv");
    metrics.write_to(&metrics_path)?;

    let tail = episode_returns.iter().rev().take(5).copied().collect::<Vec<_>>();
    let final_return = if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok(FinetuneOutcome {
        checkpoint,
        metrics: metrics_path,
        selected_head: selected,
        zero_shot_returns: zero_shot,
        episode_returns,
        final_return,
    })
}

#[derive(Debug)]
pub struct EvalReport {
    pub mean: f64,
    pub ci_half: f64,
    pub returns: Vec<f64>,
}

/// Planning-based evaluation without training. Every episode re-derives
/// its randomness from the run seed, so a deterministic environment yields
/// identical episodes and a zero-width interval; spread across runs comes
/// from varying the seed.
pub fn evaluate(
    config: &Config,
    checkpoint_path: &Path,
    episodes: usize,
) -> OrchResult<EvalReport> {
    if episodes == 0 {
        return Err(OrchError::BadConfig("need at least one evaluation episode".into()));
    }
    let kind = env_kind(config)?;
    let env = Env::new(kind, RewardMode::Task(config.task.clone()), config.action_repeat)?;
    let (map, meta) = read_checkpoint(checkpoint_path)?;
    if meta.env != kind_index(kind) {
        return Err(OrchError::CheckpointMismatch(
            "checkpoint was trained on a different environment".into(),
        ));
    }

    let model = model_from_meta(config, &map, &meta)?;
    let extra_dims = meta.skill_dim as usize;
    let fixed_extra = (extra_dims > 0).then(|| one_hot(extra_dims, 0));

    let (actor, head) = if meta.phase == PHASE_FT {
        let actor = actor_from_map(
            meta.latent_dim as usize,
            extra_dims,
            meta.hidden as usize,
            meta.action_dim as usize,
            &map,
            "actor/",
        )?;
        (actor, meta.selected_head.max(0) as usize)
    } else {
        let ensemble = ensemble_from_map(config, &map, &meta)?;
        let mut select_seed_rng = stream_rng(config.seed, STREAM_SELECT);
        let (h, _) = select_head(
            &model,
            &ensemble,
            &env,
            fixed_extra.as_deref(),
            select_seed_rng.gen(),
        )?;
        (ensemble.snapshot(h)?.clone_frozen(), h)
    };

    let planner_config = config.planner();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut e = env.clone();
        let mut state = e.reset(config.seed);
        let mut plan_rng = stream_rng(config.seed, STREAM_EVAL);
        let mut warm: Option<PlanDistribution> = None;
        let mut ep_return = 0.0;
        loop {
            let ctx = ModelPlanContext {
                model: &model,
                actor: &actor,
                head,
                gamma: config.gamma,
                z0: model.encode(&state)?,
                extra: fixed_extra.clone(),
            };
            let (action, next_warm) = plan(&ctx, &planner_config, warm.as_ref(), &mut plan_rng)?;
            warm = Some(next_warm);
            let step = e.step(&action)?;
            ep_return += step.reward.expect("task mode yields rewards");
            state = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(ep_return);
    }

    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let ci_half = if returns.len() < 2 {
        0.0
    } else {
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / (returns.len() - 1) as f64;
        1.96 * var.sqrt() / (returns.len() as f64).sqrt()
    };
    Ok(EvalReport { mean, ci_half, returns })
}

#[derive(Debug)]
pub struct SelectionReport {
    pub selected: usize,
    /// Episode return of each snapshot policy, index-aligned.
    pub returns: Vec<f64>,
}

/// Zero-shot head selection on its own: load a checkpoint, run one episode
/// per snapshot policy on the configured task, report per-head returns and
/// the winner. Pure inspection; nothing is trained or written.
pub fn head_selection(config: &Config, checkpoint_path: &Path) -> OrchResult<SelectionReport> {
    let kind = env_kind(config)?;
    let env = Env::new(kind, RewardMode::Task(config.task.clone()), config.action_repeat)?;
    let (map, meta) = read_checkpoint(checkpoint_path)?;
    if meta.env != kind_index(kind) {
        return Err(OrchError::CheckpointMismatch(
            "checkpoint was trained on a different environment".into(),
        ));
    }
    let model = model_from_meta(config, &map, &meta)?;
    let ensemble = ensemble_from_map(config, &map, &meta)?;
    let fixed_extra = (meta.skill_dim > 0).then(|| one_hot(meta.skill_dim as usize, 0));
    let mut select_seed_rng = stream_rng(config.seed, STREAM_SELECT);
    let (selected, returns) = select_head(
        &model,
        &ensemble,
        &env,
        fixed_extra.as_deref(),
        select_seed_rng.gen(),
    )?;
    Ok(SelectionReport { selected, returns })
}

//! Reward-free pre-training of a latent world model together with an ensemble
//! of exploration policies, followed by planning-based fine-tuning on a
//! downstream task.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] - a small reverse-mode autodiff engine, MLPs, Adam, target
//!   networks and checkpointing. Everything downstream builds on it.
//! * [`env`] - three toy control environments with multiple reward functions
//!   each, so the same dynamics can serve several downstream tasks.
//! * [`replay`] - an episodic replay buffer that can slice contiguous
//!   sub-trajectories and filter by collection segment.
//! * [`intrinsic`] - task-agnostic exploration rewards (ensemble
//!   disagreement, particle-based entropy, skill discrimination).
//! * [`model`] - the latent world model: encoder, multi-headed dynamics,
//!   reward and value heads, and the joint training losses.
//! * [`ensemble`] - the snapshot schedule that turns one exploration policy
//!   into a diverse ensemble, and zero-shot selection among the dynamics
//!   heads it induces.
//! * [`planner`] - sampling-based model-predictive control in latent space.
//! * [`orchestrator`] - the pre-train / fine-tune / evaluate loops tying it
//!   all together, plus metrics logging.

pub mod config;
pub mod ensemble;
pub mod env;
pub mod intrinsic;
pub mod model;
pub mod nn;
pub mod orchestrator;
pub mod planner;
pub mod replay;

//! Episodic transition storage with contiguous sub-trajectory sampling.
//!
//! The buffer stores whole episodes and evicts whole episodes, oldest first,
//! so a sampled window can never straddle an episode boundary. Each
//! transition carries a `segment_id`, the index of the exploration-policy
//! snapshot that was acting when it was collected; sampling can filter on it
//! so each dynamics head trains on its own slice of the data.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::nn::{read_tensors, write_tensors, Tensor};

#[derive(Error, Debug)]
pub enum ReplayError {
    #[error("segment_id {segment_id} with only {ensemble_size} ensemble members")]
    SegmentOutOfRange { segment_id: usize, ensemble_size: usize },

    #[error("broken episode chain: {0}")]
    BrokenChain(String),

    #[error("not enough data for horizon {horizon} (segment filter {filter:?})")]
    NotEnoughData { horizon: usize, filter: Option<usize> },

    #[error("a single episode exceeds buffer capacity {0}")]
    CapacityTooSmall(usize),

    #[error("malformed buffer dump: {0}")]
    MalformedDump(String),

    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

pub type ReplayResult<T> = Result<T, ReplayError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Extrinsic reward; absent during reward-free collection.
    pub reward: Option<f64>,
    pub next_state: Vec<f64>,
    /// Index of the ensemble member acting when this was collected.
    pub segment_id: usize,
    pub episode_id: u64,
    pub step_index: usize,
    /// Skill index active at collection time, for skill-conditioned
    /// exploration; None for the other explorers.
    pub skill_id: Option<usize>,
}

/// Contiguous stretch of equal segment_id inside one episode.
#[derive(Clone, Debug)]
struct SegRun {
    segment: usize,
    start: usize,
    len: usize,
}

#[derive(Clone, Debug)]
struct Episode {
    id: u64,
    transitions: Vec<Transition>,
    runs: Vec<SegRun>,
}

impl Episode {
    fn valid_starts(&self, horizon: usize, filter: Option<usize>) -> usize {
        match filter {
            None => self.transitions.len().saturating_sub(horizon),
            Some(f) => self
                .runs
                .iter()
                .filter(|r| r.segment == f)
                .map(|r| r.len.saturating_sub(horizon))
                .sum(),
        }
    }

    /// Map a local index in [0, valid_starts) to a window start offset.
    fn nth_start(&self, horizon: usize, filter: Option<usize>, mut n: usize) -> usize {
        match filter {
            None => n,
            Some(f) => {
                for r in self.runs.iter().filter(|r| r.segment == f) {
                    let here = r.len.saturating_sub(horizon);
                    if n < here {
                        return r.start + n;
                    }
                    n -= here;
                }
                unreachable!("index out of range for filtered starts")
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    total: usize,
    capacity: usize,
    ensemble_size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer { episodes: VecDeque::new(), total: 0, capacity, ensemble_size: 1 }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble_size
    }

    /// Raise the number of known ensemble members. Never shrinks.
    pub fn set_ensemble_size(&mut self, n: usize) {
        assert!(n >= self.ensemble_size, "ensemble never shrinks");
        self.ensemble_size = n;
    }

    pub fn push(&mut self, t: Transition) -> ReplayResult<()> {
        if t.segment_id >= self.ensemble_size {
            return Err(ReplayError::SegmentOutOfRange {
                segment_id: t.segment_id,
                ensemble_size: self.ensemble_size,
            });
        }

        let open_matches = self.episodes.back().is_some_and(|ep| ep.id == t.episode_id);
        if open_matches {
            let ep = self.episodes.back_mut().unwrap();
            let last = ep.transitions.last().unwrap();
            if t.step_index != last.step_index + 1 {
                return Err(ReplayError::BrokenChain(format!(
                    "episode {}: step {} after step {}",
                    t.episode_id, t.step_index, last.step_index
                )));
            }
            if t.state != last.next_state {
                return Err(ReplayError::BrokenChain(format!(
                    "episode {}: state of step {} differs from previous next_state",
                    t.episode_id, t.step_index
                )));
            }
            match ep.runs.last_mut() {
                Some(run) if run.segment == t.segment_id => run.len += 1,
                _ => {
                    let start = ep.transitions.len();
                    ep.runs.push(SegRun { segment: t.segment_id, start, len: 1 });
                }
            }
            ep.transitions.push(t);
        } else {
            if t.step_index != 0 {
                return Err(ReplayError::BrokenChain(format!(
                    "episode {} must start at step 0, got {}",
                    t.episode_id, t.step_index
                )));
            }
            let mut ep = Episode { id: t.episode_id, transitions: Vec::new(), runs: Vec::new() };
            ep.runs.push(SegRun { segment: t.segment_id, start: 0, len: 1 });
            ep.transitions.push(t);
            self.episodes.push_back(ep);
        }
        self.total += 1;

        while self.total > self.capacity {
            if self.episodes.len() == 1 {
                return Err(ReplayError::CapacityTooSmall(self.capacity));
            }
            let evicted = self.episodes.pop_front().unwrap();
            self.total -= evicted.transitions.len();
        }
        Ok(())
    }

    /// Total number of admissible window starts for this horizon and filter.
    pub fn valid_start_count(&self, horizon: usize, filter: Option<usize>) -> usize {
        self.episodes.iter().map(|ep| ep.valid_starts(horizon, filter)).sum()
    }

    /// Draw `batch` windows of `horizon + 1` consecutive transitions,
    /// uniformly over every admissible start position in the buffer.
    pub fn sample_sequences(
        &self,
        batch: usize,
        horizon: usize,
        filter: Option<usize>,
        rng: &mut impl Rng,
    ) -> ReplayResult<Vec<&[Transition]>> {
        let counts: Vec<usize> =
            self.episodes.iter().map(|ep| ep.valid_starts(horizon, filter)).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(ReplayError::NotEnoughData { horizon, filter });
        }

        // Draw flat indices, then resolve them in one sweep over episodes.
        let mut draws: Vec<(usize, usize)> =
            (0..batch).map(|slot| (rng.gen_range(0..total), slot)).collect();
        draws.sort_unstable();

        let mut out: Vec<&[Transition]> = vec![&[]; batch];
        let mut ep_idx = 0;
        let mut below = 0; // flat index of episodes[ep_idx]'s first start
        for (flat, slot) in draws {
            while flat - below >= counts[ep_idx] {
                below += counts[ep_idx];
                ep_idx += 1;
            }
            let ep = &self.episodes[ep_idx];
            let start = ep.nth_start(horizon, filter, flat - below);
            out[slot] = &ep.transitions[start..=start + horizon];
        }
        Ok(out)
    }

    /// Serialize every episode with the checkpoint tensor convention.
    pub fn dump_to<W: Write>(&self, w: &mut W) -> ReplayResult<()> {
        let mut named = BTreeMap::new();
        named.insert(
            "buffer.meta".to_string(),
            Tensor::row_vector(&[
                self.capacity as f64,
                self.ensemble_size as f64,
                self.episodes.len() as f64,
            ]),
        );
        for (i, ep) in self.episodes.iter().enumerate() {
            let n = ep.transitions.len();
            let sdim = ep.transitions[0].state.len();
            let adim = ep.transitions[0].action.len();
            let mut states = Tensor::zeros(n, sdim);
            let mut actions = Tensor::zeros(n, adim);
            let mut next_states = Tensor::zeros(n, sdim);
            // Per row: reward-present flag, reward, segment, step, skill-present, skill.
            let mut meta = Tensor::zeros(n, 6);
            for (r, t) in ep.transitions.iter().enumerate() {
                states.row_mut(r).copy_from_slice(&t.state);
                actions.row_mut(r).copy_from_slice(&t.action);
                next_states.row_mut(r).copy_from_slice(&t.next_state);
                let m = meta.row_mut(r);
                m[0] = t.reward.is_some() as u8 as f64;
                m[1] = t.reward.unwrap_or(0.0);
                m[2] = t.segment_id as f64;
                m[3] = t.step_index as f64;
                m[4] = t.skill_id.is_some() as u8 as f64;
                m[5] = t.skill_id.unwrap_or(0) as f64;
            }
            named.insert(format!("ep{i}/id"), Tensor::scalar(ep.id as f64));
            named.insert(format!("ep{i}/states"), states);
            named.insert(format!("ep{i}/actions"), actions);
            named.insert(format!("ep{i}/next_states"), next_states);
            named.insert(format!("ep{i}/meta"), meta);
        }
        write_tensors(w, &named)?;
        Ok(())
    }

    pub fn load_from<R: Read>(r: &mut R) -> ReplayResult<Self> {
        let named = read_tensors(r)?;
        let meta = named
            .get("buffer.meta")
            .ok_or_else(|| ReplayError::MalformedDump("missing buffer.meta".into()))?;
        if meta.len() != 3 {
            return Err(ReplayError::MalformedDump("buffer.meta must have 3 entries".into()));
        }
        let mut buffer = ReplayBuffer::new(meta.data()[0] as usize);
        buffer.ensemble_size = (meta.data()[1] as usize).max(1);
        let episode_count = meta.data()[2] as usize;

        for i in 0..episode_count {
            let fetch = |field: &str| {
                named.get(&format!("ep{i}/{field}")).ok_or_else(|| {
                    ReplayError::MalformedDump(format!("missing ep{i}/{field}"))
                })
            };
            let id = fetch("id")?.item().map_err(ReplayError::from)? as u64;
            let states = fetch("states")?;
            let actions = fetch("actions")?;
            let next_states = fetch("next_states")?;
            let meta = fetch("meta")?;
            let n = states.rows();
            if actions.rows() != n || next_states.rows() != n || meta.rows() != n || meta.cols() != 6
            {
                return Err(ReplayError::MalformedDump(format!(
                    "episode {i} field shapes disagree"
                )));
            }
            for r in 0..n {
                let m = meta.row(r);
                buffer.push(Transition {
                    state: states.row(r).to_vec(),
                    action: actions.row(r).to_vec(),
                    reward: (m[0] != 0.0).then_some(m[1]),
                    next_state: next_states.row(r).to_vec(),
                    segment_id: m[2] as usize,
                    episode_id: id,
                    step_index: m[3] as usize,
                    skill_id: (m[4] != 0.0).then_some(m[5] as usize),
                })?;
            }
        }
        Ok(buffer)
    }
}

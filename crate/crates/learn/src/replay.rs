//! Fixed-capacity FIFO experience store with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;
use ritp_core::dynamics::BicycleState;
use ritp_core::scene::{AgentState, Scenario};
use ritp_core::trajectory::TrajectoryAction;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureError, SceneInput};

pub const DEFAULT_CAPACITY: usize = 10_000;

/// A simulated state by reference: corpus index, step, and the ego's own
/// (simulated) history; other agents come from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRef {
    pub scenario: usize,
    pub step: usize,
    pub ego: BicycleState,
    pub ego_history: Vec<AgentState>,
}

impl StateRef {
    pub fn scene(&self, corpus: &[Scenario]) -> Result<SceneInput, FeatureError> {
        SceneInput::from_ego_window(&corpus[self.scenario], self.step, &self.ego_history)
    }
}

/// One transition. Sampler actions are regenerated from `state.ego` on
/// demand rather than stored; the sampler is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: StateRef,
    pub action: TrajectoryAction,
    pub reward: f64,
    pub next: StateRef,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Evicts the oldest item when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    /// `n` indices drawn uniformly with replacement; `None` when fewer than `n` items.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<usize>> {
        (self.items.len() >= n && n > 0).then(|| (0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<&T>> {
        self.sample_indices(n, rng).map(|ix| ix.into_iter().map(|i| &self.items[i]).collect())
    }
}

//! Fixed-capacity FIFO experience store with uniform sampling.

use rand::Rng;
use thiserror::Error;

use crate::netcore::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("buffer holds {len} experiences, batch needs {batch}")]
    WarmingUp { len: usize, batch: usize },
    #[error("experience has state width {got}, buffer expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid experience: {0}")]
    Invalid(&'static str),
}

/// One transition `(state, action, reward, next_state)`.
///
/// States are normalised joint prices; the action is the agent's own raw
/// squashed action; the reward is its profit.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience<S> {
    pub state: Vec<S>,
    pub action: S,
    pub reward: S,
    pub next_state: Vec<S>,
}

impl<S: Scalar> Experience<S> {
    pub fn validate(&self) -> Result<(), ReplayError> {
        if !(self.action > -S::one() && self.action < S::one()) {
            return Err(ReplayError::Invalid("action outside (-1, 1)"));
        }
        let finite = self.reward.is_finite() && self.state.iter().chain(&self.next_state).all(|v| v.is_finite());
        if !finite {
            return Err(ReplayError::Invalid("non-finite value"));
        }
        Ok(())
    }
}

/// A sampled batch in columnar form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub states: Matrix<S>,
    pub actions: Vec<S>,
    pub rewards: Vec<S>,
    pub next_states: Matrix<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, i: usize) -> Experience<S> {
        Experience {
            state: self.states.row(i).to_vec(),
            action: self.actions[i],
            reward: self.rewards[i],
            next_state: self.next_states.row(i).to_vec(),
        }
    }
}

/// Borrowed view of a buffer's storage.
#[derive(Debug, Clone, Copy)]
pub struct RawReplay<'a, S> {
    pub states: &'a [S],
    pub actions: &'a [S],
    pub rewards: &'a [S],
    pub next_states: &'a [S],
    pub cursor: usize,
}

/// Ring buffer of the most recent `capacity` experiences.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<S> {
    capacity: usize,
    state_dim: usize,
    states: Vec<S>,
    actions: Vec<S>,
    rewards: Vec<S>,
    next_states: Vec<S>,
    /// Slot the next push overwrites.
    cursor: usize,
    len: usize,
}

impl<S: Scalar> ReplayBuffer<S> {
    pub fn new(capacity: usize, state_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            state_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            cursor: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Whether a batch of `batch` can be drawn without repeating the
    /// warmup phase: `Err(WarmingUp)` while the buffer is shorter.
    pub fn ready(&self, batch: usize) -> Result<(), ReplayError> {
        if self.len < batch {
            return Err(ReplayError::WarmingUp { len: self.len, batch });
        }
        Ok(())
    }

    pub fn push(&mut self, exp: Experience<S>) -> Result<(), ReplayError> {
        for got in [exp.state.len(), exp.next_state.len()] {
            if got != self.state_dim {
                return Err(ReplayError::Dimension {
                    expected: self.state_dim,
                    got,
                });
            }
        }
        exp.validate()?;
        let d = self.state_dim;
        if self.len < self.capacity {
            self.states.extend_from_slice(&exp.state);
            self.next_states.extend_from_slice(&exp.next_state);
            self.actions.push(exp.action);
            self.rewards.push(exp.reward);
            self.len += 1;
        } else {
            let slot = self.cursor;
            self.states[slot * d..(slot + 1) * d].copy_from_slice(&exp.state);
            self.next_states[slot * d..(slot + 1) * d].copy_from_slice(&exp.next_state);
            self.actions[slot] = exp.action;
            self.rewards[slot] = exp.reward;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    fn slot(&self, slot: usize) -> Experience<S> {
        let d = self.state_dim;
        Experience {
            state: self.states[slot * d..(slot + 1) * d].to_vec(),
            action: self.actions[slot],
            reward: self.rewards[slot],
            next_state: self.next_states[slot * d..(slot + 1) * d].to_vec(),
        }
    }

    /// Stored experiences from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = Experience<S>> + '_ {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len).map(move |i| self.slot((start + i) % self.capacity))
    }

    /// `batch` independent uniform draws with replacement.
    ///
    /// Only an empty buffer is an error; a batch larger than the buffer
    /// simply repeats items. Learners gate on [`ReplayBuffer::ready`].
    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch<S>, ReplayError> {
        if self.len == 0 {
            return Err(ReplayError::WarmingUp { len: self.len, batch });
        }
        let d = self.state_dim;
        let mut states = Vec::with_capacity(batch * d);
        let mut next_states = Vec::with_capacity(batch * d);
        let mut actions = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..self.len);
            states.extend_from_slice(&self.states[i * d..(i + 1) * d]);
            next_states.extend_from_slice(&self.next_states[i * d..(i + 1) * d]);
            actions.push(self.actions[i]);
            rewards.push(self.rewards[i]);
        }
        Ok(Batch {
            states: Matrix::from_vec(batch, d, states).expect("sized above"),
            actions,
            rewards,
            next_states: Matrix::from_vec(batch, d, next_states).expect("sized above"),
        })
    }

    /// Storage in slot order, for exact persistence.
    pub fn raw_parts(&self) -> RawReplay<'_, S> {
        RawReplay {
            states: &self.states,
            actions: &self.actions,
            rewards: &self.rewards,
            next_states: &self.next_states,
            cursor: self.cursor,
        }
    }

    /// Inverse of [`ReplayBuffer::raw_parts`]; validates every slot.
    pub fn from_raw_parts(capacity: usize, state_dim: usize, raw: RawReplay<'_, S>) -> Result<Self, ReplayError> {
        let len = raw.actions.len();
        let consistent = len <= capacity
            && raw.rewards.len() == len
            && raw.states.len() == len * state_dim
            && raw.next_states.len() == len * state_dim
            && (raw.cursor == len % capacity || (len == capacity && raw.cursor < capacity));
        if !consistent || capacity == 0 {
            return Err(ReplayError::Invalid("inconsistent raw buffer layout"));
        }
        let buf = Self {
            capacity,
            state_dim,
            states: raw.states.to_vec(),
            actions: raw.actions.to_vec(),
            rewards: raw.rewards.to_vec(),
            next_states: raw.next_states.to_vec(),
            cursor: raw.cursor,
            len,
        };
        for slot in 0..len {
            buf.slot(slot).validate()?;
        }
        Ok(buf)
    }

    /// Rebuilds a buffer from oldest-to-newest experiences.
    pub fn from_experiences(
        capacity: usize,
        state_dim: usize,
        items: impl IntoIterator<Item = Experience<S>>,
    ) -> Result<Self, ReplayError> {
        let mut buf = Self::new(capacity, state_dim);
        for e in items {
            buf.push(e)?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp(tag: f64) -> Experience<f64> {
        Experience {
            state: vec![tag, -tag],
            action: 0.5,
            reward: tag,
            next_state: vec![tag + 1.0, 0.0],
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(2, 2);
        for t in [1.0, 2.0, 3.0] {
            buf.push(exp(t)).unwrap();
        }
        let kept: Vec<f64> = buf.iter().map(|e| e.reward).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
    }

    #[test]
    fn first_push() {
        let mut buf = ReplayBuffer::new(5, 2);
        assert!(buf.is_empty());
        buf.push(exp(0.0)).unwrap();
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn full_capacity_length() {
        let mut buf = ReplayBuffer::new(100_000, 2);
        for t in 0..100_000 {
            buf.push(exp(t as f64)).unwrap();
        }
        assert_eq!(buf.len(), 100_000);
        buf.push(exp(-1.0)).unwrap();
        assert_eq!(buf.len(), 100_000);
    }

    #[test]
    fn single_item_batch() {
        let mut buf = ReplayBuffer::new(4, 2);
        buf.push(exp(7.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample_uniform(3, &mut rng).unwrap();
        assert_eq!(batch.len(), 3);
        for i in 0..3 {
            assert_eq!(batch.get(i), exp(7.0));
        }
        assert_eq!(buf.ready(3), Err(ReplayError::WarmingUp { len: 1, batch: 3 }));
        assert_eq!(buf.ready(1), Ok(()));
    }

    #[test]
    fn rejects_bad_experiences() {
        let mut buf = ReplayBuffer::new(4, 2);
        let mut e = exp(1.0);
        e.action = 1.0;
        assert!(buf.push(e).is_err());
        let mut e = exp(1.0);
        e.reward = f64::NAN;
        assert!(buf.push(e).is_err());
        let mut e = exp(1.0);
        e.state.push(0.0);
        assert!(buf.push(e).is_err());
    }

    #[test]
    fn warming_up_error() {
        let buf = ReplayBuffer::<f64>::new(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            buf.sample_uniform(1, &mut rng).unwrap_err(),
            ReplayError::WarmingUp { len: 0, batch: 1 }
        );
    }

    #[test]
    fn sampling_is_uniform_chi_square() {
        let mut buf = ReplayBuffer::new(10, 2);
        for t in 0..10 {
            buf.push(exp(t as f64)).unwrap();
        }
        let before = buf.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        let mut left = draws;
        while left > 0 {
            let b = left.min(1000);
            let batch = buf.sample_uniform(b, &mut rng).unwrap();
            for r in batch.rewards {
                counts[r as usize] += 1;
            }
            left -= b;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Upper 0.001 quantile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 27.877, "chi2 = {chi2}");
        assert_eq!(buf, before);
    }

    #[test]
    fn raw_parts_round_trip() {
        let mut buf = ReplayBuffer::new(3, 2);
        for t in 0..5 {
            buf.push(exp(t as f64)).unwrap();
        }
        let copy = ReplayBuffer::from_raw_parts(3, 2, buf.raw_parts()).unwrap();
        assert_eq!(copy, buf);
        let mut raw = buf.raw_parts();
        raw.cursor = 7;
        assert!(ReplayBuffer::from_raw_parts(3, 2, raw).is_err());
    }

    proptest! {
        #[test]
        fn keeps_most_recent(capacity in 1usize..20, pushes in 0usize..60) {
            let mut buf = ReplayBuffer::new(capacity, 2);
            for t in 0..pushes {
                buf.push(exp(t as f64)).unwrap();
            }
            let kept: Vec<f64> = buf.iter().map(|e| e.reward).collect();
            let start = pushes.saturating_sub(capacity);
            let want: Vec<f64> = (start..pushes).map(|t| t as f64).collect();
            prop_assert_eq!(kept, want);
        }
    }
}

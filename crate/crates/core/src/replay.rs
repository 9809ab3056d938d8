//! Ring-buffer replay storage and multi-step segment sampling.
//!
//! Segments are contiguous runs of up to `n + 1` transitions that never cross
//! an episode boundary; a segment may end on a terminal transition.
//!
//! Snapshot format (little endian), version 1:
//!
//! ```text
//! magic      b"TSRB"
//! version    u32
//! capacity   u64
//! warmup     u64
//! rows, cols u64, u64           observation window shape
//! next_ep    u64
//! count      u64
//! count × {
//!     episode u64
//!     action, reward, behavior_log_density, behavior_mean, behavior_log_std  f64 × 5
//!     done u8
//!     obs:      balance f64, holdings f64, rows*cols f64
//!     next_obs: balance f64, holdings f64, rows*cols f64
//! }
//! ```

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 100_000;
pub const DEFAULT_WARMUP: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    /// Continuous action as emitted by the policy, before discretization.
    pub action: f64,
    pub reward: f64,
    pub next_obs: Observation,
    pub behavior_log_density: f64,
    /// Pre-squash Gaussian parameters of the acting policy at `obs`.
    pub behavior_mean: f64,
    pub behavior_log_std: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub transitions: Vec<Transition>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    warmup: usize,
    entries: VecDeque<(u64, Transition)>,
    episode: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, warmup: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            warmup,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            episode: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_ready(&self) -> bool {
        self.entries.len() >= self.warmup
    }

    /// Episode counter; advances after every pushed terminal transition.
    pub fn current_episode(&self) -> u64 {
        self.episode
    }

    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        let done = t.done;
        self.entries.push_back((self.episode, t));
        if done {
            self.episode += 1;
        }
    }

    /// Marks an episode boundary without a terminal transition, e.g. when a
    /// collection loop is interrupted.
    pub fn end_episode(&mut self) {
        self.episode += 1;
    }

    pub fn get(&self, idx: usize) -> Option<&Transition> {
        self.entries.get(idx).map(|(_, t)| t)
    }

    /// The segment of at most `n + 1` transitions starting at `start`.
    pub fn segment_at(&self, start: usize, n: usize) -> Segment {
        let mut transitions = Vec::with_capacity(n + 1);
        let (episode, _) = self.entries[start];
        for idx in start..self.entries.len().min(start + n + 1) {
            let (ep, t) = &self.entries[idx];
            if *ep != episode {
                break;
            }
            transitions.push(t.clone());
            if t.done {
                break;
            }
        }
        Segment { transitions }
    }

    pub fn sample_segments<R: Rng + ?Sized>(&self, batch: usize, n: usize, rng: &mut R) -> Result<Vec<Segment>> {
        if !self.is_ready() || self.is_empty() {
            return Err(Error::NotReady {
                len: self.len(),
                warmup: self.warmup,
            });
        }
        Ok((0..batch)
            .map(|_| self.segment_at(rng.gen_range(0..self.entries.len()), n))
            .collect())
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::Checkpoint(format!("snapshot write failed: {e}"));
        let (rows, cols) = self
            .entries
            .front()
            .map(|(_, t)| (t.obs.rows, t.obs.cols))
            .unwrap_or((0, 0));
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TSRB");
        buf.extend_from_slice(&1u32.to_le_bytes());
        for v in [self.capacity, self.warmup, rows, cols] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.episode.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (ep, t) in &self.entries {
            buf.extend_from_slice(&ep.to_le_bytes());
            for v in [t.action, t.reward, t.behavior_log_density, t.behavior_mean, t.behavior_log_std] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(t.done as u8);
            for o in [&t.obs, &t.next_obs] {
                buf.extend_from_slice(&o.balance.to_le_bytes());
                buf.extend_from_slice(&o.holdings.to_le_bytes());
                for v in &o.window {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("snapshot read failed: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != b"TSRB" {
            return Err(Error::Checkpoint("bad snapshot magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported snapshot version {version}")));
        }
        let capacity = cur.u64()? as usize;
        let warmup = cur.u64()? as usize;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let episode = cur.u64()?;
        let count = cur.u64()? as usize;
        if capacity == 0 || count > capacity {
            return Err(Error::Checkpoint("inconsistent snapshot header".into()));
        }
        let mut buffer = ReplayBuffer::new(capacity, warmup);
        buffer.episode = episode;
        for _ in 0..count {
            let ep = cur.u64()?;
            let action = cur.f64()?;
            let reward = cur.f64()?;
            let behavior_log_density = cur.f64()?;
            let behavior_mean = cur.f64()?;
            let behavior_log_std = cur.f64()?;
            let done = cur.take(1)?[0] != 0;
            let mut read_obs = || -> Result<Observation> {
                let balance = cur.f64()?;
                let holdings = cur.f64()?;
                let window = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Observation {
                    balance,
                    holdings,
                    rows,
                    cols,
                    window,
                })
            };
            let obs = read_obs()?;
            let next_obs = read_obs()?;
            buffer.entries.push_back((
                ep,
                Transition {
                    obs,
                    action,
                    reward,
                    next_obs,
                    behavior_log_density,
                    behavior_mean,
                    behavior_log_std,
                    done,
                },
            ));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in snapshot".into()));
        }
        Ok(buffer)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated snapshot".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

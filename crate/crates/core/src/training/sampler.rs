use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Polarity, SaevalRecord, TaskType};
use crate::error::{Error, Result};

const SAMPLER_TAG: u64 = 0x5341_4d50;
const PAIR_TAG: u64 = 0x5041_4952;

/// Mixes a list of integers into one seed (splitmix64 chaining).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Pool {
    members: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    shuffles: u64,
}

/// Where each pool's cursor stands; enough to rebuild a [`TaskPools`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rotation: usize,
    /// Per task: completed reshuffles and position in the current order.
    pub cursors: BTreeMap<TaskType, (u64, usize)>,
}

/// One shuffled pool of record indices per task. A pool reshuffles, with a
/// permutation seeded by `(seed, task, reshuffle count)`, once exhausted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPools {
    seed: u64,
    pools: BTreeMap<TaskType, Pool>,
    rotation: usize,
}

impl TaskPools {
    /// Pools of the records of each task; every task needs at least one.
    pub fn new(records: &[SaevalRecord], seed: u64) -> Result<Self> {
        let mut members: BTreeMap<TaskType, Vec<usize>> = TaskType::ALL.iter().map(|&t| (t, vec![])).collect();
        for (i, r) in records.iter().enumerate() {
            members.get_mut(&r.task_type).expect("all tasks present").push(i);
        }
        Self::from_members(members, seed)
    }

    pub fn from_members(members: BTreeMap<TaskType, Vec<usize>>, seed: u64) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for task in TaskType::ALL {
            let m = members.get(&task).cloned().unwrap_or_default();
            if m.is_empty() {
                return Err(Error::Config(format!("task-average sampling needs {task} records")));
            }
            let order = permutation(&m, seed, task, 0);
            pools.insert(task, Pool { members: m, order, cursor: 0, shuffles: 0 });
        }
        Ok(TaskPools { seed, pools, rotation: 0 })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            rotation: self.rotation,
            cursors: self.pools.iter().map(|(&t, p)| (t, (p.shuffles, p.cursor))).collect(),
        }
    }

    pub fn restore(&mut self, state: &SamplerState) -> Result<()> {
        if state.rotation >= TaskType::ALL.len() {
            return Err(Error::Checkpoint(format!("sampler rotation {}", state.rotation)));
        }
        for (task, pool) in &mut self.pools {
            let &(shuffles, cursor) = state
                .cursors
                .get(task)
                .ok_or_else(|| Error::Checkpoint(format!("sampler state lacks {task}")))?;
            if cursor > pool.members.len() {
                return Err(Error::Checkpoint(format!("{task} cursor {cursor} past pool end")));
            }
            pool.order = permutation(&pool.members, self.seed, *task, shuffles);
            pool.shuffles = shuffles;
            pool.cursor = cursor;
        }
        self.rotation = state.rotation;
        Ok(())
    }

    /// Per-task counts of the next batch, in task order.
    pub fn counts(&self, batch_size: usize) -> [usize; 4] {
        let n = TaskType::ALL.len();
        let mut c = [batch_size / n; 4];
        for k in 0..batch_size % n {
            c[(self.rotation + k) % n] += 1;
        }
        c
    }

    fn draw(&mut self, task: TaskType) -> usize {
        let seed = self.seed;
        let p = self.pools.get_mut(&task).expect("all tasks present");
        if p.cursor == p.order.len() {
            p.shuffles += 1;
            p.order = permutation(&p.members, seed, task, p.shuffles);
            p.cursor = 0;
        }
        p.cursor += 1;
        p.order[p.cursor - 1]
    }
}

fn permutation(members: &[usize], seed: u64, task: TaskType, shuffles: u64) -> Vec<usize> {
    let mut order = members.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, SAMPLER_TAG, task.index() as u64, shuffles]));
    order.shuffle(&mut rng);
    order
}

/// `floor(batch_size / 4)` records from every task pool; the remainder goes
/// to consecutive tasks starting at a rotating offset, so per-step counts
/// and running totals never differ by more than one.
pub fn task_average_sample(pools: &mut TaskPools, batch_size: usize) -> Result<Vec<usize>> {
    let n = TaskType::ALL.len();
    if batch_size < n {
        return Err(Error::Config(format!("batch size {batch_size} below the {n} tasks")));
    }
    let counts = pools.counts(batch_size);
    let mut out = Vec::with_capacity(batch_size);
    for (task, &c) in TaskType::ALL.iter().zip(&counts) {
        for _ in 0..c {
            out.push(pools.draw(*task));
        }
    }
    pools.rotation = (pools.rotation + batch_size % n) % n;
    Ok(out)
}

/// Same-polarity record pairs of one epoch. Each polarity pool is shuffled
/// and paired off without replacement; an odd leftover pairs with a random
/// member of its pool. The pair list is then shuffled as a whole.
pub fn stage1_pairs(records: &[SaevalRecord], seed: u64, epoch: u64) -> Result<Vec<(usize, usize, Polarity)>> {
    let pools = crate::data::build_pools(records)?;
    let mut pairs = Vec::new();
    for (p, pool) in &pools {
        if pool.records.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, PAIR_TAG, epoch, p.index() as u64]));
        let mut order = pool.records.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(2) {
            let partner = match chunk {
                [_, b] => *b,
                _ => pool.records[rng.random_range(0..pool.records.len())],
            };
            pairs.push((chunk[0], partner, *p));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, PAIR_TAG, epoch, u64::MAX]));
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

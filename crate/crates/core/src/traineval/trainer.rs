use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::params::ParamStore;
use crate::synthworld::{Episode, World};
use crate::tape::Tape;

use super::schedule::{sgd_step, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Stop after this many steps; `None` runs the whole schedule.
    pub steps: Option<usize>,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            steps: None,
            clip_norm: Some(5.0),
        }
    }
}

/// splitmix64 finaliser, used to derive independent seeds.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Episode seed for training draw `index` of run `seed`. The top bit is
/// clear, keeping training seeds disjoint from [`eval_seed`].
pub fn train_seed(seed: u64, index: u64) -> u64 {
    mix(mix(seed) ^ index) >> 1
}

/// Seeds of held-out evaluation episodes.
pub fn eval_seed(index: u64) -> u64 {
    (mix(index ^ 0xe7a1) >> 1) | (1 << 63)
}

/// Scales all gradients by `max / ‖g‖` when the global norm exceeds `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids
        .iter()
        .flat_map(|&id| store.grad(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max && norm.is_finite() {
        let f = max / norm;
        for id in ids {
            store.entry_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}

/// Where training episodes come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh episodes from the world on every step.
    World(World),
    /// A fixed dataset sampled with replacement.
    Episodes(Vec<Episode>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loc: f64,
    pub cls: Vec<f64>,
}

/// Plain SGD over the schedule. The batch at step `s` depends only on
/// `(seed, s)`, so a run resumed from a checkpoint continues bit-exactly.
pub struct Trainer {
    pub model: Model,
    pub schedule: Schedule,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub data: DataSource,
}

impl Trainer {
    pub fn new(model: Model, schedule: Schedule, config: TrainConfig, seed: u64, data: DataSource) -> Result<Self> {
        schedule.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let DataSource::Episodes(eps) = &data {
            if eps.is_empty() {
                return Err(Error::Config("training dataset is empty".into()));
            }
        }
        Ok(Self {
            model,
            schedule,
            config,
            seed,
            step: 0,
            data,
        })
    }

    pub fn resume(ck: &Checkpoint, schedule: Schedule, config: TrainConfig, data: DataSource) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let mut t = Self::new(model, schedule, config, ck.seed, data)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn target_steps(&self) -> usize {
        self.config.steps.unwrap_or_else(|| self.schedule.total_steps())
    }

    /// Episodes and fed features for step `step`.
    pub fn batch(&self, step: usize) -> Vec<(Episode, Option<crate::tensor::Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(step as u64)));
        (0..self.config.batch_size)
            .map(|b| {
                let ep = match &self.data {
                    DataSource::World(w) => {
                        w.generate(train_seed(self.seed, (step * self.config.batch_size + b) as u64))
                    }
                    DataSource::Episodes(eps) => eps[rng.random_range(0..eps.len())].clone(),
                };
                // Clip episodes are trained on a random observed prefix.
                let len = ep.clip_len();
                let feats = (len > 0).then(|| {
                    let s = rng.random_range(1..=len);
                    ep.prefix_features(s).expect("clip episode")
                });
                (ep, feats)
            })
            .collect()
    }

    /// Mean batch loss at the current parameters, without updating.
    pub fn batch_loss(&self, step: usize) -> Result<StepLog> {
        let mut log = StepLog {
            step,
            lr: self.schedule.lr(step),
            loss: 0.0,
            loc: 0.0,
            cls: vec![0.0; self.model.config.horizon + 1],
        };
        let scale = 1.0 / self.config.batch_size as f64;
        for (ep, feats) in self.batch(step) {
            let mut tape = Tape::new();
            if let Some(parts) = self.model.episode_loss(&mut tape, &ep, feats.as_ref())? {
                log.loss += scale * tape.scalar(parts.total);
                log.loc += scale * tape.scalar(parts.loc);
                for (acc, c) in log.cls.iter_mut().zip(&parts.cls) {
                    *acc += scale * tape.scalar(*c);
                }
            }
        }
        Ok(log)
    }

    /// One forward/backward/update pass.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let scale = 1.0 / self.config.batch_size as f64;
        let mut log = StepLog {
            step,
            lr: self.schedule.lr(step),
            loss: 0.0,
            loc: 0.0,
            cls: vec![0.0; self.model.config.horizon + 1],
        };
        self.model.store.zero_grads();
        for (ep, feats) in self.batch(step) {
            let mut tape = Tape::new();
            let Some(parts) = self.model.episode_loss(&mut tape, &ep, feats.as_ref())? else {
                continue;
            };
            let total = tape.scale(parts.total, scale);
            tape.backward(total)?;
            tape.accumulate_into(&mut self.model.store);
            log.loss += tape.scalar(total);
            log.loc += scale * tape.scalar(parts.loc);
            for (acc, c) in log.cls.iter_mut().zip(&parts.cls) {
                *acc += scale * tape.scalar(*c);
            }
        }
        if !log.loss.is_finite() {
            let param = self
                .model
                .store
                .ids()
                .find(|&id| self.model.store.grad(id).data().iter().any(|g| !g.is_finite()))
                .map_or_else(|| "loss".to_string(), |id| self.model.store.entry(id).name.clone());
            return Err(Error::Divergence { param, step });
        }
        if let Some(max) = self.config.clip_norm {
            clip_grad_norm(&mut self.model.store, max);
        }
        sgd_step(&mut self.model.store, &self.schedule, step)?;
        self.step += 1;
        Ok(log)
    }

    /// Trains until [`Self::target_steps`], reporting every step to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.step < self.target_steps() {
            let log = self.train_step()?;
            on_step(&log);
        }
        Ok(())
    }

    pub fn checkpoint(&self, config_hash: Option<String>) -> Checkpoint {
        self.model.checkpoint(config_hash, self.seed, self.step)
    }
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::synthworld::{Episode, World, WorldConfig, WorldMode};

use super::report::{evaluate, EvalReport};
use super::schedule::Schedule;
use super::trainer::{eval_seed, DataSource, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    /// Template; `variant` is overridden per run.
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub train: TrainConfig,
    pub eval_episodes: usize,
    /// Accuracy@K points, evaluated in clip mode only.
    pub k_percents: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub report: Option<EvalReport>,
    /// Set when training diverged; the run is then excluded from means.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub ts: Vec<usize>,
    pub k_percents: Vec<f64>,
    pub num_classes: usize,
    pub runs: Vec<RunResult>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Standard error of the mean (sample standard deviation over √n).
pub fn std_err(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

impl AblationTable {
    pub fn reports(&self, variant: Variant) -> impl Iterator<Item = &EvalReport> {
        self.runs
            .iter()
            .filter(move |r| r.variant == variant)
            .filter_map(|r| r.report.as_ref())
    }

    /// Per-seed mAP at `t`.
    pub fn seed_maps(&self, variant: Variant, t: usize) -> Vec<f64> {
        self.reports(variant).filter_map(|r| r.map_at(t)).collect()
    }

    /// Per-seed mAP averaged over `t = 1..=T`.
    pub fn seed_future_maps(&self, variant: Variant) -> Vec<f64> {
        self.reports(variant)
            .filter_map(|r| {
                let v: Vec<f64> =
                    r.ts.iter()
                        .zip(&r.map)
                        .filter(|(t, _)| **t >= 1)
                        .map(|(_, m)| *m)
                        .collect();
                mean(&v)
            })
            .collect()
    }

    pub fn mean_map(&self, variant: Variant, t: usize) -> Option<f64> {
        mean(&self.seed_maps(variant, t))
    }

    pub fn mean_future_map(&self, variant: Variant) -> Option<f64> {
        mean(&self.seed_future_maps(variant))
    }

    /// Per-seed accuracy at `k`.
    pub fn seed_accuracy(&self, variant: Variant, k: f64) -> Vec<f64> {
        self.reports(variant)
            .filter_map(|r| r.accuracy_at_k.iter().find(|(x, _)| *x == k).map(|(_, a)| *a))
            .collect()
    }

    pub fn mean_accuracy(&self, variant: Variant, k: f64) -> Option<f64> {
        mean(&self.seed_accuracy(variant, k))
    }

    /// `|variants| × |ts|` seed-mean mAP (NaN where every run failed).
    pub fn grid(&self) -> Vec<Vec<f64>> {
        self.variants
            .iter()
            .map(|&v| {
                self.ts
                    .iter()
                    .map(|&t| self.mean_map(v, t).unwrap_or(f64::NAN))
                    .collect()
            })
            .collect()
    }

    /// Seed-mean AP of class `c` at `t`.
    pub fn class_ap(&self, variant: Variant, t: usize, c: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .reports(variant)
            .filter_map(|r| {
                let k = r.ts.iter().position(|&x| x == t)?;
                r.per_class[k][c]
            })
            .collect();
        mean(&v)
    }

    pub fn grid_csv(&self) -> String {
        let mut out = String::from("variant");
        for t in &self.ts {
            out.push_str(&format!(",t{t}"));
        }
        out.push_str(",mean_t1_plus,stderr_t1_plus,runs_ok\n");
        for (v, row) in self.variants.iter().zip(self.grid()) {
            out.push_str(v.name());
            for m in row {
                out.push_str(&format!(",{m:.6}"));
            }
            let fut = self.seed_future_maps(*v);
            out.push_str(&format!(
                ",{:.6},{:.6},{}\n",
                mean(&fut).unwrap_or(f64::NAN),
                std_err(&fut).unwrap_or(f64::NAN),
                fut.len()
            ));
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("variant");
        for k in &self.k_percents {
            out.push_str(&format!(",k{k}"));
        }
        out.push('\n');
        for &v in &self.variants {
            out.push_str(v.name());
            for &k in &self.k_percents {
                out.push_str(&format!(",{:.6}", self.mean_accuracy(v, k).unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }

    /// Per-class `AP(t=0) − AP(t=1)` for `variant`.
    pub fn horizon_drop_csv(&self, variant: Variant) -> String {
        let mut out = String::from("class,ap_t0,ap_t1,drop\n");
        for c in 0..self.num_classes {
            let (a, b) = (self.class_ap(variant, 0, c), self.class_ap(variant, 1, c));
            if let (Some(a), Some(b)) = (a, b) {
                out.push_str(&format!("{c},{a:.6},{b:.6},{:.6}\n", a - b));
            }
        }
        out
    }

    /// Per-class AP difference between two variants, averaged over `t ≥ 1`.
    pub fn variant_delta_csv(&self, a: Variant, b: Variant) -> String {
        let mut out = format!("class,{a},{b},delta\n");
        let future: Vec<usize> = self.ts.iter().copied().filter(|&t| t >= 1).collect();
        for c in 0..self.num_classes {
            let avg = |v: Variant| {
                let xs: Vec<f64> = future.iter().filter_map(|&t| self.class_ap(v, t, c)).collect();
                mean(&xs)
            };
            if let (Some(x), Some(y)) = (avg(a), avg(b)) {
                out.push_str(&format!("{c},{x:.6},{y:.6},{:.6}\n", x - y));
            }
        }
        out
    }
}

/// Held-out episodes shared by every run of an ablation.
pub fn eval_set(world: &World, count: usize) -> Vec<Episode> {
    (0..count as u64).map(|i| world.generate(eval_seed(i))).collect()
}

fn run_one(
    cfg: &AblationConfig,
    world: &World,
    eval: &[Episode],
    variant: Variant,
    seed: u64,
    hash: Option<String>,
) -> Result<(f64, EvalReport)> {
    let model = Model::new(
        ModelConfig {
            variant,
            ..cfg.model.clone()
        },
        seed,
    )?;
    let mut trainer = Trainer::new(
        model,
        cfg.schedule.clone(),
        cfg.train.clone(),
        seed,
        DataSource::World(world.clone()),
    )?;
    let mut last = f64::NAN;
    trainer.run(|l| last = l.loss)?;
    let (ts, ks): (Vec<usize>, Vec<f64>) = match cfg.world.mode {
        WorldMode::MultiActor => ((0..=cfg.model.horizon).collect(), Vec::new()),
        WorldMode::SingleActorClip => (Vec::new(), cfg.k_percents.clone()),
    };
    let report = evaluate(&trainer.model, eval, &ts, &ks, seed, hash)?;
    Ok((last, report))
}

/// Trains every `(variant, seed)` pair on the same seeded data and
/// evaluates on one shared held-out set. Runs execute on the rayon pool;
/// results do not depend on scheduling.
pub fn run_ablation(cfg: &AblationConfig, config_hash: Option<String>) -> Result<AblationTable> {
    if cfg.seeds.len() < 3 {
        return Err(Error::Config("an ablation needs at least 3 seeds".into()));
    }
    if cfg.variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let world = World::new(cfg.world.clone())?;
    let eval = eval_set(&world, cfg.eval_episodes);
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(
            |&(variant, seed)| match run_one(cfg, &world, &eval, variant, seed, config_hash.clone()) {
                Ok((loss, report)) => RunResult {
                    variant,
                    seed,
                    final_loss: Some(loss),
                    report: Some(report),
                    error: None,
                },
                Err(e) => RunResult {
                    variant,
                    seed,
                    final_loss: None,
                    report: None,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();
    let ts = match cfg.world.mode {
        WorldMode::MultiActor => (0..=cfg.model.horizon).collect(),
        WorldMode::SingleActorClip => Vec::new(),
    };
    Ok(AblationTable {
        variants: cfg.variants.clone(),
        seeds: cfg.seeds.clone(),
        ts,
        k_percents: cfg.k_percents.clone(),
        num_classes: cfg.model.num_classes,
        runs,
    })
}

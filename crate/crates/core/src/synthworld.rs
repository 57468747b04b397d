//! Seeded multi-agent interaction world standing in for detector output.
//!
//! Agents sit in the unit square and carry one action label per step. Labels
//! follow a solo Markov chain, except that an agent in a trigger class pulls
//! every agent within `radius` (and itself) into the rule's target class for
//! `interaction_duration` steps. Each episode exposes only what a detector
//! would see at `t = 0`: a proposal box and a feature vector per node, where
//! some nodes are distractors (false positives) with noise-only features.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    MultiActor,
    SingleActorClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub mode: WorldMode,
    pub num_classes: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    /// Trailing feature dims reserved for the box position encoding.
    pub position_dims: usize,
    pub n_true_min: usize,
    pub n_true_max: usize,
    pub n_fake_min: usize,
    pub n_fake_max: usize,
    pub radius: f64,
    /// Solo chain: probability of keeping the current class.
    pub solo_stay: f64,
    /// Solo chain: probability of moving to class `(a + 1) mod A`.
    pub solo_next: f64,
    /// Explicit solo transition matrix; overrides `solo_stay`/`solo_next`.
    pub solo_transitions: Option<Vec<Vec<f64>>>,
    pub interactions: bool,
    pub interaction_triggers: Vec<usize>,
    pub interaction_targets: Vec<usize>,
    pub interaction_duration: usize,
    pub feature_noise: f64,
    pub embedding_norm: f64,
    pub distractor_scale: f64,
    pub box_jitter: f64,
    /// Proposals per actor in clip mode (all on the one actor).
    pub clip_views: usize,
    pub clip_steps: usize,
    pub clip_step_noise: f64,
    /// Seeds the class embeddings, shared by every episode of a world.
    pub embedding_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            mode: WorldMode::MultiActor,
            num_classes: 8,
            horizon: 5,
            feature_dim: 32,
            position_dims: 8,
            n_true_min: 2,
            n_true_max: 6,
            n_fake_min: 4,
            n_fake_max: 8,
            radius: 0.5,
            solo_stay: 0.5,
            solo_next: 0.35,
            solo_transitions: None,
            interactions: true,
            interaction_triggers: vec![1, 4],
            interaction_targets: vec![0, 3],
            interaction_duration: 2,
            feature_noise: 0.3,
            embedding_norm: 2.0,
            distractor_scale: 1.5,
            box_jitter: 0.05,
            clip_views: 4,
            clip_steps: 10,
            clip_step_noise: 1.8,
            embedding_seed: 0,
        }
    }
}

impl WorldConfig {
    /// Early-classification world: one actor per clip, seen by several
    /// proposals, predicted one step ahead.
    pub fn clip() -> Self {
        Self {
            mode: WorldMode::SingleActorClip,
            horizon: 1,
            n_true_min: 1,
            n_true_max: 1,
            n_fake_min: 2,
            n_fake_max: 4,
            interactions: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if self.position_dims != 8 || self.feature_dim < self.position_dims + self.num_classes {
            return bad(format!(
                "feature_dim {} too small for {} classes plus 8 position dims",
                self.feature_dim, self.num_classes
            ));
        }
        if self.n_true_min < 1 || self.n_true_min > self.n_true_max || self.n_fake_min > self.n_fake_max {
            return bad("invalid actor/distractor count ranges".into());
        }
        if self.interaction_triggers.len() != self.interaction_targets.len() {
            return bad("interaction_triggers and interaction_targets differ in length".into());
        }
        if self
            .interaction_triggers
            .iter()
            .chain(&self.interaction_targets)
            .any(|&c| c >= self.num_classes)
        {
            return bad("interaction class out of range".into());
        }
        if self.mode == WorldMode::SingleActorClip && (self.clip_steps == 0 || self.clip_views == 0) {
            return bad("clip mode needs clip_steps and clip_views".into());
        }
        let p = self.transition_matrix();
        for (i, row) in p.iter().enumerate() {
            if row.len() != self.num_classes
                || row.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite())
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return bad(format!("transition row {i} is not a probability vector"));
            }
        }
        Ok(())
    }

    /// Solo transition matrix `P[from][to]`.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(p) = &self.solo_transitions {
            return p.clone();
        }
        let a = self.num_classes;
        let rest = if a > 2 {
            (1.0 - self.solo_stay - self.solo_next) / (a - 2) as f64
        } else {
            0.0
        };
        (0..a)
            .map(|i| {
                (0..a)
                    .map(|j| {
                        if j == i {
                            self.solo_stay
                                + if a == 2 {
                                    1.0 - self.solo_stay - self.solo_next
                                } else {
                                    0.0
                                }
                        } else if j == (i + 1) % a {
                            self.solo_next
                        } else {
                            rest
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Fixed class embeddings, one row per class, living in the leading
    /// `feature_dim − position_dims` dims.
    pub fn class_embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.embedding_seed ^ 0x5eed_e3b0_u64);
        let dc = self.feature_dim - self.position_dims;
        let scale = self.embedding_norm / (dc as f64).sqrt();
        (0..self.num_classes)
            .map(|_| {
                let mut row: Vec<f64> = (0..dc).map(|_| normal(&mut rng) * scale).collect();
                row.resize(self.feature_dim, 0.0);
                row
            })
            .collect()
    }
}

/// Stationary distribution of a row-stochastic matrix, by solving
/// `π(P − I) = 0` with `Σπ = 1` through Gaussian elimination.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    // Unknowns π_j; rows j < n−1 hold Σ_i π_i (P_ij − δ_ij) = 0, the last row Σ π = 1.
    let mut m = vec![vec![0.0; n + 1]; n];
    for j in 0..n - 1 {
        for i in 0..n {
            m[j][i] = p[i][j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for i in 0..n {
        m[n - 1][i] = 1.0;
    }
    m[n - 1][n] = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for k in col..=n {
            m[col][k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in col..=n {
                        m[r][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    (0..n).map(|i| m[i][n]).collect()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Label sequences `t = 0..=T` for agents at fixed `positions` starting from
/// `initial` labels.
///
/// At each step, an agent not already in an interaction that is in a
/// trigger class and has another agent within `radius` fires its rule: both
/// it and every such neighbour take the rule's target class for
/// `interaction_duration` steps. Everyone else follows the solo chain.
pub fn evolve_labels<R: Rng + ?Sized>(
    config: &WorldConfig,
    positions: &[(f64, f64)],
    initial: &[usize],
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = positions.len();
    let p = config.transition_matrix();
    let mut labels: Vec<Vec<usize>> = initial.iter().map(|&a| vec![a]).collect();
    let mut remaining = vec![0usize; n];
    let near = |i: usize, j: usize| {
        let (dx, dy) = (positions[i].0 - positions[j].0, positions[i].1 - positions[j].1);
        i != j && (dx * dx + dy * dy).sqrt() < config.radius
    };
    for _ in 1..=config.horizon {
        let prev: Vec<usize> = labels.iter().map(|l| *l.last().unwrap()).collect();
        let mut forced: Vec<Option<usize>> = vec![None; n];
        if config.interactions {
            for i in 0..n {
                if remaining[i] > 0 {
                    continue;
                }
                let Some(rule) = config.interaction_triggers.iter().position(|&c| c == prev[i]) else {
                    continue;
                };
                let target = config.interaction_targets[rule];
                let partners: Vec<usize> = (0..n).filter(|&j| near(i, j) && remaining[j] == 0).collect();
                if partners.is_empty() {
                    continue;
                }
                forced[i].get_or_insert(target);
                for j in partners {
                    forced[j].get_or_insert(target);
                }
            }
        }
        for i in 0..n {
            // The solo draw happens for every agent so the random stream does
            // not depend on which rules fired.
            let solo = sample_categorical(&p[prev[i]], rng);
            let next = if remaining[i] > 0 {
                remaining[i] -= 1;
                prev[i]
            } else if let Some(target) = forced[i] {
                remaining[i] = config.interaction_duration.saturating_sub(1);
                target
            } else {
                solo
            };
            labels[i].push(next);
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    #[serde(rename = "box")]
    pub proposal: BBox,
    pub feat: Vec<f64>,
    pub distractor: bool,
    /// Per-step features, clip mode only; `feat` is their mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat_steps: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub gt_box: BBox,
    pub labels: Vec<usize>,
}

/// One sample. Non-distractor nodes map to `actors` in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub nodes: Vec<Node>,
    pub actors: Vec<Actor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Episode {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn horizon(&self) -> usize {
        self.actors.first().map_or(0, |a| a.labels.len().saturating_sub(1))
    }

    /// `Some(actor index)` for true-actor nodes, `None` for distractors.
    pub fn node_actors(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.nodes
            .iter()
            .map(|n| {
                if n.distractor {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    }

    pub fn features(&self) -> Tensor {
        let d = self.nodes.first().map_or(0, |n| n.feat.len());
        let data = self.nodes.iter().flat_map(|n| n.feat.iter().copied()).collect();
        Tensor::new(vec![self.nodes.len(), d], data).expect("validated episode")
    }

    /// Features fed with only the first `steps` clip steps (their mean).
    pub fn prefix_features(&self, steps: usize) -> Result<Tensor> {
        let d = self.nodes.first().map_or(0, |n| n.feat.len());
        let mut data = Vec::with_capacity(self.nodes.len() * d);
        for node in &self.nodes {
            let seq = node
                .feat_steps
                .as_ref()
                .ok_or_else(|| Error::Eval("episode has no per-step features".into()))?;
            let s = steps.clamp(1, seq.len());
            for k in 0..d {
                data.push(seq[..s].iter().map(|f| f[k]).sum::<f64>() / s as f64);
            }
        }
        Tensor::new(vec![self.nodes.len(), d], data)
    }

    pub fn clip_len(&self) -> usize {
        self.nodes
            .first()
            .and_then(|n| n.feat_steps.as_ref())
            .map_or(0, Vec::len)
    }

    pub fn proposals(&self) -> Vec<BBox> {
        self.nodes.iter().map(|n| n.proposal).collect()
    }

    /// Per-node supervision at step `t`; distractors get `background`.
    pub fn targets(&self, t: usize, background: usize) -> Vec<usize> {
        self.node_actors()
            .into_iter()
            .map(|a| a.map_or(background, |a| self.actors[a].labels[t]))
            .collect()
    }

    pub fn validate(&self, num_classes: Option<usize>) -> std::result::Result<(), String> {
        if self.actors.is_empty() {
            return Err("episode has no actors".into());
        }
        let true_nodes = self.nodes.iter().filter(|n| !n.distractor).count();
        if true_nodes != self.actors.len() {
            return Err(format!(
                "{} non-distractor nodes but {} actors",
                true_nodes,
                self.actors.len()
            ));
        }
        let len = self.actors[0].labels.len();
        if len == 0 {
            return Err("actor without labels".into());
        }
        for a in &self.actors {
            if a.labels.len() != len {
                return Err("actors disagree on horizon".into());
            }
            if !a.gt_box.is_valid() || !a.gt_box.in_unit_square() {
                return Err("ground-truth box outside the unit square".into());
            }
            if let Some(c) = num_classes {
                if let Some(l) = a.labels.iter().find(|&&l| l >= c) {
                    return Err(format!("label {l} out of range for {c} classes"));
                }
            }
        }
        let d = self.nodes[0].feat.len();
        for n in &self.nodes {
            if n.feat.len() != d || n.feat.iter().any(|v| !v.is_finite()) {
                return Err("inconsistent or non-finite node features".into());
            }
            if !n.proposal.is_valid() || !n.proposal.in_unit_square() {
                return Err("proposal box outside the unit square".into());
            }
            if let Some(steps) = &n.feat_steps {
                if steps.iter().any(|s| s.len() != d) {
                    return Err("per-step feature width mismatch".into());
                }
            }
        }
        if let (Some(l), Some(c)) = (self.clip_label, num_classes) {
            if l >= c {
                return Err(format!("clip label {l} out of range"));
            }
        }
        Ok(())
    }
}

fn position_encoding(b: &BBox) -> [f64; 8] {
    use std::f64::consts::TAU;
    [
        2.0 * b.cx - 1.0,
        2.0 * b.cy - 1.0,
        (TAU * b.cx).sin(),
        (TAU * b.cx).cos(),
        (TAU * b.cy).sin(),
        (TAU * b.cy).cos(),
        4.0 * (b.w - 0.12),
        4.0 * (b.h - 0.12),
    ]
}

fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BBox {
    BBox::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.08..0.16),
        rng.random_range(0.08..0.16),
    )
}

fn jitter_box<R: Rng + ?Sized>(b: &BBox, jitter: f64, rng: &mut R) -> BBox {
    let w = b.w * (jitter * normal(rng)).exp();
    let h = b.h * (jitter * normal(rng)).exp();
    let cx = b.cx + jitter * b.w * normal(rng);
    let cy = b.cy + jitter * b.h * normal(rng);
    let w = w.min(0.98);
    let h = h.min(0.98);
    BBox::new(
        cx.clamp(0.5 * w + 1e-9, 1.0 - 0.5 * w - 1e-9),
        cy.clamp(0.5 * h + 1e-9, 1.0 - 0.5 * h - 1e-9),
        w,
        h,
    )
}

/// Generator bound to one world; class embeddings are computed once.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    embeddings: Vec<Vec<f64>>,
    stationary: Vec<f64>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let embeddings = config.class_embeddings();
        let stationary = stationary_distribution(&config.transition_matrix());
        Ok(Self {
            config,
            embeddings,
            stationary,
        })
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    fn actor_feature<R: Rng + ?Sized>(&self, label: usize, proposal: &BBox, noise: f64, rng: &mut R) -> Vec<f64> {
        let d = self.config.feature_dim;
        let pos = position_encoding(proposal);
        let mut f = self.embeddings[label].clone();
        for (k, p) in pos.iter().enumerate() {
            f[d - 8 + k] += p;
        }
        for v in &mut f {
            *v += noise * normal(rng);
        }
        f
    }

    fn distractor_feature<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.config.feature_dim)
            .map(|_| self.config.distractor_scale * normal(rng))
            .collect()
    }

    /// Deterministic in `(config, seed)`.
    pub fn generate(&self, seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.config.mode {
            WorldMode::MultiActor => self.generate_multi(seed, &mut rng),
            WorldMode::SingleActorClip => self.generate_clip(seed, &mut rng),
        }
    }

    fn generate_multi(&self, seed: u64, rng: &mut ChaCha8Rng) -> Episode {
        let c = &self.config;
        let n_true = rng.random_range(c.n_true_min..=c.n_true_max);
        let n_fake = rng.random_range(c.n_fake_min..=c.n_fake_max);
        let gt: Vec<BBox> = (0..n_true).map(|_| random_box(rng)).collect();
        let initial: Vec<usize> = (0..n_true).map(|_| sample_categorical(&self.stationary, rng)).collect();
        let positions: Vec<(f64, f64)> = gt.iter().map(|b| (b.cx, b.cy)).collect();
        let labels = evolve_labels(c, &positions, &initial, rng);

        let mut slots: Vec<Option<usize>> = (0..n_true).map(Some).chain((0..n_fake).map(|_| None)).collect();
        slots.shuffle(rng);

        let mut nodes = Vec::with_capacity(slots.len());
        let mut actors = Vec::with_capacity(n_true);
        for slot in slots {
            match slot {
                Some(a) => {
                    let proposal = jitter_box(&gt[a], c.box_jitter, rng);
                    let feat = self.actor_feature(labels[a][0], &proposal, c.feature_noise, rng);
                    nodes.push(Node {
                        proposal,
                        feat,
                        distractor: false,
                        feat_steps: None,
                    });
                    actors.push(Actor {
                        gt_box: gt[a],
                        labels: labels[a].clone(),
                    });
                }
                None => {
                    let proposal = random_box(rng);
                    let feat = self.distractor_feature(rng);
                    nodes.push(Node {
                        proposal,
                        feat,
                        distractor: true,
                        feat_steps: None,
                    });
                }
            }
        }
        Episode {
            seed,
            nodes,
            actors,
            clip_label: None,
            config_hash: None,
        }
    }

    fn generate_clip(&self, seed: u64, rng: &mut ChaCha8Rng) -> Episode {
        let c = &self.config;
        let label = rng.random_range(0..c.num_classes);
        let gt = random_box(rng);
        let n_fake = rng.random_range(c.n_fake_min..=c.n_fake_max);
        let mut slots: Vec<bool> = std::iter::repeat_n(false, c.clip_views)
            .chain(std::iter::repeat_n(true, n_fake))
            .collect();
        slots.shuffle(rng);

        let mut nodes = Vec::with_capacity(slots.len());
        let mut actors = Vec::new();
        for distractor in slots {
            let (proposal, steps) = if distractor {
                let proposal = random_box(rng);
                let base = self.distractor_feature(rng);
                let steps: Vec<Vec<f64>> = (0..c.clip_steps)
                    .map(|_| base.iter().map(|b| b + c.clip_step_noise * normal(rng)).collect())
                    .collect();
                (proposal, steps)
            } else {
                let proposal = jitter_box(&gt, c.box_jitter, rng);
                let steps: Vec<Vec<f64>> = (0..c.clip_steps)
                    .map(|_| self.actor_feature(label, &proposal, c.clip_step_noise, rng))
                    .collect();
                actors.push(Actor {
                    gt_box: gt,
                    labels: vec![label; c.horizon + 1],
                });
                (proposal, steps)
            };
            let d = c.feature_dim;
            let feat = (0..d)
                .map(|k| steps.iter().map(|s| s[k]).sum::<f64>() / steps.len() as f64)
                .collect();
            nodes.push(Node {
                proposal,
                feat,
                distractor,
                feat_steps: Some(steps),
            });
        }
        Episode {
            seed,
            nodes,
            actors,
            clip_label: Some(label),
            config_hash: None,
        }
    }
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses JSON lines; schema violations carry their 1-based line number.
pub fn parse_jsonl<R: BufRead>(reader: R, num_classes: Option<usize>) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ep.validate(num_classes)
            .map_err(|msg| Error::Parse { line: i + 1, msg })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path, num_classes: Option<usize>) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), num_classes)
}

//! Model zoo: per-t heads, GRU rollout, and relational rollouts (RN, GAT,
//! DR²N), with box refinement and the weighted multi-step loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::params::{ParamId, ParamRecord, ParamStore};
use crate::recurrent::{GruCell, GruState};
use crate::relational::{EdgeAttention, NodeSet, RelationKind, RelationalLayer};
use crate::synthworld::Episode;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SingleHead,
    MultiHead,
    Gru,
    Rn,
    Gat,
    Dr2n,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SingleHead,
        Variant::MultiHead,
        Variant::Gru,
        Variant::Rn,
        Variant::Gat,
        Variant::Dr2n,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleHead => "single-head",
            Variant::MultiHead => "multi-head",
            Variant::Gru => "gru",
            Variant::Rn => "rn",
            Variant::Gat => "gat",
            Variant::Dr2n => "dr2n",
        }
    }

    pub fn relation(self) -> Option<RelationKind> {
        match self {
            Variant::Rn => Some(RelationKind::Rn),
            Variant::Gat => Some(RelationKind::Gat),
            Variant::Dr2n => Some(RelationKind::Dr2n),
            _ => None,
        }
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, Variant::SingleHead | Variant::MultiHead)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Softmax cross-entropy over `A + 1` classes.
    Exclusive,
    /// Summed per-class sigmoid cross-entropy, background included.
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub horizon: usize,
    /// Observed frames behind each feature; informational only.
    pub history: usize,
    pub d_h: usize,
    pub d_e: usize,
    /// Hidden width of the classifier MLP.
    pub d_cls: usize,
    pub loss_mode: LossMode,
    pub alpha_loc: f64,
    pub beta_0: f64,
    pub beta_t: f64,
    /// Gradient multiplier on the box-refinement head.
    pub detector_grad_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dr2n,
            num_classes: 8,
            horizon: 5,
            history: 1,
            d_h: 32,
            d_e: 32,
            d_cls: 32,
            loss_mode: LossMode::Exclusive,
            alpha_loc: 1.0,
            beta_0: 1.0,
            beta_t: 0.5,
            detector_grad_multiplier: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.num_classes < 1 || self.d_h == 0 || self.d_e == 0 || self.d_cls == 0 {
            return bad("classes and layer widths must be positive");
        }
        if !(self.beta_0 > 0.0 && self.beta_t > 0.0) {
            return bad("beta endpoints must be positive");
        }
        if self.alpha_loc.is_nan() || self.alpha_loc < 0.0 || !self.detector_grad_multiplier.is_finite() {
            return bad("alpha_loc must be non-negative");
        }
        Ok(())
    }

    /// Index of the background output.
    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn outputs(&self) -> usize {
        self.num_classes + 1
    }

    /// `β_t` for `t = 0..=T`, linear from `beta_0` to `beta_t`.
    pub fn betas(&self) -> Vec<f64> {
        let t = self.horizon as f64;
        (0..=self.horizon)
            .map(|s| self.beta_0 + (self.beta_t - self.beta_0) * s as f64 / t)
            .collect()
    }
}

/// Tape handles produced by one rollout.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[N × (A+1)]` logits for `t = 0..=T`.
    pub logits: Vec<Var>,
    /// `[N × 4]` box deltas from `h⁰`.
    pub deltas: Var,
    /// Attention used to build `h^t`, for `t = 1..=T` (relational variants).
    pub attention: Vec<EdgeAttention>,
}

/// Loss terms; `total = α·loc + Σ β_t·cls[t]`.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub loc: Var,
    pub cls: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub boxes: Vec<BBox>,
    /// Raw logits per `t`, `[N × (A+1)]`.
    pub logits: Vec<Tensor>,
    /// Class probabilities per `t` (softmax or per-class sigmoid).
    pub scores: Vec<Tensor>,
}

impl Prediction {
    pub fn num_nodes(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Debug, Clone)]
enum Heads {
    /// One independent MLP per future step.
    Separate(Vec<Mlp>),
    /// Shared hidden layer, one output layer per step.
    Shared { trunk: Linear, outputs: Vec<Linear> },
    /// One classifier for every step of a recurrent rollout.
    Recurrent {
        classifier: Mlp,
        gru: GruCell,
        relation: Option<RelationalLayer>,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    heads: Heads,
    box_head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        // Shared components are registered first and in a fixed order, so
        // the recurrent variants agree on them for equal seeds.
        let box_head = Linear::new(&mut store, "box", c.d_h, 4, &mut rng)?;
        let heads = match c.variant {
            Variant::SingleHead => Heads::Separate(
                (0..=c.horizon)
                    .map(|t| Mlp::new(&mut store, &format!("head{t}"), c.d_h, c.d_cls, c.outputs(), &mut rng))
                    .collect::<Result<_>>()?,
            ),
            Variant::MultiHead => {
                let trunk = Linear::new(&mut store, "trunk", c.d_h, c.d_cls, &mut rng)?;
                let outputs = (0..=c.horizon)
                    .map(|t| Linear::new(&mut store, &format!("head{t}"), c.d_cls, c.outputs(), &mut rng))
                    .collect::<Result<_>>()?;
                Heads::Shared { trunk, outputs }
            }
            v => {
                let classifier = Mlp::new(&mut store, "cls", c.d_h, c.d_cls, c.outputs(), &mut rng)?;
                let gru = GruCell::new(&mut store, "rnn", c.outputs(), c.d_h, &mut rng)?;
                let relation = v
                    .relation()
                    .map(|k| RelationalLayer::new(&mut store, "rel", k, c.d_h, c.d_e, &mut rng))
                    .transpose()?;
                Heads::Recurrent {
                    classifier,
                    gru,
                    relation,
                }
            }
        };
        for id in box_head.params() {
            store.set_grad_multiplier(id, c.detector_grad_multiplier);
        }
        Ok(Self {
            config,
            store,
            heads,
            box_head,
        })
    }

    pub fn relation(&self) -> Option<&RelationalLayer> {
        match &self.heads {
            Heads::Recurrent { relation, .. } => relation.as_ref(),
            _ => None,
        }
    }

    pub fn relation_mut(&mut self) -> Option<&mut RelationalLayer> {
        match &mut self.heads {
            Heads::Recurrent { relation, .. } => relation.as_mut(),
            _ => None,
        }
    }

    pub fn box_params(&self) -> [ParamId; 2] {
        self.box_head.params()
    }

    /// Shared classifier `f_CLS` (recurrent variants only).
    pub fn classify(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        match &self.heads {
            Heads::Recurrent { classifier, .. } => classifier.forward(tape, &self.store, h),
            _ => Err(Error::Config(format!(
                "variant {} has per-step heads, not a shared classifier",
                self.config.variant
            ))),
        }
    }

    /// `[N × 4]` refinement deltas from the initial state.
    pub fn box_deltas(&self, tape: &mut Tape, h0: Var) -> Result<Var> {
        self.box_head.forward(tape, &self.store, h0)
    }

    /// Rollout from features `[N × d_h]` (N ≥ 1).
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Forward> {
        let s = tape.shape(features).to_vec();
        if s.len() != 2 || s[1] != self.config.d_h || s[0] == 0 {
            return Err(Error::shape("forward", &s, &[self.config.d_h]));
        }
        let store = &self.store;
        let deltas = self.box_deltas(tape, features)?;
        let mut logits = Vec::with_capacity(self.config.horizon + 1);
        let mut attention = Vec::new();
        match &self.heads {
            Heads::Separate(mlps) => {
                for m in mlps {
                    logits.push(m.forward(tape, store, features)?);
                }
            }
            Heads::Shared { trunk, outputs } => {
                let hid = trunk.forward(tape, store, features)?;
                let hid = tape.activate(hid, Activation::Relu);
                for o in outputs {
                    logits.push(o.forward(tape, store, hid)?);
                }
            }
            Heads::Recurrent {
                classifier,
                gru,
                relation,
            } => {
                let mut state = gru.init_state(tape, features)?;
                let mut a = classifier.forward(tape, store, state.h)?;
                logits.push(a);
                for _ in 1..=self.config.horizon {
                    let h_in = match relation {
                        Some(rel) => {
                            let nodes = NodeSet::all_valid(tape, state.h);
                            let (h, attn) = rel.forward(tape, store, &nodes)?;
                            attention.push(attn);
                            h
                        }
                        None => state.h,
                    };
                    // Soft logits from the previous step are the GRU input.
                    state = gru.step(tape, store, GruState { h: h_in }, a)?;
                    a = classifier.forward(tape, store, state.h)?;
                    logits.push(a);
                }
            }
        }
        Ok(Forward {
            logits,
            deltas,
            attention,
        })
    }

    /// Refined boxes as a differentiable `[N × 4]` tensor:
    /// `(cx + dx·w, cy + dy·h, w·e^dw, h·e^dh)`.
    pub fn refined_boxes(&self, tape: &mut Tape, deltas: Var, proposals: &[BBox]) -> Result<Var> {
        let n = proposals.len();
        let mut base = Vec::with_capacity(4 * n);
        let mut lin = Vec::with_capacity(4 * n);
        let mut size = Vec::with_capacity(4 * n);
        let mut exp_mask = Vec::with_capacity(4 * n);
        for b in proposals {
            base.extend([b.cx, b.cy, 0.0, 0.0]);
            lin.extend([b.w, b.h, 0.0, 0.0]);
            size.extend([0.0, 0.0, b.w, b.h]);
            exp_mask.extend([0.0, 0.0, 1.0, 1.0]);
        }
        let t = |v: Vec<f64>| Tensor::new(vec![n, 4], v);
        let base = tape.constant(t(base)?);
        let lin = tape.constant(t(lin)?);
        let size = tape.constant(t(size)?);
        let exp_mask = tape.constant(t(exp_mask)?);
        let shift = tape.mul(lin, deltas)?;
        let scaled = tape.mul(exp_mask, deltas)?;
        let grow = tape.exp(scaled);
        let grow = tape.mul(size, grow)?;
        let out = tape.add(base, shift)?;
        tape.add(out, grow)
    }

    /// Loss of a rollout against an episode's supervision.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, episode: &Episode) -> Result<LossParts> {
        let c = &self.config;
        let n = episode.num_nodes();
        if episode.horizon() < c.horizon {
            return Err(Error::Config(format!(
                "episode horizon {} shorter than model horizon {}",
                episode.horizon(),
                c.horizon
            )));
        }
        let node_actors = episode.node_actors();
        let n_true = node_actors.iter().flatten().count();

        // Localisation: smooth-L1 on the 4 refinement deltas against the
        // deltas that reach the ground truth, mean over true actors.
        let mut gt = Vec::with_capacity(4 * n);
        let mut w = Vec::with_capacity(4 * n);
        for a in &node_actors {
            match a {
                Some(a) => {
                    let prop = episode.nodes[gt.len() / 4].proposal;
                    gt.extend(prop.deltas_to(&episode.actors[*a].gt_box));
                    w.extend([1.0 / n_true as f64; 4]);
                }
                None => {
                    gt.extend([0.0; 4]);
                    w.extend([0.0; 4]);
                }
            }
        }
        let gt = tape.constant(Tensor::new(vec![n, 4], gt)?);
        let w = tape.constant(Tensor::new(vec![n, 4], w)?);
        let l1 = tape.smooth_l1(fwd.deltas, gt)?;
        let l1 = tape.mul(l1, w)?;
        let loc = tape.sum(l1);

        let node_w = vec![1.0 / n as f64; n];
        let mut cls = Vec::with_capacity(c.horizon + 1);
        for (t, &logits) in fwd.logits.iter().enumerate() {
            let targets = episode.targets(t, c.background());
            if let Some(&bad) = targets.iter().find(|&&l| l > c.num_classes) {
                return Err(Error::Label {
                    label: bad,
                    classes: c.num_classes,
                });
            }
            let l = match c.loss_mode {
                LossMode::Exclusive => tape.softmax_cross_entropy(logits, &targets, &node_w)?,
                LossMode::Multilabel => {
                    let k = c.outputs();
                    let mut y = vec![0.0; n * k];
                    for (i, &tg) in targets.iter().enumerate() {
                        y[i * k + tg] = 1.0;
                    }
                    tape.sigmoid_cross_entropy(logits, &y, &node_w)?
                }
            };
            cls.push(l);
        }

        let betas = c.betas();
        let mut total = tape.scale(cls[0], betas[0]);
        for t in 1..cls.len() {
            let term = tape.scale(cls[t], betas[t]);
            total = tape.add(total, term)?;
        }
        // With α = 0 the box term is left off the graph entirely.
        if c.alpha_loc > 0.0 {
            let term = tape.scale(loc, c.alpha_loc);
            total = tape.add(total, term)?;
        }
        Ok(LossParts { total, loc, cls })
    }

    /// Builds the loss for `episode` on a fresh section of `tape`, feeding
    /// `features` (defaults to the episode's own).
    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        episode: &Episode,
        features: Option<&Tensor>,
    ) -> Result<Option<LossParts>> {
        if episode.num_nodes() == 0 {
            return Ok(None);
        }
        let f = match features {
            Some(f) => f.clone(),
            None => episode.features(),
        };
        let x = tape.constant(f);
        let fwd = self.forward(tape, x)?;
        self.loss(tape, &fwd, episode).map(Some)
    }

    /// Value-only rollout; `N = 0` yields an empty prediction.
    pub fn predict(&self, features: &Tensor, proposals: &[BBox]) -> Result<Prediction> {
        let n = proposals.len();
        if n == 0 {
            return Ok(Prediction {
                boxes: Vec::new(),
                logits: Vec::new(),
                scores: Vec::new(),
            });
        }
        if features.shape().first() != Some(&n) {
            return Err(Error::shape("predict", features.shape(), &[n]));
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let fwd = self.forward(&mut tape, x)?;
        let deltas = tape.value(fwd.deltas);
        let boxes = proposals
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let d = deltas.row(i);
                b.refine([d[0], d[1], d[2], d[3]])
            })
            .collect();
        let logits: Vec<Tensor> = fwd.logits.iter().map(|&v| tape.value(v).clone()).collect();
        let scores = logits.iter().map(|l| self.scores(l)).collect();
        Ok(Prediction { boxes, logits, scores })
    }

    pub fn predict_episode(&self, episode: &Episode) -> Result<Prediction> {
        self.predict(&episode.features(), &episode.proposals())
    }

    /// Probabilities from logits under the configured loss mode.
    pub fn scores(&self, logits: &Tensor) -> Tensor {
        let (m, k) = logits.matrix_dims();
        let x = logits.data();
        let mut out = vec![0.0; m * k];
        for r in 0..m {
            let row = &x[r * k..(r + 1) * k];
            match self.config.loss_mode {
                LossMode::Exclusive => {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..k {
                        out[r * k + c] = (row[c] - max).exp() / z;
                    }
                }
                LossMode::Multilabel => {
                    for c in 0..k {
                        out[r * k + c] = crate::tape::sigmoid(row[c]);
                    }
                }
            }
        }
        Tensor::new(vec![m, k], out).expect("same shape")
    }

    /// Attention matrices `α` for steps `t = 1..=T`.
    pub fn attention(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        if !self.config.variant.relation().is_some_and(|k| k.has_attention()) {
            return Err(Error::NoAttention(self.config.variant.to_string()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let fwd = self.forward(&mut tape, x)?;
        Ok(fwd.attention.iter().map(|a| tape.value(a.alpha).clone()).collect())
    }

    pub fn checkpoint(&self, config_hash: Option<String>, seed: u64, step: usize) -> Checkpoint {
        Checkpoint {
            model: self.config.clone(),
            config_hash,
            seed,
            step,
            params: self
                .store
                .to_checkpoint()
                .into_iter()
                .map(|(k, t)| {
                    (
                        k,
                        ParamRecord {
                            shape: t.shape().to_vec(),
                            values: t.into_data(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ck.model.clone(), 0)?;
        let values = ck
            .params
            .iter()
            .map(|(k, r)| Ok((k.clone(), Tensor::new(r.shape.clone(), r.values.clone())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        model.store.load_checkpoint(&values)?;
        Ok(model)
    }
}

/// Serialized model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub step: usize,
    pub params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

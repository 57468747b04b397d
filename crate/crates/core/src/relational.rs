//! Relational layers over actor nodes: attention-selected virtual nodes
//! (DR²N), uniform relation pooling (RN), and graph attention (GAT).
//!
//! All three share the same skeleton:
//!
//! 1. edge states `e_ij = f_edge([h_i; h_j])` (DR²N, GAT)
//! 2. weights `α_ij` over the admissible neighbours of `i`
//! 3. virtual node `z_i = Σ_j α_ij h_j`
//! 4. node update, `f_node([h_i; z_i])` for DR²N and RN, `f_node(z_i)` for GAT
//!
//! DR²N and RN exclude `i` from its own neighbourhood; GAT includes it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Dr2n,
    Rn,
    Gat,
}

impl RelationKind {
    pub fn includes_self(self) -> bool {
        matches!(self, RelationKind::Gat)
    }

    pub fn has_attention(self) -> bool {
        !matches!(self, RelationKind::Rn)
    }
}

/// Node features `[N × d_h]` with a validity mask.
#[derive(Debug, Clone)]
pub struct NodeSet {
    pub h: Var,
    pub mask: Vec<bool>,
}

impl NodeSet {
    pub fn all_valid(tape: &Tape, h: Var) -> Self {
        let n = tape.shape(h)[0];
        Self { h, mask: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Attention weights `α: [N × N]` and, for learned variants, their logits.
#[derive(Debug, Clone, Copy)]
pub struct EdgeAttention {
    pub alpha: Var,
    pub logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct RelationalLayer {
    pub kind: RelationKind,
    pub edge: Option<Linear>,
    pub attn: Option<Linear>,
    pub node: Linear,
    pub edge_activation: Activation,
    pub node_activation: Activation,
    pub d_h: usize,
    pub d_e: usize,
}

/// Admissibility matrix for row-softmax: valid `i`, valid `j`, and `j ≠ i`
/// unless the variant attends to itself.
pub fn admissible(kind: RelationKind, mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = mask[i] && mask[j] && (i != j || kind.includes_self());
        }
    }
    out
}

impl RelationalLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: RelationKind,
        d_h: usize,
        d_e: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (edge, attn) = if kind.has_attention() {
            (
                Some(Linear::new(store, &format!("{prefix}/edge"), 2 * d_h, d_e, rng)?),
                Some(Linear::new(store, &format!("{prefix}/attn"), d_e, 1, rng)?),
            )
        } else {
            (None, None)
        };
        let node_in = if kind == RelationKind::Gat { d_h } else { 2 * d_h };
        let node = Linear::new(store, &format!("{prefix}/node"), node_in, d_h, rng)?;
        Ok(Self {
            kind,
            edge,
            attn,
            node,
            edge_activation: Activation::Relu,
            node_activation: Activation::Tanh,
            d_h,
            d_e,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.edge
            .iter()
            .chain(&self.attn)
            .chain(std::iter::once(&self.node))
            .flat_map(|l| l.params())
            .collect()
    }

    fn check_nodes(&self, tape: &Tape, nodes: &NodeSet) -> Result<usize> {
        let s = tape.shape(nodes.h);
        if s.len() != 2 || s[1] != self.d_h || s[0] != nodes.mask.len() {
            return Err(Error::shape("relational", s, &[nodes.mask.len(), self.d_h]));
        }
        if !nodes.mask.iter().any(|&m| m) {
            return Err(Error::Config("relational layer needs at least one valid node".into()));
        }
        Ok(s[0])
    }

    /// `e_ij = act(W [h_i; h_j] + b)` as an `[N × N × d_e]` tensor.
    ///
    /// The weight's first `d_h` rows act on `h_i` and the rest on `h_j`, so
    /// the pairwise tensor is assembled from two `[N × d_e]` projections.
    pub fn edge_features(&self, tape: &mut Tape, store: &ParamStore, nodes: &NodeSet) -> Result<Var> {
        let edge = self
            .edge
            .as_ref()
            .ok_or_else(|| Error::NoAttention(format!("{:?}", self.kind)))?;
        self.check_nodes(tape, nodes)?;
        let w = tape.param(store, edge.weight);
        let b = tape.param(store, edge.bias);
        let w_self = tape.slice_rows(w, 0, self.d_h)?;
        let w_other = tape.slice_rows(w, self.d_h, 2 * self.d_h)?;
        let from = tape.matmul(nodes.h, w_self)?;
        let to = tape.matmul(nodes.h, w_other)?;
        let n = nodes.len();
        let pre = tape.pair_sum(from, to)?;
        let pre = tape.reshape(pre, &[n * n, self.d_e])?;
        let pre = tape.add_row(pre, b)?;
        let e = tape.activate(pre, self.edge_activation);
        tape.reshape(e, &[n, n, self.d_e])
    }

    /// Attention over each node's admissible neighbours.
    ///
    /// Learned variants score every edge with `f_attn` and normalise each row
    /// with a masked softmax; RN puts `1/|N_i|` on every admissible edge. A
    /// row with no admissible neighbour is all zero.
    pub fn attention_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        edges: Option<Var>,
        mask: &[bool],
    ) -> Result<EdgeAttention> {
        let n = mask.len();
        let adm = admissible(self.kind, mask);
        match self.kind {
            RelationKind::Rn => {
                let mut alpha = vec![0.0; n * n];
                for i in 0..n {
                    let row = &adm[i * n..(i + 1) * n];
                    let count = row.iter().filter(|&&a| a).count();
                    if count > 0 {
                        let w = 1.0 / count as f64;
                        for j in 0..n {
                            if row[j] {
                                alpha[i * n + j] = w;
                            }
                        }
                    }
                }
                let alpha = tape.constant(Tensor::new(vec![n, n], alpha)?);
                Ok(EdgeAttention { alpha, logits: None })
            }
            RelationKind::Dr2n | RelationKind::Gat => {
                let attn = self.attn.as_ref().expect("learned attention");
                let edges = edges.ok_or_else(|| Error::Config("edge features required".into()))?;
                let flat = tape.reshape(edges, &[n * n, self.d_e])?;
                let scores = attn.forward(tape, store, flat)?;
                let logits = tape.reshape(scores, &[n, n])?;
                let alpha = tape.softmax_rows(logits, &adm)?;
                Ok(EdgeAttention {
                    alpha,
                    logits: Some(logits),
                })
            }
        }
    }

    /// `z_i = Σ_j α_ij h_j`.
    pub fn virtual_node(&self, tape: &mut Tape, nodes: &NodeSet, attn: &EdgeAttention) -> Result<Var> {
        tape.matmul(attn.alpha, nodes.h)
    }

    /// `h̃_i = act(f_node([h_i; z_i]))`, or `act(f_node(z_i))` for GAT.
    pub fn node_update(&self, tape: &mut Tape, store: &ParamStore, nodes: &NodeSet, z: Var) -> Result<Var> {
        let input = if self.kind == RelationKind::Gat {
            z
        } else {
            tape.concat(nodes.h, z, 1)?
        };
        let pre = self.node.forward(tape, store, input)?;
        Ok(tape.activate(pre, self.node_activation))
    }

    /// Full layer: returns the updated node features and the attention used.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, nodes: &NodeSet) -> Result<(Var, EdgeAttention)> {
        self.check_nodes(tape, nodes)?;
        let edges = if self.kind.has_attention() {
            Some(self.edge_features(tape, store, nodes)?)
        } else {
            None
        };
        let attn = self.attention_weights(tape, store, edges, &nodes.mask)?;
        let z = self.virtual_node(tape, nodes, &attn)?;
        let out = self.node_update(tape, store, nodes, z)?;
        Ok((out, attn))
    }
}

/// One exported attention edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// The `k` largest weights in row `i` of `alpha` (ties broken by lower `j`),
/// skipping zero-weight (inadmissible) entries.
pub fn top_k(alpha: &Tensor, i: usize, k: usize) -> Vec<(usize, f64)> {
    let mut row: Vec<(usize, f64)> = alpha
        .row(i)
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, w)| w > 0.0)
        .collect();
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    row.truncate(k);
    row
}

/// Renders attention records as a DOT digraph, one edge per record.
pub fn to_dot(records: &[AttentionRecord]) -> String {
    let mut out = String::from("digraph attention {\n");
    let mut nodes: Vec<usize> = records.iter().flat_map(|r| [r.i, r.j]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    for n in nodes {
        out.push_str(&format!("  n{n} [label=\"node {n}\"];\n"));
    }
    for r in records {
        out.push_str(&format!(
            "  n{} -> n{} [label=\"t{}: {:.4}\", weight={}, step={}];\n",
            r.i, r.j, r.step, r.weight, r.weight, r.step
        ));
    }
    out.push_str("}\n");
    out
}

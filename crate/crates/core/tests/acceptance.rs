//! Acceptance suite. Runs with `cargo test --test acceptance` and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{away_from_zero, brute_force_map, randn, random_instance, rng};
use dr2n_core::gradcheck::{check, check_params, rel_error, FD_STEP};
use dr2n_core::model::Prediction;
use dr2n_core::recurrent::{GruCell, GruState};
use dr2n_core::relational::{admissible, NodeSet, RelationalLayer};
use dr2n_core::synthworld::{read_jsonl, write_jsonl, Actor, Node};
use dr2n_core::traineval::ablation::{eval_set, std_err};
use dr2n_core::traineval::{accuracy_at_k, map_at_t, run_ablation, DataSource, Trainer};
use dr2n_core::{
    Activation, BBox, Checkpoint, Episode, Model, ModelConfig, ParamStore, RelationKind, RunConfig, Schedule, Tape,
    Tensor, TrainConfig, Var, Variant, World, WorldConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `Σ out ⊙ W` with a fixed pseudo-random `W`, to reduce any op to a scalar.
fn reduce(t: &mut Tape, v: Var) -> Var {
    let shape = t.shape(v).to_vec();
    let mut r = rng(shape.iter().product::<usize>() as u64);
    let w = t.constant(randn(&shape, &mut r));
    let p = t.mul(v, w).unwrap();
    t.sum(p)
}

// ------------------------------------------------------------------ 1

const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 20;

fn op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let a34 = randn(&[3, 4], &mut r);
    let b34 = randn(&[3, 4], &mut r);
    let b42 = randn(&[4, 2], &mut r);
    let v4 = randn(&[4], &mut r);
    let kinked = away_from_zero(&[3, 4], &mut r);

    out.push((
        "matmul",
        check(&[a34.clone(), b42], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "add",
        check(&[a34.clone(), b34.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "sub",
        check(&[a34.clone(), b34.clone()], |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "mul",
        check(&[a34.clone(), b34.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "add_row",
        check(&[a34.clone(), v4], |t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "scale",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.scale(v[0], -1.7);
            reduce(t, y)
        }),
    ));
    out.push((
        "add_scalar",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let y = t.mul(y, y).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "sigmoid",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.sigmoid(v[0]);
            reduce(t, y)
        }),
    ));
    out.push((
        "tanh",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.tanh(v[0]);
            reduce(t, y)
        }),
    ));
    out.push((
        "relu",
        check(std::slice::from_ref(&kinked), |t, v| {
            let y = t.relu(v[0]);
            reduce(t, y)
        }),
    ));
    out.push((
        "exp",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.exp(v[0]);
            reduce(t, y)
        }),
    ));
    out.push((
        "sum",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum(y)
        }),
    ));
    out.push((
        "mean",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.mean(y)
        }),
    ));
    out.push((
        "smooth_l1",
        check(&[a34.scale_clone(2.0), b34.clone()], |t, v| {
            let y = t.smooth_l1(v[0], v[1]).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "concat0",
        check(&[a34.clone(), randn(&[2, 4], &mut r)], |t, v| {
            let y = t.concat(v[0], v[1], 0).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "concat1",
        check(&[a34.clone(), randn(&[3, 2], &mut r)], |t, v| {
            let y = t.concat(v[0], v[1], 1).unwrap();
            reduce(t, y)
        }),
    ));
    let mask = vec![true, false, true, true];
    out.push((
        "softmax",
        check(&[randn(&[4], &mut r)], |t, v| {
            let y = t.softmax(v[0], &mask).unwrap();
            reduce(t, y)
        }),
    ));
    let mask_rows = admissible(RelationKind::Dr2n, &[true, true, false, true]);
    out.push((
        "softmax_rows",
        check(&[randn(&[4, 4], &mut r)], |t, v| {
            let y = t.softmax_rows(v[0], &mask_rows).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "reshape",
        check(std::slice::from_ref(&a34), |t, v| {
            let y = t.reshape(v[0], &[2, 6]).unwrap();
            let y = t.tanh(y);
            reduce(t, y)
        }),
    ));
    out.push((
        "pair_sum",
        check(&[a34.clone(), b34.clone()], |t, v| {
            let y = t.pair_sum(v[0], v[1]).unwrap();
            let y = t.tanh(y);
            reduce(t, y)
        }),
    ));
    out.push((
        "slice_rows",
        check(&[randn(&[5, 3], &mut r)], |t, v| {
            let y = t.slice_rows(v[0], 1, 4).unwrap();
            reduce(t, y)
        }),
    ));
    let targets = [r.random_range(0..4), r.random_range(0..4), r.random_range(0..4)];
    let weights = [0.5, 1.0, 0.25];
    out.push((
        "softmax_cross_entropy",
        check(std::slice::from_ref(&a34), |t, v| {
            t.softmax_cross_entropy(v[0], &targets, &weights).unwrap()
        }),
    ));
    let soft: Vec<f64> = (0..12).map(|k| (k % 3) as f64 / 2.0).collect();
    out.push((
        "sigmoid_cross_entropy",
        check(std::slice::from_ref(&a34), |t, v| {
            t.sigmoid_cross_entropy(v[0], &soft, &weights).unwrap()
        }),
    ));

    // GRU cell: inputs and parameters.
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "rnn", 3, 4, &mut r).unwrap();
    let h = randn(&[3, 4], &mut r);
    let x = randn(&[3, 3], &mut r);
    {
        let (gru, store) = (&gru, &store);
        out.push((
            "gru_step/inputs",
            check(&[h.clone(), x.clone()], |t, v| {
                let s = gru.step(t, store, GruState { h: v[0] }, v[1]).unwrap();
                reduce(t, s.h)
            }),
        ));
        let (h, x) = (h.clone(), x.clone());
        out.push((
            "gru_step/params",
            check_params(store, &gru.params(), move |t, st| {
                let hv = t.constant(h.clone());
                let xv = t.constant(x.clone());
                let s = gru.step(t, st, GruState { h: hv }, xv).unwrap();
                reduce(t, s.h)
            }),
        ));
    }

    // Relational layers: node features and parameters.
    for (name, kind) in [
        ("dr2n", RelationKind::Dr2n),
        ("rn", RelationKind::Rn),
        ("gat", RelationKind::Gat),
    ] {
        let mut store = ParamStore::new();
        let layer = RelationalLayer::new(&mut store, "rel", kind, 4, 3, &mut r).unwrap();
        let hs = randn(&[3, 4], &mut r);
        let e = check(std::slice::from_ref(&hs), |t, v| {
            let nodes = NodeSet::all_valid(t, v[0]);
            let (y, _) = layer.forward(t, &store, &nodes).unwrap();
            reduce(t, y)
        });
        let p = check_params(&store, &layer.params(), |t, st| {
            let hv = t.constant(hs.clone());
            let nodes = NodeSet::all_valid(t, hv);
            let (y, _) = layer.forward(t, st, &nodes).unwrap();
            reduce(t, y)
        });
        out.push((name, e.max(p)));
    }
    out
}

trait ScaleClone {
    fn scale_clone(&self, c: f64) -> Tensor;
}

impl ScaleClone for Tensor {
    fn scale_clone(&self, c: f64) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().iter().map(|v| v * c).collect()).unwrap()
    }
}

/// Three nodes (two actors, one distractor), `T = 2`, `d_h = 8`.
fn tiny_episode(seed: u64, classes: usize) -> Episode {
    let mut r = rng(seed ^ 0xabc);
    let nodes = (0..3)
        .map(|i| Node {
            proposal: BBox {
                cx: r.random_range(0.2..0.8),
                cy: r.random_range(0.2..0.8),
                w: r.random_range(0.1..0.3),
                h: r.random_range(0.1..0.3),
            },
            feat: (0..8).map(|_| r.random_range(-1.0..1.0)).collect(),
            distractor: i == 2,
            feat_steps: None,
        })
        .collect::<Vec<_>>();
    let actors = nodes[..2]
        .iter()
        .map(|n| Actor {
            gt_box: n.proposal.refine([
                r.random_range(-0.2..0.2),
                r.random_range(-0.2..0.2),
                r.random_range(-0.2..0.2),
                r.random_range(-0.2..0.2),
            ]),
            labels: (0..3).map(|_| r.random_range(0..classes)).collect(),
        })
        .collect();
    Episode {
        seed,
        nodes,
        actors,
        clip_label: None,
        config_hash: None,
    }
}

fn tiny_model(variant: Variant, seed: u64) -> Model {
    Model::new(
        ModelConfig {
            variant,
            num_classes: 3,
            horizon: 2,
            d_h: 8,
            d_e: 8,
            d_cls: 8,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Worst relative error of the loss gradient over every parameter scalar,
/// or `None` when some difference quotient is unstable between steps `h`
/// and `h/4`, which means a ReLU or smooth-L1 kink lies inside the stencil.
fn end_to_end(model: &Model, ep: &Episode) -> Option<f64> {
    let loss = |m: &Model| {
        let mut t = Tape::new();
        let l = m.episode_loss(&mut t, ep, None).unwrap().unwrap().total;
        t.scalar(l)
    };
    let mut t = Tape::new();
    let l = model.episode_loss(&mut t, ep, None).unwrap().unwrap().total;
    t.backward(l).unwrap();
    let grads: std::collections::HashMap<_, _> = t.param_grads().into_iter().collect();
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for id in model.store.ids() {
        for k in 0..model.store.value(id).numel() {
            let orig = model.store.value(id).data()[k];
            let mut quotient = |h: f64| {
                work.store.value_mut(id).data_mut()[k] = orig + h;
                let plus = loss(&work);
                work.store.value_mut(id).data_mut()[k] = orig - h;
                let minus = loss(&work);
                work.store.value_mut(id).data_mut()[k] = orig;
                (plus - minus) / (2.0 * h)
            };
            let (coarse, fine) = (quotient(FD_STEP), quotient(FD_STEP / 4.0));
            if (coarse - fine).abs() > 1e-6 + 1e-3 * coarse.abs() {
                return None;
            }
            let analytic = grads.get(&id).map_or(0.0, |g| g[k]);
            worst = worst.max(rel_error(analytic, coarse));
        }
    }
    Some(worst)
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..FD_SEEDS {
        for (name, err) in op_checks(seed) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    let mut e2e: f64 = 0.0;
    let (mut clean, mut kinked) = (0, 0);
    let mut seed = 0;
    while clean < FD_SEEDS && seed < 3 * FD_SEEDS {
        match end_to_end(&tiny_model(Variant::Dr2n, seed), &tiny_episode(seed, 3)) {
            Some(err) => {
                e2e = e2e.max(err);
                clean += 1;
            }
            None => kinked += 1,
        }
        seed += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<_> = worst.iter().filter(|(_, e)| !(*e < FD_TOL)).collect();
    ensure(bad.is_empty(), || format!("ops over tolerance: {bad:?}"))?;
    ensure(clean == FD_SEEDS, || format!("only {clean} kink-free seeds"))?;
    ensure(e2e < FD_TOL, || format!("end-to-end DR2N loss rel err {e2e:.2e}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    let op_max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!(
        "{} ops over {FD_SEEDS} seeds, max rel err {op_max:.1e}; end-to-end loss over {clean} seeds ({kinked} skipped at a kink), max rel err {e2e:.1e}; {secs:.1}s",
        worst.len()
    ))
}

// ------------------------------------------------------------------ 2

fn random_mask(n: usize, r: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.75)).collect();
    let k = r.random_range(0..n);
    m[k] = true;
    m
}

fn attention_invariants() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..50u64 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(2..8);
        let mask = random_mask(n, &mut r);
        for kind in [RelationKind::Dr2n, RelationKind::Rn, RelationKind::Gat] {
            cases += 1;
            let mut store = ParamStore::new();
            let layer = RelationalLayer::new(&mut store, "rel", kind, 5, 4, &mut r).unwrap();
            let h = randn(&[n, 5], &mut r);
            let adm = admissible(kind, &mask);

            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let nodes = NodeSet {
                h: hv,
                mask: mask.clone(),
            };
            let (out, attn) = layer.forward(&mut tape, &store, &nodes).unwrap();
            let alpha = tape.value(attn.alpha).clone();
            let out = tape.value(out).clone();

            for i in 0..n {
                let row = alpha.row(i);
                for j in 0..n {
                    ensure(adm[i * n + j] || row[j] == 0.0, || {
                        format!("{kind:?}: inadmissible edge ({i},{j}) has weight {}", row[j])
                    })?;
                }
                if adm[i * n..(i + 1) * n].iter().any(|&a| a) {
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                } else {
                    ensure(row.iter().all(|&w| w == 0.0), || {
                        format!("{kind:?}: empty row {i} not zero")
                    })?;
                }
            }

            if let Some(logits) = attn.logits {
                let lg = tape.value(logits).clone();
                let shifted: Vec<f64> = (0..n * n).map(|k| lg.data()[k] + 10.0 * (k / n) as f64 - 7.0).collect();
                let mut t2 = Tape::new();
                let sv = t2.constant(Tensor::new(vec![n, n], shifted).unwrap());
                let a2 = t2.softmax_rows(sv, &adm).unwrap();
                worst_shift = worst_shift.max(t2.value(a2).max_abs_diff(&alpha));
            }

            // Relabel the nodes and compare.
            let mut perm: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                perm.swap(k, r.random_range(0..=k));
            }
            let hp = Tensor::from_rows(&perm.iter().map(|&p| h.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
            let mp: Vec<bool> = perm.iter().map(|&p| mask[p]).collect();
            let mut t3 = Tape::new();
            let hv = t3.constant(hp);
            let (op, ap) = layer.forward(&mut t3, &store, &NodeSet { h: hv, mask: mp }).unwrap();
            let (op, ap) = (t3.value(op), t3.value(ap.alpha));
            for k in 0..n {
                for c in 0..5 {
                    worst_perm = worst_perm.max((op.get2(k, c) - out.get2(perm[k], c)).abs());
                }
                for l in 0..n {
                    worst_perm = worst_perm.max((ap.get2(k, l) - alpha.get2(perm[k], perm[l])).abs());
                }
            }
        }
    }
    ensure(worst_sum <= 1e-12, || format!("row sum off by {worst_sum:.1e}"))?;
    ensure(worst_shift <= 1e-12, || {
        format!("softmax shift changed weights by {worst_shift:.1e}")
    })?;
    ensure(worst_perm <= 1e-10, || {
        format!("permutation broke equivariance by {worst_perm:.1e}")
    })?;
    Ok(format!(
        "{cases} random node sets; row sums {worst_sum:.1e}, shift {worst_shift:.1e}, permutation {worst_perm:.1e}, masks exact"
    ))
}

// ------------------------------------------------------------------ 3

fn variant_semantics() -> Outcome {
    // RN: exactly uniform over admissible j ≠ i.
    for seed in 0..20u64 {
        let mut r = rng(2000 + seed);
        let n = r.random_range(1..8);
        let mask = random_mask(n, &mut r);
        let mut store = ParamStore::new();
        let layer = RelationalLayer::new(&mut store, "rel", RelationKind::Rn, 4, 4, &mut r).unwrap();
        let mut t = Tape::new();
        let hv = t.constant(randn(&[n, 4], &mut r));
        let (_, attn) = layer
            .forward(
                &mut t,
                &store,
                &NodeSet {
                    h: hv,
                    mask: mask.clone(),
                },
            )
            .unwrap();
        let alpha = t.value(attn.alpha);
        let valid = mask.iter().filter(|&&m| m).count();
        for i in 0..n {
            for j in 0..n {
                let want = if mask[i] && mask[j] && i != j {
                    1.0 / (valid - 1) as f64
                } else {
                    0.0
                };
                ensure(alpha.get2(i, j) == want, || {
                    format!("RN α[{i}][{j}] = {} (want {want}) with mask {mask:?}", alpha.get2(i, j))
                })?;
            }
        }
    }

    // GAT: the update reads only z_i.
    let mut gat_diff: f64 = 0.0;
    let mut dr2n_diff: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(3000 + seed);
        let n = r.random_range(2..7);
        let h = randn(&[n, 6], &mut r);
        let z = randn(&[n, 6], &mut r);
        let i = r.random_range(0..n);
        let mut h2 = h.clone();
        for c in 0..6 {
            h2.data_mut()[i * 6 + c] += r.random_range(-3.0..3.0);
        }
        for (kind, acc) in [(RelationKind::Gat, &mut gat_diff), (RelationKind::Dr2n, &mut dr2n_diff)] {
            let mut store = ParamStore::new();
            let layer = RelationalLayer::new(&mut store, "rel", kind, 6, 4, &mut rng(seed)).unwrap();
            let update = |h: &Tensor| {
                let mut t = Tape::new();
                let hv = t.constant(h.clone());
                let zv = t.constant(z.clone());
                let nodes = NodeSet::all_valid(&t, hv);
                let y = layer.node_update(&mut t, &store, &nodes, zv).unwrap();
                t.value(y).row(i).to_vec()
            };
            let (a, b) = (update(&h), update(&h2));
            *acc = acc.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    ensure(gat_diff == 0.0, || {
        format!("GAT update moved by {gat_diff:.1e} when only h_i changed")
    })?;
    ensure(dr2n_diff > 1e-6, || "control: DR2N update should depend on h_i".into())?;

    // DR²N with a pass-through node update reduces to the GRU rollout.
    let mut nest_diff: f64 = 0.0;
    let world = World::new(WorldConfig::default()).unwrap();
    for seed in 0..5u64 {
        let cfg = ModelConfig::default();
        let gru = Model::new(
            ModelConfig {
                variant: Variant::Gru,
                ..cfg.clone()
            },
            seed,
        )
        .unwrap();
        let mut dr2n = Model::new(cfg.clone(), seed).unwrap();
        for name in gru.store.names() {
            let (a, b) = (gru.store.id(name).unwrap(), dr2n.store.id(name).unwrap());
            ensure(gru.store.value(a) == dr2n.store.value(b), || {
                format!("shared param {name} differs")
            })?;
        }
        let d = cfg.d_h;
        let layer = dr2n.relation_mut().unwrap().clone();
        let mut pass = Tensor::zeros(&[2 * d, d]);
        for k in 0..d {
            pass.data_mut()[k * d + k] = 1.0;
        }
        *dr2n.store.value_mut(layer.node.weight) = pass;
        *dr2n.store.value_mut(layer.node.bias) = Tensor::zeros(&[d]);
        dr2n.relation_mut().unwrap().node_activation = Activation::Identity;
        let ep = world.generate(seed);
        let (a, b) = (gru.predict_episode(&ep).unwrap(), dr2n.predict_episode(&ep).unwrap());
        for (x, y) in a.logits.iter().zip(&b.logits) {
            nest_diff = nest_diff.max(x.max_abs_diff(y));
        }
    }
    ensure(nest_diff <= 1e-10, || {
        format!("pass-through DR2N differs from GRU by {nest_diff:.1e}")
    })?;
    Ok(format!(
        "RN exactly uniform; GAT update independent of h_i (control DR2N moves {dr2n_diff:.2}); pass-through DR2N vs GRU {nest_diff:.1e}"
    ))
}

// ------------------------------------------------------------------ 4

fn no_teacher_forcing() -> Outcome {
    let world = World::new(WorldConfig::default()).unwrap();
    let mut checked = 0;
    for v in Variant::ALL {
        let model = Model::new(
            ModelConfig {
                variant: v,
                ..ModelConfig::default()
            },
            9,
        )
        .unwrap();
        for seed in 0..5u64 {
            let ep = world.generate(seed);
            let mut alt = ep.clone();
            let mut r = rng(seed);
            for a in &mut alt.actors {
                for l in a.labels.iter_mut().skip(1) {
                    *l = (*l + r.random_range(1..8)) % 8;
                }
            }
            let run = |e: &Episode| {
                let mut t = Tape::new();
                let x = t.constant(e.features());
                let fwd = model.forward(&mut t, x).unwrap();
                let loss = model.loss(&mut t, &fwd, e).unwrap();
                let bits: Vec<u64> = fwd
                    .logits
                    .iter()
                    .flat_map(|&l| t.value(l).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                    .collect();
                (bits, t.scalar(loss.total))
            };
            let ((la, sa), (lb, sb)) = (run(&ep), run(&alt));
            ensure(la == lb, || format!("{v}: logits changed with future labels"))?;
            ensure(sa != sb, || format!("{v}: control: loss should see the labels"))?;
            let (pa, pb) = (
                model.predict_episode(&ep).unwrap(),
                model.predict_episode(&alt).unwrap(),
            );
            ensure(pa == pb, || format!("{v}: predictions changed with future labels"))?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} (variant, episode) pairs bit-identical under relabelled futures"
    ))
}

// ------------------------------------------------------------------ 5

fn schedule_fidelity() -> Outcome {
    let s = Schedule::default();
    let (tw, tc) = (s.warmup_steps, s.cosine_steps);
    let lr = [s.lr(0), s.lr(tw), s.lr(tw + tc)];
    ensure((lr[0] - 0.008).abs() <= 1e-12, || format!("lr(0) = {}", lr[0]))?;
    ensure((lr[1] - 0.08).abs() <= 1e-12, || format!("lr(T_w) = {}", lr[1]))?;
    ensure(lr[2].abs() <= 1e-12, || format!("lr(T_w+T_c) = {}", lr[2]))?;
    let betas = ModelConfig {
        horizon: 5,
        ..ModelConfig::default()
    }
    .betas();
    let want = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
    ensure(
        betas.len() == 6 && betas.iter().zip(want).all(|(b, w)| (b - w).abs() <= 1e-12),
        || format!("betas {betas:?}"),
    )?;
    Ok(format!("lr = {:?} at 0, {tw}, {}; betas {betas:?}", lr, tw + tc))
}

// ------------------------------------------------------------------ 6

fn metric_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (preds, eps) = random_instance(seed, 3, 1, 10);
        for t in 0..=1 {
            let has_gt = eps.iter().any(|e| e.actors.iter().any(|a| a.labels[t] < 3));
            if !has_gt {
                continue;
            }
            let ours = map_at_t(&preds, &eps, t, 3, 0.5).map_err(|e| e.to_string())?.map;
            let oracle = brute_force_map(&preds, &eps, t, 3);
            worst = worst.max((ours - oracle).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("mAP off the oracle by {worst:.1e}"))?;

    // Accuracy@K against a hand-written loop.
    let world = World::new(WorldConfig::clip()).unwrap();
    let eps: Vec<Episode> = (0..30).map(|s| world.generate(s)).collect();
    let model = Model::new(
        ModelConfig {
            horizon: 1,
            ..ModelConfig::default()
        },
        4,
    )
    .unwrap();
    let a = model.config.num_classes;
    for k in (10..=100).step_by(10) {
        let mut correct = 0;
        for ep in &eps {
            let len = ep.clip_len();
            let fed = ((k * len).div_ceil(100)).max(1);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for s in 1..=fed {
                let rows: Vec<Vec<f64>> = ep
                    .nodes
                    .iter()
                    .map(|n| {
                        let steps = n.feat_steps.as_ref().unwrap();
                        (0..n.feat.len())
                            .map(|c| steps[..s].iter().map(|f| f[c]).sum::<f64>() / s as f64)
                            .collect()
                    })
                    .collect();
                let p = model
                    .predict(&Tensor::from_rows(&rows).unwrap(), &ep.proposals())
                    .unwrap();
                for sc in &p.scores {
                    for i in 0..p.num_nodes() {
                        for c in 0..a {
                            if sc.get2(i, c) > best.0 {
                                best = (sc.get2(i, c), c);
                            }
                        }
                    }
                }
            }
            correct += usize::from(Some(best.1) == ep.clip_label);
        }
        let hand = correct as f64 / eps.len() as f64;
        let ours = accuracy_at_k(&model, &eps, k as f64).map_err(|e| e.to_string())?;
        ensure(hand == ours, || format!("accuracy@{k}%: {ours} vs hand loop {hand}"))?;
    }
    Ok(format!(
        "20 instances, max |mAP - oracle| {worst:.1e}; accuracy@K equals hand loop at 10 K values"
    ))
}

// ------------------------------------------------------------------ 7, 8

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ablation_ordering(table: &dr2n_core::traineval::AblationTable) -> Outcome {
    let d = table.seed_future_maps(Variant::Dr2n);
    let rn = table.seed_future_maps(Variant::Rn);
    let gru = table.seed_future_maps(Variant::Gru);
    ensure(d.len() == 5 && rn.len() == 5 && gru.len() == 5, || {
        "some runs failed".into()
    })?;
    let (md, mr, mg) = (mean(&d), mean(&rn), mean(&gru));
    let gap = md - mr;
    let paired: Vec<f64> = d.iter().zip(&rn).map(|(a, b)| a - b).collect();
    let se = [std_err(&d).unwrap(), std_err(&rn).unwrap(), std_err(&paired).unwrap()];
    let se_max = se.iter().copied().fold(0.0, f64::max);
    let detail = format!(
        "mean mAP t=1..5: dr2n {md:.4}, rn {mr:.4}, gru {mg:.4}; gap {gap:.4} vs SE dr2n {:.4} / rn {:.4} / paired {:.4}",
        se[0], se[1], se[2]
    );
    ensure(md > mr && md > mg, || format!("ordering violated: {detail}"))?;
    ensure(gap > se_max, || format!("gap within noise: {detail}"))?;
    Ok(detail)
}

fn horizon_decay(table: &dr2n_core::traineval::AblationTable) -> Outcome {
    let last = *table.ts.last().unwrap();
    let mut parts = Vec::new();
    for &v in &table.variants {
        let (a, b) = (
            table.mean_map(v, 0).unwrap_or(f64::NAN),
            table.mean_map(v, last).unwrap_or(f64::NAN),
        );
        ensure(a >= b, || format!("{v}: mAP(t=0) {a:.4} < mAP(t={last}) {b:.4}"))?;
        parts.push(format!("{v} {a:.3}->{b:.3}"));
    }
    Ok(parts.join(", "))
}

// ------------------------------------------------------------------ 9

fn early_classification() -> Outcome {
    let mut cfg = RunConfig::clip();
    cfg.ablation.variants = vec![Variant::Gru, Variant::Dr2n];
    let start = Instant::now();
    let table = run_ablation(&cfg.ablation(), None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    print!("{}", indent(&table.accuracy_csv()));
    for &v in &table.variants {
        let accs: Vec<f64> = table
            .k_percents
            .iter()
            .map(|&k| table.mean_accuracy(v, k).unwrap())
            .collect();
        ensure(accs.windows(2).all(|w| w[1] >= w[0]), || {
            format!("{v} accuracy not monotone in K: {accs:?}")
        })?;
    }
    let k0 = table.k_percents[0];
    let (d, g) = (
        table.mean_accuracy(Variant::Dr2n, k0).unwrap(),
        table.mean_accuracy(Variant::Gru, k0).unwrap(),
    );
    ensure(d >= g, || format!("accuracy@{k0}%: dr2n {d:.4} < gru {g:.4}"))?;
    Ok(format!(
        "monotone in K for gru and dr2n; @{k0}%: dr2n {d:.4} vs gru {g:.4}; {secs:.0}s"
    ))
}

// ------------------------------------------------------------------ 10

fn determinism() -> Outcome {
    let world = World::new(WorldConfig::default()).unwrap();
    let cfg = ModelConfig {
        d_h: 32,
        ..ModelConfig::default()
    };
    let curve = || {
        let mut t = Trainer::new(
            Model::new(cfg.clone(), 5).unwrap(),
            Schedule::default(),
            TrainConfig {
                steps: Some(25),
                ..TrainConfig::default()
            },
            5,
            DataSource::World(world.clone()),
        )
        .unwrap();
        let mut bits = Vec::new();
        t.run(|l| bits.push(l.loss.to_bits())).unwrap();
        (bits, t)
    };
    let ((a, trainer), (b, _)) = (curve(), curve());
    ensure(a == b, || "loss curves differ between identical runs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck_path = dir.path().join("ck.json");
    let ck = trainer.checkpoint(Some("h".into()));
    ck.save(&ck_path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    ensure(back == ck, || "checkpoint changed on disk".into())?;
    let restored = Model::from_checkpoint(&back).map_err(|e| e.to_string())?;
    let eval = eval_set(&world, 50);
    let preds = |m: &Model| {
        eval.iter()
            .map(|e| m.predict_episode(e).unwrap())
            .collect::<Vec<Prediction>>()
    };
    ensure(preds(&trainer.model) == preds(&restored), || {
        "restored model predicts differently".into()
    })?;

    let data: Vec<Episode> = (0..1000).map(|s| world.generate(s)).collect();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&path, &data).map_err(|e| e.to_string())?;
    let loaded = read_jsonl(&path, Some(8)).map_err(|e| e.to_string())?;
    ensure(loaded == data, || "dataset changed on disk".into())?;
    let (pa, pb) = (
        data.iter()
            .map(|e| restored.predict_episode(e).unwrap())
            .collect::<Vec<_>>(),
        loaded
            .iter()
            .map(|e| restored.predict_episode(e).unwrap())
            .collect::<Vec<_>>(),
    );
    for t in 0..=5 {
        let (x, y) = (
            map_at_t(&pa, &data, t, 8, 0.5).unwrap(),
            map_at_t(&pb, &loaded, t, 8, 0.5).unwrap(),
        );
        ensure(x == y, || format!("metrics differ after dataset round-trip at t={t}"))?;
    }
    let rc = RunConfig::default();
    let rc2 = RunConfig::from_toml(&rc.to_toml()).map_err(|e| e.to_string())?;
    ensure(rc == rc2 && rc.hash() == rc2.hash(), || {
        "config changed through TOML".into()
    })?;
    Ok("25-step loss curves bit-identical; checkpoint, 1000-episode dataset and config round-trip losslessly".into())
}

// ------------------------------------------------------------------ harness

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}\n")).collect()
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS [{id:>2}] {name} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL [{id:>2}] {name} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let quick = std::env::var_os("DR2N_ACCEPTANCE_QUICK").is_some();
    let mut ok = true;
    ok &= run(1, "gradient integrity", gradient_integrity);
    ok &= run(2, "attention invariants", attention_invariants);
    ok &= run(3, "variant semantics", variant_semantics);
    ok &= run(4, "no teacher forcing", no_teacher_forcing);
    ok &= run(5, "schedule fidelity", schedule_fidelity);
    ok &= run(6, "metric correctness", metric_correctness);

    if quick {
        println!("SKIP [ 7] ablation ordering (DR2N_ACCEPTANCE_QUICK set)");
        println!("SKIP [ 8] horizon decay (DR2N_ACCEPTANCE_QUICK set)");
        println!("SKIP [ 9] early classification (DR2N_ACCEPTANCE_QUICK set)");
    } else {
        let start = Instant::now();
        let table = catch_unwind(|| run_ablation(&RunConfig::default().ablation(), None));
        let secs = start.elapsed().as_secs_f64();
        match table {
            Ok(Ok(table)) => {
                println!("     full ablation grid, 6 variants x 5 seeds, {secs:.0}s:");
                print!("{}", indent(&table.grid_csv()));
                ok &= run(7, "ablation ordering", || {
                    ensure(secs < 1800.0, || format!("grid took {secs:.0}s"))?;
                    ablation_ordering(&table)
                });
                ok &= run(8, "horizon decay", || horizon_decay(&table));
            }
            other => {
                let msg = match other {
                    Ok(Err(e)) => e.to_string(),
                    _ => "panicked".into(),
                };
                println!("FAIL [ 7] ablation ordering: ablation failed: {msg}");
                println!("FAIL [ 8] horizon decay: ablation failed: {msg}");
                ok = false;
            }
        }
        ok &= run(9, "early classification", early_classification);
    }
    ok &= run(10, "determinism and round-trips", determinism);

    if !ok {
        std::process::exit(1);
    }
}

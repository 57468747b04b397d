#![allow(dead_code)]

use dr2n_core::model::Prediction;
use dr2n_core::synthworld::{Actor, Node};
use dr2n_core::{BBox, Episode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::truncated_normal(shape, 1.0, rng)
}

/// Values bounded away from zero, for kinked ops.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Small detection instance: episodes with random boxes and labels, and
/// predictions whose boxes are jittered ground truth (or noise for
/// distractors) with distinct random scores.
pub fn random_instance(
    seed: u64,
    num_classes: usize,
    horizon: usize,
    max_dets: usize,
) -> (Vec<Prediction>, Vec<Episode>) {
    let mut r = rng(seed);
    let n_eps = r.random_range(1..=3);
    let mut budget = max_dets;
    let mut preds = Vec::new();
    let mut eps = Vec::new();
    for e in 0..n_eps {
        let remaining = n_eps - e - 1;
        let n_nodes = r.random_range(1..=(budget - remaining).clamp(1, 5));
        budget -= n_nodes;
        let mut nodes = Vec::new();
        let mut actors = Vec::new();
        let mut boxes = Vec::new();
        for i in 0..n_nodes {
            let distractor = i > 0 && r.random_bool(0.3);
            let gt = BBox {
                cx: r.random_range(0.2..0.8),
                cy: r.random_range(0.2..0.8),
                w: r.random_range(0.1..0.3),
                h: r.random_range(0.1..0.3),
            };
            let j = 0.12;
            let pred = BBox {
                cx: gt.cx + r.random_range(-j..j) * gt.w,
                cy: gt.cy + r.random_range(-j..j) * gt.h,
                w: gt.w * r.random_range(0.7..1.3),
                h: gt.h * r.random_range(0.7..1.3),
            };
            boxes.push(pred);
            nodes.push(Node {
                proposal: pred,
                feat: vec![0.0],
                distractor,
                feat_steps: None,
            });
            if !distractor {
                actors.push(Actor {
                    gt_box: gt,
                    labels: (0..=horizon).map(|_| r.random_range(0..num_classes)).collect(),
                });
            }
        }
        let k = num_classes + 1;
        let scores: Vec<Tensor> = (0..=horizon)
            .map(|_| Tensor::new(vec![n_nodes, k], (0..n_nodes * k).map(|_| r.random::<f64>()).collect()).unwrap())
            .collect();
        preds.push(Prediction {
            boxes,
            logits: scores.clone(),
            scores,
        });
        eps.push(Episode {
            seed: e as u64,
            nodes,
            actors,
            clip_label: None,
            config_hash: None,
        });
    }
    (preds, eps)
}

/// mAP at `t` by exhaustive evaluation of every score cutoff.
pub fn brute_force_map(preds: &[Prediction], eps: &[Episode], t: usize, num_classes: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let num_gt: usize = eps
            .iter()
            .map(|e| e.actors.iter().filter(|a| a.labels[t] == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (e, p) in preds.iter().enumerate() {
            for i in 0..p.boxes.len() {
                dets.push((p.scores[t].get2(i, c), e, i));
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        // Greedy assignment in score order.
        let mut used: Vec<Vec<bool>> = eps.iter().map(|e| vec![false; e.actors.len()]).collect();
        let mut hit = vec![false; dets.len()];
        for (k, &(_, e, i)) in dets.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (g, a) in eps[e].actors.iter().enumerate() {
                if used[e][g] || a.labels[t] != c {
                    continue;
                }
                let iou = preds[e].boxes[i].iou(&a.gt_box);
                if iou > 0.5 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                used[e][g] = true;
                hit[k] = true;
            }
        }
        // Precision and recall at every cutoff, recounted from scratch.
        let pr: Vec<(f64, f64)> = (1..=dets.len())
            .map(|m| {
                let tp = hit[..m].iter().filter(|&&h| h).count() as f64;
                (tp / m as f64, tp / num_gt as f64)
            })
            .collect();
        let mut levels: Vec<f64> = pr.iter().map(|p| p.1).filter(|&r| r > 0.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = pr.iter().filter(|x| x.1 >= r).map(|x| x.0).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        aps.push(ap);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

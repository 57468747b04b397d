use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Prediction};
use crate::synthworld::Episode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for classes with no ground truth at this step.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Area under the interpolated precision/recall curve for detections
/// already sorted by descending score. `hits[k]` says whether detection `k`
/// matched a ground truth.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope, right to left.
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for k in 0..prec.len() {
        if rec[k] > last_r {
            ap += (rec[k] - last_r) * prec[k];
            last_r = rec[k];
        }
    }
    ap
}

struct Detection {
    score: f64,
    episode: usize,
    node: usize,
}

/// Per-class AP and mAP at step `t`.
///
/// Every node contributes one detection per action class, scored by its
/// class probability at `t`, located at its refined `t = 0` box. In score
/// order, each detection takes the unmatched ground truth of its episode
/// with the highest IoU above `iou_thresh` whose label at `t` is the class.
pub fn map_at_t(
    preds: &[Prediction],
    episodes: &[Episode],
    t: usize,
    num_classes: usize,
    iou_thresh: f64,
) -> Result<ApResult> {
    if episodes.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    if preds.len() != episodes.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} episodes",
            preds.len(),
            episodes.len()
        )));
    }
    for (p, e) in preds.iter().zip(episodes) {
        if p.num_nodes() != e.num_nodes() || (p.num_nodes() > 0 && p.scores.len() <= t) || e.horizon() < t {
            return Err(Error::Eval("prediction does not match episode".into()));
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut dets: Vec<Detection> = Vec::new();
        let mut num_gt = 0;
        for (e, (p, ep)) in preds.iter().zip(episodes).enumerate() {
            num_gt += ep.actors.iter().filter(|a| a.labels[t] == c).count();
            for i in 0..p.num_nodes() {
                dets.push(Detection {
                    score: p.scores[t].get2(i, c),
                    episode: e,
                    node: i,
                });
            }
        }
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        // Stable sort keeps (episode, node) order among equal scores.
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken: Vec<Vec<bool>> = episodes.iter().map(|e| vec![false; e.actors.len()]).collect();
        let hits: Vec<bool> = dets
            .iter()
            .map(|d| {
                let ep = &episodes[d.episode];
                let b = preds[d.episode].boxes[d.node];
                let best = ep
                    .actors
                    .iter()
                    .enumerate()
                    .filter(|(g, a)| !taken[d.episode][*g] && a.labels[t] == c)
                    .map(|(g, a)| (g, b.iou(&a.gt_box)))
                    .filter(|&(_, iou)| iou > iou_thresh)
                    .max_by(|x, y| x.1.total_cmp(&y.1));
                match best {
                    Some((g, _)) => {
                        taken[d.episode][g] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(Some(average_precision(&hits, num_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Eval(format!("no ground truth at t = {t}")));
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ApResult { per_class, map })
}

/// Number of clip steps fed for `k_percent` of a clip of `len` steps.
pub fn fed_steps(k_percent: f64, len: usize) -> usize {
    let raw = k_percent / 100.0 * len as f64;
    // Guard against 30% of 10 landing at 3.0000000000000004.
    ((raw - 1e-9).ceil() as usize).clamp(1, len)
}

/// Clip accuracy after watching the first `k_percent` of each clip.
///
/// For every fed prefix the model sees the mean of the observed steps; the
/// clip label is the most confident action-class prediction over all
/// prefixes, nodes, and forecast steps.
pub fn accuracy_at_k(model: &Model, episodes: &[Episode], k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Eval(format!("K = {k_percent} outside (0, 100]")));
    }
    if episodes.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let a = model.config.num_classes;
    let mut correct = 0usize;
    for ep in episodes {
        let label = ep
            .clip_label
            .ok_or_else(|| Error::Eval("accuracy@K needs clip episodes".into()))?;
        let fed = fed_steps(k_percent, ep.clip_len());
        let proposals = ep.proposals();
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for s in 1..=fed {
            let pred = model.predict(&ep.prefix_features(s)?, &proposals)?;
            for scores in &pred.scores {
                for i in 0..pred.num_nodes() {
                    for c in 0..a {
                        let v = scores.get2(i, c);
                        if v > best.0 {
                            best = (v, c);
                        }
                    }
                }
            }
        }
        correct += usize::from(best.1 == label);
    }
    Ok(correct as f64 / episodes.len() as f64)
}

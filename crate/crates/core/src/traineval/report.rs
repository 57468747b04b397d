use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, Prediction, Variant};
use crate::synthworld::Episode;

use super::metrics::{accuracy_at_k, map_at_t};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub ts: Vec<usize>,
    /// mAP@0.5 per requested `t`.
    pub map: Vec<f64>,
    /// `per_class[k][c]`: AP of class `c` at `ts[k]`.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// `(K%, accuracy)` pairs.
    pub accuracy_at_k: Vec<(f64, f64)>,
}

impl EvalReport {
    /// mAP at step `t`, if it was evaluated.
    pub fn map_at(&self, t: usize) -> Option<f64> {
        self.ts.iter().position(|&x| x == t).map(|k| self.map[k])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per metric: `metric,variant,seed,config_hash,<columns>`.
    pub fn to_csv(&self) -> String {
        let hash = self.config_hash.as_deref().unwrap_or("");
        let mut out = String::new();
        if !self.ts.is_empty() {
            out.push_str("metric,variant,seed,config_hash");
            for t in &self.ts {
                out.push_str(&format!(",t{t}"));
            }
            out.push('\n');
            out.push_str(&format!("map,{},{},{}", self.variant, self.seed, hash));
            for m in &self.map {
                out.push_str(&format!(",{m}"));
            }
            out.push('\n');
        }
        if !self.accuracy_at_k.is_empty() {
            out.push_str("metric,variant,seed,config_hash");
            for (k, _) in &self.accuracy_at_k {
                out.push_str(&format!(",k{k}"));
            }
            out.push('\n');
            out.push_str(&format!("accuracy,{},{},{}", self.variant, self.seed, hash));
            for (_, a) in &self.accuracy_at_k {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Metrics for precomputed predictions.
pub fn report_from_predictions(
    variant: Variant,
    num_classes: usize,
    preds: &[Prediction],
    episodes: &[Episode],
    ts: &[usize],
    seed: u64,
    config_hash: Option<String>,
) -> Result<EvalReport> {
    let mut map = Vec::with_capacity(ts.len());
    let mut per_class = Vec::with_capacity(ts.len());
    for &t in ts {
        let r = map_at_t(preds, episodes, t, num_classes, 0.5)?;
        map.push(r.map);
        per_class.push(r.per_class);
    }
    Ok(EvalReport {
        variant,
        seed,
        config_hash,
        ts: ts.to_vec(),
        map,
        per_class,
        accuracy_at_k: Vec::new(),
    })
}

/// mAP at each of `ts` and accuracy at each of `ks` (clip episodes only).
pub fn evaluate(
    model: &Model,
    episodes: &[Episode],
    ts: &[usize],
    ks: &[f64],
    seed: u64,
    config_hash: Option<String>,
) -> Result<EvalReport> {
    let preds = if ts.is_empty() {
        Vec::new()
    } else {
        episodes
            .iter()
            .map(|e| model.predict_episode(e))
            .collect::<Result<Vec<_>>>()?
    };
    let mut report = report_from_predictions(
        model.config.variant,
        model.config.num_classes,
        &preds,
        episodes,
        ts,
        seed,
        config_hash,
    )?;
    for &k in ks {
        report.accuracy_at_k.push((k, accuracy_at_k(model, episodes, k)?));
    }
    Ok(report)
}

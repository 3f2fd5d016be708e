//! MAE, precision/recall/F-measure and the payload overhead ledger.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SaliencyMap;
use crate::error::{Error, Result};

/// Weight of precision in the F-measure.
pub const BETA2: f64 = 0.3;
pub const GT_THRESHOLD: f64 = 0.5;
const LEVELS: usize = 255;

fn same_dims(a: &SaliencyMap, b: &SaliencyMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::invalid(
            "map pair",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// Mean absolute per-pixel difference.
pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    same_dims(pred, gt)?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / pred.values().len() as f64)
}

/// Precision and recall of `pred >= tau_pred` against `gt >= tau_gt`.
///
/// An empty prediction has precision 0; an empty ground truth has recall 0.
pub fn precision_recall(pred: &SaliencyMap, gt: &SaliencyMap, tau_pred: f64, tau_gt: f64) -> Result<(f64, f64)> {
    same_dims(pred, gt)?;
    for (name, t) in [("tau_pred", tau_pred), ("tau_gt", tau_gt)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(name, format!("{t} outside [0, 1]")));
        }
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p as f64 >= tau_pred, g as f64 >= tau_gt) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok(ratios(tp, fp, fneg))
}

fn ratios(tp: usize, fp: usize, fneg: usize) -> (f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    (precision, recall)
}

/// `(1 + b2) P R / (b2 P + R)`, 0 when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// Twice the mean prediction, rounded up to the next multiple of 1/255
    /// and never below 1/255.
    Adaptive,
    /// Best F over the 255 thresholds k/255, k = 1..=255.
    MaxF,
}

impl ThresholdPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdPolicy::Adaptive => "adaptive",
            ThresholdPolicy::MaxF => "max-f",
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(ThresholdPolicy::Adaptive),
            "max-f" => Ok(ThresholdPolicy::MaxF),
            _ => Err(Error::invalid("threshold policy", format!("`{s}`; expected adaptive or max-f"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScore {
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub threshold: f64,
}

fn threshold(k: usize) -> f64 {
    k as f64 / LEVELS as f64
}

/// Largest k with `k/255 <= p`.
fn level(p: f64) -> usize {
    let mut k = ((p * LEVELS as f64).floor().max(0.0) as usize).min(LEVELS);
    while k < LEVELS && threshold(k + 1) <= p {
        k += 1;
    }
    while k > 0 && threshold(k) > p {
        k -= 1;
    }
    k
}

/// Adaptive threshold `min(1, 2 mean)` moved up onto the k/255 grid.
///
/// Level 0 would mark every pixel salient, so an all-zero prediction uses 1/255.
pub fn adaptive_level(pred: &SaliencyMap) -> usize {
    let tau = (2.0 * pred.mean()).min(1.0);
    let k = level(tau);
    let k = if threshold(k) < tau { k + 1 } else { k };
    k.max(1)
}

/// MAE plus precision, recall and F at the threshold chosen by `policy`.
pub fn score_map(pred: &SaliencyMap, gt: &SaliencyMap, policy: ThresholdPolicy) -> Result<SaliencyScore> {
    let mae = mae(pred, gt)?;
    // per-level histograms: pixel counts by prediction level, split by gt class
    let mut pos = [0usize; LEVELS + 1];
    let mut neg = [0usize; LEVELS + 1];
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let k = level(p as f64);
        if g as f64 >= GT_THRESHOLD {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let total_pos: usize = pos.iter().sum();
    // cumulative counts from the top: predictions at level >= k
    let mut tp_at = [0usize; LEVELS + 2];
    let mut fp_at = [0usize; LEVELS + 2];
    for k in (0..=LEVELS).rev() {
        tp_at[k] = tp_at[k + 1] + pos[k];
        fp_at[k] = fp_at[k + 1] + neg[k];
    }
    let at = |k: usize| {
        let (p, r) = ratios(tp_at[k], fp_at[k], total_pos - tp_at[k]);
        SaliencyScore {
            mae,
            precision: p,
            recall: r,
            f_measure: f_measure(p, r, BETA2),
            threshold: threshold(k),
        }
    };
    Ok(match policy {
        ThresholdPolicy::Adaptive => at(adaptive_level(pred)),
        ThresholdPolicy::MaxF => {
            let mut best = at(1);
            for k in 2..=LEVELS {
                let s = at(k);
                if s.f_measure > best.f_measure {
                    best = s;
                }
            }
            best
        }
    })
}

/// Payload accounting for one transmitted (caption, map) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadLedger {
    pub original_bytes: u64,
    pub map_payload_bytes: u64,
    pub caption_payload_bytes: u64,
    pub total_bytes: u64,
    /// `1000 * total / original` in ten-thousandths, i.e. the ratio to 4 decimals.
    pub ratio_permille_e4: u64,
}

impl OverheadLedger {
    pub fn new(original_bytes: u64, map_payload_bytes: u64, caption_payload_bytes: u64) -> Result<Self> {
        if original_bytes == 0 {
            return Err(Error::invalid("original size", "0 bytes"));
        }
        let total = map_payload_bytes + caption_payload_bytes;
        Ok(OverheadLedger {
            original_bytes,
            map_payload_bytes,
            caption_payload_bytes,
            total_bytes: total,
            ratio_permille_e4: ratio_permille_e4(total, original_bytes),
        })
    }

    pub fn ratio_permille(&self) -> f64 {
        self.ratio_permille_e4 as f64 / 1e4
    }
}

/// `1000 * total / original` rounded half-up to 4 decimals, scaled by 1e4.
pub fn ratio_permille_e4(total: u64, original: u64) -> u64 {
    let num = total as u128 * 10_000_000;
    let den = original as u128;
    ((2 * num + den) / (2 * den)) as u64
}

/// Ledger for a configuration: index payload from the grid, caption bytes as measured.
pub fn ledger(original_bytes: u64, grid_cells: usize, n_idx: usize, caption_bytes: usize, include_map: bool) -> Result<OverheadLedger> {
    let map = if include_map {
        crate::vq::payload_bytes(grid_cells, n_idx) as u64
    } else {
        0
    };
    OverheadLedger::new(original_bytes, map, caption_bytes as u64)
}

/// One row of the per-sample score CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub snr_db: f64,
    pub mode: String,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub policy: String,
    pub seed: u64,
}

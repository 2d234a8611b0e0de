//! Overlap metrics, gate telemetry and conditional-computation accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Returns `(iou, dice)` of `pred > threshold` against the binary `target`.
/// Two empty masks score 1 on both.
pub fn binary_iou_dice(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "binary_iou_dice",
            expected: target.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let (mut inter, mut predicted, mut actual) = (0u64, 0u64, 0u64);
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let m = p > threshold;
        let t = y > 0.5;
        predicted += u64::from(m);
        actual += u64::from(t);
        inter += u64::from(m && t);
    }
    let union = predicted + actual - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = inter as f64 / union as f64;
    let dice = 2.0 * inter as f64 / (predicted + actual) as f64;
    Ok((iou, dice))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleScore>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mDice")]
    pub mdice: f64,
    pub threshold: f64,
}

/// Per-sample means, ordered by sample id.
pub fn aggregate(mut per_sample: Vec<SampleScore>, threshold: f64) -> Result<EvalReport> {
    if per_sample.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty test set".into()));
    }
    per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let n = per_sample.len() as f64;
    let miou = per_sample.iter().map(|s| s.iou).sum::<f64>() / n;
    let mdice = per_sample.iter().map(|s| s.dice).sum::<f64>() / n;
    Ok(EvalReport {
        per_sample,
        miou,
        mdice,
        threshold,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,iou,dice\n");
        for s in &self.per_sample {
            let _ = writeln!(out, "{},{},{}", s.sample_id, s.iou, s.dice);
        }
        let _ = writeln!(out, "mean,{},{}", self.miou, self.mdice);
        out
    }
}

/// Where a gated unit sits relative to its encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Begin,
    End,
}

/// One gate evaluation, emitted by every traversed gated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    /// 1-based encoder block; block 1 is the earliest.
    pub layer: usize,
    pub side: Side,
    pub logit: f64,
    pub soft_gate: f64,
    pub hard_gate: bool,
    /// Cost of the fusion block at this unit, executed or not.
    pub msfb_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGateStats {
    pub layer: usize,
    pub side: Side,
    pub calls: u64,
    pub opened: u64,
    pub open_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub per_layer: Vec<LayerGateStats>,
    pub overall_open_rate: f64,
    pub msfb_flops_executed: u64,
    pub msfb_flops_potential: u64,
}

/// Counts hard-gate openings; a fusion block's cost counts as executed only
/// when its gate opened.
pub fn gate_stats(records: &[GateRecord]) -> GateStats {
    let mut per: BTreeMap<(usize, Side), (u64, u64)> = BTreeMap::new();
    let (mut executed, mut potential) = (0u64, 0u64);
    for r in records {
        let e = per.entry((r.layer, r.side)).or_default();
        e.0 += 1;
        potential += r.msfb_flops;
        if r.hard_gate {
            e.1 += 1;
            executed += r.msfb_flops;
        }
    }
    let opened: u64 = per.values().map(|v| v.1).sum();
    let per_layer = per
        .into_iter()
        .map(|((layer, side), (calls, opened))| LayerGateStats {
            layer,
            side,
            calls,
            opened,
            open_rate: opened as f64 / calls as f64,
        })
        .collect();
    GateStats {
        per_layer,
        overall_open_rate: if records.is_empty() {
            0.0
        } else {
            opened as f64 / records.len() as f64
        },
        msfb_flops_executed: executed,
        msfb_flops_potential: potential,
    }
}

impl GateStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,side,calls,opened,open_rate\n");
        for l in &self.per_layer {
            let side = match l.side {
                Side::Begin => "begin",
                Side::End => "end",
            };
            let _ = writeln!(out, "{},{side},{},{},{}", l.layer, l.calls, l.opened, l.open_rate);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(v: &[u8]) -> Tensor {
        Tensor::vector(v.iter().map(|&x| f64::from(x)).collect())
    }

    #[test]
    fn identical_masks() {
        let y = mask(&[0, 1, 1, 0]);
        assert_eq!(binary_iou_dice(&y, &y, 0.5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn half_coverage() {
        // |y| = 2, prediction covers one of them: |∩| = 1, |∪| = 2, |mask| = 1
        let (iou, dice) = binary_iou_dice(&mask(&[1, 0, 0]), &mask(&[1, 1, 0]), 0.5).unwrap();
        assert_eq!(iou, 0.5);
        assert_eq!(dice, 2.0 / 3.0);
    }

    #[test]
    fn disjoint_and_empty() {
        assert_eq!(
            binary_iou_dice(&mask(&[1, 0]), &mask(&[0, 1]), 0.5).unwrap(),
            (0.0, 0.0)
        );
        assert_eq!(
            binary_iou_dice(&mask(&[0, 0]), &mask(&[0, 0]), 0.5).unwrap(),
            (1.0, 1.0)
        );
        assert!(binary_iou_dice(&mask(&[0]), &mask(&[0, 0]), 0.5).is_err());
    }

    #[test]
    fn aggregate_means() {
        let scores = vec![
            SampleScore {
                sample_id: "b".into(),
                iou: 1.0,
                dice: 1.0,
            },
            SampleScore {
                sample_id: "a".into(),
                iou: 0.5,
                dice: 2.0 / 3.0,
            },
        ];
        let r = aggregate(scores, 0.5).unwrap();
        assert_eq!(r.miou, 0.75);
        assert_eq!(r.per_sample[0].sample_id, "a");
        assert!(aggregate(Vec::new(), 0.5).is_err());
    }

    fn record(layer: usize, hard: bool) -> GateRecord {
        GateRecord {
            layer,
            side: Side::Begin,
            logit: 0.0,
            soft_gate: if hard { 0.9 } else { 0.1 },
            hard_gate: hard,
            msfb_flops: 100,
        }
    }

    #[test]
    fn gate_accounting() {
        let closed: Vec<_> = (1..=3).map(|l| record(l, false)).collect();
        let s = gate_stats(&closed);
        assert_eq!(s.overall_open_rate, 0.0);
        assert_eq!(s.msfb_flops_executed, 0);
        assert_eq!(s.msfb_flops_potential, 300);

        let open: Vec<_> = (1..=3).map(|l| record(l, true)).collect();
        let s = gate_stats(&open);
        assert_eq!(s.overall_open_rate, 1.0);
        assert_eq!(s.msfb_flops_executed, s.msfb_flops_potential);

        let mixed = vec![record(1, true), record(1, false), record(2, true)];
        let s = gate_stats(&mixed);
        assert_eq!(s.per_layer[0].open_rate, 0.5);
        assert_eq!(s.per_layer[1].open_rate, 1.0);
        assert_eq!(s.msfb_flops_executed, 200);
    }

    proptest! {
        #[test]
        fn threshold_monotone(probs in prop::collection::vec(0.0f64..1.0, 1..100), t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let p = Tensor::vector(probs);
            let count = |t: f64| p.data().iter().filter(|&&v| v > t).count();
            prop_assert!(count(t1 + dt) <= count(t1));
        }

        #[test]
        fn dice_never_below_iou(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
            let p = mask(&pairs.iter().map(|x| u8::from(x.0)).collect::<Vec<_>>());
            let y = mask(&pairs.iter().map(|x| u8::from(x.1)).collect::<Vec<_>>());
            let (iou, dice) = binary_iou_dice(&p, &y, 0.5).unwrap();
            prop_assert!(0.0 <= iou && iou <= dice && dice <= 1.0);
        }
    }
}

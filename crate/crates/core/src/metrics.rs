//! Overall IoU, mean IoU and precision at IoU thresholds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PRE_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Score above which a pixel is predicted foreground.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dimension(format!(
                "mask {height}×{width} with {} bits",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_scores(scores: &Tensor, threshold: f64) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 2 {
            return Err(Error::dimension(format!("score map must be 2-D, got {s:?}")));
        }
        Ok(Self {
            height: s[0],
            width: s[1],
            bits: scores.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / (self.height * self.width).max(1) as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask extents are consistent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationRecord {
    pub sample_id: usize,
    pub scores: Tensor,
    pub prediction: BinaryMask,
    pub truth: BinaryMask,
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
}

impl SegmentationRecord {
    pub fn new(sample_id: usize, scores: Tensor, truth: BinaryMask) -> Result<Self> {
        let prediction = BinaryMask::from_scores(&scores, DECISION_THRESHOLD)?;
        if prediction.height != truth.height || prediction.width != truth.width {
            return Err(Error::dimension(format!(
                "prediction {}×{} vs truth {}×{}",
                prediction.height, prediction.width, truth.height, truth.width
            )));
        }
        let (intersection, union) = overlap(&prediction, &truth);
        Ok(Self {
            sample_id,
            scores,
            prediction,
            truth,
            intersection,
            union,
            iou: iou_of(intersection, union),
        })
    }
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize) {
    a.bits
        .iter()
        .zip(&b.bits)
        .fold((0, 0), |(i, u), (&x, &y)| {
            (i + usize::from(x && y), u + usize::from(x || y))
        })
}

/// Both-empty masks agree perfectly.
pub fn iou_of(intersection: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreAt {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub pre_at: Vec<PreAt>,
    pub total_intersection: usize,
    pub total_union: usize,
}

impl MetricReport {
    pub fn pre(&self, threshold: f64) -> Option<f64> {
        self.pre_at
            .iter()
            .find(|p| (p.threshold - threshold).abs() < 1e-12)
            .map(|p| p.fraction)
    }

    /// `key=value` lines, one metric per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "count={}", self.count).unwrap();
        writeln!(s, "overall_iou={}", self.overall_iou).unwrap();
        writeln!(s, "mean_iou={}", self.mean_iou).unwrap();
        for p in &self.pre_at {
            writeln!(s, "pre@{}={}", p.threshold, p.fraction).unwrap();
        }
        writeln!(s, "total_intersection={}", self.total_intersection).unwrap();
        writeln!(s, "total_union={}", self.total_union).unwrap();
        s
    }

    /// Whether precision never increases as the threshold rises.
    pub fn pre_monotone(&self) -> bool {
        self.pre_at.windows(2).all(|w| w[1].fraction <= w[0].fraction)
    }
}

/// Aggregates per-record overlaps. Overall IoU divides summed areas; mean IoU
/// averages per-record ratios (summed in sorted order so the result does not
/// depend on record order).
pub fn metrics(records: &[SegmentationRecord], thresholds: &[f64]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let total_intersection: usize = records.iter().map(|r| r.intersection).sum();
    let total_union: usize = records.iter().map(|r| r.union).sum();
    let mut ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    ious.sort_by(f64::total_cmp);
    let n = records.len() as f64;
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let pre_at = thresholds
        .iter()
        .map(|&x| PreAt {
            threshold: x,
            fraction: ious.iter().filter(|&&iou| iou > x).count() as f64 / n,
        })
        .collect();
    Ok(MetricReport {
        count: records.len(),
        overall_iou: iou_of(total_intersection, total_union),
        mean_iou: ious.iter().sum::<f64>() / n,
        pre_at,
        total_intersection,
        total_union,
    })
}

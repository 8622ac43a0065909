//! Test-retest variability: one-way ICC per connection and the change in
//! within/between-subject variation between two FC methods.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub icc: f64,
    pub msb: f64,
    pub msw: f64,
    /// Every measurement identical; `icc` is reported as 0.
    pub degenerate: bool,
}

/// ICC(1,1) for `N` subjects (rows) by `k` sessions (columns).
pub fn icc_oneway(x: ArrayView2<f64>) -> Result<Icc> {
    let (n, k) = x.dim();
    if n < 2 || k < 2 {
        return Err(Error::InvalidArgument(format!(
            "ICC needs at least 2 subjects and 2 sessions, got {n}x{k}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ICC input".into()));
    }
    let subject_means = x.mean_axis(Axis(1)).expect("k >= 2");
    let grand = subject_means.mean().expect("n >= 2");
    let kf = k as f64;
    let msb = kf * subject_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n - 1) as f64;
    let ssw: f64 = x
        .rows()
        .into_iter()
        .zip(subject_means.iter())
        .map(|(row, m)| row.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let msw = ssw / (n as f64 * (kf - 1.0));
    let denom = msb + (kf - 1.0) * msw;
    if denom == 0.0 {
        return Ok(Icc {
            icc: 0.0,
            msb,
            msw,
            degenerate: true,
        });
    }
    Ok(Icc {
        icc: (msb - msw) / denom,
        msb,
        msw,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectionVariation {
    /// Within-subject mean square.
    pub within_var: f64,
    /// Variance of the subject means (`MSB / k`).
    pub between_var: f64,
    pub icc: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationField {
    pub connections: Vec<ConnectionVariation>,
}

impl VariationField {
    pub fn len(&self) -> usize {
        self.connections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.connections.is_empty()
    }

    pub fn mean_icc(&self) -> f64 {
        crate::linalg::mean(&self.iccs())
    }

    pub fn iccs(&self) -> Vec<f64> {
        self.connections.iter().map(|c| c.icc).collect()
    }
}

/// ICC with negative values shown as zero.
pub fn clamp_icc(icc: f64) -> f64 {
    icc.max(0.0)
}

/// Applies [`icc_oneway`] to every connection of an `N x sessions x D` array.
pub fn variation_field(embeddings: &Array3<f64>) -> Result<VariationField> {
    let (_, sessions, d) = embeddings.dim();
    if sessions != 2 {
        return Err(Error::InvalidArgument(format!(
            "variation field needs two sessions per subject, got {sessions}"
        )));
    }
    let mut connections = Vec::with_capacity(d);
    for c in 0..d {
        let x = embeddings.index_axis(Axis(2), c);
        let r = icc_oneway(x)?;
        connections.push(ConnectionVariation {
            within_var: r.msw,
            between_var: r.msb / sessions as f64,
            icc: r.icc,
            degenerate: r.degenerate,
        });
    }
    Ok(VariationField { connections })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    /// Lower within-subject and higher between-subject variation.
    UpperLeft,
    /// Higher within-subject and lower between-subject variation.
    LowerRight,
    /// Both variations moved the same way and ICC rose.
    SplitImproved,
    /// Both variations moved the same way and ICC fell.
    SplitDeclined,
    Unchanged,
}

impl Quadrant {
    pub fn reflected(self) -> Self {
        match self {
            Quadrant::UpperLeft => Quadrant::LowerRight,
            Quadrant::LowerRight => Quadrant::UpperLeft,
            Quadrant::SplitImproved => Quadrant::SplitDeclined,
            Quadrant::SplitDeclined => Quadrant::SplitImproved,
            Quadrant::Unchanged => Quadrant::Unchanged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowPoint {
    /// `within_baseline - within_target`: positive means less within-subject variation.
    pub within_reduction: f64,
    pub delta_between: f64,
    pub delta_icc: f64,
    pub quadrant: Quadrant,
}

/// Per-connection change from `baseline` to `target`.
pub fn delta_icc_flow(baseline: &VariationField, target: &VariationField) -> Result<Vec<FlowPoint>> {
    if baseline.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "fields have {} and {} connections",
            baseline.len(),
            target.len()
        )));
    }
    Ok(baseline
        .connections
        .iter()
        .zip(&target.connections)
        .map(|(b, t)| {
            let within_reduction = b.within_var - t.within_var;
            let delta_between = t.between_var - b.between_var;
            let delta_icc = t.icc - b.icc;
            let quadrant = if within_reduction > 0.0 && delta_between > 0.0 {
                Quadrant::UpperLeft
            } else if within_reduction < 0.0 && delta_between < 0.0 {
                Quadrant::LowerRight
            } else if delta_icc > 0.0 {
                Quadrant::SplitImproved
            } else if delta_icc < 0.0 {
                Quadrant::SplitDeclined
            } else {
                Quadrant::Unchanged
            };
            FlowPoint {
                within_reduction,
                delta_between,
                delta_icc,
                quadrant,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub connections: usize,
    pub mean_icc_baseline: f64,
    pub mean_icc_target: f64,
    pub percent_improved: f64,
    pub quadrants: BTreeMap<Quadrant, usize>,
}

pub fn summarize_flow(baseline: &VariationField, target: &VariationField, flow: &[FlowPoint]) -> FlowSummary {
    let mut quadrants = BTreeMap::new();
    for p in flow {
        *quadrants.entry(p.quadrant).or_insert(0) += 1;
    }
    let improved = flow.iter().filter(|p| p.delta_icc > 0.0).count();
    FlowSummary {
        connections: flow.len(),
        mean_icc_baseline: baseline.mean_icc(),
        mean_icc_target: target.mean_icc(),
        percent_improved: if flow.is_empty() {
            0.0
        } else {
            100.0 * improved as f64 / flow.len() as f64
        },
        quadrants,
    }
}

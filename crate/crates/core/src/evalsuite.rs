//! Evaluation protocols: fingerprinting, the length-combination objective,
//! classification metrics, prediction stability and connection importance.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::{Cohort, Recording};
use crate::encoder::{edge_pair, embed, regions_for_edges, stack_vectors, vectorize_upper, EncoderParams, FCMatrix, FCVector};
use crate::error::{Error, Result};
use crate::linalg::{center_unit, mean, row_correlation, sample_sd};
use crate::nn::{linear_head, Dense};

/// Evenly spread window starts: `round(i (T - w) / (n - 1))`.
pub fn spaced_segments(t: usize, w: usize, n: usize) -> Result<Vec<usize>> {
    if w == 0 || t < w {
        return Err(Error::InvalidArgument(format!(
            "window {w} does not fit in {t} samples"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one segment".into()));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let span = (t - w) as f64;
    Ok((0..n)
        .map(|i| (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect())
}

fn unit_rows(a: ArrayView2<f64>, which: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(a.raw_dim());
    for (i, row) in a.rows().into_iter().enumerate() {
        let c = center_unit(row)
            .ok_or_else(|| Error::Degenerate(format!("{which} row {i} is constant")))?;
        out.row_mut(i).assign(&c);
    }
    Ok(out)
}

/// `M[i, j] = PCC(A1_i, A2_j)`.
pub fn similarity_matrix(a1: ArrayView2<f64>, a2: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a1.dim() != a2.dim() {
        return Err(Error::InvalidArgument(format!(
            "session matrices differ in shape: {:?} vs {:?}",
            a1.dim(),
            a2.dim()
        )));
    }
    let u1 = unit_rows(a1, "A1")?;
    let u2 = unit_rows(a2, "A2")?;
    Ok(u1.dot(&u2.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Fraction of successful identifications, anchoring on each session in turn.
/// A subject is identified when its own other-session row is the strict
/// maximum; ties count as failures.
pub fn identification_rate(a1: ArrayView2<f64>, a2: ArrayView2<f64>) -> Result<f64> {
    let n = a1.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "identification needs at least 2 subjects, got {n}"
        )));
    }
    let m = similarity_matrix(a1, a2)?;
    Ok(identification_from_similarity(&m))
}

pub(crate) fn identification_from_similarity(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut hits = 0;
    for i in 0..n {
        let own = m[[i, i]];
        if (0..n).all(|j| j == i || m[[i, j]] < own) {
            hits += 1;
        }
        if (0..n).all(|j| j == i || m[[j, i]] < own) {
            hits += 1;
        }
    }
    hits as f64 / (2 * n) as f64
}

/// Pearson-correlation connectome of a recording, as an upper-triangle vector.
pub fn pcc_fc(rec: &Recording) -> Result<FCVector> {
    Ok(vectorize_upper(&FCMatrix(row_correlation(&rec.data)?)))
}

/// How the six length-combination rates are reduced to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    HarmonicMean,
    /// Average plus minimum.
    Sum,
}

/// Harmonic mean of the average and the minimum of `rates`.
pub fn objective_score(rates: &[f64]) -> f64 {
    objective_with(ObjectiveKind::HarmonicMean, rates)
}

pub fn objective_with(kind: ObjectiveKind, rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let a = mean(rates);
    let m = rates.iter().copied().fold(f64::INFINITY, f64::min);
    match kind {
        ObjectiveKind::HarmonicMean if a + m == 0.0 => 0.0,
        ObjectiveKind::HarmonicMean => 2.0 * a * m / (a + m),
        ObjectiveKind::Sum => a + m,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationResult {
    pub label: String,
    pub first_length: usize,
    pub second_length: usize,
    pub rates: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintReport {
    pub n_subjects: usize,
    pub combinations: Vec<CombinationResult>,
    pub objective: f64,
    pub objective_kind: ObjectiveKind,
    /// First-draw similarity matrix per combination, when requested.
    #[serde(skip)]
    pub similarity: Vec<Array2<f64>>,
}

impl FingerprintReport {
    pub fn means(&self) -> Vec<f64> {
        self.combinations.iter().map(|c| c.mean).collect()
    }

    pub fn min_mean(&self) -> f64 {
        self.means().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn combination(&self, first: usize, second: usize) -> Option<&CombinationResult> {
        self.combinations
            .iter()
            .find(|c| c.first_length == first && c.second_length == second)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerprintConfig {
    pub lengths: [usize; 3],
    pub draws: usize,
    pub objective: ObjectiveKind,
    pub keep_similarity: bool,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig {
            lengths: [80, 200, 320],
            draws: 10,
            objective: ObjectiveKind::HarmonicMean,
            keep_similarity: false,
        }
    }
}

impl FingerprintConfig {
    /// Lengths used for per-epoch validation while training.
    pub fn validation() -> Self {
        FingerprintConfig {
            lengths: [30, 175, 320],
            ..Self::default()
        }
    }
}

/// The six unordered length combinations, same-length pairs first.
pub fn length_combinations(lengths: [usize; 3]) -> Vec<(usize, usize)> {
    let [a, b, c] = lengths;
    vec![(a, a), (b, b), (c, c), (a, b), (a, c), (b, c)]
}

/// Runs the fingerprinting protocol on every subject with two sessions.
/// `embedder` maps an `R x w` segment to its FC vector, so the same routine
/// scores the encoder and the Pearson baseline.
pub fn fingerprint_protocol<E>(embedder: E, cohort: &Cohort, cfg: &FingerprintConfig) -> Result<FingerprintReport>
where
    E: Fn(ArrayView2<f64>) -> Result<FCVector>,
{
    let subjects = cohort.paired_subjects();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fingerprinting needs 2 subjects with two sessions, found {}",
            subjects.len()
        )));
    }
    let mut sessions: [Vec<&Recording>; 2] = [Vec::new(), Vec::new()];
    for s in &subjects {
        for (k, list) in sessions.iter_mut().enumerate() {
            list.push(cohort.recording(s, k as u8).expect("paired subject"));
        }
    }
    // embeddings[session][length slot][draw] -> N x D
    let mut embeddings: [Vec<Vec<Array2<f64>>>; 2] = [Vec::new(), Vec::new()];
    for (k, list) in sessions.iter().enumerate() {
        for &w in &cfg.lengths {
            let mut draws = vec![Vec::with_capacity(list.len()); cfg.draws];
            for rec in list {
                let starts = spaced_segments(rec.n_timepoints(), w, cfg.draws).map_err(|e| {
                    Error::InvalidArgument(format!("{} session {k}: {e}", rec.subject_id))
                })?;
                for (d, &start) in starts.iter().enumerate() {
                    draws[d].push(embedder(rec.data.slice(s![.., start..start + w]))?);
                }
            }
            embeddings[k].push(draws.iter().map(|v| stack_vectors(v)).collect());
        }
    }
    let slot = |w: usize| cfg.lengths.iter().position(|&l| l == w).expect("configured length");
    let mut combinations = Vec::with_capacity(6);
    let mut similarity = Vec::new();
    for (first, second) in length_combinations(cfg.lengths) {
        let mut rates = Vec::with_capacity(cfg.draws);
        for d in 0..cfg.draws {
            let a1 = &embeddings[0][slot(first)][d];
            let a2 = &embeddings[1][slot(second)][d];
            let m = similarity_matrix(a1.view(), a2.view())?;
            rates.push(identification_from_similarity(&m));
            if d == 0 && cfg.keep_similarity {
                similarity.push(m);
            }
        }
        combinations.push(CombinationResult {
            label: format!("{first}-{second}"),
            first_length: first,
            second_length: second,
            mean: mean(&rates),
            sd: sample_sd(&rates),
            rates,
        });
    }
    let means: Vec<f64> = combinations.iter().map(|c| c.mean).collect();
    Ok(FingerprintReport {
        n_subjects: subjects.len(),
        objective: objective_with(cfg.objective, &means),
        objective_kind: cfg.objective,
        combinations,
        similarity,
    })
}

/// Fingerprinting with encoder FC vectors.
pub fn fingerprint_encoder(params: &EncoderParams, cohort: &Cohort, cfg: &FingerprintConfig) -> Result<FingerprintReport> {
    fingerprint_protocol(|x| embed(params, x), cohort, cfg)
}

/// Fingerprinting with Pearson FC vectors.
pub fn fingerprint_pcc(cohort: &Cohort, cfg: &FingerprintConfig) -> Result<FingerprintReport> {
    fingerprint_protocol(
        |x| Ok(vectorize_upper(&FCMatrix(row_correlation(&x.to_owned())?))),
        cohort,
        cfg,
    )
}

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub bce: f64,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

/// Binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_cross_entropy(probs: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Rank AUC: fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn auc(probs: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = probs.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&p, _)| p).collect();
    let neg: Vec<f64> = probs.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&p, _)| p).collect();
    let mut score = 0.0;
    for &p in &pos {
        for &q in &neg {
            score += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    score / (pos.len() * neg.len()) as f64
}

fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> [usize; 4] {
    let mut c = [0; 4];
    for (&p, &y) in probs.iter().zip(labels) {
        let idx = match (p >= threshold, y == 1) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        c[idx] += 1;
    }
    c
}

/// BCE, AUC and F1 at the Youden-optimal threshold. A sample is predicted
/// positive when its probability is at least the threshold.
pub fn classification_metrics(probs: &[f64], labels: &[u8]) -> Result<ClassificationReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!("probability {i} outside [0, 1]")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "classification metrics need both classes".into(),
        ));
    }
    let mut thresholds = probs.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = (f64::NEG_INFINITY, thresholds[0]);
    for &t in &thresholds {
        let [tp, fp, _, _] = confusion(probs, labels, t);
        let j = tp as f64 / positives as f64 - fp as f64 / negatives as f64;
        if j > best.0 {
            best = (j, t);
        }
    }
    let threshold = best.1;
    let [tp, fp, tn, fneg] = confusion(probs, labels, threshold);
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(ClassificationReport {
        n: probs.len(),
        bce: binary_cross_entropy(probs, labels),
        auc: auc(probs, labels),
        f1,
        threshold,
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        probabilities: None,
    })
}

/// Hard decision of a linear head on one FC vector: class 1 when its logit is larger.
pub fn head_decision(head: &Dense, v: &FCVector) -> Result<u8> {
    let logits = linear_head(head, ndarray::ArrayView2::from_shape((1, v.len()), v.as_slice()).expect("row"))?;
    Ok(u8::from(logits[[0, 1]] > logits[[0, 0]]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub percent_changed: f64,
    pub unstable: usize,
    pub denominator: usize,
    pub skipped_recordings: Vec<String>,
}

/// Share of (recording, model) instances whose decision on any cropped
/// window differs from the decision on the full signal. Crops are taken at
/// the beginning, middle and end for each window length in minutes.
pub fn stability_eval(
    models: &[(&EncoderParams, &Dense)],
    recordings: &[&Recording],
    window_minutes: &[f64],
) -> Result<StabilityReport> {
    let mut unstable = 0;
    let mut denominator = 0;
    let mut skipped = Vec::new();
    for rec in recordings {
        let t = rec.n_timepoints();
        let windows: Vec<usize> = window_minutes
            .iter()
            .map(|m| (m * 60.0 / rec.tr_seconds).round() as usize)
            .collect();
        if windows.iter().any(|&w| w == 0 || w > t) {
            log::warn!(
                "skipping {} session {}: {t} samples is shorter than a window",
                rec.subject_id,
                rec.session_index
            );
            skipped.push(format!("{}/{}", rec.subject_id, rec.session_index));
            continue;
        }
        for &(encoder, head) in models {
            let full = head_decision(head, &embed(encoder, rec.data.view())?)?;
            let mut changed = false;
            'crops: for &w in &windows {
                for start in [0, (t - w) / 2, t - w] {
                    let crop = rec.data.slice(s![.., start..start + w]);
                    if head_decision(head, &embed(encoder, crop)?)? != full {
                        changed = true;
                        break 'crops;
                    }
                }
            }
            unstable += usize::from(changed);
            denominator += 1;
        }
    }
    let percent_changed = if denominator == 0 {
        0.0
    } else {
        100.0 * unstable as f64 / denominator as f64
    };
    Ok(StabilityReport {
        percent_changed,
        unstable,
        denominator,
        skipped_recordings: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    pub index: usize,
    pub region_i: usize,
    pub region_j: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub values: Vec<f64>,
    /// Every edge, sorted by `|I|` descending (index ascending on ties).
    pub ranking: Vec<RankedEdge>,
}

impl ImportanceVector {
    pub fn top(&self, k: usize) -> &[RankedEdge] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// `I = mean over heads of (w[:, 1] - w[:, 0])`, ranked by magnitude.
pub fn feature_importance(heads: &[&Dense]) -> Result<ImportanceVector> {
    let first = heads
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one head".into()))?;
    let d = first.inputs();
    let regions = regions_for_edges(d)
        .ok_or_else(|| Error::InvalidArgument(format!("{d} is not a triangular edge count")))?;
    let mut total = Array1::<f64>::zeros(d);
    for (h, head) in heads.iter().enumerate() {
        if head.inputs() != d || head.outputs() != 2 {
            return Err(Error::InvalidArgument(format!(
                "head {h} has shape {}x{}, expected {d}x2",
                head.inputs(),
                head.outputs()
            )));
        }
        total += &(&head.weight.column(1) - &head.weight.column(0));
    }
    let values: Vec<f64> = (total / heads.len() as f64).to_vec();
    let mut ranking: Vec<RankedEdge> = values
        .iter()
        .enumerate()
        .map(|(index, &importance)| {
            let (region_i, region_j) = edge_pair(index, regions);
            RankedEdge {
                index,
                region_i,
                region_j,
                importance,
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.importance
            .abs()
            .total_cmp(&a.importance.abs())
            .then(a.index.cmp(&b.index))
    });
    Ok(ImportanceVector { values, ranking })
}

//! Segment augmentation, subject-unique batching and the NT-Xent objective.

use std::collections::{BTreeSet, VecDeque};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::Cohort;
use crate::error::{Error, Result};

/// A contiguous window `[start, start + length)` of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub length: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Two independently drawn views of one recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPair {
    pub recording: usize,
    pub view_a: Segment,
    pub view_b: Segment,
}

fn sample_segment(t: usize, l_min: usize, l_max: usize, rng: &mut impl Rng) -> Segment {
    let length = rng.random_range(l_min..=l_max.min(t));
    let start = rng.random_range(0..=t - length);
    Segment { start, length }
}

/// Draws two views with lengths uniform on `[l_min, min(l_max, T)]` and
/// starts uniform over the admissible range. Views may overlap.
pub fn sample_segment_pair(
    t: usize,
    l_min: usize,
    l_max: usize,
    rng: &mut impl Rng,
) -> Result<SegmentPair> {
    if l_min == 0 || l_min > l_max {
        return Err(Error::InvalidArgument(format!(
            "invalid segment range [{l_min}, {l_max}]"
        )));
    }
    if t < l_min {
        return Err(Error::InvalidArgument(format!(
            "recording of length {t} is shorter than l_min {l_min}"
        )));
    }
    Ok(SegmentPair {
        recording: 0,
        view_a: sample_segment(t, l_min, l_max, rng),
        view_b: sample_segment(t, l_min, l_max, rng),
    })
}

/// Shuffles recordings into batches in which no subject appears twice.
///
/// Recordings are visited in random order; one whose subject is already in
/// the open batch is deferred to the next batch. A trailing batch with fewer
/// than two recordings is dropped. Returns recording indices.
pub fn make_batches(cohort: &Cohort, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    let n_subjects = cohort.subjects().len();
    if n_subjects < 2 {
        return Err(Error::InvalidArgument(
            "contrastive batches need recordings from at least two subjects".into(),
        ));
    }
    if n_subjects < batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds the {n_subjects} distinct subjects"
        )));
    }
    let mut order: Vec<usize> = (0..cohort.recordings.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut subjects = BTreeSet::new();
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(idx) = pending.pop_front() else { break };
            if subjects.insert(cohort.recordings[idx].subject_id.as_str()) {
                batch.push(idx);
            } else {
                deferred.push(idx);
            }
        }
        for idx in deferred.into_iter().rev() {
            pending.push_front(idx);
        }
        if batch.len() >= 2 {
            batches.push(batch);
        } else if pending.iter().all(|&i| {
            cohort.recordings[i].subject_id == cohort.recordings[batch[0]].subject_id
        }) {
            // Only one subject remains: nothing more can be paired.
            break;
        }
    }
    Ok(batches)
}

/// `2N` views ready for encoding. View `i` and view `pairing[i]` come from
/// the same recording.
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    /// Valid samples of each view, `R x length`.
    pub inputs: Vec<Array2<f64>>,
    /// Length every view is conceptually zero-padded to.
    pub padded_to: usize,
    pub pairing: Vec<usize>,
    pub subject_ids: Vec<String>,
    pub segments: Vec<SegmentPair>,
}

impl ContrastBatch {
    /// Views `0..N` are first views and `N..2N` second views.
    pub fn assemble(
        cohort: &Cohort,
        recordings: &[usize],
        l_min: usize,
        l_max: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = recordings.len();
        let mut segments = Vec::with_capacity(n);
        for &idx in recordings {
            let rec = &cohort.recordings[idx];
            let mut pair = sample_segment_pair(rec.n_timepoints(), l_min, l_max, rng)?;
            pair.recording = idx;
            segments.push(pair);
        }
        let crop = |data: ArrayView2<f64>, seg: Segment| data.slice(s![.., seg.start..seg.end()]).to_owned();
        let mut inputs = Vec::with_capacity(2 * n);
        let mut subject_ids = Vec::with_capacity(2 * n);
        for pair in &segments {
            inputs.push(crop(cohort.recordings[pair.recording].data.view(), pair.view_a));
            subject_ids.push(cohort.recordings[pair.recording].subject_id.clone());
        }
        for pair in &segments {
            inputs.push(crop(cohort.recordings[pair.recording].data.view(), pair.view_b));
            subject_ids.push(cohort.recordings[pair.recording].subject_id.clone());
        }
        Ok(ContrastBatch {
            inputs,
            padded_to: l_max,
            pairing: half_swap_pairing(n),
            subject_ids,
            segments,
        })
    }
}

/// Pairing `i <-> i + N` for `2N` views.
pub fn half_swap_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| (i + n) % (2 * n)).collect()
}

fn validate_pairing(pairing: &[usize]) -> Result<()> {
    let m = pairing.len();
    for (i, &j) in pairing.iter().enumerate() {
        if j >= m || j == i || pairing[j] != i {
            return Err(Error::InvalidArgument(format!(
                "pairing is not a fixed-point-free involution at {i}"
            )));
        }
    }
    Ok(())
}

/// NT-Xent loss over the rows of `z` (`2N x D`) with cosine similarity and
/// temperature `tau`, averaged over all `2N` ordered positive pairs. Returns
/// the loss and its gradient with respect to `z`.
pub fn ntxent_loss(z: ArrayView2<f64>, pairing: &[usize], tau: f64) -> Result<(f64, Array2<f64>)> {
    let m = z.nrows();
    if m < 2 || !m.is_multiple_of(2) || pairing.len() != m {
        return Err(Error::InvalidArgument(format!(
            "need 2N >= 2 embeddings with a matching pairing, got {m}"
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    validate_pairing(pairing)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding batch".into()));
    }
    let mut unit = z.to_owned();
    let mut norms = Vec::with_capacity(m);
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(Error::Degenerate(format!("embedding {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    let sim = unit.dot(&unit.t());
    let scale = 1.0 / m as f64;
    let mut loss = 0.0;
    // Gradient of the loss with respect to the similarity matrix.
    let mut dsim = Array2::zeros((m, m));
    for i in 0..m {
        let max = (0..m)
            .filter(|&k| k != i)
            .map(|k| sim[[i, k]] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..m).filter(|&k| k != i) {
            denom += (sim[[i, k]] / tau - max).exp();
        }
        let p = pairing[i];
        loss += max + denom.ln() - sim[[i, p]] / tau;
        for k in (0..m).filter(|&k| k != i) {
            let softmax = (sim[[i, k]] / tau - max).exp() / denom;
            let target = if k == p { 1.0 } else { 0.0 };
            dsim[[i, k]] = scale * (softmax - target) / tau;
        }
    }
    loss *= scale;
    let dsim_sym = &dsim + &dsim.t();
    let dunit = dsim_sym.dot(&unit);
    let mut dz = Array2::zeros((m, z.ncols()));
    for i in 0..m {
        let u = unit.row(i);
        let du = dunit.row(i);
        let radial = u.dot(&du);
        dz.row_mut(i).assign(&((&du - &(&u * radial)) / norms[i]));
    }
    Ok((loss, dz))
}

//! Synthetic multi-subject, multi-session cohorts with known ground truth.
//!
//! A population correlation matrix is drawn from a rank-3 factor model.
//! Each subject perturbs it into a latent matrix, each session perturbs the
//! latent matrix again, and session time series are Gaussian draws with that
//! correlation passed through a per-region AR(1) filter. Label-1 subjects get
//! a fixed shift on a set of planted edges.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Cohort, Recording};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, from_nalgebra, to_nalgebra};

pub const EIGEN_FLOOR: f64 = 1e-6;
const FACTOR_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_sessions: usize,
    #[serde(rename = "R")]
    pub n_regions: usize,
    #[serde(rename = "T")]
    pub n_timepoints: usize,
    pub tr_seconds: f64,
    pub sigma_subject: f64,
    pub sigma_session: f64,
    pub ar_coeff: f64,
    /// Assign alternating binary labels (even index 0, odd index 1).
    pub labeled: bool,
    pub effect_edges: Vec<(usize, usize)>,
    pub effect_delta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 80,
            n_sessions: 2,
            n_regions: 16,
            n_timepoints: 320,
            tr_seconds: 1.5,
            sigma_subject: 0.4,
            sigma_session: 0.15,
            ar_coeff: 0.3,
            labeled: false,
            effect_edges: Vec::new(),
            effect_delta: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_sessions) {
            return Err(Error::Invariant("n_sessions must be 1 or 2".into()));
        }
        if self.n_regions < 2 {
            return Err(Error::Invariant("R must be at least 2".into()));
        }
        if self.n_timepoints < 2 {
            return Err(Error::Invariant("T must be at least 2".into()));
        }
        if !(self.tr_seconds > 0.0) {
            return Err(Error::Invariant("tr_seconds must be positive".into()));
        }
        if !(self.sigma_subject >= 0.0 && self.sigma_session >= 0.0) {
            return Err(Error::Invariant("sigmas must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(Error::Invariant("ar_coeff must lie in [0, 1)".into()));
        }
        for &(i, j) in &self.effect_edges {
            if !(i < j && j < self.n_regions) {
                return Err(Error::Invariant(format!(
                    "effect edge ({i}, {j}) must satisfy i < j < R"
                )));
            }
        }
        if !self.effect_delta.is_finite() {
            return Err(Error::Invariant("effect_delta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub label: Option<u8>,
    pub latent: Array2<f64>,
    /// One realized correlation matrix per session.
    pub sessions: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub population: Array2<f64>,
    pub subjects: Vec<SubjectTruth>,
}

/// Clips eigenvalues at `EIGEN_FLOOR` and rescales to unit diagonal.
pub fn project_to_correlation(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix to project".into()));
    }
    let mut sym = to_nalgebra(m);
    sym = (&sym + sym.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
    let v = &eig.eigenvectors;
    let rebuilt = v * nalgebra::DMatrix::from_diagonal(&clipped) * v.transpose();
    let mut out = from_nalgebra(&rebuilt);
    let d: Vec<f64> = (0..n).map(|i| out[[i, i]]).collect();
    if let Some(i) = d.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Degenerate(format!("zero diagonal at {i} after clipping")));
    }
    for i in 0..n {
        out[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = (out[[i, j]] / (d[i] * d[j]).sqrt()).clamp(-1.0, 1.0);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}

fn symmetric_noise(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.sample(StandardNormal);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    s
}

/// `project_to_correlation(base + sigma * S)` with `S` symmetric, zero-diagonal,
/// standard normal off the diagonal.
pub fn sample_subject_correlation(
    base: &Array2<f64>,
    sigma_subject: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if sigma_subject == 0.0 {
        return Ok(base.clone());
    }
    let noise = symmetric_noise(base.nrows(), rng);
    project_to_correlation(&(base + &(noise * sigma_subject)))
}

/// Draws an `R x T` standardized AR(1) series whose cross-region covariance
/// is `corr`.
pub fn sample_session_timeseries(
    corr: &Array2<f64>,
    n_timepoints: usize,
    ar_coeff: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let n = corr.nrows();
    let chol = cholesky(corr)?;
    let mut out = Array2::zeros((n, n_timepoints));
    let mut prev = Array1::<f64>::zeros(n);
    let stationary = 1.0 / (1.0 - ar_coeff * ar_coeff).sqrt();
    for t in 0..n_timepoints {
        let z: Array1<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = chol.dot(&z);
        let y = if t == 0 {
            x * stationary
        } else {
            &prev * ar_coeff + &x
        };
        out.column_mut(t).assign(&y);
        prev = y;
    }
    for mut row in out.rows_mut() {
        let m = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - m);
        let sd = (row.dot(&row) / n_timepoints as f64).sqrt();
        if sd > 0.0 {
            row.mapv_inplace(|v| v / sd);
        }
    }
    Ok(out)
}

fn population_base(n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let w = Array2::from_shape_simple_fn((n, FACTOR_RANK), || rng.sample::<f64, _>(StandardNormal));
    let mut m = w.dot(&w.t());
    for i in 0..n {
        m[[i, i]] += rng.random_range(0.5..1.5);
    }
    project_to_correlation(&m)
}

/// Seeded generator on an independent ChaCha stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:04}")
}

/// Generates the cohort and its ground truth. Each subject draws from its
/// own RNG stream so output does not depend on generation order.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<(Cohort, GroundTruth)> {
    cfg.validate()?;
    let r = cfg.n_regions;
    let population = population_base(r, &mut stream_rng(cfg.seed, 0))?;
    let mut recordings = Vec::with_capacity(cfg.n_subjects * cfg.n_sessions);
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut labels = BTreeMap::new();
    for s in 0..cfg.n_subjects {
        let mut rng = stream_rng(cfg.seed, 1 + s as u64);
        let id = subject_id(s);
        let label = cfg.labeled.then_some((s % 2) as u8);
        let mut base = population.clone();
        if label == Some(1) {
            for &(i, j) in &cfg.effect_edges {
                base[[i, j]] += cfg.effect_delta;
                base[[j, i]] += cfg.effect_delta;
            }
        }
        let latent = if label == Some(1) && cfg.effect_delta != 0.0 && cfg.sigma_subject == 0.0 {
            project_to_correlation(&base)?
        } else {
            sample_subject_correlation(&base, cfg.sigma_subject, &mut rng)?
        };
        let mut sessions = Vec::with_capacity(cfg.n_sessions);
        for ses in 0..cfg.n_sessions {
            let realized = sample_subject_correlation(&latent, cfg.sigma_session, &mut rng)?;
            let data = sample_session_timeseries(&realized, cfg.n_timepoints, cfg.ar_coeff, &mut rng)?
                .mapv(|v| v as f32 as f64);
            recordings.push(Recording::new(id.clone(), ses as u8, data, cfg.tr_seconds)?);
            sessions.push(realized);
        }
        if let Some(l) = label {
            labels.insert(id.clone(), l);
        }
        subjects.push(SubjectTruth {
            subject_id: id,
            label,
            latent,
            sessions,
        });
    }
    let mut meta = BTreeMap::new();
    meta.insert(
        "synth_config".to_string(),
        serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
    );
    let cohort = Cohort {
        recordings,
        labels: cfg.labeled.then_some(labels),
        meta,
    };
    Ok((cohort, GroundTruth { population, subjects }))
}

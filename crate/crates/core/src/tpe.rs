//! Tree-structured Parzen Estimator over a small mixed search space.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::HyperParams;
use crate::error::{Error, Result};
use crate::synth::stream_rng;

pub type Assignment = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    Categorical { name: String, choices: Vec<f64> },
    LogUniform { name: String, low: f64, high: f64 },
}

impl Dimension {
    pub fn name(&self) -> &str {
        match self {
            Dimension::Categorical { name, .. } | Dimension::LogUniform { name, .. } => name,
        }
    }

    fn contains(&self, v: f64) -> bool {
        match self {
            Dimension::Categorical { choices, .. } => choices.contains(&v),
            Dimension::LogUniform { low, high, .. } => v.is_finite() && *low <= v && v <= *high,
        }
    }

    fn sample_uniform(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Dimension::Categorical { choices, .. } => choices[rng.random_range(0..choices.len())],
            Dimension::LogUniform { low, high, .. } => rng.random_range(low.ln()..=high.ln()).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl SearchSpace {
    /// The six encoder dimensions, with head counts limited to divisors of `regions`.
    pub fn encoder(regions: usize) -> Self {
        Self::encoder_with(regions, &[512.0, 1024.0, 2048.0], &[32.0, 64.0, 128.0])
    }

    pub fn encoder_with(regions: usize, ff_dims: &[f64], batch_sizes: &[f64]) -> Self {
        let heads = [1.0, 2.0, 4.0]
            .into_iter()
            .filter(|&h| regions.is_multiple_of(h as usize))
            .collect();
        let cat = |name: &str, choices: Vec<f64>| Dimension::Categorical {
            name: name.into(),
            choices,
        };
        SearchSpace {
            dimensions: vec![
                cat("n_layers", vec![1.0, 2.0, 3.0]),
                cat("n_heads", heads),
                cat("ff_dim", ff_dims.to_vec()),
                cat("batch_size", batch_sizes.to_vec()),
                Dimension::LogUniform {
                    name: "lr".into(),
                    low: 1e-5,
                    high: 1e-3,
                },
                Dimension::LogUniform {
                    name: "tau".into(),
                    low: 0.01,
                    high: 0.5,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.dimensions {
            if !seen.insert(d.name()) {
                return Err(Error::Invariant(format!("tune.space: duplicate dimension {}", d.name())));
            }
            match d {
                Dimension::Categorical { name, choices } if choices.is_empty() => {
                    return Err(Error::Invariant(format!("tune.space.{name}: no choices")));
                }
                Dimension::LogUniform { name, low, high } if !(*low > 0.0 && low < high && high.is_finite()) => {
                    return Err(Error::Invariant(format!(
                        "tune.space.{name}: need 0 < low < high, got [{low}, {high}]"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn contains(&self, a: &Assignment) -> bool {
        a.len() == self.dimensions.len()
            && self
                .dimensions
                .iter()
                .all(|d| a.get(d.name()).is_some_and(|&v| d.contains(v)))
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Assignment {
        self.dimensions
            .iter()
            .map(|d| (d.name().to_string(), d.sample_uniform(rng)))
            .collect()
    }
}

/// Overrides the hyperparameters named in `a`.
pub fn apply_assignment(hp: &HyperParams, a: &Assignment) -> Result<HyperParams> {
    let mut out = hp.clone();
    for (name, &v) in a {
        match name.as_str() {
            "n_layers" => out.n_layers = v as usize,
            "n_heads" => out.n_heads = v as usize,
            "ff_dim" => out.ff_dim = v as usize,
            "batch_size" => out.batch_size = v as usize,
            "lr" => out.lr = v,
            "tau" => out.tau = v,
            other => {
                return Err(Error::InvalidArgument(format!("unknown hyperparameter {other}")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub assignment: Assignment,
    /// `None` for failed trials.
    pub objective: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            n_startup: 15,
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

/// Scott's-rule Gaussian mixture over log values. The bandwidth never drops
/// below `range / min(100, n + 1)`, so a tight cluster of good trials keeps
/// exploring its neighbourhood instead of collapsing onto itself.
struct Parzen {
    centers: Vec<f64>,
    bandwidth: f64,
}

impl Parzen {
    fn new(points: Vec<f64>, range: f64) -> Self {
        let n = points.len() as f64;
        let floor = range / (n + 1.0).min(100.0);
        let sd = crate::linalg::sample_sd(&points);
        let bandwidth = (1.06 * sd * n.powf(-0.2)).max(floor);
        Parzen {
            centers: points,
            bandwidth,
        }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .centers
            .iter()
            .map(|c| -0.5 * ((x - c) / self.bandwidth).powi(2))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm = (self.centers.len() as f64 * self.bandwidth * (2.0 * std::f64::consts::PI).sqrt()).ln();
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - norm
    }

    fn sample(&self, lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
        let normal = Normal::new(0.0, self.bandwidth).expect("positive bandwidth");
        for _ in 0..64 {
            let c = self.centers[rng.random_range(0..self.centers.len())];
            let x = c + normal.sample(rng);
            if (lo..=hi).contains(&x) {
                return x;
            }
        }
        rng.random_range(lo..=hi)
    }
}

fn category_table(choices: &[f64], values: &[f64]) -> Vec<f64> {
    let total = values.len() as f64 + choices.len() as f64;
    choices
        .iter()
        .map(|c| (values.iter().filter(|&&v| v == *c).count() as f64 + 1.0) / total)
        .collect()
}

/// Next assignment to evaluate. The first `n_startup` trials, and any
/// history with fewer than two completed trials, are sampled uniformly.
pub fn suggest(history: &[TrialRecord], space: &SearchSpace, cfg: &TpeConfig, rng: &mut impl Rng) -> Assignment {
    let mut done: Vec<&TrialRecord> = history
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.objective.is_some_and(f64::is_finite))
        .collect();
    if history.len() < cfg.n_startup || done.len() < 2 {
        return space.sample_uniform(rng);
    }
    done.sort_by(|a, b| {
        b.objective
            .unwrap()
            .total_cmp(&a.objective.unwrap())
            .then(a.trial.cmp(&b.trial))
    });
    let n = done.len();
    let n_good = ((cfg.gamma * n as f64).ceil() as usize).clamp(1, n - 1);
    let (good, bad) = done.split_at(n_good);
    let values = |set: &[&TrialRecord], name: &str| -> Vec<f64> {
        set.iter().map(|t| t.assignment[name]).collect()
    };

    let mut candidates: Vec<(Assignment, f64)> =
        (0..cfg.n_candidates.max(1)).map(|_| (Assignment::new(), 0.0)).collect();
    for dim in &space.dimensions {
        let name = dim.name();
        match dim {
            Dimension::Categorical { choices, .. } => {
                let l = category_table(choices, &values(good, name));
                let g = category_table(choices, &values(bad, name));
                for (a, score) in candidates.iter_mut() {
                    let mut u = rng.random::<f64>();
                    let mut k = choices.len() - 1;
                    for (i, p) in l.iter().enumerate() {
                        if u < *p {
                            k = i;
                            break;
                        }
                        u -= p;
                    }
                    a.insert(name.to_string(), choices[k]);
                    *score += l[k].ln() - g[k].ln();
                }
            }
            Dimension::LogUniform { low, high, .. } => {
                let (lo, hi) = (low.ln(), high.ln());
                let logs = |set| values(set, name).into_iter().map(f64::ln).collect::<Vec<_>>();
                let l = Parzen::new(logs(good), hi - lo);
                let g = Parzen::new(logs(bad), hi - lo);
                for (a, score) in candidates.iter_mut() {
                    let x = l.sample(lo, hi, rng);
                    a.insert(name.to_string(), x.exp().clamp(*low, *high));
                    *score += l.log_pdf(x) - g.log_pdf(x);
                }
            }
        }
    }
    let mut best = 0;
    for (i, (_, s)) in candidates.iter().enumerate() {
        if *s > candidates[best].1 {
            best = i;
        }
    }
    candidates.swap_remove(best).0
}

/// Appends a trial. A missing or non-finite objective marks it failed.
pub fn observe(history: &mut Vec<TrialRecord>, space: &SearchSpace, assignment: Assignment, objective: Option<f64>) -> Result<()> {
    if !space.contains(&assignment) {
        return Err(Error::InvalidArgument(format!(
            "assignment {assignment:?} is outside the search space"
        )));
    }
    let objective = objective.filter(|v| v.is_finite());
    history.push(TrialRecord {
        trial: history.len(),
        assignment,
        status: if objective.is_some() {
            TrialStatus::Complete
        } else {
            TrialStatus::Failed
        },
        objective,
    });
    Ok(())
}

/// Best completed trial, earliest on ties.
pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<&TrialRecord> = None;
    for t in history {
        if let Some(v) = t.objective {
            if best.is_none_or(|b| v > b.objective.unwrap()) {
                best = Some(t);
            }
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Option<TrialRecord>,
    pub history: Vec<TrialRecord>,
}

/// Runs trials until `history` holds `n_trials` records. Trial `i` draws its
/// suggestion from its own random stream, so a resumed search continues
/// exactly where it stopped. Objective errors mark the trial failed.
pub fn run_search<F, C>(
    space: &SearchSpace,
    cfg: &TpeConfig,
    n_trials: usize,
    seed: u64,
    mut history: Vec<TrialRecord>,
    mut objective: F,
    mut on_trial: C,
) -> Result<SearchOutcome>
where
    F: FnMut(&Assignment, usize) -> Result<f64>,
    C: FnMut(&TrialRecord) -> Result<()>,
{
    space.validate()?;
    while history.len() < n_trials {
        let trial = history.len();
        let mut rng = stream_rng(seed, trial as u64 + 1);
        let a = suggest(&history, space, cfg, &mut rng);
        let value = match objective(&a, trial) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                None
            }
        };
        observe(&mut history, space, a, value)?;
        on_trial(history.last().expect("just pushed"))?;
    }
    Ok(SearchOutcome {
        best: best_trial(&history).cloned(),
        history,
    })
}

pub fn write_history_line(out: &mut impl Write, record: &TrialRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| Error::io("trial history", e))
}

pub fn read_history(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// One row per trial: `trial,status,<dimensions...>,objective`.
pub fn history_csv(space: &SearchSpace, history: &[TrialRecord]) -> String {
    let names: Vec<&str> = space.dimensions.iter().map(Dimension::name).collect();
    let mut s = format!("trial,status,{},objective\n", names.join(","));
    for t in history {
        let status = match t.status {
            TrialStatus::Complete => "complete",
            TrialStatus::Failed => "failed",
        };
        let vals: Vec<String> = names
            .iter()
            .map(|n| t.assignment.get(*n).map_or(String::new(), |v| v.to_string()))
            .collect();
        let obj = t.objective.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{},{status},{},{obj}\n", t.trial, vals.join(",")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic_space() -> SearchSpace {
        SearchSpace {
            dimensions: vec![Dimension::LogUniform {
                name: "x".into(),
                low: 0.01,
                high: 1.0,
            }],
        }
    }

    #[test]
    fn empty_history_is_uniform_and_in_bounds() {
        let space = SearchSpace::encoder(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = suggest(&[], &space, &TpeConfig::default(), &mut rng);
        assert!(space.contains(&a));
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a, space.sample_uniform(&mut rng2));
    }

    #[test]
    fn heads_filtered_to_divisors() {
        let space = SearchSpace::encoder(6);
        let heads = space.dimensions.iter().find(|d| d.name() == "n_heads").unwrap();
        assert_eq!(
            heads,
            &Dimension::Categorical {
                name: "n_heads".into(),
                choices: vec![1.0, 2.0]
            }
        );
    }

    #[test]
    fn suggestions_stay_in_space_under_adversarial_histories() {
        let space = SearchSpace::encoder(16);
        let cfg = TpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        for case in 0..100 {
            let mut history = Vec::new();
            for i in 0..30 {
                let a = if case % 3 == 0 {
                    // every trial identical and pinned to a bound
                    let mut a = space.sample_uniform(&mut rng);
                    a.insert("lr".into(), 1e-3);
                    a.insert("tau".into(), 0.01);
                    a
                } else {
                    space.sample_uniform(&mut rng)
                };
                let obj = match case % 4 {
                    0 => Some(1.0),
                    1 => None,
                    2 => Some(if i % 2 == 0 { f64::MAX } else { -f64::MAX }),
                    _ => Some(rng.random()),
                };
                observe(&mut history, &space, a, obj).unwrap();
            }
            for _ in 0..100 {
                assert!(space.contains(&suggest(&history, &space, &cfg, &mut rng)));
                checked += 1;
            }
        }
        assert_eq!(checked, 10_000);
    }

    #[test]
    fn observe_rules() {
        let space = quadratic_space();
        let mut h = Vec::new();
        let a: Assignment = [("x".to_string(), 0.5)].into();
        observe(&mut h, &space, a.clone(), Some(1.0)).unwrap();
        assert_eq!(h.len(), 1);
        observe(&mut h, &space, a.clone(), None).unwrap();
        observe(&mut h, &space, a.clone(), Some(f64::NAN)).unwrap();
        assert_eq!(h[1].status, TrialStatus::Failed);
        assert_eq!(h[2].status, TrialStatus::Failed);
        observe(&mut h, &space, a, Some(1.0)).unwrap();
        let outside: Assignment = [("x".to_string(), 2.0)].into();
        assert!(observe(&mut h, &space, outside, Some(1.0)).is_err());
    }

    #[test]
    fn failed_trials_do_not_enter_densities() {
        let space = quadratic_space();
        let cfg = TpeConfig {
            n_startup: 0,
            ..TpeConfig::default()
        };
        let history = |failed_x: f64| {
            let mut h = Vec::new();
            for (x, obj) in [(0.02, Some(1.0)), (0.9, Some(0.0)), (failed_x, None), (failed_x, None)] {
                observe(&mut h, &space, [("x".to_string(), x)].into(), obj).unwrap();
            }
            h
        };
        let a = suggest(&history(0.05), &space, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = suggest(&history(0.7), &space, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn startup_only_equals_random_search() {
        let space = SearchSpace::encoder(16);
        let cfg = TpeConfig {
            n_startup: 50,
            ..TpeConfig::default()
        };
        let out = run_search(&space, &cfg, 20, 9, Vec::new(), |a, _| Ok(a["lr"]), |_| Ok(())).unwrap();
        for t in &out.history {
            let mut rng = stream_rng(9, t.trial as u64 + 1);
            assert_eq!(t.assignment, space.sample_uniform(&mut rng));
        }
    }

    #[test]
    fn search_bookkeeping() {
        let space = quadratic_space();
        let cfg = TpeConfig::default();
        let f = |a: &Assignment, _| Ok(-(a["x"] - 0.3).powi(2));
        let one = run_search(&space, &cfg, 1, 0, Vec::new(), f, |_| Ok(())).unwrap();
        assert_eq!(one.history.len(), 1);
        assert_eq!(one.best.as_ref(), one.history.first());
        let a = run_search(&space, &cfg, 30, 4, Vec::new(), f, |_| Ok(())).unwrap();
        let b = run_search(&space, &cfg, 30, 4, Vec::new(), f, |_| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=a.history.len() {
            let best = best_trial(&a.history[..k]).unwrap().objective.unwrap();
            assert!(best >= prev);
            prev = best;
        }
        let resumed = run_search(&space, &cfg, 30, 4, a.history[..12].to_vec(), f, |_| Ok(())).unwrap();
        assert_eq!(resumed.history, a.history);
        let failing = run_search(&space, &cfg, 3, 4, Vec::new(), |_, _| Err(Error::Numerical("boom".into())), |_| Ok(())).unwrap();
        assert!(failing.best.is_none());
        assert!(failing.history.iter().all(|t| t.status == TrialStatus::Failed));
    }

    #[test]
    fn history_round_trip_and_csv() {
        let space = quadratic_space();
        let out = run_search(&space, &TpeConfig::default(), 5, 1, Vec::new(), |a, _| Ok(a["x"]), |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for t in &out.history {
            write_history_line(&mut f, t).unwrap();
        }
        drop(f);
        assert_eq!(read_history(&path).unwrap(), out.history);
        let csv = history_csv(&space, &out.history);
        assert!(csv.starts_with("trial,status,x,objective\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn assignment_maps_onto_hyperparameters() {
        let a: Assignment = [("n_layers".to_string(), 2.0), ("tau".to_string(), 0.1)].into();
        let hp = apply_assignment(&HyperParams::default(), &a).unwrap();
        assert_eq!((hp.n_layers, hp.tau, hp.ff_dim), (2, 0.1, 2048));
        let bad: Assignment = [("dropout".to_string(), 0.1)].into();
        assert!(apply_assignment(&HyperParams::default(), &bad).is_err());
    }
}

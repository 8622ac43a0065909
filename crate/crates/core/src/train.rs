//! Contrastive training loop, per-epoch validation hooks, the linear probe
//! and best-epoch restoration.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::contrastive::{make_batches, ntxent_loss, ContrastBatch};
use crate::dataio::Cohort;
use crate::encoder::{embed, embed_backward, embed_forward, stack_vectors, EncoderParams, HyperParams, ModelState};
use crate::error::{Error, Result};
use crate::evalsuite::{fingerprint_encoder, FingerprintConfig};
use crate::nn::{init_dense, init_params, linear_head, softmax_cross_entropy, Dense, ParamSet};
use crate::optim::{adam_step, lr_at, AdamState, ScheduleConfig};
use crate::synth::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub warmup_epochs: usize,
    pub floor_lr: f64,
    /// Run the validation hook every this many epochs (and always on the last).
    pub eval_every: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            seed: 0,
            warmup_epochs: 10,
            floor_lr: 0.0,
            eval_every: 1,
            probe_epochs: 300,
            probe_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::Invariant("train.eval_every: must be at least 1".into()));
        }
        if !(self.probe_lr.is_finite() && self.probe_lr > 0.0) {
            return Err(Error::Invariant("train.probe_lr: must be positive".into()));
        }
        if !(self.floor_lr.is_finite() && self.floor_lr >= 0.0) {
            return Err(Error::Invariant("train.floor_lr: must be non-negative".into()));
        }
        Ok(())
    }

    /// Schedule for a run of `self.epochs` epochs peaking at `peak_lr`.
    /// Warmup is shortened when the run itself is shorter.
    pub fn schedule(&self, peak_lr: f64) -> ScheduleConfig {
        ScheduleConfig {
            warmup_epochs: self.warmup_epochs.min(self.epochs),
            total_epochs: self.epochs,
            peak_lr,
            floor_lr: self.floor_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Direction::Maximize => candidate > incumbent,
            Direction::Minimize => candidate < incumbent,
        }
    }
}

/// What a validation hook reports after an epoch.
#[derive(Debug, Clone)]
pub struct HookOutcome {
    pub metrics: BTreeMap<String, f64>,
    /// Value ranked by the hook's [`Direction`].
    pub criterion: f64,
    /// Classification head trained alongside, if any.
    pub head: Option<Dense>,
}

pub trait EpochHook {
    fn direction(&self) -> Direction;
    fn evaluate(&mut self, encoder: &EncoderParams, epoch: usize) -> Result<HookOutcome>;
}

/// Scores the fingerprinting objective on a validation cohort.
pub struct FingerprintHook<'a> {
    pub cohort: &'a Cohort,
    pub config: FingerprintConfig,
}

impl EpochHook for FingerprintHook<'_> {
    fn direction(&self) -> Direction {
        Direction::Maximize
    }

    fn evaluate(&mut self, encoder: &EncoderParams, _epoch: usize) -> Result<HookOutcome> {
        let report = fingerprint_encoder(encoder, self.cohort, &self.config)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("val_objective".to_string(), report.objective);
        for c in &report.combinations {
            metrics.insert(format!("val_rate_{}", c.label), c.mean);
        }
        Ok(HookOutcome {
            metrics,
            criterion: report.objective,
            head: None,
        })
    }
}

/// Trains a fresh linear probe on the frozen embeddings and reports its
/// minimum validation BCE.
pub struct ProbeHook<'a> {
    pub train: &'a Cohort,
    pub val: &'a Cohort,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EpochHook for ProbeHook<'_> {
    fn direction(&self) -> Direction {
        Direction::Minimize
    }

    fn evaluate(&mut self, encoder: &EncoderParams, epoch: usize) -> Result<HookOutcome> {
        let (xt, yt) = labeled_embeddings(encoder, self.train)?;
        let (xv, yv) = labeled_embeddings(encoder, self.val)?;
        let probe = train_linear_probe(
            xt.view(),
            &yt,
            xv.view(),
            &yv,
            &ProbeConfig {
                epochs: self.epochs,
                lr: self.lr,
                seed: self.seed.wrapping_add(epoch as u64),
            },
        )?;
        let mut metrics = BTreeMap::new();
        metrics.insert("val_bce".to_string(), probe.best_val_bce);
        metrics.insert("probe_best_epoch".to_string(), probe.best_epoch as f64);
        Ok(HookOutcome {
            metrics,
            criterion: probe.best_val_bce,
            head: Some(probe.head),
        })
    }
}

/// Full-recording FC vectors of every labeled recording, with labels.
pub fn labeled_embeddings(encoder: &EncoderParams, cohort: &Cohort) -> Result<(Array2<f64>, Vec<u8>)> {
    let mut vs = Vec::new();
    let mut ys = Vec::new();
    for rec in &cohort.recordings {
        if let Some(y) = cohort.label(&rec.subject_id) {
            vs.push(embed(encoder, rec.data.view())?);
            ys.push(y);
        }
    }
    Ok((stack_vectors(&vs), ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub batches: usize,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

/// A model snapshot tagged with the epoch and the criterion it achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub criterion: f64,
    pub state: ModelState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Parameters after the last epoch.
    pub last: ModelState,
    /// Best snapshot under the hook criterion (earliest epoch on ties).
    pub best: Option<Checkpoint>,
}

/// Fresh encoder for `regions` inputs, deterministic in `seed`.
pub fn init_model(hp: &HyperParams, regions: usize, seed: u64) -> Result<ModelState> {
    hp.validate(Some(regions))?;
    init_params(&hp.layer_specs(regions, false), &mut stream_rng(seed, 0))
}

/// Forward and backward passes for one batch of views. Per-view gradients
/// are summed in view order, so the result does not depend on `workers`.
fn batch_gradients(
    params: &EncoderParams,
    batch: &ContrastBatch,
    tau: f64,
    workers: usize,
) -> Result<(f64, EncoderParams)> {
    let inputs = &batch.inputs;
    let traces = parallel_map(inputs.len(), workers, |i| {
        embed_forward(params, inputs[i].view(), inputs[i].ncols())
    })?;
    let z = stack_vectors(&traces.iter().map(|t| t.fc.clone()).collect::<Vec<_>>());
    let (loss, dz) = ntxent_loss(z.view(), &batch.pairing, tau)?;
    let grads = parallel_map(traces.len(), workers, |i| {
        embed_backward(params, &traces[i], dz.row(i).as_slice().expect("row-major"))
    })?;
    let mut total = params.zeros_like();
    for g in &grads {
        total.add_assign_from(g);
    }
    Ok((loss, total))
}

/// `f(0..n)` on up to `workers` threads, results in index order.
fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| scope.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Contrastive training on `train`. After every `eval_every` epochs (and
/// the final one) the hook scores the encoder; the best-scoring snapshot is
/// kept. `on_epoch` sees each log record as soon as it is complete.
pub fn train_contrastive(
    train: &Cohort,
    hp: &HyperParams,
    cfg: &TrainConfig,
    workers: usize,
    mut hook: Option<&mut dyn EpochHook>,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let regions = train
        .recordings
        .first()
        .ok_or_else(|| Error::InvalidArgument("training cohort is empty".into()))?
        .n_regions();
    let mut state = init_model(hp, regions, cfg.seed)?;
    let mut adam = AdamState::for_params(&state.encoder);
    let schedule = cfg.schedule(hp.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &schedule)?;
        let mut rng = stream_rng(cfg.seed, 1 + epoch as u64);
        let batches = make_batches(train, hp.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        for (b, recs) in batches.iter().enumerate() {
            let batch = ContrastBatch::assemble(train, recs, hp.l_min, hp.l_max, &mut rng)?;
            let (loss, grads) = batch_gradients(&state.encoder, &batch, hp.tau, workers)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            adam_step(&mut adam, &mut state.encoder, &grads, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += loss;
        }
        let mut record = EpochRecord {
            epoch,
            mean_loss: if batches.is_empty() { 0.0 } else { loss_sum / batches.len() as f64 },
            lr,
            batches: batches.len(),
            metrics: BTreeMap::new(),
        };
        let due = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        if let (Some(h), true) = (hook.as_deref_mut(), due) {
            let outcome = h.evaluate(&state.encoder, epoch)?;
            record.metrics = outcome.metrics;
            let better = match &best {
                None => true,
                Some(b) => h.direction().improves(outcome.criterion, b.criterion),
            };
            if better {
                best = Some(Checkpoint {
                    epoch,
                    criterion: outcome.criterion,
                    state: ModelState {
                        encoder: state.encoder.clone(),
                        head: outcome.head,
                    },
                });
            }
        }
        log::info!("epoch {epoch}: loss {:.5} lr {lr:.3e}", record.mean_loss);
        on_epoch(&record, &state)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        log,
        last: state,
        best,
    })
}

/// Index of the best value, earliest on ties.
pub fn best_index(values: &[f64], direction: Direction) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| direction.improves(v, values[b])) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no checkpoint to restore".into()))
}

/// The checkpoint with the best criterion, earliest epoch on ties.
pub fn restore_best(checkpoints: &[Checkpoint], direction: Direction) -> Result<&Checkpoint> {
    let mut order: Vec<&Checkpoint> = checkpoints.iter().collect();
    order.sort_by_key(|c| c.epoch);
    let values: Vec<f64> = order.iter().map(|c| c.criterion).collect();
    Ok(order[best_index(&values, direction)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub head: Dense,
    pub best_val_bce: f64,
    pub best_epoch: usize,
    /// `(train BCE, validation BCE)` after each epoch.
    pub log: Vec<(f64, f64)>,
}

fn check_labels(x: ArrayView2<f64>, y: &[u8], which: &str) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{which}: {} embeddings for {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument(format!("{which}: labels must be 0 or 1")));
    }
    Ok(())
}

/// Full-batch Adam on softmax cross-entropy. Returns the head snapshot with
/// the lowest validation loss (earliest epoch on ties).
pub fn train_linear_probe(
    train_x: ArrayView2<f64>,
    train_y: &[u8],
    val_x: ArrayView2<f64>,
    val_y: &[u8],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    check_labels(train_x, train_y, "train")?;
    check_labels(val_x, val_y, "validation")?;
    if train_y.iter().all(|&y| y == train_y[0]) {
        return Err(Error::InvalidArgument(
            "probe training labels contain a single class".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("probe needs at least one epoch".into()));
    }
    let d = train_x.ncols();
    let mut head = init_dense(d, 2, &mut stream_rng(cfg.seed, 0));
    let mut adam = AdamState::for_params(&head);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Dense)> = None;
    for epoch in 0..cfg.epochs {
        let logits = linear_head(&head, train_x)?;
        let (train_loss, dlogits) = softmax_cross_entropy(logits.view(), train_y)?;
        let grads = head.backward_params(train_x, dlogits.view());
        adam_step(&mut adam, &mut head, &grads, cfg.lr)?;
        let val_logits = linear_head(&head, val_x)?;
        let (val_loss, _) = softmax_cross_entropy(val_logits.view(), val_y)?;
        log.push((train_loss, val_loss));
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, head.clone()));
        }
    }
    let (best_val_bce, best_epoch, head) = best.expect("at least one epoch");
    Ok(ProbeOutcome {
        head,
        best_val_bce,
        best_epoch,
        log,
    })
}

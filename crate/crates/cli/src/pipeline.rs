//! Subcommand implementations. Each one reads its inputs, writes its
//! reports into the output directory and returns the main report.
//!
//! Reports carry no timestamps or absolute paths, so two runs with the same
//! configuration and seed produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use varconet::dataio::{
    load_checkpoint, load_cohort, read_matrix_f32, save_checkpoint, save_cohort, write_json,
    write_matrix_f32, Cohort,
};
use varconet::encoder::{edge_pair, embed, regions_for_edges, stack_vectors, HyperParams, ModelState};
use varconet::evalsuite::{
    classification_metrics, feature_importance, fingerprint_encoder, fingerprint_pcc, pcc_fc,
    stability_eval, ClassificationReport, FingerprintReport, ImportanceVector, RankedEdge,
    StabilityReport,
};
use varconet::gradsuite::{run_gradcheck, GradcheckReport, DEFAULT_POINTS};
use varconet::linalg::{mean, sample_sd};
use varconet::nn::{linear_head, positive_probability, Dense, ParamSet};
use varconet::synth::{generate_cohort, SynthConfig};
use varconet::tpe::{
    apply_assignment, best_trial, history_csv, read_history, run_search, write_history_line,
    Assignment, TrialRecord, TrialStatus,
};
use varconet::train::{
    labeled_embeddings, train_contrastive, EpochHook, EpochRecord, FingerprintHook, ProbeHook,
    TrainConfig, TrainOutcome,
};
use varconet::variability::{delta_icc_flow, summarize_flow, variation_field, FlowSummary};

use crate::config::{EvalConfig, RunConfig, Selection, SplitConfig};
use crate::error::{CliError, CliResult};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SYNTH_REPORT: &str = "synth_report.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINGERPRINT_REPORT: &str = "fingerprint_report.json";
pub const CLASSIFY_REPORT: &str = "classify_report.json";
pub const TUNE_HISTORY: &str = "tune_history.jsonl";
pub const TUNE_CSV: &str = "tune_history.csv";
pub const TUNE_REPORT: &str = "tune_report.json";
pub const ICC_CSV: &str = "icc.csv";
pub const ICC_SUMMARY: &str = "icc_summary.json";
pub const IMPORTANCE_CSV: &str = "importance.csv";
pub const IMPORTANCE_REPORT: &str = "importance.json";
pub const GRADCHECK_REPORT: &str = "gradcheck_report.json";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn require(path: &Path, key: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config {
            key: key.to_string(),
            message: format!("{} does not exist", path.display()),
        })
    }
}

pub fn load_inputs(cfg: &RunConfig) -> CliResult<Cohort> {
    let dir = cfg.paths.cohort_dir();
    require(&dir, "paths.cohort")?;
    Ok(load_cohort(&dir)?)
}

pub fn load_model(path: &Path) -> CliResult<(ModelState, HyperParams, usize)> {
    require(path, "paths.checkpoint")?;
    let (header, tensors) = load_checkpoint(path)?;
    let state = ModelState::from_tensors(&header.hyperparameters, &tensors)?;
    Ok((state, header.hyperparameters, header.epoch))
}

fn save_model(path: &Path, state: &ModelState, hp: &HyperParams, epoch: usize) -> CliResult<()> {
    Ok(save_checkpoint(path, &state.named_tensors(), hp, epoch)?)
}

/// Train, validation and test subsets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
}

/// Splits subjects in order of first appearance.
pub fn split_cohort(cohort: &Cohort, split: &SplitConfig) -> CliResult<Splits> {
    let subjects = cohort.subjects();
    let n = subjects.len();
    let n_train = (split.train * n as f64).round() as usize;
    let n_val = ((split.val * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train < 2 || n_train > n {
        return Err(CliError::Input(format!(
            "eval.split.train leaves {n_train} of {n} subjects for training"
        )));
    }
    Ok(Splits {
        train: cohort.select_subjects(&subjects[..n_train]),
        val: cohort.select_subjects(&subjects[n_train..n_train + n_val]),
        test: cohort.select_subjects(&subjects[n_train + n_val..]),
    })
}

fn has_both_classes(cohort: &Cohort) -> bool {
    let labels: Vec<u8> = cohort.subjects().iter().filter_map(|s| cohort.label(s)).collect();
    labels.contains(&0) && labels.contains(&1)
}

/// Resolves [`Selection::Auto`] against the available validation data.
pub fn resolve_selection(selection: Selection, splits: &Splits) -> Selection {
    match selection {
        Selection::Auto if splits.val.paired_subjects().len() >= 2 => Selection::Fingerprint,
        Selection::Auto if has_both_classes(&splits.train) && has_both_classes(&splits.val) => Selection::Probe,
        Selection::Auto => Selection::None,
        other => other,
    }
}

/// Contrastive training on `train` with best-epoch selection on `val`.
pub fn train_model<F>(
    train: &Cohort,
    val: &Cohort,
    hp: &HyperParams,
    tc: &TrainConfig,
    eval: &EvalConfig,
    selection: Selection,
    workers: usize,
    on_epoch: F,
) -> CliResult<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ModelState) -> varconet::Result<()>,
{
    let mut fingerprint;
    let mut probe;
    let hook: Option<&mut dyn EpochHook> = match selection {
        Selection::Fingerprint => {
            fingerprint = FingerprintHook {
                cohort: val,
                config: eval.validation.clone(),
            };
            Some(&mut fingerprint)
        }
        Selection::Probe => {
            probe = ProbeHook {
                train,
                val,
                epochs: tc.probe_epochs,
                lr: tc.probe_lr,
                seed: tc.seed,
            };
            Some(&mut probe)
        }
        Selection::None | Selection::Auto => None,
    };
    Ok(train_contrastive(train, hp, tc, workers, hook, on_epoch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: SynthConfig,
    pub subjects: usize,
    pub recordings: usize,
    /// Subjects per label, when labeled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_counts: Option<[usize; 2]>,
}

pub fn run_synth(cfg: &RunConfig) -> CliResult<SynthReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let (cohort, truth) = generate_cohort(&cfg.synth)?;
    save_cohort(&cohort, &cfg.paths.cohort_dir())?;
    write_json(&out.join(GROUND_TRUTH_FILE), &truth)?;
    let label_counts = cohort.labels.as_ref().map(|l| {
        let ones = l.values().filter(|&&v| v == 1).count();
        [l.len() - ones, ones]
    });
    let report = SynthReport {
        config: cfg.synth.clone(),
        subjects: cohort.subjects().len(),
        recordings: cohort.recordings.len(),
        label_counts,
    };
    write_json(&out.join(SYNTH_REPORT), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regions: usize,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub selection: Selection,
    pub epochs: usize,
    pub parameters: usize,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_criterion: Option<f64>,
    pub hyperparameters: HyperParams,
}

pub fn run_train(cfg: &RunConfig, workers: usize) -> CliResult<TrainReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let cohort = load_inputs(cfg)?;
    let splits = split_cohort(&cohort, &cfg.eval.split)?;
    let regions = cohort
        .recordings
        .first()
        .map(|r| r.n_regions())
        .ok_or_else(|| CliError::Input("cohort has no recordings".into()))?;
    cfg.model
        .validate(Some(regions))
        .map_err(|e| crate::config::from_core("model", &e))?;
    let selection = resolve_selection(cfg.eval.selection, &splits);
    let log_path = out.join(TRAIN_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let outcome = train_model(
        &splits.train,
        &splits.val,
        &cfg.model,
        &cfg.train,
        &cfg.eval,
        selection,
        workers,
        |record, _| {
            let line = serde_json::to_string(record).map_err(|e| varconet::Error::Format(e.to_string()))?;
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| varconet::Error::io(&log_path, e))
        },
    )?;
    drop(log);
    let last_epoch = cfg.train.epochs.saturating_sub(1);
    save_model(&out.join(FINAL_CHECKPOINT), &outcome.last, &cfg.model, last_epoch)?;
    match &outcome.best {
        Some(best) => save_model(&out.join(BEST_CHECKPOINT), &best.state, &cfg.model, best.epoch)?,
        None => save_model(&out.join(BEST_CHECKPOINT), &outcome.last, &cfg.model, last_epoch)?,
    }
    let report = TrainReport {
        regions,
        train_subjects: splits.train.subjects().len(),
        val_subjects: splits.val.subjects().len(),
        selection,
        epochs: cfg.train.epochs,
        parameters: outcome.last.encoder.num_params(),
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.mean_loss),
        best_epoch: outcome.best.as_ref().map(|b| b.epoch),
        best_criterion: outcome.best.as_ref().map(|b| b.criterion),
        hyperparameters: cfg.model.clone(),
    };
    write_json(&out.join(TRAIN_REPORT), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub subject_id: String,
    pub session_index: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Describes an `rows x cols` little-endian `f32` embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub method: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub regions: usize,
    pub recordings: Vec<EmbeddingRow>,
}

pub fn run_embed(cfg: &RunConfig, pcc: bool) -> CliResult<EmbeddingSidecar> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let cohort = load_inputs(cfg)?;
    let model = if pcc {
        None
    } else {
        Some(load_model(&cfg.paths.checkpoint_file())?.0)
    };
    let mut vectors = Vec::with_capacity(cohort.recordings.len());
    let mut rows = Vec::with_capacity(cohort.recordings.len());
    for rec in &cohort.recordings {
        vectors.push(match &model {
            Some(m) => embed(&m.encoder, rec.data.view())?,
            None => pcc_fc(rec)?,
        });
        rows.push(EmbeddingRow {
            subject_id: rec.subject_id.clone(),
            session_index: rec.session_index,
            label: cohort.label(&rec.subject_id),
        });
    }
    let matrix = stack_vectors(&vectors);
    let method = if pcc { "pcc" } else { "varconet" };
    let file = format!("embeddings_{method}.f32");
    write_matrix_f32(&out.join(&file), &matrix)?;
    let sidecar = EmbeddingSidecar {
        method: method.to_string(),
        file,
        rows: matrix.nrows(),
        cols: matrix.ncols(),
        regions: cohort.recordings.first().map_or(0, |r| r.n_regions()),
        recordings: rows,
    };
    write_json(&out.join(format!("embeddings_{method}.json")), &sidecar)?;
    Ok(sidecar)
}

/// Reads an embedding matrix through its JSON sidecar.
pub fn read_embeddings(sidecar_path: &Path) -> CliResult<(EmbeddingSidecar, Array2<f64>)> {
    require(sidecar_path, "embedding sidecar")?;
    let sidecar: EmbeddingSidecar = read_json(sidecar_path)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let matrix = read_matrix_f32(&dir.join(&sidecar.file), sidecar.rows, sidecar.cols)?;
    Ok((sidecar, matrix))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationMargin {
    pub label: String,
    pub varconet: f64,
    pub pcc: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSummary {
    pub n_subjects: usize,
    pub checkpoint_epoch: usize,
    pub varconet: FingerprintReport,
    pub pcc: FingerprintReport,
    pub margins: Vec<CombinationMargin>,
}

pub fn compare_to_pcc(varconet: &FingerprintReport, pcc: &FingerprintReport) -> Vec<CombinationMargin> {
    varconet
        .combinations
        .iter()
        .zip(&pcc.combinations)
        .map(|(v, p)| CombinationMargin {
            label: v.label.clone(),
            varconet: v.mean,
            pcc: p.mean,
            difference: v.mean - p.mean,
        })
        .collect()
}

fn similarity_csv(m: &Array2<f64>, subjects: &[String]) -> String {
    let mut s = format!("subject,{}\n", subjects.join(","));
    for (id, row) in subjects.iter().zip(m.rows()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{id},{}\n", vals.join(",")));
    }
    s
}

pub fn run_fingerprint(cfg: &RunConfig) -> CliResult<FingerprintSummary> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let cohort = load_inputs(cfg)?;
    let splits = split_cohort(&cohort, &cfg.eval.split)?;
    let (model, _, epoch) = load_model(&cfg.paths.checkpoint_file())?;
    let mut fp = cfg.eval.fingerprint.clone();
    fp.keep_similarity = true;
    let varconet = fingerprint_encoder(&model.encoder, &splits.test, &fp)?;
    fp.keep_similarity = false;
    let pcc = fingerprint_pcc(&splits.test, &fp)?;
    let subjects = splits.test.paired_subjects();
    for (c, m) in varconet.combinations.iter().zip(&varconet.similarity) {
        write_text(&out.join(format!("similarity_{}.csv", c.label)), &similarity_csv(m, &subjects))?;
    }
    let summary = FingerprintSummary {
        n_subjects: varconet.n_subjects,
        checkpoint_epoch: epoch,
        margins: compare_to_pcc(&varconet, &pcc),
        varconet,
        pcc,
    };
    write_json(&out.join(FINGERPRINT_REPORT), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_bce: f64,
    pub test: ClassificationReport,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub test_subjects: usize,
    pub repetitions: Vec<RepetitionResult>,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub mean_f1: f64,
    pub mean_bce: f64,
    pub stability: StabilityReport,
}

/// Trains `eval.repetitions` encoders with linear-probe selection (seeds
/// `train.seed + r`) and scores each restored head on the test split.
/// Returns the report and the restored models, heads included.
pub fn classify_splits(
    splits: &Splits,
    hp: &HyperParams,
    tc: &TrainConfig,
    eval: &EvalConfig,
    workers: usize,
) -> CliResult<(ClassifyReport, Vec<ModelState>)> {
    for (name, c) in [("train", &splits.train), ("validation", &splits.val), ("test", &splits.test)] {
        if !has_both_classes(c) {
            return Err(CliError::Input(format!("{name} split needs labeled subjects of both classes")));
        }
    }
    let test_recordings: Vec<_> = splits
        .test
        .recordings
        .iter()
        .filter(|r| splits.test.label(&r.subject_id).is_some())
        .collect();
    let mut results = Vec::with_capacity(eval.repetitions);
    let mut models = Vec::with_capacity(eval.repetitions);
    for r in 0..eval.repetitions {
        let seed = tc.seed.wrapping_add(r as u64);
        let run_cfg = TrainConfig { seed, ..tc.clone() };
        let outcome = train_model(&splits.train, &splits.val, hp, &run_cfg, eval, Selection::Probe, workers, |_, _| Ok(()))?;
        let best = outcome
            .best
            .ok_or_else(|| CliError::Input("probe selection produced no checkpoint".into()))?;
        let head = best.state.head.clone().expect("probe hook returns a head");
        let (x, y) = labeled_embeddings(&best.state.encoder, &splits.test)?;
        let probs = positive_probability(linear_head(&head, x.view())?.view());
        let mut test = classification_metrics(probs.as_slice().expect("contiguous"), &y)?;
        test.probabilities = Some(probs.to_vec());
        log::info!("repetition {r}: best epoch {} test AUC {:.4}", best.epoch, test.auc);
        results.push(RepetitionResult {
            seed,
            best_epoch: best.epoch,
            val_bce: best.criterion,
            test,
            checkpoint: format!("classify_rep{r}.ckpt"),
        });
        models.push(best.state);
    }
    let pairs: Vec<_> = models
        .iter()
        .map(|m| (&m.encoder, m.head.as_ref().expect("probe head")))
        .collect();
    let stability = stability_eval(&pairs, &test_recordings, &eval.stability_windows)?;
    let aucs: Vec<f64> = results.iter().map(|r| r.test.auc).collect();
    let report = ClassifyReport {
        train_subjects: splits.train.subjects().len(),
        val_subjects: splits.val.subjects().len(),
        test_subjects: splits.test.subjects().len(),
        mean_auc: mean(&aucs),
        sd_auc: sample_sd(&aucs),
        mean_f1: mean(&results.iter().map(|r| r.test.f1).collect::<Vec<_>>()),
        mean_bce: mean(&results.iter().map(|r| r.test.bce).collect::<Vec<_>>()),
        repetitions: results,
        stability,
    };
    Ok((report, models))
}

pub fn run_classify(cfg: &RunConfig, workers: usize) -> CliResult<ClassifyReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let cohort = load_inputs(cfg)?;
    let splits = split_cohort(&cohort, &cfg.eval.split)?;
    let (report, models) = classify_splits(&splits, &cfg.model, &cfg.train, &cfg.eval, workers)?;
    for (rep, model) in report.repetitions.iter().zip(&models) {
        save_model(&out.join(&rep.checkpoint), model, &cfg.model, rep.best_epoch)?;
    }
    write_json(&out.join(CLASSIFY_REPORT), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub heads: usize,
    pub edges: usize,
    pub top: Vec<RankedEdge>,
}

pub fn importance_csv(imp: &ImportanceVector) -> String {
    let mut s = String::from("rank,index,region_i,region_j,importance\n");
    for (rank, e) in imp.ranking.iter().enumerate() {
        s.push_str(&format!("{},{},{},{},{}\n", rank + 1, e.index, e.region_i, e.region_j, e.importance));
    }
    s
}

/// Importance from the heads stored in `checkpoints`, or from every
/// checkpoint listed in the classification report when none are given.
pub fn run_importance(cfg: &RunConfig, checkpoints: &[PathBuf]) -> CliResult<ImportanceReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        let report_path = out.join(CLASSIFY_REPORT);
        require(&report_path, "paths.out")?;
        let report: ClassifyReport = read_json(&report_path)?;
        report.repetitions.iter().map(|r| out.join(&r.checkpoint)).collect()
    } else {
        checkpoints.to_vec()
    };
    let mut heads: Vec<Dense> = Vec::with_capacity(paths.len());
    for p in &paths {
        let (state, _, _) = load_model(p)?;
        heads.push(
            state
                .head
                .ok_or_else(|| CliError::Input(format!("{} has no classification head", p.display())))?,
        );
    }
    let refs: Vec<&Dense> = heads.iter().collect();
    let imp = feature_importance(&refs)?;
    write_text(&out.join(IMPORTANCE_CSV), &importance_csv(&imp))?;
    let report = ImportanceReport {
        heads: heads.len(),
        edges: imp.values.len(),
        top: imp.top(cfg.eval.top_k).to_vec(),
    };
    write_json(&out.join(IMPORTANCE_REPORT), &report)?;
    Ok(report)
}

/// `N x 2 x D` array of the subjects present with both sessions in `rows`,
/// in the order given by `subjects`.
fn session_array(sidecar: &EmbeddingSidecar, matrix: &Array2<f64>, subjects: &[String]) -> CliResult<Array3<f64>> {
    let find = |s: &str, k: u8| {
        sidecar
            .recordings
            .iter()
            .position(|r| r.subject_id == s && r.session_index == k)
            .ok_or_else(|| CliError::Input(format!("{}: subject {s} lacks session {k}", sidecar.file)))
    };
    let mut out = Array3::zeros((subjects.len(), 2, sidecar.cols));
    for (i, s) in subjects.iter().enumerate() {
        for k in 0..2u8 {
            out.slice_mut(ndarray::s![i, k as usize, ..]).assign(&matrix.row(find(s, k)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccReport {
    pub baseline: String,
    pub target: String,
    pub subjects: usize,
    pub summary: FlowSummary,
}

pub fn run_icc(cfg: &RunConfig, baseline: &Path, target: &Path) -> CliResult<IccReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let (bs, bm) = read_embeddings(baseline)?;
    let (ts, tm) = read_embeddings(target)?;
    if bs.cols != ts.cols {
        return Err(CliError::Input(format!(
            "embeddings have {} and {} connections",
            bs.cols, ts.cols
        )));
    }
    let mut subjects: Vec<String> = Vec::new();
    for r in &bs.recordings {
        if !subjects.contains(&r.subject_id)
            && bs.recordings.iter().any(|x| x.subject_id == r.subject_id && x.session_index == 1)
            && bs.recordings.iter().any(|x| x.subject_id == r.subject_id && x.session_index == 0)
        {
            subjects.push(r.subject_id.clone());
        }
    }
    let base = variation_field(&session_array(&bs, &bm, &subjects)?)?;
    let targ = variation_field(&session_array(&ts, &tm, &subjects)?)?;
    let flow = delta_icc_flow(&base, &targ)?;
    let regions = regions_for_edges(bs.cols);
    let mut csv = String::from(
        "index,region_i,region_j,icc_baseline,icc_target,delta_icc,within_baseline,within_target,between_baseline,between_target,quadrant\n",
    );
    for (idx, ((b, t), p)) in base.connections.iter().zip(&targ.connections).zip(&flow).enumerate() {
        let (ri, rj) = regions.map_or((0, 0), |r| edge_pair(idx, r));
        let quadrant = serde_json::to_value(p.quadrant).expect("quadrant serializes");
        csv.push_str(&format!(
            "{idx},{ri},{rj},{},{},{},{},{},{},{},{}\n",
            b.icc,
            t.icc,
            p.delta_icc,
            b.within_var,
            t.within_var,
            b.between_var,
            t.between_var,
            quadrant.as_str().unwrap_or_default()
        ));
    }
    write_text(&out.join(ICC_CSV), &csv)?;
    let report = IccReport {
        baseline: bs.method.clone(),
        target: ts.method.clone(),
        subjects: subjects.len(),
        summary: summarize_flow(&base, &targ, &flow),
    };
    write_json(&out.join(ICC_SUMMARY), &report)?;
    Ok(report)
}

/// Best validation fingerprinting objective of one training run with the
/// hyperparameters of `assignment`.
pub fn tune_objective(
    train: &Cohort,
    val: &Cohort,
    base: &HyperParams,
    tc: &TrainConfig,
    eval: &EvalConfig,
    assignment: &Assignment,
    workers: usize,
) -> CliResult<f64> {
    let hp = apply_assignment(base, assignment)?;
    let outcome = train_model(train, val, &hp, tc, eval, Selection::Fingerprint, workers, |_, _| Ok(()))?;
    outcome
        .best
        .map(|b| b.criterion)
        .ok_or_else(|| CliError::Input("no validation epoch was scored".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub trials: usize,
    pub completed: usize,
    pub failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best: Option<TrialRecord>,
    /// Best objective after each trial.
    pub best_so_far: Vec<Option<f64>>,
}

pub fn tune_report(history: &[TrialRecord]) -> TuneReport {
    let best_so_far = (1..=history.len())
        .map(|n| best_trial(&history[..n]).and_then(|t| t.objective))
        .collect();
    let failed = history.iter().filter(|t| t.status == TrialStatus::Failed).count();
    TuneReport {
        trials: history.len(),
        completed: history.len() - failed,
        failed,
        best: best_trial(history).cloned(),
        best_so_far,
    }
}

pub fn run_tune(cfg: &RunConfig, workers: usize) -> CliResult<TuneReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let cohort = load_inputs(cfg)?;
    let splits = split_cohort(&cohort, &cfg.eval.split)?;
    if splits.val.paired_subjects().len() < 2 {
        return Err(CliError::Input("tuning needs at least two validation subjects with two sessions".into()));
    }
    let regions = cohort.recordings.first().map_or(0, |r| r.n_regions());
    let space = cfg.tune.search_space(regions);
    let history_path = out.join(TUNE_HISTORY);
    let history = if cfg.tune.resume && history_path.exists() {
        read_history(&history_path)?
    } else {
        Vec::new()
    };
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!history.is_empty())
        .truncate(history.is_empty())
        .open(&history_path)
        .map_err(|e| CliError::io(&history_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let outcome = run_search(
        &space,
        &cfg.tune.tpe,
        cfg.tune.trials,
        cfg.tune.seed,
        history,
        |a, trial| {
            log::info!("trial {trial}: {a:?}");
            tune_objective(&splits.train, &splits.val, &cfg.model, &cfg.train, &cfg.eval, a, workers)
                .map_err(|e| varconet::Error::InvalidArgument(e.to_string()))
        },
        |record| {
            write_history_line(&mut writer, record)?;
            writer.flush().map_err(|e| varconet::Error::io(&history_path, e))
        },
    )?;
    drop(writer);
    write_text(&out.join(TUNE_CSV), &history_csv(&space, &outcome.history))?;
    let report = tune_report(&outcome.history);
    write_json(&out.join(TUNE_REPORT), &report)?;
    Ok(report)
}

pub fn run_gradcheck_command(cfg: &RunConfig, points: usize) -> CliResult<GradcheckReport> {
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let report = run_gradcheck(points.max(1), cfg.train.seed)?;
    write_json(&out.join(GRADCHECK_REPORT), &report)?;
    Ok(report)
}

pub const GRADCHECK_POINTS: usize = DEFAULT_POINTS;

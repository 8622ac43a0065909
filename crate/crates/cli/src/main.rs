use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use varconet_cli::config::RunConfig;
use varconet_cli::pipeline;
use varconet_cli::{parse_config, CliResult};

#[derive(Parser)]
#[command(name = "varconet", version, about = "Contrastive functional-connectome encoder pipeline")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its ground truth.
    Synth,
    /// Contrastive training with best-epoch checkpointing.
    Train,
    /// Write FC vectors of every recording.
    Embed {
        /// Pearson-correlation FC instead of the encoder.
        #[arg(long)]
        pcc: bool,
    },
    /// Test-set fingerprinting against the PCC baseline.
    Fingerprint,
    /// Repeated encoder + linear-probe classification.
    Classify,
    /// TPE hyperparameter search.
    Tune,
    /// Per-connection ICC change between two embedding sets.
    Icc {
        /// Sidecar JSON of the baseline embeddings.
        baseline: PathBuf,
        /// Sidecar JSON of the target embeddings.
        target: PathBuf,
    },
    /// Connection importance from trained classification heads.
    Importance {
        /// Checkpoints with heads; defaults to those of the last `classify`.
        checkpoints: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks for every layer.
    Gradcheck {
        #[arg(long, default_value_t = pipeline::GRADCHECK_POINTS)]
        points: usize,
    },
}

fn load(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load(cli)?;
    let workers = cli.workers.max(1);
    match &cli.command {
        Command::Synth => {
            let r = pipeline::run_synth(&cfg)?;
            println!("synthesized {} subjects, {} recordings", r.subjects, r.recordings);
        }
        Command::Train => {
            let r = pipeline::run_train(&cfg, workers)?;
            match (r.best_epoch, r.best_criterion) {
                (Some(e), Some(c)) => println!("trained {} epochs; best epoch {e} ({c:.4})", r.epochs),
                _ => println!("trained {} epochs", r.epochs),
            }
        }
        Command::Embed { pcc } => {
            let r = pipeline::run_embed(&cfg, *pcc)?;
            println!("wrote {} x {} {} embeddings", r.rows, r.cols, r.method);
        }
        Command::Fingerprint => {
            let r = pipeline::run_fingerprint(&cfg)?;
            println!("{:<10} {:>9} {:>9}", "lengths", "varconet", "pcc");
            for m in &r.margins {
                println!("{:<10} {:>9.4} {:>9.4}", m.label, m.varconet, m.pcc);
            }
            println!("objective {:.4} (pcc {:.4})", r.varconet.objective, r.pcc.objective);
        }
        Command::Classify => {
            let r = pipeline::run_classify(&cfg, workers)?;
            println!(
                "test AUC {:.4} +/- {:.4}, F1 {:.4}, decisions changed {:.1}%",
                r.mean_auc, r.sd_auc, r.mean_f1, r.stability.percent_changed
            );
        }
        Command::Tune => {
            let r = pipeline::run_tune(&cfg, workers)?;
            match r.best.as_ref().and_then(|b| b.objective.map(|o| (b.trial, o))) {
                Some((t, o)) => println!("{} trials; best trial {t} objective {o:.4}", r.trials),
                None => println!("{} trials; none completed", r.trials),
            }
        }
        Command::Icc { baseline, target } => {
            let r = pipeline::run_icc(&cfg, baseline, target)?;
            println!(
                "mean ICC {:.4} -> {:.4}; improved on {:.1}% of connections",
                r.summary.mean_icc_baseline, r.summary.mean_icc_target, r.summary.percent_improved
            );
        }
        Command::Importance { checkpoints } => {
            let r = pipeline::run_importance(&cfg, checkpoints)?;
            for e in &r.top {
                println!("{:>3} {:>3} {:+.5}", e.region_i, e.region_j, e.importance);
            }
        }
        Command::Gradcheck { points } => {
            let r = pipeline::run_gradcheck_command(&cfg, *points)?;
            print!("{}", r.table());
            if !r.passed() {
                return Err(varconet_cli::CliError::Input(format!(
                    "gradient check failed: worst relative error {:.3e}",
                    r.worst()
                )));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on a pipeline or configuration error, 2 on bad usage.
fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(execute(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::execute;
    use varconet_cli::pipeline;

    const SMALL: &str = r#"{
      "synth": {"n_subjects": 16, "R": 8, "T": 160},
      "model": {"ff_dim": 32, "batch_size": 8, "l_min": 40, "l_max": 120},
      "train": {"epochs": 2, "warmup_epochs": 1},
      "eval": {
        "fingerprint": {"lengths": [40, 80, 120], "draws": 2},
        "validation": {"lengths": [40, 80, 120], "draws": 2}
      }
    }"#;

    fn code(args: &[&str]) -> u8 {
        execute(std::iter::once("varconet").chain(args.iter().copied()))
    }

    fn path(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    /// Runs `cmd` with the config at `dir/cfg.json` and output in `dir/o`.
    fn ok(dir: &Path, cmd: &[&str]) {
        let cfg = dir.join("cfg.json");
        let out = dir.join("o");
        let mut args = cmd.to_vec();
        args.extend(["--config", path(&cfg), "--out", path(&out)]);
        assert_eq!(code(&args), 0, "{cmd:?} failed");
    }

    fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(code(&["frobnicate"]), 2);
        assert_eq!(code(&[]), 2);
        assert_eq!(code(&["synth", "--workers", "many"]), 2);
    }

    #[test]
    fn pipeline_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(code(&["train", "--out", path(&dir.path().join("nowhere"))]), 1);
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"model": {"l_min": 4}}"#).unwrap();
        assert_eq!(code(&["synth", "--config", path(&bad)]), 1);
        assert_eq!(code(&["synth", "--config", path(&dir.path().join("missing.json"))]), 1);
    }

    #[test]
    fn gradcheck_passes() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(code(&["gradcheck", "--points", "2", "--out", path(dir.path())]), 0);
        let report: serde_json::Value = read(&dir.path().join(pipeline::GRADCHECK_REPORT));
        let layers = report["layers"].as_array().unwrap();
        assert!(layers.iter().any(|l| l["layer"] == "encoder_ntxent"));
        assert!(layers.iter().all(|l| l["passed"] == true));
    }

    #[test]
    fn synth_train_fingerprint_embed_icc() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::write(d.join("cfg.json"), SMALL).unwrap();
        for cmd in ["synth", "train", "fingerprint"] {
            ok(d, &[cmd]);
        }
        let o = d.join("o");
        for f in [
            pipeline::SYNTH_REPORT,
            pipeline::GROUND_TRUTH_FILE,
            pipeline::TRAIN_REPORT,
            pipeline::FINGERPRINT_REPORT,
            pipeline::TRAIN_LOG,
            pipeline::BEST_CHECKPOINT,
            pipeline::FINAL_CHECKPOINT,
            "similarity_120-120.csv",
        ] {
            assert!(o.join(f).is_file(), "missing {f}");
        }
        let log = std::fs::read_to_string(o.join(pipeline::TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 2);
        let summary: pipeline::FingerprintSummary = read(&o.join(pipeline::FINGERPRINT_REPORT));
        assert_eq!(summary.n_subjects, 6);
        assert_eq!(summary.margins.len(), 6);

        ok(d, &["embed"]);
        ok(d, &["embed", "--pcc"]);
        let (base, target) = (o.join("embeddings_pcc.json"), o.join("embeddings_varconet.json"));
        ok(d, &["icc", path(&base), path(&target)]);
        let csv = std::fs::read_to_string(o.join(pipeline::ICC_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 28);
        let (sidecar, m) = pipeline::read_embeddings(&target).unwrap();
        assert_eq!(m.dim(), (32, 28));
        assert_eq!(sidecar.recordings.len(), 32);
        let icc: pipeline::IccReport = read(&o.join(pipeline::ICC_SUMMARY));
        assert_eq!((icc.subjects, icc.summary.connections), (16, 28));
    }

    #[test]
    fn classify_then_importance() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = r#"{
          "synth": {"n_subjects": 24, "n_sessions": 1, "R": 8, "T": 160, "labeled": true,
                    "effect_edges": [[0, 3], [1, 4]], "effect_delta": 0.3, "sigma_subject": 0.1},
          "model": {"ff_dim": 32, "batch_size": 8, "l_min": 40, "l_max": 120},
          "train": {"epochs": 2, "warmup_epochs": 1, "probe_epochs": 30},
          "eval": {"split": {"train": 0.5, "val": 0.25}, "repetitions": 2,
                   "stability_windows": [1, 2], "top_k": 5}
        }"#;
        std::fs::write(d.join("cfg.json"), cfg).unwrap();
        for cmd in ["synth", "classify", "importance"] {
            ok(d, &[cmd]);
        }
        let o = d.join("o");
        let report: pipeline::ClassifyReport = read(&o.join(pipeline::CLASSIFY_REPORT));
        assert_eq!(report.repetitions.len(), 2);
        assert_eq!((report.train_subjects, report.val_subjects, report.test_subjects), (12, 6, 6));
        assert!(report.stability.denominator > 0);
        let csv = std::fs::read_to_string(o.join(pipeline::IMPORTANCE_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 28);
        let imp: pipeline::ImportanceReport = read(&o.join(pipeline::IMPORTANCE_REPORT));
        assert_eq!((imp.heads, imp.top.len()), (2, 5));
    }

    #[test]
    fn tune_resumes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = |trials: usize| {
            format!(
                r#"{{
              "synth": {{"n_subjects": 16, "R": 8, "T": 160}},
              "model": {{"l_min": 40, "l_max": 120}},
              "train": {{"epochs": 1, "warmup_epochs": 0}},
              "eval": {{"validation": {{"lengths": [40, 80, 120], "draws": 1}}}},
              "tune": {{"trials": {trials}, "ff_dims": [16, 32], "batch_sizes": [4, 8], "tpe": {{"n_startup": 2}}}}
            }}"#
            )
        };
        let (short, long) = (d.join("short.json"), d.join("long.json"));
        std::fs::write(&short, cfg(2)).unwrap();
        std::fs::write(&long, cfg(4)).unwrap();
        let (a, b) = (d.join("a"), d.join("b"));
        let run = |cmd: &str, config: &Path, out: &Path| {
            assert_eq!(code(&[cmd, "--config", path(config), "--out", path(out)]), 0, "{cmd} failed");
        };
        run("synth", &short, &a);
        run("synth", &short, &b);
        run("tune", &short, &a);
        run("tune", &long, &a);
        run("tune", &long, &b);
        for f in [pipeline::TUNE_HISTORY, pipeline::TUNE_CSV, pipeline::TUNE_REPORT] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs after resume");
        }
        let report: pipeline::TuneReport = read(&a.join(pipeline::TUNE_REPORT));
        assert_eq!(report.trials, 4);
    }
}

//! `nsa`: synthetic data, SSL training, embedding, scoring, diagnostics and
//! full per-class evaluation from a JSON [`RunConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsa_core::data::{read_embeddings, write_embeddings};
use nsa_core::diagnostics::{write_diagnostics_csv, DiagnosticRow};
use nsa_core::eval::{
    auroc, data_pools, make_split, run_experiment_with, summarize, write_curves_csv, write_manifest, write_results_csv,
};
use nsa_core::nets::{read_checkpoint, write_checkpoint};
use nsa_core::scoring::{ensemble, ensemble_metrics, fit_mahalanobis, score_metric, write_score_csv, write_score_sidecar};
use nsa_core::seeding::mix;
use nsa_core::ssl::{images_to_tensor, train, write_epoch_log};
use nsa_core::{EmbeddingSet, FeatureMapName, Metric, NsaError, RunConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "nsa", version, about = "Self-supervised one-class anomaly detection workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the evaluation seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test image pools described by `data`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on the one-vs-all split of `--class`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        class: Option<u16>,
        /// Pollution ratio; defaults to the first entry of `eval.pollution`.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Embed the split of `--class` with a trained checkpoint.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: Option<u16>,
        #[arg(long)]
        p: Option<f64>,
        /// Feature maps to write; defaults to `scoring.feature_maps`.
        #[arg(long = "feature-map")]
        feature_maps: Vec<FeatureMapName>,
    },
    /// Score test embeddings against training embeddings.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Metrics; defaults to `scoring.metrics`. `Ens` applies the preset pair for the map.
        #[arg(long = "metric")]
        metrics: Vec<Metric>,
    },
    /// vMF concentration and MMD-to-uniform of embedding files.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        embeddings: Vec<PathBuf>,
    },
    /// Every variant, class, seed and pollution level of the config.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(NsaError),
}

impl From<NsaError> for Failure {
    fn from(e: NsaError) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            use clap::CommandFactory;
            eprintln!("error: {msg}\n\n{}", Cli::command().render_help());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common, required: bool) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None if required => return Err(Failure::Usage("--config <PATH> is required".into())),
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.eval.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    fs::create_dir_all(&common.out_dir)?;
    Ok(&common.out_dir)
}

/// Writes every output file, then the manifest that hashes them.
fn write_outputs(dir: &Path, outputs: &[(&str, Vec<u8>)], manifest: impl FnOnce(&[(&str, &[u8])]) -> CliResult<Vec<u8>>) -> CliResult<()> {
    for (name, bytes) in outputs {
        fs::write(dir.join(name), bytes)?;
    }
    let refs: Vec<(&str, &[u8])> = outputs.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    fs::write(dir.join("manifest.json"), manifest(&refs)?)?;
    Ok(())
}

fn run_manifest(config: &RunConfig) -> impl FnOnce(&[(&str, &[u8])]) -> CliResult<Vec<u8>> + '_ {
    move |outputs| {
        let mut buf = Vec::new();
        write_manifest(config, outputs, &mut buf)?;
        Ok(buf)
    }
}

#[derive(Serialize)]
struct FileManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    config: &'a RunConfig,
}

fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

fn file_manifest<'a>(
    command: &'a str,
    common: &'a Common,
    config: &'a RunConfig,
    inputs: &'a [&Path],
) -> impl FnOnce(&[(&str, &[u8])]) -> CliResult<Vec<u8>> + 'a {
    move |outputs| {
        let mut ins = BTreeMap::new();
        for p in inputs {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            ins.insert(name, sha256_file(p)?);
        }
        let m = FileManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: common.seed,
            inputs: ins,
            outputs: outputs.iter().map(|(n, b)| (n.to_string(), format!("{:x}", Sha256::digest(b)))).collect(),
            config,
        };
        let mut buf = serde_json::to_vec_pretty(&m).map_err(NsaError::from)?;
        buf.push(b'\n');
        Ok(buf)
    }
}

fn pick_class(config: &RunConfig, class: Option<u16>) -> CliResult<u16> {
    match class.or_else(|| config.eval.inlier_classes.first().copied()) {
        Some(c) if c < config.data.classes => Ok(c),
        Some(c) => Err(Failure::Usage(format!("class {c} not below data.classes = {}", config.data.classes))),
        None => Err(Failure::Usage("no --class given and eval.inlier_classes is empty".into())),
    }
}

fn pick_p(config: &RunConfig, p: Option<f64>) -> f64 {
    p.or_else(|| config.eval.pollution.first().copied()).unwrap_or(0.0)
}

/// Same split seed derivation as the evaluation driver, so `train` + `embed`
/// reproduce one job of `eval`.
fn split_seed(seed: u64, class: u16, p: f64) -> u64 {
    mix(&[seed, class as u64, (p * 1e6).round() as u64, 0x5917])
}

fn read_set(path: &Path) -> CliResult<EmbeddingSet> {
    let f = fs::File::open(path).map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_embeddings(&mut BufReader::new(f))?)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { common } => {
            let mut config = load_config(&common, true)?;
            if let Some(seed) = common.seed {
                config.data.seed = seed;
            }
            let dir = out_dir(&common)?;
            let (train_pool, test_pool) = data_pools(&config)?;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            train_pool.write_to(&mut a)?;
            test_pool.write_to(&mut b)?;
            write_outputs(dir, &[("train.nsad", a), ("test.nsad", b)], run_manifest(&config))
        }
        Command::Train { common, class, p } => {
            let config = load_config(&common, true)?;
            let dir = out_dir(&common)?;
            let class = pick_class(&config, class)?;
            let p = pick_p(&config, p);
            let seed = config.train.seed;
            let (train_pool, test_pool) = data_pools(&config)?;
            let split = make_split(&train_pool, &test_pool, class, p, split_seed(seed, class, p))?;
            let mut tc = config.train.clone();
            tc.seed = mix(&[seed, class as u64]);
            let outcome = train(&tc, &split.train_images(&train_pool)?)?;
            let mut ckpt = Vec::new();
            write_checkpoint(&outcome.model, &mut ckpt)?;
            let mut log = Vec::new();
            write_epoch_log(&outcome.log, &mut log)?;
            eprintln!("class {class}: final loss {:.6}", outcome.log.last().map_or(f64::NAN, |l| l.loss));
            write_outputs(dir, &[("model.nsam", ckpt), ("train_log.csv", log)], run_manifest(&config))
        }
        Command::Embed { common, checkpoint, class, p, feature_maps } => {
            let config = load_config(&common, true)?;
            let dir = out_dir(&common)?;
            let class = pick_class(&config, class)?;
            let p = pick_p(&config, p);
            let model = {
                let f = fs::File::open(&checkpoint)
                    .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", checkpoint.display())))?;
                read_checkpoint(&mut BufReader::new(f))?
            };
            let maps = if feature_maps.is_empty() { config.scoring.feature_maps.clone() } else { feature_maps };
            let (train_pool, test_pool) = data_pools(&config)?;
            let split = make_split(&train_pool, &test_pool, class, p, split_seed(config.train.seed, class, p))?;
            let mut outputs: Vec<(String, Vec<u8>)> = Vec::new();
            for (tag, pool, idx, outlier) in [
                ("train", &train_pool, &split.train, &split.train_outlier),
                ("test", &test_pool, &split.test, &split.test_outlier),
            ] {
                let feats = model.embed(&images_to_tensor(pool, idx), 128)?;
                let classes: Vec<u16> = idx.iter().map(|&i| pool.labels[i]).collect();
                for &m in &maps {
                    let t = feats
                        .get(&m)
                        .ok_or_else(|| Failure::Usage(format!("model does not produce feature map `{m}`")))?;
                    let n = t.shape()[0];
                    let set = EmbeddingSet::new(n, t.numel() / n.max(1), t.data().to_vec())?
                        .with_labels(classes.clone(), outlier.clone())?
                        .with_source(m.to_string(), model.checksum());
                    let mut buf = Vec::new();
                    write_embeddings(&set, &mut buf)?;
                    outputs.push((format!("{tag}_{m}.nsae"), buf));
                }
            }
            let outputs: Vec<(&str, Vec<u8>)> = outputs.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
            let inputs = [checkpoint.as_path()];
            write_outputs(dir, &outputs, file_manifest("embed", &common, &config, &inputs))
        }
        Command::Score { common, train, test, metrics } => {
            let config = load_config(&common, false)?;
            let dir = out_dir(&common)?;
            let (tr, te) = (read_set(&train)?, read_set(&test)?);
            let metrics = if metrics.is_empty() { config.scoring.metrics.clone() } else { metrics };
            let needs_whitening = metrics.iter().any(|m| m.uses_whitening()) || metrics.contains(&Metric::Ens);
            let t = if needs_whitening { Some(fit_mahalanobis(&tr, config.scoring.shrinkage)?) } else { None };
            let mut reports = Vec::new();
            for &metric in &metrics {
                if metric == Metric::Ens {
                    let spatial = tr.feature_map.parse::<FeatureMapName>().is_ok_and(|m| m.is_spatial());
                    let parts = ensemble_metrics(spatial)
                        .into_iter()
                        .map(|m| score_metric(&tr, &te, m, t.as_ref(), config.scoring.gde_bandwidth))
                        .collect::<Result<Vec<_>, _>>()?;
                    reports.push(ensemble(&parts)?);
                } else {
                    reports.push(score_metric(&tr, &te, metric, t.as_ref(), config.scoring.gde_bandwidth)?);
                }
            }
            let mut scores = Vec::new();
            write_score_csv(&reports, &mut scores)?;
            let mut sidecar = Vec::new();
            write_score_sidecar(&reports, &mut sidecar)?;
            let mut outputs = vec![("scores.csv", scores), ("scores.json", sidecar)];
            if te.outlier.iter().any(|&o| o) && !te.outlier.iter().all(|&o| o) {
                let mut csv = b"metric,auroc\n".to_vec();
                for r in &reports {
                    writeln!(csv, "{}@{},{:.9}", r.metric, r.feature_map, auroc(&r.scores, &te.outlier)?.auroc)?;
                }
                outputs.push(("auroc.csv", csv));
            }
            let inputs = [train.as_path(), test.as_path()];
            write_outputs(dir, &outputs, file_manifest("score", &common, &config, &inputs))
        }
        Command::Diag { common, embeddings } => {
            let config = load_config(&common, false)?;
            let dir = out_dir(&common)?;
            let seed = common.seed.unwrap_or(config.diagnostics.seed);
            let mut rows = Vec::new();
            for path in &embeddings {
                let set = read_set(path)?;
                let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                let has_labels = set.outlier.iter().any(|&o| o);
                if has_labels {
                    let id: Vec<usize> = (0..set.len()).filter(|&i| !set.outlier[i]).collect();
                    let ood: Vec<usize> = (0..set.len()).filter(|&i| set.outlier[i]).collect();
                    rows.push(DiagnosticRow::compute(0, &format!("{name}:id"), &set.select(&id), seed)?);
                    rows.push(DiagnosticRow::compute(0, &format!("{name}:ood"), &set.select(&ood), seed)?);
                } else {
                    rows.push(DiagnosticRow::compute(0, &format!("{name}:all"), &set, seed)?);
                }
            }
            let mut csv = Vec::new();
            write_diagnostics_csv(&rows, &mut csv)?;
            let inputs: Vec<&Path> = embeddings.iter().map(|p| p.as_path()).collect();
            write_outputs(dir, &[("diagnostics.csv", csv)], file_manifest("diag", &common, &config, &inputs))
        }
        Command::Eval { common } => {
            let config = load_config(&common, true)?;
            let dir = out_dir(&common)?;
            let results = run_experiment_with(&config, &|done, total| eprintln!("[{done}/{total}] jobs finished"))?;
            let mut res = Vec::new();
            write_results_csv(&results.rows, &mut res)?;
            let mut curves = Vec::new();
            write_curves_csv(&results.curves, &mut curves)?;
            let mut summary = b"method,norm_f,norm_g,batch,p,metric,n,auroc_mean,auroc_std,kappa_id_mean\n".to_vec();
            for s in summarize(&results.rows) {
                writeln!(
                    summary,
                    "{},{},{},{},{},{},{},{:.6},{:.6},{}",
                    s.method,
                    s.norm_f,
                    s.norm_g,
                    s.batch,
                    s.p,
                    s.metric,
                    s.n,
                    s.auroc_mean,
                    s.auroc_std,
                    s.kappa_id_mean.map(|k| format!("{k:.6}")).unwrap_or_default()
                )?;
            }
            {
                let mut out = BufWriter::new(std::io::stdout().lock());
                out.write_all(&summary)?;
            }
            write_outputs(
                dir,
                &[("results.csv", res), ("curves.csv", curves), ("summary.csv", summary)],
                run_manifest(&config),
            )
        }
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};

use scl_core::data::{
    generate_multi_label, generate_single_label, read_dataset, write_dataset, Dataset, MultiLabelConfig, Regime,
    CAPTION_LEN, IMAGE_CHANNELS, IMAGE_SIDE,
};
use scl_core::evaluation::{image_cluster_similarity, Evaluator, EvaluatorSettings, GenerationScores};
use scl_core::models::{Checkpoint, EncoderPair, GanPair};
use scl_core::trainer::{run_gan, run_pretrain, AblationRow, Phase, PhaseConfig, TrainError, TrainingTrace};

use crate::config::{Emit, RunConfig};
use crate::records::{self, metric, MetricsRecord};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.scl";
pub const ENCODERS_FILE: &str = "encoders.ckpt";
pub const GAN_FILE: &str = "gan.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SERIES_FILE: &str = "series.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("output directory {} is not writable: {e}", dir.display())))
}

fn existing(path: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    let path = path
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing `{key}` path")))?;
    if !path.exists() {
        return Err(CliError::Usage(format!("{key} path {} does not exist", path.display())));
    }
    Ok(path.clone())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = existing(&cfg.dataset, "dataset")?;
    let dataset = read_dataset(&path)?;
    let m = &dataset.manifest;
    if m.image_side as usize != IMAGE_SIDE || m.channels as usize != IMAGE_CHANNELS || m.caption_len as usize != CAPTION_LEN {
        return Err(CliError::Usage(format!(
            "dataset dims {}x{}x{} caption {} do not match the models ({}x{}x{} caption {})",
            m.image_side, m.image_side, m.channels, m.caption_len, IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS, CAPTION_LEN
        )));
    }
    Ok(dataset)
}

fn load_encoders(path: &Path) -> Result<EncoderPair, CliError> {
    let c = Checkpoint::load(path)?;
    EncoderPair::from_checkpoint(&c)
        .map_err(|e| CliError::Usage(format!("{} is not an encoder checkpoint: {e}", path.display())))
}

fn phase(cfg: &RunConfig, phase: Phase, regime: Regime, own: bool) -> PhaseConfig {
    let mut c = cfg.phase_config(phase, regime);
    if own {
        if let Some(e) = cfg.epochs {
            c.epochs = e;
        }
    }
    c
}

/// Writes the metrics stream, series and timing files of one run into `dir`.
fn write_run(dir: &Path, trace: Option<&TrainingTrace>, records: &[MetricsRecord]) -> Result<(), CliError> {
    records::write_records(&dir.join(METRICS_FILE), records)?;
    if let Some(t) = trace {
        records::write_series(&dir.join(SERIES_FILE), t)?;
        records::write_timing(&dir.join(TIMING_FILE), t)?;
    }
    Ok(())
}

fn emit(cfg: &RunConfig, dir: &Path, records: &[MetricsRecord], out: &mut dyn Write) -> Result<(), CliError> {
    let table = records::summary_table(records);
    std::fs::write(dir.join(SUMMARY_FILE), &table)?;
    match cfg.emit {
        Emit::Rows => out.write_all(table.as_bytes())?,
        Emit::Records => {
            for r in records.iter().filter(|r| r.kind == records::Kind::Metric) {
                serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn score_records(run: &str, scores: &GenerationScores) -> Vec<MetricsRecord> {
    vec![
        metric(run, "is_mean", scores.inception.mean),
        metric(run, "is_std", scores.inception.std),
        metric(run, "fid", scores.fid),
    ]
}

fn similarity_records(run: &str, encoders: &EncoderPair, dataset: &Dataset) -> Result<Vec<MetricsRecord>, CliError> {
    let s = image_cluster_similarity(encoders, &dataset.test())?;
    Ok(vec![
        metric(run, "within_cos", s.within),
        metric(run, "between_cos", s.between),
        metric(run, "cluster_gap", s.gap()),
    ])
}

fn evaluator(records: &mut Vec<MetricsRecord>, run: &str) -> Result<Evaluator, CliError> {
    let ev = Evaluator::train(&EvaluatorSettings::default())?;
    records.push(metric(run, "classifier_accuracy", ev.train_accuracy));
    Ok(ev)
}

pub fn generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = match cfg.regime {
        Regime::Single => generate_single_label(cfg.n, cfg.k, cfg.seed)?,
        Regime::Multi => generate_multi_label(cfg.n, &MultiLabelConfig::default(), cfg.seed)?,
    };
    let path = match &cfg.dataset {
        Some(p) => RunConfig::resolve_output(p),
        None => {
            let dir = cfg.output_dir();
            create_dir(&dir)?;
            dir.join(DATASET_FILE)
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_dataset(&path, &dataset)?;
    let m = &dataset.manifest;
    writeln!(
        out,
        "wrote {}: regime={} labels={} train={} test={} seed={}",
        path.display(),
        m.regime.as_str(),
        m.label_names.len(),
        m.n_train,
        m.n_test,
        m.seed
    )?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let pc = phase(cfg, Phase::Pretrain, dataset.manifest.regime, true);
    let result = run_pretrain(&pc, &dataset)?;
    result.encoders.to_checkpoint().save(dir.join(ENCODERS_FILE))?;
    let run = "pretrain";
    let mut recs = records::loss_records(run, &result.trace);
    recs.extend(similarity_records(run, &result.encoders, &dataset)?);
    write_run(&dir, Some(&result.trace), &recs)?;
    emit(cfg, &dir, &recs, out)
}

/// Encoders from `encoders`, or pre-trained in process (with `λ1 = 0` when
/// the run does not use contrastive pre-training) and saved to `dir`.
fn obtain_encoders(cfg: &RunConfig, dataset: &Dataset, dir: &Path) -> Result<EncoderPair, CliError> {
    if cfg.encoders.is_some() {
        return load_encoders(&existing(&cfg.encoders, "encoders")?);
    }
    let mut pc = phase(cfg, Phase::Pretrain, dataset.manifest.regime, false);
    if !cfg.toggles.use_pretrained_encoders {
        pc.weights.lambda1 = 0.0;
    }
    let enc = run_pretrain(&pc, dataset)?.encoders;
    enc.to_checkpoint().save(dir.join(ENCODERS_FILE))?;
    Ok(enc)
}

/// Trains and scores one GAN into `dir`; returns its records.
fn gan_run(
    run: &str,
    pc: &PhaseConfig,
    dataset: &Dataset,
    encoders: &EncoderPair,
    ev: &Evaluator,
    samples: usize,
    dir: &Path,
) -> Result<Vec<MetricsRecord>, CliError> {
    create_dir(dir)?;
    let result = run_gan(pc, dataset, encoders)?;
    result.gan.to_checkpoint().save(dir.join(GAN_FILE))?;
    let scores = ev.evaluate_generator(&result.gan, encoders, &dataset.test(), samples, pc.seed)?;
    let mut recs = records::loss_records(run, &result.trace);
    recs.extend(score_records(run, &scores));
    write_run(dir, Some(&result.trace), &recs)?;
    Ok(recs)
}

pub fn gan(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let encoders = obtain_encoders(cfg, &dataset, &dir)?;
    let pc = phase(cfg, Phase::Gan, dataset.manifest.regime, true);
    pc.validate()?;
    let mut recs = Vec::new();
    let ev = evaluator(&mut recs, "gan")?;
    recs.extend(gan_run("gan", &pc, &dataset, &encoders, &ev, cfg.eval_samples, &dir)?);
    write_run(&dir, None, &recs)?;
    emit(cfg, &dir, &recs, out)
}

fn run_parallel<T: Send, F>(jobs: Vec<T>, parallel: bool, f: F) -> Result<Vec<Vec<MetricsRecord>>, CliError>
where
    F: Fn(T) -> Result<Vec<MetricsRecord>, CliError> + Sync,
{
    if !parallel {
        return jobs.into_iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(|| f(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub fn ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let regime = dataset.manifest.regime;
    let pre = phase(cfg, Phase::Pretrain, regime, false);
    let mut plain_cfg = pre.clone();
    plain_cfg.weights.lambda1 = 0.0;
    let plain = run_pretrain(&plain_cfg, &dataset)?.encoders;
    let scl = run_pretrain(&pre, &dataset)?.encoders;
    plain.to_checkpoint().save(dir.join("encoders_plain.ckpt"))?;
    scl.to_checkpoint().save(dir.join("encoders_scl.ckpt"))?;

    let mut recs = Vec::new();
    let ev = evaluator(&mut recs, "evaluator")?;
    recs.extend(similarity_records("encoders_plain", &plain, &dataset)?);
    recs.extend(similarity_records("encoders_scl", &scl, &dataset)?);
    let base = phase(cfg, Phase::Gan, regime, true);
    let rows = run_parallel(AblationRow::ALL.to_vec(), cfg.parallel, |row| {
        let mut pc = base.clone();
        pc.toggles = row.toggles(pc.toggles);
        let enc = if pc.toggles.use_pretrained_encoders { &scl } else { &plain };
        let run = format!("row{}", row.id());
        gan_run(&run, &pc, &dataset, enc, &ev, cfg.eval_samples, &dir.join(&run))
    })?;
    recs.extend(rows.into_iter().flatten());
    write_run(&dir, None, &recs)?;
    emit(cfg, &dir, &recs, out)
}

pub fn sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    if cfg.lambda2_list.is_empty() {
        return Err(CliError::Usage("lambda2_list is empty".into()));
    }
    let encoders = obtain_encoders(cfg, &dataset, &dir)?;
    let base = phase(cfg, Phase::Gan, dataset.manifest.regime, true);
    let mut recs = Vec::new();
    let ev = evaluator(&mut recs, "evaluator")?;
    let rows = run_parallel(cfg.lambda2_list.clone(), cfg.parallel, |lambda2| {
        let mut pc = base.clone();
        pc.weights.lambda2 = lambda2;
        let run = format!("lambda2_{lambda2}");
        let mut r = vec![metric(&run, "lambda2", lambda2)];
        r.extend(gan_run(&run, &pc, &dataset, &encoders, &ev, cfg.eval_samples, &dir.join(&run))?);
        Ok(r)
    })?;
    recs.extend(rows.into_iter().flatten());
    write_run(&dir, None, &recs)?;
    emit(cfg, &dir, &recs, out)
}

pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let encoders = load_encoders(&existing(&cfg.encoders, "encoders")?)?;
    let ckpt = existing(&cfg.checkpoint, "checkpoint")?;
    let gan = GanPair::from_checkpoint(&Checkpoint::load(&ckpt)?)
        .map_err(|e| CliError::Usage(format!("{} is not a generator checkpoint: {e}", ckpt.display())))?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let run = "eval";
    let mut recs = Vec::new();
    let ev = evaluator(&mut recs, run)?;
    let scores = ev
        .evaluate_generator(&gan, &encoders, &dataset.test(), cfg.eval_samples, cfg.seed)
        .map_err(|e: TrainError| CliError::Train(e))?;
    recs.extend(score_records(run, &scores));
    recs.extend(similarity_records(run, &encoders, &dataset)?);
    write_run(&dir, None, &recs)?;
    emit(cfg, &dir, &recs, out)
}

//! Two-phase training: encoder pre-training with the matching loss plus
//! weighted contrastive terms, then a two-branch conditional GAN trained
//! against the frozen encoders.
//!
//! All randomness of a run flows from `PhaseConfig::seed` through one
//! `ChaCha8Rng`. Each step draws, in order, a `u64` batch seed for
//! [`sample_paired_batch`] and then (GAN phase only) the noise rows for
//! both branches.

mod ablation;

pub use ablation::{
    pretrain_encoder_pair, run_ablation_rows, run_ablation_suite, run_lambda_sweep, AblationConfig, AblationResult,
    AblationRow, SweepRow,
};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, LabelSet, LabeledExample};
use crate::losses::{self, Component, GanExtras, LossError, LossReport, LossWeights};
use crate::models::{
    image_batch, sample_noise, Activation, Adam, EncoderPair, GanPair, MlpNetwork, ModelError, TextInput, EMBED_DIM,
};
use crate::sampling::{build_label_index, positive_mask, sample_paired_batch, LabelMode, PairedBatch, PositiveMask, SamplingError};
use crate::tensor::{Matrix, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("step {step}: non-finite `{component}` in the {objective} objective; aborting")]
    NonFinite {
        step: u64,
        objective: &'static str,
        component: String,
    },
    #[error("encoder parameters changed during the GAN phase")]
    EncoderModified,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Gan,
}

/// Switches for the optional loss terms and pipeline variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// GAN phase: encoders come from a pre-training run with `λ1 > 0`.
    /// When off, the encoders are matching-loss-only (`λ1 = 0`).
    pub use_pretrained_encoders: bool,
    pub use_sup_img: bool,
    pub use_sup_i2t: bool,
    /// Pre-training only; the GAN phase has no text-text term.
    pub use_sup_txt: bool,
    /// GAN phase: replace the contrastive terms with a cross-entropy
    /// auxiliary classifier on generated-image embeddings.
    pub aux_ce_baseline: bool,
    /// Feed both branches the same noise rows.
    pub share_noise: bool,
    pub cross_modal_include_self: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_pretrained_encoders: true,
            use_sup_img: true,
            use_sup_i2t: true,
            use_sup_txt: true,
            aux_ce_baseline: false,
            share_noise: false,
            cross_modal_include_self: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// `N`: anchors per step; each step sees `2N` examples.
    pub batch: usize,
    pub weights: LossWeights,
    pub label_mode: LabelMode,
    pub toggles: Toggles,
    pub seed: u64,
    /// Adam step size for the encoders.
    pub encoder_lr: f64,
    /// Adam step size for generator and discriminator.
    pub gan_lr: f64,
}

impl PhaseConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 30,
            batch: 16,
            weights: LossWeights::default(),
            label_mode: LabelMode::Single,
            toggles: Toggles::default(),
            seed,
            encoder_lr: 1e-3,
            gan_lr: 2e-4,
        }
    }

    pub fn gan(seed: u64) -> Self {
        Self {
            phase: Phase::Gan,
            epochs: 60,
            ..Self::pretrain(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        for (name, lr) in [("encoder_lr", self.encoder_lr), ("gan_lr", self.gan_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.toggles.aux_ce_baseline && self.label_mode == LabelMode::Multi {
            return Err(TrainError::Config(
                "the cross-entropy baseline needs single-label data".into(),
            ));
        }
        Ok(())
    }

    fn expect_phase(&self, phase: Phase) -> Result<(), TrainError> {
        if self.phase != phase {
            return Err(TrainError::Config(format!(
                "expected a {phase:?} configuration, got {:?}",
                self.phase
            )));
        }
        self.validate()
    }

    fn steps_per_epoch(&self, pool: usize) -> usize {
        (pool / self.batch).max(1)
    }
}

/// Loss report of one objective evaluation at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    /// `"pretrain"`, `"d"` or `"g"`.
    pub objective: String,
    pub report: LossReport,
}

/// Per-epoch summary: mean total of each objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_totals: BTreeMap<String, f64>,
    pub fallback_count: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub fallback_total: usize,
}

impl TrainingTrace {
    fn push(&mut self, step: u64, epoch: usize, objective: &'static str, report: LossReport) -> Result<(), TrainError> {
        if let Err(LossError::NonFinite { component }) = report.check_finite() {
            return Err(TrainError::NonFinite {
                step,
                objective,
                component,
            });
        }
        self.steps.push(StepRecord {
            step,
            epoch,
            objective: objective.to_string(),
            report,
        });
        Ok(())
    }

    fn close_epoch(&mut self, epoch: usize, fallback: usize, started: Instant) {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.steps.iter().rev().take_while(|r| r.epoch == epoch) {
            let e = sums.entry(r.objective.clone()).or_default();
            e.0 += r.report.total;
            e.1 += 1;
        }
        self.fallback_total += fallback;
        self.epochs.push(EpochRecord {
            epoch,
            mean_totals: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            fallback_count: fallback,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }

    /// Totals of one objective in step order.
    pub fn totals(&self, objective: &str) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|r| r.objective == objective)
            .map(|r| r.report.total)
            .collect()
    }
}

fn check_mode(config: &PhaseConfig, dataset: &Dataset) -> Result<(), TrainError> {
    if config.label_mode == LabelMode::Single && dataset.label_mode() == LabelMode::Multi {
        // Surfaces the sampler's own mode error on the first multi-label row.
        let labels: Vec<LabelSet> = dataset.examples.iter().map(|e| e.labels.clone()).collect();
        crate::sampling::mask_from_labels(&labels, LabelMode::Single)?;
    }
    Ok(())
}

fn captions(batch: &PairedBatch, pool: &[LabeledExample]) -> Vec<TextInput> {
    batch.examples(pool).map(|e| e.caption.clone()).collect()
}

fn grads(tape: &Tape, vars: &[Var]) -> Vec<Matrix> {
    vars.iter().map(|v| tape.grad_or_zeros(*v)).collect()
}

pub struct PretrainOutput {
    pub encoders: EncoderPair,
    pub trace: TrainingTrace,
}

/// One pre-training objective evaluation on an already sampled batch.
/// Returns the objective with the tape handles of `(g, f)` parameters.
pub fn pretrain_step_objective(
    tape: &mut Tape,
    encoders: &EncoderPair,
    pool: &[LabeledExample],
    batch: &PairedBatch,
    mask: &PositiveMask,
    config: &PhaseConfig,
) -> Result<(losses::Objective, Vec<Var>), TrainError> {
    let n = batch.half();
    let g = encoders.image.bind(tape, true);
    let f = encoders.text.bind(tape, true);
    let x = tape.constant(image_batch(batch.examples(pool)));
    let caps = captions(batch, pool);
    let refs: Vec<&TextInput> = caps.iter().collect();
    let v = g.forward(tape, x)?;
    let v = tape.row_l2_normalize(v)?;
    let e = f.forward(tape, &refs)?;
    let e = tape.row_l2_normalize(e)?;

    let tau0 = config.weights.origin_tau;
    let (ea, va) = (tape.slice_rows(e, 0, n)?, tape.slice_rows(v, 0, n)?);
    let (eb, vb) = (tape.slice_rows(e, n, 2 * n)?, tape.slice_rows(v, n, 2 * n)?);
    let oa = losses::origin_matching_loss(tape, ea, va, tau0)?;
    let ob = losses::origin_matching_loss(tape, eb, vb, tau0)?;
    let origin = tape.add(oa, ob)?;

    let t = &config.toggles;
    let tau = config.weights.tau;
    let active = config.weights.lambda1 > 0.0;
    let mut sup = losses::SupTerms::default();
    if active && t.use_sup_img {
        sup.img = Some(losses::sup_img(tape, v, mask, tau)?);
    }
    if active && t.use_sup_txt {
        sup.txt = Some(losses::sup_txt(tape, e, mask, tau)?);
    }
    if active && t.use_sup_i2t {
        sup.i2t = Some(losses::sup_i2t(tape, e, v, mask, tau, t.cross_modal_include_self)?);
    }
    let objective = losses::pretrain_objective(tape, origin, &sup, &config.weights)?;
    let params = g.param_vars().into_iter().chain(f.param_vars()).collect();
    Ok((objective, params))
}

/// Trains `g` and `f` jointly on the train split.
pub fn run_pretrain(config: &PhaseConfig, dataset: &Dataset) -> Result<PretrainOutput, TrainError> {
    config.expect_phase(Phase::Pretrain)?;
    check_mode(config, dataset)?;
    let pool = dataset.train();
    let index = build_label_index(&pool)?;
    let mut encoders = EncoderPair::new(config.seed);
    let mut opt = Adam::new(config.encoder_lr, 0.5, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainingTrace::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut fallback = 0;
        for _ in 0..config.steps_per_epoch(pool.len()) {
            let batch = sample_paired_batch(&pool, &index, config.batch, rng.random())?;
            fallback += batch.fallback_count();
            let mask = positive_mask(&batch, config.label_mode)?;
            let mut tape = Tape::new();
            let (objective, params) = pretrain_step_objective(&mut tape, &encoders, &pool, &batch, &mask, config)?;
            trace.push(step, epoch, "pretrain", objective.report)?;
            tape.backward(objective.total)?;
            let g = grads(&tape, &params);
            let mut targets = encoders.image.net.params_mut();
            targets.extend(encoders.text.params_mut());
            opt.step(targets, &g);
            step += 1;
        }
        trace.close_epoch(epoch, fallback, started);
    }
    Ok(PretrainOutput { encoders, trace })
}

/// Inputs of one GAN step, fixed before either update.
#[derive(Debug, Clone, PartialEq)]
pub struct GanInputs {
    /// `N`.
    pub half: usize,
    /// Real images, `2N × pixels`.
    pub images: Matrix,
    /// Normalized caption embeddings `ẽ`, `2N × d`.
    pub text: Matrix,
    /// Noise rows `z` then `z'`.
    pub noise: Matrix,
    pub mask: PositiveMask,
    pub labels: Vec<LabelSet>,
}

impl GanInputs {
    pub fn new(
        encoders: &EncoderPair,
        pool: &[LabeledExample],
        batch: &PairedBatch,
        noise: Matrix,
        mode: LabelMode,
    ) -> Result<Self, TrainError> {
        let caps = captions(batch, pool);
        let refs: Vec<&TextInput> = caps.iter().collect();
        let text = encoders.text.encode(&refs)?.normalize_rows()?;
        if noise.rows() != batch.len() {
            return Err(TrainError::Config(format!(
                "{} noise rows for a batch of {}",
                noise.rows(),
                batch.len()
            )));
        }
        Ok(Self {
            half: batch.half(),
            images: image_batch(batch.examples(pool)),
            text,
            noise,
            mask: positive_mask(batch, mode)?,
            labels: batch.labels().to_vec(),
        })
    }

    /// Exchanges the two branches.
    pub fn swapped(&self) -> Self {
        let n = self.half;
        let perm: Vec<usize> = (n..2 * n).chain(0..n).collect();
        Self {
            half: n,
            images: self.images.select_rows(&perm),
            text: self.text.select_rows(&perm),
            noise: self.noise.select_rows(&perm),
            mask: self.mask.permuted(&perm),
            labels: perm.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Caption embeddings rolled by one within each branch.
    pub fn mismatched_text(&self) -> Matrix {
        let n = self.half;
        let perm: Vec<usize> = (0..2 * n).map(|i| (i / n) * n + (i % n + 1) % n).collect();
        self.text.select_rows(&perm)
    }
}

fn branch_split(tape: &mut Tape, v: Var, n: usize) -> Result<(Var, Var), TensorError> {
    Ok((tape.slice_rows(v, 0, n)?, tape.slice_rows(v, n, 2 * n)?))
}

/// Discriminator objective; the generator is recorded as a constant.
pub fn discriminator_step_objective(
    tape: &mut Tape,
    gan: &GanPair,
    inputs: &GanInputs,
) -> Result<(losses::Objective, Vec<Var>), TrainError> {
    let n = inputs.half;
    let fake = gan.generator.generate(&inputs.noise, &inputs.text)?;
    let d = gan.discriminator.bind(tape, true);
    let x = tape.constant(inputs.images.clone());
    let fake = tape.constant(fake);
    let e = tape.constant(inputs.text.clone());
    let mis = tape.constant(inputs.mismatched_text());
    let real_s = d.forward(tape, x, e)?;
    let fake_s = d.forward(tape, fake, e)?;
    let mis_s = d.forward(tape, x, mis)?;
    let (ra, rb) = branch_split(tape, real_s, n)?;
    let (fa, fb) = branch_split(tape, fake_s, n)?;
    let (ma, mb) = branch_split(tape, mis_s, n)?;
    let la = losses::hinge_d_loss(tape, ra, fa, ma)?;
    let lb = losses::hinge_d_loss(tape, rb, fb, mb)?;
    Ok((losses::discriminator_objective(tape, la, lb)?, d.param_vars()))
}

/// Generator objective; `D` and `g` are recorded as constants.
pub fn generator_step_objective(
    tape: &mut Tape,
    gan: &GanPair,
    encoders: &EncoderPair,
    aux_head: Option<&MlpNetwork>,
    inputs: &GanInputs,
    config: &PhaseConfig,
) -> Result<(losses::Objective, Vec<Var>), TrainError> {
    let n = inputs.half;
    let g = gan.generator.bind(tape, true);
    let d = gan.discriminator.bind(tape, false);
    let z = tape.constant(inputs.noise.clone());
    let e = tape.constant(inputs.text.clone());
    let fake = g.forward(tape, z, e)?;
    let scores = d.forward(tape, fake, e)?;
    let (sa, sb) = branch_split(tape, scores, n)?;
    let ga = losses::hinge_g_adv(tape, sa)?;
    let gb = losses::hinge_g_adv(tape, sb)?;

    let t = &config.toggles;
    let mut extras = GanExtras::default();
    let needs_embedding = config.weights.lambda2 > 0.0 && (t.aux_ce_baseline || t.use_sup_img || t.use_sup_i2t);
    if needs_embedding {
        let enc = encoders.image.bind(tape, false);
        let v = enc.forward(tape, fake)?;
        let v = tape.row_l2_normalize(v)?;
        if t.aux_ce_baseline {
            let head = aux_head.ok_or_else(|| TrainError::Config("cross-entropy baseline without a head".into()))?;
            let head = head.bind(tape, false);
            let logits = head.forward(tape, v)?;
            extras.aux_ce = Some(losses::aux_cross_entropy(tape, logits, &inputs.labels)?);
        } else {
            let tau = config.weights.tau;
            if t.use_sup_img {
                extras.sup_img = Some(losses::sup_img(tape, v, &inputs.mask, tau)?);
            }
            if t.use_sup_i2t {
                extras.sup_i2t = Some(losses::sup_i2t(tape, e, v, &inputs.mask, tau, t.cross_modal_include_self)?);
            }
        }
    }
    let objective = losses::generator_objective(tape, ga, gb, &extras, &config.weights)?;
    Ok((objective, g.param_vars()))
}

/// Linear classifier over frozen normalized image embeddings, trained on
/// real train images. Used only by the cross-entropy baseline.
pub fn fit_aux_head(encoders: &EncoderPair, pool: &[LabeledExample], classes: usize, seed: u64) -> Result<MlpNetwork, TrainError> {
    let mut targets = Vec::with_capacity(pool.len());
    for (row, ex) in pool.iter().enumerate() {
        if ex.labels.len() != 1 {
            return Err(LossError::ModeMismatch {
                row,
                count: ex.labels.len(),
            }
            .into());
        }
        targets.push(ex.labels.as_slice()[0] as usize);
    }
    let v = encoders.image.encode(&image_batch(pool))?.normalize_rows()?;
    let mut head = MlpNetwork::new(
        &[EMBED_DIM, classes],
        &[Activation::Identity],
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA0C3),
    );
    let mut opt = Adam::new(1e-2, 0.9, 0.999);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape, true);
        let x = tape.constant(v.clone());
        let logits = bound.forward(&mut tape, x)?;
        let loss = losses::cross_entropy(&mut tape, logits, &targets)?;
        tape.backward(loss)?;
        let g = grads(&tape, &bound.param_vars());
        opt.step(head.params_mut(), &g);
    }
    Ok(head)
}

pub struct GanOutput {
    pub gan: GanPair,
    pub trace: TrainingTrace,
}

/// Trains `G` and `D` with 1:1 alternating updates against frozen
/// encoders.
pub fn run_gan(config: &PhaseConfig, dataset: &Dataset, encoders: &EncoderPair) -> Result<GanOutput, TrainError> {
    config.expect_phase(Phase::Gan)?;
    check_mode(config, dataset)?;
    let frozen = encoders.snapshot();
    let pool = dataset.train();
    let index = build_label_index(&pool)?;
    let aux_head = if config.toggles.aux_ce_baseline && config.weights.lambda2 > 0.0 {
        Some(fit_aux_head(encoders, &pool, dataset.manifest.label_names.len(), config.seed)?)
    } else {
        None
    };
    let mut gan = GanPair::new(config.seed);
    let mut opt_d = Adam::new(config.gan_lr, 0.5, 0.999);
    let mut opt_g = Adam::new(config.gan_lr, 0.5, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainingTrace::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut fallback = 0;
        for _ in 0..config.steps_per_epoch(pool.len()) {
            let batch = sample_paired_batch(&pool, &index, config.batch, rng.random())?;
            fallback += batch.fallback_count();
            let noise = if config.toggles.share_noise {
                let z = sample_noise(batch.half(), &mut rng);
                Matrix::concat_rows(&[&z, &z])?
            } else {
                sample_noise(batch.len(), &mut rng)
            };
            let inputs = GanInputs::new(encoders, &pool, &batch, noise, config.label_mode)?;

            let mut tape = Tape::new();
            let (d_obj, d_params) = discriminator_step_objective(&mut tape, &gan, &inputs)?;
            trace.push(step, epoch, "d", d_obj.report)?;
            tape.backward(d_obj.total)?;
            let g = grads(&tape, &d_params);
            opt_d.step(gan.discriminator.net.params_mut(), &g);

            let mut tape = Tape::new();
            let (g_obj, g_params) =
                generator_step_objective(&mut tape, &gan, encoders, aux_head.as_ref(), &inputs, config)?;
            trace.push(step, epoch, "g", g_obj.report)?;
            tape.backward(g_obj.total)?;
            let g = grads(&tape, &g_params);
            opt_g.step(gan.generator.net.params_mut(), &g);
            step += 1;
        }
        trace.close_epoch(epoch, fallback, started);
    }
    if encoders.snapshot() != frozen {
        return Err(TrainError::EncoderModified);
    }
    Ok(GanOutput { gan, trace })
}

/// Present components of a pre-training report are exactly these.
pub const PRETRAIN_COMPONENTS: [Component; 4] =
    [Component::Origin, Component::SupImg, Component::SupTxt, Component::SupI2t];
/// Present components of a generator report are exactly these.
pub const GENERATOR_COMPONENTS: [Component; 4] =
    [Component::AdvG, Component::SupImg, Component::SupI2t, Component::AuxCe];

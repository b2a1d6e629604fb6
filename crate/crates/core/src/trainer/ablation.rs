use serde::{Deserialize, Serialize};

use super::{run_gan, run_pretrain, PhaseConfig, Toggles, TrainError};
use crate::data::Dataset;
use crate::evaluation::{Evaluator, GenerationScores};
use crate::models::EncoderPair;

/// The five ablation configurations, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    /// Matching-loss-only encoders, no contrastive terms on fakes.
    Baseline,
    /// Contrastively pre-trained encoders only.
    Pretrained,
    PretrainedSupImg,
    PretrainedSupI2t,
    /// Pre-training plus both terms on fakes.
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Baseline,
        AblationRow::Pretrained,
        AblationRow::PretrainedSupImg,
        AblationRow::PretrainedSupI2t,
        AblationRow::Full,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    /// `(pre, sup_img, sup_i2t)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            AblationRow::Baseline => (false, false, false),
            AblationRow::Pretrained => (true, false, false),
            AblationRow::PretrainedSupImg => (true, true, false),
            AblationRow::PretrainedSupI2t => (true, false, true),
            AblationRow::Full => (true, true, true),
        }
    }

    /// `base` with this row's three switches applied.
    pub fn toggles(self, base: Toggles) -> Toggles {
        let (pre, img, i2t) = self.switches();
        Toggles {
            use_pretrained_encoders: pre,
            use_sup_img: img,
            use_sup_i2t: i2t,
            aux_ce_baseline: false,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Pre-training settings of the contrastive encoders; the baseline
    /// encoders use the same settings with `λ1 = 0`.
    pub pretrain: PhaseConfig,
    pub gan: PhaseConfig,
    pub eval_samples: usize,
    /// Run the rows on separate threads.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub toggles: Toggles,
    pub scores: GenerationScores,
}

/// Encoders for rows without and with contrastive pre-training.
pub fn pretrain_encoder_pair(config: &AblationConfig, dataset: &Dataset) -> Result<(EncoderPair, EncoderPair), TrainError> {
    let mut plain = config.pretrain.clone();
    plain.weights.lambda1 = 0.0;
    let baseline = run_pretrain(&plain, dataset)?.encoders;
    let scl = run_pretrain(&config.pretrain, dataset)?.encoders;
    Ok((baseline, scl))
}

fn run_row(
    row: AblationRow,
    config: &AblationConfig,
    dataset: &Dataset,
    evaluator: &Evaluator,
    encoders: (&EncoderPair, &EncoderPair),
) -> Result<AblationResult, TrainError> {
    let mut gan = config.gan.clone();
    gan.toggles = row.toggles(gan.toggles);
    let enc = if gan.toggles.use_pretrained_encoders {
        encoders.1
    } else {
        encoders.0
    };
    let out = run_gan(&gan, dataset, enc)?;
    let scores = evaluator.evaluate_generator(&out.gan, enc, &dataset.test(), config.eval_samples, gan.seed)?;
    Ok(AblationResult {
        row,
        toggles: gan.toggles,
        scores,
    })
}

/// Runs `rows` against already pre-trained `(baseline, contrastive)`
/// encoders.
pub fn run_ablation_rows(
    rows: &[AblationRow],
    config: &AblationConfig,
    dataset: &Dataset,
    evaluator: &Evaluator,
    encoders: (&EncoderPair, &EncoderPair),
) -> Result<Vec<AblationResult>, TrainError> {
    if config.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = rows
                .iter()
                .map(|&row| s.spawn(move || run_row(row, config, dataset, evaluator, encoders)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    } else {
        rows.iter()
            .map(|&row| run_row(row, config, dataset, evaluator, encoders))
            .collect()
    }
}

/// Pre-trains both encoder variants, then runs all five rows.
pub fn run_ablation_suite(
    config: &AblationConfig,
    dataset: &Dataset,
    evaluator: &Evaluator,
) -> Result<Vec<AblationResult>, TrainError> {
    let (baseline, scl) = pretrain_encoder_pair(config, dataset)?;
    run_ablation_rows(&AblationRow::ALL, config, dataset, evaluator, (&baseline, &scl))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda2: f64,
    pub scores: GenerationScores,
}

/// One GAN run per `λ2` with identical seeds and encoders.
pub fn run_lambda_sweep(
    gan: &PhaseConfig,
    dataset: &Dataset,
    encoders: &EncoderPair,
    evaluator: &Evaluator,
    lambdas: &[f64],
    eval_samples: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    lambdas
        .iter()
        .map(|&lambda2| {
            let mut cfg = gan.clone();
            cfg.weights.lambda2 = lambda2;
            let out = run_gan(&cfg, dataset, encoders)?;
            let scores = evaluator.evaluate_generator(&out.gan, encoders, &dataset.test(), eval_samples, cfg.seed)?;
            Ok(SweepRow { lambda2, scores })
        })
        .collect()
}

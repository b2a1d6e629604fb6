//! Loss family: supervised contrastive loss and its image/text
//! compositions, the symmetric image-text matching ("origin") loss, hinge
//! GAN losses, the two phase objectives, and the cross-entropy
//! auxiliary-classifier baseline.
//!
//! Every loss is recorded on a [`Tape`], so the same call yields the value
//! and, after [`Tape::backward`], the gradients of all inputs.
//!
//! Contrastive terms are summed over anchors, not averaged: a batch of
//! `2N` anchors contributes `2N` per-anchor losses. Weights `λ1`, `λ2`
//! therefore scale with batch size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabelSet;
use crate::sampling::PositiveMask;
use crate::tensor::{Matrix, Tape, TensorError, Var};

/// Rows must have unit norm within this tolerance before entering a
/// contrastive loss.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{which} row {row} has norm {norm}, expected unit rows")]
    NotNormalized {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("positive mask marks an anchor as its own positive")]
    MaskDiagonal,
    #[error("positive mask is {mask}x{mask} but the batch has {rows} rows")]
    MaskSize { mask: usize, rows: usize },
    #[error("anchor batch has {anchors} rows but reference batch has {references}")]
    RowMismatch { anchors: usize, references: usize },
    #[error("embedding width mismatch between modalities: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("cross-entropy needs single-label data; row {row} has {count} labels")]
    ModeMismatch { row: usize, count: usize },
    #[error("label {label} outside the classifier's {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in loss component `{component}`")]
    NonFinite { component: String },
}

/// Temperatures and phase weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Temperature of the supervised contrastive terms.
    pub tau: f64,
    /// Temperature of the image-text matching loss.
    pub origin_tau: f64,
    /// Weight of the contrastive terms during encoder pre-training.
    pub lambda1: f64,
    /// Weight of the contrastive terms on generated images.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 0.5,
            origin_tau: 0.1,
            lambda1: 0.5,
            lambda2: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidWeights(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.origin_tau > 0.0 && self.origin_tau.is_finite()) {
            return Err(LossError::InvalidWeights(format!(
                "origin_tau must be positive, got {}",
                self.origin_tau
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeights(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Names of the values a [`LossReport`] may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Origin,
    SupImg,
    SupTxt,
    SupI2t,
    AdvG,
    AdvD,
    AuxCe,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Origin,
        Component::SupImg,
        Component::SupTxt,
        Component::SupI2t,
        Component::AdvG,
        Component::AdvD,
        Component::AuxCe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Origin => "origin",
            Component::SupImg => "sup_img",
            Component::SupTxt => "sup_txt",
            Component::SupI2t => "sup_i2t",
            Component::AdvG => "adv_g",
            Component::AdvD => "adv_d",
            Component::AuxCe => "aux_ce",
        }
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<Component, f64>,
    pub skipped_anchor_count: usize,
}

impl LossReport {
    pub fn get(&self, c: Component) -> Option<f64> {
        self.components.get(&c).copied()
    }

    /// Fails on the first non-finite component (or total), naming it.
    pub fn check_finite(&self) -> Result<(), LossError> {
        for (c, v) in &self.components {
            if !v.is_finite() {
                return Err(LossError::NonFinite {
                    component: c.as_str().to_string(),
                });
            }
        }
        if !self.total.is_finite() {
            return Err(LossError::NonFinite {
                component: "total".into(),
            });
        }
        Ok(())
    }
}

/// A tape scalar together with its report.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub report: LossReport,
}

/// Output of a contrastive term.
#[derive(Debug, Clone, Copy)]
pub struct SupconTerm {
    pub loss: Var,
    /// Anchors whose positive set was empty and were left out.
    pub skipped: usize,
}

fn check_unit_rows(m: &Matrix, which: &'static str) -> Result<(), LossError> {
    for (row, norm) in m.row_norms().into_iter().enumerate() {
        if (norm - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(LossError::NotNormalized { which, row, norm });
        }
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidWeights(format!("temperature must be positive, got {tau}")))
    }
}

/// Supervised contrastive loss summed over anchors.
///
/// For anchor row `i` of `anchors` with positive set `P(i)` (row `i` of
/// `mask`), the per-anchor loss is
/// `-(1/|P(i)|) Σ_{p∈P(i)} log( exp(s_ip/τ) / Σ_{j≠i} exp(s_ij/τ) )`
/// where `s_ij` is the dot product of anchor `i` with reference `j`. Both
/// inputs must already be row-normalized, making `s` the cosine
/// similarity. Anchors with an empty `P(i)` contribute nothing and are
/// counted in [`SupconTerm::skipped`].
pub fn supcon(
    tape: &mut Tape,
    anchors: Var,
    references: Var,
    mask: &PositiveMask,
    tau: f64,
) -> Result<SupconTerm, LossError> {
    supcon_with(tape, anchors, references, mask, tau, false)
}

/// [`supcon`] with the option of keeping index `i` itself: when
/// `include_self` is set, reference `i` joins both the positives and the
/// denominator of anchor `i`. Only meaningful across modalities, where
/// reference `i` is the anchor's own paired counterpart.
pub fn supcon_with(
    tape: &mut Tape,
    anchors: Var,
    references: Var,
    mask: &PositiveMask,
    tau: f64,
    include_self: bool,
) -> Result<SupconTerm, LossError> {
    check_tau(tau)?;
    let (a, r) = (tape.value(anchors), tape.value(references));
    if a.rows() != r.rows() {
        return Err(LossError::RowMismatch {
            anchors: a.rows(),
            references: r.rows(),
        });
    }
    if a.cols() != r.cols() {
        return Err(LossError::WidthMismatch {
            left: a.cols(),
            right: r.cols(),
        });
    }
    if a.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if mask.size() != a.rows() {
        return Err(LossError::MaskSize {
            mask: mask.size(),
            rows: a.rows(),
        });
    }
    if mask.has_diagonal() {
        return Err(LossError::MaskDiagonal);
    }
    check_unit_rows(a, "anchor")?;
    check_unit_rows(r, "reference")?;

    let mask = if include_self { mask.with_diagonal() } else { mask.clone() };
    let n = mask.size();
    let mut anchor_weight = Matrix::zeros(n, 1);
    let mut positive_weight = Matrix::zeros(n, n);
    let mut skipped = 0;
    for i in 0..n {
        let count = mask.row_count(i);
        if count == 0 {
            skipped += 1;
            continue;
        }
        anchor_weight.set(i, 0, 1.0);
        for p in 0..n {
            if mask.get(i, p) {
                positive_weight.set(i, p, 1.0 / count as f64);
            }
        }
    }

    let sim = tape.matmul_t(anchors, references)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let lse = tape.log_sum_exp_rows(logits, !include_self)?;
    let lse = tape.mul_const(lse, anchor_weight)?;
    let denominator = tape.sum(lse);
    let positives = tape.mul_const(logits, positive_weight)?;
    let numerator = tape.sum(positives);
    let loss = tape.sub(denominator, numerator)?;
    Ok(SupconTerm { loss, skipped })
}

/// Image-image term: every image embedding against all image embeddings.
pub fn sup_img(tape: &mut Tape, images: Var, mask: &PositiveMask, tau: f64) -> Result<SupconTerm, LossError> {
    supcon(tape, images, images, mask, tau)
}

/// Text-text term.
pub fn sup_txt(tape: &mut Tape, texts: Var, mask: &PositiveMask, tau: f64) -> Result<SupconTerm, LossError> {
    supcon(tape, texts, texts, mask, tau)
}

/// Cross-modal term: text anchors against image references plus image
/// anchors against text references.
pub fn sup_i2t(
    tape: &mut Tape,
    texts: Var,
    images: Var,
    mask: &PositiveMask,
    tau: f64,
    include_self: bool,
) -> Result<SupconTerm, LossError> {
    let (tw, iw) = (tape.value(texts).cols(), tape.value(images).cols());
    if tw != iw {
        return Err(LossError::WidthMismatch { left: tw, right: iw });
    }
    let t2i = supcon_with(tape, texts, images, mask, tau, include_self)?;
    let i2t = supcon_with(tape, images, texts, mask, tau, include_self)?;
    Ok(SupconTerm {
        loss: tape.add(t2i.loss, i2t.loss)?,
        skipped: t2i.skipped + i2t.skipped,
    })
}

/// Symmetric image-text matching loss over index-aligned pairs: the mean
/// cross-entropy of `softmax(sim/τ)` against the diagonal, taken over
/// text→image rows and image→text rows and averaged.
pub fn origin_matching_loss(tape: &mut Tape, texts: Var, images: Var, tau: f64) -> Result<Var, LossError> {
    check_tau(tau)?;
    let (e, v) = (tape.value(texts), tape.value(images));
    if e.rows() != v.rows() {
        return Err(LossError::RowMismatch {
            anchors: e.rows(),
            references: v.rows(),
        });
    }
    if e.cols() != v.cols() {
        return Err(LossError::WidthMismatch {
            left: e.cols(),
            right: v.cols(),
        });
    }
    let n = e.rows();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_unit_rows(e, "text")?;
    check_unit_rows(v, "image")?;
    let sim = tape.matmul_t(texts, images)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let rows = tape.log_sum_exp_rows(logits, false)?;
    let rows = tape.sum(rows);
    let transposed = tape.transpose(logits);
    let cols = tape.log_sum_exp_rows(transposed, false)?;
    let cols = tape.sum(cols);
    let diag = tape.mul_const(logits, Matrix::identity(n))?;
    let diag = tape.sum(diag);
    let both = tape.add(rows, cols)?;
    let both = tape.scale(both, 0.5 / n as f64);
    let diag = tape.scale(diag, 1.0 / n as f64);
    Ok(tape.sub(both, diag)?)
}

fn hinge_mean(tape: &mut Tape, scores: Var, sign: f64) -> Result<Var, LossError> {
    if tape.value(scores).is_empty() {
        return Err(LossError::EmptyBatch);
    }
    // relu(1 + sign·score)
    let s = tape.scale(scores, sign);
    let s = tape.add_scalar(s, 1.0);
    let s = tape.relu(s);
    Ok(tape.mean(s))
}

/// `mean[max(0, 1 − D(x,e))] + ½ mean[max(0, 1 + D(G(z,e),e))] + ½ mean[max(0, 1 + D(x,ê))]`
/// where `ê` is a mismatched caption embedding.
pub fn hinge_d_loss(tape: &mut Tape, real: Var, fake: Var, mismatched: Var) -> Result<Var, LossError> {
    let r = hinge_mean(tape, real, -1.0)?;
    let f = hinge_mean(tape, fake, 1.0)?;
    let m = hinge_mean(tape, mismatched, 1.0)?;
    let fm = tape.add(f, m)?;
    let fm = tape.scale(fm, 0.5);
    Ok(tape.add(r, fm)?)
}

/// `−mean[D(G(z,e), e)]`.
pub fn hinge_g_adv(tape: &mut Tape, fake: Var) -> Result<Var, LossError> {
    if tape.value(fake).is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let m = tape.mean(fake);
    Ok(tape.scale(m, -1.0))
}

/// Mean negative log-softmax of the target class per row.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var, LossError> {
    let (rows, classes) = tape.value(logits).shape();
    if rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    if targets.len() != rows {
        return Err(LossError::RowMismatch {
            anchors: rows,
            references: targets.len(),
        });
    }
    let mut onehot = Matrix::zeros(rows, classes);
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(LossError::LabelOutOfRange { label: t, classes });
        }
        onehot.set(r, t, 1.0);
    }
    let lse = tape.log_sum_exp_rows(logits, false)?;
    let lse = tape.sum(lse);
    let picked = tape.mul_const(logits, onehot)?;
    let picked = tape.sum(picked);
    let diff = tape.sub(lse, picked)?;
    Ok(tape.scale(diff, 1.0 / rows as f64))
}

/// Cross-entropy against single-label sets; multi-label rows are rejected.
pub fn aux_cross_entropy(tape: &mut Tape, logits: Var, labels: &[LabelSet]) -> Result<Var, LossError> {
    let mut targets = Vec::with_capacity(labels.len());
    for (row, l) in labels.iter().enumerate() {
        if l.len() != 1 {
            return Err(LossError::ModeMismatch { row, count: l.len() });
        }
        targets.push(l.as_slice()[0] as usize);
    }
    cross_entropy(tape, logits, &targets)
}

/// Contrastive terms entering the pre-training objective; absent terms are
/// switched off.
#[derive(Debug, Clone, Copy, Default)]
pub struct SupTerms {
    pub img: Option<SupconTerm>,
    pub txt: Option<SupconTerm>,
    pub i2t: Option<SupconTerm>,
}

/// `origin + λ1 (sup_img + sup_txt + sup_i2t)` over the present terms.
/// Absent terms report zero.
pub fn pretrain_objective(
    tape: &mut Tape,
    origin: Var,
    sup: &SupTerms,
    weights: &LossWeights,
) -> Result<Objective, LossError> {
    let mut report = LossReport::default();
    report
        .components
        .insert(Component::Origin, tape.item(origin)?);
    let mut sup_sum: Option<Var> = None;
    for (c, term) in [
        (Component::SupImg, sup.img),
        (Component::SupTxt, sup.txt),
        (Component::SupI2t, sup.i2t),
    ] {
        report.components.insert(c, 0.0);
        if let Some(t) = term {
            report.components.insert(c, tape.item(t.loss)?);
            report.skipped_anchor_count += t.skipped;
            sup_sum = Some(match sup_sum {
                Some(acc) => tape.add(acc, t.loss)?,
                None => t.loss,
            });
        }
    }
    let total = match sup_sum {
        Some(s) => {
            let weighted = tape.scale(s, weights.lambda1);
            tape.add(origin, weighted)?
        }
        None => origin,
    };
    report.total = tape.item(total)?;
    Ok(Objective { total, report })
}

/// Per-branch adversarial terms.
#[derive(Debug, Clone, Copy)]
pub struct BranchTerms {
    pub d_loss: Var,
    pub g_adv: Var,
}

/// Generator-side extras computed on generated-image embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct GanExtras {
    pub sup_img: Option<SupconTerm>,
    pub sup_i2t: Option<SupconTerm>,
    /// Cross-entropy baseline term, weighted like the contrastive terms.
    pub aux_ce: Option<Var>,
}

/// `L_D^o + L_D^o'`.
pub fn discriminator_objective(tape: &mut Tape, branch_a: Var, branch_b: Var) -> Result<Objective, LossError> {
    let total = tape.add(branch_a, branch_b)?;
    let mut report = LossReport::default();
    report.total = tape.item(total)?;
    report.components.insert(Component::AdvD, report.total);
    Ok(Objective { total, report })
}

/// `L_G^o + L_G^o' + λ2 (sup_img + sup_i2t)`, or `λ2 · aux_ce` in place of
/// the contrastive terms for the baseline. Absent terms report zero.
pub fn generator_objective(
    tape: &mut Tape,
    branch_a: Var,
    branch_b: Var,
    extras: &GanExtras,
    weights: &LossWeights,
) -> Result<Objective, LossError> {
    let adv = tape.add(branch_a, branch_b)?;
    let mut report = LossReport::default();
    report.components.insert(Component::AdvG, tape.item(adv)?);
    let terms = [
        (Component::SupImg, extras.sup_img.map(|t| (t.loss, t.skipped))),
        (Component::SupI2t, extras.sup_i2t.map(|t| (t.loss, t.skipped))),
        (Component::AuxCe, extras.aux_ce.map(|v| (v, 0))),
    ];
    let mut extra_sum: Option<Var> = None;
    for (c, term) in terms {
        let Some((v, skipped)) = term else {
            report.components.insert(c, 0.0);
            continue;
        };
        report.components.insert(c, tape.item(v)?);
        report.skipped_anchor_count += skipped;
        extra_sum = Some(match extra_sum {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
    }
    let total = match extra_sum {
        Some(s) => {
            let weighted = tape.scale(s, weights.lambda2);
            tape.add(adv, weighted)?
        }
        None => adv,
    };
    report.total = tape.item(total)?;
    Ok(Objective { total, report })
}

/// Both GAN-phase objectives on one tape.
pub fn gan_objectives(
    tape: &mut Tape,
    branch_a: BranchTerms,
    branch_b: BranchTerms,
    extras: &GanExtras,
    weights: &LossWeights,
) -> Result<(Objective, Objective), LossError> {
    let d = discriminator_objective(tape, branch_a.d_loss, branch_b.d_loss)?;
    let g = generator_objective(tape, branch_a.g_adv, branch_b.g_adv, extras, weights)?;
    Ok((d, g))
}

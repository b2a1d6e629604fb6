//! Seeded invariant cases. Each returns the largest deviation observed so
//! callers can apply their own tolerance.

use rand::seq::SliceRandom;
use rand::Rng;
use scl_core::data::generate_single_label;
use scl_core::losses;
use scl_core::metrics::{self, frechet_distance, gaussian_stats};
use scl_core::models::{sample_noise, EncoderPair, GanPair};
use scl_core::sampling::{build_label_index, mask_from_labels, positive_mask, sample_paired_batch, LabelMode};
use scl_core::tensor::{Matrix, Tape};
use scl_core::trainer::{discriminator_step_objective, generator_step_objective, GanInputs, PhaseConfig};

use super::{lib, random_labels, rng, uniform, unit_rows};

/// Permuting batch rows together with the mask; worst change over supcon,
/// sup_i2t, origin and both hinge losses.
pub fn permutation_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let two_n = r.random_range(2..=5) * 2;
    let d = r.random_range(2..9);
    let multi = r.random_bool(0.5);
    let labels = random_labels(&mut r, two_n, 3, multi);
    let mode = if multi { LabelMode::Multi } else { LabelMode::Single };
    let mask = mask_from_labels(&labels, mode).unwrap();
    let (e, v) = (unit_rows(&mut r, two_n, d), unit_rows(&mut r, two_n, d));
    let tau = r.random_range(0.1..1.0);
    let include_self = r.random_bool(0.5);
    let mut perm: Vec<usize> = (0..two_n).collect();
    perm.shuffle(&mut r);
    let (pe, pv, pm) = (e.select_rows(&perm), v.select_rows(&perm), mask.permuted(&perm));
    let scores: Vec<f64> = (0..3 * two_n).map(|_| r.random_range(-2.0..2.0)).collect();
    let (s1, s2, s3) = (&scores[..two_n], &scores[two_n..2 * two_n], &scores[2 * two_n..]);
    let p = |s: &[f64]| perm.iter().map(|&i| s[i]).collect::<Vec<f64>>();
    [
        (lib::supcon(&e, &v, &mask, tau, include_self).0 - lib::supcon(&pe, &pv, &pm, tau, include_self).0).abs(),
        (lib::sup_img(&v, &mask, tau) - lib::sup_img(&pv, &pm, tau)).abs(),
        (lib::sup_i2t(&e, &v, &mask, tau, include_self) - lib::sup_i2t(&pe, &pv, &pm, tau, include_self)).abs(),
        (lib::origin(&e, &v, tau) - lib::origin(&pe, &pv, tau)).abs(),
        (lib::hinge_d(s1, s2, s3) - lib::hinge_d(&p(s1), &p(s2), &p(s3))).abs(),
        (lib::hinge_g(s1) - lib::hinge_g(&p(s1))).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn supcon_from_raw(e: &Matrix, v: &Matrix, mask: &scl_core::sampling::PositiveMask, tau: f64) -> f64 {
    let mut t = Tape::new();
    let (ev, vv) = (t.leaf(e.clone()), t.leaf(v.clone()));
    let (en, vn) = (t.row_l2_normalize(ev).unwrap(), t.row_l2_normalize(vv).unwrap());
    let img = losses::sup_img(&mut t, vn, mask, tau).unwrap();
    let i2t = losses::sup_i2t(&mut t, en, vn, mask, tau, false).unwrap();
    let total = t.add(img.loss, i2t.loss).unwrap();
    t.item(total).unwrap()
}

/// Scaling raw embeddings by `α > 0` before normalization.
pub fn scale_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let two_n = r.random_range(2..=5) * 2;
    let d = r.random_range(2..9);
    let labels = random_labels(&mut r, two_n, 3, true);
    let mask = mask_from_labels(&labels, LabelMode::Multi).unwrap();
    let (e, v) = (uniform(&mut r, two_n, d, -2.0, 2.0), uniform(&mut r, two_n, d, -2.0, 2.0));
    let tau = r.random_range(0.1..1.0);
    let alpha = 10f64.powf(r.random_range(-3.0..3.0));
    (supcon_from_raw(&e, &v, &mask, tau) - supcon_from_raw(&e.scale(alpha), &v.scale(alpha), &mask, tau)).abs()
}

/// On singleton label sets the single- and multi-mode masks coincide and
/// every loss built from them is bitwise equal.
pub fn reduction_case(seed: u64) -> bool {
    let mut r = rng(seed);
    let two_n = r.random_range(2..=5) * 2;
    let d = r.random_range(2..9);
    let labels = random_labels(&mut r, two_n, 3, false);
    let single = mask_from_labels(&labels, LabelMode::Single).unwrap();
    let multi = mask_from_labels(&labels, LabelMode::Multi).unwrap();
    let (e, v) = (unit_rows(&mut r, two_n, d), unit_rows(&mut r, two_n, d));
    let tau = r.random_range(0.1..1.0);
    single == multi
        && lib::sup_img(&v, &single, tau).to_bits() == lib::sup_img(&v, &multi, tau).to_bits()
        && lib::sup_txt(&e, &single, tau).to_bits() == lib::sup_txt(&e, &multi, tau).to_bits()
        && lib::sup_i2t(&e, &v, &single, tau, false).to_bits() == lib::sup_i2t(&e, &v, &multi, tau, false).to_bits()
}

/// Exchanging the two branches of a GAN step; worst change of the D and G
/// totals with every generator term active.
pub fn branch_swap_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ds = generate_single_label(4, 3, seed).unwrap();
    let pool = ds.train();
    let index = build_label_index(&pool).unwrap();
    let batch = sample_paired_batch(&pool, &index, 4, seed).unwrap();
    let encoders = EncoderPair::new(seed);
    let mut gan = GanPair::new(seed);
    for p in gan.discriminator.net.params_mut() {
        *p = p.add(&uniform(&mut r, p.rows(), p.cols(), -0.05, 0.05)).unwrap();
    }
    let mut config = PhaseConfig::gan(seed);
    config.weights.lambda2 = r.random_range(0.1..1.0);
    config.toggles.cross_modal_include_self = r.random_bool(0.5);
    let noise = sample_noise(batch.len(), &mut r);
    let inputs = GanInputs::new(&encoders, &pool, &batch, noise, LabelMode::Single).unwrap();
    let swapped = inputs.swapped();
    let mask_direct = positive_mask(&batch.swapped(), LabelMode::Single).unwrap();
    assert_eq!(mask_direct, swapped.mask);
    let totals = |inp: &GanInputs| {
        let mut t = Tape::new();
        let (d, _) = discriminator_step_objective(&mut t, &gan, inp).unwrap();
        let mut t2 = Tape::new();
        let (g, _) = generator_step_objective(&mut t2, &gan, &encoders, None, inp, &config).unwrap();
        (d.report.total, g.report.total)
    };
    let (d0, g0) = totals(&inputs);
    let (d1, g1) = totals(&swapped);
    (d0 - d1).abs().max((g0 - g1).abs())
}

/// Random orthogonal matrix by Gram-Schmidt.
pub fn random_orthogonal(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

/// Fréchet distance before and after a shared rotation of both feature
/// sets.
pub fn rotation_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(1..7);
    let (ma, mb) = (r.random_range(d + 2..40), r.random_range(d + 2..40));
    let a = uniform(&mut r, ma, d, -2.0, 2.0);
    let b = uniform(&mut r, mb, d, -1.0, 3.0);
    let q = random_orthogonal(&mut r, d);
    let before = frechet_distance(&gaussian_stats(&a).unwrap(), &gaussian_stats(&b).unwrap()).unwrap();
    let after = frechet_distance(
        &gaussian_stats(&a.matmul(&q).unwrap()).unwrap(),
        &gaussian_stats(&b.matmul(&q).unwrap()).unwrap(),
    )
    .unwrap();
    (before - after).abs()
}

/// `(FD(a, a), |FD(a, b) − FD(b, a)|)`.
pub fn frechet_identity_and_symmetry(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let d = r.random_range(1..7);
    let a = gaussian_stats(&uniform(&mut r, 30, d, -2.0, 2.0)).unwrap();
    let b = gaussian_stats(&uniform(&mut r, 25, d, -1.0, 1.0)).unwrap();
    let self_distance = frechet_distance(&a, &a).unwrap();
    let asym = (frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs();
    (self_distance, asym)
}

/// IS of random simplex rows, with `K`.
pub fn inception_case(seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let k = r.random_range(2..10);
    let m = r.random_range(10..80);
    let sharp = r.random_range(0.5..20.0);
    let logits = uniform(&mut r, m, k, -sharp, sharp);
    let p = scl_core::models::softmax_rows(&logits);
    (metrics::inception_score(&p).unwrap().mean, k)
}

//! Brute-force reference implementations and random-input helpers shared by
//! the integration tests and the acceptance harness. Every oracle is a plain
//! nested loop over `f64` slices and never calls into the library's tape.

#![allow(dead_code)]

pub mod grad;
pub mod invariants;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scl_core::data::LabelSet;
use scl_core::losses::{self, LossWeights, SupTerms};
use scl_core::sampling::{LabelMode, PositiveMask};
use scl_core::tensor::{Matrix, Tape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Rows drawn from `[-1, 1]` and scaled to unit length.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let m = uniform(rng, rows, cols, -1.0, 1.0);
        if let Ok(n) = m.normalize_rows() {
            return n;
        }
    }
}

/// `n` label sets over `k` labels; singletons unless `multi`.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: u32, multi: bool) -> Vec<LabelSet> {
    (0..n)
        .map(|_| {
            if multi {
                let count = rng.random_range(1..=3);
                LabelSet::new((0..count).map(|_| rng.random_range(0..k))).unwrap()
            } else {
                LabelSet::single(rng.random_range(0..k))
            }
        })
        .collect()
}

pub fn oracle_mask(labels: &[LabelSet], mode: LabelMode) -> Vec<Vec<bool>> {
    let n = labels.len();
    let mut m = vec![vec![false; n]; n];
    for i in 0..n {
        for p in 0..n {
            if i == p {
                continue;
            }
            m[i][p] = match mode {
                LabelMode::Single => labels[i].as_slice() == labels[p].as_slice(),
                LabelMode::Multi => labels[i].as_slice().iter().any(|a| labels[p].as_slice().contains(a)),
            };
        }
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Summed supervised contrastive loss and the number of skipped anchors.
pub fn oracle_supcon(a: &Matrix, r: &Matrix, mask: &[Vec<bool>], tau: f64, include_self: bool) -> (f64, usize) {
    let n = a.rows();
    let mut total = 0.0;
    let mut skipped = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| mask[i][p] || (include_self && p == i)).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i || include_self {
                denom += (dot(a.row(i), r.row(j)) / tau).exp();
            }
        }
        let mut acc = 0.0;
        for &p in &positives {
            acc += ((dot(a.row(i), r.row(p)) / tau).exp() / denom).ln();
        }
        total += -acc / positives.len() as f64;
    }
    (total, skipped)
}

pub fn oracle_i2t(e: &Matrix, v: &Matrix, mask: &[Vec<bool>], tau: f64, include_self: bool) -> f64 {
    oracle_supcon(e, v, mask, tau, include_self).0 + oracle_supcon(v, e, mask, tau, include_self).0
}

pub fn oracle_origin(e: &Matrix, v: &Matrix, tau: f64) -> f64 {
    let n = e.rows();
    let mut t2i = 0.0;
    let mut i2t = 0.0;
    for i in 0..n {
        let (mut row_sum, mut col_sum) = (0.0, 0.0);
        for j in 0..n {
            row_sum += (dot(e.row(i), v.row(j)) / tau).exp();
            col_sum += (dot(v.row(i), e.row(j)) / tau).exp();
        }
        let diag = (dot(e.row(i), v.row(i)) / tau).exp();
        t2i -= (diag / row_sum).ln();
        i2t -= (diag / col_sum).ln();
    }
    (t2i / n as f64 + i2t / n as f64) / 2.0
}

pub fn oracle_hinge_d(real: &[f64], fake: &[f64], mis: &[f64]) -> f64 {
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    mean(real.iter().map(|s| (1.0 - s).max(0.0)).collect())
        + 0.5 * mean(fake.iter().map(|s| (1.0 + s).max(0.0)).collect())
        + 0.5 * mean(mis.iter().map(|s| (1.0 + s).max(0.0)).collect())
}

pub fn oracle_hinge_g(fake: &[f64]) -> f64 {
    -fake.iter().sum::<f64>() / fake.len() as f64
}

pub fn oracle_cross_entropy(logits: &Matrix, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let mut z = 0.0;
        for k in 0..logits.cols() {
            z += logits.get(i, k).exp();
        }
        total += -(logits.get(i, t).exp() / z).ln();
    }
    total / targets.len() as f64
}

pub fn oracle_lse(m: &Matrix, exclude_diagonal: bool) -> Vec<f64> {
    (0..m.rows())
        .map(|i| {
            let mut s = 0.0;
            for j in 0..m.cols() {
                if !(exclude_diagonal && i == j) {
                    s += m.get(i, j).exp();
                }
            }
            s.ln()
        })
        .collect()
}

/// Inception score over contiguous splits, population standard deviation.
pub fn oracle_inception(p: &Matrix, splits: usize) -> (f64, f64) {
    let m = p.rows();
    let mut scores = Vec::new();
    for s in 0..splits {
        let rows: Vec<usize> = (s * m / splits..(s + 1) * m / splits).collect();
        let mut kl_sum = 0.0;
        for &r in &rows {
            for k in 0..p.cols() {
                let mut q = 0.0;
                for &r2 in &rows {
                    q += p.get(r2, k);
                }
                q /= rows.len() as f64;
                let pv = p.get(r, k);
                if pv > 0.0 {
                    kl_sum += pv * (pv / q).ln();
                }
            }
        }
        scores.push((kl_sum / rows.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    (mean, var.sqrt())
}

/// Two-pass mean and unbiased covariance.
pub fn oracle_stats(x: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m, d) = x.shape();
    let mut mu = vec![0.0; d];
    for c in 0..d {
        for r in 0..m {
            mu[c] += x.get(r, c);
        }
        mu[c] /= m as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..d {
            for r in 0..m {
                cov[a][b] += (x.get(r, a) - mu[a]) * (x.get(r, b) - mu[b]);
            }
            cov[a][b] /= (m - 1) as f64;
        }
    }
    (mu, cov)
}

/// Mean cosine over same-label and different-label pairs `i < j`.
pub fn oracle_similarity(x: &Matrix, labels: &[LabelSet]) -> (f64, f64) {
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..x.rows() {
        for j in i + 1..x.rows() {
            let cos = dot(x.row(i), x.row(j)) / (dot(x.row(i), x.row(i)).sqrt() * dot(x.row(j), x.row(j)).sqrt());
            if labels[i] == labels[j] {
                w += cos;
                nw += 1.0;
            } else {
                b += cos;
                nb += 1.0;
            }
        }
    }
    (w / nw, b / nb)
}

pub fn to_mask(m: &[Vec<bool>]) -> PositiveMask {
    PositiveMask::from_fn(m.len(), |i, p| m[i][p])
}

pub fn column(values: &[f64]) -> Matrix {
    Matrix::new(values.len(), 1, values.to_vec()).unwrap()
}

/// Library values evaluated on a fresh tape.
pub mod lib {
    use super::*;

    pub fn supcon(a: &Matrix, r: &Matrix, mask: &PositiveMask, tau: f64, include_self: bool) -> (f64, usize) {
        let mut t = Tape::new();
        let (av, rv) = (t.leaf(a.clone()), t.leaf(r.clone()));
        let s = losses::supcon_with(&mut t, av, rv, mask, tau, include_self).unwrap();
        (t.item(s.loss).unwrap(), s.skipped)
    }

    pub fn sup_img(v: &Matrix, mask: &PositiveMask, tau: f64) -> f64 {
        let mut t = Tape::new();
        let vv = t.leaf(v.clone());
        let s = losses::sup_img(&mut t, vv, mask, tau).unwrap();
        t.item(s.loss).unwrap()
    }

    pub fn sup_txt(e: &Matrix, mask: &PositiveMask, tau: f64) -> f64 {
        let mut t = Tape::new();
        let ev = t.leaf(e.clone());
        let s = losses::sup_txt(&mut t, ev, mask, tau).unwrap();
        t.item(s.loss).unwrap()
    }

    pub fn sup_i2t(e: &Matrix, v: &Matrix, mask: &PositiveMask, tau: f64, include_self: bool) -> f64 {
        let mut t = Tape::new();
        let (ev, vv) = (t.leaf(e.clone()), t.leaf(v.clone()));
        let s = losses::sup_i2t(&mut t, ev, vv, mask, tau, include_self).unwrap();
        t.item(s.loss).unwrap()
    }

    pub fn origin(e: &Matrix, v: &Matrix, tau: f64) -> f64 {
        let mut t = Tape::new();
        let (ev, vv) = (t.leaf(e.clone()), t.leaf(v.clone()));
        let l = losses::origin_matching_loss(&mut t, ev, vv, tau).unwrap();
        t.item(l).unwrap()
    }

    pub fn hinge_d(real: &[f64], fake: &[f64], mis: &[f64]) -> f64 {
        let mut t = Tape::new();
        let (r, f, m) = (t.leaf(column(real)), t.leaf(column(fake)), t.leaf(column(mis)));
        let l = losses::hinge_d_loss(&mut t, r, f, m).unwrap();
        t.item(l).unwrap()
    }

    pub fn hinge_g(fake: &[f64]) -> f64 {
        let mut t = Tape::new();
        let f = t.leaf(column(fake));
        let l = losses::hinge_g_adv(&mut t, f).unwrap();
        t.item(l).unwrap()
    }

    pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let v = losses::cross_entropy(&mut t, l, targets).unwrap();
        t.item(v).unwrap()
    }

    pub fn aux_ce(logits: &Matrix, labels: &[LabelSet]) -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let v = losses::aux_cross_entropy(&mut t, l, labels).unwrap();
        t.item(v).unwrap()
    }

    /// Pre-training total of paired `(e, v)` embeddings with both branches
    /// stacked as `2N` rows.
    pub fn pretrain_total(e: &Matrix, v: &Matrix, mask: &PositiveMask, w: &LossWeights) -> f64 {
        let n = e.rows() / 2;
        let mut t = Tape::new();
        let (ev, vv) = (t.leaf(e.clone()), t.leaf(v.clone()));
        let (ea, eb) = (t.slice_rows(ev, 0, n).unwrap(), t.slice_rows(ev, n, 2 * n).unwrap());
        let (va, vb) = (t.slice_rows(vv, 0, n).unwrap(), t.slice_rows(vv, n, 2 * n).unwrap());
        let oa = losses::origin_matching_loss(&mut t, ea, va, w.origin_tau).unwrap();
        let ob = losses::origin_matching_loss(&mut t, eb, vb, w.origin_tau).unwrap();
        let origin = t.add(oa, ob).unwrap();
        let terms = SupTerms {
            img: Some(losses::sup_img(&mut t, vv, mask, w.tau).unwrap()),
            txt: Some(losses::sup_txt(&mut t, ev, mask, w.tau).unwrap()),
            i2t: Some(losses::sup_i2t(&mut t, ev, vv, mask, w.tau, false).unwrap()),
        };
        let obj = losses::pretrain_objective(&mut t, origin, &terms, w).unwrap();
        t.item(obj.total).unwrap()
    }
}

pub fn oracle_pretrain_total(e: &Matrix, v: &Matrix, mask: &[Vec<bool>], w: &LossWeights) -> f64 {
    let n = e.rows() / 2;
    let origin = oracle_origin(&e.slice_rows(0, n), &v.slice_rows(0, n), w.origin_tau)
        + oracle_origin(&e.slice_rows(n, 2 * n), &v.slice_rows(n, 2 * n), w.origin_tau);
    origin
        + w.lambda1
            * (oracle_supcon(v, v, mask, w.tau, false).0
                + oracle_supcon(e, e, mask, w.tau, false).0
                + oracle_i2t(e, v, mask, w.tau, false))
}

/// One randomized comparison of every loss against its oracle: `2N ∈ {4, 6,
/// 8}`, `d ∈ {2, 8}`, single- or multi-label masks. Returns
/// `(loss name, |library − oracle|)` pairs.
pub fn oracle_case(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let two_n = [4, 6, 8][r.random_range(0..3)];
    let d = [2, 8][r.random_range(0..2)];
    let multi = r.random_bool(0.5);
    let labels = random_labels(&mut r, two_n, 3, multi);
    let mode = if multi { LabelMode::Multi } else { LabelMode::Single };
    let brute = oracle_mask(&labels, mode);
    let mask = scl_core::sampling::mask_from_labels(&labels, mode).unwrap();
    let tau = r.random_range(0.1..1.0);
    let include_self = r.random_bool(0.5);
    let (e, v) = (unit_rows(&mut r, two_n, d), unit_rows(&mut r, two_n, d));
    let w = LossWeights {
        tau,
        origin_tau: r.random_range(0.1..1.0),
        lambda1: r.random_range(0.0..1.0),
        lambda2: r.random_range(0.0..1.0),
    };
    let scores: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..two_n / 2).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let k = 4;
    let logits = uniform(&mut r, two_n, k, -3.0, 3.0);
    let targets: Vec<usize> = (0..two_n).map(|_| r.random_range(0..k)).collect();
    let singles: Vec<LabelSet> = targets.iter().map(|&t| LabelSet::single(t as u32)).collect();

    let mask_matches = mask == to_mask(&brute);
    let (lib_sc, lib_skip) = lib::supcon(&e, &v, &mask, tau, include_self);
    let (or_sc, or_skip) = oracle_supcon(&e, &v, &brute, tau, include_self);
    vec![
        ("mask", if mask_matches { 0.0 } else { f64::INFINITY }),
        ("supcon", (lib_sc - or_sc).abs()),
        ("skipped", (lib_skip as f64 - or_skip as f64).abs()),
        ("sup_img", (lib::sup_img(&v, &mask, tau) - oracle_supcon(&v, &v, &brute, tau, false).0).abs()),
        ("sup_txt", (lib::sup_txt(&e, &mask, tau) - oracle_supcon(&e, &e, &brute, tau, false).0).abs()),
        (
            "sup_i2t",
            (lib::sup_i2t(&e, &v, &mask, tau, include_self) - oracle_i2t(&e, &v, &brute, tau, include_self)).abs(),
        ),
        ("origin", (lib::origin(&e, &v, w.origin_tau) - oracle_origin(&e, &v, w.origin_tau)).abs()),
        ("pretrain_total", (lib::pretrain_total(&e, &v, &mask, &w) - oracle_pretrain_total(&e, &v, &brute, &w)).abs()),
        (
            "hinge_d",
            (lib::hinge_d(&scores[0], &scores[1], &scores[2]) - oracle_hinge_d(&scores[0], &scores[1], &scores[2])).abs(),
        ),
        ("hinge_g", (lib::hinge_g(&scores[1]) - oracle_hinge_g(&scores[1])).abs()),
        ("cross_entropy", (lib::cross_entropy(&logits, &targets) - oracle_cross_entropy(&logits, &targets)).abs()),
        ("aux_ce", (lib::aux_ce(&logits, &singles) - oracle_cross_entropy(&logits, &targets)).abs()),
    ]
}

//! Finite-difference gradient suite: every tape op, every loss and every
//! model forward pass, each over random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scl_core::data::{generate_single_label, LabelSet};
use scl_core::gradcheck::{check_gradients, relative_error, DEFAULT_STEP};
use scl_core::losses::{self, GanExtras, LossError, LossWeights, SupTerms};
use scl_core::models::{
    Classifier, Discriminator, Generator, ImageEncoder, MlpNetwork, TextEncoder, TextInput, EMBED_DIM,
};
use scl_core::sampling::{mask_from_labels, LabelMode};
use scl_core::tensor::{Matrix, Tape, TensorError, Var};

use super::{random_labels, rng, uniform};

/// `(check name, worst relative error over all instances)`.
pub type Outcome = (&'static str, f64);

fn weighted_sum<E: From<TensorError>>(t: &mut Tape, out: Var, w: &Matrix) -> Result<Var, E> {
    let m = t.mul_const(out, w.clone())?;
    Ok(t.sum(m))
}

/// Full central-difference check of one tape op reduced to a scalar by a
/// fixed random weighting.
fn op_check<F>(r: &mut ChaCha8Rng, inputs: Vec<Matrix>, out_shape: (usize, usize), f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let w = uniform(r, out_shape.0, out_shape.1, -1.0, 1.0);
    check_gradients(&inputs, DEFAULT_STEP, |t: &mut Tape, v: &[Var]| {
        let out = f(t, v)?;
        weighted_sum::<TensorError>(t, out, &w)
    })
    .expect("op evaluates")
    .max_rel_err
}

pub fn op_suite(trials: usize) -> Vec<Outcome> {
    let mut r = rng(1001);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..trials {
        let a34 = uniform(&mut r, 3, 4, -2.0, 2.0);
        let b42 = uniform(&mut r, 4, 2, -2.0, 2.0);
        let b24 = uniform(&mut r, 2, 4, -2.0, 2.0);
        let c34 = uniform(&mut r, 3, 4, -2.0, 2.0);
        let row = uniform(&mut r, 1, 4, -2.0, 2.0);
        let sq = uniform(&mut r, 4, 4, -2.0, 2.0);
        let pos = uniform(&mut r, 3, 4, 0.1, 2.0);
        let konst = uniform(&mut r, 3, 4, -2.0, 2.0);
        let alpha = r.random_range(-2.0..2.0);

        note("matmul", op_check(&mut r, vec![a34.clone(), b42.clone()], (3, 2), |t, v| t.matmul(v[0], v[1])));
        note("matmul_t", op_check(&mut r, vec![a34.clone(), b24.clone()], (3, 2), |t, v| t.matmul_t(v[0], v[1])));
        note("add", op_check(&mut r, vec![a34.clone(), c34.clone()], (3, 4), |t, v| t.add(v[0], v[1])));
        note("sub", op_check(&mut r, vec![a34.clone(), c34.clone()], (3, 4), |t, v| t.sub(v[0], v[1])));
        note("add_row", op_check(&mut r, vec![a34.clone(), row.clone()], (3, 4), |t, v| t.add_row(v[0], v[1])));
        note("hadamard", op_check(&mut r, vec![a34.clone(), c34.clone()], (3, 4), |t, v| t.hadamard(v[0], v[1])));
        note(
            "mul_const",
            op_check(&mut r, vec![a34.clone()], (3, 4), |t, v| t.mul_const(v[0], konst.clone())),
        );
        note("scale", op_check(&mut r, vec![a34.clone()], (3, 4), |t, v| Ok(t.scale(v[0], alpha))));
        note("add_scalar", op_check(&mut r, vec![a34.clone()], (3, 4), |t, v| Ok(t.add_scalar(v[0], alpha))));
        note("exp", op_check(&mut r, vec![a34.clone()], (3, 4), |t, v| Ok(t.exp(v[0]))));
        note("log", op_check(&mut r, vec![pos.clone()], (3, 4), |t, v| t.log(v[0])));
        // Keep relu inputs away from the kink.
        let away = a34.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        note("relu", op_check(&mut r, vec![away], (3, 4), |t, v| Ok(t.relu(v[0]))));
        note("tanh", op_check(&mut r, vec![a34.clone()], (3, 4), |t, v| Ok(t.tanh(v[0]))));
        note("softmax_rows", op_check(&mut r, vec![a34.clone()], (3, 4), |t, v| Ok(t.softmax_rows(v[0]))));
        note(
            "log_sum_exp_rows",
            op_check(&mut r, vec![a34.clone()], (3, 1), |t, v| t.log_sum_exp_rows(v[0], false)),
        );
        note(
            "log_sum_exp_rows_excl",
            op_check(&mut r, vec![sq.clone()], (4, 1), |t, v| t.log_sum_exp_rows(v[0], true)),
        );
        note("sum", op_check(&mut r, vec![a34.clone()], (1, 1), |t, v| Ok(t.sum(v[0]))));
        note("mean", op_check(&mut r, vec![a34.clone()], (1, 1), |t, v| Ok(t.mean(v[0]))));
        note(
            "row_l2_normalize",
            op_check(&mut r, vec![a34.transpose()], (4, 3), |t, v| t.row_l2_normalize(v[0])),
        );
        note("transpose", op_check(&mut r, vec![a34.clone()], (4, 3), |t, v| Ok(t.transpose(v[0]))));
        note(
            "concat_rows",
            op_check(&mut r, vec![a34.clone(), row.clone()], (4, 4), |t, v| t.concat_rows(&[v[0], v[1]])),
        );
        note("concat_cols", op_check(&mut r, vec![a34.clone(), b42.slice_rows(0, 3)], (3, 6), |t, v| t.concat_cols(v[0], v[1])));
        note(
            "select_rows",
            op_check(&mut r, vec![a34.clone()], (4, 4), |t, v| t.select_rows(v[0], &[2, 0, 2, 1])),
        );
        note("slice_rows", op_check(&mut r, vec![a34.clone()], (2, 4), |t, v| t.slice_rows(v[0], 1, 3)));
    }
    worst
}

fn loss_check<F>(inputs: Vec<Matrix>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, LossError>,
{
    check_gradients(&inputs, DEFAULT_STEP, f).expect("loss evaluates").max_rel_err
}

/// Raw rows normalized on the tape, so perturbed inputs stay valid.
fn unit(t: &mut Tape, v: Var) -> Result<Var, LossError> {
    Ok(t.row_l2_normalize(v)?)
}

pub fn loss_suite(trials: usize) -> Vec<Outcome> {
    let mut r = rng(2002);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..trials {
        let two_n = [4, 6, 8][r.random_range(0..3)];
        let d = [2, 8][r.random_range(0..2)];
        let multi = r.random_bool(0.5);
        let labels = random_labels(&mut r, two_n, 3, multi);
        let mask = mask_from_labels(&labels, if multi { LabelMode::Multi } else { LabelMode::Single }).unwrap();
        let tau = r.random_range(0.2..1.0);
        let include_self = r.random_bool(0.5);
        let e = uniform(&mut r, two_n, d, -2.0, 2.0);
        let v = uniform(&mut r, two_n, d, -2.0, 2.0);
        let n = two_n / 2;
        let w = LossWeights {
            tau,
            origin_tau: r.random_range(0.2..1.0),
            lambda1: r.random_range(0.0..1.0),
            lambda2: r.random_range(0.0..1.0),
        };

        note(
            "supcon",
            loss_check(vec![e.clone(), v.clone()], |t, x| {
                let (a, b) = (unit(t, x[0])?, unit(t, x[1])?);
                Ok(losses::supcon_with(t, a, b, &mask, tau, include_self)?.loss)
            }),
        );
        note(
            "sup_img",
            loss_check(vec![v.clone()], |t, x| {
                let a = unit(t, x[0])?;
                Ok(losses::sup_img(t, a, &mask, tau)?.loss)
            }),
        );
        note(
            "sup_txt",
            loss_check(vec![e.clone()], |t, x| {
                let a = unit(t, x[0])?;
                Ok(losses::sup_txt(t, a, &mask, tau)?.loss)
            }),
        );
        note(
            "sup_i2t",
            loss_check(vec![e.clone(), v.clone()], |t, x| {
                let (a, b) = (unit(t, x[0])?, unit(t, x[1])?);
                Ok(losses::sup_i2t(t, a, b, &mask, tau, include_self)?.loss)
            }),
        );
        note(
            "origin",
            loss_check(vec![e.slice_rows(0, n), v.slice_rows(0, n)], |t, x| {
                let (a, b) = (unit(t, x[0])?, unit(t, x[1])?);
                losses::origin_matching_loss(t, a, b, w.origin_tau)
            }),
        );
        note(
            "pretrain_objective",
            loss_check(vec![e.clone(), v.clone()], |t, x| {
                let (a, b) = (unit(t, x[0])?, unit(t, x[1])?);
                let (ea, eb) = (t.slice_rows(a, 0, n)?, t.slice_rows(a, n, 2 * n)?);
                let (va, vb) = (t.slice_rows(b, 0, n)?, t.slice_rows(b, n, 2 * n)?);
                let oa = losses::origin_matching_loss(t, ea, va, w.origin_tau)?;
                let ob = losses::origin_matching_loss(t, eb, vb, w.origin_tau)?;
                let origin = t.add(oa, ob)?;
                let terms = SupTerms {
                    img: Some(losses::sup_img(t, b, &mask, tau)?),
                    txt: Some(losses::sup_txt(t, a, &mask, tau)?),
                    i2t: Some(losses::sup_i2t(t, a, b, &mask, tau, false)?),
                };
                Ok(losses::pretrain_objective(t, origin, &terms, &w)?.total)
            }),
        );
        // Scores away from the hinge kinks at ±1.
        let score = |r: &mut ChaCha8Rng| {
            Matrix::from_fn(n, 1, |_, _| {
                let s: f64 = r.random_range(-2.0..2.0);
                if (s.abs() - 1.0).abs() < 0.05 { s * 1.2 } else { s }
            })
        };
        let (sr, sf, sm) = (score(&mut r), score(&mut r), score(&mut r));
        note(
            "hinge_d",
            loss_check(vec![sr.clone(), sf.clone(), sm.clone()], |t, x| losses::hinge_d_loss(t, x[0], x[1], x[2])),
        );
        note("hinge_g", loss_check(vec![sf.clone()], |t, x| losses::hinge_g_adv(t, x[0])));
        note(
            "gan_objectives",
            loss_check(vec![sr, sf, sm, e.clone(), v.clone()], |t, x| {
                let la = losses::hinge_d_loss(t, x[0], x[1], x[2])?;
                let lb = losses::hinge_d_loss(t, x[1], x[2], x[0])?;
                let ga = losses::hinge_g_adv(t, x[1])?;
                let gb = losses::hinge_g_adv(t, x[2])?;
                let (a, b) = (unit(t, x[3])?, unit(t, x[4])?);
                let extras = GanExtras {
                    sup_img: Some(losses::sup_img(t, b, &mask, tau)?),
                    sup_i2t: Some(losses::sup_i2t(t, a, b, &mask, tau, include_self)?),
                    aux_ce: None,
                };
                let (dobj, gobj) = losses::gan_objectives(
                    t,
                    losses::BranchTerms { d_loss: la, g_adv: ga },
                    losses::BranchTerms { d_loss: lb, g_adv: gb },
                    &extras,
                    &w,
                )?;
                Ok(t.add(dobj.total, gobj.total)?)
            }),
        );
        let k = 4;
        let logits = uniform(&mut r, two_n, k, -3.0, 3.0);
        let targets: Vec<usize> = (0..two_n).map(|_| r.random_range(0..k)).collect();
        let singles: Vec<LabelSet> = targets.iter().map(|&c| LabelSet::single(c as u32)).collect();
        note(
            "cross_entropy",
            loss_check(vec![logits.clone()], |t, x| losses::cross_entropy(t, x[0], &targets)),
        );
        note("aux_ce", loss_check(vec![logits], |t, x| losses::aux_cross_entropy(t, x[0], &singles)));
    }
    worst
}

/// Entries checked per parameter tensor and per input in each model
/// instance; the full networks are too wide for exhaustive differencing.
const SAMPLED_ENTRIES: usize = 3;

/// Compares analytic gradients against central differences at randomly
/// chosen entries of `values`. `eval` recomputes the scalar from scratch.
fn sampled_check(r: &mut ChaCha8Rng, values: &[Matrix], analytic: &[Matrix], eval: impl Fn(&[Matrix]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = values.to_vec();
    for (k, m) in values.iter().enumerate() {
        for _ in 0..SAMPLED_ENTRIES {
            let idx = r.random_range(0..m.len());
            let orig = m.data()[idx];
            probe[k].data_mut()[idx] = orig + DEFAULT_STEP;
            let plus = eval(&probe);
            probe[k].data_mut()[idx] = orig - DEFAULT_STEP;
            let minus = eval(&probe);
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            worst = worst.max(relative_error(analytic[k].data()[idx], numeric));
        }
    }
    worst
}

fn with_params(net: &MlpNetwork, values: &[Matrix]) -> MlpNetwork {
    let mut out = net.clone();
    for (dst, src) in out.params_mut().into_iter().zip(values) {
        *dst = src.clone();
    }
    out
}

/// Gradient of `Σ W ⊙ net(x)` with respect to the parameters and input of
/// an MLP, checked at sampled entries.
fn mlp_check(r: &mut ChaCha8Rng, net: &MlpNetwork, x: &Matrix) -> f64 {
    let w = uniform(r, x.rows(), net.output_dim(), -1.0, 1.0);
    let mut t = Tape::new();
    let bound = net.bind(&mut t, true);
    let xv = t.leaf(x.clone());
    let out = bound.forward(&mut t, xv).unwrap();
    let loss: Var = weighted_sum::<TensorError>(&mut t, out, &w).unwrap();
    t.backward(loss).unwrap();
    let mut vars = bound.param_vars();
    vars.push(xv);
    let analytic: Vec<Matrix> = vars.iter().map(|v| t.grad_or_zeros(*v)).collect();
    let mut values: Vec<Matrix> = net.params().into_iter().cloned().collect();
    values.push(x.clone());
    let np = values.len() - 1;
    sampled_check(r, &values, &analytic, |vals| {
        let net = with_params(net, &vals[..np]);
        let out = net.forward_value(&vals[np]).unwrap();
        out.hadamard(&w).unwrap().sum()
    })
}

/// Conditional models take `(left, right)` inputs concatenated by column.
fn conditional_check(
    r: &mut ChaCha8Rng,
    net: &MlpNetwork,
    bound_forward: impl Fn(&mut Tape, Var, Var) -> Var,
    left: &Matrix,
    right: &Matrix,
) -> f64 {
    let w = uniform(r, left.rows(), net.output_dim(), -1.0, 1.0);
    let mut t = Tape::new();
    let (lv, rv) = (t.leaf(left.clone()), t.leaf(right.clone()));
    let out = bound_forward(&mut t, lv, rv);
    let loss: Var = weighted_sum::<TensorError>(&mut t, out, &w).unwrap();
    t.backward(loss).unwrap();
    let analytic = vec![t.grad_or_zeros(lv), t.grad_or_zeros(rv)];
    let values = vec![left.clone(), right.clone()];
    sampled_check(r, &values, &analytic, |vals| {
        let x = Matrix::concat_cols(&vals[0], &vals[1]).unwrap();
        net.forward_value(&x).unwrap().hadamard(&w).unwrap().sum()
    })
}

pub fn model_suite(trials: usize) -> Vec<Outcome> {
    let mut r = rng(3003);
    let ds = generate_single_label(2, 4, 9).unwrap();
    let captions: Vec<&TextInput> = ds.examples.iter().take(3).map(|e| &e.caption).collect();
    let mut worst = vec![
        ("image_encoder", 0.0f64),
        ("text_encoder", 0.0),
        ("generator", 0.0),
        ("generator_conditional_inputs", 0.0),
        ("discriminator", 0.0),
        ("discriminator_conditional_inputs", 0.0),
        ("classifier", 0.0),
    ];
    for trial in 0..trials {
        let seed = trial as u64;
        let g = ImageEncoder::new(seed);
        let x = uniform(&mut r, 2, g.net.input_dim(), -1.0, 1.0);
        worst[0].1 = worst[0].1.max(mlp_check(&mut r, &g.net, &x));

        let f = TextEncoder::new(seed);
        let w = uniform(&mut r, captions.len(), EMBED_DIM, -1.0, 1.0);
        let mut t = Tape::new();
        let bound = f.bind(&mut t, true);
        let out = bound.forward(&mut t, &captions).unwrap();
        let loss: Var = weighted_sum::<TensorError>(&mut t, out, &w).unwrap();
        t.backward(loss).unwrap();
        let analytic: Vec<Matrix> = bound.param_vars().iter().map(|v| t.grad_or_zeros(*v)).collect();
        let values: Vec<Matrix> = f.params().into_iter().cloned().collect();
        let err = sampled_check(&mut r, &values, &analytic, |vals| {
            let mut enc = f.clone();
            for (dst, src) in enc.params_mut().into_iter().zip(vals) {
                *dst = src.clone();
            }
            enc.encode(&captions).unwrap().hadamard(&w).unwrap().sum()
        });
        worst[1].1 = worst[1].1.max(err);

        let gen = Generator::new(seed);
        let z = uniform(&mut r, 2, gen.net.input_dim() - EMBED_DIM, -1.0, 1.0);
        let e = uniform(&mut r, 2, EMBED_DIM, -1.0, 1.0);
        let zx = Matrix::concat_cols(&z, &e).unwrap();
        worst[2].1 = worst[2].1.max(mlp_check(&mut r, &gen.net, &zx));
        let err = conditional_check(
            &mut r,
            &gen.net,
            |t, a, b| gen.bind(t, false).forward(t, a, b).unwrap(),
            &z,
            &e,
        );
        worst[3].1 = worst[3].1.max(err);

        let mut disc = Discriminator::new(seed);
        // A zero final layer would make every gradient vanish.
        for p in disc.net.params_mut() {
            let noise = uniform(&mut r, p.rows(), p.cols(), -0.1, 0.1);
            *p = p.add(&noise).unwrap();
        }
        let img = uniform(&mut r, 2, disc.net.input_dim() - EMBED_DIM, -1.0, 1.0);
        let xe = Matrix::concat_cols(&img, &e).unwrap();
        worst[4].1 = worst[4].1.max(mlp_check(&mut r, &disc.net, &xe));
        let err = conditional_check(
            &mut r,
            &disc.net,
            |t, a, b| disc.bind(t, false).forward(t, a, b).unwrap(),
            &img,
            &e,
        );
        worst[5].1 = worst[5].1.max(err);

        let c = Classifier::new(16, seed);
        let xi = uniform(&mut r, 2, c.net().input_dim(), -1.0, 1.0);
        worst[6].1 = worst[6].1.max(mlp_check(&mut r, c.net(), &xi));
    }
    worst
}

//! Shared fixtures: central finite differences, a catalog of gradient cases
//! and the synthetic held-out-domain task.

#![allow(dead_code)]

use cdt_core::data::{generate, DomainDataset, SynthConfig};
use cdt_core::losses::{cdt_loss, lmcl_loss, triplet_loss, LmclForm, Triplets};
use cdt_core::metrics::{covariance_tensor, mahalanobis_sq_tensor, quadratic_rows, MapShape};
use cdt_core::tensor::{grad, Graph, Tensor};
use cdt_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_POINTS: usize = 20;

/// One differentiable input: values and shape.
pub type Input = (Vec<f64>, Vec<usize>);
pub type Func = Box<dyn Fn(&Graph, &[Tensor]) -> Result<Tensor>>;
pub type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Input>>;

pub struct GradCase {
    pub name: &'static str,
    pub sample: Sampler,
    pub f: Func,
}

fn eval(f: &Func, inputs: &[Input]) -> (f64, Vec<Vec<f64>>) {
    let g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|(v, s)| g.param(v.clone(), s).unwrap()).collect();
    let out = f(&g, &ts).unwrap();
    let grads = grad(&out, &ts, false).unwrap();
    (out.item(), grads.iter().map(Tensor::to_vec).collect())
}

fn value(f: &Func, inputs: &[Input]) -> f64 {
    let g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|(v, s)| g.constant(v.clone(), s).unwrap()).collect();
    f(&g, &ts).unwrap().item()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs at
/// one point; `0` when both gradients vanish.
pub fn fd_relative_error(f: &Func, inputs: &[Input]) -> f64 {
    let (_, analytic) = eval(f, inputs);
    let mut numeric = Vec::new();
    for (k, (v, _)) in inputs.iter().enumerate() {
        let mut g = vec![0.0; v.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut up = inputs.to_vec();
            let mut dn = inputs.to_vec();
            up[k].0[i] += FD_STEP;
            dn[k].0[i] -= FD_STEP;
            *gi = (value(f, &up) - value(f, &dn)) / (2.0 * FD_STEP);
        }
        numeric.push(g);
    }
    let flat = |g: &[Vec<f64>]| g.concat();
    let (a, n) = (flat(&analytic), flat(&numeric));
    let diff = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-9 {
        return diff;
    }
    diff / scale
}

/// Deterministic, index-dependent weights so that every output entry
/// contributes differently to the scalar under test.
pub fn weigh(t: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..t.numel()).map(|i| (1.3 * i as f64 + 0.7).cos()).collect();
    let wt = t.graph().constant(w, &t.shape())?;
    Ok(t.mul(&wt)?.sum_all())
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// Values bounded away from zero (for kinks and poles).
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.3..2.5)).collect()
}

fn case(name: &'static str, sample: impl Fn(&mut ChaCha8Rng) -> Vec<Input> + 'static, f: impl Fn(&Graph, &[Tensor]) -> Result<Tensor> + 'static) -> GradCase {
    GradCase {
        name,
        sample: Box::new(sample),
        f: Box::new(f),
    }
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Input {
    (normal(rng, r * c, 1.0), vec![r, c])
}

fn unit_rows(rows: &[f64], width: usize) -> Vec<Vec<f64>> {
    rows.chunks(width)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Triplet embeddings whose hinge arguments all sit at least `gap` from the kink.
fn triplet_point(rng: &mut ChaCha8Rng, b: usize, e: usize, rho: f64, gap: f64) -> Vec<Input> {
    loop {
        let parts: Vec<Vec<f64>> = (0..3).map(|_| normal(rng, b * e, 1.0)).collect();
        let [a, p, n] = [0, 1, 2].map(|k| unit_rows(&parts[k], e));
        let ok = (0..b).all(|i| (sq_dist(&a[i], &p[i]) - sq_dist(&a[i], &n[i]) + rho).abs() > gap);
        let active = (0..b).any(|i| sq_dist(&a[i], &p[i]) - sq_dist(&a[i], &n[i]) + rho > 0.0);
        if ok && active {
            return parts.into_iter().map(|v| (v, vec![b, e])).collect();
        }
    }
}

const CDT_SHAPE: MapShape = MapShape { h: 2, w: 1, d: 3 };

fn cdt_point(rng: &mut ChaCha8Rng, b: usize, tau: f64) -> Vec<Input> {
    let n = CDT_SHAPE.numel();
    loop {
        let maps: Vec<Vec<f64>> = (0..3).map(|_| normal(rng, b * n, 0.8)).collect();
        let sigmas: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let a = normal(rng, 9, 0.6);
                // AAᵀ + 0.1 I
                let mut s = vec![0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        s[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * a[j * 3 + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
                    }
                }
                s
            })
            .collect();
        let energy = |x: &[f64], y: &[f64], s: &[f64]| -> f64 {
            let mut acc = 0.0;
            for pos in 0..CDT_SHAPE.positions() {
                let r: Vec<f64> = (0..3).map(|k| x[pos * 3 + k] - y[pos * 3 + k]).collect();
                for i in 0..3 {
                    for j in 0..3 {
                        acc += r[i] * s[i * 3 + j] * r[j];
                    }
                }
            }
            acc / CDT_SHAPE.positions() as f64
        };
        let args: Vec<f64> = (0..b)
            .map(|i| {
                let row = |m: &Vec<f64>| m[i * n..(i + 1) * n].to_vec();
                energy(&row(&maps[0]), &row(&maps[1]), &sigmas[0]) - energy(&row(&maps[0]), &row(&maps[2]), &sigmas[1]) + tau
            })
            .collect();
        if args.iter().all(|a| a.abs() > 0.05) && args.iter().any(|&a| a > 0.0) {
            let mut out: Vec<Input> = maps.into_iter().map(|v| (v, vec![b, n])).collect();
            out.extend(sigmas.into_iter().map(|s| (s, vec![3, 3])));
            return out;
        }
    }
}

/// Every differentiable tensor operation, the metric helpers and the three losses.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        case("add", |r| vec![mat(r, 3, 4), mat(r, 3, 4)], |_, x| weigh(&x[0].add(&x[1])?)),
        case("add (scalar broadcast)", |r| vec![mat(r, 3, 4), mat(r, 1, 1)], |_, x| weigh(&x[0].add(&x[1])?)),
        case("sub", |r| vec![mat(r, 3, 4), mat(r, 3, 4)], |_, x| weigh(&x[0].sub(&x[1])?)),
        case("mul", |r| vec![mat(r, 3, 4), mat(r, 3, 4)], |_, x| weigh(&x[0].mul(&x[1])?)),
        case(
            "div",
            |r| vec![mat(r, 3, 4), (away_from_zero(r, 12), vec![3, 4])],
            |_, x| weigh(&x[0].div(&x[1])?),
        ),
        case("scale", |r| vec![mat(r, 2, 5)], |_, x| weigh(&x[0].scale(-1.7))),
        case("neg", |r| vec![mat(r, 2, 5)], |_, x| weigh(&x[0].neg())),
        case("add_scalar", |r| vec![mat(r, 2, 5)], |_, x| weigh(&x[0].add_scalar(0.4))),
        case("square", |r| vec![mat(r, 2, 5)], |_, x| weigh(&x[0].square())),
        case("relu", |r| vec![(away_from_zero(r, 10), vec![2, 5])], |_, x| weigh(&x[0].relu())),
        case("exp", |r| vec![mat(r, 2, 5)], |_, x| weigh(&x[0].exp())),
        case("log", |r| vec![(positive(r, 10), vec![2, 5])], |_, x| weigh(&x[0].log()?)),
        case("sqrt", |r| vec![(positive(r, 10), vec![2, 5])], |_, x| weigh(&x[0].sqrt()?)),
        case("matmul", |r| vec![mat(r, 3, 4), mat(r, 4, 2)], |_, x| weigh(&x[0].matmul(&x[1])?)),
        case("transpose", |r| vec![mat(r, 3, 4)], |_, x| weigh(&x[0].t()?)),
        case("reshape", |r| vec![mat(r, 3, 4)], |_, x| weigh(&x[0].reshape(&[2, 6])?)),
        case("sum (axis)", |r| vec![(normal(r, 24, 1.0), vec![2, 3, 4])], |_, x| weigh(&x[0].sum(&[1])?)),
        case("mean (axes)", |r| vec![(normal(r, 24, 1.0), vec![2, 3, 4])], |_, x| weigh(&x[0].mean(&[0, 2])?)),
        case("sum_all", |r| vec![mat(r, 3, 4)], |_, x| Ok(x[0].square().sum_all())),
        case("mean_all", |r| vec![mat(r, 3, 4)], |_, x| x[0].exp().mean_all()),
        case("expand", |r| vec![(normal(r, 4, 1.0), vec![4])], |_, x| weigh(&x[0].expand(&[2, 4, 3], &[0, 2])?)),
        case("repeat_rows", |r| vec![(normal(r, 4, 1.0), vec![4])], |_, x| weigh(&x[0].repeat_rows(3)?)),
        case("repeat_cols", |r| vec![(normal(r, 4, 1.0), vec![4])], |_, x| weigh(&x[0].repeat_cols(3)?)),
        case("l2_normalize", |r| vec![(normal(r, 5, 1.0), vec![5])], |_, x| weigh(&x[0].l2_normalize()?)),
        case("l2_normalize_rows", |r| vec![mat(r, 3, 4)], |_, x| weigh(&x[0].l2_normalize_rows()?)),
        // small spread keeps the value-dependent ridge at its constant floor
        case("covariance_tensor", |r| vec![(normal(r, 18, 0.05), vec![6, 3])], |_, x| weigh(&covariance_tensor(&x[0])?)),
        case(
            "quadratic_rows",
            |r| vec![mat(r, 5, 3), mat(r, 3, 3)],
            |_, x| weigh(&quadratic_rows(&x[0], &x[1])?),
        ),
        case(
            "mahalanobis_sq_tensor",
            |r| vec![(normal(r, 3, 1.0), vec![3]), (normal(r, 3, 1.0), vec![3]), mat(r, 3, 3)],
            |_, x| mahalanobis_sq_tensor(&x[0], &x[1], &x[2]),
        ),
        case(
            "cdt_loss",
            |r| cdt_point(r, 4, 1.0),
            |_, x| {
                let maps = Triplets {
                    anchor: x[0].clone(),
                    positive: x[1].clone(),
                    negative: x[2].clone(),
                };
                cdt_loss(&maps, CDT_SHAPE, &x[3], &x[4], 1.0)
            },
        ),
        case(
            "triplet_loss",
            |r| triplet_point(r, 5, 4, 1.0, 0.05),
            |_, x| {
                let emb = Triplets {
                    anchor: x[0].l2_normalize_rows()?,
                    positive: x[1].l2_normalize_rows()?,
                    negative: x[2].l2_normalize_rows()?,
                };
                triplet_loss(&emb, 1.0)
            },
        ),
        case(
            "lmcl_loss",
            |r| vec![mat(r, 4, 5), mat(r, 3, 5)],
            |_, x| {
                lmcl_loss(
                    &x[0].l2_normalize_rows()?,
                    &[0, 2, 1, 2],
                    &x[1].l2_normalize_rows()?,
                    16.0,
                    0.5,
                    LmclForm::Paper,
                )
            },
        ),
        case(
            "lmcl_loss (cosface form)",
            |r| vec![mat(r, 4, 5), mat(r, 3, 5)],
            |_, x| {
                lmcl_loss(
                    &x[0].l2_normalize_rows()?,
                    &[1, 1, 0, 2],
                    &x[1].l2_normalize_rows()?,
                    16.0,
                    0.35,
                    LmclForm::Cosface,
                )
            },
        ),
    ]
}

/// The held-out-domain task: three training domains plus one held out with
/// its own affine distortion.
pub fn heldout_task(seed: u64) -> Vec<DomainDataset> {
    generate(&SynthConfig {
        domains: 4,
        identities_per_domain: 20,
        samples_per_identity: 10,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub const HELD_OUT: u32 = 3;

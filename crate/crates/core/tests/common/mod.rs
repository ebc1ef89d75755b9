//! Finite-difference checks, naive oracles and random instances shared by
//! the integration tests and the acceptance suite.
#![allow(dead_code, clippy::needless_range_loop)]

use anchor_uda::anchors::AnchorSet;
use anchor_uda::model::{Bound, Discriminator, DiscriminatorDims, ModelDims, SegModel};
use anchor_uda::objectives::{
    adversarial_losses, ce_loss, combine, dis_loss, LossTerms, LossWeights,
};
use anchor_uda::synth::{Dataset, LabeledGrid, Role};
use anchor_uda::tensor::{Tape, Tensor, Var};
use anchor_uda::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c, lo, hi)).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Largest relative error between the tape gradient and central
/// differences, over every input.
pub fn fd_error(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().requiring_grad()))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();

    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x)).collect();
        let o = f(&mut t, &vs).unwrap();
        t.item(o)
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[k] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Reduces a tensor to a scalar through fixed random weights, so every
/// output entry gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(shape, weights.to_vec())?;
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

pub struct GradCase {
    pub name: &'static str,
    pub instance: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build),
}

fn elementwise(
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> (Vec<Tensor>, Build) {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = matrix(rng, r, c, lo, hi);
    let w = uniform(rng, r * c, -1.0, 1.0);
    (
        vec![x],
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, &w)
        }),
    )
}

fn binary(
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> (Vec<Tensor>, Build) {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let a = matrix(rng, r, c, -2.0, 2.0);
    let b = matrix(rng, r, c, -2.0, 2.0);
    let w = uniform(rng, r * c, -1.0, 1.0);
    (
        vec![a, b],
        Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    )
}

/// Away from the kink, so a central difference never straddles it.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let v = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, v).unwrap()
}

fn random_targets(rng: &mut ChaCha8Rng, p: usize, c: usize) -> Vec<Option<usize>> {
    (0..p)
        .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..c)))
        .collect()
}

fn random_anchors(rng: &mut ChaCha8Rng, c: usize, f: usize) -> AnchorSet {
    let anchors = (0..c).map(|_| uniform(rng, f, -2.0, 2.0)).collect();
    AnchorSet::new(anchors, vec![1; c]).unwrap()
}

fn tiny_model_dims(rng: &mut ChaCha8Rng) -> ModelDims {
    ModelDims {
        input: rng.random_range(2..4),
        hidden: rng.random_range(2..5),
        embed: rng.random_range(2..4),
        feature: rng.random_range(2..4),
        categories: rng.random_range(2..4),
    }
}

/// Weights and biases drawn away from zero, so no unit starts dead.
fn random_layers(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> Vec<Tensor> {
    let mut params = Vec::new();
    for &(i, o) in shapes {
        params.push(matrix(rng, i, o, -1.2, 1.2));
        params.push(Tensor::vector(uniform(rng, o, -0.8, 0.8)).unwrap());
    }
    params
}

/// True if any pre-activation of the first `activated` layers lies within
/// a small band around zero, where a central difference would straddle
/// the kink.
fn near_kink(x: &Tensor, params: &[Tensor], activated: usize) -> bool {
    let (rows, _) = x.dims2().unwrap();
    for r in 0..rows {
        let mut h = x.row(r).to_vec();
        for layer in 0..activated {
            let (w, b) = (&params[2 * layer], &params[2 * layer + 1]);
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    b.values()[o]
                        + (0..fan_in)
                            .map(|i| h[i] * w.values()[i * fan_out + o])
                            .sum::<f64>()
                })
                .collect();
            if z.iter().any(|v| v.abs() < 1e-3) {
                return true;
            }
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    false
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            instance: |rng| {
                let (m, k, n) = (
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                );
                let a = matrix(rng, m, k, -2.0, 2.0);
                let b = matrix(rng, k, n, -2.0, 2.0);
                let w = uniform(rng, m * n, -1.0, 1.0);
                (
                    vec![a, b],
                    Box::new(move |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "add",
            instance: |rng| binary(rng, |t, a, b| t.add(a, b)),
        },
        GradCase {
            name: "sub",
            instance: |rng| binary(rng, |t, a, b| t.sub(a, b)),
        },
        GradCase {
            name: "mul",
            instance: |rng| binary(rng, |t, a, b| t.mul(a, b)),
        },
        GradCase {
            name: "mul_scalar_broadcast",
            instance: |rng| {
                let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                let a = matrix(rng, r, c, -2.0, 2.0);
                let s = Tensor::scalar(rng.random_range(-2.0..2.0));
                let w = uniform(rng, r * c, -1.0, 1.0);
                (
                    vec![a, s],
                    Box::new(move |t, v| {
                        let y = t.mul(v[0], v[1])?;
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "add_row",
            instance: |rng| {
                let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                let a = matrix(rng, r, c, -2.0, 2.0);
                let b = Tensor::vector(uniform(rng, c, -2.0, 2.0)).unwrap();
                let w = uniform(rng, r * c, -1.0, 1.0);
                (
                    vec![a, b],
                    Box::new(move |t, v| {
                        let y = t.add_row(v[0], v[1])?;
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "scale",
            instance: |rng| {
                let k = rng.random_range(-3.0..3.0);
                let (x, f) = elementwise(rng, -2.0, 2.0, |_, v| Ok(v));
                (
                    x,
                    Box::new(move |t, v| {
                        let s = t.scale(v[0], k);
                        f(t, &[s])
                    }),
                )
            },
        },
        GradCase {
            name: "relu",
            instance: |rng| {
                let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                let x = away_from_zero(rng, r, c);
                let w = uniform(rng, r * c, -1.0, 1.0);
                (
                    vec![x],
                    Box::new(move |t, v| {
                        let y = t.relu(v[0]);
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "leaky_relu",
            instance: |rng| {
                let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                let x = away_from_zero(rng, r, c);
                let w = uniform(rng, r * c, -1.0, 1.0);
                (
                    vec![x],
                    Box::new(move |t, v| {
                        let y = t.leaky_relu(v[0], 0.2);
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "log_clamped",
            instance: |rng| elementwise(rng, 0.05, 3.0, |t, v| Ok(t.log_clamped(v, 1e-12))),
        },
        GradCase {
            name: "softplus",
            instance: |rng| elementwise(rng, -6.0, 6.0, |t, v| Ok(t.softplus(v))),
        },
        GradCase {
            name: "softmax",
            instance: |rng| elementwise(rng, -4.0, 4.0, |t, v| t.softmax(v)),
        },
        GradCase {
            name: "sum",
            instance: |rng| {
                let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                let x = matrix(rng, r, c, -2.0, 2.0);
                (vec![x], Box::new(|t, v| Ok(t.sum(v[0]))))
            },
        },
        GradCase {
            name: "l2_norm",
            instance: |rng| {
                let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                let x = away_from_zero(rng, r, c);
                (vec![x], Box::new(|t, v| Ok(t.l2_norm(v[0]))))
            },
        },
        GradCase {
            name: "ce_loss",
            instance: |rng| {
                let (p, c) = (rng.random_range(1..6), rng.random_range(2..5));
                let logits = matrix(rng, p, c, -3.0, 3.0);
                let targets = random_targets(rng, p, c);
                (
                    vec![logits],
                    Box::new(move |t, v| {
                        let probs = t.softmax(v[0])?;
                        ce_loss(t, probs, &targets)
                    }),
                )
            },
        },
        GradCase {
            name: "dis_loss",
            instance: |rng| {
                let (p, c, f) = (
                    rng.random_range(1..6),
                    rng.random_range(2..5),
                    rng.random_range(1..5),
                );
                let features = matrix(rng, p, f, -2.0, 2.0);
                let targets = random_targets(rng, p, c);
                let anchors = random_anchors(rng, c, f);
                (
                    vec![features],
                    Box::new(move |t, v| dis_loss(t, v[0], &targets, &anchors)),
                )
            },
        },
        GradCase {
            name: "combined_objective",
            instance: |rng| {
                let (p, c, f) = (
                    rng.random_range(1..5),
                    rng.random_range(2..4),
                    rng.random_range(1..4),
                );
                let src_f = matrix(rng, p, f, -2.0, 2.0);
                let tgt_f = matrix(rng, p, f, -2.0, 2.0);
                let cls = matrix(rng, f, c, -1.0, 1.0);
                let src_t: Vec<Option<usize>> =
                    (0..p).map(|_| Some(rng.random_range(0..c))).collect();
                let anchor_t = random_targets(rng, p, c);
                let prob_t = random_targets(rng, p, c);
                let anchors = random_anchors(rng, c, f);
                let weights = LossWeights {
                    lambda_dis: rng.random_range(0.0..1.0),
                    lambda_ce: rng.random_range(0.0..1.0),
                };
                (
                    vec![src_f, tgt_f, cls],
                    Box::new(move |t, v| {
                        let sl = t.matmul(v[0], v[2])?;
                        let sp = t.softmax(sl)?;
                        let tl = t.matmul(v[1], v[2])?;
                        let tp = t.softmax(tl)?;
                        let terms = LossTerms {
                            ce_source: ce_loss(t, sp, &src_t)?,
                            dis_source: dis_loss(t, v[0], &src_t, &anchors)?,
                            ce_target_anchor: ce_loss(t, tp, &anchor_t)?,
                            dis_target: dis_loss(t, v[1], &anchor_t, &anchors)?,
                            ce_target_prob: ce_loss(t, tp, &prob_t)?,
                        };
                        combine(t, &terms, weights)
                    }),
                )
            },
        },
        GradCase {
            name: "adversarial_losses",
            instance: |rng| loop {
                let f = rng.random_range(1..4);
                let hidden = rng.random_range(1..4);
                let dims = DiscriminatorDims { feature: f, hidden };
                let shapes = [(f, hidden), (hidden, 1)];
                let disc = Discriminator::from_params(dims, random_layers(rng, &shapes)).unwrap();
                let (ps, pt) = (rng.random_range(1..4), rng.random_range(1..4));
                let mut inputs = vec![matrix(rng, ps, f, -2.0, 2.0), matrix(rng, pt, f, -2.0, 2.0)];
                if near_kink(&inputs[0], disc.params(), 1)
                    || near_kink(&inputs[1], disc.params(), 1)
                {
                    continue;
                }
                inputs.extend(disc.params().iter().cloned());
                let mix = rng.random_range(0.1..1.0);
                break (
                    inputs,
                    Box::new(move |t, v| {
                        let b = Bound::from_vars(v[2..].to_vec());
                        let (dl, al) = adversarial_losses(t, &disc, &b, v[0], v[1])?;
                        let al = t.scale(al, mix);
                        t.add(dl, al)
                    }),
                );
            },
        },
        GradCase {
            name: "segmentation_forward",
            instance: |rng| loop {
                let dims = tiny_model_dims(rng);
                let shapes = [
                    (dims.input, dims.hidden),
                    (dims.hidden, dims.embed),
                    (dims.embed, dims.feature),
                    (dims.feature, dims.categories),
                ];
                let model = SegModel::from_params(dims, random_layers(rng, &shapes)).unwrap();
                let p = rng.random_range(1..4);
                let x = matrix(rng, p, dims.input, -2.0, 2.0);
                if near_kink(&x, model.params(), 2) {
                    continue;
                }
                let mut inputs = vec![x];
                inputs.extend(model.params().iter().cloned());
                let targets: Vec<Option<usize>> = (0..p)
                    .map(|_| Some(rng.random_range(0..dims.categories)))
                    .collect();
                let wf = uniform(rng, p * dims.feature, -1.0, 1.0);
                break (
                    inputs,
                    Box::new(move |t, v| {
                        let b = Bound::from_vars(v[1..].to_vec());
                        let out = model.forward_on(t, &b, v[0])?;
                        let ce = ce_loss(t, out.probs, &targets)?;
                        let f = weighted_sum(t, out.features, &wf)?;
                        t.add(ce, f)
                    }),
                );
            },
        },
    ]
}

/// Worst relative error of `case` over `instances` seeded instances.
pub fn worst_gradient_error(case: &GradCase, instances: u64, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(i));
        let (inputs, f) = (case.instance)(&mut r);
        worst = worst.max(fd_error(&inputs, &f));
    }
    worst
}

// ---- naive oracles -------------------------------------------------------

/// Per-pixel forward with explicit loops over the stored parameters.
pub fn naive_forward(model: &SegModel, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = model.params();
    let layer = |input: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        (0..fan_out)
            .map(|o| {
                let mut s = b.values()[o];
                for i in 0..fan_in {
                    s += input[i] * w.values()[i * fan_out + o];
                }
                s
            })
            .collect()
    };
    let relu = |v: Vec<f64>| {
        v.into_iter()
            .map(|x| if x > 0.0 { x } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let h = relu(layer(x, &p[0], &p[1]));
    let h = relu(layer(&h, &p[2], &p[3]));
    let features = layer(&h, &p[4], &p[5]);
    let logits = layer(&features, &p[6], &p[7]);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (features, e.into_iter().map(|v| v / s).collect())
}

pub fn naive_anchors(source: &Dataset, model: &SegModel) -> (Vec<Vec<f64>>, Vec<u64>) {
    let (c, f) = (model.dims().categories, model.dims().feature);
    let mut sums = vec![vec![0.0; f]; c];
    let mut counts = vec![0u64; c];
    for g in source.grids() {
        let labels = g.labels().unwrap();
        for j in 0..g.pixels() {
            let x: Vec<f64> = g.pixel(j).iter().map(|&v| f64::from(v)).collect();
            let (feat, _) = naive_forward(model, &x);
            let k = labels[j] as usize;
            counts[k] += 1;
            for d in 0..f {
                sums[k][d] += feat[d];
            }
        }
    }
    for k in 0..c {
        if counts[k] > 0 {
            for d in 0..f {
                sums[k][d] /= counts[k] as f64;
            }
        }
    }
    (sums, counts)
}

pub fn naive_distances(
    features: &[Vec<f64>],
    anchors: &[Vec<f64>],
    valid: &[bool],
) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|x| {
            anchors
                .iter()
                .zip(valid)
                .map(|(a, &ok)| {
                    if !ok {
                        return f64::INFINITY;
                    }
                    let mut s = 0.0;
                    for d in 0..x.len() {
                        s += (x[d] - a[d]).powi(2);
                    }
                    s.sqrt()
                })
                .collect()
        })
        .collect()
}

/// Sorts the finite distances and compares the two smallest.
pub fn naive_active(row: &[f64], margin: f64) -> Option<usize> {
    let mut finite: Vec<(f64, usize)> = row
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite())
        .map(|(k, &d)| (d, k))
        .collect();
    if finite.len() < 2 {
        return None;
    }
    finite.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (d1, k) = finite[0];
    let d2 = finite[1].0;
    (d2 - d1 > margin && d1 < d2 - margin && d1 + margin < d2).then_some(k)
}

pub fn naive_prob_active(row: &[f64], threshold: f64) -> Option<usize> {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    (row[best] > threshold).then_some(best)
}

pub fn naive_ce(probs: &[Vec<f64>], targets: &[Option<usize>]) -> f64 {
    let mut s = 0.0;
    for (row, t) in probs.iter().zip(targets) {
        if let Some(k) = t {
            s -= row[*k].max(1e-12).ln();
        }
    }
    s
}

pub fn naive_dis(features: &[Vec<f64>], targets: &[Option<usize>], anchors: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (x, t) in features.iter().zip(targets) {
        if let Some(k) = t {
            for d in 0..x.len() {
                s += (anchors[*k][d] - x[d]).powi(2);
            }
        }
    }
    s
}

pub fn naive_confusion(pred: &[usize], truth: &[usize], c: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; c]; c];
    for i in 0..pred.len() {
        m[truth[i]][pred[i]] += 1;
    }
    m
}

/// IoU from pixel index sets.
pub fn set_iou(pred: &[usize], truth: &[usize], c: usize) -> Vec<Option<f64>> {
    use std::collections::BTreeSet;
    (0..c)
        .map(|k| {
            let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
            let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect()
}

/// A small labelled dataset with random features, for oracle comparisons.
pub fn random_dataset(
    rng: &mut ChaCha8Rng,
    count: usize,
    h: usize,
    w: usize,
    d: usize,
    c: usize,
) -> Dataset {
    let grids = (0..count)
        .map(|_| {
            let features = (0..h * w * d)
                .map(|_| rng.random_range(-3.0f32..3.0))
                .collect();
            let labels = (0..h * w).map(|_| rng.random_range(0..c) as u16).collect();
            LabeledGrid::new(h, w, d, features, Some(labels)).unwrap()
        })
        .collect();
    Dataset::new(Role::Source, c, h, w, d, grids).unwrap()
}

// ---- oracle comparisons --------------------------------------------------

pub type Check = fn(u64) -> std::result::Result<(), String>;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * b.abs().max(1.0)
}

fn random_model(rng: &mut ChaCha8Rng, input: usize, categories: usize) -> SegModel {
    let dims = ModelDims {
        input,
        hidden: rng.random_range(2..6),
        embed: rng.random_range(2..5),
        feature: rng.random_range(2..5),
        categories,
    };
    let shapes = [
        (dims.input, dims.hidden),
        (dims.hidden, dims.embed),
        (dims.embed, dims.feature),
        (dims.feature, dims.categories),
    ];
    SegModel::from_params(dims, random_layers(rng, &shapes)).unwrap()
}

/// Anchors with roughly one in four categories left empty.
fn sparse_anchors(rng: &mut ChaCha8Rng, c: usize, f: usize) -> AnchorSet {
    let anchors = (0..c).map(|_| uniform(rng, f, -2.0, 2.0)).collect();
    let counts = (0..c)
        .map(|_| {
            if rng.random_bool(0.25) {
                0
            } else {
                rng.random_range(1..50)
            }
        })
        .collect();
    AnchorSet::new(anchors, counts).unwrap()
}

/// Distance rows with exact ties, invalid columns and gaps close to the
/// margin.
fn awkward_distances(rng: &mut ChaCha8Rng, p: usize, c: usize, margin: f64) -> Vec<Vec<f64>> {
    (0..p)
        .map(|_| {
            let mut row = uniform(rng, c, 0.0, 6.0);
            match rng.random_range(0..4) {
                0 if c >= 2 => {
                    let (a, b) = (rng.random_range(0..c), rng.random_range(0..c));
                    row[b] = row[a];
                }
                1 if c >= 2 => {
                    let (a, b) = (rng.random_range(0..c), rng.random_range(0..c));
                    row[b] = row[a] + margin;
                }
                2 => {
                    let a = rng.random_range(0..c);
                    row[a] = f64::INFINITY;
                }
                _ => {}
            }
            row
        })
        .collect()
}

fn random_probs(rng: &mut ChaCha8Rng, p: usize, c: usize) -> Vec<Vec<f64>> {
    (0..p)
        .map(|_| {
            let spread = rng.random_range(0.5..8.0);
            let mut z = uniform(rng, c, -spread, spread);
            if rng.random_bool(0.2) && c >= 2 {
                z[1] = z[0];
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn check_construct_anchors(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (d, c) = (r.random_range(1..4), r.random_range(2..6));
    let model = random_model(&mut r, d, c);
    let (h, w) = (r.random_range(1..4), r.random_range(1..4));
    let count = r.random_range(1..4);
    let ds = random_dataset(&mut r, count, h, w, d, c);
    let got = anchor_uda::anchors::construct_anchors(&ds, &model).map_err(|e| e.to_string())?;
    let (means, counts) = naive_anchors(&ds, &model);
    if got.pixel_counts() != counts.as_slice() {
        return Err(format!("counts {:?} vs {counts:?}", got.pixel_counts()));
    }
    for k in 0..c {
        if got.is_valid(k) != (counts[k] > 0) {
            return Err(format!("validity of {k}"));
        }
        if let Some(a) = got.anchor(k) {
            if !a.iter().zip(&means[k]).all(|(x, y)| close(*x, *y)) {
                return Err(format!("anchor {k}: {a:?} vs {:?}", means[k]));
            }
        }
    }
    Ok(())
}

fn check_anchor_distances(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (p, c, f) = (
        r.random_range(1..20),
        r.random_range(1..6),
        r.random_range(1..6),
    );
    let features: Vec<Vec<f64>> = (0..p).map(|_| uniform(&mut r, f, -3.0, 3.0)).collect();
    let anchors = sparse_anchors(&mut r, c, f);
    let got = anchor_uda::anchors::anchor_distances(&flat(&features), &anchors)
        .map_err(|e| e.to_string())?;
    let want = naive_distances(&features, anchors.anchors(), &anchors.valid());
    for j in 0..p {
        for k in 0..c {
            let (a, b) = (got.row(j)[k], want[j][k]);
            let ok = if b.is_finite() { close(a, b) } else { a == b };
            if !ok {
                return Err(format!("pixel {j} anchor {k}: {a} vs {b}"));
            }
        }
    }
    Ok(())
}

fn check_identify_active(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (p, c) = (r.random_range(1..40), r.random_range(1..6));
    let margin = r.random_range(0.0..3.0);
    let rows = awkward_distances(&mut r, p, c, margin);
    let got =
        anchor_uda::anchors::identify_active(&flat(&rows), margin).map_err(|e| e.to_string())?;
    let want: Vec<Option<usize>> = rows.iter().map(|row| naive_active(row, margin)).collect();
    if got.pseudo_labels() != want.as_slice() {
        return Err(format!("{:?} vs {want:?}", got.pseudo_labels()));
    }
    Ok(())
}

fn check_identify_by_probability(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (p, c) = (r.random_range(1..40), r.random_range(1..6));
    let rows = random_probs(&mut r, p, c);
    let threshold = if r.random_bool(0.3) {
        rows[0][0]
    } else {
        r.random_range(0.3..0.99)
    };
    let got = anchor_uda::anchors::identify_active_by_probability(&flat(&rows), threshold)
        .map_err(|e| e.to_string())?;
    let want: Vec<Option<usize>> = rows
        .iter()
        .map(|row| naive_prob_active(row, threshold))
        .collect();
    if got.pseudo_labels() != want.as_slice() {
        return Err(format!("{:?} vs {want:?}", got.pseudo_labels()));
    }
    Ok(())
}

fn check_ce_loss(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (p, c) = (r.random_range(1..40), r.random_range(2..6));
    let rows = random_probs(&mut r, p, c);
    let targets = random_targets(&mut r, p, c);
    let mut tape = Tape::new();
    let pv = tape.leaf(&flat(&rows));
    let l = ce_loss(&mut tape, pv, &targets).map_err(|e| e.to_string())?;
    let (a, b) = (tape.item(l), naive_ce(&rows, &targets));
    close(a, b).then_some(()).ok_or(format!("{a} vs {b}"))
}

fn check_dis_loss(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (p, c, f) = (
        r.random_range(1..40),
        r.random_range(2..6),
        r.random_range(1..6),
    );
    let features: Vec<Vec<f64>> = (0..p).map(|_| uniform(&mut r, f, -3.0, 3.0)).collect();
    let anchors = random_anchors(&mut r, c, f);
    let targets = random_targets(&mut r, p, c);
    let mut tape = Tape::new();
    let fv = tape.leaf(&flat(&features));
    let l = dis_loss(&mut tape, fv, &targets, &anchors).map_err(|e| e.to_string())?;
    let (a, b) = (
        tape.item(l),
        naive_dis(&features, &targets, anchors.anchors()),
    );
    close(a, b).then_some(()).ok_or(format!("{a} vs {b}"))
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    // Uses only part of the label range now and then, so some categories
    // are absent.
    let used = rng.random_range(1..=c);
    (0..n).map(|_| rng.random_range(0..used)).collect()
}

fn check_confusion(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(1..200), r.random_range(1..8));
    let (pred, truth) = (labels(&mut r, n, c), labels(&mut r, n, c));
    let cm = anchor_uda::metrics::confusion(&pred, &truth, c).map_err(|e| e.to_string())?;
    let want = naive_confusion(&pred, &truth, c);
    for t in 0..c {
        for p in 0..c {
            if cm.get(t, p) != want[t][p] {
                return Err(format!(
                    "cell ({t},{p}): {} vs {}",
                    cm.get(t, p),
                    want[t][p]
                ));
            }
        }
    }
    Ok(())
}

fn check_iou(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(1..200), r.random_range(1..8));
    let (pred, truth) = (labels(&mut r, n, c), labels(&mut r, n, c));
    let cm = anchor_uda::metrics::confusion(&pred, &truth, c).map_err(|e| e.to_string())?;
    let got = anchor_uda::metrics::iou(&cm);
    let want = set_iou(&pred, &truth, c);
    for k in 0..c {
        let ok = match (got.per_category[k].iou, want[k]) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !ok {
            return Err(format!(
                "category {k}: {:?} vs {:?}",
                got.per_category[k].iou, want[k]
            ));
        }
    }
    let defined: Vec<f64> = want.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    close(got.miou, miou)
        .then_some(())
        .ok_or(format!("miou {} vs {miou}", got.miou))
}

pub fn oracle_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("construct_anchors", check_construct_anchors),
        ("anchor_distances", check_anchor_distances),
        ("identify_active", check_identify_active),
        (
            "identify_active_by_probability",
            check_identify_by_probability,
        ),
        ("ce_loss", check_ce_loss),
        ("dis_loss", check_dis_loss),
        ("confusion", check_confusion),
        ("iou", check_iou),
    ]
}

/// Runs `check` on `instances` seeds and collects the failures.
pub fn run_check(check: Check, instances: u64, seed: u64) -> Vec<String> {
    (0..instances)
        .filter_map(|i| {
            let s = seed.wrapping_mul(0x9e37_79b9).wrapping_add(i);
            check(s).err().map(|e| format!("instance {i}: {e}"))
        })
        .collect()
}

// ---- small end-to-end setups ---------------------------------------------

/// Default data and model at a size that trains in well under a second.
pub fn small_config(seed: u64) -> anchor_uda::experiment::ExperimentConfig {
    let mut cfg = anchor_uda::experiment::ExperimentConfig::with_seed(seed);
    cfg.data.source_count = 8;
    cfg.data.target_train_count = 8;
    cfg.data.target_eval_count = 4;
    cfg.train.pretrain_iterations = 60;
    cfg.train.warmup_iterations = 30;
    cfg.train.stages = 2;
    cfg.train.iterations_per_stage = 20;
    cfg
}

pub fn small_data(
    cfg: &anchor_uda::experiment::ExperimentConfig,
) -> anchor_uda::experiment::Datasets {
    anchor_uda::experiment::Datasets::generate(cfg).unwrap()
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Relative path and digest of every file below `dir`, sorted.
pub fn tree_digest(dir: &std::path::Path) -> Vec<(String, String)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, String)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, sha256_file(&path)));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

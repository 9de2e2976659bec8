#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fakescope::cgc::{collect_gradients, flatten_encoder, pcgrad_components, pcgrad_project};
use fakescope::codec::{compress, scale_quant_table, QualityFactor, QuantTable};
use fakescope::image::GrayImage;
use fakescope::losses::{
    compute_centers, hsic_rbf_fixed, hsic_value, loss_bce, loss_pair, loss_unpair, median_bandwidth,
    HsicKernel, SeparationMetric,
};
use fakescope::model::{images_tensor, BoundModel, ModelParams, PARAM_NAMES};
use fakescope::synth::{
    build_dataset, gen_image, stratified_batches, DatasetParams, Group, SampleRecord,
};
use fakescope::tape::{Tape, Var};
use fakescope::tensor::Tensor;
use fakescope::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative error, so that gradients at rounding-noise
/// scale are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;
pub const FD_TRIALS: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn q(v: u8) -> QualityFactor {
    QualityFactor::new(v).unwrap()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with `|x| ∈ [min_abs, max_abs)` and random sign, away from kinks.
pub fn rand_away(rng: &mut impl Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(min_abs..max_abs);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ wᵢ·vᵢ` with fixed random weights, so every output coordinate matters.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = rand_tensor(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p, None)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Central-difference check of `f` wrt every input. With `coords`, only that
/// many random coordinates per input are probed. Returns the max relative
/// error.
pub fn fd_check<F>(inputs: &[Tensor], coords: Option<usize>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        t.value(l).item().unwrap()
    };
    let mut r = rng(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("gradient for leaf").clone();
        let idx: Vec<usize> = match coords {
            Some(k) if k < input.numel() => (0..k).map(|_| r.random_range(0..input.numel())).collect(),
            _ => (0..input.numel()).collect(),
        };
        for j in idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let fp = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let fm = eval(&xs);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Same as [`fd_check`] but perturbs model parameters. `coords` random
/// coordinates are probed in each of `names`. A coordinate whose `±h`
/// evaluations straddle a relu/abs kink (the tape's kink signature changes)
/// is not differentiable at that scale and is redrawn.
pub fn model_fd_check<F>(params: &ModelParams, names: &[&str], coords: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &BoundModel) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound).unwrap();
    let grads = tape.backward(loss).unwrap();
    let base = tape.kink_signature();
    let eval = |p: &ModelParams| -> (f64, Vec<bool>) {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let l = f(&mut t, &b).unwrap();
        (t.value(l).item().unwrap(), t.kink_signature())
    };
    let mut r = rng(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = grads.get(name).unwrap().clone();
        let mut probed = 0;
        for _ in 0..coords * 50 {
            if probed == coords {
                break;
            }
            let j = r.random_range(0..analytic.numel());
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let (fp, sp) = eval(&p);
            p.get_mut(name).unwrap().data_mut()[j] -= 2.0 * FD_STEP;
            let (fm, sm) = eval(&p);
            if sp != base || sm != base {
                continue;
            }
            probed += 1;
            worst = worst.max(rel_err(analytic.data()[j], (fp - fm) / (2.0 * FD_STEP)));
        }
        assert_eq!(probed, coords, "{name}: no smooth coordinates found");
    }
    worst
}

pub fn random_images(seed: u64, n: usize) -> Vec<GrayImage> {
    (0..n).map(|i| gen_image(i % 2 == 1, seed * 1000 + i as u64)).collect()
}

fn trials<F: Fn(u64) -> f64>(f: F) -> f64 {
    (0..FD_TRIALS as u64).map(|s| f(s + 1)).fold(0.0, f64::max)
}

/// Max relative finite-difference error of every differentiable op and loss,
/// each over [`FD_TRIALS`] seeded instances.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();

    macro_rules! check {
        ($name:expr, |$r:ident, $seed:ident| $inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
            let e = trials(|$seed| {
                let mut $r = rng($seed);
                let inputs: Vec<Tensor> = $inputs;
                fd_check(&inputs, None, $seed, |$t: &mut Tape, $v: &[Var]| {
                    let out = $body?;
                    weighted_sum($t, out, $seed)
                })
            });
            out.push(($name, e));
        }};
    }

    check!("add", |r, s| vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0), rand_tensor(&mut r, &[3, 4], -2.0, 2.0)], |t, v| t.add(v[0], v[1]));
    check!("sub", |r, s| vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0), rand_tensor(&mut r, &[1], -2.0, 2.0)], |t, v| t.sub(v[0], v[1]));
    check!("mul", |r, s| vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0), rand_tensor(&mut r, &[3, 4], -2.0, 2.0)], |t, v| t.mul(v[0], v[1]));
    check!("mul_broadcast", |r, s| vec![rand_tensor(&mut r, &[1], -2.0, 2.0), rand_tensor(&mut r, &[2, 3], -2.0, 2.0)], |t, v| t.mul(v[0], v[1]));
    check!("div", |r, s| vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0), rand_away(&mut r, &[3, 4], 0.5, 2.0)], |t, v| t.div(v[0], v[1]));
    check!("div_broadcast", |r, s| vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0), rand_away(&mut r, &[1], 0.5, 2.0)], |t, v| t.div(v[0], v[1]));
    check!("abs", |r, s| vec![rand_away(&mut r, &[10], 0.1, 2.0)], |t, v| t.abs(v[0]));
    check!("sqrt", |r, s| vec![rand_tensor(&mut r, &[10], 0.2, 3.0)], |t, v| t.sqrt(v[0]));
    check!("relu", |r, s| vec![rand_away(&mut r, &[10], 0.1, 2.0)], |t, v| t.relu(v[0]));
    check!("sigmoid", |r, s| vec![rand_tensor(&mut r, &[10], -4.0, 4.0)], |t, v| t.sigmoid(v[0]));
    check!("exp", |r, s| vec![rand_tensor(&mut r, &[10], -2.0, 2.0)], |t, v| t.exp(v[0]));
    check!("log", |r, s| vec![rand_tensor(&mut r, &[10], 0.2, 3.0)], |t, v| t.log(v[0]));
    check!("neg", |r, s| vec![rand_tensor(&mut r, &[10], -2.0, 2.0)], |t, v| t.neg(v[0]));
    check!("square", |r, s| vec![rand_tensor(&mut r, &[10], -2.0, 2.0)], |t, v| t.square(v[0]));
    check!("scale", |r, s| vec![rand_tensor(&mut r, &[10], -2.0, 2.0)], |t, v| Ok::<_, fakescope::Error>(t.scale(v[0], -1.7)));
    check!("add_scalar", |r, s| vec![rand_tensor(&mut r, &[10], -2.0, 2.0)], |t, v| t.add_scalar(v[0], 0.3));
    check!("matmul", |r, s| vec![rand_tensor(&mut r, &[3, 4], -1.0, 1.0), rand_tensor(&mut r, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]));
    check!("bmm", |r, s| vec![rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0), rand_tensor(&mut r, &[2, 4, 5], -1.0, 1.0)], |t, v| t.bmm(v[0], v[1]));
    check!("transpose", |r, s| vec![rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.transpose(v[0]));
    check!("reshape", |r, s| vec![rand_tensor(&mut r, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(v[0], &[3, 4]));
    check!("conv2d", |r, s| vec![rand_tensor(&mut r, &[2, 5, 5], -1.0, 1.0), rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| t.conv2d(v[0], v[1], 1, 1));
    check!("conv2d_batched_strided", |r, s| vec![rand_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0), rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| t.conv2d(v[0], v[1], 2, 1));
    check!("add_bias", |r, s| vec![rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0), rand_tensor(&mut r, &[3], -1.0, 1.0)], |t, v| t.add_bias(v[0], v[1], 1));
    check!("sum_all", |r, s| vec![rand_tensor(&mut r, &[3, 4], -1.0, 1.0)], |t, v| t.sum(v[0], None));
    check!("sum_axis", |r, s| vec![rand_tensor(&mut r, &[3, 4, 2], -1.0, 1.0)], |t, v| t.sum(v[0], Some(1)));
    check!("mean_axis", |r, s| vec![rand_tensor(&mut r, &[3, 4], -1.0, 1.0)], |t, v| t.mean(v[0], Some(0)));
    check!("softmax", |r, s| vec![rand_tensor(&mut r, &[3, 5], -2.0, 2.0)], |t, v| t.softmax(v[0]));
    check!("gather_rows", |r, s| vec![rand_tensor(&mut r, &[5, 3], -1.0, 1.0)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    check!("pairwise_sq_dists", |r, s| vec![rand_tensor(&mut r, &[5, 3], -1.0, 1.0)], |t, v| t.pairwise_sq_dists(v[0]));
    check!("bce_with_logits", |r, s| vec![rand_tensor(&mut r, &[6, 1], -3.0, 3.0)], |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]));

    // losses, checked on their own scalar value
    let labels = |r: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect() };
    out.push(("L_tf", trials(|s| {
        let mut r = rng(s);
        let y = labels(&mut r, 8);
        fd_check(&[rand_tensor(&mut r, &[8, 1], -3.0, 3.0)], None, s, |t, v| loss_bce(t, v[0], &y))
    })));
    out.push(("L_cmp", trials(|s| {
        let mut r = rng(s);
        let rows = [0usize, 1, 4, 5];
        let y = [0.0, 1.0, 0.0, 1.0];
        fd_check(&[rand_tensor(&mut r, &[8, 1], -3.0, 3.0)], None, s, |t, v| {
            let g = t.gather_rows(v[0], &rows)?;
            loss_bce(t, g, &y)
        })
    })));
    let groups: Vec<Group> = [0, 1, 2, 3, 0, 1, 2, 3].iter().map(|&g| Group::ALL[g]).collect();
    for (name, metric) in [("L_unpair_l1", SeparationMetric::L1), ("L_unpair_l2", SeparationMetric::L2)] {
        let groups = groups.clone();
        out.push((name, trials(|s| {
            let mut r = rng(s);
            fd_check(&[rand_tensor(&mut r, &[8, 4], -1.0, 1.0)], None, s, |t, v| {
                let c = compute_centers(t, v[0], &groups)?;
                Ok(loss_unpair(t, &c, metric)?.value)
            })
        })));
    }
    let pairs = [(0usize, 4usize), (1, 5), (2, 6), (3, 7)];
    out.push(("L_pair_linear", trials(|s| {
        let mut r = rng(s);
        fd_check(&[rand_tensor(&mut r, &[8, 3], -1.0, 1.0)], None, s, |t, v| {
            Ok(loss_pair(t, v[0], &pairs, HsicKernel::Linear)?.unwrap())
        })
    })));
    // the median bandwidth is a constant of the batch, so the numeric side
    // holds it at its unperturbed value
    out.push(("L_pair_rbf_median", trials(|s| {
        let mut r = rng(s);
        let h = rand_tensor(&mut r, &[8, 3], -1.0, 1.0);
        let bw = |rows: &[usize]| {
            let mut t = Tape::new();
            let x = t.constant(h.clone());
            let g = t.gather_rows(x, rows).unwrap();
            let d = t.pairwise_sq_dists(g).unwrap();
            median_bandwidth(t.value(d))
        };
        let raw: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let cmp: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let (bx, by) = (bw(&cmp), bw(&raw));
        let fixed = fd_check(std::slice::from_ref(&h), None, s, |t, v| {
            let x = t.gather_rows(v[0], &cmp)?;
            let y = t.gather_rows(v[0], &raw)?;
            let d = hsic_rbf_fixed(t, x, y, bx, by)?;
            t.neg(d)
        });
        // analytic gradient of the library loss against the fixed-bandwidth one
        let grad = |fixed_bw: bool| {
            let mut t = Tape::new();
            let v = t.leaf(h.clone(), true);
            let l = if fixed_bw {
                let x = t.gather_rows(v, &cmp).unwrap();
                let y = t.gather_rows(v, &raw).unwrap();
                let d = hsic_rbf_fixed(&mut t, x, y, bx, by).unwrap();
                t.neg(d).unwrap()
            } else {
                loss_pair(&mut t, v, &pairs, HsicKernel::RbfMedian).unwrap().unwrap()
            };
            t.backward(l).unwrap().wrt(v).unwrap().clone()
        };
        let (a, b) = (grad(false), grad(true));
        let same = a.data().iter().zip(b.data()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max);
        fixed.max(same)
    })));

    // model: encoder output and the full objective wrt sampled parameters
    out.push(("model_sum_h_e", trials(|s| {
        let p = ModelParams::init(s);
        let imgs = random_images(s, 2);
        model_fd_check(&p, &["conv1.weight", "conv2.weight", "conv3.weight"], 4, s, |t, m| {
            let x = t.constant(images_tensor(&imgs)?);
            let (_, h_e) = m.encode(t, x)?;
            t.sum(h_e, None)
        })
    })));
    out.push(("model_objective", trials(|s| {
        let p = ModelParams::init(s + 100);
        let imgs: Vec<GrayImage> = {
            let mut v = random_images(s + 100, 4);
            let c: Vec<GrayImage> = v.iter().map(|i| compress(i, q(40)).unwrap()).collect();
            v.extend(c);
            v
        };
        let groups: Vec<Group> = (0..8)
            .map(|i| Group::ALL[(i % 2) * 2 + usize::from(i >= 4)])
            .collect();
        let pairs = [(0usize, 4usize), (1, 5), (2, 6), (3, 7)];
        model_fd_check(&p, &PARAM_NAMES, 2, s, |t, m| {
            let x = t.constant(images_tensor(&imgs)?);
            let f = m.forward(t, x, false)?;
            let y: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
            let l_tf = loss_bce(t, f.logit_tf, &y)?;
            let c = compute_centers(t, f.h_h, &groups)?;
            let l_un = loss_unpair(t, &c, SeparationMetric::L1)?.value;
            let l_pair = loss_pair(t, f.h_e, &pairs, HsicKernel::Linear)?.unwrap();
            let l_pair = t.scale(l_pair, 0.004);
            let yc: Vec<f64> = (0..8).map(|i| f64::from(u8::from(i >= 4))).collect();
            let l_cmp = loss_bce(t, f.logit_cmp, &yc)?;
            let a = t.add(l_tf, l_un)?;
            let b = t.add(a, l_pair)?;
            t.add(b, l_cmp)
        })
    })));
    out
}

/// Direct transcription of `trace(K·H·L·H)/(n−1)²` with explicit loops.
pub fn brute_hsic(x: &[Vec<f64>], y: &[Vec<f64>], rbf: bool) -> f64 {
    let n = x.len();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let median = |z: &[Vec<f64>]| {
        let mut v = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                v.push(sq(&z[i], &z[j]));
            }
        }
        v.sort_by(f64::total_cmp);
        let m = if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
        };
        if m == 0.0 {
            1.0
        } else {
            m
        }
    };
    let gram = |z: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let bw = if rbf { median(z) } else { 1.0 };
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if rbf {
                            (-sq(&z[i], &z[j]) / bw).exp()
                        } else {
                            z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum()
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let mm = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
            .collect()
    };
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64).collect())
        .collect();
    let k = gram(x);
    let l = gram(y);
    let prod = mm(&mm(&mm(&k, &h), &l), &h);
    (0..n).map(|i| prod[i][i]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

pub struct HsicReport {
    pub max_abs_diff: f64,
    pub min_self_linear: f64,
    pub hand: f64,
}

pub fn hsic_suite(trials: u64) -> HsicReport {
    let mut max_abs_diff: f64 = 0.0;
    let mut min_self_linear = f64::INFINITY;
    for s in 0..trials {
        let mut r = rng(1000 + s);
        let n = r.random_range(2..=16);
        let d = r.random_range(1..=6);
        let x = rand_tensor(&mut r, &[n, d], -2.0, 2.0);
        let y = rand_tensor(&mut r, &[n, d], -2.0, 2.0);
        for (kernel, rbf) in [(HsicKernel::Linear, false), (HsicKernel::RbfMedian, true)] {
            let ours = hsic_value(&x, &y, kernel).unwrap();
            max_abs_diff = max_abs_diff.max((ours - brute_hsic(&to_rows(&x), &to_rows(&y), rbf)).abs());
        }
        min_self_linear = min_self_linear.min(hsic_value(&x, &x, HsicKernel::Linear).unwrap());
    }
    let hand_x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
    HsicReport {
        max_abs_diff,
        min_self_linear,
        hand: hsic_value(&hand_x, &hand_x, HsicKernel::Linear).unwrap(),
    }
}

pub struct PcgradReport {
    pub min_post_dot: f64,
    pub passthrough_bitwise: bool,
    pub hand: Vec<f64>,
}

pub fn pcgrad_suite(trials: u64) -> PcgradReport {
    let mut min_post_dot = f64::INFINITY;
    let mut passthrough_bitwise = true;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for s in 0..trials {
        let mut r = rng(7_000_000 + s);
        let d = r.random_range(2..=512);
        let g: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let (gp, hp) = pcgrad_components(&g, &h).unwrap();
        min_post_dot = min_post_dot.min(dot(&gp, &h)).min(dot(&hp, &g));
        if dot(&g, &h) >= 0.0 {
            let sum = pcgrad_project(&g, &h).unwrap();
            let plain: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a + b).collect();
            passthrough_bitwise &= sum
                .iter()
                .zip(&plain)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    PcgradReport {
        min_post_dot,
        passthrough_bitwise,
        hand: pcgrad_project(&[1.0, 0.0], &[-1.0, 1.0]).unwrap(),
    }
}

/// Seeded 8-sample batch: 4 originals (alternating real/fake) and their
/// compressed copies. Returns records with rows `(i, i+4)` paired.
pub fn paired_batch(seed: u64) -> Vec<SampleRecord> {
    let mut recs = Vec::new();
    for i in 0..4u32 {
        let fake = i % 2 == 1;
        let image_seed = seed * 100 + u64::from(i);
        recs.push(SampleRecord {
            image: gen_image(fake, image_seed),
            fake,
            compressed: false,
            pair_id: Some(i),
            source_q: None,
            image_seed,
        });
    }
    for i in 0..4 {
        let mut c = recs[i].clone();
        c.image = compress(&c.image, q(40)).unwrap();
        c.compressed = true;
        c.source_q = Some(q(40));
        recs.push(c);
    }
    recs
}

/// Max abs difference between `−∇L_cmp` from a plain backward pass and the
/// encoder gradient obtained through a backward-negating boundary.
pub fn reversal_max_diff(seed: u64) -> f64 {
    let params = ModelParams::init(seed);
    let recs = paired_batch(seed);
    let y: Vec<f64> = recs.iter().map(|r| r.y_cmp()).collect();
    let grad = |reverse: bool| -> Vec<f64> {
        let mut t = Tape::new();
        let m = params.bind(&mut t, true);
        let x = t.constant(images_tensor(recs.iter().map(|r| &r.image)).unwrap());
        let f = m.forward(&mut t, x, reverse).unwrap();
        let l = loss_bce(&mut t, f.logit_cmp, &y).unwrap();
        if reverse {
            flatten_encoder(&t.backward(l).unwrap())
        } else {
            let (b, _) = collect_gradients(&t, None, Some(l)).unwrap();
            b.cmp.unwrap().iter().map(|g| -g).collect()
        }
    };
    let (a, b) = (grad(false), grad(true));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct CodecReport {
    pub q50_identity: bool,
    pub constant_fixed_points: bool,
    pub min_psnr_q100: f64,
    /// `(q, mean MSE)` for q = 90, 80, ..., 30.
    pub mse_by_q: Vec<(u8, f64)>,
}

impl CodecReport {
    pub fn mse_strictly_increasing(&self) -> bool {
        self.mse_by_q.windows(2).all(|w| w[1].1 > w[0].1)
    }
}

pub fn codec_suite() -> CodecReport {
    let base = QuantTable::luminance();
    let q50_identity = scale_quant_table(&base, q(50)) == base;
    let flat = GrayImage::filled(32, 32, 128.0);
    let constant_fixed_points = (1..=100).all(|v| compress(&flat, q(v)).unwrap() == flat);
    let imgs: Vec<GrayImage> = (0..100).map(|s| gen_image(s % 2 == 1, 90_000 + s)).collect();
    let min_psnr_q100 = imgs
        .iter()
        .map(|i| i.psnr(&compress(i, q(100)).unwrap()))
        .fold(f64::INFINITY, f64::min);
    let mse_by_q = (3..=9)
        .rev()
        .map(|k| {
            let qv = k * 10;
            let m = imgs.iter().map(|i| i.mse(&compress(i, q(qv)).unwrap())).sum::<f64>() / imgs.len() as f64;
            (qv, m)
        })
        .collect();
    CodecReport {
        q50_identity,
        constant_fixed_points,
        min_psnr_q100,
        mse_by_q,
    }
}

/// Exact pair count and pair-id bijection for `build_dataset(100, 0.2, 40)`.
pub fn pairs_bijective_100() -> bool {
    let split = build_dataset(&DatasetParams::new(100, 0.2, q(40), 1)).unwrap();
    let raw: BTreeSet<u32> = split.records.iter().filter(|r| !r.compressed).filter_map(|r| r.pair_id).collect();
    let cmp: Vec<u32> = split.records.iter().filter(|r| r.compressed).filter_map(|r| r.pair_id).collect();
    let cmp_set: BTreeSet<u32> = cmp.iter().copied().collect();
    split.records.iter().filter(|r| !r.compressed).count() == 100
        && cmp.len() == 20
        && cmp_set.len() == 20
        && raw == cmp_set
}

/// Every batch of one epoch over the default dataset holds all four groups.
pub fn default_batches_cover_groups(seed: u64) -> bool {
    let split = build_dataset(&DatasetParams::new(2000, 0.2, q(40), seed)).unwrap();
    let batches = stratified_batches(&split, 128, &mut rng(seed)).unwrap();
    batches.iter().all(|b| {
        let mut seen = [0usize; 4];
        for &i in b {
            seen[split.records[i].group() as usize] += 1;
        }
        seen.iter().all(|&c| c > 0)
    })
}

/// Two-layer logistic probe (1024 → 16 relu → 1) trained full-batch with
/// Adam on raw images; returns held-out accuracy.
pub fn probe_accuracy(n_train: usize, n_test: usize, steps: usize) -> f64 {
    let make = |offset: u64, n: usize| -> (Tensor, Vec<f64>) {
        let imgs: Vec<GrayImage> = (0..n).map(|i| gen_image(i % 2 == 1, offset + i as u64)).collect();
        let x = images_tensor(&imgs).unwrap().reshaped(vec![n, 1024]).unwrap();
        (x, (0..n).map(|i| (i % 2) as f64).collect())
    };
    let (xtr, ytr) = make(500_000, n_train);
    let (xte, yte) = make(600_000, n_test);
    let mut r = rng(42);
    let mut ps = vec![
        rand_tensor(&mut r, &[1024, 16], -0.03, 0.03),
        Tensor::zeros(&[16]),
        rand_tensor(&mut r, &[16, 1], -0.25, 0.25),
        Tensor::zeros(&[1]),
    ];
    let logits = |t: &mut Tape, x: &Tensor, ps: &[Tensor], train: bool| -> Var {
        let xv = t.constant(x.clone());
        let vs: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| if train { t.param(format!("p{i}"), p.clone()) } else { t.constant(p.clone()) })
            .collect();
        let h = t.matmul(xv, vs[0]).unwrap();
        let h = t.add_bias(h, vs[1], 1).unwrap();
        let h = t.relu(h).unwrap();
        let o = t.matmul(h, vs[2]).unwrap();
        t.add_bias(o, vs[3], 1).unwrap()
    };
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 1e-2);
    let mut m: Vec<Vec<f64>> = ps.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut v = m.clone();
    for step in 1..=steps as i32 {
        let mut t = Tape::new();
        let z = logits(&mut t, &xtr, &ps, true);
        let l = loss_bce(&mut t, z, &ytr).unwrap();
        let g = t.backward(l).unwrap();
        for (i, p) in ps.iter_mut().enumerate() {
            let gi = g.get(&format!("p{i}")).unwrap();
            for j in 0..p.numel() {
                let gj = gi.data()[j];
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * gj;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * gj * gj;
                let mh = m[i][j] / (1.0 - b1.powi(step));
                let vh = v[i][j] / (1.0 - b2.powi(step));
                p.data_mut()[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    let mut t = Tape::new();
    let z = logits(&mut t, &xte, &ps, false);
    let z = t.value(z).data().to_vec();
    z.iter().zip(&yte).filter(|(z, y)| (**z > 0.0) == (**y > 0.5)).count() as f64 / n_test as f64
}

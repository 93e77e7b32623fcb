//! Central-difference checks of every differentiable piece, each over a
//! batch of random seeds. Every check returns the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traumakit::nn::gru::{BiGru, Gru};
use traumakit::nn::loss::{dice_loss_with_grad, weighted_ce_with_grad, DICE_EPS};
use traumakit::nn::ops::{self, Reduce};
use traumakit::nn::{gradient_check, ParamSet, Tensor};
use traumakit::traumanet::{Batch, TraumaNet, TraumaNetConfig};
use traumakit::{LabelGroup, LabelSchema, Result};

pub const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `f(x) = <R, op(x)>` for a fixed random `R`; the analytic gradient is the
/// op's backward applied to `R`.
fn check_unary(
    x: &Tensor,
    seed: u64,
    fwd: impl Fn(&Tensor) -> Result<Tensor>,
    bwd: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
) -> f64 {
    let y = fwd(x).unwrap();
    let r = Tensor::randn(y.shape(), 1.0, &mut rng(seed ^ 0xABCD));
    gradient_check(
        |x| {
            let y = fwd(x)?;
            Ok((dot(&r, &y), bwd(x, &y, &r)?))
        },
        x,
        H,
    )
    .unwrap()
}

pub fn conv2d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (stride, pad) = [(1, 1), (2, 1), (1, 0), (2, 0)][(seed % 4) as usize];
    let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut g);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut g);
    let b = Tensor::randn(&[4], 0.5, &mut g);
    let ex = check_unary(&x, seed, |x| ops::conv2d(x, &w, &b, stride, pad), |x, _, r| Ok(ops::conv2d_backward(x, &w, r, stride, pad)?.dx));
    let ew = check_unary(&w, seed, |w| ops::conv2d(&x, w, &b, stride, pad), |w, _, r| Ok(ops::conv2d_backward(&x, w, r, stride, pad)?.dw));
    let eb = check_unary(&b, seed, |b| ops::conv2d(&x, &w, b, stride, pad), |_, _, r| Ok(ops::conv2d_backward(&x, &w, r, stride, pad)?.db));
    ex.max(ew).max(eb)
}

/// The documented example: conv2d + relu + sum on a random 1x3x8x8 input.
pub fn conv2d_relu_sum(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut g);
    let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut g);
    let b = Tensor::randn(&[2], 0.1, &mut g);
    gradient_check(
        |x| {
            let pre = ops::conv2d(x, &w, &b, 1, 1)?;
            let y = ops::relu(&pre);
            let dpre = ops::relu_backward(&pre, &Tensor::full(y.shape(), 1.0))?;
            Ok((y.sum(), ops::conv2d_backward(x, &w, &dpre, 1, 1)?.dx))
        },
        &x,
        H,
    )
    .unwrap()
}

pub fn conv3d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (stride, pad) = [(1, 1), (2, 1), (1, 0)][(seed % 3) as usize];
    let x = Tensor::randn(&[1, 2, 5, 6, 5], 1.0, &mut g);
    let w = Tensor::randn(&[3, 2, 3, 3, 3], 0.5, &mut g);
    let b = Tensor::randn(&[3], 0.5, &mut g);
    let ex = check_unary(&x, seed, |x| ops::conv3d(x, &w, &b, stride, pad), |x, _, r| Ok(ops::conv3d_backward(x, &w, r, stride, pad)?.dx));
    let ew = check_unary(&w, seed, |w| ops::conv3d(&x, w, &b, stride, pad), |w, _, r| Ok(ops::conv3d_backward(&x, w, r, stride, pad)?.dw));
    let eb = check_unary(&b, seed, |b| ops::conv3d(&x, &w, b, stride, pad), |_, _, r| Ok(ops::conv3d_backward(&x, &w, r, stride, pad)?.db));
    ex.max(ew).max(eb)
}

pub fn maxpool2d(seed: u64) -> f64 {
    let x = Tensor::randn(&[2, 3, 6, 8], 1.0, &mut rng(seed));
    check_unary(&x, seed, |x| Ok(ops::maxpool2d(x)?.y), |x, _, r| ops::maxpool_backward(x.shape(), &ops::maxpool2d(x)?.argmax, r))
}

pub fn maxpool3d(seed: u64) -> f64 {
    let x = Tensor::randn(&[1, 2, 4, 6, 4], 1.0, &mut rng(seed));
    check_unary(&x, seed, |x| Ok(ops::maxpool3d(x)?.y), |x, _, r| ops::maxpool_backward(x.shape(), &ops::maxpool3d(x)?.argmax, r))
}

pub fn upsample(seed: u64) -> f64 {
    let x2 = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng(seed));
    let x3 = Tensor::randn(&[1, 2, 2, 3, 2], 1.0, &mut rng(seed + 1));
    let e2 = check_unary(&x2, seed, |x| ops::upsample2x(x, 2), |x, _, r| ops::upsample2x_backward(x.shape(), r, 2));
    let e3 = check_unary(&x3, seed, |x| ops::upsample2x(x, 3), |x, _, r| ops::upsample2x_backward(x.shape(), r, 3));
    e2.max(e3)
}

pub fn dense(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = Tensor::randn(&[4, 5], 1.0, &mut g);
    let w = Tensor::randn(&[3, 5], 0.5, &mut g);
    let b = Tensor::randn(&[3], 0.5, &mut g);
    let ex = check_unary(&x, seed, |x| ops::dense(x, &w, &b), |x, _, r| Ok(ops::dense_backward(x, &w, r)?.dx));
    let ew = check_unary(&w, seed, |w| ops::dense(&x, w, &b), |w, _, r| Ok(ops::dense_backward(&x, w, r)?.dw));
    let eb = check_unary(&b, seed, |b| ops::dense(&x, &w, b), |_, _, r| Ok(ops::dense_backward(&x, &w, r)?.db));
    ex.max(ew).max(eb)
}

pub fn relu(seed: u64) -> f64 {
    let x = Tensor::randn(&[3, 7], 1.0, &mut rng(seed));
    check_unary(&x, seed, |x| Ok(ops::relu(x)), |x, _, r| ops::relu_backward(x, r))
}

pub fn sigmoid(seed: u64) -> f64 {
    let x = Tensor::randn(&[3, 7], 2.0, &mut rng(seed));
    check_unary(&x, seed, |x| Ok(ops::sigmoid(x)), |_, y, r| ops::sigmoid_backward(y, r))
}

pub fn tanh(seed: u64) -> f64 {
    let x = Tensor::randn(&[3, 7], 1.5, &mut rng(seed));
    check_unary(&x, seed, |x| Ok(ops::tanh(x)), |_, y, r| ops::tanh_backward(y, r))
}

pub fn softmax(seed: u64) -> f64 {
    let x = Tensor::randn(&[2, 4, 3], 1.5, &mut rng(seed));
    (0..3)
        .map(|axis| check_unary(&x, seed + axis as u64, |x| ops::softmax(x, axis), |_, y, r| ops::softmax_backward(y, r, axis)))
        .fold(0.0, f64::max)
}

pub fn reductions(seed: u64) -> f64 {
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng(seed));
    let mut worst = 0.0f64;
    for kind in [Reduce::Sum, Reduce::Mean, Reduce::Max] {
        for axis in 0..3 {
            let e = check_unary(
                &x,
                seed,
                |x| Ok(ops::reduce(x, axis, kind)?.0),
                |x, _, r| {
                    let (_, arg) = ops::reduce(x, axis, kind)?;
                    ops::reduce_backward(x.shape(), axis, kind, &arg, r)
                },
            );
            worst = worst.max(e);
        }
    }
    worst
}

fn param_check<F>(ps: &ParamSet, loss: F) -> f64
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    gradient_check(
        |flat| {
            let p = ps.unflatten(flat)?;
            let (l, g) = loss(&p)?;
            Ok((l, g.flatten()))
        },
        &ps.flatten(),
        H,
    )
    .unwrap()
}

fn randomize(ps: &mut ParamSet, std: f64, g: &mut ChaCha8Rng) {
    for t in ps.tensors_mut() {
        *t = Tensor::randn(t.shape(), std, g);
    }
}

pub fn gru(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut ps = ParamSet::new();
    let cell = Gru::new(&mut ps, "gru", 3, 4, &mut g);
    randomize(&mut ps, 0.5, &mut g);
    let x = Tensor::randn(&[2, 5, 3], 1.0, &mut g);
    let r = Tensor::randn(&[2, 5, 4], 1.0, &mut g);
    let ep = param_check(&ps, |p| {
        let (y, cache) = cell.forward(p, &x)?;
        let mut grads = p.zeros_like();
        cell.backward(p, &cache, &r, &mut grads)?;
        Ok((dot(&r, &y), grads))
    });
    let ex = gradient_check(
        |x| {
            let (y, cache) = cell.forward(&ps, x)?;
            let mut grads = ps.zeros_like();
            Ok((dot(&r, &y), cell.backward(&ps, &cache, &r, &mut grads)?))
        },
        &x,
        H,
    )
    .unwrap();
    ep.max(ex)
}

pub fn bigru(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut ps = ParamSet::new();
    let cell = BiGru::new(&mut ps, "rnn", 3, 2, &mut g);
    randomize(&mut ps, 0.5, &mut g);
    let x = Tensor::randn(&[2, 4, 3], 1.0, &mut g);
    let r = Tensor::randn(&[2, 4, 4], 1.0, &mut g);
    let ep = param_check(&ps, |p| {
        let (y, cache) = cell.forward(p, &x)?;
        let mut grads = p.zeros_like();
        cell.backward(p, &cache, &r, &mut grads)?;
        Ok((dot(&r, &y), grads))
    });
    let ex = gradient_check(
        |x| {
            let (y, cache) = cell.forward(&ps, x)?;
            let mut grads = ps.zeros_like();
            Ok((dot(&r, &y), cell.backward(&ps, &cache, &r, &mut grads)?))
        },
        &x,
        H,
    )
    .unwrap();
    ep.max(ex)
}

pub fn dice(seed: u64) -> f64 {
    let mut g = rng(seed);
    let pred = Tensor::uniform(&[8, 8], 0.05, 0.95, &mut g);
    let truth = Tensor::from_vec(&[64], (0..64).map(|_| if g.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect())
        .unwrap()
        .reshape(&[8, 8])
        .unwrap();
    gradient_check(|p| dice_loss_with_grad(p, &truth, DICE_EPS), &pred, H).unwrap()
}

/// Two 3-state groups and a binary group with non-unit weights and a
/// non-zero healthy index.
pub fn mixed_schema() -> LabelSchema {
    let mut a = LabelGroup::new("a", &["ok", "low", "high"]);
    a.weights = vec![1.0, 2.0, 4.0];
    let mut b = LabelGroup::new("b", &["low", "ok", "high"]);
    b.healthy = 1;
    b.weights = vec![1.5, 0.5, 3.0];
    let mut c = LabelGroup::new("c", &["ok", "bad"]);
    c.weights = vec![1.0, 6.0];
    LabelSchema { groups: vec![a, b, c] }
}

pub fn weighted_ce(seed: u64) -> f64 {
    let mut g = rng(seed);
    let schema = mixed_schema();
    let c = schema.total_states();
    let logits = Tensor::randn(&[5, c], 1.5, &mut g);
    let mut q = vec![0.0; 5 * c];
    for row in q.chunks_mut(c) {
        for (grp, o) in schema.groups.iter().zip(schema.offsets()) {
            let raw: Vec<f64> = (0..grp.states.len()).map(|_| g.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            for (k, v) in raw.iter().enumerate() {
                row[o + k] = v / s;
            }
        }
    }
    let targets = Tensor::from_vec(&[5, c], q).unwrap();
    gradient_check(|z| weighted_ce_with_grad(z, &targets, &schema), &logits, H).unwrap()
}

/// Full classifier loss (CE + λ·aux Dice) at T=2, H=W=16, in every parameter.
pub fn traumanet_total_loss(seed: u64) -> f64 {
    let schema = LabelSchema::default();
    let cfg = TraumaNetConfig {
        seq_len: 2,
        height: 16,
        width: 16,
        widths: vec![3, 4, 4, 5],
        hidden: 3,
        ..TraumaNetConfig::for_schema(&schema)
    };
    let mut net = TraumaNet::new(cfg.clone(), seed).unwrap();
    let mut g = rng(seed + 1000);
    // The head starts at zero; randomise it so gradient reaches every layer.
    let ids: Vec<usize> = net.params.names().iter().enumerate().filter(|(_, n)| n.starts_with("head")).map(|(i, _)| i).collect();
    for i in ids {
        let shape = net.params.tensors()[i].shape().to_vec();
        net.params.tensors_mut()[i] = Tensor::randn(&shape, 0.5, &mut g);
    }
    let (b, t) = (2, cfg.seq_len);
    let input = Tensor::uniform(&[b, t, 3, 16, 16], 0.0, 1.0, &mut g);
    let c = cfg.n_classes;
    let mut q = vec![0.0; b * t * c];
    for row in q.chunks_mut(c) {
        for (grp, o) in schema.groups.iter().zip(schema.offsets()) {
            let v: f64 = g.random();
            row[o + g.random_range(1..grp.states.len())] = v;
            row[o + grp.healthy] += 1.0 - v;
        }
    }
    let masks = cfg.aux_factors().map(|f| {
        let (h, w) = (16 / f, 16 / f);
        let n = b * t * cfg.aux_channels * h * w;
        let m = (0..n).map(|_| if g.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[b, t, cfg.aux_channels, h, w], m).unwrap()
    });
    let batch = Batch {
        input,
        targets: Tensor::from_vec(&[b * t, c], q).unwrap(),
        masks,
    };
    param_check(&net.params.clone(), |p| {
        let (l, gr) = net.loss_and_grad(p, &batch, &schema)?;
        Ok((l.total, gr))
    })
}

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: &[Case] = &[
    ("conv2d", conv2d),
    ("conv2d+relu+sum", conv2d_relu_sum),
    ("conv3d", conv3d),
    ("maxpool2d", maxpool2d),
    ("maxpool3d", maxpool3d),
    ("upsample2x", upsample),
    ("dense", dense),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("softmax", softmax),
    ("reduce sum/mean/max", reductions),
    ("gru", gru),
    ("bigru", bigru),
    ("dice_loss", dice),
    ("weighted_ce", weighted_ce),
    ("traumanet total_loss", traumanet_total_loss),
];

/// Worst relative error of each case over `seeds`.
pub fn run_all(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    CASES
        .iter()
        .map(|(name, f)| (*name, seeds.clone().map(f).fold(0.0, f64::max)))
        .collect()
}

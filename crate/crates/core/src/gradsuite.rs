//! Named gradient checks over every differentiable op and composite block,
//! run in 64-bit with random shapes. Used by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{Conv2d, Param};
use crate::proposal::{assign_targets, stage1_loss, LevelPrediction};
use crate::rg_block::{build_kernels, channel_correlation, spatial_scale_correlation};
use crate::roi_head::{stage2_loss, Dsa, HeadOutput, RoiHead, Stage2Sample};
use crate::sm_block::{encode_height, encode_width, fuse};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
use crate::tensor::{
    adaptive_avg_pool, bce_with_logits, bilinear_resize, concat, conv2d, depthwise_xcorr, focal_loss, linear, masked_l1, matmul,
    max_pool2d, roi_align, smooth_l1, Conv2dSpec, FocalParams, RoiBox, Tensor,
};

pub const TOLERANCE: f64 = 1e-4;

type T = Tensor<f64>;
type Case = fn(&mut ChaCha8Rng, &GradCheckOptions) -> Result<f64>;

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Runs `f` once on concrete inputs to build a fixed probe, then checks it.
fn check(rng: &mut ChaCha8Rng, opts: &GradCheckOptions, inputs: &[T], f: impl Fn(&[T]) -> Result<T>) -> Result<f64> {
    let probe = rand(rng, f(inputs)?.shape());
    Ok(grad_check(|t| Ok(f(t)?.mul(&probe)?.sum()), inputs, opts)?.max_rel_error)
}

fn case_linear(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let i = [rand(rng, &[m, k]), rand(rng, &[k, n]), rand(rng, &[n])];
    check(rng, o, &i, |t| linear(&t[0], &t[1], Some(&t[2])))
}

fn case_matmul(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let i = [rand(rng, &[m, k]), rand(rng, &[k, n])];
    check(rng, o, &i, |t| matmul(&t[0], &t[1]))
}

fn case_softmax(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    let axis = rng.random_range(0..2);
    let x = rand(rng, &shape);
    check(rng, o, &[x], |t| t[0].softmax(axis))
}

fn case_elementwise(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let shape = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
    let i = [rand(rng, &shape), rand(rng, &shape)];
    check(rng, o, &i, |t| {
        let a = t[0].mul(&t[1])?.add(&t[0].sigmoid())?.sub(&t[1].relu())?.scale(1.5).add_scalar(0.2);
        Ok(concat(&[a, t[1].clone()], 0)?.reshape(&[2 * shape[0], shape[1] * shape[2]])?.permute(&[1, 0])?.mean())
    })
}

fn case_channel_ops(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let i = [rand(rng, &[c, h, w]), rand(rng, &[c])];
    check(rng, o, &i, |t| t[0].mul_channel(&t[1])?.add(&t[1].broadcast_hw(h, w)?))
}

fn case_conv2d(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(3..6), rng.random_range(3..6));
    let spec = Conv2dSpec { stride: rng.random_range(1..3), padding: 1 };
    let i = [rand(rng, &[c, h, w]), rand(rng, &[2, c, 3, 3]), rand(rng, &[2])];
    check(rng, o, &i, |t| conv2d(&t[0], &t[1], Some(&t[2]), spec))
}

fn case_depthwise_xcorr(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(3..6), rng.random_range(3..6));
    let (kh, kw) = ([1, 3][rng.random_range(0..2)], [1, 3][rng.random_range(0..2)]);
    let i = [rand(rng, &[c, h, w]), rand(rng, &[c, kh, kw])];
    check(rng, o, &i, |t| depthwise_xcorr(&t[0], &t[1]))
}

fn case_max_pool(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(3..7), rng.random_range(3..7));
    let x = rand(rng, &[c, h, w]);
    check(rng, o, &[x], |t| max_pool2d(&t[0], 3, 2, 1))
}

fn case_adaptive_pool(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(2..7));
    let (oh, ow) = (rng.random_range(1..=h), rng.random_range(1..=w));
    let x = rand(rng, &[c, h, w]);
    check(rng, o, &[x], |t| adaptive_avg_pool(&t[0], oh, ow))
}

fn case_bilinear(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5));
    let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
    let x = rand(rng, &[c, h, w]);
    check(rng, o, &[x], |t| bilinear_resize(&t[0], oh, ow))
}

fn case_roi_align(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(4..8), rng.random_range(4..8));
    let boxes: Vec<RoiBox> = (0..2)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..w as f32 * 4.0), rng.random_range(0.0..h as f32 * 4.0));
            RoiBox::new(x, y, x + rng.random_range(4.0..20.0), y + rng.random_range(4.0..20.0))
        })
        .collect();
    let res = [4, 8][rng.random_range(0..2)];
    let x = rand(rng, &[c, h, w]);
    check(rng, o, &[x], |t| roi_align(&t[0], &boxes, 0.25, res))
}

fn case_focal(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let n = rng.random_range(1..12);
    let y = Tensor::from_fn(&[n], |_| if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.0..0.99) });
    let x = Tensor::from_fn(&[n], |_| rng.random_range(-3.0..3.0));
    Ok(grad_check(|v| focal_loss(&v[0], &y, FocalParams::default()), &[x], o)?.max_rel_error)
}

fn case_bce(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let n = rng.random_range(1..12);
    let y = Tensor::from_fn(&[n], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let x = Tensor::from_fn(&[n], |_| rng.random_range(-3.0..3.0));
    Ok(grad_check(|v| bce_with_logits(&v[0], &y), &[x], o)?.max_rel_error)
}

fn case_smooth_l1(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let n = rng.random_range(1..12);
    let (x, t) = (Tensor::from_fn(&[n], |_| rng.random_range(-3.0..3.0)), Tensor::from_fn(&[n], |_| rng.random_range(-3.0..3.0)));
    Ok(grad_check(|v| smooth_l1(&v[0], &t, 1.0), &[x], o)?.max_rel_error)
}

fn case_masked_l1(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let n = rng.random_range(1..12);
    let (x, t) = (Tensor::from_fn(&[n], |_| rng.random_range(-3.0..3.0)), Tensor::from_fn(&[n], |_| rng.random_range(-3.0..3.0)));
    let m = Tensor::from_fn(&[n], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    Ok(grad_check(|v| masked_l1(&v[0], &t, &m), &[x], o)?.max_rel_error)
}

fn case_sm_block(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (c, s) = (8, [2, 4][rng.random_range(0..2)]);
    let g = s;
    let hidden = rng.random_range(1..4);
    let i = [rand(rng, &[c, g, g]), rand(rng, &[c, c]), rand(rng, &[c, c]), rand(rng, &[c, hidden]), rand(rng, &[hidden, 2 * c])];
    check(rng, o, &i, |t| fuse(&encode_height(&t[0], &t[1], s)?, &encode_width(&t[0], &t[2], s)?, &t[3], &t[4]))
}

fn case_rg_block(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let c = rng.random_range(1..4);
    let (hs, ws, h, w) = (rng.random_range(3..7), rng.random_range(3..7), rng.random_range(3..6), rng.random_range(3..6));
    let i = [rand(rng, &[c, hs, ws]), rand(rng, &[c, h, w]), rand(rng, &[c, 2 * c, 1, 1]), rand(rng, &[c])];
    check(rng, o, &i, |t| {
        let conv = Conv2d { weight: Param { name: "w".into(), tensor: t[2].clone() }, bias: Param { name: "b".into(), tensor: t[3].clone() }, spec: Conv2dSpec::default() };
        channel_correlation(&t[0], &spatial_scale_correlation(&build_kernels(&t[0])?, &t[1])?, &conv)
    })
}

fn case_dsa(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let c = [2, 4][rng.random_range(0..2)];
    let r = [2, 4][rng.random_range(0..2)];
    let d = Dsa::<f64>::new(c, rng);
    let i = [
        rand(rng, &[c, r, r]),
        rand(rng, &[2, c, r, r]),
        d.conv1.weight.tensor.detach(),
        d.conv2.weight.tensor.detach(),
        d.conv3.weight.tensor.detach(),
        d.conv3.bias.tensor.detach(),
    ];
    check(rng, o, &i, |t| {
        let mut dd = d.clone();
        dd.conv1.weight.tensor = t[2].clone();
        dd.conv2.weight.tensor = t[3].clone();
        dd.conv3.weight.tensor = t[4].clone();
        dd.conv3.bias.tensor = t[5].clone();
        dd.fuse_batched(&t[0], &t[1])
    })
}

/// Smallest |pre-activation| over both ReLUs of the head.
fn relu_margin(head: &RoiHead<f64>, x: &T) -> Result<f64> {
    let n = x.shape()[0];
    let z1 = head.fc1.forward(&x.reshape(&[n, x.numel() / n])?)?;
    let z2 = head.fc2.forward(&z1.relu())?;
    Ok(z1.data().iter().chain(z2.data()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

fn case_roi_head(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let c = 2;
    // Redraw until no ReLU input sits within finite-difference reach of its kink.
    let (head, x) = loop {
        let mut head = RoiHead::<f64>::new(c, 6, [4, 8], rng);
        head.cls.weight.tensor = rand(rng, &[6, 1]);
        head.reg.weight.tensor = rand(rng, &[6, 4]);
        let x = rand(rng, &[3, c, 8, 8]);
        if relu_margin(&head, &x)? > 1e-2 {
            break (head, x);
        }
    };
    let i = [x, head.fc1.weight.tensor.detach(), head.fc2.weight.tensor.detach(), head.reg.weight.tensor.detach()];
    let (pl, pd) = (rand(rng, &[3, 1]), rand(rng, &[3, 4]));
    Ok(grad_check(
        |t| {
            let mut h = head.clone();
            h.fc1.weight.tensor = t[1].clone();
            h.fc2.weight.tensor = t[2].clone();
            h.reg.weight.tensor = t[3].clone();
            let out = h.head_forward(&t[0])?;
            out.logits.mul(&pl)?.sum().add(&out.deltas.mul(&pd)?.sum())
        },
        &i,
        o,
    )?
    .max_rel_error)
}

fn case_stage1_loss(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
    let gt = [RoiBox::new(x, y, x + rng.random_range(8.0..30.0), y + rng.random_range(8.0..30.0))];
    let targets = assign_targets(&gt, (64, 64))?;
    let inputs: Vec<T> = targets
        .levels
        .iter()
        .flat_map(|l| [Tensor::from_fn(&[1, l.height, l.width], |_| rng.random_range(-2.0..2.0)), Tensor::from_fn(&[2, l.height, l.width], |_| rng.random_range(-1.0..1.0))])
        .collect();
    Ok(grad_check(
        |v| {
            let preds: Vec<_> = v.chunks(2).map(|c| LevelPrediction { heatmap: c[0].clone(), size: c[1].clone() }).collect();
            stage1_loss(&preds, &targets)
        },
        &inputs,
        o,
    )?
    .max_rel_error)
}

fn case_stage2_loss(rng: &mut ChaCha8Rng, o: &GradCheckOptions) -> Result<f64> {
    let n = rng.random_range(1..6);
    let labels: Vec<f32> = (0..n).map(|i| if i == 0 || rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let sample = Stage2Sample {
        boxes: vec![RoiBox::new(0.0, 0.0, 10.0, 10.0); n],
        targets: labels.iter().map(|&l| std::array::from_fn(|_| l * rng.random_range(-2.0..2.0))).collect(),
        labels,
    };
    let i = [rand(rng, &[n, 1]), rand(rng, &[n, 4])];
    Ok(grad_check(|t| stage2_loss(&HeadOutput { logits: t[0].clone(), deltas: t[1].clone() }, &sample), &i, o)?.max_rel_error)
}

const CASES: &[(&str, Case)] = &[
    ("linear", case_linear),
    ("matmul", case_matmul),
    ("softmax", case_softmax),
    ("elementwise", case_elementwise),
    ("channel_ops", case_channel_ops),
    ("conv2d", case_conv2d),
    ("depthwise_xcorr", case_depthwise_xcorr),
    ("max_pool", case_max_pool),
    ("adaptive_avg_pool", case_adaptive_pool),
    ("bilinear_resize", case_bilinear),
    ("roi_align", case_roi_align),
    ("focal_loss", case_focal),
    ("bce_with_logits", case_bce),
    ("smooth_l1", case_smooth_l1),
    ("masked_l1", case_masked_l1),
    ("sm_block", case_sm_block),
    ("rg_block", case_rg_block),
    ("dsa", case_dsa),
    ("roi_head", case_roi_head),
    ("stage1_loss", case_stage1_loss),
    ("stage2_loss", case_stage2_loss),
];

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

/// Runs every case whose name equals `only` (all when `None`), `trials`
/// random instances each. `fault` perturbs analytic gradients.
pub fn run(only: Option<&str>, trials: usize, fault: Option<f64>) -> Result<Vec<CaseReport>> {
    let opts = GradCheckOptions { fault, ..Default::default() };
    let mut out = Vec::new();
    for (k, &(name, case)) in CASES.iter().enumerate() {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a5d + k as u64);
        let mut worst = 0f64;
        for _ in 0..trials {
            worst = worst.max(case(&mut rng, &opts)?);
        }
        out.push(CaseReport { name, trials, max_rel_error: worst, passed: worst < TOLERANCE });
    }
    if out.is_empty() {
        return Err(crate::error::Error::invalid(format!("unknown gradcheck op {:?}; known: {}", only.unwrap_or(""), case_names().join(", "))));
    }
    Ok(out)
}

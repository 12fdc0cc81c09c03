//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use mtu_core::datapipe::{synth_scenes, BitDepth, GrayImage, NoiseSpec, Scene, TargetSpec};
use mtu_core::loss::{focal_iou_loss, LossConfig};
use mtu_core::postprocess::{cluster8, TargetRegion};
use mtu_core::{BinaryMask, Graph, ModelConfig, ModelVariant, MtuNet, ProbabilityMap, Raster, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for kinked ops such as ReLU.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub type Build = Box<dyn for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>>;

/// Compares reverse-mode gradients of `Σ w·build(inputs)` for random fixed
/// weights `w` against central differences. Returns the worst relative error
/// over the inputs.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> Vec<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).data().to_vec()
    };
    let out_len = eval(inputs).len();
    let mut r = rng(seed);
    let weights: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();
    let objective = |xs: &[Tensor<f64>]| -> f64 { eval(xs).iter().zip(&weights).map(|(a, b)| a * b).sum() };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward_from(out, &weights).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Every differentiable graph op with inputs chosen away from kinks.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut r = rng(11);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    cases.push((
        "conv2d_3x3_pad1",
        vec![
            random_tensor(&[2, 5, 6], &mut r),
            random_tensor(&[3, 2, 3, 3], &mut r),
            random_tensor(&[3], &mut r),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
    ));
    cases.push((
        "conv2d_stride2",
        vec![
            random_tensor(&[2, 7, 6], &mut r),
            random_tensor(&[2, 2, 3, 3], &mut r),
            random_tensor(&[2], &mut r),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
    ));
    cases.push((
        "conv2d_1x1_no_bias",
        vec![random_tensor(&[3, 4, 4], &mut r), random_tensor(&[2, 3, 1, 1], &mut r)],
        Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)),
    ));
    cases.push((
        "conv2d_even_kernel",
        vec![random_tensor(&[1, 4, 4], &mut r), random_tensor(&[1, 1, 2, 2], &mut r)],
        Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)),
    ));
    cases.push((
        "linear",
        vec![
            random_tensor(&[3, 4], &mut r),
            random_tensor(&[4, 5], &mut r),
            random_tensor(&[5], &mut r),
        ],
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    ));
    cases.push((
        "matmul",
        vec![random_tensor(&[3, 4], &mut r), random_tensor(&[4, 2], &mut r)],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    ));
    cases.push((
        "matmul_t",
        vec![random_tensor(&[3, 4], &mut r), random_tensor(&[5, 4], &mut r)],
        Box::new(|g, v| g.matmul_t(v[0], v[1])),
    ));
    cases.push((
        "add",
        vec![random_tensor(&[2, 3], &mut r), random_tensor(&[2, 3], &mut r)],
        Box::new(|g, v| g.add(v[0], v[1])),
    ));
    cases.push((
        "mul",
        vec![random_tensor(&[2, 3], &mut r), random_tensor(&[2, 3], &mut r)],
        Box::new(|g, v| g.mul(v[0], v[1])),
    ));
    cases.push((
        "scale",
        vec![random_tensor(&[4], &mut r)],
        Box::new(|g, v| g.scale(v[0], -0.7)),
    ));
    cases.push((
        "relu",
        vec![away_from_zero(&[3, 4], &mut r)],
        Box::new(|g, v| g.relu(v[0])),
    ));
    cases.push((
        "sigmoid",
        vec![random_tensor(&[3, 4], &mut r).map_values(|x| 4.0 * x)],
        Box::new(|g, v| g.sigmoid(v[0])),
    ));
    cases.push((
        "softmax_rows",
        vec![random_tensor(&[3, 5], &mut r)],
        Box::new(|g, v| g.softmax_rows(v[0])),
    ));
    cases.push((
        "layer_norm",
        vec![
            random_tensor(&[3, 6], &mut r),
            random_tensor(&[6], &mut r),
            random_tensor(&[6], &mut r),
        ],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    ));
    cases.push((
        "concat_channels",
        vec![random_tensor(&[2, 3, 3], &mut r), random_tensor(&[1, 3, 3], &mut r)],
        Box::new(|g, v| g.concat_channels(&[v[0], v[1]])),
    ));
    cases.push((
        "max_pool2d",
        vec![distinct_values(&[2, 4, 6], &mut r)],
        Box::new(|g, v| g.max_pool2d(v[0])),
    ));
    cases.push((
        "upsample2",
        vec![random_tensor(&[2, 3, 4], &mut r)],
        Box::new(|g, v| g.upsample2(v[0])),
    ));
    cases.push((
        "adaptive_avg_pool",
        vec![random_tensor(&[2, 7, 5], &mut r)],
        Box::new(|g, v| g.adaptive_avg_pool(v[0], 3, 2)),
    ));
    cases.push((
        "transpose",
        vec![random_tensor(&[3, 4], &mut r)],
        Box::new(|g, v| g.transpose(v[0])),
    ));
    cases.push((
        "slice_cols",
        vec![random_tensor(&[3, 6], &mut r)],
        Box::new(|g, v| g.slice_cols(v[0], 2, 3)),
    ));
    cases.push((
        "concat_cols",
        vec![random_tensor(&[3, 2], &mut r), random_tensor(&[3, 4], &mut r)],
        Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
    ));
    cases.push((
        "patchify",
        vec![random_tensor(&[2, 4, 6], &mut r)],
        Box::new(|g, v| g.patchify(v[0], 2)),
    ));
    cases.push((
        "unpatchify",
        vec![random_tensor(&[6, 8], &mut r)],
        Box::new(|g, v| g.unpatchify(v[0], 2, 2, 4, 6)),
    ));
    cases.push((
        "reshape",
        vec![random_tensor(&[2, 6], &mut r)],
        Box::new(|g, v| g.reshape(v[0], &[3, 4])),
    ));
    cases.push((
        "sum",
        vec![random_tensor(&[2, 3], &mut r)],
        Box::new(|g, v| g.sum(v[0])),
    ));
    cases.push((
        "mean",
        vec![random_tensor(&[2, 3], &mut r)],
        Box::new(|g, v| g.mean(v[0])),
    ));
    cases
}

/// Random values whose pairwise gaps exceed the finite-difference step.
fn distinct_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub trait MapValues {
    fn map_values(self, f: impl Fn(f64) -> f64) -> Self;
}

impl MapValues for Tensor<f64> {
    fn map_values(self, f: impl Fn(f64) -> f64) -> Self {
        let shape = self.shape().to_vec();
        Tensor::new(shape, self.data().iter().map(|&v| f(v)).collect()).unwrap()
    }
}

pub fn k2_config(input: usize) -> ModelConfig {
    ModelConfig {
        k: 2,
        channels: vec![2, 3],
        stem_channels: 2,
        heads_per_level: vec![2],
        input_size: input,
        mlp_ratio: 2,
        seed: 5,
    }
}

/// Perturbs biases and LN parameters so that no gradient path is trivially
/// symmetric, then checks every parameter and the input of the full model
/// under an exactly differentiated FocalIoU loss. Returns the worst relative
/// error.
pub fn model_gradcheck(variant: ModelVariant) -> f64 {
    let cfg = k2_config(16);
    let mut net: MtuNet<f64> = MtuNet::new(cfg, variant).unwrap();
    let mut r = rng(21);
    for t in net.params_mut().tensors_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += r.random_range(-0.1..0.1);
            }
        }
    }
    let image = Tensor::from_fn(vec![1, 16, 16], |_| r.random_range(0.0..1.0));
    let labels: Vec<bool> = (0..256).map(|i| (i / 16) % 5 == 2 && (i % 16) % 4 == 1).collect();
    let loss_cfg = LossConfig {
        differentiate_iou: true,
        ..LossConfig::default()
    };
    let loss_of = |net: &MtuNet<f64>, image: &Tensor<f64>| -> f64 {
        let p = net.predict(image.clone(), (0, 0)).unwrap();
        focal_iou_loss(p.data(), &labels, &loss_cfg).unwrap().value
    };

    let (param_grads, input_grad) = {
        let mut g = Graph::new();
        let x = g.input(image.clone().with_requires_grad(true));
        let pass = net.forward(&mut g, x).unwrap();
        let p = g.value(pass.probs).data().to_vec();
        let out = focal_iou_loss(&p, &labels, &loss_cfg).unwrap();
        g.backward_from(pass.logits, &out.grad).unwrap();
        (net.gradients(&g), g.grad(x).unwrap().to_vec())
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let n = net.params().tensor(id).numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = net.params().tensor(id).data()[j];
            net.params_mut().tensor_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = loss_of(&net, &image);
            net.params_mut().tensor_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = loss_of(&net, &image);
            net.params_mut().tensor_mut(id).data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let err = relative_error(param_grads.get(id), &numeric);
        assert!(err.is_finite(), "{}", net.params().name(id));
        worst = worst.max(err);
    }
    let mut numeric = vec![0.0; 256];
    for (j, slot) in numeric.iter_mut().enumerate() {
        let mut plus = image.clone();
        plus.data_mut()[j] += FD_STEP;
        let mut minus = image.clone();
        minus.data_mut()[j] -= FD_STEP;
        *slot = (loss_of(&net, &plus) - loss_of(&net, &minus)) / (2.0 * FD_STEP);
    }
    worst.max(relative_error(&input_grad, &numeric))
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    Raster::from_fn(h, w, |_, _| rng.random_bool(density))
}

/// 8-connected flood fill; components as sorted pixel lists, ordered by their
/// smallest pixel.
pub fn bfs_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || seen[r * w + c] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[r * w + c] = true;
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
    }
    out
}

/// Counts `(T_correct, T_all, P_false, P_all, inter, union)` directly from
/// pixel lists and an explicit matching rule: exhaustive search over all
/// one-to-one assignments is too slow, so this replays greedy matching on
/// independently computed centroids.
pub fn brute_force_counts(gt: &BinaryMask, pred: &BinaryMask, d: f64) -> [u64; 6] {
    let gt_c = bfs_components(gt);
    let pred_c = bfs_components(pred);
    let centroid = |c: &Vec<(usize, usize)>| {
        let n = c.len() as f64;
        (
            c.iter().map(|p| p.0 as f64).sum::<f64>() / n,
            c.iter().map(|p| p.1 as f64).sum::<f64>() / n,
        )
    };
    let gc: Vec<_> = gt_c.iter().map(centroid).collect();
    let pc: Vec<_> = pred_c.iter().map(centroid).collect();
    let mut pairs = Vec::new();
    for (i, a) in gc.iter().enumerate() {
        for (j, b) in pc.iter().enumerate() {
            let dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            if dist <= d {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut gt_used = vec![false; gc.len()];
    let mut pred_used = vec![false; pc.len()];
    let mut matched = 0u64;
    for (_, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            matched += 1;
        }
    }
    let p_false: u64 = pred_c
        .iter()
        .zip(&pred_used)
        .filter(|(_, &u)| !u)
        .map(|(c, _)| c.len() as u64)
        .sum();
    let mut inter = 0;
    let mut union = 0;
    for r in 0..gt.height() {
        for c in 0..gt.width() {
            let (a, b) = (gt.get(r, c), pred.get(r, c));
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
    }
    [matched, gc.len() as u64, p_false, (gt.height() * gt.width()) as u64, inter, union]
}

pub fn sorted_pixels(regions: &[TargetRegion]) -> Vec<Vec<(usize, usize)>> {
    regions
        .iter()
        .map(|r| {
            let mut p = r.pixels.clone();
            p.sort();
            p
        })
        .collect()
}

/// Scene with square targets of the given `(row, col, side)`.
pub fn scene_with_boxes(size: usize, boxes: &[(usize, usize, usize)]) -> Scene {
    let mask = Raster::from_fn(size, size, |r, c| {
        boxes
            .iter()
            .any(|&(br, bc, s)| (br..br + s).contains(&r) && (bc..bc + s).contains(&c))
    });
    let pixels = mask.map(|m| if m { 220 } else { 30 });
    Scene::new("boxes", GrayImage::new(BitDepth::Eight, pixels).unwrap(), mask).unwrap()
}

/// Probability maps built from synthetic ground truth: every target carries a
/// ramp `peak·(1 − d/1.5)` in its distance `d` to the nearest target pixel,
/// each with its own peak, and a few false-alarm bumps sit at least eight
/// pixels from any target. Thresholding shrinks every blob towards its core
/// without merging or splitting, so the curves are monotone by construction.
pub fn synthetic_probability_maps(count: usize, seed: u64) -> Vec<(ProbabilityMap<f64>, BinaryMask)> {
    let mut r = rng(seed);
    synth_scenes(count, 64, &TargetSpec::default(), &NoiseSpec::default(), seed)
        .unwrap()
        .into_iter()
        .map(|scene| {
            let gt = scene.mask().clone();
            let (h, w) = gt.dims();
            let mut map = Raster::filled(h, w, 0.0f64);
            for region in cluster8(&gt) {
                let peak = r.random_range(0.3..1.0);
                bump(&mut map, &region.pixels, peak);
            }
            let targets: Vec<(usize, usize)> = (0..h * w).filter(|i| gt.data()[*i]).map(|i| (i / w, i % w)).collect();
            let mut placed: Vec<(usize, usize)> = Vec::new();
            for _ in 0..200 {
                if placed.len() == 3 {
                    break;
                }
                let c = (r.random_range(2..h - 2), r.random_range(2..w - 2));
                let far = |p: &(usize, usize)| {
                    let (dy, dx) = (p.0 as f64 - c.0 as f64, p.1 as f64 - c.1 as f64);
                    dy.hypot(dx) >= 8.0
                };
                if targets.iter().all(far) && placed.iter().all(far) {
                    placed.push(c);
                    bump(&mut map, &[c, (c.0, c.1 + 1)], r.random_range(0.2..0.9));
                }
            }
            (ProbabilityMap::from_raster(map), gt)
        })
        .collect()
}

fn bump(map: &mut Raster<f64>, core: &[(usize, usize)], peak: f64) {
    let (h, w) = map.dims();
    for y in 0..h {
        for x in 0..w {
            let d = core
                .iter()
                .map(|&(r, c)| (r as f64 - y as f64).hypot(c as f64 - x as f64))
                .fold(f64::MAX, f64::min);
            let v = peak * (1.0 - d / 1.5).max(0.0);
            if v > map.get(y, x) {
                map.set(y, x, v);
            }
        }
    }
}

/// Ground truth of a few small blobs and a prediction that jitters, drops
/// and adds pixels around them.
pub fn random_detection_scene(r: &mut ChaCha8Rng) -> (BinaryMask, BinaryMask) {
    let mut gt = BinaryMask::filled(32, 32, false);
    for _ in 0..r.random_range(1..6) {
        let (row, col) = (r.random_range(0..30), r.random_range(0..30));
        let (h, w) = (r.random_range(1..4), r.random_range(1..4));
        for y in row..(row + h).min(32) {
            for x in col..(col + w).min(32) {
                gt.set(y, x, true);
            }
        }
    }
    let (dy, dx) = (r.random_range(0..3), r.random_range(0..3));
    let noise = random_mask(32, 32, 0.01, r);
    let pred = Raster::from_fn(32, 32, |y, x| {
        let shifted = y >= dy && x >= dx && gt.get(y - dy, x - dx);
        (shifted && r.random_bool(0.9)) || noise.get(y, x)
    });
    (gt, pred)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar re-implementation used as the reference: clamped focal loss mean.
pub fn focal_reference(p: &[f64], y: &[bool], gamma: f64, eps: f64) -> f64 {
    let mut total = 0.0;
    for (&pv, &yv) in p.iter().zip(y) {
        let q = pv.clamp(eps, 1.0 - eps);
        total += if yv {
            -(1.0 - q).powf(gamma) * q.ln()
        } else {
            -q.powf(gamma) * (1.0 - q).ln()
        };
    }
    total / p.len() as f64
}

pub fn soft_iou_reference(p: &[f64], y: &[bool], smooth: f64) -> f64 {
    let inter: f64 = p.iter().zip(y).filter(|(_, &yv)| yv).map(|(&pv, _)| pv).sum();
    let sum_p: f64 = p.iter().sum();
    let sum_y = y.iter().filter(|&&v| v).count() as f64;
    (smooth + inter) / (smooth + sum_p + sum_y - inter)
}

pub fn focal_iou_reference(fl: f64, s: f64) -> f64 {
    2.0 * (1.0 - s) * fl.powf((1.0 + s) / 2.0)
}

pub struct LossCase {
    pub logits: Vec<f64>,
    pub labels: Vec<bool>,
    pub cfg: LossConfig,
}

pub fn random_loss_case(r: &mut ChaCha8Rng) -> LossCase {
    let n = r.random_range(1..=24);
    LossCase {
        logits: (0..n).map(|_| r.random_range(-4.0..4.0)).collect(),
        labels: (0..n).map(|_| r.random_bool(0.3)).collect(),
        cfg: LossConfig {
            gamma: [0.0, 0.5, 1.0, 2.0, 3.0][r.random_range(0..5)],
            smooth: r.random_range(0.1..2.0),
            ..LossConfig::default()
        },
    }
}

pub fn central_difference(logits: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..logits.len())
        .map(|j| {
            let mut plus = logits.to_vec();
            plus[j] += h;
            let mut minus = logits.to_vec();
            minus[j] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use milab::invert::{BaseLoss, IdentityLossSpec, PregEstimator, PregMode};
use milab::nn::{Classifier, ClassifierArch, Parameterized};
use milab::rng::{rng_from_seed, Rng};
use milab::tensor::{grad_check, Tape};
use milab::{Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Entries with magnitude in `[0.2, 1]` and random sign, so kinks at zero
/// are never within a finite-difference step.
pub fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.05 apart, shuffled (no max-pool ties).
pub fn spaced(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ v` with weights fixed by the output size, so every output
/// element contributes with a generic coefficient.
pub fn contract<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng_from_seed(1000 + n as u64));
    Ok(v.mul(v.tape().constant(w))?.sum())
}

pub type Graph = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: fn(&mut Rng) -> Vec<Tensor>,
    pub graph: Graph,
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.gen_range(1..=3), rng.gen_range(1..=4))
}

macro_rules! case {
    ($name:expr, |$rng:ident| $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
        PrimitiveCase {
            name: $name,
            inputs: |$rng: &mut Rng| $inputs,
            graph: |$t, $v| {
                let _ = $t;
                contract($body)
            },
        }
    };
}

/// Every differentiable primitive, each with a generator of random inputs
/// kept away from its non-differentiable points.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        case!("add", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].add(v[1])?),
        case!("sub", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].sub(v[1])?),
        case!("mul", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].mul(v[1])?),
        case!("div", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[n, m], 0.5, 2.0, r)] }, |t, v| v[0].div(v[1])?),
        case!("square", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].square()),
        case!("scale", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].scale(-1.7)),
        case!("neg", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].neg()),
        case!("add_scalar", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].add_scalar(0.3)),
        case!("broadcast_rows", |r| { let (_, m) = dims(r); vec![uniform(&[m], -1.0, 1.0, r)] }, |t, v| v[0].broadcast_rows(3)?),
        case!("add_row", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[m], -1.0, 1.0, r)] }, |t, v| v[0].add_row(v[1])?),
        case!("matmul", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[m, 3], -1.0, 1.0, r)] }, |t, v| v[0].matmul(v[1])?),
        case!("matmul_t", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[2, m], -1.0, 1.0, r)] }, |t, v| v[0].matmul_t(v[1])?),
        case!("matmul_tn", |r| { let (n, m) = dims(r); vec![uniform(&[m, n], -1.0, 1.0, r), uniform(&[m, 2], -1.0, 1.0, r)] }, |t, v| v[0].matmul_ex(v[1], true, false)?),
        case!("conv2d", |r| {
            let (n, c) = dims(r);
            let s = r.gen_range(3..=5);
            vec![uniform(&[n, c, s, s], -1.0, 1.0, r), uniform(&[2, c, 3, 3], -1.0, 1.0, r), uniform(&[2], -1.0, 1.0, r)]
        }, |t, v| v[0].conv2d(v[1], Some(v[2]), 1, 1)?),
        case!("conv2d_stride2", |r| {
            let (n, c) = dims(r);
            let s = r.gen_range(4..=6);
            vec![uniform(&[n, c, s, s], -1.0, 1.0, r), uniform(&[3, c, 4, 4], -1.0, 1.0, r)]
        }, |t, v| v[0].conv2d(v[1], None, 2, 1)?),
        case!("maxpool2", |r| { let (n, c) = dims(r); let s = r.gen_range(2..=5); vec![spaced(&[n, c, s, s], r)] }, |t, v| v[0].maxpool2()?),
        case!("upsample2", |r| { let (n, c) = dims(r); vec![uniform(&[n, c, 2, 3], -1.0, 1.0, r)] }, |t, v| v[0].upsample2()?),
        case!("relu", |r| { let (n, m) = dims(r); vec![off_zero(&[n, m], r)] }, |t, v| v[0].relu()),
        case!("leaky_relu", |r| { let (n, m) = dims(r); vec![off_zero(&[n, m], r)] }, |t, v| v[0].leaky_relu(0.2)),
        case!("tanh", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -2.0, 2.0, r)] }, |t, v| v[0].tanh()),
        case!("sigmoid", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -3.0, 3.0, r)] }, |t, v| v[0].sigmoid()),
        case!("exp", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -2.0, 2.0, r)] }, |t, v| v[0].exp()),
        case!("log", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], 0.5, 3.0, r)] }, |t, v| v[0].log()),
        case!("sqrt", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], 0.5, 3.0, r)] }, |t, v| v[0].sqrt()),
        case!("softplus", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -3.0, 3.0, r)] }, |t, v| v[0].softplus()),
        case!("clamp", |r| { let (n, m) = dims(r); vec![off_zero(&[n, m], r).map(|x| 1.5 * x)] }, |t, v| v[0].clamp(-0.1, 0.1)),
        case!("softmax", |r| { let (n, m) = dims(r); vec![uniform(&[n, m + 1], -2.0, 2.0, r)] }, |t, v| v[0].softmax()),
        case!("log_softmax", |r| { let (n, m) = dims(r); vec![uniform(&[n, m + 1], -2.0, 2.0, r)] }, |t, v| v[0].log_softmax()),
        case!("sum", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].sum()),
        case!("mean", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].mean()),
        case!("sum_last", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].sum_last()),
        case!("l2_norm", |r| { let (n, m) = dims(r); vec![off_zero(&[n, m], r)] }, |t, v| v[0].l2_norm()),
        case!("reshape", |r| { let (n, m) = dims(r); vec![uniform(&[n, m, 2], -1.0, 1.0, r)] }, |t, v| { let s = v[0].shape(); v[0].reshape(&[s[0] * s[1], 2])? }),
        case!("flatten", |r| { let (n, m) = dims(r); vec![uniform(&[n, m, 2, 2], -1.0, 1.0, r)] }, |t, v| v[0].flatten()?),
        case!("concat_last", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r), uniform(&[n, 2], -1.0, 1.0, r)] }, |t, v| v[0].concat_last(v[1])?),
        case!("append_ones", |r| { let (n, m) = dims(r); vec![uniform(&[n, m], -1.0, 1.0, r)] }, |t, v| v[0].append_ones()?),
        case!("gather", |r| { let (_, m) = dims(r); vec![uniform(&[3, m + 1], -1.0, 1.0, r)] }, |t, v| { let m = v[0].shape()[1]; v[0].gather(&[m - 1, 0, m / 2])? }),
        case!("select_rows", |r| { let (_, m) = dims(r); vec![uniform(&[3, m], -1.0, 1.0, r)] }, |t, v| v[0].select_rows(&[2, 0, 2, 1])?),
        case!("cross_entropy", |r| { let (_, m) = dims(r); vec![uniform(&[3, m + 1], -2.0, 2.0, r)] }, |t, v| { let m = v[0].shape()[1]; v[0].cross_entropy(&[0, m - 1, m / 2])? }),
    ]
}

/// Worst relative error of one primitive over `instances` random inputs.
pub fn check_primitive(case: &PrimitiveCase, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inputs = (case.inputs)(&mut rng);
        worst = worst.max(grad_check(case.graph, &inputs, FD_STEP)?);
    }
    Ok(worst)
}

/// A narrow ConvK (base width 4, d = 6) for gradient and oracle checks.
pub fn small_convk(depth: usize, image: usize, classes: usize, seed: u64) -> Classifier {
    let arch = ClassifierArch {
        depth,
        base_width: 4,
        feat_dim: 6,
        in_channels: 1,
        image_size: image,
        num_classes: classes,
    };
    let mut m = Classifier::new(arch, seed);
    // nonzero biases so that the bias slot of the head matters
    let mut rng = rng_from_seed(seed ^ 0xb1a5);
    let n = m.params().len();
    for i in 0..n {
        if m.params()[i].shape().len() == 1 {
            let s = m.params()[i].shape().to_vec();
            m.params_mut()[i] = uniform(&s, -0.3, 0.3, &mut rng);
        }
    }
    let head = m.params()[n - 1].shape().to_vec();
    m.params_mut()[n - 1] = uniform(&head, -1.0, 1.0, &mut rng);
    m
}

/// Smallest distance of any ReLU pre-activation from zero and of any
/// max-pool window's runner-up from its maximum, at input `x`. Finite
/// differences are only meaningful when this exceeds the step's effect.
pub fn kink_margin(model: &Classifier, x: &Tensor) -> f64 {
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let mut h = tape.constant(x.clone());
    let mut margin = f64::INFINITY;
    for i in 0..model.arch.depth {
        let pre = h.conv2d(p[2 * i], Some(p[2 * i + 1]), 1, 1).unwrap();
        margin = margin.min(pre.value().data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
        let act = pre.relu();
        margin = margin.min(pool_gap(&act.value()));
        h = act.maxpool2().unwrap();
    }
    let k = 2 * model.arch.depth;
    let pre = h.flatten().unwrap().matmul_t(p[k]).unwrap().add_row(p[k + 1]).unwrap();
    margin.min(pre.value().data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min))
}

/// Gap between the two largest entries of each 2×2 window whose maximum is
/// positive (windows of zeros after ReLU have zero gradient either way).
fn pool_gap(t: &Tensor) -> f64 {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut gap = f64::INFINITY;
    for img in 0..n * c {
        let plane = &t.data()[img * h * w..(img + 1) * h * w];
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                let mut vals: Vec<f64> = Vec::new();
                for di in 0..2 {
                    for dj in 0..2 {
                        if i + di < h && j + dj < w {
                            vals.push(plane[(i + di) * w + j + dj]);
                        }
                    }
                }
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals.len() > 1 && vals[0] > 0.0 {
                    gap = gap.min(vals[0] - vals[1]);
                }
            }
        }
    }
    gap
}

/// Draws an input image batch whose kink margin exceeds `min_margin`.
pub fn smooth_input(model: &Classifier, n: usize, min_margin: f64, rng: &mut Rng) -> Tensor {
    let s = model.arch.image_size;
    loop {
        let x = uniform(&[n, 1, s, s], -1.0, 1.0, rng);
        if kink_margin(model, &x) > min_margin {
            return x;
        }
    }
}

pub fn random_preg(dim: usize, mode: PregMode, rng: &mut Rng) -> PregEstimator {
    let feats = uniform(&[8, dim - 1], 0.0, 2.0, rng);
    PregEstimator::from_features(&feats, mode).unwrap()
}

// ---- independent scalar formulas -------------------------------------

/// `p̃ = [p; 1]` and the head, read back as plain vectors.
pub struct Plain {
    pub pt: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

pub fn plain(model: &Classifier, x: &Tensor) -> Plain {
    let f = model.predict_features(x, 64).unwrap();
    let d = model.feat_dim();
    let pt = (0..x.shape()[0])
        .map(|i| {
            let mut r = f.row(i).to_vec();
            r.push(1.0);
            r
        })
        .collect();
    let head = model.head();
    let w = (0..model.num_classes()).map(|k| head.data()[k * (d + 1)..(k + 1) * (d + 1)].to_vec()).collect();
    Plain { pt, w }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax cross-entropy written directly from the logits.
pub fn ce_direct(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    -(logits[k] - m) + z.ln()
}

pub fn ce_plain(p: &Plain, i: usize, k: usize) -> f64 {
    let logits: Vec<f64> = p.w.iter().map(|w| dot(w, &p.pt[i])).collect();
    ce_direct(&logits, k)
}

pub fn logit_plain(p: &Plain, i: usize, k: usize, lambda: f64, anchor: &[f64]) -> f64 {
    -dot(&p.pt[i], &p.w[k]) + lambda * sqdist(&p.pt[i], anchor)
}

/// The library spec for each variant, for oracle comparison.
pub enum VariantCase {
    Ce,
    Logit,
    AugCe,
    AugLogit,
    Lomma,
}

pub fn build_spec(
    v: &VariantCase,
    target: &Classifier,
    augs: &[Classifier],
    lambda: f64,
    gammas: (f64, f64),
    rng: &mut Rng,
) -> IdentityLossSpec {
    let preg_t = random_preg(target.feat_dim() + 1, PregMode::Sampled, rng);
    match v {
        VariantCase::Ce => IdentityLossSpec::Ce,
        VariantCase::Logit => IdentityLossSpec::Logit {
            lambda_reg: lambda,
            preg: preg_t,
        },
        VariantCase::AugCe => IdentityLossSpec::Aug {
            base: BaseLoss::Ce,
            gamma_t: gammas.0,
            gamma_aug: gammas.1,
            aug_models: augs.to_vec(),
        },
        VariantCase::AugLogit => {
            let mut pregs = vec![preg_t];
            for m in augs {
                pregs.push(random_preg(m.feat_dim() + 1, PregMode::Sampled, rng));
            }
            IdentityLossSpec::Aug {
                base: BaseLoss::Logit { lambda_reg: lambda, pregs },
                gamma_t: gammas.0,
                gamma_aug: gammas.1,
                aug_models: augs.to_vec(),
            }
        }
        VariantCase::Lomma => IdentityLossSpec::Lomma {
            lambda_reg: lambda,
            preg: preg_t,
            gamma_t: gammas.0,
            gamma_aug: gammas.1,
            aug_models: augs.to_vec(),
        },
    }
}

/// Independent evaluation of a variant's per-sample loss.
pub fn oracle_loss(
    v: &VariantCase,
    target: &Classifier,
    augs: &[Classifier],
    x: &Tensor,
    ks: &[usize],
    anchors: &[Tensor],
    lambda: f64,
    gammas: (f64, f64),
) -> Vec<f64> {
    let models: Vec<&Classifier> = std::iter::once(target).chain(augs).collect();
    let plains: Vec<Plain> = models.iter().map(|m| plain(m, x)).collect();
    (0..ks.len())
        .map(|i| {
            let k = ks[i];
            let anchor = |m: usize| anchors[m].row(i).to_vec();
            match v {
                VariantCase::Ce => ce_plain(&plains[0], i, k),
                VariantCase::Logit => logit_plain(&plains[0], i, k, lambda, &anchor(0)),
                VariantCase::AugCe => {
                    gammas.0 * ce_plain(&plains[0], i, k)
                        + gammas.1 * (1..plains.len()).map(|m| ce_plain(&plains[m], i, k)).sum::<f64>()
                }
                VariantCase::AugLogit => {
                    gammas.0 * logit_plain(&plains[0], i, k, lambda, &anchor(0))
                        + gammas.1
                            * (1..plains.len())
                                .map(|m| logit_plain(&plains[m], i, k, lambda, &anchor(m)))
                                .sum::<f64>()
                }
                VariantCase::Lomma => {
                    gammas.0 * -dot(&plains[0].pt[i], &plains[0].w[k])
                        + gammas.1 * (1..plains.len()).map(|m| -dot(&plains[m].pt[i], &plains[m].w[k])).sum::<f64>()
                        + lambda * sqdist(&plains[0].pt[i], &anchor(0))
                }
            }
        })
        .collect()
}

pub const ALL_VARIANTS: [VariantCase; 5] = [
    VariantCase::Ce,
    VariantCase::Logit,
    VariantCase::AugCe,
    VariantCase::AugLogit,
    VariantCase::Lomma,
];

pub fn variant_name(v: &VariantCase) -> &'static str {
    match v {
        VariantCase::Ce => "ce",
        VariantCase::Logit => "logit",
        VariantCase::AugCe => "aug_ce",
        VariantCase::AugLogit => "aug_logit",
        VariantCase::Lomma => "lomma",
    }
}

/// Gradient check of a loss variant with respect to the input image, on
/// `instances` random models and inputs kept away from ReLU/pool kinks.
pub fn check_loss_variant(v: &VariantCase, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let (mut checked, mut inst) = (0, 0u64);
    while checked < instances {
        inst += 1;
        let s = inst * 7 + seed;
        let target = small_convk(2, 6, 3, s);
        let augs = vec![small_convk(1, 6, 3, s + 1), small_convk(3, 6, 3, s + 2)];
        let spec = build_spec(v, &target, &augs, rng.gen_range(0.0..1.0), (0.5, 0.25), &mut rng);
        let x = smooth_input(&target, 2, 1e-3, &mut rng);
        // the augmented models must be smooth at x as well
        if augs.iter().any(|m| kink_margin(m, &x) <= 1e-3) {
            continue;
        }
        let ks = [rng.gen_range(0..3), rng.gen_range(0..3)];
        let anchors = spec.draw_anchors(2, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let bound = spec.bind(tape, &target);
                let terms = spec.per_sample(&target, &bound, vars[0], &ks, &anchors)?;
                contract(terms.total)
            },
            &[x],
            FD_STEP,
        )?;
        worst = worst.max(err);
        checked += 1;
    }
    Ok(worst)
}

pub fn mnist_paths() -> (std::path::PathBuf, std::path::PathBuf) {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    (root.join("images.idx3-ubyte.gz"), root.join("labels.idx1-ubyte.gz"))
}

/// MNIST split into digits 0–4 (private) and 5–9 (public).
pub fn mnist_split() -> milab::data::Split {
    let (img, lab) = mnist_paths();
    let all = milab::data::load_idx(&img, &lab).expect("MNIST files under data/mnist");
    milab::data::split_disjoint(&all, &milab::data::SplitSpec::new(0..5, 5..10)).unwrap()
}

/// Worst absolute gap between the library and the scalar oracle over
/// `cases` random models, inputs, targets and anchors.
pub fn oracle_gap(v: &VariantCase, cases: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases as u64 {
        let s = seed * 10_000 + case * 3;
        let target = small_convk(rng.gen_range(1..=3), 6, 4, s);
        let augs = vec![small_convk(2, 6, 4, s + 1), small_convk(1, 6, 4, s + 2)];
        let lambda = rng.gen_range(0.0..2.0);
        let gammas = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
        let spec = build_spec(v, &target, &augs, lambda, gammas, &mut rng);
        let x = uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let ks = [rng.gen_range(0..4)];
        let anchors = spec.draw_anchors(1, &mut rng);
        let got = spec.evaluate(&target, &x, &ks, &anchors).unwrap();
        // anchors are only consumed by regularized models
        let all_anchors: Vec<Tensor> = match v {
            VariantCase::Ce | VariantCase::AugCe => vec![],
            _ => anchors.clone(),
        };
        let want = oracle_loss(v, &target, &augs, &x, &ks, &all_anchors, lambda, gammas);
        worst = worst.max((got[0] - want[0]).abs());
    }
    worst
}

/// Mean over queries of the minimum over all query/reference pairs.
pub fn exhaustive_knn(q: &Tensor, r: &Tensor) -> f64 {
    let n = q.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..r.shape()[0] {
            best = best.min(sqdist(q.row(i), r.row(j)).sqrt());
        }
        total += best;
    }
    total / n as f64
}

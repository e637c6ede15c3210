#![allow(dead_code)]

use e3lab::detector::Embedder;
use e3lab::detector::{class_weights, CapacityPreset, ClassWeighting, DetectorArch, DetectorModel};
use e3lab::e3::{build_ekfn, EkfnArch, ExpertEnsemble, FusionVariant};
use e3lab::metrics::roc_auc;
use e3lab::rng::{stream, StreamRng};
use e3lab::synthgen::{Label, LabeledImage};
use e3lab::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Loss, gradient per parameter tensor, and the ReLU activation pattern.
pub struct Evaluated {
    pub loss: f32,
    pub grads: Vec<Vec<f32>>,
    pub pattern: Vec<bool>,
}

pub type Eval = Box<dyn Fn(&[Tensor]) -> Evaluated>;

pub struct GradCase {
    pub name: String,
    pub params: Vec<Tensor>,
    pub h: f32,
    /// Composite with many ReLUs: probe gradient-biased directions and skip
    /// probes whose segment changes the ReLU activation pattern.
    pub kinks: bool,
    pub eval: Eval,
}

#[derive(Debug)]
pub struct GradReport {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn rng(label: &str, idx: u64) -> StreamRng {
    stream(0x6772_6164, label, idx)
}

pub fn randn(shape: &[usize], std: f32, label: &str, idx: u64) -> Tensor {
    let mut r = rng(label, idx);
    let d = Normal::new(0.0f32, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| d.sample(&mut r)).collect()).unwrap()
}

/// Values with `lo ≤ |v| ≤ hi` and random sign.
pub fn away_from_zero(shape: &[usize], lo: f32, hi: f32, label: &str, idx: u64) -> Tensor {
    let mut r = rng(label, idx);
    let u = Uniform::new(lo, hi).unwrap();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| if r.random::<bool>() { u.sample(&mut r) } else { -u.sample(&mut r) })
            .collect(),
    )
    .unwrap()
}

/// `Σ f(params) ⊙ W` for a fixed random projection `W`, with gradients for every param.
pub fn projected<F>(f: F) -> Eval
where
    F: Fn(&Tape, &[Var]) -> Var + 'static,
{
    Box::new(move |params: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.clone().with_grad())).collect();
        let y = f(&tape, &vars);
        let shape = tape.shape(y);
        let loss = if shape.iter().product::<usize>() == 1 {
            tape.sum(y)
        } else {
            let w = randn(&shape, 1.0, "projection", shape.iter().product::<usize>() as u64);
            let wv = tape.leaf(&w);
            tape.sum(tape.hadamard(y, wv).unwrap())
        };
        let g = tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|v| {
                g.get(*v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.shape(*v).iter().product()])
            })
            .collect();
        Evaluated {
            loss: tape.value(loss)[0],
            grads,
            pattern: tape.relu_pattern(),
        }
    })
}

pub fn case(name: &str, params: Vec<Tensor>, eval: Eval) -> GradCase {
    GradCase {
        name: name.to_string(),
        params,
        h: 1e-2,
        kinks: false,
        eval,
    }
}

/// Central differences compared with the analytic gradient by
/// `‖a − n‖ / max(‖a‖, ‖n‖)`. Plain cases probe up to `max_coords`
/// coordinates per tensor. Composite cases probe `max_coords / 2` directions
/// per tensor, each the normalized sum of the analytic gradient direction and
/// a random unit vector, which keeps the signal well above f32 round-off;
/// probes whose segment crosses a ReLU kink are skipped.
pub fn check(c: &GradCase, max_coords: usize) -> GradReport {
    let base = (c.eval)(&c.params);
    let grads = &base.grads;
    let mut r = rng(&c.name, 1);
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0, 0);
    for (pi, p) in c.params.iter().enumerate() {
        let n = p.numel();
        let unit = |v: Vec<f32>| {
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-30);
            v.into_iter().map(|x| x / norm).collect::<Vec<f32>>()
        };
        let probes: Vec<Vec<f32>> = if c.kinks {
            let d = Normal::new(0.0f32, 1.0).unwrap();
            let g_hat = unit(grads[pi].clone());
            (0..(max_coords / 2).max(1))
                .map(|_| {
                    let rand_dir = unit((0..n).map(|_| d.sample(&mut r)).collect());
                    unit(g_hat.iter().zip(&rand_dir).map(|(a, b)| a + b).collect())
                })
                .collect()
        } else {
            let coords: Vec<usize> = if n <= max_coords {
                (0..n).collect()
            } else {
                rand::seq::index::sample(&mut r, n, max_coords).into_vec()
            };
            coords
                .into_iter()
                .map(|i| {
                    let mut v = vec![0.0f32; n];
                    v[i] = 1.0;
                    v
                })
                .collect()
        };
        for dir in probes {
            let at = |step: f32| {
                let mut ps = c.params.clone();
                ps[pi].data_mut().iter_mut().zip(&dir).for_each(|(x, d)| *x += step * d);
                (c.eval)(&ps)
            };
            let (plus, minus) = (at(c.h), at(-c.h));
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                skipped += 1;
                continue;
            }
            let estimate = (plus.loss as f64 - minus.loss as f64) / (2.0 * c.h as f64);
            let a: f64 = grads[pi].iter().zip(&dir).map(|(g, d)| *g as f64 * *d as f64).sum();
            diff2 += (a - estimate).powi(2);
            a2 += a * a;
            n2 += estimate * estimate;
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
    GradReport {
        name: c.name.clone(),
        rel_err: diff2.sqrt() / denom,
        checked,
        skipped,
    }
}

/// Nonzero biases, so a unit whose whole receptive field is dead does not
/// sit exactly on its kink.
fn jitter(params: Vec<&mut Tensor>, label: &str) {
    for (i, p) in params.into_iter().enumerate() {
        let noise = randn(p.shape(), 0.05, label, i as u64);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(x, e)| *x += e);
    }
}

fn images(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let mut r = rng("images", seed);
    (0..n)
        .map(|i| {
            let label = if i % 3 == 0 { Label::Real } else { Label::Synthetic };
            LabeledImage {
                height: size,
                width: size,
                pixels: (0..size * size).map(|_| r.random::<f32>()).collect(),
                label,
                source_id: if label.is_synthetic() { "g".into() } else { "real".into() },
                index: i as u64,
            }
        })
        .collect()
}

fn batch(imgs: &[LabeledImage]) -> Vec<f32> {
    imgs.iter().flat_map(|i| i.pixels.iter().copied()).collect()
}

/// The detector loss: class-weighted BCE of the detector logits.
pub fn detector_case(name: &str, arch: DetectorArch, seed: u64) -> GradCase {
    let mut model = DetectorModel::with_arch(arch, seed).unwrap();
    jitter(model.params_mut(), &format!("jitter/{name}"));
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let imgs = images(8, 8, seed);
    let x = batch(&imgs);
    let targets: Vec<f32> = imgs.iter().map(|i| i.label.target()).collect();
    let weights = class_weights(&imgs, ClassWeighting::Proportional);
    let eval: Eval = Box::new(move |ps: &[Tensor]| {
        let mut m = model.clone();
        for (dst, src) in m.params_mut().into_iter().zip(ps) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let xv = tape.constant(&[imgs.len(), 1, 8, 8], x.clone()).unwrap();
        let z = m.forward(&tape, &vars, xv).unwrap();
        let loss = tape.bce_with_logits(z, &targets, Some(&weights)).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = vars
            .all()
            .iter()
            .zip(ps)
            .map(|(v, p)| g.get(*v).map(<[f32]>::to_vec).unwrap_or(vec![0.0; p.numel()]))
            .collect();
        Evaluated {
            loss: tape.value(loss)[0],
            grads,
            pattern: tape.relu_pattern(),
        }
    });
    GradCase {
        name: name.to_string(),
        params,
        h: 2e-3,
        kinks: true,
        eval,
    }
}

/// The fusion loss: BCE of the fusion network on tokens stacked from every
/// expert, with gradients for both the experts and the fusion network.
pub fn fusion_case(name: &str, variant: FusionVariant, experts: usize, seed: u64) -> GradCase {
    let arch = DetectorArch {
        preset: CapacityPreset::Tiny,
        embed_dim: 8,
        highpass: true,
    };
    let mut ensemble = ExpertEnsemble::new(Embedder::new(arch, seed).unwrap());
    for e in 1..experts {
        ensemble.push(Embedder::new(arch, seed + e as u64).unwrap()).unwrap();
    }
    for p in ensemble.params_mut() {
        p.set_requires_grad(true);
    }
    let ekfn_arch = EkfnArch {
        variant,
        n_layers: 1,
        heads: 2,
        ff_mult: 2,
        mlp_hidden: 8,
        identity_embeddings: true,
    };
    let mut ekfn = build_ekfn(experts, 8, ekfn_arch, seed).unwrap();
    jitter(ensemble.params_mut(), &format!("jitter/{name}/experts"));
    jitter(ekfn.params_mut(), &format!("jitter/{name}/fusion"));
    let n_ens = ensemble.params_mut().len();
    let mut params: Vec<Tensor> = ensemble.params_mut().into_iter().map(|t| t.clone()).collect();
    params.extend(ekfn.params().into_iter().cloned());
    let imgs = images(4, 8, seed + 100);
    let x = batch(&imgs);
    let targets: Vec<f32> = imgs.iter().map(|i| i.label.target()).collect();
    let eval: Eval = Box::new(move |ps: &[Tensor]| {
        let (mut ens, mut net) = (ensemble.clone(), ekfn.clone());
        for (dst, src) in ens.params_mut().into_iter().chain(net.params_mut()).zip(ps) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let tape = Tape::new();
        let ev = ens.bind(&tape);
        let nv = net.bind(&tape);
        let xv = tape.constant(&[imgs.len(), 1, 8, 8], x.clone()).unwrap();
        let tokens = ens.forward(&tape, &ev, xv).unwrap();
        let z = net.forward(&tape, &nv, tokens).unwrap();
        let loss = tape.bce_with_logits(z, &targets, None).unwrap();
        let g = tape.backward(loss).unwrap();
        let all: Vec<Var> = ev.into_iter().flatten().chain(nv).collect();
        assert_eq!(all.len(), ps.len());
        let grads = all
            .iter()
            .zip(ps)
            .map(|(v, p)| g.get(*v).map(<[f32]>::to_vec).unwrap_or(vec![0.0; p.numel()]))
            .collect();
        Evaluated {
            loss: tape.value(loss)[0],
            grads,
            pattern: tape.relu_pattern(),
        }
    });
    assert!(n_ens > 0);
    GradCase {
        name: name.to_string(),
        params,
        h: 2e-3,
        kinks: true,
        eval,
    }
}

fn t(shape: &[usize], label: &str, idx: u64) -> Tensor {
    randn(shape, 1.0, label, idx)
}

/// Every primitive plus both composed losses.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case(
            "matmul 3x4·4x2",
            vec![t(&[3, 4], "mm", 0), t(&[4, 2], "mm", 1)],
            projected(|tp, v| tp.matmul(v[0], v[1]).unwrap()),
        ),
        case(
            "matmul 1x5·5x3",
            vec![t(&[1, 5], "mm", 2), t(&[5, 3], "mm", 3)],
            projected(|tp, v| tp.matmul(v[0], v[1]).unwrap()),
        ),
        case(
            "matmul 4x3·3x4",
            vec![t(&[4, 3], "mm", 4), t(&[3, 4], "mm", 5)],
            projected(|tp, v| tp.matmul(v[0], v[1]).unwrap()),
        ),
        case(
            "add",
            vec![t(&[2, 3], "add", 0), t(&[2, 3], "add", 1)],
            projected(|tp, v| tp.add(v[0], v[1]).unwrap()),
        ),
        case(
            "hadamard",
            vec![t(&[3, 3], "had", 0), t(&[3, 3], "had", 1)],
            projected(|tp, v| tp.hadamard(v[0], v[1]).unwrap()),
        ),
        case("scale", vec![t(&[5], "scale", 0)], projected(|tp, v| tp.scale(v[0], -1.7))),
        case(
            "relu",
            vec![away_from_zero(&[12], 0.2, 2.0, "relu", 0)],
            projected(|tp, v| tp.relu(v[0])),
        ),
        case("sigmoid", vec![randn(&[8], 2.0, "sig", 0)], projected(|tp, v| tp.sigmoid(v[0]))),
        case(
            "add_tiled bias",
            vec![t(&[6, 3], "tile", 0), t(&[3], "tile", 1)],
            projected(|tp, v| tp.add_tiled(v[0], v[1]).unwrap()),
        ),
        case(
            "add_tiled table",
            vec![t(&[6, 4], "tile", 2), t(&[3, 4], "tile", 3)],
            projected(|tp, v| tp.add_tiled(v[0], v[1]).unwrap()),
        ),
        case(
            "channel_bias",
            vec![t(&[2, 3, 2, 2], "cb", 0), t(&[3], "cb", 1)],
            projected(|tp, v| tp.channel_bias(v[0], v[1]).unwrap()),
        ),
        case(
            "conv2d s1 p1",
            vec![t(&[2, 2, 5, 5], "conv", 0), t(&[3, 2, 3, 3], "conv", 1)],
            projected(|tp, v| tp.conv2d(v[0], v[1], 1, 1).unwrap()),
        ),
        case(
            "conv2d s2 p0",
            vec![t(&[1, 1, 6, 6], "conv", 2), t(&[2, 1, 2, 2], "conv", 3)],
            projected(|tp, v| tp.conv2d(v[0], v[1], 2, 0).unwrap()),
        ),
        case(
            "avg_pool2",
            vec![t(&[1, 2, 4, 4], "pool", 0)],
            projected(|tp, v| tp.avg_pool2(v[0]).unwrap()),
        ),
        case(
            "global_avg_pool",
            vec![t(&[2, 3, 3, 3], "gap", 0)],
            projected(|tp, v| tp.global_avg_pool(v[0]).unwrap()),
        ),
        case(
            "reshape",
            vec![t(&[2, 6], "reshape", 0)],
            projected(|tp, v| tp.sigmoid(tp.reshape(v[0], &[3, 4]).unwrap())),
        ),
        case(
            "stack_tokens",
            vec![t(&[2, 4], "stack", 0), t(&[2, 4], "stack", 1), t(&[2, 4], "stack", 2)],
            projected(|tp, v| tp.stack_tokens(v).unwrap()),
        ),
        case(
            "layer_norm 3x5",
            vec![t(&[3, 5], "ln", 0), t(&[5], "ln", 1), t(&[5], "ln", 2)],
            projected(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        case(
            "layer_norm 2x8",
            vec![randn(&[2, 8], 3.0, "ln", 3), t(&[8], "ln", 4), t(&[8], "ln", 5)],
            projected(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        case(
            "softmax_attention",
            vec![t(&[4, 3], "attn", 0), t(&[4, 3], "attn", 1), t(&[4, 3], "attn", 2)],
            projected(|tp, v| tp.softmax_attention(v[0], v[1], v[2]).unwrap()),
        ),
        case(
            "attention 2 heads",
            vec![t(&[6, 4], "mha", 0), t(&[6, 4], "mha", 1), t(&[6, 4], "mha", 2)],
            projected(|tp, v| tp.attention(v[0], v[1], v[2], 3, 2).unwrap()),
        ),
        case(
            "attention 3 heads",
            vec![t(&[5, 6], "mha", 3), t(&[5, 6], "mha", 4), t(&[5, 6], "mha", 5)],
            projected(|tp, v| tp.attention(v[0], v[1], v[2], 5, 3).unwrap()),
        ),
        case(
            "mean of squares",
            vec![t(&[7], "mean", 0)],
            projected(|tp, v| tp.mean(tp.hadamard(v[0], v[0]).unwrap())),
        ),
        case(
            "weighted bce",
            vec![randn(&[6, 1], 2.0, "bce", 0)],
            projected(|tp, v| {
                tp.bce_with_logits(
                    v[0],
                    &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
                    Some(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5].map(|w: f32| w * 1.3)),
                )
                .unwrap()
            }),
        ),
        case(
            "soft-target bce",
            vec![randn(&[5, 1], 2.0, "bce", 1)],
            projected(|tp, v| tp.bce_with_logits(v[0], &[0.1, 0.9, 0.5, 0.3, 0.75], None).unwrap()),
        ),
    ];
    let tiny = |highpass| DetectorArch {
        preset: CapacityPreset::Tiny,
        embed_dim: 8,
        highpass,
    };
    cases.push(detector_case("detector loss, high-pass", tiny(true), 1));
    cases.push(detector_case("detector loss, raw input", tiny(false), 2));
    cases.push(fusion_case("fusion loss, full", FusionVariant::Full, 3, 3));
    cases.push(fusion_case("fusion loss, mlp_only", FusionVariant::MlpOnly, 2, 4));
    cases.push(fusion_case("fusion loss, no_weighting", FusionVariant::NoWeighting, 3, 5));
    cases
}

pub const GRAD_TOL: f64 = 1e-3;

/// Brute-force multi-head attention in f64 on `[B·L, d]` inputs.
pub fn attention_f64(q: &[f32], k: &[f32], v: &[f32], seq_len: usize, d: usize, heads: usize) -> Vec<f64> {
    let rows = q.len() / d;
    let dh = d / heads;
    let mut out = vec![0.0f64; rows * d];
    for b in 0..rows / seq_len {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..seq_len {
                let qi = (b * seq_len + i) * d;
                let scores: Vec<f64> = (0..seq_len)
                    .map(|j| {
                        let kj = (b * seq_len + j) * d;
                        cols.clone().map(|c| q[qi + c] as f64 * k[kj + c] as f64).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[qi + c] = (0..seq_len).map(|j| e[j] / z * v[(b * seq_len + j) * d + c] as f64).sum();
                }
            }
        }
    }
    out
}

pub fn auc_brute(pos: &[f32], neg: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for &p in pos {
        for &n in neg {
            if p > n {
                s += 1.0;
            } else if p == n {
                s += 0.5;
            }
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Largest `|rank AUC − brute force|` over `instances` random cases with
/// 1..=200 positives and negatives; about half draw scores from a small
/// grid so ties are common.
pub fn auc_oracle_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng("auc", i);
        let (np, nn) = (r.random_range(1..=200), r.random_range(1..=200));
        let grid = i % 2 == 0;
        let levels = r.random_range(2..12);
        let mut draw = |shift: f32| -> f32 {
            if grid {
                (r.random_range(0..levels) as f32 + if r.random::<f32>() < shift { 1.0 } else { 0.0 }) / levels as f32
            } else {
                r.random::<f32>() + shift
            }
        };
        let pos: Vec<f32> = (0..np).map(|_| draw(0.3)).collect();
        let neg: Vec<f32> = (0..nn).map(|_| draw(0.0)).collect();
        let got = roc_auc(&pos, &neg).unwrap();
        worst = worst.max((got - auc_brute(&pos, &neg)).abs());
    }
    worst
}

//! Shared test-side oracles: central finite differences and small fixtures.
#![allow(dead_code)]

use crnet::bench::benchmark_generator;
use crnet::diffcore::{Binding, Graph, NodeId, ParamSet, Tensor};
use crnet::engine::data::{sample_rois, stream_offsets};
use crnet::engine::detector::{Detector, CLASSES};
use crnet::engine::train::source_loss;
use crnet::engine::{Dataset, TrainConfig};
use crnet::evidential::l_evi_graph;
use crnet::imaging::{gen_scene_at, Domain};
use crnet::io::LabeledImage;
use crnet::rng::{self, Rng};
use crnet::rsaa::{l_rsaa, AdjacencySet, FeatureBank, Partition};
use crnet::scatter::ScatterSet;
use crnet::shfa::{l_img, l_ins, Discriminator, DomainBatch};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Coordinates checked per instance for models with many parameters.
pub const COORDS: usize = 24;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn loss_value(params: &ParamSet, build: &dyn Fn(&mut Graph, &Binding) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l = build(&mut g, &b);
    g.value(l).item()
}

/// Worst relative error between reverse-mode gradients and central
/// differences over `coords` (parameter name, element); every coordinate
/// when `coords` is `None`.
pub fn fd_check(
    params: &ParamSet,
    build: &dyn Fn(&mut Graph, &Binding) -> NodeId,
    coords: Option<Vec<(String, usize)>>,
) -> f64 {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = build(&mut g, &b);
    let grads = g.backward(loss).unwrap();
    let names: Vec<&str> = params.names().collect();
    let analytic = b.grads(&grads, &names);
    let coords = coords.unwrap_or_else(|| {
        params
            .iter()
            .flat_map(|(k, t)| (0..t.len()).map(move |i| (k.to_string(), i)))
            .collect()
    });
    let mut worst = 0.0f64;
    for (name, i) in coords {
        let shifted = |delta: f64| {
            let mut p = params.clone();
            let mut t = p.get(&name).unwrap().clone();
            t.data_mut()[i] += delta;
            p.insert(name.clone(), t);
            loss_value(&p, build)
        };
        let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[&name].data()[i], numeric));
    }
    worst
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn random_coords(rng: &mut Rng, params: &ParamSet, n: usize) -> Vec<(String, usize)> {
    let names: Vec<(String, usize)> = params
        .iter()
        .map(|(k, t)| (k.to_string(), t.len()))
        .collect();
    (0..n)
        .map(|_| {
            let (k, len) = &names[rng.random_range(0..names.len())];
            (k.clone(), rng.random_range(0..*len))
        })
        .collect()
}

/// Discriminator with non-zero biases so their gradients are exercised.
fn add_disc(params: &mut ParamSet, disc: &Discriminator, d: usize, rng: &mut Rng) {
    disc.init(params, d, 2.0, rng);
    let b1 = params.get(&format!("{}.b1", disc.prefix)).unwrap().len();
    params.insert(
        format!("{}.b1", disc.prefix),
        random_tensor(rng, &[b1], -0.5, 0.5),
    );
    params.insert(
        format!("{}.b2", disc.prefix),
        random_tensor(rng, &[1], -0.5, 0.5),
    );
}

/// Evidential loss over random evidence batches.
pub fn check_l_evi(seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 101);
    (0..INSTANCES)
        .map(|_| {
            let n = rng.random_range(1..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
            let kl = rng.random_range(0.0..1.0);
            let mut p = ParamSet::new();
            p.insert("e", random_tensor(&mut rng, &[n, CLASSES], 0.05, 5.0));
            fd_check(
                &p,
                &|g, b| l_evi_graph(g, b.id("e"), &labels, kl).unwrap(),
                None,
            )
        })
        .fold(0.0, f64::max)
}

/// Instance-level adversarial loss in both the features and the discriminators.
pub fn check_l_ins(seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 102);
    (0..INSTANCES)
        .map(|_| {
            let (n, d, na) = (rng.random_range(2..6), 4, rng.random_range(1..4));
            let discs: Vec<Discriminator> = (0..na)
                .map(|i| Discriminator::new(format!("ins{i}")))
                .collect();
            let mut p = ParamSet::new();
            p.insert("f", random_tensor(&mut rng, &[n, d], -1.0, 1.0));
            for disc in &discs {
                add_disc(&mut p, disc, d, &mut rng);
            }
            let batch = DomainBatch {
                labels: (0..n).map(|i| (i % 2) as f64).collect(),
                sims: (0..n)
                    .map(|_| (0..na).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect(),
            };
            let coords = random_coords(&mut rng, &p, COORDS);
            fd_check(
                &p,
                &|g, b| l_ins(g, b, b.id("f"), &batch, &discs).unwrap(),
                Some(coords),
            )
        })
        .fold(0.0, f64::max)
}

/// Image-level adversarial loss over one source and one target grid.
pub fn check_l_img(seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 103);
    (0..INSTANCES)
        .map(|_| {
            let d = 4;
            let disc = Discriminator::new("img");
            let mut p = ParamSet::new();
            for name in ["gs", "gt"] {
                let cells = rng.random_range(1..5);
                p.insert(name, random_tensor(&mut rng, &[cells, d], -1.0, 1.0));
            }
            add_disc(&mut p, &disc, d, &mut rng);
            let coords = random_coords(&mut rng, &p, COORDS);
            fd_check(
                &p,
                &|g, b| l_img(g, b, &[(b.id("gs"), 0.0), (b.id("gt"), 1.0)], &disc).unwrap(),
                Some(coords),
            )
        })
        .fold(0.0, f64::max)
}

/// Random bank of `n` entries with `d`-dimensional features.
pub fn random_bank(rng: &mut Rng, n: usize, d: usize) -> FeatureBank {
    let mut bank = FeatureBank::new(n.max(1)).unwrap();
    for _ in 0..n {
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = ScatterSet::singleton(
            rng.random_range(0.0..64.0),
            rng.random_range(0.0..64.0),
            1.0,
        );
        bank.push(
            f,
            pts,
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        );
    }
    bank
}

/// Alignment loss with an ungated partition holding both foreground and
/// background sets and a margin large enough to keep the hinge active.
pub fn check_l_rsaa(seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 104);
    (0..INSTANCES)
        .map(|_| {
            let (n, d, r) = (rng.random_range(2..6), 4, 3);
            let bank = random_bank(&mut rng, 12, d);
            let sets: Vec<AdjacencySet> = (0..n)
                .map(|i| AdjacencySet {
                    neighbors: (0..r).map(|_| rng.random_range(0..bank.len())).collect(),
                    eta: rng.random_range(0.1..1.0),
                    gamma_st: 0.0,
                    gamma_u: 0.0,
                    min_neighbor_p: if i % 2 == 0 { 0.9 } else { 0.1 },
                })
                .collect();
            let all: Vec<usize> = (0..n).collect();
            let partition = Partition {
                foreground: all.iter().copied().filter(|i| i % 2 == 0).collect(),
                background: all.iter().copied().filter(|i| i % 2 == 1).collect(),
                secure: all,
                threshold_st: f64::INFINITY,
                threshold_u: f64::INFINITY,
            };
            let mut p = ParamSet::new();
            p.insert("f", random_tensor(&mut rng, &[n, d], -1.0, 1.0));
            fd_check(
                &p,
                &|g, b| l_rsaa(g, b.id("f"), &sets, &partition, &bank, 100.0).unwrap(),
                None,
            )
        })
        .fold(0.0, f64::max)
}

/// Small detector configuration for loss checks.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        feature_dim: 4,
        ..TrainConfig::default()
    }
}

/// One benchmark source scene prepared into a sample.
pub fn source_dataset(cfg: &TrainConfig, scenes: usize) -> Dataset {
    let gen = benchmark_generator();
    let images: Vec<LabeledImage> = (0..scenes)
        .map(|k| {
            let s = gen_scene_at(&gen, Domain::Source, 3.0, cfg.seed, k as u64).unwrap();
            LabeledImage {
                id: format!("{k:06}"),
                image: s.image.image,
                annotation: s.annotation,
                domain: Domain::Source,
                resolution_factor: 3.0,
            }
        })
        .collect();
    Dataset::prepare(&images, cfg, stream_offsets::SOURCE).unwrap()
}

/// Supervised source loss over every detector parameter.
pub fn check_l_s(seed: u64) -> f64 {
    let cfg = tiny_config(seed);
    let data = source_dataset(&cfg, 4);
    let det = Detector::new(cfg.feature_dim);
    let mut rng = rng::stream(seed, 105);
    (0..INSTANCES)
        .map(|k| {
            let s = &data.samples[k % data.len()];
            let rows = sample_rois(&s.labels(), 3, &mut rng);
            let mut p = ParamSet::new();
            det.init(&mut p, &mut rng);
            for name in ["enc.b1", "enc.b2", "det.b", "evi.b"] {
                let len = p.get(name).unwrap().len();
                p.insert(name, random_tensor(&mut rng, &[len], -0.3, 0.3));
            }
            let coords = random_coords(&mut rng, &p, COORDS);
            fd_check(
                &p,
                &|g, b| {
                    source_loss(g, b, &det, s, &rows, cfg.kl_weight)
                        .unwrap()
                        .total
                },
                Some(coords),
            )
        })
        .fold(0.0, f64::max)
}

/// Every coordinate of a 16-parameter two-layer perceptron
/// `sum(sigmoid(tanh(x·W1 + b1)·W2))` with `W1: 2×4`, `b1: 4`, `W2: 4×1`.
pub fn check_mlp(seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 106);
    (0..INSTANCES)
        .map(|_| {
            let x = random_tensor(&mut rng, &[3, 2], -1.0, 1.0);
            let mut p = ParamSet::new();
            p.insert("w1", random_tensor(&mut rng, &[2, 4], -1.0, 1.0));
            p.insert("b1", random_tensor(&mut rng, &[4], -1.0, 1.0));
            p.insert("w2", random_tensor(&mut rng, &[4, 1], -1.0, 1.0));
            assert_eq!(p.numel(), 16);
            fd_check(
                &p,
                &|g, b| {
                    let x = g.constant(x.clone());
                    let h = g.matmul(x, b.id("w1")).unwrap();
                    let h = g.add_row(h, b.id("b1")).unwrap();
                    let h = g.tanh(h);
                    let z = g.matmul(h, b.id("w2")).unwrap();
                    let z = g.sigmoid(z);
                    g.sum(z)
                },
                None,
            )
        })
        .fold(0.0, f64::max)
}

/// Random scatter set of up to `max` points on the canonical canvas.
pub fn random_set(rng: &mut Rng, max: usize) -> ScatterSet {
    let n = rng.random_range(1..=max);
    let pts = (0..n)
        .map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)])
        .collect();
    let w = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    ScatterSet::new(pts, w).unwrap()
}

/// Monte-Carlo estimate of `KL(Dir(α̇) ‖ Dir(1))` with its standard error,
/// sampling Dirichlet draws as normalized Gamma variates.
pub fn kl_monte_carlo(alpha: &[f64], samples: usize, rng: &mut Rng) -> (f64, f64) {
    use crnet::diffcore::special::lgamma;
    use rand_distr::{Distribution, Gamma};
    let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
    let s: f64 = alpha.iter().sum();
    let c = alpha.len() as f64;
    let norm = lgamma(s) - alpha.iter().map(|&a| lgamma(a)).sum::<f64>() - lgamma(c);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let g: Vec<f64> = gammas.iter().map(|d| d.sample(rng)).collect();
        let t: f64 = g.iter().sum();
        let v = norm
            + alpha
                .iter()
                .zip(&g)
                .map(|(a, x)| (a - 1.0) * (x / t).ln())
                .sum::<f64>();
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    (mean, ((sq / n - mean * mean).max(0.0) / n).sqrt())
}

/// Number of random `α̇` (entries ≥ 1) whose closed-form KL lies within three
/// standard errors of the Monte-Carlo estimate.
pub fn kl_agreement(seed: u64, cases: usize) -> usize {
    let mut rng = rng::stream(seed, 107);
    (0..cases)
        .filter(|_| {
            let c = rng.random_range(2..5);
            let a: Vec<f64> = (0..c).map(|_| rng.random_range(1.0..6.0)).collect();
            let (mean, se) = kl_monte_carlo(&a, 100_000, &mut rng);
            (crnet::evidential::kl_to_uniform(&a) - mean).abs() <= 3.0 * se
        })
        .count()
}

/// Largest gap between `l_ins` with one discriminator and unit similarities
/// and a hand-written mean BCE of the same discriminator.
pub fn ins_degenerate_gap(seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 108);
    (0..INSTANCES)
        .map(|_| {
            let (n, d) = (rng.random_range(1..8), 4);
            let disc = Discriminator::new("ins0");
            let mut p = ParamSet::new();
            add_disc(&mut p, &disc, d, &mut rng);
            let f = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
            let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let batch = DomainBatch {
                labels: labels.clone(),
                sims: vec![vec![1.0]; n],
            };
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let x = g.constant(f.clone());
            let l = l_ins(&mut g, &b, x, &batch, std::slice::from_ref(&disc)).unwrap();
            let got = g.value(l).item();
            let prob = disc.forward(&mut g, &b, x).unwrap();
            let prob = g.value(prob).clone();
            let bce: f64 = labels
                .iter()
                .zip(prob.data())
                .map(|(y, q)| -(y * q.ln() + (1.0 - y) * (1.0 - q).ln()))
                .sum::<f64>()
                / n as f64;
            (got - bce).abs()
        })
        .fold(0.0, f64::max)
}

/// Small seeded benchmark split.
pub fn small_benchmark(seed: u64, scenes: usize, eval: usize) -> crnet::bench::Benchmark {
    let cfg = crnet::bench::DataConfig {
        scenes,
        eval_scenes: eval,
        ..Default::default()
    };
    crnet::bench::generate(&cfg, seed).unwrap()
}

/// Prepared run data for `cfg` over a small benchmark.
pub fn small_run(cfg: &TrainConfig, scenes: usize, eval: usize) -> crnet::engine::train::RunData {
    let b = small_benchmark(cfg.seed, scenes, eval);
    let e = (eval > 0).then_some(b.eval.as_slice());
    crnet::engine::train::RunData::prepare(cfg, &b.source, &b.target, e, None).unwrap()
}

/// A batch of adjacency sets over a bank built so that set `i` draws its `r = 2`
/// neighbors from bank entries sharing its one-hot feature. Member distances
/// are `1, 1 + 0.4, 1 + 0.4(1 + t)` and uncertainties `0.1, 0.11, 0.11 + 0.01t`,
/// so both factors equal `log(1 + (1 + t) / min(1, t))`. Honest sets use
/// `t ≥ 1`; the poisoned sets mix a short and a long gap (`t` well below 1).
pub struct PoisonedBatch {
    pub bank: FeatureBank,
    pub sets: Vec<AdjacencySet>,
    pub features: Tensor,
    pub poisoned: Vec<usize>,
}

pub fn poisoned_batch() -> PoisonedBatch {
    use crnet::rsaa::{build_adjacency, TargetInstance};
    let mut gaps: Vec<f64> = (0..12).map(|i| 1.0 + 0.1 * i as f64).collect();
    let poisoned = vec![gaps.len(), gaps.len() + 1];
    gaps.extend([0.25, 0.2]);
    let n = gaps.len();
    let one_hot = |i: usize, v: f64| {
        (0..n)
            .map(|j| if j == i { v } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let mut bank = FeatureBank::new(2 * n).unwrap();
    for (i, &t) in gaps.iter().enumerate() {
        let (d01, d02, d12) = (1.0, 1.4, 1.4 + 0.4 * t);
        let x = (d01 * d01 + d02 * d02 - d12 * d12) / (2.0 * d01);
        let y = (d02 * d02 - x * x).sqrt();
        bank.push(
            one_hot(i, 2.0),
            ScatterSet::singleton(d01, 0.0, 1.0),
            0.11,
            0.9,
        );
        bank.push(
            one_hot(i, 2.0),
            ScatterSet::singleton(x, y, 1.0),
            0.11 + 0.01 * t,
            0.9,
        );
    }
    let features: Vec<f64> = (0..n).flat_map(|i| one_hot(i, 1.0)).collect();
    let origin = ScatterSet::singleton(0.0, 0.0, 1.0);
    let sets = (0..n)
        .map(|i| {
            let f = one_hot(i, 1.0);
            let t = TargetInstance {
                feature: &f,
                points: &origin,
                u: 0.1,
                p: 0.9,
            };
            build_adjacency(&t, &bank, 2, 30.0).unwrap()
        })
        .collect();
    PoisonedBatch {
        bank,
        sets,
        features: Tensor::matrix(n, n, features).unwrap(),
        poisoned,
    }
}

/// Gradient of `l_rsaa` with respect to the target features of `batch` under `gate`.
pub fn alignment_grad(
    batch: &PoisonedBatch,
    gate: crnet::rsaa::Gate,
) -> (crnet::rsaa::Partition, Tensor) {
    let part = crnet::rsaa::secure_partition(&batch.sets, gate);
    let mut g = Graph::new();
    let f = g.param(batch.features.clone());
    let l = l_rsaa(&mut g, f, &batch.sets, &part, &batch.bank, 0.2).unwrap();
    let grad = g.backward(l).unwrap().get(f);
    (part, grad)
}

//! Library results against independent brute-force or closed-form oracles.

mod common;

use common::{random_bank, random_tensor};
use crnet::anchors::{kmedoids, objective, structural_similarity};
use crnet::bench::benchmark_generator;
use crnet::diffcore::{Graph, ParamSet};
use crnet::engine::metrics::{average_precision, Detection};
use crnet::engine::{propose, ProposalConfig};
use crnet::imaging::{
    gaussian_smooth, gen_scene, gen_scene_at, local_maxima, render_constellation_patch, resize_roi,
    BBox, ConstellationKind, Domain, GenConfig, Image,
};
use crnet::rng;
use crnet::rsaa::spread_factor;
use crnet::scatter::{
    default_epsilon, emd_exact, emd_sinkhorn, extract_scatter_set, scatter_distance, ScatterSet,
    CANONICAL, SINKHORN_MAX_ITERS, SINKHORN_TOL,
};
use crnet::shfa::{l_img, Discriminator};
use rand::Rng as _;

fn random_set(rng: &mut rng::Rng, max: usize) -> ScatterSet {
    let n = rng.random_range(1..=max);
    let pts = (0..n)
        .map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)])
        .collect();
    let w = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    ScatterSet::new(pts, w).unwrap()
}

#[test]
fn two_point_plan_matches_enumeration() {
    let p = ScatterSet::new(vec![[0.0, 0.0], [4.0, 0.0]], vec![0.7, 0.3]).unwrap();
    let q = ScatterSet::new(vec![[0.0, 0.0], [4.0, 0.0]], vec![0.3, 0.7]).unwrap();
    // flow t from P0 to Q0 fixes the rest of the plan; step 0.1
    let best = (0..=3)
        .map(|k| {
            let t00 = k as f64 / 10.0;
            let (t01, t10) = (0.7 - t00, 0.3 - t00);
            4.0 * (t01 + t10)
        })
        .fold(f64::INFINITY, f64::min);
    assert!((best - 1.6).abs() < 1e-12);
    assert!((emd_exact(&p, &q).unwrap().0 - best).abs() < 1e-9);
}

#[test]
fn sinkhorn_tracks_exact_on_small_pairs() {
    let mut rng = rng::stream(3, 1);
    for _ in 0..20 {
        let (p, q) = (random_set(&mut rng, 6), random_set(&mut rng, 6));
        let exact = emd_exact(&p, &q).unwrap().0;
        let s = emd_sinkhorn(
            &p,
            &q,
            default_epsilon(&p, &q),
            SINKHORN_MAX_ITERS,
            SINKHORN_TOL,
        )
        .unwrap();
        assert!(
            (s.distance - exact).abs() <= 0.05 * (1.0 + exact),
            "{} vs {exact}",
            s.distance
        );
    }
}

#[test]
fn maxima_match_exhaustive_scan() {
    let mut rng = rng::stream(4, 1);
    for _ in 0..20 {
        let (w, h) = (rng.random_range(3..20), rng.random_range(3..20));
        let img = Image {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let mut oracle = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = img.get(x, y);
                let strict = (y - 1..=y + 1)
                    .flat_map(|yy| (x - 1..=x + 1).map(move |xx| (xx, yy)))
                    .filter(|&(xx, yy)| (xx, yy) != (x, y))
                    .all(|(xx, yy)| img.get(xx, yy) < v);
                if strict {
                    oracle.push((v, x, y));
                }
            }
        }
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
        oracle.truncate(10);
        let got: Vec<(f64, usize, usize)> = local_maxima(&img, 10)
            .iter()
            .map(|p| (p.intensity, p.x, p.y))
            .collect();
        assert_eq!(got, oracle);
    }
}

#[test]
fn resize_matches_two_pass_interpolation() {
    let mut rng = rng::stream(5, 1);
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    for _ in 0..10 {
        let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
        let img = Image {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.random_range(0.0..5.0)).collect(),
        };
        let bw = rng.random_range(2.0..w as f64);
        let bh = rng.random_range(2.0..h as f64);
        let b = BBox::new(
            rng.random_range(0.0..w as f64 - bw),
            rng.random_range(0.0..h as f64 - bh),
            bw,
            bh,
        );
        let n = 17;
        let coord = |origin: f64, size: f64, i: usize, len: usize| {
            let c =
                (origin + (i as f64 + 0.5) * size / n as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = c.floor() as usize;
            (lo, (lo + 1).min(len - 1), c - lo as f64)
        };
        // horizontal pass over every source row, then vertical
        let rows: Vec<Vec<f64>> = (0..h)
            .map(|y| {
                (0..n)
                    .map(|u| {
                        let (x0, x1, t) = coord(b.x, b.w, u, w);
                        lerp(img.get(x0, y), img.get(x1, y), t)
                    })
                    .collect()
            })
            .collect();
        let out = resize_roi(&img, &b, n).unwrap();
        for v in 0..n {
            let (y0, y1, t) = coord(b.y, b.h, v, h);
            for u in 0..n {
                assert!((out.get(u, v) - lerp(rows[y0][u], rows[y1][u], t)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn smoothing_is_linear_in_impulses() {
    let impulse = |x, y| {
        let mut img = Image::new(48, 48);
        img.set(x, y, 1.0);
        img
    };
    let a = gaussian_smooth(&impulse(8, 8), 1.5).unwrap();
    let b = gaussian_smooth(&impulse(38, 36), 1.5).unwrap();
    let mut both = impulse(8, 8);
    both.set(38, 36, 1.0);
    let s = gaussian_smooth(&both, 1.5).unwrap();
    for i in 0..s.data.len() {
        assert!((s.data[i] - a.data[i] - b.data[i]).abs() < 1e-12);
    }
}

#[test]
fn clean_cross_extracts_its_five_scatterers() {
    let centers = [(32, 32), (20, 32), (44, 32), (32, 20), (32, 44)];
    let mut img = Image::new(CANONICAL, CANONICAL);
    for y in 0..CANONICAL {
        for x in 0..CANONICAL {
            let v: f64 = centers
                .iter()
                .map(|&(cx, cy)| {
                    let d2 =
                        ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2)) / 8.0;
                    (-d2).exp()
                })
                .sum();
            img.set(x, y, v);
        }
    }
    let set = extract_scatter_set(&img).unwrap();
    assert_eq!(set.len(), 5);
    let mut got: Vec<(i64, i64)> = set
        .points
        .iter()
        .map(|p| (p[0] as i64, p[1] as i64))
        .collect();
    let mut want: Vec<(i64, i64)> = centers.iter().map(|&(x, y)| (x, y)).collect();
    got.sort_unstable();
    want.sort_unstable();
    assert_eq!(got, want);
    let arm = set.weights[1..].iter().sum::<f64>() / 4.0;
    assert!(set.weights.iter().all(|w| (w - arm).abs() < 0.02));
}

/// Per draw, random amplitudes and dropped tips can push two crosses apart,
/// so separation is checked in aggregate and as a per-draw majority.
#[test]
fn cross_is_closer_to_cross_than_to_line() {
    let cfg = GenConfig::default();
    let mut rng = rng::stream(6, 1);
    let (mut same, mut other, mut separated) = (0.0, 0.0, 0);
    for _ in 0..50 {
        let mut set = |k| {
            extract_scatter_set(
                &render_constellation_patch(k, &cfg, 24, CANONICAL, false, &mut rng).unwrap(),
            )
            .unwrap()
        };
        let (a, b, line) = (
            set(ConstellationKind::Cross),
            set(ConstellationKind::Cross),
            set(ConstellationKind::Line),
        );
        let (dc, dl) = (
            scatter_distance(&a, &b).unwrap(),
            scatter_distance(&a, &line).unwrap(),
        );
        same += dc;
        other += dl;
        separated += (dl > dc) as usize;
    }
    assert!(other > same, "cross-line {other} vs cross-cross {same}");
    assert!(separated >= 45, "{separated}/50 draws separated");
}

#[test]
fn mean_box_count_matches_density() {
    let cfg = GenConfig::default();
    let mut rng = rng::stream(7, 1);
    let total: usize = (0..1000)
        .map(|_| {
            gen_scene(&cfg, Domain::Target, &mut rng)
                .unwrap()
                .annotation
                .boxes
                .len()
        })
        .sum();
    let mean = total as f64 / 1000.0;
    assert!((mean - 3.0).abs() <= 0.2, "mean {mean}");
}

#[test]
fn kmedoids_matches_pair_enumeration() {
    let mut rng = rng::stream(8, 1);
    let pts: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let c = if i < 5 { 0.0 } else { 50.0 };
            (
                c + rng.random_range(-2.0..2.0),
                c + rng.random_range(-2.0..2.0),
            )
        })
        .collect();
    let dist: Vec<Vec<f64>> = pts
        .iter()
        .map(|a| {
            pts.iter()
                .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                .collect()
        })
        .collect();
    let mut best = (f64::INFINITY, vec![]);
    for a in 0..10 {
        for b in a + 1..10 {
            let o = objective(&dist, &[a, b]);
            if o < best.0 {
                best = (o, vec![a, b]);
            }
        }
    }
    let c = kmedoids(&dist, 2, &mut rng::stream(8, 2)).unwrap();
    let mut m = c.medoids.clone();
    m.sort_unstable();
    assert_eq!(m, best.1);
    assert!((c.objective - best.0).abs() < 1e-12);
}

#[test]
fn dominant_anchor_similarity() {
    let row = structural_similarity(&[0.0, 10.0, 10.0, 10.0, 10.0], 0.1).unwrap();
    let e = (-10.0f64).exp();
    let z = 1.0 + 4.0 * e;
    assert!((row.raw[0] - 1.0 / z).abs() < 1e-12);
    assert!(row.raw[0] > 0.9998);
    assert!((row.sim[0] - 1.0 / z).abs() < 1e-12);
    for j in 1..5 {
        assert!((row.raw[j] - e / z).abs() < 1e-15);
        assert_eq!(row.sim[j], 0.1);
    }
}

#[test]
fn bank_neighbors_match_exhaustive_sort() {
    let mut rng = rng::stream(9, 1);
    for _ in 0..10 {
        let bank = random_bank(&mut rng, 50, 6);
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(f64, usize)> = bank
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (
                    e.raw.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
                        / (norm(&e.raw) * norm(&q)),
                    i,
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<usize> = scored.iter().take(5).map(|s| s.1).collect();
        assert_eq!(bank.adjacency(&q, 5).unwrap(), want);
    }
}

#[test]
fn spread_factor_matches_two_loops() {
    let mut rng = rng::stream(10, 1);
    for _ in 0..50 {
        let n = rng.random_range(2..8);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut diffs = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a < b {
                    diffs.push((v[a] - v[b]).abs());
                }
            }
        }
        let max = diffs.iter().cloned().fold(0.0, f64::max);
        let min = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = (1.0 + max / (min + 1e-6)).ln();
        assert!((spread_factor(&v, 1e-6) - want).abs() < 1e-12);
    }
}

/// Interpolated AP by enumerating every rank: precision envelopes summed at
/// each true-positive rank (greedy highest-IoU matching in score order).
fn ap_oracle(dets: &[Detection], gt: &[BBox]) -> f64 {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; gt.len()];
    let tp: Vec<bool> = order
        .iter()
        .map(|d| {
            let hit = (0..gt.len())
                .filter(|&j| !used[j] && gt[j].iou(&d.bbox) >= 0.5)
                .max_by(|&a, &b| gt[a].iou(&d.bbox).partial_cmp(&gt[b].iou(&d.bbox)).unwrap());
            if let Some(j) = hit {
                used[j] = true;
            }
            hit.is_some()
        })
        .collect();
    let prec = |k: usize| tp[..=k].iter().filter(|t| **t).count() as f64 / (k + 1) as f64;
    (0..tp.len())
        .filter(|&k| tp[k])
        .map(|k| (k..tp.len()).map(prec).fold(0.0, f64::max))
        .sum::<f64>()
        / gt.len() as f64
}

#[test]
fn average_precision_three_gt_four_detections() {
    let gt = vec![
        BBox::new(0., 0., 10., 10.),
        BBox::new(20., 0., 10., 10.),
        BBox::new(40., 0., 10., 10.),
    ];
    let det = |x: f64, score| Detection {
        image: 0,
        bbox: BBox::new(x, 0.5, 10., 10.),
        score,
    };
    let dets = vec![det(0.5, 0.9), det(70.0, 0.8), det(20.5, 0.7), det(1.0, 0.6)];
    let ap = average_precision(&dets, std::slice::from_ref(&gt), 0.5);
    assert!((ap - ap_oracle(&dets, &gt)).abs() < 1e-12);
    assert!((ap - 5.0 / 9.0).abs() < 1e-12);
}

#[test]
fn image_discriminator_loss_matches_direct_bce() {
    let mut rng = rng::stream(11, 1);
    for _ in 0..10 {
        let disc = Discriminator::new("img");
        let mut p = ParamSet::new();
        disc.init(&mut p, 3, 2.0, &mut rng);
        let gs = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let gt = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let (s, t) = (g.constant(gs.clone()), g.constant(gt.clone()));
        let l = l_img(&mut g, &b, &[(s, 0.0), (t, 1.0)], &disc).unwrap();
        let (w1, b1, w2, b2) = (
            p.get("img.w1").unwrap(),
            p.get("img.b1").unwrap(),
            p.get("img.w2").unwrap(),
            p.get("img.b2").unwrap(),
        );
        let hidden = w1.shape()[1];
        let prob = |x: &[f64]| {
            let z: f64 = (0..hidden)
                .map(|k| {
                    let a: f64 = (0..3)
                        .map(|i| x[i] * w1.data()[i * hidden + k])
                        .sum::<f64>()
                        + b1.data()[k];
                    a.tanh() * w2.data()[k]
                })
                .sum::<f64>()
                + b2.data()[0];
            1.0 / (1.0 + (-z).exp())
        };
        let mut total = 0.0;
        for r in 0..4 {
            total -= (1.0 - prob(gs.row(r))).ln();
        }
        for r in 0..2 {
            total -= prob(gt.row(r)).ln();
        }
        assert!((g.value(l).item() - total / 6.0).abs() < 1e-9);
    }
}

#[test]
fn constellation_families_separate() {
    let cfg = benchmark_generator();
    let mut rng = rng::stream(12, 1);
    let mut sets = |k| -> Vec<ScatterSet> {
        (0..15)
            .map(|_| {
                extract_scatter_set(
                    &render_constellation_patch(k, &cfg, 24, CANONICAL, true, &mut rng).unwrap(),
                )
                .unwrap()
            })
            .collect()
    };
    let (a, b) = (
        sets(ConstellationKind::Cross),
        sets(ConstellationKind::Diagonal),
    );
    let mean = |x: &[ScatterSet], y: &[ScatterSet], same: bool| {
        let mut d = Vec::new();
        for (i, p) in x.iter().enumerate() {
            for (j, q) in y.iter().enumerate() {
                if !same || i < j {
                    d.push(scatter_distance(p, q).unwrap());
                }
            }
        }
        d.iter().sum::<f64>() / d.len() as f64
    };
    let intra = (mean(&a, &a, true) + mean(&b, &b, true)) / 2.0;
    let inter = mean(&a, &b, false);
    assert!(intra < inter, "intra {intra} inter {inter}");
}

#[test]
fn proposals_cover_single_constellations() {
    let cfg = GenConfig {
        targets_per_scene: 1,
        ..benchmark_generator()
    };
    let pcfg = ProposalConfig::default();
    for (domain, factor) in [(Domain::Source, 3.0), (Domain::Target, 1.0)] {
        let mut covered = 0;
        for k in 0..200 {
            let s = gen_scene_at(&cfg, domain, factor, 13, k).unwrap();
            let boxes = propose(&s.image.image, &pcfg, &mut rng::stream(13, 1000 + k)).unwrap();
            let g = s.annotation.boxes[0];
            if boxes.iter().any(|b| b.iou(&g) >= 0.5) {
                covered += 1;
            }
        }
        assert!(covered >= 190, "{domain:?}: {covered}/200");
    }
}

#[test]
fn secure_threshold_on_three_sets() {
    use crnet::rsaa::{secure_partition, AdjacencySet, Gate};
    let factors = [0.0, 0.0, 10.0];
    let sets: Vec<AdjacencySet> = factors
        .iter()
        .map(|&g| AdjacencySet {
            neighbors: vec![0],
            eta: 1.0,
            gamma_st: g,
            gamma_u: g,
            min_neighbor_p: 1.0,
        })
        .collect();
    let mu = factors.iter().sum::<f64>() / 3.0;
    let sigma = (factors.iter().map(|g| (g - mu) * (g - mu)).sum::<f64>() / 3.0).sqrt();
    let part = secure_partition(&sets, Gate::Secure { lambda_se: -1.0 });
    assert!((part.threshold_st - (mu - sigma)).abs() < 1e-12);
    assert!(part.threshold_st < 0.0);
    assert!(part.secure.is_empty());
    let part = secure_partition(&sets, Gate::Secure { lambda_se: 0.0 });
    assert_eq!(part.secure, vec![0, 1]);
}

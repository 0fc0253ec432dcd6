//! Property tests over randomly generated inputs.

mod common;

use common::ins_degenerate_gap;
use crnet::anchors::structural_similarity;
use crnet::diffcore::special::digamma;
use crnet::diffcore::{Graph, ParamSet, Tensor};
use crnet::engine::metrics::{average_precision, Detection};
use crnet::evidential::{dirichlet_stats, kl_to_uniform};
use crnet::imaging::{gaussian_smooth, local_maxima, BBox, Image};
use crnet::rsaa::{
    l_rsaa, reliable_factor, secure_partition, spread_factor, AdjacencySet, FeatureBank, Gate,
};
use crnet::scatter::{emd_exact, ScatterSet};
use crnet::shfa::{l_img, Discriminator};
use proptest::prelude::*;

fn scatter_set(max: usize) -> impl Strategy<Value = ScatterSet> {
    prop::collection::vec(((0.0..64.0f64, 0.0..64.0f64), 0.05..1.0f64), 1..=max).prop_map(|v| {
        let (pts, w): (Vec<_>, Vec<_>) = v.into_iter().map(|((x, y), w)| ([x, y], w)).unzip();
        ScatterSet::new(pts, w).unwrap()
    })
}

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-1.0..1.0f64, n * cols)
            .prop_map(move |d| Tensor::matrix(n, cols, d).unwrap())
    })
}

fn image(max: usize) -> impl Strategy<Value = Image> {
    (3..max, 3..max).prop_flat_map(|(w, h)| {
        prop::collection::vec(0u8..20, w * h).prop_map(move |d| Image {
            width: w,
            height: h,
            data: d.into_iter().map(f64::from).collect(),
        })
    })
}

fn adjacency_set() -> impl Strategy<Value = AdjacencySet> {
    (
        0.0..5.0f64,
        0.0..5.0f64,
        0.0..1.0f64,
        0..4usize,
        0.0..1.0f64,
    )
        .prop_map(|(gst, gu, p, j, eta)| AdjacencySet {
            neighbors: vec![j, (j + 1) % 4],
            eta,
            gamma_st: gst,
            gamma_u: gu,
            min_neighbor_p: p,
        })
}

fn disc_params(d: usize, seed: u64) -> (Discriminator, ParamSet) {
    let disc = Discriminator::new("img");
    let mut p = ParamSet::new();
    disc.init(&mut p, d, 2.0, &mut crnet::rng::stream(seed, 1));
    (disc, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn opinion_masses_sum_to_one(e in prop::collection::vec(0.0..1e3f64, 1..6)) {
        let st = dirichlet_stats(&e, e.len()).unwrap();
        prop_assert!((st.belief.iter().sum::<f64>() + st.uncertainty - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_to_uniform_nonnegative(a in prop::collection::vec(1.0..20.0f64, 2..5)) {
        prop_assert!(kl_to_uniform(&a) >= -1e-12);
        prop_assert!(kl_to_uniform(&vec![1.0; a.len()]).abs() < 1e-12);
    }

    #[test]
    fn digamma_near_asymptotic_form(x in 10.0..1e4f64) {
        prop_assert!((digamma(x) - (x.ln() - 0.5 / x)).abs() < 1e-3);
    }

    #[test]
    fn emd_identity_and_symmetry(p in scatter_set(8), q in scatter_set(8)) {
        prop_assert!(emd_exact(&p, &p).unwrap().0.abs() < 1e-9);
        let (a, b) = (emd_exact(&p, &q).unwrap().0, emd_exact(&q, &p).unwrap().0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn emd_triangle(p in scatter_set(6), q in scatter_set(6), r in scatter_set(6)) {
        let d = |x: &ScatterSet, y: &ScatterSet| emd_exact(x, y).unwrap().0;
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-9);
    }

    #[test]
    fn emd_scales_with_coordinates(p in scatter_set(6), q in scatter_set(6), s in 0.1..5.0f64) {
        let d = emd_exact(&p, &q).unwrap().0;
        let ds = emd_exact(&p.scaled(s), &q.scaled(s)).unwrap().0;
        prop_assert!((ds - s * d).abs() <= 1e-9 * (1.0 + s * d));
    }

    #[test]
    fn plan_marginals(p in scatter_set(10), q in scatter_set(10)) {
        let (_, plan) = emd_exact(&p, &q).unwrap();
        prop_assert!(plan.flows.iter().all(|f| *f >= -1e-12));
        for (r, w) in plan.row_sums().iter().zip(&p.weights) {
            prop_assert!((r - w).abs() < 1e-9);
        }
        for (c, w) in plan.col_sums().iter().zip(&q.weights) {
            prop_assert!((c - w).abs() < 1e-9);
        }
    }

    #[test]
    fn maxima_ignore_constant_offset(img in image(16), c in 0u8..50) {
        let mut shifted = img.clone();
        shifted.data.iter_mut().for_each(|v| *v += f64::from(c));
        let at = |i: &Image| local_maxima(i, 10).iter().map(|p| (p.x, p.y)).collect::<Vec<_>>();
        prop_assert_eq!(at(&img), at(&shifted));
    }

    #[test]
    fn smoothing_commutes_with_transpose(img in image(20), sigma in 0.5..3.0f64) {
        let a = gaussian_smooth(&img, sigma).unwrap().transpose();
        let b = gaussian_smooth(&img.transpose(), sigma).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_shift_invariant(d in prop::collection::vec(0.0..30.0f64, 5), c in 0.0..100.0f64) {
        let shifted: Vec<f64> = d.iter().map(|v| v + c).collect();
        let (a, b) = (structural_similarity(&d, 0.1).unwrap(), structural_similarity(&shifted, 0.1).unwrap());
        for (x, y) in a.sim.iter().zip(&b.sim) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_permutation_equivariant(d in prop::collection::vec(0.0..30.0f64, 5), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let permuted: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
        let (a, b) = (structural_similarity(&d, 0.1).unwrap(), structural_similarity(&permuted, 0.1).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((b.sim[k] - a.sim[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn spread_factor_shift_invariant(v in prop::collection::vec(0.0..10.0f64, 2..8), c in -5.0..5.0f64) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((spread_factor(&v, 1e-6) - spread_factor(&shifted, 1e-6)).abs() < 1e-6);
        prop_assert_eq!(spread_factor(&vec![v[0]; v.len()], 1e-6), 0.0);
    }

    #[test]
    fn reliable_factor_bounded_and_monotone(p in 0.01..0.99f64, u in 0.01..0.99f64, dp in 1e-3..0.01f64, du in 1e-3..0.01f64) {
        let eta = reliable_factor(p, u, 30.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&eta));
        prop_assert!(reliable_factor(p + dp, u, 30.0).unwrap() > eta);
        prop_assert!(reliable_factor(p, u + du, 30.0).unwrap() < eta);
    }

    #[test]
    fn secure_sets_pass_both_thresholds(sets in prop::collection::vec(adjacency_set(), 1..12), lambda_se in -3.0..3.0f64) {
        let part = secure_partition(&sets, Gate::Secure { lambda_se });
        let both: Vec<usize> = (0..sets.len())
            .filter(|&i| sets[i].gamma_st <= part.threshold_st && sets[i].gamma_u <= part.threshold_u)
            .collect();
        prop_assert_eq!(&part.secure, &both);
        let mut fb: Vec<usize> = part.foreground.iter().chain(&part.background).copied().collect();
        fb.sort_unstable();
        prop_assert_eq!(fb, part.secure.clone());
        prop_assert!(part.foreground.iter().all(|&i| sets[i].min_neighbor_p >= 0.5));
        let all = secure_partition(&sets, Gate::Secure { lambda_se: 1e9 });
        prop_assert_eq!(all.secure.len(), sets.len());
        let varies = |f: fn(&AdjacencySet) -> f64| sets.iter().any(|s| f(s) != f(&sets[0]));
        if varies(|s| s.gamma_st) || varies(|s| s.gamma_u) {
            let none = secure_partition(&sets, Gate::Secure { lambda_se: -1e9 });
            prop_assert!(none.secure.is_empty());
        }
    }

    #[test]
    fn alignment_loss_nonnegative(sets in prop::collection::vec(adjacency_set(), 1..6), f in prop::collection::vec(-2.0..2.0f64, 30), margin in 0.0..1.0f64) {
        let mut bank = FeatureBank::new(8).unwrap();
        for row in f[15..27].chunks(3) {
            bank.push(row.to_vec(), ScatterSet::singleton(0.0, 0.0, 1.0), 0.5, 0.5);
        }
        let n = sets.len();
        let part = secure_partition(&sets, Gate::Disabled);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(n, 3, f[..n * 3].to_vec()).unwrap());
        let l = l_rsaa(&mut g, x, &sets, &part, &bank, margin).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn backward_is_linear(x in matrix(1..5, 3), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let grad_of = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let t = g.tanh(v);
            let f = g.sum(t);
            let sq = g.mul(v, v).unwrap();
            let s = g.sigmoid(sq);
            let h = g.sum(s);
            let f = g.scale(f, wa);
            let h = g.scale(h, wb);
            let l = g.add(f, h).unwrap();
            g.backward(l).unwrap().get(v)
        };
        let (gf, gh, gab) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a, b));
        for k in 0..x.len() {
            prop_assert!((gab.data()[k] - (a * gf.data()[k] + b * gh.data()[k])).abs() <= 1e-10);
        }
    }

    #[test]
    fn backward_is_deterministic(x in matrix(1..5, 3)) {
        let run = || {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let s = g.softmax(v).unwrap();
            let l = g.log(s);
            let l = g.sum(l);
            (g.value(l).item().to_bits(), g.backward(l).unwrap().get(v).data().iter().map(|d| d.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn bce_symmetric_under_relabeling(gs in matrix(1..5, 3), gt in matrix(1..5, 3), seed in 0u64..1000) {
        let (disc, p) = disc_params(3, seed);
        let mut flipped = p.clone();
        for name in ["img.w2", "img.b2"] {
            flipped.insert(name, p.get(name).unwrap().map(|v| -v));
        }
        let loss = |params: &ParamSet, ys: f64| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let (s, t) = (g.constant(gs.clone()), g.constant(gt.clone()));
            let l = l_img(&mut g, &b, &[(s, ys), (t, 1.0 - ys)], &disc).unwrap();
            g.value(l).item()
        };
        prop_assert!((loss(&p, 0.0) - loss(&flipped, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ap_bounded_and_low_duplicates_never_help(
        dets in prop::collection::vec((0.0..60.0f64, 0.0..60.0f64, 0.01..1.0f64), 1..8),
        gts in prop::collection::vec((0.0..60.0f64, 0.0..60.0f64), 1..4),
        which in 0usize..8,
    ) {
        let gt = vec![gts.iter().map(|&(x, y)| BBox::new(x, y, 10.0, 10.0)).collect::<Vec<_>>()];
        let mut d: Vec<Detection> =
            dets.iter().map(|&(x, y, s)| Detection { image: 0, bbox: BBox::new(x, y, 10.0, 10.0), score: s }).collect();
        let ap = average_precision(&d, &gt, 0.5);
        prop_assert!((0.0..=1.0).contains(&ap));
        let copy = d[which % d.len()];
        d.push(Detection { score: 0.001, ..copy });
        prop_assert!(average_precision(&d, &gt, 0.5) <= ap + 1e-12);
    }
}

#[test]
fn single_anchor_unit_similarity_is_plain_bce() {
    assert!(ins_degenerate_gap(0) <= 1e-9);
}

//! Loss terms and evaluation metrics against direct-formula oracles.

use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thtd_core::metrics::{
    auc_judd, cc_metric, evaluate_video, nss, shuffled_auc, shuffled_negatives, sim, FixationRecord,
    SaliencyMap, SAUC_NEGATIVE_CAP,
};
use thtd_core::objectives::{cc_loss, kl_loss, total_loss};
use thtd_core::{Error, Tensor};

fn uniform_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    SaliencyMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn tensor(m: &SaliencyMap) -> Tensor<f64> {
    m.to_tensor()
}

fn random_fixations(rng: &mut ChaCha8Rng, frame: usize, h: usize, w: usize, max: usize) -> FixationRecord {
    let k = rng.random_range(1..=max);
    let points = (0..k).map(|_| (rng.random_range(0..h), rng.random_range(0..w))).collect();
    FixationRecord::new(frame, h, w, points).unwrap()
}

/// ROC area by enumerating every distinct positive value as a threshold,
/// classifying `v >= θ` as salient, and applying the trapezoid rule between
/// (0,0), the thresholds in decreasing order, and (1,1).
fn brute_force_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let thresholds: BTreeSet<u64> = pos.iter().map(|v| v.to_bits()).collect();
    let mut thresholds: Vec<f64> = thresholds.into_iter().map(f64::from_bits).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        pts.push((fp, tp));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0).sum()
}

fn two_pass_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn cc_loss_matches_pearson_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let s = uniform_map(&mut rng, 8, 8);
        let g = uniform_map(&mut rng, 8, 8);
        let want = -two_pass_pearson(&s.data, &g.data);
        assert!((cc_loss(&tensor(&s), &tensor(&g)).unwrap() - want).abs() <= 1e-12);
        assert!((cc_metric(&s, &g).unwrap() + cc_loss(&tensor(&s), &tensor(&g)).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn cc_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = uniform_map(&mut rng, 6, 5);
    let t = tensor(&s);
    assert!((cc_loss(&t, &t).unwrap() + 1.0).abs() <= 1e-9);
    let flipped = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 3.0 - v).collect()).unwrap();
    assert!((cc_loss(&flipped, &t).unwrap() - 1.0).abs() <= 1e-9);
    let constant = Tensor::<f64>::full(vec![6, 5], 0.2);
    assert!(matches!(cc_loss(&constant, &t), Err(Error::Degenerate { .. })));
}

#[test]
fn kl_matches_direct_sum_and_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = uniform_map(&mut rng, 8, 8);
        let g = uniform_map(&mut rng, 8, 8);
        let (ss, gs): (f64, f64) = (s.data.iter().sum(), g.data.iter().sum());
        let want: f64 = s
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| {
                let (p, q) = (b / gs, (a / ss).max(1e-7));
                if p > 0.0 {
                    p * (p / q).ln()
                } else {
                    0.0
                }
            })
            .sum();
        let got = kl_loss(&tensor(&s), &tensor(&g)).unwrap();
        assert!((got - want).abs() <= 1e-10);
        assert!(got >= -1e-9);
        assert!(kl_loss(&tensor(&g), &tensor(&g)).unwrap().abs() <= 1e-9);
        // Any positive rescaling of the prediction is the same distribution.
        let scaled = Tensor::new(vec![8, 8], g.data.iter().map(|v| 7.5 * v).collect()).unwrap();
        assert!(kl_loss(&scaled, &tensor(&g)).unwrap().abs() <= 1e-9);
    }
    let uniform = Tensor::<f64>::full(vec![4, 4], 1.0);
    let mut delta = Tensor::<f64>::zeros(vec![4, 4]);
    delta.data_mut()[5] = 1.0;
    assert!((kl_loss(&uniform, &delta).unwrap() - 16f64.ln()).abs() <= 1e-6);
    let mut negative = uniform.clone();
    negative.data_mut()[0] = -0.1;
    assert!(matches!(kl_loss(&negative, &delta), Err(Error::InvalidInput(_))));
}

#[test]
fn total_loss_identity_and_blend_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = tensor(&uniform_map(&mut rng, 8, 8));
    let g = tensor(&uniform_map(&mut rng, 8, 8));
    let same = total_loss(&g, &g).unwrap();
    assert!((same.total + 1.0).abs() <= 1e-9);
    let mut prev = f64::INFINITY;
    for i in 0..10 {
        let lambda = i as f64 / 9.0;
        let blend: Vec<f64> = s.data().iter().zip(g.data()).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        let r = total_loss(&Tensor::new(vec![8, 8], blend).unwrap(), &g).unwrap();
        assert!(r.total < prev, "blend {lambda}: {} !< {prev}", r.total);
        prev = r.total;
    }
}

#[test]
fn nss_matches_oracle_and_closed_form() {
    let mut d = vec![0.0; 16];
    d[6] = 1.0;
    let s = SaliencyMap::new(4, 4, d).unwrap();
    let fix = FixationRecord::new(0, 4, 4, vec![(1, 2)]).unwrap();
    let n: f64 = 16.0;
    let std = ((1.0 / n) * (1.0 - 1.0 / n)).sqrt();
    assert!((nss(&s, &fix).unwrap() - (1.0 - 1.0 / n) / std).abs() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let s = uniform_map(&mut rng, 16, 16);
        let fix = random_fixations(&mut rng, 0, 16, 16, 20);
        let mean = s.data.iter().sum::<f64>() / 256.0;
        let std = (s.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
        let want = fix.points.iter().map(|&(r, c)| (s.at(r, c) - mean) / std).sum::<f64>() / fix.points.len() as f64;
        assert!((nss(&s, &fix).unwrap() - want).abs() <= 1e-10);
        let affine = s.map_values(|v| 4.0 * v + 2.5);
        assert!((nss(&affine, &fix).unwrap() - want).abs() <= 1e-9);
    }
}

#[test]
fn sim_and_cc_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let s = uniform_map(&mut rng, 16, 16);
        let g = uniform_map(&mut rng, 16, 16);
        let (ss, gs): (f64, f64) = (s.data.iter().sum(), g.data.iter().sum());
        let want: f64 = s.data.iter().zip(&g.data).map(|(a, b)| (a / ss).min(b / gs)).sum();
        let got = sim(&s, &g).unwrap();
        assert!((got - want).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&got));
        assert!((got - sim(&g, &s).unwrap()).abs() <= 1e-12);
        let cc = cc_metric(&s, &g).unwrap();
        assert!((cc - two_pass_pearson(&s.data, &g.data)).abs() <= 1e-10);
        assert!((cc - cc_metric(&g, &s).unwrap()).abs() <= 1e-12);
    }
    let a = SaliencyMap::new(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let b = SaliencyMap::new(1, 4, vec![0.0, 0.0, 2.0, 1.0]).unwrap();
    assert_eq!(sim(&a, &b).unwrap(), 0.0);
    assert!((sim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    let zero = SaliencyMap::new(1, 4, vec![0.0; 4]).unwrap();
    assert!(matches!(sim(&zero, &a), Err(Error::Degenerate { .. })));
}

#[test]
fn auc_judd_equals_threshold_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let s = uniform_map(&mut rng, 16, 16);
        let fix = random_fixations(&mut rng, 0, 16, 16, 20);
        let fixated: HashSet<_> = fix.points.iter().copied().collect();
        let pos: Vec<f64> = fix.points.iter().map(|&(r, c)| s.at(r, c)).collect();
        let neg: Vec<f64> = (0..256)
            .filter(|i| !fixated.contains(&(i / 16, i % 16)))
            .map(|i| s.data[i])
            .collect();
        let got = auc_judd(&s, &fix).unwrap();
        assert_eq!(got, brute_force_auc(&pos, &neg));
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn auc_judd_with_ties_and_constant_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        // Values on a coarse lattice so ties are common.
        let s = SaliencyMap::new(16, 16, (0..256).map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
        let fix = random_fixations(&mut rng, 0, 16, 16, 20);
        let fixated: HashSet<_> = fix.points.iter().copied().collect();
        let pos: Vec<f64> = fix.points.iter().map(|&(r, c)| s.at(r, c)).collect();
        let neg: Vec<f64> = (0..256).filter(|i| !fixated.contains(&(i / 16, i % 16))).map(|i| s.data[i]).collect();
        assert_eq!(auc_judd(&s, &fix).unwrap(), brute_force_auc(&pos, &neg));
    }
    let flat = SaliencyMap::new(4, 4, vec![0.3; 16]).unwrap();
    let fix = FixationRecord::new(0, 4, 4, vec![(0, 0), (2, 1)]).unwrap();
    assert_eq!(auc_judd(&flat, &fix).unwrap(), 0.5);
    let empty = FixationRecord::new(0, 4, 4, vec![]).unwrap();
    assert!(matches!(auc_judd(&flat, &empty), Err(Error::NoFixations { .. })));
}

#[test]
fn auc_judd_is_rank_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let s = uniform_map(&mut rng, 16, 16);
        let fix = random_fixations(&mut rng, 0, 16, 16, 20);
        let base = auc_judd(&s, &fix).unwrap();
        assert_eq!(auc_judd(&s.map_values(f64::exp), &fix).unwrap(), base);
        assert_eq!(auc_judd(&s.map_values(|v| 10.0 * v + 3.0), &fix).unwrap(), base);
    }
}

#[test]
fn shuffled_auc_equals_threshold_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..200 {
        let s = uniform_map(&mut rng, 16, 16);
        let fix = random_fixations(&mut rng, 0, 16, 16, 20);
        let others: Vec<_> = (0..3).map(|f| random_fixations(&mut rng, f + 1, 16, 16, 20)).collect();
        let fixated: HashSet<_> = fix.points.iter().copied().collect();
        let mut pool: Vec<(usize, usize)> = others.iter().flat_map(|o| o.points.iter().copied()).filter(|p| !fixated.contains(p)).collect();
        if pool.len() > SAUC_NEGATIVE_CAP * fix.points.len() {
            pool = shuffled_negatives(&fix, &others, i).unwrap();
            assert_eq!(pool.len(), SAUC_NEGATIVE_CAP * fix.points.len());
        }
        let pos: Vec<f64> = fix.points.iter().map(|&(r, c)| s.at(r, c)).collect();
        let neg: Vec<f64> = pool.iter().map(|&(r, c)| s.at(r, c)).collect();
        match shuffled_auc(&s, &fix, &others, i) {
            Ok(v) => assert_eq!(v, brute_force_auc(&pos, &neg)),
            Err(e) => assert!(pool.is_empty(), "{e}"),
        }
    }
}

#[test]
fn shuffled_auc_examples() {
    // Peaked on positives, zero at every negative location.
    let fix = FixationRecord::new(0, 8, 8, vec![(1, 1), (5, 6)]).unwrap();
    let mut d = vec![0.0; 64];
    d[9] = 1.0;
    d[46] = 1.0;
    let s = SaliencyMap::new(8, 8, d).unwrap();
    let others = [FixationRecord::new(3, 8, 8, vec![(0, 0), (7, 7), (1, 1)]).unwrap()];
    assert_eq!(shuffled_auc(&s, &fix, &others, 0).unwrap(), 1.0);
    let only_positives = [FixationRecord::new(3, 8, 8, vec![(1, 1)]).unwrap()];
    assert!(shuffled_auc(&s, &fix, &only_positives, 0).is_err());
}

#[test]
fn shuffled_auc_is_near_chance_for_matched_distributions() {
    // Symmetric radial map; positives and negatives drawn from the same law.
    let s = SaliencyMap::new(16, 16, (0..256).map(|i| {
        let (r, c) = ((i / 16) as f64 - 7.5, (i % 16) as f64 - 7.5);
        (-(r * r + c * c) / 40.0).exp()
    }).collect()).unwrap();
    let draw = |rng: &mut ChaCha8Rng, frame: usize, k: usize| {
        let pts = (0..k)
            .map(|_| {
                let r = (rng.random_range(0..16) + rng.random_range(0..16)) / 2;
                let c = (rng.random_range(0..16) + rng.random_range(0..16)) / 2;
                (r, c)
            })
            .collect();
        FixationRecord::new(frame, 16, 16, pts).unwrap()
    };
    let mut total = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let fix = draw(&mut rng, 0, 20);
        let others: Vec<_> = (1..6).map(|f| draw(&mut rng, f, 40)).collect();
        total += shuffled_auc(&s, &fix, &others, seed).unwrap();
    }
    let mean = total / 100.0;
    assert!((mean - 0.5).abs() <= 0.05, "mean S-AUC {mean}");
}

#[test]
fn evaluate_video_perfect_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gts: Vec<SaliencyMap> = (0..3).map(|_| uniform_map(&mut rng, 8, 8)).collect();
    let fixes: Vec<FixationRecord> = gts
        .iter()
        .enumerate()
        .map(|(f, g)| {
            let mut order: Vec<usize> = (0..64).collect();
            order.sort_by(|&a, &b| g.data[b].total_cmp(&g.data[a]));
            FixationRecord::new(f, 8, 8, order[..3].iter().map(|&i| (i / 8, i % 8)).collect()).unwrap()
        })
        .collect();
    let pool = [random_fixations(&mut rng, 0, 8, 8, 20)];
    let report = evaluate_video("v", &gts, &gts, &fixes, &pool, 5).unwrap();
    for f in &report.frames {
        assert!((f.cc.unwrap() - 1.0).abs() <= 1e-12);
        assert!((f.sim.unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(f.auc_j, Some(1.0));
    }

    // Three noisy frames scored one by one with the metric functions.
    let preds: Vec<SaliencyMap> = (0..3).map(|_| uniform_map(&mut rng, 8, 8)).collect();
    let report = evaluate_video("v", &preds, &gts, &fixes, &pool, 5).unwrap();
    for (i, f) in report.frames.iter().enumerate() {
        assert_eq!(f.cc, Some(cc_metric(&preds[i], &gts[i]).unwrap()));
        assert_eq!(f.sim, Some(sim(&preds[i], &gts[i]).unwrap()));
        assert_eq!(f.nss, Some(nss(&preds[i], &fixes[i]).unwrap()));
        assert_eq!(f.auc_j, Some(auc_judd(&preds[i], &fixes[i]).unwrap()));
        assert_eq!(f.s_auc, Some(shuffled_auc(&preds[i], &fixes[i], &pool, 5 + i as u64).unwrap()));
    }
    let mean_cc = report.frames.iter().map(|f| f.cc.unwrap()).sum::<f64>() / 3.0;
    assert!((report.aggregate.cc.unwrap() - mean_cc).abs() <= 1e-15);

    let single = evaluate_video("v", &preds[..1], &gts[..1], &fixes[..1], &pool, 5).unwrap();
    assert_eq!(single.aggregate.nss, single.frames[0].nss);
    assert_eq!(single.aggregate.sim, single.frames[0].sim);
}

#[test]
fn frames_without_fixations_only_skip_location_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let preds: Vec<SaliencyMap> = (0..2).map(|_| uniform_map(&mut rng, 8, 8)).collect();
    let gts: Vec<SaliencyMap> = (0..2).map(|_| uniform_map(&mut rng, 8, 8)).collect();
    let fixes = vec![
        random_fixations(&mut rng, 0, 8, 8, 5),
        FixationRecord::new(1, 8, 8, vec![]).unwrap(),
    ];
    let pool = [random_fixations(&mut rng, 0, 8, 8, 20)];
    let report = evaluate_video("v", &preds, &gts, &fixes, &pool, 0).unwrap();
    assert_eq!(report.skipped_location, 1);
    assert_eq!(report.skipped_distribution, 0);
    assert!(report.frames[1].cc.is_some() && report.frames[1].nss.is_none());
    assert_eq!(report.aggregate.nss, report.frames[0].nss);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cc_loss_ignores_positive_affine_maps(seed in 0u64..10_000, a in 0.01f64..100.0, b in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = tensor(&uniform_map(&mut rng, 5, 7));
        let g = tensor(&uniform_map(&mut rng, 5, 7));
        let moved = Tensor::new(vec![5, 7], s.data().iter().map(|v| a * v + b).collect()).unwrap();
        prop_assert!((cc_loss(&moved, &g).unwrap() - cc_loss(&s, &g).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn losses_ignore_joint_transposition(seed in 0u64..10_000, h in 2usize..7, w in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = uniform_map(&mut rng, h, w);
        let g = uniform_map(&mut rng, h, w);
        let t = |m: &SaliencyMap| {
            let mut d = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    d[c * h + r] = m.at(r, c);
                }
            }
            Tensor::new(vec![w, h], d).unwrap()
        };
        let (a, b) = (total_loss(&tensor(&s), &tensor(&g)).unwrap(), total_loss(&t(&s), &t(&g)).unwrap());
        prop_assert!((a.cc_term - b.cc_term).abs() <= 1e-12);
        prop_assert!((a.kl_term - b.kl_term).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_non_negative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = tensor(&uniform_map(&mut rng, 4, 4));
        let g = tensor(&uniform_map(&mut rng, 4, 4));
        prop_assert!(kl_loss(&s, &g).unwrap() >= -1e-9);
    }
}

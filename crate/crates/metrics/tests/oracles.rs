//! Metrics checked against set-based brute-force oracles.

use std::collections::BTreeSet;

use proptest::prelude::*;
use serpent_metrics::{
    aggregate, confusion_counts, hausdorff, pixel_metrics, ImageMetrics, SegmentationMask,
};

type PointSet = BTreeSet<(usize, usize)>;
type Field<'a> = &'a dyn Fn(&ImageMetrics) -> f64;

fn points(m: &SegmentationMask) -> PointSet {
    let mut s = BTreeSet::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                s.insert((r, c));
            }
        }
    }
    s
}

fn oracle_hausdorff(a: &PointSet, b: &PointSet, h: usize, w: usize) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return ((h * h + w * w) as f64).sqrt();
    }
    let dist = |p: &(usize, usize), q: &(usize, usize)| {
        let dr = p.0 as f64 - q.0 as f64;
        let dc = p.1 as f64 - q.1 as f64;
        (dr * dr + dc * dc).sqrt()
    };
    let directed = |x: &PointSet, y: &PointSet| {
        x.iter()
            .map(|p| y.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn mask_strategy(max: usize) -> impl Strategy<Value = (SegmentationMask, SegmentationMask)> {
    (1..=max, 1..=max, 0.0f64..1.0).prop_flat_map(|(h, w, density)| {
        let cells = prop::collection::vec(prop::bool::weighted(density.clamp(0.01, 0.99)), h * w);
        (cells.clone(), cells).prop_map(move |(a, b)| {
            let to_mask = |v: Vec<bool>| {
                SegmentationMask::new(h, w, v.into_iter().map(u8::from).collect()).unwrap()
            };
            (to_mask(a), to_mask(b))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn pixel_metrics_match_set_oracle((pred, gt) in mask_strategy(16)) {
        let (p, g) = (points(&pred), points(&gt));
        let tp = p.intersection(&g).count();
        let fp = p.difference(&g).count();
        let fn_ = g.difference(&p).count();
        let tn = pred.height() * pred.width() - p.union(&g).count();
        let c = confusion_counts(&pred, &gt).unwrap();
        prop_assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp as u64, fp as u64, fn_ as u64, tn as u64));

        let m = pixel_metrics(c);
        let union = p.union(&g).count();
        if union == 0 {
            prop_assert_eq!(m.iou, 1.0);
        } else {
            prop_assert_eq!(m.iou, tp as f64 / union as f64);
            if !p.is_empty() {
                prop_assert_eq!(m.precision, tp as f64 / p.len() as f64);
            }
            if !g.is_empty() {
                prop_assert_eq!(m.recall, tp as f64 / g.len() as f64);
            }
            if m.precision > 0.0 && m.recall > 0.0 {
                let harmonic = 2.0 / (1.0 / m.precision + 1.0 / m.recall);
                prop_assert!((m.f1 - harmonic).abs() < 1e-12);
            }
        }
        for v in [m.iou, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn hausdorff_matches_pairwise_oracle((pred, gt) in mask_strategy(16)) {
        let expected = oracle_hausdorff(&points(&pred), &points(&gt), pred.height(), pred.width());
        let got = hausdorff(&pred, &gt).unwrap();
        prop_assert_eq!(got, expected);
        prop_assert_eq!(hausdorff(&gt, &pred).unwrap(), got);
        prop_assert_eq!(hausdorff(&pred, &pred).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hausdorff_triangle_inequality(
        (h, w) in (1usize..=12, 1usize..=12),
        seeds in prop::array::uniform3(prop::collection::vec(any::<bool>(), 144)),
    ) {
        // Require non-empty sets: the one-empty sentinel is not a metric.
        let masks: Vec<_> = seeds
            .iter()
            .map(|bits| {
                let mut m = SegmentationMask::from_fn(h, w, |r, c| bits[r * 12 + c]);
                m.set(0, 0, true);
                m
            })
            .collect();
        let d = |i: usize, j: usize| hausdorff(&masks[i], &masks[j]).unwrap();
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
    }
}

#[test]
fn aggregate_matches_formula_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let reports: Vec<ImageMetrics> = (0..50)
        .map(|i| ImageMetrics {
            name: format!("img{i}"),
            iou: rng.random(),
            precision: rng.random(),
            recall: rng.random(),
            f1: rng.random(),
            hausdorff: rng.random::<f64>() * 40.0,
        })
        .collect();
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&ImageMetrics) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let std = |f: &dyn Fn(&ImageMetrics) -> f64| {
        let mu = mean(f);
        (reports.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let agg = aggregate(reports.clone()).unwrap();
    let checks: [(Field, _); 5] = [
        (&|r| r.iou, agg.iou),
        (&|r| r.precision, agg.precision),
        (&|r| r.recall, agg.recall),
        (&|r| r.f1, agg.f1),
        (&|r| r.hausdorff, agg.hausdorff),
    ];
    for (f, s) in checks {
        assert!((s.mean - mean(f)).abs() < 1e-9);
        assert!((s.std - std(f)).abs() < 1e-9);
    }
}

//! Randomized invariants checked against independent oracles.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use uwf_core::data::{load_manifest, stratified_split, write_manifest, ImageRecord, Split, TaskId, DEFAULT_RATIOS};
use uwf_core::domain::Domain;
use uwf_core::explain::{normalize, upsample};
use uwf_core::frequency::{clip_at_percentile, dft_magnitude, quantile, SpectralImage};
use uwf_core::fusion::{concat_standardized, fit_standardizer, FeatureMatrix};
use uwf_core::image::Image;
use uwf_core::metrics::{auprc, auroc, sensitivity_specificity, ScoredSet};
use uwf_core::model::{cutmix_with_lambda, one_hot};
use uwf_core::rng::rng_for;
use uwf_core::spatial::{local_mean_residual, spatial_representation, SpatialConfig};
use uwf_core::tensor::Tensor;

fn image_strategy(max_side: usize) -> impl Strategy<Value = Image<f64>> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |d| Image::from_vec(1, h, w, d))
    })
}

/// Direct double-sum DFT magnitude, centred the same way.
fn naive_dft(img: &Image<f64>) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let f = img.get(0, y, x);
                    re += f * a.cos();
                    im += f * a.sin();
                }
            }
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = (re * re + im * im).sqrt();
        }
    }
    out
}

fn records(pos: usize, neg: usize) -> Vec<ImageRecord> {
    (0..pos + neg)
        .map(|i| ImageRecord::new(format!("img{i:04}"), format!("img{i:04}.png")).with_label(TaskId::Quality, (i < pos) as u8))
        .collect()
}

fn scored_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..6).prop_map(|s| s as f64 / 5.0), n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

fn both_classes(labels: &[u8]) -> bool {
    labels.contains(&0) && labels.contains(&1)
}

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut count = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                if scores[i] > scores[j] {
                    count += 1.0;
                } else if scores[i] == scores[j] {
                    count += 0.5;
                }
            }
        }
    }
    count / (p as f64 * n as f64)
}

fn enumerated_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev) = (0.0, 0usize);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count();
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count();
        ap += (tp - prev) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        prev = tp;
    }
    ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_stratified_partition(pos in 0usize..120, neg in 0usize..120, seed in any::<u64>()) {
        // a non-empty class smaller than the number of splits is a data error
        prop_assume!(pos + neg > 0 && pos != 1 && pos != 2 && neg != 1 && neg != 2);
        let recs = records(pos, neg);
        let s = stratified_split(&recs, DEFAULT_RATIOS, seed, TaskId::Quality).unwrap();
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for id in s.ids_in(split) {
                prop_assert!(seen.insert(id));
            }
        }
        prop_assert_eq!(seen.len(), pos + neg);
        for (class, size) in [(1u8, pos), (0u8, neg)] {
            for (k, split) in Split::ALL.into_iter().enumerate() {
                let count = recs
                    .iter()
                    .filter(|r| r.label(TaskId::Quality) == Some(class) && s.get(&r.image_id) == Some(split))
                    .count();
                prop_assert!((count as f64 - DEFAULT_RATIOS[k] * size as f64).abs() < 1.0, "class {} {:?}: {}", class, split, count);
            }
        }
    }

    #[test]
    fn manifest_round_trip(labels in prop::collection::vec(prop::array::uniform3(prop::option::of(0u8..2)), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs: Vec<ImageRecord> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.iter().any(Option::is_some))
            .map(|(i, l)| {
                let mut r = ImageRecord::new(format!("id_{i}"), format!("sub/{i}.png"));
                r.labels = *l;
                r
            })
            .collect();
        write_manifest(&path, &recs).unwrap();
        prop_assert_eq!(load_manifest(&path).unwrap(), recs);
    }

    #[test]
    fn dft_matches_naive_sum(img in image_strategy(16)) {
        let fast = dft_magnitude(&img, "x").unwrap();
        let slow = naive_dft(&img);
        let peak = slow.iter().cloned().fold(0.0, f64::max).max(1e-12);
        for (a, b) in fast.magnitude.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-6 * b.max(peak * 1e-3), "{} vs {}", a, b);
        }
    }

    #[test]
    fn parseval_energy(data in prop::collection::vec(-1.0f64..1.0, 64)) {
        let img = Image::from_vec(1, 8, 8, data.clone());
        let s = dft_magnitude(&img, "x").unwrap();
        let spatial: f64 = data.iter().map(|v| v * v).sum();
        prop_assert!((s.energy() - 64.0 * spatial).abs() <= 1e-9 * (1.0 + 64.0 * spatial));
    }

    #[test]
    fn magnitude_is_conjugate_symmetric(img in image_strategy(12)) {
        let s = dft_magnitude(&img, "x").unwrap();
        let (h, w) = (s.height, s.width);
        let (cy, cx) = s.center();
        let peak = s.magnitude.iter().cloned().fold(0.0, f64::max);
        for y in 0..h {
            for x in 0..w {
                let (my, mx) = ((2 * cy + h - y) % h, (2 * cx + w - x) % w);
                prop_assert!((s.at(y, x) - s.at(my, mx)).abs() <= 1e-9 * (1.0 + peak));
            }
        }
        prop_assert!(s.magnitude.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn clipping_is_idempotent(values in prop::collection::vec(0.0f64..100.0, 1..80), p in 0.01f64..=1.0) {
        let s = SpectralImage {
            height: 1,
            width: values.len(),
            magnitude: values.clone(),
            clip_percentile: None,
            source_id: "s".into(),
        };
        let once = clip_at_percentile(&s, p).unwrap();
        let twice = clip_at_percentile(&once, p).unwrap();
        prop_assert_eq!(&once.magnitude, &twice.magnitude);
        let ceiling = quantile(&values, p);
        for (&v, &c) in values.iter().zip(&once.magnitude) {
            prop_assert_eq!(c, v.min(ceiling));
        }
        prop_assert_eq!(clip_at_percentile(&s, 1.0).unwrap().magnitude, values);
    }

    #[test]
    fn local_mean_residual_ignores_additive_cast(data in prop::collection::vec(0.0f64..1.0, 3 * 20 * 24), c in -0.5f64..0.5) {
        let img = Image::from_vec(3, 20, 24, data);
        let shifted = img.map(|v| v + c);
        let a = local_mean_residual(&img, 1.0 / 30.0, 0.5).unwrap();
        let b = local_mean_residual(&shifted, 1.0 / 30.0, 0.5).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn spatial_output_in_unit_range(data in prop::collection::vec(0.0f64..1.0, 3 * 40 * 48), target in 8usize..40) {
        let img = Image::from_vec(3, 40, 48, data);
        let cfg = SpatialConfig { crop_size: 32, ..SpatialConfig::default() };
        let out = spatial_representation(&img, &cfg, target).unwrap();
        prop_assert_eq!((out.height(), out.width()), (target, target));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_and_auprc_equal_brute_force((scores, labels) in scored_strategy()) {
        let set = ScoredSet::from_scores(scores.clone(), labels.clone()).unwrap();
        if both_classes(&labels) {
            prop_assert_eq!(auroc(&set).unwrap(), pairwise_auroc(&scores, &labels));
        }
        if labels.contains(&1) {
            prop_assert_eq!(auprc(&set).unwrap(), enumerated_ap(&scores, &labels));
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_maps((scores, labels) in scored_strategy(), a in 0.1f64..5.0, b in -3.0f64..3.0, k in 0.5f64..3.0) {
        prop_assume!(both_classes(&labels));
        let base = auroc(&ScoredSet::from_scores(scores.clone(), labels.clone()).unwrap()).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| a * s.powf(k) + b).collect();
        let logistic: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-(a * s + b)).exp())).collect();
        prop_assert_eq!(auroc(&ScoredSet::from_scores(mapped, labels.clone()).unwrap()).unwrap(), base);
        prop_assert_eq!(auroc(&ScoredSet::from_scores(logistic, labels).unwrap()).unwrap(), base);
    }

    #[test]
    fn auroc_complement_sums_to_one(labels in prop::collection::vec(0u8..2, 2..12), seed in any::<u64>()) {
        prop_assume!(both_classes(&labels));
        // distinct scores
        let mut rng = rng_for(seed, &["perm"]);
        use rand::seq::SliceRandom;
        let mut scores: Vec<f64> = (0..labels.len()).map(|i| i as f64 / labels.len() as f64).collect();
        scores.shuffle(&mut rng);
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let a = auroc(&ScoredSet::from_scores(scores, labels.clone()).unwrap()).unwrap();
        let b = auroc(&ScoredSet::from_scores(flipped, labels).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_falls_and_specificity_rises_with_threshold((scores, labels) in scored_strategy(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let set = ScoredSet::from_scores(scores, labels).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (se_lo, sp_lo) = sensitivity_specificity(&set, lo);
        let (se_hi, sp_hi) = sensitivity_specificity(&set, hi);
        if let (Some(a), Some(b)) = (se_lo, se_hi) {
            prop_assert!(a >= b);
        }
        if let (Some(a), Some(b)) = (sp_lo, sp_hi) {
            prop_assert!(a <= b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cutmix_weights_equal_pasted_area(seed in any::<u64>(), lambda in 0.0f64..=1.0, h in 4usize..24, w in 4usize..24) {
        let n = 4;
        let mut rng = rng_for(seed, &["cutmix"]);
        // image i is filled with the value i so pasted pixels are countable
        let data: Vec<f64> = (0..n).flat_map(|i| std::iter::repeat_n(i as f64, h * w)).collect();
        let x = Tensor::from_vec(&[n, 1, h, w], data);
        let y: Tensor<f64> = one_hot(&[0, 1, 0, 1]);
        let m = cutmix_with_lambda(&x, &y, lambda, &mut rng);
        for i in 0..n {
            let j = m.partner[i];
            let own = m.images.row(i).iter().filter(|&&v| v == i as f64).count();
            let own_frac = if i == j { 1.0 } else { own as f64 / (h * w) as f64 };
            let expected_own = if i == j { 1.0 } else { m.lambda_adjusted };
            prop_assert!((own_frac - expected_own).abs() < 1e-12);
            for q in 0..2 {
                let want = m.lambda_adjusted * y.row(i)[q] + (1.0 - m.lambda_adjusted) * y.row(j)[q];
                prop_assert!((m.labels.row(i)[q] - want).abs() < 1e-12);
            }
        }
        prop_assert!((m.lambda_adjusted - (1.0 - m.cut.area() as f64 / (h * w) as f64)).abs() < 1e-15);
    }

    #[test]
    fn standardizer_zero_mean_unit_std(rows in 2usize..30, cols in 1usize..6, seed in any::<u64>()) {
        use rand::Rng as _;
        let mut rng = rng_for(seed, &["std"]);
        let scales: Vec<f64> = (0..cols).map(|_| rng.random_range(0.1..50.0)).collect();
        let data: Vec<f64> = (0..rows * cols).map(|k| scales[k % cols] * rng.random_range(-1.0..1.0) + 3.0).collect();
        let ids: Vec<String> = (0..rows).map(|i| format!("r{i}")).collect();
        let fm = FeatureMatrix::new(ids, Tensor::from_vec(&[rows, cols], data), "a", Domain::Rgb, "pooled").unwrap();
        let stats = fit_standardizer(&fm, 1e-6).unwrap();
        let z = stats.apply(&fm).unwrap();
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| z.row(r)[c]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            if !stats.degenerate.contains(&c) {
                prop_assert!((std - 1.0).abs() < 1e-6, "std {}", std);
            }
        }
        let other = FeatureMatrix::new(fm.ids.clone(), fm.values.map(|v| 2.0 * v), "b", Domain::Rgb, "pooled").unwrap();
        let s2 = fit_standardizer(&other, 1e-6).unwrap();
        let cat = concat_standardized(&[fm.clone(), other.clone()], &[stats.clone(), s2.clone()]).unwrap();
        prop_assert_eq!(cat.columns(0, cols), z.values.clone());
        prop_assert_eq!(cat.columns(cols, 2 * cols), s2.apply(&other).unwrap().values);
    }

    /// With at least 8 output pixels per grid cell and a peak leading every
    /// other cell by 15%, the upsampled peak stays in the argmax cell.
    #[test]
    fn upsampling_keeps_the_argmax_cell(
        (rows, cols, coarse, peak) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(0.0f64..0.85, r * c), 0..r * c)
        }),
        fy in 8usize..20,
        fx in 8usize..20,
    ) {
        let mut coarse = coarse;
        coarse[peak] = 1.0;
        let (h, w) = (rows * fy + fy / 3, cols * fx + fx / 2);
        let up = normalize(&upsample(&coarse, rows, cols, h, w));
        let top = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(top, 1.0);
        prop_assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
        let k = up.iter().position(|&v| v == top).unwrap();
        let (y, x) = (k / w, k % w);
        prop_assert_eq!((y * rows / h) * cols + x * cols / w, peak);
    }
}

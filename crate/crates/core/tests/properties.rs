use proptest::prelude::*;

use exitweave::backbone::{count_mul_adds, BackboneConfig};
use exitweave::datahub::{make_batches, longtail_subsample, Dataset, Split};
use exitweave::exitpolicy::{allocate_meta, calibrate_thresholds, exit_index, exit_sizes, UNREACHABLE_THRESHOLD};
use exitweave::numkit::{softmax_stable, Matrix, RngStream};
use exitweave::wpn::{make_weights, squash, wpn_forward, WpnConfig, WpnParams};

fn table(n: usize, k: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed);
    Matrix::from_vec(n, k, (0..n * k).map(|_| rng.uniform()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn allocation_is_a_partition_with_floor_sizes(n in 1usize..120, k in 1usize..7, q in 0.05f64..2.5, seed in any::<u64>()) {
        let conf = table(n, k, seed);
        let alloc = allocate_meta(&conf, q).unwrap();
        let mut seen = vec![false; n];
        for subset in &alloc.subsets {
            for &j in subset {
                prop_assert!(!seen[j]);
                seen[j] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));

        // Recompute sizes from the fractions independently.
        let raw: Vec<f64> = (1..=k).map(|j| q.powi(j as i32)).collect();
        let total: f64 = raw.iter().sum();
        let mut expect: Vec<usize> = raw[..k - 1].iter().map(|r| ((r / total) * n as f64 + 1e-9).floor() as usize).collect();
        expect.push(n - expect.iter().sum::<usize>());
        prop_assert_eq!(&alloc.sizes, &expect);
        prop_assert_eq!(exit_sizes(q, k, n).unwrap(), expect);
        for (s, subset) in alloc.sizes.iter().zip(&alloc.subsets) {
            prop_assert_eq!(*s, subset.len());
        }
    }

    #[test]
    fn each_exit_takes_its_most_confident_remaining_samples(n in 2usize..60, k in 2usize..5, q in 0.2f64..2.0, seed in any::<u64>()) {
        let conf = table(n, k, seed);
        let alloc = allocate_meta(&conf, q).unwrap();
        let mut remaining: Vec<usize> = (0..n).collect();
        for (e, subset) in alloc.subsets.iter().enumerate() {
            let min_taken = subset.iter().map(|&j| conf.get(j, e)).fold(f64::INFINITY, f64::min);
            remaining.retain(|j| !subset.contains(j));
            for &j in &remaining {
                prop_assert!(conf.get(j, e) <= min_taken);
            }
        }
    }

    #[test]
    fn perturbation_sums_to_zero(b in 1usize..40, k in 1usize..6, delta in 0.01f64..0.99, seed in any::<u64>()) {
        let cfg = WpnConfig { num_exits: k, hidden_width: 12, hidden_depth: 1, delta };
        let mut rng = RngStream::new(seed);
        let p = WpnParams::init(cfg, &mut rng).unwrap();
        let losses = Matrix::from_vec(b, k, (0..b * k).map(|_| 5.0 * rng.uniform()).collect()).unwrap();
        let (raw, _) = wpn_forward(&p, &losses).unwrap();
        let (pert, w, _) = make_weights(&raw, delta).unwrap();
        prop_assert!(pert.0.sum().abs() < 1e-9);
        prop_assert!((w.0.mean() - 1.0).abs() < 1e-9);
        for v in squash(&raw.values, delta).data() {
            prop_assert!(v.abs() < delta);
        }
        for v in pert.0.data() {
            prop_assert!(v.abs() < 2.0 * delta);
        }
    }

    #[test]
    fn calibration_replays_allocation_counts(n in 1usize..100, k in 1usize..6, q in 0.05f64..2.0, seed in any::<u64>()) {
        let conf = table(n, k, seed);
        let alloc = allocate_meta(&conf, q).unwrap();
        let eps = calibrate_thresholds(&conf, q).unwrap();
        prop_assert_eq!(eps.eps[k - 1], 0.0);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[exit_index(conf.row(i), &eps)] += 1;
        }
        prop_assert_eq!(counts, alloc.sizes.clone());
        for (e, &s) in alloc.sizes.iter().enumerate().take(k - 1) {
            if s == 0 {
                prop_assert_eq!(eps.eps[e], UNREACHABLE_THRESHOLD);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let p = softmax_stable(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax_stable(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mul_adds_strictly_increase(input in 1usize..50, widths in prop::collection::vec(1usize..40, 1..6), classes in 2usize..20) {
        let cfg = BackboneConfig::new(input, widths, classes).unwrap();
        let c = count_mul_adds(&cfg);
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn batches_are_disjoint_full_and_deterministic(n in 2usize..300, b in 1usize..40, epoch in 0u64..5, seed in any::<u64>()) {
        prop_assume!(b <= n);
        let batches = make_batches(n, b, epoch, seed, false).unwrap();
        prop_assert_eq!(batches.len(), n / b);
        let mut seen = vec![false; n];
        for batch in &batches {
            prop_assert_eq!(batch.len(), b);
            for &i in batch {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert_eq!(make_batches(n, b, epoch, seed, false).unwrap(), batches);
        let all = make_batches(n, b, epoch, seed, true).unwrap();
        prop_assert_eq!(all.iter().map(Vec::len).sum::<usize>(), n);
    }

    #[test]
    fn longtail_counts_never_increase(classes in 2usize..30, per_class in 1usize..40, factor in 1.0f64..300.0, seed in any::<u64>()) {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let ds = Dataset::new(Matrix::zeros(n, 1), labels, classes, Split::Train).unwrap();
        let out = longtail_subsample(&ds, factor, &mut RngStream::new(seed)).unwrap();
        let counts = out.dataset.class_counts();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&c| c >= 1));
        prop_assert_eq!(counts[0], per_class);
    }
}

mod common;

use matchmap::discovery::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn separable_blobs_recovered_exactly() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(common::blob_recovery_ari(&mut rng), 1.0, "seed {seed}");
    }
}

#[test]
fn cf_is_additive_on_integer_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let pts: Vec<Vec<f64>> = (0..rng.gen_range(2..30)).map(|_| (0..5).map(|_| rng.gen_range(-20..20) as f64).collect()).collect();
        let cut = rng.gen_range(1..pts.len());
        let mut a = Cf::empty(5);
        pts[..cut].iter().for_each(|p| a.add(&Cf::point(p)));
        let mut b = Cf::empty(5);
        pts[cut..].iter().for_each(|p| b.add(&Cf::point(p)));
        let mut all = Cf::empty(5);
        pts.iter().for_each(|p| all.add(&Cf::point(p)));
        assert_eq!(a.merged(&b), all);
    }
}

#[test]
fn subclusters_partition_points_with_consistent_cfs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pts: Vec<Vec<f64>> = (0..400).map(|_| (0..3).map(|_| rng.gen_range(-9..9) as f64).collect()).collect();
    let r = birch_fit(&pts, &BirchConfig { threshold: 1.0, branching: 5, max_leaves: 30 }).unwrap();
    assert!(r.subclusters.len() <= 30);
    assert!(r.threshold >= 1.0);
    let mut seen: Vec<usize> = r.subclusters.iter().flat_map(|s| s.members.clone()).collect();
    seen.sort();
    assert_eq!(seen, (0..400).collect::<Vec<_>>());
    for s in &r.subclusters {
        let mut cf = Cf::empty(3);
        s.members.iter().for_each(|&m| cf.add(&Cf::point(&pts[m])));
        assert_eq!(cf, s.cf);
    }
}

#[test]
fn merge_reaches_target_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
    let r = birch_fit(&pts, &BirchConfig::default()).unwrap();
    for k in [1, 3, r.subclusters.len()] {
        let c = agglomerative_merge(&r.subclusters, k).unwrap();
        assert_eq!(c.len(), k);
        assert_eq!(c.iter().map(|c| c.size()).sum::<usize>(), 200);
    }
    assert!(agglomerative_merge(&r.subclusters, r.subclusters.len() + 1).is_err());
}

#[test]
fn ari_reference_values() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
    let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    assert!((v + 0.5).abs() < 1e-12, "{v}");
}

#[test]
fn purity_scoring_of_a_mixed_cluster() {
    let labels = vec![
        ComponentLabels { word: Some("a".into()), object_pixels: [("x".to_string(), 30)].into() },
        ComponentLabels { word: Some("a".into()), object_pixels: [("x".to_string(), 10)].into() },
        ComponentLabels { word: Some("b".into()), object_pixels: [("y".to_string(), 40)].into() },
        ComponentLabels { word: None, object_pixels: Default::default() },
    ];
    let c = Cluster { members: vec![0, 1, 2, 3], centroid: vec![0.0] };
    let s = &label_and_score(&[c], &labels).unwrap()[0];
    assert_eq!((s.word.as_str(), s.object.as_str()), ("a", "x"));
    assert!((s.word_precision - 2.0 / 3.0).abs() < 1e-12);
    assert!((s.object_precision - 0.5).abs() < 1e-12);
    assert!((s.harmonic_mean - harmonic_mean(2.0 / 3.0, 0.5)).abs() < 1e-12);
    assert_eq!(s.unlabeled, 1);
}

mod common;

use matchmap::concepts::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_model_scores_one_per_class() {
    let rep = common::oracle_concept_values(80);
    assert_eq!(rep.dimensions.len(), 10);
    for d in &rep.dimensions {
        assert_eq!(d.value, 1.0, "{d:?}");
    }
    assert_eq!(rep.learned, 10);
}

#[test]
fn toy_tree_values() {
    let t = Taxonomy::parse("root\tanimal\nanimal\tdog\nanimal\tcat\nroot\tplant\nplant\ttree\n").unwrap();
    assert_eq!(wu_palmer(&t, "cat", "cat").unwrap(), 1.0);
    assert_eq!(wu_palmer(&t, "dog", "cat").unwrap(), 2.0 / 3.0);
    assert_eq!(wu_palmer(&t, "dog", "tree").unwrap(), 1.0 / 3.0);
    for (a, b) in [("dog", "plant"), ("animal", "tree"), ("cat", "root")] {
        assert_eq!(wu_palmer(&t, a, b).unwrap(), wu_palmer(&t, b, a).unwrap());
    }
}

#[test]
fn concept_value_weights_by_similarity() {
    let t = Taxonomy::parse("root\tanimal\nanimal\tdog\nanimal\tcat\n").unwrap();
    let v = concept_value(&[("dog".into(), 0.5), ("cat".into(), 0.5)], "dog", &t).unwrap();
    assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(concept_value(&[], "dog", &t).unwrap(), 0.0);
    assert!(concept_value(&[("dog".into(), 1.0)], "fish", &t).is_err());
}

#[test]
fn learned_count_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scores: Vec<f64> = (0..500).map(|_| rng.gen()).collect();
    let mut prev = usize::MAX;
    for i in 0..=100 {
        let c = count_learned_concepts(&scores, i as f64 / 100.0);
        assert!(c <= prev);
        prev = c;
    }
    assert_eq!(count_learned_concepts(&[0.6, 0.61], LEARNED_THRESHOLD), 1);
}

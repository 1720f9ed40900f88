mod common;

use matchmap::alignment::{compute_matchmap, misa, pooled_embeddings, sima, sisa, Matchmap};
use matchmap::concepts::count_learned_concepts;
use matchmap::eval::{iou, recall_at_k, SimilarityMatrix};
use matchmap::model::{AudioFeatureMap, ImageFeatureMap};
use matchmap::post::{binarize_sigma, top_p_mass};
use matchmap::Tensor;
use proptest::prelude::*;

fn maps() -> impl Strategy<Value = (ImageFeatureMap<f64>, AudioFeatureMap<f64>)> {
    (1usize..12, 1usize..6, 1usize..6, 1usize..20).prop_flat_map(|(d, nr, nc, nt)| {
        (
            prop::collection::vec(-3.0f64..3.0, d * nr * nc),
            prop::collection::vec(-3.0f64..3.0, d * nt),
        )
            .prop_map(move |(i, a)| {
                (
                    ImageFeatureMap::new(Tensor::new(vec![d, nr, nc], i).unwrap(), 8).unwrap(),
                    AudioFeatureMap::new(Tensor::new(vec![d, nt], a).unwrap(), 8).unwrap(),
                )
            })
    })
}

fn matchmaps() -> impl Strategy<Value = Matchmap<f64>> {
    (1usize..6, 1usize..6, 1usize..24).prop_flat_map(|(nr, nc, nt)| {
        prop::collection::vec(-5.0f64..5.0, nr * nc * nt)
            .prop_map(move |v| Matchmap::new(Tensor::new(vec![nr, nc, nt], v).unwrap()).unwrap())
    })
}

fn integer_matchmaps() -> impl Strategy<Value = Matchmap<f64>> {
    (1usize..6, 1usize..6, 1usize..24).prop_flat_map(|(nr, nc, nt)| {
        prop::collection::vec(-40i32..40, nr * nc * nt).prop_map(move |v| {
            Matchmap::new(Tensor::new(vec![nr, nc, nt], v.into_iter().map(f64::from).collect()).unwrap()).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn sisa_is_pooled_dot((img, aud) in maps()) {
        let s = sisa(&compute_matchmap(&img, &aud).unwrap());
        let (pi, pa) = pooled_embeddings(&img, &aud);
        let dot: f64 = pi.iter().zip(&pa).map(|(a, b)| a * b).sum();
        prop_assert!((s - dot).abs() <= 1e-9 * (1.0 + dot.abs()));
    }

    #[test]
    fn max_variants_dominate_sisa(mm in matchmaps()) {
        prop_assert!(misa(&mm) >= sisa(&mm) - 1e-12);
        prop_assert!(sima(&mm) >= sisa(&mm) - 1e-12);
    }

    #[test]
    fn top_p_sets_are_nested(mm in matchmaps(), p in 0.01f64..1.0, q in 0.01f64..1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = top_p_mass(&mm, lo).unwrap();
        let b = top_p_mass(&mm, hi).unwrap();
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn top_p_holds_requested_mass(mm in matchmaps(), p in 0.01f64..1.0) {
        let sel = top_p_mass(&mm, p).unwrap();
        let d = mm.m.data();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let total: f64 = d.iter().map(|v| v - min).sum();
        prop_assume!(total > 0.0);
        let kept: f64 = d.iter().zip(&sel.bits).filter(|(_, &b)| b).map(|(v, _)| v - min).sum();
        prop_assert!(kept / total >= p - 1e-12);
    }

    #[test]
    fn binarize_exact_under_dyadic_affine(mm in integer_matchmaps(), e in -6i32..=6, b in -500i32..=500, k in 0.0f64..3.0) {
        let a = 2f64.powi(e);
        let lhs = binarize_sigma(&mm, k).unwrap();
        let rhs = binarize_sigma(&mm.map(|x| a * x + f64::from(b)), k).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn binarize_shrinks_as_k_grows(mm in matchmaps(), k1 in 0.0f64..3.0, dk in 0.0f64..2.0) {
        let a = binarize_sigma(&mm, k1 + dk).unwrap();
        let b = binarize_sigma(&mm, k1).unwrap();
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn learned_count_monotone(scores in prop::collection::vec(0.0f64..1.0, 0..64), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(count_learned_concepts(&scores, lo) >= count_learned_concepts(&scores, hi));
    }

    #[test]
    fn recall_grows_with_k(n in 2usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sim = SimilarityMatrix::new(n, (0..n * n).map(|_| rng.gen_range(0..4) as f64).collect()).unwrap();
        let mut prev = (0.0, 0.0);
        for k in 1..=n {
            let r = recall_at_k(&sim, k).unwrap();
            prop_assert!(r.caption_to_image >= prev.0 && r.image_to_caption >= prev.1);
            prev = (r.caption_to_image, r.image_to_caption);
        }
        prop_assert_eq!(prev, (1.0, 1.0));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<bool> = a.iter().map(|_| rng.gen_bool(0.5)).collect();
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn components_agree_with_flood_fill(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = common::random_volume(&mut rng);
        prop_assert!(common::components_match_oracle(&v));
    }
}

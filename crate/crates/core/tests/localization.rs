use std::collections::BTreeMap;

use matchmap::alignment::Matchmap;
use matchmap::data::{Corpus, WordAlignment};
use matchmap::eval::*;
use matchmap::synth::{gen_corpus, SynthConfig};
use matchmap::{Exec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_baseline_matches_area_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { train: 2, val: 60, ..SynthConfig::default() };
    let paths = gen_corpus(&cfg, dir.path(), Exec::Parallel).unwrap();
    let corpus = Corpus::load(&paths.val, Exec::Parallel).unwrap();
    let pairs = WordObjectPairSet::identity(&corpus.label_names);
    let (occ, _) = find_occurrences(&corpus, &pairs);
    // A uniform heatmap thresholded at 0.5 keeps half the pixels, so an
    // object covering a fraction `a` of the image scores about a / (1 + a).
    let mut per_pair: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for o in &occ {
        let m = &corpus.samples[o.sample].mask.data;
        let a = m.iter().filter(|&&l| l == o.label).count() as f64 / m.len() as f64;
        per_pair.entry(o.pair).or_default().push(a / (1.0 + a));
    }
    let want = per_pair.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / per_pair.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let got = random_heatmap_baseline(&corpus, &pairs, 0.5, 1000, &mut rng).unwrap();
    assert!((got - want).abs() < 0.1 * want, "baseline {got} vs oracle {want}");
    let area = mean_object_area(&corpus, &pairs);
    assert!(area > 0.03 && area < 0.15, "{area}");
}

#[test]
fn frame_mapping_and_heatmap() {
    let a = WordAlignment { word: "w".into(), t1: 0.16, t2: 0.40 };
    assert_eq!(alignment_frames(&a, 100.0, 8, 10).unwrap(), (2, 5));
    let late = WordAlignment { word: "w".into(), t1: 2.0, t2: 2.5 };
    assert!(alignment_frames(&late, 100.0, 8, 10).is_err());
    let short = WordAlignment { word: "w".into(), t1: 0.17, t2: 0.18 };
    assert_eq!(alignment_frames(&short, 100.0, 8, 10).unwrap(), (2, 3));

    // Only cell (1, 0) lights up during frames 2..5.
    let mut m = vec![0.0; 2 * 2 * 10];
    for t in 2..5 {
        m[(2) * 10 + t] = 1.0;
    }
    let mm = Matchmap::new(Tensor::new(vec![2, 2, 10], m).unwrap()).unwrap();
    let h = speech_prompted_heatmap(&mm, &a, 100.0, 8, (4, 4)).unwrap();
    assert_eq!(h.len(), 16);
    assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(h[3 * 4], 1.0);
    assert_eq!(h[3], 0.0);
    let flat = Matchmap::new(Tensor::full(&[2, 2, 10], 3.0)).unwrap();
    assert!(speech_prompted_heatmap(&flat, &a, 100.0, 8, (4, 4)).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn macro_average_over_pairs() {
    let pairs = WordObjectPairSet::new(vec![("a".into(), "x".into()), ("b".into(), "y".into()), ("c".into(), "z".into())]).unwrap();
    let occ = [(0, 0.2), (0, 0.4), (1, 0.9)]
        .iter()
        .enumerate()
        .map(|(i, &(pair, _))| Occurrence { sample: i, alignment: 0, pair, label: 1 })
        .collect::<Vec<_>>();
    let rep = score_localization(&pairs, &occ, &[0.2, 0.4, 0.9], 0.5, 0).unwrap();
    assert!((rep.macro_iou - (0.3 + 0.9) / 2.0).abs() < 1e-12);
    assert_eq!(rep.missing_pairs, vec!["c\tz".to_string()]);
    assert!(WordObjectPairSet::new(vec![("a".into(), "x".into()), ("a".into(), "x".into())]).is_err());
}

#[test]
fn pair_file_round_trip() {
    let text = "# word\tobject\nred_square\tred_square\nblue_circle\tblue_circle\n";
    let p = WordObjectPairSet::parse(text).unwrap();
    assert_eq!(p.pairs.len(), 2);
    assert_eq!(WordObjectPairSet::parse(&p.to_text()).unwrap(), p);
    assert!(WordObjectPairSet::parse("only-one-column\n").is_err());
}

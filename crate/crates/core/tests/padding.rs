mod common;

use matchmap::model::{batch_pad_truncate, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn padded_batches_match_run_alone_bit_exactly() {
    let model = Model::<f32>::init(ModelConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    assert_eq!(common::padding_mismatches(&model, &mut rng, 20), 0);
}

#[test]
fn output_lengths_follow_own_caption() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let specs: Vec<_> = [17, 64, 5].iter().map(|&f| common::random_spec(&mut rng, f)).collect();
    let refs: Vec<_> = specs.iter().collect();
    let batch = batch_pad_truncate(&refs).unwrap();
    assert_eq!(batch.max_len(), 64);
    let cfg = ModelConfig::default();
    assert_eq!(batch.output_lengths(&cfg.audio), vec![3, 8, 1]);
    let model = Model::<f32>::init(cfg, 0).unwrap();
    let out = model.encode_audio_batch(&batch, matchmap::Exec::Sequential).unwrap();
    let lens: Vec<usize> = out.iter().map(|m| m.len()).collect();
    assert_eq!(lens, vec![3, 8, 1]);
}

#[test]
fn single_item_batch_is_unpadded() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = common::random_spec(&mut rng, 33);
    let batch = batch_pad_truncate(&[&s]).unwrap();
    assert_eq!(batch.max_len(), 33);
    assert_eq!(batch.item(0), s.band_major());
}

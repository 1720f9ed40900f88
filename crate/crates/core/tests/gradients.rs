mod common;

use std::time::Instant;

use matchmap::alignment::SimilarityKind;

#[test]
fn loss_gradients_match_central_differences() {
    for kind in SimilarityKind::ALL {
        let t = Instant::now();
        let r = common::gradient_check(kind, 7);
        eprintln!(
            "{kind}: loss {:.4} f64 {:.2e} f32 {:.2e} train {:.2e} in {:?}",
            r.loss,
            r.f64_error,
            r.f32_error,
            r.train_path_error,
            t.elapsed()
        );
        assert!(r.loss > 0.0, "{kind}: hinge inactive, gradient is trivially zero");
        assert!(r.f64_error < 1e-6, "{kind}: f64 error {}", r.f64_error);
        assert!(r.f32_error < 1e-4, "{kind}: f32 error {}", r.f32_error);
        assert!(r.train_path_error < 1e-4, "{kind}: training path error {}", r.train_path_error);
    }
}

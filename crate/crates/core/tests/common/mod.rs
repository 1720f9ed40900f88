//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use matchmap::alignment::{margin_rank_loss, sample_imposters, Imposters, SimilarityKind};
use matchmap::audio::Spectrogram;
use matchmap::data::Sample;
use matchmap::image::RgbImage;
use matchmap::model::{AudioEncoderConfig, BnMoments, ConvBlock, ImageEncoderConfig, Model, ModelConfig};
use matchmap::train::batch_gradients;
use matchmap::{Exec, Graph, LabelTensor, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// D = 8, 8×8 image map, 12-frame audio map.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image: ImageEncoderConfig {
            input_size: 16,
            resize_to: 16,
            trunk: vec![ConvBlock::pooled(4)],
            embed_dim: 8,
        },
        audio: AudioEncoderConfig::with_channels([4, 4, 4, 4], 8),
    }
}

pub fn random_spec(rng: &mut impl Rng, frames: usize) -> Spectrogram {
    Spectrogram::new(Tensor::from_fn(&[frames, 40], |_| rng.gen_range(-3.0f32..3.0))).unwrap()
}

pub fn random_image_tensor<T: Scalar>(rng: &mut impl Rng, size: usize) -> Tensor<T> {
    Tensor::from_fn(&[3, size, size], |_| T::from_f64(rng.gen_range(-1.5..1.5)))
}

pub fn sample_with_spec(id: &str, spec: Spectrogram) -> Sample {
    Sample {
        id: id.into(),
        image: RgbImage::filled(16, 16, [0, 0, 0]),
        spec,
        mask: LabelTensor::new(vec![16, 16], vec![0; 256]).unwrap(),
        alignments: Vec::new(),
    }
}

/// Batch loss and parameter gradients from a single graph holding every item.
pub fn joint_loss<T: Scalar>(
    model: &Model<T>,
    inputs: &[Tensor<T>],
    specs: &[Spectrogram],
    bn: BnMoments,
    kind: SimilarityKind,
    imposters: &[Imposters],
) -> (f64, BTreeMap<String, Tensor<T>>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g, "", true);
    let mut im = Vec::new();
    let mut au = Vec::new();
    for (x, s) in inputs.iter().zip(specs) {
        let xi = g.constant(x.clone());
        im.push(model.image_graph(&mut g, &p, xi).unwrap());
        let a = g.constant(s.band_major().cast());
        au.push(model.audio_graph(&mut g, &p, a, s.num_frames(), bn).unwrap());
    }
    let loss = margin_rank_loss(&mut g, &im, &au, kind, 1.0, imposters).unwrap();
    let value = g.value(loss).item().to_f64();
    let grads = g.backward(loss).unwrap();
    let out = p.iter().map(|(k, &id)| (k.clone(), grads.get(id))).collect();
    (value, out)
}

/// Central differences of the batch loss in f64.
pub fn numeric_grads(
    model: &Model<f64>,
    inputs: &[Tensor<f64>],
    specs: &[Spectrogram],
    bn: BnMoments,
    kind: SimilarityKind,
    imposters: &[Imposters],
    h: f64,
) -> BTreeMap<String, Tensor<f64>> {
    let mut out = BTreeMap::new();
    let mut m = model.clone();
    for (name, t) in &model.params {
        let mut grad = Tensor::zeros(t.shape());
        for i in 0..t.len() {
            let orig = t.data()[i];
            m.params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = joint_loss(&m, inputs, specs, bn, kind, imposters).0;
            m.params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = joint_loss(&m, inputs, specs, bn, kind, imposters).0;
            m.params.get_mut(name).unwrap().data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), grad);
    }
    out
}

/// `‖a − b‖ / ‖b‖` over every tensor jointly.
pub fn relative_error<A: Scalar>(a: &BTreeMap<String, Tensor<A>>, b: &BTreeMap<String, Tensor<f64>>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, tb) in b {
        let ta = &a[k];
        for (x, y) in ta.data().iter().zip(tb.data()) {
            num += (x.to_f64() - y).powi(2);
            den += y * y;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

pub struct GradientCase {
    pub model: Model<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub specs: Vec<Spectrogram>,
    pub bn: BnMoments,
    pub imposters: Vec<Imposters>,
}

/// Random tiny model and a batch of three items with 96-frame captions.
pub fn gradient_case(seed: u64) -> GradientCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::init(tiny_config(), seed).unwrap();
    for t in model.params.values_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
    }
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| random_image_tensor(&mut rng, 16)).collect();
    let specs: Vec<Spectrogram> = [96, 90, 81].iter().map(|&f| random_spec(&mut rng, f)).collect();
    let refs: Vec<&Spectrogram> = specs.iter().collect();
    let bn = BnMoments::of_batch(&refs);
    let imposters = sample_imposters(3, &mut rng).unwrap();
    GradientCase {
        model,
        inputs,
        specs,
        bn,
        imposters,
    }
}

pub struct GradientReport {
    pub f64_error: f64,
    pub f32_error: f64,
    pub train_path_error: f64,
    pub loss: f64,
}

/// Analytic gradients (f64 joint graph, f32 joint graph, f32 training path)
/// against f64 central differences.
pub fn gradient_check(kind: SimilarityKind, seed: u64) -> GradientReport {
    let c = gradient_case(seed);
    let (loss, g64) = joint_loss(&c.model, &c.inputs, &c.specs, c.bn, kind, &c.imposters);
    let num = numeric_grads(&c.model, &c.inputs, &c.specs, c.bn, kind, &c.imposters, 1e-5);
    let m32: Model<f32> = c.model.cast();
    let in32: Vec<Tensor<f32>> = c.inputs.iter().map(|t| t.cast()).collect();
    let (_, g32) = joint_loss(&m32, &in32, &c.specs, c.bn, kind, &c.imposters);

    // The training path draws its own imposters; replay the same draw.
    let samples: Vec<Sample> = c.specs.iter().enumerate().map(|(i, s)| sample_with_spec(&i.to_string(), s.clone())).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let imp = sample_imposters(3, &mut rng.clone()).unwrap();
    let mut num_train = numeric_grads(&c.model, &c.inputs, &c.specs, c.bn, kind, &imp, 1e-5);
    for t in num_train.values_mut() {
        *t = t.scale(1.0 / 3.0);
    }
    let (_, gt) = batch_gradients(&m32, &in32, &refs, c.bn, kind, 1.0, &mut rng, Exec::default()).unwrap();
    GradientReport {
        f64_error: relative_error(&g64, &num),
        f32_error: relative_error(&g32, &num),
        train_path_error: relative_error(&gt, &num_train),
        loss,
    }
}

/// Nested-loop "same" convolution of a `cin × h × w` input.
pub fn conv_oracle(x: &[f64], cin: usize, h: usize, w: usize, k: &[f64], cout: usize, kh: usize, kw: usize, b: &[f64], s: usize) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
    let pt = (((ho - 1) * s + kh).saturating_sub(h)) / 2;
    let pl = (((wo - 1) * s + kw).saturating_sub(w)) / 2;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for c in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (oy * s + dy) as isize - pt as isize;
                            let xx = (ox * s + dx) as isize - pl as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += k[((o * cin + c) * kh + dy) * kw + dx] * x[(c * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Max over windows `[i·s, i·s + win)` clipped to the input, per plane.
pub fn maxpool2d_oracle(x: &[f64], planes: usize, h: usize, w: usize, win: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for oy in 0..h.div_ceil(s) {
            for ox in 0..w.div_ceil(s) {
                let mut best = f64::NEG_INFINITY;
                for y in oy * s..(oy * s + win).min(h) {
                    for xx in ox * s..(ox * s + win).min(w) {
                        best = best.max(x[(p * h + y) * w + xx]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// `M[r, c, t] = Σ_d I[d, r, c] · A[d, t]`.
pub fn matchmap_oracle(img: &[f64], d: usize, nr: usize, nc: usize, aud: &[f64], nt: usize) -> Vec<f64> {
    let mut out = vec![0.0; nr * nc * nt];
    for r in 0..nr {
        for c in 0..nc {
            for t in 0..nt {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += img[(k * nr + r) * nc + c] * aud[k * nt + t];
                }
                out[(r * nc + c) * nt + t] = acc;
            }
        }
    }
    out
}

/// 6-connected labeling by depth-first flood fill; 0 marks background.
pub fn flood_fill_labels(shape: [usize; 3], bits: &[bool]) -> (Vec<usize>, usize) {
    let [nr, nc, nt] = shape;
    let idx = |r: usize, c: usize, t: usize| (r * nc + c) * nt + t;
    let mut labels = vec![0; bits.len()];
    let mut next = 0;
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![start];
        labels[start] = next;
        while let Some(i) = stack.pop() {
            let (r, c, t) = (i / (nc * nt), (i / nt) % nc, i % nt);
            let mut nbrs = Vec::with_capacity(6);
            if r > 0 {
                nbrs.push(idx(r - 1, c, t));
            }
            if r + 1 < nr {
                nbrs.push(idx(r + 1, c, t));
            }
            if c > 0 {
                nbrs.push(idx(r, c - 1, t));
            }
            if c + 1 < nc {
                nbrs.push(idx(r, c + 1, t));
            }
            if t > 0 {
                nbrs.push(idx(r, c, t - 1));
            }
            if t + 1 < nt {
                nbrs.push(idx(r, c, t + 1));
            }
            for j in nbrs {
                if bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    (labels, next)
}

/// Whether `connected_components` partitions the volume exactly like the flood fill.
pub fn components_match_oracle(v: &matchmap::post::BinaryVolume) -> bool {
    let comps = matchmap::post::connected_components(v);
    let (labels, n) = flood_fill_labels(v.shape, &v.bits);
    if comps.len() != n {
        return false;
    }
    let [_, nc, nt] = v.shape;
    let mut seen = std::collections::BTreeSet::new();
    let mut covered = 0;
    for comp in &comps {
        let first = comp.voxels[0];
        let l = labels[(first.0 * nc + first.1) * nt + first.2];
        if l == 0 || !seen.insert(l) {
            return false;
        }
        if comp.voxels.iter().any(|&(r, c, t)| labels[(r * nc + c) * nt + t] != l) {
            return false;
        }
        covered += comp.voxels.len();
    }
    covered == v.bits.iter().filter(|&&b| b).count()
}

/// Recall@k by fully sorting every query's candidates (score descending, index ascending).
pub fn recall_oracle(n: usize, score: impl Fn(usize, usize) -> f64, k: usize) -> (f64, f64) {
    let hits = |by_row: bool| {
        (0..n)
            .filter(|&q| {
                let mut cands: Vec<usize> = (0..n).collect();
                let s = |c: usize| if by_row { score(q, c) } else { score(c, q) };
                cands.sort_by(|&a, &b| s(b).total_cmp(&s(a)).then(a.cmp(&b)));
                cands.iter().position(|&c| c == q).unwrap() < k
            })
            .count() as f64
            / n as f64
    };
    (hits(true), hits(false))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Largest relative deviation of the graph convolution from the nested-loop
/// oracle over `trials` random geometries.
pub fn conv_oracle_error(rng: &mut impl Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (kh, kw, s) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4));
        let x: Tensor<f64> = Tensor::from_fn(&[cin, h, w], |_| rng.gen_range(-1.0..1.0));
        let k: Tensor<f64> = Tensor::from_fn(&[cout, cin, kh, kw], |_| rng.gen_range(-1.0..1.0));
        let b: Tensor<f64> = Tensor::from_fn(&[cout], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let (xi, ki, bi) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(xi, ki, bi, s).unwrap();
        let want = conv_oracle(x.data(), cin, h, w, k.data(), cout, kh, kw, b.data(), s);
        worst = worst.max(max_rel(g.value(y).data(), &want));
    }
    worst
}

/// Same for 2-D and 1-D max pooling.
pub fn pool_oracle_error(rng: &mut impl Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (p, h, w) = (rng.gen_range(1..4), rng.gen_range(1..10), rng.gen_range(1..10));
        let (win, s) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x: Tensor<f64> = Tensor::from_fn(&[p, h, w], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y2 = g.maxpool2d(xi, win, s).unwrap();
        worst = worst.max(max_rel(g.value(y2).data(), &maxpool2d_oracle(x.data(), p, h, w, win, s)));
        let y1 = g.maxpool1d(xi, win, s).unwrap();
        worst = worst.max(max_rel(g.value(y1).data(), &maxpool2d_oracle(x.data(), p * h, 1, w, 1, 1).chunks(w).flat_map(|row| {
            (0..w.div_ceil(s)).map(|o| row[o * s..(o * s + win).min(w)].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect::<Vec<_>>()
        }).collect::<Vec<_>>()));
    }
    worst
}

pub fn matchmap_oracle_error(rng: &mut impl Rng, trials: usize) -> f64 {
    use matchmap::model::{AudioFeatureMap, ImageFeatureMap};
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (d, nr, nc, nt) = (rng.gen_range(1..9), rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..10));
        let img: Tensor<f64> = Tensor::from_fn(&[d, nr, nc], |_| rng.gen_range(-1.0..1.0));
        let aud: Tensor<f64> = Tensor::from_fn(&[d, nt], |_| rng.gen_range(-1.0..1.0));
        let want = matchmap_oracle(img.data(), d, nr, nc, aud.data(), nt);
        let mm = matchmap::alignment::compute_matchmap(
            &ImageFeatureMap::new(img.clone(), 1).unwrap(),
            &AudioFeatureMap::new(aud.clone(), 1).unwrap(),
        )
        .unwrap();
        worst = worst.max(max_rel(mm.m.data(), &want));
        let mut g = Graph::new();
        let (ii, ai) = (g.constant(img), g.constant(aud));
        let m = matchmap::alignment::matchmap_graph(&mut g, ii, ai).unwrap();
        worst = worst.max(max_rel(g.value(m).data(), &want));
    }
    worst
}

pub fn random_volume(rng: &mut impl Rng) -> matchmap::post::BinaryVolume {
    let shape = [rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..12)];
    let density = rng.gen_range(0.1..0.7);
    let bits = (0..shape.iter().product::<usize>()).map(|_| rng.gen_bool(density)).collect();
    matchmap::post::BinaryVolume::new(shape, bits).unwrap()
}

/// Random `n × n` similarity matrix; small integer scores force ties.
pub fn random_similarity(rng: &mut impl Rng, n: usize) -> matchmap::eval::SimilarityMatrix {
    let ties = rng.gen_bool(0.5);
    let data = (0..n * n)
        .map(|_| if ties { rng.gen_range(0..5) as f64 } else { rng.gen_range(-1.0..1.0) })
        .collect();
    matchmap::eval::SimilarityMatrix::new(n, data).unwrap()
}

pub fn recall_matches_oracle(sim: &matchmap::eval::SimilarityMatrix) -> bool {
    (1..=sim.n).all(|k| {
        let r = matchmap::eval::recall_at_k(sim, k).unwrap();
        (r.caption_to_image, r.image_to_caption) == recall_oracle(sim.n, |q, c| sim.get(q, c), k)
    })
}

pub fn random_maps(rng: &mut impl Rng) -> (matchmap::model::ImageFeatureMap<f64>, matchmap::model::AudioFeatureMap<f64>) {
    use matchmap::model::{AudioFeatureMap, ImageFeatureMap};
    let (d, nr, nc, nt) = (rng.gen_range(1..17), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..40));
    let img = Tensor::from_fn(&[d, nr, nc], |_| rng.gen_range(-2.0..2.0));
    let aud = Tensor::from_fn(&[d, nt], |_| rng.gen_range(-2.0..2.0));
    (ImageFeatureMap::new(img, 16).unwrap(), AudioFeatureMap::new(aud, 8).unwrap())
}

/// Relative gap between SISA of the matchmap and the pooled dot product.
pub fn sisa_pooled_gap(rng: &mut impl Rng) -> f64 {
    let (img, aud) = random_maps(rng);
    let mm = matchmap::alignment::compute_matchmap(&img, &aud).unwrap();
    let s = matchmap::alignment::sisa(&mm);
    let (pi, pa) = matchmap::alignment::pooled_embeddings(&img, &aud);
    let dot: f64 = pi.iter().zip(&pa).map(|(a, b)| a * b).sum();
    (s - dot).abs() / dot.abs().max(1e-12)
}

pub fn random_matchmap(rng: &mut impl Rng) -> matchmap::alignment::Matchmap<f64> {
    let shape = [rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..30)];
    let scale = rng.gen_range(0.1..10.0);
    matchmap::alignment::Matchmap::new(Tensor::from_fn(&shape, |_| rng.gen_range(-scale..scale))).unwrap()
}

/// Integer-valued matchmap, so affine maps with dyadic scale stay exact.
pub fn random_integer_matchmap(rng: &mut impl Rng) -> matchmap::alignment::Matchmap<f64> {
    let shape = [rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..30)];
    matchmap::alignment::Matchmap::new(Tensor::from_fn(&shape, |_| rng.gen_range(-50..=50) as f64)).unwrap()
}

/// Whether binarization at `k` is unchanged by `x ↦ a·x + b` for a random
/// power-of-two `a > 0` and integer `b`.
pub fn binarize_affine_invariant(rng: &mut impl Rng) -> bool {
    use matchmap::post::binarize_sigma;
    let mm = random_integer_matchmap(rng);
    let a = 2f64.powi(rng.gen_range(-6..=6));
    let b = rng.gen_range(-1000..=1000) as f64;
    let k = rng.gen_range(0.0..3.0);
    binarize_sigma(&mm, k).unwrap() == binarize_sigma(&mm.map(|x| a * x + b), k).unwrap()
}

/// Captions whose truncated output from a padded batch differs in any bit
/// from the run-alone output, over `batches` random mixed-length batches.
pub fn padding_mismatches(model: &Model<f32>, rng: &mut impl Rng, batches: usize) -> usize {
    use matchmap::model::batch_pad_truncate;
    let mut bad = 0;
    for _ in 0..batches {
        let b = rng.gen_range(2..6);
        let specs: Vec<Spectrogram> = (0..b)
            .map(|_| {
                let n = rng.gen_range(1..400);
                random_spec(rng, n)
            })
            .collect();
        let refs: Vec<&Spectrogram> = specs.iter().collect();
        let batch = batch_pad_truncate(&refs).unwrap();
        let out = model.encode_audio_batch(&batch, Exec::default()).unwrap();
        for (s, o) in specs.iter().zip(&out) {
            let alone = model.encode_audio(s).unwrap();
            if alone.seq.shape() != o.seq.shape()
                || alone.seq.data().iter().zip(o.seq.data()).any(|(a, b)| a.to_bits() != b.to_bits())
            {
                bad += 1;
            }
        }
    }
    bad
}

pub fn tone(freq: f64, seconds: f64, rate: u32, amp: f64) -> matchmap::audio::Waveform {
    let n = (seconds * rate as f64).round() as usize;
    let s = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect();
    matchmap::audio::Waveform::new(s, rate).unwrap()
}

/// Band with the highest mean log energy.
pub fn peak_band(spec: &Spectrogram) -> usize {
    let (t, b) = (spec.frames.shape()[0], spec.frames.shape()[1]);
    let mut means = vec![0.0f64; b];
    for f in 0..t {
        for (k, m) in means.iter_mut().enumerate() {
            *m += spec.frames.data()[f * b + k] as f64;
        }
    }
    (0..b).max_by(|&x, &y| means[x].total_cmp(&means[y])).unwrap()
}

pub fn nearest_center(freq: f64, rate: u32) -> usize {
    let c = matchmap::audio::mel_centers(rate);
    (0..c.len()).min_by(|&x, &y| (c[x] - freq).abs().total_cmp(&(c[y] - freq).abs())).unwrap()
}

/// Tiny-model training samples with random 16×16 images.
pub fn tiny_samples(rng: &mut impl Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let data = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
            let len = rng.gen_range(40..120);
            let mut s = sample_with_spec(&format!("s{i}"), random_spec(rng, len));
            s.image = RgbImage::new(16, 16, data).unwrap();
            s
        })
        .collect()
}

/// `k` isotropic Gaussian blobs (σ = 0.3) around well-separated centers,
/// interleaved so no blob arrives contiguously.
pub fn gaussian_blobs(rng: &mut impl Rng, k: usize, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, 0.3).unwrap();
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..dim).map(|d| if d == c % dim { 10.0 * (1 + c / dim) as f64 } else { 0.0 }).collect())
        .collect();
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..per {
        for (c, center) in centers.iter().enumerate() {
            pts.push(center.iter().map(|&m| m + noise.sample(rng)).collect());
            truth.push(c);
        }
    }
    (pts, truth)
}

/// ARI of Birch + agglomerative clustering against the blob labels.
pub fn blob_recovery_ari(rng: &mut impl Rng) -> f64 {
    use matchmap::discovery::{adjusted_rand_index, agglomerative_merge, birch_fit, BirchConfig};
    let (pts, truth) = gaussian_blobs(rng, 5, 60, 4);
    let birch = birch_fit(&pts, &BirchConfig { threshold: 0.5, branching: 8, max_leaves: 64 }).unwrap();
    let clusters = agglomerative_merge(&birch.subclusters, 5).unwrap();
    let mut pred = vec![usize::MAX; pts.len()];
    for (ci, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            pred[m] = ci;
        }
    }
    assert!(pred.iter().all(|&p| p != usize::MAX));
    adjusted_rand_index(&truth, &pred).unwrap()
}

/// Concept values of the hand-built oracle model on synthetic samples.
pub fn oracle_concept_values(samples: usize) -> matchmap::concepts::ConceptReport {
    use matchmap::audio::Framing;
    use matchmap::concepts::{concept_report, oracle_features, Taxonomy, LEARNED_THRESHOLD, TOP_K};
    use matchmap::synth::{gen_sample, taxonomy_text, SynthConfig};
    let cfg = SynthConfig::default();
    let table = cfg.class_table();
    let mut names = vec![matchmap::data::BACKGROUND.to_string()];
    names.extend(table.iter().map(|c| c.name.clone()));
    let taxonomy = Taxonomy::parse(&taxonomy_text(&table)).unwrap();
    let framing = Framing::for_rate(cfg.sample_rate);
    let mut images = Vec::new();
    let mut audio = Vec::new();
    let mut alignments = Vec::new();
    let mut labels = Vec::new();
    for i in 0..samples {
        let s = gen_sample(&cfg, &table, i, String::new()).unwrap();
        let frames = framing.frame_count(s.audio.samples.len());
        let (im, au) = oracle_features(&s.mask, &s.alignments, &names, 8, frames, 8).unwrap();
        images.push(im);
        audio.push(au);
        alignments.push(s.alignments);
        labels.push(s.mask);
    }
    concept_report(&images, &audio, &alignments, &labels, &names, &taxonomy, TOP_K, LEARNED_THRESHOLD).unwrap()
}

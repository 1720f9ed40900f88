//! Retrieval recall@K and speech-prompted localization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{compute_matchmap, similarity, Matchmap, SimilarityKind};
use crate::data::{Corpus, Sample, WordAlignment};
use crate::error::{io_err, Error, Result};
use crate::image::{preprocess_image, resize_bilinear, transform_labels, CropPlan, ImageStats, Mode};
use crate::model::{AudioFeatureMap, ImageFeatureMap, Model};
use crate::par::Exec;
use crate::tensor::{LabelTensor, Scalar};

/// Input spectrogram frames per second.
pub const INPUT_FRAME_RATE: f64 = 100.0;
pub const DEFAULT_TAU: f64 = 0.5;

/// `N × N` scores; row `i` is caption `i`, column `j` is image `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::InvalidArgument(format!("similarity matrix needs {n}x{n} entries, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("similarity matrix has non-finite entries".into()));
        }
        Ok(Self { n, data })
    }

    pub fn get(&self, caption: usize, image: usize) -> f64 {
        self.data[caption * self.n + image]
    }
}

/// Eval-mode feature maps of a whole corpus.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub images: Vec<ImageFeatureMap<f32>>,
    pub audio: Vec<AudioFeatureMap<f32>>,
}

pub fn eval_input(model: &Model<f32>, stats: &ImageStats, sample: &Sample) -> Result<crate::tensor::Tensor<f32>> {
    let cfg = &model.config.image;
    // eval mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    preprocess_image(&sample.image, cfg.resize_to, cfg.input_size, stats, Mode::Eval, &mut rng)
}

/// Label map aligned with the eval-mode encoder input.
pub fn eval_labels(model: &Model<f32>, sample: &Sample) -> Result<LabelTensor> {
    let cfg = &model.config.image;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = CropPlan::new(sample.image.width, sample.image.height, cfg.resize_to, cfg.input_size, Mode::Eval, &mut rng)?;
    transform_labels(&sample.mask, &plan)
}

pub fn encode_corpus(model: &Model<f32>, stats: &ImageStats, samples: &[Sample], exec: Exec) -> Result<EncodedCorpus> {
    let pairs = exec.try_map_range(samples.len(), |i| -> Result<_> {
        let s = &samples[i];
        Ok((model.encode_image(&eval_input(model, stats, s)?)?, model.encode_audio(&s.spec)?))
    })?;
    let (images, audio) = pairs.into_iter().unzip();
    Ok(EncodedCorpus { images, audio })
}

pub fn similarity_matrix(enc: &EncodedCorpus, kind: SimilarityKind, exec: Exec) -> Result<SimilarityMatrix> {
    let n = enc.images.len();
    if enc.audio.len() != n {
        return Err(Error::InvalidArgument(format!("{} images vs {} captions", n, enc.audio.len())));
    }
    let rows = exec.try_map_range(n, |i| -> Result<Vec<f64>> {
        (0..n)
            .map(|j| Ok(similarity(&compute_matchmap(&enc.images[j], &enc.audio[i])?, kind).to_f64()))
            .collect()
    })?;
    SimilarityMatrix::new(n, rows.concat())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    /// Caption query, image results.
    pub caption_to_image: f64,
    /// Image query, caption results.
    pub image_to_caption: f64,
}

/// Fraction of queries whose match ranks within the top `k` (descending
/// score, ties to the lower index).
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<Recall> {
    let n = sim.n;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("recall@{k} needs 1 <= K <= N = {n}")));
    }
    let rank = |score: &dyn Fn(usize) -> f64, target: usize| {
        let s = score(target);
        (0..n).filter(|&j| score(j) > s || (score(j) == s && j < target)).count()
    };
    let mut c2i = 0usize;
    let mut i2c = 0usize;
    for q in 0..n {
        if rank(&|j| sim.get(q, j), q) < k {
            c2i += 1;
        }
        if rank(&|j| sim.get(j, q), q) < k {
            i2c += 1;
        }
    }
    Ok(Recall {
        k,
        caption_to_image: c2i as f64 / n as f64,
        image_to_caption: i2c as f64 / n as f64,
    })
}

/// Matchmap frame range `[f1, f2)` of an aligned interval.
pub fn alignment_frames(a: &WordAlignment, frame_rate_in: f64, downsample: usize, frames: usize) -> Result<(usize, usize)> {
    a.validate()?;
    let to_frame = |t: f64| (t * frame_rate_in / downsample as f64 + 1e-9).floor() as usize;
    let f1 = to_frame(a.t1);
    if f1 >= frames {
        return Err(Error::InvalidArgument(format!(
            "alignment `{}` starts at {} s, beyond the {frames}-frame matchmap",
            a.word, a.t1
        )));
    }
    let f2 = to_frame(a.t2).min(frames).max(f1 + 1);
    Ok((f1, f2))
}

/// `H × W` heatmap in `[0, 1]`: the matchmap summed over the word's frames,
/// bilinearly upsampled and min-max normalized (constant maps become zeros).
pub fn speech_prompted_heatmap<T: Scalar>(
    mm: &Matchmap<T>,
    a: &WordAlignment,
    frame_rate_in: f64,
    downsample: usize,
    image_size: (usize, usize),
) -> Result<Vec<f64>> {
    let (f1, f2) = alignment_frames(a, frame_rate_in, downsample, mm.frames())?;
    let (nr, nc) = (mm.rows(), mm.cols());
    let mut grid = vec![0.0f64; nr * nc];
    for r in 0..nr {
        for c in 0..nc {
            grid[r * nc + c] = (f1..f2).map(|t| mm.get(r, c, t).to_f64()).sum();
        }
    }
    let (h, w) = image_size;
    let mut up = resize_bilinear(&grid, 1, nr, nc, h, w);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut up {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        up.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(up)
}

pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "iou",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// `(word, object label)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordObjectPairSet {
    pub pairs: Vec<(String, String)>,
}

impl WordObjectPairSet {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate pair {} / {}", p.0, p.1)));
            }
        }
        Ok(Self { pairs })
    }

    /// Every non-background label paired with the word of the same name.
    pub fn identity(label_names: &[String]) -> Self {
        Self {
            pairs: label_names.iter().skip(1).map(|n| (n.clone(), n.clone())).collect(),
        }
    }

    /// Two tab-separated columns per line: word, object label.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let mut it = l.split('\t');
                match (it.next(), it.next(), it.next()) {
                    (Some(w), Some(o), None) if !w.is_empty() && !o.is_empty() => Ok((w.to_string(), o.to_string())),
                    _ => Err(Error::InvalidArgument(format!("pair line `{l}` is not `word<TAB>object`"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(w, o)| format!("{w}\t{o}\n")).collect()
    }
}

/// One aligned word whose paired object is present in the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Occurrence {
    pub sample: usize,
    pub alignment: usize,
    pub pair: usize,
    pub label: u16,
}

/// Occurrences of every pair, plus the number of aligned words skipped for
/// lacking a pair or a visible object.
pub fn find_occurrences(corpus: &Corpus, pairs: &WordObjectPairSet) -> (Vec<Occurrence>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (si, s) in corpus.samples.iter().enumerate() {
        for (ai, a) in s.alignments.iter().enumerate() {
            let hit = pairs.pairs.iter().enumerate().find_map(|(pi, (w, o))| {
                if *w != a.word {
                    return None;
                }
                let label = corpus.label_of(o)?;
                s.mask.data.contains(&label).then_some((pi, label))
            });
            match hit {
                Some((pair, label)) => out.push(Occurrence {
                    sample: si,
                    alignment: ai,
                    pair,
                    label,
                }),
                None => skipped += 1,
            }
        }
    }
    (out, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub word: String,
    pub object: String,
    pub occurrences: usize,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub tau: f64,
    pub pairs: Vec<PairScore>,
    pub macro_iou: f64,
    pub skipped: usize,
    pub missing_pairs: Vec<String>,
}

/// Per-pair mean IoU of `heatmap >= tau` against the object mask, then the
/// unweighted mean over pairs that occur.
pub fn score_localization(
    pairs: &WordObjectPairSet,
    occurrences: &[Occurrence],
    ious: &[f64],
    tau: f64,
    skipped: usize,
) -> Result<LocalizationReport> {
    if pairs.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty word-object pair set".into()));
    }
    let mut acc: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (o, &v) in occurrences.iter().zip(ious) {
        let e = acc.entry(o.pair).or_default();
        e.0 += 1;
        e.1 += v;
    }
    let mut scores = Vec::new();
    let mut missing = Vec::new();
    for (pi, (w, o)) in pairs.pairs.iter().enumerate() {
        match acc.get(&pi) {
            Some(&(n, s)) => scores.push(PairScore {
                word: w.clone(),
                object: o.clone(),
                occurrences: n,
                mean_iou: s / n as f64,
            }),
            None => missing.push(format!("{w}\t{o}")),
        }
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no word-object pair occurs in the corpus".into()));
    }
    if !missing.is_empty() {
        log::warn!("{} word-object pairs never occur and are left out of the average", missing.len());
    }
    if skipped > 0 {
        log::info!("skipped {skipped} aligned words without a paired visible object");
    }
    let macro_iou = scores.iter().map(|s| s.mean_iou).sum::<f64>() / scores.len() as f64;
    Ok(LocalizationReport {
        tau,
        pairs: scores,
        macro_iou,
        skipped,
        missing_pairs: missing,
    })
}

pub fn threshold(heatmap: &[f64], tau: f64) -> Vec<bool> {
    heatmap.iter().map(|&v| v >= tau).collect()
}

/// Speech-prompted localization of a trained model over a corpus.
pub fn localization_eval(
    model: &Model<f32>,
    stats: &ImageStats,
    corpus: &Corpus,
    pairs: &WordObjectPairSet,
    tau: f64,
    exec: Exec,
) -> Result<LocalizationReport> {
    if pairs.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty word-object pair set".into()));
    }
    let (occ, skipped) = find_occurrences(corpus, pairs);
    let size = model.config.image.input_size;
    let ds = model.config.audio.downsample_factor();
    let per_sample = exec.try_map_range(corpus.len(), |si| -> Result<Vec<(usize, f64)>> {
        let mine: Vec<(usize, &Occurrence)> = occ.iter().enumerate().filter(|(_, o)| o.sample == si).collect();
        if mine.is_empty() {
            return Ok(Vec::new());
        }
        let s = &corpus.samples[si];
        let img = model.encode_image(&eval_input(model, stats, s)?)?;
        let aud = model.encode_audio(&s.spec)?;
        let mm = compute_matchmap(&img, &aud)?;
        let labels = eval_labels(model, s)?;
        mine.into_iter()
            .map(|(k, o)| {
                let h = speech_prompted_heatmap(&mm, &s.alignments[o.alignment], INPUT_FRAME_RATE, ds, (size, size))?;
                let mask: Vec<bool> = labels.data.iter().map(|&l| l == o.label).collect();
                Ok((k, iou(&threshold(&h, tau), &mask)?))
            })
            .collect()
    })?;
    let mut ious = vec![0.0; occ.len()];
    for (k, v) in per_sample.into_iter().flatten() {
        ious[k] = v;
    }
    score_localization(pairs, &occ, &ious, tau, skipped)
}

/// Expected macro IoU of uniformly random per-pixel heatmaps, averaged over
/// `trials` draws (one random occurrence per pair in each trial).
pub fn random_heatmap_baseline(
    corpus: &Corpus,
    pairs: &WordObjectPairSet,
    tau: f64,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (occ, _) = find_occurrences(corpus, pairs);
    let mut by_pair: BTreeMap<usize, Vec<&Occurrence>> = BTreeMap::new();
    for o in &occ {
        by_pair.entry(o.pair).or_default().push(o);
    }
    if by_pair.is_empty() || trials == 0 {
        return Err(Error::InvalidArgument("random baseline needs occurring pairs and trials".into()));
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let mut sum = 0.0;
        for list in by_pair.values() {
            let o = list[rng.gen_range(0..list.len())];
            let mask: Vec<bool> = corpus.samples[o.sample].mask.data.iter().map(|&l| l == o.label).collect();
            let heat: Vec<f64> = (0..mask.len()).map(|_| rng.gen::<f64>()).collect();
            let lo = heat.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: Vec<f64> = heat.iter().map(|v| (v - lo) / (hi - lo)).collect();
            sum += iou(&threshold(&norm, tau), &mask)?;
        }
        total += sum / by_pair.len() as f64;
    }
    Ok(total / trials as f64)
}

/// Mean fraction of image pixels covered by a paired object occurrence.
pub fn mean_object_area(corpus: &Corpus, pairs: &WordObjectPairSet) -> f64 {
    let (occ, _) = find_occurrences(corpus, pairs);
    if occ.is_empty() {
        return 0.0;
    }
    occ.iter()
        .map(|o| {
            let m = &corpus.samples[o.sample].mask.data;
            m.iter().filter(|&&l| l == o.label).count() as f64 / m.len() as f64
        })
        .sum::<f64>()
        / occ.len() as f64
}

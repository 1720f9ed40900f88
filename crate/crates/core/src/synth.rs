//! Deterministic synthetic paired corpus with full ground truth.
//!
//! Each class is a colored shape in the image and a two-tone chord "word" in
//! the caption. Images hold 1 to 3 non-touching objects of distinct classes on
//! a noisy background; captions speak the present classes in shuffled order,
//! each word 0.5 s long with 0.2 s of silence before, between and after.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_centers, write_wav, Waveform};
use crate::data::{write_label_names, write_manifest, ManifestEntry, WordAlignment, LABELS_FILE};
use crate::error::{io_err, Error, Result};
use crate::eval::WordObjectPairSet;
use crate::image::{write_ppm, RgbImage};
use crate::mmtf;
use crate::par::Exec;
use crate::tensor::LabelTensor;

pub const TAXONOMY_FILE: &str = "taxonomy.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const VAL_MANIFEST: &str = "val.jsonl";
pub const TAXONOMY_ROOT: &str = "object";
/// Largest accepted pairwise normalized cross-correlation of two signatures.
pub const MAX_SIGNATURE_XCORR: f64 = 0.3;

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 190, 40]),
    ("blue", [30, 60, 220]),
    ("yellow", [235, 220, 30]),
    ("magenta", [210, 40, 200]),
    ("cyan", [30, 210, 220]),
    ("orange", [245, 140, 20]),
    ("black", [15, 15, 15]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub color: [u8; 3],
    pub shape: Shape,
    /// Tone frequencies (Hz) of the class signature.
    pub tones: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side (square) or diameter (circle) range in pixels.
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Minimum background gap between objects in pixels.
    pub min_separation: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub word_duration: f64,
    pub gap: f64,
    pub tone_amplitude: f64,
    pub amplitude_jitter: f64,
    pub audio_noise: f64,
    pub pixel_noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 14,
            max_object_size: 22,
            min_separation: 8,
            train: 2000,
            val: 200,
            seed: 0,
            sample_rate: 16000,
            word_duration: 0.5,
            gap: 0.2,
            tone_amplitude: 0.25,
            amplitude_jitter: 0.1,
            audio_noise: 0.002,
            pixel_noise: 12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 || self.classes > 2 * PALETTE.len() {
            return bad(format!("class count must lie in 2..={}, got {}", 2 * PALETTE.len(), self.classes));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.classes {
            return bad(format!(
                "object range {}..={} must be non-empty, positive and at most the class count",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_object_size < 2 || self.min_object_size > self.max_object_size || self.max_object_size > self.image_size {
            return bad("object size range does not fit the image".into());
        }
        if self.sample_rate == 0 || !(self.word_duration > 0.0) || !(self.gap >= 0.0) {
            return bad("invalid audio timing".into());
        }
        Ok(())
    }

    /// Class table: consecutive classes share a color and alternate shapes;
    /// tones come from two disjoint sets of mel band centers.
    pub fn class_table(&self) -> Vec<ClassSpec> {
        let k = self.classes;
        let centers = mel_centers(self.sample_rate);
        // 2k distinct bands spread over 3..=37
        let band = |i: usize| 3 + i * 34 / (2 * k - 1);
        (0..k)
            .map(|i| {
                let (cname, color) = PALETTE[i / 2];
                let shape = if i % 2 == 0 { Shape::Square } else { Shape::Circle };
                ClassSpec {
                    name: format!("{cname}_{}", shape.name()),
                    color,
                    shape,
                    tones: [centers[band(i)], centers[band(i + k)]],
                }
            })
            .collect()
    }
}

/// One generated pair.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: LabelTensor,
    /// Class indices of the placed objects.
    pub objects: Vec<usize>,
    pub audio: Waveform,
    pub alignments: Vec<WordAlignment>,
}

fn paint(shape: Shape, size: usize, dy: usize, dx: usize) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = size as f64 / 2.0;
            let (y, x) = (dy as f64 + 0.5 - r, dx as f64 + 0.5 - r);
            y * y + x * x <= r * r
        }
    }
}

/// Draws an image with the given classes' objects; classes that cannot be
/// placed after 100 attempts are dropped.
pub fn gen_image<R: Rng>(rng: &mut R, cfg: &SynthConfig, table: &[ClassSpec], classes: &[usize]) -> (RgbImage, LabelTensor, Vec<usize>) {
    let s = cfg.image_size;
    let noise = cfg.pixel_noise as i32;
    let mut data = Vec::with_capacity(s * s * 3);
    for _ in 0..s * s {
        let base = 128 + rng.gen_range(-noise..=noise);
        for _ in 0..3 {
            data.push((base + rng.gen_range(-noise / 2..=noise / 2)).clamp(0, 255) as u8);
        }
    }
    let mut img = RgbImage::new(s, s, data).expect("image buffer");
    let mut labels = vec![0u16; s * s];
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    let mut placed = Vec::new();
    let gap = cfg.min_separation;
    for &c in classes {
        let mut ok = None;
        for _ in 0..100 {
            let size = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let y = rng.gen_range(0..=s - size);
            let x = rng.gen_range(0..=s - size);
            let clear = boxes.iter().all(|&(by, bx, bs)| {
                y >= by + bs + gap || by >= y + size + gap || x >= bx + bs + gap || bx >= x + size + gap
            });
            if clear {
                ok = Some((y, x, size));
                break;
            }
        }
        let Some((y, x, size)) = ok else {
            log::info!("could not place class {c} after 100 attempts, dropping it");
            continue;
        };
        let spec = &table[c];
        for dy in 0..size {
            for dx in 0..size {
                if paint(spec.shape, size, dy, dx) {
                    let mut j = |v: u8| (v as i32 + rng.gen_range(-noise / 2..=noise / 2)).clamp(0, 255) as u8;
                    img.set_pixel(x + dx, y + dy, [j(spec.color[0]), j(spec.color[1]), j(spec.color[2])]);
                    labels[(y + dy) * s + x + dx] = c as u16 + 1;
                }
            }
        }
        boxes.push((y, x, size));
        placed.push(c);
    }
    (img, LabelTensor::new(vec![s, s], labels).expect("label map"), placed)
}

/// Unit-peak chord of one class, with 20 ms raised-cosine edges.
pub fn signature(spec: &ClassSpec, cfg: &SynthConfig) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let n = (cfg.word_duration * sr).round() as usize;
    let ramp = ((0.02 * sr) as usize).max(1).min(n / 2);
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = if i < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
            } else if i >= n - ramp {
                0.5 - 0.5 * (std::f64::consts::PI * (n - 1 - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let tone: f64 = spec.tones.iter().map(|f| (2.0 * std::f64::consts::PI * f * t).sin()).sum();
            env * tone / 2.0
        })
        .collect()
}

/// Words of the given classes in shuffled order with silence gaps.
pub fn gen_audio_caption<R: Rng>(rng: &mut R, cfg: &SynthConfig, table: &[ClassSpec], classes: &[usize]) -> Result<(Waveform, Vec<WordAlignment>)> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("a caption needs at least one class".into()));
    }
    let mut order = classes.to_vec();
    order.shuffle(rng);
    let sr = cfg.sample_rate as f64;
    let gap = (cfg.gap * sr).round() as usize;
    let word = (cfg.word_duration * sr).round() as usize;
    let total = word * order.len() + gap * (order.len() + 1);
    let mut samples: Vec<f64> = (0..total).map(|_| cfg.audio_noise * rng.gen_range(-1.0..1.0)).collect();
    let mut alignments = Vec::with_capacity(order.len());
    for (i, &c) in order.iter().enumerate() {
        let start = gap + i * (word + gap);
        let amp = cfg.tone_amplitude * (1.0 + cfg.amplitude_jitter * rng.gen_range(-1.0..1.0));
        for (j, v) in signature(&table[c], cfg).into_iter().enumerate() {
            samples[start + j] += amp * v;
        }
        alignments.push(WordAlignment {
            word: table[c].name.clone(),
            t1: start as f64 / sr,
            t2: (start + word) as f64 / sr,
        });
    }
    Ok((Waveform::new(samples, cfg.sample_rate)?, alignments))
}

/// Generator stream of sample `index` (train ids first, then validation).
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn gen_sample(cfg: &SynthConfig, table: &[ClassSpec], index: usize, id: String) -> Result<SynthSample> {
    let mut rng = sample_rng(cfg.seed, index);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut all: Vec<usize> = (0..cfg.classes).collect();
    all.shuffle(&mut rng);
    let (image, mask, objects) = gen_image(&mut rng, cfg, table, &all[..n]);
    let (audio, alignments) = gen_audio_caption(&mut rng, cfg, table, &objects)?;
    Ok(SynthSample {
        id,
        image,
        mask,
        objects,
        audio,
        alignments,
    })
}

/// Maximum over lags of `|xcorr(a, b)| / (‖a‖·‖b‖)`.
pub fn max_normalized_xcorr(a: &[f64], b: &[f64]) -> f64 {
    let n = (a.len() + b.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| -> Vec<Complex<f64>> { (0..n).map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0)).collect() };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let mut prod: Vec<Complex<f64>> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    inv.process(&mut prod);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    prod.iter().map(|c| c.re.abs() / n as f64).fold(0.0, f64::max) / (na * nb)
}

/// Fails when two class signatures correlate at or above the separability bound.
pub fn check_signatures(cfg: &SynthConfig, table: &[ClassSpec]) -> Result<f64> {
    let sigs: Vec<Vec<f64>> = table.iter().map(|c| signature(c, cfg)).collect();
    let mut worst: f64 = 0.0;
    for i in 0..sigs.len() {
        for j in i + 1..sigs.len() {
            let x = max_normalized_xcorr(&sigs[i], &sigs[j]);
            if x >= MAX_SIGNATURE_XCORR {
                return Err(Error::InvalidArgument(format!(
                    "signatures of {} and {} are not separable (cross-correlation {x:.3})",
                    table[i].name, table[j].name
                )));
            }
            worst = worst.max(x);
        }
    }
    Ok(worst)
}

/// `object → shape → class` tree over the class names.
pub fn taxonomy_text(table: &[ClassSpec]) -> String {
    let mut out = String::new();
    for shape in [Shape::Square, Shape::Circle] {
        if table.iter().any(|c| c.shape == shape) {
            out.push_str(&format!("{TAXONOMY_ROOT}\t{}\n", shape.name()));
        }
    }
    for c in table {
        out.push_str(&format!("{}\t{}\n", c.shape.name(), c.name));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub labels: PathBuf,
    pub taxonomy: PathBuf,
    pub pairs: PathBuf,
}

/// Writes images, captions, masks, manifests, label names, taxonomy and the
/// identity word-object pair set under `out`.
pub fn gen_corpus(cfg: &SynthConfig, out: impl AsRef<Path>, exec: Exec) -> Result<CorpusPaths> {
    cfg.validate()?;
    let out = out.as_ref();
    let table = cfg.class_table();
    let worst = check_signatures(cfg, &table)?;
    log::debug!("worst signature cross-correlation {worst:.4}");
    for sub in ["images", "audio", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let total = cfg.train + cfg.val;
    let entries = exec.try_map_range(total, |i| -> Result<ManifestEntry> {
        let id = if i < cfg.train {
            format!("train-{i:05}")
        } else {
            format!("val-{:05}", i - cfg.train)
        };
        let s = gen_sample(cfg, &table, i, id.clone())?;
        let image = PathBuf::from("images").join(format!("{id}.ppm"));
        let audio = PathBuf::from("audio").join(format!("{id}.wav"));
        let mask = PathBuf::from("masks").join(format!("{id}.mmtf"));
        write_ppm(out.join(&image), &s.image)?;
        write_wav(out.join(&audio), &s.audio)?;
        mmtf::labels_write(out.join(&mask), &s.mask)?;
        Ok(ManifestEntry {
            id,
            image,
            audio,
            mask,
            alignments: s.alignments,
            spectrogram: None,
        })
    })?;
    let paths = CorpusPaths {
        train: out.join(TRAIN_MANIFEST),
        val: out.join(VAL_MANIFEST),
        labels: out.join(LABELS_FILE),
        taxonomy: out.join(TAXONOMY_FILE),
        pairs: out.join(PAIRS_FILE),
    };
    write_manifest(&paths.train, &entries[..cfg.train])?;
    write_manifest(&paths.val, &entries[cfg.train..])?;
    let names: Vec<String> = table.iter().map(|c| c.name.clone()).collect();
    write_label_names(&paths.labels, &names)?;
    fs::write(&paths.taxonomy, taxonomy_text(&table)).map_err(io_err(&paths.taxonomy))?;
    let mut all = vec![crate::data::BACKGROUND.to_string()];
    all.extend(names);
    fs::write(&paths.pairs, WordObjectPairSet::identity(&all).to_text()).map_err(io_err(&paths.pairs))?;
    let cfg_path = out.join("synth_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(io_err(&cfg_path))?;
    Ok(paths)
}

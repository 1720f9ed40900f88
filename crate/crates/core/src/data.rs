//! Corpus manifests and in-memory datasets.
//!
//! A manifest is JSON lines, one object per pair:
//! `{"id", "image", "audio", "mask", "alignments": [{"word", "t1", "t2"}]}`
//! with paths relative to the manifest's directory. Featurized manifests add a
//! `"spectrogram"` field pointing at an MMTF `T × 40` tensor. Mask label names
//! live in `labels.txt` beside the manifest (line `k` names label `k`, label 0
//! is unlabeled background).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{logmel, read_wav, Spectrogram};
use crate::error::{io_err, Error, Result};
use crate::image::{read_ppm, RgbImage};
use crate::mmtf;
use crate::par::Exec;
use crate::tensor::LabelTensor;

pub const LABELS_FILE: &str = "labels.txt";
pub const BACKGROUND: &str = "background";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub word: String,
    pub t1: f64,
    pub t2: f64,
}

impl WordAlignment {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 >= 0.0 && self.t1 < self.t2) {
            return Err(Error::InvalidArgument(format!(
                "alignment `{}` has invalid interval [{}, {}]",
                self.word, self.t1, self.t2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub audio: PathBuf,
    pub mask: PathBuf,
    pub alignments: Vec<WordAlignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram: Option<PathBuf>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path.as_ref(), out).map_err(io_err(path.as_ref()))
}

/// Label names indexed by label value; index 0 is the background.
pub fn read_label_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut names = vec![BACKGROUND.to_string()];
    names.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    Ok(names)
}

pub fn write_label_names(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(path.as_ref(), text).map_err(io_err(path.as_ref()))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub spec: Spectrogram,
    pub mask: LabelTensor,
    pub alignments: Vec<WordAlignment>,
}

impl Sample {
    pub fn duration(&self) -> f64 {
        self.spec.num_frames() as f64 * crate::audio::FRAME_SHIFT_S
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub label_names: Vec<String>,
}

impl Corpus {
    /// Loads every manifest entry; captions without a stored spectrogram are
    /// featurized on the fly.
    pub fn load(manifest: impl AsRef<Path>, exec: Exec) -> Result<Self> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let entries = read_manifest(manifest)?;
        let label_names = read_label_names(dir.join(LABELS_FILE))?;
        let samples = exec.try_map_range(entries.len(), |i| load_sample(&dir, &entries[i]))?;
        for s in &samples {
            if let Some(&bad) = s.mask.data.iter().find(|&&l| l as usize >= label_names.len()) {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: mask label {bad} has no name in {LABELS_FILE}",
                    s.id
                )));
            }
        }
        Ok(Self { samples, label_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_of(&self, name: &str) -> Option<u16> {
        self.label_names.iter().position(|n| n == name).map(|i| i as u16)
    }

    pub fn subset(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            label_names: self.label_names.clone(),
        }
    }
}

pub fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn load_sample(dir: &Path, e: &ManifestEntry) -> Result<Sample> {
    for a in &e.alignments {
        a.validate()?;
    }
    let image = read_ppm(resolve(dir, &e.image))?;
    let spec = match &e.spectrogram {
        Some(p) => Spectrogram::new(mmtf::tensor_read(resolve(dir, p))?)?,
        None => logmel(&read_wav(resolve(dir, &e.audio))?)?,
    };
    let mask = mmtf::labels_read(resolve(dir, &e.mask))?;
    if mask.shape != [image.height, image.width] {
        return Err(Error::Shape {
            op: "load_sample mask",
            lhs: mask.shape.clone(),
            rhs: vec![image.height, image.width],
        });
    }
    Ok(Sample {
        id: e.id.clone(),
        image,
        spec,
        mask,
        alignments: e.alignments.clone(),
    })
}
